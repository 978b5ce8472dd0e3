//! Report emission: the result JSON, per-node CSV tables and the plot-data
//! file. All contents are rendered into buffers before anything touches
//! the filesystem, so an unwritable directory loses no computation.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use switchcsa_core::market::ScenarioPanel;

use crate::pipeline::Artifacts;
use crate::{EngineError, RunConfig};

fn column_mean(values: &Array2<f64>, k: usize) -> f64 {
    let n = values.nrows();
    values.column(k).iter().sum::<f64>() / n as f64
}

fn prices_csv(artifacts: &Artifacts, panel: &ScenarioPanel<f64>) -> String {
    let mut out = String::from("node,time,clean_mean,regime_z_mean,regime_zeta_mean,alive\n");
    let clean = &artifacts.clean.as_ref().unwrap().values;
    let yz = &artifacts.solution_z.as_ref().unwrap().y;
    let yzeta = &artifacts.solution_zeta.as_ref().unwrap().y;
    for k in 0..clean.ncols() {
        let alive = (0..panel.paths()).filter(|&p| panel.is_alive(p, k)).count();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            k,
            panel.grid().node(k),
            column_mean(clean, k),
            column_mean(yz, k),
            column_mean(yzeta, k),
            alive,
        ));
    }
    out
}

fn collateral_csv(artifacts: &Artifacts, panel: &ScenarioPanel<f64>) -> String {
    let mut out =
        String::from("node,time,standard_mean,perfect_mean,contingent_mean\n");
    let standard = artifacts.standard_collateral.as_ref().unwrap();
    let perfect = artifacts.perfect_collateral.as_ref().unwrap();
    let contingent = artifacts.contingent_collateral.as_ref().unwrap();
    for k in 0..standard.ncols() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            k,
            panel.grid().node(k),
            column_mean(standard, k),
            column_mean(perfect, k),
            column_mean(contingent, k),
        ));
    }
    out
}

fn bcva_csv(artifacts: &Artifacts, panel: &ScenarioPanel<f64>) -> String {
    let mut out = String::from("node,time,bcva_mean,contingent_mean\n");
    let raw = &artifacts.bcva_surface.as_ref().unwrap().values;
    let contingent = artifacts.contingent_bcva.as_ref().unwrap();
    for k in 0..raw.ncols() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            k,
            panel.grid().node(k),
            column_mean(raw, k),
            column_mean(contingent, k),
        ));
    }
    out
}

fn switch_frequency_csv(artifacts: &Artifacts, panel: &ScenarioPanel<f64>) -> String {
    let result = artifacts.result.as_ref().unwrap();
    let paths = panel.paths() as f64;
    let mut out = String::from("node,time,switch_count,switch_frequency\n");
    for (k, count) in result.switch_stats.node_histogram.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            k,
            panel.grid().node(k),
            count,
            *count as f64 / paths,
        ));
    }
    out
}

fn plot_data_csv(artifacts: &Artifacts, panel: &ScenarioPanel<f64>) -> String {
    let result = artifacts.result.as_ref().unwrap();
    let yz = &artifacts.solution_z.as_ref().unwrap().y;
    let yzeta = &artifacts.solution_zeta.as_ref().unwrap().y;
    let paths = panel.paths() as f64;
    let mut out = String::from("node,time,regime_z_mean,regime_zeta_mean,switch_intensity\n");
    for k in 0..yz.ncols() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            k,
            panel.grid().node(k),
            column_mean(yz, k),
            column_mean(yzeta, k),
            result.switch_stats.node_histogram[k] as f64 / paths,
        ));
    }
    out
}

/// Renders and writes all reports for the completed artifacts; returns the
/// written paths. Partial artifact sets write whatever is available.
pub fn emit_reports(
    artifacts: &Artifacts,
    config: &RunConfig,
    out_dir: &Path,
    emit_plots: bool,
) -> Result<Vec<PathBuf>, EngineError> {
    let mut files: Vec<(&str, String)> = Vec::new();
    if let Some(result) = &artifacts.result {
        files.push(("result.json", result.to_json()));
    }
    if let Some(panel) = &artifacts.panel {
        if artifacts.clean.is_some()
            && artifacts.solution_z.is_some()
            && artifacts.solution_zeta.is_some()
        {
            files.push(("prices.csv", prices_csv(artifacts, panel)));
        }
        if artifacts.standard_collateral.is_some()
            && artifacts.contingent_collateral.is_some()
        {
            files.push(("collateral.csv", collateral_csv(artifacts, panel)));
        }
        if artifacts.bcva_surface.is_some() && artifacts.contingent_bcva.is_some() {
            files.push(("bcva.csv", bcva_csv(artifacts, panel)));
        }
        if artifacts.result.is_some() {
            files.push(("switch_frequency.csv", switch_frequency_csv(artifacts, panel)));
            if emit_plots {
                files.push(("plot_data.csv", plot_data_csv(artifacts, panel)));
            }
        }
        if let (Some(sz), Some(szeta)) =
            (&artifacts.solution_z, &artifacts.solution_zeta)
        {
            let diag = format!(
                "{{\n  \"regime_z\": {},\n  \"regime_zeta\": {}\n}}\n",
                sz.diagnostics.to_json(),
                szeta.diagnostics.to_json()
            );
            files.push(("solver_diagnostics.json", diag));
        }
        if let Some(hedge) = &artifacts.hedge {
            let mut buf = Vec::new();
            hedge
                .write_phi_csv(&mut buf)
                .map_err(EngineError::stage("report"))?;
            files.push((
                "hedge_positions.csv",
                String::from_utf8(buf).expect("csv utf8"),
            ));
            let self_check = serde_json::to_string_pretty(
                artifacts.self_financing.as_ref().unwrap(),
            )
            .expect("check serialize");
            files.push(("self_financing.json", self_check + "\n"));
        }
    }
    let _ = config;

    // All buffers rendered; only now touch the filesystem.
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(files.len());
    for (name, contents) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, contents)?;
        written.push(path);
    }
    Ok(written)
}
