//! Panel persistence: a columnar binary format for reuse across runs and a
//! CSV export of selected paths for inspection.
//!
//! Binary layout (all integers and floats little-endian):
//! magic `SCPANEL1`, then `seed: u64`, `paths: u64`, `steps: u64`,
//! `drivers: u64`, `field_count: u64`, `field_count` NUL-padded 16-byte
//! field names, then the fields in declared order as f64 columns.

use std::io::{Read, Write};

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::scalar::Real;

use super::{build_time_grid, ScenarioPanel};

const MAGIC: &[u8; 8] = b"SCPANEL1";
const FIELDS: [&str; 8] = [
    "nodes", "spot", "short_rate", "bank", "dw", "tau_a", "tau_b", "tau",
];

fn write_f64s<W: Write>(w: &mut W, xs: impl Iterator<Item = f64>) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl<T: Real> ScenarioPanel<T> {
    /// Serializes the panel. Regenerating a panel from the same inputs and
    /// writing it again produces byte-identical output.
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            self.seed,
            self.paths as u64,
            self.grid.steps() as u64,
            self.driver_count() as u64,
            FIELDS.len() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for name in FIELDS {
            let mut padded = [0u8; 16];
            padded[..name.len()].copy_from_slice(name.as_bytes());
            w.write_all(&padded)?;
        }
        write_f64s(w, self.grid.nodes().iter().map(|x| x.to_f64_lossy()))?;
        for a in [&self.spot, &self.short_rate, &self.bank_account] {
            write_f64s(w, a.iter().map(|x| x.to_f64_lossy()))?;
        }
        write_f64s(w, self.dw.iter().map(|x| x.to_f64_lossy()))?;
        for v in [&self.tau_a, &self.tau_b, &self.tau] {
            write_f64s(w, v.iter().map(|x| x.to_f64_lossy()))?;
        }
        Ok(())
    }

    /// Reads a panel written by [`ScenarioPanel::write_binary`].
    pub fn read_binary<R: Read>(r: &mut R) -> Result<ScenarioPanel<T>> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CoreError::Format("bad panel magic".into()));
        }
        let seed = read_u64(r)?;
        let paths = read_u64(r)? as usize;
        let steps = read_u64(r)? as usize;
        let drivers = read_u64(r)? as usize;
        let field_count = read_u64(r)? as usize;
        if field_count != FIELDS.len() {
            return Err(CoreError::Format(format!(
                "expected {} fields, found {field_count}",
                FIELDS.len()
            )));
        }
        for name in FIELDS {
            let mut padded = [0u8; 16];
            r.read_exact(&mut padded)?;
            let found = padded.split(|&b| b == 0).next().unwrap_or_default();
            if found != name.as_bytes() {
                return Err(CoreError::Format(format!(
                    "unexpected field {:?}, wanted {name}",
                    String::from_utf8_lossy(found)
                )));
            }
        }

        let nodes = steps + 1;
        let node_times = read_f64s(r, nodes)?;
        let maturity = *node_times.last().ok_or_else(|| {
            CoreError::Format("panel with empty grid".into())
        })?;
        let grid = build_time_grid(T::of(maturity), steps)?;

        let conv = |xs: Vec<f64>| -> Vec<T> { xs.into_iter().map(T::of).collect() };
        let spot = conv(read_f64s(r, paths * nodes)?);
        let rate = conv(read_f64s(r, paths * nodes)?);
        let bank = conv(read_f64s(r, paths * nodes)?);
        let dw = conv(read_f64s(r, paths * steps * drivers)?);
        let tau_a = conv(read_f64s(r, paths)?);
        let tau_b = conv(read_f64s(r, paths)?);
        let _tau = read_f64s(r, paths)?;

        ScenarioPanel::from_parts(
            grid,
            seed,
            Array2::from_shape_vec((paths, nodes), spot)
                .map_err(|e| CoreError::Format(e.to_string()))?,
            Array2::from_shape_vec((paths, nodes), rate)
                .map_err(|e| CoreError::Format(e.to_string()))?,
            Array2::from_shape_vec((paths, nodes), bank)
                .map_err(|e| CoreError::Format(e.to_string()))?,
            tau_a,
            tau_b,
            Array3::from_shape_vec((paths, steps, drivers), dw)
                .map_err(|e| CoreError::Format(e.to_string()))?,
        )
    }

    /// Writes a CSV of the selected paths, one row per (path, node).
    pub fn write_csv<W: Write>(&self, w: &mut W, paths: &[usize]) -> Result<()> {
        writeln!(
            w,
            "path,node,time,spot,short_rate,bank_account,survival_a,survival_b,tau_a,tau_b"
        )?;
        for &p in paths {
            if p >= self.paths {
                return Err(CoreError::invalid(format!(
                    "path {p} out of range (panel has {})",
                    self.paths
                )));
            }
            for k in 0..=self.grid.steps() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{}",
                    p,
                    k,
                    self.grid.node(k).to_f64_lossy(),
                    self.spot[[p, k]].to_f64_lossy(),
                    self.short_rate[[p, k]].to_f64_lossy(),
                    self.bank_account[[p, k]].to_f64_lossy(),
                    self.survival_a[[p, k]],
                    self.survival_b[[p, k]],
                    self.tau_a[p].to_f64_lossy(),
                    self.tau_b[p].to_f64_lossy(),
                )?;
            }
        }
        Ok(())
    }
}
