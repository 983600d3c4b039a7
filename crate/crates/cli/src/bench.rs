use std::fs::File;
use std::io::{self, Write};
use std::time::Instant;

use flashsvd_core::encoder::run_model;
use flashsvd_core::planner::{flops_exact, io_bytes_for};
use flashsvd_core::synth::{randn, random_factored_layer};
use flashsvd_core::{ExecMode, Geometry, MemoryMeter, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

/// One CSV row; field order is the column order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub b: usize,
    pub m: usize,
    pub h: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub rank: usize,
    pub mode: String,
    pub peak_transient_bytes: u64,
    pub persistent_bytes: u64,
    pub flops_exact: u64,
    pub io_bytes_in: u64,
    pub wall_ms: f64,
    pub max_abs_err_vs_dense: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Rows for one grid point. Weights and inputs depend only on the seed and
/// the geometry, so every numeric column except `wall_ms` is reproducible.
pub fn bench_point(s: &Settings, g: &Geometry) -> CliResult<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let layers = (0..g.layers)
        .map(|_| random_factored_layer(&mut rng, s.head_mode(), g.d_model, g.d_ff, g.heads, g.rank))
        .collect::<Result<Vec<_>, _>>()?;
    let x: Tensor<f32> = randn(&mut rng, vec![g.batch, g.seq_len, g.d_model], 1.0);
    let reference = run_model(&x, &layers, ExecMode::Dense, &s.plan, &MemoryMeter::new())?;
    let mut rows = Vec::new();
    for &mode in &s.modes {
        let mut times = Vec::new();
        let mut first = None;
        for _ in 0..s.reps.max(1) {
            let meter = MemoryMeter::new();
            let t = Instant::now();
            let y = run_model(&x, &layers, mode, &s.plan, &meter)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            first.get_or_insert((y, meter.snapshot()));
        }
        let (y, snap) = first.expect("at least one repetition");
        let planned = flops_exact(g, mode, &s.plan);
        if snap.flops != planned {
            return Err(CliError::Verify(format!(
                "{mode} at {g:?}: kernels recorded {} flops, planner counts {planned}",
                snap.flops
            )));
        }
        rows.push(BenchRow {
            b: g.batch,
            m: g.seq_len,
            h: g.heads,
            d_model: g.d_model,
            d_ff: g.d_ff,
            rank: g.rank,
            mode: mode.id().to_string(),
            peak_transient_bytes: snap.peak_transient_bytes,
            persistent_bytes: snap.peak_persistent_bytes,
            flops_exact: planned,
            io_bytes_in: io_bytes_for(g, mode).bytes_in * g.layers as u64,
            wall_ms: (median(times) * 1e3).round() / 1e3,
            max_abs_err_vs_dense: y.max_abs_diff(&reference)?,
        });
    }
    Ok(rows)
}

pub fn run(s: &Settings) -> CliResult<()> {
    s.check_factorable()?;
    let sink: Box<dyn Write> = match &s.out {
        Some(p) => Box::new(File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for g in s.geometries() {
        for row in bench_point(s, &g)? {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
