use std::path::{Path, PathBuf};

use flashsvd_core::encoder::{AttentionWeights, FfnWeights};
use flashsvd_core::factorizer::{param_count, param_threshold, HeadMode};
use flashsvd_core::format::{load_model, save_config, save_model, sidecar_path, ModelConfig};
use flashsvd_core::geometry::rational_to_f64;
use flashsvd_core::synth::{factorize_model, synth_dense_model, SynthSpec};
use flashsvd_core::{EncoderLayer, Tensor};

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

pub const DEFAULT_OUT: &str = "model.fsvd";

/// Whether q/k/v factors at `rank` hold fewer parameters than the dense
/// projections.
pub fn compresses(mode: HeadMode, d_model: usize, heads: usize, rank: usize) -> bool {
    param_count(mode, d_model, heads, rank) < (d_model * d_model) as u64
}

fn rel_err(dense: &Tensor<f32>, approx: &Tensor<f32>) -> f64 {
    let diff: f64 = dense
        .data()
        .iter()
        .zip(approx.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    diff.sqrt() / dense.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// Weight parameters (biases excluded) of one layer.
fn weight_params(layer: &EncoderLayer<f32>) -> u64 {
    let attn = match &layer.attention {
        AttentionWeights::Dense(a) => 4 * (a.d_model() * a.d_model()) as u64,
        AttentionWeights::Factored(s) => s.param_count_qkv() + s.output().param_count(),
    };
    let ffn = match &layer.ffn {
        FfnWeights::Dense(f) => (f.w_in.len() + f.w_out.len()) as u64,
        FfnWeights::Factored(f) => f.up().param_count() + f.down().param_count(),
    };
    attn + ffn
}

fn load_dense(path: &Path) -> CliResult<Vec<EncoderLayer<f32>>> {
    let layers = load_model(path)?;
    if layers.is_empty() {
        return Err(CliError::Config(format!("{} holds no layers", path.display())));
    }
    if layers.iter().any(|l| l.is_factored()) {
        return Err(CliError::Config(format!("{} is already factorized", path.display())));
    }
    Ok(layers)
}

pub fn run(s: &Settings, input: Option<&Path>) -> CliResult<()> {
    let rank = match s.ranks.as_slice() {
        [r] => *r,
        _ => return Err(CliError::Config("compress takes a single --rank".into())),
    };
    let dense = match input {
        Some(p) => load_dense(p)?,
        None => {
            s.check_factorable()?;
            synth_dense_model(s.seed, SynthSpec::new(s.layers, s.d_model, s.d_ff, s.heads))?
        }
    };
    let (d, f, h) = (dense[0].d_model(), dense[0].d_ff(), dense[0].heads());
    // A file brings its own head count; per-head stays per-head unless other groups were asked for.
    let groups = if input.is_some() && s.groups == s.heads {
        h
    } else {
        s.groups
    };
    let mode = HeadMode::from_groups(groups, h);
    mode.validate(d, h)?;
    let factored = factorize_model(&dense, mode, rank)?;

    let out = s.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    save_model(&out, &factored)?;
    let cfg = ModelConfig {
        layers: factored.len(),
        d_model: d,
        d_ff: f,
        heads: h,
        groups: mode.units(h),
        rank,
        mode: s.single_mode()?,
        plan: s.plan,
        seed: s.seed,
        ..ModelConfig::default()
    };
    save_config(sidecar_path(&out), &cfg)?;

    println!(
        "model: {} layers, d_model {d}, d_ff {f}, heads {h}, groups {}, rank {rank}",
        factored.len(),
        mode.units(h)
    );
    println!("layer  q_err     k_err     v_err     o_err     ffn_in    ffn_out   params_dense  params_factored");
    let (mut pd, mut pf) = (0u64, 0u64);
    for (i, (a, b)) in dense.iter().zip(&factored).enumerate() {
        let recon = b.to_dense();
        let (AttentionWeights::Dense(x), AttentionWeights::Dense(y), FfnWeights::Dense(fx), FfnWeights::Dense(fy)) =
            (&a.attention, &recon.attention, &a.ffn, &recon.ffn)
        else {
            unreachable!("dense input and reconstruction");
        };
        let errs = [
            rel_err(&x.wq, &y.wq),
            rel_err(&x.wk, &y.wk),
            rel_err(&x.wv, &y.wv),
            rel_err(&x.wo, &y.wo),
            rel_err(&fx.w_in, &fy.w_in),
            rel_err(&fx.w_out, &fy.w_out),
        ];
        let (wd, wf) = (weight_params(a), weight_params(b));
        pd += wd;
        pf += wf;
        let cols: Vec<String> = errs.iter().map(|e| format!("{e:<9.3e}")).collect();
        println!("{i:<6} {} {wd:<13} {wf}", cols.join(" "));
    }
    let threshold = param_threshold(mode, d, h);
    println!("param ratio (factored / dense): {:.4}", pf as f64 / pd as f64);
    println!(
        "q/k/v param threshold: {threshold} = {:.2}",
        rational_to_f64(&threshold)
    );
    println!(
        "compresses: {}",
        if compresses(mode, d, h, rank) { "yes" } else { "no" }
    );
    println!("wrote {} and {}", out.display(), sidecar_path(&out).display());
    Ok(())
}
