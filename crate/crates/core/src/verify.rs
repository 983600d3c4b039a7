//! Property suites: kernel equivalence, tiling invariance, meter exactness,
//! threshold crossover, per-rank deltas, analytics and file format.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    dense_attention_oracle, flash_attention_dense_qkv, flash_svd_attention, naive_lowrank_attention, project_factors,
};
use crate::encoder::{run_layer, ExecMode};
use crate::error::{Error, Result};
use crate::factorizer::{param_threshold, rank_loss_for_budget, DenseAttention, HeadMode};
use crate::ffn::{ffn_dense_oracle, ffn_naive_lowrank, ffn_v1, ffn_v2, DenseFfn};
use crate::format::{decode_model, encode_model};
use crate::geometry::{Geometry, Rational};
use crate::memtier::{expected_bytes, Formula, MemoryMeter, MeterSnapshot, TilePlan};
use crate::ops::Activation;
use crate::planner::{
    delta_memory_per_rank, io_bytes, layer_flops, memory_threshold, roofline_latency, speedup_formula, HardwareModel,
    RankModule,
};
use crate::svd::{svd, truncate_even_split};
use crate::synth::{
    randn, random_attention_factors, random_factored_layer, random_ffn_factors, synth_model, SynthSpec,
};
use crate::tensor::Tensor;

/// Max-abs tolerance for single kernels.
pub const KERNEL_TOL: f64 = 1e-4;
/// Max-abs tolerance for a composed layer.
pub const LAYER_TOL: f64 = 2e-4;

/// Closed-form byte counts the meter suite compares against.
pub type ExpectedFn = fn(Formula, &Geometry) -> u64;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Attn,
    Ffn,
    Layer,
    Tiling,
    Meter,
    Threshold,
    Deltas,
    Svd,
    Analytics,
    Format,
}

impl Suite {
    pub const ALL: [Suite; 10] = [
        Suite::Attn,
        Suite::Ffn,
        Suite::Layer,
        Suite::Tiling,
        Suite::Meter,
        Suite::Threshold,
        Suite::Deltas,
        Suite::Svd,
        Suite::Analytics,
        Suite::Format,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Suite::Attn => "attn",
            Suite::Ffn => "ffn",
            Suite::Layer => "layer",
            Suite::Tiling => "tiling",
            Suite::Meter => "meter",
            Suite::Threshold => "threshold",
            Suite::Deltas => "deltas",
            Suite::Svd => "svd",
            Suite::Analytics => "analytics",
            Suite::Format => "format",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.id() == s)
            .ok_or_else(|| Error::config(format!("unknown suite `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Randomized cases per equivalence check.
    pub cases: usize,
    pub expected: ExpectedFn,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            cases: 24,
            expected: expected_bytes,
        }
    }
}

pub fn run_suite(suite: Suite, cfg: &VerifyConfig) -> SuiteReport {
    let checks = match suite {
        Suite::Attn => vec![
            attention_equivalence(cfg.seed, cfg.cases),
            attention_weights_stochastic(cfg.seed),
        ],
        Suite::Ffn => vec![ffn_equivalence(cfg.seed, cfg.cases)],
        Suite::Layer => vec![layer_equivalence(cfg.seed, cfg.cases.div_ceil(4).max(1))],
        Suite::Tiling => vec![tiling_invariance(cfg.seed)],
        Suite::Meter => {
            let mut c = meter_exactness(&meter_grid(), cfg.expected);
            c.push(flops_agreement(cfg.seed));
            c
        }
        Suite::Threshold => vec![threshold_crossover(&crossover_grid())],
        Suite::Deltas => rank_deltas(&delta_grid()),
        Suite::Svd => vec![eckart_young(cfg.seed, 100)],
        Suite::Analytics => analytics_checks(),
        Suite::Format => vec![format_round_trip(cfg.seed)],
    };
    SuiteReport { suite, checks }
}

pub fn run_suites(suites: &[Suite], cfg: &VerifyConfig) -> Vec<SuiteReport> {
    suites.iter().map(|&s| run_suite(s, cfg)).collect()
}

fn tol_check(name: &str, worst: f64, tol: f64, cases: usize) -> Check {
    Check::new(
        name,
        worst <= tol,
        format!("max_abs {worst:.3e} (tol {tol:.0e}) over {cases} cases"),
    )
}

fn random_input(rng: &mut ChaCha8Rng, b: usize, m: usize, d: usize) -> Tensor<f32> {
    randn(rng, vec![b, m, d], 1.0)
}

fn random_dense_attention(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> DenseAttention<f32> {
    let s = 1.0 / (d as f64).sqrt();
    let mut w = || randn(rng, vec![d, d], s);
    let (wq, wk, wv, wo) = (w(), w(), w(), w());
    let mut b = || randn(rng, vec![d], 0.02).into_data();
    DenseAttention {
        heads,
        wq,
        wk,
        wv,
        wo,
        bq: b(),
        bk: b(),
        bv: b(),
        bo: b(),
    }
}

fn random_dense_ffn(rng: &mut ChaCha8Rng, d: usize, f: usize) -> DenseFfn<f32> {
    DenseFfn {
        w_in: randn(rng, vec![d, f], 1.0 / (d as f64).sqrt()),
        b_in: randn(rng, vec![f], 0.02).into_data(),
        w_out: randn(rng, vec![f, d], 1.0 / (f as f64).sqrt()),
        b_out: randn(rng, vec![d], 0.02).into_data(),
        activation: Activation::Gelu,
    }
}

/// Flash attention (f32) against the dense reference evaluated in f64 on the
/// reconstructed weights, over randomized shapes, head modes and tile plans.
pub fn attention_equivalence(seed: u64, cases: usize) -> Check {
    let name = "attention: flash vs dense oracle";
    Check::from_result(
        name,
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let b = *[1usize, 2, 4].choose(&mut rng).expect("nonempty");
                let m = *[16usize, 33, 64, 128].choose(&mut rng).expect("nonempty");
                let h = *[1usize, 4, 12].choose(&mut rng).expect("nonempty");
                let dh = *[8usize, 16, 32].choose(&mut rng).expect("nonempty");
                let d = h * dh;
                let mode = match rng.random_range(0..3) {
                    0 => HeadMode::MultiHead,
                    1 => HeadMode::SingleHead,
                    _ if h % 2 == 0 => HeadMode::Grouped(2),
                    _ => HeadMode::MultiHead,
                };
                let width = d / mode.units(h);
                let r = (*[4usize, 16, 64].choose(&mut rng).expect("nonempty")).min(width);
                let plan = TilePlan::new(
                    *[8usize, 16, 32].choose(&mut rng).expect("nonempty"),
                    *[4usize, 8, 16].choose(&mut rng).expect("nonempty"),
                    64,
                );
                let set = random_attention_factors(&mut rng, mode, d, h, r)?;
                let x = random_input(&mut rng, b, m, d);
                let meter = MemoryMeter::new();
                let got = {
                    let pf = project_factors(&x, &set, &meter)?;
                    flash_svd_attention(&pf, &set, &plan, &meter)?
                };
                let want =
                    dense_attention_oracle(&x.cast::<f64>(), &set.reconstruct().cast::<f64>(), &MemoryMeter::new())?;
                worst = worst.max(got.cast::<f64>().max_abs_diff(&want)?);
            }
            Ok(tol_check(name, worst, KERNEL_TOL, cases))
        })(),
    )
}

/// Rows of the reference attention weights sum to one.
pub fn attention_weights_stochastic(seed: u64) -> Check {
    let name = "attention: oracle weights row-stochastic";
    Check::from_result(
        name,
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let q = randn(&mut rng, vec![2, 40, 48], 2.0);
            let k = randn(&mut rng, vec![2, 40, 48], 2.0);
            let w = crate::attention::attention_weights(&q, &k, 4)?;
            let worst = w
                .data()
                .chunks_exact(40)
                .map(|row| (row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            Ok(tol_check(name, worst, 1e-6, 2 * 4 * 40))
        })(),
    )
}

/// `ffn_v1 ≡ ffn_v2 ≡ naive ≡ dense-on-reconstructed`, pairwise.
pub fn ffn_equivalence(seed: u64, cases: usize) -> Check {
    let name = "ffn: v1 = v2 = naive = dense";
    Check::from_result(
        name,
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let d = *[32usize, 64, 128].choose(&mut rng).expect("nonempty");
                let f = 4 * d;
                let r = rng.random_range(8..=d);
                let m = *[16usize, 33, 128].choose(&mut rng).expect("nonempty");
                let b = rng.random_range(1..=2);
                let plan = TilePlan::new(
                    *[8usize, 16, 32].choose(&mut rng).expect("nonempty"),
                    16,
                    *[16usize, 32, 64].choose(&mut rng).expect("nonempty"),
                );
                let act = *[Activation::Gelu, Activation::Relu, Activation::GeluTanh]
                    .choose(&mut rng)
                    .expect("nonempty");
                let ff = random_ffn_factors(&mut rng, d, f, r, act)?;
                let x = random_input(&mut rng, b, m, d);
                let outs = [
                    ffn_v1(&x, &ff, &plan, &MemoryMeter::new())?,
                    ffn_v2(&x, &ff, &plan, &MemoryMeter::new())?,
                    ffn_naive_lowrank(&x, &ff, &MemoryMeter::new())?,
                    ffn_dense_oracle(&x, &ff.reconstruct(), &MemoryMeter::new())?,
                ];
                for i in 0..outs.len() {
                    for j in i + 1..outs.len() {
                        worst = worst.max(outs[i].max_abs_diff(&outs[j])?);
                    }
                }
            }
            Ok(tol_check(name, worst, KERNEL_TOL, cases))
        })(),
    )
}

/// Full layer in every low-rank mode against dense mode on the
/// reconstructed weights.
pub fn layer_equivalence(seed: u64, cases: usize) -> Check {
    let name = "layer: low-rank modes vs dense";
    Check::from_result(
        name,
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
            let mut worst = 0.0f64;
            for _ in 0..cases {
                let h = *[2usize, 4].choose(&mut rng).expect("nonempty");
                let dh = *[8usize, 16].choose(&mut rng).expect("nonempty");
                let d = h * dh;
                let r = rng.random_range(2..=dh);
                let layer = random_factored_layer(&mut rng, HeadMode::MultiHead, d, 4 * d, h, r)?;
                let (b, m) = (rng.random_range(1..=2), rng.random_range(5..=40));
                let x = random_input(&mut rng, b, m, d);
                let plan = TilePlan::default();
                let want = run_layer(&x, &layer, ExecMode::Dense, &plan, &MemoryMeter::new())?;
                for mode in [ExecMode::NaiveLowRank, ExecMode::FlashV1, ExecMode::FlashV2] {
                    let got = run_layer(&x, &layer, mode, &plan, &MemoryMeter::new())?;
                    worst = worst.max(got.max_abs_diff(&want)?);
                }
            }
            Ok(tol_check(name, worst, LAYER_TOL, cases))
        })(),
    )
}

/// Every plan in `B_M ∈ {8,16,32,64} × B_R ∈ {4,8,16} × B_DF ∈ {16,32,64}`.
pub fn tile_plan_grid() -> Vec<TilePlan> {
    let mut plans = Vec::new();
    for bm in [8, 16, 32, 64] {
        for br in [4, 8, 16] {
            for bdf in [16, 32, 64] {
                plans.push(TilePlan::new(bm, br, bdf));
            }
        }
    }
    plans
}

/// Largest elementwise spread across a set of equally shaped outputs, which
/// equals the largest pairwise max-abs difference.
pub fn max_spread(outs: &[Tensor<f32>]) -> f64 {
    let n = outs[0].len();
    (0..n)
        .map(|i| {
            let (lo, hi) = outs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
                let v = t.data()[i] as f64;
                (lo.min(v), hi.max(v))
            });
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Attention, FFN V1 and FFN V2 outputs across the whole tile-plan grid.
pub fn tiling_invariance(seed: u64) -> Check {
    let name = "tiling: outputs independent of tile plan";
    Check::from_result(
        name,
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
            let (b, m, h, dh, r) = (2, 70, 4, 16, 13);
            let d = h * dh;
            let set = random_attention_factors(&mut rng, HeadMode::MultiHead, d, h, r)?;
            let ff = random_ffn_factors(&mut rng, d, 4 * d, 24, Activation::Gelu)?;
            let x = random_input(&mut rng, b, m, d);
            let plans = tile_plan_grid();
            let meter = MemoryMeter::new();
            let pf = project_factors(&x, &set, &meter)?;
            let mut attn = Vec::new();
            let mut v1 = Vec::new();
            let mut v2 = Vec::new();
            for plan in &plans {
                attn.push(flash_svd_attention(&pf, &set, plan, &meter)?);
                v1.push(ffn_v1(&x, &ff, plan, &meter)?);
                v2.push(ffn_v2(&x, &ff, plan, &meter)?);
            }
            let mut ffn_all = v1;
            ffn_all.extend(v2);
            let worst = max_spread(&attn).max(max_spread(&ffn_all));
            Ok(tol_check(name, worst, KERNEL_TOL, plans.len()))
        })(),
    )
}

/// Runs the kernel behind `formula` at geometry `g` on random weights and
/// returns the meter snapshot.
pub fn measure(formula: Formula, g: &Geometry, seed: u64) -> Result<MeterSnapshot> {
    g.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, m, d, f, h, r) = (g.batch, g.seq_len, g.d_model, g.d_ff, g.heads, g.rank);
    let x = random_input(&mut rng, b, m, d);
    let meter = MemoryMeter::new();
    let plan = TilePlan::default();
    match formula {
        Formula::DenseAttn => {
            dense_attention_oracle(&x, &random_dense_attention(&mut rng, d, h), &meter)?;
        }
        Formula::FlashAttnDenseQkv => {
            flash_attention_dense_qkv(&x, &random_dense_attention(&mut rng, d, h), &plan, &meter)?;
        }
        Formula::FlashSvdAttn | Formula::GroupedAttn => {
            let mode = if formula == Formula::FlashSvdAttn {
                HeadMode::MultiHead
            } else {
                HeadMode::from_groups(g.groups, h)
            };
            let set = random_attention_factors(&mut rng, mode, d, h, r)?;
            let pf = project_factors(&x, &set, &meter)?;
            flash_svd_attention(&pf, &set, &plan, &meter)?;
        }
        Formula::FfnDense => {
            ffn_dense_oracle(&x, &random_dense_ffn(&mut rng, d, f), &meter)?;
        }
        Formula::FfnNaiveLowRank | Formula::FfnV1 | Formula::FfnV2 => {
            let ff = random_ffn_factors(&mut rng, d, f, r, Activation::Gelu)?;
            match formula {
                Formula::FfnNaiveLowRank => ffn_naive_lowrank(&x, &ff, &meter)?,
                Formula::FfnV1 => ffn_v1(&x, &ff, &plan, &meter)?,
                _ => ffn_v2(&x, &ff, &plan, &meter)?,
            };
        }
    }
    Ok(meter.snapshot())
}

/// Peak transient+persistent bytes of the naive low-rank attention path.
pub fn measure_naive_attention(g: &Geometry, seed: u64) -> Result<MeterSnapshot> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_input(&mut rng, g.batch, g.seq_len, g.d_model);
    let set = random_attention_factors(&mut rng, HeadMode::MultiHead, g.d_model, g.heads, g.rank)?;
    let meter = MemoryMeter::new();
    naive_lowrank_attention(&x, &set, &meter)?;
    Ok(meter.snapshot())
}

/// 27 small geometries: `B ∈ {1,2,3}`, `M ∈ {5,16,33}`, three widths, with
/// two groups and a rank that varies across the grid.
pub fn meter_grid() -> Vec<Geometry> {
    let mut out = Vec::new();
    for (i, &b) in [1usize, 2, 3].iter().enumerate() {
        for (j, &m) in [5usize, 16, 33].iter().enumerate() {
            for (k, &(d, f, h)) in [(16usize, 64usize, 2usize), (32, 96, 4), (48, 192, 6)]
                .iter()
                .enumerate()
            {
                let r = [3usize, 5, 8][(i + j + k) % 3];
                out.push(Geometry {
                    groups: 2,
                    ..Geometry::multi_head(b, m, d, f, h, r)
                });
            }
        }
    }
    out
}

/// Measured peak transient bytes equal `expected` for every formula on
/// every geometry of `grid`.
pub fn meter_exactness(grid: &[Geometry], expected: ExpectedFn) -> Vec<Check> {
    Formula::ALL
        .iter()
        .map(|&formula| {
            let name = format!("meter: {formula}");
            let mut mismatches = Vec::new();
            for (i, g) in grid.iter().enumerate() {
                match measure(formula, g, i as u64) {
                    Ok(s) if s.peak_transient_bytes == expected(formula, g) => {}
                    Ok(s) => mismatches.push(format!(
                        "{g:?}: measured {} expected {}",
                        s.peak_transient_bytes,
                        expected(formula, g)
                    )),
                    Err(e) => mismatches.push(format!("{g:?}: {e}")),
                }
            }
            let detail = match mismatches.first() {
                None => format!("exact on {} geometries", grid.len()),
                Some(first) => format!("{} mismatches; first {first}", mismatches.len()),
            };
            Check::new(name, mismatches.is_empty(), detail)
        })
        .collect()
}

/// FLOPs recorded by the kernels of one layer equal the planner's count.
pub fn flops_agreement(seed: u64) -> Check {
    let name = "meter: recorded flops = planner flops";
    Check::from_result(
        name,
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
            let mut count = 0;
            for (b, m, d, h, groups, r) in [(1, 9, 16, 2, 2, 3), (2, 33, 32, 4, 2, 5), (3, 16, 48, 6, 3, 8)] {
                let g = Geometry {
                    groups,
                    ..Geometry::multi_head(b, m, d, 3 * d, h, r)
                };
                let layer = random_factored_layer(&mut rng, HeadMode::from_groups(groups, h), d, 3 * d, h, r)?;
                let x = random_input(&mut rng, b, m, d);
                for plan in [TilePlan::default(), TilePlan::new(8, 4, 16)] {
                    for mode in ExecMode::ALL {
                        let meter = MemoryMeter::new();
                        run_layer(&x, &layer, mode, &plan, &meter)?;
                        let want = layer_flops(&g, mode, &plan);
                        if meter.flops() != want {
                            return Ok(Check::new(
                                name,
                                false,
                                format!("{mode} at {g:?}: recorded {} planned {want}", meter.flops()),
                            ));
                        }
                        count += 1;
                    }
                }
            }
            Ok(Check::new(name, true, format!("exact on {count} runs")))
        })(),
    )
}

/// Geometries whose multi-head threshold is at least one.
pub fn crossover_grid() -> Vec<Geometry> {
    let mut out = Vec::new();
    for b in [1usize, 2] {
        for m in [4usize, 9, 16, 40] {
            for (d, h) in [(16usize, 2usize), (32, 4), (48, 3), (64, 8)] {
                let g = Geometry::multi_head(b, m, d, 2 * d, h, 1);
                if memory_threshold(&g, HeadMode::MultiHead) >= Rational::from_integer(1) {
                    out.push(g);
                }
            }
        }
    }
    out
}

/// Flash path total < dense-Q/K/V baseline exactly when `r` is below the
/// multi-head threshold, checked at its floor and ceiling.
pub fn threshold_crossover(grid: &[Geometry]) -> Check {
    let name = "threshold: meter crossover at floor/ceil";
    Check::from_result(
        name,
        (|| {
            let mut checked = 0;
            for (i, g0) in grid.iter().enumerate() {
                let bound = memory_threshold(g0, HeadMode::MultiHead);
                let baseline = measure(Formula::FlashAttnDenseQkv, g0, i as u64)?.peak_total_bytes;
                let ranks = [bound.floor().to_integer(), bound.ceil().to_integer()];
                for r in ranks {
                    let r = r as usize;
                    if r == 0 || r > g0.head_dim() {
                        continue;
                    }
                    let g = g0.with_rank(r);
                    let flash = measure(Formula::FlashSvdAttn, &g, i as u64)?.peak_total_bytes;
                    let saves = flash < baseline;
                    let below = Rational::from_integer(r as i128) < bound;
                    if saves != below {
                        return Ok(Check::new(
                            name,
                            false,
                            format!("{g:?}: flash {flash} vs baseline {baseline}, bound {bound}"),
                        ));
                    }
                    checked += 1;
                }
            }
            Ok(Check::new(
                name,
                checked > 0,
                format!("iff holds at {checked} ranks on {} geometries", grid.len()),
            ))
        })(),
    )
}

/// Twelve geometries with rank at least two and grouped heads.
pub fn delta_grid() -> Vec<Geometry> {
    let mut out = Vec::new();
    for (i, &(b, m)) in [(1usize, 7usize), (2, 16), (3, 5), (1, 40)].iter().enumerate() {
        for (j, &(d, f, h, groups)) in [(16usize, 64usize, 2usize, 1usize), (32, 64, 4, 2), (48, 96, 6, 3)]
            .iter()
            .enumerate()
        {
            out.push(Geometry {
                groups,
                ..Geometry::multi_head(b, m, d, f, h, 2 + (i + j) % 5)
            });
        }
    }
    out
}

/// `meter(r) − meter(r−1)` equals the planner's per-rank delta.
pub fn rank_deltas(grid: &[Geometry]) -> Vec<Check> {
    [
        (RankModule::Attention, Formula::FlashSvdAttn),
        (RankModule::Grouped, Formula::GroupedAttn),
        (RankModule::FfnV1, Formula::FfnV1),
        (RankModule::FfnV2, Formula::FfnV2),
    ]
    .iter()
    .map(|&(module, formula)| {
        let name = format!("deltas: {module}");
        Check::from_result(
            &name,
            (|| {
                for (i, g) in grid.iter().enumerate() {
                    let hi = measure(formula, g, i as u64)?.peak_total_bytes;
                    let lo = measure(formula, &g.with_rank(g.rank - 1), i as u64)?.peak_total_bytes;
                    let want = delta_memory_per_rank(g, module);
                    if hi - lo != want {
                        return Ok(Check::new(
                            name.clone(),
                            false,
                            format!("{g:?}: measured {} expected {want}", hi - lo),
                        ));
                    }
                }
                Ok(Check::new(
                    name.clone(),
                    true,
                    format!("exact on {} geometries", grid.len()),
                ))
            })(),
        )
    })
    .collect()
}

/// `‖W − ŨṼ‖_F²` against the discarded singular-value energy on random 8×8
/// matrices at every rank, in f64.
pub fn eckart_young(seed: u64, matrices: usize) -> Check {
    let name = "svd: truncation error = tail energy";
    Check::from_result(
        name,
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
            let mut worst = 0.0f64;
            for _ in 0..matrices {
                let w = randn(&mut rng, vec![8, 8], 1.0).cast::<f64>();
                let s = svd(&w)?;
                let total: f64 = w.data().iter().map(|x| x * x).sum();
                for r in 1..=8 {
                    let pair = truncate_even_split(&s, r)?;
                    let approx = crate::gemm::gemm(&pair.left, &pair.right, None)?;
                    let err: f64 = w.data().iter().zip(approx.data()).map(|(a, b)| (a - b).powi(2)).sum();
                    let tail = s.tail_energy(r);
                    worst = worst.max((err - tail).abs() / tail.max(total * 1e-12));
                }
            }
            Ok(Check::new(
                name,
                worst <= 1e-6,
                format!("max relative deviation {worst:.3e} (tol 1e-6) over {matrices} matrices"),
            ))
        })(),
    )
}

/// Closed-form planner values at the reference geometries.
pub fn analytics_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let multi = param_threshold(HeadMode::MultiHead, 768, 12);
    let single = param_threshold(HeadMode::SingleHead, 768, 12);
    out.push(Check::new(
        "analytics: param thresholds",
        multi == Rational::new(768, 13) && single == Rational::from_integer(384),
        format!("multi-head {multi}, single-head {single}"),
    ));
    let sp = speedup_formula(768, 3072, 96);
    out.push(Check::new(
        "analytics: speedup formula",
        sp == Rational::new(2_949_120, 377_856),
        format!("{sp}"),
    ));
    let g = Geometry::multi_head(1, 128, 768, 3072, 12, 64);
    let (dense, lr) = (io_bytes(&g, false), io_bytes(&g, true));
    out.push(Check::new(
        "analytics: io bytes",
        dense.bytes_in == 4_325_376 && lr.bytes_in == 2_293_760 && dense.bytes_out == lr.bytes_out,
        format!("dense in {}, low-rank in {}", dense.bytes_in, lr.bytes_in),
    ));
    let compute = HardwareModel::new(1e12, 1e12).and_then(|hw| roofline_latency(1_000_000_000, 1_000_000, &hw));
    let bandwidth = HardwareModel::new(1e12, 1e9).and_then(|hw| roofline_latency(1_000_000, 1_000_000_000, &hw));
    out.push(Check::new(
        "analytics: roofline regimes",
        matches!((&compute, &bandwidth), (Ok(c), Ok(b)) if *c == 1e-3 && *b == 1.0),
        format!("{compute:?} / {bandwidth:?}"),
    ));
    let loss = |mode| rank_loss_for_budget(mode, 768, 12, 1_500_000).map(|l| l.loss);
    let (ls, lm) = (loss(HeadMode::SingleHead), loss(HeadMode::MultiHead));
    out.push(Check::new(
        "analytics: rank loss at 1.5M params",
        matches!((&ls, &lm), (Ok(s), Ok(m)) if (s - 0.56).abs() <= 0.05 && (m - 0.19).abs() <= 0.05),
        format!("single-head {ls:?}, multi-head {lm:?}"),
    ));
    let t = memory_threshold(&Geometry::multi_head(1, 128, 768, 3072, 12, 1), HeadMode::MultiHead);
    out.push(Check::new(
        "analytics: memory threshold",
        t == Rational::new(98_304, 2_304),
        format!("{t}"),
    ));
    out
}

/// FSVD1 encode/decode is bit-identical and seeded synthesis is repeatable.
pub fn format_round_trip(seed: u64) -> Check {
    let name = "format: round trip and determinism";
    Check::from_result(
        name,
        (|| {
            let spec = SynthSpec::new(2, 32, 64, 4);
            let mut ok = true;
            let mut detail = Vec::new();
            for mode in [HeadMode::MultiHead, HeadMode::SingleHead, HeadMode::Grouped(2)] {
                let a = synth_model(seed, spec, 4, mode)?;
                let b = synth_model(seed, spec, 4, mode)?;
                let bytes = encode_model(&a)?;
                let again = encode_model(&decode_model(&bytes)?)?;
                let same = bytes == again && bytes == encode_model(&b)? && decode_model(&bytes)? == a;
                ok &= same;
                detail.push(format!(
                    "{mode:?}: {} bytes {}",
                    bytes.len(),
                    if same { "ok" } else { "MISMATCH" }
                ));
            }
            Ok(Check::new(name, ok, detail.join(", ")))
        })(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn off_by_one(f: Formula, g: &Geometry) -> u64 {
        expected_bytes(f, g) + u64::from(f == Formula::FfnV1)
    }

    #[test]
    fn suite_ids_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.id().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn meter_suite_passes_and_catches_mutation() {
        let grid = &meter_grid()[..4];
        assert!(meter_exactness(grid, expected_bytes).iter().all(|c| c.passed));
        let mutated = meter_exactness(grid, off_by_one);
        let failed: Vec<_> = mutated.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["meter: ffn_v1"]);
    }

    #[test]
    fn grids_are_large_enough() {
        assert!(meter_grid().len() >= 27);
        assert!(delta_grid().len() >= 10);
        assert!(!crossover_grid().is_empty());
        assert_eq!(tile_plan_grid().len(), 36);
    }

    #[test]
    fn quick_suites_pass() {
        let cfg = VerifyConfig {
            cases: 3,
            ..VerifyConfig::default()
        };
        for s in [Suite::Attn, Suite::Ffn, Suite::Layer, Suite::Analytics, Suite::Format] {
            let r = run_suite(s, &cfg);
            assert!(r.passed(), "{:?}", r.checks);
        }
    }
}
