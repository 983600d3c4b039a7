//! Closed-form analytics: thresholds, exact FLOP counts, I/O volumes,
//! roofline bounds, per-rank memory deltas and decoder estimates.
//!
//! Byte counts use 4 bytes per element, the same counting rules the kernels
//! follow when registering buffers on a [`MemoryMeter`](crate::memtier::MemoryMeter).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::ExecMode;
use crate::error::{Error, Result};
use crate::factorizer::HeadMode;
use crate::gemm::gemm_flops;
use crate::geometry::{ratio, Geometry, Rational};
use crate::memtier::{TilePlan, FORMULA_ELEM_BYTES};

const E: u64 = FORMULA_ELEM_BYTES;

/// Compute and bandwidth ceilings of a device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareModel {
    /// FLOP/s.
    pub peak_flops: f64,
    /// Bytes/s.
    pub beta: f64,
    pub bytes_per_element: u64,
}

impl HardwareModel {
    pub fn new(peak_flops: f64, beta: f64) -> Result<Self> {
        let hw = Self {
            peak_flops,
            beta,
            bytes_per_element: E,
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("peak_flops", self.peak_flops), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("hardware {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

fn head_mode(g: &Geometry) -> HeadMode {
    HeadMode::from_groups(g.groups, g.heads)
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Largest memory-saving rank (exclusive): `BMD_A / (units·BM + D_A)`, with
/// one unit for single-head, `H` for multi-head and `G` for grouped.
pub fn memory_threshold(g: &Geometry, mode: HeadMode) -> Rational {
    let bm = g.tokens() as u128;
    let d = g.d_model as u128;
    ratio(bm * d, mode.units(g.heads) as u128 * bm + d)
}

/// `(D_A² + D_A·D_F) / (r·D_A + r² + r·D_F)`, evaluated verbatim.
pub fn speedup_formula(d_model: usize, d_ff: usize, rank: usize) -> Rational {
    let (d, f, r) = (d_model as u128, d_ff as u128, rank as u128);
    ratio(d * d + d * f, r * d + r * r + r * f)
}

/// FLOPs of one streamed (batch, head) slice at padded rank `r_pad`.
fn stream_slice_flops(m: usize, dh: usize, r_pad: usize, block_m: usize) -> u64 {
    let q_tiles = u(m.div_ceil(block_m));
    gemm_flops(m, r_pad, dh) + q_tiles * 2 * gemm_flops(m, r_pad, dh) + 2 * gemm_flops(m, dh, m)
}

/// FLOPs of one layer, as the kernels of `mode` count them (`2mkn` per GEMM;
/// elementwise work is not counted). All factor ranks equal `g.rank`.
pub fn layer_flops(g: &Geometry, mode: ExecMode, plan: &TilePlan) -> u64 {
    let (b, m, d, f, h, r) = (g.batch, g.seq_len, g.d_model, g.d_ff, g.heads, g.rank);
    let bm = b * m;
    let dh = d / h;
    let units = head_mode(g).units(h);
    let uw = d / units;
    let scores = u(b * h) * 2 * gemm_flops(m, dh, m);
    let lowrank = |rows: usize, din: usize, dout: usize| gemm_flops(rows, din, r) + gemm_flops(rows, r, dout);
    match mode {
        ExecMode::Dense => 4 * gemm_flops(bm, d, d) + scores + 2 * gemm_flops(bm, d, f),
        ExecMode::NaiveLowRank => {
            3 * u(units) * lowrank(bm, d, uw) + scores + lowrank(bm, d, d) + lowrank(bm, d, f) + lowrank(bm, f, d)
        }
        ExecMode::FlashV1 | ExecMode::FlashV2 => {
            let r_pad = r.div_ceil(plan.block_r) * plan.block_r;
            let project = 3 * u(units) * gemm_flops(bm, d, r);
            let attn = u(b * h) * stream_slice_flops(m, dh, r_pad, plan.block_m);
            let ffn = gemm_flops(bm, d, r) + gemm_flops(bm, r, f) + gemm_flops(bm, f, r) + gemm_flops(bm, r, d);
            project + attn + lowrank(bm, d, d) + ffn
        }
    }
}

/// [`layer_flops`] times the layer count.
pub fn flops_exact(g: &Geometry, mode: ExecMode, plan: &TilePlan) -> u64 {
    u(g.layers) * layer_flops(g, mode, plan)
}

/// Off-chip traffic of one layer, in bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IoBytes {
    pub bytes_in: u64,
    pub bytes_out: u64,
}

impl IoBytes {
    pub fn total(&self) -> u64 {
        self.bytes_in + self.bytes_out
    }
}

/// Dense: in `4(3BMD_A + 2BM·D_F)`; low-rank: in `4(4BMr + 3rD_A + 2rD_F)`;
/// out `4·2BMD_A` for both.
pub fn io_bytes(g: &Geometry, low_rank: bool) -> IoBytes {
    let (bm, d, f, r) = (g.tokens(), u(g.d_model), u(g.d_ff), u(g.rank));
    let bytes_in = if low_rank {
        E * (4 * bm * r + 3 * r * d + 2 * r * f)
    } else {
        E * (3 * bm * d + 2 * bm * f)
    };
    IoBytes {
        bytes_in,
        bytes_out: E * 2 * bm * d,
    }
}

/// I/O volume of the kernels behind `mode`.
pub fn io_bytes_for(g: &Geometry, mode: ExecMode) -> IoBytes {
    io_bytes(g, mode != ExecMode::Dense)
}

/// `max(flops / peak, bytes / β)` in seconds.
pub fn roofline_latency(flops: u64, bytes: u64, hw: &HardwareModel) -> Result<f64> {
    hw.validate()?;
    Ok((flops as f64 / hw.peak_flops).max(bytes as f64 / hw.beta))
}

/// Module whose per-rank memory sensitivity is queried.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RankModule {
    /// Multi-head attention factors.
    Attention,
    /// Grouped attention with `G` groups.
    Grouped,
    /// One factor pair per projection.
    SingleHead,
    FfnV1,
    FfnV2,
}

impl RankModule {
    pub const ALL: [RankModule; 5] = [
        RankModule::Attention,
        RankModule::Grouped,
        RankModule::SingleHead,
        RankModule::FfnV1,
        RankModule::FfnV2,
    ];

    pub fn id(self) -> &'static str {
        match self {
            RankModule::Attention => "attention",
            RankModule::Grouped => "grouped",
            RankModule::SingleHead => "single",
            RankModule::FfnV1 => "ffn_v1",
            RankModule::FfnV2 => "ffn_v2",
        }
    }
}

impl fmt::Display for RankModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for RankModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RankModule::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::config(format!("unknown module id `{s}`")))
    }
}

/// Bytes saved per unit of rank, counting transient and persistent buffers:
/// attention `4·3(units·BM + D_A)`, FFN V1 `4(2BM + 2D_A + 2D_F)`, FFN V2
/// `4(2D_A + 2D_F)`.
pub fn delta_memory_per_rank(g: &Geometry, module: RankModule) -> u64 {
    let (bm, d, f) = (g.tokens(), u(g.d_model), u(g.d_ff));
    match module {
        RankModule::Attention => E * 3 * (u(g.heads) * bm + d),
        RankModule::Grouped => E * 3 * (u(g.groups) * bm + d),
        RankModule::SingleHead => E * 3 * (bm + d),
        RankModule::FfnV1 => E * (2 * bm + 2 * d + 2 * f),
        RankModule::FfnV2 => E * (2 * d + 2 * f),
    }
}

/// [`delta_memory_per_rank`] looked up by string id.
pub fn delta_memory_per_rank_by_id(g: &Geometry, id: &str) -> Result<u64> {
    Ok(delta_memory_per_rank(g, id.parse()?))
}

/// Transient plus persistent bytes of the streaming attention path:
/// `4·3(units·BMr + rD_A)`.
pub fn flash_attention_total_bytes(g: &Geometry, mode: HeadMode) -> u64 {
    let (bm, d, r) = (g.tokens(), u(g.d_model), u(g.rank));
    E * 3 * (u(mode.units(g.heads)) * bm * r + r * d)
}

/// Bytes of the streaming attention baseline on dense Q/K/V: `4·3BMD_A`.
pub fn dense_qkv_attention_bytes(g: &Geometry) -> u64 {
    E * 3 * g.tokens() * u(g.d_model)
}

/// Transient plus persistent bytes of FFN V1 over those of the dense FFN:
/// `r(2BM + 2D_A + 2D_F) / (BM·D_F)`.
pub fn ffn_memory_ratio(g: &Geometry) -> Rational {
    let (bm, d, f, r) = (g.tokens() as u128, g.d_model as u128, g.d_ff as u128, g.rank as u128);
    ratio(r * (2 * bm + 2 * d + 2 * f), bm * f)
}

/// Constant `C` in `ffn_memory_ratio − 2r/D_F ≤ C·r/BM`; holds whenever
/// `D_A ≤ D_F`.
pub const FFN_RATIO_CONSTANT: i128 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderPhase {
    Prefill,
    /// Generation step `t`, `1 ≤ t ≤ M`.
    DecodeStep(usize),
}

/// Decoder memory: prefill `4(2LBMr + 3BMr + 2BMr)` (cached low-rank keys
/// and values, q/k/v factors, FFN V1 transient); decode step `t`
/// `4(2LBtr + B(t−1)r + 3Br + 2Br)`.
pub fn decoder_memory(g: &Geometry, phase: DecoderPhase) -> Result<u64> {
    let (l, b, m, r) = (u(g.layers), u(g.batch), u(g.seq_len), u(g.rank));
    if l == 0 {
        return Err(Error::Range("decoder estimates need at least one layer".into()));
    }
    match phase {
        DecoderPhase::Prefill => Ok(E * (2 * l * b * m * r + 3 * b * m * r + 2 * b * m * r)),
        DecoderPhase::DecodeStep(t) => {
            if t == 0 || t > g.seq_len {
                return Err(Error::Range(format!("decode step {t} outside 1..={}", g.seq_len)));
            }
            let t = u(t);
            Ok(E * (2 * l * b * t * r + b * (t - 1) * r + 3 * b * r + 2 * b * r))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnDominance {
    /// Dense FFN bytes exceed streaming-attention bytes.
    pub dominates: bool,
    /// `BM·D_F / (r(BM + D_A))`.
    pub ratio: Rational,
}

pub fn ffn_dominance_check(g: &Geometry) -> FfnDominance {
    let (bm, d, f, r) = (g.tokens() as u128, g.d_model as u128, g.d_ff as u128, g.rank as u128);
    let q = ratio(bm * f, r * (bm + d));
    FfnDominance {
        dominates: q > Rational::from_integer(1),
        ratio: q,
    }
}
