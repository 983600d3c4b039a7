//! Encoder layers: attention, residual, layer norm, FFN, residual, layer norm.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_output_projection, dense_attention_oracle, dense_linear, flash_svd_attention, naive_lowrank_attention,
    project_factors,
};
use crate::error::{Error, Result};
use crate::factorizer::{AttentionFactorSet, DenseAttention, HeadMode, Projection};
use crate::ffn::{ffn_dense_oracle, ffn_naive_lowrank, ffn_v1, ffn_v2, DenseFfn, FfnFactors};
use crate::memtier::{AllocationClass, MemoryMeter, Metered, TilePlan};
use crate::ops::{layer_norm_in_place, LayerNormParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel family used for both sublayers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Dense weights, materialized Q/K/V, scores and FFN activation.
    Dense,
    /// Low-rank weights applied without streaming.
    #[serde(rename = "naive")]
    NaiveLowRank,
    /// Streaming attention and the rank-space FFN kernel.
    #[default]
    FlashV1,
    /// Streaming attention and the fully fused FFN kernel.
    FlashV2,
}

impl ExecMode {
    pub const ALL: [ExecMode; 4] = [
        ExecMode::Dense,
        ExecMode::NaiveLowRank,
        ExecMode::FlashV1,
        ExecMode::FlashV2,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ExecMode::Dense => "dense",
            ExecMode::NaiveLowRank => "naive",
            ExecMode::FlashV1 => "flash-v1",
            ExecMode::FlashV2 => "flash-v2",
        }
    }
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExecMode::ALL.into_iter().find(|m| m.id() == s).ok_or_else(|| {
            Error::config(format!(
                "unknown mode `{s}` (expected dense, naive, flash-v1 or flash-v2)"
            ))
        })
    }
}

/// Placement of the layer norms relative to the residual adds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnOrder {
    /// `LN(x + f(x))`, as in the original BERT.
    #[default]
    Post,
    /// `x + f(LN(x))`.
    Pre,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionWeights<T> {
    Dense(DenseAttention<T>),
    Factored(AttentionFactorSet<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnWeights<T> {
    Dense(DenseFfn<T>),
    Factored(FfnFactors<T>),
}

/// One encoder layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attention: AttentionWeights<T>,
    pub ffn: FfnWeights<T>,
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    pub fn new(
        attention: AttentionWeights<T>,
        ffn: FfnWeights<T>,
        ln1: LayerNormParams<T>,
        ln2: LayerNormParams<T>,
    ) -> Result<Self> {
        let layer = Self {
            attention,
            ffn,
            ln1,
            ln2,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn d_model(&self) -> usize {
        match &self.attention {
            AttentionWeights::Dense(a) => a.d_model(),
            AttentionWeights::Factored(a) => a.d_model(),
        }
    }

    pub fn d_ff(&self) -> usize {
        match &self.ffn {
            FfnWeights::Dense(f) => f.d_ff(),
            FfnWeights::Factored(f) => f.d_ff(),
        }
    }

    pub fn heads(&self) -> usize {
        match &self.attention {
            AttentionWeights::Dense(a) => a.heads,
            AttentionWeights::Factored(a) => a.heads(),
        }
    }

    pub fn is_factored(&self) -> bool {
        matches!(
            (&self.attention, &self.ffn),
            (AttentionWeights::Factored(_), FfnWeights::Factored(_))
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if let AttentionWeights::Dense(a) = &self.attention {
            a.validate()?;
        }
        let ffn_d = match &self.ffn {
            FfnWeights::Dense(f) => {
                f.validate()?;
                f.d_model()
            }
            FfnWeights::Factored(f) => f.d_model(),
        };
        if ffn_d != d {
            return Err(Error::shape(format!(
                "ffn width {ffn_d} does not match attention width {d}"
            )));
        }
        for (name, ln) in [("ln1", &self.ln1), ("ln2", &self.ln2)] {
            if ln.width() != d || ln.beta.len() != d {
                return Err(Error::shape(format!("{name} has width {}, expected {d}", ln.width())));
            }
        }
        Ok(())
    }

    /// The same layer with every factorized block replaced by its dense
    /// reconstruction.
    pub fn to_dense(&self) -> Self {
        Self {
            attention: match &self.attention {
                AttentionWeights::Factored(a) => AttentionWeights::Dense(a.reconstruct()),
                dense => dense.clone(),
            },
            ffn: match &self.ffn {
                FfnWeights::Factored(f) => FfnWeights::Dense(f.reconstruct()),
                dense => dense.clone(),
            },
            ln1: self.ln1.clone(),
            ln2: self.ln2.clone(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> EncoderLayer<U> {
        EncoderLayer {
            attention: match &self.attention {
                AttentionWeights::Dense(a) => AttentionWeights::Dense(a.cast()),
                AttentionWeights::Factored(a) => AttentionWeights::Factored(a.cast()),
            },
            ffn: match &self.ffn {
                FfnWeights::Dense(f) => FfnWeights::Dense(f.cast()),
                FfnWeights::Factored(f) => FfnWeights::Factored(f.cast()),
            },
            ln1: self.ln1.cast(),
            ln2: self.ln2.cast(),
        }
    }

    /// Registers every weight the mode keeps resident for the whole layer,
    /// under the tags the kernels use, so the kernels find them already live.
    fn register_weights<'m>(&self, mode: ExecMode, meter: &'m MemoryMeter) -> Vec<Metered<'m, ()>> {
        let mut out = Vec::new();
        match (&self.attention, mode) {
            (AttentionWeights::Factored(a), ExecMode::NaiveLowRank | ExecMode::FlashV1 | ExecMode::FlashV2) => {
                for p in Projection::ALL {
                    for (u, f) in a.units_of(p).iter().enumerate() {
                        out.push(meter.persistent(format!("attn.{}.V.{u}", p.tag()), f.v().nbytes()));
                    }
                }
                out.push(meter.persistent("attn.o.U", a.output().u().nbytes()));
                out.push(meter.persistent("attn.o.V", a.output().v().nbytes()));
            }
            (AttentionWeights::Dense(a), ExecMode::Dense) => {
                for (tag, w) in [
                    ("attn.q.W", &a.wq),
                    ("attn.k.W", &a.wk),
                    ("attn.v.W", &a.wv),
                    ("attn.o.W", &a.wo),
                ] {
                    out.push(meter.persistent(tag, w.nbytes()));
                }
            }
            _ => {}
        }
        match (&self.ffn, mode) {
            (FfnWeights::Factored(f), ExecMode::NaiveLowRank | ExecMode::FlashV1 | ExecMode::FlashV2) => {
                for (tag, w) in [
                    ("ffn.up.U", f.up().u()),
                    ("ffn.up.V", f.up().v()),
                    ("ffn.down.U", f.down().u()),
                    ("ffn.down.V", f.down().v()),
                ] {
                    out.push(meter.persistent(tag, w.nbytes()));
                }
            }
            (FfnWeights::Dense(f), ExecMode::Dense) => {
                out.push(meter.persistent("ffn.up.W", f.w_in.nbytes()));
                out.push(meter.persistent("ffn.down.W", f.w_out.nbytes()));
            }
            _ => {}
        }
        out
    }
}

fn not_factored() -> Error {
    Error::config("low-rank modes need a factorized layer")
}

fn attention_sublayer<T: Scalar>(
    x: &Tensor<T>,
    layer: &EncoderLayer<T>,
    mode: ExecMode,
    plan: &TilePlan,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    meter.scoped(|meter| match (mode, &layer.attention) {
        (ExecMode::Dense, AttentionWeights::Dense(a)) => {
            let o = meter.track(
                "attn.heads",
                AllocationClass::Excluded,
                dense_attention_oracle(x, a, meter)?,
            );
            dense_linear(&o, &a.wo, &a.bo, "attn.o.W", meter)
        }
        (ExecMode::Dense, AttentionWeights::Factored(_)) => unreachable!("dense mode runs on reconstructed weights"),
        (ExecMode::NaiveLowRank, AttentionWeights::Factored(a)) => {
            let o = meter.track(
                "attn.heads",
                AllocationClass::Excluded,
                naive_lowrank_attention(x, a, meter)?,
            );
            attention_output_projection(&o, a.output(), meter)
        }
        (ExecMode::FlashV1 | ExecMode::FlashV2, AttentionWeights::Factored(a)) => {
            let o = {
                let factors = project_factors(x, a, meter)?;
                flash_svd_attention(&factors, a, plan, meter)?
            };
            let o = meter.track("attn.heads", AllocationClass::Excluded, o);
            attention_output_projection(&o, a.output(), meter)
        }
        (_, AttentionWeights::Dense(_)) => Err(not_factored()),
    })
}

fn ffn_sublayer<T: Scalar>(
    x: &Tensor<T>,
    layer: &EncoderLayer<T>,
    mode: ExecMode,
    plan: &TilePlan,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    meter.scoped(|meter| match (mode, &layer.ffn) {
        (ExecMode::Dense, FfnWeights::Dense(f)) => ffn_dense_oracle(x, f, meter),
        (ExecMode::Dense, FfnWeights::Factored(_)) => unreachable!("dense mode runs on reconstructed weights"),
        (ExecMode::NaiveLowRank, FfnWeights::Factored(f)) => ffn_naive_lowrank(x, f, meter),
        (ExecMode::FlashV1, FfnWeights::Factored(f)) => ffn_v1(x, f, plan, meter),
        (ExecMode::FlashV2, FfnWeights::Factored(f)) => ffn_v2(x, f, plan, meter),
        (_, FfnWeights::Dense(_)) => Err(not_factored()),
    })
}

fn add_norm<T: Scalar>(a: &Tensor<T>, b: Option<&Tensor<T>>, ln: Option<&LayerNormParams<T>>) -> Result<Tensor<T>> {
    let mut out = match b {
        Some(b) => a.add(b)?,
        None => a.clone(),
    };
    if let Some(ln) = ln {
        let w = ln.width();
        for row in out.data_mut().chunks_exact_mut(w) {
            layer_norm_in_place(row, ln);
        }
    }
    Ok(out)
}

/// One post-LN layer: `H = LN1(X + Attn(X))`, `X' = LN2(H + FFN(H))`.
pub fn run_layer<T: Scalar>(
    x: &Tensor<T>,
    layer: &EncoderLayer<T>,
    mode: ExecMode,
    plan: &TilePlan,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    run_layer_ordered(x, layer, mode, plan, LnOrder::Post, meter)
}

/// [`run_layer`] with a selectable layer-norm placement. Each sublayer runs in
/// its own meter region; the layer's weights stay registered throughout.
pub fn run_layer_ordered<T: Scalar>(
    x: &Tensor<T>,
    layer: &EncoderLayer<T>,
    mode: ExecMode,
    plan: &TilePlan,
    order: LnOrder,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    let (_, _, d) = x.dims3()?;
    if d != layer.d_model() {
        return Err(Error::shape(format!(
            "input width {d} does not match layer width {}",
            layer.d_model()
        )));
    }
    let dense;
    let layer = if mode == ExecMode::Dense
        && !matches!(
            (&layer.attention, &layer.ffn),
            (AttentionWeights::Dense(_), FfnWeights::Dense(_))
        ) {
        dense = layer.to_dense();
        &dense
    } else {
        layer
    };
    meter.scoped(|meter| {
        let _weights = layer.register_weights(mode, meter);
        let _input = meter.reserve("layer.in", AllocationClass::Excluded, x.nbytes());
        match order {
            LnOrder::Post => {
                let a = attention_sublayer(x, layer, mode, plan, meter)?;
                let h = meter.track(
                    "layer.h",
                    AllocationClass::Excluded,
                    add_norm(x, Some(&a), Some(&layer.ln1))?,
                );
                drop(a);
                let f = ffn_sublayer(&h, layer, mode, plan, meter)?;
                add_norm(&h, Some(&f), Some(&layer.ln2))
            }
            LnOrder::Pre => {
                let n1 = meter.track(
                    "layer.ln1",
                    AllocationClass::Excluded,
                    add_norm(x, None, Some(&layer.ln1))?,
                );
                let a = attention_sublayer(&n1, layer, mode, plan, meter)?;
                let h = meter.track("layer.h", AllocationClass::Excluded, x.add(&a)?);
                let n2 = meter.track(
                    "layer.ln2",
                    AllocationClass::Excluded,
                    add_norm(&h, None, Some(&layer.ln2))?,
                );
                let f = ffn_sublayer(&n2, layer, mode, plan, meter)?;
                h.add(&f)
            }
        }
    })
}

/// Applies `layers` in sequence. Every layer runs in its own region, so the
/// meter peak is the maximum over layers.
pub fn run_model<T: Scalar>(
    x: &Tensor<T>,
    layers: &[EncoderLayer<T>],
    mode: ExecMode,
    plan: &TilePlan,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    run_model_ordered(x, layers, mode, plan, LnOrder::Post, meter)
}

pub fn run_model_ordered<T: Scalar>(
    x: &Tensor<T>,
    layers: &[EncoderLayer<T>],
    mode: ExecMode,
    plan: &TilePlan,
    order: LnOrder,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    let mut h = x.clone();
    for layer in layers {
        h = run_layer_ordered(&h, layer, mode, plan, order, meter)?;
    }
    Ok(h)
}

/// Attention head mode of a factorized layer, `None` for dense weights.
pub fn head_mode<T: Scalar>(layer: &EncoderLayer<T>) -> Option<HeadMode> {
    match &layer.attention {
        AttentionWeights::Factored(a) => Some(a.mode()),
        AttentionWeights::Dense(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorizer::{factorize_attention, factorize_linear};
    use crate::ops::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        })
        .unwrap()
    }

    fn dense_layer(seed: u64, d: usize, df: usize, heads: usize) -> EncoderLayer<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        let mut w = |r, c| randn(&mut rng, vec![r, c], s);
        let attention = DenseAttention {
            heads,
            wq: w(d, d),
            wk: w(d, d),
            wv: w(d, d),
            wo: w(d, d),
            bq: vec![0.01; d],
            bk: vec![-0.01; d],
            bv: vec![0.02; d],
            bo: vec![0.0; d],
        };
        let ffn = DenseFfn {
            w_in: w(d, df),
            b_in: vec![0.01; df],
            w_out: w(df, d),
            b_out: vec![0.0; d],
            activation: Activation::Gelu,
        };
        EncoderLayer::new(
            AttentionWeights::Dense(attention),
            FfnWeights::Dense(ffn),
            LayerNormParams::identity(d, 1e-12),
            LayerNormParams::identity(d, 1e-12),
        )
        .unwrap()
    }

    fn factored(layer: &EncoderLayer<f32>, mode: HeadMode, r: usize) -> EncoderLayer<f32> {
        let (AttentionWeights::Dense(a), FfnWeights::Dense(f)) = (&layer.attention, &layer.ffn) else {
            panic!("dense layer expected")
        };
        let attn = factorize_attention(a, mode, r, r).unwrap();
        let ffn = FfnFactors::new(
            factorize_linear(&f.w_in, &f.b_in, r).unwrap(),
            factorize_linear(&f.w_out, &f.b_out, r).unwrap(),
            f.activation,
        )
        .unwrap();
        EncoderLayer::new(
            AttentionWeights::Factored(attn),
            FfnWeights::Factored(ffn),
            layer.ln1.clone(),
            layer.ln2.clone(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_reduce_to_double_layer_norm() {
        let (d, df) = (4, 8);
        let zero = |r, c| Tensor::<f32>::zeros(vec![r, c]).unwrap();
        let layer = EncoderLayer::new(
            AttentionWeights::Dense(DenseAttention {
                heads: 2,
                wq: zero(d, d),
                wk: zero(d, d),
                wv: zero(d, d),
                wo: zero(d, d),
                bq: vec![0.0; d],
                bk: vec![0.0; d],
                bv: vec![0.0; d],
                bo: vec![0.0; d],
            }),
            FfnWeights::Dense(DenseFfn {
                w_in: zero(d, df),
                b_in: vec![0.0; df],
                w_out: zero(df, d),
                b_out: vec![0.0; d],
                activation: Activation::Gelu,
            }),
            LayerNormParams::identity(d, 0.0),
            LayerNormParams::identity(d, 0.0),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 2, 4], vec![1.0f32, 2.0, 3.0, 4.0, -2.0, 0.0, 0.0, 2.0]).unwrap();
        let y = run_layer(&x, &layer, ExecMode::Dense, &TilePlan::default(), &MemoryMeter::new()).unwrap();
        // Row 1: mean 2.5, var 1.25. Row 2: mean 0, var 2. LN is idempotent.
        let a = 1.0 / 1.25f64.sqrt();
        let b = 1.0 / 2.0f64.sqrt();
        let want = [-1.5 * a, -0.5 * a, 0.5 * a, 1.5 * a, -2.0 * b, 0.0, 0.0, 2.0 * b];
        for (g, w) in y.data().iter().zip(want) {
            assert!((*g as f64 - w).abs() <= 1e-5, "{g} vs {w}");
        }
    }

    #[test]
    fn flash_layer_matches_dense_on_reconstruction() {
        let dense = dense_layer(1, 32, 128, 4);
        let layer = factored(&dense, HeadMode::MultiHead, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, vec![2, 20, 32], 1.0);
        let plan = TilePlan::new(8, 4, 32);
        let want = run_layer(&x, &layer, ExecMode::Dense, &plan, &MemoryMeter::new()).unwrap();
        for mode in [ExecMode::NaiveLowRank, ExecMode::FlashV1, ExecMode::FlashV2] {
            let got = run_layer(&x, &layer, mode, &plan, &MemoryMeter::new()).unwrap();
            assert!(got.max_abs_diff(&want).unwrap() <= 2e-4, "{mode}");
        }
        for mode in ExecMode::ALL {
            let a = run_layer_ordered(&x, &layer, mode, &plan, LnOrder::Pre, &MemoryMeter::new()).unwrap();
            let b = run_layer_ordered(&x, &layer, ExecMode::Dense, &plan, LnOrder::Pre, &MemoryMeter::new()).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 2e-4, "pre-ln {mode}");
        }
    }

    #[test]
    fn flash_layer_peak_is_exact_and_below_naive() {
        let (b, m, d, df, h, r) = (2usize, 16usize, 32usize, 128usize, 4usize, 4usize);
        let layer = factored(&dense_layer(3, d, df, h), HeadMode::MultiHead, r);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, vec![b, m, d], 1.0);
        let plan = TilePlan::default();
        let flash = MemoryMeter::new();
        run_layer(&x, &layer, ExecMode::FlashV1, &plan, &flash).unwrap();
        let naive = MemoryMeter::new();
        run_layer(&x, &layer, ExecMode::NaiveLowRank, &plan, &naive).unwrap();
        let bm = (b * m) as u64;
        let (d, df, h, r) = (d as u64, df as u64, h as u64, r as u64);
        assert_eq!(flash.peak_total(), 4 * r * (3 * h * bm + 7 * d + 2 * df));
        assert!(flash.peak(AllocationClass::Transient) < naive.peak(AllocationClass::Transient));
        assert_eq!(flash.live_allocations(), 0);
        assert_eq!(flash.current(AllocationClass::Persistent), 0);
    }

    #[test]
    fn low_rank_mode_on_dense_layer_is_a_config_error() {
        let layer = dense_layer(5, 8, 16, 2);
        let x = Tensor::zeros(vec![1, 2, 8]).unwrap();
        let meter = MemoryMeter::new();
        let err = run_layer(&x, &layer, ExecMode::FlashV1, &TilePlan::default(), &meter).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(meter.live_allocations(), 0);
    }

    #[test]
    fn model_composition() {
        let layer = factored(&dense_layer(6, 16, 64, 2), HeadMode::MultiHead, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, vec![1, 9, 16], 1.0);
        let plan = TilePlan::default();
        let empty = run_model(&x, &[], ExecMode::FlashV1, &plan, &MemoryMeter::new()).unwrap();
        assert_eq!(empty, x);
        let twice = run_model(
            &x,
            &[layer.clone(), layer.clone()],
            ExecMode::FlashV2,
            &plan,
            &MemoryMeter::new(),
        )
        .unwrap();
        let step = run_layer(&x, &layer, ExecMode::FlashV2, &plan, &MemoryMeter::new()).unwrap();
        let step = run_layer(&step, &layer, ExecMode::FlashV2, &plan, &MemoryMeter::new()).unwrap();
        assert_eq!(twice, step);
    }

    #[test]
    fn mode_ids_round_trip() {
        for m in ExecMode::ALL {
            assert_eq!(m.id().parse::<ExecMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.id()));
        }
        assert!("flash".parse::<ExecMode>().is_err());
    }
}
