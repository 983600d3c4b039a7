//! Seeded synthetic encoder weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::encoder::{AttentionWeights, EncoderLayer, FfnWeights};
use crate::error::{Error, Result};
use crate::factorizer::{
    factorize_attention, factorize_linear, AttentionFactorSet, DenseAttention, FactorizedLinear, HeadMode,
};
use crate::ffn::{DenseFfn, FfnFactors};
use crate::ops::{Activation, LayerNormParams};
use crate::tensor::Tensor;

/// Standard deviation of synthetic biases.
pub const BIAS_STD: f64 = 0.02;
pub const LN_EPS: f32 = 1e-12;

/// Dimensions of a synthetic model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
}

impl SynthSpec {
    pub fn new(layers: usize, d_model: usize, d_ff: usize, heads: usize) -> Self {
        Self {
            layers,
            d_model,
            d_ff,
            heads,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

/// Dense layers with weights drawn from `N(0, 1/√D_A)` and biases from
/// `N(0, 0.02)`; layer norms start at identity.
pub fn synth_dense_model(seed: u64, spec: SynthSpec) -> Result<Vec<EncoderLayer<f32>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, df) = (spec.d_model, spec.d_ff);
    let w_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("finite std");
    let b_dist = Normal::new(0.0, BIAS_STD).expect("finite std");
    let mut layers = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        let mut w = |r: usize, c: usize| -> Tensor<f32> {
            Tensor::from_fn(vec![r, c], |_| w_dist.sample(&mut rng) as f32).expect("positive dims")
        };
        let (wq, wk, wv, wo, w_in, w_out) = (w(d, d), w(d, d), w(d, d), w(d, d), w(d, df), w(df, d));
        let mut b = |n: usize| -> Vec<f32> { (0..n).map(|_| b_dist.sample(&mut rng) as f32).collect() };
        let (bq, bk, bv, bo, b_in, b_out) = (b(d), b(d), b(d), b(d), b(df), b(d));
        layers.push(EncoderLayer::new(
            AttentionWeights::Dense(DenseAttention {
                heads: spec.heads,
                wq,
                wk,
                wv,
                wo,
                bq,
                bk,
                bv,
                bo,
            }),
            FfnWeights::Dense(DenseFfn {
                w_in,
                b_in,
                w_out,
                b_out,
                activation: Activation::Gelu,
            }),
            LayerNormParams::identity(d, LN_EPS),
            LayerNormParams::identity(d, LN_EPS),
        )?);
    }
    Ok(layers)
}

/// Factorizes a dense layer: q/k/v per `mode` unit at `rank`, the attention
/// output projection and both FFN projections as whole matrices at `rank`.
pub fn factorize_layer(layer: &EncoderLayer<f32>, mode: HeadMode, rank: usize) -> Result<EncoderLayer<f32>> {
    let (AttentionWeights::Dense(a), FfnWeights::Dense(f)) = (&layer.attention, &layer.ffn) else {
        return Err(Error::config("layer is already factorized"));
    };
    let attention = factorize_attention(a, mode, rank, rank)?;
    let ffn = FfnFactors::new(
        factorize_linear(&f.w_in, &f.b_in, rank)?,
        factorize_linear(&f.w_out, &f.b_out, rank)?,
        f.activation,
    )?;
    EncoderLayer::new(
        AttentionWeights::Factored(attention),
        FfnWeights::Factored(ffn),
        layer.ln1.clone(),
        layer.ln2.clone(),
    )
}

/// Factorizes every layer; layers are independent and run in parallel.
pub fn factorize_model(layers: &[EncoderLayer<f32>], mode: HeadMode, rank: usize) -> Result<Vec<EncoderLayer<f32>>> {
    layers.par_iter().map(|l| factorize_layer(l, mode, rank)).collect()
}

/// Seeded dense weights factorized at `rank`. Identical seeds give identical
/// models.
pub fn synth_model(seed: u64, spec: SynthSpec, rank: usize, mode: HeadMode) -> Result<Vec<EncoderLayer<f32>>> {
    mode.validate(spec.d_model, spec.heads)?;
    let width = spec.d_model / mode.units(spec.heads);
    if rank == 0 || rank > width {
        return Err(Error::Rank {
            requested: rank,
            max: width,
        });
    }
    factorize_model(&synth_dense_model(seed, spec)?, mode, rank)
}

/// `N(0, std²)` tensor of the given shape.
pub fn randn<R: rand::Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32).expect("positive dims")
}

/// Random factor pair scaled so that `x·U·V` has unit variance for
/// standard-normal `x`.
pub fn random_linear<R: rand::Rng>(
    rng: &mut R,
    d_in: usize,
    d_out: usize,
    rank: usize,
) -> Result<FactorizedLinear<f32>> {
    let s = (d_in as f64).powf(-0.25);
    let u = randn(rng, vec![d_in, rank], s);
    let v = randn(rng, vec![rank, d_out], s / (rank as f64).sqrt());
    let b = randn(rng, vec![d_out], BIAS_STD).into_data();
    FactorizedLinear::new(u, v, b)
}

/// Random attention factors drawn directly, without a dense source.
pub fn random_attention_factors<R: rand::Rng>(
    rng: &mut R,
    mode: HeadMode,
    d_model: usize,
    heads: usize,
    rank: usize,
) -> Result<AttentionFactorSet<f32>> {
    mode.validate(d_model, heads)?;
    let units = mode.units(heads);
    let width = d_model / units;
    let mut qkv: [Vec<FactorizedLinear<f32>>; 3] = Default::default();
    for list in &mut qkv {
        for _ in 0..units {
            list.push(random_linear(rng, d_model, width, rank)?);
        }
    }
    let output = random_linear(rng, d_model, d_model, rank.min(d_model))?;
    AttentionFactorSet::new(mode, heads, qkv, output)
}

pub fn random_ffn_factors<R: rand::Rng>(
    rng: &mut R,
    d_model: usize,
    d_ff: usize,
    rank: usize,
    activation: Activation,
) -> Result<FfnFactors<f32>> {
    FfnFactors::new(
        random_linear(rng, d_model, d_ff, rank)?,
        random_linear(rng, d_ff, d_model, rank)?,
        activation,
    )
}

/// Random factorized layer with identity layer norms.
pub fn random_factored_layer<R: rand::Rng>(
    rng: &mut R,
    mode: HeadMode,
    d_model: usize,
    d_ff: usize,
    heads: usize,
    rank: usize,
) -> Result<EncoderLayer<f32>> {
    EncoderLayer::new(
        AttentionWeights::Factored(random_attention_factors(rng, mode, d_model, heads, rank)?),
        FfnWeights::Factored(random_ffn_factors(rng, d_model, d_ff, rank, Activation::Gelu)?),
        LayerNormParams::identity(d_model, LN_EPS),
        LayerNormParams::identity(d_model, LN_EPS),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::encode_model;

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::new(2, 16, 64, 4);
        let a = encode_model(&synth_model(7, spec, 3, HeadMode::MultiHead).unwrap()).unwrap();
        let b = encode_model(&synth_model(7, spec, 3, HeadMode::MultiHead).unwrap()).unwrap();
        let c = encode_model(&synth_model(8, spec, 3, HeadMode::MultiHead).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rank_above_head_dim_is_rejected() {
        let spec = SynthSpec::new(1, 16, 32, 4);
        assert!(matches!(
            synth_model(1, spec, 5, HeadMode::MultiHead),
            Err(Error::Rank { requested: 5, max: 4 })
        ));
        assert!(synth_model(1, spec, 5, HeadMode::SingleHead).is_ok());
    }

    #[test]
    fn weight_scale_follows_width() {
        let layers = synth_dense_model(3, SynthSpec::new(1, 64, 128, 4)).unwrap();
        let AttentionWeights::Dense(a) = &layers[0].attention else {
            unreachable!()
        };
        let n = a.wq.len() as f64;
        let var = a.wq.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0 / 64.0).abs() < 0.1 / 64.0, "{var}");
    }

    #[test]
    fn bert_base_dense_geometry_builds() {
        let layers = synth_dense_model(42, SynthSpec::new(12, 768, 3072, 12)).unwrap();
        assert_eq!(layers.len(), 12);
        assert!(layers
            .iter()
            .all(|l| l.d_model() == 768 && l.d_ff() == 3072 && l.heads() == 12));
    }

    /// Factorizing all twelve BERT-base layers takes minutes on one core.
    #[test]
    #[ignore]
    fn bert_base_factorized_builds() {
        let layers = synth_model(42, SynthSpec::new(12, 768, 3072, 12), 64, HeadMode::MultiHead).unwrap();
        assert_eq!(layers.len(), 12);
        assert!(layers.iter().all(|l| l.is_factored()));
    }
}
