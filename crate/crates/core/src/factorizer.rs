//! Turning dense projection weights into low-rank factor sets, and the
//! parameter-count analytics that decide whether a rank actually compresses.
//!
//! Weights follow the `y = x·W + b` convention, so `W` is `d_in × d_out` and a
//! factor pair is `U: d_in × r`, `V: r × d_out`. Biases are never factorized.

use crate::error::{Error, Result};
use crate::gemm::{add_row_bias, gemm_flops, gemm_slices};
use crate::geometry::{ratio, Rational};
use crate::scalar::Scalar;
use crate::svd::{svd, truncate_even_split};
use crate::tensor::Tensor;

/// Rows per block in fused low-rank application.
const FUSED_ROWS: usize = 32;

/// Low-rank linear map `x ↦ x·U·V + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLinear<T> {
    u: Tensor<T>,
    v: Tensor<T>,
    bias: Vec<T>,
}

impl<T: Scalar> FactorizedLinear<T> {
    pub fn new(u: Tensor<T>, v: Tensor<T>, bias: Vec<T>) -> Result<Self> {
        let (d_in, r) = u.dims2()?;
        let (r2, d_out) = v.dims2()?;
        if r != r2 {
            return Err(Error::shape(format!(
                "factor ranks disagree: U is {d_in}×{r}, V is {r2}×{d_out}"
            )));
        }
        if r > d_in.min(d_out) {
            return Err(Error::Rank {
                requested: r,
                max: d_in.min(d_out),
            });
        }
        if bias.len() != d_out {
            return Err(Error::shape(format!(
                "bias has {} entries, expected {d_out}",
                bias.len()
            )));
        }
        Ok(Self { u, v, bias })
    }

    pub fn u(&self) -> &Tensor<T> {
        &self.u
    }

    pub fn v(&self) -> &Tensor<T> {
        &self.v
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.v.shape()[1]
    }

    /// Weight parameters `r·(d_in + d_out)`; biases are reported separately.
    pub fn param_count(&self) -> u64 {
        (self.rank() * (self.d_in() + self.d_out())) as u64
    }

    /// Dense `U·V`.
    pub fn reconstruct(&self) -> Tensor<T> {
        crate::gemm::gemm(&self.u, &self.v, None).expect("factor shapes agree")
    }

    /// `x·U·V + bias` over `rows` rows, `FUSED_ROWS` at a time so the rank-space
    /// intermediate never exceeds one on-chip block.
    pub fn forward_rows(&self, rows: usize, x: &[T]) -> Vec<T> {
        let (d_in, d_out, r) = (self.d_in(), self.d_out(), self.rank());
        debug_assert_eq!(x.len(), rows * d_in);
        let mut out = vec![T::zero(); rows * d_out];
        let mut mid = vec![T::zero(); FUSED_ROWS * r];
        for (xc, oc) in x.chunks(FUSED_ROWS * d_in).zip(out.chunks_mut(FUSED_ROWS * d_out)) {
            let n = xc.len() / d_in;
            gemm_slices(n, d_in, r, xc, self.u.data(), &mut mid[..n * r], false);
            gemm_slices(n, r, d_out, &mid[..n * r], self.v.data(), oc, false);
        }
        add_row_bias(&mut out, &self.bias);
        out
    }

    /// FLOPs of [`forward_rows`](Self::forward_rows).
    pub fn forward_flops(&self, rows: usize) -> u64 {
        gemm_flops(rows, self.d_in(), self.rank()) + gemm_flops(rows, self.rank(), self.d_out())
    }

    pub fn cast<U: Scalar>(&self) -> FactorizedLinear<U> {
        FactorizedLinear {
            u: self.u.cast(),
            v: self.v.cast(),
            bias: self.bias.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }
}

/// Rank-`r` truncated SVD of `w` with the singular values split evenly.
pub fn factorize_linear<T: Scalar>(w: &Tensor<T>, bias: &[T], r: usize) -> Result<FactorizedLinear<T>> {
    let (d_in, d_out) = w.dims2()?;
    if r == 0 || r > d_in.min(d_out) {
        return Err(Error::Rank {
            requested: r,
            max: d_in.min(d_out),
        });
    }
    let pair = truncate_even_split(&svd(w)?, r)?;
    FactorizedLinear::new(pair.left, pair.right, bias.to_vec())
}

/// How the square attention projections are cut before factorization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// The whole `D_A × D_A` matrix is one unit.
    SingleHead,
    /// One `D_A × d_h` column block per head.
    MultiHead,
    /// `G` column blocks of width `D_A / G`, each spanning `H / G` heads.
    Grouped(usize),
}

impl HeadMode {
    /// Number of factorized units per projection.
    pub fn units(self, heads: usize) -> usize {
        match self {
            HeadMode::SingleHead => 1,
            HeadMode::MultiHead => heads,
            HeadMode::Grouped(g) => g,
        }
    }

    /// Mode with the given unit count; `1` and `heads` map to the named modes.
    pub fn from_groups(groups: usize, heads: usize) -> Self {
        if groups == 1 {
            HeadMode::SingleHead
        } else if groups == heads {
            HeadMode::MultiHead
        } else {
            HeadMode::Grouped(groups)
        }
    }

    pub fn validate(self, d_model: usize, heads: usize) -> Result<()> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "heads ({heads}) must divide d_model ({d_model})"
            )));
        }
        if let HeadMode::Grouped(g) = self {
            if g == 0 || !heads.is_multiple_of(g) {
                return Err(Error::config(format!("groups ({g}) must divide heads ({heads})")));
            }
        }
        Ok(())
    }
}

/// Dense attention parameters, `W_*: D_A × D_A`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseAttention<T> {
    pub heads: usize,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bq: Vec<T>,
    pub bk: Vec<T>,
    pub bv: Vec<T>,
    pub bo: Vec<T>,
}

impl<T: Scalar> DenseAttention<T> {
    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.shape() != [d, d] {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected [{d}, {d}]",
                    w.shape()
                )));
            }
        }
        for (name, b) in [("bq", &self.bq), ("bk", &self.bk), ("bv", &self.bv), ("bo", &self.bo)] {
            if b.len() != d {
                return Err(Error::shape(format!("{name} has {} entries, expected {d}", b.len())));
            }
        }
        HeadMode::MultiHead.validate(d, self.heads)
    }

    pub fn cast<U: Scalar>(&self) -> DenseAttention<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        DenseAttention {
            heads: self.heads,
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            bq: c(&self.bq),
            bk: c(&self.bk),
            bv: c(&self.bv),
            bo: c(&self.bo),
        }
    }
}

/// Index of a projection inside an attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn tag(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }
}

/// Per-unit q/k/v factors of one attention block plus its output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionFactorSet<T> {
    mode: HeadMode,
    heads: usize,
    d_model: usize,
    /// Indexed by [`Projection`], then by unit.
    qkv: [Vec<FactorizedLinear<T>>; 3],
    output: FactorizedLinear<T>,
}

impl<T: Scalar> AttentionFactorSet<T> {
    pub fn new(
        mode: HeadMode,
        heads: usize,
        qkv: [Vec<FactorizedLinear<T>>; 3],
        output: FactorizedLinear<T>,
    ) -> Result<Self> {
        let d_model = output.d_in();
        mode.validate(d_model, heads)?;
        if output.d_out() != d_model {
            return Err(Error::shape("output projection must be square"));
        }
        let units = mode.units(heads);
        let width = d_model / units;
        let rank = qkv[0].first().map(|f| f.rank()).unwrap_or(0);
        for (p, list) in Projection::ALL.iter().zip(&qkv) {
            if list.len() != units {
                return Err(Error::shape(format!(
                    "{} has {} units, mode needs {units}",
                    p.tag(),
                    list.len()
                )));
            }
            for f in list {
                if f.d_in() != d_model || f.d_out() != width {
                    return Err(Error::shape(format!(
                        "{} unit is {}×{}, expected {d_model}×{width}",
                        p.tag(),
                        f.d_in(),
                        f.d_out()
                    )));
                }
                if f.rank() != rank {
                    return Err(Error::config("all attention units must share one rank"));
                }
            }
        }
        Ok(Self {
            mode,
            heads,
            d_model,
            qkv,
            output,
        })
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn units(&self) -> usize {
        self.mode.units(self.heads)
    }

    /// Output width of one unit, `D_A / units`.
    pub fn unit_width(&self) -> usize {
        self.d_model / self.units()
    }

    pub fn heads_per_unit(&self) -> usize {
        self.heads / self.units()
    }

    pub fn rank(&self) -> usize {
        self.qkv[0][0].rank()
    }

    pub fn units_of(&self, p: Projection) -> &[FactorizedLinear<T>] {
        &self.qkv[p as usize]
    }

    pub fn output(&self) -> &FactorizedLinear<T> {
        &self.output
    }

    /// q/k/v weight parameters (biases excluded).
    pub fn param_count_qkv(&self) -> u64 {
        self.qkv.iter().flatten().map(|f| f.param_count()).sum()
    }

    /// Dense weights reassembled from the factors, column blocks in unit order.
    pub fn reconstruct(&self) -> DenseAttention<T> {
        let join = |p: Projection| {
            let blocks: Vec<Tensor<T>> = self.units_of(p).iter().map(|f| f.reconstruct()).collect();
            hcat(&blocks)
        };
        let biases =
            |p: Projection| -> Vec<T> { self.units_of(p).iter().flat_map(|f| f.bias().iter().copied()).collect() };
        DenseAttention {
            heads: self.heads,
            wq: join(Projection::Query),
            wk: join(Projection::Key),
            wv: join(Projection::Value),
            wo: self.output.reconstruct(),
            bq: biases(Projection::Query),
            bk: biases(Projection::Key),
            bv: biases(Projection::Value),
            bo: self.output.bias().to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AttentionFactorSet<U> {
        let c = |l: &Vec<FactorizedLinear<T>>| l.iter().map(|f| f.cast()).collect();
        AttentionFactorSet {
            mode: self.mode,
            heads: self.heads,
            d_model: self.d_model,
            qkv: [c(&self.qkv[0]), c(&self.qkv[1]), c(&self.qkv[2])],
            output: self.output.cast(),
        }
    }
}

fn hcat<T: Scalar>(blocks: &[Tensor<T>]) -> Tensor<T> {
    let rows = blocks[0].shape()[0];
    let widths: Vec<usize> = blocks.iter().map(|b| b.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for (b, &w) in blocks.iter().zip(&widths) {
            data.extend_from_slice(&b.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(vec![rows, total], data).expect("blocks share row count")
}

/// Factorizes q/k/v per unit at rank `rank`, and the output projection as a
/// single matrix at rank `out_rank`.
pub fn factorize_attention<T: Scalar>(
    dense: &DenseAttention<T>,
    mode: HeadMode,
    rank: usize,
    out_rank: usize,
) -> Result<AttentionFactorSet<T>> {
    dense.validate()?;
    let d = dense.d_model();
    mode.validate(d, dense.heads)?;
    let units = mode.units(dense.heads);
    let width = d / units;
    if rank == 0 || rank > width {
        return Err(Error::Rank {
            requested: rank,
            max: width,
        });
    }
    let split = |w: &Tensor<T>, b: &[T]| -> Result<Vec<FactorizedLinear<T>>> {
        (0..units)
            .map(|u| factorize_linear(&w.col_block(u * width, width)?, &b[u * width..(u + 1) * width], rank))
            .collect()
    };
    let qkv = [
        split(&dense.wq, &dense.bq)?,
        split(&dense.wk, &dense.bk)?,
        split(&dense.wv, &dense.bv)?,
    ];
    let output = factorize_linear(&dense.wo, &dense.bo, out_rank)?;
    AttentionFactorSet::new(mode, dense.heads, qkv, output)
}

/// Dense parameter count of one `D_A × D_A` projection.
pub fn dense_param_count(d_model: usize) -> u64 {
    (d_model * d_model) as u64
}

/// Factorized parameters of one `D_A × D_A` projection at per-unit rank `r`:
/// `units · r · (D_A + D_A/units)`. Single head gives `2·D_A·r`, multi-head
/// `H·r·(D_A + d_h)`.
pub fn param_count(mode: HeadMode, d_model: usize, heads: usize, r: usize) -> u64 {
    let units = mode.units(heads) as u64;
    let (d, r) = (d_model as u64, r as u64);
    units * r * (d + d / units)
}

/// Largest rank (exclusive) at which the factorized projection is smaller than
/// the dense one: `D_A / (units + 1)`.
pub fn param_threshold(mode: HeadMode, d_model: usize, heads: usize) -> Rational {
    ratio(d_model as u128, mode.units(heads) as u128 + 1)
}

/// Outcome of fitting q/k/v into a parameter budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankLoss {
    pub rank: usize,
    pub max_rank: usize,
    /// `1 − rank / max_rank`
    pub loss: f64,
}

/// Largest uniform rank whose q/k/v parameter total fits in `budget`.
///
/// A budget that already holds the dense q/k/v weights needs no truncation
/// and reports zero loss.
pub fn rank_loss_for_budget(mode: HeadMode, d_model: usize, heads: usize, budget: u64) -> Result<RankLoss> {
    mode.validate(d_model, heads)?;
    let max_rank = d_model / mode.units(heads);
    if budget >= 3 * dense_param_count(d_model) {
        return Ok(RankLoss {
            rank: max_rank,
            max_rank,
            loss: 0.0,
        });
    }
    let per_rank = 3 * param_count(mode, d_model, heads, 1);
    let rank = ((budget / per_rank) as usize).min(max_rank);
    if rank == 0 {
        return Err(Error::Infeasible(format!(
            "budget of {budget} parameters cannot hold q/k/v even at rank 1 ({per_rank} needed)"
        )));
    }
    Ok(RankLoss {
        rank,
        max_rank,
        loss: 1.0 - rank as f64 / max_rank as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn gaussian(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, 1.0).unwrap();
        Tensor::from_fn(shape.to_vec(), |_| n.sample(&mut rng)).unwrap()
    }

    fn dense_attention(d: usize, heads: usize, seed: u64) -> DenseAttention<f32> {
        DenseAttention {
            heads,
            wq: gaussian(&[d, d], seed),
            wk: gaussian(&[d, d], seed + 1),
            wv: gaussian(&[d, d], seed + 2),
            wo: gaussian(&[d, d], seed + 3),
            bq: vec![0.1; d],
            bk: vec![0.2; d],
            bv: vec![0.3; d],
            bo: vec![0.4; d],
        }
    }

    #[test]
    fn identity_factorizes_exactly() {
        let w = Tensor::<f32>::eye(4).unwrap();
        let f = factorize_linear(&w, &[0.0; 4], 4).unwrap();
        assert!(f.reconstruct().max_abs_diff(&w).unwrap() <= 1e-5);
    }

    #[test]
    fn residual_matches_tail_energy() {
        let w: Tensor<f64> = gaussian(&[8, 8], 11).cast();
        let f = factorize_linear(&w, &[0.0; 8], 2).unwrap();
        let resid: f64 = w
            .data()
            .iter()
            .zip(f.reconstruct().data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let tail = svd(&w).unwrap().tail_energy(2);
        assert!((resid - tail).abs() <= 1e-6 * tail);
    }

    #[test]
    fn zero_rank_is_rejected() {
        let w = Tensor::<f32>::eye(4).unwrap();
        assert!(matches!(
            factorize_linear(&w, &[0.0; 4], 0),
            Err(Error::Rank { requested: 0, .. })
        ));
    }

    #[test]
    fn bias_is_carried_unchanged() {
        let w = gaussian(&[6, 3], 4);
        let f = factorize_linear(&w, &[1.0, -2.0, 3.5], 2).unwrap();
        assert_eq!(f.bias(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn one_head_multi_equals_single() {
        let dense = dense_attention(8, 1, 0);
        let a = factorize_attention(&dense, HeadMode::MultiHead, 4, 4).unwrap();
        let b = factorize_attention(&dense, HeadMode::SingleHead, 4, 4).unwrap();
        for p in Projection::ALL {
            assert_eq!(a.units_of(p), b.units_of(p));
        }
    }

    #[test]
    fn groups_equal_heads_matches_multi_head() {
        let dense = dense_attention(8, 4, 1);
        let a = factorize_attention(&dense, HeadMode::MultiHead, 2, 8).unwrap();
        let b = factorize_attention(&dense, HeadMode::Grouped(4), 2, 8).unwrap();
        for p in Projection::ALL {
            assert_eq!(a.units_of(p), b.units_of(p));
        }
    }

    #[test]
    fn multi_head_units_slice_head_columns() {
        let dense = dense_attention(12, 3, 2);
        let set = factorize_attention(&dense, HeadMode::MultiHead, 4, 12).unwrap();
        assert_eq!(set.units(), 3);
        for f in set.units_of(Projection::Key) {
            assert_eq!((f.d_in(), f.d_out(), f.rank()), (12, 4, 4));
        }
        // full per-head rank reconstructs every block
        let back = set.reconstruct();
        assert!(back.wk.max_abs_diff(&dense.wk).unwrap() < 1e-4);
        assert_eq!(back.bk, dense.bk);
    }

    #[test]
    fn divisibility_violations_are_config_errors() {
        let dense = dense_attention(8, 4, 3);
        assert!(matches!(
            factorize_attention(&dense, HeadMode::Grouped(3), 1, 1),
            Err(Error::Config(_))
        ));
        let mut bad = dense.clone();
        bad.heads = 3;
        assert!(matches!(
            factorize_attention(&bad, HeadMode::MultiHead, 1, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            factorize_attention(&dense, HeadMode::MultiHead, 3, 1),
            Err(Error::Rank { .. })
        ));
    }

    #[test]
    fn bert_base_unit_shape() {
        // Shape-only check: 768×64 blocks for twelve heads.
        let mode = HeadMode::MultiHead;
        assert_eq!(mode.units(12), 12);
        assert_eq!(768 / mode.units(12), 64);
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(param_count(HeadMode::MultiHead, 768, 12, 64), 638_976);
        assert_eq!(param_count(HeadMode::MultiHead, 768, 12, 64), 13 * 768 * 64);
        assert_eq!(dense_param_count(768), 589_824);
        assert_eq!(param_count(HeadMode::SingleHead, 768, 12, 384), 589_824);
        assert_eq!(
            param_count(HeadMode::Grouped(1), 768, 12, 7),
            param_count(HeadMode::SingleHead, 768, 12, 7)
        );
    }

    #[test]
    fn grouped_counts_interpolate_monotonically() {
        for r in [1, 8, 32] {
            let counts: Vec<u64> = [1usize, 2, 3, 4, 6, 12]
                .iter()
                .map(|&g| param_count(HeadMode::from_groups(g, 12), 768, 12, r))
                .collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(counts[0], param_count(HeadMode::SingleHead, 768, 12, r));
            assert_eq!(counts[5], param_count(HeadMode::MultiHead, 768, 12, r));
        }
    }

    #[test]
    fn set_param_count_matches_closed_form() {
        let dense = dense_attention(16, 4, 5);
        let set = factorize_attention(&dense, HeadMode::MultiHead, 3, 5).unwrap();
        assert_eq!(set.param_count_qkv(), 3 * param_count(HeadMode::MultiHead, 16, 4, 3));
    }

    #[test]
    fn thresholds() {
        assert_eq!(param_threshold(HeadMode::MultiHead, 768, 12), Rational::new(768, 13));
        assert_eq!(
            param_threshold(HeadMode::SingleHead, 768, 12),
            Rational::from_integer(384)
        );
        assert_eq!(
            param_threshold(HeadMode::MultiHead, 768, 1),
            param_threshold(HeadMode::SingleHead, 768, 1)
        );
        for d in (64..=1024).step_by(64) {
            for h in [2usize, 4, 8, 12, 16] {
                assert!(param_threshold(HeadMode::MultiHead, d, h) < param_threshold(HeadMode::SingleHead, d, h));
            }
        }
    }

    #[test]
    fn threshold_is_the_exact_break_even() {
        for h in [1usize, 2, 4, 8, 12] {
            let d = 96 * h;
            let t = param_threshold(HeadMode::MultiHead, d, h);
            for r in 1..=d / h {
                let smaller = param_count(HeadMode::MultiHead, d, h, r) < dense_param_count(d);
                assert_eq!(smaller, Rational::from_integer(r as i128) < t, "d={d} h={h} r={r}");
            }
        }
    }

    #[test]
    fn budget_rank_loss() {
        let single = rank_loss_for_budget(HeadMode::SingleHead, 768, 12, 1_500_000).unwrap();
        let multi = rank_loss_for_budget(HeadMode::MultiHead, 768, 12, 1_500_000).unwrap();
        assert!((single.loss - 0.56).abs() <= 0.05, "{single:?}");
        assert!((multi.loss - 0.19).abs() <= 0.05, "{multi:?}");
        assert_eq!((single.rank, multi.rank), (325, 50));
        let full = rank_loss_for_budget(HeadMode::SingleHead, 768, 12, 3 * 768 * 768).unwrap();
        assert_eq!(full.loss, 0.0);
        assert!(matches!(
            rank_loss_for_budget(HeadMode::MultiHead, 768, 12, 10),
            Err(Error::Infeasible(_))
        ));
    }
}
