//! Feed-forward kernels over low-rank up/down projections.
//!
//! `ffn_v1` keeps the rank-space tensors `P = X·U_i` and `Z` off chip and
//! streams the `D_F`-wide activation through tiles; `ffn_v2` recomputes `P`
//! per tile and keeps nothing off chip. The dense and naive low-rank paths
//! materialize the full `(B·M)×D_F` activation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorizer::FactorizedLinear;
use crate::gemm::{add_row_bias, gemm_bt, gemm_flops, gemm_slices, matmul_rows, transpose};
use crate::memtier::{validate_tile_plan, AllocationClass, KernelKind, MemoryMeter, Metered, TilePlan};
use crate::ops::Activation;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Low-rank FFN weights `φ(X·U_i·V_i + b_i)·U_o·V_o + b_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnFactors<T> {
    up: FactorizedLinear<T>,
    down: FactorizedLinear<T>,
    activation: Activation,
}

impl<T: Scalar> FfnFactors<T> {
    pub fn new(up: FactorizedLinear<T>, down: FactorizedLinear<T>, activation: Activation) -> Result<Self> {
        if up.d_out() != down.d_in() || up.d_in() != down.d_out() {
            return Err(Error::shape(format!(
                "ffn projections do not chain: up {}→{}, down {}→{}",
                up.d_in(),
                up.d_out(),
                down.d_in(),
                down.d_out()
            )));
        }
        Ok(Self { up, down, activation })
    }

    pub fn up(&self) -> &FactorizedLinear<T> {
        &self.up
    }

    pub fn down(&self) -> &FactorizedLinear<T> {
        &self.down
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn d_model(&self) -> usize {
        self.up.d_in()
    }

    pub fn d_ff(&self) -> usize {
        self.up.d_out()
    }

    /// Dense weights `Ũ_i·Ṽ_i`, `Ũ_o·Ṽ_o`.
    pub fn reconstruct(&self) -> DenseFfn<T> {
        DenseFfn {
            w_in: self.up.reconstruct(),
            b_in: self.up.bias().to_vec(),
            w_out: self.down.reconstruct(),
            b_out: self.down.bias().to_vec(),
            activation: self.activation,
        }
    }

    pub fn cast<U: Scalar>(&self) -> FfnFactors<U> {
        FfnFactors {
            up: self.up.cast(),
            down: self.down.cast(),
            activation: self.activation,
        }
    }

    fn register<'m>(&self, meter: &'m MemoryMeter) -> [Metered<'m, ()>; 4] {
        [
            meter.persistent("ffn.up.U", self.up.u().nbytes()),
            meter.persistent("ffn.up.V", self.up.v().nbytes()),
            meter.persistent("ffn.down.U", self.down.u().nbytes()),
            meter.persistent("ffn.down.V", self.down.v().nbytes()),
        ]
    }
}

/// Dense FFN weights, `W_in: D_A×D_F`, `W_out: D_F×D_A`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseFfn<T> {
    pub w_in: Tensor<T>,
    pub b_in: Vec<T>,
    pub w_out: Tensor<T>,
    pub b_out: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseFfn<T> {
    pub fn d_model(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (d, f) = self.w_in.dims2()?;
        let (f2, d2) = self.w_out.dims2()?;
        if f != f2 || d != d2 || self.b_in.len() != f || self.b_out.len() != d {
            return Err(Error::shape(format!(
                "dense ffn shapes disagree: W_in {d}×{f}, W_out {f2}×{d2}, biases {}/{}",
                self.b_in.len(),
                self.b_out.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DenseFfn<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        DenseFfn {
            w_in: self.w_in.cast(),
            b_in: c(&self.b_in),
            w_out: self.w_out.cast(),
            b_out: c(&self.b_out),
            activation: self.activation,
        }
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, d_model: usize) -> Result<(usize, usize)> {
    let (b, m, d) = x.dims3()?;
    if d != d_model {
        return Err(Error::shape(format!(
            "input width {d} does not match d_model {d_model}"
        )));
    }
    Ok((b, m))
}

/// `(first_row, rows)` of every sequence tile, tiles never crossing a batch
/// boundary.
fn sequence_tiles(b: usize, m: usize, block_m: usize) -> Vec<(usize, usize)> {
    (0..b)
        .flat_map(|bi| {
            (0..m)
                .step_by(block_m)
                .map(move |i0| (bi * m + i0, block_m.min(m - i0)))
        })
        .collect()
}

/// Weights of the fused inner loop, laid out for row-contiguous block access.
struct InnerWeights<'a, T> {
    /// `V_iᵀ`, `D_F × r_up`.
    v_up_t: Vec<T>,
    b_up: &'a [T],
    /// `U_o`, `D_F × r_down`.
    u_down: &'a [T],
    r_up: usize,
    r_down: usize,
    d_ff: usize,
    activation: Activation,
}

impl<'a, T: Scalar> InnerWeights<'a, T> {
    fn new(f: &'a FfnFactors<T>) -> Self {
        let (r_up, d_ff) = (f.up.rank(), f.d_ff());
        Self {
            v_up_t: transpose(r_up, d_ff, f.up.v().data()),
            b_up: f.up.bias(),
            u_down: f.down.u().data(),
            r_up,
            r_down: f.down.rank(),
            d_ff,
            activation: f.activation,
        }
    }

    /// `Z_tile = Σ_d φ(P_tile·V_i[:, d] + b_i[d])·U_o[d, :]` over feature
    /// blocks of width `block_df`; only one `rows × block_df` block of the
    /// activation exists at a time.
    fn z_tile(&self, rows: usize, p_tile: &[T], block_df: usize) -> (Vec<T>, u64) {
        let (ru, rd) = (self.r_up, self.r_down);
        let mut z = vec![T::zero(); rows * rd];
        let mut y = vec![T::zero(); rows * block_df];
        let mut flops = 0;
        for d0 in (0..self.d_ff).step_by(block_df) {
            let w = block_df.min(self.d_ff - d0);
            let y = &mut y[..rows * w];
            gemm_bt(rows, ru, w, p_tile, &self.v_up_t[d0 * ru..(d0 + w) * ru], y, false);
            for row in y.chunks_exact_mut(w) {
                for (v, &b) in row.iter_mut().zip(&self.b_up[d0..d0 + w]) {
                    *v = self.activation.apply(*v + b);
                }
            }
            gemm_slices(rows, w, rd, y, &self.u_down[d0 * rd..(d0 + w) * rd], &mut z, true);
            flops += gemm_flops(rows, ru, w) + gemm_flops(rows, w, rd);
        }
        (z, flops)
    }
}

fn ffn_kind<T: Scalar>(f: &FfnFactors<T>, m: usize, v2: bool) -> KernelKind {
    let (seq_len, d_ff, rank_up, rank_down) = (m, f.d_ff(), f.up.rank(), f.down.rank());
    if v2 {
        KernelKind::FfnV2 {
            seq_len,
            d_ff,
            rank_up,
            rank_down,
        }
    } else {
        KernelKind::FfnV1 {
            seq_len,
            d_ff,
            rank_up,
            rank_down,
        }
    }
}

/// Streaming FFN with rank-space intermediates off chip: `P` and `Z`
/// (`(B·M)×r` each) are transient, the `D_F`-wide activation is not.
pub fn ffn_v1<T: Scalar>(x: &Tensor<T>, f: &FfnFactors<T>, plan: &TilePlan, meter: &MemoryMeter) -> Result<Tensor<T>> {
    let (b, m) = check_input(x, f.d_model())?;
    validate_tile_plan(plan, &ffn_kind(f, m, false), T::BYTES as u64)?;
    let _resident = f.register(meter);
    let (rows, d, ru, rd) = (b * m, f.d_model(), f.up.rank(), f.down.rank());

    let p = meter.track(
        "ffn.P",
        AllocationClass::Transient,
        Tensor::new(vec![rows, ru], matmul_rows(rows, x.data(), f.up.u()))?,
    );
    let mut z = meter.tensor::<T>("ffn.Z", AllocationClass::Transient, vec![rows, rd])?;
    let inner = InnerWeights::new(f);
    let tiles = sequence_tiles(b, m, plan.block_m);
    let parts: Vec<(Vec<T>, u64)> = tiles
        .par_iter()
        .map(|&(r0, n)| inner.z_tile(n, &p.data()[r0 * ru..(r0 + n) * ru], plan.block_df))
        .collect();
    let mut flops = gemm_flops(rows, d, ru) + gemm_flops(rows, rd, d);
    for (&(r0, n), (zt, fl)) in tiles.iter().zip(parts) {
        z.data_mut()[r0 * rd..(r0 + n) * rd].copy_from_slice(&zt);
        flops += fl;
    }
    let mut out = matmul_rows(rows, z.data(), f.down.v());
    add_row_bias(&mut out, f.down.bias());
    meter.record_flops(flops);
    Tensor::new(vec![b, m, d], out)
}

/// Fully fused streaming FFN: each sequence tile recomputes `P_tile` on chip
/// and writes its output rows directly; nothing transient goes off chip.
pub fn ffn_v2<T: Scalar>(x: &Tensor<T>, f: &FfnFactors<T>, plan: &TilePlan, meter: &MemoryMeter) -> Result<Tensor<T>> {
    let (b, m) = check_input(x, f.d_model())?;
    validate_tile_plan(plan, &ffn_kind(f, m, true), T::BYTES as u64)?;
    let _resident = f.register(meter);
    let (d, ru, rd) = (f.d_model(), f.up.rank(), f.down.rank());
    let inner = InnerWeights::new(f);
    let tiles = sequence_tiles(b, m, plan.block_m);
    let parts: Vec<(Vec<T>, u64)> = tiles
        .par_iter()
        .map(|&(r0, n)| {
            let mut p_tile = vec![T::zero(); n * ru];
            gemm_slices(
                n,
                d,
                ru,
                &x.data()[r0 * d..(r0 + n) * d],
                f.up.u().data(),
                &mut p_tile,
                false,
            );
            let (z_tile, fl) = inner.z_tile(n, &p_tile, plan.block_df);
            let mut o = vec![T::zero(); n * d];
            gemm_slices(n, rd, d, &z_tile, f.down.v().data(), &mut o, false);
            add_row_bias(&mut o, f.down.bias());
            (o, fl + gemm_flops(n, d, ru) + gemm_flops(n, rd, d))
        })
        .collect();
    let mut out = vec![T::zero(); b * m * d];
    let mut flops = 0;
    for (&(r0, n), (o, fl)) in tiles.iter().zip(parts) {
        out[r0 * d..(r0 + n) * d].copy_from_slice(&o);
        flops += fl;
    }
    meter.record_flops(flops);
    Tensor::new(vec![b, m, d], out)
}

/// Reference FFN on dense weights; `Y = X·W_in` is materialized.
pub fn ffn_dense_oracle<T: Scalar>(x: &Tensor<T>, w: &DenseFfn<T>, meter: &MemoryMeter) -> Result<Tensor<T>> {
    w.validate()?;
    let (b, m) = check_input(x, w.d_model())?;
    let (rows, d, df) = (b * m, w.d_model(), w.d_ff());
    let _resident = [
        meter.persistent("ffn.up.W", w.w_in.nbytes()),
        meter.persistent("ffn.down.W", w.w_out.nbytes()),
    ];
    let mut y = matmul_rows(rows, x.data(), &w.w_in);
    add_row_bias(&mut y, &w.b_in);
    for v in &mut y {
        *v = w.activation.apply(*v);
    }
    let y = meter.track("ffn.Y", AllocationClass::Transient, Tensor::new(vec![rows, df], y)?);
    let mut out = matmul_rows(rows, y.data(), &w.w_out);
    add_row_bias(&mut out, &w.b_out);
    meter.record_flops(2 * gemm_flops(rows, d, df));
    Tensor::new(vec![b, m, d], out)
}

/// Low-rank weights applied without streaming: the activation
/// `φ(X·U_i·V_i + b_i)` is materialized at full `(B·M)×D_F`.
pub fn ffn_naive_lowrank<T: Scalar>(x: &Tensor<T>, f: &FfnFactors<T>, meter: &MemoryMeter) -> Result<Tensor<T>> {
    let (b, m) = check_input(x, f.d_model())?;
    let rows = b * m;
    let _resident = f.register(meter);
    let mut y = f.up.forward_rows(rows, x.data());
    for v in &mut y {
        *v = f.activation.apply(*v);
    }
    let y = meter.track(
        "ffn.Y",
        AllocationClass::Transient,
        Tensor::new(vec![rows, f.d_ff()], y)?,
    );
    let out = f.down.forward_rows(rows, y.data());
    meter.record_flops(f.up.forward_flops(rows) + f.down.forward_flops(rows));
    Tensor::new(vec![b, m, f.d_model()], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorizer::factorize_linear;
    use crate::geometry::Geometry;
    use crate::memtier::{expected_bytes, Formula};
    use proptest::prelude::*;
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

    fn random_factors(seed: u64, d: usize, df: usize, ru: usize, rd: usize, act: Activation) -> FfnFactors<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lin = |rng: &mut ChaCha8Rng, din: usize, dout: usize, r: usize| {
            let s = (1.0 / din as f64).sqrt().sqrt();
            FactorizedLinear::new(
                randn(rng, vec![din, r], s),
                randn(rng, vec![r, dout], s / (r as f64).sqrt()),
                randn(rng, vec![dout], 0.1).into_data(),
            )
            .unwrap()
        };
        let up = lin(&mut rng, d, df, ru);
        let down = lin(&mut rng, df, d, rd);
        FfnFactors::new(up, down, act).unwrap()
    }

    fn input(seed: u64, b: usize, m: usize, d: usize) -> Tensor<f32> {
        randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), vec![b, m, d], 1.0)
    }

    #[test]
    fn linear_collapse_with_identity_activation() {
        let mut f = random_factors(1, 16, 64, 8, 8, Activation::Identity);
        f.up = FactorizedLinear::new(f.up.u().clone(), f.up.v().clone(), vec![0.0; 64]).unwrap();
        f.down = FactorizedLinear::new(f.down.u().clone(), f.down.v().clone(), vec![0.0; 16]).unwrap();
        let x = input(1, 2, 10, 16);
        let chain = [f.up.u(), f.up.v(), f.down.u(), f.down.v()]
            .iter()
            .fold(x.clone().reshape(vec![20, 16]).unwrap(), |acc, w| {
                crate::gemm::gemm(&acc, w, None).unwrap()
            });
        let o = ffn_v1(&x, &f, &TilePlan::new(4, 4, 16), &MemoryMeter::new()).unwrap();
        assert!(o.reshape(vec![20, 16]).unwrap().max_abs_diff(&chain).unwrap() <= 1e-4);
    }

    #[test]
    fn reference_case_and_meter() {
        let f = random_factors(2, 64, 256, 32, 32, Activation::Gelu);
        let x = input(2, 2, 64, 64);
        let g = Geometry::multi_head(2, 64, 64, 256, 4, 32);

        let m1 = MemoryMeter::new();
        let v1 = ffn_v1(&x, &f, &TilePlan::default(), &m1).unwrap();
        assert_eq!(m1.peak(AllocationClass::Transient), 32_768);
        assert_eq!(m1.peak(AllocationClass::Transient), expected_bytes(Formula::FfnV1, &g));

        let m2 = MemoryMeter::new();
        let v2 = ffn_v2(&x, &f, &TilePlan::default(), &m2).unwrap();
        assert_eq!(m2.peak(AllocationClass::Transient), 0);

        let m3 = MemoryMeter::new();
        let dense = ffn_dense_oracle(&x, &f.reconstruct(), &m3).unwrap();
        assert_eq!(m3.peak(AllocationClass::Transient), 131_072);

        let m4 = MemoryMeter::new();
        let naive = ffn_naive_lowrank(&x, &f, &m4).unwrap();
        assert_eq!(
            m4.peak(AllocationClass::Transient),
            expected_bytes(Formula::FfnNaiveLowRank, &g)
        );

        for o in [&v2, &dense, &naive] {
            assert!(v1.max_abs_diff(o).unwrap() <= 1e-4);
        }
        assert_eq!(m1.flops(), m2.flops());
        assert_eq!(m1.peak(AllocationClass::Persistent), 4 * 32 * (2 * 64 + 2 * 256));
    }

    #[test]
    fn identity_factors_pass_input_through() {
        let (d, df) = (6, 12);
        let sel = |rows: usize, cols: usize| {
            Tensor::<f32>::from_fn(vec![rows, cols], |i| (i[0] == i[1]) as u8 as f32).unwrap()
        };
        let up = FactorizedLinear::new(sel(d, d), sel(d, df), vec![0.0; df]).unwrap();
        let down = FactorizedLinear::new(sel(df, d), sel(d, d), vec![0.0; d]).unwrap();
        let f = FfnFactors::new(up, down, Activation::Identity).unwrap();
        let x = input(3, 1, 5, d);
        let o = ffn_v2(&x, &f, &TilePlan::new(2, 4, 4), &MemoryMeter::new()).unwrap();
        assert!(o.max_abs_diff(&x).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let f = random_factors(4, 8, 32, 4, 4, Activation::Relu);
        let mut w = f.reconstruct();
        w.b_in = vec![0.0; 32];
        w.b_out = vec![0.0; 8];
        let o = ffn_dense_oracle(&Tensor::zeros(vec![2, 3, 8]).unwrap(), &w, &MemoryMeter::new()).unwrap();
        assert!(o.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_precision_tracks_double() {
        let f = random_factors(5, 32, 128, 16, 16, Activation::Gelu);
        let x = input(5, 2, 33, 32);
        let lo = ffn_v1(&x, &f, &TilePlan::default(), &MemoryMeter::new()).unwrap();
        let hi = ffn_dense_oracle(&x.cast::<f64>(), &f.reconstruct().cast::<f64>(), &MemoryMeter::new()).unwrap();
        assert!(lo.cast::<f64>().max_abs_diff(&hi).unwrap() <= 1e-4);
    }

    #[test]
    fn full_rank_recovers_original_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (d, df) = (8, 32);
        let w = DenseFfn {
            w_in: randn(&mut rng, vec![d, df], 0.3),
            b_in: vec![0.05; df],
            w_out: randn(&mut rng, vec![df, d], 0.3),
            b_out: vec![-0.05; d],
            activation: Activation::Gelu,
        };
        let f = FfnFactors::new(
            factorize_linear(&w.w_in, &w.b_in, d).unwrap(),
            factorize_linear(&w.w_out, &w.b_out, d).unwrap(),
            Activation::Gelu,
        )
        .unwrap();
        let x = input(6, 2, 7, d);
        let a = ffn_naive_lowrank(&x, &f, &MemoryMeter::new()).unwrap();
        let b = ffn_dense_oracle(&x, &w, &MemoryMeter::new()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-3);
    }

    #[test]
    fn unequal_ranks_are_supported() {
        let f = random_factors(7, 16, 64, 12, 5, Activation::GeluTanh);
        let x = input(7, 1, 9, 16);
        let a = ffn_v1(&x, &f, &TilePlan::new(4, 4, 16), &MemoryMeter::new()).unwrap();
        let b = ffn_v2(&x, &f, &TilePlan::new(8, 4, 32), &MemoryMeter::new()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-4);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let f = random_factors(8, 16, 64, 4, 4, Activation::Gelu);
        let x = input(8, 1, 4, 12);
        assert!(matches!(
            ffn_v1(&x, &f, &TilePlan::default(), &MemoryMeter::new()),
            Err(Error::Shape(_))
        ));
        let tiny = TilePlan::default().with_budget(64);
        let x = input(8, 1, 4, 16);
        assert!(matches!(
            ffn_v2(&x, &f, &tiny, &MemoryMeter::new()),
            Err(Error::Budget { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn tiling_invariance(bm in prop::sample::select(vec![8usize, 16, 32]), bdf in prop::sample::select(vec![16usize, 32, 64])) {
            let f = random_factors(9, 32, 128, 12, 12, Activation::Gelu);
            let x = input(9, 2, 33, 32);
            let base = ffn_v1(&x, &f, &TilePlan::new(8, 4, 16), &MemoryMeter::new()).unwrap();
            let plan = TilePlan::new(bm, 4, bdf);
            let a = ffn_v1(&x, &f, &plan, &MemoryMeter::new()).unwrap();
            let b = ffn_v2(&x, &f, &plan, &MemoryMeter::new()).unwrap();
            prop_assert!(a.max_abs_diff(&base).unwrap() <= 1e-4);
            prop_assert!(b.max_abs_diff(&base).unwrap() <= 1e-4);
        }

        #[test]
        fn meter_ordering(r in 1usize..16, m in 1usize..20) {
            let f = random_factors(10, 16, 32, r.min(16), r.min(16), Activation::Relu);
            let x = input(10, 1, m, 16);
            let (m1, m2, m3) = (MemoryMeter::new(), MemoryMeter::new(), MemoryMeter::new());
            ffn_v1(&x, &f, &TilePlan::default(), &m1).unwrap();
            ffn_v2(&x, &f, &TilePlan::default(), &m2).unwrap();
            ffn_naive_lowrank(&x, &f, &m3).unwrap();
            let t = |m: &MemoryMeter| m.peak(AllocationClass::Transient);
            prop_assert_eq!(t(&m2), 0);
            prop_assert_eq!(t(&m1), 8 * (m * r) as u64);
            prop_assert_eq!(t(&m3), 4 * (m * 32) as u64);
            prop_assert!(t(&m1) > 0);
            prop_assert!(t(&m1) < t(&m3) || 2 * r >= 32);
        }
    }
}
