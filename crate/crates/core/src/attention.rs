//! Attention kernels: the streaming kernel over low-rank q/k/v factors, a
//! streaming kernel over dense Q/K/V, and the materializing references.
//!
//! Activations are `B×M×D_A` tensors. Inside a kernel they are handled as
//! `B·M` row-major rows; head `h` owns feature columns `h·d_h..(h+1)·d_h`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factorizer::{AttentionFactorSet, DenseAttention, FactorizedLinear, Projection};
use crate::gemm::{add_row_bias, gemm_bt, gemm_flops, gemm_slices, matmul_rows};
use crate::memtier::{validate_tile_plan, AllocationClass, KernelKind, MemoryMeter, Metered, TilePlan};
use crate::ops::softmax_in_place;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rank-space projections `P_a = X·U_a`, one `(B·M)×r` buffer per projection
/// and unit, each registered as transient for the lifetime of this value.
#[derive(Debug)]
pub struct ProjectedFactors<'m, T> {
    batch: usize,
    seq_len: usize,
    rank: usize,
    p: [Vec<Metered<'m, Tensor<T>>>; 3],
}

impl<T: Scalar> ProjectedFactors<'_, T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn units(&self) -> usize {
        self.p[0].len()
    }

    /// `P` for one projection and unit, shaped `B×M×r`.
    pub fn get(&self, p: Projection, unit: usize) -> &Tensor<T> {
        &self.p[p as usize][unit]
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

/// Computes `P_a = X·U_a` for every projection and unit.
pub fn project_factors<'m, T: Scalar>(
    x: &Tensor<T>,
    set: &AttentionFactorSet<T>,
    meter: &'m MemoryMeter,
) -> Result<ProjectedFactors<'m, T>> {
    let (b, m) = check_input(x, set.d_model())?;
    let rows = b * m;
    let r = set.rank();
    let mut p: [Vec<Metered<'m, Tensor<T>>>; 3] = Default::default();
    for proj in Projection::ALL {
        for (unit, f) in set.units_of(proj).iter().enumerate() {
            let data = matmul_rows(rows, x.data(), f.u());
            meter.record_flops(gemm_flops(rows, set.d_model(), r));
            let t = Tensor::new(vec![b, m, r], data)?;
            p[proj as usize].push(meter.track(format!("attn.{}.P.{unit}", proj.tag()), AllocationClass::Transient, t));
        }
    }
    Ok(ProjectedFactors {
        batch: b,
        seq_len: m,
        rank: r,
        p,
    })
}

/// Running state of the streaming softmax for one block of query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxState<T> {
    rows: usize,
    width: usize,
    /// Running row maximum.
    pub max: Vec<T>,
    /// Running normalizer, relative to `max`.
    pub sum: Vec<T>,
    /// Unnormalized weighted value sum, `rows × width`.
    pub acc: Vec<T>,
}

impl<T: Scalar> SoftmaxState<T> {
    pub fn new(rows: usize, width: usize) -> Self {
        Self {
            rows,
            width,
            max: vec![T::neg_infinity(); rows],
            sum: vec![T::zero(); rows],
            acc: vec![T::zero(); rows * width],
        }
    }

    /// Folds in one key tile: `scores` is `rows × cols` (already scaled),
    /// `values` is `cols × width`. Returns the GEMM FLOPs spent.
    pub fn update(&mut self, scores: &[T], values: &[T]) -> u64 {
        let cols = scores.len() / self.rows;
        debug_assert_eq!(values.len(), cols * self.width);
        let mut p = scores.to_vec();
        for i in 0..self.rows {
            let row = &mut p[i * cols..(i + 1) * cols];
            let tile_max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let new_max = self.max[i].max(tile_max);
            let alpha = (self.max[i] - new_max).exp();
            let mut tile_sum = T::zero();
            for s in row.iter_mut() {
                *s = (*s - new_max).exp();
                tile_sum += *s;
            }
            self.sum[i] = self.sum[i] * alpha + tile_sum;
            self.max[i] = new_max;
            for a in &mut self.acc[i * self.width..(i + 1) * self.width] {
                *a *= alpha;
            }
        }
        gemm_slices(self.rows, cols, self.width, &p, values, &mut self.acc, true);
        gemm_flops(self.rows, cols, self.width)
    }

    /// `acc / sum`: the softmax-weighted value sum over the keys seen so far.
    pub fn normalized(&self) -> Vec<T> {
        let mut out = self.acc.clone();
        for (row, &l) in out.chunks_exact_mut(self.width).zip(&self.sum) {
            for x in row {
                *x /= l;
            }
        }
        out
    }
}

/// Reconstructs one tile `P·V + bias` rank block by rank block. `p` holds
/// `rows` rows of width `r`; `v` is `r×d_h`. The rank axis is zero-padded to a
/// multiple of `block_r`. Returns the tile and the FLOPs spent.
fn load_tile_raw<T: Scalar>(rows: usize, p: &[T], r: usize, v: &[T], bias: &[T], block_r: usize) -> (Vec<T>, u64) {
    let dh = bias.len();
    let blocks = r.div_ceil(block_r);
    let mut tile = vec![T::zero(); rows * dh];
    let mut p_blk = vec![T::zero(); rows * block_r];
    let mut v_blk = vec![T::zero(); block_r * dh];
    for blk in 0..blocks {
        let r0 = blk * block_r;
        let w = block_r.min(r - r0);
        if w < block_r {
            p_blk.fill(T::zero());
            v_blk.fill(T::zero());
        }
        for i in 0..rows {
            p_blk[i * block_r..i * block_r + w].copy_from_slice(&p[i * r + r0..i * r + r0 + w]);
        }
        v_blk[..w * dh].copy_from_slice(&v[r0 * dh..(r0 + w) * dh]);
        gemm_slices(rows, block_r, dh, &p_blk, &v_blk, &mut tile, true);
    }
    add_row_bias(&mut tile, bias);
    (tile, gemm_flops(rows, blocks * block_r, dh))
}

/// Reconstructs the tile `P_block·V_a + b_a` in rank blocks of `plan.block_r`.
/// `p_block` is `rows×r`, `v` is `r×d_h`.
pub fn load_tile<T: Scalar>(p_block: &Tensor<T>, v: &Tensor<T>, bias: &[T], plan: &TilePlan) -> Result<Tensor<T>> {
    let (rows, r) = p_block.dims2()?;
    let (r2, dh) = v.dims2()?;
    if r != r2 || bias.len() != dh {
        return Err(Error::shape(format!(
            "tile factors disagree: P is {rows}×{r}, V is {r2}×{dh}, bias has {}",
            bias.len()
        )));
    }
    validate_tile_plan(
        plan,
        &KernelKind::LoadTile {
            seq_len: rows,
            head_dim: dh,
        },
        T::BYTES as u64,
    )?;
    let (tile, _) = load_tile_raw(rows, p_block.data(), r, v.data(), bias, plan.block_r);
    Tensor::new(vec![rows, dh], tile)
}

#[derive(Clone, Copy)]
enum Operand {
    Q,
    K,
    V,
}

/// Streams one (batch, head) slice: for each query tile, walk all key tiles
/// with online softmax. `load(op, row0, rows)` produces a `rows×d_h` tile.
fn stream_slice<T: Scalar>(
    m: usize,
    dh: usize,
    block_m: usize,
    load: impl Fn(Operand, usize, usize) -> (Vec<T>, u64),
) -> (Vec<T>, u64) {
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); m * dh];
    let mut flops = 0;
    for i0 in (0..m).step_by(block_m) {
        let qn = block_m.min(m - i0);
        let (q, f) = load(Operand::Q, i0, qn);
        flops += f;
        let mut state = SoftmaxState::new(qn, dh);
        let mut scores = vec![T::zero(); qn * block_m];
        for j0 in (0..m).step_by(block_m) {
            let kn = block_m.min(m - j0);
            let (k, fk) = load(Operand::K, j0, kn);
            let (v, fv) = load(Operand::V, j0, kn);
            let s = &mut scores[..qn * kn];
            gemm_bt(qn, dh, kn, &q, &k, s, false);
            for x in s.iter_mut() {
                *x *= scale;
            }
            flops += fk + fv + gemm_flops(qn, dh, kn) + state.update(s, &v);
        }
        out[i0 * dh..(i0 + qn) * dh].copy_from_slice(&state.normalized());
    }
    (out, flops)
}

/// Runs `slice(b, h)` for every (batch, head) pair in parallel and scatters
/// each `M×d_h` result into a `B×M×D_A` output.
fn per_head<T: Scalar>(
    b: usize,
    m: usize,
    heads: usize,
    dh: usize,
    meter: &MemoryMeter,
    slice: impl Fn(usize, usize) -> (Vec<T>, u64) + Sync,
) -> Result<Tensor<T>> {
    let d = heads * dh;
    let parts: Vec<(Vec<T>, u64)> = (0..b * heads)
        .into_par_iter()
        .map(|bh| slice(bh / heads, bh % heads))
        .collect();
    let mut out = vec![T::zero(); b * m * d];
    let mut flops = 0;
    for (bh, (part, f)) in parts.into_iter().enumerate() {
        let (bi, h) = (bh / heads, bh % heads);
        for (i, row) in part.chunks_exact(dh).enumerate() {
            let o = (bi * m + i) * d + h * dh;
            out[o..o + dh].copy_from_slice(row);
        }
        flops += f;
    }
    meter.record_flops(flops);
    Tensor::new(vec![b, m, d], out)
}

/// Per-head column slice `(V_a[:, cols], b_a[cols])` for each projection.
type HeadFactors<T> = [(Vec<T>, Vec<T>); 3];

fn head_factors<T: Scalar>(set: &AttentionFactorSet<T>, h: usize) -> HeadFactors<T> {
    let (dh, hpu) = (set.head_dim(), set.heads_per_unit());
    let (unit, c0) = (h / hpu, (h % hpu) * dh);
    Projection::ALL.map(|p| {
        let f = &set.units_of(p)[unit];
        let v = f.v().col_block(c0, dh).expect("head slice within unit").into_data();
        (v, f.bias()[c0..c0 + dh].to_vec())
    })
}

/// Streaming attention over low-rank factors. Q/K/V tiles are rebuilt on chip
/// from `P_a` and `V_a`; no `B·M·D_A` projection or `M×M` score buffer is
/// placed off chip. Output heads are concatenated along the feature axis.
pub fn flash_svd_attention<T: Scalar>(
    factors: &ProjectedFactors<'_, T>,
    set: &AttentionFactorSet<T>,
    plan: &TilePlan,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    if factors.units() != set.units() || factors.rank() != set.rank() {
        return Err(Error::shape(format!(
            "projected factors have {} units of rank {}, factor set has {} of rank {}",
            factors.units(),
            factors.rank(),
            set.units(),
            set.rank()
        )));
    }
    let (b, m, r) = (factors.batch(), factors.seq_len(), set.rank());
    let (heads, dh) = (set.heads(), set.head_dim());
    validate_tile_plan(
        plan,
        &KernelKind::SvdAttention {
            seq_len: m,
            head_dim: dh,
        },
        T::BYTES as u64,
    )?;
    let _resident: Vec<_> = Projection::ALL
        .iter()
        .flat_map(|&p| {
            set.units_of(p)
                .iter()
                .enumerate()
                .map(move |(u, f)| meter.persistent(format!("attn.{}.V.{u}", p.tag()), f.v().nbytes()))
        })
        .collect();
    let head_slices: Vec<HeadFactors<T>> = (0..heads).map(|h| head_factors(set, h)).collect();
    let hpu = set.heads_per_unit();
    per_head(b, m, heads, dh, meter, |bi, h| {
        let unit = h / hpu;
        let hf = &head_slices[h];
        stream_slice(m, dh, plan.block_m, |op, row0, rows| {
            let (proj, (v, bias)) = match op {
                Operand::Q => (Projection::Query, &hf[0]),
                Operand::K => (Projection::Key, &hf[1]),
                Operand::V => (Projection::Value, &hf[2]),
            };
            let p = factors.get(proj, unit).data();
            let start = (bi * m + row0) * r;
            load_tile_raw(rows, &p[start..start + rows * r], r, v, bias, plan.block_r)
        })
    })
}

fn dense_qkv<'m, T: Scalar>(
    x: &Tensor<T>,
    dense: &DenseAttention<T>,
    meter: &'m MemoryMeter,
) -> Result<[Metered<'m, Tensor<T>>; 3]> {
    let (b, m) = check_input(x, dense.d_model())?;
    let d = dense.d_model();
    let rows = b * m;
    let mk = |w: &Tensor<T>, bias: &[T], tag: &str| -> Result<Metered<'m, Tensor<T>>> {
        let mut data = matmul_rows(rows, x.data(), w);
        add_row_bias(&mut data, bias);
        meter.record_flops(gemm_flops(rows, d, d));
        Ok(meter.track(tag, AllocationClass::Transient, Tensor::new(vec![b, m, d], data)?))
    };
    Ok([
        mk(&dense.wq, &dense.bq, "attn.Q")?,
        mk(&dense.wk, &dense.bk, "attn.K")?,
        mk(&dense.wv, &dense.bv, "attn.V")?,
    ])
}

fn lowrank_qkv<'m, T: Scalar>(
    x: &Tensor<T>,
    set: &AttentionFactorSet<T>,
    meter: &'m MemoryMeter,
) -> Result<[Metered<'m, Tensor<T>>; 3]> {
    let (b, m) = check_input(x, set.d_model())?;
    let (d, rows, uw) = (set.d_model(), b * m, set.unit_width());
    let mk = |p: Projection| -> Result<Metered<'m, Tensor<T>>> {
        let mut data = vec![T::zero(); rows * d];
        for (u, f) in set.units_of(p).iter().enumerate() {
            let part = f.forward_rows(rows, x.data());
            meter.record_flops(f.forward_flops(rows));
            for (dst, src) in data.chunks_exact_mut(d).zip(part.chunks_exact(uw)) {
                dst[u * uw..(u + 1) * uw].copy_from_slice(src);
            }
        }
        let tag = match p {
            Projection::Query => "attn.Q",
            Projection::Key => "attn.K",
            Projection::Value => "attn.V",
        };
        Ok(meter.track(tag, AllocationClass::Transient, Tensor::new(vec![b, m, d], data)?))
    };
    Ok([mk(Projection::Query)?, mk(Projection::Key)?, mk(Projection::Value)?])
}

/// Row-stochastic attention weights `softmax(Q_h·K_hᵀ/√d_h)` for every batch
/// and head, shaped `B×H×M×M`.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (b, m, d) = q.dims3()?;
    if k.shape() != q.shape() || heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!(
            "cannot split Q {:?} / K {:?} into {heads} heads",
            q.shape(),
            k.shape()
        )));
    }
    let dh = d / heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut scores = vec![T::zero(); b * heads * m * m];
    scores.par_chunks_mut(m * m).enumerate().for_each(|(bh, s)| {
        let (bi, h) = (bh / heads, bh % heads);
        let qh = head_rows(q.data(), bi, m, d, h, dh);
        let kh = head_rows(k.data(), bi, m, d, h, dh);
        gemm_bt(m, dh, m, &qh, &kh, s, false);
        for row in s.chunks_exact_mut(m) {
            for x in row.iter_mut() {
                *x *= scale;
            }
            softmax_in_place(row);
        }
    });
    Tensor::new(vec![b, heads, m, m], scores)
}

fn head_rows<T: Scalar>(data: &[T], bi: usize, m: usize, d: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * dh);
    for i in 0..m {
        let o = (bi * m + i) * d + h * dh;
        out.extend_from_slice(&data[o..o + dh]);
    }
    out
}

/// Materializing attention over given Q/K/V: the full `B×H×M×M` score tensor
/// is registered as transient.
fn attention_from_qkv<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    let (b, m, d) = q.dims3()?;
    let dh = d / heads;
    let weights = meter.track(
        "attn.scores",
        AllocationClass::Transient,
        attention_weights(q, k, heads)?,
    );
    meter.record_flops(2 * (b * heads) as u64 * gemm_flops(m, dh, m));
    per_head(b, m, heads, dh, meter, |bi, h| {
        let p = &weights.data()[(bi * heads + h) * m * m..(bi * heads + h + 1) * m * m];
        let vh = head_rows(v.data(), bi, m, d, h, dh);
        let mut o = vec![T::zero(); m * dh];
        gemm_slices(m, m, dh, p, &vh, &mut o, false);
        (o, 0)
    })
}

/// Reference attention on dense weights: Q, K, V (`B×M×D_A` each) and all
/// `B×H×M×M` scores are materialized off chip.
pub fn dense_attention_oracle<T: Scalar>(
    x: &Tensor<T>,
    dense: &DenseAttention<T>,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    dense.validate()?;
    let w_bytes = dense.wq.nbytes();
    let _resident = [
        meter.persistent("attn.q.W", w_bytes),
        meter.persistent("attn.k.W", w_bytes),
        meter.persistent("attn.v.W", w_bytes),
    ];
    let [q, k, v] = dense_qkv(x, dense, meter)?;
    attention_from_qkv(&q, &k, &v, dense.heads, meter)
}

/// Low-rank weights applied without fusion: Q/K/V are rebuilt in full off
/// chip, then attention proceeds as in the dense reference.
pub fn naive_lowrank_attention<T: Scalar>(
    x: &Tensor<T>,
    set: &AttentionFactorSet<T>,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    let _resident: Vec<_> = Projection::ALL
        .iter()
        .flat_map(|&p| {
            set.units_of(p)
                .iter()
                .enumerate()
                .map(move |(u, f)| meter.persistent(format!("attn.{}.V.{u}", p.tag()), f.v().nbytes()))
        })
        .collect();
    let [q, k, v] = lowrank_qkv(x, set, meter)?;
    attention_from_qkv(&q, &k, &v, set.heads(), meter)
}

/// Streaming attention on dense Q/K/V: the projections are materialized off
/// chip, the scores are not.
pub fn flash_attention_dense_qkv<T: Scalar>(
    x: &Tensor<T>,
    dense: &DenseAttention<T>,
    plan: &TilePlan,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    dense.validate()?;
    let (b, m) = check_input(x, dense.d_model())?;
    let (heads, d) = (dense.heads, dense.d_model());
    let dh = d / heads;
    validate_tile_plan(
        plan,
        &KernelKind::DenseAttention {
            seq_len: m,
            head_dim: dh,
        },
        T::BYTES as u64,
    )?;
    let qkv = dense_qkv(x, dense, meter)?;
    per_head(b, m, heads, dh, meter, |bi, h| {
        stream_slice(m, dh, plan.block_m, |op, row0, rows| {
            let src = qkv[op as usize].data();
            let mut tile = Vec::with_capacity(rows * dh);
            for i in row0..row0 + rows {
                let o = (bi * m + i) * d + h * dh;
                tile.extend_from_slice(&src[o..o + dh]);
            }
            (tile, 0)
        })
    })
}

/// Low-rank output projection `O·U·V + b` through a `(B·M)×r` transient.
pub fn attention_output_projection<T: Scalar>(
    o: &Tensor<T>,
    proj: &FactorizedLinear<T>,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    let (b, m) = check_input(o, proj.d_in())?;
    let rows = b * m;
    let _resident = [
        meter.persistent("attn.o.U", proj.u().nbytes()),
        meter.persistent("attn.o.V", proj.v().nbytes()),
    ];
    let z = meter.track(
        "attn.o.Z",
        AllocationClass::Transient,
        Tensor::new(vec![rows, proj.rank()], matmul_rows(rows, o.data(), proj.u()))?,
    );
    let mut out = matmul_rows(rows, z.data(), proj.v());
    add_row_bias(&mut out, proj.bias());
    meter.record_flops(proj.forward_flops(rows));
    Tensor::new(vec![b, m, proj.d_out()], out)
}

/// Dense `X·W + b` with `W` registered as a resident weight under `tag`.
pub fn dense_linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &[T],
    tag: &str,
    meter: &MemoryMeter,
) -> Result<Tensor<T>> {
    let (d_in, d_out) = w.dims2()?;
    let (b, m) = check_input(x, d_in)?;
    if bias.len() != d_out {
        return Err(Error::shape(format!(
            "bias has {} entries, expected {d_out}",
            bias.len()
        )));
    }
    let _resident = meter.persistent(tag, w.nbytes());
    let mut out = matmul_rows(b * m, x.data(), w);
    add_row_bias(&mut out, bias);
    meter.record_flops(gemm_flops(b * m, d_in, d_out));
    Tensor::new(vec![b, m, d_out], out)
}
