//! Two-tier memory accounting.
//!
//! The off-chip tier is a [`MemoryMeter`]: every kernel registers the buffers
//! it would place in device memory, tagged with an [`AllocationClass`], and the
//! meter keeps exact current/peak counters plus an event log. The on-chip tier
//! is a byte budget that a [`TilePlan`] must satisfy for a given kernel.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bytes per element assumed by the closed-form formulas.
pub const FORMULA_ELEM_BYTES: u64 = 4;

/// Default on-chip budget: 128 KiB.
pub const DEFAULT_SRAM_BUDGET: u64 = 128 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AllocationClass {
    /// Activations whose size depends on batch and sequence length.
    Transient,
    /// Weights resident for the whole region.
    Persistent,
    /// Sublayer inputs and outputs, outside the accounting.
    Excluded,
}

impl AllocationClass {
    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Alloc,
    Free,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterEvent {
    pub id: u64,
    pub tag: String,
    pub class: AllocationClass,
    pub bytes: u64,
    pub kind: EventKind,
}

/// Token for one live allocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Handle(u64);

#[derive(Debug, Default)]
struct MeterState {
    next_id: u64,
    live: BTreeMap<u64, (String, AllocationClass, u64)>,
    current: [u64; 3],
    peak: [u64; 3],
    peak_total: u64,
    events: Vec<MeterEvent>,
    flops: u64,
}

impl MeterState {
    fn bump_peaks(&mut self) {
        for i in 0..3 {
            self.peak[i] = self.peak[i].max(self.current[i]);
        }
        let total = self.current[AllocationClass::Transient.slot()] + self.current[AllocationClass::Persistent.slot()];
        self.peak_total = self.peak_total.max(total);
    }

    fn release(&mut self, id: u64) -> Result<()> {
        let (tag, class, bytes) = self
            .live
            .remove(&id)
            .ok_or_else(|| Error::Accounting(format!("free of unknown or already freed handle #{id}")))?;
        self.current[class.slot()] -= bytes;
        self.events.push(MeterEvent {
            id,
            tag,
            class,
            bytes,
            kind: EventKind::Free,
        });
        Ok(())
    }
}

/// Counter snapshot of a meter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterSnapshot {
    pub current_transient_bytes: u64,
    pub peak_transient_bytes: u64,
    pub persistent_bytes: u64,
    pub peak_persistent_bytes: u64,
    pub excluded_bytes: u64,
    /// Peak of transient + persistent, sampled at every allocation.
    pub peak_total_bytes: u64,
    pub flops: u64,
}

/// Tracked off-chip arena. Updates are serialized through a mutex, so kernels
/// running slices on several threads see a linearizable history.
#[derive(Debug, Default)]
pub struct MemoryMeter {
    state: Mutex<MeterState>,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, MeterState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn alloc(&self, tag: impl Into<String>, class: AllocationClass, bytes: u64) -> Handle {
        let tag = tag.into();
        let mut s = self.lock();
        let id = s.next_id;
        s.next_id += 1;
        s.current[class.slot()] += bytes;
        s.bump_peaks();
        s.events.push(MeterEvent {
            id,
            tag: tag.clone(),
            class,
            bytes,
            kind: EventKind::Alloc,
        });
        s.live.insert(id, (tag, class, bytes));
        Handle(id)
    }

    pub fn free(&self, handle: Handle) -> Result<()> {
        self.lock().release(handle.0)
    }

    /// Runs `body` and then frees everything it left allocated, so the
    /// transient level on exit equals the level on entry even when `body`
    /// bails out early.
    pub fn scoped<R>(&self, body: impl FnOnce(&Self) -> R) -> R {
        let mark = self.lock().next_id;
        let out = body(self);
        let mut s = self.lock();
        let leftovers: Vec<u64> = s.live.range(mark..).map(|(&id, _)| id).rev().collect();
        for id in leftovers {
            s.release(id).expect("live id");
        }
        out
    }

    /// Zero-filled tensor registered for as long as the guard lives.
    pub fn tensor<T: Scalar>(
        &self,
        tag: impl Into<String>,
        class: AllocationClass,
        shape: impl Into<Vec<usize>>,
    ) -> Result<Metered<'_, Tensor<T>>> {
        let t = Tensor::zeros(shape)?;
        Ok(self.track(tag, class, t))
    }

    /// Registers an existing tensor for as long as the guard lives.
    pub fn track<T: Scalar>(
        &self,
        tag: impl Into<String>,
        class: AllocationClass,
        t: Tensor<T>,
    ) -> Metered<'_, Tensor<T>> {
        let handle = self.alloc(tag, class, t.nbytes());
        Metered {
            meter: self,
            handle: Some(handle),
            value: Some(t),
        }
    }

    /// Registers `bytes` of a buffer this kernel reads but does not own.
    pub fn reserve(&self, tag: impl Into<String>, class: AllocationClass, bytes: u64) -> Metered<'_, ()> {
        Metered {
            meter: self,
            handle: Some(self.alloc(tag, class, bytes)),
            value: Some(()),
        }
    }

    /// Registers a resident weight unless an identical persistent allocation
    /// (same tag and size) is already live, as when a layer region has
    /// pre-registered its weights for the kernels it runs.
    pub fn persistent(&self, tag: impl Into<String>, bytes: u64) -> Metered<'_, ()> {
        let tag = tag.into();
        let resident = self
            .lock()
            .live
            .values()
            .any(|(t, c, b)| *c == AllocationClass::Persistent && *t == tag && *b == bytes);
        if resident {
            Metered {
                meter: self,
                handle: None,
                value: Some(()),
            }
        } else {
            self.reserve(tag, AllocationClass::Persistent, bytes)
        }
    }

    pub fn record_flops(&self, flops: u64) {
        self.lock().flops += flops;
    }

    pub fn flops(&self) -> u64 {
        self.lock().flops
    }

    pub fn current(&self, class: AllocationClass) -> u64 {
        self.lock().current[class.slot()]
    }

    pub fn peak(&self, class: AllocationClass) -> u64 {
        self.lock().peak[class.slot()]
    }

    pub fn peak_total(&self) -> u64 {
        self.lock().peak_total
    }

    pub fn events(&self) -> Vec<MeterEvent> {
        self.lock().events.clone()
    }

    pub fn live_allocations(&self) -> usize {
        self.lock().live.len()
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        let s = self.lock();
        MeterSnapshot {
            current_transient_bytes: s.current[0],
            peak_transient_bytes: s.peak[0],
            persistent_bytes: s.current[1],
            peak_persistent_bytes: s.peak[1],
            excluded_bytes: s.current[2],
            peak_total_bytes: s.peak_total,
            flops: s.flops,
        }
    }
}

/// A value whose off-chip footprint is registered on a meter; the allocation
/// is released when the guard drops.
#[derive(Debug)]
pub struct Metered<'m, V> {
    meter: &'m MemoryMeter,
    handle: Option<Handle>,
    value: Option<V>,
}

impl<V> Metered<'_, V> {
    /// Releases the allocation and hands back the value.
    pub fn release(mut self) -> V {
        if let Some(h) = self.handle.take() {
            let _ = self.meter.free(h);
        }
        self.value.take().expect("value present until release")
    }
}

impl<V> Deref for Metered<'_, V> {
    type Target = V;
    fn deref(&self) -> &V {
        self.value.as_ref().expect("value present until release")
    }
}

impl<V> DerefMut for Metered<'_, V> {
    fn deref_mut(&mut self) -> &mut V {
        self.value.as_mut().expect("value present until release")
    }
}

impl<V> Drop for Metered<'_, V> {
    fn drop(&mut self) {
        if let Some(h) = self.handle.take() {
            // A scoped region may already have swept it.
            let _ = self.meter.free(h);
        }
    }
}

/// Peaks recomputed from an event log alone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReplaySummary {
    pub peak_transient_bytes: u64,
    pub peak_persistent_bytes: u64,
    pub peak_total_bytes: u64,
}

/// Replays an event log, checking that every free matches a prior alloc with
/// the same tag, class and size.
pub fn replay(events: &[MeterEvent]) -> Result<ReplaySummary> {
    let mut live: BTreeMap<u64, &MeterEvent> = BTreeMap::new();
    let (mut transient, mut persistent) = (0u64, 0u64);
    let mut out = ReplaySummary::default();
    for e in events {
        match e.kind {
            EventKind::Alloc => {
                if live.insert(e.id, e).is_some() {
                    return Err(Error::Accounting(format!("id #{} allocated twice", e.id)));
                }
                match e.class {
                    AllocationClass::Transient => transient += e.bytes,
                    AllocationClass::Persistent => persistent += e.bytes,
                    AllocationClass::Excluded => {}
                }
            }
            EventKind::Free => {
                let a = live
                    .remove(&e.id)
                    .ok_or_else(|| Error::Accounting(format!("free of unknown id #{}", e.id)))?;
                if a.tag != e.tag || a.bytes != e.bytes || a.class != e.class {
                    return Err(Error::Accounting(format!(
                        "free of `{}` ({} bytes) does not match alloc `{}` ({} bytes)",
                        e.tag, e.bytes, a.tag, a.bytes
                    )));
                }
                match e.class {
                    AllocationClass::Transient => transient -= e.bytes,
                    AllocationClass::Persistent => persistent -= e.bytes,
                    AllocationClass::Excluded => {}
                }
            }
        }
        out.peak_transient_bytes = out.peak_transient_bytes.max(transient);
        out.peak_persistent_bytes = out.peak_persistent_bytes.max(persistent);
        out.peak_total_bytes = out.peak_total_bytes.max(transient + persistent);
    }
    Ok(out)
}

/// Loop blocking of the streaming kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    /// Sequence tile `B_M`.
    pub block_m: usize,
    /// Rank tile `B_R`.
    pub block_r: usize,
    /// FFN feature tile `B_DF`.
    pub block_df: usize,
    pub sram_budget_bytes: u64,
}

impl Default for TilePlan {
    fn default() -> Self {
        Self {
            block_m: 16,
            block_r: 16,
            block_df: 64,
            sram_budget_bytes: DEFAULT_SRAM_BUDGET,
        }
    }
}

impl TilePlan {
    pub fn new(block_m: usize, block_r: usize, block_df: usize) -> Self {
        Self {
            block_m,
            block_r,
            block_df,
            ..Self::default()
        }
    }

    pub fn with_budget(mut self, bytes: u64) -> Self {
        self.sram_budget_bytes = bytes;
        self
    }
}

/// Kernel whose on-chip working set is being checked. Every buffer is sized
/// for one (batch, head) or (batch, sequence-tile) program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelKind {
    /// Rank-blocked reconstruction of one tile.
    LoadTile { seq_len: usize, head_dim: usize },
    /// Streaming attention over low-rank factors.
    SvdAttention { seq_len: usize, head_dim: usize },
    /// Streaming attention over dense Q/K/V.
    DenseAttention { seq_len: usize, head_dim: usize },
    FfnV1 {
        seq_len: usize,
        d_ff: usize,
        rank_up: usize,
        rank_down: usize,
    },
    FfnV2 {
        seq_len: usize,
        d_ff: usize,
        rank_up: usize,
        rank_down: usize,
    },
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::LoadTile { .. } => "load_tile",
            KernelKind::SvdAttention { .. } => "flash_svd_attention",
            KernelKind::DenseAttention { .. } => "flash_attention",
            KernelKind::FfnV1 { .. } => "ffn_v1",
            KernelKind::FfnV2 { .. } => "ffn_v2",
        }
    }
}

/// On-chip buffers of `kind` under `plan`, in elements, in allocation order.
pub fn working_set(plan: &TilePlan, kind: &KernelKind) -> Vec<(&'static str, u64)> {
    let u = |x: usize| x as u64;
    match *kind {
        KernelKind::LoadTile { seq_len, head_dim } => {
            let bm = u(plan.block_m.min(seq_len));
            let (br, dh) = (u(plan.block_r), u(head_dim));
            vec![
                ("tile", bm * dh),
                ("rank_block_p", bm * br),
                ("rank_block_v", br * dh),
                ("bias", dh),
            ]
        }
        KernelKind::SvdAttention { seq_len, head_dim } => {
            let bm = u(plan.block_m.min(seq_len));
            let (br, dh) = (u(plan.block_r), u(head_dim));
            vec![
                ("q_tile", bm * dh),
                ("k_tile", bm * dh),
                ("v_tile", bm * dh),
                ("scores", bm * bm),
                ("accumulator", bm * dh),
                ("row_max", bm),
                ("row_sum", bm),
                ("rank_block_p", bm * br),
                ("rank_block_v", br * dh),
            ]
        }
        KernelKind::DenseAttention { seq_len, head_dim } => {
            let bm = u(plan.block_m.min(seq_len));
            let dh = u(head_dim);
            vec![
                ("q_tile", bm * dh),
                ("k_tile", bm * dh),
                ("v_tile", bm * dh),
                ("scores", bm * bm),
                ("accumulator", bm * dh),
                ("row_max", bm),
                ("row_sum", bm),
            ]
        }
        KernelKind::FfnV1 {
            seq_len,
            d_ff,
            rank_up,
            rank_down,
        }
        | KernelKind::FfnV2 {
            seq_len,
            d_ff,
            rank_up,
            rank_down,
        } => {
            let bm = u(plan.block_m.min(seq_len));
            let bdf = u(plan.block_df.min(d_ff));
            let (ru, rd) = (u(rank_up), u(rank_down));
            vec![
                ("p_tile", bm * ru),
                ("y_tile", bm * bdf),
                ("z_tile", bm * rd),
                ("v_up_block", ru * bdf),
                ("u_down_block", bdf * rd),
                ("bias_up_block", bdf),
            ]
        }
    }
}

/// Checks `plan` against its on-chip budget for `kind`; returns the working
/// set in bytes, or a budget error naming the first buffer that overflows.
pub fn validate_tile_plan(plan: &TilePlan, kind: &KernelKind, elem_bytes: u64) -> Result<u64> {
    if plan.block_m == 0 || plan.block_r == 0 || plan.block_df == 0 {
        return Err(Error::config(format!("tile sizes must be positive: {plan:?}")));
    }
    let mut total = 0u64;
    for (name, elems) in working_set(plan, kind) {
        total += elems * elem_bytes;
        if total > plan.sram_budget_bytes {
            return Err(Error::Budget {
                kernel: kind.name(),
                buffer: name,
                working_set: total,
                budget: plan.sram_budget_bytes,
            });
        }
    }
    Ok(total)
}

/// Closed-form peak transient byte counts, one per kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Formula {
    DenseAttn,
    FlashAttnDenseQkv,
    FlashSvdAttn,
    FfnDense,
    FfnNaiveLowRank,
    FfnV1,
    FfnV2,
    GroupedAttn,
}

impl Formula {
    pub const ALL: [Formula; 8] = [
        Formula::DenseAttn,
        Formula::FlashAttnDenseQkv,
        Formula::FlashSvdAttn,
        Formula::FfnDense,
        Formula::FfnNaiveLowRank,
        Formula::FfnV1,
        Formula::FfnV2,
        Formula::GroupedAttn,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Formula::DenseAttn => "dense_attn",
            Formula::FlashAttnDenseQkv => "flash_attn_dense_qkv",
            Formula::FlashSvdAttn => "flash_svd_attn",
            Formula::FfnDense => "ffn_dense",
            Formula::FfnNaiveLowRank => "ffn_naive_lowrank",
            Formula::FfnV1 => "ffn_v1",
            Formula::FfnV2 => "ffn_v2",
            Formula::GroupedAttn => "grouped_attn",
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Formula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formula::ALL
            .into_iter()
            .find(|f| f.id() == s)
            .ok_or_else(|| Error::config(format!("unknown formula id `{s}`")))
    }
}

/// Peak transient elements of the kernel behind `formula`.
pub fn expected_elements(formula: Formula, g: &Geometry) -> u64 {
    let (b, m) = (g.batch as u64, g.seq_len as u64);
    let (d, f, h, gr, r) = (
        g.d_model as u64,
        g.d_ff as u64,
        g.heads as u64,
        g.groups as u64,
        g.rank as u64,
    );
    match formula {
        Formula::DenseAttn => 3 * b * m * d + b * h * m * m,
        Formula::FlashAttnDenseQkv => 3 * b * m * d,
        Formula::FlashSvdAttn => 3 * h * b * m * r,
        Formula::GroupedAttn => 3 * gr * b * m * r,
        Formula::FfnDense | Formula::FfnNaiveLowRank => b * m * f,
        Formula::FfnV1 => 2 * b * m * r,
        Formula::FfnV2 => 0,
    }
}

/// Peak transient bytes the meter must report for `formula`, at 4 bytes per
/// element.
pub fn expected_bytes(formula: Formula, g: &Geometry) -> u64 {
    FORMULA_ELEM_BYTES * expected_elements(formula, g)
}

/// [`expected_bytes`] looked up by its string id.
pub fn expected_bytes_by_id(id: &str, g: &Geometry) -> Result<u64> {
    Ok(expected_bytes(id.parse()?, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alloc_then_free() {
        let m = MemoryMeter::new();
        let h = m.alloc("x", AllocationClass::Transient, 100);
        m.free(h).unwrap();
        assert_eq!(m.peak(AllocationClass::Transient), 100);
        assert_eq!(m.current(AllocationClass::Transient), 0);
    }

    #[test]
    fn nested_allocations_stack() {
        let m = MemoryMeter::new();
        let a = m.alloc("a", AllocationClass::Transient, 100);
        let b = m.alloc("b", AllocationClass::Transient, 50);
        m.free(b).unwrap();
        m.free(a).unwrap();
        assert_eq!(m.peak(AllocationClass::Transient), 150);
    }

    #[test]
    fn double_free_is_an_accounting_error() {
        let m = MemoryMeter::new();
        let h = m.alloc("x", AllocationClass::Transient, 8);
        m.free(h).unwrap();
        assert!(matches!(m.free(h), Err(Error::Accounting(_))));
        assert!(matches!(m.free(Handle(999)), Err(Error::Accounting(_))));
    }

    #[test]
    fn scoped_region_restores_level_on_early_exit() {
        let m = MemoryMeter::new();
        let outer = m.alloc("outer", AllocationClass::Transient, 10);
        let r: Result<()> = m.scoped(|m| {
            let _leak = m.alloc("leak", AllocationClass::Transient, 70);
            let _w = m.alloc("w", AllocationClass::Persistent, 5);
            Err(Error::config("boom"))
        });
        assert!(r.is_err());
        assert_eq!(m.current(AllocationClass::Transient), 10);
        assert_eq!(m.current(AllocationClass::Persistent), 0);
        assert_eq!(m.peak(AllocationClass::Transient), 80);
        m.free(outer).unwrap();
        assert_eq!(m.live_allocations(), 0);
    }

    #[test]
    fn guards_release_on_drop_and_peak_total_tracks_both_classes() {
        let m = MemoryMeter::new();
        {
            let _w = m.reserve("w", AllocationClass::Persistent, 40);
            let t = m.tensor::<f32>("t", AllocationClass::Transient, vec![2, 3]).unwrap();
            assert_eq!(t.shape(), &[2, 3]);
            assert_eq!(m.current(AllocationClass::Transient), 24);
        }
        let s = m.snapshot();
        assert_eq!((s.current_transient_bytes, s.persistent_bytes), (0, 0));
        assert_eq!(s.peak_total_bytes, 64);
        assert_eq!(s.peak_persistent_bytes, 40);
    }

    #[test]
    fn persistent_weights_are_not_counted_twice() {
        let m = MemoryMeter::new();
        let outer = m.persistent("w", 64);
        {
            let _inner = m.persistent("w", 64);
            let _other = m.persistent("w2", 8);
            assert_eq!(m.current(AllocationClass::Persistent), 72);
        }
        assert_eq!(m.current(AllocationClass::Persistent), 64);
        drop(outer);
        assert_eq!(m.current(AllocationClass::Persistent), 0);
    }

    #[test]
    fn excluded_bytes_do_not_count_towards_totals() {
        let m = MemoryMeter::new();
        let _x = m.reserve("x", AllocationClass::Excluded, 1000);
        assert_eq!(m.snapshot().excluded_bytes, 1000);
        assert_eq!(m.peak_total(), 0);
    }

    #[test]
    fn replay_detects_mismatched_free() {
        let mut ev = vec![
            MeterEvent {
                id: 0,
                tag: "a".into(),
                class: AllocationClass::Transient,
                bytes: 4,
                kind: EventKind::Alloc,
            },
            MeterEvent {
                id: 0,
                tag: "a".into(),
                class: AllocationClass::Transient,
                bytes: 8,
                kind: EventKind::Free,
            },
        ];
        assert!(replay(&ev).is_err());
        ev[1].bytes = 4;
        assert_eq!(replay(&ev).unwrap().peak_transient_bytes, 4);
    }

    proptest! {
        #[test]
        fn replay_reproduces_meter_peaks(ops in prop::collection::vec((0u8..3, 1u64..1000, any::<bool>()), 1..200)) {
            let m = MemoryMeter::new();
            let mut live = Vec::new();
            for (class, bytes, free) in ops {
                if free && !live.is_empty() {
                    let h = live.remove(bytes as usize % live.len());
                    m.free(h).unwrap();
                } else {
                    let class = [AllocationClass::Transient, AllocationClass::Persistent, AllocationClass::Excluded][class as usize];
                    live.push(m.alloc("op", class, bytes));
                }
                let s = m.snapshot();
                prop_assert!(s.peak_transient_bytes >= s.current_transient_bytes);
            }
            let r = replay(&m.events()).unwrap();
            let s = m.snapshot();
            prop_assert_eq!(r.peak_transient_bytes, s.peak_transient_bytes);
            prop_assert_eq!(r.peak_persistent_bytes, s.peak_persistent_bytes);
            prop_assert_eq!(r.peak_total_bytes, s.peak_total_bytes);
        }
    }

    #[test]
    fn attention_plan_fits_default_budget() {
        let plan = TilePlan::new(16, 16, 64);
        let bytes = validate_tile_plan(
            &plan,
            &KernelKind::SvdAttention {
                seq_len: 128,
                head_dim: 64,
            },
            4,
        )
        .unwrap();
        // q,k,v,acc tiles 4·16·64, scores 16·16, max/sum 2·16, P block 16·16, V block 16·64
        assert_eq!(bytes, 4 * (4 * 1024 + 256 + 32 + 256 + 1024));
    }

    #[test]
    fn oversized_plan_names_the_buffer() {
        let plan = TilePlan::new(1024, 16, 64).with_budget(1024);
        let err = validate_tile_plan(
            &plan,
            &KernelKind::SvdAttention {
                seq_len: 4096,
                head_dim: 64,
            },
            4,
        )
        .unwrap_err();
        match err {
            Error::Budget { buffer, kernel, .. } => {
                assert_eq!(buffer, "q_tile");
                assert_eq!(kernel, "flash_svd_attention");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ffn_plan_working_set() {
        let plan = TilePlan::new(32, 16, 64);
        let kind = KernelKind::FfnV1 {
            seq_len: 128,
            d_ff: 256,
            rank_up: 32,
            rank_down: 32,
        };
        let bytes = validate_tile_plan(&plan, &kind, 4).unwrap();
        assert_eq!(bytes, 4 * (32 * 32 + 32 * 64 + 32 * 32 + 32 * 64 + 64 * 32 + 64));
        assert!(bytes <= DEFAULT_SRAM_BUDGET);
    }

    #[test]
    fn zero_tile_is_a_config_error() {
        let plan = TilePlan::new(0, 16, 64);
        assert!(matches!(
            validate_tile_plan(
                &plan,
                &KernelKind::DenseAttention {
                    seq_len: 8,
                    head_dim: 8
                },
                4
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn closed_forms() {
        let g = Geometry::multi_head(1, 128, 768, 3072, 12, 64);
        assert_eq!(expected_bytes(Formula::DenseAttn, &g), 1_966_080);
        assert_eq!(expected_bytes(Formula::FfnV2, &g), 0);
        let g2 = Geometry::multi_head(2, 64, 64, 256, 4, 16);
        assert_eq!(expected_bytes(Formula::FlashSvdAttn, &g2), 98_304);
        assert_eq!(expected_bytes(Formula::FfnDense, &g2), 131_072);
        assert_eq!(expected_bytes(Formula::FfnV1, &g2.with_rank(32)), 32_768);
        assert_eq!(expected_bytes_by_id("ffn_naive_lowrank", &g2).unwrap(), 131_072);
        assert!(matches!(expected_bytes_by_id("nope", &g2), Err(Error::Config(_))));
        for f in Formula::ALL {
            assert_eq!(f.id().parse::<Formula>().unwrap(), f);
        }
    }
}
