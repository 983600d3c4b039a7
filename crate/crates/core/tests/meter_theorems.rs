use flashsvd_core::factorizer::HeadMode;
use flashsvd_core::memtier::{expected_bytes, Formula};
use flashsvd_core::planner::{
    delta_memory_per_rank, dense_qkv_attention_bytes, flash_attention_total_bytes, memory_threshold, RankModule,
};
use flashsvd_core::verify::{self, measure};
use flashsvd_core::{Geometry, Rational};
use proptest::prelude::*;

#[test]
fn every_formula_exact_on_grid() {
    let grid = verify::meter_grid();
    assert!(grid.len() >= 27);
    for c in verify::meter_exactness(&grid, expected_bytes) {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn planner_totals_match_measured_totals() {
    for (i, g) in verify::crossover_grid().iter().enumerate() {
        let g = g.with_rank(g.head_dim().min(3));
        assert_eq!(
            measure(Formula::FlashSvdAttn, &g, i as u64).unwrap().peak_total_bytes,
            flash_attention_total_bytes(&g, HeadMode::MultiHead)
        );
        assert_eq!(
            measure(Formula::FlashAttnDenseQkv, &g, i as u64)
                .unwrap()
                .peak_total_bytes,
            dense_qkv_attention_bytes(&g)
        );
    }
}

#[test]
fn crossover_and_deltas() {
    assert!(verify::threshold_crossover(&verify::crossover_grid()).passed);
    for c in verify::rank_deltas(&verify::delta_grid()) {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
}

#[test]
fn mutated_formula_is_caught() {
    fn mutated(f: Formula, g: &Geometry) -> u64 {
        expected_bytes(f, g) + u64::from(f == Formula::DenseAttn)
    }
    let checks = verify::meter_exactness(&verify::meter_grid()[..3], mutated);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["meter: dense_attn"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn flash_attention_delta_is_exact(
        b in 1usize..3, m in 1usize..24, h in 1usize..4, dh in 2usize..6, r in 2usize..6,
    ) {
        let r = r.min(dh);
        let g = Geometry::multi_head(b, m, h * dh, 2 * h * dh, h, r);
        let hi = measure(Formula::FlashSvdAttn, &g, 1).unwrap().peak_total_bytes;
        let lo = measure(Formula::FlashSvdAttn, &g.with_rank(r - 1), 1).unwrap().peak_total_bytes;
        prop_assert_eq!(hi - lo, delta_memory_per_rank(&g, RankModule::Attention));
    }

    #[test]
    fn saving_iff_below_threshold(b in 1usize..3, m in 1usize..24, h in 1usize..4, dh in 1usize..8, r in 1usize..8) {
        let r = r.min(dh);
        let g = Geometry::multi_head(b, m, h * dh, 8, h, r);
        let saves = flash_attention_total_bytes(&g, HeadMode::MultiHead) < dense_qkv_attention_bytes(&g);
        prop_assert_eq!(saves, Rational::from_integer(r as i128) < memory_threshold(&g, HeadMode::MultiHead));
    }
}
