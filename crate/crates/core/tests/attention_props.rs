use oescn::attention::{
    attention_block, band_attention, default_scale, head_fusion, self_attention, AttentionParams, Qkv,
};
use oescn::bandgen::{BandCombination, BandLayout};
use oescn::nn::Grid;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_layout() -> BandLayout {
    BandLayout::from_counts(vec![1, 3], 1, vec![5, 3]).unwrap()
}

fn combination(c: usize, values: &[f64]) -> BandCombination {
    let layout = small_layout();
    let s = Grid::from_vec(&[c, layout.total_k], values[..c * layout.total_k].to_vec()).unwrap();
    BandCombination { s, layout }
}

fn column_sums(a: &Grid) -> Vec<f64> {
    (0..a.cols()).map(|j| (0..a.rows()).map(|i| a.at2(i, j)).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weight_columns_are_distributions(
        c in 1usize..6,
        seed in any::<u64>(),
        mag in prop::sample::select(vec![1e-3, 1.0, 50.0, 1e4]),
        values in prop::collection::vec(-1.0f64..1.0, 48),
    ) {
        let x: Vec<f64> = values.iter().map(|v| v * mag).collect();
        let s = combination(c, &x);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(&s.layout, &mut rng);
        let h = band_attention(&s, &params, default_scale(c)).unwrap();
        for a in std::iter::once(&h.global_weights).chain(&h.local_weights) {
            prop_assert!(a.as_slice().iter().all(|&w| (0.0..=1.0).contains(&w)));
            for sum in column_sums(a) {
                prop_assert!((sum - 1.0).abs() <= 1e-6);
            }
        }
        prop_assert!(h.h_glo.as_slice().iter().chain(h.h_loc.as_slice()).all(|v| v.is_finite()));
    }

    #[test]
    fn head_output_is_convex_in_values(c in 1usize..5, seed in any::<u64>(), values in prop::collection::vec(-3.0f64..3.0, 40)) {
        // Each output column mixes the columns of V·X with convex weights,
        // so it stays inside their per-row range.
        let d = 5;
        let x = Grid::from_vec(&[c, d], values[..c * d].to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qkv = Qkv::init(d, &mut rng);
        let (h, _) = self_attention(&x, &qkv, default_scale(c)).unwrap();
        let mut v = vec![0.0; c * d];
        for r in 0..c {
            for j in 0..d {
                v[r * d + j] = (0..d).map(|i| x.at2(r, i) * qkv.value.at2(i, j)).sum();
            }
        }
        for r in 0..c {
            let row = &v[r * d..(r + 1) * d];
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for j in 0..d {
                prop_assert!(h.at2(r, j) >= lo - 1e-9 && h.at2(r, j) <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn zero_parameters_leave_s_unchanged(c in 1usize..6, values in prop::collection::vec(-5.0f64..5.0, 48)) {
        let s = combination(c, &values);
        let (out, _) = attention_block(&s.s, &s.layout, &AttentionParams::zeros(&s.layout), 1.0).unwrap();
        prop_assert_eq!(out, s.s);
    }

    #[test]
    fn fusion_of_equal_heads_is_affine(c in 1usize..4, wm in -2.0f64..2.0, wa in -2.0f64..2.0, b in -1.0f64..1.0, seed in any::<u64>(), values in prop::collection::vec(-1.0f64..1.0, 24)) {
        let s = combination(c, &values);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = AttentionParams::init(&s.layout, &mut rng);
        params.fusion = Grid::from_vec(&[3], vec![wm, wa, b]).unwrap();
        let mut h = band_attention(&s, &params, 1.0).unwrap();
        h.h_loc = h.h_glo.clone();
        let m = head_fusion(&h, &params);
        for (&y, &g) in m.as_slice().iter().zip(h.h_glo.as_slice()) {
            prop_assert!((y - ((wm + wa) * g + b)).abs() <= 1e-12);
        }
    }
}

#[test]
fn uniform_scores_average_the_values() {
    // Zero query or key projections make every score 0, so each weight is 1/D.
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut qkv = Qkv::init(d, &mut rng);
    qkv.query = Grid::zeros(&[d, d]);
    let x = Grid::from_vec(&[2, d], (0..8).map(f64::from).collect()).unwrap();
    let (h, a) = self_attention(&x, &qkv, 2.0).unwrap();
    assert!(a.as_slice().iter().all(|&w| (w - 0.25).abs() < 1e-15));
    for r in 0..2 {
        let mean: f64 = (0..d)
            .map(|j| (0..d).map(|i| x.at2(r, i) * qkv.value.at2(i, j)).sum::<f64>())
            .sum::<f64>()
            / d as f64;
        for j in 0..d {
            assert!((h.at2(r, j) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let s = combination(2, &[0.0; 16]);
    let params = AttentionParams::zeros(&s.layout);
    assert!(attention_block(&s.s, &s.layout, &params, 0.0).is_err());
    assert!(attention_block(&s.s, &s.layout, &params, f64::NAN).is_err());
    let wrong = Grid::zeros(&[2, 7]);
    assert!(attention_block(&wrong, &s.layout, &params, 1.0).is_err());
    let mut short = params.clone();
    short.local.pop();
    assert!(attention_block(&s.s, &s.layout, &short, 1.0).is_err());
}
