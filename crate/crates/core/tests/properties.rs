use mucsi_core::autodiff::Mat;
use mucsi_core::nn::{self, AttentionParams};
use mucsi_core::rng::stream;
use mucsi_core::sscc::{self, QuantizerConfig};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn randn(r: usize, c: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal))
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn residual_plus_plain_is_projected_aggregate() {
    let mut worst = 0.0f64;
    for draw in 0..1000u64 {
        let mut rng = stream(draw, &[0xa1]);
        let heads = [1, 2, 4][draw as usize % 3];
        let d = 8;
        let n = 3 + draw as usize % 4;
        let p = AttentionParams::init(d, heads, &mut rng);
        let x1 = randn(n, d, &mut rng);
        let x_agg = randn(n, d, &mut rng);
        let res = nn::residual_cross_attention(&x1, &x_agg, &p).unwrap();
        let plain = nn::cross_attention_plain(&x1, &x_agg, &p).unwrap();
        let expected = x_agg.dot(&p.w_o);
        worst = worst.max(max_abs_diff(&(&res + &plain), &expected));
    }
    assert!(worst < 1e-10, "max deviation {worst:e}");
}

#[test]
fn softmax_rows_sum_to_one() {
    // attention with v = I returns the softmax weights themselves
    for draw in 0..200u64 {
        let mut rng = stream(draw, &[0xa2]);
        let n = 2 + draw as usize % 7;
        let dk = 1 + draw as usize % 5;
        let q = randn(n, dk, &mut rng).mapv(|x| x * 5.0);
        let k = randn(n, dk, &mut rng).mapv(|x| x * 5.0);
        let w = nn::scaled_dot_attention(&q, &k, &Mat::eye(n)).unwrap();
        for row in w.rows() {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_head_matches_direct_formula_exactly() {
    for draw in 0..50u64 {
        let mut rng = stream(draw, &[0xa3]);
        let (n, d) = (5, 8);
        let p = AttentionParams::init(d, 1, &mut rng);
        let x1 = randn(n, d, &mut rng);
        let x2 = randn(n, d, &mut rng);
        let multi = nn::cross_attention_plain(&x1, &x2, &p).unwrap();
        let direct = nn::scaled_dot_attention(&x2.dot(&p.w_q), &x1.dot(&p.w_k), &x1.dot(&p.w_v))
            .unwrap()
            .dot(&p.w_o);
        assert_eq!(multi, direct);
    }
}

#[test]
fn quantizer_error_within_half_step_for_all_bit_widths() {
    let mut rng = stream(5, &[0xa4]);
    for bits in 1..=8 {
        let qc = QuantizerConfig {
            bits,
            clip_lo: -1.5,
            clip_hi: 1.5,
        };
        let half = qc.step() / 2.0;
        let v: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1.5..=1.5)).collect();
        let back = sscc::dequantize(&sscc::quantize(&v, &qc).unwrap(), &qc).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() <= half + 1e-15, "q={bits}: {a} -> {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantizer_bound_holds_in_range(
        bits in 1u32..=8,
        lo in -5.0f64..-0.01,
        width in 0.02f64..10.0,
        t in prop::collection::vec(0.0f64..=1.0, 1..40),
    ) {
        let qc = QuantizerConfig { bits, clip_lo: lo, clip_hi: lo + width };
        let v: Vec<f64> = t.iter().map(|u| lo + u * width).collect();
        let back = sscc::dequantize(&sscc::quantize(&v, &qc).unwrap(), &qc).unwrap();
        for (a, b) in v.iter().zip(&back) {
            prop_assert!((a - b).abs() <= qc.step() / 2.0 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn overhead_is_monotone(
        b in 1usize..2048,
        q in 1u32..12,
        r in 0.1f64..0.95,
        a_exp in 1u32..8,
    ) {
        let a = 1u32 << a_exp;
        let base = sscc::overhead_symbols(b, q, r, a).unwrap();
        prop_assert!(sscc::overhead_symbols(b + 1, q, r, a).unwrap() >= base);
        prop_assert!(sscc::overhead_symbols(b, q + 1, r, a).unwrap() >= base);
        prop_assert!(sscc::overhead_symbols(b, q, r + 0.05, a).unwrap() <= base);
        prop_assert!(sscc::overhead_symbols(b, q, r, a * 2).unwrap() <= base);
    }

    #[test]
    fn layer_norm_ignores_positive_scale(seed in any::<u64>(), c in 0.5f64..50.0) {
        let mut rng = stream(seed, &[0xa5]);
        let d = 8;
        let x = randn(4, d, &mut rng);
        let gain = randn(1, d, &mut rng);
        let bias = randn(1, d, &mut rng);
        let a = nn::layer_norm(&x, &gain, &bias, 0.0).unwrap();
        let b = nn::layer_norm(&x.mapv(|v| v * c), &gain, &bias, 0.0).unwrap();
        prop_assert!(max_abs_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn aggregate_ignores_order_of_the_others(seed in any::<u64>(), m in 2usize..6) {
        let mut rng = stream(seed, &[0xa6]);
        let xs: Vec<Mat> = (0..m).map(|_| randn(3, 4, &mut rng)).collect();
        let i = (seed % m as u64) as usize;
        let base = nn::aggregate_others(&xs, i).unwrap();
        let mut others: Vec<Mat> = xs.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| x.clone()).collect();
        others.reverse();
        let shift = seed as usize % others.len();
        others.rotate_left(shift);
        let mut permuted = others;
        permuted.insert(0, xs[i].clone());
        let alt = nn::aggregate_others(&permuted, 0).unwrap();
        prop_assert!(max_abs_diff(&base, &alt) < 1e-12);
    }
}

#[test]
fn overhead_examples() {
    assert_eq!(sscc::overhead_symbols(512, 4, 0.5, 16).unwrap(), 1024);
    assert_eq!(sscc::overhead_symbols(64, 4, 0.5, 16).unwrap(), 128);
    assert_eq!(sscc::overhead_symbols(3, 1, 1.0, 4).unwrap(), 2);
}
