use approx::assert_relative_eq;
use avalign::alignment::{contrastive_loss, scene_distance, ContrastiveConfig, PairDistance};
use avalign::clustering::{soft_kmeans, SoftKMeansConfig};
use avalign::counting::{poisson_loss, predict_count};
use avalign::dsp::{log_magnitude, stft, Waveform};
use avalign::scenegen::{default_classes, make_scene};
use avalign::separation::{bss_metrics, separation_loss};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn tone(len: usize, freq: f64, phase: f64) -> Waveform {
    Waveform::new((0..len).map(|i| (freq * i as f64 + phase).sin()).collect(), 11025).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_shape_follows_length_window_and_hop(len in 1usize..3000, half in 4usize..64, hop_div in 1usize..4) {
        let window = 2 * half;
        let hop = (window / (hop_div + 1)).max(1);
        let w = tone(len, 0.3, 0.0);
        let s = stft(&w, window, hop).unwrap();
        prop_assert_eq!(s.freq_bins(), window / 2 + 1);
        prop_assert_eq!(s.frames(), len / hop + 1);
    }

    #[test]
    fn log_magnitude_is_monotone_and_zero_at_zero(len in 64usize..600, freq in 0.05..2.0f64) {
        let s = stft(&tone(len, freq, 0.1), 32, 8).unwrap();
        let l = log_magnitude(&s);
        for (&m, &v) in s.magnitudes.iter().zip(l.iter()) {
            prop_assert!(v >= 0.0);
            prop_assert_eq!(m == 0.0, v == 0.0);
        }
        let mut pairs: Vec<(f64, f64)> = s.magnitudes.iter().cloned().zip(l.iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        prop_assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
    }

    #[test]
    fn assignments_are_row_stochastic(points in matrix(40, 5), k in 1usize..5) {
        let s = soft_kmeans(&points, &SoftKMeansConfig::new(k)).unwrap();
        for row in s.assignments.outer_iter() {
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert_relative_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn scene_distance_is_nonnegative_and_translation_invariant(
        a in matrix(3, 4),
        v in matrix(4, 4),
        shift in prop::collection::vec(-5.0..5.0f64, 4),
    ) {
        let base = scene_distance(&a, &v).unwrap();
        prop_assert!(base.s_av >= 0.0);
        let t = Array1::from(shift);
        let moved = scene_distance(&(&a + &t), &(&v + &t)).unwrap();
        assert_relative_eq!(moved.s_av, base.s_av, epsilon = 1e-9, max_relative = 1e-9);
        prop_assert_eq!(moved.matches, base.matches);
        let own = scene_distance(&v.slice(ndarray::s![..2, ..]).to_owned(), &v).unwrap();
        prop_assert_eq!(own.s_av, 0.0);
    }

    #[test]
    fn contrastive_loss_is_nonnegative(
        s in prop::collection::vec(0.0..3.0f64, 2..12),
        flags in prop::collection::vec(any::<bool>(), 12),
    ) {
        let pairs: Vec<PairDistance> = s.iter().zip(&flags).map(|(&s, &positive)| PairDistance { s, positive }).collect();
        let cfg = ContrastiveConfig::default();
        let loss = contrastive_loss(&pairs, &cfg).unwrap();
        prop_assert!(loss >= 0.0);
        let perfect: Vec<PairDistance> =
            pairs.iter().map(|p| PairDistance { s: if p.positive { 0.0 } else { cfg.margin + p.s }, ..*p }).collect();
        prop_assert_eq!(contrastive_loss(&perfect, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn poisson_loss_is_convex_in_rate(y in 1usize..6, l in 0.05..8.0f64, h in 1e-3..0.04f64) {
        let f = |x: f64| poisson_loss(&[x], &[y]).unwrap();
        prop_assert!(f(l - h) + f(l + h) - 2.0 * f(l) >= -1e-12);
    }

    #[test]
    fn mode_is_floor_of_rate(l in 1.0..5.0f64) {
        prop_assume!(l.fract() > 1e-9);
        prop_assert_eq!(predict_count(l, 5), (l.floor() as usize).clamp(1, 5));
    }

    #[test]
    fn separation_loss_vanishes_only_for_identical_masks(m in matrix(3, 5), i in 0usize..15, d in 0.01..1.0f64) {
        let m = m.mapv(|v| v.abs() / 3.0);
        prop_assert_eq!(separation_loss(&m, &m).unwrap(), 0.0);
        let mut other = m.clone();
        other.as_slice_mut().unwrap()[i] += d;
        prop_assert!(separation_loss(&other, &m).unwrap() > 0.0);
    }

    #[test]
    fn bss_metrics_ignore_estimate_scale(alpha in 0.05..20.0f64, mix in 0.05..0.6f64) {
        let refs = vec![tone(2048, 0.11, 0.0), tone(2048, 0.37, 1.0)];
        let est: Vec<f64> = refs[0].samples.iter().zip(&refs[1].samples).enumerate()
            .map(|(i, (a, b))| a + mix * b + 0.01 * ((i * 7919 % 101) as f64 / 101.0 - 0.5))
            .collect();
        let e = Waveform::new(est.clone(), 11025).unwrap();
        let scaled = Waveform::new(est.iter().map(|v| v * alpha).collect(), 11025).unwrap();
        let (a, b) = (bss_metrics(&e, &refs, 0).unwrap(), bss_metrics(&scaled, &refs, 0).unwrap());
        assert_relative_eq!(a.sdr, b.sdr, epsilon = 1e-6);
        assert_relative_eq!(a.sir, b.sir, epsilon = 1e-6);
        assert_relative_eq!(a.sar, b.sar, epsilon = 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenes_are_determined_by_seed_and_masks_are_large(seed in any::<u64>(), k in 1usize..5) {
        let classes = default_classes(16);
        let a = make_scene(&classes, k, seed).unwrap();
        prop_assert_eq!(&a, &make_scene(&classes, k, seed).unwrap());
        let area = (a.image.dim().0 * a.image.dim().1) as f64;
        for m in &a.gt_masks {
            prop_assert!(m.sum() >= 0.01 * area);
        }
    }
}
