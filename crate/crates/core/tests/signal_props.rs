use std::f64::consts::PI;

use oescn::signal::{hamming_window, segment_signal, welch_psd, TrialRecording, WelchConfig};
use proptest::prelude::*;

fn trial(samples: Vec<f32>, channels: usize, rate_hz: f64) -> TrialRecording {
    let len = samples.len() / channels;
    TrialRecording {
        samples,
        channels,
        len,
        rate_hz,
        label: 0,
        subject_id: "p".into(),
    }
}

/// Single-segment periodogram by direct summation over the window.
fn direct_periodogram(x: &[f64], bin: usize, rate: f64) -> f64 {
    let w = hamming_window(x.len()).unwrap();
    let n_fft = 1000.0;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, (&v, &wn)) in x.iter().zip(&w).enumerate() {
        let ang = 2.0 * PI * bin as f64 * n as f64 / n_fft;
        re += v * wn * ang.cos();
        im -= v * wn * ang.sin();
    }
    2.0 * (re * re + im * im) / (rate * w.iter().map(|v| v * v).sum::<f64>())
}

#[test]
fn single_window_matches_direct_sum() {
    let x: Vec<f64> = (0..200).map(|n| ((n * 37 % 101) as f64 / 50.0) - 1.0).collect();
    let t = trial(x.iter().map(|&v| v as f32).collect(), 1, 1000.0);
    let psd = welch_psd(&t, &WelchConfig::default()).unwrap();
    let xf: Vec<f64> = t.samples.iter().map(|&v| f64::from(v)).collect();
    for (j, &f) in psd.freqs_hz.iter().enumerate() {
        let want = direct_periodogram(&xf, f as usize, 1000.0);
        let got = psd.values.at2(0, j);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-300), "bin {f}: {got} vs {want}");
    }
}

#[test]
fn sinusoid_power_lands_on_its_bin() {
    for f0 in [5.0, 12.0, 33.0, 70.0] {
        let x: Vec<f32> = (0..4000).map(|n| (2.0 * PI * f0 * n as f64 / 1000.0).sin() as f32).collect();
        let psd = welch_psd(&trial(x, 1, 1000.0), &WelchConfig::default()).unwrap();
        let row = psd.values.row(0);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(psd.freqs_hz[arg], f0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psd_is_nonnegative_and_quadratic(
        raw in prop::collection::vec(-3.0f32..3.0, 400..1200),
        gain in 0.1f32..4.0,
    ) {
        let n = raw.len() - raw.len() % 2;
        let cfg = WelchConfig::default();
        let a = welch_psd(&trial(raw[..n].to_vec(), 2, 1000.0), &cfg).unwrap();
        let scaled: Vec<f32> = raw[..n].iter().map(|v| v * gain).collect();
        let b = welch_psd(&trial(scaled, 2, 1000.0), &cfg).unwrap();
        prop_assert!(a.values.as_slice().iter().all(|&v| v >= 0.0));
        let g2 = f64::from(gain) * f64::from(gain);
        // Samples are rounded to f32 after scaling, so errors are relative
        // to the channel's strongest bin rather than to each bin.
        for c in 0..2 {
            let peak = a.values.row(c).iter().cloned().fold(0.0, f64::max);
            for (&pa, &pb) in a.values.row(c).iter().zip(b.values.row(c)) {
                prop_assert!((pb - g2 * pa).abs() <= 1e-5 * g2 * peak);
            }
        }
    }

    #[test]
    fn channels_are_independent(
        x in prop::collection::vec(-1.0f32..1.0, 300..700),
        y in prop::collection::vec(-1.0f32..1.0, 300..700),
    ) {
        let len = x.len().min(y.len());
        let cfg = WelchConfig::default();
        let both: Vec<f32> = x[..len].iter().chain(&y[..len]).copied().collect();
        let joint = welch_psd(&trial(both, 2, 1000.0), &cfg).unwrap();
        let only_x = welch_psd(&trial(x[..len].to_vec(), 1, 1000.0), &cfg).unwrap();
        prop_assert_eq!(joint.values.row(0), only_x.values.row(0));
    }

    #[test]
    fn segmentation_covers_the_prefix(n in 200usize..5000, win in 2usize..300, overlap_frac in 0.0f64..0.9) {
        let overlap = ((win as f64) * overlap_frac) as usize;
        let cfg = WelchConfig { window_len: win, overlap_points: overlap, fft_len: win.max(1000), ..Default::default() };
        let x: Vec<usize> = (0..n).collect();
        match segment_signal(&x, &cfg) {
            Err(_) => prop_assert!(n < win),
            Ok(segs) => {
                let hop = win - overlap;
                prop_assert_eq!(segs.len(), (n - win) / hop + 1);
                // no further full window fits
                prop_assert!(segs.len() * hop + win > n);
                for (j, s) in segs.iter().enumerate() {
                    prop_assert_eq!(s[0], j * hop);
                    prop_assert_eq!(s.len(), win);
                }
            }
        }
    }

    #[test]
    fn hamming_is_symmetric_and_bounded(n in 2usize..2000) {
        let w = hamming_window(n).unwrap();
        for k in 0..n {
            prop_assert!((w[k] - w[n - 1 - k]).abs() < 1e-12);
            prop_assert!(w[k] >= 0.08 - 1e-12 && w[k] <= 1.0 + 1e-12);
        }
    }
}
