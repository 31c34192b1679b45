use std::collections::BTreeMap;
use std::f64::consts::PI;

use cropref::features::{
    extract_features, harmonic_fit, mask_clouds, write_features, Band, BandSample, BandSeries, FeatureVector,
    HarmonicConfig, PointSeries,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const T: f64 = 184.0;

fn series(ts: &[f64], values: &[f64]) -> BandSeries {
    BandSeries::new(
        Band::Nir,
        ts.iter()
            .zip(values)
            .map(|(&t, &value)| BandSample { t, value, cloud_prob: 0.0 })
            .collect(),
    )
    .unwrap()
}

fn regular(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * T / n as f64).collect()
}

// y = 2 + 3 cos(2 pi t / T) + sin(4 pi t / T)
fn planted(t: f64) -> f64 {
    2.0 + 3.0 * (2.0 * PI * t / T).cos() + (4.0 * PI * t / T).sin()
}
const PLANTED: [f64; 7] = [2.0, 3.0, 0.0, 0.0, 1.0, 0.0, 0.0];

#[test]
fn noise_bound_holds_in_99_percent_of_trials() {
    let cfg = HarmonicConfig::default();
    let (sigma, n) = (0.1, 40);
    let ts = regular(n);
    let bound = 5.0 * sigma / (n as f64).sqrt();
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2022);
    let trials = 1000;
    let mut within = 0;
    for _ in 0..trials {
        let ys: Vec<f64> = ts.iter().map(|&t| planted(t) + noise.sample(&mut rng)).collect();
        let c = harmonic_fit(&series(&ts, &ys), &cfg).unwrap();
        within += c.iter().zip(PLANTED).all(|(a, b)| (a - b).abs() <= bound) as usize;
    }
    assert!(within as f64 >= 0.99 * trials as f64, "{within} of {trials} trials inside the bound");
}

#[test]
fn per_band_recovery_through_extraction() {
    let cfg = HarmonicConfig::default();
    let ts = regular(30);
    let mut bands = PointSeries::new();
    for (k, band) in [Band::RedEdge4, Band::Swir1, Band::Swir2, Band::Nir, Band::Gcvi].into_iter().enumerate() {
        let vals: Vec<f64> = ts.iter().map(|&t| planted(t) * (k + 1) as f64).collect();
        let mut s = series(&ts, &vals);
        s.band = band;
        bands.insert(band, s);
    }
    let f = extract_features(&bands, &cfg).unwrap();
    assert_eq!(f.len(), 35);
    for k in 0..5 {
        for (j, want) in PLANTED.iter().enumerate() {
            assert!((f.as_slice()[k * 7 + j] - want * (k + 1) as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn feature_csv_is_bit_stable() {
    let rows: BTreeMap<String, FeatureVector> = (0..3)
        .map(|i| (format!("p{i}"), FeatureVector::new((0..35).map(|j| (i * 35 + j) as f64 / 7.0).collect())))
        .collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_features(&mut a, &rows, 35).unwrap();
    write_features(&mut b, &rows, 35).unwrap();
    assert_eq!(a, b);
}

fn sorted_times(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(0u32..18_400, n..n + 20)
        .prop_map(|s| s.into_iter().map(|v| v as f64 / 100.0).collect())
}

fn times_and_values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    sorted_times(12).prop_flat_map(|ts| {
        let n = ts.len();
        (
            Just(ts),
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_is_linear((ts, y, z) in times_and_values(), alpha in -10.0f64..10.0) {
        let cfg = HarmonicConfig::default();
        let fy = harmonic_fit(&series(&ts, &y), &cfg).unwrap();
        let fz = harmonic_fit(&series(&ts, &z), &cfg).unwrap();
        let scaled: Vec<f64> = y.iter().map(|v| alpha * v).collect();
        let summed: Vec<f64> = y.iter().zip(&z).map(|(a, b)| a + b).collect();
        let fa = harmonic_fit(&series(&ts, &scaled), &cfg).unwrap();
        let fs = harmonic_fit(&series(&ts, &summed), &cfg).unwrap();
        for k in 0..fy.len() {
            prop_assert!((fa[k] - alpha * fy[k]).abs() < 1e-9);
            prop_assert!((fs[k] - fy[k] - fz[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_is_idempotent(clouds in prop::collection::vec(0.0f64..100.0, 1..40), threshold in 0.0f64..100.0) {
        let s = BandSeries::new(
            Band::Green,
            clouds.iter().enumerate().map(|(i, &c)| BandSample { t: i as f64, value: 0.1, cloud_prob: c }).collect(),
        ).unwrap();
        let once = mask_clouds(&s, threshold);
        prop_assert_eq!(mask_clouds(&once, threshold), once.clone());
        prop_assert!(once.samples.iter().all(|x| x.cloud_prob <= threshold));
    }
}
