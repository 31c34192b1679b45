use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::forest::{evaluate, ForestError, ForestParams, Metrics, RandomForestModel};
use crate::labeling::CropClass;

pub const CURVE_HEADER: [&str; 5] = ["train_size", "repeats", "macro_f1", "weighted_f1", "overall_accuracy"];

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub size: usize,
    pub repeats: usize,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub overall_accuracy: f64,
}

/// Test-set scores of forests trained on growing subsets of `train`.
///
/// Repeat `r` shuffles the training pool once under `(seed, r)` and takes
/// prefixes of that order, so within a repeat smaller sets are nested in
/// larger ones. Each subset keeps the pool's original row order, which makes
/// the full-size subset identical to training on the whole pool. Scores are
/// averaged over repeats.
pub fn f1_vs_trainsize<R: AsRef<[f64]> + Sync>(
    train_x: &[R],
    train_y: &[CropClass],
    test_x: &[R],
    test_y: &[CropClass],
    sizes: &[usize],
    repeats: usize,
    params: &ForestParams,
) -> Result<Vec<CurvePoint>, ForestError> {
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > train_x.len()) {
        return Err(ForestError::Params(format!(
            "training size {s} outside 1..={} available references",
            train_x.len()
        )));
    }
    let repeats = repeats.max(1);
    let orders: Vec<Vec<usize>> = (0..repeats)
        .map(|r| {
            let mut idx: Vec<usize> = (0..train_x.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            idx
        })
        .collect();
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let mut sum = [0.0; 3];
        for (r, order) in orders.iter().enumerate() {
            let mut pick = order[..size].to_vec();
            pick.sort_unstable();
            let x: Vec<&[f64]> = pick.iter().map(|&i| train_x[i].as_ref()).collect();
            let y: Vec<CropClass> = pick.iter().map(|&i| train_y[i]).collect();
            let p = ForestParams {
                seed: params.seed.wrapping_add(r as u64),
                ..params.clone()
            };
            let model = RandomForestModel::train(&x, &y, &p)?;
            let m: Metrics = evaluate(&model, test_x, test_y)?;
            sum[0] += m.macro_f1;
            sum[1] += m.weighted_f1;
            sum[2] += m.overall_accuracy;
        }
        let n = repeats as f64;
        out.push(CurvePoint {
            size,
            repeats,
            macro_f1: sum[0] / n,
            weighted_f1: sum[1] / n,
            overall_accuracy: sum[2] / n,
        });
        log::info!("curve: {size} references -> macro F1 {:.4}", sum[0] / n);
    }
    Ok(out)
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
/// `None` when either input is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

pub fn write_curve<W: Write>(w: W, points: &[CurvePoint]) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CURVE_HEADER)?;
    for p in points {
        out.write_record([
            p.size.to_string(),
            p.repeats.to_string(),
            format!("{:.6}", p.macro_f1),
            format!("{:.6}", p.weighted_f1),
            format!("{:.6}", p.overall_accuracy),
        ])?;
    }
    out.flush()
}

pub fn read_curve<R: Read>(r: R) -> io::Result<Vec<CurvePoint>> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers().map_err(|e| bad(e.to_string()))?.iter().ne(CURVE_HEADER) {
        return Err(bad("unexpected curve header".into()));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(e.to_string()));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(e.to_string()));
        out.push(CurvePoint {
            size: u(0)?,
            repeats: u(1)?,
            macro_f1: f(2)?,
            weighted_f1: f(3)?,
            overall_accuracy: f(4)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        // one adjacent swap among five points: 1 - 6*2/(5*24)
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
    }

    #[test]
    fn full_size_equals_direct_training() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 5) as f64 + (i as f64) * 0.001, (i * 7 % 11) as f64]).collect();
        let y: Vec<CropClass> = (0..60).map(|i| CropClass::ALL[i % 5]).collect();
        let p = ForestParams {
            n_trees: 10,
            max_features: 2,
            seed: 3,
            ..Default::default()
        };
        let curve = f1_vs_trainsize(&x, &y, &x, &y, &[60], 1, &p).unwrap();
        let direct = evaluate(&RandomForestModel::train(&x, &y, &p).unwrap(), &x, &y).unwrap();
        assert_eq!(curve[0].macro_f1, direct.macro_f1);
        assert_eq!(f1_vs_trainsize(&x, &y, &x, &y, &[10, 30], 2, &p).unwrap(), f1_vs_trainsize(&x, &y, &x, &y, &[10, 30], 2, &p).unwrap());
        assert!(f1_vs_trainsize(&x, &y, &x, &y, &[61], 1, &p).is_err());
    }
}
