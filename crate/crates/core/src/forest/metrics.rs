use std::io::{Read, Write};

use super::{ForestError, RandomForestModel};
use crate::labeling::{CropClass, N_CLASSES};

pub const REPORT_HEADER: [&str; 8] = [
    "overall_accuracy",
    "macro_f1",
    "weighted_f1",
    "f1_rice",
    "f1_cassava",
    "f1_maize",
    "f1_sugarcane",
    "f1_other",
];

/// Classification metrics. Confusion rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub overall_accuracy: f64,
    pub precision: [f64; N_CLASSES],
    pub recall: [f64; N_CLASSES],
    pub per_class_f1: [f64; N_CLASSES],
    /// Unweighted mean of the per-class F1 scores.
    pub macro_f1: f64,
    /// Per-class F1 weighted by true-class support.
    pub weighted_f1: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_confusion(confusion: [[u64; N_CLASSES]; N_CLASSES]) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..N_CLASSES).map(|k| confusion[k][k]).sum();
        let mut precision = [0.0; N_CLASSES];
        let mut recall = [0.0; N_CLASSES];
        let mut f1 = [0.0; N_CLASSES];
        let mut weighted = 0.0;
        for k in 0..N_CLASSES {
            let tp = confusion[k][k];
            let predicted: u64 = (0..N_CLASSES).map(|t| confusion[t][k]).sum();
            let support: u64 = confusion[k].iter().sum();
            precision[k] = ratio(tp, predicted);
            recall[k] = ratio(tp, support);
            let pr = precision[k] + recall[k];
            f1[k] = if pr > 0.0 { 2.0 * precision[k] * recall[k] / pr } else { 0.0 };
            weighted += f1[k] * ratio(support, total);
        }
        Self {
            confusion,
            overall_accuracy: ratio(trace, total),
            precision,
            recall,
            per_class_f1: f1,
            macro_f1: f1.iter().sum::<f64>() / N_CLASSES as f64,
            weighted_f1: weighted,
        }
    }

    pub fn from_predictions(truth: &[CropClass], predicted: &[CropClass]) -> Self {
        assert_eq!(truth.len(), predicted.len(), "truth and prediction lengths differ");
        let mut c = [[0u64; N_CLASSES]; N_CLASSES];
        for (t, p) in truth.iter().zip(predicted) {
            c[t.index()][p.index()] += 1;
        }
        Self::from_confusion(c)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn f1(&self, c: CropClass) -> f64 {
        self.per_class_f1[c.index()]
    }

    fn row(&self) -> [f64; 8] {
        let f = &self.per_class_f1;
        [self.overall_accuracy, self.macro_f1, self.weighted_f1, f[0], f[1], f[2], f[3], f[4]]
    }
}

pub fn evaluate<R: AsRef<[f64]> + Sync>(
    model: &RandomForestModel,
    x: &[R],
    y: &[CropClass],
) -> Result<Metrics, ForestError> {
    if x.is_empty() {
        return Err(ForestError::EmptyData);
    }
    if x.len() != y.len() {
        return Err(ForestError::LengthMismatch {
            rows: x.len(),
            labels: y.len(),
        });
    }
    Ok(Metrics::from_predictions(y, &model.predict_many(x)?))
}

/// One-row report with the overall scores first and per-class F1 after.
pub fn write_report<W: Write>(w: W, m: &Metrics) -> Result<(), ForestError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REPORT_HEADER)?;
    out.write_record(m.row().iter().map(|v| format!("{v:.6}")))?;
    out.flush()?;
    Ok(())
}

/// The scores of a report, in header order.
pub fn read_report<R: Read>(r: R) -> Result<[f64; 8], ForestError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(REPORT_HEADER) {
        return Err(ForestError::Format("unexpected report header".into()));
    }
    let rec = rdr
        .records()
        .next()
        .ok_or_else(|| ForestError::Format("empty report".into()))??;
    let mut out = [0.0; 8];
    for (slot, s) in out.iter_mut().zip(rec.iter()) {
        *slot = s.parse().map_err(|e| ForestError::Format(format!("{s:?}: {e}")))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use CropClass::*;

    #[test]
    fn two_class_hand_arithmetic() {
        let mut c = [[0u64; N_CLASSES]; N_CLASSES];
        c[0][0] = 8; // TP
        c[1][0] = 2; // FP
        c[0][1] = 1; // FN
        c[1][1] = 9; // TN
        let m = Metrics::from_confusion(c);
        assert!((m.f1(Rice) - 16.0 / 19.0).abs() < 1e-12);
        assert!((m.overall_accuracy - 17.0 / 20.0).abs() < 1e-12);
        assert_eq!(m.f1(Maize), 0.0);
    }

    #[test]
    fn perfect_and_all_rice() {
        let truth = [Rice, Cassava, Maize, Sugarcane, Other];
        let m = Metrics::from_predictions(&truth, &truth);
        assert_eq!(m.overall_accuracy, 1.0);
        assert!(m.per_class_f1.iter().all(|&f| f == 1.0));
        assert_eq!(m.macro_f1, 1.0);

        let mut truth = vec![Rice; 65];
        truth.extend([Cassava; 35]);
        let m = Metrics::from_predictions(&truth, &vec![Rice; 100]);
        assert!((m.overall_accuracy - 0.65).abs() < 1e-12);
        assert!((m.f1(Rice) - 1.3 / 1.65).abs() < 1e-12);
    }

    #[test]
    fn report_roundtrip() {
        let m = Metrics::from_predictions(&[Rice, Maize, Maize], &[Rice, Maize, Rice]);
        let mut buf = Vec::new();
        write_report(&mut buf, &m).unwrap();
        let row = read_report(&buf[..]).unwrap();
        assert!((row[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((row[1] - m.macro_f1).abs() < 1e-6);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("overall_accuracy,macro_f1,weighted_f1,f1_rice"));
    }
}
