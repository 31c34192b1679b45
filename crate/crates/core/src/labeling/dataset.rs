use std::collections::HashMap;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{CropClass, GroundReference, ImageWindows, LabelError, Source, VoteRule};
use crate::geodesy::{EarthModel, GeoPoint};
use crate::roadnet::min_separation_thin;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelOutcome {
    /// One reference per accepted image, ordered by image id.
    pub references: Vec<GroundReference>,
    pub rejected: usize,
}

impl LabelOutcome {
    pub fn images(&self) -> usize {
        self.references.len() + self.rejected
    }
}

/// Vote every image and attach its field point.
pub fn label_images(
    windows: &ImageWindows,
    field_points: &HashMap<String, GeoPoint>,
    rule: &dyn VoteRule,
) -> Result<LabelOutcome, LabelError> {
    let unmatched: Vec<String> = windows
        .keys()
        .filter(|id| !field_points.contains_key(*id))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        return Err(LabelError::UnmatchedImages(unmatched));
    }
    let images: Vec<(&String, &Vec<_>)> = windows.iter().collect();
    let decided = images
        .par_iter()
        .map(|(id, preds)| rule.decide(preds).map(|v| (*id, v)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = LabelOutcome::default();
    for (id, vote) in decided {
        match vote.label {
            Some(label) => out.references.push(GroundReference {
                image_id: id.clone(),
                point: field_points[id],
                label,
                source: Source::Auto,
                votes: Some(vote.votes),
            }),
            None => out.rejected += 1,
        }
    }
    Ok(out)
}

/// Read a hand-label CSV (`image_id,lat,lon,label`) into references of the
/// given source.
pub fn ingest_labels<R: Read>(r: R, source: Source) -> Result<Vec<GroundReference>, LabelError> {
    const HEADER: [&str; 4] = ["image_id", "lat", "lon", "label"];
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(HEADER) {
        return Err(LabelError::References {
            line: 1,
            message: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| LabelError::References { line, message };
        let f = |i: usize| -> Result<f64, LabelError> {
            rec[i].trim().parse().map_err(|e| bad(format!("{}: {e}", HEADER[i])))
        };
        let label = rec[3]
            .parse::<CropClass>()
            .map_err(|label| LabelError::UnknownLabel { line, label })?;
        out.push(GroundReference {
            image_id: rec[0].to_string(),
            point: GeoPoint::new(f(1)?, f(2)?).map_err(|e| bad(e.to_string()))?,
            label,
            source,
            votes: None,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions([f64; 3]);

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, LabelError> {
        let f = [train, val, test];
        if f.iter().any(|v| !v.is_finite() || *v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(LabelError::InvalidFractions(f));
        }
        Ok(Self(f))
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self([0.6, 0.2, 0.2])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<GroundReference>,
    pub val: Vec<GroundReference>,
    pub test: Vec<GroundReference>,
    /// References removed by minimum-separation thinning before splitting.
    pub thinned_out: usize,
}

/// Thin to `min_sep` in input order, then split the survivors at random
/// under `seed`. Each part keeps input order.
pub fn split_dataset(
    refs: Vec<GroundReference>,
    fractions: SplitFractions,
    seed: u64,
    min_sep: f64,
    earth: EarthModel,
) -> DatasetSplit {
    let before = refs.len();
    let thinned = min_separation_thin(refs, |r| r.point, min_sep, earth);
    let n = thinned.len();
    let n_train = (fractions.0[0] * n as f64).round() as usize;
    let n_val = ((fractions.0[1] * n as f64).round() as usize).min(n - n_train);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut part = vec![2u8; n];
    for &i in &order[..n_train] {
        part[i] = 0;
    }
    for &i in &order[n_train..n_train + n_val] {
        part[i] = 1;
    }
    let mut split = DatasetSplit {
        thinned_out: before - n,
        ..Default::default()
    };
    for (r, p) in thinned.into_iter().zip(part) {
        match p {
            0 => split.train.push(r),
            1 => split.val.push(r),
            _ => split.test.push(r),
        }
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{self, BearingDeg};
    use crate::labeling::{WindowPrediction, WindowRect, Mhp};

    fn grid_refs(n: usize) -> Vec<GroundReference> {
        let earth = EarthModel::default();
        let origin = GeoPoint::new(14.0, 100.0).unwrap();
        (0..n)
            .map(|i| {
                let row = geodesy::destination(origin, BearingDeg::new(0.0), 150.0 * (i / 10) as f64, earth);
                GroundReference {
                    image_id: format!("img{i:04}"),
                    point: geodesy::destination(row, BearingDeg::new(90.0), 150.0 * (i % 10) as f64, earth),
                    label: CropClass::ALL[i % 5],
                    source: Source::Expert,
                    votes: None,
                }
            })
            .collect()
    }

    #[test]
    fn expert_ingest() {
        let csv = "image_id,lat,lon,label\na,14.1,100.2,rice\nb,14.2,100.3,Sugarcane\n";
        let refs = ingest_labels(csv.as_bytes(), Source::Expert).unwrap();
        assert_eq!(refs.len(), 2);
        assert_eq!(refs[1].label, CropClass::Sugarcane);
        assert!(refs.iter().all(|r| r.source == Source::Expert && r.votes.is_none()));
        assert!(ingest_labels("image_id,lat,lon,label\n".as_bytes(), Source::Expert).unwrap().is_empty());
        match ingest_labels("image_id,lat,lon,label\na,1,2,rice\nb,1,2,banana\n".as_bytes(), Source::Expert) {
            Err(LabelError::UnknownLabel { line, label }) => {
                assert_eq!(line, 3);
                assert_eq!(label, "banana");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(grid_refs(100), SplitFractions::default(), 3, 100.0, EarthModel::default());
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (60, 20, 20));
        assert_eq!(s.thinned_out, 0);
        let t = split_dataset(grid_refs(100), SplitFractions::default(), 3, 100.0, EarthModel::default());
        assert_eq!(s, t);
        let u = split_dataset(grid_refs(100), SplitFractions::default(), 4, 100.0, EarthModel::default());
        assert_ne!(s.train, u.train);
    }

    #[test]
    fn split_rethins() {
        let mut refs = grid_refs(20);
        let mut dup = refs[3].clone();
        dup.image_id = "dup".into();
        refs.push(dup);
        let s = split_dataset(refs, SplitFractions::default(), 1, 100.0, EarthModel::default());
        assert_eq!(s.thinned_out, 1);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 20);
    }

    #[test]
    fn fractions_validated() {
        assert!(SplitFractions::new(0.5, 0.2, 0.2).is_err());
        assert!(SplitFractions::new(0.7, 0.3, 0.0).is_ok());
    }

    #[test]
    fn join_errors_list_offenders() {
        let rect = WindowRect { x: 0, y: 0, w: 300, h: 300 };
        let pred = WindowPrediction::new(rect, [1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let mut windows = ImageWindows::new();
        windows.insert("known".into(), vec![pred]);
        windows.insert("ghost".into(), vec![pred]);
        let mut fields = HashMap::new();
        fields.insert("known".to_string(), GeoPoint::new(1.0, 1.0).unwrap());
        match label_images(&windows, &fields, &Mhp::new(0.9).unwrap()) {
            Err(LabelError::UnmatchedImages(ids)) => assert_eq!(ids, vec!["ghost".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
