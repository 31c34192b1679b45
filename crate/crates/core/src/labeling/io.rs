use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{CropClass, GroundReference, LabelError, Source, WindowPrediction, WindowRect, N_CLASSES};
use crate::geodesy::GeoPoint;

pub const WINDOW_HEADER: [&str; 9] = [
    "image_id",
    "window_index",
    "x",
    "y",
    "p_rice",
    "p_cassava",
    "p_maize",
    "p_sugarcane",
    "p_other",
];

pub const REFERENCE_HEADER: [&str; 10] = [
    "image_id",
    "lat",
    "lon",
    "label",
    "source",
    "votes_rice",
    "votes_cassava",
    "votes_maize",
    "votes_sugarcane",
    "votes_other",
];

/// Window predictions grouped by image id, windows ordered by index.
pub type ImageWindows = BTreeMap<String, Vec<WindowPrediction>>;

/// Read a window-prediction CSV. Every window must fit inside an
/// `image_size` square image.
pub fn read_windows<R: Read>(r: R, window: u32, image_size: u32) -> Result<ImageWindows, LabelError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(WINDOW_HEADER) {
        return Err(LabelError::Windows {
            line: 1,
            message: format!("expected header {}", WINDOW_HEADER.join(",")),
        });
    }
    let mut by_image: BTreeMap<String, Vec<(u32, WindowPrediction)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| LabelError::Windows { line, message };
        let int = |i: usize| -> Result<u32, LabelError> {
            rec[i].trim().parse().map_err(|e| bad(format!("{}: {e}", WINDOW_HEADER[i])))
        };
        let mut probs = [0.0; N_CLASSES];
        for (k, p) in probs.iter_mut().enumerate() {
            *p = rec[4 + k]
                .trim()
                .parse()
                .map_err(|e| bad(format!("{}: {e}", WINDOW_HEADER[4 + k])))?;
        }
        let rect = WindowRect {
            x: int(2)?,
            y: int(3)?,
            w: window,
            h: window,
        };
        if rect.x + rect.w > image_size || rect.y + rect.h > image_size {
            return Err(bad(format!(
                "window at ({}, {}) does not fit a {image_size}px image",
                rect.x, rect.y
            )));
        }
        let pred = WindowPrediction::new(rect, probs).map_err(bad)?;
        by_image
            .entry(rec[0].to_string())
            .or_default()
            .push((int(1)?, pred));
    }
    Ok(by_image
        .into_iter()
        .map(|(id, mut w)| {
            w.sort_by_key(|(i, _)| *i);
            (id, w.into_iter().map(|(_, p)| p).collect())
        })
        .collect())
}

/// Write window predictions; `window_index` is the position within each image.
pub fn write_windows<W: Write>(w: W, windows: &ImageWindows) -> Result<(), LabelError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(WINDOW_HEADER)?;
    for (id, preds) in windows {
        for (i, p) in preds.iter().enumerate() {
            let mut rec = vec![id.clone(), i.to_string(), p.rect.x.to_string(), p.rect.y.to_string()];
            rec.extend(p.probs.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_references<W: Write>(w: W, refs: &[GroundReference]) -> Result<(), LabelError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(REFERENCE_HEADER)?;
    for r in refs {
        let mut row = vec![
            r.image_id.clone(),
            r.point.lat().to_string(),
            r.point.lon().to_string(),
            r.label.name().to_string(),
            r.source.as_str().to_string(),
        ];
        match r.votes {
            Some(v) => row.extend(v.iter().map(u32::to_string)),
            None => row.extend(std::iter::repeat(String::new()).take(N_CLASSES)),
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_references<R: Read>(r: R) -> Result<Vec<GroundReference>, LabelError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(REFERENCE_HEADER) {
        return Err(LabelError::References {
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| LabelError::References { line, message };
        let f = |i: usize| -> Result<f64, LabelError> {
            rec[i].parse().map_err(|e| bad(format!("{}: {e}", REFERENCE_HEADER[i])))
        };
        let point = GeoPoint::new(f(1)?, f(2)?).map_err(|e| bad(e.to_string()))?;
        let label = rec[3].parse::<CropClass>().map_err(|label| LabelError::UnknownLabel { line, label })?;
        let source = rec[4].parse::<Source>().map_err(|s| bad(format!("source {s:?}")))?;
        let votes = if rec.iter().skip(5).all(str::is_empty) {
            None
        } else {
            let mut v = [0u32; N_CLASSES];
            for (k, slot) in v.iter_mut().enumerate() {
                *slot = rec[5 + k]
                    .parse()
                    .map_err(|e| bad(format!("{}: {e}", REFERENCE_HEADER[5 + k])))?;
            }
            Some(v)
        };
        out.push(GroundReference {
            image_id: rec[0].to_string(),
            point,
            label,
            source,
            votes,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_grouped_and_ordered() {
        let csv = "image_id,window_index,x,y,p_rice,p_cassava,p_maize,p_sugarcane,p_other\n\
b,1,50,0,0.1,0.1,0.1,0.1,0.6\n\
a,0,0,0,1,0,0,0,0\n\
b,0,0,0,0.96,0.01,0.01,0.01,0.01\n";
        let w = read_windows(csv.as_bytes(), 300, 640).unwrap();
        assert_eq!(w.keys().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(w["b"][0].rect.x, 0);
        assert_eq!(w["b"][1].rect.x, 50);
    }

    #[test]
    fn windows_roundtrip() {
        let csv = "image_id,window_index,x,y,p_rice,p_cassava,p_maize,p_sugarcane,p_other\n\
a,0,0,0,0.3,0.1,0.1,0.1,0.4\n\
a,1,50,0,0.96,0.01,0.01,0.01,0.01\n";
        let w = read_windows(csv.as_bytes(), 300, 640).unwrap();
        let mut buf = Vec::new();
        write_windows(&mut buf, &w).unwrap();
        assert_eq!(read_windows(&buf[..], 300, 640).unwrap(), w);
    }

    #[test]
    fn window_validation() {
        let h = WINDOW_HEADER.join(",");
        let bad_sum = format!("{h}\na,0,0,0,0.5,0.1,0.1,0.1,0.1\n");
        assert!(matches!(read_windows(bad_sum.as_bytes(), 300, 640), Err(LabelError::Windows { line: 2, .. })));
        let off_image = format!("{h}\na,0,400,0,1,0,0,0,0\n");
        assert!(read_windows(off_image.as_bytes(), 300, 640).is_err());
    }

    #[test]
    fn reference_roundtrip() {
        let refs = vec![
            GroundReference {
                image_id: "x1".into(),
                point: GeoPoint::new(14.5, 100.25).unwrap(),
                label: CropClass::Maize,
                source: Source::Auto,
                votes: Some([0, 1, 7, 0, 0]),
            },
            GroundReference {
                image_id: "x2".into(),
                point: GeoPoint::new(15.0, 101.0).unwrap(),
                label: CropClass::Other,
                source: Source::Expert,
                votes: None,
            },
        ];
        let mut buf = Vec::new();
        write_references(&mut buf, &refs).unwrap();
        assert_eq!(read_references(&buf[..]).unwrap(), refs);
    }
}
