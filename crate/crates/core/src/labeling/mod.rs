//! Image-level crop labels from per-window softmax predictions, and the
//! ground-reference datasets built from them.

mod dataset;
mod io;
mod vote;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeoPoint;

pub use dataset::{
    ingest_labels, label_images, split_dataset, DatasetSplit, LabelOutcome, SplitFractions,
};
pub use io::{
    read_references, read_windows, write_references, write_windows, ImageWindows, REFERENCE_HEADER, WINDOW_HEADER,
};
pub use vote::{mhp_vote, MeanSoftmax, Mhp, Vote, VoteRegistry, VoteRule};

pub const N_CLASSES: usize = 5;
pub const DEFAULT_WINDOW: u32 = 300;
pub const DEFAULT_STRIDE: u32 = 50;
pub const DEFAULT_TAU: f64 = 0.9;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("image {width}x{height} is smaller than the {window}px window")]
    ImageTooSmall { width: u32, height: u32, window: u32 },
    #[error("no window predictions to vote on")]
    NoWindows,
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("line {line}: unknown crop label {label:?}")]
    UnknownLabel { line: u64, label: String },
    #[error("window file line {line}: {message}")]
    Windows { line: u64, message: String },
    #[error("reference file line {line}: {message}")]
    References { line: u64, message: String },
    #[error("no field point for images: {}", .0.join(", "))]
    UnmatchedImages(Vec<String>),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    InvalidFractions([f64; 3]),
    #[error("unknown vote rule {0:?}")]
    UnknownRule(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The five crop classes, with a stable 0-4 encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CropClass {
    Rice = 0,
    Cassava = 1,
    Maize = 2,
    Sugarcane = 3,
    Other = 4,
}

impl CropClass {
    pub const ALL: [CropClass; N_CLASSES] = [
        CropClass::Rice,
        CropClass::Cassava,
        CropClass::Maize,
        CropClass::Sugarcane,
        CropClass::Other,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            CropClass::Rice => "rice",
            CropClass::Cassava => "cassava",
            CropClass::Maize => "maize",
            CropClass::Sugarcane => "sugarcane",
            CropClass::Other => "other",
        }
    }
}

impl fmt::Display for CropClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CropClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Square windows of side `win` at offsets 0, stride, 2*stride, ... on each
/// axis while they fit, row by row.
pub fn sliding_windows(img_w: u32, img_h: u32, win: u32, stride: u32) -> Result<Vec<WindowRect>, LabelError> {
    if img_w < win || img_h < win || win == 0 {
        return Err(LabelError::ImageTooSmall {
            width: img_w,
            height: img_h,
            window: win,
        });
    }
    let stride = stride.max(1);
    let offsets = |dim: u32| (0..=(dim - win) / stride).map(move |k| k * stride);
    Ok(offsets(img_h)
        .flat_map(|y| offsets(img_w).map(move |x| WindowRect { x, y, w: win, h: win }))
        .collect())
}

/// One window's softmax output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowPrediction {
    pub rect: WindowRect,
    pub probs: [f64; N_CLASSES],
}

impl WindowPrediction {
    pub fn new(rect: WindowRect, probs: [f64; N_CLASSES]) -> Result<Self, String> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(format!("probabilities must be finite and non-negative: {probs:?}"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("probabilities sum to {sum}, not 1"));
        }
        Ok(Self { rect, probs })
    }

    /// Most probable class, lowest index on ties.
    pub fn top(&self) -> (CropClass, f64) {
        let (i, p) = self
            .probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        (CropClass::ALL[i], p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Auto,
    Expert,
    External,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Auto => "auto",
            Source::Expert => "expert",
            Source::External => "external",
        }
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "auto" => Ok(Source::Auto),
            "expert" => Ok(Source::Expert),
            "external" => Ok(Source::External),
            other => Err(other.to_string()),
        }
    }
}

/// A geolocated crop label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundReference {
    pub image_id: String,
    pub point: GeoPoint,
    pub label: CropClass,
    pub source: Source,
    /// Window votes per class; `None` for labels that did not come from voting.
    pub votes: Option<[u32; N_CLASSES]>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_counts() {
        assert_eq!(sliding_windows(600, 600, 300, 50).unwrap().len(), 49);
        assert_eq!(sliding_windows(300, 300, 300, 50).unwrap().len(), 1);
        assert_eq!(sliding_windows(350, 300, 300, 50).unwrap().len(), 2);
        assert_eq!(sliding_windows(640, 640, 300, 50).unwrap().len(), 49);
        assert!(matches!(
            sliding_windows(299, 640, 300, 50),
            Err(LabelError::ImageTooSmall { .. })
        ));
        let rects = sliding_windows(350, 400, 300, 50).unwrap();
        assert_eq!(rects.len(), 6);
        assert!(rects.iter().all(|r| r.x + r.w <= 350 && r.y + r.h <= 400));
        assert_eq!(rects[1], WindowRect { x: 50, y: 0, w: 300, h: 300 });
    }

    #[test]
    fn class_encoding() {
        for (i, c) in CropClass::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(CropClass::from_index(i), Some(*c));
            assert_eq!(c.name().parse::<CropClass>().unwrap(), *c);
        }
        assert_eq!("Rice".parse::<CropClass>().unwrap(), CropClass::Rice);
        assert!("banana".parse::<CropClass>().is_err());
        assert_eq!(CropClass::from_index(5), None);
    }

    #[test]
    fn prediction_validation() {
        let r = WindowRect { x: 0, y: 0, w: 300, h: 300 };
        assert!(WindowPrediction::new(r, [0.2; 5]).is_ok());
        assert!(WindowPrediction::new(r, [0.3; 5]).is_err());
        assert!(WindowPrediction::new(r, [1.2, -0.2, 0.0, 0.0, 0.0]).is_err());
        let p = WindowPrediction::new(r, [0.4, 0.4, 0.2, 0.0, 0.0]).unwrap();
        assert_eq!(p.top(), (CropClass::Rice, 0.4));
    }
}
