use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::features::FeatureVector;
use crate::forest::{ForestError, RandomForestModel};
use crate::labeling::{CropClass, N_CLASSES};
use crate::landcover::{ClassGrid, ClassLegend, NODATA_BYTE};

/// NODATA value written to map grids.
pub const MAP_NODATA: i64 = -9999;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("feature raster is {found_rows}x{found_cols} but the land-cover grid is {rows}x{cols}")]
    Alignment {
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Identifier of a grid cell in per-cell time-series files.
pub fn cell_id(row: usize, col: usize) -> String {
    format!("r{row}_c{col}")
}

pub fn parse_cell_id(id: &str) -> Option<(usize, usize)> {
    let (r, c) = id.strip_prefix('r')?.split_once("_c")?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

/// Optional feature vector per grid cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRaster {
    pub nrows: usize,
    pub ncols: usize,
    pub cells: Vec<Option<FeatureVector>>,
}

impl FeatureRaster {
    pub fn empty(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            cells: vec![None; nrows * ncols],
        }
    }

    pub fn set(&mut self, row: usize, col: usize, v: FeatureVector) -> bool {
        if row >= self.nrows || col >= self.ncols {
            return false;
        }
        self.cells[row * self.ncols + col] = Some(v);
        true
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MapStats {
    pub cells: usize,
    pub cropland: usize,
    pub classified: usize,
    /// Cropland cells left as nodata because they had no features.
    pub missing_features: usize,
}

/// Classify every cropland cell; all other cells, and cropland cells without
/// features, are nodata. Class codes are the crop class indices.
pub fn rasterize_map(
    model: &RandomForestModel,
    features: &FeatureRaster,
    landcover: &ClassGrid,
    legend: &ClassLegend,
) -> Result<(ClassGrid, MapStats), MapError> {
    if features.nrows != landcover.nrows() || features.ncols != landcover.ncols() {
        return Err(MapError::Alignment {
            rows: landcover.nrows(),
            cols: landcover.ncols(),
            found_rows: features.nrows,
            found_cols: features.ncols,
        });
    }
    let ncols = landcover.ncols();
    let predicted: Vec<Result<Option<u8>, ForestError>> = features
        .cells
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            if landcover.get(i / ncols, i % ncols) != Some(legend.cropland) {
                return Ok(None);
            }
            match f {
                Some(v) => model.predict(v.as_slice()).map(|(c, _)| Some(c.index() as u8)),
                None => Ok(None),
            }
        })
        .collect();
    let mut stats = MapStats {
        cells: predicted.len(),
        ..Default::default()
    };
    let mut out = ClassGrid::filled_like(landcover, NODATA_BYTE);
    for (i, p) in predicted.into_iter().enumerate() {
        let (row, col) = (i / ncols, i % ncols);
        let cropland = landcover.get(row, col) == Some(legend.cropland);
        stats.cropland += cropland as usize;
        match p? {
            Some(code) => {
                out.set(row, col, Some(code));
                stats.classified += 1;
            }
            None if cropland => stats.missing_features += 1,
            None => {}
        }
    }
    let out = ClassGrid::new(out.ncols(), out.nrows(), out.xll(), out.yll(), out.cellsize(), MAP_NODATA, out.cells().to_vec())
        .expect("same geometry as the land-cover grid");
    Ok((out, stats))
}

const PALETTE: [[u8; 3]; N_CLASSES] = [
    [76, 175, 80],   // rice
    [255, 152, 0],   // cassava
    [255, 235, 59],  // maize
    [156, 39, 176],  // sugarcane
    [121, 85, 72],   // other
];
const NODATA_RGB: [u8; 3] = [224, 224, 224];

/// Binary PPM preview, each cell drawn as a `scale` x `scale` block.
pub fn write_ppm<W: Write>(mut w: W, map: &ClassGrid, scale: usize) -> io::Result<()> {
    let scale = scale.max(1);
    let (nr, nc) = (map.nrows(), map.ncols());
    write!(w, "P6\n{} {}\n255\n", nc * scale, nr * scale)?;
    let mut line = Vec::with_capacity(nc * scale * 3);
    for r in 0..nr {
        line.clear();
        for c in 0..nc {
            let rgb = map
                .get(r, c)
                .and_then(|code| CropClass::from_index(code as usize))
                .map_or(NODATA_RGB, |k| PALETTE[k.index()]);
            for _ in 0..scale {
                line.extend(rgb);
            }
        }
        for _ in 0..scale {
            w.write_all(&line)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forest::ForestParams;

    fn grid(codes: &[u8], ncols: usize) -> ClassGrid {
        ClassGrid::new(ncols, codes.len() / ncols, 100.0, 14.0, 0.0001, -9999, codes.to_vec()).unwrap()
    }

    fn two_class_model() -> RandomForestModel {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 0.0 } else { 10.0 } + i as f64 * 0.01]).collect();
        let y: Vec<CropClass> = (0..40).map(|i| if i % 2 == 0 { CropClass::Rice } else { CropClass::Maize }).collect();
        let p = ForestParams {
            n_trees: 5,
            max_features: 1,
            ..Default::default()
        };
        RandomForestModel::train(&x, &y, &p).unwrap()
    }

    #[test]
    fn non_cropland_is_nodata() {
        let legend = ClassLegend::worldcover();
        let lc = grid(&[40, 40, 10, 50, 40, 40], 3);
        let mut f = FeatureRaster::empty(2, 3);
        for i in 0..6 {
            f.set(i / 3, i % 3, FeatureVector::new(vec![10.0]));
        }
        f.cells[5] = None;
        let (map, stats) = rasterize_map(&two_class_model(), &f, &lc, &legend).unwrap();
        assert_eq!((map.nrows(), map.ncols()), (2, 3));
        let maize = Some(CropClass::Maize.index() as u8);
        assert_eq!(
            (0..6).map(|i| map.get(i / 3, i % 3)).collect::<Vec<_>>(),
            vec![maize, maize, None, None, maize, None]
        );
        assert_eq!(stats.cropland, 4);
        assert_eq!(stats.missing_features, 1);
        let mut buf = Vec::new();
        map.write_ascii(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("-9999"));
    }

    #[test]
    fn shape_mismatch_is_alignment_error() {
        let lc = grid(&[40; 6], 3);
        let f = FeatureRaster::empty(3, 2);
        assert!(matches!(
            rasterize_map(&two_class_model(), &f, &lc, &ClassLegend::worldcover()),
            Err(MapError::Alignment { rows: 2, cols: 3, .. })
        ));
    }

    #[test]
    fn cell_ids_roundtrip() {
        assert_eq!(parse_cell_id(&cell_id(12, 7)), Some((12, 7)));
        assert_eq!(parse_cell_id("p12"), None);
    }

    #[test]
    fn ppm_size() {
        let map = grid(&[0, 1, 255, 4], 2);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &map, 3).unwrap();
        let header = b"P6\n6 6\n255\n";
        assert!(buf.starts_with(header));
        assert_eq!(buf.len(), header.len() + 6 * 6 * 3);
    }
}
