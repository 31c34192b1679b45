//! Land-cover class rasters and cropland/tree-cover screening of field points.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{EarthModel, GeoPoint};
use crate::roadnet::CandidatePoint;

/// Cell byte used for nodata. Class codes must stay below it.
pub const NODATA_BYTE: u8 = 255;

pub const DEFAULT_RADIUS_M: f64 = 10.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cell value {code} at row {row}, col {col} is not in the legend")]
    UnknownClass { code: i64, row: usize, col: usize },
    #[error("legend: {0}")]
    Legend(String),
    #[error("point {0} lies outside the grid")]
    OutOfBounds(GeoPoint),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Class codes and names, with the two codes the screening needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLegend {
    pub names: BTreeMap<u8, String>,
    pub cropland: u8,
    pub tree_cover: u8,
}

impl ClassLegend {
    pub fn new(names: BTreeMap<u8, String>, cropland: u8, tree_cover: u8) -> Result<Self, GridError> {
        let legend = Self {
            names,
            cropland,
            tree_cover,
        };
        legend.check()?;
        Ok(legend)
    }

    pub fn check(&self) -> Result<(), GridError> {
        if self.cropland == self.tree_cover {
            return Err(GridError::Legend("cropland and tree cover share a code".into()));
        }
        for code in [self.cropland, self.tree_cover] {
            if !self.names.contains_key(&code) {
                return Err(GridError::Legend(format!("code {code} missing from legend")));
            }
        }
        if self.names.contains_key(&NODATA_BYTE) {
            return Err(GridError::Legend(format!("code {NODATA_BYTE} is reserved for nodata")));
        }
        Ok(())
    }

    pub fn contains(&self, code: u8) -> bool {
        self.names.contains_key(&code)
    }

    /// ESA WorldCover v100 classes.
    pub fn worldcover() -> Self {
        let names = [
            (10, "Tree cover"),
            (20, "Shrubland"),
            (30, "Grassland"),
            (40, "Cropland"),
            (50, "Built-up"),
            (60, "Bare / sparse vegetation"),
            (70, "Snow and ice"),
            (80, "Permanent water bodies"),
            (90, "Herbaceous wetland"),
            (95, "Mangroves"),
            (100, "Moss and lichen"),
        ]
        .into_iter()
        .map(|(c, n)| (c, n.to_string()))
        .collect();
        Self {
            names,
            cropland: 40,
            tree_cover: 10,
        }
    }
}

impl Default for ClassLegend {
    fn default() -> Self {
        Self::worldcover()
    }
}

/// Row-major class raster, northernmost row first, one byte per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGrid {
    ncols: usize,
    nrows: usize,
    xll: f64,
    yll: f64,
    cellsize: f64,
    nodata: i64,
    cells: Vec<u8>,
}

/// The land-cover raster type; map outputs reuse the same structure.
pub type LandCoverGrid = ClassGrid;

impl ClassGrid {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        nodata: i64,
        cells: Vec<u8>,
    ) -> Result<Self, GridError> {
        let bad = |message: String| GridError::Parse { line: 0, message };
        if ncols == 0 || nrows == 0 {
            return Err(bad("grid must have at least one row and column".into()));
        }
        if !(cellsize.is_finite() && cellsize > 0.0) {
            return Err(bad(format!("cellsize must be positive, got {cellsize}")));
        }
        if cells.len() != ncols * nrows {
            return Err(bad(format!("expected {} cells, got {}", ncols * nrows, cells.len())));
        }
        Ok(Self {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata,
            cells,
        })
    }

    /// A grid of the same geometry with every cell set to `fill`.
    pub fn filled_like(other: &ClassGrid, fill: u8) -> Self {
        Self {
            cells: vec![fill; other.cells.len()],
            ..other.clone()
        }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn cellsize(&self) -> f64 {
        self.cellsize
    }

    pub fn xll(&self) -> f64 {
        self.xll
    }

    pub fn yll(&self) -> f64 {
        self.yll
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn same_shape(&self, other: &ClassGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
    }

    /// Class at (row, col); `None` for nodata.
    pub fn get(&self, row: usize, col: usize) -> Option<u8> {
        match self.cells[row * self.ncols + col] {
            NODATA_BYTE => None,
            c => Some(c),
        }
    }

    pub fn set(&mut self, row: usize, col: usize, value: Option<u8>) {
        self.cells[row * self.ncols + col] = value.unwrap_or(NODATA_BYTE);
    }

    /// Center of cell (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> GeoPoint {
        let lat = self.yll + (self.nrows - row) as f64 * self.cellsize - 0.5 * self.cellsize;
        let lon = self.xll + (col as f64 + 0.5) * self.cellsize;
        GeoPoint::new(lat, lon).expect("cell centers of a valid grid are valid points")
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        let top = self.yll + self.nrows as f64 * self.cellsize;
        let right = self.xll + self.ncols as f64 * self.cellsize;
        (self.yll..=top).contains(&p.lat()) && (self.xll..=right).contains(&p.lon())
    }

    /// (row, col) of the cell containing `p`. Points on the outer edges
    /// belong to the adjacent edge cell.
    pub fn cell_of(&self, p: GeoPoint) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let top = self.yll + self.nrows as f64 * self.cellsize;
        let row = (((top - p.lat()) / self.cellsize).floor() as usize).min(self.nrows - 1);
        let col = (((p.lon() - self.xll) / self.cellsize).floor() as usize).min(self.ncols - 1);
        Some((row, col))
    }

    pub fn validate(&self, legend: &ClassLegend) -> Result<(), GridError> {
        for (i, &c) in self.cells.iter().enumerate() {
            if c != NODATA_BYTE && !legend.contains(c) {
                return Err(GridError::UnknownClass {
                    code: c as i64,
                    row: i / self.ncols,
                    col: i % self.ncols,
                });
            }
        }
        Ok(())
    }

    /// Read an ESRI ASCII grid. Values equal to `NODATA_value` become nodata;
    /// any other value must fit in 0..=254.
    pub fn read_ascii<R: BufRead>(r: R) -> Result<Self, GridError> {
        let mut header: BTreeMap<String, (usize, String)> = BTreeMap::new();
        let mut values: Vec<(usize, String)> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let mut tokens = line.split_whitespace().peekable();
            let Some(first) = tokens.peek() else { continue };
            let is_header = values.is_empty()
                && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic());
            if is_header {
                let key = first.to_ascii_lowercase();
                tokens.next();
                let val = tokens.next().ok_or_else(|| GridError::Parse {
                    line: lineno,
                    message: format!("header key {key} has no value"),
                })?;
                header.insert(key, (lineno, val.to_string()));
            } else {
                values.extend(tokens.map(|t| (lineno, t.to_string())));
            }
        }
        if header.is_empty() && values.is_empty() {
            return Err(GridError::Parse {
                line: 1,
                message: "empty grid file".into(),
            });
        }
        fn field<T: std::str::FromStr>(
            header: &BTreeMap<String, (usize, String)>,
            key: &str,
        ) -> Result<Option<T>, GridError>
        where
            T::Err: std::fmt::Display,
        {
            header
                .get(key)
                .map(|(line, v)| {
                    v.parse::<T>().map_err(|e| GridError::Parse {
                        line: *line,
                        message: format!("{key}: {e}"),
                    })
                })
                .transpose()
        }
        let missing = |key: &str| GridError::Parse {
            line: header.len() + 1,
            message: format!("missing header {key}"),
        };
        let ncols: usize = field(&header, "ncols")?.ok_or_else(|| missing("ncols"))?;
        let nrows: usize = field(&header, "nrows")?.ok_or_else(|| missing("nrows"))?;
        let cellsize: f64 = field(&header, "cellsize")?.ok_or_else(|| missing("cellsize"))?;
        let half = 0.5 * cellsize;
        let xll = match field::<f64>(&header, "xllcorner")? {
            Some(x) => x,
            None => field::<f64>(&header, "xllcenter")?.ok_or_else(|| missing("xllcorner"))? - half,
        };
        let yll = match field::<f64>(&header, "yllcorner")? {
            Some(y) => y,
            None => field::<f64>(&header, "yllcenter")?.ok_or_else(|| missing("yllcorner"))? - half,
        };
        let nodata: i64 = field(&header, "nodata_value")?.unwrap_or(-9999);

        if values.len() != ncols * nrows {
            return Err(GridError::Parse {
                line: values.last().map_or(header.len() + 1, |v| v.0),
                message: format!("expected {} values, found {}", ncols * nrows, values.len()),
            });
        }
        let mut cells = Vec::with_capacity(values.len());
        for (i, (line, tok)) in values.iter().enumerate() {
            let v: i64 = tok
                .parse::<i64>()
                .or_else(|_| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|f| f.fract() == 0.0)
                        .map(|f| f as i64)
                        .ok_or(())
                })
                .map_err(|_| GridError::Parse {
                    line: *line,
                    message: format!("not an integer class code: {tok}"),
                })?;
            if v == nodata {
                cells.push(NODATA_BYTE);
            } else if (0..NODATA_BYTE as i64).contains(&v) {
                cells.push(v as u8);
            } else {
                return Err(GridError::UnknownClass {
                    code: v,
                    row: i / ncols,
                    col: i % ncols,
                });
            }
        }
        Self::new(ncols, nrows, xll, yll, cellsize, nodata, cells).map_err(|e| match e {
            GridError::Parse { message, .. } => GridError::Parse { line: 1, message },
            other => other,
        })
    }

    pub fn write_ascii<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "ncols {}", self.ncols)?;
        writeln!(w, "nrows {}", self.nrows)?;
        writeln!(w, "xllcorner {}", self.xll)?;
        writeln!(w, "yllcorner {}", self.yll)?;
        writeln!(w, "cellsize {}", self.cellsize)?;
        writeln!(w, "NODATA_value {}", self.nodata)?;
        let mut line = String::new();
        for row in self.cells.chunks(self.ncols) {
            line.clear();
            for (i, &c) in row.iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                if c == NODATA_BYTE {
                    line.push_str(&self.nodata.to_string());
                } else {
                    line.push_str(&c.to_string());
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Classes of the cell containing `p` plus every cell whose center lies
    /// within `radius` meters of `p`. Nodata cells contribute nothing.
    ///
    /// Distances use a local equirectangular approximation, which is well
    /// under a millimeter off haversine at these radii.
    pub fn classes_within_radius(
        &self,
        p: GeoPoint,
        radius: f64,
        earth: EarthModel,
    ) -> Result<BTreeSet<u8>, GridError> {
        let (row0, col0) = self.cell_of(p).ok_or(GridError::OutOfBounds(p))?;
        let mut out = BTreeSet::new();
        out.extend(self.get(row0, col0));
        if radius <= 0.0 {
            return Ok(out);
        }
        let m_per_deg = earth.radius_m().to_radians();
        let coslat = p.lat().to_radians().cos();
        let dlat = radius / m_per_deg;
        let dlon = radius / (m_per_deg * coslat.max(1e-12));
        let top = self.yll + self.nrows as f64 * self.cellsize;
        let index_range = |lo: f64, hi: f64, n: usize| {
            let lo = (lo.floor().max(0.0) as usize).min(n - 1);
            let hi = (hi.floor().max(0.0) as usize).min(n - 1);
            lo..=hi
        };
        let rows = index_range(
            (top - p.lat() - dlat) / self.cellsize,
            (top - p.lat() + dlat) / self.cellsize,
            self.nrows,
        );
        let cols = index_range(
            (p.lon() - dlon - self.xll) / self.cellsize,
            (p.lon() + dlon - self.xll) / self.cellsize,
            self.ncols,
        );
        for row in rows {
            for col in cols.clone() {
                let Some(code) = self.get(row, col) else { continue };
                let c = self.cell_center(row, col);
                let dy = (c.lat() - p.lat()) * m_per_deg;
                let dx = (c.lon() - p.lon()) * m_per_deg * coslat;
                if dx.hypot(dy) <= radius {
                    out.insert(code);
                }
            }
        }
        Ok(out)
    }
}

/// Counts from one screening pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input_candidates: usize,
    pub kept_candidates: usize,
    pub input_field_points: usize,
    pub kept_field_points: usize,
    pub out_of_bounds: usize,
}

/// Keep each field point iff its neighborhood contains cropland and no tree
/// cover. Candidates survive with their passing sides; candidates with no
/// passing side are dropped. Field points outside the grid are dropped and
/// counted.
pub fn filter_candidates(
    points: &[CandidatePoint],
    grid: &ClassGrid,
    legend: &ClassLegend,
    radius: f64,
    earth: EarthModel,
) -> (Vec<CandidatePoint>, FilterStats) {
    let screened: Vec<(Option<CandidatePoint>, usize, usize)> = points
        .par_iter()
        .map(|c| {
            let mut out = *c;
            let mut oob = 0;
            for side in out.sides.iter_mut() {
                let Some(view) = side else { continue };
                let pass = match grid.classes_within_radius(view.point, radius, earth) {
                    Ok(classes) => {
                        classes.contains(&legend.cropland) && !classes.contains(&legend.tree_cover)
                    }
                    Err(_) => {
                        oob += 1;
                        false
                    }
                };
                if !pass {
                    *side = None;
                }
            }
            let kept = out.surviving_sides();
            ((kept > 0).then_some(out), kept, oob)
        })
        .collect();

    let mut stats = FilterStats {
        input_candidates: points.len(),
        input_field_points: points.iter().map(CandidatePoint::surviving_sides).sum(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for (c, n, oob) in screened {
        stats.kept_field_points += n;
        stats.out_of_bounds += oob;
        kept.extend(c);
    }
    stats.kept_candidates = kept.len();
    (kept, stats)
}
