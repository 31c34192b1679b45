use std::collections::HashMap;

use crate::geodesy::{self, EarthModel, GeoPoint};

/// Greedy minimum-separation thinning.
///
/// Walks `items` in order and keeps an item iff it is strictly farther than
/// `min_sep` meters from every item kept so far. Candidates are bucketed in a
/// 3-D grid over earth-centered coordinates with cell size `min_sep`; since
/// chord length never exceeds arc length, any conflict lies in one of the 27
/// neighboring cells.
pub fn min_separation_thin<T>(
    items: Vec<T>,
    position: impl Fn(&T) -> GeoPoint,
    min_sep: f64,
    earth: EarthModel,
) -> Vec<T> {
    assert!(min_sep > 0.0, "minimum separation must be positive");
    let mut grid: HashMap<[i64; 3], Vec<GeoPoint>> = HashMap::new();
    let mut kept = Vec::new();
    for item in items {
        let p = position(&item);
        let cell = cell_of(p, min_sep, earth);
        let conflict = neighbors(cell).any(|c| {
            grid.get(&c).is_some_and(|pts| {
                pts.iter()
                    .any(|q| geodesy::distance(p, *q, earth) <= min_sep)
            })
        });
        if !conflict {
            grid.entry(cell).or_default().push(p);
            kept.push(item);
        }
    }
    kept
}

fn cell_of(p: GeoPoint, size: f64, earth: EarthModel) -> [i64; 3] {
    let (lat, lon) = (p.lat().to_radians(), p.lon().to_radians());
    let r = earth.radius_m();
    let xyz = [
        r * lat.cos() * lon.cos(),
        r * lat.cos() * lon.sin(),
        r * lat.sin(),
    ];
    xyz.map(|v| (v / size).floor() as i64)
}

fn neighbors(c: [i64; 3]) -> impl Iterator<Item = [i64; 3]> {
    (-1..=1).flat_map(move |dx| {
        (-1..=1).flat_map(move |dy| (-1..=1).map(move |dz| [c[0] + dx, c[1] + dy, c[2] + dz]))
    })
}
