//! Reader for the JSON document returned by an Overpass `out body;` query.

use std::collections::HashMap;

use serde::Deserialize;

use super::{OsmWay, RoadError, RoadNetwork};
use crate::geodesy::GeoPoint;

#[derive(Deserialize)]
struct Document {
    elements: Vec<Element>,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Element {
    Node {
        id: i64,
        lat: f64,
        lon: f64,
    },
    Way {
        id: i64,
        #[serde(default)]
        nodes: Vec<i64>,
        #[serde(default)]
        tags: HashMap<String, String>,
    },
    #[serde(other)]
    Other,
}

/// Parse an Overpass JSON export into a road network.
///
/// Node references may appear before or after the ways that use them.
/// Elements other than nodes and ways (relations, areas, ...) are ignored.
pub fn parse_overpass(document: &str) -> Result<RoadNetwork, RoadError> {
    let doc: Document = serde_json::from_str(document).map_err(|e| RoadError::Parse {
        offset: byte_offset(document, e.line(), e.column()),
        message: e.to_string(),
    })?;

    let mut coords = HashMap::new();
    for el in &doc.elements {
        if let Element::Node { id, lat, lon } = *el {
            let p = GeoPoint::new(lat, lon).map_err(|_| RoadError::InvalidNode { node_id: id })?;
            coords.insert(id, p);
        }
    }

    let mut ways = Vec::new();
    for el in doc.elements {
        let Element::Way { id, nodes, mut tags } = el else {
            continue;
        };
        let resolved = nodes
            .iter()
            .map(|n| {
                coords.get(n).copied().ok_or(RoadError::DanglingReference {
                    way_id: id,
                    node_id: *n,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        ways.push(OsmWay::new(id, resolved, tags.remove("highway").unwrap_or_default())?);
    }
    Ok(RoadNetwork::new(ways))
}

fn byte_offset(doc: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = doc
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(doc.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_WAYS: &str = r#"{
      "version": 0.6,
      "elements": [
        {"type": "node", "id": 1, "lat": 14.0, "lon": 100.0},
        {"type": "node", "id": 2, "lat": 14.001, "lon": 100.0},
        {"type": "node", "id": 3, "lat": 14.002, "lon": 100.0},
        {"type": "node", "id": 4, "lat": 14.002, "lon": 100.001},
        {"type": "node", "id": 5, "lat": 14.002, "lon": 100.002},
        {"type": "way", "id": 10, "nodes": [1, 2, 3], "tags": {"highway": "residential"}},
        {"type": "way", "id": 11, "nodes": [3, 4, 5], "tags": {"highway": "track", "name": "x"}},
        {"type": "relation", "id": 99, "members": []}
      ]
    }"#;

    #[test]
    fn two_ways_sharing_a_node() {
        let net = parse_overpass(TWO_WAYS).unwrap();
        assert_eq!(net.ways().len(), 2);
        assert_eq!(net.ways()[1].highway_tag(), "track");
        let mut distinct: Vec<(u64, u64)> = net
            .ways()
            .iter()
            .flat_map(|w| w.nodes().iter().map(|p| (p.lat().to_bits(), p.lon().to_bits())))
            .collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 5);
        let b = net.bounds().unwrap();
        assert_eq!((b.min_lat, b.max_lat, b.min_lon, b.max_lon), (14.0, 14.002, 100.0, 100.002));
    }

    #[test]
    fn empty_and_node_only() {
        assert!(parse_overpass(r#"{"elements": []}"#).unwrap().ways().is_empty());
        let net = parse_overpass(r#"{"elements": [{"type":"node","id":1,"lat":1.0,"lon":2.0}]}"#)
            .unwrap();
        assert!(net.ways().is_empty());
        assert!(net.bounds().is_none());
    }

    #[test]
    fn dangling_reference_names_way() {
        let doc = r#"{"elements": [
            {"type":"node","id":1,"lat":1.0,"lon":2.0},
            {"type":"way","id":77,"nodes":[1, 8]}]}"#;
        match parse_overpass(doc) {
            Err(RoadError::DanglingReference { way_id, node_id }) => {
                assert_eq!((way_id, node_id), (77, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_reports_offset() {
        let doc = "{\"elements\": [\n  {\"type\": \"node\", \"id\": 1, \"lat\": oops}]}";
        match parse_overpass(doc) {
            Err(RoadError::Parse { offset, .. }) => {
                assert!(doc[offset..].starts_with("oops") || doc[..=offset].ends_with('o'), "{offset}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_way_rejected() {
        let doc = r#"{"elements": [
            {"type":"node","id":1,"lat":1.0,"lon":2.0},
            {"type":"way","id":5,"nodes":[1]}]}"#;
        assert!(matches!(parse_overpass(doc), Err(RoadError::TooFewNodes { way_id: 5 })));
    }
}
