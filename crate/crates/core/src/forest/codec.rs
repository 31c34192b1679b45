//! Versioned little-endian model file.
//!
//! ```text
//! magic "CRRF" | version u16 | n_features u32 | n_classes u32
//! n_trees u32 | max_features u32 | min_leaf u32 | max_depth u32 (0 = none) | seed u64
//! criterion: len u32 + utf8 | class names: (len u32 + utf8) * n_classes
//! per tree: n_nodes u32, then per node
//!   tag 0: feature u32, threshold f64, left u32, right u32
//!   tag 1: n_classes f64
//! ```

use super::{ForestError, ForestParams, Node, RandomForestModel, Tree};
use crate::labeling::{CropClass, N_CLASSES};

const MAGIC: &[u8; 4] = b"CRRF";
const VERSION: u16 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

pub(super) fn encode(m: &RandomForestModel) -> Vec<u8> {
    let p = &m.params;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((m.n_features as u32).to_le_bytes());
    out.extend((N_CLASSES as u32).to_le_bytes());
    out.extend((p.n_trees as u32).to_le_bytes());
    out.extend((p.max_features as u32).to_le_bytes());
    out.extend((p.min_leaf as u32).to_le_bytes());
    out.extend((p.max_depth.unwrap_or(0) as u32).to_le_bytes());
    out.extend(p.seed.to_le_bytes());
    put_str(&mut out, &p.criterion);
    for c in CropClass::ALL {
        put_str(&mut out, c.name());
    }
    for t in &m.trees {
        out.extend((t.nodes().len() as u32).to_le_bytes());
        for n in t.nodes() {
            match n {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    out.push(0);
                    out.extend(feature.to_le_bytes());
                    out.extend(threshold.to_le_bytes());
                    out.extend(left.to_le_bytes());
                    out.extend(right.to_le_bytes());
                }
                Node::Leaf { dist } => {
                    out.push(1);
                    for v in dist {
                        out.extend(v.to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ForestError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ForestError::Format(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ForestError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ForestError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ForestError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ForestError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ForestError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, ForestError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| ForestError::Format(e.to_string()))
    }
}

pub(super) fn decode(buf: &[u8]) -> Result<RandomForestModel, ForestError> {
    let bad = |m: String| ForestError::Format(m);
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("not a forest model (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_features = r.u32()? as usize;
    let n_classes = r.u32()? as usize;
    if n_classes != N_CLASSES {
        return Err(bad(format!("{n_classes} classes, expected {N_CLASSES}")));
    }
    let n_trees = r.u32()? as usize;
    let max_features = r.u32()? as usize;
    let min_leaf = r.u32()? as usize;
    let max_depth = match r.u32()? {
        0 => None,
        d => Some(d as usize),
    };
    let seed = r.u64()?;
    let criterion = r.string()?;
    for c in CropClass::ALL {
        let name = r.string()?;
        if name != c.name() {
            return Err(bad(format!("class legend mismatch: {name:?} where {:?} expected", c.name())));
        }
    }
    let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
    for t in 0..n_trees {
        let n_nodes = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
        for _ in 0..n_nodes {
            nodes.push(match r.u8()? {
                0 => {
                    let feature = r.u32()?;
                    let threshold = r.f64()?;
                    let (left, right) = (r.u32()?, r.u32()?);
                    if feature as usize >= n_features || left as usize >= n_nodes || right as usize >= n_nodes {
                        return Err(bad(format!("tree {t}: split refers outside the model")));
                    }
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    }
                }
                1 => {
                    let mut dist = [0.0; N_CLASSES];
                    for v in dist.iter_mut() {
                        *v = r.f64()?;
                    }
                    Node::Leaf { dist }
                }
                tag => return Err(bad(format!("tree {t}: unknown node tag {tag}"))),
            });
        }
        if nodes.is_empty() {
            return Err(bad(format!("tree {t} has no nodes")));
        }
        // children always follow their parent, which rules out cycles
        for (i, n) in nodes.iter().enumerate() {
            if let Node::Split { left, right, .. } = n {
                if *left as usize <= i || *right as usize <= i {
                    return Err(bad(format!("tree {t}: child precedes parent at node {i}")));
                }
            }
        }
        trees.push(Tree::from_nodes(nodes));
    }
    if r.pos != buf.len() {
        return Err(bad(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(RandomForestModel {
        params: ForestParams {
            n_trees,
            max_features,
            min_leaf,
            max_depth,
            criterion,
            seed,
        },
        n_features,
        trees,
    })
}
