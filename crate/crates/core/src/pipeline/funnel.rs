use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

pub const FUNNEL_HEADER: [&str; 4] = ["stage", "step", "input", "output"];

/// Item counts entering and leaving one step of a stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelEntry {
    pub stage: String,
    pub step: String,
    pub input: u64,
    pub output: u64,
}

impl FunnelEntry {
    pub fn new(stage: &str, step: &str, input: usize, output: usize) -> Self {
        Self {
            stage: stage.to_string(),
            step: step.to_string(),
            input: input as u64,
            output: output as u64,
        }
    }

    pub fn is_filter(&self) -> bool {
        self.output <= self.input
    }
}

/// How the item count shrinks through the pipeline.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FunnelReport {
    pub entries: Vec<FunnelEntry>,
}

impl FunnelReport {
    /// Every row's input equals the previous row's output.
    pub fn is_consistent(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].input == w[0].output)
    }

    /// No row grows its count.
    pub fn is_monotone(&self) -> bool {
        self.entries.iter().all(FunnelEntry::is_filter)
    }

    pub fn first_input(&self) -> Option<u64> {
        self.entries.first().map(|e| e.input)
    }

    pub fn last_output(&self) -> Option<u64> {
        self.entries.last().map(|e| e.output)
    }
}

pub fn write_funnel<W: Write>(w: W, report: &FunnelReport) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(FUNNEL_HEADER)?;
    for e in &report.entries {
        out.write_record([e.stage.clone(), e.step.clone(), e.input.to_string(), e.output.to_string()])?;
    }
    out.flush()
}

pub fn read_funnel<R: Read>(r: R) -> io::Result<FunnelReport> {
    let mut rdr = csv::Reader::from_reader(r);
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    if rdr.headers().map_err(|e| bad(e.to_string()))?.iter().ne(FUNNEL_HEADER) {
        return Err(bad("unexpected funnel header".into()));
    }
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let n = |i: usize| rec[i].parse::<u64>().map_err(|e| bad(format!("{}: {e}", FUNNEL_HEADER[i])));
        entries.push(FunnelEntry {
            stage: rec[0].to_string(),
            step: rec[1].to_string(),
            input: n(2)?,
            output: n(3)?,
        });
    }
    Ok(FunnelReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_and_roundtrip() {
        let r = FunnelReport {
            entries: vec![
                FunnelEntry::new("densify", "field views", 100, 98),
                FunnelEntry::new("filter", "land cover", 98, 40),
                FunnelEntry::new("plan", "requests", 40, 40),
            ],
        };
        assert!(r.is_consistent() && r.is_monotone());
        let mut buf = Vec::new();
        write_funnel(&mut buf, &r).unwrap();
        assert_eq!(read_funnel(&buf[..]).unwrap(), r);
        let broken = FunnelReport {
            entries: vec![FunnelEntry::new("a", "x", 10, 5), FunnelEntry::new("b", "y", 6, 7)],
        };
        assert!(!broken.is_consistent());
        assert!(!broken.is_monotone());
    }
}
