use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use sha2::{Digest, Sha256};

use super::{ImageRequest, SvError};

pub const MANIFEST_HEADER: [&str; 7] =
    ["request_id", "lat", "lon", "heading_deg", "status", "capture_date", "file"];

const MANIFEST: &str = "manifest.csv";
const IMAGES: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchStatus {
    /// Image stored and captured inside the request window.
    Ok,
    /// Image stored but captured outside the request window.
    Excluded,
    Unavailable,
    Failed,
}

impl FetchStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FetchStatus::Ok => "ok",
            FetchStatus::Excluded => "excluded",
            FetchStatus::Unavailable => "unavailable",
            FetchStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ok" => FetchStatus::Ok,
            "excluded" => FetchStatus::Excluded,
            "unavailable" => FetchStatus::Unavailable,
            "failed" => FetchStatus::Failed,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub request_id: String,
    pub lat: f64,
    pub lon: f64,
    pub heading_deg: f64,
    pub status: FetchStatus,
    pub capture_date: Option<NaiveDate>,
    /// Path of the stored image relative to the cache directory.
    pub file: Option<String>,
}

impl CacheEntry {
    pub fn for_request(r: &ImageRequest, status: FetchStatus) -> Self {
        Self {
            request_id: r.request_id.clone(),
            lat: r.street.lat(),
            lon: r.street.lon(),
            heading_deg: r.heading.degrees(),
            status,
            capture_date: None,
            file: None,
        }
    }

    fn record(&self) -> [String; 7] {
        [
            self.request_id.clone(),
            self.lat.to_string(),
            self.lon.to_string(),
            self.heading_deg.to_string(),
            self.status.as_str().to_string(),
            self.capture_date.map(|d| d.to_string()).unwrap_or_default(),
            self.file.clone().unwrap_or_default(),
        ]
    }
}

/// Content-addressed image store with an append-only CSV manifest.
///
/// Images live under `images/<sha256>.bin`. Each result appends one manifest
/// row; on load the last row per request wins, so an interrupted run resumes
/// from whatever was recorded.
pub struct ImageCache {
    dir: PathBuf,
    entries: BTreeMap<String, CacheEntry>,
    appender: Option<csv::Writer<BufWriter<File>>>,
}

impl ImageCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, SvError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join(IMAGES))?;
        let mut entries = BTreeMap::new();
        let path = dir.join(MANIFEST);
        if path.exists() {
            for e in read_manifest(File::open(&path)?)? {
                entries.insert(e.request_id.clone(), e);
            }
        }
        Ok(Self {
            dir,
            entries,
            appender: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST)
    }

    pub fn entry(&self, request_id: &str) -> Option<&CacheEntry> {
        self.entries.get(request_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    /// A settled entry that does not need another transport call.
    pub fn hit(&self, request_id: &str) -> Option<&CacheEntry> {
        let e = self.entries.get(request_id)?;
        match e.status {
            FetchStatus::Unavailable => Some(e),
            FetchStatus::Ok | FetchStatus::Excluded => e
                .file
                .as_ref()
                .filter(|f| self.dir.join(f).is_file())
                .map(|_| e),
            FetchStatus::Failed => None,
        }
    }

    pub fn image_bytes(&self, request_id: &str) -> Result<Option<Vec<u8>>, SvError> {
        match self.entries.get(request_id).and_then(|e| e.file.as_ref()) {
            Some(f) => Ok(Some(fs::read(self.dir.join(f))?)),
            None => Ok(None),
        }
    }

    /// Store an image (if any) and append the entry to the manifest.
    pub fn record(&mut self, mut entry: CacheEntry, image: Option<&[u8]>) -> Result<(), SvError> {
        if let Some(bytes) = image {
            let name = format!("{IMAGES}/{}.bin", hex::encode(Sha256::digest(bytes)));
            let path = self.dir.join(&name);
            if !path.exists() {
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, bytes)?;
                fs::rename(&tmp, &path)?;
            }
            entry.file = Some(name);
        }
        if self.appender.is_none() {
            let path = self.manifest_path();
            let fresh = !path.exists() || fs::metadata(&path)?.len() == 0;
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            if fresh {
                w.write_record(MANIFEST_HEADER)?;
            }
            self.appender = Some(w);
        }
        let w = self.appender.as_mut().expect("appender initialized above");
        w.write_record(entry.record())?;
        w.flush()?;
        self.entries.insert(entry.request_id.clone(), entry);
        Ok(())
    }

    /// Rewrite the manifest with one row per request, sorted by request id.
    pub fn compact(&mut self) -> Result<(), SvError> {
        self.appender = None;
        let path = self.manifest_path();
        let tmp = path.with_extension("csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            w.write_record(MANIFEST_HEADER)?;
            for e in self.entries.values() {
                w.write_record(e.record())?;
            }
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }
}

pub fn read_manifest<R: std::io::Read>(r: R) -> Result<Vec<CacheEntry>, SvError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(MANIFEST_HEADER) {
        return Err(SvError::Manifest {
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| SvError::Manifest { line, message };
        let f = |i: usize| -> Result<f64, SvError> {
            rec[i].parse().map_err(|e| bad(format!("{}: {e}", MANIFEST_HEADER[i])))
        };
        let status = FetchStatus::parse(&rec[4]).ok_or_else(|| bad(format!("status {:?}", &rec[4])))?;
        let capture_date = match &rec[5] {
            "" => None,
            s => Some(s.parse().map_err(|e| bad(format!("capture_date: {e}")))?),
        };
        out.push(CacheEntry {
            request_id: rec[0].to_string(),
            lat: f(1)?,
            lon: f(2)?,
            heading_deg: f(3)?,
            status,
            capture_date,
            file: (!rec[6].is_empty()).then(|| rec[6].to_string()),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{BearingDeg, GeoPoint};
    use crate::svclient::DateWindow;

    #[test]
    fn persist_reload_and_last_row_wins() {
        let dir = tempfile::tempdir().unwrap();
        let w = DateWindow::new(
            NaiveDate::from_ymd_opt(2022, 5, 1).unwrap(),
            NaiveDate::from_ymd_opt(2022, 10, 31).unwrap(),
        )
        .unwrap();
        let p = GeoPoint::new(14.0, 100.0).unwrap();
        let r = ImageRequest::new(p, BearingDeg::new(90.0), p, 640, w);
        {
            let mut c = ImageCache::open(dir.path()).unwrap();
            c.record(CacheEntry::for_request(&r, FetchStatus::Failed), None).unwrap();
            assert!(c.hit(&r.request_id).is_none());
            let mut e = CacheEntry::for_request(&r, FetchStatus::Ok);
            e.capture_date = NaiveDate::from_ymd_opt(2022, 6, 1);
            c.record(e, Some(b"pixels")).unwrap();
        }
        let mut c = ImageCache::open(dir.path()).unwrap();
        let hit = c.hit(&r.request_id).unwrap();
        assert_eq!(hit.status, FetchStatus::Ok);
        assert_eq!(c.image_bytes(&r.request_id).unwrap().unwrap(), b"pixels");
        c.compact().unwrap();
        let rows = read_manifest(File::open(c.manifest_path()).unwrap()).unwrap();
        assert_eq!(rows.len(), 1);
    }
}
