//! UJIIndoorLoc ingestion, RSSI normalisation and building/floor labels.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of wireless access points recorded per fingerprint.
pub const NUM_WAPS: usize = 520;
/// Building/floor grid: 3 buildings x 5 floors.
pub const NUM_BUILDINGS: u8 = 3;
pub const NUM_FLOORS: u8 = 5;
pub const NUM_CLASSES: usize = (NUM_BUILDINGS as usize) * (NUM_FLOORS as usize);
/// RSSI value used by the dataset for "access point not detected".
pub const NOT_DETECTED: i32 = 100;
pub const MIN_RSS_DBM: i32 = -104;

pub const METADATA_COLUMNS: [&str; 9] = [
    "LONGITUDE",
    "LATITUDE",
    "FLOOR",
    "BUILDINGID",
    "SPACEID",
    "RELATIVEPOSITION",
    "USERID",
    "PHONEID",
    "TIMESTAMP",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("line {line}: {message}")]
    Ingest { line: u64, message: String },
    #[error("building {building} / floor {floor} outside the 3x5 grid")]
    Domain { building: i64, floor: i64 },
    #[error("invalid transform config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One raw row of a UJIIndoorLoc file.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintRecord {
    pub wap_rss: Vec<i32>,
    pub longitude: f64,
    pub latitude: f64,
    pub floor: u8,
    pub building_id: u8,
    pub space_id: i64,
    pub relative_position: i64,
    pub user_id: i64,
    pub phone_id: u32,
    pub timestamp: i64,
}

impl FingerprintRecord {
    pub fn class_id(&self) -> Result<ClassId> {
        encode_label(self.building_id.into(), self.floor.into())
    }
}

/// Parameters of the RSSI to [0, 1] mapping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub min_rss: f64,
    pub alpha: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            min_rss: MIN_RSS_DBM as f64,
            alpha: std::f64::consts::E,
        }
    }
}

impl TransformConfig {
    pub fn new(min_rss: f64, alpha: f64) -> Result<Self> {
        let cfg = Self { min_rss, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_rss.is_finite() && self.min_rss < 0.0) {
            return Err(DatasetError::Config(format!(
                "min_rss must be a negative dBm value, got {}",
                self.min_rss
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(DatasetError::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Combined building/floor class in `0..15`, encoded as `building * 5 + floor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(u8);

impl ClassId {
    pub fn new(id: usize) -> Option<Self> {
        (id < NUM_CLASSES).then_some(Self(id as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn building(self) -> u8 {
        self.0 / NUM_FLOORS
    }

    pub fn floor(self) -> u8 {
        self.0 % NUM_FLOORS
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A preprocessed fingerprint. `label` is `None` once the sample has been
/// placed in an unlabeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Arc<[f64]>,
    pub label: Option<ClassId>,
    pub phone_id: u32,
}

impl Sample {
    pub fn unlabeled(&self) -> Sample {
        Sample {
            features: Arc::clone(&self.features),
            label: None,
            phone_id: self.phone_id,
        }
    }
}

/// Maps a reading in dBm to [0, 1]. Readings outside `[min_rss, 0]`,
/// including the +100 "not detected" sentinel, map to 0.
pub fn transform_rss(rss: f64, cfg: &TransformConfig) -> f64 {
    if rss < cfg.min_rss || rss > 0.0 || rss.is_nan() {
        return 0.0;
    }
    ((rss - cfg.min_rss) / -cfg.min_rss).powf(cfg.alpha)
}

pub fn encode_label(building_id: i64, floor: i64) -> Result<ClassId> {
    if !(0..NUM_BUILDINGS as i64).contains(&building_id) || !(0..NUM_FLOORS as i64).contains(&floor) {
        return Err(DatasetError::Domain {
            building: building_id,
            floor,
        });
    }
    Ok(ClassId((building_id * NUM_FLOORS as i64 + floor) as u8))
}

pub fn vectorize(record: &FingerprintRecord, cfg: &TransformConfig) -> Result<Sample> {
    let features: Arc<[f64]> = record
        .wap_rss
        .iter()
        .map(|&r| transform_rss(r as f64, cfg))
        .collect();
    Ok(Sample {
        features,
        label: Some(record.class_id()?),
        phone_id: record.phone_id,
    })
}

pub fn vectorize_all(records: &[FingerprintRecord], cfg: &TransformConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    records.iter().map(|r| vectorize(r, cfg)).collect()
}

pub fn load_ujiindoorloc(path: impl AsRef<Path>) -> Result<Vec<FingerprintRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_ujiindoorloc(file)
}

fn expected_header() -> Vec<String> {
    (1..=NUM_WAPS)
        .map(|i| format!("WAP{i:03}"))
        .chain(METADATA_COLUMNS.iter().map(|s| s.to_string()))
        .collect()
}

/// Strict reader: a wrong column count, a non-numeric cell or an
/// out-of-range value is an error naming the offending line.
pub fn read_ujiindoorloc<R: Read>(reader: R) -> Result<Vec<FingerprintRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();

    let header = match rows.next() {
        None => return Err(DatasetError::Format("missing header row".into())),
        Some(Err(e)) => return Err(DatasetError::Format(format!("unreadable header: {e}"))),
        Some(Ok(h)) => h,
    };
    let expected = expected_header();
    if header.len() != expected.len() {
        return Err(DatasetError::Format(format!(
            "header has {} columns, expected {}",
            header.len(),
            expected.len()
        )));
    }
    for (i, (got, want)) in header.iter().zip(&expected).enumerate() {
        if got.trim() != want {
            return Err(DatasetError::Format(format!(
                "header column {} is {got:?}, expected {want:?}",
                i + 1
            )));
        }
    }

    let mut out = Vec::new();
    for row in rows {
        let row = row.map_err(|e| DatasetError::Ingest {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        out.push(parse_row(&row, line)?);
    }
    Ok(out)
}

fn parse_row(row: &csv::StringRecord, line: u64) -> Result<FingerprintRecord> {
    let err = |message: String| DatasetError::Ingest { line, message };
    if row.len() != NUM_WAPS + METADATA_COLUMNS.len() {
        return Err(err(format!(
            "expected {} columns, found {}",
            NUM_WAPS + METADATA_COLUMNS.len(),
            row.len()
        )));
    }
    let int = |col: usize| -> Result<i64> {
        let cell = row[col].trim();
        cell.parse::<i64>()
            .map_err(|_| err(format!("column {}: {cell:?} is not an integer", col + 1)))
    };
    let real = |col: usize| -> Result<f64> {
        let cell = row[col].trim();
        cell.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(format!("column {}: {cell:?} is not a number", col + 1)))
    };

    let mut wap_rss = Vec::with_capacity(NUM_WAPS);
    for col in 0..NUM_WAPS {
        let v = int(col)?;
        if v != NOT_DETECTED as i64 && !(MIN_RSS_DBM as i64..=0).contains(&v) {
            return Err(err(format!("WAP{:03}: reading {v} outside [-104, 0] and not +100", col + 1)));
        }
        wap_rss.push(v as i32);
    }
    let m = NUM_WAPS;
    let floor = int(m + 2)?;
    let building = int(m + 3)?;
    encode_label(building, floor).map_err(|e| err(e.to_string()))?;
    let phone_id = int(m + 7)?;
    let phone_id = u32::try_from(phone_id).map_err(|_| err(format!("PHONEID {phone_id} is negative")))?;

    Ok(FingerprintRecord {
        wap_rss,
        longitude: real(m)?,
        latitude: real(m + 1)?,
        floor: floor as u8,
        building_id: building as u8,
        space_id: int(m + 4)?,
        relative_position: int(m + 5)?,
        user_id: int(m + 6)?,
        phone_id,
        timestamp: int(m + 8)?,
    })
}

/// Writes records in the UJIIndoorLoc column layout.
pub fn write_ujiindoorloc<W: Write>(writer: W, records: &[FingerprintRecord]) -> Result<()> {
    let io = |e: csv::Error| DatasetError::Format(format!("write failed: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(expected_header()).map_err(io)?;
    let mut cells: Vec<String> = Vec::with_capacity(NUM_WAPS + METADATA_COLUMNS.len());
    for r in records {
        cells.clear();
        cells.extend(r.wap_rss.iter().map(|v| v.to_string()));
        cells.push(r.longitude.to_string());
        cells.push(r.latitude.to_string());
        cells.push(r.floor.to_string());
        cells.push(r.building_id.to_string());
        cells.push(r.space_id.to_string());
        cells.push(r.relative_position.to_string());
        cells.push(r.user_id.to_string());
        cells.push(r.phone_id.to_string());
        cells.push(r.timestamp.to_string());
        w.write_record(&cells).map_err(io)?;
    }
    w.flush().map_err(|e| DatasetError::Format(format!("write failed: {e}")))?;
    Ok(())
}
