//! Flotation cell records and the 14-column CSV format.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad header: expected column `{expected}` at position {position}, found `{found}`")]
    Header {
        position: usize,
        expected: String,
        found: String,
    },
    #[error("unexpected extra column `{0}`")]
    ExtraColumn(String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row}: {found} fields, expected {expected}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// The 14 variables of a flotation cell dataset, in canonical column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Column {
    #[serde(rename = "t")]
    T,
    #[serde(rename = "Q_air")]
    QAir,
    #[serde(rename = "h")]
    H,
    #[serde(rename = "C_s")]
    Cs,
    #[serde(rename = "R_s_feed")]
    RsFeed,
    #[serde(rename = "C_feed")]
    CFeed,
    #[serde(rename = "R_Au_feed")]
    RAuFeed,
    #[serde(rename = "P80")]
    P80,
    #[serde(rename = "Q_feed")]
    QFeed,
    #[serde(rename = "F_s_feed")]
    FsFeed,
    #[serde(rename = "Q_t")]
    Qt,
    #[serde(rename = "Q_c")]
    Qc,
    #[serde(rename = "C_p_tail")]
    Cp,
    #[serde(rename = "C_f_conc")]
    Cf,
}

impl Column {
    pub const ALL: [Column; 14] = [
        Column::T,
        Column::QAir,
        Column::H,
        Column::Cs,
        Column::RsFeed,
        Column::CFeed,
        Column::RAuFeed,
        Column::P80,
        Column::QFeed,
        Column::FsFeed,
        Column::Qt,
        Column::Qc,
        Column::Cp,
        Column::Cf,
    ];

    /// Every column except time.
    pub const FILTERABLE: [Column; 13] = [
        Column::QAir,
        Column::H,
        Column::Cs,
        Column::RsFeed,
        Column::CFeed,
        Column::RAuFeed,
        Column::P80,
        Column::QFeed,
        Column::FsFeed,
        Column::Qt,
        Column::Qc,
        Column::Cp,
        Column::Cf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Column::T => "t",
            Column::QAir => "Q_air",
            Column::H => "h",
            Column::Cs => "C_s",
            Column::RsFeed => "R_s_feed",
            Column::CFeed => "C_feed",
            Column::RAuFeed => "R_Au_feed",
            Column::P80 => "P80",
            Column::QFeed => "Q_feed",
            Column::FsFeed => "F_s_feed",
            Column::Qt => "Q_t",
            Column::Qc => "Q_c",
            Column::Cp => "C_p_tail",
            Column::Cf => "C_f_conc",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Column> {
        Column::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const NUM_INPUTS: usize = 12;
pub const NUM_TARGETS: usize = 2;

/// One sample: time, eleven process measurements, and the two gold grades.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlotationRecord(pub [f64; 14]);

impl FlotationRecord {
    pub fn get(&self, c: Column) -> f64 {
        self.0[c.index()]
    }

    pub fn set(&mut self, c: Column, v: f64) {
        self.0[c.index()] = v;
    }

    /// Model inputs: `t` followed by the eleven process variables.
    pub fn inputs(&self) -> [f64; NUM_INPUTS] {
        let mut x = [0.0; NUM_INPUTS];
        x.copy_from_slice(&self.0[..NUM_INPUTS]);
        x
    }

    /// Model targets `(C_p, C_f)`.
    pub fn targets(&self) -> [f64; NUM_TARGETS] {
        [self.0[12], self.0[13]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub split: Option<Split>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<FlotationRecord>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(records: Vec<FlotationRecord>, provenance: Provenance) -> Self {
        Dataset { records, provenance }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn column(&self, c: Column) -> Vec<f64> {
        self.records.iter().map(|r| r.get(c)).collect()
    }

    pub fn inputs(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.inputs().to_vec()).collect()
    }

    pub fn targets(&self) -> Vec<[f64; NUM_TARGETS]> {
        self.records.iter().map(|r| r.targets()).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), DataError> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(Column::ALL.iter().map(|c| c.name()))?;
        for r in &self.records {
            // Display for f64 is the shortest representation that round-trips
            wtr.write_record(r.0.iter().map(|v| v.to_string()))?;
        }
        wtr.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R, provenance: Provenance) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers()?.clone();
        for (i, expected) in Column::ALL.iter().enumerate() {
            match header.get(i) {
                Some(found) if found.trim() == expected.name() => {}
                found => {
                    return Err(DataError::Header {
                        position: i,
                        expected: expected.name().into(),
                        found: found.unwrap_or("<missing>").into(),
                    })
                }
            }
        }
        if let Some(extra) = header.get(Column::ALL.len()) {
            return Err(DataError::ExtraColumn(extra.into()));
        }
        let mut records = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 14 {
                return Err(DataError::RowLength {
                    row,
                    expected: 14,
                    found: rec.len(),
                });
            }
            let mut vals = [0.0; 14];
            for (i, field) in rec.iter().enumerate() {
                vals[i] = field.trim().parse().map_err(|_| DataError::Parse {
                    row,
                    column: Column::ALL[i].name().into(),
                    value: field.into(),
                })?;
            }
            records.push(FlotationRecord(vals));
        }
        Ok(Dataset { records, provenance })
    }
}

pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let f = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    dataset.write_csv(std::io::BufWriter::new(f))
}

pub fn import_csv(path: &Path) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Dataset::read_csv(
        std::io::BufReader::new(f),
        Provenance {
            source: path.display().to_string(),
            ..Default::default()
        },
    )
}
