use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::counts::{check_unique, split_fields, Delimiter};
use crate::error::{Error, Result};

/// The sample attributes the bias predictor is trained to recover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Sex,
    Tissue,
    Platform,
    SeriesId,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [
        Attribute::Sex,
        Attribute::Tissue,
        Attribute::Platform,
        Attribute::SeriesId,
    ];

    pub fn column(self) -> &'static str {
        match self {
            Attribute::Sex => "sex",
            Attribute::Tissue => "tissue",
            Attribute::Platform => "platform",
            Attribute::SeriesId => "series_id",
        }
    }
}

impl std::fmt::Display for Attribute {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.column())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    /// Chronological age in months.
    pub age: f64,
    pub sex: String,
    pub tissue: String,
    pub platform: String,
    pub series_id: String,
}

impl SampleMeta {
    pub fn attribute(&self, attr: Attribute) -> &str {
        match attr {
            Attribute::Sex => &self.sex,
            Attribute::Tissue => &self.tissue,
            Attribute::Platform => &self.platform,
            Attribute::SeriesId => &self.series_id,
        }
    }
}

/// Per-sample age target and attributes, one row per sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetadataTable {
    rows: Vec<SampleMeta>,
    index: HashMap<String, usize>,
}

const REQUIRED: [&str; 6] = ["sample_id", "age", "sex", "tissue", "platform", "series_id"];

impl MetadataTable {
    pub fn new(rows: Vec<SampleMeta>) -> Result<Self> {
        let ids: Vec<String> = rows.iter().map(|r| r.sample_id.clone()).collect();
        check_unique(&ids)?;
        for r in &rows {
            if !r.age.is_finite() || r.age < 0.0 {
                return Err(Error::Value {
                    what: "age".into(),
                    at: format!("sample {}", r.sample_id),
                    value: r.age.to_string(),
                });
            }
        }
        let index = ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect();
        Ok(Self { rows, index })
    }

    pub fn rows(&self) -> &[SampleMeta] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleMeta> {
        self.index.get(sample_id).map(|&i| &self.rows[i])
    }

    /// Rows for `sample_ids` in that order; every id must be present.
    pub fn for_samples(&self, sample_ids: &[String]) -> Result<Vec<&SampleMeta>> {
        sample_ids
            .iter()
            .map(|s| {
                self.get(s).ok_or_else(|| {
                    Error::MetadataMismatch(format!("sample {s:?} has no metadata row"))
                })
            })
            .collect()
    }

    /// Sorted distinct values observed for `attr`.
    pub fn vocabulary(&self, attr: Attribute) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.attribute(attr).to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn subset(&self, sample_ids: &[String]) -> Result<Self> {
        let rows = self.for_samples(sample_ids)?.into_iter().cloned().collect();
        Self::new(rows)
    }

    pub fn concat(parts: &[&MetadataTable]) -> Result<Self> {
        Self::new(parts.iter().flat_map(|p| p.rows.iter().cloned()).collect())
    }

    pub fn to_writer<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", REQUIRED.join("\t"))?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.sample_id, r.age, r.sex, r.tissue, r.platform, r.series_id
            )?;
        }
        Ok(())
    }
}

pub fn parse_metadata(path: &Path) -> Result<MetadataTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metadata(std::io::BufReader::new(file), Delimiter::from_path(path))
}

/// Header must name every required column; extra columns are ignored.
pub fn read_metadata<R: BufRead>(reader: R, delim: Delimiter) -> Result<MetadataTable> {
    let mut lines = reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let Some((_, header)) = lines.next() else {
        return Err(Error::MetadataMismatch("empty metadata file".into()));
    };
    let header = header.map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let sep = match delim {
        Delimiter::Comma => ',',
        Delimiter::Tab => '\t',
        Delimiter::Auto if header.contains('\t') => '\t',
        Delimiter::Auto if header.contains(',') => ',',
        Delimiter::Auto => '\t',
    };
    let columns = split_fields(&header, sep);
    let mut pos = [0usize; 6];
    for (slot, name) in pos.iter_mut().zip(REQUIRED) {
        *slot = columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::MetadataMismatch(format!("missing column {name:?}")))?;
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let fields = split_fields(&line, sep);
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let age_field = fields[pos[1]];
        let age = age_field.parse::<f64>().map_err(|_| Error::Value {
            what: "age".into(),
            at: format!("sample {}", fields[pos[0]]),
            value: age_field.to_string(),
        })?;
        rows.push(SampleMeta {
            sample_id: fields[pos[0]].to_string(),
            age,
            sex: fields[pos[2]].to_string(),
            tissue: fields[pos[3]].to_string(),
            platform: fields[pos[4]].to_string(),
            series_id: fields[pos[5]].to_string(),
        });
    }
    MetadataTable::new(rows)
}
