use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Field separator of a delimited text table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Delimiter {
    Tab,
    Comma,
    /// Pick tab or comma from the header line.
    #[default]
    Auto,
}

impl Delimiter {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Delimiter::Comma,
            Some("tsv") | Some("txt") => Delimiter::Tab,
            _ => Delimiter::Auto,
        }
    }

    fn resolve(self, header: &str) -> char {
        match self {
            Delimiter::Tab => '\t',
            Delimiter::Comma => ',',
            Delimiter::Auto => {
                if header.contains('\t') {
                    '\t'
                } else if header.contains(',') {
                    ','
                } else {
                    '\t'
                }
            }
        }
    }
}

pub(crate) fn split_fields(line: &str, delim: char) -> Vec<&str> {
    line.trim_end_matches(['\r', '\n'])
        .split(delim)
        .map(str::trim)
        .collect()
}

/// Raw integer counts, genes in rows and samples in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    gene_ids: Vec<String>,
    sample_ids: Vec<String>,
    counts: Array2<u64>,
    gene_lengths: Option<Vec<u64>>,
}

impl CountMatrix {
    pub fn new(gene_ids: Vec<String>, sample_ids: Vec<String>, counts: Array2<u64>) -> Result<Self> {
        if counts.dim() != (gene_ids.len(), sample_ids.len()) {
            return Err(Error::Shape(format!(
                "counts are {:?} but {} genes x {} samples were named",
                counts.dim(),
                gene_ids.len(),
                sample_ids.len()
            )));
        }
        check_unique(&gene_ids)?;
        check_unique(&sample_ids)?;
        Ok(Self {
            gene_ids,
            sample_ids,
            counts,
            gene_lengths: None,
        })
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn gene_lengths(&self) -> Option<&[u64]> {
        self.gene_lengths.as_deref()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn gene_index(&self) -> HashMap<&str, usize> {
        self.gene_ids
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect()
    }

    /// Attach per-gene lengths. Genes absent from `lengths` make the whole
    /// annotation unusable, so the length filter is skipped in that case.
    pub fn with_gene_lengths(mut self, lengths: &HashMap<String, u64>) -> Self {
        let resolved: Option<Vec<u64>> = self
            .gene_ids
            .iter()
            .map(|g| lengths.get(g).copied())
            .collect();
        if resolved.is_none() {
            log::warn!("gene length table does not cover every gene; length filter disabled");
        }
        self.gene_lengths = resolved;
        self
    }

    /// Keep only the named genes, in the order given.
    pub fn select_genes(&self, genes: &[String]) -> Result<Self> {
        let index = self.gene_index();
        let rows: Vec<usize> = genes
            .iter()
            .map(|g| {
                index
                    .get(g.as_str())
                    .copied()
                    .ok_or_else(|| Error::Precondition(format!("gene {g:?} not in count matrix")))
            })
            .collect::<Result<_>>()?;
        let counts = self.counts.select(ndarray::Axis(0), &rows);
        let gene_lengths = self
            .gene_lengths
            .as_ref()
            .map(|l| rows.iter().map(|&r| l[r]).collect());
        Ok(Self {
            gene_ids: genes.to_vec(),
            sample_ids: self.sample_ids.clone(),
            counts,
            gene_lengths,
        })
    }

    /// Keep only the named samples, in the order given.
    pub fn select_samples(&self, samples: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let cols: Vec<usize> = samples
            .iter()
            .map(|s| {
                index
                    .get(s.as_str())
                    .copied()
                    .ok_or_else(|| Error::Precondition(format!("sample {s:?} not in count matrix")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            gene_ids: self.gene_ids.clone(),
            sample_ids: samples.to_vec(),
            counts: self.counts.select(ndarray::Axis(1), &cols),
            gene_lengths: self.gene_lengths.clone(),
        })
    }

    /// Concatenate sample columns of several matrices over the union of their
    /// genes. Genes missing from one matrix contribute zero counts there.
    pub fn concat_samples(parts: &[&CountMatrix]) -> Result<Self> {
        let mut genes: Vec<String> = parts
            .iter()
            .flat_map(|m| m.gene_ids.iter().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        genes.sort();
        let row_of: HashMap<&str, usize> =
            genes.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let samples: Vec<String> = parts
            .iter()
            .flat_map(|m| m.sample_ids.iter().cloned())
            .collect();
        check_unique(&samples)?;
        let mut counts = Array2::<u64>::zeros((genes.len(), samples.len()));
        let mut offset = 0;
        for m in parts {
            for (g, gid) in m.gene_ids.iter().enumerate() {
                let r = row_of[gid.as_str()];
                for s in 0..m.n_samples() {
                    counts[[r, offset + s]] = m.counts[[g, s]];
                }
            }
            offset += m.n_samples();
        }
        // Lengths survive only if every part carries a consistent annotation.
        let mut lengths: HashMap<String, u64> = HashMap::new();
        let mut usable = true;
        for m in parts {
            match &m.gene_lengths {
                Some(l) => {
                    for (g, &len) in m.gene_ids.iter().zip(l) {
                        lengths.insert(g.clone(), len);
                    }
                }
                None => usable = false,
            }
        }
        let mut out = Self::new(genes, samples, counts)?;
        if usable {
            out = out.with_gene_lengths(&lengths);
        }
        Ok(out)
    }

    pub fn to_writer<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "gene_id")?;
        for s in &self.sample_ids {
            write!(w, "\t{s}")?;
        }
        writeln!(w)?;
        for (g, row) in self.gene_ids.iter().zip(self.counts.rows()) {
            write!(w, "{g}")?;
            for c in row {
                write!(w, "\t{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub(crate) fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

/// Read a count matrix: header row of sample ids (first cell is a label),
/// then one row per gene with its id followed by nonnegative integer counts.
pub fn parse_counts(path: &Path, delim: Delimiter) -> Result<CountMatrix> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_counts(std::io::BufReader::new(file), delim)
}

pub fn read_counts<R: BufRead>(reader: R, delim: Delimiter) -> Result<CountMatrix> {
    let mut lines = reader.lines().enumerate();
    let (header, sep) = loop {
        match lines.next() {
            Some((i, line)) => {
                let line = line.map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let sep = delim.resolve(&line);
                break (line, sep);
            }
            None => {
                return Err(Error::Parse {
                    line: 0,
                    msg: "empty count file".into(),
                })
            }
        }
    };
    let sample_ids: Vec<String> = split_fields(&header, sep)
        .into_iter()
        .skip(1)
        .map(String::from)
        .collect();
    if sample_ids.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "header names no samples".into(),
        });
    }
    check_unique(&sample_ids)?;

    let mut gene_ids = Vec::new();
    let mut flat = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(&line, sep);
        if fields.len() != sample_ids.len() + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "expected {} fields, found {}",
                    sample_ids.len() + 1,
                    fields.len()
                ),
            });
        }
        let gene = fields[0].to_string();
        for (field, sample) in fields[1..].iter().zip(&sample_ids) {
            let value = field.parse::<u64>().map_err(|_| Error::Value {
                what: format!("gene {gene}"),
                at: format!("sample {sample}"),
                value: field.to_string(),
            })?;
            flat.push(value);
        }
        gene_ids.push(gene);
    }
    let counts = Array2::from_shape_vec((gene_ids.len(), sample_ids.len()), flat)
        .expect("row lengths were checked");
    CountMatrix::new(gene_ids, sample_ids, counts)
}

/// Two-column table of gene id and length in base pairs, with a header.
pub fn parse_gene_lengths(path: &Path) -> Result<HashMap<String, u64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Ok(out);
    };
    let sep = Delimiter::from_path(path).resolve(header);
    for (i, line) in lines {
        let fields = split_fields(line, sep);
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: i + 1,
                msg: "expected gene_id and length_bp".into(),
            });
        }
        let len = fields[1].parse::<u64>().map_err(|_| Error::Value {
            what: "length_bp".into(),
            at: format!("gene {}", fields[0]),
            value: fields[1].to_string(),
        })?;
        if out.insert(fields[0].to_string(), len).is_some() {
            return Err(Error::DuplicateId(fields[0].to_string()));
        }
    }
    Ok(out)
}

/// One gene id per line; blank lines and `#` comments ignored.
pub fn parse_allowlist(path: &Path) -> Result<std::collections::BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}
