//! Per-stratum two-group comparisons of predicted ages.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use super::stats::{bh_adjust, stars, welch_t_test};
use crate::error::{Error, Result};
use crate::ingest::counts::split_fields;

/// One sample's prediction under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub sample_id: String,
    pub model: String,
    pub tissue: String,
    pub sex: String,
    pub age_group: String,
    pub group: String,
    pub value: f64,
}

const COLUMNS: [&str; 7] = ["sample_id", "model", "tissue", "sex", "age_group", "group", "value"];

/// Which two groups are compared. Control-vs-treated contrasts the `group`
/// column inside tissue x sex x age strata; young-vs-old contrasts the
/// `age_group` column inside tissue x sex strata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contrast {
    ControlVsTreated { control: String, treated: String },
    YoungVsOld { young: String, old: String },
}

impl Contrast {
    fn labels(&self) -> (&str, &str) {
        match self {
            Contrast::ControlVsTreated { control, treated } => (control, treated),
            Contrast::YoungVsOld { young, old } => (young, old),
        }
    }

    fn side<'a>(&self, row: &'a GroupRow) -> &'a str {
        match self {
            Contrast::ControlVsTreated { .. } => &row.group,
            Contrast::YoungVsOld { .. } => &row.age_group,
        }
    }

    fn stratum_age<'a>(&self, row: &'a GroupRow) -> &'a str {
        match self {
            Contrast::ControlVsTreated { .. } => &row.age_group,
            Contrast::YoungVsOld { .. } => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub model: String,
    pub tissue: String,
    pub sex: String,
    /// Empty for young-vs-old contrasts, where age defines the groups.
    pub age_group: String,
    pub group_a: String,
    pub group_b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub p_adj: f64,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Comparisons {
    pub rows: Vec<GroupComparison>,
    /// Strata that could not be tested, with the reason.
    pub skipped: Vec<String>,
}

impl Comparisons {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "model\ttissue\tsex\tage_group\tgroup_a\tgroup_b\tn_a\tn_b\tmean_a\tmean_b\tt\tdf\tp\tp_adj\tstars\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.model,
                r.tissue,
                r.sex,
                r.age_group,
                r.group_a,
                r.group_b,
                r.n_a,
                r.n_b,
                r.mean_a,
                r.mean_b,
                r.t,
                r.df,
                r.p,
                r.p_adj,
                r.stars
            ));
        }
        out
    }
}

type StratumKey<'a> = (&'a str, &'a str, &'a str, &'a str);

/// Welch test per stratum and model, Benjamini-Hochberg adjusted within each
/// tissue x sex family across models. Strata missing a group (or with fewer
/// than two samples in one) are skipped with a warning.
pub fn compare_groups(rows: &[GroupRow], contrast: &Contrast) -> Result<Comparisons> {
    let (label_a, label_b) = contrast.labels();
    // (tissue, sex, age stratum, model) -> (values a, values b)
    let mut strata: BTreeMap<StratumKey, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let entry = strata
            .entry((&r.tissue, &r.sex, contrast.stratum_age(r), &r.model))
            .or_default();
        let side = contrast.side(r);
        if side == label_a {
            entry.0.push(r.value);
        } else if side == label_b {
            entry.1.push(r.value);
        }
    }
    let mut out = Comparisons::default();
    let mut families: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for ((tissue, sex, age, model), (a, b)) in &strata {
        let describe = || format!("model={model} tissue={tissue} sex={sex} age_group={age}");
        let result = match welch_t_test(a, b) {
            Ok(r) => r,
            Err(Error::Precondition(msg)) => {
                log::warn!("skipping stratum {}: {msg}", describe());
                out.skipped.push(format!("{}: {msg}", describe()));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        families.entry((tissue, sex)).or_default().push(out.rows.len());
        out.rows.push(GroupComparison {
            model: model.to_string(),
            tissue: tissue.to_string(),
            sex: sex.to_string(),
            age_group: age.to_string(),
            group_a: label_a.to_string(),
            group_b: label_b.to_string(),
            n_a: a.len(),
            n_b: b.len(),
            mean_a: mean(a),
            mean_b: mean(b),
            t: result.t,
            df: result.df,
            p: result.p,
            p_adj: f64::NAN,
            stars: String::new(),
        });
    }
    for members in families.values() {
        let raw: Vec<f64> = members.iter().map(|&i| out.rows[i].p).collect();
        for (&i, adj) in members.iter().zip(bh_adjust(&raw)?) {
            out.rows[i].p_adj = adj;
            out.rows[i].stars = stars(adj).to_string();
        }
    }
    Ok(out)
}

/// Read a long-format table with columns `sample_id, model, tissue, sex,
/// age_group, group, value` (any order, tab separated, extra columns ignored).
pub fn read_group_table<R: BufRead>(reader: R) -> Result<Vec<GroupRow>> {
    let mut lines = reader.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header = header.map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    let columns = split_fields(&header, '\t');
    let mut pos = [0usize; 7];
    for (slot, name) in pos.iter_mut().zip(COLUMNS) {
        *slot = columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::MetadataMismatch(format!("missing column {name:?}")))?;
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let f = split_fields(&line, '\t');
        if f.len() != columns.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, found {}", columns.len(), f.len()),
            });
        }
        let value = f[pos[6]].parse::<f64>().map_err(|_| Error::Value {
            what: "value".into(),
            at: format!("line {lineno}"),
            value: f[pos[6]].to_string(),
        })?;
        rows.push(GroupRow {
            sample_id: f[pos[0]].to_string(),
            model: f[pos[1]].to_string(),
            tissue: f[pos[2]].to_string(),
            sex: f[pos[3]].to_string(),
            age_group: f[pos[4]].to_string(),
            group: f[pos[5]].to_string(),
            value,
        });
    }
    Ok(rows)
}

pub fn write_group_table(rows: &[GroupRow]) -> String {
    let mut out = COLUMNS.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.sample_id, r.model, r.tissue, r.sex, r.age_group, r.group, r.value
        ));
    }
    out
}
