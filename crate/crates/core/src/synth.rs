//! Seeded multi-environment count data with planted age and attribute signal.
//!
//! Log2 expression of gene `j` in sample `i` is
//! `base_j + a_j * age_i + b_j[env_i] + noise`, where `a_j` is nonzero only for
//! signal genes and `b_j` only for confound genes. Counts are
//! `max(1, round(2^x))`, so the files run through the regular ingest path.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval_stats::GroupRow;
use crate::ingest::{CountMatrix, MetadataTable, SampleMeta};
use crate::tensor::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub tissue: String,
    pub platform: String,
    pub series_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Samples drawn for each environment.
    pub n_samples: usize,
    pub n_genes: usize,
    pub k_signal: usize,
    pub k_confound: usize,
    pub environments: Vec<Environment>,
    pub sexes: Vec<String>,
    /// Age range in months.
    pub age_min: f64,
    pub age_max: f64,
    /// Log2-scale noise standard deviation.
    pub noise_std: f64,
    /// Log2 change of a signal gene across the full age range.
    pub signal_amplitude: f64,
    /// Scale of the per-environment log2 offsets of confound genes.
    pub confound_strength: f64,
    /// Mean log2 expression level.
    pub base_log2: f64,
    /// Couple age to environment: environment `k` of `K` draws ages from the
    /// `k`-th slice of the age range.
    pub correlated: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 150,
            n_genes: 500,
            k_signal: 20,
            k_confound: 20,
            environments: (0..4)
                .map(|k| Environment {
                    tissue: format!("tissue{k}"),
                    platform: format!("platform{}", k % 2),
                    series_id: format!("series{k}"),
                })
                .collect(),
            sexes: vec!["F".into(), "M".into()],
            age_min: 1.0,
            age_max: 30.0,
            noise_std: 0.5,
            signal_amplitude: 3.0,
            confound_strength: 2.0,
            base_log2: 8.0,
            correlated: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_samples == 0 || self.n_genes == 0 || self.environments.is_empty() || self.sexes.is_empty() {
            return bad("synthetic data needs samples, genes, environments and sexes".into());
        }
        if self.k_signal + self.k_confound > self.n_genes {
            return bad(format!(
                "k_signal + k_confound = {} exceeds {} genes",
                self.k_signal + self.k_confound,
                self.n_genes
            ));
        }
        if !(self.age_min.is_finite() && self.age_max.is_finite() && 0.0 <= self.age_min && self.age_min < self.age_max) {
            return bad(format!("invalid age range [{}, {}]", self.age_min, self.age_max));
        }
        if !(self.noise_std >= 0.0 && self.confound_strength >= 0.0 && self.signal_amplitude.is_finite()) {
            return bad("noise and confound strength must be nonnegative".into());
        }
        Ok(())
    }
}

/// What was planted, for scoring recovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub signal_genes: Vec<String>,
    /// Log2 change per month, aligned with `signal_genes`.
    pub signal_coef: Vec<f64>,
    pub confound_genes: Vec<String>,
    /// Per-environment log2 offsets, one row per confound gene.
    pub confound_coef: Vec<Vec<f64>>,
    /// Environment index of every sample, in sample order.
    pub environment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub counts: CountMatrix,
    /// Noise-bearing log2 expression before integerization, samples x genes.
    pub log_expr: Matrix,
    pub metadata: MetadataTable,
    pub truth: PlantedTruth,
}

impl SynthDataset {
    /// Write `counts.tsv`, `metadata.tsv` and `truth.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
            let path = dir.join(name);
            let mut buf = Vec::new();
            f(&mut buf).map_err(|e| Error::io(&path, e))?;
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
        };
        write("counts.tsv", &|b| self.counts.to_writer(b))?;
        write("metadata.tsv", &|b| self.metadata.to_writer(b))?;
        let truth = serde_json::to_string_pretty(&self.truth)?;
        write("truth.json", &|b| {
            b.extend_from_slice(truth.as_bytes());
            b.push(b'\n');
            Ok(())
        })
    }

    /// Samples belonging to environment `k`, in order.
    pub fn environment_rows(&self, k: usize) -> Vec<usize> {
        (0..self.truth.environment.len())
            .filter(|&i| self.truth.environment[i] == k)
            .collect()
    }
}

fn width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let d = cfg.n_genes;
    let k_env = cfg.environments.len();
    let n = cfg.n_samples * k_env;
    let gw = width(d);
    let gene_ids: Vec<String> = (0..d).map(|j| format!("g{j:0gw$}")).collect();

    let mut genes_rng = RngState::with_stream(cfg.seed, 0);
    let mut order: Vec<usize> = (0..d).collect();
    genes_rng.shuffle(&mut order);
    let mut signal_idx = order[..cfg.k_signal].to_vec();
    let mut confound_idx = order[cfg.k_signal..cfg.k_signal + cfg.k_confound].to_vec();
    signal_idx.sort_unstable();
    confound_idx.sort_unstable();

    let span = cfg.age_max - cfg.age_min;
    let base: Vec<f64> = (0..d).map(|_| cfg.base_log2 + genes_rng.normal()).collect();
    let mut slope = vec![0.0; d];
    for &j in &signal_idx {
        let sign = if genes_rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        slope[j] = sign * genes_rng.uniform_in(0.5, 1.0) * cfg.signal_amplitude / span;
    }
    let mut offsets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &j in &confound_idx {
        offsets.insert(j, (0..k_env).map(|_| cfg.confound_strength * genes_rng.normal()).collect());
    }

    let mut sample_rng = RngState::with_stream(cfg.seed, 1);
    let mut noise_rng = RngState::with_stream(cfg.seed, 2);
    let sw = width(cfg.n_samples);
    let mut rows = Vec::with_capacity(n);
    let mut environment = Vec::with_capacity(n);
    let mut log_expr = Matrix::zeros((n, d));
    for (k, env) in cfg.environments.iter().enumerate() {
        for s in 0..cfg.n_samples {
            let i = rows.len();
            let u = sample_rng.uniform();
            let age = if cfg.correlated {
                cfg.age_min + span * (k as f64 + u) / k_env as f64
            } else {
                cfg.age_min + span * u
            };
            let sex = cfg.sexes[sample_rng.below(cfg.sexes.len())].clone();
            for j in 0..d {
                let mut x = base[j] + slope[j] * age + cfg.noise_std * noise_rng.normal();
                if let Some(b) = offsets.get(&j) {
                    x += b[k];
                }
                log_expr[[i, j]] = x;
            }
            rows.push(SampleMeta {
                sample_id: format!("{}_s{s:0sw$}", env.series_id),
                age,
                sex,
                tissue: env.tissue.clone(),
                platform: env.platform.clone(),
                series_id: env.series_id.clone(),
            });
            environment.push(k);
        }
    }
    let counts = log_expr.t().mapv(|x| (x.exp2().round().max(1.0)) as u64);
    let sample_ids: Vec<String> = rows.iter().map(|r| r.sample_id.clone()).collect();
    Ok(SynthDataset {
        counts: CountMatrix::new(gene_ids.clone(), sample_ids, counts)?,
        log_expr,
        metadata: MetadataTable::new(rows)?,
        truth: PlantedTruth {
            signal_genes: signal_idx.iter().map(|&j| gene_ids[j].clone()).collect(),
            signal_coef: signal_idx.iter().map(|&j| slope[j]).collect(),
            confound_genes: confound_idx.iter().map(|&j| gene_ids[j].clone()).collect(),
            confound_coef: offsets.into_values().collect(),
            environment,
        },
    })
}

/// Two-group strata for exercising group comparisons: every tissue x sex x
/// age-group stratum has `n_per_group` control and treated values drawn from
/// `N(0, noise_std)`; treated values in `shifted_age_groups` are moved up by
/// `shift_sd * noise_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSynthConfig {
    pub tissues: Vec<String>,
    pub sexes: Vec<String>,
    pub age_groups: Vec<String>,
    pub shifted_age_groups: Vec<String>,
    pub n_per_group: usize,
    pub noise_std: f64,
    pub shift_sd: f64,
    pub model: String,
    pub seed: u64,
}

impl Default for GroupSynthConfig {
    fn default() -> Self {
        Self {
            tissues: vec!["liver".into()],
            sexes: vec!["F".into()],
            age_groups: vec!["young".into(), "old".into()],
            shifted_age_groups: vec!["old".into()],
            n_per_group: 8,
            noise_std: 1.0,
            shift_sd: 2.0,
            model: "model".into(),
            seed: 0,
        }
    }
}

pub fn generate_groups(cfg: &GroupSynthConfig) -> Vec<GroupRow> {
    let mut rng = RngState::with_stream(cfg.seed, 3);
    let mut rows = Vec::new();
    for tissue in &cfg.tissues {
        for sex in &cfg.sexes {
            for age in &cfg.age_groups {
                let shift = if cfg.shifted_age_groups.contains(age) {
                    cfg.shift_sd * cfg.noise_std
                } else {
                    0.0
                };
                for (group, offset) in [("control", 0.0), ("treated", shift)] {
                    for i in 0..cfg.n_per_group {
                        rows.push(GroupRow {
                            sample_id: format!("{tissue}_{sex}_{age}_{group}_{i}"),
                            model: cfg.model.clone(),
                            tissue: tissue.clone(),
                            sex: sex.clone(),
                            age_group: age.clone(),
                            group: group.to_string(),
                            value: offset + cfg.noise_std * rng.normal(),
                        });
                    }
                }
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_stats::{probe_attribute, regression_metrics, welch_t_test, ProbeConfig};
    use ndarray::Axis;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_samples: 60,
            n_genes: 60,
            k_signal: 6,
            k_confound: 6,
            seed,
            ..SynthConfig::default()
        }
    }

    /// Least-squares fit with intercept via normal equations (Gaussian elimination).
    fn ols_r2(x: &Matrix, y: &[f64]) -> f64 {
        let n = x.nrows();
        let p = x.ncols() + 1;
        let mut a = Matrix::zeros((p, p + 1));
        for i in 0..n {
            let row: Vec<f64> = std::iter::once(1.0).chain(x.row(i).iter().copied()).collect();
            for r in 0..p {
                for c in 0..p {
                    a[[r, c]] += row[r] * row[c];
                }
                a[[r, p]] += row[r] * y[i];
            }
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
            for c in 0..=p {
                a.swap([col, c], [piv, c]);
            }
            for r in 0..p {
                if r != col {
                    let f = a[[r, col]] / a[[col, col]];
                    for c in col..=p {
                        a[[r, c]] -= f * a[[col, c]];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..p).map(|r| a[[r, p]] / a[[r, r]]).collect();
        let pred: Vec<f64> = (0..n)
            .map(|i| beta[0] + x.row(i).iter().zip(&beta[1..]).map(|(v, b)| v * b).sum::<f64>())
            .collect();
        regression_metrics(y, &pred).unwrap().r2
    }

    fn signal_columns(ds: &SynthDataset) -> Matrix {
        let idx: Vec<usize> = ds
            .truth
            .signal_genes
            .iter()
            .map(|g| ds.counts.gene_ids().iter().position(|x| x == g).unwrap())
            .collect();
        ds.log_expr.select(Axis(1), &idx)
    }

    fn ages(ds: &SynthDataset) -> Vec<f64> {
        ds.metadata.rows().iter().map(|r| r.age).collect()
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small(4)).unwrap();
        let b = generate(&small(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.log_expr, generate(&small(5)).unwrap().log_expr);
    }

    #[test]
    fn planted_sets_are_disjoint_and_counts_positive() {
        let ds = generate(&small(1)).unwrap();
        assert_eq!(ds.truth.signal_genes.len(), 6);
        assert!(ds.truth.signal_genes.iter().all(|g| !ds.truth.confound_genes.contains(g)));
        assert!(ds.counts.counts().iter().all(|&c| c >= 1));
        assert_eq!(ds.metadata.len(), 60 * 4);
    }

    #[test]
    fn noiseless_signal_is_exactly_linear_in_age() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            ..small(2)
        };
        let ds = generate(&cfg).unwrap();
        let r2 = ols_r2(&signal_columns(&ds), &ages(&ds));
        assert!((r2 - 1.0).abs() < 1e-9, "{r2}");
    }

    #[test]
    fn low_noise_signal_is_recoverable() {
        let cfg = SynthConfig {
            noise_std: 0.1 * 3.0,
            signal_amplitude: 3.0,
            n_samples: 100,
            n_genes: 200,
            k_signal: 20,
            ..small(3)
        };
        let ds = generate(&cfg).unwrap();
        let r2 = ols_r2(&signal_columns(&ds), &ages(&ds));
        assert!(r2 >= 0.95, "{r2}");
    }

    fn tissues(ds: &SynthDataset) -> Vec<String> {
        ds.metadata.rows().iter().map(|r| r.tissue.clone()).collect()
    }

    #[test]
    fn confound_separability_and_null() {
        let strong = SynthConfig {
            confound_strength: 5.0 * 0.5,
            ..small(6)
        };
        let ds = generate(&strong).unwrap();
        let r = probe_attribute("tissue", &ds.log_expr, &tissues(&ds), 0, &ProbeConfig::default()).unwrap();
        assert!(r.balanced_accuracy >= 0.9, "{r:?}");

        let null = SynthConfig {
            confound_strength: 0.0,
            n_samples: 250,
            ..small(6)
        };
        let ds = generate(&null).unwrap();
        let r = probe_attribute("tissue", &ds.log_expr, &tissues(&ds), 0, &ProbeConfig::default()).unwrap();
        assert!((r.balanced_accuracy - 0.25).abs() <= 0.1, "{r:?}");
    }

    #[test]
    fn independent_mode_keeps_age_balanced_across_environments() {
        let mut mean_p = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let ds = generate(&small(100 + seed)).unwrap();
            let a: Vec<f64> = ds.environment_rows(0).iter().map(|&i| ds.metadata.rows()[i].age).collect();
            let b: Vec<f64> = ds.environment_rows(1).iter().map(|&i| ds.metadata.rows()[i].age).collect();
            mean_p += welch_t_test(&a, &b).unwrap().p / seeds as f64;
        }
        assert!(mean_p > 0.01, "{mean_p}");

        let ds = generate(&SynthConfig {
            correlated: true,
            ..small(7)
        })
        .unwrap();
        let a: Vec<f64> = ds.environment_rows(0).iter().map(|&i| ds.metadata.rows()[i].age).collect();
        let b: Vec<f64> = ds.environment_rows(3).iter().map(|&i| ds.metadata.rows()[i].age).collect();
        assert!(welch_t_test(&a, &b).unwrap().p < 1e-6);
    }

    #[test]
    fn files_round_trip_through_ingest() {
        let ds = generate(&small(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_to(dir.path()).unwrap();
        let counts = crate::ingest::parse_counts(&dir.path().join("counts.tsv"), crate::ingest::Delimiter::Auto).unwrap();
        assert_eq!(counts, ds.counts);
        let meta = crate::ingest::parse_metadata(&dir.path().join("metadata.tsv")).unwrap();
        assert_eq!(meta, ds.metadata);
        let truth: PlantedTruth =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth, ds.truth);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            k_signal: 50,
            k_confound: 20,
            n_genes: 60,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap_err().name(), "ConfigError");
    }

    #[test]
    fn group_tables_have_planted_shift() {
        let rows = generate_groups(&GroupSynthConfig {
            n_per_group: 500,
            ..GroupSynthConfig::default()
        });
        let mean = |age: &str, group: &str| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.age_group == age && r.group == group)
                .map(|r| r.value)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!((mean("old", "treated") - mean("old", "control") - 2.0).abs() < 0.3);
        assert!((mean("young", "treated") - mean("young", "control")).abs() < 0.3);
    }
}
