use std::collections::BTreeSet;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use advage_core::adversary::{checkpoint_name, Checkpoint, CheckpointEvent, TrainMode};
use advage_core::bsf::export_ranking;
use advage_core::eval_stats::{compare_groups, read_group_table, write_group_table, Contrast, ProbeReport, StabilityReport};
use advage_core::ingest::{
    parse_allowlist, parse_counts, parse_gene_lengths, parse_metadata, Attribute, Delimiter, ExpressionMatrix,
    MetadataTable, PreprocessArtifact,
};
use advage_core::pipeline::{
    check_no_leak, plan_folds, stack_samples, preprocess, probe_model, read_predictions, run_fold, transform, Dataset, FoldPlan,
    RunManifest, ARTIFACT_FILE, BEST_FILE, GENES_FILE, PREDICTIONS_FILE,
};
use advage_core::synth::{generate, generate_groups, GroupSynthConfig};
use advage_core::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, Command, ContrastArgs, Format, ModeArg, SynthKind};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    jobs: usize,
    format: Format,
    written: Mutex<Vec<PathBuf>>,
}

impl Ctx {
    fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| io_err(path, e))?;
        self.record(path.to_path_buf());
        Ok(())
    }

    fn record(&self, path: PathBuf) {
        self.written.lock().expect("output list poisoned").push(path);
    }

    /// `stem.tsv` or `stem.json` depending on `--format`.
    fn table(&self, stem: &str, tsv: String, json: &impl Serialize) -> Result<PathBuf> {
        let (path, body) = match self.format {
            Format::Tsv => (self.out.join(format!("{stem}.tsv")), tsv),
            Format::Json => (self.out.join(format!("{stem}.json")), serde_json::to_string_pretty(json)? + "\n"),
        };
        self.write(&path, body.as_bytes())?;
        Ok(path)
    }

    fn outputs(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .written
            .lock()
            .expect("output list poisoned")
            .iter()
            .map(|p| p.strip_prefix(&self.out).unwrap_or(p).display().to_string())
            .collect();
        v.sort();
        v
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(spec) => RunConfig::load(spec)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        jobs: cli.jobs.max(1),
        format: cli.format,
        written: Mutex::new(Vec::new()),
    };
    let name = command_name(&cli.command);
    let mut manifest = RunManifest::new(name, &ctx.cfg, ctx.cfg.model.seed)?;
    for input in inputs(&cli.command) {
        manifest.add_input(&input)?;
    }
    match cli.command {
        Command::Preprocess {
            counts,
            metadata,
            lengths,
            allowlist,
        } => cmd_preprocess(&ctx, &counts, &metadata, lengths.as_deref(), allowlist.as_deref()),
        Command::Train {
            data,
            mode,
            holdout,
            alpha,
            alpha_grid,
        } => cmd_train(&ctx, &data, mode, &holdout, alpha, alpha_grid),
        Command::Evaluate { runs } => cmd_evaluate(&ctx, &runs),
        Command::Probe { run, data, attribute } => cmd_probe(&ctx, &run, &data, &attribute),
        Command::Compare { table, contrast } => cmd_compare(&ctx, &table, contrast),
        Command::Synth { kind, pooled } => cmd_synth(&ctx, kind, pooled),
        Command::ExportGenes { run, top } => cmd_export_genes(&ctx, &run, top),
    }?;
    manifest.finish(ctx.outputs());
    manifest.write_to(&ctx.out.join(MANIFEST_FILE))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Preprocess { .. } => "preprocess",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Probe { .. } => "probe",
        Command::Compare { .. } => "compare",
        Command::Synth { .. } => "synth",
        Command::ExportGenes { .. } => "export-genes",
    }
}

fn inputs(c: &Command) -> Vec<PathBuf> {
    match c {
        Command::Preprocess {
            counts,
            metadata,
            lengths,
            allowlist,
        } => [Some(counts), Some(metadata), lengths.as_ref(), allowlist.as_ref()]
            .into_iter()
            .flatten()
            .cloned()
            .collect(),
        Command::Train { data, .. } => data.clone(),
        Command::Evaluate { runs } => runs.clone(),
        Command::Probe { run, data, .. } => [run.join(BEST_FILE), run.join(ARTIFACT_FILE)]
            .into_iter()
            .chain(data.iter().cloned())
            .collect(),
        Command::Compare { table, .. } => vec![table.clone()],
        Command::Synth { .. } => Vec::new(),
        Command::ExportGenes { run, .. } => vec![run.join(BEST_FILE), run.join(ARTIFACT_FILE)],
    }
}

fn cmd_preprocess(ctx: &Ctx, counts: &Path, metadata: &Path, lengths: Option<&Path>, allowlist: Option<&Path>) -> Result<()> {
    let mut m = parse_counts(counts, Delimiter::from_path(counts))?;
    if let Some(l) = lengths {
        m = m.with_gene_lengths(&parse_gene_lengths(l)?);
    }
    let meta = parse_metadata(metadata)?;
    let mut filter = ctx.cfg.filter.clone();
    if let Some(a) = allowlist {
        filter.allowlist = Some(parse_allowlist(a)?);
    }
    let ds = Dataset::new("input", m, &meta)?;
    let prep = preprocess(&[&ds], &filter)?;
    ctx.write(&ctx.out.join(ARTIFACT_FILE), prep.artifact.to_json()?.as_bytes())?;
    let mut buf = Vec::new();
    prep.train.to_writer(&mut buf).map_err(|e| io_err(&ctx.out, e))?;
    ctx.write(&ctx.out.join("expression.tsv"), &buf)?;
    println!("kept {} genes across {} samples", prep.artifact.genes().len(), prep.train.sample_ids.len());
    Ok(())
}

fn load_datasets(dirs: &[PathBuf]) -> Result<Vec<Dataset>> {
    let datasets: Vec<Dataset> = dirs.iter().map(|d| Dataset::load(d)).collect::<Result<_>>()?;
    let mut seen = BTreeSet::new();
    for d in &datasets {
        if !seen.insert(d.id.as_str()) {
            return Err(Error::Precondition(format!("dataset id {:?} given twice", d.id)));
        }
    }
    check_no_leak(&datasets.iter().collect::<Vec<_>>())?;
    Ok(datasets)
}

/// Run `f` over `items` on up to `jobs` threads; results keep input order.
fn parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn alpha_dir(alpha: f64) -> String {
    format!("alpha_{alpha}")
}

fn cmd_train(
    ctx: &Ctx,
    data: &[PathBuf],
    mode: Option<ModeArg>,
    holdout: &[String],
    alpha: Option<f64>,
    grid: bool,
) -> Result<()> {
    let datasets = load_datasets(data)?;
    let ids: Vec<String> = datasets.iter().map(|d| d.id.clone()).collect();
    let mut base = ctx.cfg.clone();
    if let Some(m) = mode {
        base.model.mode = match m {
            ModeArg::Loso => TrainMode::Loso,
            ModeArg::Holdout => TrainMode::Holdout,
            ModeArg::Intervention => TrainMode::Intervention,
        };
    }
    let plans = plan_folds(&ids, base.model.mode, holdout)?;
    let alphas = if grid {
        base.alpha_grid.clone()
    } else {
        vec![alpha.unwrap_or(base.model.alpha)]
    };
    let mut jobs: Vec<(PathBuf, RunConfig, FoldPlan)> = Vec::new();
    for &a in &alphas {
        let mut cfg = base.clone();
        cfg.model.alpha = a;
        cfg.validate()?;
        let dir = if grid { ctx.out.join(alpha_dir(a)) } else { ctx.out.clone() };
        ctx.write(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
        for p in &plans {
            jobs.push((dir.join(p.dir_name()), cfg.clone(), p.clone()));
        }
    }
    parallel(&jobs, ctx.jobs, |(dir, cfg, plan)| {
        let mut sink = |event: CheckpointEvent, c: &Checkpoint| -> Result<()> {
            let path = match event {
                CheckpointEvent::Periodic => dir.join(checkpoint_name(c.epoch)),
                CheckpointEvent::LastGood => dir.join(LAST_GOOD_FILE),
            };
            ctx.write(&path, &c.to_bundle()?.to_bytes()?)
        };
        let out = run_fold(&datasets, plan, &cfg.model, &cfg.filter, &mut sink)?;
        for p in out.write_to(dir)? {
            ctx.record(p);
        }
        let maes: Vec<String> = out.results.iter().map(|r| format!("{} MAE {:.3}", r.dataset_id, r.mae)).collect();
        println!(
            "alpha {} {}: {} epochs, selected epoch {}{}{}",
            cfg.model.alpha,
            plan.dir_name(),
            out.outcome.trace.epochs.len(),
            out.outcome.best_epoch,
            if maes.is_empty() { "" } else { ", " },
            maes.join(", ")
        );
        Ok(())
    })?;
    Ok(())
}

/// Directories holding a `config.json` written by `train`.
fn run_units(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(CONFIG_FILE).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut units: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(CONFIG_FILE).is_file())
        .collect();
    units.sort();
    if units.is_empty() {
        return Err(Error::Precondition(format!("{} holds no training run", dir.display())));
    }
    Ok(units)
}

fn fold_dirs(unit: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(unit)
        .map_err(|e| io_err(unit, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("fold_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn cmd_evaluate(ctx: &Ctx, runs: &[PathBuf]) -> Result<()> {
    let mut reports = Vec::new();
    for run in runs {
        for unit in run_units(run)? {
            let cfg: RunConfig = serde_json::from_str(&read_text(&unit.join(CONFIG_FILE))?)?;
            let mut folds = Vec::new();
            for f in fold_dirs(&unit)? {
                let p = f.join(PREDICTIONS_FILE);
                if p.is_file() {
                    folds.extend(read_predictions(&read_text(&p)?)?);
                }
            }
            if folds.is_empty() {
                return Err(Error::Precondition(format!("{} has no holdout predictions", unit.display())));
            }
            reports.push(StabilityReport::from_folds(cfg.model.alpha, &folds, ctx.cfg.dispersion)?);
        }
    }
    reports.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let mut tsv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.to_tsv();
        let skip = if i == 0 { 0 } else { body.find('\n').map_or(0, |p| p + 1) };
        tsv.push_str(&body[skip..]);
    }
    for r in &reports {
        println!("alpha {}: CV(MAE) {:.2}%, CV(r2) {:.2}%", r.alpha, r.cv_mae, r.cv_r2);
    }
    ctx.table("stability", tsv, &reports)?;
    Ok(())
}

fn parse_attribute(s: &str) -> Result<Attribute> {
    Attribute::ALL
        .into_iter()
        .find(|a| a.column() == s)
        .ok_or_else(|| Error::Value {
            what: "attribute".into(),
            at: "--attribute".into(),
            value: s.to_string(),
        })
}

fn cmd_probe(ctx: &Ctx, run: &Path, data: &[PathBuf], attributes: &[String]) -> Result<()> {
    let attrs: Vec<Attribute> = if attributes.is_empty() {
        Attribute::ALL.to_vec()
    } else {
        attributes.iter().map(|a| parse_attribute(a)).collect::<Result<_>>()?
    };
    let ckpt = Checkpoint::load(&run.join(BEST_FILE))?;
    let art = PreprocessArtifact::load(&run.join(ARTIFACT_FILE))?;
    let datasets = load_datasets(data)?;
    let parts: Vec<ExpressionMatrix> = datasets.iter().map(|d| transform(d, &art)).collect::<Result<_>>()?;
    let x = stack_samples(&parts)?;
    let meta = MetadataTable::concat(&datasets.iter().map(|d| &d.meta).collect::<Vec<_>>())?;
    let reports = probe_model(&ckpt.model, &x, &meta, &attrs, ctx.cfg.model.seed, &ctx.cfg.probe)?;
    for r in &reports {
        println!(
            "{}: balanced accuracy {:.3} (permuted {:.3})",
            r.attribute, r.balanced_accuracy, r.baseline_accuracy
        );
    }
    ctx.table("probe", ProbeReport::to_tsv(&reports), &reports)?;
    Ok(())
}

fn cmd_compare(ctx: &Ctx, table: &Path, c: ContrastArgs) -> Result<()> {
    let contrast = match c {
        ContrastArgs {
            control: Some(control),
            treated: Some(treated),
            ..
        } => Contrast::ControlVsTreated { control, treated },
        ContrastArgs {
            young: Some(young),
            old: Some(old),
            ..
        } => Contrast::YoungVsOld { young, old },
        _ => return Err(Error::Config("give --control/--treated or --young/--old".into())),
    };
    let file = std::fs::File::open(table).map_err(|e| io_err(table, e))?;
    let rows = read_group_table(BufReader::new(file))?;
    let cmp = compare_groups(&rows, &contrast)?;
    for s in &cmp.skipped {
        eprintln!("warning: skipped stratum {s}");
    }
    println!("{} strata compared, {} skipped", cmp.rows.len(), cmp.skipped.len());
    ctx.table("comparisons", cmp.to_tsv(), &cmp)?;
    Ok(())
}

fn cmd_synth(ctx: &Ctx, kind: SynthKind, pooled: bool) -> Result<()> {
    match kind {
        SynthKind::Groups => {
            let rows = generate_groups(&GroupSynthConfig {
                seed: ctx.cfg.synth.seed,
                ..GroupSynthConfig::default()
            });
            ctx.write(&ctx.out.join("groups.tsv"), write_group_table(&rows).as_bytes())?;
        }
        SynthKind::Expression => {
            let s = generate(&ctx.cfg.synth)?;
            let datasets = if pooled {
                vec![Dataset::new("pooled", s.counts.clone(), &s.metadata)?]
            } else {
                Dataset::split_by_series(&s.counts, &s.metadata)?
            };
            for d in &datasets {
                let dir = ctx.out.join(&d.id);
                d.write_to(&dir)?;
                ctx.record(dir.join(advage_core::pipeline::COUNTS_FILE));
                ctx.record(dir.join(advage_core::pipeline::METADATA_FILE));
            }
            ctx.write(&ctx.out.join("truth.json"), serde_json::to_string_pretty(&s.truth)?.as_bytes())?;
            println!("wrote {} dataset(s) with {} samples", datasets.len(), s.counts.n_samples());
        }
    }
    Ok(())
}

fn cmd_export_genes(ctx: &Ctx, run: &Path, top: Option<usize>) -> Result<()> {
    let ckpt = Checkpoint::load(&run.join(BEST_FILE))?;
    let art = PreprocessArtifact::load(&run.join(ARTIFACT_FILE))?;
    let model = &ckpt.model;
    let gate = model
        .bsf
        .as_ref()
        .ok_or_else(|| Error::Precondition("model was trained without a gene gate".into()))?;
    let mut ranking = export_ranking(gate.weights(), art.genes(), model.config().mask_threshold)?;
    if let Some(k) = top {
        ranking.entries.truncate(k);
    }
    if ranking.is_empty() {
        return Err(Error::EmptyGeneSet);
    }
    println!("{} genes above threshold {}", ranking.entries.len(), ranking.threshold);
    let stem = GENES_FILE.trim_end_matches(".tsv");
    ctx.table(stem, ranking.to_tsv(), &ranking)?;
    Ok(())
}
