//! Acceptance criteria 1-9. Runs as a plain binary and prints one PASS/FAIL
//! line per criterion; exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use advage_core::adversary::{
    build_model, train_step, AdversarialModel, Batch, ModelConfig, Optimizers, ParamGroup, TrainData, TrainMode,
    Trainer, Vocabulary,
};
use advage_core::bsf::{export_ranking, BsfLayer, SparsityPenalty};
use advage_core::eval_stats::{
    bh_adjust, compare_groups, cross_dataset_cv, probe_attribute, proxy_divergence, welch_t_test, Contrast,
    Dispersion, ProbeConfig, StabilityReport,
};
use advage_core::ingest::{CountMatrix, FilterParams};
use advage_core::pipeline::{plan_folds, predict_dataset, preprocess, run_fold, transform, Dataset, FoldOutput};
use advage_core::synth::{generate, generate_groups, GroupSynthConfig, SynthConfig, SynthDataset};
use advage_core::tensor::{
    grad_check, one_hot, LayerSpec, LossHead, Matrix, Mode, Objective, ParamTensor, RngState, Stack, StackObjective,
};
use ndarray::{Array1, Axis};
use statrs::distribution::{ContinuousCDF, StudentsT};

const FD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const FD_BUDGET_S: f64 = 60.0;

const SEEDS: u64 = 5;
const CONFOUND_STRENGTH: f64 = 6.0;
const EPOCHS: usize = 100;
const BURN_IN: usize = 30;
const BSF_EPOCHS: usize = 40;
const PER_SEED_BUDGET_S: f64 = 600.0;

#[derive(Clone)]
struct Outcome {
    passed: bool,
    detail: String,
}

fn report(n: usize, o: &Outcome) {
    println!("criterion {n}: {} {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut all = true;
    let mut run = |n: usize, f: &dyn Fn() -> Outcome| {
        let o = f();
        report(n, &o);
        all &= o.passed;
    };
    run(1, &gradients);
    run(2, &schedule);
    let suite = SuiteRuns::train();
    run(3, &|| suite.suppression());
    run(4, &|| suite.divergence());
    run(5, &|| suite.selection());
    run(6, &oracles);
    let (det, first) = determinism();
    run(7, &|| det.clone());
    run(8, &|| leakage(&first));
    run(9, &group_protocol);
    if !all {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- criterion 1

fn normal_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut r = RngState::new(seed);
    Matrix::from_shape_simple_fn((rows, cols), || r.normal())
}

fn stack_case(specs: Vec<LayerSpec>, head: LossHead, mode: Mode, rows: usize) -> f64 {
    let in_dim = specs[0].in_dim;
    let mut stack = Stack::build(specs, &mut RngState::new(3)).unwrap();
    let mut r = RngState::new(8);
    for p in stack.params_mut() {
        p.value.mapv_inplace(|v| v + 0.1 * r.normal());
    }
    let mut obj = StackObjective::new(stack, normal_matrix(rows, in_dim, 4), head, mode, 99);
    grad_check(&mut obj, FD_TOL, FD_STEP).unwrap().max_rel_err
}

/// Gate input gradient under a fixed sampled mask, plus the hinge penalty on the weights.
struct GateObjective {
    gate: BsfLayer,
    x: ParamTensor,
    head: Matrix,
    pen: SparsityPenalty,
}

impl Objective for GateObjective {
    fn evaluate(&mut self, with_grads: bool) -> advage_core::Result<f64> {
        let (y, tape) = self.gate.forward(&self.x.value, Mode::Train, 0.5, &mut RngState::new(5))?;
        let (pen, pen_grad) = self.gate.penalty(&self.pen);
        if with_grads {
            let (gx, _) = self.gate.backward(tape, &self.head)?;
            self.x.grad.assign(&gx);
            self.gate.param_mut().grad.assign(&pen_grad);
        }
        Ok((&y * &self.head).sum() + pen)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        f(&mut self.x);
    }
}

/// Separate objective for the penalty, whose gradient is exact in `w`.
struct PenaltyObjective {
    w: ParamTensor,
    pen: SparsityPenalty,
}

impl Objective for PenaltyObjective {
    fn evaluate(&mut self, with_grads: bool) -> advage_core::Result<f64> {
        let (v, g) = self.pen.evaluate(&self.w.value);
        if with_grads {
            self.w.grad.assign(&g);
        }
        Ok(v)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        f(&mut self.w);
    }
}

#[derive(Clone, Copy)]
enum Path3 {
    Bias,
    Distiller(f64),
    Task,
}

struct LossPathObjective {
    model: AdversarialModel,
    batch: Batch,
    path: Path3,
}

impl Objective for LossPathObjective {
    fn evaluate(&mut self, _with_grads: bool) -> advage_core::Result<f64> {
        let mut rng = RngState::new(123);
        Ok(match self.path {
            Path3::Bias => self.model.bias_loss(&self.batch, &mut rng)?.h,
            Path3::Distiller(a) => self.model.distiller_loss(&self.batch, a, &mut rng)?.l_dist,
            Path3::Task => self.model.task_loss(&self.batch, &mut rng)?.loss,
        })
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        let groups: &[ParamGroup] = match self.path {
            Path3::Bias => &[ParamGroup::BiasPredictor],
            Path3::Distiller(_) => &[ParamGroup::Encoder],
            Path3::Task => &[ParamGroup::Encoder, ParamGroup::TaskHead],
        };
        for p in self.model.params_mut(groups) {
            f(p);
        }
    }
}

const TINY_CLASSES: [usize; 4] = [2, 3, 4, 5];

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        input_dim: 6,
        latent_dim: 8,
        use_bsf: false,
        encoder_widths: [7, 6, 5, 4],
        bp_width: 5,
        bp_head_width: 4,
        batch_size: 6,
        encoder_l2: 0.01,
        task_l2: 0.05,
        ..ModelConfig::default()
    }
}

fn tiny_batch(n: usize, seed: u64) -> Batch {
    let mut r = RngState::new(seed);
    let x = Matrix::from_shape_simple_fn((n, 6), || r.normal());
    let age = Array1::from_shape_fn(n, |_| 10.0 + 5.0 * r.normal());
    let labels = TINY_CLASSES
        .iter()
        .map(|&k| one_hot(&(0..n).map(|i| (i + r.below(2)) % k).collect::<Vec<_>>(), k).unwrap())
        .collect();
    Batch { x, age, labels }
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut cases: Vec<(String, f64)> = Vec::new();
    let lin = |rows, cols| LossHead::Linear(normal_matrix(rows, cols, 5));
    cases.push((
        "dense+l2".into(),
        stack_case(vec![LayerSpec::dense_l2(4, 3, 0.1), LayerSpec::dense(3, 1)], LossHead::Mse(Array1::from(vec![0.5, -1.0, 2.0, 0.0, 1.0])), Mode::Train, 5),
    ));
    cases.push((
        "batchnorm/train".into(),
        stack_case(vec![LayerSpec::dense(4, 3), LayerSpec::batchnorm(3)], lin(6, 3), Mode::Train, 6),
    ));
    cases.push((
        "batchnorm/eval".into(),
        stack_case(vec![LayerSpec::dense(4, 3), LayerSpec::batchnorm(3)], lin(6, 3), Mode::Eval, 6),
    ));
    cases.push(("relu".into(), stack_case(vec![LayerSpec::dense(4, 5), LayerSpec::relu(5)], lin(6, 5), Mode::Train, 6)));
    cases.push((
        "dropout".into(),
        stack_case(vec![LayerSpec::dense(4, 5), LayerSpec::dropout(5, 0.3)], lin(6, 5), Mode::Train, 6),
    ));
    cases.push((
        "gaussian_noise".into(),
        stack_case(vec![LayerSpec::dense(4, 5), LayerSpec::gaussian_noise(5, 0.2)], lin(6, 5), Mode::Train, 6),
    ));
    cases.push((
        "softmax".into(),
        stack_case(vec![LayerSpec::dense(4, 3), LayerSpec::softmax(3)], lin(6, 3), Mode::Train, 6),
    ));
    cases.push((
        "identity".into(),
        stack_case(vec![LayerSpec::dense(4, 3), LayerSpec::identity(3)], lin(6, 3), Mode::Train, 6),
    ));
    cases.push((
        "cross_entropy".into(),
        stack_case(
            vec![LayerSpec::dense(4, 3)],
            LossHead::CrossEntropy(one_hot(&[0, 1, 2, 1, 0, 2], 3).unwrap()),
            Mode::Train,
            6,
        ),
    ));
    let pen = SparsityPenalty {
        strength: 0.3,
        cut_threshold: 1.0,
        l1: 0.0,
    };
    let mut gate = GateObjective {
        gate: BsfLayer::with_weights(vec![0.9, 0.2, 0.6, 0.7]).unwrap(),
        x: ParamTensor::new(normal_matrix(5, 4, 6)),
        head: normal_matrix(5, 4, 7),
        pen,
    };
    cases.push(("bsf/input".into(), grad_check(&mut gate, FD_TOL, FD_STEP).unwrap().max_rel_err));
    let mut penalty = PenaltyObjective {
        w: ParamTensor::new(Matrix::from_shape_vec((1, 4), vec![0.9, 0.2, 0.6, 0.7]).unwrap()),
        pen,
    };
    cases.push(("bsf/penalty".into(), grad_check(&mut penalty, FD_TOL, FD_STEP).unwrap().max_rel_err));

    let cfg = tiny_model_config();
    for (name, path) in [
        ("path/bias", Path3::Bias),
        ("path/distiller", Path3::Distiller(1.0)),
        ("path/distiller_a2.5", Path3::Distiller(2.5)),
        ("path/task", Path3::Task),
    ] {
        let mut model = build_model(&cfg, &TINY_CLASSES).unwrap();
        let mut r = RngState::new(77);
        for p in model.params_mut(&[ParamGroup::Encoder, ParamGroup::TaskHead, ParamGroup::BiasPredictor]) {
            if p.bounds().is_none() {
                p.value.mapv_inplace(|v| v + 0.1 * r.normal());
            }
        }
        let mut obj = LossPathObjective {
            model,
            batch: tiny_batch(6, 10),
            path,
        };
        cases.push((name.into(), grad_check(&mut obj, FD_TOL, FD_STEP).unwrap().max_rel_err));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = cases.iter().cloned().fold(("".to_string(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failed: Vec<&str> = cases.iter().filter(|c| !(c.1 < FD_TOL)).map(|c| c.0.as_str()).collect();
    Outcome {
        passed: failed.is_empty() && elapsed < FD_BUDGET_S,
        detail: format!(
            "({} cases, worst rel err {:.2e} in {}, {:.2}s; failing: {:?})",
            cases.len(),
            worst.1,
            worst.0,
            elapsed,
            failed
        ),
    }
}

// ---------------------------------------------------------------- criterion 2

fn schedule() -> Outcome {
    // Wide enough that the task head's second ReLU layer is not dead at init.
    let cfg = ModelConfig {
        batch_size: 8,
        latent_dim: 32,
        ..tiny_model_config()
    };
    let n = 24;
    let mut r = RngState::new(2);
    let x = Matrix::from_shape_simple_fn((n, 6), || r.normal());
    let age = Array1::from_shape_fn(n, |_| 10.0 + r.normal());
    let labels: Vec<Vec<usize>> = TINY_CLASSES.iter().map(|&k| (0..n).map(|i| i % k).collect()).collect();
    let data = TrainData::new(x, age, labels, TINY_CLASSES.to_vec()).unwrap();
    let mut model = build_model(&cfg, &TINY_CLASSES).unwrap();
    let mut opt = Optimizers::new(&model);
    let mut rng = RngState::new(9);
    train_step(&mut model, &mut opt, &data, &mut rng).unwrap();
    let counts = [opt.bp.step_count(), opt.dist.step_count(), opt.task.step_count()];

    let groups = [ParamGroup::Encoder, ParamGroup::TaskHead, ParamGroup::BiasPredictor];
    let hashes = |m: &AdversarialModel| groups.map(|g| m.group_hash(g));
    let batch = data.rows(&(0..8).collect::<Vec<_>>());
    let mut phases = [false; 3];
    let before = hashes(&model);
    model.bias_loss(&batch, &mut rng).unwrap();
    opt.bp.step(&mut model.params_mut(&[ParamGroup::BiasPredictor])).unwrap();
    let after = hashes(&model);
    phases[0] = before[0] == after[0] && before[1] == after[1] && before[2] != after[2];
    let before = after;
    model.distiller_loss(&batch, 1.0, &mut rng).unwrap();
    opt.dist.step(&mut model.params_mut(&[ParamGroup::Encoder])).unwrap();
    let after = hashes(&model);
    phases[1] = before[0] != after[0] && before[1] == after[1] && before[2] == after[2];
    let before = after;
    model.task_loss(&batch, &mut rng).unwrap();
    opt.task.step(&mut model.params_mut(&[ParamGroup::Encoder, ParamGroup::TaskHead])).unwrap();
    let after = hashes(&model);
    phases[2] = before[0] != after[0] && before[1] != after[1] && before[2] == after[2];
    Outcome {
        passed: counts == [5, 2, 1] && phases.iter().all(|&p| p),
        detail: format!("(step counters bp/dist/task = {counts:?}, isolation per phase bp/dist/task = {phases:?})"),
    }
}

// ---------------------------------------------------------------- criteria 3-5

struct SeedRun {
    ba: [f64; 2],
    dhat: [f64; 2],
    mae: [f64; 2],
    signal_hits: usize,
    k_signal: usize,
    seconds: f64,
}

struct SuiteRuns {
    seeds: Vec<SeedRun>,
}

fn suite_fixture(seed: u64) -> SynthDataset {
    generate(&SynthConfig {
        n_samples: 150,
        n_genes: 500,
        k_signal: 20,
        k_confound: 20,
        confound_strength: CONFOUND_STRENGTH,
        correlated: false,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn suite_config(seed: u64, alpha: f64, n: usize) -> ModelConfig {
    let base = ModelConfig::default();
    let n_train = n - (base.val_fraction * n as f64).round() as usize;
    ModelConfig {
        alpha,
        seed,
        use_bsf: false,
        max_epochs: EPOCHS,
        burn_in_epochs: BURN_IN,
        steps_per_epoch: n_train.div_ceil(base.batch_size),
        ..base
    }
}

impl SuiteRuns {
    fn train() -> Self {
        let seeds = (0..SEEDS)
            .map(|seed| {
                let t0 = Instant::now();
                let s = suite_fixture(seed);
                let ds = Dataset::new("suite", s.counts.clone(), &s.metadata).unwrap();
                let prep = preprocess(&[&ds], &FilterParams::default()).unwrap();
                let vocab = Vocabulary::from_metadata(&prep.meta);
                let rows = prep.meta.for_samples(&prep.train.sample_ids).unwrap();
                let data = TrainData::from_metadata(prep.train.values.clone(), &rows, &vocab).unwrap();
                let env: Vec<usize> = prep
                    .train
                    .sample_ids
                    .iter()
                    .map(|id| s.truth.environment[s.counts.sample_ids().iter().position(|x| x == id).unwrap()])
                    .collect();
                let labels: Vec<String> = env.iter().map(|e| format!("env{e}")).collect();
                let n = data.len();
                let probe = ProbeConfig::default();
                let mut ba = [0.0; 2];
                let mut dhat = [0.0; 2];
                let mut mae = [0.0; 2];
                for (i, alpha) in [0.0, 1.0].into_iter().enumerate() {
                    let out = Trainer::new(&suite_config(seed, alpha, n), &data)
                        .unwrap()
                        .run(&mut |_, _| Ok(()))
                        .unwrap();
                    let f = out.best.model.encode(data.x()).unwrap();
                    ba[i] = probe_attribute("environment", &f, &labels, seed, &probe).unwrap().balanced_accuracy;
                    dhat[i] = mean_pairwise_divergence(&f, &env, seed, &probe);
                    mae[i] = out.trace.get(out.best_epoch).unwrap().val_mae;
                }
                let d = data.x().ncols();
                let mut cfg = suite_config(seed, 1.0, n);
                cfg.use_bsf = true;
                cfg.max_epochs = BSF_EPOCHS;
                cfg.burn_in_epochs = BSF_EPOCHS / 2;
                cfg.sparsity.cut_threshold = 0.3 * d as f64;
                let out = Trainer::new(&cfg, &data).unwrap().run(&mut |_, _| Ok(())).unwrap();
                let m = &out.best.model;
                let ranking = export_ranking(
                    m.bsf.as_ref().unwrap().weights(),
                    prep.artifact.genes(),
                    m.config().mask_threshold,
                )
                .unwrap();
                let k = s.truth.signal_genes.len();
                let top: BTreeSet<&str> = ranking.top(k).collect();
                let signal_hits = s.truth.signal_genes.iter().filter(|g| top.contains(g.as_str())).count();
                let run = SeedRun {
                    ba,
                    dhat,
                    mae,
                    signal_hits,
                    k_signal: k,
                    seconds: t0.elapsed().as_secs_f64(),
                };
                println!(
                    "  seed {seed}: probe BA {:.3} -> {:.3}, d_hat {:.3} -> {:.3}, val MAE {:.3} -> {:.3}, signal in top {k}: {}, {:.0}s",
                    run.ba[0], run.ba[1], run.dhat[0], run.dhat[1], run.mae[0], run.mae[1], run.signal_hits, run.seconds
                );
                run
            })
            .collect();
        Self { seeds }
    }

    fn mean(&self, f: impl Fn(&SeedRun) -> f64) -> f64 {
        self.seeds.iter().map(f).sum::<f64>() / self.seeds.len() as f64
    }

    fn suppression(&self) -> Outcome {
        let ba0 = self.mean(|s| s.ba[0]);
        let ba1 = self.mean(|s| s.ba[1]);
        let mae0 = self.mean(|s| s.mae[0]);
        let mae1 = self.mean(|s| s.mae[1]);
        let slowest = self.seeds.iter().map(|s| s.seconds).fold(0.0, f64::max);
        let baseline = ba0 >= 0.85;
        let drop = ba0 - ba1 >= 0.20;
        let mae_ok = mae1 <= 1.25 * mae0;
        let time_ok = slowest < PER_SEED_BUDGET_S;
        Outcome {
            passed: baseline && drop && mae_ok && time_ok,
            detail: format!(
                "(probe BA alpha=0 {ba0:.3} [>=0.85: {baseline}], alpha=1 {ba1:.3}, drop {:.3} [>=0.20: {drop}]; val MAE {mae0:.3} -> {mae1:.3} [within 25%: {mae_ok}]; slowest seed {slowest:.0}s [<600s: {time_ok}])",
                ba0 - ba1
            ),
        }
    }

    fn divergence(&self) -> Outcome {
        let lower = self.seeds.iter().filter(|s| s.dhat[1] < s.dhat[0]).count();
        Outcome {
            passed: lower >= 4,
            detail: format!("(d_hat(alpha=1) < d_hat(alpha=0) on {lower}/{} seeds, need 4)", self.seeds.len()),
        }
    }

    fn selection(&self) -> Outcome {
        let fractions: Vec<f64> = self
            .seeds
            .iter()
            .map(|s| s.signal_hits as f64 / s.k_signal as f64)
            .collect();
        let recovered = fractions.iter().all(|&f| f >= 0.8);
        let zero = penalty_is_zero_below_threshold();
        Outcome {
            passed: recovered && zero,
            detail: format!("(signal recovered per seed {fractions:?} [all >=0.8: {recovered}]; penalty exactly 0 below threshold: {zero})"),
        }
    }
}

/// Mean proxy divergence over all pairs of planted environments.
fn mean_pairwise_divergence(f: &Matrix, env: &[usize], seed: u64, cfg: &ProbeConfig) -> f64 {
    let k = env.iter().max().unwrap() + 1;
    let rows = |e: usize| -> Matrix {
        let idx: Vec<usize> = (0..env.len()).filter(|&i| env[i] == e).collect();
        f.select(Axis(0), &idx)
    };
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..k {
        for b in a + 1..k {
            total += proxy_divergence(&rows(a), &rows(b), seed, cfg).unwrap();
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn penalty_is_zero_below_threshold() -> bool {
    let pen = SparsityPenalty {
        strength: 1e-2,
        cut_threshold: 150.0,
        l1: 0.0,
    };
    let mut r = RngState::new(11);
    (0..1000).all(|trial| {
        let d = 200 + trial % 300;
        let scale = r.uniform() * 150.0 / d as f64;
        let w = Matrix::from_shape_simple_fn((1, d), || r.uniform() * scale);
        let total = w.sum();
        let w = if total > pen.cut_threshold { w * (pen.cut_threshold / total) } else { w };
        let (v, g) = pen.evaluate(&w);
        v == 0.0 && g.iter().all(|&x| x == 0.0)
    }) && {
        let w = Matrix::from_elem((1, 300), 0.5);
        let (v, g) = pen.evaluate(&w);
        v == 0.0 && g.iter().all(|&x| x == 0.0)
    }
}

// ---------------------------------------------------------------- criterion 6

fn oracles() -> Outcome {
    let x = [2.0, 4.0, 6.0];
    let mean = x.iter().sum::<f64>() / 3.0;
    let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0).sqrt();
    let cv_ref = 100.0 * sd / mean;
    let cv = cross_dataset_cv(&x, Dispersion::Population).unwrap();
    let cv_ok = (cv - cv_ref).abs() <= 1e-6 && (cv - 40.824829046386).abs() <= 1e-6;

    let bh = bh_adjust(&[0.01, 0.02, 0.04]).unwrap();
    let bh_ok = bh == vec![0.03, 0.03, 0.04];

    let (a, b) = ([1.0, 2.0, 3.0], [2.0, 3.0, 4.0]);
    let w = welch_t_test(&a, &b).unwrap();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (va, vb) = (var(&a) / 3.0, var(&b) / 3.0);
    let t_ref = (2.0 - 3.0) / (va + vb).sqrt();
    let df_ref = (va + vb).powi(2) / (va * va / 2.0 + vb * vb / 2.0);
    let p_ref = 2.0 * StudentsT::new(0.0, 1.0, df_ref).unwrap().cdf(-t_ref.abs());
    let welch_ok = (w.t - t_ref).abs() <= 1e-6
        && (w.t + 1.224745).abs() <= 1e-6
        && (w.df - df_ref).abs() <= 1e-9
        && (w.df - 4.0).abs() <= 1e-9
        && (w.p - p_ref).abs() <= 1e-3
        && (w.p - 0.2879).abs() <= 1e-3;
    Outcome {
        passed: cv_ok && bh_ok && welch_ok,
        detail: format!(
            "(cv {cv:.9}% vs {cv_ref:.9}%; bh {bh:?}; welch t {:.7} df {:.10} p {:.5} vs reference p {p_ref:.5})",
            w.t, w.df, w.p
        ),
    }
}

// ---------------------------------------------------------------- criterion 7

struct PipelineRun {
    datasets: Vec<Dataset>,
    output: FoldOutput,
    files: Vec<(String, Vec<u8>)>,
}

fn pipeline_config() -> ModelConfig {
    ModelConfig {
        max_epochs: 20,
        burn_in_epochs: 5,
        steps_per_epoch: 3,
        batch_size: 32,
        seed: 7,
        mode: TrainMode::Holdout,
        ..ModelConfig::default()
    }
}

fn pipeline_datasets() -> Vec<Dataset> {
    let s = generate(&SynthConfig {
        n_samples: 40,
        seed: 7,
        ..SynthConfig::default()
    })
    .unwrap();
    Dataset::split_by_series(&s.counts, &s.metadata).unwrap()
}

fn pipeline_run(dir: &Path) -> PipelineRun {
    let datasets = pipeline_datasets();
    let ids: Vec<String> = datasets.iter().map(|d| d.id.clone()).collect();
    let plan = &plan_folds(&ids, TrainMode::Holdout, &["series3".to_string()]).unwrap()[0];
    let output = run_fold(&datasets, plan, &pipeline_config(), &FilterParams::default(), &mut |_, _| Ok(())).unwrap();
    output.write_to(dir).unwrap();
    let report = StabilityReport::from_folds(1.0, &output.results, Dispersion::Population);
    let metrics = match report {
        Ok(r) => r.to_tsv(),
        Err(e) => format!("{}\n", e.name()),
    };
    std::fs::write(dir.join("metrics.tsv"), metrics).unwrap();
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    PipelineRun { datasets, output, files }
}

fn determinism() -> (Outcome, PipelineRun) {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = pipeline_run(d1.path());
    let b = pipeline_run(d2.path());
    let names: Vec<&str> = a.files.iter().map(|f| f.0.as_str()).collect();
    let required = ["trace.tsv", "metrics.tsv", "genes.tsv", "predictions.tsv"];
    let present = required.iter().all(|r| names.contains(r));
    let differing: Vec<&str> = a
        .files
        .iter()
        .zip(&b.files)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same = a.files.len() == b.files.len() && differing.is_empty();
    (
        Outcome {
            passed: present && same,
            detail: format!("({} files compared: {names:?}; differing: {differing:?})", a.files.len()),
        },
        a,
    )
}

// ---------------------------------------------------------------- criterion 8

fn with_counts(ds: &Dataset, counts: CountMatrix) -> Dataset {
    Dataset::new(ds.id.clone(), counts, &ds.meta).unwrap()
}

fn leakage(first: &PipelineRun) -> Outcome {
    let art = &first.output.artifact;
    let holdout = first.datasets.iter().find(|d| d.id == "series3").unwrap();
    let dropped: Vec<String> = art.genes().iter().step_by(art.genes().len() / 10).take(10).cloned().collect();
    let keep: Vec<String> = holdout
        .counts
        .gene_ids()
        .iter()
        .filter(|g| !dropped.contains(g))
        .cloned()
        .collect();
    let reduced = with_counts(holdout, holdout.counts.select_genes(&keep).unwrap());
    let x = transform(&reduced, art).unwrap();
    let zero_cols: BTreeSet<&str> = x
        .gene_ids
        .iter()
        .enumerate()
        .filter(|(j, _)| x.values.column(*j).iter().all(|&v| v == 0.0))
        .map(|(_, g)| g.as_str())
        .collect();
    let expected: BTreeSet<&str> = dropped.iter().map(String::as_str).collect();
    let columns_ok = dropped.len() == 10 && zero_cols == expected && x.gene_ids == art.genes();
    let evaluated = predict_dataset(&first.output.outcome.best.model, art, &reduced, 0)
        .map(|r| r.mae.is_finite())
        .unwrap_or(false);

    let original_hash = art.content_hash();
    let ids: Vec<String> = first.datasets.iter().map(|d| d.id.clone()).collect();
    let plan = &plan_folds(&ids, TrainMode::Holdout, &["series3".to_string()]).unwrap()[0];
    let train: Vec<&Dataset> = first.datasets.iter().filter(|d| d.id != "series3").collect();
    let c = holdout.counts.counts();
    let mutations = [
        c.mapv(|v| v * 5 + 3),
        c.mapv(|_| 1),
        c.slice(ndarray::s![.., ..;-1]).to_owned(),
    ];
    let mut stable = true;
    for (i, m) in mutations.into_iter().enumerate() {
        let mutated = with_counts(
            holdout,
            CountMatrix::new(holdout.counts.gene_ids().to_vec(), holdout.counts.sample_ids().to_vec(), m).unwrap(),
        );
        let hash = preprocess(&train, &FilterParams::default()).unwrap().artifact.content_hash();
        stable &= hash == original_hash;
        if i == 0 {
            let mut all: Vec<Dataset> = first.datasets.iter().filter(|d| d.id != "series3").cloned().collect();
            all.push(mutated);
            let cfg = ModelConfig {
                max_epochs: 2,
                burn_in_epochs: 0,
                ..pipeline_config()
            };
            let out = run_fold(&all, plan, &cfg, &FilterParams::default(), &mut |_, _| Ok(())).unwrap();
            stable &= out.artifact.content_hash() == original_hash;
        }
    }
    Outcome {
        passed: columns_ok && evaluated && stable,
        detail: format!(
            "(zero columns {} == dropped {}: {columns_ok}; evaluation completed: {evaluated}; artifact hash unchanged under holdout mutation: {stable})",
            zero_cols.len(),
            dropped.len()
        ),
    }
}

// ---------------------------------------------------------------- criterion 9

fn group_protocol() -> Outcome {
    let cfg = GroupSynthConfig {
        tissues: vec!["liver".into(), "brain".into()],
        sexes: vec!["F".into(), "M".into()],
        ..GroupSynthConfig::default()
    };
    let contrast = Contrast::ControlVsTreated {
        control: "control".into(),
        treated: "treated".into(),
    };
    let seeds = 50;
    let (mut shifted_hits, mut shifted_total, mut null_hits, mut null_total) = (0usize, 0usize, 0usize, 0usize);
    for seed in 0..seeds {
        let rows = generate_groups(&GroupSynthConfig { seed, ..cfg.clone() });
        let cmp = compare_groups(&rows, &contrast).unwrap();
        for r in &cmp.rows {
            if cfg.shifted_age_groups.contains(&r.age_group) {
                shifted_total += 1;
                shifted_hits += usize::from(r.p_adj < 0.05);
            } else {
                null_total += 1;
                null_hits += usize::from(r.stars == "ns");
            }
        }
    }
    let shifted_rate = shifted_hits as f64 / shifted_total as f64;
    let null_rate = null_hits as f64 / null_total as f64;
    Outcome {
        passed: shifted_rate >= 0.9 && null_rate >= 0.9,
        detail: format!(
            "(shifted strata flagged {shifted_hits}/{shifted_total} = {shifted_rate:.3}; unshifted strata ns {null_hits}/{null_total} = {null_rate:.3}; need >= 0.90 each over {seeds} seeds)"
        ),
    }
}
