//! Subcommands. Each writes its artifacts under `--out`, a copy of the
//! resolved configuration, and rows in the run ledger.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use protomiss_core::cohort::{Cohort, PatientRecord};
use protomiss_core::config::Fill;
use protomiss_core::downstream::{Condition, FeatureBank, Mode, Target, Task};
use protomiss_core::experiment::{downstream_indices, run_cv, CvOutcome, CvSpec};
use protomiss_core::gradcheck::{run_suite, GradSuiteConfig, GradSuiteReport};
use protomiss_core::metrics::{km_analysis, KmAnalysis, SurvivalSample};
use protomiss_core::model::PrimeModel;
use protomiss_core::pretrain::pretrain;
use protomiss_core::rng::derive_seed;
use protomiss_core::synth::generate_synthetic_cohort;
use protomiss_core::ParamStore;

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, PretrainCohort};
use crate::error::{CliError, Result};
use crate::ledger::{sha256_dir, sha256_file, RunLedger};
use crate::manifest::{self, write_cohort, write_stats};
use crate::report::{km_svg, mean_pm_std, num, write_csv};

#[derive(Debug, Parser)]
#[command(name = "protomiss", version, about = "Missing-aware multimodal pretraining experiments")]
pub struct Cli {
    /// TOML configuration; the desk profile when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the experiment and cohort seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Inputs {
    /// Cohort directory with `manifest.csv` and `data/`; synthesized when omitted.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Pretrained checkpoint; a randomly initialised encoder when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Os,
    #[value(name = "mortality_3y")]
    Mortality3y,
    #[value(name = "recurrence_3y")]
    Recurrence3y,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Os => Task::Os,
            TaskArg::Mortality3y => Task::Mortality3y,
            TaskArg::Recurrence3y => Task::Recurrence3y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lp,
    Ft,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lp => Mode::LinearProbe,
            ModeArg::Ft => Mode::FullFineTune,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "label_fraction")]
    LabelFraction,
    #[value(name = "k_c")]
    KC,
    Lambda,
    Ablation,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::LabelFraction => "label_fraction",
            Axis::KC => "k_c",
            Axis::Lambda => "lambda",
            Axis::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort on disk.
    Synth,
    /// Self-supervised pretraining; writes the loss log and the best checkpoint.
    Pretrain {
        #[arg(long)]
        cohort: Option<PathBuf>,
    },
    /// Cross-validated downstream training on tri-modal patients.
    Finetune {
        #[command(flatten)]
        inputs: Inputs,
        /// Restrict to these tasks (repeatable).
        #[arg(long, value_enum)]
        task: Vec<TaskArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Risk stratification on overall survival: Kaplan-Meier, log-rank and Cox.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Test metrics under the seven modality conditions.
    Robustness {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum)]
        task: Vec<TaskArg>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Label-efficiency, sensitivity and ablation sweeps.
    Sweep {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Finite-difference audit of every differentiable module.
    Gradcheck {
        /// Overwrite this parameter with NaN first.
        #[arg(long)]
        inject_nan: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{}", l);
            }
            0
        }
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the parsed command; returns human-readable summary lines.
pub fn run(cli: &Cli) -> Result<Vec<String>> {
    let cfg = resolve_config(cli)?;
    fs::create_dir_all(&cli.out).map_err(|e| CliError::io(&cli.out, e))?;
    let ctx = Ctx { cfg, out: cli.out.clone() };
    match &cli.command {
        Command::Synth => ctx.synth(),
        Command::Pretrain { cohort } => ctx.pretrain(cohort.as_deref()),
        Command::Finetune { inputs, task, mode } => ctx.evaluate("finetune", inputs, task, *mode, &[Condition::Full]),
        Command::Robustness { inputs, task, mode } => ctx.evaluate("robustness", inputs, task, *mode, &Condition::ALL),
        Command::Eval { inputs } => ctx.eval(inputs),
        Command::Sweep { cohort, axis } => ctx.sweep(cohort.as_deref(), *axis),
        Command::Gradcheck { inject_nan, tol } => ctx.gradcheck(inject_nan.clone(), *tol),
    }
}

/// Maps `f` over `items` on up to `threads` workers; output order follows input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let workers = threads.min(items.len());
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w..items.len()).step_by(workers).map(|i| (i, f(&items[i]))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every item mapped")).collect()
}

struct Encoder {
    model: PrimeModel,
    params: ParamStore,
    arm: String,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn task_list(cfg: &ExperimentConfig, args: &[TaskArg]) -> Vec<Task> {
    if args.is_empty() {
        cfg.experiment.tasks.clone()
    } else {
        let mut t: Vec<Task> = args.iter().map(|&a| a.into()).collect();
        t.sort();
        t.dedup();
        t
    }
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::LinearProbe => "lp",
        Mode::FullFineTune => "ft",
    }
}

fn target_fields(t: &Target) -> [String; 3] {
    match *t {
        Target::Survival { time, event, bin } => [num(time), (event as u8).to_string(), bin.to_string()],
        Target::Binary(b) => [String::new(), (b as u8).to_string(), String::new()],
    }
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn ledger(&self, command: &str, inputs_hash: &str) -> RunLedger {
        RunLedger::new(command, &self.cfg.fingerprint(), self.cfg.seed, inputs_hash)
    }

    fn finish(&self, mut ledger: RunLedger, command: &str, outputs: &[String]) -> Result<Vec<String>> {
        let cfg_rel = format!("{}.config.toml", command);
        let cfg_path = self.path(&cfg_rel);
        fs::write(&cfg_path, self.cfg.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;
        ledger.record(&self.out, &cfg_rel)?;
        for o in outputs {
            ledger.record(&self.out, o)?;
        }
        ledger.write(&self.out)?;
        Ok(std::iter::once(format!("run {} ({})", ledger.run_id, command)).chain(outputs.iter().map(|o| format!("wrote {}", self.path(o).display()))).collect())
    }

    /// The cohort and a hash identifying it.
    fn cohort(&self, dir: Option<&Path>) -> Result<(Cohort, String)> {
        let dir = dir.map(Path::to_path_buf).or_else(|| self.cfg.paths.cohort.clone());
        let (cohort, hash) = match dir {
            Some(d) => {
                let c = manifest::load_dir(&d)?;
                let h = format!("{}:{}", sha256_file(&d.join(manifest::MANIFEST))?, sha256_dir(&d.join(manifest::DATA_DIR))?);
                (c, h)
            }
            None => (generate_synthetic_cohort(&self.cfg.synth)?, String::from("synthetic")),
        };
        for (i, d) in cohort.dims.iter().enumerate() {
            if d.dim != 0 && d.dim != self.cfg.model.input_dims[i] {
                return Err(protomiss_core::Error::DimMismatch(format!(
                    "cohort widths {:?} do not match model.input_dims {:?}",
                    cohort.dims.map(|d| d.dim),
                    self.cfg.model.input_dims
                ))
                .into());
            }
        }
        Ok((cohort, hash))
    }

    fn encoder(&self, checkpoint: Option<&Path>) -> Result<(Encoder, String)> {
        match checkpoint.map(Path::to_path_buf).or_else(|| self.cfg.paths.checkpoint.clone()) {
            Some(p) => {
                let c = Checkpoint::load(&p)?;
                if c.model.input_dims != self.cfg.model.input_dims {
                    return Err(CliError::Checkpoint { path: p, msg: format!("input widths {:?} differ from the configuration", c.model.input_dims) });
                }
                let (model, params) = c.restore().map_err(|msg| CliError::Checkpoint { path: p.clone(), msg })?;
                Ok((Encoder { model, params, arm: "pretrained".into() }, sha256_file(&p)?))
            }
            None => {
                let mut params = ParamStore::new();
                let model = PrimeModel::new(&mut params, &self.cfg.model, derive_seed(self.cfg.seed, &[0x5c7a]))?;
                Ok((Encoder { model, params, arm: "scratch".into() }, String::from("scratch")))
            }
        }
    }

    fn synth(&self) -> Result<Vec<String>> {
        let cohort = generate_synthetic_cohort(&self.cfg.synth)?;
        write_cohort(&cohort, &self.out)?;
        write_stats(&cohort.stats(), &self.path("stats.csv"))?;
        let outputs = [manifest::MANIFEST.to_string(), manifest::DATA_DIR.to_string(), "stats.csv".to_string()];
        self.finish(self.ledger("synth", "none"), "synth", &outputs)
    }

    fn pretrain(&self, cohort_dir: Option<&Path>) -> Result<Vec<String>> {
        let (cohort, hash) = self.cohort(cohort_dir)?;
        let p = pretrain_encoder(&self.cfg, &cohort)?;
        let header = [
            "epoch",
            "train_align",
            "train_fusion",
            "train_router",
            "train_total",
            "val_align",
            "val_fusion",
            "val_router",
            "val_total",
            "best_val",
        ];
        let rows: Vec<Vec<String>> = p
            .log
            .iter()
            .map(|l| {
                vec![
                    l.epoch.to_string(),
                    num(l.train.align),
                    num(l.train.fusion),
                    num(l.train.router),
                    num(l.train.total),
                    num(l.val.align),
                    num(l.val.fusion),
                    num(l.val.router),
                    num(l.val.total),
                    num(l.best_val),
                ]
            })
            .collect();
        write_csv(&self.path("loss_log.csv"), &header, &rows)?;
        Checkpoint { fingerprint: self.cfg.fingerprint(), model: self.cfg.model.clone(), params: p.params }.save(&self.path("checkpoint.bin"))?;
        let mut lines = self.finish(self.ledger("pretrain", &hash), "pretrain", &["loss_log.csv".into(), "checkpoint.bin".into()])?;
        lines.push(format!("best epoch {} of {}", p.best_epoch, p.log.len()));
        Ok(lines)
    }

    fn evaluate(&self, command: &str, inputs: &Inputs, tasks: &[TaskArg], mode: Option<ModeArg>, conditions: &[Condition]) -> Result<Vec<String>> {
        let (cohort, chash) = self.cohort(inputs.cohort.as_deref())?;
        let (enc, ehash) = self.encoder(inputs.checkpoint.as_deref())?;
        let tasks = task_list(&self.cfg, tasks);
        let mode = mode.map_or(self.cfg.experiment.mode, Mode::from);
        let idx = downstream_indices(&cohort);
        let outcomes = cross_validate(&self.cfg, &cohort, &idx, &enc, &tasks, mode, conditions, 1.0)?;

        let mut summary = Vec::new();
        let mut folds = Vec::new();
        let mut preds = Vec::new();
        for o in &outcomes {
            for &c in conditions {
                let (m, s) = o.mean_std(c);
                summary.push(vec![o.task.name().into(), o.task.metric_name().into(), enc.arm.clone(), mode_name(mode).into(), c.name(), num(m), num(s)]);
            }
            for f in &o.folds {
                for (c, m) in &f.test {
                    folds.push(vec![o.task.name().into(), f.fold.to_string(), c.name(), f.best_epoch.to_string(), num(f.val_metric), num(*m), hex::encode(f.train_hash)]);
                }
                for p in &f.predictions {
                    let [time, label, bin] = target_fields(&p.target);
                    preds.push(vec![o.task.name().into(), p.fold.to_string(), p.condition.name(), cohort.patients[p.patient].id.clone(), num(p.score), time, label, bin]);
                }
            }
        }
        let names = [format!("{}_summary.csv", command), format!("{}_folds.csv", command), format!("{}_predictions.csv", command)];
        write_csv(&self.path(&names[0]), &["task", "metric", "arm", "mode", "condition", "mean", "std"], &summary)?;
        write_csv(&self.path(&names[1]), &["task", "fold", "condition", "best_epoch", "val_metric", "test_metric", "train_hash"], &folds)?;
        write_csv(&self.path(&names[2]), &["task", "fold", "condition", "patient_id", "score", "time", "label", "bin"], &preds)?;
        let mut lines = self.finish(self.ledger(command, &format!("{}:{}", chash, ehash)), command, &names)?;
        for r in &summary {
            lines.push(format!("{} {} {} {}", r[0], r[4], r[1], mean_pm_std(r[5].parse().unwrap_or(f64::NAN), r[6].parse().unwrap_or(f64::NAN))));
        }
        Ok(lines)
    }

    fn eval(&self, inputs: &Inputs) -> Result<Vec<String>> {
        let (cohort, chash) = self.cohort(inputs.cohort.as_deref())?;
        let (enc, ehash) = self.encoder(inputs.checkpoint.as_deref())?;
        let idx = downstream_indices(&cohort);
        let o = cross_validate(&self.cfg, &cohort, &idx, &enc, &[Task::Os], self.cfg.experiment.mode, &[Condition::Full], 1.0)?.remove(0);
        let a = stratify(&o)?;
        let t_max = cohort.patients.iter().map(|p| p.survival.time_months).fold(0.0, f64::max);
        let mut rows = Vec::new();
        for (group, curve) in [("high", &a.high), ("low", &a.low)] {
            for j in 0..curve.times.len() {
                rows.push(vec![group.into(), num(curve.times[j]), curve.at_risk[j].to_string(), curve.events[j].to_string(), num(curve.survival[j])]);
            }
        }
        write_csv(&self.path("eval_km.csv"), &["group", "time", "at_risk", "events", "survival"], &rows)?;
        let cox = a.cox;
        let summary = vec![vec![
            enc.arm.clone(),
            a.n_high.to_string(),
            a.n_low.to_string(),
            num(a.logrank.chi2),
            num(a.logrank.p_value),
            cox.map_or("nan".into(), |c| num(c.hazard_ratio)),
            cox.map_or("nan".into(), |c| num(c.ci_low)),
            cox.map_or("nan".into(), |c| num(c.ci_high)),
            num(o.mean_std(Condition::Full).0),
        ]];
        write_csv(
            &self.path("eval_summary.csv"),
            &["arm", "n_high", "n_low", "logrank_chi2", "logrank_p", "hazard_ratio", "hr_ci_low", "hr_ci_high", "c_index_mean"],
            &summary,
        )?;
        let svg = self.path("eval_km.svg");
        fs::write(&svg, km_svg(&a, t_max)).map_err(|e| CliError::io(&svg, e))?;
        let mut lines = self.finish(
            self.ledger("eval", &format!("{}:{}", chash, ehash)),
            "eval",
            &["eval_km.csv".into(), "eval_summary.csv".into(), "eval_km.svg".into()],
        )?;
        lines.push(format!(
            "log-rank p = {:.3e}, HR = {}",
            a.logrank.p_value,
            cox.map_or("n/a".to_string(), |c| format!("{:.2} [{:.2}, {:.2}]", c.hazard_ratio, c.ci_low, c.ci_high))
        ));
        Ok(lines)
    }

    fn sweep(&self, cohort_dir: Option<&Path>, axis: Axis) -> Result<Vec<String>> {
        let (cohort, chash) = self.cohort(cohort_dir)?;
        let idx = downstream_indices(&cohort);
        let tasks = self.cfg.experiment.tasks.clone();
        let mode = self.cfg.experiment.mode;
        // (value label, arm, config, label fraction, pretrain?)
        let mut arms: Vec<(String, String, ExperimentConfig, f64, bool)> = Vec::new();
        match axis {
            Axis::LabelFraction => {
                for &f in &self.cfg.experiment.label_fractions {
                    arms.push((num(f), "scratch".into(), self.cfg.clone(), f, false));
                    arms.push((num(f), "pretrained".into(), self.cfg.clone(), f, true));
                }
            }
            Axis::KC => {
                for &k in &self.cfg.experiment.k_c_values {
                    let mut c = self.cfg.clone();
                    c.model.k_c = k;
                    c.augment.k_s = c.augment.k_s.min(k);
                    arms.push((k.to_string(), "pretrained".into(), c, 1.0, true));
                }
            }
            Axis::Lambda => {
                for &l in &self.cfg.experiment.lambda_values {
                    let mut c = self.cfg.clone();
                    c.loss.lambda = l;
                    arms.push((num(l), "pretrained".into(), c, 1.0, true));
                }
            }
            Axis::Ablation => {
                for v in ablation_variants(&self.cfg) {
                    arms.push((v.name.into(), v.name.into(), v.cfg, 1.0, true));
                }
            }
        }
        for (_, _, c, _, _) in &arms {
            c.validate()?;
        }
        // one pretraining per distinct configuration
        let mut distinct: Vec<ExperimentConfig> = Vec::new();
        for (_, _, c, _, pre) in &arms {
            if *pre && !distinct.contains(c) {
                distinct.push(c.clone());
            }
        }
        let threads = self.cfg.threads;
        let encoders = par_map(&distinct, threads, |c| {
            let p = pretrain_encoder(c, &cohort)?;
            Ok(Encoder { model: p.model, params: p.params, arm: "pretrained".into() })
        })?;
        let scratch = {
            let mut params = ParamStore::new();
            let model = PrimeModel::new(&mut params, &self.cfg.model, derive_seed(self.cfg.seed, &[0x5c7a]))?;
            Encoder { model, params, arm: "scratch".into() }
        };
        let results = par_map(&arms, threads, |(_, _, c, f, pre)| {
            let enc = if *pre { &encoders[distinct.iter().position(|d| d == c).unwrap()] } else { &scratch };
            let mut c = c.clone();
            c.threads = 1;
            cross_validate(&c, &cohort, &idx, enc, &tasks, mode, &[Condition::Full], *f)
        })?;

        let mut rows = Vec::new();
        let mut hashes = Vec::new();
        for ((value, arm, _, _, _), outcomes) in arms.iter().zip(&results) {
            for o in outcomes {
                let (m, s) = o.mean_std(Condition::Full);
                if !(m.is_finite() && s.is_finite()) {
                    return Err(protomiss_core::Error::NonFinite { op: "sweep metric" }.into());
                }
                rows.push(vec![axis.name().into(), value.clone(), arm.clone(), o.task.name().into(), o.task.metric_name().into(), num(m), num(s)]);
                for f in &o.folds {
                    hashes.push(vec![value.clone(), arm.clone(), o.task.name().into(), f.fold.to_string(), hex::encode(f.train_hash)]);
                }
            }
        }
        let main = format!("sweep_{}.csv", axis.name());
        let idx_name = format!("sweep_{}_indices.csv", axis.name());
        write_csv(&self.path(&main), &["axis", "value", "arm", "task", "metric", "mean", "std"], &rows)?;
        write_csv(&self.path(&idx_name), &["value", "arm", "task", "fold", "train_hash"], &hashes)?;
        let mut outputs = vec![main, idx_name];
        if axis == Axis::Ablation {
            let variants = ablation_variants(&self.cfg);
            let mut header: Vec<String> = ["variant", "pretrain_data_missing_and_full", "prototypes", "l_align", "l_fusion"].iter().map(|s| s.to_string()).collect();
            header.extend(tasks.iter().map(|t| format!("{} ({})", t.name(), t.metric_name())));
            let mark = |b: bool| if b { "yes" } else { "no" }.to_string();
            let table: Vec<Vec<String>> = variants
                .iter()
                .zip(&results)
                .map(|(v, outcomes)| {
                    let mut r = vec![v.name.to_string(), mark(v.components[0]), mark(v.components[1]), mark(v.components[2]), mark(v.components[3])];
                    r.extend(outcomes.iter().map(|o| {
                        let (m, s) = o.mean_std(Condition::Full);
                        mean_pm_std(m, s)
                    }));
                    r
                })
                .collect();
            let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
            write_csv(&self.path("ablation_table.csv"), &hdr, &table)?;
            outputs.push("ablation_table.csv".into());
        }
        let mut lines = self.finish(self.ledger(&format!("sweep-{}", axis.name()), &chash), &format!("sweep_{}", axis.name()), &outputs)?;
        for r in &rows {
            lines.push(format!("{}={} {} {} {}", r[0], r[1], r[2], r[3], mean_pm_std(r[5].parse().unwrap(), r[6].parse().unwrap())));
        }
        Ok(lines)
    }

    fn gradcheck(&self, inject_nan: Option<String>, tol: f64) -> Result<Vec<String>> {
        let report = run_suite(&GradSuiteConfig { seed: self.cfg.seed, inject_nan, ..GradSuiteConfig::default() })?;
        write_gradcheck(&report, &self.path("gradcheck.csv"))?;
        let mut lines = self.finish(self.ledger("gradcheck", "none"), "gradcheck", &["gradcheck.csv".into()])?;
        for c in std::iter::once(&report.composed).chain(&report.checks) {
            lines.push(format!("{:22} max rel err {:.2e}  worst {}", c.module, c.max_rel_err, c.worst_param));
        }
        if !report.passes(tol) {
            return Err(CliError::GradCheck(format!("max relative error {:.3e} exceeds {:.0e}", report.max_rel_err(), tol)));
        }
        lines.push(format!("PASS: max relative error {:.3e} < {:.0e}", report.max_rel_err(), tol));
        Ok(lines)
    }
}

fn write_gradcheck(r: &GradSuiteReport, path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = std::iter::once(&r.composed)
        .chain(&r.checks)
        .map(|c| vec![c.module.clone(), num(c.max_rel_err), c.worst_param.clone(), c.n_scalars.to_string()])
        .collect();
    write_csv(path, &["module", "max_rel_err", "worst_param", "n_scalars"], &rows)
}

/// One row of the ablation table.
pub struct Variant {
    pub name: &'static str,
    /// Missing-aware data, prototypes, alignment term, fusion term.
    pub components: [bool; 4],
    pub cfg: ExperimentConfig,
}

/// The full method and its four single-component ablations, each expressed
/// purely as a configuration change.
pub fn ablation_variants(base: &ExperimentConfig) -> Vec<Variant> {
    let mut token0 = base.clone();
    token0.model.missing_fill = Fill::Zero;
    token0.augment.fill = Fill::Zero;
    let mut full_only = base.clone();
    full_only.experiment.pretrain_cohort = PretrainCohort::FullOnly;
    let mut no_align = base.clone();
    no_align.loss.lambda = 0.0;
    let mut no_fusion = base.clone();
    no_fusion.loss.lambda = 1.0;
    vec![
        Variant { name: "token0", components: [true, false, true, true], cfg: token0 },
        Variant { name: "full_only", components: [false, true, true, true], cfg: full_only },
        Variant { name: "full", components: [true, true, true, true], cfg: base.clone() },
        Variant { name: "lambda0", components: [true, true, false, true], cfg: no_align },
        Variant { name: "lambda1", components: [true, true, true, false], cfg: no_fusion },
    ]
}

/// Pretrains on the cohort selected by `experiment.pretrain_cohort`.
pub fn pretrain_encoder(cfg: &ExperimentConfig, cohort: &Cohort) -> Result<protomiss_core::pretrain::Pretrained> {
    let selected;
    let c = match cfg.experiment.pretrain_cohort {
        PretrainCohort::All => cohort,
        PretrainCohort::FullOnly => {
            selected = cohort.subset(&cohort.trimodal_indices());
            &selected
        }
    };
    Ok(pretrain(c, &cfg.model, &cfg.augment, &cfg.loss, &cfg.pretrain, cfg.seed)?)
}

#[allow(clippy::too_many_arguments)]
fn cross_validate(
    cfg: &ExperimentConfig,
    cohort: &Cohort,
    idx: &[usize],
    enc: &Encoder,
    tasks: &[Task],
    mode: Mode,
    conditions: &[Condition],
    label_fraction: f64,
) -> Result<Vec<CvOutcome>> {
    let bank = match mode {
        Mode::LinearProbe => {
            let patients: Vec<&PatientRecord> = idx.iter().map(|&i| &cohort.patients[i]).collect();
            Some(FeatureBank::build(&enc.model, &enc.params, &patients)?)
        }
        Mode::FullFineTune => None,
    };
    par_map(tasks, cfg.threads, |&task| {
        let spec = CvSpec {
            task,
            mode,
            conditions: conditions.to_vec(),
            label_fraction,
            n_folds: cfg.experiment.n_folds,
            downstream: cfg.downstream.clone(),
            seed: cfg.seed,
        };
        Ok(run_cv(&enc.model, &enc.params, cohort, idx, bank.as_ref(), &spec)?)
    })
}

/// Median split of pooled test risks. Risks are replaced by their within-fold
/// rank so that heads trained on different folds share one scale.
fn stratify(o: &CvOutcome) -> Result<KmAnalysis> {
    let mut samples = Vec::new();
    for f in &o.folds {
        let preds: Vec<_> = f.predictions.iter().filter(|p| p.condition == Condition::Full).collect();
        let n = preds.len() as f64;
        for p in &preds {
            let below = preds.iter().filter(|q| q.score < p.score).count() as f64;
            let ties = preds.iter().filter(|q| q.score == p.score).count() as f64;
            let Target::Survival { time, event, .. } = p.target else { continue };
            samples.push(SurvivalSample { time, event, risk: (below + 0.5 * ties) / n });
        }
    }
    Ok(km_analysis(&samples)?)
}
