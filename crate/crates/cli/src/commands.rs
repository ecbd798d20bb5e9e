use std::io::Write;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use volnet_core::data::{generate_phantoms, read_volume, write_volume, Loader, Manifest, ManifestRow, Split};
use volnet_core::gradcheck::{run_suite, CheckOptions, CheckReport};
use volnet_core::train::{predict_all, Observer};
use volnet_core::{metrics, Checkpoint, Error, MetricsReport, Model, Result, StepRecord, Trainer, Variant};

use crate::config::RunConfig;
use crate::trainlog::{LogEntry, TrainLog};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.vnck";
pub const LAST_CHECKPOINT: &str = "last.vnck";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const ABLATION_TABLE: &str = "ablation.md";
pub const ABLATION_JSON: &str = "ablation.json";
pub const TABLE_COLUMNS: [&str; 4] = ["Architecture", "Recall", "Precision", "Macro F1 Score"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Synth,
    Preprocess,
    Train,
    Eval,
    Predict,
    Gradcheck,
    Ablate,
}

/// What a command wants the process to exit with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    ChecksFailed,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric_failure() {
        EXIT_NUMERIC
    } else if err.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_CONFIG
    }
}

pub fn run(cmd: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    match cmd {
        Command::Synth => synth(cfg, out),
        Command::Preprocess => preprocess(cfg, out),
        Command::Train => train(cfg, out).map(|_| Status::Ok),
        Command::Eval => eval(cfg, out).map(|_| Status::Ok),
        Command::Predict => predict(cfg, out),
        Command::Gradcheck => gradcheck(cfg, out),
        Command::Ablate => ablate(cfg, out).map(|_| Status::Ok),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::Io { path: PathBuf::from("<stdout>"), source: e })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let spec = cfg.phantom_spec();
    let m = generate_phantoms(&spec, cfg.n_per_class, cfg.n_val_per_class, &cfg.synth_dir)?;
    emit(
        out,
        &format!(
            "wrote {} volumes ({} train, {} val) to {}\n",
            m.len(),
            m.split(Split::Train).len(),
            m.split(Split::Val).len(),
            cfg.synth_dir.join("manifest.csv").display()
        ),
    )?;
    Ok(Status::Ok)
}

fn preprocess(cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let manifest = Manifest::load(cfg.require_manifest()?)?;
    let dest = cfg
        .preprocess_out
        .clone()
        .ok_or_else(|| Error::Config("`preprocess_out` is not set".into()))?;
    let loader = Loader::new(manifest.clone(), cfg.preprocessor(), cfg.workers)?;
    create_dir(&dest.join("volumes"))?;
    let mut rows = Vec::with_capacity(manifest.len());
    for (i, row) in manifest.rows.iter().enumerate() {
        let v = loader.volume(i)?;
        let rel = PathBuf::from("volumes").join(format!("{}.volf", row.id));
        write_volume(&dest.join(&rel), &v)?;
        rows.push(ManifestRow { path: rel, ..row.clone() });
    }
    let processed = Manifest::new(&dest, rows)?;
    processed.save(&dest.join("manifest.csv"))?;
    emit(out, &format!("preprocessed {} volumes into {}\n", processed.len(), dest.display()))?;
    Ok(Status::Ok)
}

fn loaders(cfg: &RunConfig) -> Result<(Loader, Loader)> {
    let manifest = Manifest::load(cfg.require_manifest()?)?;
    let (train, val) = (manifest.split(Split::Train), manifest.split(Split::Val));
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "manifest needs both splits, found {} train and {} val records",
            train.len(),
            val.len()
        )));
    }
    let make = |m: Manifest| -> Result<Loader> {
        let l = Loader::new(m, cfg.preprocessor(), cfg.workers)?;
        Ok(if cfg.cache { l.cached() } else { l })
    };
    Ok((make(train)?, make(val)?))
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub variant: Variant,
    pub steps: Vec<StepRecord>,
    /// Epoch and validation report of the best checkpoint written in this run.
    pub best: Option<(u64, MetricsReport)>,
}

struct CheckpointObserver<'a> {
    log: TrainLog,
    dir: &'a Path,
    interval: u64,
    epochs: u64,
    best: Option<(u64, MetricsReport)>,
}

impl Observer for CheckpointObserver<'_> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.log.append(&LogEntry::Step(*record))
    }

    fn on_epoch(&mut self, trainer: &Trainer, epoch: u64, report: &MetricsReport, improved: bool) -> Result<()> {
        self.log.append(&LogEntry::Val { epoch, report: *report })?;
        let done = epoch + 1;
        let save_last = done.is_multiple_of(self.interval) || done == self.epochs;
        if improved || save_last {
            let ck = trainer.to_checkpoint();
            if improved {
                ck.save(&self.dir.join(BEST_CHECKPOINT))?;
                self.best = Some((epoch, *report));
            }
            if save_last {
                ck.save(&self.dir.join(LAST_CHECKPOINT))?;
            }
        }
        Ok(())
    }
}

/// Train `variant` into `dir`, resuming when `cfg.resume` is set.
pub fn run_training(cfg: &RunConfig, variant: Variant, train: &Loader, val: &Loader, dir: &Path) -> Result<RunSummary> {
    let model_cfg = cfg.model_config(variant);
    let log_path = dir.join(LOG_FILE);
    let (mut trainer, log) = if cfg.resume {
        let path = cfg.checkpoint.clone().unwrap_or_else(|| dir.join(LAST_CHECKPOINT));
        let trainer = Trainer::from_checkpoint(&Checkpoint::load(&path)?, cfg.hp.clone(), cfg.seed, &path)?;
        if trainer.model.cfg != model_cfg {
            return Err(Error::Config(format!("{} was trained with a different model configuration", path.display())));
        }
        log::info!("resuming {variant} from {} after epoch {}", path.display(), trainer.epoch);
        create_dir(dir)?;
        let log = TrainLog::resume(&log_path, trainer.epoch)?;
        (trainer, log)
    } else {
        let trainer = Trainer::new(Model::build(model_cfg, cfg.seed)?, cfg.hp.clone(), cfg.seed)?;
        create_dir(dir)?;
        (trainer, TrainLog::create(&log_path)?)
    };
    let mut obs = CheckpointObserver {
        log,
        dir,
        interval: cfg.checkpoint_interval as u64,
        epochs: cfg.hp.epochs as u64,
        best: None,
    };
    let outcome = trainer.fit(train, val, &mut obs)?;
    Ok(RunSummary { variant, steps: outcome.steps, best: obs.best })
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<RunSummary> {
    let (train, val) = loaders(cfg)?;
    let summary = run_training(cfg, cfg.variant, &train, &val, &cfg.out_dir)?;
    let last = summary.steps.last().map_or(f64::NAN, |s| s.loss);
    let mut text = format!("trained {} for {} steps, last loss {last:.6}\n", cfg.variant, summary.steps.len());
    if let Some((epoch, r)) = &summary.best {
        text += &format!("best val macro F1 {:.4} at epoch {epoch}\n", r.macro_f1);
    }
    emit(out, &text)?;
    Ok(summary)
}

fn eval_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let m = Manifest::load(cfg.require_manifest()?)?;
    let m = match cfg.eval_split.split() {
        Some(s) => m.split(s),
        None => m,
    };
    if m.is_empty() {
        return Err(Error::Config("no records to evaluate".into()));
    }
    Ok(m)
}

fn load_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(BEST_CHECKPOINT));
    Checkpoint::load(&path)?.to_model(&path)
}

fn eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<MetricsReport> {
    let manifest = eval_manifest(cfg)?;
    let model = load_model(cfg)?;
    let labels = manifest.labels();
    let loader = Loader::new(manifest, cfg.preprocessor(), cfg.workers)?;
    let probs = predict_all(&model, &loader, cfg.hp.batch_size)?;
    let report = metrics::evaluate(&probs, &labels, cfg.threshold)?;
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(EVAL_REPORT);
    std::fs::write(&path, report.to_json() + "\n").map_err(|e| Error::Io { path: path.clone(), source: e })?;
    emit(out, &report.to_string())?;
    Ok(report)
}

fn predict(cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let input = cfg.input.as_deref().ok_or_else(|| Error::Config("`input` is not set".into()))?;
    let model = load_model(cfg)?;
    let pre = cfg.preprocessor();
    let mut lines = String::new();
    let mut line = |id: &str, p: f64| lines += &format!("{id} {p:.6} {}\n", u8::from(p >= cfg.threshold));
    if input.extension().is_some_and(|e| e == "csv") {
        let loader = Loader::new(Manifest::load(input)?, pre, cfg.workers)?;
        let probs = predict_all(&model, &loader, cfg.hp.batch_size)?;
        for (row, p) in loader.manifest().rows.iter().zip(probs) {
            line(&row.id, p);
        }
    } else {
        let v = pre.apply(&read_volume(input)?)?;
        let mut shape = vec![1, 1];
        shape.extend(v.shape());
        let p = model.predict(v.reshape(shape)?)?.data()[0] as f64;
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("probability for {}", input.display())));
        }
        let id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        line(&id, p);
    }
    emit(out, &lines)?;
    Ok(Status::Ok)
}

pub fn gradcheck_table(reports: &[CheckReport]) -> String {
    let mut s = format!("{:<24} {:>12} {:>8} {:>8}  {}\n", "check", "max_rel_err", "checked", "skipped", "result");
    for r in reports {
        s += &format!(
            "{:<24} {:>12.3e} {:>8} {:>8}  {}\n",
            r.name,
            r.max_rel_err,
            r.checked,
            r.skipped,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    s
}

fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<Status> {
    let opts = CheckOptions { seed: cfg.seed, ..CheckOptions::default() };
    let reports = run_suite(&cfg.gradcheck_scope, &opts)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    emit(out, &gradcheck_table(&reports))?;
    emit(out, &format!("{} of {} checks passed\n", reports.len() - failed, reports.len()))?;
    Ok(if failed == 0 { Status::Ok } else { Status::ChecksFailed })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub architecture: String,
    pub variant: String,
    pub best_epoch: u64,
    pub report: MetricsReport,
}

/// Markdown table with recall and precision of the positive class.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("| {} |\n", TABLE_COLUMNS.join(" | "));
    s += &format!("|{}\n", "---|".repeat(TABLE_COLUMNS.len()));
    for r in rows {
        s += &format!(
            "| {} | {:.4} | {:.4} | {:.4} |\n",
            r.architecture, r.report.recall_pos, r.report.precision_pos, r.report.macro_f1
        );
    }
    s
}

fn ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<AblationRow>> {
    if cfg.resume {
        return Err(Error::Config("ablate always trains from scratch; unset `resume`".into()));
    }
    let (train, val) = loaders(cfg)?;
    let mut rows = Vec::new();
    for variant in [Variant::Plain, Variant::WithMha] {
        let summary = run_training(cfg, variant, &train, &val, &cfg.out_dir.join(variant.to_string()))?;
        let (best_epoch, report) = summary.best.expect("fit validates at least once");
        rows.push(AblationRow { architecture: variant.label().into(), variant: variant.to_string(), best_epoch, report });
    }
    let table = ablation_table(&rows);
    let md = cfg.out_dir.join(ABLATION_TABLE);
    std::fs::write(&md, &table).map_err(|e| Error::Io { path: md, source: e })?;
    let json = cfg.out_dir.join(ABLATION_JSON);
    let body = serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n";
    std::fs::write(&json, body).map_err(|e| Error::Io { path: json, source: e })?;
    emit(out, &table)?;
    Ok(rows)
}
