use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::autodiff::{AdamW, CosineSchedule};
use crate::diagnostics::{delta_ti, diagnose_head, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::io::{read_embedding, Checkpoint, RunConfig};
use crate::model::ToyTransformer;
use crate::pit::{HeadMode, InitMode, PitHead, TeacherOptions, TokenHead, TtHead};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub tokens_seen: u64,
    pub loss: f64,
    pub ppl: f64,
    pub grad_norm: f64,
    /// Present on diagnostics steps only.
    pub delta_ti: Option<f64>,
    pub wall_ms: u64,
}

/// Builds the model a config describes, reading the teacher embedding when
/// `init_mode = teacher`.
pub fn build_model(config: &RunConfig) -> Result<ToyTransformer> {
    let mc = config.model_config()?;
    let head: TokenHead = match (config.head_mode, config.init_mode) {
        (HeadMode::Pit, InitMode::Scratch) => {
            let mut h = PitHead::init_scratch_with(mc.vocab, mc.d_model, mc.seed, mc.precision)?;
            h.set_frozen(!config.trainable_z);
            h.into()
        }
        (mode, InitMode::Teacher) => {
            let path = config.teacher_path.as_ref().ok_or_else(|| Error::Config("teacher init needs teacher_path".into()))?;
            let e0 = read_embedding(path)?;
            if e0.shape() != (mc.vocab, mc.d_model) {
                return Err(Error::DimensionMismatch(format!(
                    "teacher embedding is {}x{}, model expects {}x{}",
                    e0.rows(),
                    e0.cols(),
                    mc.vocab,
                    mc.d_model
                )));
            }
            match mode {
                HeadMode::Pit => PitHead::init_teacher_with(
                    &e0,
                    TeacherOptions {
                        match_teacher_scale: config.match_teacher_scale,
                        trainable_z: config.trainable_z,
                        precision: mc.precision,
                    },
                )?
                .into(),
                HeadMode::Tt => TtHead::new(e0, mc.precision).into(),
            }
        }
        (HeadMode::Tt, InitMode::Scratch) => TtHead::init_scratch(mc.vocab, mc.d_model, mc.seed, mc.precision)?.into(),
    };
    ToyTransformer::new(mc, head)
}

/// `‖W_out·E − I‖_F` of the model's current token interface.
pub fn model_delta_ti(model: &ToyTransformer) -> Result<f64> {
    let head = model.head()?;
    delta_ti(&head.materialize_embedding(), &head.materialize_unembedding())
}

/// Optimizer loop over a corpus, without any file output.
pub struct Trainer {
    config: RunConfig,
    model: ToyTransformer,
    corpus: Corpus,
    opt: AdamW,
    schedule: CosineSchedule,
    step: u64,
    tokens_seen: u64,
    start: Instant,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let corpus = Corpus::open(&config.corpus, config.context, config.vocab, config.seed)?;
        let model = build_model(&config)?;
        Self::with_parts(config, model, corpus)
    }

    pub fn with_parts(config: RunConfig, model: ToyTransformer, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let warmup = (config.warmup_frac * config.steps as f64).round() as u64;
        let schedule = CosineSchedule { peak: config.lr, warmup, total: config.steps, min_ratio: config.min_lr_ratio };
        Ok(Self { opt: AdamW::new(config.adamw()), config, model, corpus, schedule, step: 0, tokens_seen: 0, start: Instant::now() })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyTransformer {
        &self.model
    }

    pub fn into_model(self) -> ToyTransformer {
        self.model
    }

    /// Optimizer steps taken so far.
    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    fn on_interval(&self, step: u64, interval: u64) -> bool {
        step == self.config.steps || (interval > 0 && step % interval == 0)
    }

    /// One optimizer step over `grad_accum` micro-batches.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let micro = (0..self.config.grad_accum)
            .map(|_| self.corpus.next_batch(self.config.batch_size))
            .collect::<Result<Vec<_>>>()?;
        let lr = self.lr();
        let stats = self.model.train_step(&micro, &mut self.opt, lr, self.config.grad_clip).map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: self.step + 1 },
            other => other,
        })?;
        self.step += 1;
        self.tokens_seen += micro.iter().map(|b| b.tokens() as u64).sum::<u64>();
        let delta_ti = if self.on_interval(self.step, self.config.diagnostics_interval) {
            Some(model_delta_ti(&self.model)?)
        } else {
            None
        };
        Ok(MetricsRow {
            step: self.step,
            tokens_seen: self.tokens_seen,
            loss: stats.loss,
            ppl: stats.loss.exp(),
            grad_norm: stats.grad_norm,
            delta_ti,
            wall_ms: self.start.elapsed().as_millis() as u64,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.config)
    }

    pub fn report(&self, checkpoint_id: &str) -> Result<DiagnosticsReport> {
        diagnose_head(checkpoint_id, &self.model.head()?)
    }
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics_path: PathBuf,
    pub diagnostics_csv: PathBuf,
    pub final_checkpoint: PathBuf,
    pub final_report: DiagnosticsReport,
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const FINAL_CHECKPOINT: &str = "final.pitc";
pub const FINAL_REPORT: &str = "final_report.json";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.pitc")
}

fn write_row(f: &mut File, row: &MetricsRow) -> Result<()> {
    writeln!(f, "{}", serde_json::to_string(row)?)?;
    f.flush()?;
    Ok(())
}

/// Full training run with on-disk outputs under `config.out_dir`:
/// `metrics.jsonl`, periodic `step_NNNNNN.pitc` checkpoints, `final.pitc`,
/// `diagnostics.csv` (one row per checkpoint) and `final_report.json`.
///
/// `on_row` sees every metrics row, logged or not.
pub fn run(config: &RunConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<RunOutput> {
    let mut trainer = Trainer::new(config.clone())?;
    run_trainer(&mut trainer, &mut on_row)
}

pub fn run_trainer(trainer: &mut Trainer, on_row: &mut dyn FnMut(&MetricsRow)) -> Result<RunOutput> {
    let config = trainer.config().clone();
    let out = config.out_dir.clone();
    fs::create_dir_all(&out)?;
    let metrics_path = out.join(METRICS_FILE);
    let diagnostics_csv = out.join(DIAGNOSTICS_FILE);
    let mut metrics = OpenOptions::new().create(true).write(true).truncate(true).open(&metrics_path)?;
    if diagnostics_csv.exists() {
        fs::remove_file(&diagnostics_csv)?;
    }
    let save = |t: &Trainer, name: &str| -> Result<DiagnosticsReport> {
        let path = out.join(name);
        t.checkpoint().write(&path)?;
        let report = t.report(name)?;
        report.append_csv(&diagnostics_csv)?;
        Ok(report)
    };

    let mut rows = Vec::new();
    while trainer.steps_done() < config.steps {
        let row = trainer.step()?;
        on_row(&row);
        let s = row.step;
        if s == config.steps || row.delta_ti.is_some() || (config.log_interval > 0 && s % config.log_interval == 0) {
            write_row(&mut metrics, &row)?;
        }
        rows.push(row);
        if config.checkpoint_interval > 0 && s % config.checkpoint_interval == 0 && s != config.steps {
            save(trainer, &checkpoint_name(s))?;
        }
    }
    let final_report = save(trainer, FINAL_CHECKPOINT)?;
    fs::write(out.join(FINAL_REPORT), final_report.to_json()? + "\n")?;
    Ok(RunOutput { metrics_path, diagnostics_csv, final_checkpoint: out.join(FINAL_CHECKPOINT), final_report, rows })
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
