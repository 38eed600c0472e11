//! Subcommand implementations shared by the `pit` binary and the tests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::diagnostics::{diagnose_pair, transition_trace_with, BasisSource, DiagnosticsReport, TraceLayer};
use crate::error::{Error, Result};
use crate::io::{read_embedding, write_embedding, Checkpoint, RunConfig};
use crate::linalg::{sym_eig, Matrix, Precision};
use crate::model::Injection;
use crate::pit::{InitMode, PitHead, TeacherOptions, TokenHead};
use crate::train::{self, MetricsRow, RunOutput};

/// Trains per `config`; `on_row` sees each step's metrics.
pub fn cmd_train(config: &RunConfig, on_row: impl FnMut(&MetricsRow)) -> Result<RunOutput> {
    train::run(config, on_row)
}

#[derive(Debug, Clone)]
pub enum DiagnoseInput {
    Checkpoint(PathBuf),
    /// Two embedding files. The second may hold `W_out` (`d×V`) or `W_outᵀ`
    /// (`V×d`); the orientation is read off its shape.
    Pair { embedding: PathBuf, unembedding: PathBuf },
}

fn file_id(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Materialized `(E, W_out)` of a head, rounded to the FP32 storage format
/// so checkpoint and exported-file diagnostics see the same numbers.
pub fn materialize_pair(head: &TokenHead) -> (Matrix, Matrix) {
    (
        head.materialize_embedding().with_precision(Precision::F32),
        head.materialize_unembedding().with_precision(Precision::F32),
    )
}

pub fn cmd_diagnose(input: &DiagnoseInput, csv: Option<&Path>) -> Result<DiagnosticsReport> {
    let report = match input {
        DiagnoseInput::Checkpoint(path) => {
            let ck = Checkpoint::read(path)?;
            let head = ck.head()?;
            let source = match head {
                TokenHead::Pit(_) => BasisSource::Pit,
                TokenHead::Tt(_) => BasisSource::Tt,
            };
            let (e, w) = materialize_pair(&head);
            diagnose_pair(&file_id(path), &e, &w, source)?
        }
        DiagnoseInput::Pair { embedding, unembedding } => {
            let e = read_embedding(embedding)?;
            let w = read_embedding(unembedding)?;
            let w_out = if w.shape() == (e.cols(), e.rows()) {
                w
            } else if w.shape() == e.shape() {
                w.transpose()
            } else {
                return Err(Error::Format(format!(
                    "unembedding {}x{} does not pair with embedding {}x{}",
                    w.rows(),
                    w.cols(),
                    e.rows(),
                    e.cols()
                )));
            };
            diagnose_pair(&file_id(embedding), &e, &w_out, BasisSource::External)?
        }
    };
    if let Some(csv) = csv {
        report.append_csv(csv)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct CanonicalizeSummary {
    /// Condition number of the discarded symmetric factor `H`.
    pub cond_h: f64,
    /// `‖e0 − z‖_F`.
    pub drift: f64,
    pub vocab: usize,
    pub dim: usize,
}

/// Writes a head-only teacher-mode PIT checkpoint built from the polar factor
/// of the embedding in `e0_path`.
pub fn cmd_canonicalize(e0_path: &Path, out: &Path, match_teacher_scale: bool) -> Result<CanonicalizeSummary> {
    let e0 = read_embedding(e0_path)?;
    let head = PitHead::init_teacher_with(&e0, TeacherOptions { match_teacher_scale, trainable_z: false, precision: Precision::F32 })?;
    let z = head.memory().z();
    let drift = e0.distance(z)?;
    let h = z.t_matmul(&e0.with_precision(Precision::F64))?.symmetrize();
    let eig = sym_eig(&h)?;
    let (lo, hi) = (eig.values.first().copied().unwrap_or(0.0), eig.values.last().copied().unwrap_or(0.0));
    let cond_h = if lo > 0.0 { hi / lo } else { f64::INFINITY };

    let mut config = RunConfig::default();
    config.vocab = e0.rows();
    config.d_model = e0.cols();
    config.init_mode = InitMode::Teacher;
    config.teacher_path = Some(e0_path.to_path_buf());
    config.match_teacher_scale = match_teacher_scale;
    let (vocab, dim) = (head.vocab(), head.dim());
    Checkpoint::from_head(&head.into(), &config).write(out)?;
    Ok(CanonicalizeSummary { cond_h, drift, vocab, dim })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportWhich {
    /// `E`, `V×d`.
    Embedding,
    /// `W_out`, `d×V`.
    Unembedding,
}

impl FromStr for ExportWhich {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Self::Embedding),
            "unembedding" => Ok(Self::Unembedding),
            _ => Err(Error::Config(format!("expected embedding or unembedding, got {s:?}"))),
        }
    }
}

impl fmt::Display for ExportWhich {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Embedding => "embedding",
            Self::Unembedding => "unembedding",
        })
    }
}

/// Materializes one side of a checkpoint's token interface into an
/// embedding file and returns the matrix written.
pub fn cmd_export(checkpoint: &Path, which: ExportWhich, out: &Path) -> Result<Matrix> {
    let head = Checkpoint::read(checkpoint)?.head()?;
    let (e, w) = materialize_pair(&head);
    let m = match which {
        ExportWhich::Embedding => e,
        ExportWhich::Unembedding => w,
    };
    write_embedding(out, &m)?;
    Ok(m)
}

/// Debug injection: replace the last-position state after `layer` with the
/// token memory row of `token` (`z_t` for PIT, `e_t` for TT).
#[derive(Debug, Clone, Copy)]
pub struct TraceInjection {
    pub layer: usize,
    pub token: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceOutput {
    pub checkpoint: String,
    pub prompt_len: usize,
    pub k: usize,
    pub layers: Vec<TraceLayer>,
}

pub fn cmd_trace(checkpoint: &Path, prompt: &[u8], k: usize, inject: Option<TraceInjection>) -> Result<TraceOutput> {
    let ck = Checkpoint::read(checkpoint)?;
    let model = ck.model()?;
    let ids: Vec<usize> = prompt.iter().map(|&b| b as usize).collect();
    let injection = match inject {
        Some(TraceInjection { layer, token }) => {
            let vocab = model.config().vocab;
            if token >= vocab {
                return Err(Error::TokenOutOfRange { id: token, vocab });
            }
            let vector = match model.head()? {
                TokenHead::Pit(h) => h.memory().z().row(token).to_vec(),
                TokenHead::Tt(h) => h.e().row(token).to_vec(),
            };
            Some(Injection { layer, vector })
        }
        None => None,
    };
    let layers = transition_trace_with(&model, &ids, k, injection.as_ref())?;
    Ok(TraceOutput { checkpoint: file_id(checkpoint), prompt_len: ids.len(), k, layers })
}
