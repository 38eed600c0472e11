use std::path::{Path, PathBuf};

use crate::autodiff::AdamWConfig;
use crate::error::{Error, Result};
use crate::linalg::Precision;
use crate::model::{default_d_ff, BlockStyle, ModelConfig};
use crate::pit::{HeadMode, InitMode};

/// Everything a training run needs, parsed from flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub gqa_ratio: usize,
    /// 0 means `d_model / head_dim`.
    pub n_heads: usize,
    /// 0 means `round_up(8/3·d_model, d_ff_multiple)`.
    pub d_ff: usize,
    pub d_ff_multiple: usize,
    pub vocab: usize,
    pub context: usize,
    pub block_style: BlockStyle,
    pub head_mode: HeadMode,
    pub init_mode: InitMode,
    /// Embedding file for teacher-mode initialization.
    pub teacher_path: Option<PathBuf>,
    pub trainable_z: bool,
    pub match_teacher_scale: bool,
    pub precision: Precision,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub min_lr_ratio: f64,
    /// 0 disables clipping.
    pub grad_clip: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub corpus: PathBuf,
    pub log_interval: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    /// 0 computes Δ_TI only at the start and end.
    pub diagnostics_interval: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            head_dim: 8,
            gqa_ratio: 4,
            n_heads: 0,
            d_ff: 0,
            d_ff_multiple: 64,
            vocab: 256,
            context: 64,
            block_style: BlockStyle::Parallel,
            head_mode: HeadMode::Pit,
            init_mode: InitMode::Scratch,
            teacher_path: None,
            trainable_z: false,
            match_teacher_scale: false,
            precision: Precision::F32,
            seed: 0,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_frac: 0.02,
            min_lr_ratio: 0.1,
            grad_clip: 1.0,
            steps: 300,
            batch_size: 8,
            grad_accum: 1,
            corpus: PathBuf::from("data/corpus.txt"),
            log_interval: 1,
            checkpoint_interval: 0,
            diagnostics_interval: 50,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Recognized keys, in canonical order.
pub const KEYS: &[&str] = &[
    "n_layers",
    "d_model",
    "head_dim",
    "gqa_ratio",
    "n_heads",
    "d_ff",
    "d_ff_multiple",
    "vocab",
    "context",
    "block_style",
    "head_mode",
    "init_mode",
    "teacher_path",
    "trainable_z",
    "match_teacher_scale",
    "precision",
    "seed",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "warmup_frac",
    "min_lr_ratio",
    "grad_clip",
    "steps",
    "batch_size",
    "grad_accum",
    "corpus",
    "log_interval",
    "checkpoint_interval",
    "diagnostics_interval",
    "out_dir",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    if v.len() >= 2 && ((v.starts_with('"') && v.ends_with('"')) || (v.starts_with('\'') && v.ends_with('\''))) {
        &v[1..v.len() - 1]
    } else {
        v
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) if !in_quotes(raw, i) => &raw[..i],
                _ => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = unquote(value);
        match key {
            "n_layers" => self.n_layers = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "head_dim" => self.head_dim = parse(key, v)?,
            "gqa_ratio" => self.gqa_ratio = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "d_ff_multiple" => self.d_ff_multiple = parse(key, v)?,
            "vocab" => self.vocab = parse(key, v)?,
            "context" => self.context = parse(key, v)?,
            "block_style" => self.block_style = v.parse()?,
            "head_mode" => self.head_mode = v.parse()?,
            "init_mode" => self.init_mode = v.parse()?,
            "teacher_path" => self.teacher_path = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "trainable_z" => self.trainable_z = parse_bool(key, v)?,
            "match_teacher_scale" => self.match_teacher_scale = parse_bool(key, v)?,
            "precision" => self.precision = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_frac" => self.warmup_frac = parse(key, v)?,
            "min_lr_ratio" => self.min_lr_ratio = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "grad_accum" => self.grad_accum = parse(key, v)?,
            "corpus" => self.corpus = PathBuf::from(v),
            "log_interval" => self.log_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            "diagnostics_interval" => self.diagnostics_interval = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` as text.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Path| p.display().to_string();
        Some(match key {
            "n_layers" => self.n_layers.to_string(),
            "d_model" => self.d_model.to_string(),
            "head_dim" => self.head_dim.to_string(),
            "gqa_ratio" => self.gqa_ratio.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "d_ff_multiple" => self.d_ff_multiple.to_string(),
            "vocab" => self.vocab.to_string(),
            "context" => self.context.to_string(),
            "block_style" => self.block_style.to_string(),
            "head_mode" => self.head_mode.to_string(),
            "init_mode" => self.init_mode.to_string(),
            "teacher_path" => self.teacher_path.as_deref().map(path).unwrap_or_default(),
            "trainable_z" => self.trainable_z.to_string(),
            "match_teacher_scale" => self.match_teacher_scale.to_string(),
            "precision" => self.precision.to_string(),
            "seed" => self.seed.to_string(),
            "lr" => format!("{:?}", self.lr),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "eps" => format!("{:?}", self.eps),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "warmup_frac" => format!("{:?}", self.warmup_frac),
            "min_lr_ratio" => format!("{:?}", self.min_lr_ratio),
            "grad_clip" => format!("{:?}", self.grad_clip),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "grad_accum" => self.grad_accum.to_string(),
            "corpus" => path(&self.corpus),
            "log_interval" => self.log_interval.to_string(),
            "checkpoint_interval" => self.checkpoint_interval.to_string(),
            "diagnostics_interval" => self.diagnostics_interval.to_string(),
            "out_dir" => path(&self.out_dir),
            _ => return None,
        })
    }

    /// Canonical text: every key in [`KEYS`] order, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let v = self.get(k).expect("known key");
            if v.is_empty() || v.contains(['#', ' ']) {
                s.push_str(&format!("{k} = \"{v}\"\n"));
            } else {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.head_dim == 0 {
            return Err(Error::Config("head_dim must be positive".into()));
        }
        let n_heads = if self.n_heads == 0 {
            if self.d_model % self.head_dim != 0 {
                return Err(Error::Config(format!("d_model {} is not a multiple of head_dim {}", self.d_model, self.head_dim)));
            }
            self.d_model / self.head_dim
        } else {
            self.n_heads
        };
        if self.gqa_ratio == 0 || n_heads % self.gqa_ratio != 0 {
            return Err(Error::Config(format!("{n_heads} heads not divisible by gqa_ratio {}", self.gqa_ratio)));
        }
        let cfg = ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            head_dim: self.head_dim,
            n_heads,
            n_kv_heads: n_heads / self.gqa_ratio,
            d_ff: if self.d_ff == 0 { default_d_ff(self.d_model, self.d_ff_multiple) } else { self.d_ff },
            vocab: self.vocab,
            context: self.context,
            block_style: self.block_style,
            head_mode: self.head_mode,
            precision: self.precision,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the training-side fields.
    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return fail("warmup_frac and min_lr_ratio must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return fail("batch_size and grad_accum must be positive");
        }
        if self.init_mode == InitMode::Teacher && self.teacher_path.is_none() {
            return fail("teacher init needs teacher_path");
        }
        Ok(())
    }
}

fn in_quotes(line: &str, idx: usize) -> bool {
    line[..idx].chars().filter(|&c| c == '"').count() % 2 == 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_with_comments() {
        let cfg = RunConfig::parse("# run\nd_model = 64 # width\nhead_mode = tt\nout_dir = \"a b#c\"\n\n").unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.head_mode, HeadMode::Tt);
        assert_eq!(cfg.out_dir, PathBuf::from("a b#c"));
    }

    #[test]
    fn unknown_key_is_error() {
        let err = RunConfig::parse("d_model = 32\nlearning_rate = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("line 2") && m.contains("learning_rate")));
    }

    #[test]
    fn bad_value_is_error() {
        assert!(RunConfig::parse("steps = many").is_err());
        assert!(RunConfig::parse("trainable_z = maybe").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }

    #[test]
    fn canonical_text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.00123").unwrap();
        cfg.set("teacher_path", "t.pitm").unwrap();
        cfg.set("precision", "f64").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn keys_are_exhaustive() {
        let cfg = RunConfig::default();
        for k in KEYS {
            let v = cfg.get(k).unwrap();
            let mut c = cfg.clone();
            c.set(k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn derived_model_shape() {
        let cfg = RunConfig::parse("d_model = 64\nhead_dim = 16\ngqa_ratio = 4").unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!((m.n_heads, m.n_kv_heads, m.d_ff), (4, 1, 192));
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn text_roundtrip(d in 1usize..512, steps in 0u64..100_000, lr in 1e-6f64..1.0, seed in any::<u64>(), tt in any::<bool>(), out in "[a-z/ #]{0,12}") {
            let mut c = RunConfig::default();
            c.d_model = d;
            c.steps = steps;
            c.lr = lr;
            c.seed = seed;
            c.head_mode = if tt { HeadMode::Tt } else { HeadMode::Pit };
            c.out_dir = out.into();
            let back = RunConfig::parse(&c.to_text()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
