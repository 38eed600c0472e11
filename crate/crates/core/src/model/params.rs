use serde::Serialize;

use crate::autodiff::numel;
use crate::pit::{strict_lower_len, HeadMode};

use super::ModelConfig;

/// Name, shape and weight-decay flag of one model parameter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], decay: bool) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), decay }
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

pub(crate) fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

/// Head parameters in storage order.
pub fn head_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let (v, d) = (config.vocab, config.d_model);
    match config.head_mode {
        HeadMode::Pit => vec![
            ParamSpec::new("head.z", &[v, d], false),
            ParamSpec::new("head.log_diag", &[d], false),
            ParamSpec::new("head.strict_lower", &[strict_lower_len(d)], false),
        ],
        HeadMode::Tt => vec![ParamSpec::new("head.e", &[v, d], false)],
    }
}

/// Body (non-head) parameters in storage order.
pub fn body_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let d = config.d_model;
    let (qw, kvw, ff) = (config.q_width(), config.kv_width(), config.d_ff);
    let mut out = Vec::new();
    for l in 0..config.n_layers {
        out.push(ParamSpec::new(layer_name(l, "attn_norm"), &[d], false));
        out.push(ParamSpec::new(layer_name(l, "wq"), &[d, qw], true));
        out.push(ParamSpec::new(layer_name(l, "wk"), &[d, kvw], true));
        out.push(ParamSpec::new(layer_name(l, "wv"), &[d, kvw], true));
        out.push(ParamSpec::new(layer_name(l, "wo"), &[qw, d], true));
        out.push(ParamSpec::new(layer_name(l, "attn_gate"), &[d], false));
        out.push(ParamSpec::new(layer_name(l, "mlp_norm"), &[d], false));
        out.push(ParamSpec::new(layer_name(l, "w_gate"), &[d, ff], true));
        out.push(ParamSpec::new(layer_name(l, "w_up"), &[d, ff], true));
        out.push(ParamSpec::new(layer_name(l, "w_down"), &[ff, d], true));
    }
    out.push(ParamSpec::new("final_norm", &[d], false));
    out
}

/// Every parameter of a model: head first, then body.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = head_specs(config);
    v.extend(body_specs(config));
    v
}

/// Parameter breakdown: an exact count from the parameter shapes and the
/// closed-form estimate `V·d + L·(2d² + 2d·d_kv + 3d·d_ff)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCount {
    /// `V·d`, shared by input and output side.
    pub embedding: usize,
    /// Extra head scalars beyond `V·d` (the Cholesky parameters for PIT).
    pub head_extra: usize,
    pub per_layer_attn: usize,
    pub per_layer_mlp: usize,
    /// Attention gate and the two norm gains.
    pub per_layer_other: usize,
    /// All RMSNorm gains, final norm included.
    pub norms: usize,
    pub total: usize,
    pub formula_per_layer_attn: usize,
    pub formula_per_layer_mlp: usize,
    pub formula_total: usize,
}

impl ParamCount {
    /// `|total − formula_total| / total`.
    pub fn relative_gap(&self) -> f64 {
        (self.total as f64 - self.formula_total as f64).abs() / self.total.max(1) as f64
    }
}

pub fn param_count(config: &ModelConfig) -> ParamCount {
    let specs = param_specs(config);
    let sum = |pred: &dyn Fn(&str) -> bool| -> usize { specs.iter().filter(|s| pred(&s.name)).map(ParamSpec::numel).sum() };
    let in_layer0 = |suffixes: &'static [&'static str]| move |n: &str| suffixes.iter().any(|s| n == layer_name(0, s));
    let embedding = config.vocab * config.d_model;
    let head_total = sum(&|n: &str| n.starts_with("head."));
    let per_layer_attn = if config.n_layers > 0 { sum(&in_layer0(&["wq", "wk", "wv", "wo"])) } else { 0 };
    let per_layer_mlp = if config.n_layers > 0 { sum(&in_layer0(&["w_gate", "w_up", "w_down"])) } else { 0 };
    let per_layer_other =
        if config.n_layers > 0 { sum(&in_layer0(&["attn_gate", "attn_norm", "mlp_norm"])) } else { 0 };
    let norms = sum(&|n: &str| n.ends_with("_norm"));
    let total: usize = specs.iter().map(ParamSpec::numel).sum();

    let d = config.d_model;
    let formula_per_layer_attn = 2 * d * d + 2 * d * config.kv_width();
    let formula_per_layer_mlp = 3 * d * config.d_ff;
    let formula_total = embedding + config.n_layers * (formula_per_layer_attn + formula_per_layer_mlp);
    ParamCount {
        embedding,
        head_extra: head_total - embedding,
        per_layer_attn,
        per_layer_mlp,
        per_layer_other,
        norms,
        total,
        formula_per_layer_attn,
        formula_per_layer_mlp,
        formula_total,
    }
}
