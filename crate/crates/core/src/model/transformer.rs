use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{clip_grad_norm, AdamW, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{Matrix, Precision};
use crate::pit::{retract_matrix, HeadMode, HeadVars, InitMode, PitHead, SharedTokenMemory, SpdTransform, TokenHead, TtHead};

use super::config::{BlockStyle, ModelConfig, NORM_EPS, ROPE_BASE};
use super::params::{body_specs, head_specs, layer_name, param_specs};

/// `batch × seq` token ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq == 0 || rows.iter().any(|r| r.len() != seq) {
            return Err(Error::ShapeMismatch("token batch rows must be non-empty and equal length".into()));
        }
        Ok(Self { batch: rows.len(), seq, ids: rows.concat() })
    }

    pub fn from_flat(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if batch * seq != ids.len() || batch == 0 || seq == 0 {
            return Err(Error::ShapeMismatch(format!("{} ids for a {batch}x{seq} batch", ids.len())));
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Inputs and next-token targets cut from windows of `seq + 1` tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
}

impl LmBatch {
    pub fn from_windows(windows: &[Vec<usize>]) -> Result<Self> {
        if windows.iter().any(|w| w.len() < 2) {
            return Err(Error::ShapeMismatch("windows need at least two tokens".into()));
        }
        let inputs: Vec<Vec<usize>> = windows.iter().map(|w| w[..w.len() - 1].to_vec()).collect();
        let targets = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
        Ok(Self { inputs: TokenBatch::new(&inputs)?, targets })
    }

    pub fn tokens(&self) -> usize {
        self.targets.len()
    }
}

/// Replaces the last-position hidden state after layer `layer` (0 = embeddings).
#[derive(Debug, Clone)]
pub struct Injection {
    pub layer: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, T, V]`.
    pub logits: Tensor,
    /// With capture: `f_0 … f_L`, each `B×d` at the last position.
    pub hidden: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    attn_gate: ParamId,
    mlp_norm: ParamId,
    w_gate: ParamId,
    w_up: ParamId,
    w_down: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum HeadIds {
    Pit { z: ParamId, log_diag: ParamId, strict_lower: ParamId },
    Tt { e: ParamId },
}

/// Decoder-only transformer: gated GQA attention with rotary positions,
/// SwiGLU MLP, RMSNorm pre-norm, and a PIT or TT token interface.
#[derive(Debug, Clone)]
pub struct ToyTransformer {
    config: ModelConfig,
    init_mode: InitMode,
    store: ParamStore,
    head: HeadIds,
    layers: Vec<LayerIds>,
    final_norm: ParamId,
    exec: Exec,
}

fn body_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

impl ToyTransformer {
    /// Builds a model around `head`; body weights are drawn from `config.seed`.
    /// `z` is trainable iff the PIT memory is not frozen.
    pub fn new(config: ModelConfig, head: TokenHead) -> Result<Self> {
        config.validate()?;
        if head.head_mode() != config.head_mode || head.vocab() != config.vocab || head.dim() != config.d_model {
            return Err(Error::DimensionMismatch(format!(
                "{} head {}x{} for a {} model with vocab {} and width {}",
                head.head_mode(),
                head.vocab(),
                head.dim(),
                config.head_mode,
                config.vocab,
                config.d_model
            )));
        }
        let init_mode = match &head {
            TokenHead::Pit(h) => h.mode(),
            TokenHead::Tt(_) => InitMode::Scratch,
        };
        let mut store = ParamStore::new();
        let z_trainable = matches!(&head, TokenHead::Pit(h) if !h.memory().frozen());
        for ((name, t), spec) in head.tensors().into_iter().zip(head_specs(&config)) {
            debug_assert!(spec.name.ends_with(name));
            let trainable = name != "z" || z_trainable;
            let t = if trainable { t.trainable() } else { t };
            store.insert(&spec.name, t, spec.decay)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(body_seed(config.seed));
        let resid_scale = 1.0 / (2.0 * config.n_layers.max(1) as f64).sqrt();
        for spec in body_specs(&config) {
            let part = spec.name.rsplit('.').next().unwrap_or("");
            let data = match part {
                "attn_norm" | "mlp_norm" | "final_norm" => vec![1.0; spec.numel()],
                "attn_gate" => vec![0.0; spec.numel()],
                _ => {
                    let fan_in = spec.shape[0] as f64;
                    let mut std = 1.0 / fan_in.sqrt();
                    if part == "wo" || part == "w_down" {
                        std *= resid_scale;
                    }
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..spec.numel()).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            store.insert(&spec.name, Tensor::new(&spec.shape, data)?.trainable(), spec.decay)?;
        }
        let mut model = Self::from_store(config, init_mode, store)?;
        model.quantize();
        Ok(model)
    }

    /// Scratch-initialized model of the configured head mode.
    pub fn scratch(config: ModelConfig) -> Result<Self> {
        let head: TokenHead = match config.head_mode {
            HeadMode::Pit => PitHead::init_scratch_with(config.vocab, config.d_model, config.seed, config.precision)?.into(),
            HeadMode::Tt => TtHead::init_scratch(config.vocab, config.d_model, config.seed, config.precision)?.into(),
        };
        Self::new(config, head)
    }

    /// Wraps an existing parameter store; names and shapes must match the config.
    pub fn from_store(config: ModelConfig, init_mode: InitMode, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != store.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", specs.len(), store.len())));
        }
        for spec in &specs {
            let t = store
                .by_name(&spec.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!("parameter {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let head = match config.head_mode {
            HeadMode::Pit => HeadIds::Pit { z: id("head.z"), log_diag: id("head.log_diag"), strict_lower: id("head.strict_lower") },
            HeadMode::Tt => HeadIds::Tt { e: id("head.e") },
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |part: &str| id(&layer_name(l, part));
                LayerIds {
                    attn_norm: p("attn_norm"),
                    wq: p("wq"),
                    wk: p("wk"),
                    wv: p("wv"),
                    wo: p("wo"),
                    attn_gate: p("attn_gate"),
                    mlp_norm: p("mlp_norm"),
                    w_gate: p("w_gate"),
                    w_up: p("w_up"),
                    w_down: p("w_down"),
                }
            })
            .collect();
        let final_norm = id("final_norm");
        Ok(Self { config, init_mode, store, head, layers, final_norm, exec: Exec::default() })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn z_trainable(&self) -> bool {
        match self.head {
            HeadIds::Pit { z, .. } => self.store.get(z).requires_grad(),
            HeadIds::Tt { .. } => false,
        }
    }

    /// Immutable copy of the token interface.
    pub fn head(&self) -> Result<TokenHead> {
        let precision = self.config.precision;
        match self.head {
            HeadIds::Pit { z, log_diag, strict_lower } => {
                let zt = self.store.get(z);
                let memory = SharedTokenMemory::new(zt.to_matrix(), !zt.requires_grad())?;
                let transform =
                    SpdTransform::from_params(self.store.get(log_diag).data().to_vec(), self.store.get(strict_lower).data().to_vec())?;
                Ok(PitHead::new(memory, transform, self.init_mode, precision)?.into())
            }
            HeadIds::Tt { e } => Ok(TtHead::new(self.store.get(e).to_matrix(), precision).into()),
        }
    }

    /// Rounds every parameter to the configured precision.
    pub fn quantize(&mut self) {
        let p = self.config.precision;
        self.store.iter_mut().for_each(|x| x.tensor.quantize(p));
    }

    fn head_vars(&self, vars: &[Var]) -> HeadVars {
        match self.head {
            HeadIds::Pit { z, log_diag, strict_lower } => {
                HeadVars::Pit { z: vars[z.0], log_diag: vars[log_diag.0], strict_lower: vars[strict_lower.0] }
            }
            HeadIds::Tt { e } => HeadVars::Tt { e: vars[e.0] },
        }
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq() > self.config.context {
            return Err(Error::ContextOverflow { len: batch.seq(), context: self.config.context });
        }
        if let Some(&id) = batch.ids().iter().find(|&&id| id >= self.config.vocab) {
            return Err(Error::TokenOutOfRange { id, vocab: self.config.vocab });
        }
        Ok(())
    }

    fn attention(&self, tape: &mut Tape, vars: &[Var], l: &LayerIds, x: Var) -> Result<Var> {
        let c = &self.config;
        let hd = c.head_dim;
        let q = tape.matmul(x, vars[l.wq.0])?;
        let k = tape.matmul(x, vars[l.wk.0])?;
        let v = tape.matmul(x, vars[l.wv.0])?;
        let q = tape.rope(q, c.n_heads, hd, ROPE_BASE)?;
        let k = tape.rope(k, c.n_kv_heads, hd, ROPE_BASE)?;
        let mut kv = Vec::with_capacity(c.n_kv_heads);
        for g in 0..c.n_kv_heads {
            let kg = tape.slice(k, g * hd, hd)?;
            let kt = tape.transpose(kg)?;
            let vg = tape.slice(v, g * hd, hd)?;
            kv.push((kt, vg));
        }
        let scale = 1.0 / (hd as f64).sqrt();
        let ratio = c.gqa_ratio();
        let mut heads = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let (kt, vg) = kv[h / ratio];
            let qh = tape.slice(q, h * hd, hd)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let p = tape.masked_softmax(s)?;
            heads.push(tape.matmul(p, vg)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
        let out = tape.matmul(cat, vars[l.wo.0])?;
        let gate = tape.sigmoid(vars[l.attn_gate.0]);
        tape.scale_channels(out, gate)
    }

    fn mlp(&self, tape: &mut Tape, vars: &[Var], l: &LayerIds, x: Var) -> Result<Var> {
        let g = tape.matmul(x, vars[l.w_gate.0])?;
        let u = tape.matmul(x, vars[l.w_up.0])?;
        let a = tape.silu(g);
        let h = tape.mul(a, u)?;
        tape.matmul(h, vars[l.w_down.0])
    }

    fn inject(&self, tape: &mut Tape, x: Var, batch: &TokenBatch, inj: &Injection) -> Result<Var> {
        let d = self.config.d_model;
        if inj.vector.len() != d {
            return Err(Error::ShapeMismatch(format!("injected vector of length {} for width {d}", inj.vector.len())));
        }
        let (b, t) = (batch.batch(), batch.seq());
        let mut mask = vec![1.0; b * t * d];
        let mut add = vec![0.0; b * t * d];
        for bi in 0..b {
            let off = (bi * t + t - 1) * d;
            mask[off..off + d].iter_mut().for_each(|m| *m = 0.0);
            add[off..off + d].copy_from_slice(&inj.vector);
        }
        let m = tape.constant(&[b, t, d], mask)?;
        let a = tape.constant(&[b, t, d], add)?;
        let kept = tape.mul(x, m)?;
        tape.add(kept, a)
    }

    /// Records the forward pass; returns the logits var and the residual
    /// stream after the embedding and after every layer.
    fn record(&self, tape: &mut Tape, vars: &[Var], batch: &TokenBatch, injection: Option<&Injection>) -> Result<(Var, Vec<Var>)> {
        self.check_batch(batch)?;
        let (b, t, d) = (batch.batch(), batch.seq(), self.config.d_model);
        let head = self.head_vars(vars);
        let e = head.embed(tape, batch.ids())?;
        let mut x = tape.reshape(e, &[b, t, d])?;
        let mut stream = Vec::with_capacity(self.layers.len() + 1);
        let maybe_inject = |tape: &mut Tape, x: Var, layer: usize| -> Result<Var> {
            match injection {
                Some(inj) if inj.layer == layer => self.inject(tape, x, batch, inj),
                _ => Ok(x),
            }
        };
        x = maybe_inject(tape, x, 0)?;
        stream.push(x);
        for (li, l) in self.layers.iter().enumerate() {
            match self.config.block_style {
                BlockStyle::Parallel => {
                    let a_in = tape.rms_norm(x, vars[l.attn_norm.0], NORM_EPS)?;
                    let m_in = tape.rms_norm(x, vars[l.mlp_norm.0], NORM_EPS)?;
                    let a = self.attention(tape, vars, l, a_in)?;
                    let m = self.mlp(tape, vars, l, m_in)?;
                    let am = tape.add(a, m)?;
                    x = tape.add(x, am)?;
                }
                BlockStyle::Sequential => {
                    let a_in = tape.rms_norm(x, vars[l.attn_norm.0], NORM_EPS)?;
                    let a = self.attention(tape, vars, l, a_in)?;
                    x = tape.add(x, a)?;
                    let m_in = tape.rms_norm(x, vars[l.mlp_norm.0], NORM_EPS)?;
                    let m = self.mlp(tape, vars, l, m_in)?;
                    x = tape.add(x, m)?;
                }
            }
            x = maybe_inject(tape, x, li + 1)?;
            stream.push(x);
        }
        let y = tape.rms_norm(x, vars[self.final_norm.0], NORM_EPS)?;
        let logits = head.project(tape, y)?;
        Ok((logits, stream))
    }

    fn last_positions(tape: &Tape, v: Var, batch: &TokenBatch, d: usize) -> Matrix {
        let (b, t) = (batch.batch(), batch.seq());
        let src = tape.value(v);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * t + t - 1) * d;
            out.extend_from_slice(&src[off..off + d]);
        }
        Matrix::from_vec(b, d, out).expect("finite hidden state")
    }

    pub fn forward(&self, batch: &TokenBatch, capture: bool) -> Result<ForwardOutput> {
        self.forward_with(batch, capture, None)
    }

    /// Forward pass with an optional hidden-state injection.
    pub fn forward_with(&self, batch: &TokenBatch, capture: bool, injection: Option<&Injection>) -> Result<ForwardOutput> {
        let mut tape = Tape::with_exec(self.exec);
        let vars = self.store.bind(&mut tape);
        let (logits, stream) = self.record(&mut tape, &vars, batch, injection)?;
        let hidden = if capture {
            stream.iter().map(|&v| Self::last_positions(&tape, v, batch, self.config.d_model)).collect()
        } else {
            Vec::new()
        };
        Ok(ForwardOutput { logits: tape.to_tensor(logits), hidden })
    }

    /// Decodes residual-stream states (`n×d`) through the final norm and the
    /// token interface, giving `n×V` logits.
    pub fn readout(&self, hidden: &Matrix) -> Result<Matrix> {
        if hidden.cols() != self.config.d_model {
            return Err(Error::ShapeMismatch(format!("hidden width {} for d_model {}", hidden.cols(), self.config.d_model)));
        }
        let mut tape = Tape::with_exec(self.exec);
        let vars = self.store.bind(&mut tape);
        let h = tape.constant_matrix(hidden);
        let y = tape.rms_norm(h, vars[self.final_norm.0], NORM_EPS)?;
        let logits = self.head_vars(&vars).project(&mut tape, y)?;
        Matrix::from_vec(hidden.rows(), self.config.vocab, tape.value(logits).to_vec())
    }

    /// Records the mean next-token loss on `tape`, binding parameters to `vars`.
    pub fn record_loss(&self, tape: &mut Tape, vars: &[Var], batch: &LmBatch) -> Result<Var> {
        let (logits, _) = self.record(tape, vars, &batch.inputs, None)?;
        tape.cross_entropy_logits(logits, &batch.targets)
    }

    pub fn loss(&self, batch: &LmBatch) -> Result<f64> {
        let mut tape = Tape::with_exec(self.exec);
        let vars = self.store.bind(&mut tape);
        let loss = self.record_loss(&mut tape, &vars, batch)?;
        Ok(tape.scalar(loss))
    }

    /// Averages gradients over `micro` batches, clips them, takes one AdamW
    /// step, re-quantizes, and retracts `z` when it is trainable.
    pub fn train_step(&mut self, micro: &[LmBatch], opt: &mut AdamW, lr: f64, grad_clip: f64) -> Result<StepStats> {
        if micro.is_empty() {
            return Err(Error::ShapeMismatch("train_step needs at least one batch".into()));
        }
        let step = opt.steps_taken();
        self.store.zero_grad();
        let n = micro.len() as f64;
        let mut loss_sum = 0.0;
        for mb in micro {
            let mut tape = Tape::with_exec(self.exec);
            let vars = self.store.bind(&mut tape);
            let loss = self.record_loss(&mut tape, &vars, mb)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            loss_sum += value;
            let scaled = tape.scale(loss, 1.0 / n);
            let grads = tape.backward(scaled)?;
            self.store.accumulate(&grads, &vars)?;
        }
        let grad_norm = clip_grad_norm(&mut self.store, grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(&mut self.store, lr);
        self.quantize();
        if let HeadIds::Pit { z, .. } = self.head {
            if self.store.get(z).requires_grad() {
                let r = retract_matrix(&self.store.get(z).to_matrix())?;
                let t = self.store.get_mut(z);
                t.data_mut().copy_from_slice(r.data());
                t.quantize(self.config.precision);
            }
        }
        Ok(StepStats { loss: loss_sum / n, grad_norm })
    }

    pub fn precision(&self) -> Precision {
        self.config.precision
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamWConfig;

    fn cfg(mode: HeadMode) -> ModelConfig {
        ModelConfig::new(2, 16, 8, 2, 64, 16).unwrap().with_head_mode(mode).with_precision(Precision::F64).with_seed(3)
    }

    #[test]
    fn single_token_shape() {
        let m = ToyTransformer::scratch(cfg(HeadMode::Pit)).unwrap();
        let out = m.forward(&TokenBatch::new(&[vec![5]]).unwrap(), true).unwrap();
        assert_eq!(out.logits.shape(), &[1, 1, 64]);
        assert!(out.logits.data().iter().all(|v| v.is_finite()));
        assert_eq!(out.hidden.len(), 3);
    }

    #[test]
    fn context_and_vocab_checks() {
        let m = ToyTransformer::scratch(cfg(HeadMode::Tt)).unwrap();
        let long = TokenBatch::new(&[vec![1; 17]]).unwrap();
        assert!(matches!(m.forward(&long, false), Err(Error::ContextOverflow { len: 17, context: 16 })));
        let bad = TokenBatch::new(&[vec![64]]).unwrap();
        assert!(matches!(m.forward(&bad, false), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn causality() {
        let m = ToyTransformer::scratch(cfg(HeadMode::Pit)).unwrap();
        let a = TokenBatch::new(&[vec![1, 2, 3, 4, 5, 6]]).unwrap();
        let b = TokenBatch::new(&[vec![1, 2, 3, 40, 5, 6]]).unwrap();
        let la = m.forward(&a, false).unwrap().logits;
        let lb = m.forward(&b, false).unwrap().logits;
        let v = 64;
        assert_eq!(&la.data()[..3 * v], &lb.data()[..3 * v]);
        assert_ne!(&la.data()[3 * v..4 * v], &lb.data()[3 * v..4 * v]);
    }

    #[test]
    fn last_hidden_state_reads_out_to_logits() {
        let m = ToyTransformer::scratch(cfg(HeadMode::Pit)).unwrap();
        let batch = TokenBatch::new(&[vec![9, 8, 7], vec![1, 2, 3]]).unwrap();
        let out = m.forward(&batch, true).unwrap();
        let r = m.readout(out.hidden.last().unwrap()).unwrap();
        for b in 0..2 {
            let off = (b * 3 + 2) * 64;
            for j in 0..64 {
                assert!((r.get(b, j) - out.logits.data()[off + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn memorizes_a_repeated_token() {
        let mut m = ToyTransformer::scratch(cfg(HeadMode::Pit)).unwrap();
        let batch = LmBatch::from_windows(&[vec![7; 9], vec![7; 9]]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let first = m.loss(&batch).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = m.train_step(std::slice::from_ref(&batch), &mut opt, 1e-2, 1.0).unwrap().loss;
        }
        assert!(last < 0.05 * first, "{first} -> {last}");
    }

    #[test]
    fn pit_identity_survives_training_with_trainable_z() {
        let c = cfg(HeadMode::Pit);
        let mut head = PitHead::init_scratch_with(c.vocab, c.d_model, c.seed, c.precision).unwrap();
        head.set_frozen(false);
        let mut m = ToyTransformer::new(c, head.into()).unwrap();
        assert!(m.z_trainable());
        let batch = LmBatch::from_windows(&[vec![1, 5, 9, 13, 2, 6, 10]]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..5 {
            m.train_step(std::slice::from_ref(&batch), &mut opt, 1e-2, 1.0).unwrap();
            let h = m.head().unwrap();
            let p = h.materialize_unembedding().matmul(&h.materialize_embedding()).unwrap();
            assert!(p.distance(&Matrix::identity(16)).unwrap() <= 1e-8);
        }
    }
}
