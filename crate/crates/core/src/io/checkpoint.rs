//! `PITC` checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PITC"            magic
//! u32               format version (1)
//! u8                head mode (0 = tt, 1 = pit)
//! u8                init mode (0 = scratch, 1 = teacher)
//! u8                flags (bit 0 head-only, bit 1 trainable z)
//! u8                reserved, 0
//! [u8; 32]          SHA-256 of the config text
//! u32 + bytes       config text (UTF-8, canonical `key = value` form)
//! u32               tensor count
//! per tensor:       u16 name length, name, u8 dtype (0 = f32), u8 ndim,
//!                   u64 × ndim shape, u64 byte offset into the payload
//! payload           row-major f32 values
//! ```
//!
//! PIT heads are stored as `z`, `log_diag` and `strict_lower`; the embedding
//! and unembedding matrices are rebuilt on load and never written.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::atomic::{f32_payload, read_f32s, write_atomic, Reader};
use super::RunConfig;
use crate::autodiff::{numel, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Precision};
use crate::model::{param_specs, ToyTransformer};
use crate::pit::{retract_matrix, HeadMode, InitMode, PitHead, SharedTokenMemory, SpdTransform, TokenHead, TtHead, MEMORY_TOL};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PITC";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
/// Stored memories with a defect above this are rejected on load.
pub const Z_REPAIR_LIMIT: f64 = 1e-2;

const FLAG_HEAD_ONLY: u8 = 1;
const FLAG_Z_TRAINABLE: u8 = 2;

/// One row of the tensor table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub head_mode: HeadMode,
    pub init_mode: InitMode,
    pub head_only: bool,
    pub z_trainable: bool,
    pub config: RunConfig,
    pub tensors: Vec<(String, Tensor)>,
    /// `‖zᵀz − I‖_F` as stored, before any repair on load.
    pub stored_z_defect: Option<f64>,
}

fn head_mode_code(m: HeadMode) -> u8 {
    match m {
        HeadMode::Tt => 0,
        HeadMode::Pit => 1,
    }
}

fn init_mode_code(m: InitMode) -> u8 {
    match m {
        InitMode::Scratch => 0,
        InitMode::Teacher => 1,
    }
}

pub fn config_digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

impl Checkpoint {
    /// Full-model checkpoint. `config` is stored verbatim; its model fields
    /// should describe `model`.
    pub fn from_model(model: &ToyTransformer, config: &RunConfig) -> Self {
        let mut config = config.clone();
        config.head_mode = model.config().head_mode;
        config.init_mode = model.init_mode();
        config.trainable_z = model.z_trainable();
        Self {
            head_mode: model.config().head_mode,
            init_mode: model.init_mode(),
            head_only: false,
            z_trainable: model.z_trainable(),
            config,
            tensors: model.store().iter().map(|p| (p.name.clone(), p.tensor.clone())).collect(),
            stored_z_defect: None,
        }
    }

    /// Checkpoint holding only the token interface.
    pub fn from_head(head: &TokenHead, config: &RunConfig) -> Self {
        let (init_mode, z_trainable) = match head {
            TokenHead::Pit(h) => (h.mode(), !h.memory().frozen()),
            TokenHead::Tt(_) => (InitMode::Scratch, false),
        };
        let mut config = config.clone();
        config.head_mode = head.head_mode();
        config.init_mode = init_mode;
        config.trainable_z = z_trainable;
        config.vocab = head.vocab();
        config.d_model = head.dim();
        Self {
            head_mode: head.head_mode(),
            init_mode,
            head_only: true,
            z_trainable,
            config,
            tensors: head.tensors().into_iter().map(|(n, t)| (format!("head.{n}"), t)).collect(),
            stored_z_defect: None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The tensor table as it is (or would be) written.
    pub fn table(&self) -> Vec<TensorEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect()
    }

    /// Scalars stored for the token interface.
    pub fn head_payload_len(&self) -> usize {
        self.tensors.iter().filter(|(n, _)| n.starts_with("head.")).map(|(_, t)| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(head_mode_code(self.head_mode));
        out.push(init_mode_code(self.init_mode));
        let mut flags = 0;
        if self.head_only {
            flags |= FLAG_HEAD_ONLY;
        }
        if self.z_trainable {
            flags |= FLAG_Z_TRAINABLE;
        }
        out.push(flags);
        out.push(0);
        out.extend_from_slice(&config_digest(&text));
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for e in self.table() {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for &s in &e.shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.offset.to_le_bytes());
        }
        for (_, t) in &self.tensors {
            f32_payload(t.data(), &mut out);
        }
        out
    }

    /// Parses and validates a checkpoint. A stored `z` whose orthonormality
    /// defect exceeds the memory tolerance but not [`Z_REPAIR_LIMIT`] is
    /// retracted; anything further off is rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(m);
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let head_mode = match r.u8()? {
            0 => HeadMode::Tt,
            1 => HeadMode::Pit,
            x => return Err(fmt(format!("unknown head mode {x}"))),
        };
        let init_mode = match r.u8()? {
            0 => InitMode::Scratch,
            1 => InitMode::Teacher,
            x => return Err(fmt(format!("unknown init mode {x}"))),
        };
        let flags = r.u8()?;
        if flags & !(FLAG_HEAD_ONLY | FLAG_Z_TRAINABLE) != 0 {
            return Err(fmt(format!("unknown flags {flags:#x}")));
        }
        r.take(1)?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| fmt("config text is not UTF-8".into()))?;
        if config_digest(text) != digest {
            return Err(fmt("config digest mismatch".into()));
        }
        let config = RunConfig::parse(text)?;

        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| fmt("tensor name is not UTF-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(fmt(format!("tensor {name}: unsupported dtype {dtype}")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|s| s as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            table.push(TensorEntry { name, shape, offset });
        }
        let payload = &bytes[r.pos()..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(table.len());
        for e in table {
            if e.offset != expected {
                return Err(fmt(format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
            }
            let len = 4 * e.numel() as u64;
            let end = expected + len;
            if end > payload.len() as u64 {
                return Err(fmt(format!("tensor {} runs past the payload", e.name)));
            }
            let data = read_f32s(&payload[expected as usize..end as usize]);
            expected = end;
            if tensors.iter().any(|(n, _): &(String, Tensor)| *n == e.name) {
                return Err(fmt(format!("duplicate tensor {}", e.name)));
            }
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        if expected != payload.len() as u64 {
            return Err(fmt(format!("{} trailing payload bytes", payload.len() as u64 - expected)));
        }

        let mut ck = Self {
            head_mode,
            init_mode,
            head_only: flags & FLAG_HEAD_ONLY != 0,
            z_trainable: flags & FLAG_Z_TRAINABLE != 0,
            config,
            tensors,
            stored_z_defect: None,
        };
        ck.check_head_tensors()?;
        ck.repair_memory()?;
        Ok(ck)
    }

    fn check_head_tensors(&self) -> Result<()> {
        let names: &[&str] = match self.head_mode {
            HeadMode::Pit => &["head.z", "head.log_diag", "head.strict_lower"],
            HeadMode::Tt => &["head.e"],
        };
        for n in names {
            if self.tensor(n).is_none() {
                return Err(Error::Format(format!("{} checkpoint is missing {n}", self.head_mode)));
            }
        }
        Ok(())
    }

    fn repair_memory(&mut self) -> Result<()> {
        if self.head_mode != HeadMode::Pit {
            return Ok(());
        }
        let idx = self.tensors.iter().position(|(n, _)| n == "head.z").expect("checked");
        let z = self.tensors[idx].1.to_matrix();
        if z.rows() <= z.cols() {
            return Err(Error::Format(format!("memory shape {}x{} is not tall", z.rows(), z.cols())));
        }
        let defect = z.orthonormality_defect();
        self.stored_z_defect = Some(defect);
        if !defect.is_finite() || defect > Z_REPAIR_LIMIT {
            return Err(Error::NotOrthonormal { defect, tolerance: Z_REPAIR_LIMIT });
        }
        if defect > MEMORY_TOL {
            let fixed = retract_matrix(&z)?.with_precision(Precision::F32);
            let requires_grad = self.tensors[idx].1.requires_grad();
            let mut t = Tensor::from_matrix(&fixed);
            t.set_requires_grad(requires_grad);
            self.tensors[idx].1 = t;
        }
        Ok(())
    }

    /// Writes atomically via a temp file and rename.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.tensor(name).ok_or_else(|| Error::Format(format!("missing {name}")))?;
        if t.shape().len() != 2 {
            return Err(Error::Format(format!("{name} has shape {:?}", t.shape())));
        }
        Ok(t.to_matrix())
    }

    /// Rebuilds the token interface.
    pub fn head(&self) -> Result<TokenHead> {
        let precision = self.config.precision;
        match self.head_mode {
            HeadMode::Pit => {
                let memory = SharedTokenMemory::new(self.matrix("head.z")?, !self.z_trainable)?;
                let vec = |n: &str| self.tensor(n).map(|t| t.data().to_vec()).unwrap_or_default();
                let transform = SpdTransform::from_params(vec("head.log_diag"), vec("head.strict_lower"))
                    .map_err(|e| Error::Format(format!("transform: {e}")))?;
                Ok(PitHead::new(memory, transform, self.init_mode, precision)?.into())
            }
            HeadMode::Tt => Ok(TtHead::new(self.matrix("head.e")?, precision).into()),
        }
    }

    /// Rebuilds the full model. Fails on head-only checkpoints.
    pub fn model(&self) -> Result<ToyTransformer> {
        if self.head_only {
            return Err(Error::HeadOnlyCheckpoint);
        }
        let config = self.config.model_config()?;
        let mut store = ParamStore::new();
        for spec in param_specs(&config) {
            let t = self
                .tensor(&spec.name)
                .ok_or_else(|| Error::Format(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!("parameter {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
            let mut t = Tensor::new(t.shape(), t.data().to_vec())?;
            t.set_requires_grad(spec.name != "head.z" || self.z_trainable);
            store.insert(&spec.name, t, spec.decay)?;
        }
        if store.len() != self.tensors.len() {
            return Err(Error::Format(format!("{} tensors stored, model has {}", self.tensors.len(), store.len())));
        }
        let mut model = ToyTransformer::from_store(config, self.init_mode, store)?;
        model.quantize();
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TokenBatch};

    fn small(mode: HeadMode) -> (ToyTransformer, RunConfig) {
        let rc = RunConfig::parse(&format!(
            "n_layers = 1\nd_model = 16\nhead_dim = 8\ngqa_ratio = 2\nvocab = 40\ncontext = 8\nhead_mode = {mode}\nseed = 3"
        ))
        .unwrap();
        let m = ToyTransformer::scratch(rc.model_config().unwrap()).unwrap();
        (m, rc)
    }

    fn logits(m: &ToyTransformer) -> Vec<f64> {
        let b = TokenBatch::new(&[vec![1, 5, 7, 39, 0]]).unwrap();
        m.forward(&b, false).unwrap().logits.data().to_vec()
    }

    #[test]
    fn model_roundtrip_is_bit_identical() {
        for mode in [HeadMode::Pit, HeadMode::Tt] {
            let (m, rc) = small(mode);
            let ck = Checkpoint::from_model(&m, &rc);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back.config, ck.config);
            let m2 = back.model().unwrap();
            assert_eq!(logits(&m), logits(&m2));
            assert_eq!(back.to_bytes(), ck.to_bytes());
        }
    }

    #[test]
    fn head_payload_sizes() {
        let (pit, rc) = small(HeadMode::Pit);
        let ck = Checkpoint::from_model(&pit, &rc);
        assert_eq!(ck.head_payload_len(), 40 * 16 + 16 * 17 / 2);
        let (tt, rc) = small(HeadMode::Tt);
        let ck = Checkpoint::from_model(&tt, &rc);
        assert_eq!(ck.head_payload_len(), 40 * 16);
        assert!(ck.table().iter().all(|e| e.shape != [16, 40]));
    }

    #[test]
    fn header_layout() {
        let (m, rc) = small(HeadMode::Pit);
        let b = Checkpoint::from_model(&m, &rc).to_bytes();
        assert_eq!(&b[..4], b"PITC");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(b[8], 1);
        assert_eq!(b[9], 0);
        assert_eq!(b[10], 0);
        let text = rc.to_text();
        assert_eq!(&b[12..44], &config_digest(&text));
        let len = u32::from_le_bytes(b[44..48].try_into().unwrap()) as usize;
        assert_eq!(&b[48..48 + len], text.as_bytes());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let (m, rc) = small(HeadMode::Tt);
        let b = Checkpoint::from_model(&m, &rc).to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 4]).is_err());
        let mut d = b.clone();
        d[50] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&d), Err(Error::Format(_))));
        let mut v = b.clone();
        v[4] = 9;
        assert!(Checkpoint::from_bytes(&v).is_err());
    }

    fn with_z(z: Matrix) -> Vec<u8> {
        let head: TokenHead = PitHead::init_scratch(12, 3, 1).unwrap().into();
        let mut ck = Checkpoint::from_head(&head, &RunConfig::default());
        ck.tensors[0].1 = Tensor::from_matrix(&z);
        ck.to_bytes()
    }

    #[test]
    fn loader_repairs_or_rejects_memory() {
        let z = SharedTokenMemory::random(12, 3, 1).unwrap().z().clone();
        let ok = Checkpoint::from_bytes(&with_z(z.clone())).unwrap();
        assert!(ok.stored_z_defect.unwrap() <= 1e-6);

        let bent = z.add(&Matrix::gaussian(12, 3, 2).scale(1e-3)).unwrap();
        assert!(bent.orthonormality_defect() > 1e-4 && bent.orthonormality_defect() <= 1e-2);
        let fixed = Checkpoint::from_bytes(&with_z(bent)).unwrap();
        let head = fixed.head().unwrap();
        let TokenHead::Pit(p) = head else { panic!() };
        assert!(p.memory().orthonormality_defect() <= 1e-6);

        let broken = z.scale(1.5);
        assert!(matches!(Checkpoint::from_bytes(&with_z(broken)), Err(Error::NotOrthonormal { .. })));
    }

    #[test]
    fn head_only_refuses_model() {
        let head: TokenHead = PitHead::init_scratch_with(12, 4, 1, Precision::F32).unwrap().into();
        let ck = Checkpoint::from_head(&head, &RunConfig::default());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.head_only);
        assert!(matches!(back.model(), Err(Error::HeadOnlyCheckpoint)));
        let h = back.head().unwrap();
        assert_eq!(h.materialize_embedding().data(), head.materialize_embedding().data());
    }

    #[test]
    fn atomic_write_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ck.pitc");
        let cfg = ModelConfig::new(1, 8, 4, 1, 20, 4).unwrap();
        let m = ToyTransformer::scratch(cfg).unwrap();
        let mut rc = RunConfig::default();
        rc.n_layers = 1;
        rc.d_model = 8;
        rc.head_dim = 4;
        rc.gqa_ratio = 1;
        rc.vocab = 20;
        rc.context = 4;
        Checkpoint::from_model(&m, &rc).write(&p).unwrap();
        let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert!(Checkpoint::read(&p).unwrap().model().is_ok());
    }
}
