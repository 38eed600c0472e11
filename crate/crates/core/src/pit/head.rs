use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::linalg::{thin_polar, Matrix, Precision};

use super::memory::{retract, SharedTokenMemory};
use super::transform::{strict_lower_len, SpdTransform, LOG_DIAG_CLAMP};
use super::{HeadMode, InitMode};

/// Tape handles for a head's parameters.
#[derive(Debug, Clone, Copy)]
pub enum HeadVars {
    Pit { z: Var, log_diag: Var, strict_lower: Var },
    Tt { e: Var },
}

impl HeadVars {
    /// Records `L` from the log-diagonal and strictly-lower parameters.
    pub fn factor(&self, tape: &mut Tape) -> Result<Option<Var>> {
        match *self {
            HeadVars::Pit { log_diag, strict_lower, .. } => {
                Ok(Some(tape.cholesky_factor(log_diag, strict_lower, LOG_DIAG_CLAMP)?))
            }
            HeadVars::Tt { .. } => Ok(None),
        }
    }

    /// Token embeddings (`ids.len()×d`). For PIT each row solves `e·T = z_t`
    /// with two triangular solves against `L`.
    pub fn embed(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        match *self {
            HeadVars::Pit { z, .. } => {
                let l = self.factor(tape)?.expect("pit factor");
                let rows = tape.row_gather(z, ids)?;
                let cols = tape.transpose(rows)?;
                let y = tape.tri_solve(l, cols, false)?;
                let x = tape.tri_solve(l, y, true)?;
                tape.transpose(x)
            }
            HeadVars::Tt { e } => tape.row_gather(e, ids),
        }
    }

    /// Logits for hidden states `h` (`[.., d]`). PIT computes `((h·L)·Lᵀ)·zᵀ`
    /// and never forms the unembedding.
    pub fn project(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        match *self {
            HeadVars::Pit { z, .. } => {
                let l = self.factor(tape)?.expect("pit factor");
                let hl = tape.matmul(h, l)?;
                let lt = tape.transpose(l)?;
                let g = tape.matmul(hl, lt)?;
                let zt = tape.transpose(z)?;
                tape.matmul(g, zt)
            }
            HeadVars::Tt { e } => {
                let et = tape.transpose(e)?;
                tape.matmul(h, et)
            }
        }
    }
}

/// Pseudo-inverse tied head: `E = z·T⁻¹`, `W_out = T·zᵀ`.
#[derive(Debug, Clone)]
pub struct PitHead {
    memory: SharedTokenMemory,
    transform: SpdTransform,
    mode: InitMode,
    precision: Precision,
}

/// Options for [`PitHead::init_teacher_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TeacherOptions {
    /// Start from `T = H` (the discarded polar factor) instead of `T = I`.
    pub match_teacher_scale: bool,
    pub trainable_z: bool,
    pub precision: Precision,
}

impl PitHead {
    pub fn new(memory: SharedTokenMemory, transform: SpdTransform, mode: InitMode, precision: Precision) -> Result<Self> {
        if memory.dim() != transform.dim() {
            return Err(Error::DimensionMismatch(format!(
                "memory width {} vs transform dimension {}",
                memory.dim(),
                transform.dim()
            )));
        }
        let memory = memory.with_precision(precision)?;
        let transform = transform.quantized(precision);
        Ok(Self { memory, transform, mode, precision })
    }

    /// `z = polar(e0).u`, `T = I`, memory frozen.
    pub fn init_teacher(e0: &Matrix) -> Result<Self> {
        Self::init_teacher_with(e0, TeacherOptions::default())
    }

    pub fn init_teacher_with(e0: &Matrix, opts: TeacherOptions) -> Result<Self> {
        let polar = thin_polar(e0)?;
        let mut memory = SharedTokenMemory::new(polar.u.into_matrix(), true)?;
        memory.set_frozen(!opts.trainable_z);
        let transform = if opts.match_teacher_scale {
            SpdTransform::from_spd(&polar.h)?
        } else {
            SpdTransform::identity(e0.cols())
        };
        Self::new(memory, transform, InitMode::Teacher, opts.precision)
    }

    /// `z = qr(gaussian(v, d, seed)).q`, `T = I`, memory frozen.
    pub fn init_scratch(v: usize, d: usize, seed: u64) -> Result<Self> {
        Self::init_scratch_with(v, d, seed, Precision::default())
    }

    pub fn init_scratch_with(v: usize, d: usize, seed: u64, precision: Precision) -> Result<Self> {
        let memory = SharedTokenMemory::random(v, d, seed)?;
        Self::new(memory, SpdTransform::identity(d), InitMode::Scratch, precision)
    }

    pub fn memory(&self) -> &SharedTokenMemory {
        &self.memory
    }

    pub fn transform(&self) -> &SpdTransform {
        &self.transform
    }

    pub fn mode(&self) -> InitMode {
        self.mode
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn vocab(&self) -> usize {
        self.memory.vocab()
    }

    pub fn dim(&self) -> usize {
        self.memory.dim()
    }

    pub fn set_transform(&mut self, transform: SpdTransform) -> Result<()> {
        if transform.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!("transform of dimension {} for width {}", transform.dim(), self.dim())));
        }
        self.transform = transform.quantized(self.precision);
        Ok(())
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.memory.set_frozen(frozen);
    }

    /// Replaces the memory by the retraction of `z_tilde`.
    pub fn retract_memory(&mut self, z_tilde: &Matrix) -> Result<()> {
        self.memory = retract(&self.memory, z_tilde)?.with_precision(self.precision)?;
        Ok(())
    }

    /// `E = z·T⁻¹`, computed with triangular solves.
    pub fn materialize_embedding(&self) -> Matrix {
        let e = self.transform.right_solve(self.memory.z()).expect("well-posed solve");
        e.with_precision(self.precision)
    }

    /// `W_out = T·zᵀ`.
    pub fn materialize_unembedding(&self) -> Matrix {
        let t = self.transform.materialize();
        let w = t.matmul(&self.memory.z().transpose()).expect("conformant");
        w.with_precision(self.precision)
    }

    /// Head payload size: `V·d + d(d+1)/2`.
    pub fn payload_len(&self) -> usize {
        self.vocab() * self.dim() + self.dim() + strict_lower_len(self.dim())
    }
}

/// Transpose-tied head: `W_out = eᵀ`.
#[derive(Debug, Clone)]
pub struct TtHead {
    e: Matrix,
    precision: Precision,
}

impl TtHead {
    pub fn new(e: Matrix, precision: Precision) -> Self {
        Self { e: e.with_precision(precision), precision }
    }

    /// Orthonormal initialization identical to a scratch PIT memory.
    pub fn init_scratch(v: usize, d: usize, seed: u64, precision: Precision) -> Result<Self> {
        Ok(Self::new(SharedTokenMemory::random(v, d, seed)?.z().clone(), precision))
    }

    pub fn e(&self) -> &Matrix {
        &self.e
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn vocab(&self) -> usize {
        self.e.rows()
    }

    pub fn dim(&self) -> usize {
        self.e.cols()
    }

    pub fn payload_len(&self) -> usize {
        self.e.rows() * self.e.cols()
    }
}

/// Either token interface behind one contract.
#[derive(Debug, Clone)]
pub enum TokenHead {
    Pit(PitHead),
    Tt(TtHead),
}

impl TokenHead {
    pub fn head_mode(&self) -> HeadMode {
        match self {
            TokenHead::Pit(_) => HeadMode::Pit,
            TokenHead::Tt(_) => HeadMode::Tt,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            TokenHead::Pit(h) => h.vocab(),
            TokenHead::Tt(h) => h.vocab(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TokenHead::Pit(h) => h.dim(),
            TokenHead::Tt(h) => h.dim(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            TokenHead::Pit(h) => h.precision(),
            TokenHead::Tt(h) => h.precision(),
        }
    }

    pub fn payload_len(&self) -> usize {
        match self {
            TokenHead::Pit(h) => h.payload_len(),
            TokenHead::Tt(h) => h.payload_len(),
        }
    }

    /// Named parameter tensors in storage order.
    pub fn tensors(&self) -> Vec<(&'static str, Tensor)> {
        match self {
            TokenHead::Pit(h) => vec![
                ("z", Tensor::from_matrix(h.memory.z())),
                ("log_diag", Tensor::new(&[h.dim()], h.transform.log_diag().to_vec()).expect("vector")),
                ("strict_lower", Tensor::new(&[strict_lower_len(h.dim())], h.transform.strict_lower().to_vec()).expect("vector")),
            ],
            TokenHead::Tt(h) => vec![("e", Tensor::from_matrix(&h.e))],
        }
    }

    /// Records the head parameters as tape constants.
    pub fn bind_constants(&self, tape: &mut Tape) -> HeadVars {
        let mut vars = self.tensors().into_iter().map(|(_, t)| tape.leaf(&t));
        match self {
            TokenHead::Pit(_) => HeadVars::Pit {
                z: vars.next().unwrap(),
                log_diag: vars.next().unwrap(),
                strict_lower: vars.next().unwrap(),
            },
            TokenHead::Tt(_) => HeadVars::Tt { e: vars.next().unwrap() },
        }
    }

    /// Embeddings of `ids` as a `len×d` matrix.
    pub fn embed(&self, ids: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let out = vars.embed(&mut tape, ids)?;
        Matrix::from_vec(ids.len(), self.dim(), tape.value(out).to_vec())
    }

    /// Logits for hidden states `h` with last dim `d`; output has last dim `V`.
    pub fn project_logits(&self, h: &Tensor) -> Result<Tensor> {
        if h.shape().last() != Some(&self.dim()) || h.shape().len() < 2 {
            return Err(Error::ShapeMismatch(format!("hidden states {:?} for width {}", h.shape(), self.dim())));
        }
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let hv = tape.leaf(h);
        let out = vars.project(&mut tape, hv)?;
        Ok(tape.to_tensor(out))
    }

    pub fn materialize_embedding(&self) -> Matrix {
        match self {
            TokenHead::Pit(h) => h.materialize_embedding(),
            TokenHead::Tt(h) => h.e.clone(),
        }
    }

    pub fn materialize_unembedding(&self) -> Matrix {
        match self {
            TokenHead::Pit(h) => h.materialize_unembedding(),
            TokenHead::Tt(h) => h.e.transpose(),
        }
    }
}

impl From<PitHead> for TokenHead {
    fn from(h: PitHead) -> Self {
        TokenHead::Pit(h)
    }
}

impl From<TtHead> for TokenHead {
    fn from(h: TtHead) -> Self {
        TokenHead::Tt(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pinv_residual(h: &TokenHead) -> f64 {
        let p = h.materialize_unembedding().matmul(&h.materialize_embedding()).unwrap();
        p.distance(&Matrix::identity(h.dim())).unwrap()
    }

    fn random_pit(v: usize, d: usize, seed: u64) -> PitHead {
        let mut h = PitHead::init_scratch(v, d, seed).unwrap();
        let ld = Matrix::gaussian(1, d, seed + 1).scale(0.5).into_data();
        let sl = Matrix::gaussian(1, strict_lower_len(d), seed + 2).scale(0.3).into_data();
        h.set_transform(SpdTransform::from_params(ld, sl).unwrap()).unwrap();
        h
    }

    #[test]
    fn teacher_from_orthonormal_keeps_it() {
        let e0 = SharedTokenMemory::random(12, 3, 5).unwrap().z().clone();
        let h = PitHead::init_teacher(&e0).unwrap();
        assert!(h.memory().z().distance(&e0).unwrap() < 1e-12);
        assert_eq!(h.transform(), &SpdTransform::identity(3));
        assert!(h.materialize_embedding().distance(&e0).unwrap() < 1e-12);
        assert!(h.memory().frozen());
    }

    #[test]
    fn teacher_from_diagonal() {
        let e0 = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let h = PitHead::init_teacher(&e0).unwrap();
        let want = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(h.memory().z().distance(&want).unwrap() < 1e-12);
    }

    #[test]
    fn teacher_random_is_pinv_consistent() {
        let h: TokenHead = PitHead::init_teacher(&Matrix::gaussian(100, 8, 3)).unwrap().into();
        assert!(pinv_residual(&h) <= 1e-6);
    }

    #[test]
    fn teacher_scale_matching_sets_t_to_h() {
        let e0 = Matrix::gaussian(40, 4, 8);
        let opts = TeacherOptions { match_teacher_scale: true, ..Default::default() };
        let h = PitHead::init_teacher_with(&e0, opts).unwrap();
        let hmat = thin_polar(&e0).unwrap().h;
        assert!(h.transform().materialize().distance(&hmat).unwrap() < 1e-10 * hmat.frobenius_norm());
        assert!(h.materialize_unembedding().distance(&e0.transpose()).unwrap() < 1e-9 * e0.frobenius_norm());
    }

    #[test]
    fn scratch_is_deterministic_and_consistent() {
        let a = PitHead::init_scratch(50, 4, 1).unwrap();
        let b = PitHead::init_scratch(50, 4, 1).unwrap();
        assert_eq!(a.memory().z(), b.memory().z());
        assert!(a.memory().z().orthonormality_defect() <= 1e-6);
        assert!(pinv_residual(&a.into()) <= 1e-6);
    }

    #[test]
    fn embed_hand_solve() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let mem = SharedTokenMemory::new(z, true).unwrap();
        let t = SpdTransform::from_params(vec![2f64.ln(), 0.0], vec![0.0]).unwrap();
        let h: TokenHead = PitHead::new(mem, t, InitMode::Scratch, Precision::F64).unwrap().into();
        let e = h.embed(&[0]).unwrap();
        assert!((e.get(0, 0) - 0.25).abs() < 1e-15 && e.get(0, 1) == 0.0);
        let logits = h.project_logits(&Tensor::new(&[1, 2], vec![0.25, 0.0]).unwrap()).unwrap();
        assert!((logits.data()[0] - 1.0).abs() < 1e-15);
        assert!(logits.data()[1].abs() < 1e-15);
    }

    #[test]
    fn embed_rows_satisfy_metric_equation() {
        let h = random_pit(30, 5, 4);
        let ids = [0, 7, 29, 7];
        let e = TokenHead::Pit(h.clone()).embed(&ids).unwrap();
        let et = e.matmul(&h.transform().materialize()).unwrap();
        let zr = h.memory().z().select_rows(&ids).unwrap();
        assert!(et.distance(&zr).unwrap() < 1e-10);
        // e_t·T·z_tᵀ = ‖z_t‖²
        for (r, &t) in ids.iter().enumerate() {
            let zt = h.memory().z().row(t);
            let dot: f64 = et.row(r).iter().zip(zt).map(|(a, b)| a * b).sum();
            let norm2: f64 = zt.iter().map(|a| a * a).sum();
            assert!((dot - norm2).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_transform_logits_peak_at_token() {
        let h = PitHead::init_scratch(20, 4, 2).unwrap();
        let z = h.memory().z().clone();
        let norms: Vec<f64> = (0..20).map(|t| z.row(t).iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
        let th: TokenHead = h.into();
        for t in 0..20 {
            let hid = Tensor::new(&[1, 4], z.row(t).to_vec()).unwrap();
            let l = th.project_logits(&hid).unwrap();
            assert!((l.data()[t] - norms[t] * norms[t]).abs() < 1e-12);
            // Cauchy–Schwarz bounds every other logit.
            for s in 0..20 {
                assert!(l.data()[s].abs() <= norms[s] * norms[t] + 1e-12);
            }
        }
        // The row of largest norm therefore wins its own readout.
        let t = (0..20).max_by(|&a, &b| norms[a].total_cmp(&norms[b])).unwrap();
        let l = th.project_logits(&Tensor::new(&[1, 4], z.row(t).to_vec()).unwrap()).unwrap();
        let arg = (0..20).max_by(|&a, &b| l.data()[a].total_cmp(&l.data()[b])).unwrap();
        assert_eq!(arg, t);
        let zero = th.project_logits(&Tensor::zeros(&[2, 3, 4])).unwrap();
        assert_eq!(zero.shape(), &[2, 3, 20]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_head_pinv_fp32_and_fp64() {
        let h64 = random_pit(64, 8, 9);
        assert!(pinv_residual(&h64.clone().into()) <= 1e-8);
        let h32 = PitHead::new(h64.memory().clone(), h64.transform().clone(), InitMode::Scratch, Precision::F32).unwrap();
        assert!(pinv_residual(&h32.into()) <= 1e-5);
    }

    #[test]
    fn two_step_logits_match_materialized_product() {
        let h = random_pit(25, 4, 11);
        let th: TokenHead = h.into();
        let hid = Tensor::new(&[2, 3, 4], Matrix::gaussian(1, 24, 12).into_data()).unwrap();
        let a = th.project_logits(&hid).unwrap();
        let b = hid.to_matrix().matmul(&th.materialize_unembedding()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0));
        }
    }

    #[test]
    fn reduction_to_transpose_tying() {
        let pit = PitHead::init_scratch(40, 6, 5).unwrap();
        let tt = TtHead::new(pit.memory().z().clone(), Precision::F64);
        let (p, t): (TokenHead, TokenHead) = (pit.into(), tt.into());
        let ids = [3, 1, 39];
        let d = p.embed(&ids).unwrap().distance(&t.embed(&ids).unwrap()).unwrap();
        assert!(d <= 1e-12);
        let hid = Tensor::new(&[3, 6], Matrix::gaussian(3, 6, 1).into_data()).unwrap();
        let (lp, lt) = (p.project_logits(&hid).unwrap(), t.project_logits(&hid).unwrap());
        assert!(lp.data().iter().zip(lt.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn scaling_metric_scales_logits_and_keeps_argmax() {
        let h = random_pit(30, 4, 21);
        let mut scaled = h.clone();
        scaled.set_transform(h.transform().scaled(2.5)).unwrap();
        let hid = Tensor::new(&[5, 4], Matrix::gaussian(5, 4, 22).into_data()).unwrap();
        let a = TokenHead::Pit(h).project_logits(&hid).unwrap();
        let b = TokenHead::Pit(scaled).project_logits(&hid).unwrap();
        for (ra, rb) in a.data().chunks(30).zip(b.data().chunks(30)) {
            let am = |r: &[f64]| r.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
            assert_eq!(am(ra), am(rb));
            for (x, y) in ra.iter().zip(rb) {
                assert!((2.5 * x - y).abs() < 1e-10 * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn out_of_range_token() {
        let h: TokenHead = PitHead::init_scratch(10, 2, 0).unwrap().into();
        assert!(matches!(h.embed(&[10]), Err(Error::TokenOutOfRange { id: 10, vocab: 10 })));
    }

    #[test]
    fn retract_memory_requires_thaw() {
        let mut h = PitHead::init_scratch(10, 2, 0).unwrap();
        let z = h.memory().z().scale(3.0);
        assert!(matches!(h.retract_memory(&z), Err(Error::FrozenMemory)));
        h.set_frozen(false);
        h.retract_memory(&z).unwrap();
        assert!(h.memory().orthonormality_defect() <= 1e-8);
    }
}
