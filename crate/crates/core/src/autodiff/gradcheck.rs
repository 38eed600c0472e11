use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Entries checked per parameter; `None` checks all of them.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-6, max_entries_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|)` over the checked entries.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of `f` against central finite differences for
/// every trainable parameter in `store`.
///
/// `f` receives a fresh tape and the bound parameter vars and must return a
/// scalar loss.
pub fn grad_check<F>(store: &ParamStore, opts: GradCheckOptions, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = s.bind(&mut tape);
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar(loss))
    };

    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut tape = Tape::new();
        let vars = analytic.bind(&mut tape);
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        analytic.accumulate(&grads, &vars)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut out = GradCheck { max_rel_error: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    for pi in 0..store.len() {
        let p = &analytic.params[pi];
        if !p.tensor.requires_grad() {
            continue;
        }
        let n = p.tensor.numel();
        let zeros = vec![0.0; n];
        let grad = p.tensor.grad().unwrap_or(&zeros).to_vec();
        let idx: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let orig = probe.params[pi].tensor.data()[i];
            probe.params[pi].tensor.data_mut()[i] = orig + opts.eps;
            let up = eval(&probe)?;
            probe.params[pi].tensor.data_mut()[i] = orig - opts.eps;
            let down = eval(&probe)?;
            probe.params[pi].tensor.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(1.0);
            out.checked += 1;
            if rel > out.max_rel_error || out.worst_param.is_empty() {
                out.max_rel_error = out.max_rel_error.max(rel);
                out.worst_param = p.name.clone();
                out.worst_index = i;
            }
        }
    }
    Ok(out)
}
