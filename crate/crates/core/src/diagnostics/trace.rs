use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Injection, TokenBatch, ToyTransformer};

/// Top-k readout of one residual-stream state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceLayer {
    /// 0 is the embedding output; `ℓ` is the output of block `ℓ`.
    pub layer: usize,
    pub top_ids: Vec<usize>,
    pub top_logits: Vec<f64>,
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Decodes the last-position hidden state after every layer through the
/// model's own final norm and token interface.
pub fn transition_trace(model: &ToyTransformer, prompt: &[usize], k: usize) -> Result<Vec<TraceLayer>> {
    transition_trace_with(model, prompt, k, None)
}

pub fn transition_trace_with(model: &ToyTransformer, prompt: &[usize], k: usize, injection: Option<&Injection>) -> Result<Vec<TraceLayer>> {
    if prompt.is_empty() {
        return Err(Error::ShapeMismatch("empty prompt".into()));
    }
    if let Some(inj) = injection {
        if inj.layer > model.config().n_layers {
            return Err(Error::ShapeMismatch(format!(
                "injection layer {} beyond {} layers",
                inj.layer,
                model.config().n_layers
            )));
        }
    }
    let batch = TokenBatch::new(&[prompt.to_vec()])?;
    let out = model.forward_with(&batch, true, injection)?;
    let mut layers = Vec::with_capacity(out.hidden.len());
    for (layer, h) in out.hidden.iter().enumerate() {
        let logits = model.readout(h)?;
        let row = logits.row(0);
        let top_ids = top_k(row, k);
        let top_logits = top_ids.iter().map(|&i| row[i]).collect();
        layers.push(TraceLayer { layer, top_ids, top_logits });
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Precision;
    use crate::model::ModelConfig;
    use crate::pit::{HeadMode, TokenHead};

    fn model(layers: usize) -> ToyTransformer {
        let c = ModelConfig::new(layers, 16, 8, 2, 64, 16).unwrap().with_head_mode(HeadMode::Pit).with_precision(Precision::F64).with_seed(4);
        ToyTransformer::scratch(c).unwrap()
    }

    #[test]
    fn top_k_order() {
        assert_eq!(top_k(&[0.1, 0.5, 0.5, -1.0], 3), vec![1, 2, 0]);
    }

    #[test]
    fn zero_layer_trace_is_the_prediction() {
        let m = model(0);
        let t = transition_trace(&m, &[3, 4, 5], 5).unwrap();
        assert_eq!(t.len(), 1);
        let logits = m.forward(&TokenBatch::new(&[vec![3, 4, 5]]).unwrap(), false).unwrap().logits;
        let last = &logits.data()[2 * 64..3 * 64];
        assert_eq!(t[0].top_ids, top_k(last, 5));
    }

    #[test]
    fn final_layer_matches_greedy_token() {
        let m = model(2);
        let prompt = [10, 20, 30];
        let t = transition_trace(&m, &prompt, 1).unwrap();
        let logits = m.forward(&TokenBatch::new(&[prompt.to_vec()]).unwrap(), false).unwrap().logits;
        let greedy = top_k(&logits.data()[2 * 64..], 1)[0];
        assert_eq!(t.last().unwrap().top_ids[0], greedy);
        assert!(t.iter().all(|l| l.top_ids.len() == 1 && l.top_logits[0].is_finite()));
    }

    #[test]
    fn injected_memory_row_decodes_to_its_token() {
        let m = model(2);
        let TokenHead::Pit(h) = m.head().unwrap() else { unreachable!() };
        let z = h.memory().z();
        // The row of largest norm wins its own readout (Cauchy–Schwarz).
        let t = (0..z.rows())
            .max_by(|&a, &b| {
                let na: f64 = z.row(a).iter().map(|x| x * x).sum();
                let nb: f64 = z.row(b).iter().map(|x| x * x).sum();
                na.total_cmp(&nb)
            })
            .unwrap();
        for layer in 0..=2 {
            let inj = Injection { layer, vector: z.row(t).to_vec() };
            let trace = transition_trace_with(&m, &[1, 2], 3, Some(&inj)).unwrap();
            assert_eq!(trace[layer].top_ids[0], t);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn top_k_is_sorted_prefix(values in proptest::collection::vec(-100.0f64..100.0, 1..60), k in 0usize..70) {
            let idx = top_k(&values, k);
            prop_assert_eq!(idx.len(), k.min(values.len()));
            prop_assert!(idx.windows(2).all(|w| values[w[0]] >= values[w[1]]));
            if let Some(&last) = idx.last() {
                let chosen: std::collections::HashSet<_> = idx.iter().copied().collect();
                prop_assert!((0..values.len()).filter(|i| !chosen.contains(i)).all(|i| values[i] <= values[last]));
            }
        }
    }
}
