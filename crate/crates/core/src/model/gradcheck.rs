use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datakit::Batch;
use crate::error::Result;
use crate::numerics::{relative_error, Graph, Tensor};

use super::network::Model;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub coordinates: usize,
}

fn total_nll(model: &Model, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let out = model.forward_nll(&mut g, b)?;
        total += g.value(out.total).data()[0];
    }
    Ok(total)
}

/// Compares reverse-mode gradients of the summed batch NLL with central
/// differences on up to `per_param` randomly chosen coordinates of every
/// parameter tensor.
pub fn check_model_gradients(
    model: &Model,
    batches: &[Batch],
    per_param: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut analytic: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, _, t)| Tensor::zeros(t.shape()))
        .collect();
    for b in batches {
        let mut g = Graph::new();
        let out = model.forward_nll(&mut g, b)?;
        let grads = g.backward(out.total)?;
        for (id, _, t) in model.params().iter() {
            analytic[id.0].add_assign(&grads.param(id, t.shape()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let n = model.params().get(id).len();
        for i in sample(&mut rng, n, per_param.min(n)) {
            let orig = probe.params().get(id).data()[i];
            probe.params_mut().get_mut(id).data_mut()[i] = orig + eps;
            let plus = total_nll(&probe, batches)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig - eps;
            let minus = total_nll(&probe, batches)?;
            probe.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.0].data()[i];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst_param = format!("{}[{i}]", model.params().name(id));
            }
        }
    }
    Ok(report)
}
