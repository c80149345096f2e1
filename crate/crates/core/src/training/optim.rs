use crate::model::ParamStore;
use crate::numerics::{ParamId, Tensor};

/// Adam with bias correction. Moments are kept per parameter tensor and only
/// tensors that receive a gradient in a step are updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    /// Per-tensor update counts for bias correction.
    pub(crate) t: Vec<u64>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; params.len()],
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, id: ParamId, grad: &Tensor, lr: f64) {
        let i = id.0;
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        let p = params.get_mut(id).data_mut();
        for k in 0..p.len() {
            let g = grad.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
}

/// Scales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(c);
        }
    }
    norm
}
