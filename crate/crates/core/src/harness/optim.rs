use crate::numeric::{ParamStore, Scalar, Tensor};

/// Linear warmup to `peak`, then linear decay to zero at `total` steps.
/// `step` counts from 0.
pub fn learning_rate(peak: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let left = total.saturating_sub(step) as f64 / (total - warmup) as f64;
    peak * left.max(0.0)
}

/// Layer-norm scales and shifts are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.contains("norm") && (name.ends_with(".gamma") || name.ends_with(".beta")))
}

#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u32,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ParamStore<S>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = |p: &crate::numeric::Parameter<S>| Tensor::zeros(p.value.shape());
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One decoupled-weight-decay Adam update from the stored gradients.
    pub fn step(&mut self, params: &mut ParamStore<S>, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let wd = if decays(&p.name) { self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = p.gradient.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = g[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = S::lit(mj);
                v[j] = S::lit(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                let wj = w[j].as_f64();
                w[j] = S::lit(wj - lr * (update + wd * wj));
            }
        }
    }
}

/// Scales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamStore<S>, max_norm: f64) -> f64 {
    let norm = params.grad_norm().as_f64();
    if norm > max_norm {
        let s = S::lit(max_norm / norm);
        for p in params.iter_mut() {
            for g in p.gradient.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}
