use crate::autograd::ParamStore;
use crate::tensor::Matrix;

/// Adam with bias correction. Missing gradients count as zero.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|(_, _, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update using `grads[i] * scale` for parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Matrix>], scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let grad = grads.get(i).and_then(Option::as_ref);
            let value = params.get_mut(id);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for j in 0..value.len() {
                let g = grad.map_or(0.0, |g| g.data()[j] * scale);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                value.data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
