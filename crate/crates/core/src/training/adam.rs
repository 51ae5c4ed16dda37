use crate::numerics::{ModelParams, Real};

/// Adam with bias correction. Moment buffers follow the parameter
/// registry order and are created on the first step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr: T::from_f64_lossy(lr),
            beta1: T::from_f64_lossy(beta1),
            beta2: T::from_f64_lossy(beta2),
            eps: T::from_f64_lossy(eps),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Parameters without a gradient still decay their moments.
    pub fn step(&mut self, params: &mut ModelParams<T>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (k, p) in params.iter_mut().enumerate() {
            let zeros;
            let grad = match p.value.grad() {
                Some(g) => g.to_vec(),
                None => {
                    zeros = vec![T::zero(); p.value.len()];
                    zeros
                }
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p.value.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.value.zero_grad();
        }
    }
}
