use super::value::Tensor;
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place (each tensor is replaced by a new buffer).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "adamw: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let updated = p
                .data()
                .iter()
                .zip(g.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&w, &g), (m, v))| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let adam = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                    w - self.lr * (adam + self.weight_decay * w)
                })
                .collect();
            *p = Tensor::from_parts(p.shape().to_vec(), updated);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut params = vec![Tensor::vector(vec![0.1, -2.0, 3.5])];
        let before = params.clone();
        let mut opt = AdamW::new(0.0);
        opt.step(&mut params, &[Tensor::vector(vec![1.0, 1.0, -1.0])])
            .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut opt = AdamW::new(0.01);
        opt.weight_decay = 0.0;
        opt.step(&mut params, &[Tensor::vector(vec![3.0, -0.5])])
            .unwrap();
        let p = params[0].data();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::vector(vec![5.0])];
        let mut opt = AdamW::new(0.1);
        opt.weight_decay = 0.0;
        for _ in 0..500 {
            let g = Tensor::vector(vec![2.0 * (params[0].data()[0] - 1.0)]);
            opt.step(&mut params, &[g]).unwrap();
        }
        assert!((params[0].data()[0] - 1.0).abs() < 1e-2);
    }
}
