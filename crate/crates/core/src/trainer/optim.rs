use crate::nncore::ModelParams;
use crate::Scalar;

/// Adam with decoupled weight decay.
pub struct AdamW<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u32,
    m: ModelParams<S>,
    v: ModelParams<S>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &ModelParams<S>, lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &ModelParams<S>) {
        self.step += 1;
        let b1 = S::c(self.beta1);
        let b2 = S::c(self.beta2);
        let one = S::one();
        let c1 = one / (one - S::c(self.beta1.powi(self.step as i32)));
        let c2 = one / (one - S::c(self.beta2.powi(self.step as i32)));
        let lr = S::c(self.lr);
        let wd = S::c(self.weight_decay);
        let eps = S::c(self.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in tensors {
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * *g;
                *v = b2 * *v + (one - b2) * *g * *g;
                let update = (*m * c1) / ((*v * c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ModelConfig;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let c = ModelConfig {
            num_items: 10,
            hidden_dim: 8,
            num_heads: 2,
            max_len: 8,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::<f32>::init(&c);
        let before = p.clone();
        let zeros = p.zeros_like();
        let mut opt = AdamW::new(&p, 1e-3, (0.9, 0.999), 0.0);
        for _ in 0..5 {
            opt.step(&mut p, &zeros);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let c = ModelConfig {
            num_items: 4,
            hidden_dim: 4,
            num_heads: 1,
            max_len: 4,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::<f64>::zeros(&c);
        let mut g = p.zeros_like();
        g.head_b.data_mut()[0] = 0.5;
        let mut opt = AdamW::new(&p, 0.01, (0.9, 0.999), 0.0);
        opt.step(&mut p, &g);
        assert!((p.head_b.data()[0] + 0.01).abs() < 1e-9);
    }
}
