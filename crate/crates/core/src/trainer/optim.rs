use crate::model::{Network, Real};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(network: &Network<T>, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = network.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameters without a gradient and
    /// without decay stay exactly unchanged.
    pub fn step<T: Real>(&mut self, network: &mut Network<T>, grads: &Network<T>, lr: f64) {
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (ti, param) in network.tensors_mut().into_iter().enumerate() {
            let g = grads[ti].data;
            let (m, v) = (&mut self.first[ti], &mut self.second[ti]);
            for k in 0..param.data.len() {
                let gk = g[k].to_f64().unwrap();
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mut update = (m[k] / bias1) / ((v[k] / bias2).sqrt() + self.eps);
                let p = param.data[k].to_f64().unwrap();
                if param.decay {
                    update += self.weight_decay * p;
                }
                if update != 0.0 {
                    param.data[k] = T::from(p - lr * update).unwrap();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let config = ModelConfig::default();
        let mut net = Network::<f64>::init(&config, 3, 2, 0).unwrap();
        let before = net.clone();
        let mut grads = net.zeros_like();
        grads.dictionary.part_components[[0, 0]] = 3.0;
        grads.dictionary.part_components[[1, 0]] = -0.5;
        let mut opt = AdamW::new(&net, 0.0);
        opt.step(&mut net, &grads, 0.01);
        let d = &net.dictionary.part_components - &before.dictionary.part_components;
        assert!((d[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((d[[1, 0]] - 0.01).abs() < 1e-9);
        assert_eq!(d[[2, 0]], 0.0);
        assert_eq!(net.projections, before.projections);
    }

    #[test]
    fn decay_skips_queries_and_biases() {
        let config = ModelConfig::default();
        let mut net = Network::<f64>::init(&config, 3, 2, 0).unwrap();
        let before = net.clone();
        let grads = net.zeros_like();
        let mut opt = AdamW::new(&net, 0.05);
        opt.step(&mut net, &grads, 0.1);
        assert_eq!(net.projections[0].queries, before.projections[0].queries);
        assert_eq!(net.part_ffn[0].b1, before.part_ffn[0].b1);
        let ratio = net.dictionary.part_components[[0, 0]] / before.dictionary.part_components[[0, 0]];
        assert!((ratio - (1.0 - 0.1 * 0.05)).abs() < 1e-12);
    }
}
