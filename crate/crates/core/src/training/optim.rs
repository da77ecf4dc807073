//! Adam with bias correction over the trainable adapters of a stack.

use ndarray::{Array2, Zip};

use crate::prefix::{HierarchicalPrefixStack, Slot, StackGrads};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; call once per update before [`Adam::update`].
    pub fn tick(&mut self) {
        self.step += 1;
    }

    /// Updates tensor `index` in place with the current step's bias correction.
    pub fn update(&mut self, index: usize, params: &mut Array2<f64>, grad: &Array2<f64>) {
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        if self.moments.len() <= index {
            self.moments.resize_with(index + 1, || None);
        }
        let (m, v) = self.moments[index]
            .get_or_insert_with(|| (Array2::zeros(grad.raw_dim()), Array2::zeros(grad.raw_dim())));
        Zip::from(params).and(m).and(v).and(grad).for_each(|p, m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
    }

    /// One update of a stack. Frozen adapters and slots without a gradient
    /// are left untouched.
    pub fn step(&mut self, stack: &mut HierarchicalPrefixStack, grads: &StackGrads) {
        self.tick();
        for (i, slot) in Slot::ALL.into_iter().enumerate() {
            let Some(adapter) = stack.adapter_mut(slot) else { continue };
            if !adapter.trainable {
                continue;
            }
            let Some(g) = grads.get(slot) else { continue };
            self.update(i, &mut adapter.params, g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::prefix::init_stage1;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = ModelConfig::new(16, 4, 2, 1, 4);
        let mut stack = init_stage1(1, &cfg, 0).unwrap();
        let before = stack.alpha.params.clone();
        let mut g = StackGrads::default();
        g.set(Slot::Alpha, Array2::from_elem(before.raw_dim(), 2.5));
        g.set(Slot::Beta, Array2::from_elem(before.raw_dim(), -1.0));
        stack.beta.trainable = false;
        let beta_before = stack.beta.params.clone();
        let mut adam = Adam::new(0.01);
        adam.step(&mut stack, &g);
        for (a, b) in stack.alpha.params.iter().zip(before.iter()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert_eq!(stack.beta.params, beta_before);
        assert_eq!(adam.steps(), 1);
    }
}
