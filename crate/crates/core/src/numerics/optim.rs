use super::{ParamStore, Real};

/// Linearly decaying learning rate, reaching zero after `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LinearDecay {
    pub base: f64,
    pub total_steps: usize,
}

impl LinearDecay {
    pub fn new(base: f64, total_steps: usize) -> Self {
        LinearDecay { base, total_steps }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.base * (1.0 - frac)
    }
}

/// Adam over the trainable tensors of one store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .iter()
            .map(|(_, t)| (vec![T::zero(); t.numel()], vec![T::zero(); t.numel()]))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Gradients are left in
    /// place; callers zero them before the next accumulation.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        if lr == 0.0 {
            return;
        }
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        for (t, (m, v)) in store.tensors_mut().zip(&mut self.moments) {
            if !t.requires_grad {
                continue;
            }
            let Some(g) = t.grad().map(<[T]>::to_vec) else {
                continue;
            };
            for (((p, &gi), mi), vi) in t
                .values_mut()
                .iter_mut()
                .zip(&g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
