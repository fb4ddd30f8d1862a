use crate::param::ParamStore;
use crate::tensor::Scalar;

/// Adam with bias correction. Moment buffers are laid out in the same order
/// as the parameters of the store they were created for.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T, store: &ParamStore<T>) -> Self {
        assert!(lr > T::zero(), "learning rate must be positive");
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect::<Vec<_>>();
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        assert_eq!(store.len(), self.first.len(), "optimizer built for a different store");
        self.step += 1;
        let t = self.step as i32;
        let c1 = T::one() - self.beta1.powi(t);
        let c2 = T::one() - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (T::one() - self.beta1) * g;
                *v = self.beta2 * *v + (T::one() - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w = *w - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
