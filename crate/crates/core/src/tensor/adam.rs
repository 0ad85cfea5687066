use super::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f32) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let g = grads.get(i).and_then(|g| g.as_ref()).ok_or(Error::MissingGradient(i))?;
            if g.shape() != p.shape() || self.m[i].shape() != p.shape() {
                return Err(Error::shape("adam", format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref().expect("checked above");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv as f64 / bc1;
                let vhat = *vv as f64 / bc2;
                *pv -= (self.lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut adam = AdamState::new([&p], 0.1);
        adam.step(&mut [&mut p], &[Some(Tensor::zeros(vec![3]))]).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = 1, v_hat = 1, update = lr / (1 + eps)
        let mut p = Tensor::scalar(0.5);
        let mut adam = AdamState::new([&p], 0.1);
        adam.step(&mut [&mut p], &[Some(Tensor::scalar(1.0))]).unwrap();
        assert!((0.5 - p.item() - 0.1).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn repeated_gradient_does_not_grow_update() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new([&p], 0.1);
        adam.step(&mut [&mut p], &[Some(Tensor::scalar(0.7))]).unwrap();
        let first = p.item().abs();
        let before = p.item();
        adam.step(&mut [&mut p], &[Some(Tensor::scalar(0.7))]).unwrap();
        let second = (p.item() - before).abs();
        assert!(second <= first + 1e-6);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = AdamState::new([&p], 0.1);
        let err = adam.step(&mut [&mut p], &[None]).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(0)));
        assert_eq!(adam.step_count(), 0);
    }
}
