use crate::error::{Error, Result};
use crate::nn::params::Parameters;

/// SGD with classic momentum: `v ← μv − lr·g; p ← p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if grads.len() != params.len() {
            return Err(Error::shape(
                "sgd",
                format!("{} gradient tensors for {} parameters", grads.len(), params.len()),
            ));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (k, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
            if p.shape() != g.shape() || self.velocity[k].len() != p.len() {
                return Err(Error::shape(
                    format!("sgd tensor {k}"),
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(&mut self.velocity[k]) {
                *vv = self.momentum * *vv - self.lr * gv;
                *pv += *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct One(Tensor);

    impl Parameters for One {
        fn tensors(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = One(Tensor::scalar(1.25));
        let g = One(Tensor::scalar(3.0));
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.0.data()[0], 1.25);
    }

    #[test]
    fn plain_step() {
        let mut p = One(Tensor::scalar(1.0));
        let mut opt = Sgd::new(1.0, 0.0);
        opt.step(&mut p, &One(Tensor::scalar(0.25))).unwrap();
        assert_eq!(p.0.data()[0], 0.75);
    }

    #[test]
    fn two_momentum_steps() {
        let mut p = One(Tensor::scalar(0.0));
        let g = One(Tensor::scalar(1.0));
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.0.data()[0] - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = One(Tensor::zeros(&[2]));
        let mut opt = Sgd::new(0.1, 0.9);
        assert!(opt.step(&mut p, &One(Tensor::zeros(&[3]))).is_err());
    }
}
