use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// One momentum buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Velocity {
    buffers: Vec<Vec<f32>>,
}

impl Velocity {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Velocity {
            buffers: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f32>] {
        &self.buffers
    }
}

/// Heavy-ball SGD with coupled weight decay:
/// `v ← m·v + g + wd·p`, then `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut Velocity,
    cfg: SgdConfig,
) -> Result<()> {
    if velocity.buffers.is_empty() {
        *velocity = Velocity::zeros_like(params);
    }
    if params.len() != grads.len() || params.len() != velocity.buffers.len() {
        return Err(Error::ManifestMismatch(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.buffers.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.buffers.iter_mut()) {
        if p.shape() != g.shape() || v.len() != p.numel() {
            return Err(Error::ManifestMismatch(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vv = cfg.momentum * *vv + gv + cfg.weight_decay * *pv;
            *pv -= cfg.lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.5, 0.25]).unwrap()];
        let mut v = Velocity::default();
        let cfg = SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut p, &g, &mut v, cfg).unwrap();
        assert_eq!(p[0].data(), &[0.5, -2.25]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()];
        let g = vec![Tensor::zeros(&[3])];
        let mut v = Velocity::default();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &g, &mut v, cfg).unwrap();
        assert_eq!(p[0].data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        // p0 = 1, g = 2 both steps, m = 0.9, lr = 0.1, wd = 0
        // v1 = 2,   p1 = 1 - 0.2 = 0.8
        // v2 = 0.9·2 + 2 = 3.8, p2 = 0.8 - 0.38 = 0.42
        let mut p = vec![scalar(1.0)];
        let g = vec![scalar(2.0)];
        let mut v = Velocity::default();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &g, &mut v, cfg).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-6);
        sgd_step(&mut p, &g, &mut v, cfg).unwrap();
        assert!((p[0].item() - 0.42).abs() < 1e-6);
        assert!((v.buffers()[0][0] - 3.8).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_enters_velocity() {
        // v = g + wd·p = 0 + 0.5·2 = 1; p = 2 - 0.1 = 1.9
        let mut p = vec![scalar(2.0)];
        let mut v = Velocity::default();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.5 };
        sgd_step(&mut p, &[scalar(0.0)], &mut v, cfg).unwrap();
        assert!((p[0].item() - 1.9).abs() < 1e-6);
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let mut p = vec![scalar(1.0)];
        let g = vec![Tensor::zeros(&[2])];
        let mut v = Velocity::default();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        assert!(sgd_step(&mut p, &g, &mut v, cfg).is_err());
    }
}
