use crate::arch::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(graph: &Graph) -> Self {
        let zeros: Vec<Vec<f64>> = graph.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every parameter. `grads[i]` of `None` counts as zero.
    /// Decay `θ ← θ − lr·wd·θ` follows the Adam update and skips batch-norm
    /// parameters and biases. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, graph: &mut Graph, grads: &[Option<Tensor>], lr: f64, weight_decay: f64) -> Result<()> {
        let params = graph.params_mut();
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.tensor.len() {
                    return Err(Error::invalid(format!("gradient of {} has the wrong size", p.name)));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient { layer: p.name.clone() });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = if p.kind.decays() { lr * weight_decay } else { 0.0 };
            let theta = p.tensor.data_mut();
            let g = grads[i].as_ref().map(|g| g.data());
            for j in 0..theta.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                theta[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                theta[j] -= decay * theta[j];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{GraphBuilder, ParamKind};
    use crate::tensor::ConvSpec;

    fn tiny() -> Graph {
        let (mut b, x) = GraphBuilder::new(1);
        let y = b.conv("c", x, ConvSpec::pointwise(1, 1).with_bias(true));
        let y = b.batchnorm("bn", y);
        let mut g = b.finish(y, None).unwrap();
        for p in g.params_mut() {
            p.tensor.data_mut().fill(1.0);
        }
        g
    }

    #[test]
    fn scalar_step_by_hand() {
        let mut g = tiny();
        let mut opt = Adam::new(&g);
        let grads: Vec<Option<Tensor>> = vec![Some(Tensor::full([1, 1, 1, 1], 1.0)), None, None, None];
        opt.step(&mut g, &grads, 0.001, 0.0).unwrap();
        assert!((g.params()[0].tensor.data()[0] - 0.999).abs() < 1e-10);
        assert_eq!(g.params()[1].tensor.data()[0], 1.0);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn decay_touches_kernels_only() {
        let mut g = tiny();
        let mut opt = Adam::new(&g);
        let zeros = vec![None; 4];
        opt.step(&mut g, &zeros, 0.1, 0.0).unwrap();
        assert!(g.params().iter().all(|p| p.tensor.data()[0] == 1.0));
        opt.step(&mut g, &zeros, 0.1, 0.01).unwrap();
        for p in g.params() {
            let want = if p.kind == ParamKind::ConvWeight { 0.999 } else { 1.0 };
            assert!((p.tensor.data()[0] - want).abs() < 1e-15, "{}", p.name);
        }
    }

    #[test]
    fn non_finite_gradient_names_layer() {
        let mut g = tiny();
        let before = g.clone();
        let mut opt = Adam::new(&g);
        let grads = vec![None, None, Some(Tensor::full([1], f64::NAN)), None];
        match opt.step(&mut g, &grads, 0.1, 0.0) {
            Err(Error::NonFiniteGradient { layer }) => assert_eq!(layer, "bn.gamma"),
            other => panic!("{other:?}"),
        }
        assert_eq!(g, before);
        assert_eq!(opt.step, 0);
    }
}
