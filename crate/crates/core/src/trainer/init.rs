use rand::Rng as _;

use crate::arch::{Graph, ParamKind};
use crate::rng::substream;

/// Uniform He initialisation of every convolution weight, bound
/// `sqrt(6 / fan_in)`. Each parameter draws from its own substream, so the
/// result does not depend on parameter order or thread count. BN scale is set
/// to 1; BN shift and biases to 0.
pub fn he_uniform_init(graph: &mut Graph, seed: u64) {
    for (i, p) in graph.params_mut().iter_mut().enumerate() {
        match p.kind {
            ParamKind::ConvWeight => {
                let bound = (6.0 / p.fan_in.max(1) as f64).sqrt();
                let mut rng = substream(seed, "init", i as u64);
                for v in p.tensor.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            ParamKind::BnGamma => p.tensor.data_mut().fill(1.0),
            ParamKind::BnBeta | ParamKind::ConvBias => p.tensor.data_mut().fill(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_combinet, ArchConfig};

    #[test]
    fn weights_within_bound_and_variance_matches() {
        let cfg = ArchConfig::preset("combinet-s").unwrap();
        let g = build_combinet(&cfg, 7).unwrap();
        let mut checked = 0;
        for p in g.params() {
            let d = p.tensor.data();
            match p.kind {
                ParamKind::ConvWeight => {
                    let b = (6.0 / p.fan_in as f64).sqrt();
                    assert!(d.iter().all(|v| v.abs() <= b), "{}", p.name);
                    if d.len() >= 4096 {
                        let var = d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64;
                        let want = 2.0 / p.fan_in as f64;
                        assert!((var / want - 1.0).abs() < 0.1, "{}: {var} vs {want}", p.name);
                        checked += 1;
                    }
                }
                ParamKind::BnGamma => assert!(d.iter().all(|&v| v == 1.0)),
                _ => assert!(d.iter().all(|&v| v == 0.0)),
            }
        }
        assert!(checked > 0);
    }
}
