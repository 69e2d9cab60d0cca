mod common;

use combinet::arch::{build_combinet, ArchConfig};
use combinet::bayes::{entropy_map, mc_predict, miou, predict_mask, McOptions};
use combinet::ops::softmax_channels;
use combinet::rng::substream;
use combinet::{Mask, Tensor};
use common::{rng, uniform};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn permute_channels(t: &Tensor, perm: &[usize]) -> Tensor {
    let [n, c, h, w] = t.dims4().unwrap();
    let plane = h * w;
    let mut out = vec![0.0; t.len()];
    for b in 0..n {
        for (src, &dst) in perm.iter().enumerate() {
            out[(b * c + dst) * plane..][..plane].copy_from_slice(&t.data()[(b * c + src) * plane..][..plane]);
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

fn mask_strategy(classes: u8) -> impl Strategy<Value = (Mask, Mask)> {
    let n = 5 * 6;
    (proptest::collection::vec(0..classes, n), proptest::collection::vec(0..=classes, n)).prop_map(move |(p, t)| {
        // Targets use `classes` as a stand-in for the ignore label.
        let t = t.into_iter().map(|v| if v == classes { 255 } else { v }).collect();
        (Mask::new(5, 6, p).unwrap(), Mask::new(5, 6, t).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_is_bounded(seed: u64, c in 2usize..=11, scale in 0.1f64..30.0) {
        let logits = uniform(&mut rng("entropy", seed), &[2, c, 3, 3], -scale, scale);
        let e = entropy_map(&softmax_channels(&logits).unwrap()).unwrap();
        let max = (c as f64).ln();
        prop_assert!(e.data().iter().all(|&v| (0.0..=max + 1e-12).contains(&v)));
    }

    #[test]
    fn class_permutation_is_equivariant(seed: u64, c in 2usize..=6) {
        let mut r = rng("perm", seed);
        let probs = softmax_channels(&uniform(&mut r, &[1, c, 4, 4], -3.0, 3.0)).unwrap();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut r);
        let permuted = permute_channels(&probs, &perm);
        let (e0, e1) = (entropy_map(&probs).unwrap(), entropy_map(&permuted).unwrap());
        prop_assert!(e0.max_abs_diff(&e1) < 1e-12);
        let (m0, m1) = (&predict_mask(&probs).unwrap()[0], &predict_mask(&permuted).unwrap()[0]);
        for (a, b) in m0.data().iter().zip(m1.data()) {
            prop_assert_eq!(perm[*a as usize] as u8, *b);
        }
    }

    #[test]
    fn miou_is_relabelling_invariant((pred, target) in mask_strategy(4), seed: u64) {
        let mut perm: Vec<u8> = (0..4).collect();
        perm.shuffle(&mut rng("relabel", seed));
        let map = |m: &Mask| {
            let d = m.data().iter().map(|&v| if v == 255 { 255 } else { perm[v as usize] }).collect();
            Mask::new(m.height(), m.width(), d).unwrap()
        };
        let a = miou(&pred, &target, 4, Some(255)).unwrap();
        let b = miou(&map(&pred), &map(&target), 4, Some(255)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn prediction_is_determined_by_its_inputs() {
    let g = build_combinet(&ArchConfig::preset("combinet-mini").unwrap(), 8).unwrap();
    let x = uniform(&mut rng("mc", 0), &[1, 3, 16, 16], 0.0, 1.0);
    let opts = McOptions { keep_samples: true, ..McOptions::new(4, 21) };
    assert_eq!(mc_predict(&g, &x, opts).unwrap(), mc_predict(&g, &x, opts).unwrap());
}

#[test]
fn single_deterministic_pass_equals_plain_forward() {
    let g = build_combinet(&ArchConfig::preset("combinet-mini").unwrap(), 8).unwrap();
    let x = uniform(&mut rng("mc", 1), &[1, 3, 16, 16], 0.0, 1.0);
    let forward = softmax_channels(&g.infer(&x, &mut substream(0, "unused", 0), false).unwrap()).unwrap();
    for seed in [0, 1, 99] {
        let r = mc_predict(&g, &x, McOptions { dropout: false, ..McOptions::new(1, seed) }).unwrap();
        assert_eq!(r.mean_probs, forward);
        assert!(r.variance.data().iter().all(|&v| v == 0.0));
    }
}
