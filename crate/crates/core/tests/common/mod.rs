//! Independent oracles shared by the property suites and the acceptance runner.
#![allow(dead_code)]

use combinet::arch::{ArchConfig, AsppConfig, BlockCounts};
use combinet::rng::{substream, Rng};
use combinet::{ConvSpec, Result, Tape, Tensor, Var};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, for gradients near zero.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(name: &str, index: u64) -> Rng {
    substream(0x0ac1e, name, index)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Worst relative error between reverse-mode gradients of
/// `L = Σ f(inputs) ⊙ R` (R a fixed random projection) and central finite
/// differences, over every element of every input listed in `check`.
pub fn gradcheck<F>(inputs: &[Tensor], check: &[usize], rng: &mut Rng, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let forward = |xs: &[Tensor], proj: Option<&Tensor>| -> (Tensor, f64) {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = f(&mut t, &vars).unwrap();
        let y = t.value(out).clone();
        let l = proj.map_or(0.0, |r| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum());
        (y, l)
    };
    let (y, _) = forward(inputs, None);
    let proj = uniform(rng, y.shape(), -1.0, 1.0);

    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, x)| t.leaf(x.clone(), check.contains(&i))).collect();
    let out = f(&mut t, &vars).unwrap();
    let r = t.leaf(proj.clone(), false);
    let m = t.mul(out, r).unwrap();
    let s = t.sum(m).unwrap();
    let grads = t.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for &k in check {
        let zero = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.get(vars[k]).unwrap_or(&zero).clone();
        for j in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[j] += FD_STEP;
            let (_, lp) = forward(&xs, Some(&proj));
            xs[k].data_mut()[j] -= 2.0 * FD_STEP;
            let (_, lm) = forward(&xs, Some(&proj));
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Direct convolution over an explicitly zero-padded input, counting every
/// multiply it performs.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, s: &ConvSpec) -> (Tensor, u64) {
    let [n, c, h, wd] = x.dims4().unwrap();
    let (hp, wp) = (h + 2 * s.pad_h, wd + 2 * s.pad_w);
    let mut padded = vec![0.0; n * c * hp * wp];
    for i in 0..n * c {
        for y in 0..h {
            for xx in 0..wd {
                padded[(i * hp + y + s.pad_h) * wp + xx + s.pad_w] = x.data()[(i * h + y) * wd + xx];
            }
        }
    }
    let eff_h = s.dilation * (s.kernel_h - 1) + 1;
    let eff_w = s.dilation * (s.kernel_w - 1) + 1;
    let ho = (hp - eff_h) / s.stride + 1;
    let wo = (wp - eff_w) / s.stride + 1;
    let (cin_g, cout_g) = (c / s.groups, s.out_channels / s.groups);
    let mut out = vec![0.0; n * s.out_channels * ho * wo];
    let mut multiplies = 0u64;
    for bi in 0..n {
        for oc in 0..s.out_channels {
            let g = oc / cout_g;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                    for icg in 0..cin_g {
                        let ic = g * cin_g + icg;
                        for ky in 0..s.kernel_h {
                            for kx in 0..s.kernel_w {
                                let iy = oy * s.stride + ky * s.dilation;
                                let ix = ox * s.stride + kx * s.dilation;
                                let wv = w.data()[((oc * cin_g + icg) * s.kernel_h + ky) * s.kernel_w + kx];
                                acc += wv * padded[((bi * c + ic) * hp + iy) * wp + ix];
                                multiplies += 1;
                            }
                        }
                    }
                    out[((bi * s.out_channels + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (Tensor::new(vec![n, s.out_channels, ho, wo], out).unwrap(), multiplies)
}

/// Small random but valid architecture.
pub fn random_arch(rng: &mut Rng) -> ArchConfig {
    let n = rng.random_range(2..=4usize);
    let mut down: Vec<usize> = (0..n).map(|_| rng.random_range(1..=3)).collect();
    down.sort_unstable();
    let up = (0..n).map(|_| rng.random_range(1..=3)).collect();
    let dilations = (0..n.saturating_sub(2))
        .map(|_| {
            let a = rng.random_range(1..=2usize);
            [a, a + rng.random_range(1..=2), a + 3 + rng.random_range(0..=2)]
        })
        .collect();
    ArchConfig {
        name: "random".into(),
        growth_rate_k: rng.random_range(2..=6),
        num_repeat_blocks: n,
        stem_channels: rng.random_range(2..=8),
        num_classes: rng.random_range(2..=5),
        input_channels: rng.random_range(1..=3),
        dropout_p: 0.05,
        downsample_compression: [0.5, 0.75, 1.0][rng.random_range(0..3)],
        blocks: BlockCounts { down, up, bottom: rng.random_range(1..=3) },
        aspp: AsppConfig { partial_channels: rng.random_range(2..=6), dilations },
    }
}

/// Values in [−2, 2] kept at least `gap` away from zero.
fn away_from_zero(rng: &mut Rng, shape: &[usize], gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } + *v;
        }
    }
    t
}

/// Distinct values in [−2, 2] at spacing ≥ 0.01, so 2×2 maxima are never near ties.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    assert!(n <= 400);
    let mut levels: Vec<f64> = (0..n).map(|i| -2.0 + 4.0 * (i as f64 + 0.5) / 400.0).collect();
    levels.shuffle(rng);
    Tensor::new(shape.to_vec(), levels).unwrap()
}

fn random_conv_spec(rng: &mut Rng) -> ConvSpec {
    let groups = [1, 2][rng.random_range(0..2)];
    let in_channels = groups * rng.random_range(1..=2);
    let out_channels = groups * rng.random_range(1..=2);
    let k = [1, 2, 3][rng.random_range(0..3)];
    ConvSpec {
        in_channels,
        out_channels,
        kernel_h: k,
        kernel_w: rng.random_range(1..=3),
        stride: rng.random_range(1..=2),
        dilation: rng.random_range(1..=2),
        groups,
        pad_h: rng.random_range(0..=2),
        pad_w: rng.random_range(0..=2),
        has_bias: rng.random_bool(0.5),
    }
}

/// One random finite-difference check, returning the worst relative error.
pub type GradCase = fn(&mut Rng) -> f64;

pub fn gradient_cases() -> Vec<(&'static str, GradCase)> {
    vec![
        ("conv2d", |r| {
            let s = random_conv_spec(r);
            let x = uniform(r, &[2, s.in_channels, 6, 5], -2.0, 2.0);
            let w = uniform(r, &s.weight_shape(), -2.0, 2.0);
            let b = uniform(r, &[s.out_channels], -2.0, 2.0);
            let inputs = if s.has_bias { vec![x, w, b] } else { vec![x, w] };
            let check: Vec<usize> = (0..inputs.len()).collect();
            gradcheck(&inputs, &check, r, |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), &s))
        }),
        ("separable_conv3x3", |r| {
            let (c, o) = (r.random_range(1..=3), r.random_range(1..=3));
            let x = uniform(r, &[1, c, 5, 4], -2.0, 2.0);
            let a = uniform(r, &[c, 1, 1, 3], -2.0, 2.0);
            let b = uniform(r, &[c, 1, 3, 1], -2.0, 2.0);
            let p = uniform(r, &[o, c, 1, 1], -2.0, 2.0);
            gradcheck(&[x, a, b, p], &[0, 1, 2, 3], r, |t, v| t.separable_conv3x3(v[0], v[1], v[2], v[3]))
        }),
        ("batchnorm2d", |r| {
            let c = r.random_range(1..=3);
            let x = uniform(r, &[2, c, 3, 3], -2.0, 2.0);
            let g = uniform(r, &[c], -2.0, 2.0);
            let b = uniform(r, &[c], -2.0, 2.0);
            gradcheck(&[x, g, b], &[0, 1, 2], r, |t, v| t.batchnorm2d(v[0], v[1], v[2], 1e-5))
        }),
        ("relu", |r| {
            let x = away_from_zero(r, &[2, 2, 3, 3], 1e-2);
            gradcheck(&[x], &[0], r, |t, v| t.relu(v[0]))
        }),
        ("dropout2d", |r| {
            let x = uniform(r, &[2, 3, 3, 3], -2.0, 2.0);
            let seed = r.random::<u64>();
            gradcheck(&[x], &[0], r, move |t, v| t.dropout2d(v[0], 0.3, &mut substream(seed, "fd", 0), true))
        }),
        ("maxpool2x2_s1", |r| {
            let x = distinct(r, &[2, 2, 4, 5]);
            gradcheck(&[x], &[0], r, |t, v| t.maxpool2x2_s1(v[0]))
        }),
        ("blurpool2x2_s2", |r| {
            let (h, w) = (r.random_range(2..=7), r.random_range(2..=7));
            let x = uniform(r, &[1, 2, h, w], -2.0, 2.0);
            gradcheck(&[x], &[0], r, |t, v| t.blurpool2x2_s2(v[0]))
        }),
        ("replicate_pad", |r| {
            let (pb, pr) = (r.random_range(0..=2), r.random_range(0..=2));
            let x = uniform(r, &[1, 2, 3, 4], -2.0, 2.0);
            gradcheck(&[x], &[0], r, move |t, v| t.replicate_pad(v[0], pb, pr))
        }),
        ("bilinear_resize", |r| {
            let (h, w) = (r.random_range(2..=6), r.random_range(2..=6));
            let (oh, ow) = (r.random_range(1..=9), r.random_range(1..=9));
            let x = uniform(r, &[1, 2, h, w], -2.0, 2.0);
            gradcheck(&[x], &[0], r, move |t, v| t.bilinear_resize(v[0], oh, ow))
        }),
        ("concat_channels", |r| {
            let a = uniform(r, &[2, 1, 3, 3], -2.0, 2.0);
            let b = uniform(r, &[2, 2, 3, 3], -2.0, 2.0);
            let c = uniform(r, &[2, 3, 3, 3], -2.0, 2.0);
            gradcheck(&[a, b, c], &[0, 1, 2], r, |t, v| t.concat_channels(v))
        }),
        ("global_avg_pool", |r| {
            let x = uniform(r, &[2, 3, 4, 3], -2.0, 2.0);
            gradcheck(&[x], &[0], r, |t, v| t.global_avg_pool(v[0]))
        }),
        ("softmax_channels", |r| {
            let x = uniform(r, &[2, 4, 3, 3], -2.0, 2.0);
            gradcheck(&[x], &[0], r, |t, v| t.softmax_channels(v[0]))
        }),
        ("add", |r| {
            let a = uniform(r, &[1, 2, 3, 3], -2.0, 2.0);
            let b = uniform(r, &[1, 2, 3, 3], -2.0, 2.0);
            gradcheck(&[a, b], &[0, 1], r, |t, v| t.add(v[0], v[1]))
        }),
        ("mul", |r| {
            let a = uniform(r, &[1, 2, 3, 3], -2.0, 2.0);
            let b = uniform(r, &[1, 2, 3, 3], -2.0, 2.0);
            gradcheck(&[a, b], &[0, 1], r, |t, v| t.mul(v[0], v[1]))
        }),
        ("sum", |r| {
            let a = uniform(r, &[1, 2, 3, 3], -2.0, 2.0);
            gradcheck(&[a], &[0], r, |t, v| t.sum(v[0]))
        }),
        ("combo_loss", combo_case),
        ("combo_loss_log_dice", |r| combo_case_with(r, true)),
    ]
}

fn combo_case(r: &mut Rng) -> f64 {
    combo_case_with(r, false)
}

/// Random 2-class 6×6 instance, some pixels ignored.
fn combo_case_with(r: &mut Rng, log_dice: bool) -> f64 {
    use combinet::trainer::{combo_loss, LossOptions};
    use combinet::Mask;
    let logits = uniform(r, &[2, 2, 6, 6], -2.0, 2.0);
    let masks: Vec<Mask> = (0..2)
        .map(|_| {
            let d = (0..36).map(|_| if r.random_bool(0.1) { 255 } else { r.random_range(0..2u8) }).collect();
            Mask::new(6, 6, d).unwrap()
        })
        .collect();
    let weights = [r.random_range(0.2..2.0), r.random_range(0.2..2.0)];
    let opts = LossOptions { alpha: r.random_range(0.0..1.0), log_dice, ..LossOptions::default() };
    let (_, grad) = combo_loss(&logits, &masks, &weights, &opts).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..logits.len() {
        let mut p = logits.clone();
        p.data_mut()[j] += FD_STEP;
        let lp = combo_loss(&p, &masks, &weights, &opts).unwrap().0;
        p.data_mut()[j] -= 2.0 * FD_STEP;
        let lm = combo_loss(&p, &masks, &weights, &opts).unwrap().0;
        worst = worst.max(rel_err(grad.data()[j], (lp - lm) / (2.0 * FD_STEP)));
    }
    worst
}

/// Multiply-count oracle applied to each convolution and blur of `graph` at
/// `input`, compared with the analytic per-node MACs. Returns mismatching nodes.
pub fn mac_mismatches(graph: &combinet::arch::Graph, input: [usize; 4]) -> Vec<String> {
    use combinet::arch::Layer;
    use combinet::cost::node_macs;
    let shapes = graph.infer_shapes(input).unwrap();
    let mut r = rng("mac-oracle", 0);
    let mut bad = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        let spec = match &node.layer {
            Layer::Conv { spec, .. } => *spec,
            Layer::BlurPool2x2S2 => {
                let c = shapes[id][1];
                ConvSpec { stride: 2, ..ConvSpec::depthwise(c, 2, 2).with_padding(0, 0) }
            }
            _ => continue,
        };
        let in_shape = shapes[node.inputs[0]];
        let x = uniform(&mut r, &in_shape, -1.0, 1.0);
        let w = uniform(&mut r, &spec.weight_shape(), -1.0, 1.0);
        let (y, count) = naive_conv(&x, &w, None, &spec);
        if y.shape() != shapes[id] || count != node_macs(node, shapes[id]) {
            bad.push(format!("{} naive {count} vs analytic {}", node.name, node_macs(node, shapes[id])));
        }
    }
    bad
}
