//! Finite-difference gradient checks of every differentiable primitive, both
//! losses and random layer compositions against the f64 oracles.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use vseg::data::LabelMask;
use vseg::loss::{fcm_loss, weighted_cross_entropy, CentroidGrad, ClassWeights, FcmConfig, Feature};
use vseg::nn::{
    concat_channels, conv2d, depthwise_conv2d, log_softmax_channels, maxpool2x2, softmax_channels,
    upsample_nearest2x, Padding,
};
use vseg::tensor::{Graph, Tensor, Var};

use super::*;
use super::{conv2d as conv2d_ref, depthwise as depthwise_ref};

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;
/// Inputs closer than this to a ReLU hinge or a max-pool tie are resampled.
pub const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct FamilyResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
    /// Instances redrawn because an input sat within the kink margin.
    pub resampled: usize,
}

impl FamilyResult {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst < TOLERANCE
    }
}

/// One input tensor of a checked function.
struct Input {
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    Input { shape: shape.to_vec(), data: uniform(rng, shape.iter().product(), -1.0, 1.0) }
}

/// Relative error between reverse-mode gradients of `build` and central
/// differences of `oracle`, taken over all inputs jointly. Also asserts that
/// the forward values agree.
fn compare(inputs: &[Input], build: impl Fn(&mut Graph, &[Var]) -> Var, oracle: impl Fn(&[&[f64]]) -> f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> =
        inputs.iter().map(|i| g.param(&Tensor::new(i.shape.clone(), i.data.clone()).unwrap())).collect();
    let loss = build(&mut g, &vars);
    let value = g.value(loss).item().unwrap() as f64;
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    for (v, i) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat_n(0.0f32, i.data.len())),
        }
    }

    let lens: Vec<usize> = inputs.iter().map(|i| i.data.len()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|i| to64(&i.data)).collect();
    let eval = |x: &[f64]| {
        let mut parts = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &l in &lens {
            parts.push(&x[at..at + l]);
            at += l;
        }
        oracle(&parts)
    };
    let reference = eval(&flat);
    assert!(
        (value - reference).abs() <= 1e-4 * reference.abs().max(1.0),
        "forward mismatch: {value} vs {reference}"
    );
    rel_err(&analytic, &numeric_grad(eval, &flat, STEP))
}

/// `sum(y * r)` for a fixed random projection `r`; turns a tensor-valued
/// layer into a scalar objective without symmetry.
fn project(g: &mut Graph, y: Var, r: &[f32]) -> Var {
    let r = g.constant(Tensor::new(g.shape(y).to_vec(), r.to_vec()).unwrap());
    let p = g.mul(y, r).unwrap();
    g.sum_all(p)
}

fn dot(a: &[f64], r: &[f32]) -> f64 {
    assert_eq!(a.len(), r.len());
    a.iter().zip(r).map(|(x, &w)| x * w as f64).sum()
}

fn padding(same: bool) -> Padding {
    if same {
        Padding::Same
    } else {
        Padding::Valid
    }
}

fn family(name: &'static str, seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> Option<f64>) -> FamilyResult {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut resampled = 0;
    while instances < INSTANCES {
        match instance(&mut rng) {
            Some(e) => {
                worst = worst.max(e);
                instances += 1;
            }
            None => resampled += 1,
        }
        assert!(resampled < 100 * INSTANCES, "{name}: too many kink rejections");
    }
    FamilyResult { name, instances, worst, resampled }
}

fn conv_family() -> FamilyResult {
    family("conv2d", 11, |rng| {
        let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let k = if rng.random_bool(0.7) { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let same = rng.random_bool(0.6);
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let xs = [n, ci, h, w];
        let ws = [co, ci, k, k];
        let inputs = [input(rng, &xs), input(rng, &ws), input(rng, &[co])];
        let ys = conv_output(xs, ws, stride, same);
        let r = uniform(rng, numel(ys), -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let y = conv2d(g, v[0], v[1], Some(v[2]), stride, padding(same)).unwrap();
                project(g, y, &r)
            },
            |p| dot(&conv2d_ref(p[0], xs, p[1], ws, Some(p[2]), stride, same).0, &r),
        ))
    })
}

fn conv_output(xs: Shape4, ws: Shape4, stride: usize, same: bool) -> Shape4 {
    [xs[0], ws[0], geometry(xs[2], ws[2], stride, same).0, geometry(xs[3], ws[3], stride, same).0]
}

fn depthwise_family() -> FamilyResult {
    family("depthwise_conv2d", 12, |rng| {
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let k = if rng.random_bool(0.7) { 3 } else { 1 };
        let stride = rng.random_range(1..=2);
        let same = rng.random_bool(0.6);
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let xs = [n, c, h, w];
        let ws = [c, 1, k, k];
        let inputs = [input(rng, &xs), input(rng, &ws)];
        let (oh, _) = geometry(h, k, stride, same);
        let (ow, _) = geometry(w, k, stride, same);
        let r = uniform(rng, n * c * oh * ow, -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let y = depthwise_conv2d(g, v[0], v[1], stride, padding(same)).unwrap();
                project(g, y, &r)
            },
            |p| dot(&depthwise_ref(p[0], xs, p[1], ws, stride, same).0, &r),
        ))
    })
}

fn separable_family() -> FamilyResult {
    family("separable_conv2d", 13, |rng| {
        let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(3..=6), rng.random_range(3..=6));
        let xs = [n, ci, h, w];
        let ds = [ci, 1, 3, 3];
        let ps = [co, ci, 1, 1];
        let inputs = [input(rng, &xs), input(rng, &ds), input(rng, &ps), input(rng, &[co])];
        let r = uniform(rng, n * co * h * w, -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let d = depthwise_conv2d(g, v[0], v[1], 1, Padding::Same).unwrap();
                let y = conv2d(g, d, v[2], Some(v[3]), 1, Padding::Same).unwrap();
                project(g, y, &r)
            },
            |p| {
                let (d, dsh) = depthwise_ref(p[0], xs, p[1], ds, 1, true);
                dot(&conv2d_ref(&d, dsh, p[2], ps, Some(p[3]), 1, true).0, &r)
            },
        ))
    })
}

/// Smallest gap between the largest and second largest entry of any 2×2
/// pooling window.
fn pool_gap(x: &[f64], xs: Shape4) -> f64 {
    let mut gap = f64::INFINITY;
    for n in 0..xs[0] {
        for c in 0..xs[1] {
            for oy in 0..xs[2] / 2 {
                for ox in 0..xs[3] / 2 {
                    let mut v: Vec<f64> = (0..4)
                        .map(|i| x[((n * xs[1] + c) * xs[2] + 2 * oy + i / 2) * xs[3] + 2 * ox + i % 2])
                        .collect();
                    v.sort_by(|a, b| b.total_cmp(a));
                    gap = gap.min(v[0] - v[1]);
                }
            }
        }
    }
    gap
}

fn hinge_gap(x: &[f64]) -> f64 {
    x.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn maxpool_family() -> FamilyResult {
    family("maxpool2x2", 14, |rng| {
        let xs = [rng.random_range(1..=2), rng.random_range(1..=3), 2 * rng.random_range(1..=3), 2 * rng.random_range(1..=3)];
        let inputs = [input(rng, &xs)];
        if pool_gap(&to64(&inputs[0].data), xs) < KINK_MARGIN {
            return None;
        }
        let r = uniform(rng, numel(xs) / 4, -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let y = maxpool2x2(g, v[0]).unwrap();
                project(g, y, &r)
            },
            |p| dot(&maxpool(p[0], xs).0, &r),
        ))
    })
}

fn upsample_family() -> FamilyResult {
    family("upsample_nearest2x", 15, |rng| {
        let xs = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
        let inputs = [input(rng, &xs)];
        let r = uniform(rng, numel(xs) * 4, -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let y = upsample_nearest2x(g, v[0]).unwrap();
                project(g, y, &r)
            },
            |p| dot(&upsample(p[0], xs).0, &r),
        ))
    })
}

fn relu_family() -> FamilyResult {
    family("relu", 16, |rng| {
        let xs = [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4)];
        let inputs = [input(rng, &xs)];
        if hinge_gap(&to64(&inputs[0].data)) < KINK_MARGIN {
            return None;
        }
        let r = uniform(rng, numel(xs), -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let y = g.relu(v[0]);
                project(g, y, &r)
            },
            |p| dot(&relu(p[0]), &r),
        ))
    })
}

fn softmax_family(log: bool) -> FamilyResult {
    let name = if log { "log_softmax_channels" } else { "softmax_channels" };
    family(name, if log { 17 } else { 18 }, |rng| {
        let xs = [rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(1..=3), rng.random_range(1..=3)];
        let mut inputs = [input(rng, &xs)];
        inputs[0].data.iter_mut().for_each(|v| *v *= 3.0);
        let r = uniform(rng, numel(xs), -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let y = if log { log_softmax_channels(g, v[0]) } else { softmax_channels(g, v[0]) }.unwrap();
                project(g, y, &r)
            },
            |p| dot(&if log { log_softmax(p[0], xs) } else { softmax(p[0], xs) }, &r),
        ))
    })
}

fn concat_family() -> FamilyResult {
    family("concat_channels", 19, |rng| {
        let (n, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let a = [n, rng.random_range(1..=3), h, w];
        let b = [n, rng.random_range(1..=3), h, w];
        let inputs = [input(rng, &a), input(rng, &b)];
        let r = uniform(rng, n * (a[1] + b[1]) * h * w, -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let y = concat_channels(g, &[v[0], v[1]]).unwrap();
                project(g, y, &r)
            },
            |p| dot(&concat(p[0], a, p[1], b).0, &r),
        ))
    })
}

fn cross_entropy_family() -> FamilyResult {
    family("weighted_cross_entropy", 20, |rng| {
        let zs = [rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let mut inputs = [input(rng, &zs)];
        inputs[0].data.iter_mut().for_each(|v| *v *= 3.0);
        let labels: Vec<u8> = (0..zs[0] * zs[2] * zs[3]).map(|_| rng.random_range(0..zs[1]) as u8).collect();
        let weights: Vec<f32> = uniform(rng, zs[1], 0.2, 3.0);
        let masks: Vec<LabelMask> = labels
            .chunks(zs[2] * zs[3])
            .map(|c| LabelMask::new(zs[2], zs[3], c.to_vec()).unwrap())
            .collect();
        let cw = ClassWeights::new(weights.clone()).unwrap();
        let w64 = to64(&weights);
        Some(compare(
            &inputs,
            |g, v| {
                let refs: Vec<&LabelMask> = masks.iter().collect();
                weighted_cross_entropy(g, v[0], &refs, &cw).unwrap()
            },
            |p| weighted_ce(p[0], zs, &labels, &w64),
        ))
    })
}

fn fcm_family(grad: CentroidGrad) -> FamilyResult {
    let name = match grad {
        CentroidGrad::Detached => "fcm_loss (detached centroids)",
        CentroidGrad::Flow => "fcm_loss (centroid gradient flow)",
    };
    family(name, if grad == CentroidGrad::Detached { 21 } else { 22 }, |rng| {
        let n = rng.random_range(1..=2);
        let k = rng.random_range(2..=4);
        let f = if rng.random_bool(0.5) { 3 } else { 1 };
        let (h, w) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let us = [n, k, h, w];
        let ys = [n, f, h, w];
        let mut inputs = [input(rng, &us)];
        inputs[0].data.iter_mut().for_each(|v| *v *= 2.0);
        let feats = uniform(rng, numel(ys), 0.0, 1.0);
        let q = rng.random_range(1.0f32..3.0);
        let cfg = FcmConfig { clusters: k, q, centroid_grad: grad, feature: Feature::Rgb };
        let features = Tensor::new(ys.to_vec(), feats.clone()).unwrap();
        let y64 = to64(&feats);
        let frozen = fcm_centroids(&softmax(&to64(&inputs[0].data), us), us, &y64, ys, q as f64);
        Some(compare(
            &inputs,
            |g, v| {
                let u = softmax_channels(g, v[0]).unwrap();
                fcm_loss(g, u, &features, &cfg).unwrap()
            },
            |p| {
                let u = softmax(p[0], us);
                let fixed = (grad == CentroidGrad::Detached).then_some(frozen.as_slice());
                fcm(&u, us, &y64, ys, q as f64, true, fixed)
            },
        ))
    })
}

#[derive(Debug, Clone, Copy)]
enum Stage {
    ConvRelu(usize),
    Depthwise,
    Separable(usize),
    Pool,
    Upsample,
}

/// Parameter shapes of one stage given its input channel count.
fn stage_params(stage: Stage, c: usize) -> Vec<Vec<usize>> {
    match stage {
        Stage::ConvRelu(o) => vec![vec![o, c, 3, 3], vec![o]],
        Stage::Depthwise => vec![vec![c, 1, 3, 3]],
        Stage::Separable(o) => vec![vec![c, 1, 3, 3], vec![o, c, 1, 1], vec![o]],
        Stage::Pool | Stage::Upsample => vec![],
    }
}

/// Oracle forward of a stage; also returns the distance to the nearest kink.
fn stage_ref(stage: Stage, x: &[f64], xs: Shape4, p: &[&[f64]]) -> (Vec<f64>, Shape4, f64) {
    match stage {
        Stage::ConvRelu(o) => {
            let (y, ys) = conv2d_ref(x, xs, p[0], [o, xs[1], 3, 3], Some(p[1]), 1, true);
            let gap = hinge_gap(&y);
            (relu(&y), ys, gap)
        }
        Stage::Depthwise => {
            let (y, ys) = depthwise_ref(x, xs, p[0], [xs[1], 1, 3, 3], 1, true);
            (y, ys, f64::INFINITY)
        }
        Stage::Separable(o) => {
            let (d, ds) = depthwise_ref(x, xs, p[0], [xs[1], 1, 3, 3], 1, true);
            let (y, ys) = conv2d_ref(&d, ds, p[1], [o, xs[1], 1, 1], Some(p[2]), 1, true);
            (y, ys, f64::INFINITY)
        }
        Stage::Pool => {
            let gap = pool_gap(x, xs);
            let (y, ys) = maxpool(x, xs);
            (y, ys, gap)
        }
        Stage::Upsample => {
            let (y, ys) = upsample(x, xs);
            (y, ys, f64::INFINITY)
        }
    }
}

fn stage_forward(g: &mut Graph, stage: Stage, x: Var, p: &[Var]) -> Var {
    match stage {
        Stage::ConvRelu(_) => {
            let y = conv2d(g, x, p[0], Some(p[1]), 1, Padding::Same).unwrap();
            g.relu(y)
        }
        Stage::Depthwise => depthwise_conv2d(g, x, p[0], 1, Padding::Same).unwrap(),
        Stage::Separable(_) => {
            let d = depthwise_conv2d(g, x, p[0], 1, Padding::Same).unwrap();
            conv2d(g, d, p[1], Some(p[2]), 1, Padding::Same).unwrap()
        }
        Stage::Pool => maxpool2x2(g, x).unwrap(),
        Stage::Upsample => upsample_nearest2x(g, x).unwrap(),
    }
}

fn run_stages(stages: &[Stage], x: &[f64], xs: Shape4, params: &[&[f64]]) -> (Vec<f64>, Shape4, f64) {
    let mut cur = x.to_vec();
    let mut shape = xs;
    let mut gap = f64::INFINITY;
    let mut at = 0;
    for &s in stages {
        let count = stage_params(s, shape[1]).len();
        let (y, ys, g) = stage_ref(s, &cur, shape, &params[at..at + count]);
        at += count;
        gap = gap.min(g);
        cur = y;
        shape = ys;
    }
    (cur, shape, gap)
}

fn composition_family() -> FamilyResult {
    family("random 3-layer composition", 23, |rng| {
        let n = rng.random_range(1..=2);
        let mut c = rng.random_range(1..=3);
        let xs = [n, c, 4, 4];
        let mut h = 4;
        let mut stages = Vec::new();
        let mut shapes = vec![xs.to_vec()];
        for _ in 0..3 {
            let s = match rng.random_range(0..5) {
                0 => Stage::ConvRelu(rng.random_range(1..=3)),
                1 => Stage::Depthwise,
                2 => Stage::Separable(rng.random_range(1..=3)),
                3 if h >= 2 && h % 2 == 0 => Stage::Pool,
                _ if h <= 4 => Stage::Upsample,
                _ => Stage::Depthwise,
            };
            shapes.extend(stage_params(s, c));
            match s {
                Stage::ConvRelu(o) | Stage::Separable(o) => c = o,
                Stage::Pool => h /= 2,
                Stage::Upsample => h *= 2,
                Stage::Depthwise => {}
            }
            stages.push(s);
        }
        let inputs: Vec<Input> = shapes.iter().map(|s| input(rng, s)).collect();
        let flat: Vec<Vec<f64>> = inputs.iter().map(|i| to64(&i.data)).collect();
        let refs: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
        let (_, ys, gap) = run_stages(&stages, refs[0], xs, &refs[1..]);
        if gap < KINK_MARGIN {
            return None;
        }
        let r = uniform(rng, numel(ys), -1.0, 1.0);
        Some(compare(
            &inputs,
            |g, v| {
                let mut x = v[0];
                let mut at = 1;
                let mut ch = xs[1];
                for &s in &stages {
                    let count = stage_params(s, ch).len();
                    x = stage_forward(g, s, x, &v[at..at + count]);
                    at += count;
                    ch = g.shape(x)[1];
                }
                project(g, x, &r)
            },
            |p| dot(&run_stages(&stages, p[0], xs, &p[1..]).0, &r),
        ))
    })
}

/// Every gradient family, in a fixed order.
pub fn run_all() -> Vec<FamilyResult> {
    vec![
        conv_family(),
        depthwise_family(),
        separable_family(),
        maxpool_family(),
        upsample_family(),
        relu_family(),
        softmax_family(false),
        softmax_family(true),
        concat_family(),
        cross_entropy_family(),
        fcm_family(CentroidGrad::Detached),
        fcm_family(CentroidGrad::Flow),
        composition_family(),
    ]
}
