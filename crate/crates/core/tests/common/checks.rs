//! Oracle comparisons for the clustering objective and the segmentation
//! metrics. Each returns a one-line summary on success.

use rand::Rng;

use vseg::data::LabelMask;
use vseg::loss::{fcm_loss, fcm_loss_sum, CentroidGrad, FcmConfig, Feature};
use vseg::metrics::{ConfusionMatrix, MetricReport};
use vseg::tensor::{Graph, Tensor};

use super::*;

pub const FCM_INSTANCES: usize = 50;
pub const FCM_TOLERANCE: f64 = 1e-6;
pub const METRIC_PAIRS: usize = 100;
pub const METRIC_TOLERANCE: f64 = 1e-12;

fn library_fcm(u: &[f32], us: Shape4, y: &[f32], ys: Shape4, q: f32, grad: CentroidGrad, sum: bool) -> f64 {
    let mut g = Graph::new();
    let uv = g.leaf(Tensor::new(us.to_vec(), u.to_vec()).unwrap());
    let feats = Tensor::new(ys.to_vec(), y.to_vec()).unwrap();
    let cfg = FcmConfig { clusters: us[1], q, centroid_grad: grad, feature: Feature::Rgb };
    let loss = if sum { fcm_loss_sum(&mut g, uv, &feats, &cfg) } else { fcm_loss(&mut g, uv, &feats, &cfg) };
    g.value(loss.unwrap()).item().unwrap() as f64
}

/// Random memberships normalized per pixel, strictly positive.
fn memberships(rng: &mut rand_chacha::ChaCha8Rng, us: Shape4) -> Vec<f32> {
    let mut u = uniform(rng, numel(us), 0.05, 1.0);
    let plane = us[2] * us[3];
    for n in 0..us[0] {
        for p in 0..plane {
            let s: f32 = (0..us[1]).map(|c| u[(n * us[1] + c) * plane + p]).sum();
            for c in 0..us[1] {
                u[(n * us[1] + c) * plane + p] /= s;
            }
        }
    }
    u
}

/// Soft memberships against the double-loop objective, in both the summed
/// and the pixel-mean normalization and under both centroid policies.
pub fn fcm_soft() -> Result<String, String> {
    let mut rng = rng(31);
    let mut worst = 0.0f64;
    for i in 0..FCM_INSTANCES {
        let us = [rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(2..=5), rng.random_range(2..=5)];
        let f = if rng.random_bool(0.5) { 3 } else { 1 };
        let ys = [us[0], f, us[2], us[3]];
        let q = if i % 5 == 0 { 2.0 } else { rng.random_range(1.0f32..3.0) };
        let u = memberships(&mut rng, us);
        let y = uniform(&mut rng, numel(ys), 0.0, 1.0);
        let (u64_, y64) = (to64(&u), to64(&y));
        for sum in [true, false] {
            let reference = fcm(&u64_, us, &y64, ys, q as f64, !sum, None);
            for grad in [CentroidGrad::Detached, CentroidGrad::Flow] {
                let got = library_fcm(&u, us, &y, ys, q, grad, sum);
                let err = (got - reference).abs() / reference.abs().max(1.0);
                if err > FCM_TOLERANCE {
                    return Err(format!("instance {i}: {got} vs {reference} (q={q}, sum={sum}, {grad})"));
                }
                worst = worst.max(err);
            }
        }
    }
    Ok(format!("{FCM_INSTANCES} instances, worst scaled error {worst:.2e}"))
}

/// Within-cluster sum of squares of a hard partition, by direct grouping.
fn wcss(assign: &[usize], y: &[f64], ys: Shape4, k: usize) -> f64 {
    let plane = ys[2] * ys[3];
    let f = ys[1];
    let mut total = 0.0;
    for n in 0..ys[0] {
        for c in 0..k {
            let members: Vec<usize> = (0..plane).filter(|&p| assign[n * plane + p] == c).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..f {
                let at = |p: usize| y[(n * f + d) * plane + p];
                let mean = members.iter().map(|&p| at(p)).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|&p| (at(p) - mean).powi(2)).sum::<f64>();
            }
        }
    }
    total
}

/// q = 1 with one-hot memberships. Cluster sizes are powers of two and
/// features are multiples of 1/16, so every intermediate is exact in f32 and
/// the objective must equal the partition's WCSS bit for bit.
pub fn fcm_hard() -> Result<String, String> {
    let mut rng = rng(32);
    for i in 0..FCM_INSTANCES {
        let k = rng.random_range(2..=4);
        let f = if rng.random_bool(0.5) { 3 } else { 1 };
        let sizes: Vec<usize> = (0..k).map(|_| 1 << rng.random_range(0..=3)).collect();
        let plane: usize = sizes.iter().sum();
        let mut assign: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
        for j in (1..plane).rev() {
            assign.swap(j, rng.random_range(0..=j));
        }
        let us = [1, k, 1, plane];
        let ys = [1, f, 1, plane];
        let mut u = vec![0.0f32; k * plane];
        for (p, &c) in assign.iter().enumerate() {
            u[c * plane + p] = 1.0;
        }
        let y: Vec<f32> = (0..f * plane).map(|_| rng.random_range(0..=16) as f32 / 16.0).collect();
        let reference = wcss(&assign, &to64(&y), ys, k);
        let got = library_fcm(&u, us, &y, ys, 1.0, CentroidGrad::Detached, true);
        if got != reference {
            return Err(format!("instance {i}: objective {got} but WCSS {reference}"));
        }
    }
    Ok(format!("{FCM_INSTANCES} hard partitions equal WCSS exactly"))
}

fn random_mask(rng: &mut rand_chacha::ChaCha8Rng, k: usize) -> LabelMask {
    let skew: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
    let total: f64 = skew.iter().sum();
    let labels = (0..64)
        .map(|_| {
            let mut t = rng.random_range(0.0..total);
            skew.iter()
                .position(|&s| {
                    t -= s;
                    t < 0.0
                })
                .unwrap_or(k - 1) as u8
        })
        .collect();
    LabelMask::new(8, 8, labels).unwrap()
}

/// Confusion counts, PA, IoU and MeanIoU against direct pixel counting on
/// random 8×8 pairs, with skewed label frequencies so that absent classes
/// and undefined IoUs occur.
pub fn metrics() -> Result<String, String> {
    let mut rng = rng(33);
    let mut undefined = 0;
    for i in 0..METRIC_PAIRS {
        let k = rng.random_range(2..=4);
        let pred = random_mask(&mut rng, k);
        let gt = random_mask(&mut rng, k);
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        let (p, t) = (pred.labels(), gt.labels());
        for a in 0..k {
            for b in 0..k {
                let count = (0..64).filter(|&j| t[j] as usize == a && p[j] as usize == b).count() as u64;
                if cm.get(a, b) != count {
                    return Err(format!("pair {i}: cell ({a},{b}) = {} but {count} pixels", cm.get(a, b)));
                }
            }
        }
        let pa = (0..64).filter(|&j| t[j] == p[j]).count() as f64 / 64.0;
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let inter = (0..64).filter(|&j| t[j] == c && p[j] == c).count();
            let union = (0..64).filter(|&j| t[j] == c || p[j] == c).count();
            ious.push((union > 0).then(|| inter as f64 / union as f64));
        }
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        undefined += k - defined.len();
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;

        let names: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let report = MetricReport::from_confusion(&cm, &refs).map_err(|e| e.to_string())?;
        let close = |a: f64, b: f64| (a - b).abs() <= METRIC_TOLERANCE;
        if !close(report.pa, pa) || !close(cm.pixel_accuracy().unwrap(), pa) {
            return Err(format!("pair {i}: PA {} vs {pa}", report.pa));
        }
        for (c, (got, want)) in report.iou.iter().zip(&ious).enumerate() {
            let ok = match (got, want) {
                (Some(a), Some(b)) => close(*a, *b),
                (None, None) => true,
                _ => false,
            };
            if !ok {
                return Err(format!("pair {i}: IoU of class {c} is {got:?}, expected {want:?}"));
            }
        }
        if !close(report.mean_iou, mean) {
            return Err(format!("pair {i}: MeanIoU {} vs {mean}", report.mean_iou));
        }
    }
    Ok(format!("{METRIC_PAIRS} pairs, {undefined} undefined per-class IoUs"))
}
