//! Independent f64 reference implementations and finite-difference helpers.
//!
//! Every function here is a direct loop over the defining formula; none of it
//! shares code with the library kernels.

#![allow(dead_code)]

pub mod checks;
pub mod gradcheck;
pub mod persist;
pub mod xception;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Shape4 = [usize; 4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn numel(s: Shape4) -> usize {
    s.iter().product()
}

fn idx(s: Shape4, n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * s[1] + c) * s[2] + y) * s[3] + x
}

/// Output extent and leading pad for "same" (ceil division, centered pad
/// with the extra pixel at the end) or "valid" windows.
pub fn geometry(extent: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        let out = extent.div_ceil(stride);
        let needed = ((out - 1) * stride + k) as i64 - extent as i64;
        (out, (needed.max(0) / 2) as usize)
    } else {
        ((extent - k) / stride + 1, 0)
    }
}

/// Cross-correlation; `w` is `[out, in, kh, kw]`.
pub fn conv2d(x: &[f64], xs: Shape4, w: &[f64], ws: Shape4, b: Option<&[f64]>, stride: usize, same: bool) -> (Vec<f64>, Shape4) {
    let (oh, pt) = geometry(xs[2], ws[2], stride, same);
    let (ow, pl) = geometry(xs[3], ws[3], stride, same);
    let ys = [xs[0], ws[0], oh, ow];
    let mut y = vec![0.0; numel(ys)];
    for n in 0..xs[0] {
        for o in 0..ws[0] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..ws[1] {
                        for ky in 0..ws[2] {
                            for kx in 0..ws[3] {
                                let sy = (oy * stride + ky) as i64 - pt as i64;
                                let sx = (ox * stride + kx) as i64 - pl as i64;
                                if sy < 0 || sx < 0 || sy >= xs[2] as i64 || sx >= xs[3] as i64 {
                                    continue;
                                }
                                acc += x[idx(xs, n, i, sy as usize, sx as usize)] * w[idx(ws, o, i, ky, kx)];
                            }
                        }
                    }
                    y[idx(ys, n, o, oy, ox)] = acc;
                }
            }
        }
    }
    (y, ys)
}

/// Per-channel cross-correlation; `w` is `[c, 1, kh, kw]`.
pub fn depthwise(x: &[f64], xs: Shape4, w: &[f64], ws: Shape4, stride: usize, same: bool) -> (Vec<f64>, Shape4) {
    let (oh, pt) = geometry(xs[2], ws[2], stride, same);
    let (ow, pl) = geometry(xs[3], ws[3], stride, same);
    let ys = [xs[0], xs[1], oh, ow];
    let mut y = vec![0.0; numel(ys)];
    for n in 0..xs[0] {
        for c in 0..xs[1] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..ws[2] {
                        for kx in 0..ws[3] {
                            let sy = (oy * stride + ky) as i64 - pt as i64;
                            let sx = (ox * stride + kx) as i64 - pl as i64;
                            if sy < 0 || sx < 0 || sy >= xs[2] as i64 || sx >= xs[3] as i64 {
                                continue;
                            }
                            acc += x[idx(xs, n, c, sy as usize, sx as usize)] * w[idx(ws, c, 0, ky, kx)];
                        }
                    }
                    y[idx(ys, n, c, oy, ox)] = acc;
                }
            }
        }
    }
    (y, ys)
}

pub fn maxpool(x: &[f64], xs: Shape4) -> (Vec<f64>, Shape4) {
    let ys = [xs[0], xs[1], xs[2] / 2, xs[3] / 2];
    let mut y = vec![0.0; numel(ys)];
    for n in 0..ys[0] {
        for c in 0..ys[1] {
            for oy in 0..ys[2] {
                for ox in 0..ys[3] {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x[idx(xs, n, c, 2 * oy + dy, 2 * ox + dx)]);
                        }
                    }
                    y[idx(ys, n, c, oy, ox)] = m;
                }
            }
        }
    }
    (y, ys)
}

pub fn upsample(x: &[f64], xs: Shape4) -> (Vec<f64>, Shape4) {
    let ys = [xs[0], xs[1], xs[2] * 2, xs[3] * 2];
    let mut y = vec![0.0; numel(ys)];
    for n in 0..ys[0] {
        for c in 0..ys[1] {
            for oy in 0..ys[2] {
                for ox in 0..ys[3] {
                    y[idx(ys, n, c, oy, ox)] = x[idx(xs, n, c, oy / 2, ox / 2)];
                }
            }
        }
    }
    (y, ys)
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn softmax(x: &[f64], xs: Shape4) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for n in 0..xs[0] {
        for py in 0..xs[2] {
            for px in 0..xs[3] {
                let m = (0..xs[1]).map(|c| x[idx(xs, n, c, py, px)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..xs[1]).map(|c| (x[idx(xs, n, c, py, px)] - m).exp()).sum();
                for c in 0..xs[1] {
                    y[idx(xs, n, c, py, px)] = (x[idx(xs, n, c, py, px)] - m).exp() / z;
                }
            }
        }
    }
    y
}

pub fn log_softmax(x: &[f64], xs: Shape4) -> Vec<f64> {
    softmax(x, xs).iter().map(|v| v.ln()).collect()
}

pub fn concat(a: &[f64], as_: Shape4, b: &[f64], bs: Shape4) -> (Vec<f64>, Shape4) {
    let ys = [as_[0], as_[1] + bs[1], as_[2], as_[3]];
    let mut y = vec![0.0; numel(ys)];
    for n in 0..ys[0] {
        for c in 0..ys[1] {
            for py in 0..ys[2] {
                for px in 0..ys[3] {
                    y[idx(ys, n, c, py, px)] = if c < as_[1] {
                        a[idx(as_, n, c, py, px)]
                    } else {
                        b[idx(bs, n, c - as_[1], py, px)]
                    };
                }
            }
        }
    }
    (y, ys)
}

/// Mean over pixels of `-w[t] * ln softmax(z)[t]`.
pub fn weighted_ce(z: &[f64], zs: Shape4, labels: &[u8], weights: &[f64]) -> f64 {
    let p = softmax(z, zs);
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..zs[0] {
        for py in 0..zs[2] {
            for px in 0..zs[3] {
                let t = labels[(n * zs[2] + py) * zs[3] + px] as usize;
                total -= weights[t] * p[idx(zs, n, t, py, px)].ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Centroids `[n, k, f]` of features `y` under memberships `u^q`, per image.
pub fn fcm_centroids(u: &[f64], us: Shape4, y: &[f64], ys: Shape4, q: f64) -> Vec<f64> {
    let (k, f) = (us[1], ys[1]);
    let mut cent = vec![0.0; us[0] * k * f];
    for n in 0..us[0] {
        for c in 0..k {
            let mut mass = 0.0;
            let mut num = vec![0.0; f];
            for py in 0..us[2] {
                for px in 0..us[3] {
                    let wq = u[idx(us, n, c, py, px)].powf(q);
                    mass += wq;
                    for d in 0..f {
                        num[d] += wq * y[idx(ys, n, d, py, px)];
                    }
                }
            }
            for d in 0..f {
                cent[(n * k + c) * f + d] = num[d] / (mass + 1e-12);
            }
        }
    }
    cent
}

/// `sum_j sum_k u_jk^q ||y_j - v_k||^2`, optionally divided by the pixel
/// count of the batch. Uses `centroids` when given instead of recomputing.
pub fn fcm(u: &[f64], us: Shape4, y: &[f64], ys: Shape4, q: f64, per_pixel_mean: bool, centroids: Option<&[f64]>) -> f64 {
    let owned;
    let cent = match centroids {
        Some(c) => c,
        None => {
            owned = fcm_centroids(u, us, y, ys, q);
            &owned
        }
    };
    let (k, f) = (us[1], ys[1]);
    let mut total = 0.0;
    for n in 0..us[0] {
        for py in 0..us[2] {
            for px in 0..us[3] {
                for c in 0..k {
                    let mut d2 = 0.0;
                    for d in 0..f {
                        let diff = y[idx(ys, n, d, py, px)] - cent[(n * k + c) * f + d];
                        d2 += diff * diff;
                    }
                    total += u[idx(us, n, c, py, px)].powf(q) * d2;
                }
            }
        }
    }
    if per_pixel_mean {
        total / (us[0] * us[2] * us[3]) as f64
    } else {
        total
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max|a - n| / max(max|a|, max|n|)`; zero when both vectors vanish.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff = diff.max((a as f64 - n).abs());
        scale = scale.max((a as f64).abs()).max(n.abs());
    }
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
