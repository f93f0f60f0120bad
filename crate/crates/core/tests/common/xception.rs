//! Structural checks of the separable-block network.

use rand::Rng;

use vseg::arch::{build, BlockKind, UNetSpec, Variant};
use vseg::data::LabelMask;
use vseg::loss::{weighted_cross_entropy, ClassWeights};
use vseg::nn::{conv2d, Padding, SeparableConv2d};
use vseg::tensor::{Graph, Tensor};

use super::*;

pub const FACTOR_TOLERANCE: f32 = 1e-5;

/// A separable layer equals a dense convolution whose kernel is the outer
/// product `W[o, i] = pointwise[o, i] * depthwise[i]`.
pub fn factored_kernel() -> Result<String, String> {
    let mut rng = rng(41);
    let mut worst = 0.0f32;
    for i in 0..20 {
        let (ci, co) = (rng.random_range(1..=5), rng.random_range(1..=6));
        let (h, w) = (rng.random_range(3..=9), rng.random_range(3..=9));
        let mut layer = SeparableConv2d::new(ci, co, 3, Padding::Same, &mut rng);
        layer.bias = Tensor::new(vec![co], uniform(&mut rng, co, -1.0, 1.0)).unwrap();
        let x = Tensor::new(vec![2, ci, h, w], uniform(&mut rng, 2 * ci * h * w, -1.0, 1.0)).unwrap();

        let mut dense = vec![0.0f32; co * ci * 9];
        let (dw, pw) = (layer.depthwise.data(), layer.pointwise.data());
        for o in 0..co {
            for c in 0..ci {
                for t in 0..9 {
                    dense[(o * ci + c) * 9 + t] = pw[o * ci + c] * dw[c * 9 + t];
                }
            }
        }

        let mut g = Graph::new();
        let xv = g.constant(x);
        let vars = layer.bind(&mut g);
        let sep = layer.forward(&mut g, xv, &vars).map_err(|e| e.to_string())?;
        let wv = g.constant(Tensor::new(vec![co, ci, 3, 3], dense).unwrap());
        let bv = g.constant(layer.bias.clone());
        let full = conv2d(&mut g, xv, wv, Some(bv), 1, Padding::Same).map_err(|e| e.to_string())?;
        let err = g.value(sep).data().iter().zip(g.value(full).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        if err > FACTOR_TOLERANCE {
            return Err(format!("instance {i}: max deviation {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(format!("20 layers, max deviation {worst:.1e}"))
}

/// Separable network against the dense network with the same widths.
pub fn parameter_count() -> Result<String, String> {
    let sep_spec = UNetSpec::xception_default();
    let dense_spec = UNetSpec { block: BlockKind::DenseDouble, ..sep_spec.clone() };
    let sep = build(Variant::Xception, &sep_spec, 0).map_err(|e| e.to_string())?.param_count();
    let dense = build(Variant::UNet, &dense_spec, 0).map_err(|e| e.to_string())?.param_count();
    if sep >= dense {
        return Err(format!("separable {sep} parameters, dense {dense}"));
    }
    Ok(format!("widths {:?}: {sep} separable vs {dense} dense parameters", sep_spec.encoder_filters))
}

/// One backward pass through the separable network reaches its first layer.
pub fn first_layer_gradient() -> Result<String, String> {
    let spec = UNetSpec { input_shape: (3, 32, 32), ..UNetSpec::xception_default() };
    let model = build(Variant::Xception, &spec, 7).map_err(|e| e.to_string())?;
    let mut rng = rng(42);
    let x = Tensor::new(vec![2, 3, 32, 32], uniform(&mut rng, 2 * 3 * 32 * 32, 0.0, 1.0)).unwrap();
    let masks: Vec<LabelMask> = (0..2)
        .map(|_| LabelMask::new(32, 32, (0..32 * 32).map(|_| rng.random_range(0..3u8)).collect()).unwrap())
        .collect();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let f = model.forward(&mut g, xv).map_err(|e| e.to_string())?;
    let refs: Vec<&LabelMask> = masks.iter().collect();
    let loss = weighted_cross_entropy(&mut g, f.logits, &refs, &ClassWeights::uniform(3)).map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;
    let first = &model.layers()[0];
    let count = first.layer.params().len();
    let names: Vec<String> = model.parameters().into_iter().take(count).map(|(n, _)| n).collect();
    let mut norms = Vec::new();
    for (name, v) in names.iter().zip(&f.params[..count]) {
        let grad = g.grad(*v).ok_or_else(|| format!("{name}: no gradient"))?;
        let norm = grad.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(format!("{name}: gradient norm {norm}"));
        }
        norms.push(format!("{name} {norm:.2e}"));
    }
    Ok(format!("first-layer gradient norms: {}", norms.join(", ")))
}
