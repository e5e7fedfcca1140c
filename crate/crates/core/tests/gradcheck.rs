//! Finite-difference checks for every hand-derived backward pass. Each op
//! gets randomized trials over shapes and geometry; the checker perturbs
//! one coordinate at a time and compares against the analytic cotangent
//! at 1e-4 relative tolerance.

mod common;

use common::*;
use omnipose_core::conv::{conv2d, separable_conv2d, transposed_conv2d, ConvGeom, ConvLayer};
use omnipose_core::gdm::{modulate, modulate_backward, GdmConfig};
use omnipose_core::grad::*;
use omnipose_core::ops::*;
use omnipose_core::tensor::Tensor;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// A fixed random projection turns a tensor-valued op into the scalar the
/// finite-difference probe needs; its gradient seeds the backward pass.
fn project(out: &Tensor, probe: &Tensor) -> f64 {
    out.dot(probe).unwrap()
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut r = rng(201);
    for trial in 0..20 {
        let stride = r.gen_range(1..3);
        let dilation = [1usize, 2, 6][r.gen_range(0..3)];
        let padding = r.gen_range(0..=dilation.min(2));
        let kernel = [1usize, 3][r.gen_range(0..2)];
        let span = dilation * (kernel - 1) + 1;
        let h = span.saturating_sub(2 * padding).max(1) + r.gen_range(0..4);
        let w = span.saturating_sub(2 * padding).max(1) + r.gen_range(0..4);
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..4);
        let geom = ConvGeom::square(stride, dilation, padding).unwrap();
        let input = random_tensor(&[2, cin, h, w], &mut r);
        let weights = random_tensor(&[cout, cin, kernel, kernel], &mut r);
        let bias = random_tensor(&[cout], &mut r);
        let layer =
            ConvLayer::standard(weights.clone(), Some(bias.clone()), geom).unwrap();
        let probe = random_tensor(conv2d(&input, &layer).unwrap().shape(), &mut r);

        let g = conv2d_backward(&input, &layer, &probe).unwrap();
        let name = format!("conv2d trial {trial}");
        assert_gradient_close(&g.input, &input, STEP, TOL, &format!("{name} input"), |x| {
            project(&conv2d(x, &layer).unwrap(), &probe)
        });
        assert_gradient_close(&g.weights, &weights, STEP, TOL, &format!("{name} weights"), |w| {
            let l = ConvLayer::standard(w.clone(), Some(bias.clone()), geom).unwrap();
            project(&conv2d(&input, &l).unwrap(), &probe)
        });
        assert_gradient_close(
            g.bias.as_ref().unwrap(),
            &bias,
            STEP,
            TOL,
            &format!("{name} bias"),
            |b| {
                let l = ConvLayer::standard(weights.clone(), Some(b.clone()), geom).unwrap();
                project(&conv2d(&input, &l).unwrap(), &probe)
            },
        );
    }
}

#[test]
fn depthwise_gradients_match_finite_differences() {
    let mut r = rng(202);
    for trial in 0..20 {
        let dilation = [1usize, 2][r.gen_range(0..2)];
        let geom = ConvGeom::square(1, dilation, dilation).unwrap();
        let c = r.gen_range(1..4);
        let input = random_tensor(&[1, c, 6, 7], &mut r);
        let weights = random_tensor(&[c, 1, 3, 3], &mut r);
        let layer = ConvLayer::depthwise(weights.clone(), None, geom).unwrap();
        let probe = random_tensor(conv2d(&input, &layer).unwrap().shape(), &mut r);

        let g = conv2d_backward(&input, &layer, &probe).unwrap();
        let name = format!("depthwise trial {trial}");
        assert_gradient_close(&g.input, &input, STEP, TOL, &format!("{name} input"), |x| {
            project(&conv2d(x, &layer).unwrap(), &probe)
        });
        assert_gradient_close(&g.weights, &weights, STEP, TOL, &format!("{name} weights"), |w| {
            let l = ConvLayer::depthwise(w.clone(), None, geom).unwrap();
            project(&conv2d(&input, &l).unwrap(), &probe)
        });
    }
}

#[test]
fn separable_gradients_match_finite_differences() {
    let mut r = rng(203);
    for trial in 0..20 {
        let stride = r.gen_range(1..3);
        let geom = ConvGeom::square(stride, 1, 1).unwrap();
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..4);
        // Shift inputs away from zero so the interstage ReLU has no
        // activations within a finite-difference step of its kink.
        let mut input = random_tensor(&[1, cin, 7, 6], &mut r);
        for v in input.data_mut() {
            *v += 0.2 * v.signum();
        }
        let dw = random_tensor(&[cin, 1, 3, 3], &mut r);
        let dwb = random_tensor(&[cin], &mut r);
        let pw = random_tensor(&[cout, cin, 1, 1], &mut r);
        let pwb = random_tensor(&[cout], &mut r);
        let mk = |dw: &Tensor, dwb: &Tensor, pw: &Tensor, pwb: &Tensor| {
            ConvLayer::separable(
                dw.clone(),
                Some(dwb.clone()),
                pw.clone(),
                Some(pwb.clone()),
                geom,
            )
            .unwrap()
        };
        let layer = mk(&dw, &dwb, &pw, &pwb);
        let probe = random_tensor(separable_conv2d(&input, &layer).unwrap().shape(), &mut r);

        let g = separable_conv2d_backward(&input, &layer, &probe).unwrap();
        let name = format!("separable trial {trial}");
        assert_gradient_close(&g.input, &input, STEP, TOL, &format!("{name} input"), |x| {
            project(&separable_conv2d(x, &layer).unwrap(), &probe)
        });
        assert_gradient_close(
            &g.depthwise_weights,
            &dw,
            STEP,
            TOL,
            &format!("{name} depthwise weights"),
            |t| project(&separable_conv2d(&input, &mk(t, &dwb, &pw, &pwb)).unwrap(), &probe),
        );
        assert_gradient_close(
            g.depthwise_bias.as_ref().unwrap(),
            &dwb,
            STEP,
            TOL,
            &format!("{name} depthwise bias"),
            |t| project(&separable_conv2d(&input, &mk(&dw, t, &pw, &pwb)).unwrap(), &probe),
        );
        assert_gradient_close(
            &g.pointwise_weights,
            &pw,
            STEP,
            TOL,
            &format!("{name} pointwise weights"),
            |t| project(&separable_conv2d(&input, &mk(&dw, &dwb, t, &pwb)).unwrap(), &probe),
        );
        assert_gradient_close(
            g.pointwise_bias.as_ref().unwrap(),
            &pwb,
            STEP,
            TOL,
            &format!("{name} pointwise bias"),
            |t| project(&separable_conv2d(&input, &mk(&dw, &dwb, &pw, t)).unwrap(), &probe),
        );
    }
}

#[test]
fn transposed_gradients_match_finite_differences() {
    let mut r = rng(204);
    for trial in 0..20 {
        let stride = r.gen_range(1..3);
        let padding = r.gen_range(0..2);
        let outpad = r.gen_range(0..stride);
        let geom = ConvGeom::square(stride, 1, padding).unwrap();
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..4);
        let input = random_tensor(&[1, cin, 5, 4], &mut r);
        let weights = random_tensor(&[cin, cout, 3, 3], &mut r);
        let layer = ConvLayer::standard(weights.clone(), None, geom).unwrap();
        let out = transposed_conv2d(&input, &layer, (outpad, outpad)).unwrap();
        let probe = random_tensor(out.shape(), &mut r);

        let g = transposed_conv2d_backward(&input, &layer, &probe).unwrap();
        let name = format!("transposed trial {trial}");
        assert_gradient_close(&g.input, &input, STEP, TOL, &format!("{name} input"), |x| {
            project(&transposed_conv2d(x, &layer, (outpad, outpad)).unwrap(), &probe)
        });
        assert_gradient_close(&g.weights, &weights, STEP, TOL, &format!("{name} weights"), |w| {
            let l = ConvLayer::standard(w.clone(), None, geom).unwrap();
            project(&transposed_conv2d(&input, &l, (outpad, outpad)).unwrap(), &probe)
        });
    }
}

#[test]
fn elementwise_and_structural_gradients_match_finite_differences() {
    let mut r = rng(205);
    for _ in 0..20 {
        // ReLU, away from the kink.
        let mut x = random_tensor(&[1, 2, 4, 4], &mut r);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.1;
            }
        }
        let probe = random_tensor(&[1, 2, 4, 4], &mut r);
        let g = relu_backward(&x, &probe).unwrap();
        assert_gradient_close(&g, &x, STEP, TOL, "relu", |t| project(&relu(t), &probe));

        // Add.
        let b = random_tensor(&[1, 2, 4, 4], &mut r);
        let (ga, gb) = add_backward(&probe);
        assert_gradient_close(&ga, &x, STEP, TOL, "add lhs", |t| {
            project(&add(t, &b).unwrap(), &probe)
        });
        assert_gradient_close(&gb, &b, STEP, TOL, "add rhs", |t| {
            project(&add(&x, t).unwrap(), &probe)
        });

        // Concat.
        let c2 = random_tensor(&[1, 3, 4, 4], &mut r);
        let joined_probe = random_tensor(&[1, 5, 4, 4], &mut r);
        let parts = concat_channels_backward(&joined_probe, &[2, 3]).unwrap();
        assert_gradient_close(&parts[0], &x, STEP, TOL, "concat part 0", |t| {
            project(&concat_channels(&[t, &c2]).unwrap(), &joined_probe)
        });
        assert_gradient_close(&parts[1], &c2, STEP, TOL, "concat part 1", |t| {
            project(&concat_channels(&[&x, t]).unwrap(), &joined_probe)
        });

        // Global average pooling and broadcast.
        let pool_probe = random_tensor(&[1, 2, 1, 1], &mut r);
        let g = avg_pool_global_backward(&pool_probe, 4, 4).unwrap();
        assert_gradient_close(&g, &x, STEP, TOL, "avg_pool_global", |t| {
            project(&avg_pool_global(t).unwrap(), &pool_probe)
        });
        let narrow = random_tensor(&[1, 2, 1, 1], &mut r);
        let wide_probe = random_tensor(&[1, 2, 3, 5], &mut r);
        let g = broadcast_hw_backward(&wide_probe).unwrap();
        assert_gradient_close(&g, &narrow, STEP, TOL, "broadcast_hw", |t| {
            project(&broadcast_hw(t, 3, 5).unwrap(), &wide_probe)
        });

        // Per-channel affine.
        let scale = random_tensor(&[2], &mut r);
        let shift = random_tensor(&[2], &mut r);
        let g = channel_affine_backward(&x, &scale, &probe).unwrap();
        assert_gradient_close(&g.input, &x, STEP, TOL, "affine input", |t| {
            project(&channel_affine(t, &scale, &shift).unwrap(), &probe)
        });
        assert_gradient_close(&g.scale, &scale, STEP, TOL, "affine scale", |t| {
            project(&channel_affine(&x, t, &shift).unwrap(), &probe)
        });
        assert_gradient_close(&g.shift, &shift, STEP, TOL, "affine shift", |t| {
            project(&channel_affine(&x, &scale, t).unwrap(), &probe)
        });
    }
}

#[test]
fn modulate_gradient_matches_finite_differences() {
    let cfg = GdmConfig {
        kernel_size: 5,
        sigma: 1.5,
        ..GdmConfig::default()
    };
    let mut r = rng(206);
    for trial in 0..10 {
        // Uniform noise gives well-separated per-plane extrema with
        // overwhelming probability, keeping the min/max subgradients stable
        // under the probe step.
        let x = random_tensor(&[1, 2, 6, 6], &mut r);
        let probe = random_tensor(&[1, 2, 6, 6], &mut r);
        let g = modulate_backward(&x, &cfg, &probe).unwrap();
        assert_gradient_close(&g, &x, STEP, TOL, &format!("modulate trial {trial}"), |t| {
            project(&modulate(t, &cfg).unwrap(), &probe)
        });
    }
}
