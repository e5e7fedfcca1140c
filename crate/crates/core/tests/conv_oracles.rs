//! Convolution kernels against naive nested-loop oracles, plus the adjoint
//! identity tying `conv2d` to `transposed_conv2d`.

mod common;

use common::*;
use omnipose_core::conv::{
    conv2d, conv_output_size, separable_conv2d, transposed_conv2d, transposed_output_size,
    ConvGeom, ConvLayer,
};
use omnipose_core::ops::relu;
use omnipose_core::tensor::Tensor;
use rand::Rng;

/// Smallest input extent on which a kernel/stride/dilation/padding combo
/// produces at least one output element.
fn min_extent(kernel: usize, dilation: usize, padding: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    span.saturating_sub(2 * padding).max(1)
}

#[test]
fn conv2d_matches_naive_loops_across_geometry_grid() {
    let mut r = rng(101);
    let mut cases = 0;
    for &stride in &[1usize, 2] {
        for &dilation in &[1usize, 2, 6] {
            for &padding in &[0usize, 1, 2] {
                for &kernel in &[1usize, 3] {
                    if kernel == 1 && (dilation > 1 || padding > 1) {
                        continue;
                    }
                    let h = min_extent(kernel, dilation, padding) + r.gen_range(0..4);
                    let w = min_extent(kernel, dilation, padding) + r.gen_range(0..4);
                    let cin = r.gen_range(1..4);
                    let cout = r.gen_range(1..4);
                    let input = random_tensor(&[2, cin, h, w], &mut r);
                    let weights = random_tensor(&[cout, cin, kernel, kernel], &mut r);
                    let bias = random_tensor(&[cout], &mut r);
                    let layer = ConvLayer::standard(
                        weights.clone(),
                        Some(bias.clone()),
                        ConvGeom::square(stride, dilation, padding).unwrap(),
                    )
                    .unwrap();
                    let got = conv2d(&input, &layer).unwrap();
                    let want = naive_conv2d(
                        &input,
                        &weights,
                        Some(&bias),
                        (stride, stride),
                        (dilation, dilation),
                        (padding, padding),
                    );
                    let diff = max_rel_diff(&got, &want);
                    assert!(
                        diff < 1e-12,
                        "stride {stride} dilation {dilation} padding {padding} kernel {kernel}: \
                         worst relative diff {diff:.3e}"
                    );
                    cases += 1;
                }
            }
        }
    }
    assert!(cases >= 18, "geometry grid shrank to {cases} cases");
}

#[test]
fn conv2d_handles_rectangular_geometry() {
    let mut r = rng(102);
    for _ in 0..10 {
        let input = random_tensor(&[1, 2, 9, 7], &mut r);
        let weights = random_tensor(&[3, 2, 3, 2], &mut r);
        let geom = ConvGeom::new((2, 1), (1, 2), (1, 0)).unwrap();
        let layer = ConvLayer::standard(weights.clone(), None, geom).unwrap();
        let got = conv2d(&input, &layer).unwrap();
        let want = naive_conv2d(&input, &weights, None, (2, 1), (1, 2), (1, 0));
        assert!(max_rel_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn depthwise_matches_naive_loops() {
    let mut r = rng(103);
    for &dilation in &[1usize, 2, 6] {
        let h = min_extent(3, dilation, dilation);
        let input = random_tensor(&[2, 3, h + 3, h + 5], &mut r);
        let weights = random_tensor(&[3, 1, 3, 3], &mut r);
        let bias = random_tensor(&[3], &mut r);
        let layer = ConvLayer::depthwise(
            weights.clone(),
            Some(bias.clone()),
            ConvGeom::square(1, dilation, dilation).unwrap(),
        )
        .unwrap();
        let got = conv2d(&input, &layer).unwrap();
        let want = naive_depthwise_conv2d(
            &input,
            &weights,
            Some(&bias),
            (1, 1),
            (dilation, dilation),
            (dilation, dilation),
        );
        assert!(max_rel_diff(&got, &want) < 1e-12, "dilation {dilation}");
    }
}

#[test]
fn separable_equals_hand_chained_stages() {
    let mut r = rng(104);
    for _ in 0..10 {
        let input = random_tensor(&[1, 4, 8, 8], &mut r);
        let dw = random_tensor(&[4, 1, 3, 3], &mut r);
        let dwb = random_tensor(&[4], &mut r);
        let pw = random_tensor(&[6, 4, 1, 1], &mut r);
        let pwb = random_tensor(&[6], &mut r);
        let layer = ConvLayer::separable(
            dw.clone(),
            Some(dwb.clone()),
            pw.clone(),
            Some(pwb.clone()),
            ConvGeom::square(1, 1, 1).unwrap(),
        )
        .unwrap();
        let got = separable_conv2d(&input, &layer).unwrap();

        let stage1 = naive_depthwise_conv2d(&input, &dw, Some(&dwb), (1, 1), (1, 1), (1, 1));
        let hidden = relu(&stage1);
        let want = naive_conv2d(&hidden, &pw, Some(&pwb), (1, 1), (1, 1), (0, 0));
        assert!(max_rel_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn transposed_matches_naive_scatter_and_size_formula() {
    let mut r = rng(105);
    for &(stride, padding, outpad) in &[(1usize, 0usize, 0usize), (2, 1, 0), (2, 1, 1), (3, 2, 2)] {
        let input = random_tensor(&[2, 3, 5, 4], &mut r);
        let weights = random_tensor(&[3, 2, 3, 3], &mut r);
        let layer = ConvLayer::standard(
            weights.clone(),
            None,
            ConvGeom::square(stride, 1, padding).unwrap(),
        )
        .unwrap();
        let got = transposed_conv2d(&input, &layer, (outpad, outpad)).unwrap();
        let want = naive_transposed_conv2d(
            &input,
            &weights,
            (stride, stride),
            (1, 1),
            (padding, padding),
            (outpad, outpad),
        );
        assert_eq!(
            got.shape()[2],
            transposed_output_size(5, 3, stride, 1, padding, outpad).unwrap()
        );
        assert!(max_rel_diff(&got, &want) < 1e-12, "stride {stride} padding {padding}");
    }
}

/// <conv(x), y> must equal <x, conv_transposed(y)> for bias-free layers:
/// the two operations are adjoint linear maps by construction.
#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let mut r = rng(106);
    for trial in 0..12 {
        let stride = r.gen_range(1..3);
        let dilation = [1, 2, 6][r.gen_range(0..3)];
        let padding = r.gen_range(0..=dilation);
        let kernel = 3;
        let h = min_extent(kernel, dilation, padding) + r.gen_range(0..5);
        let w = min_extent(kernel, dilation, padding) + r.gen_range(0..5);
        let cin = r.gen_range(1..4);
        let cout = r.gen_range(1..4);
        let geom = ConvGeom::square(stride, dilation, padding).unwrap();
        let layer = ConvLayer::standard(
            random_tensor(&[cout, cin, kernel, kernel], &mut r),
            None,
            geom,
        )
        .unwrap();
        let x = random_tensor(&[1, cin, h, w], &mut r);
        let cx = conv2d(&x, &layer).unwrap();
        let y = random_tensor(cx.shape(), &mut r);
        // output_padding recovers the rows/cols the strided forward view
        // never reached, so the transposed result matches x's shape.
        let span = dilation * (kernel - 1) + 1;
        let oh = (h + 2 * padding - span) % stride;
        let ow = (w + 2 * padding - span) % stride;
        let ty = transposed_conv2d(&y, &layer, (oh, ow)).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs = cx.dot(&y).unwrap();
        let rhs = x.dot(&ty).unwrap();
        let bound = 1e-8 * x.l2_norm() * y.l2_norm();
        assert!(
            (lhs - rhs).abs() <= bound,
            "trial {trial}: <conv x, y> = {lhs}, <x, convT y> = {rhs}, bound {bound:.3e}"
        );
    }
}

#[test]
fn output_sizes_reject_oversized_kernels() {
    assert!(conv_output_size(3, 3, 1, 2, 0).is_err());
    assert!(conv_output_size(3, 3, 1, 2, 1).is_ok());
    // A 7x7 dilation-18 kernel spans 109 rows; padding 18 is not enough
    // for a 9-row input.
    assert!(conv_output_size(9, 7, 1, 18, 18).is_err());
}

#[test]
fn pointwise_is_a_channel_mix_per_pixel() {
    let mut r = rng(107);
    let input = random_tensor(&[1, 3, 4, 4], &mut r);
    let weights = random_tensor(&[2, 3, 1, 1], &mut r);
    let layer = ConvLayer::pointwise(weights.clone(), None).unwrap();
    let got = conv2d(&input, &layer).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            for co in 0..2 {
                let want: f64 = (0..3)
                    .map(|ci| input.at4(0, ci, y, x) * weights.at4(co, ci, 0, 0))
                    .sum();
                assert!((got.at4(0, co, y, x) - want).abs() < 1e-12);
            }
        }
    }
}
