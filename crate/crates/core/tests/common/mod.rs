//! Shared test oracles: naive convolution loops written straight from the
//! definitions, independent of the library's kernels, plus a central
//! finite-difference gradient checker.

// Each integration test binary compiles its own copy and uses a subset.
#![allow(dead_code)]

use omnipose_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Padded read: zero outside the plane.
fn read(t: &Tensor, n: usize, c: usize, y: isize, x: isize) -> f64 {
    let (_, _, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        t.at4(n, c, y as usize, x as usize)
    }
}

/// Direct translation of the convolution definition: for every output
/// element, loop over all kernel taps and input channels.
pub fn naive_conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    dilation: (usize, usize),
    padding: (usize, usize),
) -> Tensor {
    let [n, cin, h, w] = input.shape() else { panic!() };
    let [cout, wcin, kh, kw] = weights.shape() else { panic!() };
    assert_eq!(cin, wcin);
    let out_h = (h + 2 * padding.0 - dilation.0 * (kh - 1) - 1) / stride.0 + 1;
    let out_w = (w + 2 * padding.1 - dilation.1 * (kw - 1) - 1) / stride.1 + 1;
    let mut out = Tensor::zeros(vec![*n, *cout, out_h, out_w]);
    for b in 0..*n {
        for co in 0..*cout {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..*cin {
                        for u in 0..*kh {
                            for v in 0..*kw {
                                let iy = (oy * stride.0 + u * dilation.0) as isize
                                    - padding.0 as isize;
                                let ix = (ox * stride.1 + v * dilation.1) as isize
                                    - padding.1 as isize;
                                acc += read(input, b, ci, iy, ix) * weights.at4(co, ci, u, v);
                            }
                        }
                    }
                    let idx = ((b * cout + co) * out_h + oy) * out_w + ox;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Depthwise variant of the naive loop: channel c only reads channel c.
pub fn naive_depthwise_conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    dilation: (usize, usize),
    padding: (usize, usize),
) -> Tensor {
    let [n, cin, h, w] = input.shape() else { panic!() };
    let [wc, one, kh, kw] = weights.shape() else { panic!() };
    assert_eq!(cin, wc);
    assert_eq!(*one, 1);
    let out_h = (h + 2 * padding.0 - dilation.0 * (kh - 1) - 1) / stride.0 + 1;
    let out_w = (w + 2 * padding.1 - dilation.1 * (kw - 1) - 1) / stride.1 + 1;
    let mut out = Tensor::zeros(vec![*n, *cin, out_h, out_w]);
    for b in 0..*n {
        for c in 0..*cin {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.map_or(0.0, |t| t.data()[c]);
                    for u in 0..*kh {
                        for v in 0..*kw {
                            let iy =
                                (oy * stride.0 + u * dilation.0) as isize - padding.0 as isize;
                            let ix =
                                (ox * stride.1 + v * dilation.1) as isize - padding.1 as isize;
                            acc += read(input, b, c, iy, ix) * weights.at4(c, 0, u, v);
                        }
                    }
                    let idx = ((b * cin + c) * out_h + oy) * out_w + ox;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution as a literal scatter: every input element throws
/// weighted copies of the kernel onto the output.
pub fn naive_transposed_conv2d(
    input: &Tensor,
    weights: &Tensor,
    stride: (usize, usize),
    dilation: (usize, usize),
    padding: (usize, usize),
    output_padding: (usize, usize),
) -> Tensor {
    let [n, c_in, h, w] = input.shape() else { panic!() };
    let [wc_in, c_out, kh, kw] = weights.shape() else { panic!() };
    assert_eq!(c_in, wc_in);
    let out_h =
        (h - 1) * stride.0 + dilation.0 * (kh - 1) + output_padding.0 + 1 - 2 * padding.0;
    let out_w =
        (w - 1) * stride.1 + dilation.1 * (kw - 1) + output_padding.1 + 1 - 2 * padding.1;
    let mut out = Tensor::zeros(vec![*n, *c_out, out_h, out_w]);
    for b in 0..*n {
        for cs in 0..*c_in {
            for y in 0..*h {
                for x in 0..*w {
                    let val = input.at4(b, cs, y, x);
                    for cp in 0..*c_out {
                        for u in 0..*kh {
                            for v in 0..*kw {
                                let oy =
                                    (y * stride.0 + u * dilation.0) as isize - padding.0 as isize;
                                let ox =
                                    (x * stride.1 + v * dilation.1) as isize - padding.1 as isize;
                                if oy < 0
                                    || ox < 0
                                    || oy >= out_h as isize
                                    || ox >= out_w as isize
                                {
                                    continue;
                                }
                                let idx = ((b * c_out + cp) * out_h + oy as usize) * out_w
                                    + ox as usize;
                                out.data_mut()[idx] += val * weights.at4(cs, cp, u, v);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative comparison against an independently computed reference:
/// |a - b| <= tol * max(1, |a|, |b|) elementwise. Returns the worst ratio.
pub fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// Central finite differences of a scalar function at `point`, one
/// coordinate at a time.
pub fn finite_difference(
    point: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> Tensor {
    let mut grad = Tensor::zeros(point.shape().to_vec());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
    }
    grad
}

/// Checks an analytic gradient against central differences, coordinate by
/// coordinate, with the mixed absolute/relative criterion
/// |analytic - numeric| <= tol * max(1, |analytic|, |numeric|).
pub fn assert_gradient_close(
    analytic: &Tensor,
    point: &Tensor,
    step: f64,
    tol: f64,
    what: &str,
    f: impl FnMut(&Tensor) -> f64,
) {
    let numeric = finite_difference(point, step, f);
    let worst = max_rel_diff(analytic, &numeric);
    assert!(
        worst <= tol,
        "{what}: gradient mismatch, worst relative error {worst:.3e} (tol {tol:.0e})"
    );
}
