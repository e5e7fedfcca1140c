//! Built-in verification suites for the selftest command.
//!
//! Every check carries its own reference implementation, written as plain
//! nested loops or closed-form values right here, so a broken kernel
//! cannot vouch for itself. These are the same families of checks the
//! test suite runs, scaled down to finish in seconds inside a deployed
//! binary.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, HeatmapMeta, Keypoint, PoseAnnotation, Refinement};
use crate::conv::{conv2d, separable_conv2d, transposed_conv2d, ConvGeom, ConvLayer};
use crate::gdm::{modulate, modulate_backward, GdmConfig};
use crate::grad::conv2d_backward;
use crate::metrics::{match_and_ap, oks, pckh, OksConfig};
use crate::model::{conv_params, Model, ModelConfig};
use crate::ops::avg_pool_global;
use crate::tensor::Tensor;
use crate::wasp::{waspv2_forward, WaspConfig, WaspWeights};
use crate::{io, Error};

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelfTestReport {
    pub checks: Vec<Check>,
}

impl SelfTestReport {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| !c.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        self.failures() == 0
    }

    /// One line per check plus a summary line, ready to print.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            out.push_str(&format!("{mark}  {:<44} {}\n", c.name, c.detail));
        }
        out.push_str(&format!(
            "{} checks, {} failed\n",
            self.checks.len(),
            self.failures()
        ));
        out
    }
}

type CheckResult = std::result::Result<String, String>;

pub fn run_all() -> SelfTestReport {
    let suites: &[(&'static str, fn() -> CheckResult)] = &[
        ("conv2d vs nested-loop reference", check_conv_standard),
        ("dilated strided conv vs reference", check_conv_dilated),
        ("separable conv vs composed reference", check_conv_separable),
        ("transposed conv vs gather reference", check_conv_transposed),
        ("global average pool vs direct mean", check_avg_pool),
        ("adjoint identity of the transposed conv", check_adjoint),
        ("conv gradients vs finite differences", check_conv_gradients),
        ("modulation gradients vs finite differences", check_modulation_gradients),
        ("modulation range contract", check_modulation_range),
        ("codec round trip under taylor refinement", check_codec_round_trip),
        ("refinement accuracy ordering", check_refinement_order),
        ("similarity hand fixture", check_oks_fixture),
        ("perfect predictions score perfectly", check_perfect_predictions),
        ("greedy matching vs exhaustive enumeration", check_matching),
        ("tensor file round trip", check_tensor_round_trip),
        ("tensor file corruption detection", check_tensor_corruption),
        ("separable parameter ratio", check_separable_ratio),
        ("head preserves spatial size", check_head_shape),
        ("deterministic initialization", check_deterministic_init),
    ];
    let checks = suites
        .iter()
        .map(|&(name, f)| match f() {
            Ok(detail) => Check { name, passed: true, detail },
            Err(detail) => Check { name, passed: false, detail },
        })
        .collect();
    SelfTestReport { checks }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| rel(x, y)).fold(0.0, f64::max)
}

fn expect_below(worst: f64, tol: f64) -> CheckResult {
    if worst <= tol {
        Ok(format!("max rel err {worst:.2e}"))
    } else {
        Err(format!("max rel err {worst:.2e} exceeds {tol:.0e}"))
    }
}

/// Reference convolution written as six explicit loops over the output.
fn reference_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeom,
    depthwise: bool,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4("reference input").unwrap();
    let (cout, wc, kh, kw) = w.dims4("reference weights").unwrap();
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;
    let oh = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let ow = (wd + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bt| bt.data()[co]);
                    let cins = if depthwise { co..co + 1 } else { 0..wc };
                    for ci in cins {
                        for u in 0..kh {
                            for v in 0..kw {
                                let iy = (oy * sh + u * dh) as isize - ph as isize;
                                let ix = (ox * sw + v * dw) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let wi = if depthwise { 0 } else { ci };
                                acc += x.data()
                                    [((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((co * wc + wi) * kh + u) * kw + v];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Reference transposed convolution as a gather over output positions:
/// out[oy] sums x[iy] w[u] wherever iy*s + u*d == oy + p.
fn reference_transposed(
    x: &Tensor,
    w: &Tensor,
    geom: &ConvGeom,
    output_padding: (usize, usize),
) -> Tensor {
    let (n, cin, h, wd) = x.dims4("reference input").unwrap();
    let (_, cout, kh, kw) = w.dims4("reference weights").unwrap();
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;
    let oh = (h - 1) * sh + dh * (kh - 1) + output_padding.0 + 1 - 2 * ph;
    let ow = (wd - 1) * sw + dw * (kw - 1) + output_padding.1 + 1 - 2 * pw;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let ty = oy + ph;
                                let tx = ox + pw;
                                if ty < u * dh || tx < v * dw {
                                    continue;
                                }
                                let (ry, rx) = (ty - u * dh, tx - v * dw);
                                if ry % sh != 0 || rx % sw != 0 {
                                    continue;
                                }
                                let (iy, ix) = (ry / sh, rx / sw);
                                if iy >= h || ix >= wd {
                                    continue;
                                }
                                acc += x.data()[((b * cin + ci) * h + iy) * wd + ix]
                                    * w.data()[((ci * cout + co) * kh + u) * kw + v];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn check_conv_standard() -> CheckResult {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..4 {
        let x = random_tensor(vec![2, 3, 9, 8], &mut r);
        let layer = ConvLayer::random_standard(3, 4, (3, 3), ConvGeom::square(1, 1, 1).unwrap(), &mut r);
        let got = conv2d(&x, &layer).map_err(|e| e.to_string())?;
        let want = reference_conv(&x, &layer.weights, layer.bias.as_ref(), &layer.geom, false);
        worst = worst.max(max_rel(&got, &want));
    }
    expect_below(worst, 1e-9)
}

fn check_conv_dilated() -> CheckResult {
    let mut r = rng(102);
    let mut worst = 0.0f64;
    for &(stride, dilation, padding) in &[(2, 2, 1), (1, 6, 6), (2, 12, 5), (1, 18, 18)] {
        let span = 2 * dilation + 1;
        let h = span + 3;
        let x = random_tensor(vec![1, 2, h, h + 2], &mut r);
        let geom = ConvGeom::square(stride, dilation, padding).unwrap();
        let layer = ConvLayer::random_standard(2, 3, (3, 3), geom, &mut r);
        let got = conv2d(&x, &layer).map_err(|e| e.to_string())?;
        let want = reference_conv(&x, &layer.weights, layer.bias.as_ref(), &geom, false);
        worst = worst.max(max_rel(&got, &want));
    }
    expect_below(worst, 1e-9)
}

fn check_conv_separable() -> CheckResult {
    let mut r = rng(103);
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let x = random_tensor(vec![1, 4, 10, 9], &mut r);
        let layer =
            ConvLayer::random_separable(4, 5, (3, 3), ConvGeom::square(1, 2, 2).unwrap(), &mut r);
        let got = separable_conv2d(&x, &layer).map_err(|e| e.to_string())?;
        let depth = reference_conv(&x, &layer.weights, layer.bias.as_ref(), &layer.geom, true);
        let hidden = depth.map(|v| v.max(0.0));
        let want = reference_conv(
            &hidden,
            layer.pointwise.as_ref().unwrap(),
            layer.pointwise_bias.as_ref(),
            &ConvGeom::unit(),
            false,
        );
        worst = worst.max(max_rel(&got, &want));
    }
    expect_below(worst, 1e-9)
}

fn check_conv_transposed() -> CheckResult {
    let mut r = rng(104);
    let mut worst = 0.0f64;
    for &(stride, padding, output_padding) in &[(2, 1, 0), (2, 1, 1), (1, 0, 0), (3, 2, 2)] {
        let x = random_tensor(vec![1, 3, 6, 5], &mut r);
        let geom = ConvGeom::square(stride, 1, padding).unwrap();
        let layer = ConvLayer::random_transposed(3, 2, (4, 4), geom, &mut r);
        let got =
            transposed_conv2d(&x, &layer, (output_padding, output_padding)).map_err(|e| e.to_string())?;
        let want = reference_transposed(&x, &layer.weights, &geom, (output_padding, output_padding));
        worst = worst.max(max_rel(&got, &want));
    }
    expect_below(worst, 1e-9)
}

fn check_avg_pool() -> CheckResult {
    let mut r = rng(105);
    let x = random_tensor(vec![2, 3, 7, 5], &mut r);
    let got = avg_pool_global(&x).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for n in 0..2 {
        for c in 0..3 {
            let plane = &x.data()[(n * 3 + c) * 35..(n * 3 + c + 1) * 35];
            let want = plane.iter().sum::<f64>() / 35.0;
            worst = worst.max(rel(got.data()[n * 3 + c], want));
        }
    }
    expect_below(worst, 1e-9)
}

fn check_adjoint() -> CheckResult {
    let mut r = rng(106);
    let geom = ConvGeom::square(2, 1, 1).unwrap();
    // Bias-free so only the linear part participates.
    let layer = ConvLayer {
        bias: None,
        ..ConvLayer::random_standard(3, 4, (4, 4), geom, &mut r)
    };
    let x = random_tensor(vec![1, 3, 8, 8], &mut r);
    let fwd = conv2d(&x, &layer).map_err(|e| e.to_string())?;
    let y = random_tensor(fwd.shape().to_vec(), &mut r);
    // The adjoint consumes cout channels and produces cin, so its weight
    // tensor is the same storage read as [consumed, produced, kh, kw].
    let back = transposed_conv2d(&y, &layer, (0, 0)).map_err(|e| e.to_string())?;
    let lhs = fwd.dot(&y).map_err(|e| e.to_string())?;
    let rhs = x.dot(&back).map_err(|e| e.to_string())?;
    let tol = 1e-10 * x.l2_norm() * y.l2_norm();
    if (lhs - rhs).abs() <= tol {
        Ok(format!("|<Ax,y> - <x,A'y>| = {:.2e}", (lhs - rhs).abs()))
    } else {
        Err(format!("<Ax,y> = {lhs} but <x,A'y> = {rhs}"))
    }
}

fn check_conv_gradients() -> CheckResult {
    let mut r = rng(107);
    let geom = ConvGeom::square(1, 2, 2).unwrap();
    let layer = ConvLayer::random_standard(2, 3, (3, 3), geom, &mut r);
    let x = random_tensor(vec![1, 2, 7, 7], &mut r);
    let probe = random_tensor(conv2d(&x, &layer).map_err(|e| e.to_string())?.shape().to_vec(), &mut r);
    let grads = conv2d_backward(&x, &layer, &probe).map_err(|e| e.to_string())?;
    let f = |x: &Tensor, layer: &ConvLayer| conv2d(x, layer).unwrap().dot(&probe).unwrap();

    let step = 1e-5;
    let mut worst = 0.0f64;
    for i in (0..x.numel()).step_by(11) {
        let mut hi = x.clone();
        hi.data_mut()[i] += step;
        let mut lo = x.clone();
        lo.data_mut()[i] -= step;
        let fd = (f(&hi, &layer) - f(&lo, &layer)) / (2.0 * step);
        worst = worst.max(rel(grads.input.data()[i], fd));
    }
    for i in (0..layer.weights.numel()).step_by(7) {
        let mut hi = layer.clone();
        hi.weights.data_mut()[i] += step;
        let mut lo = layer.clone();
        lo.weights.data_mut()[i] -= step;
        let fd = (f(&x, &hi) - f(&x, &lo)) / (2.0 * step);
        worst = worst.max(rel(grads.weights.data()[i], fd));
    }
    expect_below(worst, 1e-4)
}

fn check_modulation_gradients() -> CheckResult {
    let mut r = rng(108);
    let cfg = GdmConfig { kernel_size: 5, sigma: 1.5, ..GdmConfig::default() };
    let x = random_tensor(vec![1, 2, 7, 7], &mut r);
    let probe = random_tensor(vec![1, 2, 7, 7], &mut r);
    let grad = modulate_backward(&x, &cfg, &probe).map_err(|e| e.to_string())?;
    let f = |x: &Tensor| modulate(x, &cfg).unwrap().dot(&probe).unwrap();
    let step = 1e-6;
    let mut worst = 0.0f64;
    for i in (0..x.numel()).step_by(9) {
        let mut hi = x.clone();
        hi.data_mut()[i] += step;
        let mut lo = x.clone();
        lo.data_mut()[i] -= step;
        let fd = (f(&hi) - f(&lo)) / (2.0 * step);
        worst = worst.max(rel(grad.data()[i], fd));
    }
    expect_below(worst, 1e-4)
}

fn check_modulation_range() -> CheckResult {
    let mut r = rng(109);
    let cfg = GdmConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = random_tensor(vec![1, 1, 11, 13], &mut r);
        let y = modulate(&x, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((y.max_value() - x.max_value()).abs());
        worst = worst.max(y.min_value().abs());
    }
    if worst <= 1e-12 {
        Ok(format!("range drift {worst:.2e}"))
    } else {
        Err(format!("range drift {worst:.2e} exceeds 1e-12"))
    }
}

fn check_codec_round_trip() -> CheckResult {
    let meta = HeatmapMeta { stride: 4, offset: (0.0, 0.0), sigma: 3.0 };
    let mut r = rng(110);
    let (h, w) = (40, 40);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let cx = r.gen_range(9.0..w as f64 - 10.0);
        let cy = r.gen_range(9.0..h as f64 - 10.0);
        let (ix, iy) = meta.to_image(cx, cy);
        let ann = PoseAnnotation {
            image_id: 0,
            id: 0,
            keypoints: vec![Keypoint::new(ix, iy, 2)],
            area: 1.0,
            head_size: None,
            score: None,
        };
        let stack = codec::encode(&ann, &meta, h, w).map_err(|e| e.to_string())?;
        let decoded =
            codec::decode(&stack.planes, &meta, Refinement::Taylor).map_err(|e| e.to_string())?;
        let (hx, hy) = meta.to_heatmap(decoded[0].0.x, decoded[0].0.y);
        worst = worst.max(((hx - cx).powi(2) + (hy - cy).powi(2)).sqrt());
    }
    if worst <= 0.1 {
        Ok(format!("worst error {worst:.2e} heatmap px"))
    } else {
        Err(format!("worst error {worst:.3} heatmap px exceeds 0.1"))
    }
}

fn check_refinement_order() -> CheckResult {
    let meta = HeatmapMeta { stride: 1, offset: (0.0, 0.0), sigma: 3.0 };
    let mut r = rng(111);
    let (mut taylor_sum, mut quarter_sum) = (0.0, 0.0);
    for _ in 0..50 {
        let cx = r.gen_range(10.0..30.0);
        let cy = r.gen_range(10.0..30.0);
        let ann = PoseAnnotation {
            image_id: 0,
            id: 0,
            keypoints: vec![Keypoint::new(cx, cy, 2)],
            area: 1.0,
            head_size: None,
            score: None,
        };
        let stack = codec::encode(&ann, &meta, 40, 40).map_err(|e| e.to_string())?;
        let err = |refinement| -> std::result::Result<f64, String> {
            let d = codec::decode(&stack.planes, &meta, refinement).map_err(|e| e.to_string())?;
            Ok(((d[0].0.x - cx).powi(2) + (d[0].0.y - cy).powi(2)).sqrt())
        };
        taylor_sum += err(Refinement::Taylor)?;
        quarter_sum += err(Refinement::QuarterOffset)?;
    }
    if taylor_sum < quarter_sum {
        Ok(format!("mean: taylor {:.2e}, quarter {:.2e}", taylor_sum / 50.0, quarter_sum / 50.0))
    } else {
        Err(format!("taylor {taylor_sum} not better than quarter {quarter_sum}"))
    }
}

fn ann(image_id: i64, id: i64, pts: &[(f64, f64)], area: f64) -> PoseAnnotation {
    PoseAnnotation {
        image_id,
        id,
        keypoints: pts.iter().map(|&(x, y)| Keypoint::new(x, y, 2)).collect(),
        area,
        head_size: None,
        score: None,
    }
}

fn check_oks_fixture() -> CheckResult {
    // Distances (1, 2) at squared scale 100 with falloffs (0.1, 0.2) put
    // both exponents at -1/2 exactly.
    let cfg = OksConfig::for_falloff(vec![0.1, 0.2]);
    let gt = ann(0, 0, &[(5.0, 5.0), (20.0, 5.0)], 100.0);
    let pred = ann(0, 0, &[(6.0, 5.0), (20.0, 7.0)], 100.0);
    let got = oks(&pred, &gt, &cfg).map_err(|e| e.to_string())?;
    let want = (-0.5f64).exp();
    if (got - want).abs() <= 1e-9 {
        Ok(format!("oks {got:.6}"))
    } else {
        Err(format!("oks {got} but hand evaluation gives {want}"))
    }
}

fn check_perfect_predictions() -> CheckResult {
    let cfg = OksConfig::for_falloff(vec![0.1, 0.2]);
    let mut gts =
        vec![ann(0, 0, &[(5.0, 5.0), (20.0, 5.0)], 900.0), ann(1, 0, &[(8.0, 2.0), (3.0, 9.0)], 1200.0)];
    for g in &mut gts {
        g.head_size = Some(10.0);
    }
    let preds: Vec<_> = gts
        .iter()
        .map(|g| PoseAnnotation { score: Some(0.9), head_size: None, ..g.clone() })
        .collect();
    let report = match_and_ap(&preds, &gts, &cfg).map_err(|e| e.to_string())?;
    let rates = pckh(&preds, &gts, 0.5).map_err(|e| e.to_string())?;
    if report.ap == 1.0 && report.ar == 1.0 && rates.mean == 1.0 {
        Ok("AP = AR = 1.0, PCKh mean = 100%".into())
    } else {
        Err(format!("AP {} AR {} PCKh {}", report.ap, report.ar, rates.mean))
    }
}

fn check_matching() -> CheckResult {
    let mut r = rng(112);
    for trial in 0..20 {
        let ng = r.gen_range(1..=3);
        let np = r.gen_range(0..=3);
        let gts: Vec<_> = (0..ng)
            .map(|i| ann(0, i as i64, &[(r.gen_range(0.0..30.0), r.gen_range(0.0..30.0))], 900.0))
            .collect();
        let preds: Vec<_> = (0..np)
            .map(|i| PoseAnnotation {
                score: Some((r.gen_range(1..=4) as f64) / 4.0),
                ..ann(0, i as i64, &[(r.gen_range(0.0..30.0), r.gen_range(0.0..30.0))], 900.0)
            })
            .collect();
        let t = 0.5;
        let mut cfg = OksConfig::for_falloff(vec![0.1]);
        cfg.thresholds = vec![t];
        let report = match_and_ap(&preds, &gts, &cfg).map_err(|e| e.to_string())?;

        // Exhaustive reference: predictions in score order each take the
        // best remaining instance, found by trying every assignment.
        let mut order: Vec<usize> = (0..np).collect();
        order.sort_by(|&a, &b| preds[b].score.unwrap().partial_cmp(&preds[a].score.unwrap()).unwrap());
        let mut taken = vec![false; ng];
        let mut want: Vec<(i64, i64)> = Vec::new();
        for &pi in &order {
            let mut best: Option<(usize, f64)> = None;
            for gi in 0..ng {
                if taken[gi] {
                    continue;
                }
                let s = oks(&preds[pi], &gts[gi], &cfg).map_err(|e| e.to_string())?;
                if s >= t && best.map_or(true, |(_, bs)| s > bs) {
                    best = Some((gi, s));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                want.push((preds[pi].id, gts[gi].id));
            }
        }
        want.sort_unstable();
        let got: Vec<(i64, i64)> = report.matches.iter().map(|m| (m.pred_id, m.gt_id)).collect();
        if got != want {
            return Err(format!("trial {trial}: matches {got:?}, reference {want:?}"));
        }
    }
    Ok("20 randomized instance sets agree".into())
}

fn scratch_dir() -> std::path::PathBuf {
    std::env::temp_dir().join(format!("omnipose-selftest-{}", std::process::id()))
}

fn check_tensor_round_trip() -> CheckResult {
    let dir = scratch_dir();
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("roundtrip.ten");
    let mut r = rng(113);
    let t = Tensor::uniform(vec![3, 4, 5], 1e6, &mut r);
    let result = (|| -> std::result::Result<(), String> {
        io::write_tensor(&path, &t, io::Dtype::F64).map_err(|e| e.to_string())?;
        let back = io::read_tensor(&path).map_err(|e| e.to_string())?;
        if back.shape() != t.shape() {
            return Err(format!("shape {:?} came back as {:?}", t.shape(), back.shape()));
        }
        for (a, b) in back.data().iter().zip(t.data()) {
            if a.to_bits() != b.to_bits() {
                return Err(format!("value {b} came back as {a}"));
            }
        }
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result.map(|()| "bit-exact".into())
}

fn check_tensor_corruption() -> CheckResult {
    let dir = scratch_dir();
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("corrupt.ten");
    let result = (|| -> CheckResult {
        io::write_tensor(&path, &Tensor::filled(vec![2, 2], 1.0), io::Dtype::F64)
            .map_err(|e| e.to_string())?;
        let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).map_err(|e| e.to_string())?;
        match io::read_tensor(&path) {
            Err(Error::Format { offset, .. }) => Ok(format!("truncation flagged at byte {offset}")),
            Err(other) => Err(format!("wrong error kind: {other}")),
            Ok(_) => Err("truncated file decoded silently".into()),
        }
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn check_separable_ratio() -> CheckResult {
    let mut r = rng(114);
    let geom = ConvGeom::square(1, 1, 1).unwrap();
    let standard = ConvLayer { bias: None, ..ConvLayer::random_standard(48, 48, (3, 3), geom, &mut r) };
    let mut separable = ConvLayer::random_separable(48, 48, (3, 3), geom, &mut r);
    separable.bias = None;
    separable.pointwise_bias = None;
    let ratio = conv_params(&separable) as f64 / conv_params(&standard) as f64;
    let want = (9.0 * 48.0 + 48.0 * 48.0) / (9.0 * 48.0 * 48.0);
    if (ratio - want).abs() <= 1e-12 && ratio < 1.0 {
        Ok(format!("ratio {ratio:.4}"))
    } else {
        Err(format!("ratio {ratio} differs from closed form {want}"))
    }
}

fn check_head_shape() -> CheckResult {
    let cfg = WaspConfig {
        branch_channels: 8,
        llf_channels: 4,
        num_joints: 3,
        ..WaspConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let mut r = rng(115);
    let weights = WaspWeights::init(&cfg, 6, &mut r).map_err(|e| e.to_string())?;
    for (h, w) in [(37, 29), (16, 16)] {
        let f0 = random_tensor(vec![1, 8, h, w], &mut r);
        let f_llf = random_tensor(vec![1, 6, h, w], &mut r);
        let out = waspv2_forward(&f0, &f_llf, &cfg, &weights).map_err(|e| e.to_string())?;
        if out.shape() != [1, 3, h, w] {
            return Err(format!("{h}x{w} input produced {:?}", out.shape()));
        }
    }
    Ok("dilations preserve spatial size".into())
}

fn check_deterministic_init() -> CheckResult {
    let cfg = tiny_model_config();
    let a = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
    let b = Model::new(cfg).map_err(|e| e.to_string())?;
    let mut r = rng(116);
    let image = Tensor::uniform(vec![1, 3, 32, 32], 1.0, &mut r);
    let ya = a.forward(&image).map_err(|e| e.to_string())?;
    let yb = b.forward(&image).map_err(|e| e.to_string())?;
    for (x, y) in ya.data().iter().zip(yb.data()) {
        if x.to_bits() != y.to_bits() {
            return Err(format!("same seed, different outputs: {x} vs {y}"));
        }
    }
    Ok("same seed, bit-identical outputs".into())
}

/// The smallest legal model: one branch, one exchange block, two joints.
fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.backbone.branches = vec![crate::model::BranchSpec { channels: 4, divisor: 4 }];
    cfg.backbone.num_exchange_blocks = 1;
    cfg.backbone.modulated_ups = None;
    cfg.wasp = WaspConfig {
        dilations: vec![1, 2],
        branch_channels: 4,
        llf_channels: 4,
        num_joints: 2,
        ..WaspConfig::default()
    };
    cfg.input_size = (32, 32);
    cfg.heatmap_stride = 4;
    cfg.seed = 7;
    cfg
}
