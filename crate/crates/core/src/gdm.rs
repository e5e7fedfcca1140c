//! Gaussian heatmap modulation.
//!
//! A feature plane is blurred with a fixed Gaussian kernel and then
//! rescaled per channel so its minimum is 0 and its maximum equals the
//! maximum of the original plane:
//!
//! ```text
//! blurred = gaussian (x) plane          (depthwise, zero padding)
//! out     = (blurred - min) / (max - min) * max(plane)
//! ```
//!
//! The rescale makes the kernel's normalization irrelevant to the output;
//! we keep the center element at 1 so kernels are easy to eyeball. The
//! combination of a learned transposed-convolution upsample with this
//! modulation (`gdm_upsample`) is what the multi-resolution backbone uses
//! on its low-to-high resolution paths: the blur spreads a peak's mass
//! smoothly while the rescale pins the peak height, so upsampled response
//! maps keep clean, isolated maxima.

use crate::conv::{self, ConvGeom, ConvLayer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Geometry of the learned upsampling step inside `gdm_upsample`. The
/// defaults (4x4 kernel, stride 2, padding 1) double each spatial extent
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpsampleGeom {
    #[serde(default = "default_up_kernel")]
    pub kernel: usize,
    #[serde(default = "default_up_stride")]
    pub stride: usize,
    #[serde(default = "default_up_padding")]
    pub padding: usize,
    #[serde(default)]
    pub output_padding: usize,
}

fn default_up_kernel() -> usize {
    4
}
fn default_up_stride() -> usize {
    2
}
fn default_up_padding() -> usize {
    1
}

impl Default for UpsampleGeom {
    fn default() -> Self {
        Self {
            kernel: 4,
            stride: 2,
            padding: 1,
            output_padding: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdmConfig {
    #[serde(default = "default_kernel_size")]
    pub kernel_size: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub upsample: UpsampleGeom,
}

fn default_kernel_size() -> usize {
    7
}
fn default_sigma() -> f64 {
    2.0
}

impl Default for GdmConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            sigma: 2.0,
            upsample: UpsampleGeom::default(),
        }
    }
}

impl GdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "modulation kernel size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!(
                "modulation sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.upsample.kernel == 0 || self.upsample.stride == 0 {
            return Err(Error::Config(
                "upsample kernel and stride must be positive".into(),
            ));
        }
        if self.upsample.output_padding >= self.upsample.stride {
            return Err(Error::Config(format!(
                "upsample output_padding {} must be smaller than stride {}",
                self.upsample.output_padding, self.upsample.stride
            )));
        }
        Ok(())
    }
}

/// Square Gaussian kernel with the center element equal to 1:
/// k[u,v] = exp(-((u-c)^2 + (v-c)^2) / (2 sigma^2)) with c the center
/// index. `size` must be odd so the center is a single element.
pub fn gaussian_kernel2d(size: usize, sigma: f64) -> Result<Tensor> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::Config(format!(
            "gaussian kernel size must be odd and positive, got {size}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let c = (size / 2) as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = Tensor::zeros(vec![size, size]);
    let d = k.data_mut();
    for u in 0..size {
        for v in 0..size {
            let du = u as f64 - c;
            let dv = v as f64 - c;
            d[u * size + v] = (-(du * du + dv * dv) * inv).exp();
        }
    }
    Ok(k)
}

/// Depthwise blur of every channel plane with the config's Gaussian kernel,
/// zero padded to preserve the spatial extent.
fn blur(input: &Tensor, cfg: &GdmConfig) -> Result<Tensor> {
    let (_, c, _, _) = input.dims4("modulation input")?;
    let k = gaussian_kernel2d(cfg.kernel_size, cfg.sigma)?;
    let size = cfg.kernel_size;
    let mut weights = Tensor::zeros(vec![c, 1, size, size]);
    for ch in 0..c {
        weights.data_mut()[ch * size * size..(ch + 1) * size * size].copy_from_slice(k.data());
    }
    let geom = ConvGeom::square(1, 1, (size - 1) / 2)?;
    conv::conv2d_raw(input, &weights, None, &geom, true)
}

/// First-occurrence (row-major) argmin and argmax with their values.
fn plane_extrema(plane: &[f64]) -> (usize, f64, usize, f64) {
    let mut imin = 0;
    let mut vmin = plane[0];
    let mut imax = 0;
    let mut vmax = plane[0];
    for (i, &v) in plane.iter().enumerate() {
        if v < vmin {
            vmin = v;
            imin = i;
        }
        if v > vmax {
            vmax = v;
            imax = i;
        }
    }
    (imin, vmin, imax, vmax)
}

/// Blur-and-rescale modulation, applied independently to every (batch,
/// channel) plane. A constant input plane is returned unchanged, as is a
/// plane whose blur comes out constant; both would make the rescale
/// degenerate.
pub fn modulate(input: &Tensor, cfg: &GdmConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (n, c, h, w) = input.dims4("modulation input")?;
    let blurred = blur(input, cfg)?;
    let plane = h * w;
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    for i in 0..n * c {
        let src = &input.data()[i * plane..(i + 1) * plane];
        let g = &blurred.data()[i * plane..(i + 1) * plane];
        let dst = &mut out.data_mut()[i * plane..(i + 1) * plane];
        let (_, in_min, _, in_max) = plane_extrema(src);
        let (_, g_min, _, g_max) = plane_extrema(g);
        if in_max == in_min || g_max == g_min {
            dst.copy_from_slice(src);
            continue;
        }
        let scale = in_max / (g_max - g_min);
        for (d, &gv) in dst.iter_mut().zip(g) {
            *d = (gv - g_min) * scale;
        }
    }
    Ok(out)
}

/// Backward of `modulate`. Writing one plane as
/// y_i = m * (g_i - a) / (b - a) with g = blur(x), a = min g, b = max g,
/// m = max x, the cotangents are
///   dg_i  = u_i * m / (b - a)
///   da    = sum u_i * m * (g_i - b) / (b - a)^2   (routed to argmin g)
///   db    = -sum u_i * m * (g_i - a) / (b - a)^2  (routed to argmax g)
///   dm    = sum u_i * (g_i - a) / (b - a)         (routed to argmax x)
/// and dx = blur_adjoint(dg) + dm * e_argmax. The Gaussian kernel is
/// symmetric about its center, so the blur is self-adjoint and the
/// adjoint is one more blur. Degenerate planes pass the upstream through
/// unchanged, matching the forward's identity behavior.
pub fn modulate_backward(input: &Tensor, cfg: &GdmConfig, upstream: &Tensor) -> Result<Tensor> {
    cfg.validate()?;
    let (n, c, h, w) = input.dims4("modulation input")?;
    if upstream.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "modulation upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let blurred = blur(input, cfg)?;
    let plane = h * w;
    // Per-plane cotangent w.r.t. the blurred values; blurred back in one
    // batch at the end.
    let mut d_blur = Tensor::zeros(vec![n, c, h, w]);
    let mut d_direct = Tensor::zeros(vec![n, c, h, w]);
    for i in 0..n * c {
        let src = &input.data()[i * plane..(i + 1) * plane];
        let g = &blurred.data()[i * plane..(i + 1) * plane];
        let up = &upstream.data()[i * plane..(i + 1) * plane];
        let (_, in_min, in_argmax, in_max) = plane_extrema(src);
        let (g_argmin, g_min, g_argmax, g_max) = plane_extrema(g);
        let dd = &mut d_direct.data_mut()[i * plane..(i + 1) * plane];
        if in_max == in_min || g_max == g_min {
            dd.copy_from_slice(up);
            continue;
        }
        let r = g_max - g_min;
        let dg = &mut d_blur.data_mut()[i * plane..(i + 1) * plane];
        let mut da = 0.0;
        let mut db = 0.0;
        let mut dm = 0.0;
        for j in 0..plane {
            dg[j] = up[j] * in_max / r;
            da += up[j] * in_max * (g[j] - g_max) / (r * r);
            db -= up[j] * in_max * (g[j] - g_min) / (r * r);
            dm += up[j] * (g[j] - g_min) / r;
        }
        dg[g_argmin] += da;
        dg[g_argmax] += db;
        dd[in_argmax] += dm;
    }
    let back = blur(&d_blur, cfg)?;
    crate::ops::add(&back, &d_direct)
}

/// Learned transposed-convolution upsample followed by modulation.
pub fn gdm_upsample(input: &Tensor, cfg: &GdmConfig, layer: &ConvLayer) -> Result<Tensor> {
    cfg.validate()?;
    let up = conv::transposed_conv2d(
        input,
        layer,
        (cfg.upsample.output_padding, cfg.upsample.output_padding),
    )?;
    modulate(&up, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_center_is_one_and_symmetric() {
        let k = gaussian_kernel2d(7, 2.0).unwrap();
        assert_eq!(k.data()[3 * 7 + 3], 1.0);
        // Direct evaluation of a neighbor and a corner.
        let near = (-1.0f64 / 8.0).exp();
        let corner = (-18.0f64 / 8.0).exp();
        assert!((k.data()[3 * 7 + 4] - near).abs() < 1e-15);
        assert!((k.data()[0] - corner).abs() < 1e-15);
        for u in 0..7 {
            for v in 0..7 {
                assert_eq!(k.data()[u * 7 + v], k.data()[(6 - u) * 7 + (6 - v)]);
                assert_eq!(k.data()[u * 7 + v], k.data()[v * 7 + u]);
            }
        }
    }

    #[test]
    fn kernel_rejects_even_size_and_bad_sigma() {
        assert!(gaussian_kernel2d(4, 2.0).is_err());
        assert!(gaussian_kernel2d(0, 2.0).is_err());
        assert!(gaussian_kernel2d(7, 0.0).is_err());
        assert!(gaussian_kernel2d(7, -1.0).is_err());
    }

    #[test]
    fn modulate_pins_min_to_zero_and_max_to_input_max() {
        let mut x = Tensor::zeros(vec![1, 1, 9, 9]);
        x.data_mut()[4 * 9 + 4] = 3.0;
        x.data_mut()[2 * 9 + 6] = 1.0;
        let out = modulate(&x, &GdmConfig::default()).unwrap();
        assert!((out.max_value() - 3.0).abs() < 1e-12);
        assert!(out.min_value().abs() < 1e-12);
    }

    #[test]
    fn modulate_returns_constant_plane_unchanged() {
        let x = Tensor::filled(vec![1, 2, 5, 5], 1.25);
        let out = modulate(&x, &GdmConfig::default()).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn modulate_keeps_channels_independent() {
        // Channel 0 has a tall peak, channel 1 a short one; each plane must
        // be rescaled to its own maximum.
        let mut x = Tensor::zeros(vec![1, 2, 7, 7]);
        x.data_mut()[3 * 7 + 3] = 5.0;
        x.data_mut()[49 + 3 * 7 + 3] = 0.5;
        let out = modulate(&x, &GdmConfig::default()).unwrap();
        let c0 = &out.data()[..49];
        let c1 = &out.data()[49..];
        let max0 = c0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max1 = c1.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((max0 - 5.0).abs() < 1e-12);
        assert!((max1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gdm_upsample_doubles_extent_with_default_geometry() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(vec![1, 3, 6, 5], 1.0, &mut rng);
        let cfg = GdmConfig::default();
        let layer = ConvLayer::random_transposed(
            3,
            2,
            (cfg.upsample.kernel, cfg.upsample.kernel),
            ConvGeom::square(cfg.upsample.stride, 1, cfg.upsample.padding).unwrap(),
            &mut rng,
        );
        let out = gdm_upsample(&x, &cfg, &layer).unwrap();
        assert_eq!(out.shape(), &[1, 2, 12, 10]);
    }
}
