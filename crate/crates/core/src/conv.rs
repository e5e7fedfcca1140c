//! 2D convolution in its cross-correlation form, plus the depthwise,
//! pointwise, separable and transposed variants.
//!
//! All variants share the same index geometry: an output position (oy, ox)
//! reads input row `oy*stride - padding + u*dilation` for kernel row u, with
//! out-of-range taps contributing zero (zero padding). Transposed
//! convolution runs the same geometry in reverse as a scatter-add, which
//! makes it the exact adjoint of the forward gather.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Stride, dilation and padding of a convolution, as (height, width) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn new(stride: (usize, usize), dilation: (usize, usize), padding: (usize, usize)) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config(format!("stride must be positive, got {stride:?}")));
        }
        if dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::Config(format!(
                "dilation must be positive, got {dilation:?}"
            )));
        }
        Ok(Self { stride, dilation, padding })
    }

    /// Unit stride and dilation, no padding; the geometry of a 1x1 conv.
    pub fn unit() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
            padding: (0, 0),
        }
    }

    /// Uniform geometry on both axes.
    pub fn square(stride: usize, dilation: usize, padding: usize) -> Result<Self> {
        Self::new((stride, stride), (dilation, dilation), (padding, padding))
    }
}

/// Output extent along one axis: floor((in + 2p - d*(k-1) - 1) / s) + 1.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Result<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return Err(Error::Shape(format!(
            "kernel span {span} (kernel {kernel}, dilation {dilation}) exceeds padded input {padded} (input {input}, padding {padding})"
        )));
    }
    Ok((padded - span) / stride + 1)
}

/// Output extent of a transposed convolution along one axis:
/// (in - 1)*s - 2p + d*(k-1) + output_padding + 1.
pub fn transposed_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: usize,
    output_padding: usize,
) -> Result<usize> {
    if output_padding >= stride {
        return Err(Error::Config(format!(
            "output_padding {output_padding} must be smaller than stride {stride}"
        )));
    }
    let grown = (input - 1) * stride + dilation * (kernel - 1) + output_padding + 1;
    if grown <= 2 * padding {
        return Err(Error::Shape(format!(
            "transposed output collapses to nothing: (in-1)*stride + dilation*(k-1) + output_padding + 1 = {grown} with padding {padding}"
        )));
    }
    Ok(grown - 2 * padding)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Standard,
    Depthwise,
    Pointwise,
    Separable,
}

/// Weights plus geometry for one convolution layer.
///
/// Weight layouts: standard and pointwise use [Cout, Cin, kH, kW]; depthwise
/// uses [C, 1, kH, kW] with one kernel per channel. Separable layers hold a
/// depthwise stage in `weights`/`bias` and a pointwise stage in
/// `pointwise`/`pointwise_bias`, applied as depthwise -> ReLU -> pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub mode: ConvMode,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub pointwise: Option<Tensor>,
    pub pointwise_bias: Option<Tensor>,
    pub geom: ConvGeom,
}

impl ConvLayer {
    pub fn standard(weights: Tensor, bias: Option<Tensor>, geom: ConvGeom) -> Result<Self> {
        let (cout, _, _, _) = weights.dims4("standard conv weights")?;
        check_bias(&bias, cout, "standard conv")?;
        Ok(Self {
            mode: ConvMode::Standard,
            weights,
            bias,
            pointwise: None,
            pointwise_bias: None,
            geom,
        })
    }

    pub fn depthwise(weights: Tensor, bias: Option<Tensor>, geom: ConvGeom) -> Result<Self> {
        let (c, one, _, _) = weights.dims4("depthwise conv weights")?;
        if one != 1 {
            return Err(Error::Shape(format!(
                "depthwise weights must have a unit second axis [C,1,kH,kW], got {:?}",
                weights.shape()
            )));
        }
        check_bias(&bias, c, "depthwise conv")?;
        Ok(Self {
            mode: ConvMode::Depthwise,
            weights,
            bias,
            pointwise: None,
            pointwise_bias: None,
            geom,
        })
    }

    pub fn pointwise(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (cout, _, kh, kw) = weights.dims4("pointwise conv weights")?;
        if kh != 1 || kw != 1 {
            return Err(Error::Shape(format!(
                "pointwise weights must be 1x1, got {kh}x{kw}"
            )));
        }
        check_bias(&bias, cout, "pointwise conv")?;
        Ok(Self {
            mode: ConvMode::Pointwise,
            weights,
            bias,
            pointwise: None,
            pointwise_bias: None,
            geom: ConvGeom::unit(),
        })
    }

    pub fn separable(
        depthwise: Tensor,
        depthwise_bias: Option<Tensor>,
        pointwise: Tensor,
        pointwise_bias: Option<Tensor>,
        geom: ConvGeom,
    ) -> Result<Self> {
        let (c, one, _, _) = depthwise.dims4("separable depthwise weights")?;
        if one != 1 {
            return Err(Error::Shape(format!(
                "separable depthwise weights must be [C,1,kH,kW], got {:?}",
                depthwise.shape()
            )));
        }
        check_bias(&depthwise_bias, c, "separable depthwise stage")?;
        let (cout, cin_pw, kh, kw) = pointwise.dims4("separable pointwise weights")?;
        if kh != 1 || kw != 1 {
            return Err(Error::Shape(format!(
                "separable pointwise weights must be 1x1, got {kh}x{kw}"
            )));
        }
        if cin_pw != c {
            return Err(Error::Shape(format!(
                "separable pointwise input channels {cin_pw} must match depthwise channels {c}"
            )));
        }
        check_bias(&pointwise_bias, cout, "separable pointwise stage")?;
        Ok(Self {
            mode: ConvMode::Separable,
            weights: depthwise,
            bias: depthwise_bias,
            pointwise: Some(pointwise),
            pointwise_bias,
            geom,
        })
    }

    /// Channels the layer consumes.
    pub fn in_channels(&self) -> usize {
        match self.mode {
            ConvMode::Standard | ConvMode::Pointwise => self.weights.shape()[1],
            ConvMode::Depthwise | ConvMode::Separable => self.weights.shape()[0],
        }
    }

    /// Channels the layer produces.
    pub fn out_channels(&self) -> usize {
        match self.mode {
            ConvMode::Standard | ConvMode::Pointwise | ConvMode::Depthwise => self.weights.shape()[0],
            ConvMode::Separable => self.pointwise.as_ref().unwrap().shape()[0],
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// The layer's parameter tensors with stable name suffixes, in a fixed
    /// order (weights, bias, pointwise weights, pointwise bias). Checkpoint
    /// naming and gradient bookkeeping both key off this order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![("weight", &self.weights)];
        if let Some(b) = &self.bias {
            out.push(("bias", b));
        }
        if let Some(p) = &self.pointwise {
            out.push(("pointwise_weight", p));
        }
        if let Some(b) = &self.pointwise_bias {
            out.push(("pointwise_bias", b));
        }
        out
    }

    /// Mutable variant of `named_tensors`, same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = vec![("weight", &mut self.weights)];
        if let Some(b) = &mut self.bias {
            out.push(("bias", b));
        }
        if let Some(p) = &mut self.pointwise {
            out.push(("pointwise_weight", p));
        }
        if let Some(b) = &mut self.pointwise_bias {
            out.push(("pointwise_bias", b));
        }
        out
    }

    /// Applies the layer, dispatching on mode.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self.mode {
            ConvMode::Separable => separable_conv2d(input, self),
            _ => conv2d(input, self),
        }
    }

    // Seeded random constructors used by model initialization. Weight
    // entries are uniform on [-b, b] with b = sqrt(1 / fan-in) where fan-in
    // counts the inputs feeding one output element; biases start at zero.

    pub fn random_standard(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (cin * kernel.0 * kernel.1) as f64).sqrt();
        let weights = Tensor::uniform(vec![cout, cin, kernel.0, kernel.1], bound, rng);
        Self::standard(weights, Some(Tensor::zeros(vec![cout])), geom).unwrap()
    }

    pub fn random_pointwise(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / cin as f64).sqrt();
        let weights = Tensor::uniform(vec![cout, cin, 1, 1], bound, rng);
        Self::pointwise(weights, Some(Tensor::zeros(vec![cout]))).unwrap()
    }

    pub fn random_separable(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let dw_bound = (1.0 / (kernel.0 * kernel.1) as f64).sqrt();
        let dw = Tensor::uniform(vec![cin, 1, kernel.0, kernel.1], dw_bound, rng);
        let pw_bound = (1.0 / cin as f64).sqrt();
        let pw = Tensor::uniform(vec![cout, cin, 1, 1], pw_bound, rng);
        Self::separable(
            dw,
            Some(Tensor::zeros(vec![cin])),
            pw,
            Some(Tensor::zeros(vec![cout])),
            geom,
        )
        .unwrap()
    }

    /// Random weights for use with `transposed_conv2d`: consumes `cin`
    /// channels (the weight tensor's Cout axis) and produces `cout`.
    pub fn random_transposed(
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (cin * kernel.0 * kernel.1) as f64).sqrt();
        let weights = Tensor::uniform(vec![cin, cout, kernel.0, kernel.1], bound, rng);
        Self::standard(weights, None, geom).unwrap()
    }
}

fn check_bias(bias: &Option<Tensor>, channels: usize, what: &str) -> Result<()> {
    if let Some(b) = bias {
        let n = b.dims1("bias")?;
        if n != channels {
            return Err(Error::Shape(format!(
                "{what} bias has {n} entries but the layer produces {channels} channels"
            )));
        }
    }
    Ok(())
}

/// Standard, depthwise or pointwise convolution (cross-correlation: the
/// kernel is not flipped). Zero padding; every output element is
/// bias + sum over in-range taps.
pub fn conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    match layer.mode {
        ConvMode::Standard | ConvMode::Pointwise => conv2d_raw(
            input,
            &layer.weights,
            layer.bias.as_ref(),
            &layer.geom,
            false,
        ),
        ConvMode::Depthwise => conv2d_raw(
            input,
            &layer.weights,
            layer.bias.as_ref(),
            &layer.geom,
            true,
        ),
        ConvMode::Separable => Err(Error::Config(
            "conv2d does not accept separable layers; call separable_conv2d".into(),
        )),
    }
}

/// Depthwise stage, ReLU, then pointwise stage. Stride, dilation and
/// padding apply to the depthwise stage only.
pub fn separable_conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    if layer.mode != ConvMode::Separable {
        return Err(Error::Config(
            "separable_conv2d requires a layer in separable mode".into(),
        ));
    }
    let depth = conv2d_raw(input, &layer.weights, layer.bias.as_ref(), &layer.geom, true)?;
    let hidden = depth.map(|v| v.max(0.0));
    conv2d_raw(
        &hidden,
        layer.pointwise.as_ref().unwrap(),
        layer.pointwise_bias.as_ref(),
        &ConvGeom::unit(),
        false,
    )
}

/// Transposed convolution: the adjoint of `conv2d`'s linear part, computed
/// as a scatter-add of input elements through the kernel. The layer's
/// weight tensor is read as [C_consumed, C_produced, kH, kW]; bias does not
/// participate. `output_padding` grows the output by up to stride-1 rows
/// and columns to pin down sizes the forward stride maps many-to-one.
pub fn transposed_conv2d(
    input: &Tensor,
    layer: &ConvLayer,
    output_padding: (usize, usize),
) -> Result<Tensor> {
    if layer.mode != ConvMode::Standard {
        return Err(Error::Config(
            "transposed_conv2d requires a standard-mode layer".into(),
        ));
    }
    let (n, c, h, w) = input.dims4("transposed conv input")?;
    let (c_cons, _c_prod, kh, kw) = layer.weights.dims4("transposed conv weights")?;
    if c != c_cons {
        return Err(Error::Shape(format!(
            "transposed conv input has {c} channels but the weights consume {c_cons}"
        )));
    }
    let (sh, sw) = layer.geom.stride;
    let (dh, dw) = layer.geom.dilation;
    let (ph, pw) = layer.geom.padding;
    let out_h = transposed_output_size(h, kh, sh, dh, ph, output_padding.0)?;
    let out_w = transposed_output_size(w, kw, sw, dw, pw, output_padding.1)?;
    scatter_adjoint(input, &layer.weights, &layer.geom, false, (n, out_h, out_w))
}

/// Shared gather kernel for the three dense forward modes.
pub(crate) fn conv2d_raw(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    geom: &ConvGeom,
    depthwise: bool,
) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4("conv input")?;
    let (cout, w1, kh, kw) = weights.dims4("conv weights")?;
    if depthwise {
        if w1 != 1 {
            return Err(Error::Shape(format!(
                "depthwise weights must be [C,1,kH,kW], got {:?}",
                weights.shape()
            )));
        }
        if cout != cin {
            return Err(Error::Shape(format!(
                "depthwise weights cover {cout} channels but the input has {cin}"
            )));
        }
    } else if w1 != cin {
        return Err(Error::Shape(format!(
            "conv weights expect {w1} input channels but the input has {cin}"
        )));
    }
    if let Some(b) = bias {
        let blen = b.dims1("conv bias")?;
        if blen != cout {
            return Err(Error::Shape(format!(
                "conv bias has {blen} entries for {cout} output channels"
            )));
        }
    }
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;
    let out_h = conv_output_size(h, kh, sh, dh, ph)?;
    let out_w = conv_output_size(w, kw, sw, dw, pw)?;

    let x = input.data();
    let wt = weights.data();
    let mut out = Tensor::zeros(vec![n, cout, out_h, out_w]);
    let o = out.data_mut();
    let cin_per_out = if depthwise { 1 } else { cin };

    for b_idx in 0..n {
        for co in 0..cout {
            let b0 = bias.map_or(0.0, |b| b.data()[co]);
            let w_co = &wt[co * cin_per_out * kh * kw..(co + 1) * cin_per_out * kh * kw];
            for oy in 0..out_h {
                let o_row = ((b_idx * cout + co) * out_h + oy) * out_w;
                for ox in 0..out_w {
                    let mut acc = b0;
                    for g in 0..cin_per_out {
                        let ci = if depthwise { co } else { g };
                        let x_plane = ((b_idx * cin + ci) * h) * w;
                        let w_ci = &w_co[g * kh * kw..(g + 1) * kh * kw];
                        for u in 0..kh {
                            let iy = (oy * sh + u * dh) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_plane + iy as usize * w;
                            for v in 0..kw {
                                let ix = (ox * sw + v * dw) as isize - pw as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[x_row + ix as usize] * w_ci[u * kw + v];
                            }
                        }
                    }
                    o[o_row + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Scatter kernel shared by `transposed_conv2d` and the input-gradient of
/// `conv2d`: routes each element of `source` back through the kernel taps
/// onto a [N, C_produced, out_h, out_w] tensor.
pub(crate) fn scatter_adjoint(
    source: &Tensor,
    weights: &Tensor,
    geom: &ConvGeom,
    depthwise: bool,
    out_dims: (usize, usize, usize),
) -> Result<Tensor> {
    let (n, c_src, h, w) = source.dims4("scatter source")?;
    let (w0, w1, kh, kw) = weights.dims4("scatter weights")?;
    if c_src != w0 {
        return Err(Error::Shape(format!(
            "scatter source has {c_src} channels but the weights consume {w0}"
        )));
    }
    let (n_out, out_h, out_w) = out_dims;
    debug_assert_eq!(n, n_out);
    let c_prod = if depthwise { c_src } else { w1 };
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;

    let s = source.data();
    let wt = weights.data();
    let mut out = Tensor::zeros(vec![n, c_prod, out_h, out_w]);
    let o = out.data_mut();
    let w1_eff = if depthwise { 1 } else { w1 };

    for b_idx in 0..n {
        for cs in 0..c_src {
            let w_cs = &wt[cs * w1_eff * kh * kw..(cs + 1) * w1_eff * kh * kw];
            for y in 0..h {
                let s_row = ((b_idx * c_src + cs) * h + y) * w;
                for x_pos in 0..w {
                    let val = s[s_row + x_pos];
                    if val == 0.0 {
                        continue;
                    }
                    for g in 0..w1_eff {
                        let cp = if depthwise { cs } else { g };
                        let o_plane = (b_idx * c_prod + cp) * out_h;
                        let w_g = &w_cs[g * kh * kw..(g + 1) * kh * kw];
                        for u in 0..kh {
                            let oy = (y * sh + u * dh) as isize - ph as isize;
                            if oy < 0 || oy >= out_h as isize {
                                continue;
                            }
                            let o_row = (o_plane + oy as usize) * out_w;
                            for v in 0..kw {
                                let ox = (x_pos * sw + v * dw) as isize - pw as isize;
                                if ox < 0 || ox >= out_w as isize {
                                    continue;
                                }
                                o[o_row + ox as usize] += val * w_g[u * kw + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
