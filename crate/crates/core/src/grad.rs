//! Hand-derived backward passes.
//!
//! Every function takes the forward operands plus the upstream cotangent
//! and returns cotangents mirroring the operand shapes. The convolution
//! input-gradient reuses the scatter kernel that also implements
//! transposed convolution, since they are the same adjoint.

use crate::conv::{self, ConvGeom, ConvLayer, ConvMode};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Cotangents of a dense convolution.
#[derive(Debug, Clone)]
pub struct ConvGrad {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
}

/// Cotangents of a separable convolution (both stages).
#[derive(Debug, Clone)]
pub struct SeparableConvGrad {
    pub input: Tensor,
    pub depthwise_weights: Tensor,
    pub depthwise_bias: Option<Tensor>,
    pub pointwise_weights: Tensor,
    pub pointwise_bias: Option<Tensor>,
}

/// Cotangents of a transposed convolution. Bias never participates in the
/// forward, so there is none here either.
#[derive(Debug, Clone)]
pub struct TransposedConvGrad {
    pub input: Tensor,
    pub weights: Tensor,
}

/// Backward of `conv2d` for standard, pointwise and depthwise layers.
pub fn conv2d_backward(input: &Tensor, layer: &ConvLayer, upstream: &Tensor) -> Result<ConvGrad> {
    match layer.mode {
        ConvMode::Standard | ConvMode::Pointwise => {
            conv2d_backward_raw(input, &layer.weights, layer.bias.is_some(), &layer.geom, false, upstream)
        }
        ConvMode::Depthwise => {
            conv2d_backward_raw(input, &layer.weights, layer.bias.is_some(), &layer.geom, true, upstream)
        }
        ConvMode::Separable => Err(Error::Config(
            "conv2d_backward does not accept separable layers; call separable_conv2d_backward".into(),
        )),
    }
}

pub(crate) fn conv2d_backward_raw(
    input: &Tensor,
    weights: &Tensor,
    has_bias: bool,
    geom: &ConvGeom,
    depthwise: bool,
    upstream: &Tensor,
) -> Result<ConvGrad> {
    let (n, _cin, h, w) = input.dims4("conv input")?;
    let d_input = conv::scatter_adjoint(upstream, weights, geom, depthwise, (n, h, w))?;
    let d_weights = conv_weight_grad(input, weights, geom, depthwise, upstream)?;
    let bias = if has_bias {
        Some(bias_grad(upstream)?)
    } else {
        None
    };
    Ok(ConvGrad {
        input: d_input,
        weights: d_weights,
        bias,
    })
}

/// dW[co,ci,u,v] = sum over batch and output positions of
/// upstream[n,co,oy,ox] * input[n,ci,oy*s-p+u*d, ox*s-p+v*d].
fn conv_weight_grad(
    input: &Tensor,
    weights: &Tensor,
    geom: &ConvGeom,
    depthwise: bool,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4("conv input")?;
    let (cout, _, kh, kw) = weights.dims4("conv weights")?;
    let (un, uc, out_h, out_w) = upstream.dims4("conv upstream")?;
    if un != n || uc != cout {
        return Err(Error::Shape(format!(
            "upstream shape {:?} does not match conv output [{n}, {cout}, ..]",
            upstream.shape()
        )));
    }
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;
    let x = input.data();
    let up = upstream.data();
    let mut dw_t = Tensor::zeros(weights.shape().to_vec());
    let dwd = dw_t.data_mut();
    let cin_per_out = if depthwise { 1 } else { cin };

    for b in 0..n {
        for co in 0..cout {
            let up_plane = ((b * cout + co) * out_h) * out_w;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let u_val = up[up_plane + oy * out_w + ox];
                    if u_val == 0.0 {
                        continue;
                    }
                    for g in 0..cin_per_out {
                        let ci = if depthwise { co } else { g };
                        let x_plane = ((b * cin + ci) * h) * w;
                        let w_base = (co * cin_per_out + g) * kh * kw;
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
                                dwd[w_base + u * kw + v] += u_val * x[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(dw_t)
}

/// db[c] = sum of the upstream over batch and spatial positions.
pub fn bias_grad(upstream: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = upstream.dims4("bias upstream")?;
    let mut out = Tensor::zeros(vec![c]);
    let o = out.data_mut();
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let s: f64 = upstream.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                .iter()
                .sum();
            o[ch] += s;
        }
    }
    Ok(out)
}

/// Backward of the depthwise -> ReLU -> pointwise chain, recomputing the
/// two intermediate activations.
pub fn separable_conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    upstream: &Tensor,
) -> Result<SeparableConvGrad> {
    if layer.mode != ConvMode::Separable {
        return Err(Error::Config(
            "separable_conv2d_backward requires a separable layer".into(),
        ));
    }
    let pw = layer.pointwise.as_ref().unwrap();
    let depth = conv::conv2d_raw(input, &layer.weights, layer.bias.as_ref(), &layer.geom, true)?;
    let hidden = ops::relu(&depth);

    let pw_grad = conv2d_backward_raw(
        &hidden,
        pw,
        layer.pointwise_bias.is_some(),
        &ConvGeom::unit(),
        false,
        upstream,
    )?;
    let d_hidden = relu_backward(&depth, &pw_grad.input)?;
    let dw_grad = conv2d_backward_raw(
        input,
        &layer.weights,
        layer.bias.is_some(),
        &layer.geom,
        true,
        &d_hidden,
    )?;
    Ok(SeparableConvGrad {
        input: dw_grad.input,
        depthwise_weights: dw_grad.weights,
        depthwise_bias: dw_grad.bias,
        pointwise_weights: pw_grad.weights,
        pointwise_bias: pw_grad.bias,
    })
}

/// Backward of `transposed_conv2d`. The input-gradient of a scatter is the
/// plain gather, so it is a forward convolution with the same geometry.
pub fn transposed_conv2d_backward(
    input: &Tensor,
    layer: &ConvLayer,
    upstream: &Tensor,
) -> Result<TransposedConvGrad> {
    if layer.mode != ConvMode::Standard {
        return Err(Error::Config(
            "transposed_conv2d_backward requires a standard-mode layer".into(),
        ));
    }
    transposed_backward_raw(input, &layer.weights, &layer.geom, upstream)
}

pub(crate) fn transposed_backward_raw(
    input: &Tensor,
    weights: &Tensor,
    geom: &ConvGeom,
    upstream: &Tensor,
) -> Result<TransposedConvGrad> {
    let d_input = conv::conv2d_raw(upstream, weights, None, geom, false)?;
    if d_input.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "upstream shape {:?} is not the transposed output for input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    // dW[cs,cp,u,v] = sum input[n,cs,y,x] * upstream[n,cp,y*s-p+u*d, x*s-p+v*d];
    // the input plays the role the upstream plays in the forward weight grad.
    let (n, c_src, h, w) = input.dims4("transposed conv input")?;
    let (w0, w1, kh, kw) = weights.dims4("transposed conv weights")?;
    debug_assert_eq!(c_src, w0);
    let (_, _, out_h, out_w) = upstream.dims4("transposed conv upstream")?;
    let (sh, sw) = geom.stride;
    let (dh, dw) = geom.dilation;
    let (ph, pw) = geom.padding;
    let x = input.data();
    let up = upstream.data();
    let mut dw_t = Tensor::zeros(weights.shape().to_vec());
    let dwd = dw_t.data_mut();

    for b in 0..n {
        for cs in 0..c_src {
            let x_plane = ((b * c_src + cs) * h) * w;
            for y in 0..h {
                for x_pos in 0..w {
                    let val = x[x_plane + y * w + x_pos];
                    if val == 0.0 {
                        continue;
                    }
                    for cp in 0..w1 {
                        let up_plane = ((b * w1 + cp) * out_h) * out_w;
                        let w_base = (cs * w1 + cp) * kh * kw;
                        for u in 0..kh {
                            let oy = (y * sh + u * dh) as isize - ph as isize;
                            if oy < 0 || oy >= out_h as isize {
                                continue;
                            }
                            let up_row = up_plane + oy as usize * out_w;
                            for v in 0..kw {
                                let ox = (x_pos * sw + v * dw) as isize - pw as isize;
                                if ox < 0 || ox >= out_w as isize {
                                    continue;
                                }
                                dwd[w_base + u * kw + v] += val * up[up_row + ox as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(TransposedConvGrad {
        input: d_input,
        weights: dw_t,
    })
}

/// ReLU passes the upstream through where the forward input was strictly
/// positive; the subgradient at zero is taken as zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "relu upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &u)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Both addends receive the upstream unchanged.
pub fn add_backward(upstream: &Tensor) -> (Tensor, Tensor) {
    (upstream.clone(), upstream.clone())
}

/// Splits the upstream back into the concatenated channel blocks.
pub fn concat_channels_backward(upstream: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = upstream.dims4("concat upstream")?;
    let total: usize = channels.iter().sum();
    if total != c {
        return Err(Error::Shape(format!(
            "concat upstream has {c} channels but the blocks sum to {total}"
        )));
    }
    let plane = h * w;
    let mut parts: Vec<Tensor> = channels
        .iter()
        .map(|&ci| Tensor::zeros(vec![n, ci, h, w]))
        .collect();
    for b in 0..n {
        let mut c_off = 0;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            let src_start = (b * c + c_off) * plane;
            let dst_start = b * ci * plane;
            part.data_mut()[dst_start..dst_start + ci * plane]
                .copy_from_slice(&upstream.data()[src_start..src_start + ci * plane]);
            c_off += ci;
        }
    }
    Ok(parts)
}

/// Each spatial position contributed 1/(H*W) of the mean.
pub fn avg_pool_global_backward(upstream: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, h1, w1) = upstream.dims4("avg_pool upstream")?;
    if h1 != 1 || w1 != 1 {
        return Err(Error::Shape(format!(
            "avg_pool upstream must be [N,C,1,1], got {:?}",
            upstream.shape()
        )));
    }
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    let scale = 1.0 / (h * w) as f64;
    let o = out.data_mut();
    for i in 0..n * c {
        o[i * h * w..(i + 1) * h * w].fill(upstream.data()[i] * scale);
    }
    Ok(out)
}

/// Broadcast fans one value out over H*W positions, so its adjoint sums
/// them back up.
pub fn broadcast_hw_backward(upstream: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = upstream.dims4("broadcast upstream")?;
    let plane = h * w;
    let mut out = Tensor::zeros(vec![n, c, 1, 1]);
    let o = out.data_mut();
    for i in 0..n * c {
        o[i] = upstream.data()[i * plane..(i + 1) * plane].iter().sum();
    }
    Ok(out)
}

/// Cotangents of the per-channel affine.
#[derive(Debug, Clone)]
pub struct ChannelAffineGrad {
    pub input: Tensor,
    pub scale: Tensor,
    pub shift: Tensor,
}

pub fn channel_affine_backward(
    input: &Tensor,
    scale: &Tensor,
    upstream: &Tensor,
) -> Result<ChannelAffineGrad> {
    let (n, c, h, w) = input.dims4("channel_affine input")?;
    if upstream.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "channel_affine upstream shape {:?} does not match input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    let plane = h * w;
    let mut d_input = Tensor::zeros(input.shape().to_vec());
    let mut d_scale = Tensor::zeros(vec![c]);
    let mut d_shift = Tensor::zeros(vec![c]);
    {
        let di = d_input.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let s = scale.data()[ch];
                let base = (b * c + ch) * plane;
                let mut acc_scale = 0.0;
                let mut acc_shift = 0.0;
                for i in base..base + plane {
                    let u = upstream.data()[i];
                    di[i] = u * s;
                    acc_scale += u * input.data()[i];
                    acc_shift += u;
                }
                d_scale.data_mut()[ch] += acc_scale;
                d_shift.data_mut()[ch] += acc_shift;
            }
        }
    }
    Ok(ChannelAffineGrad {
        input: d_input,
        scale: d_scale,
        shift: d_shift,
    })
}
