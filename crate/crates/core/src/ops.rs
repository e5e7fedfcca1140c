//! Pointwise and structural ops that glue convolutions into networks:
//! ReLU, elementwise add, channel concatenation, global average pooling,
//! spatial broadcast and the per-channel affine used as normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add needs matching shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Concatenates NCHW tensors along the channel axis. Batch and spatial
/// sizes must agree exactly; there is no implicit resizing.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    if inputs.is_empty() {
        return Err(Error::Shape("concat_channels needs at least one input".into()));
    }
    let (n, _, h, w) = inputs[0].dims4("concat input 0")?;
    let mut c_total = 0;
    for (i, t) in inputs.iter().enumerate() {
        let (ni, ci, hi, wi) = t.dims4(&format!("concat input {i}"))?;
        if ni != n || hi != h || wi != w {
            return Err(Error::Shape(format!(
                "concat input {i} has shape {:?}, expected batch {n} and spatial {h}x{w}",
                t.shape()
            )));
        }
        c_total += ci;
    }
    let mut out = Tensor::zeros(vec![n, c_total, h, w]);
    let plane = h * w;
    let o = out.data_mut();
    for b in 0..n {
        let mut c_off = 0;
        for t in inputs {
            let ci = t.shape()[1];
            let src = &t.data()[b * ci * plane..(b + 1) * ci * plane];
            let dst_start = (b * c_total + c_off) * plane;
            o[dst_start..dst_start + ci * plane].copy_from_slice(src);
            c_off += ci;
        }
    }
    Ok(out)
}

/// Mean over the spatial extent of each channel: [N,C,H,W] -> [N,C,1,1].
pub fn avg_pool_global(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("avg_pool_global input")?;
    let plane = h * w;
    let mut out = Tensor::zeros(vec![n, c, 1, 1]);
    let o = out.data_mut();
    for i in 0..n * c {
        let s: f64 = input.data()[i * plane..(i + 1) * plane].iter().sum();
        o[i] = s / plane as f64;
    }
    Ok(out)
}

/// Repeats a [N,C,1,1] tensor across a target spatial extent.
pub fn broadcast_hw(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, h1, w1) = input.dims4("broadcast_hw input")?;
    if h1 != 1 || w1 != 1 {
        return Err(Error::Shape(format!(
            "broadcast_hw expects spatial 1x1, got {h1}x{w1}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Shape("broadcast target extent must be positive".into()));
    }
    let mut out = Tensor::zeros(vec![n, c, h, w]);
    let o = out.data_mut();
    for i in 0..n * c {
        let v = input.data()[i];
        o[i * h * w..(i + 1) * h * w].fill(v);
    }
    Ok(out)
}

/// Per-channel affine y = x * scale[c] + shift[c], the fixed-parameter
/// stand-in for batch normalization.
pub fn channel_affine(input: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4("channel_affine input")?;
    let sc = scale.dims1("channel_affine scale")?;
    let sh = shift.dims1("channel_affine shift")?;
    if sc != c || sh != c {
        return Err(Error::Shape(format!(
            "channel_affine has {c} channels but scale/shift have {sc}/{sh} entries"
        )));
    }
    let mut out = input.clone();
    let plane = h * w;
    let o = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let s = scale.data()[ch];
            let t = shift.data()[ch];
            for v in &mut o[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                *v = *v * s + t;
            }
        }
    }
    Ok(out)
}
