//! Forward and backward kernels for the network operations.
//!
//! Every function here is pure. The gradient tape in [`crate::tape`] records
//! which kernel produced each value and calls the matching `*_backward`.

use crate::tensor::{Tensor, TensorError};

fn expect_rank(op: &'static str, what: &str, t: &Tensor, rank: usize) -> Result<(), TensorError> {
    if t.rank() != rank {
        return Err(TensorError::shape(
            op,
            format!("{what} must have rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Output extent of a sliding window: `floor((size + 2*padding - window) / stride) + 1`.
pub fn window_output_len(size: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || window == 0 || window > size + 2 * padding {
        return None;
    }
    Some((size + 2 * padding - window) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn conv_geometry(
    input: &Tensor,
    filters: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry, TensorError> {
    const OP: &str = "conv2d";
    expect_rank(OP, "input", input, 4)?;
    expect_rank(OP, "filters", filters, 4)?;
    let (n, cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (cout, fcin, kh, kw) = (
        filters.shape()[0],
        filters.shape()[1],
        filters.shape()[2],
        filters.shape()[3],
    );
    if fcin != cin {
        return Err(TensorError::shape(
            OP,
            format!("input channels {cin} do not match filter input channels {fcin}"),
        ));
    }
    if stride == 0 {
        return Err(TensorError::shape(OP, "stride must be positive"));
    }
    let oh = window_output_len(h, kh, stride, padding).ok_or_else(|| {
        TensorError::shape(
            OP,
            format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding),
        )
    })?;
    let ow = window_output_len(w, kw, stride, padding).ok_or_else(|| {
        TensorError::shape(
            OP,
            format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding),
        )
    })?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {:?} does not match output channels {cout}", b.shape()),
            ));
        }
    }
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        oh,
        ow,
        stride,
        padding,
    })
}

/// Zero-padded 2-D cross-correlation summed over input channels, plus bias.
pub fn conv2d(
    input: &Tensor,
    filters: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let g = conv_geometry(input, filters, bias, stride, padding)?;
    let x = input.data();
    let f = filters.data();
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for k in 0..g.cout {
            let plane = &mut out[(n * g.cout + k) * g.oh * g.ow..][..g.oh * g.ow];
            if let Some(b) = bias {
                plane.fill(b.data()[k]);
            }
            for j in 0..g.cin {
                let xin = &x[(n * g.cin + j) * g.h * g.w..][..g.h * g.w];
                let filt = &f[(k * g.cin + j) * g.kh * g.kw..][..g.kh * g.kw];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let row = &xin[iy as usize * g.w..][..g.w];
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                acc += row[ix as usize] * filt[ky * g.kw + kx];
                            }
                        }
                        plane[oy * g.ow + ox] += acc;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.oh, g.ow], out))
}

/// Gradients of [`conv2d`] with respect to input, filters and bias.
pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor), TensorError> {
    let g = conv_geometry(input, filters, None, stride, padding)?;
    if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
        return Err(TensorError::shape(
            "conv2d_backward",
            format!("output gradient shape {:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let f = filters.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gf = vec![0.0; f.len()];
    let mut gb = vec![0.0; g.cout];
    for n in 0..g.n {
        for k in 0..g.cout {
            let gplane = &go[(n * g.cout + k) * g.oh * g.ow..][..g.oh * g.ow];
            gb[k] += gplane.iter().sum::<f64>();
            for j in 0..g.cin {
                let xoff = (n * g.cin + j) * g.h * g.w;
                let foff = (k * g.cin + j) * g.kh * g.kw;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let gv = gplane[oy * g.ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ky in 0..g.kh {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.kw {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = xoff + iy as usize * g.w + ix as usize;
                                let fi = foff + ky * g.kw + kx;
                                gf[fi] += gv * x[xi];
                                gx[xi] += gv * f[fi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(filters.shape().to_vec(), gf),
        Tensor::from_parts(vec![g.cout], gb),
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

/// Gradient of [`relu`]; the subgradient at exactly zero is taken as 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor, TensorError> {
    input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output cell, the flat input index that won (first maximum in row-major order).
pub fn max_pool2d_with_argmax(
    input: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>), TensorError> {
    const OP: &str = "max_pool2d";
    expect_rank(OP, "input", input, 4)?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    if stride == 0 {
        return Err(TensorError::shape(OP, "stride must be positive"));
    }
    let oh = window_output_len(h, window, stride, 0).ok_or_else(|| {
        TensorError::shape(OP, format!("window {window} exceeds input height {h}"))
    })?;
    let ow = window_output_len(w, window, stride, 0).ok_or_else(|| {
        TensorError::shape(OP, format!("window {window} exceeds input width {w}"))
    })?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor, TensorError> {
    max_pool2d_with_argmax(input, window, stride).map(|(t, _)| t)
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        data[src] += g;
    }
    gx
}

/// Spatial mean per (sample, channel): `N×C×H×W -> N×C`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("global_avg_pool", "input", input, 4)?;
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let area = input.shape()[2] * input.shape()[3];
    let out = input
        .data()
        .chunks_exact(area)
        .map(|plane| plane.iter().sum::<f64>() / area as f64)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let area = input_shape[2] * input_shape[3];
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / area as f64, area))
        .collect();
    Tensor::from_parts(input_shape.to_vec(), data)
}

/// `input · weights + bias` for `input: N×D`, `weights: D×M`, `bias: M`.
pub fn affine(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, TensorError> {
    const OP: &str = "affine";
    expect_rank(OP, "input", input, 2)?;
    expect_rank(OP, "weights", weights, 2)?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (wd, m) = (weights.shape()[0], weights.shape()[1]);
    if d != wd {
        return Err(TensorError::shape(
            OP,
            format!("input width {d} does not match weight rows {wd}"),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(TensorError::shape(
                OP,
                format!("bias shape {:?} does not match output width {m}", b.shape()),
            ));
        }
    }
    let x = input.data();
    let w = weights.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..][..m];
        if let Some(b) = bias {
            row.copy_from_slice(b.data());
        }
        for k in 0..d {
            let xv = x[i * d + k];
            if xv == 0.0 {
                continue;
            }
            for (o, &wv) in row.iter_mut().zip(&w[k * m..][..m]) {
                *o += xv * wv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Gradients of [`affine`] with respect to input, weights and bias.
pub fn affine_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let m = weights.shape()[1];
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; n * d];
    let mut gw = vec![0.0; d * m];
    let mut gb = vec![0.0; m];
    for i in 0..n {
        let grow = &go[i * m..][..m];
        for (b, &g) in gb.iter_mut().zip(grow) {
            *b += g;
        }
        for k in 0..d {
            let wrow = &w[k * m..][..m];
            gx[i * d + k] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
            let xv = x[i * d + k];
            for (gwv, &g) in gw[k * m..][..m].iter_mut().zip(grow) {
                *gwv += xv * g;
            }
        }
    }
    (
        Tensor::from_parts(vec![n, d], gx),
        Tensor::from_parts(vec![d, m], gw),
        Tensor::from_parts(vec![m], gb),
    )
}

/// Row-wise softmax of an `N×C` tensor, stabilised by max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    expect_rank("softmax", "logits", logits, 2)?;
    let c = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

fn check_labels(
    op: &'static str,
    labels: &[usize],
    n: usize,
    num_classes: usize,
) -> Result<(), TensorError> {
    if labels.len() != n {
        return Err(TensorError::shape(
            op,
            format!("{} labels for {n} samples", labels.len()),
        ));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(TensorError::LabelOutOfRange {
            op,
            index,
            label,
            num_classes,
        });
    }
    Ok(())
}

/// Mean over samples of `-ln softmax(logits)[label]`, plus the softmax
/// probabilities needed by the backward pass. Labels are 0-based.
pub fn softmax_cross_entropy_with_probs(
    logits: &Tensor,
    labels: &[usize],
) -> Result<(f64, Tensor), TensorError> {
    const OP: &str = "softmax_cross_entropy";
    expect_rank(OP, "logits", logits, 2)?;
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    check_labels(OP, labels, n, c)?;
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(n * c);
    for (row, &y) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        loss += log_z - row[y];
        probs.extend(row.iter().map(|&v| (v - log_z).exp()));
    }
    Ok((loss / n as f64, Tensor::from_parts(vec![n, c], probs)))
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64, TensorError> {
    softmax_cross_entropy_with_probs(logits, labels).map(|(l, _)| l)
}

/// Gradient of the mean cross-entropy with respect to the logits, scaled by `grad`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], grad: f64) -> Tensor {
    let n = probs.shape()[0];
    let c = probs.shape()[1];
    let scale = grad / n as f64;
    let mut out = probs.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        out[i * c + y] -= 1.0;
    }
    out.iter_mut().for_each(|v| *v *= scale);
    Tensor::from_parts(vec![n, c], out)
}

/// Row-wise argmax with ties resolved toward the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
        })
        .collect()
}

pub(crate) fn check_class_labels(
    op: &'static str,
    labels: &[usize],
    n: usize,
    num_classes: usize,
) -> Result<(), TensorError> {
    check_labels(op, labels, n, num_classes)
}
