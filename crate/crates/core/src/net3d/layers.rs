//! Layer kernels with exact analytic backward passes.
//!
//! Volumes are laid out channel-major: `C × T × H × W`, row-major. Convolutions
//! lower to a single GEMM through an explicit im2col buffer which the forward
//! pass hands back so the backward pass can reuse it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Taps per input channel for a 3×3×3 kernel.
pub const KERNEL_TAPS: usize = 27;

/// `c = a · b + beta · c` over row-major/strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: every index touched by dgemm is bounds-checked by the asserts above
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [c, d, h, w] => Ok([c, d, h, w]),
        _ => Err(Error::Shape {
            op,
            expected: vec![0, 0, 0, 0],
            actual: t.shape().to_vec(),
        }),
    }
}

fn im2col(input: &[f64], [c, t, h, w]: [usize; 4], col: &mut [f64]) {
    let plane = t * h * w;
    for ci in 0..c {
        for tap in 0..KERNEL_TAPS {
            let (kt, kh, kw) = (tap / 9, (tap / 3) % 3, tap % 3);
            let dst = &mut col[(ci * KERNEL_TAPS + tap) * plane..][..plane];
            for ot in 0..t {
                let it = ot + kt;
                for oh in 0..h {
                    let ih = oh + kh;
                    let d = &mut dst[(ot * h + oh) * w..][..w];
                    if it == 0 || it > t || ih == 0 || ih > h {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &input[((ci * t + it - 1) * h + ih - 1) * w..][..w];
                    match kw {
                        0 => {
                            d[0] = 0.0;
                            d[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => d.copy_from_slice(src),
                        _ => {
                            d[..w - 1].copy_from_slice(&src[1..]);
                            d[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], [c, t, h, w]: [usize; 4], out: &mut [f64]) {
    let plane = t * h * w;
    for ci in 0..c {
        for tap in 0..KERNEL_TAPS {
            let (kt, kh, kw) = (tap / 9, (tap / 3) % 3, tap % 3);
            let src_plane = &col[(ci * KERNEL_TAPS + tap) * plane..][..plane];
            for ot in 0..t {
                let it = ot + kt;
                if it == 0 || it > t {
                    continue;
                }
                for oh in 0..h {
                    let ih = oh + kh;
                    if ih == 0 || ih > h {
                        continue;
                    }
                    let s = &src_plane[(ot * h + oh) * w..][..w];
                    let d = &mut out[((ci * t + it - 1) * h + ih - 1) * w..][..w];
                    match kw {
                        0 => d[..w - 1].iter_mut().zip(&s[1..]).for_each(|(a, b)| *a += b),
                        1 => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
                        _ => d[1..].iter_mut().zip(&s[..w - 1]).for_each(|(a, b)| *a += b),
                    }
                }
            }
        }
    }
}

/// Saved state of a convolution forward pass.
#[derive(Clone, Debug)]
pub struct Conv3dCache {
    col: Vec<f64>,
    input_dims: [usize; 4],
}

/// Gradients of a convolution; `input` is absent when not requested.
#[derive(Clone, Debug)]
pub struct Conv3dGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// 3×3×3 cross-correlation, stride 1, zero padding 1 on every axis.
///
/// `input`: `C_in × T × H × W`, `weight`: `C_out × C_in × 3 × 3 × 3`, `bias`: `C_out`.
pub fn conv3d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Conv3dCache)> {
    let dims @ [c_in, t, h, w] = dims4("conv3d", input)?;
    let c_out = weight.shape().first().copied().unwrap_or(0);
    weight.expect_shape("conv3d", &[c_out, c_in, 3, 3, 3])?;
    bias.expect_shape("conv3d", &[c_out])?;

    let plane = t * h * w;
    let k = c_in * KERNEL_TAPS;
    let mut col = vec![0.0; k * plane];
    im2col(input.data(), dims, &mut col);

    let mut out = vec![0.0; c_out * plane];
    for (row, b) in out.chunks_mut(plane.max(1)).zip(bias.data()) {
        row.fill(*b);
    }
    gemm(c_out, k, plane, weight.data(), (k, 1), &col, (plane, 1), 1.0, &mut out);
    let out = Tensor::from_vec(&[c_out, t, h, w], out)?;
    Ok((
        out,
        Conv3dCache {
            col,
            input_dims: dims,
        },
    ))
}

pub fn conv3d_backward(
    weight: &Tensor,
    cache: &Conv3dCache,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<Conv3dGrads> {
    let [c_in, t, h, w] = cache.input_dims;
    let c_out = weight.shape()[0];
    grad_out.expect_shape("conv3d backward", &[c_out, t, h, w])?;
    let plane = t * h * w;
    let k = c_in * KERNEL_TAPS;
    let g = grad_out.data();

    // dW = dY · colᵀ
    let mut dw = vec![0.0; c_out * k];
    gemm(c_out, plane, k, g, (plane, 1), &cache.col, (1, plane), 0.0, &mut dw);
    let db: Vec<f64> = g.chunks(plane.max(1)).map(|r| r.iter().sum()).collect();

    let input = if need_input_grad {
        // dcol = Wᵀ · dY
        let mut dcol = vec![0.0; k * plane];
        gemm(k, c_out, plane, weight.data(), (1, k), g, (plane, 1), 0.0, &mut dcol);
        let mut dx = vec![0.0; c_in * plane];
        col2im(&dcol, cache.input_dims, &mut dx);
        Some(Tensor::from_vec(&[c_in, t, h, w], dx)?)
    } else {
        None
    };

    Ok(Conv3dGrads {
        input,
        weight: Tensor::from_vec(weight.shape(), dw)?,
        bias: Tensor::from_vec(&[c_out], db)?,
    })
}

/// Output extent of a pooling axis with stride equal to the window extent.
pub fn pooled_extent(dim: usize, extent: usize) -> usize {
    (dim - extent) / extent + 1
}

/// Saved argmax routing of a max-pool forward pass.
#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    input_shape: Vec<usize>,
}

impl PoolCache {
    /// Flat input index selected by each output element.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Non-overlapping 3D max pooling over `C × T × H × W`; ties go to the lowest
/// flat index in each window.
pub fn maxpool3d_forward(input: &Tensor, extent: [usize; 3]) -> Result<(Tensor, PoolCache)> {
    let [c, t, h, w] = dims4("maxpool3d", input)?;
    for (axis, (&dim, &e)) in ["t", "h", "w"].iter().zip([t, h, w].iter().zip(&extent)) {
        if e == 0 || e > dim {
            return Err(Error::validation(
                format!("maxpool3d.extent.{axis}"),
                format!("extent {e} does not fit input extent {dim}"),
            ));
        }
    }
    let [et, eh, ew] = extent;
    let (ot, oh, ow) = (
        pooled_extent(t, et),
        pooled_extent(h, eh),
        pooled_extent(w, ew),
    );
    let x = input.data();
    let mut out = Vec::with_capacity(c * ot * oh * ow);
    let mut argmax = Vec::with_capacity(c * ot * oh * ow);
    for ci in 0..c {
        for pt in 0..ot {
            for ph in 0..oh {
                for pw in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for dt in 0..et {
                        for dh in 0..eh {
                            let row = ((ci * t + pt * et + dt) * h + ph * eh + dh) * w + pw * ew;
                            for (dw, &v) in x[row..row + ew].iter().enumerate() {
                                if v > best || best_idx == usize::MAX {
                                    best = v;
                                    best_idx = row + dw;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, ot, oh, ow], out)?,
        PoolCache {
            argmax,
            input_shape: input.shape().to_vec(),
        },
    ))
}

pub fn maxpool3d_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != cache.argmax.len() {
        return Err(Error::Shape {
            op: "maxpool3d backward",
            expected: vec![cache.argmax.len()],
            actual: grad_out.shape().to_vec(),
        });
    }
    let mut dx = Tensor::zeros(&cache.input_shape);
    let d = dx.data_mut();
    for (&i, g) in cache.argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Gradient of ReLU given the forward *input*; the subgradient at 0 is 0.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// `y = W x + b` with `W: out × in`.
pub fn linear_forward(input: &[f64], weight: &Tensor, bias: &Tensor) -> Result<Vec<f64>> {
    let out = bias.len();
    weight.expect_shape("linear", &[out, input.len()])?;
    bias.expect_shape("linear", &[out])?;
    Ok(weight
        .data()
        .chunks(input.len().max(1))
        .take(out)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
        .collect())
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Vec<f64>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(input: &[f64], weight: &Tensor, grad_out: &[f64]) -> Result<LinearGrads> {
    let (out, inp) = (grad_out.len(), input.len());
    weight.expect_shape("linear backward", &[out, inp])?;
    let mut dw = Vec::with_capacity(out * inp);
    for &g in grad_out {
        dw.extend(input.iter().map(|x| g * x));
    }
    let mut dx = vec![0.0; inp];
    for (row, &g) in weight.data().chunks(inp.max(1)).zip(grad_out) {
        for (d, w) in dx.iter_mut().zip(row) {
            *d += g * w;
        }
    }
    Ok(LinearGrads {
        input: dx,
        weight: Tensor::from_vec(&[out, inp], dw)?,
        bias: Tensor::from_vec(&[out], grad_out.to_vec())?,
    })
}

/// Inverted dropout. Returns the output together with the per-element
/// multiplier (0 or `1/(1-ratio)`), which is also the backward gate.
pub fn dropout<R: Rng + ?Sized>(
    input: &[f64],
    ratio: f64,
    train: bool,
    rng: &mut R,
) -> (Vec<f64>, Option<Vec<f64>>) {
    if !train || ratio == 0.0 {
        return (input.to_vec(), None);
    }
    let keep = 1.0 - ratio;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = input
        .iter()
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let out = input.iter().zip(&mask).map(|(x, m)| x * m).collect();
    (out, Some(mask))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Weighted softmax cross-entropy: `weight · −log softmax(logits)[target]`
/// and its gradient `weight · (softmax − onehot)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize, weight: f64) -> (f64, Vec<f64>) {
    debug_assert!(logits.len() >= 2 && target < logits.len() && weight > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let loss = weight * (log_total - (logits[target] - max));
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let p = (z - max - log_total).exp();
            weight * (p - if i == target { 1.0 } else { 0.0 })
        })
        .collect();
    (loss, grad)
}

/// `½(pred − target)²` and its derivative in `pred`.
pub fn squared_error_loss(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    (0.5 * d * d, d)
}
