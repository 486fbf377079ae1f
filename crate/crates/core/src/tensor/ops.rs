use super::{Precision, Tensor};
use crate::error::{Result, VifError};

/// Epsilon used by every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

fn same_precision(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Precision> {
    if a.precision() != b.precision() {
        return Err(VifError::Precision(op));
    }
    Ok(a.precision())
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(VifError::shape(op, format!("expected rank-2 tensor, got {:?}", t.shape())));
    }
    Ok(t.dims2())
}

/// Strided `c = a * b` for row-major buffers, `a` is `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + n - 1 < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the buffers.
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
            rsc as isize,
            1,
        );
    }
}

/// `a[m x k] * b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = same_precision("matmul", a, b)?;
    let (m, k) = require_rank2("matmul", a)?;
    let (k2, n) = require_rank2("matmul", b)?;
    if k != k2 {
        return Err(VifError::shape("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, n, false);
    Tensor::finish("matmul", vec![m, n], out, p)
}

/// `a^T * b` for `a[k x m]`, `b[k x n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = same_precision("matmul_tn", a, b)?;
    let (k, m) = require_rank2("matmul_tn", a)?;
    let (k2, n) = require_rank2("matmul_tn", b)?;
    if k != k2 {
        return Err(VifError::shape("matmul_tn", format!("[{k}x{m}]^T * [{k2}x{n}]")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (1, m), b.data(), (n, 1), &mut out, n, false);
    Tensor::finish("matmul_tn", vec![m, n], out, p)
}

/// `a * b^T` for `a[m x k]`, `b[n x k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = same_precision("matmul_nt", a, b)?;
    let (m, k) = require_rank2("matmul_nt", a)?;
    let (n, k2) = require_rank2("matmul_nt", b)?;
    if k != k2 {
        return Err(VifError::shape("matmul_nt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (1, k), &mut out, n, false);
    Tensor::finish("matmul_nt", vec![m, n], out, p)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_rank2("transpose", a)?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, m], out, a.precision()))
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let p = same_precision(op, a, b)?;
    if a.shape() != b.shape() {
        return Err(VifError::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::finish(op, a.shape().to_vec(), out, p)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("hadamard", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    let out = a.data().iter().map(|&x| x * s).collect();
    Tensor::finish("scale", a.shape().to_vec(), out, a.precision())
}

/// Explicit broadcast of a length-`n` bias over every row of `x[m x n]`.
/// The only broadcasting op in the crate.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let p = same_precision("add_bias", x, bias)?;
    let (m, n) = require_rank2("add_bias", x)?;
    if bias.len() != n || bias.rows() != 1 {
        return Err(VifError::shape("add_bias", format!("x {:?}, bias {:?}", x.shape(), bias.shape())));
    }
    let b = bias.data();
    let mut out = x.data().to_vec();
    for i in 0..m {
        for (o, bj) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
            *o += bj;
        }
    }
    Tensor::finish("add_bias", vec![m, n], out, p)
}

/// Column sums of `x[m x n]` as a rank-1 tensor (the gradient of a broadcast bias).
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = x.dims2();
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    Tensor::finish("sum_rows", vec![n], out, x.precision())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (m, n) = require_rank2("softmax_rows", x)?;
    let mut out = x.data().to_vec();
    for i in 0..m {
        softmax_in_place(&mut out[i * n..(i + 1) * n]);
    }
    Tensor::finish("softmax_rows", vec![m, n], out, x.precision())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given `y = softmax_rows(x)` and upstream `dy`, returns `dx`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let p = same_precision("softmax_rows_backward", y, dy)?;
    if y.shape() != dy.shape() {
        return Err(VifError::shape("softmax_rows_backward", "y and dy differ"));
    }
    let (m, n) = y.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let (yr, dyr) = (y.row(i), dy.row(i));
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            out[i * n + j] = yr[j] * (dyr[j] - dot);
        }
    }
    Tensor::finish("softmax_rows_backward", vec![m, n], out, p)
}

/// Saved activations from a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_fwd(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Layer norm over the last dimension, returning the cache needed by
/// [`layer_norm_backward`].
pub fn layer_norm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let p = same_precision("layer_norm", x, gamma)?;
    same_precision("layer_norm", x, beta)?;
    let (m, d) = require_rank2("layer_norm", x)?;
    if d < 2 {
        return Err(VifError::invalid("layer_norm needs at least 2 features"));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(VifError::shape(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), gamma.shape(), beta.shape()),
        ));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut y = vec![0.0; m * d];
    let mut xhat = vec![0.0; m * d];
    let mut inv_std = Vec::with_capacity(m);
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            xhat[i * d + j] = xh;
            y[i * d + j] = xh * g[j] + b[j];
        }
    }
    let cache = LayerNormCache {
        xhat: Tensor::from_parts_unchecked(vec![m, d], xhat, Precision::F64),
        inv_std,
    };
    Ok((Tensor::finish("layer_norm", vec![m, d], y, p)?, cache))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let p = same_precision("layer_norm_backward", gamma, dy)?;
    let (m, d) = dy.dims2();
    if cache.xhat.shape() != dy.shape() || gamma.len() != d {
        return Err(VifError::shape("layer_norm_backward", "cache/gamma/dy disagree"));
    }
    let g = gamma.data();
    let mut dx = vec![0.0; m * d];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..m {
        let (xh, dyr) = (cache.xhat.row(i), dy.row(i));
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = cache.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    Ok((
        Tensor::finish("layer_norm_backward", vec![m, d], dx, p)?,
        Tensor::finish("layer_norm_backward", gamma.shape().to_vec(), dgamma, p)?,
        Tensor::finish("layer_norm_backward", gamma.shape().to_vec(), dbeta, p)?,
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let out = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    Tensor::finish("gelu", x.shape().to_vec(), out, x.precision())
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let p = same_precision("gelu_backward", x, dy)?;
    if x.shape() != dy.shape() {
        return Err(VifError::shape("gelu_backward", "x and dy differ"));
    }
    let out = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * dt)
        })
        .collect();
    Tensor::finish("gelu_backward", x.shape().to_vec(), out, p)
}

/// Rows of `table` selected by `ids`.
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, n) = require_rank2("gather_rows", table)?;
    if ids.is_empty() {
        return Err(VifError::invalid("gather_rows with no ids"));
    }
    let mut out = Vec::with_capacity(ids.len() * n);
    for &id in ids {
        if id >= rows {
            return Err(VifError::invalid(format!("row id {id} out of range for table of {rows}")));
        }
        out.extend_from_slice(table.row(id));
    }
    Ok(Tensor::from_parts_unchecked(vec![ids.len(), n], out, table.precision()))
}

/// `grad[ids[i]] += dy[i]` for every row `i`: the vjp of [`gather_rows`].
pub fn scatter_add_rows(grad: &mut Tensor, ids: &[usize], dy: &Tensor) -> Result<()> {
    let (rows, n) = grad.dims2();
    if dy.cols() != n || dy.rows() != ids.len() {
        return Err(VifError::shape("scatter_add_rows", format!("grad {:?}, dy {:?}", grad.shape(), dy.shape())));
    }
    let p = grad.precision();
    let g = grad.data_mut();
    for (i, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(VifError::invalid(format!("row id {id} out of range")));
        }
        for (o, v) in g[id * n..(id + 1) * n].iter_mut().zip(dy.row(i)) {
            *o = p.round(*o + v);
        }
    }
    Ok(())
}

pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = same_precision("concat_rows", a, b)?;
    if a.cols() != b.cols() {
        return Err(VifError::shape("concat_rows", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.data().to_vec();
    out.extend_from_slice(b.data());
    Ok(Tensor::from_parts_unchecked(vec![a.rows() + b.rows(), a.cols()], out, p))
}

/// Rows `start..end`.
pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (m, n) = x.dims2();
    if start >= end || end > m {
        return Err(VifError::shape("slice_rows", format!("{start}..{end} of {m} rows")));
    }
    Ok(Tensor::from_parts_unchecked(
        vec![end - start, n],
        x.data()[start * n..end * n].to_vec(),
        x.precision(),
    ))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Kernels with a registered vector-Jacobian product.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpId {
    Matmul,
    Add,
    AddBias,
    SoftmaxRows,
    /// Inputs `(x, gamma, beta)`, epsilon [`LN_EPS`].
    LayerNorm,
    Gelu,
}

impl OpId {
    pub const ALL: [OpId; 6] = [
        OpId::Matmul,
        OpId::Add,
        OpId::AddBias,
        OpId::SoftmaxRows,
        OpId::LayerNorm,
        OpId::Gelu,
    ];

    pub fn arity(self) -> usize {
        match self {
            OpId::SoftmaxRows | OpId::Gelu => 1,
            OpId::Matmul | OpId::Add | OpId::AddBias => 2,
            OpId::LayerNorm => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpId::Matmul => "matmul",
            OpId::Add => "add",
            OpId::AddBias => "add_bias",
            OpId::SoftmaxRows => "softmax_rows",
            OpId::LayerNorm => "layer_norm",
            OpId::Gelu => "gelu",
        }
    }

    pub fn from_name(name: &str) -> Result<OpId> {
        OpId::ALL
            .into_iter()
            .find(|op| op.name() == name)
            .ok_or_else(|| VifError::invalid(format!("unknown op id `{name}`")))
    }
}

fn check_arity(op: OpId, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != op.arity() {
        return Err(VifError::invalid(format!(
            "{} takes {} inputs, got {}",
            op.name(),
            op.arity(),
            inputs.len()
        )));
    }
    Ok(())
}

/// Forward evaluation of a registered op.
pub fn eval(op: OpId, inputs: &[&Tensor]) -> Result<Tensor> {
    check_arity(op, inputs)?;
    match op {
        OpId::Matmul => matmul(inputs[0], inputs[1]),
        OpId::Add => add(inputs[0], inputs[1]),
        OpId::AddBias => add_bias(inputs[0], inputs[1]),
        OpId::SoftmaxRows => softmax_rows(inputs[0]),
        OpId::LayerNorm => layer_norm(inputs[0], inputs[1], inputs[2], LN_EPS),
        OpId::Gelu => gelu(inputs[0]),
    }
}

/// Gradients with respect to each input, in input order.
pub fn vjp(op: OpId, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
    check_arity(op, inputs)?;
    match op {
        OpId::Matmul => Ok(vec![
            matmul_nt(upstream, inputs[1])?,
            matmul_tn(inputs[0], upstream)?,
        ]),
        OpId::Add => Ok(vec![upstream.clone(), upstream.clone()]),
        OpId::AddBias => {
            let db = sum_rows(upstream)?.reshape(inputs[1].shape())?;
            Ok(vec![upstream.clone(), db])
        }
        OpId::SoftmaxRows => {
            let y = softmax_rows(inputs[0])?;
            Ok(vec![softmax_rows_backward(&y, upstream)?])
        }
        OpId::LayerNorm => {
            let (_, cache) = layer_norm_fwd(inputs[0], inputs[1], inputs[2], LN_EPS)?;
            let (dx, dg, db) = layer_norm_backward(&cache, inputs[1], upstream)?;
            Ok(vec![dx, dg, db])
        }
        OpId::Gelu => Ok(vec![gelu_backward(inputs[0], upstream)?]),
    }
}
