use crate::error::{dim_err, Result};

/// Splits `[..., m, k]` into (batch, m, k).
fn batch_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(dim_err(op, format!("need rank >= 2, got {:?}", shape)));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

pub(crate) fn matmul(
    a_shape: &[usize],
    a: &[f64],
    b_shape: &[usize],
    b: &[f64],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let (batch, m, k) = batch_dims(a_shape, "matmul")?;
    let (_, k2, n) = batch_dims(b_shape, "matmul")?;
    if a_shape.len() != b_shape.len() || a_shape[..a_shape.len() - 2] != b_shape[..b_shape.len() - 2] {
        return Err(dim_err(
            "matmul",
            format!("batch dims differ: {:?} vs {:?}", a_shape, b_shape),
        ));
    }
    if k != k2 {
        return Err(dim_err(
            "matmul",
            format!("inner extents differ: {:?} vs {:?}", a_shape, b_shape),
        ));
    }
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        mm_into(
            &a[bi * m * k..(bi + 1) * m * k],
            &b[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = a_shape[..a_shape.len() - 2].to_vec();
    shape.extend([m, n]);
    Ok((shape, out))
}

/// out += a[m×k] · b[k×n]
pub(crate) fn mm_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out += a[m×k] · b[n×k]ᵀ
pub(crate) fn mm_nt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out += a[k×m]ᵀ · b[k×n]
pub(crate) fn mm_tn_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Output shape and source index for each output position of a permutation.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let r = shape.len();
    let mut seen = vec![false; r];
    if axes.len() != r {
        return Err(dim_err(
            "permute",
            format!("axis order {:?} for rank {}", axes, r),
        ));
    }
    for &a in axes {
        if a >= r || seen[a] {
            return Err(dim_err(
                "permute",
                format!("{:?} is not a permutation of 0..{}", axes, r),
            ));
        }
        seen[a] = true;
    }
    let mut strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut index = Vec::with_capacity(n);
    let mut counter = vec![0usize; r];
    for _ in 0..n {
        index.push(counter.iter().zip(&out_strides).map(|(c, s)| c * s).sum());
        for ax in (0..r).rev() {
            counter[ax] += 1;
            if counter[ax] < out_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    Ok((out_shape, index))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}
