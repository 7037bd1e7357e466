//! Forward kernels shared by the plain-tensor API and the tape.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-6;

const GELU_COEFF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Row/column/batch strides of one matmul operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
    pub bs: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
            bs: rows * cols,
        }
    }

    pub fn transposed(rows: usize, cols: usize) -> Self {
        // Storage is cols×rows row-major, read as rows×cols.
        Layout {
            rs: 1,
            cs: rows as isize,
            bs: rows * cols,
        }
    }

    pub fn shared(self) -> Self {
        Layout { bs: 0, ..self }
    }
}

/// `batch` independent products of an m×k and a k×n operand.
pub(crate) fn bgemm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    for bt in 0..batch {
        let a_off = bt * la.bs;
        let b_off = bt * lb.bs;
        T::gemm(
            m,
            k,
            n,
            &a[a_off..],
            la.rs,
            la.cs,
            &b[b_off..],
            lb.rs,
            lb.cs,
            &mut out[bt * m * n..(bt + 1) * m * n],
        );
    }
    out
}

/// Shape bookkeeping for `a · b` (or `a · bᵀ`).
///
/// A rank-2 right operand is shared across every leading index of `a`;
/// otherwise both operands must carry identical leading (batch) dims.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
    pub trans_b: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulPlan> {
    let err = || Error::shape("matmul", a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    let k = a[a.len() - 1];
    if k != bk {
        return Err(err());
    }
    if b.len() == 2 {
        let m: usize = a[..a.len() - 1].iter().product();
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(n);
        return Ok(MatmulPlan {
            batch: 1,
            m,
            k,
            n,
            shared_rhs: true,
            trans_b,
            out_shape,
        });
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    let lead = &a[..a.len() - 2];
    let m = a[a.len() - 2];
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        batch: lead.iter().product(),
        m,
        k,
        n,
        shared_rhs: false,
        trans_b,
        out_shape,
    })
}

impl MatmulPlan {
    fn rhs_layout(&self) -> Layout {
        let l = if self.trans_b {
            Layout::transposed(self.k, self.n)
        } else {
            Layout::row_major(self.k, self.n)
        };
        if self.shared_rhs {
            l.shared()
        } else {
            l
        }
    }

    pub fn forward<T: Scalar>(&self, a: &[T], b: &[T]) -> Vec<T> {
        bgemm(
            self.batch,
            self.m,
            self.k,
            self.n,
            a,
            Layout::row_major(self.m, self.k),
            b,
            self.rhs_layout(),
        )
    }

    /// Gradients of both operands given the output gradient.
    pub fn backward<T: Scalar>(&self, a: &[T], b: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
        let (batch, m, k, n) = (self.batch, self.m, self.k, self.n);
        // dA = dC · op(B)ᵀ
        let opbt = if self.trans_b {
            Layout::row_major(n, k)
        } else {
            Layout::transposed(n, k)
        };
        let opbt = if self.shared_rhs { opbt.shared() } else { opbt };
        let da = bgemm(batch, m, n, k, grad, Layout::row_major(m, n), b, opbt);
        // Shared right operands accumulate over every row of A, which is
        // already a single (batch = 1) product here.
        let db = if self.trans_b {
            // d(Bstored) = dCᵀ · A, shape n×k
            bgemm(
                batch,
                n,
                m,
                k,
                grad,
                Layout::transposed(n, m),
                a,
                Layout::row_major(m, k),
            )
        } else {
            // dB = Aᵀ · dC, shape k×n
            bgemm(
                batch,
                k,
                m,
                n,
                a,
                Layout::transposed(k, m),
                grad,
                Layout::row_major(m, n),
            )
        };
        (da, db)
    }
}

pub(crate) fn permute<T: Copy>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> Result<(Vec<usize>, Vec<T>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
    {
        return Err(Error::invalid(
            "permute",
            format!("{perm:?} is not a permutation of the axes of {shape:?}"),
        ));
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    if numel == 0 {
        return Ok((out_shape, out));
    }
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut index = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // advance the multi-index over all but the last axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return Ok((out_shape, out));
            }
            axis -= 1;
            index[axis] += 1;
            base += strides[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks_exact(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &x in row {
            let e = (x - max).exp();
            total = total + e;
            out.push(e);
        }
        let inv = T::one() / total;
        for v in &mut out[start..] {
            *v = *v * inv;
        }
    }
    out
}

/// Normalised output plus the saved `x̂` and `1/σ` per row.
pub(crate) fn layernorm_rows<T: Scalar>(
    data: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = gamma.len();
    let inv_d = T::one() / T::of(d as f64);
    let mut out = Vec::with_capacity(data.len());
    let mut xhat = Vec::with_capacity(data.len());
    let mut rstd = Vec::with_capacity(data.len() / d);
    for row in data.chunks_exact(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row
            .iter()
            .map(|&x| (x - mean) * (x - mean))
            .sum::<T>()
            * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &x) in row.iter().enumerate() {
            let h = (x - mean) * r;
            xhat.push(h);
            out.push(h * gamma[j] + beta[j]);
        }
    }
    (out, xhat, rstd)
}

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_SCALE) * (x + T::of(GELU_COEFF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_SCALE) * (x + T::of(GELU_COEFF) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_SCALE) * (T::one() + T::of(3.0 * GELU_COEFF) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = plan_matmul(a.shape(), b.shape(), false)?;
    let out = Tensor::new(plan.out_shape.clone(), plan.forward(a.data(), b.data()))?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Softmax over the last axis, max-shifted.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = *x.shape().last().expect("rank >= 1");
    let out = Tensor::new(x.shape().to_vec(), softmax_rows(x.data(), cols))?;
    out.ensure_finite("softmax")?;
    Ok(out)
}

/// Layer normalisation over the last axis with the biased variance.
pub fn layernorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().expect("rank >= 1");
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layernorm", x.shape(), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("layernorm", "eps must be positive"));
    }
    let (out, _, _) = layernorm_rows(x.data(), gamma.data(), beta.data(), T::of(eps));
    let out = Tensor::new(x.shape().to_vec(), out)?;
    out.ensure_finite("layernorm")?;
    Ok(out)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}
