use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Storage layout of a logical `rows x cols` operand.
#[derive(Clone, Copy)]
pub(crate) enum Layout {
    /// Stored row-major as given.
    Normal,
    /// Stored row-major as the transpose (`cols x rows`).
    Transposed,
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths are asserted above and the strides address exactly
    // those row-major buffers.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2<T: Real>(op: &'static str, t: &Tensor<T>, other: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(TensorError::dim(op, "expected 2-D operands", t.shape(), other.shape())),
    }
}

/// Matrix product `a (m x k) * b (k x n)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2("matmul", a, b)?;
    let (k2, n) = dims2("matmul", b, a)?;
    if k != k2 {
        return Err(TensorError::dim(
            "matmul",
            format!("inner dimensions {k} and {k2} disagree"),
            a.shape(),
            b.shape(),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data(), Layout::Normal, &b.data(), Layout::Normal, &mut out, false);
    Tensor::from_op(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let ga = p[0].requires_grad().then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(m, n, k, g, Layout::Normal, &p[1].data(), Layout::Transposed, &mut ga, false);
                ga
            });
            let gb = p[1].requires_grad().then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(k, m, n, &p[0].data(), Layout::Transposed, g, Layout::Normal, &mut gb, false);
                gb
            });
            vec![ga, gb]
        }),
    )
}

impl<T: Real> Tensor<T> {
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(self, other)
    }

    /// `self (m x k) * other^T` where `other` is `n x k`.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = dims2("matmul_nt", self, other)?;
        let (n, k2) = dims2("matmul_nt", other, self)?;
        if k != k2 {
            return Err(TensorError::dim(
                "matmul_nt",
                format!("inner dimensions {k} and {k2} disagree"),
                self.shape(),
                other.shape(),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, &self.data(), Layout::Normal, &other.data(), Layout::Transposed, &mut out, false);
        Tensor::from_op(
            "matmul_nt",
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, g, Layout::Normal, &p[1].data(), Layout::Normal, &mut ga, false);
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); n * k];
                    gemm(n, m, k, g, Layout::Transposed, &p[0].data(), Layout::Normal, &mut gb, false);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }
}

/// Affine map `x (n x in) * w^T + b` with `w` shaped `out x in`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, din) = dims2("linear", x, w)?;
    let (dout, din2) = dims2("linear", w, x)?;
    if din != din2 {
        return Err(TensorError::dim(
            "linear",
            format!("input width {din} does not match weight width {din2}"),
            x.shape(),
            w.shape(),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(TensorError::dim("linear", "bias must have one entry per output", w.shape(), b.shape()));
        }
    }
    let mut out = vec![T::zero(); n * dout];
    if let Some(b) = b {
        let bd = b.data();
        out.chunks_mut(dout).for_each(|row| row.copy_from_slice(&bd));
    }
    gemm(n, din, dout, &x.data(), Layout::Normal, &w.data(), Layout::Transposed, &mut out, b.is_some());
    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(b.cloned());
    Tensor::from_op(
        "linear",
        vec![n, dout],
        out,
        parents,
        Box::new(move |g, p| {
            let gx = p[0].requires_grad().then(|| {
                let mut gx = vec![T::zero(); n * din];
                gemm(n, dout, din, g, Layout::Normal, &p[1].data(), Layout::Normal, &mut gx, false);
                gx
            });
            let gw = p[1].requires_grad().then(|| {
                let mut gw = vec![T::zero(); dout * din];
                gemm(dout, n, din, g, Layout::Transposed, &p[0].data(), Layout::Normal, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if p.len() == 3 {
                grads.push(p[2].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                    }
                    gb
                }));
            }
            grads
        }),
    )
}

/// Scaled dot-product attention `softmax(q k^T / sqrt(d)) v`.
///
/// `q` is `n x d`, `k` is `m x d`, `v` is `m x h`.
pub fn attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = dims2("attention", q, k)?;
    let (m, d2) = dims2("attention", k, q)?;
    let (m2, _h) = dims2("attention", v, k)?;
    if n == 0 || m == 0 || d == 0 {
        return Err(TensorError::dim("attention", "zero-length sequence", q.shape(), k.shape()));
    }
    if d != d2 || m != m2 {
        return Err(TensorError::dim("attention", "q/k widths or k/v lengths disagree", k.shape(), v.shape()));
    }
    // Scaling q rather than the n×m score matrix is the same product at a fraction of the cost.
    let scores = q.scale(1.0 / (d as f64).sqrt())?.matmul_nt(k)?;
    scores.softmax(1)?.matmul(v)
}
