use crate::error::{Result, TensorError};
use crate::ops::sigmoid;
use crate::real::Real;
use crate::tensor::Tensor;

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim(op, "shapes must match", a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| *a + *b).collect();
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| *a - *b).collect();
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())]),
        )
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data().iter()).map(|(a, b)| *a * *b).collect();
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|g, p| {
                let (a, b) = (p[0].data(), p[1].data());
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect());
                let gb = p[1]
                    .requires_grad()
                    .then(|| g.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect());
                vec![ga, gb]
            }),
        )
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::from_f64(c);
        let data = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| *v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::from_f64(c);
        let data = self.data().iter().map(|v| *v + c).collect();
        Tensor::from_op(
            "add_scalar",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|v| *v * *v).collect();
        Tensor::from_op(
            "square",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, p| {
                let x = p[0].data();
                let two = T::from_f64(2.0);
                vec![Some(g.iter().zip(x.iter()).map(|(g, x)| *g * two * *x).collect())]
            }),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(
            "silu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, p| {
                let x = p[0].data();
                let one = T::one();
                let gx = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (one + x * (one - s))
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Tensor<T>> {
        let s: T = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::dim("reshape", "element count must match", self.shape(), &shape));
        }
        Tensor::from_op(
            "reshape",
            shape,
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let &[r, c] = self.shape() else {
            return Err(TensorError::dim("transpose", "expected a 2-D tensor", self.shape(), &[]));
        };
        let data = transpose_buf(&self.data(), r, c);
        Tensor::from_op(
            "transpose",
            vec![c, r],
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(transpose_buf(g, c, r))]),
        )
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[C, ...]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.shape().first().copied().unwrap_or(0);
        if bias.numel() != c || bias.shape().len() != 1 {
            return Err(TensorError::dim(
                "add_channel_bias",
                "bias must be 1-D with one entry per channel",
                self.shape(),
                bias.shape(),
            ));
        }
        let per = self.numel() / c;
        let mut data = self.to_vec();
        {
            let b = bias.data();
            for (ch, chunk) in data.chunks_mut(per).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[ch]);
            }
        }
        Tensor::from_op(
            "add_channel_bias",
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gb = g.chunks(per).map(|ch| ch.iter().copied().sum()).collect();
                vec![Some(g.to_vec()), Some(gb)]
            }),
        )
    }

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim("mean_axis", format!("axis {axis} out of range"), &shape, &[]));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let inv = T::from_f64(1.0 / n as f64);
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        drop(x);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Tensor::from_op(
            "mean_axis",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

pub(crate) fn transpose_buf<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Concatenates along the leading axis; trailing dimensions must agree.
pub fn concat<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
    let tail = &first.shape()[1..];
    let mut lead = 0;
    for p in parts {
        if p.shape().is_empty() || &p.shape()[1..] != tail {
            return Err(TensorError::dim("concat", "trailing dimensions differ", first.shape(), p.shape()));
        }
        lead += p.shape()[0];
    }
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    for p in parts {
        data.extend_from_slice(&p.data());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Tensor::from_op(
        "concat",
        shape,
        data,
        parts.to_vec(),
        Box::new(move |g, p| {
            let mut off = 0;
            sizes
                .iter()
                .zip(p)
                .map(|(&n, t)| {
                    let s = off;
                    off += n;
                    t.requires_grad().then(|| g[s..s + n].to_vec())
                })
                .collect()
        }),
    )
}
