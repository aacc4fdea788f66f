use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Mean squared error between two tensors of identical shape.
pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::dim("mse", "shapes must match", a.shape(), b.shape()));
    }
    let n = T::from_f64(a.numel() as f64);
    let diff: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(x, y)| *x - *y).collect();
    let loss = diff.iter().map(|d| *d * *d).sum::<T>() / n;
    Tensor::from_op(
        "mse",
        Vec::new(),
        vec![loss],
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let k = g[0] * T::from_f64(2.0) / n;
            let ga = p[0].requires_grad().then(|| diff.iter().map(|d| *d * k).collect());
            let gb = p[1].requires_grad().then(|| diff.iter().map(|d| -*d * k).collect());
            vec![ga, gb]
        }),
    )
}

/// Cosine similarity of two equally sized tensors, treated as flat vectors.
pub fn cosine_sim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.numel() != b.numel() {
        return Err(TensorError::dim("cosine_sim", "element counts differ", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.to_vec(), b.to_vec());
    let na = ad.iter().map(|v| *v * *v).sum::<T>().sqrt();
    let nb = bd.iter().map(|v| *v * *v).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(TensorError::NumericGuard {
            op: "cosine_sim",
            detail: "zero-norm input".into(),
        });
    }
    let dot: T = ad.iter().zip(&bd).map(|(x, y)| *x * *y).sum();
    let cos = dot / (na * nb);
    Tensor::from_op(
        "cosine_sim",
        Vec::new(),
        vec![cos],
        vec![a.clone(), b.clone()],
        Box::new(move |g, p| {
            let g = g[0];
            let grad = |x: &[T], y: &[T], nx: T| -> Vec<T> {
                x.iter()
                    .zip(y)
                    .map(|(xi, yi)| g * (*yi / (na * nb) - cos * *xi / (nx * nx)))
                    .collect()
            };
            let ga = p[0].requires_grad().then(|| grad(&ad, &bd, na));
            let gb = p[1].requires_grad().then(|| grad(&bd, &ad, nb));
            vec![ga, gb]
        }),
    )
}

/// Mean cross-entropy of row-wise logits `[N, C]` against class indices.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>> {
    let &[n, c] = logits.shape() else {
        return Err(TensorError::dim("cross_entropy", "expected [N, C] logits", logits.shape(), &[targets.len()]));
    };
    if targets.len() != n || targets.iter().any(|&t| t >= c) {
        return Err(TensorError::dim(
            "cross_entropy",
            "one in-range target per row required",
            logits.shape(),
            &[targets.len()],
        ));
    }
    let x = logits.data();
    let mut probs = vec![T::zero(); n * c];
    let mut loss = T::zero();
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let total: T = row.iter().map(|v| (*v - max).exp()).sum();
        let lse = max + total.ln();
        loss += lse - row[targets[i]];
        for j in 0..c {
            probs[i * c + j] = (row[j] - lse).exp();
        }
    }
    drop(x);
    let nt = T::from_f64(n as f64);
    let targets = targets.to_vec();
    Tensor::from_op(
        "cross_entropy",
        Vec::new(),
        vec![loss / nt],
        vec![logits.clone()],
        Box::new(move |g, _| {
            let k = g[0] / nt;
            let mut gx: Vec<T> = probs.iter().map(|p| *p * k).collect();
            for (i, &t) in targets.iter().enumerate() {
                gx[i * c + t] -= k;
            }
            vec![Some(gx)]
        }),
    )
}

impl<T: Real> Tensor<T> {
    /// Scales each row of a 2-D tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<T>> {
        let &[n, d] = self.shape() else {
            return Err(TensorError::dim("l2_normalize_rows", "expected a 2-D tensor", self.shape(), &[]));
        };
        let x = self.data();
        let norms: Vec<T> = x.chunks(d).map(|r| r.iter().map(|v| *v * *v).sum::<T>().sqrt()).collect();
        if let Some(row) = norms.iter().position(|v| *v == T::zero()) {
            return Err(TensorError::NumericGuard {
                op: "l2_normalize_rows",
                detail: format!("row {row} has zero norm"),
            });
        }
        let y: Vec<T> = x
            .chunks(d)
            .zip(&norms)
            .flat_map(|(r, nrm)| r.iter().map(move |v| *v / *nrm))
            .collect();
        drop(x);
        let saved = y.clone();
        Tensor::from_op(
            "l2_normalize_rows",
            vec![n, d],
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    let dot: T = g[r.clone()].iter().zip(&saved[r.clone()]).map(|(a, b)| *a * *b).sum();
                    for j in r {
                        gx[j] = (g[j] - saved[j] * dot) / norms[i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
