use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

const GN_EPS: f64 = 1e-5;

/// Group normalization of a `[C, ...]` tensor followed by a per-channel affine map.
///
/// Channels are split into `groups` contiguous groups; each group is
/// normalized to zero mean and unit (biased) variance.
pub fn group_norm<T: Real>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape().first().copied().unwrap_or(0);
    if x.shape().len() < 2 || groups == 0 || c % groups != 0 {
        return Err(TensorError::dim(
            "group_norm",
            format!("{c} channels cannot be split into {groups} groups"),
            x.shape(),
            gamma.shape(),
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::dim("group_norm", "affine parameters must be [C]", x.shape(), gamma.shape()));
    }
    let spatial = x.numel() / c;
    let per_group = c / groups;
    let n = per_group * spatial;
    let eps = T::from_f64(GN_EPS);
    let nt = T::from_f64(n as f64);

    let xd = x.data();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); groups];
    for g in 0..groups {
        let range = g * n..(g + 1) * n;
        let seg = &xd[range.clone()];
        let mean = seg.iter().copied().sum::<T>() / nt;
        let var = seg.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nt;
        let is = T::one() / (var + eps).sqrt();
        inv_std[g] = is;
        for (o, v) in xhat[range].iter_mut().zip(seg) {
            *o = (*v - mean) * is;
        }
    }
    drop(xd);
    let mut out = xhat.clone();
    {
        let (gm, bt) = (gamma.data(), beta.data());
        for (ch, chunk) in out.chunks_mut(spatial).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * gm[ch] + bt[ch]);
        }
    }
    Tensor::from_op(
        "group_norm",
        x.shape().to_vec(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, p| {
            let gamma = p[1].data();
            let gx = p[0].requires_grad().then(|| {
                let mut gx = vec![T::zero(); xhat.len()];
                for grp in 0..groups {
                    let range = grp * n..(grp + 1) * n;
                    // dxhat = g * gamma[channel]
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for i in range.clone() {
                        let d = g[i] * gamma[i / spatial];
                        sum_d += d;
                        sum_dx += d * xhat[i];
                    }
                    let scale = inv_std[grp] / nt;
                    for i in range {
                        let d = g[i] * gamma[i / spatial];
                        gx[i] = scale * (nt * d - sum_d - xhat[i] * sum_dx);
                    }
                }
                gx
            });
            let gg = p[1].requires_grad().then(|| {
                g.chunks(spatial)
                    .zip(xhat.chunks(spatial))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| *a * *b).sum())
                    .collect()
            });
            let gb = p[2]
                .requires_grad()
                .then(|| g.chunks(spatial).map(|gc| gc.iter().copied().sum()).collect());
            vec![gx, gg, gb]
        }),
    )
}

impl<T: Real> Tensor<T> {
    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::dim("softmax", format!("axis {axis} out of range"), &shape, &[]));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        if inner == 1 {
            // Contiguous rows: the common attention layout.
            for (xr, yr) in x.chunks_exact(n).zip(y.chunks_exact_mut(n)) {
                let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for (yv, &xv) in yr.iter_mut().zip(xr) {
                    *yv = (xv - max).exp();
                    total += *yv;
                }
                yr.iter_mut().for_each(|v| *v = *v / total);
            }
        }
        for o in (0..outer).filter(|_| inner > 1) {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..n {
                    let e = (x[idx(k)] - max).exp();
                    y[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    y[idx(k)] = y[idx(k)] / total;
                }
            }
        }
        drop(x);
        let saved = y.clone();
        Tensor::from_op(
            "softmax",
            shape,
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); saved.len()];
                if inner == 1 {
                    for ((gr, sr), out) in g.chunks_exact(n).zip(saved.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let dot: T = gr.iter().zip(sr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &sv) in out.iter_mut().zip(gr).zip(sr) {
                            *o = sv * (gv - dot);
                        }
                    }
                }
                for o in (0..outer).filter(|_| inner > 1) {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| g[idx(k)] * saved[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = saved[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
