use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Row lookup `table[ids[i]]`, giving an `[L, D]` tensor.
pub fn embed<T: Real>(ids: &[usize], table: &Tensor<T>) -> Result<Tensor<T>> {
    let &[v, d] = table.shape() else {
        return Err(TensorError::dim("embed", "table must be [V, D]", table.shape(), &[ids.len()]));
    };
    if ids.is_empty() {
        return Err(TensorError::dim("embed", "empty id sequence", table.shape(), &[0]));
    }
    if let Some(bad) = ids.iter().find(|&&i| i >= v) {
        return Err(TensorError::dim("embed", format!("id {bad} outside vocabulary of {v}"), table.shape(), &[ids.len()]));
    }
    let tbl = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&tbl[i * d..(i + 1) * d]);
    }
    drop(tbl);
    let ids = ids.to_vec();
    Tensor::from_op(
        "embed",
        vec![ids.len(), d],
        out,
        vec![table.clone()],
        Box::new(move |g, _| {
            let mut gt = vec![T::zero(); v * d];
            for (row, &i) in ids.iter().enumerate() {
                gt[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[row * d..(row + 1) * d])
                    .for_each(|(a, b)| *a += *b);
            }
            vec![Some(gt)]
        }),
    )
}
