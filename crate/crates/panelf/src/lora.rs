//! Low-rank adapters over frozen attention projections.
//!
//! Each adapter holds `A: [k, h]` and `B: [d, k]` for a target weight
//! `W: [d, h]`; the layer computes `x W^T + (x A^T) B^T`, i.e. `W + BA`
//! with scale 1, without materializing the update.

use std::collections::BTreeMap;
use std::path::Path;

use panelf_core::ops::{linear, matmul};
use panelf_core::{Real, Rng, Tensor};
use regex::Regex;
use serde_json::json;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};

pub const DEFAULT_RANK: usize = 4;

/// Every q/k/v/out projection of every attention layer.
pub const DEFAULT_TARGETS: &str = r"\.attn\.(self|cross)\.to_(q|k|v|out)\.weight$";

/// Checkpoint tensor-name prefix for adapter factors.
const PREFIX: &str = "lora.";

#[derive(Clone, Debug)]
pub struct LoraAdapter<T: Real = f32> {
    pub target_path: String,
    /// `[k, h]`
    pub a: Tensor<T>,
    /// `[d, k]`
    pub b: Tensor<T>,
    pub rank: usize,
}

impl<T: Real> LoraAdapter<T> {
    /// `x (W + BA)^T` computed as `x W^T + (x A^T) B^T`.
    pub fn effective_forward(&self, w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (d, h) = (self.b.shape()[0], self.a.shape()[1]);
        if w.shape() != [d, h] {
            return Err(Error::Compatibility {
                path: self.target_path.clone(),
                detail: format!("adapter expects a [{d}, {h}] weight, got {:?}", w.shape()),
            });
        }
        let base = linear(x, w, None)?;
        let low = linear(&linear(x, &self.a, None)?, &self.b, None)?;
        Ok(base.add(&low)?)
    }

    /// Materialized update `B A`.
    pub fn delta(&self) -> Result<Tensor<T>> {
        Ok(matmul(&self.b, &self.a)?)
    }

    /// `k (d + h)`.
    pub fn trainable_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Adapters for a frozen base, one per matched weight, in path order.
#[derive(Clone, Debug)]
pub struct LoraSet<T: Real = f32> {
    adapters: Vec<LoraAdapter<T>>,
    index: BTreeMap<String, usize>,
    frozen_base: ModelParams<T>,
}

fn compile(pattern: &str) -> Result<Regex> {
    Regex::new(pattern).map_err(|e| Error::Config(format!("invalid target pattern: {e}")))
}

impl LoraSet<f32> {
    /// Freezes `params` and attaches rank-`rank` adapters to every path matching `targets`.
    ///
    /// `A` is drawn from `N(0, (1/k)^2)` with a generator seeded by `seed`; `B` is zero.
    pub fn attach(params: &ModelParams, rank: usize, targets: &str, seed: u64) -> Result<Self> {
        let re = compile(targets)?;
        let matched: Vec<(&str, &Tensor)> = params.iter().filter(|(p, _)| re.is_match(p)).collect();
        if matched.is_empty() {
            return Err(Error::Config(format!("target pattern `{targets}` matches no parameter")));
        }
        if rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let mut rng = Rng::new(seed);
        let std = 1.0 / rank as f64;
        let mut adapters = Vec::with_capacity(matched.len());
        for (path, w) in matched {
            let &[d, h] = w.shape() else {
                return Err(Error::Config(format!("target `{path}` is not a 2-D weight: {:?}", w.shape())));
            };
            if rank > d.min(h) {
                return Err(Error::Config(format!("rank {rank} exceeds min({d}, {h}) for `{path}`")));
            }
            let a: Vec<f32> = (0..rank * h).map(|_| (rng.normal_f64() * std) as f32).collect();
            adapters.push(LoraAdapter {
                target_path: path.to_string(),
                a: Tensor::param(vec![rank, h], a)?,
                b: Tensor::param(vec![d, rank], vec![0.0; d * rank])?,
                rank,
            });
        }
        Self::assemble(adapters, params)
    }

    /// Adapter factors as checkpoint tensors (`lora.<target>.a` / `.b`).
    pub fn to_tensors(&self) -> ModelParams {
        let mut out = ModelParams::new();
        for ad in &self.adapters {
            out.set(format!("{PREFIX}{}.a", ad.target_path), ad.a.clone());
            out.set(format!("{PREFIX}{}.b", ad.target_path), ad.b.clone());
        }
        out
    }

    /// Rebuilds a set from checkpoint tensors, verifying every target against `params`.
    ///
    /// Tensors without the adapter prefix are ignored.
    pub fn from_tensors(tensors: &ModelParams, params: &ModelParams) -> Result<Self> {
        let mut pairs: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (name, t) in tensors.iter() {
            let Some(rest) = name.strip_prefix(PREFIX) else { continue };
            let (target, which) = rest.rsplit_once('.').ok_or_else(|| Error::Compatibility {
                path: name.to_string(),
                detail: "malformed adapter tensor name".into(),
            })?;
            let slot = pairs.entry(target.to_string()).or_default();
            match which {
                "a" => slot.0 = Some(t.clone()),
                "b" => slot.1 = Some(t.clone()),
                _ => {
                    return Err(Error::Compatibility {
                        path: name.to_string(),
                        detail: "expected factor `a` or `b`".into(),
                    })
                }
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config("checkpoint holds no adapter tensors".into()));
        }
        let mut adapters = Vec::with_capacity(pairs.len());
        for (target, (a, b)) in pairs {
            let incompatible = |detail: String| Error::Compatibility {
                path: target.clone(),
                detail,
            };
            let (Some(a), Some(b)) = (a, b) else {
                return Err(incompatible("adapter is missing one of its factors".into()));
            };
            let w = params
                .get(&target)
                .map_err(|_| incompatible("no such parameter in the base model".into()))?;
            let &[d, h] = w.shape() else {
                return Err(incompatible(format!("base weight is not 2-D: {:?}", w.shape())));
            };
            let (&[k, ha], &[db, kb]) = (a.shape(), b.shape()) else {
                return Err(incompatible("adapter factors must be 2-D".into()));
            };
            if ha != h || db != d || k != kb || k > d.min(h) {
                return Err(incompatible(format!(
                    "factors A{:?} B{:?} do not fit base weight [{d}, {h}]",
                    a.shape(),
                    b.shape()
                )));
            }
            a.set_requires_grad(true);
            b.set_requires_grad(true);
            adapters.push(LoraAdapter {
                target_path: target,
                a,
                b,
                rank: k,
            });
        }
        Self::assemble(adapters, params)
    }
}

impl<T: Real> LoraSet<T> {
    fn assemble(adapters: Vec<LoraAdapter<T>>, params: &ModelParams<T>) -> Result<Self> {
        params.set_requires_grad(false);
        let index = adapters
            .iter()
            .enumerate()
            .map(|(i, a)| (a.target_path.clone(), i))
            .collect();
        Ok(LoraSet {
            adapters,
            index,
            frozen_base: params.clone(),
        })
    }

    pub fn adapter(&self, path: &str) -> Option<&LoraAdapter<T>> {
        self.index.get(path).map(|&i| &self.adapters[i])
    }

    pub fn adapters(&self) -> &[LoraAdapter<T>] {
        &self.adapters
    }

    pub fn base(&self) -> &ModelParams<T> {
        &self.frozen_base
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::trainable_count).sum()
    }

    /// `(name, tensor)` for every adapter factor, in path order.
    pub fn trainable(&self) -> Vec<(String, Tensor<T>)> {
        self.adapters
            .iter()
            .flat_map(|a| {
                [
                    (format!("{PREFIX}{}.a", a.target_path), a.a.clone()),
                    (format!("{PREFIX}{}.b", a.target_path), a.b.clone()),
                ]
            })
            .collect()
    }

    /// Copy of the base with every target replaced by `W + BA`.
    pub fn merge(&self) -> Result<ModelParams<T>> {
        let mut merged = self.frozen_base.deep_clone();
        for ad in &self.adapters {
            let w = self.frozen_base.get(&ad.target_path)?;
            let delta = ad.delta()?;
            let sum: Vec<T> = w.data().iter().zip(delta.data().iter()).map(|(&x, &y)| x + y).collect();
            let t = Tensor::new(w.shape().to_vec(), sum)?;
            merged.set(ad.target_path.clone(), t);
        }
        Ok(merged)
    }

    pub fn cast<U: Real>(&self) -> LoraSet<U> {
        LoraSet {
            adapters: self
                .adapters
                .iter()
                .map(|a| LoraAdapter {
                    target_path: a.target_path.clone(),
                    a: a.a.cast(),
                    b: a.b.cast(),
                    rank: a.rank,
                })
                .collect(),
            index: self.index.clone(),
            frozen_base: self.frozen_base.cast(),
        }
    }
}

/// Writes the adapter factors as an adapter-only checkpoint.
pub fn save_adapter(set: &LoraSet, path: &Path) -> Result<()> {
    let info = CheckpointInfo {
        adapter_only: true,
        step: 0,
        config: json!({
            "rank": set.adapters.first().map(|a| a.rank),
            "targets": set.adapters.iter().map(|a| a.target_path.clone()).collect::<Vec<_>>(),
        }),
    };
    save_checkpoint(&set.to_tensors(), &info, path)
}

/// Loads adapters from `path` and checks them against `params`, which become frozen.
pub fn load_adapter(path: &Path, params: &ModelParams) -> Result<LoraSet> {
    let (tensors, info) = load_checkpoint(path)?;
    if !info.adapter_only {
        return Err(Error::Compatibility {
            path: path.display().to_string(),
            detail: "checkpoint is not marked adapter-only".into(),
        });
    }
    LoraSet::from_tensors(&tensors, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(seed: u64) -> ModelParams {
        let mut rng = Rng::new(seed);
        let mut p = ModelParams::new();
        p.insert("blk.attn.self.to_q.weight", rng.normal_tensor(&[6, 5]).unwrap()).unwrap();
        p.insert("blk.attn.cross.to_k.weight", rng.normal_tensor(&[6, 7]).unwrap()).unwrap();
        p.insert("blk.conv.weight", rng.normal_tensor(&[2, 2, 3, 3]).unwrap()).unwrap();
        p
    }

    /// Row-echelon rank in f64 with partial pivoting.
    fn numeric_rank(m: &[f64], rows: usize, cols: usize) -> usize {
        let mut a = m.to_vec();
        let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        // Entries come from f32 products, so residuals sit near f32 epsilon.
        let tol = scale * 1e-5 * rows.max(cols) as f64;
        let mut rank = 0;
        for c in 0..cols {
            if rank == rows {
                break;
            }
            let piv = (rank..rows)
                .max_by(|&i, &j| a[i * cols + c].abs().total_cmp(&a[j * cols + c].abs()))
                .unwrap();
            if a[piv * cols + c].abs() <= tol {
                continue;
            }
            for k in 0..cols {
                a.swap(rank * cols + k, piv * cols + k);
            }
            for r in rank + 1..rows {
                let f = a[r * cols + c] / a[rank * cols + c];
                for k in c..cols {
                    a[r * cols + k] -= f * a[rank * cols + k];
                }
            }
            rank += 1;
        }
        rank
    }

    #[test]
    fn attach_shapes_and_freeze() {
        let p = base(0);
        let set = LoraSet::attach(&p, 2, DEFAULT_TARGETS, 1).unwrap();
        assert_eq!(set.adapters().len(), 2);
        assert_eq!(set.adapters()[0].target_path, "blk.attn.cross.to_k.weight");
        let q = set.adapter("blk.attn.self.to_q.weight").unwrap();
        assert_eq!(q.a.shape(), &[2, 5]);
        assert_eq!(q.b.shape(), &[6, 2]);
        assert!(p.iter().all(|(_, t)| !t.requires_grad()));
        assert_eq!(set.trainable_count(), 2 * (6 + 5) + 2 * (6 + 7));
    }

    #[test]
    fn sixty_four_square_rank_four() {
        let mut p = ModelParams::new();
        p.insert("m.attn.self.to_v.weight", Tensor::zeros(vec![64, 64])).unwrap();
        let set = LoraSet::attach(&p, 4, DEFAULT_TARGETS, 0).unwrap();
        assert_eq!(set.trainable_count(), 512);
        assert_eq!(p.num_elements(), 4096);
    }

    #[test]
    fn attach_errors() {
        let p = base(0);
        assert!(matches!(LoraSet::attach(&p, 2, "nothing", 0), Err(Error::Config(_))));
        assert!(matches!(LoraSet::attach(&p, 6, DEFAULT_TARGETS, 0), Err(Error::Config(_))));
        assert!(matches!(LoraSet::attach(&p, 2, "conv", 0), Err(Error::Config(_))));
    }

    #[test]
    fn attach_is_seeded() {
        let a = LoraSet::attach(&base(0), 3, DEFAULT_TARGETS, 9).unwrap();
        let b = LoraSet::attach(&base(0), 3, DEFAULT_TARGETS, 9).unwrap();
        assert!(a.to_tensors().bit_equal(&b.to_tensors()));
    }

    #[test]
    fn zero_b_is_exact_and_grads_reach_factors_only() {
        let p = base(2);
        let set = LoraSet::attach(&p, 2, DEFAULT_TARGETS, 3).unwrap();
        let path = "blk.attn.self.to_q.weight";
        let w = p.get(path).unwrap();
        let x = Rng::new(4).normal_tensor(&[3, 5]).unwrap();
        let ad = set.adapter(path).unwrap();
        let y = ad.effective_forward(w, &x).unwrap();
        assert_eq!(y.to_vec(), linear(&x, w, None).unwrap().to_vec());
        y.square().unwrap().sum().unwrap().backward().unwrap();
        assert!(!w.has_grad());
        assert!(ad.a.has_grad() && ad.b.has_grad());
    }

    #[test]
    fn runtime_matches_materialized_update() {
        let p = base(5);
        let set = LoraSet::attach(&p, 3, DEFAULT_TARGETS, 6).unwrap();
        let mut rng = Rng::new(7);
        for ad in set.adapters() {
            ad.b.update_data(|b| b.iter_mut().for_each(|v| *v = rng.normal())).unwrap();
        }
        let merged = set.merge().unwrap();
        for ad in set.adapters() {
            let w = p.get(&ad.target_path).unwrap();
            let x = rng.normal_tensor(&[4, w.shape()[1]]).unwrap();
            let runtime = ad.effective_forward(w, &x).unwrap().to_vec();
            let full = linear(&x, merged.get(&ad.target_path).unwrap(), None).unwrap().to_vec();
            for (r, f) in runtime.iter().zip(&full) {
                assert!((r - f).abs() <= 1e-5 * (1.0 + f.abs()), "{r} vs {f}");
            }
        }
        assert!(merged.get("blk.conv.weight").unwrap().to_vec() == p.get("blk.conv.weight").unwrap().to_vec());
        assert_ne!(
            merged.get("blk.attn.self.to_q.weight").unwrap().to_vec(),
            p.get("blk.attn.self.to_q.weight").unwrap().to_vec()
        );
    }

    #[test]
    fn zero_b_merge_equals_base() {
        let p = base(8);
        let set = LoraSet::attach(&p, 2, DEFAULT_TARGETS, 0).unwrap();
        assert!(set.merge().unwrap().bit_equal(&p));
    }

    #[test]
    fn update_rank_bounded_by_k() {
        let mut p = ModelParams::new();
        p.insert("x.attn.self.to_q.weight", Tensor::zeros(vec![9, 8])).unwrap();
        for k in 1..=4 {
            let set = LoraSet::attach(&p, k, DEFAULT_TARGETS, k as u64).unwrap();
            let ad = &set.adapters()[0];
            let mut rng = Rng::new(k as u64 + 10);
            ad.b.update_data(|b| b.iter_mut().for_each(|v| *v = rng.normal())).unwrap();
            let delta: Vec<f64> = ad.delta().unwrap().to_f64_vec();
            assert_eq!(numeric_rank(&delta, 9, 8), k);
        }
    }

    #[test]
    fn save_load_roundtrip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("adapter.pnlf");
        let p = base(11);
        let set = LoraSet::attach(&p, 2, DEFAULT_TARGETS, 12).unwrap();
        let mut rng = Rng::new(13);
        for ad in set.adapters() {
            ad.b.update_data(|b| b.iter_mut().for_each(|v| *v = rng.normal())).unwrap();
        }
        save_adapter(&set, &file).unwrap();
        let back = load_adapter(&file, &p).unwrap();
        assert!(back.to_tensors().bit_equal(&set.to_tensors()));

        let mut other = ModelParams::new();
        other.insert("blk.attn.self.to_q.weight", Tensor::zeros(vec![6, 5])).unwrap();
        other.insert("blk.attn.cross.to_k.weight", Tensor::zeros(vec![6, 9])).unwrap();
        match load_adapter(&file, &other).unwrap_err() {
            Error::Compatibility { path, .. } => assert_eq!(path, "blk.attn.cross.to_k.weight"),
            e => panic!("{e:?}"),
        }
        let mut missing = ModelParams::new();
        missing.insert("blk.attn.cross.to_k.weight", Tensor::zeros(vec![6, 7])).unwrap();
        match load_adapter(&file, &missing).unwrap_err() {
            Error::Compatibility { path, .. } => assert_eq!(path, "blk.attn.self.to_q.weight"),
            e => panic!("{e:?}"),
        }
    }
}
