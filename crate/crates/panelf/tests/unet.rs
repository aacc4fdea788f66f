use std::collections::BTreeSet;

use panelf::lora::{LoraSet, DEFAULT_TARGETS};
use panelf::model::{init_unet, unet_forward, ModelParams, UNetConfig};
use panelf_core::gradcheck::{grad_check, ScalarFn};
use panelf_core::{Real, Rng, Tensor};

fn tiny() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        base_channels: 4,
        depth: 1,
        time_embed_dim: 8,
        cond_dim: 6,
        attn_resolutions: BTreeSet::from([0, 1]),
        image_size: 4,
        groups: 2,
    }
}

/// Every weight redrawn so that no path is silenced by zero initialisation.
fn randomized(cfg: &UNetConfig, seed: u64) -> ModelParams {
    let mut rng = Rng::new(seed);
    let mut p = init_unet(cfg, &mut rng).unwrap();
    let paths: Vec<String> = p.paths().map(str::to_string).collect();
    for path in paths {
        let shape = p.get(&path).unwrap().shape().to_vec();
        let n = shape.iter().product();
        let v: Vec<f32> = rng.normal_vec(n).iter().map(|x| 0.4 * x).collect();
        p.set(path, Tensor::new(shape, v).unwrap());
    }
    p
}

/// `sum(unet(x) * probe)` as a function of the image or the conditioning.
struct Probe {
    cfg: UNetConfig,
    params: ModelParams,
    other: Tensor,
    probe: Vec<f64>,
    wrt_cond: bool,
}

impl ScalarFn for Probe {
    fn eval<T: Real>(&self, x: &Tensor<T>) -> panelf_core::Result<Tensor<T>> {
        let p = self.params.cast::<T>();
        let other: Tensor<T> = self.other.cast();
        let (img, cond) = if self.wrt_cond { (&other, x) } else { (x, &other) };
        let y = unet_forward(&self.cfg, &p, None, img, 9, cond).map_err(|e| panelf_core::TensorError::Contract(e.to_string()))?;
        let probe = Tensor::<T>::from_f64(y.shape().to_vec(), &self.probe)?;
        y.mul(&probe)?.sum()
    }
}

#[test]
fn gradients_through_the_whole_network() {
    let cfg = tiny();
    for seed in 0..2 {
        let mut rng = Rng::new(100 + seed);
        let params = randomized(&cfg, seed);
        let x: Vec<f64> = (0..16).map(|_| rng.normal_f64()).collect();
        let cond: Vec<f64> = (0..18).map(|_| rng.normal_f64()).collect();
        let probe: Vec<f64> = (0..16).map(|_| rng.normal_f64()).collect();
        for wrt_cond in [false, true] {
            let (input, other) = if wrt_cond {
                (Tensor::<f64>::from_f64(vec![3, 6], &cond).unwrap(), Tensor::from_f64(vec![1, 4, 4], &x).unwrap())
            } else {
                (Tensor::<f64>::from_f64(vec![1, 4, 4], &x).unwrap(), Tensor::from_f64(vec![3, 6], &cond).unwrap())
            };
            let f = Probe {
                cfg: cfg.clone(),
                params: params.clone(),
                other,
                probe: probe.clone(),
                wrt_cond,
            };
            let report = grad_check(&f, &input, 1e-4).unwrap();
            assert!(report.max_rel_err <= 1e-3, "seed {seed} wrt_cond {wrt_cond}: {report:?}");
        }
    }
}

#[test]
fn conditioning_changes_the_prediction() {
    let cfg = tiny();
    let params = randomized(&cfg, 7);
    let mut rng = Rng::new(8);
    let x = rng.normal_tensor(&[1, 4, 4]).unwrap();
    let c1 = rng.normal_tensor(&[3, 6]).unwrap();
    let c2 = rng.normal_tensor(&[3, 6]).unwrap();
    let y1 = unet_forward(&cfg, &params, None, &x, 5, &c1).unwrap().to_vec();
    let y2 = unet_forward(&cfg, &params, None, &x, 5, &c2).unwrap().to_vec();
    let y3 = unet_forward(&cfg, &params, None, &x, 6, &c1).unwrap().to_vec();
    assert!(y1.iter().zip(&y2).any(|(a, b)| (a - b).abs() > 1e-4));
    assert!(y1.iter().zip(&y3).any(|(a, b)| (a - b).abs() > 1e-4));
}

#[test]
fn fresh_adapters_do_not_change_any_output() {
    let cfg = tiny();
    let params = randomized(&cfg, 9);
    let lora = LoraSet::attach(&params, 2, DEFAULT_TARGETS, 1).unwrap();
    let mut rng = Rng::new(10);
    for t in [1, 40, 100] {
        let x = rng.normal_tensor(&[1, 4, 4]).unwrap();
        let c = rng.normal_tensor(&[2, 6]).unwrap();
        let base = unet_forward(&cfg, &params, None, &x, t, &c).unwrap().to_vec();
        let adapted = unet_forward(&cfg, &params, Some(&lora), &x, t, &c).unwrap().to_vec();
        assert_eq!(base, adapted);
    }
}
