use panelf::diffusion::{denoise_from, make_schedule, q_sample, q_step, NoisePredictor, NoiseSchedule};
use panelf::Result;
use panelf_core::{Rng, Tensor};

/// Predicts the exact noise that maps the known `x0` to `x_t`.
struct Oracle<'a> {
    x0: Vec<f64>,
    s: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict(&self, x_t: &Tensor, t: usize, _cond: &Tensor) -> Result<Tensor> {
        let ab = self.s.alpha_bar(t)?;
        let eps: Vec<f64> = x_t
            .to_f64_vec()
            .iter()
            .zip(&self.x0)
            .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            .collect();
        Ok(Tensor::from_f64(x_t.shape().to_vec(), &eps)?)
    }
}

fn signs(n: usize) -> Tensor {
    let v: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    Tensor::new(vec![n], v).unwrap()
}

/// Pooled `E[x_t · x0]` and `Var[x_t − √ᾱ x0]` for a ±1 signal.
fn moments(draws: &[Vec<f64>], x0: &[f64], ab: f64) -> (f64, f64) {
    let n = (draws.len() * x0.len()) as f64;
    let mut m = 0.0;
    let mut resid = Vec::with_capacity(n as usize);
    for d in draws {
        for (x, s) in d.iter().zip(x0) {
            m += x * s;
            resid.push(x - ab.sqrt() * s);
        }
    }
    let rm = resid.iter().sum::<f64>() / n;
    let var = resid.iter().map(|r| (r - rm).powi(2)).sum::<f64>() / (n - 1.0);
    (m / n, var)
}

#[test]
fn closed_form_and_iterated_kernel_agree_with_theory() {
    let s = NoiseSchedule::default();
    let x0 = signs(32);
    let x0v = x0.to_f64_vec();
    let mut rng = Rng::new(11);
    for t in [1, 50, 100] {
        let ab = s.alpha_bar(t).unwrap();
        let closed: Vec<Vec<f64>> = (0..3000)
            .map(|_| {
                let eps = rng.normal_tensor(&[32]).unwrap();
                q_sample(&x0, t, &eps, &s).unwrap().to_f64_vec()
            })
            .collect();
        let iterated: Vec<Vec<f64>> = (0..3000)
            .map(|_| {
                let mut x = x0.clone();
                for k in 1..=t {
                    x = q_step(&x, k, &rng.normal_tensor(&[32]).unwrap(), &s).unwrap();
                }
                x.to_f64_vec()
            })
            .collect();
        for draws in [&closed, &iterated] {
            let (mean, var) = moments(draws, &x0v, ab);
            assert!((mean - ab.sqrt()).abs() <= 0.05 * ab.sqrt(), "t={t} mean {mean}");
            assert!((var - (1.0 - ab)).abs() <= 0.05 * (1.0 - ab), "t={t} var {var} vs {}", 1.0 - ab);
        }
    }
}

#[test]
fn oracle_predictor_inverts_the_chain() {
    for steps in [10, 50, 100] {
        let s = make_schedule(steps, 1e-4, 0.02).unwrap();
        let mut rng = Rng::new(steps as u64);
        let x0: Vec<f64> = (0..64).map(|i| ((i * 37 % 64) as f64 / 32.0) - 1.0).collect();
        let x0t = Tensor::from_f64(vec![1, 8, 8], &x0).unwrap();
        let x_t = q_sample(&x0t, steps, &rng.normal_tensor(&[1, 8, 8]).unwrap(), &s).unwrap();
        let oracle = Oracle { x0: x0.clone(), s: &s };
        let cond = Tensor::zeros(vec![1, 1]);
        let out = denoise_from(&oracle, &x_t, steps, &cond, &s, &mut rng, false).unwrap();
        let err = out.to_f64_vec().iter().zip(&x0).map(|(a, b)| (a - b).abs()).sum::<f64>() / 64.0;
        assert!(err <= 0.05, "T={steps}: {err}");
    }
}
