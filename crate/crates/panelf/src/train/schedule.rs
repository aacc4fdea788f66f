use std::f64::consts::PI;

use panelf_core::Rng;

/// Cosine decay from `lr0` toward 0 over each `period`, restarting at every multiple.
pub fn cosine_restart_lr(step: usize, lr0: f64, period: usize) -> f64 {
    let period = period.max(1);
    let phase = (step % period) as f64 / period as f64;
    // (1 + cos πφ) / 2 written as cos²(πφ/2), which keeps full precision as φ → 1.
    lr0 * (0.5 * PI * phase).cos().powi(2)
}

/// Average number of training examples each denoising step sees.
pub fn expected_pairs_per_timestep(total_steps: usize, steps: usize) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    total_steps as f64 / steps as f64
}

/// Uniform timestep in `[1, T]`.
pub fn sample_timestep(rng: &mut Rng, steps: usize) -> usize {
    1 + rng.below(steps)
}
