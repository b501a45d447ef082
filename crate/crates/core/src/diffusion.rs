//! Gaussian diffusion over flat latent vectors.
//!
//! Schedules follow the cosine ᾱ curve, the network is x0-parameterized, and
//! guidance is applied directly to the x0 prediction. Nothing in the reverse
//! loop clips or renormalizes the prediction.

use crate::error::{Error, Result};
use crate::linalg::all_finite;
use crate::rng;

/// Offset in the cosine ᾱ curve that keeps β small near t = 0.
pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

/// Precomputed coefficient tables for a (possibly respaced) diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
    pub posterior_mean_coef1: Vec<f64>,
    pub posterior_mean_coef2: Vec<f64>,
    pub posterior_variance: Vec<f64>,
    /// Model timestep for each schedule index. Identity unless respaced.
    pub timestep_map: Vec<usize>,
}

/// The continuous cosine curve `f(u) = cos²(((u + s) / (1 + s)) · π/2)`.
fn cosine_curve(u: f64) -> f64 {
    let arg = (u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    arg.cos().powi(2)
}

impl DiffusionSchedule {
    /// Builds every derived table from a beta sequence.
    fn from_betas(betas: Vec<f64>, alphas_cumprod: Vec<f64>, timestep_map: Vec<usize>) -> Self {
        let n = betas.len();
        let mut coef1 = vec![0.0; n];
        let mut coef2 = vec![0.0; n];
        let mut var = vec![0.0; n];
        for t in 0..n {
            let abar = alphas_cumprod[t];
            let abar_prev = if t == 0 { 1.0 } else { alphas_cumprod[t - 1] };
            let beta = betas[t];
            if t == 0 {
                // The posterior collapses onto x0 at the final step.
                coef1[t] = 1.0;
                coef2[t] = 0.0;
                var[t] = 0.0;
            } else {
                coef1[t] = beta * abar_prev.sqrt() / (1.0 - abar);
                coef2[t] = (1.0 - abar_prev) * (1.0 - beta).sqrt() / (1.0 - abar);
                var[t] = beta * (1.0 - abar_prev) / (1.0 - abar);
            }
        }
        if n > 1 {
            var[0] = var[1];
        }
        DiffusionSchedule {
            betas,
            alphas_cumprod,
            posterior_mean_coef1: coef1,
            posterior_mean_coef2: coef2,
            posterior_variance: var,
            timestep_map,
        }
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_timesteps() {
            return Err(Error::invalid(format!(
                "timestep {t} out of range for schedule of {} steps",
                self.num_timesteps()
            )));
        }
        Ok(())
    }
}

/// Cosine schedule over `num_timesteps` steps with β clipped to [`MAX_BETA`].
pub fn make_cosine_schedule(num_timesteps: usize) -> Result<DiffusionSchedule> {
    if num_timesteps < 1 {
        return Err(Error::invalid("schedule needs at least one timestep"));
    }
    let t_total = num_timesteps as f64;
    let betas: Vec<f64> = (0..num_timesteps)
        .map(|i| {
            let a0 = cosine_curve(i as f64 / t_total);
            let a1 = cosine_curve((i + 1) as f64 / t_total);
            (1.0 - a1 / a0).min(MAX_BETA)
        })
        .collect();
    let mut alphas_cumprod = Vec::with_capacity(num_timesteps);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alphas_cumprod.push(acc);
    }
    Ok(DiffusionSchedule::from_betas(betas, alphas_cumprod, (0..num_timesteps).collect()))
}

/// Evenly spaced timestep subsequence of length `num_steps`, always keeping
/// the first and last timestep.
pub fn respaced_indices(num_timesteps: usize, num_steps: usize) -> Vec<usize> {
    if num_steps == 1 {
        return vec![num_timesteps - 1];
    }
    (0..num_steps)
        .map(|i| i * (num_timesteps - 1) / (num_steps - 1))
        .collect()
}

/// Restricts a schedule to `num_steps` retained timesteps. ᾱ at every retained
/// step is copied verbatim and betas are recomputed from consecutive ratios.
pub fn respace(schedule: &DiffusionSchedule, num_steps: usize) -> Result<DiffusionSchedule> {
    let total = schedule.num_timesteps();
    if num_steps < 1 || num_steps > total {
        return Err(Error::invalid(format!(
            "respaced step count {num_steps} must lie in 1..={total}"
        )));
    }
    let kept = respaced_indices(total, num_steps);
    let alphas_cumprod: Vec<f64> = kept.iter().map(|&i| schedule.alphas_cumprod[i]).collect();
    let mut betas = Vec::with_capacity(num_steps);
    let mut prev = 1.0;
    for &a in &alphas_cumprod {
        betas.push(1.0 - a / prev);
        prev = a;
    }
    let timestep_map = kept.iter().map(|&i| schedule.timestep_map[i]).collect();
    Ok(DiffusionSchedule::from_betas(betas, alphas_cumprod, timestep_map))
}

/// Forward noising: `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·noise`.
pub fn q_sample(x0: &[f64], t: usize, noise: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0.len() != noise.len() {
        return Err(Error::invalid("x0 and noise differ in length"));
    }
    let a = schedule.alphas_cumprod[t].sqrt();
    let s = (1.0 - schedule.alphas_cumprod[t]).sqrt();
    Ok(x0.iter().zip(noise).map(|(x, n)| a * x + s * n).collect())
}

/// One reverse step from `x_t` to `x_{t-1}` through the Gaussian posterior
/// `q(x_{t-1} | x_t, x0_hat)`. The noise term is dropped at `t = 0`.
pub fn posterior_step(
    x0_hat: &[f64],
    x_t: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_t(t)?;
    if x0_hat.len() != x_t.len() || noise.len() != x_t.len() {
        return Err(Error::invalid("posterior_step inputs differ in length"));
    }
    let c1 = schedule.posterior_mean_coef1[t];
    let c2 = schedule.posterior_mean_coef2[t];
    let sd = if t == 0 { 0.0 } else { schedule.posterior_variance[t].sqrt() };
    Ok(x0_hat
        .iter()
        .zip(x_t)
        .zip(noise)
        .map(|((x0, xt), n)| {
            let mean = c1 * x0 + c2 * xt;
            if t == 0 {
                mean
            } else {
                mean + sd * n
            }
        })
        .collect())
}

/// Classifier-free guidance on x0 predictions:
/// `uncond + scale · (cond − uncond)`. Scales of exactly 1 and 0 return the
/// corresponding branch untouched.
pub fn guided_prediction(pred_cond: &[f64], pred_uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if pred_cond.len() != pred_uncond.len() {
        return Err(Error::invalid(format!(
            "guidance inputs differ in length ({} vs {})",
            pred_cond.len(),
            pred_uncond.len()
        )));
    }
    if scale == 1.0 {
        return Ok(pred_cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(pred_uncond.to_vec());
    }
    Ok(pred_cond
        .iter()
        .zip(pred_uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect())
}

/// Anything that predicts clean latents from noised ones.
pub trait Denoiser {
    /// Length of the latent vectors this denoiser operates on.
    fn latent_size(&self) -> usize;

    fn predict_x0(&self, x_t: &[f64], t: usize, cond: &[f64], cond_mask: bool) -> Result<Vec<f64>>;

    /// Batched prediction. `x_t` is `n × latent_size`, `conds` is `n × cond_len`,
    /// all rows share timestep `t`.
    fn predict_x0_batch(&self, x_t: &[f64], t: usize, conds: &[f64], masks: &[bool]) -> Result<Vec<f64>> {
        let n = masks.len();
        let d = self.latent_size();
        if n == 0 {
            return Ok(Vec::new());
        }
        let e = conds.len() / n;
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            out.extend(self.predict_x0(&x_t[i * d..(i + 1) * d], t, &conds[i * e..(i + 1) * e], masks[i])?);
        }
        Ok(out)
    }
}

/// Adapts a closure `(x_t, t, cond, cond_mask) -> x0_hat` into a [`Denoiser`].
pub struct FnDenoiser<F> {
    pub latent_size: usize,
    pub f: F,
}

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&[f64], usize, &[f64], bool) -> Vec<f64>,
{
    fn latent_size(&self) -> usize {
        self.latent_size
    }

    fn predict_x0(&self, x_t: &[f64], t: usize, cond: &[f64], cond_mask: bool) -> Result<Vec<f64>> {
        Ok((self.f)(x_t, t, cond, cond_mask))
    }
}

/// Runs the reverse process for one condition starting from `N(0, I)` drawn
/// from `seed`. Returns a latent in the denoiser's (standardized) space.
pub fn sample_loop<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &[f64],
    schedule: &DiffusionSchedule,
    guidance_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = sample_batch(denoiser, &[cond], schedule, guidance_scale, &[seed])?;
    Ok(out.pop().expect("one chain"))
}

/// Runs independent reverse chains, one per `(cond, seed)` pair, batching the
/// denoiser calls. Each chain's noise comes only from its own seed, so a chain
/// is reproducible regardless of what else is in the batch.
pub fn sample_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    conds: &[&[f64]],
    schedule: &DiffusionSchedule,
    guidance_scale: f64,
    seeds: &[u64],
) -> Result<Vec<Vec<f64>>> {
    if conds.len() != seeds.len() {
        return Err(Error::invalid("one seed per condition is required"));
    }
    let n = conds.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = denoiser.latent_size();
    let e = conds[0].len();
    if conds.iter().any(|c| c.len() != e) {
        return Err(Error::invalid("conditions differ in length"));
    }
    let mut streams: Vec<rng::Stream> = seeds.iter().map(|&s| rng::stream(s, &[])).collect();
    let mut x = vec![0.0; n * d];
    for (i, r) in streams.iter_mut().enumerate() {
        rng::fill_standard_normal(r, &mut x[i * d..(i + 1) * d]);
    }
    let cond_flat: Vec<f64> = conds.iter().flat_map(|c| c.iter().copied()).collect();
    let null_flat = vec![0.0; n * e];
    let cond_masks = vec![true; n];
    let null_masks = vec![false; n];
    let mut noise = vec![0.0; d];

    for k in (0..schedule.num_timesteps()).rev() {
        let t_model = schedule.timestep_map[k];
        let x0_cond = denoiser.predict_x0_batch(&x, t_model, &cond_flat, &cond_masks)?;
        let x0 = if guidance_scale == 1.0 {
            x0_cond
        } else {
            let x0_uncond = denoiser.predict_x0_batch(&x, t_model, &null_flat, &null_masks)?;
            guided_prediction(&x0_cond, &x0_uncond, guidance_scale)?
        };
        if x0.len() != n * d || !all_finite(&x0) {
            return Err(Error::numeric(format!(
                "denoiser produced non-finite or mis-sized output at timestep {t_model}"
            )));
        }
        for i in 0..n {
            rng::fill_standard_normal(&mut streams[i], &mut noise);
            let rows = i * d..(i + 1) * d;
            let next = posterior_step(&x0[rows.clone()], &x[rows.clone()], k, schedule, &noise)?;
            x[rows].copy_from_slice(&next);
        }
    }
    Ok(x.chunks(d).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn respaced_indices_increase_and_end_at_last(total in 1usize..3000, frac in 0.0f64..1.0) {
            let steps = 1 + ((total - 1) as f64 * frac) as usize;
            let idx = respaced_indices(total, steps);
            prop_assert_eq!(idx.len(), steps);
            prop_assert_eq!(*idx.last().unwrap(), total - 1);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn q_sample_is_affine_in_noise(x in -3.0f64..3.0, n in -3.0f64..3.0, t in 0usize..1000) {
            let s = make_cosine_schedule(1000).unwrap();
            let a = q_sample(&[x], t, &[n], &s).unwrap()[0];
            let b = q_sample(&[x], t, &[0.0], &s).unwrap()[0];
            prop_assert!((a - b - (1.0 - s.alphas_cumprod[t]).sqrt() * n).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_empty_schedule() {
        assert!(matches!(make_cosine_schedule(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_step_schedule_is_valid() {
        let s = make_cosine_schedule(1).unwrap();
        assert_eq!(s.num_timesteps(), 1);
        assert!(s.alphas_cumprod[0] > 0.0 && s.alphas_cumprod[0] < 1.0);
        assert_eq!(s.timestep_map, vec![0]);
    }

    #[test]
    fn q_sample_limits() {
        let s = make_cosine_schedule(1000).unwrap();
        let x0 = [0.0, 0.0, 0.0];
        let noise = [1.0, -2.0, 0.5];
        let out = q_sample(&x0, 500, &noise, &s).unwrap();
        let k = (1.0 - s.alphas_cumprod[500]).sqrt();
        for (o, n) in out.iter().zip(&noise) {
            assert_eq!(*o, k * n);
        }
        // ᾱ_0 is within 1e-4 of one, so the output stays next to x0.
        let x0 = [1.0, 2.0, 3.0];
        let out = q_sample(&x0, 0, &[0.0; 3], &s).unwrap();
        for (o, x) in out.iter().zip(&x0) {
            assert!((o - x).abs() < 1e-4 * x.abs());
        }
        assert!(q_sample(&x0, 1000, &noise, &s).is_err());
    }

    #[test]
    fn final_step_adds_no_noise() {
        let s = make_cosine_schedule(50).unwrap();
        let x0 = [0.3, -0.7];
        let xt = [5.0, 5.0];
        let a = posterior_step(&x0, &xt, 0, &s, &[100.0, -100.0]).unwrap();
        let b = posterior_step(&x0, &xt, 0, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, x0.to_vec());
    }

    #[test]
    fn posterior_mean_is_fixed_point_when_coefficients_sum_to_one() {
        let mut s = make_cosine_schedule(10).unwrap();
        // Force a schedule whose coefficients sum to one at t = 3.
        s.posterior_mean_coef1[3] = 0.25;
        s.posterior_mean_coef2[3] = 0.75;
        let x = [1.5, -2.0, 0.25];
        let out = posterior_step(&x, &x, 3, &s, &[0.0; 3]).unwrap();
        for (o, v) in out.iter().zip(&x) {
            assert!((o - v).abs() < 1e-15);
        }
    }

    #[test]
    fn guidance_linear_cases() {
        assert_eq!(guided_prediction(&[1.0, 0.0], &[0.0, 0.0], 2.0).unwrap(), vec![2.0, 0.0]);
        let a = [0.1, 0.7, -3.3];
        let b = [0.9, -0.2, 1e-9];
        assert_eq!(guided_prediction(&a, &b, 1.0).unwrap(), a.to_vec());
        assert_eq!(guided_prediction(&a, &b, 0.0).unwrap(), b.to_vec());
        assert!(guided_prediction(&a, &b[..2], 2.0).is_err());
    }

    #[test]
    fn respace_bounds_and_degenerate_case() {
        let s = make_cosine_schedule(100).unwrap();
        assert!(respace(&s, 0).is_err());
        assert!(respace(&s, 101).is_err());
        let one = respace(&s, 1).unwrap();
        assert_eq!(one.timestep_map, vec![99]);
        assert_eq!(one.alphas_cumprod, vec![s.alphas_cumprod[99]]);
        let full = respace(&s, 100).unwrap();
        assert_eq!(full.alphas_cumprod, s.alphas_cumprod);
        assert_eq!(full.timestep_map, s.timestep_map);
    }

    #[test]
    fn constant_denoiser_lands_exactly_on_its_output() {
        let s = make_cosine_schedule(20).unwrap();
        let c = vec![0.5, -1.25, 3.0];
        let den = FnDenoiser { latent_size: 3, f: |_: &[f64], _: usize, _: &[f64], _: bool| vec![0.5, -1.25, 3.0] };
        let out = sample_loop(&den, &[0.0; 4], &s, 2.0, 11).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn non_finite_denoiser_names_timestep() {
        let s = make_cosine_schedule(5).unwrap();
        let den = FnDenoiser {
            latent_size: 2,
            f: |_: &[f64], t: usize, _: &[f64], _: bool| if t == 2 { vec![f64::NAN, 0.0] } else { vec![0.0, 0.0] },
        };
        match sample_loop(&den, &[1.0], &s, 1.0, 0) {
            Err(Error::NumericFailure(msg)) => assert!(msg.contains("timestep 2")),
            other => panic!("expected numeric failure, got {other:?}"),
        }
    }
}
