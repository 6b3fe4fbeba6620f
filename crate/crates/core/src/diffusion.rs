//! Forward noising, the training step with classifier-free conditioning
//! dropout, guided noise prediction, and ancestral sampling.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::nn::{self, Adam};
use crate::scalar::Scalar;
use crate::syncmodel::SyncEncoders;
use crate::types::{ExpressionSequence, LatentSequence, NoiseSchedule, NormStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance scale s used at sampling time.
    pub s: f64,
    /// Probability of replacing the audio condition with the null
    /// condition during training.
    pub drop_prob: f64,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Invalid(format!(
                "drop_prob must be in [0,1], got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) noise
pub fn forward_diffuse<T: Scalar>(
    z0: &Array2<T>,
    t: usize,
    noise: &Array2<T>,
    sched: &NoiseSchedule<T>,
) -> Result<Array2<T>> {
    if t >= sched.len() {
        return Err(Error::Invalid(format!(
            "timestep {t} out of range for T = {}",
            sched.len()
        )));
    }
    if z0.dim() != noise.dim() {
        return Err(Error::Shape(format!(
            "noise shape {:?} != z0 shape {:?}",
            noise.dim(),
            z0.dim()
        )));
    }
    let ab = sched.alpha_bar(t);
    let a = ab.sqrt();
    let b = (T::one() - ab).sqrt();
    Ok(z0.mapv(|v| v * a) + &noise.mapv(|v| v * b))
}

/// eps* = s * eps(z, n, A) + (1 - s) * eps(z, n, null)
pub fn guided_epsilon<T: Scalar>(
    model: &Denoiser<T>,
    z_n: &Array2<T>,
    n: usize,
    audio: &Array2<T>,
    s: f64,
) -> Result<Array2<T>> {
    if s == 0.0 {
        return model.predict_noise(z_n, n, None);
    }
    let cond = model.predict_noise(z_n, n, Some(audio))?;
    if s == 1.0 {
        return Ok(cond);
    }
    let uncond = model.predict_noise(z_n, n, None)?;
    let sv = T::from_f64(s);
    let one_minus = T::from_f64(1.0 - s);
    Ok(cond.mapv(|v| v * sv) + &uncond.mapv(|v| v * one_minus))
}

/// Sync-loss attachment for the training step: frozen encoders, weight,
/// and window stride over the one-step clean estimate's lip columns.
pub struct SyncLossCfg<'a, T: Scalar> {
    pub encoders: &'a SyncEncoders<T>,
    pub lambda: f64,
    pub stride: usize,
}

pub struct TrainItem<T: Scalar> {
    /// Normalized clean sequence, frames x N.
    pub z0: Array2<T>,
    /// Aligned audio features, frames x D_a.
    pub audio: Array2<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainLoss<T> {
    pub noise: T,
    pub sync: Option<T>,
    pub total: T,
    /// Items evaluated with the null condition this step.
    pub masked: usize,
}

/// One optimizer step over a batch. Per item: sample t and noise, diffuse,
/// drop the condition with probability `drop_prob`, accumulate the noise
/// MSE (plus lambda * sync loss on the one-step clean estimate when
/// attached), and apply Adam with gradient clipping.
pub fn training_step<T: Scalar, R: Rng>(
    batch: &[TrainItem<T>],
    sched: &NoiseSchedule<T>,
    model: &mut Denoiser<T>,
    sync: Option<&SyncLossCfg<'_, T>>,
    guidance: &GuidanceConfig,
    opt: &mut Adam<T>,
    rng: &mut R,
) -> Result<TrainLoss<T>> {
    guidance.validate()?;
    if batch.is_empty() {
        return Err(Error::Corpus("empty training batch".into()));
    }
    let mut tape = Tape::new();
    let binding = model.store().bind(&mut tape);
    let inv_batch = T::from_f64(1.0 / batch.len() as f64);

    let mut noise_sum: Option<Var> = None;
    let mut sync_sum: Option<Var> = None;
    let mut sync_terms = 0usize;
    let mut masked = 0usize;

    for item in batch {
        if item.z0.nrows() != item.audio.nrows() {
            return Err(Error::Shape(format!(
                "item frames {} != audio frames {}",
                item.z0.nrows(),
                item.audio.nrows()
            )));
        }
        let t = rng.gen_range(0..sched.len());
        let eps = Array2::from_shape_fn(item.z0.dim(), |_| {
            T::from_f64(StandardNormal.sample(rng))
        });
        let z_t = forward_diffuse(&item.z0, t, &eps, sched)?;
        let dropped = rng.gen_range(0.0f64..1.0) < guidance.drop_prob;
        if dropped {
            masked += 1;
        }

        let z_var = tape.leaf(z_t.clone());
        let a_var = if dropped {
            None
        } else {
            Some(tape.leaf(item.audio.clone()))
        };
        let pred = model.forward(&mut tape, z_var, t, a_var, &binding);
        let item_loss = tape.mse(pred, &eps);
        noise_sum = Some(match noise_sum {
            Some(acc) => tape.add(acc, item_loss),
            None => item_loss,
        });

        if let Some(cfg) = sync {
            if cfg.lambda != 0.0 && !dropped {
                // one-step clean estimate: (z_t - sqrt(1-ab) eps_hat) / sqrt(ab)
                let ab = sched.alpha_bar(t);
                let scaled_pred = tape.scale(pred, (T::one() - ab).sqrt());
                let diff = {
                    let zt_leaf = tape.leaf(z_t);
                    tape.sub(zt_leaf, scaled_pred)
                };
                let z0_hat = tape.scale(diff, T::one() / ab.sqrt());
                let lip = tape.select_cols(z0_hat, &model.partition().lip);

                let w = cfg.encoders.window();
                let frames = item.z0.nrows();
                if frames >= w {
                    let mut start = 0;
                    while start + w <= frames {
                        let lip_win = tape.slice_rows(lip, start, w);
                        let audio_win = item
                            .audio
                            .slice(ndarray::s![start..start + w, ..])
                            .to_owned();
                        let loss = cfg.encoders.sync_loss_motion_graph(
                            &mut tape, lip_win, &audio_win, true,
                        );
                        sync_sum = Some(match sync_sum {
                            Some(acc) => tape.add(acc, loss),
                            None => loss,
                        });
                        sync_terms += 1;
                        start += cfg.stride.max(1);
                    }
                }
            }
        }
    }

    let noise_loss = tape.scale(noise_sum.expect("nonempty batch"), inv_batch);
    let (total, sync_val) = match (sync, sync_sum) {
        (Some(cfg), Some(s_sum)) if sync_terms > 0 => {
            let sync_mean = tape.scale(s_sum, T::from_f64(1.0 / sync_terms as f64));
            let weighted = tape.scale(sync_mean, T::from_f64(cfg.lambda));
            let total = tape.add(noise_loss, weighted);
            (total, Some(tape.value(sync_mean)[[0, 0]]))
        }
        _ => (noise_loss, None),
    };

    let grads = tape.backward(total);
    let param_grads = nn::collect_grads(model.store(), &binding, &grads);
    let noise_val = tape.value(noise_loss)[[0, 0]];
    let total_val = tape.value(total)[[0, 0]];
    opt.apply(model.store_mut(), param_grads);

    if !total_val.is_finite() {
        return Err(Error::NonFinite("training loss diverged".into()));
    }
    Ok(TrainLoss {
        noise: noise_val,
        sync: sync_val,
        total: total_val,
        masked,
    })
}

/// Clean-estimate clamp used during sampling. Latents are z-scored, so
/// any |x̂0| beyond this is far outside the data range; clamping it keeps
/// prediction errors from compounding across the reverse chain.
pub const X0_CLAMP: f64 = 10.0;

/// Ancestral reverse chain driven by an arbitrary noise predictor.
/// `predict(z, n)` must return the guided noise estimate at step n.
///
/// Each step forms the clean estimate x̂0 = (z_n − √(1−ᾱ_n)·ε̂)/√ᾱ_n,
/// clamps it to ±[`X0_CLAMP`], and takes the posterior mean
/// μ = √ᾱ_{n−1}·β_n/(1−ᾱ_n)·x̂0 + √α_n·(1−ᾱ_{n−1})/(1−ᾱ_n)·z_n —
/// algebraically the usual ε-parameterized update when the clamp is
/// inactive.
pub fn sample_with<T: Scalar, R: Rng>(
    frames: usize,
    n_dims: usize,
    sched: &NoiseSchedule<T>,
    rng: &mut R,
    mut predict: impl FnMut(&Array2<T>, usize) -> Result<Array2<T>>,
) -> Result<Array2<T>> {
    let mut z = Array2::from_shape_fn((frames, n_dims), |_| {
        T::from_f64(StandardNormal.sample(rng))
    });
    let clamp = T::from_f64(X0_CLAMP);
    for n in (0..sched.len()).rev() {
        let eps = predict(&z, n)?;
        if eps.dim() != z.dim() {
            return Err(Error::Shape("predictor returned wrong shape".into()));
        }
        let beta = sched.beta(n);
        let alpha = sched.alpha(n);
        let ab = sched.alpha_bar(n);
        let ab_prev = if n > 0 { sched.alpha_bar(n - 1) } else { T::one() };
        let sqrt_ab = ab.sqrt();
        let sqrt_om = (T::one() - ab).sqrt();
        let c0 = ab_prev.sqrt() * beta / (T::one() - ab);
        let cz = alpha.sqrt() * (T::one() - ab_prev) / (T::one() - ab);
        let mut mean = Array2::zeros(z.dim());
        ndarray::Zip::from(&mut mean).and(&z).and(&eps).for_each(|m, &zv, &ev| {
            let x0 = ((zv - sqrt_om * ev) / sqrt_ab).max(-clamp).min(clamp);
            *m = c0 * x0 + cz * zv;
        });
        z = if n > 0 {
            let sigma = sched.beta_tilde(n).sqrt();
            let noise = Array2::from_shape_fn(mean.dim(), |_| {
                T::from_f64(StandardNormal.sample(rng))
            });
            mean + &noise.mapv(|v| v * sigma)
        } else {
            mean
        };
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampling diverged at step {n}")));
        }
    }
    Ok(z)
}

/// Guided ancestral sampling conditioned on an audio sequence, returning
/// the denormalized expression sequence.
pub fn sample<T: Scalar, R: Rng>(
    model: &Denoiser<T>,
    audio: &Array2<T>,
    sched: &NoiseSchedule<T>,
    stats: &NormStats<T>,
    s: f64,
    fps: f64,
    rng: &mut R,
) -> Result<ExpressionSequence<T>> {
    if model.store().has_non_finite() {
        return Err(Error::NonFinite("model weights contain NaN/Inf".into()));
    }
    let frames = audio.nrows();
    if frames == 0 {
        return Err(Error::Invalid("audio sequence is empty".into()));
    }
    let z0 = sample_with(frames, model.n_dims(), sched, rng, |z, n| {
        guided_epsilon(model, z, n, audio, s)
    })?;
    let latent = LatentSequence { values: z0, stats: stats.clone(), fps };
    crate::types::denormalize(&latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::types::SubspacePartition;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Denoiser<f64> {
        let cfg = DenoiserConfig {
            d_model: 12,
            n_heads: 2,
            local_window: 3,
            rel_radius: 4,
            audio_dim: 3,
            residual: true,
        };
        let partition = SubspacePartition::new(6, vec![0, 1], vec![2]).unwrap();
        Denoiser::new(cfg, partition, 5).unwrap()
    }

    #[test]
    fn forward_diffuse_arithmetic() {
        // z0 = 0, alpha_bar = 0.75 -> z_t = sqrt(0.25) * noise
        let sched = NoiseSchedule::<f64>::linear(1, 0.25, 0.25).unwrap();
        assert_eq!(sched.alpha_bar(0), 0.75);
        let z = forward_diffuse(&array![[0.0]], 0, &array![[2.0]], &sched).unwrap();
        assert!((z[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_diffuse_no_noise_limit() {
        // alpha_bar -> 1 means z_t -> z0; use a tiny beta
        let sched = NoiseSchedule::<f64>::linear(1, 1e-12, 1e-12).unwrap();
        let z0 = array![[3.0, -1.0]];
        let z = forward_diffuse(&z0, 0, &array![[1.0, 1.0]], &sched).unwrap();
        for (a, b) in z.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_diffuse_validates() {
        let sched = NoiseSchedule::<f64>::linear(4, 0.1, 0.2).unwrap();
        assert!(forward_diffuse(&array![[0.0]], 4, &array![[0.0]], &sched).is_err());
        assert!(forward_diffuse(&array![[0.0]], 0, &array![[0.0, 1.0]], &sched).is_err());
    }

    /// Monte-Carlo: composing per-step kernels matches the closed-form
    /// marginal in mean and variance within 1%.
    #[test]
    fn marginal_consistency_monte_carlo() {
        let sched = NoiseSchedule::<f64>::linear(8, 0.05, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let z0 = 1.7f64;
        let t = 5;
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            // per-step chain: z_k = sqrt(1 - beta_k) z_{k-1} + sqrt(beta_k) e
            let mut z = z0;
            for k in 0..=t {
                let e: f64 = StandardNormal.sample(&mut rng);
                z = (1.0 - sched.beta(k)).sqrt() * z + sched.beta(k).sqrt() * e;
            }
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expect_mean = sched.alpha_bar(t).sqrt() * z0;
        let expect_var = 1.0 - sched.alpha_bar(t);
        assert!((mean - expect_mean).abs() / expect_mean.abs() < 0.01);
        assert!((var - expect_var).abs() / expect_var < 0.01);
    }

    #[test]
    fn guided_epsilon_is_affine_in_s() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let a = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));

        let cond = model.predict_noise(&z, 2, Some(&a)).unwrap();
        let uncond = model.predict_noise(&z, 2, None).unwrap();
        assert_eq!(guided_epsilon(&model, &z, 2, &a, 1.0).unwrap(), cond);
        assert_eq!(guided_epsilon(&model, &z, 2, &a, 0.0).unwrap(), uncond);

        for s in [-0.5, 0.7, 1.15, 2.0, 3.3] {
            let g = guided_epsilon(&model, &z, 2, &a, s).unwrap();
            for ((gv, cv), uv) in g.iter().zip(cond.iter()).zip(uncond.iter()) {
                let expect = s * cv + (1.0 - s) * uv;
                assert!((gv - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn guided_epsilon_linear_combination_example() {
        // eps_c = [1, 0], eps_u = [0, 1], s = 2 -> [2, -1]
        let eps_c = array![[1.0, 0.0]];
        let eps_u = array![[0.0, 1.0]];
        let s = 2.0;
        let g = eps_c.mapv(|v| v * s) + &eps_u.mapv(|v| v * (1.0 - s));
        assert_eq!(g, array![[2.0, -1.0]]);
    }

    #[test]
    fn training_loss_zero_for_perfect_predictor() {
        // If the prediction equals the sampled noise the MSE is zero;
        // verified on the loss formula with pred == eps.
        let mut tape = Tape::<f64>::new();
        let eps = array![[0.3, -0.7], [0.1, 0.9]];
        let pred = tape.leaf(eps.clone());
        let loss = tape.mse(pred, &eps);
        assert_eq!(tape.value(loss)[[0, 0]], 0.0);
    }

    #[test]
    fn drop_prob_one_masks_everything() {
        let mut model = tiny_model();
        let sched = NoiseSchedule::<f64>::linear(6, 0.01, 0.2).unwrap();
        let mut opt = Adam::new(model.store(), 1e-4, Some(1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<TrainItem<f64>> = (0..4)
            .map(|_| TrainItem {
                z0: Array2::from_shape_fn((6, 6), |_| rng.gen_range(-1.0..1.0)),
                audio: Array2::from_shape_fn((6, 3), |_| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let guidance = GuidanceConfig { s: 1.0, drop_prob: 1.0 };
        let loss = training_step(&batch, &sched, &mut model, None, &guidance, &mut opt, &mut rng)
            .unwrap();
        assert_eq!(loss.masked, batch.len());
        assert!(loss.total > 0.0);
    }

    /// Over many Bernoulli draws at p = 0.1 the masked fraction lands in
    /// [0.08, 0.12].
    #[test]
    fn mask_rate_matches_binomial() {
        let mut model = tiny_model();
        let sched = NoiseSchedule::<f64>::linear(4, 0.01, 0.2).unwrap();
        let mut opt = Adam::new(model.store(), 0.0, None); // lr 0: no drift
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<TrainItem<f64>> = (0..100)
            .map(|_| TrainItem {
                z0: Array2::from_shape_fn((2, 6), |_| rng.gen_range(-1.0..1.0)),
                audio: Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let guidance = GuidanceConfig { s: 1.0, drop_prob: 0.1 };
        let mut masked = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            let loss =
                training_step(&batch, &sched, &mut model, None, &guidance, &mut opt, &mut rng)
                    .unwrap();
            masked += loss.masked;
            total += batch.len();
        }
        let frac = masked as f64 / total as f64;
        assert!((0.08..=0.12).contains(&frac), "masked fraction {frac}");
    }

    #[test]
    fn empty_batch_rejected() {
        let mut model = tiny_model();
        let sched = NoiseSchedule::<f64>::linear(4, 0.01, 0.2).unwrap();
        let mut opt = Adam::new(model.store(), 1e-4, None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let guidance = GuidanceConfig { s: 1.0, drop_prob: 0.1 };
        assert!(training_step::<f64, _>(
            &[],
            &sched,
            &mut model,
            None,
            &guidance,
            &mut opt,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn seeded_sampling_is_deterministic() {
        let model = tiny_model();
        let sched = NoiseSchedule::<f64>::linear(5, 0.01, 0.2).unwrap();
        let stats = NormStats::new(vec![0.0; 6], vec![1.0; 6]).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Array2::from_shape_fn((8, 3), |(i, j)| ((i + j) as f64).sin());
        let e1 = sample(&model, &a, &sched, &stats, 1.15, 25.0, &mut r1).unwrap();
        let e2 = sample(&model, &a, &sched, &stats, 1.15, 25.0, &mut r2).unwrap();
        assert_eq!(e1.values(), e2.values());
        assert_eq!(e1.frames(), 8);
    }

    /// T = 1 with a fixed predictor: the output is the closed-form
    /// posterior mean for the initial z_1 drawn by the sampler.
    #[test]
    fn single_step_closed_form() {
        let sched = NoiseSchedule::<f64>::linear(1, 0.2, 0.2).unwrap();
        let eps = array![[0.4, -0.2]];
        let seed = 11;
        // capture the z_1 the sampler draws
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1 = Array2::<f64>::from_shape_fn((1, 2), |_| StandardNormal.sample(&mut rng));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = sample_with(1, 2, &sched, &mut rng, |_, n| {
            assert_eq!(n, 0);
            Ok(eps.clone())
        })
        .unwrap();

        let beta = 0.2f64;
        let alpha = 0.8f64;
        let ab = 0.8f64;
        for j in 0..2 {
            let expect = (z1[[0, j]] - beta / (1.0 - ab).sqrt() * eps[[0, j]]) / alpha.sqrt();
            assert!((out[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_weights_refuse_to_sample() {
        let mut model = tiny_model();
        let id = model.store().by_name("proj_w").unwrap();
        model.store_mut().get_mut(id)[[0, 0]] = f64::NAN;
        let sched = NoiseSchedule::<f64>::linear(3, 0.01, 0.2).unwrap();
        let stats = NormStats::new(vec![0.0; 6], vec![1.0; 6]).unwrap();
        let a = Array2::<f64>::zeros((4, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample(&model, &a, &sched, &stats, 1.0, 25.0, &mut rng).is_err());
    }
}
