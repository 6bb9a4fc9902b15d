//! Distribution-matching distillation of the teacher into a few-step
//! generator, plus EMA maintenance.
//!
//! The generator gradient descends the reverse KL via the difference of
//! fake and real score estimates at noised generator outputs: the
//! difference is evaluated with gradients blocked and applied as the
//! adjoint of the generated sample. With equal scores the gradient is
//! exactly zero.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::flowmatch::{ddpm_forward, NoiseSchedule, TimeGrid};
use crate::model::{DitModel, ParamStore, RoleTag};
use crate::optim::AdamW;
use crate::rollout::few_step_on_tape;
use crate::synthvid::PromptSpec;
use crate::{Error, Result};

/// Score estimate s(x_t, t) under the shared noise schedule.
pub trait ScoreFn<S: Scalar> {
    fn score(&self, x_t: &Tensor<S>, t_index: usize, spec: &PromptSpec) -> Result<Tensor<S>>;
}

/// Generation recorded on a tape with parameters bound once for backprop;
/// returns one output node per batch item.
pub trait TapeGenerator<S: Scalar> {
    fn generate_batch(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        batch: &[DmdBatchItem<S>],
    ) -> Result<Vec<Var>>;

    fn sample_shape(&self) -> Vec<usize>;
}

/// Few-step generator wrapper around the bidirectional model.
pub struct FewStepGenerator<'a> {
    pub model: &'a DitModel,
    pub grid: TimeGrid,
}

impl<S: Scalar> TapeGenerator<S> for FewStepGenerator<'_> {
    fn generate_batch(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        batch: &[DmdBatchItem<S>],
    ) -> Result<Vec<Var>> {
        let bound = self.model.bind(tape, params)?;
        batch
            .iter()
            .map(|item| few_step_on_tape(self.model, tape, &bound, &item.z, &self.grid, &item.spec))
            .collect()
    }

    fn sample_shape(&self) -> Vec<usize> {
        self.model.cfg.clip_shape().to_vec()
    }
}

/// Velocity→score conversion under the schedule: the clean estimate
/// x̂₀ = (σ_t·v̂ + x_t)/(σ_t + α_t) inverts the velocity regression on
/// DDPM-noised inputs, and the Gaussian posterior score follows as
/// (α_t·x̂₀ − x_t)/σ_t². Evaluated at the flow time mapped from t.
pub struct VelocityScore<'a, S: Scalar> {
    pub model: &'a DitModel,
    pub params: &'a ParamStore<S>,
    pub schedule: &'a NoiseSchedule,
}

impl<S: Scalar> ScoreFn<S> for VelocityScore<'_, S> {
    fn score(&self, x_t: &Tensor<S>, t_index: usize, spec: &PromptSpec) -> Result<Tensor<S>> {
        let tau = self.schedule.tau_for_index(t_index);
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, self.params)?;
        let xv = tape.leaf(x_t.clone());
        let v = self
            .model
            .forward_bidirectional(&mut tape, &bound, xv, tau.clamp(0.0, 1.0), spec)?;
        let v = tape.detach(v);
        let alpha = self.schedule.alpha(t_index);
        let sigma = self.schedule.sigma(t_index);
        let sigma2 = self.schedule.sigma2(t_index).max(1e-8);
        let denom = (sigma + alpha).max(1e-8);
        let (a, s) = (S::from_f64(alpha), S::from_f64(sigma));
        let inv_denom = S::from_f64(1.0 / denom);
        let inv_sigma2 = S::from_f64(1.0 / sigma2);
        x_t.zip(&v, |x, vi| {
            let x0_hat = (s * vi + x) * inv_denom;
            (a * x0_hat - x) * inv_sigma2
        })
    }
}

/// Per-sample inputs for a distillation step.
pub struct DmdBatchItem<S: Scalar> {
    pub z: Tensor<S>,
    pub spec: PromptSpec,
}

#[derive(Debug, Clone, Copy)]
pub struct DmdReport {
    /// Mean surrogate ⟨x̂, stop-grad(s_fake − s_real)⟩ over the batch.
    pub surrogate: f64,
    /// L2 norm of the full generator gradient.
    pub grad_norm: f64,
    /// True when a non-finite score difference forced a skip.
    pub skipped: bool,
}

/// Generator gradient of the reverse-KL objective, without applying it.
pub fn dmd_generator_gradient<S: Scalar>(
    generator: &impl TapeGenerator<S>,
    params: &ParamStore<S>,
    real: &impl ScoreFn<S>,
    fake: &impl ScoreFn<S>,
    schedule: &NoiseSchedule,
    batch: &[DmdBatchItem<S>],
    rng: &mut ChaCha8Rng,
) -> Result<(BTreeMap<String, Tensor<S>>, DmdReport)> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty distillation batch".into()));
    }
    let mut tape = Tape::new();
    let outputs = generator.generate_batch(&mut tape, params, batch)?;
    let mut total: Option<Var> = None;
    for (item, &x_hat) in batch.iter().zip(&outputs) {
        let t_index = rng.gen_range(1..=schedule.steps());
        let noise = Tensor::<S>::randn(&tape.value(x_hat).shape().to_vec(), rng);
        let x_t = ddpm_forward(&tape.detach(x_hat), t_index, &noise, schedule)?;
        let s_fake = fake.score(&x_t, t_index, &item.spec)?;
        let s_real = real.score(&x_t, t_index, &item.spec)?;
        let g = s_fake.zip(&s_real, |f, r| f - r)?;
        if !g.all_finite() {
            return Ok((
                BTreeMap::new(),
                DmdReport {
                    surrogate: f64::NAN,
                    grad_norm: 0.0,
                    skipped: true,
                },
            ));
        }
        // Surrogate whose x̂-adjoint is exactly g.
        let g_leaf = tape.leaf(g);
        let weighted = tape.mul(x_hat, g_leaf)?;
        let s = tape.sum(weighted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let loss = tape.scalar_mul(total.unwrap(), 1.0 / batch.len() as f64)?;
    let surrogate = tape.value(loss).scalar_value().to_f64();
    let grads = tape.backward(loss)?.into_param_map();
    let grad_norm = grads
        .values()
        .map(|g| {
            let n = g.l2_norm();
            n * n
        })
        .sum::<f64>()
        .sqrt();
    Ok((
        grads,
        DmdReport {
            surrogate,
            grad_norm,
            skipped: false,
        },
    ))
}

/// One generator update: gradient then AdamW. Non-finite score differences
/// skip the step and report it.
pub fn dmd_generator_step<S: Scalar>(
    generator: &impl TapeGenerator<S>,
    params: &mut ParamStore<S>,
    opt: &mut AdamW,
    real: &impl ScoreFn<S>,
    fake: &impl ScoreFn<S>,
    schedule: &NoiseSchedule,
    batch: &[DmdBatchItem<S>],
    rng: &mut ChaCha8Rng,
) -> Result<DmdReport> {
    let (grads, report) =
        dmd_generator_gradient(generator, params, real, fake, schedule, batch, rng)?;
    if !report.skipped {
        opt.step(params, &grads)?;
    }
    Ok(report)
}

/// On-tape denoising model used to train the fake score estimator; the
/// production implementation is the shared DiT in bidirectional mode.
/// Parameters bind once per tape, one prediction node per item.
pub trait TapeDenoiser<S: Scalar> {
    fn predict_batch(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        items: &[(Tensor<S>, f64, PromptSpec)],
    ) -> Result<Vec<Var>>;
}

impl<S: Scalar> TapeDenoiser<S> for DitModel {
    fn predict_batch(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        items: &[(Tensor<S>, f64, PromptSpec)],
    ) -> Result<Vec<Var>> {
        let bound = self.bind(tape, params)?;
        items
            .iter()
            .map(|(x_t, tau, spec)| {
                let xv = tape.leaf(x_t.clone());
                self.forward_bidirectional(tape, &bound, xv, *tau, spec)
            })
            .collect()
    }
}

/// One fake-score update: denoising velocity regression on frozen-generator
/// outputs noised through the forward process.
pub fn fake_score_step<S: Scalar>(
    generator: &impl TapeGenerator<S>,
    gen_params: &ParamStore<S>,
    fake_net: &impl TapeDenoiser<S>,
    fake_params: &mut ParamStore<S>,
    opt: &mut AdamW,
    schedule: &NoiseSchedule,
    batch: &[DmdBatchItem<S>],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty fake-score batch".into()));
    }
    // Generator outputs with θ frozen for this step.
    let x_hats: Vec<Tensor<S>> = {
        let mut gen_tape = Tape::new();
        let outs = generator.generate_batch(&mut gen_tape, gen_params, batch)?;
        outs.iter().map(|&v| gen_tape.detach(v)).collect()
    };
    let mut items = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (item, x_hat) in batch.iter().zip(&x_hats) {
        let t_index = rng.gen_range(1..=schedule.steps());
        let noise = Tensor::<S>::randn(&x_hat.shape().to_vec(), rng);
        let x_t = ddpm_forward(x_hat, t_index, &noise, schedule)?;
        targets.push(x_hat.zip(&noise, |a, b| a - b)?);
        items.push((x_t, schedule.tau_for_index(t_index), item.spec));
    }
    let mut tape = Tape::new();
    let preds = fake_net.predict_batch(&mut tape, fake_params, &items)?;
    let mut total: Option<Var> = None;
    for (pred, target) in preds.into_iter().zip(targets) {
        let tgt = tape.leaf(target);
        let l = tape.mse(pred, tgt)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let loss = tape.scalar_mul(total.unwrap(), 1.0 / batch.len() as f64)?;
    let value = tape.value(loss).scalar_value().to_f64();
    let grads = tape.backward(loss)?.into_param_map();
    opt.step(fake_params, &grads)?;
    Ok(value)
}

/// shadow ← decay·shadow + (1−decay)·θ, elementwise over matching names.
pub fn ema_update<S: Scalar>(
    shadow: &mut ParamStore<S>,
    params: &ParamStore<S>,
    decay: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Precondition(format!("EMA decay {} outside [0, 1)", decay)));
    }
    let d = S::from_f64(decay);
    let one_minus = S::from_f64(1.0 - decay);
    for (name, p) in params.iter() {
        let s = shadow.get_mut(name).ok_or_else(|| {
            Error::invalid("ema_update", format!("shadow missing parameter {name}"))
        })?;
        if s.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: s.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + one_minus * *pv;
        }
    }
    Ok(())
}

/// Full distillation state: generator θ, its EMA shadow, the trainable
/// fake-score parameters, and both optimizers. The real-score parameters
/// (the teacher) stay outside and are never mutated.
pub struct DistillState<S: Scalar> {
    pub generator: ParamStore<S>,
    pub ema: ParamStore<S>,
    pub fake: ParamStore<S>,
    pub gen_opt: AdamW,
    pub fake_opt: AdamW,
    pub step: u64,
}

impl<S: Scalar> DistillState<S> {
    /// Initialize from the teacher: the generator and the fake score net
    /// both start as copies of the teacher weights.
    pub fn from_teacher(teacher: &ParamStore<S>, gen_opt: AdamW, fake_opt: AdamW) -> Self {
        DistillState {
            generator: teacher.with_role(RoleTag::Generator),
            ema: teacher.with_role(RoleTag::EmaShadow),
            fake: teacher.with_role(RoleTag::FakeScore),
            gen_opt,
            fake_opt,
            step: 0,
        }
    }
}

// ── Closed-form 1-D Gaussian oracle ──────────────────────────────────

/// Analytic score of N(μ, σ²): s(x) = −(x − μ)/σ².
pub struct GaussianScore {
    pub mu: f64,
    pub sigma2: f64,
}

impl<S: Scalar> ScoreFn<S> for GaussianScore {
    fn score(&self, x_t: &Tensor<S>, _t_index: usize, _spec: &PromptSpec) -> Result<Tensor<S>> {
        let mu = S::from_f64(self.mu);
        let inv = S::from_f64(1.0 / self.sigma2);
        Ok(x_t.map(|x| -(x - mu) * inv))
    }
}

/// Toy generator G(z) = μ + z with a single parameter "mu".
pub struct GaussianToyGen;

pub const TOY_MU: &str = "mu";

impl GaussianToyGen {
    pub fn init_params<S: Scalar>(mu0: f64) -> ParamStore<S> {
        let mut p = ParamStore::new(RoleTag::Generator);
        p.insert(TOY_MU, Tensor::from_f64_slice(&[1], &[mu0]).unwrap())
            .unwrap();
        p
    }
}

impl<S: Scalar> TapeGenerator<S> for GaussianToyGen {
    fn generate_batch(
        &self,
        tape: &mut Tape<S>,
        params: &ParamStore<S>,
        batch: &[DmdBatchItem<S>],
    ) -> Result<Vec<Var>> {
        let mu = tape.param(
            TOY_MU,
            params
                .get(TOY_MU)
                .ok_or_else(|| Error::invalid("toy", "missing mu"))?
                .clone(),
        );
        batch
            .iter()
            .map(|item| {
                let zv = tape.leaf(item.z.clone());
                tape.add(zv, mu)
            })
            .collect()
    }

    fn sample_shape(&self) -> Vec<usize> {
        vec![8]
    }
}

/// Regression step for a toy fake score with learnable mean: fits μ_fake to
/// the generator's current output distribution by least squares, mirroring
/// the fake net's denoising regression at toy scale.
pub fn toy_fake_regression_step<S: Scalar>(
    fake_mu: &mut ParamStore<S>,
    opt: &mut AdamW,
    samples: &Tensor<S>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let mu = tape.param(TOY_MU, fake_mu.get(TOY_MU).unwrap().clone());
    let zeros = tape.leaf(Tensor::zeros(&samples.shape().to_vec()));
    let mu_b = tape.add(zeros, mu)?;
    let targets = tape.leaf(samples.clone());
    let loss = tape.mse(mu_b, targets)?;
    let value = tape.value(loss).scalar_value().to_f64();
    let grads = tape.backward(loss)?.into_param_map();
    opt.step(fake_mu, &grads)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;
    use crate::synthvid::sample_prompt;
    use rand::SeedableRng;

    fn toy_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(100, 1e-4, 0.02).unwrap()
    }

    fn toy_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<DmdBatchItem<f64>> {
        let spec = sample_prompt(0);
        (0..n)
            .map(|_| DmdBatchItem {
                z: Tensor::randn(&[8], rng),
                spec,
            })
            .collect()
    }

    #[test]
    fn equal_scores_give_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = GaussianToyGen::init_params::<f64>(2.0);
        let score = GaussianScore { mu: 0.5, sigma2: 1.0 };
        let batch = toy_batch(&mut rng, 4);
        let (grads, report) = dmd_generator_gradient(
            &GaussianToyGen,
            &params,
            &score,
            &score,
            &toy_schedule(),
            &batch,
            &mut rng,
        )
        .unwrap();
        assert_eq!(report.grad_norm, 0.0);
        assert_eq!(grads[TOY_MU].data(), &[0.0]);
        assert_eq!(report.surrogate, 0.0);
    }

    #[test]
    fn toy_gradient_equals_mean_gap_and_flips_on_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mu_theta = 2.0;
        let mu_real = 0.5;
        let params = GaussianToyGen::init_params::<f64>(mu_theta);
        let real = GaussianScore { mu: mu_real, sigma2: 1.0 };
        // Ideal fake score tracks the generator's own distribution.
        let fake = GaussianScore { mu: mu_theta, sigma2: 1.0 };
        let batch = toy_batch(&mut rng, 16);
        let schedule = toy_schedule();

        let mut r1 = rng.clone();
        let (grads, _) = dmd_generator_gradient(
            &GaussianToyGen, &params, &real, &fake, &schedule, &batch, &mut r1,
        )
        .unwrap();
        // s_fake − s_real = μ_θ − μ_real independent of x; the z-batch sums
        // it over 8 components, the batch mean keeps it per-sample.
        let per_elem = grads[TOY_MU].data()[0] / 8.0;
        assert!(
            (per_elem - (mu_theta - mu_real)).abs() < 1e-12,
            "gradient {} vs gap {}",
            per_elem,
            mu_theta - mu_real
        );

        let mut r2 = rng.clone();
        let (swapped, _) = dmd_generator_gradient(
            &GaussianToyGen, &params, &fake, &real, &schedule, &batch, &mut r2,
        )
        .unwrap();
        assert!((swapped[TOY_MU].data()[0] + grads[TOY_MU].data()[0]).abs() < 1e-12);
    }

    #[test]
    fn toy_descent_converges_with_ideal_fake_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mu_real = 1.5;
        let mut params = GaussianToyGen::init_params::<f64>(-1.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        });
        let schedule = toy_schedule();
        let real = GaussianScore { mu: mu_real, sigma2: 1.0 };
        let mut steps_used = 0;
        for step in 0..2000 {
            let mu_now = params.get(TOY_MU).unwrap().data()[0];
            let fake = GaussianScore { mu: mu_now, sigma2: 1.0 };
            let batch = toy_batch(&mut rng, 8);
            dmd_generator_step(
                &GaussianToyGen,
                &mut params,
                &mut opt,
                &real,
                &fake,
                &schedule,
                &batch,
                &mut rng,
            )
            .unwrap();
            steps_used = step + 1;
            if (params.get(TOY_MU).unwrap().data()[0] - mu_real).abs() < 0.02 {
                break;
            }
        }
        let mu = params.get(TOY_MU).unwrap().data()[0];
        assert!(
            (mu - mu_real).abs() < 0.05,
            "mu {} after {} steps",
            mu,
            steps_used
        );
        assert!(steps_used <= 2000);
    }

    #[test]
    fn toy_alternating_updates_converge() {
        // 1:1 alternation with a learned fake mean still reaches μ_real.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu_real = 0.8;
        let mut gen = GaussianToyGen::init_params::<f64>(-1.2);
        let mut fake_mu = GaussianToyGen::init_params::<f64>(0.0);
        let mut gen_opt = AdamW::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut fake_opt = AdamW::new(AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        });
        let schedule = toy_schedule();
        let real = GaussianScore { mu: mu_real, sigma2: 1.0 };
        for _ in 0..2000 {
            // Fake regression toward current generator samples.
            let mu_now = gen.get(TOY_MU).unwrap().data()[0];
            let samples = Tensor::<f64>::randn(&[32], &mut rng).map(|z| z + mu_now);
            toy_fake_regression_step(&mut fake_mu, &mut fake_opt, &samples).unwrap();
            // Generator step against the learned fake score.
            let fake = GaussianScore {
                mu: fake_mu.get(TOY_MU).unwrap().data()[0],
                sigma2: 1.0,
            };
            let batch = toy_batch(&mut rng, 8);
            dmd_generator_step(
                &GaussianToyGen,
                &mut gen,
                &mut gen_opt,
                &real,
                &fake,
                &schedule,
                &batch,
                &mut rng,
            )
            .unwrap();
        }
        let mu = gen.get(TOY_MU).unwrap().data()[0];
        assert!((mu - mu_real).abs() < 0.1, "mu {}", mu);
    }

    #[test]
    fn ema_formula_and_geometric_convergence() {
        let mut shadow = GaussianToyGen::init_params::<f64>(1.0);
        let theta = GaussianToyGen::init_params::<f64>(0.0);
        ema_update(&mut shadow, &theta, 0.99).unwrap();
        assert!((shadow.get(TOY_MU).unwrap().data()[0] - 0.99).abs() < 1e-15);

        // decay = 0 copies θ.
        let mut shadow0 = GaussianToyGen::init_params::<f64>(1.0);
        ema_update(&mut shadow0, &theta, 0.0).unwrap();
        assert_eq!(shadow0.get(TOY_MU).unwrap().data()[0], 0.0);

        // Repeated updates with constant θ converge geometrically.
        let mut s = GaussianToyGen::init_params::<f64>(1.0);
        let mut prev_err = 1.0;
        for _ in 0..5 {
            ema_update(&mut s, &theta, 0.9).unwrap();
            let err = s.get(TOY_MU).unwrap().data()[0].abs();
            assert!((err / prev_err - 0.9).abs() < 1e-12);
            prev_err = err;
        }

        assert!(ema_update(&mut s, &theta, 1.0).is_err());
    }

    #[test]
    fn zero_capacity_fake_net_loss_is_target_second_moment() {
        // A constant-zero denoiser leaves the full velocity target as error.
        struct ZeroNet;
        impl TapeDenoiser<f64> for ZeroNet {
            fn predict_batch(
                &self,
                tape: &mut Tape<f64>,
                _params: &ParamStore<f64>,
                items: &[(Tensor<f64>, f64, PromptSpec)],
            ) -> Result<Vec<Var>> {
                Ok(items
                    .iter()
                    .map(|(x_t, _, _)| tape.leaf(Tensor::zeros(&x_t.shape().to_vec())))
                    .collect())
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gen_params = GaussianToyGen::init_params::<f64>(0.7);
        let mut fake_params = GaussianToyGen::init_params::<f64>(0.0);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let batch = toy_batch(&mut rng, 64);
        let schedule = toy_schedule();

        // Recompute the expected loss with the same rng stream.
        let mut r2 = rng.clone();
        let mut expect = 0.0;
        for item in &batch {
            let x_hat = item.z.map(|z| z + 0.7);
            let t_index = r2.gen_range(1..=schedule.steps());
            let noise = Tensor::<f64>::randn(&[8], &mut r2);
            let _ = ddpm_forward(&x_hat, t_index, &noise, &schedule).unwrap();
            let target = x_hat.zip(&noise, |a, b| a - b).unwrap();
            expect += target.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
        }
        expect /= batch.len() as f64;

        let loss = fake_score_step(
            &GaussianToyGen,
            &gen_params,
            &ZeroNet,
            &mut fake_params,
            &mut opt,
            &schedule,
            &batch,
            &mut rng,
        )
        .unwrap();
        assert!((loss - expect).abs() < 1e-10, "loss {} expect {}", loss, expect);
    }
}
