//! Flow-matching training objective, probability-flow ODE sampling, and the
//! DDPM forward process.
//!
//! Two clocks coexist. Flow time τ ∈ [0, 1] runs noise → data and drives
//! interpolation, the training loss, and the ODE sampler. The discrete DDPM
//! index t ∈ [0, T] runs data → noise and drives the forward corruption used
//! by distillation. They are tied by `t = round((1 − τ)·T)`.

use rand::Rng;

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::synthvid::PromptSpec;
use crate::{Error, Result};

/// Discrete variance schedule: β per step with α_t = Π(1−β_s)^½ and
/// σ_t² = 1 − α_t², so α_t² + σ_t² = 1 holds by construction. α_0 = 1
/// (empty product).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>, // length T+1, alphas[0] = 1
}

impl NoiseSchedule {
    /// Linear β from 1e-4 to 0.02 over 1000 steps.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule")
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Precondition("schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        if betas.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(Error::Precondition(
                "all betas must lie strictly inside (0, 1)".into(),
            ));
        }
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        let mut acc = 1.0_f64;
        for &b in &betas {
            acc *= (1.0 - b).sqrt();
            alphas.push(acc);
        }
        Ok(NoiseSchedule { betas, alphas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha(&self, t_index: usize) -> f64 {
        self.alphas[t_index]
    }

    pub fn sigma2(&self, t_index: usize) -> f64 {
        1.0 - self.alphas[t_index] * self.alphas[t_index]
    }

    pub fn sigma(&self, t_index: usize) -> f64 {
        self.sigma2(t_index).sqrt()
    }

    /// Canonical clock mapping: flow time τ (0 = noise) to DDPM index
    /// (T = noise).
    pub fn index_for_tau(&self, tau: f64) -> usize {
        let t = ((1.0 - tau) * self.steps() as f64).round();
        (t.max(0.0) as usize).min(self.steps())
    }

    /// Inverse clock mapping: DDPM index to flow time.
    pub fn tau_for_index(&self, t_index: usize) -> f64 {
        1.0 - t_index as f64 / self.steps() as f64
    }
}

/// Ordered evaluation times in [0, 1] for few-step generation, oriented
/// τ = 0 noise → τ = 1 data. Integration always runs to the terminal time 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Precondition("time grid must be non-empty".into()));
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Precondition(format!(
                    "time grid must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if times[0] < 0.0 || *times.last().unwrap() > 1.0 {
            return Err(Error::Precondition("time grid must stay within [0, 1]".into()));
        }
        Ok(TimeGrid { times })
    }

    /// n uniform start times k/n, k = 0..n.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("grid size must be >= 1".into()));
        }
        Self::new((0..n).map(|k| k as f64 / n as f64).collect())
    }

    /// The 4-step grid used by the distilled generator: τ ∈ {0, ¼, ½, ¾}.
    pub fn four_step() -> Self {
        Self::new(vec![0.0, 0.25, 0.5, 0.75]).expect("static grid")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Step size from grid entry k to the next entry (or to the terminal 1).
    pub fn dt(&self, k: usize) -> f64 {
        let next = self.times.get(k + 1).copied().unwrap_or(1.0);
        next - self.times[k]
    }
}

/// Linear interpolate (1−t)·x0 + t·x1.
pub fn interpolate<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>, t: f64) -> Result<Tensor<S>> {
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("t = {} outside [0, 1]", t)));
    }
    let a = S::from_f64(1.0 - t);
    let b = S::from_f64(t);
    x0.zip(x1, |u, v| a * u + b * v)
}

/// Ground-truth velocity of the linear path: x1 − x0, independent of t.
pub fn target_velocity<S: Scalar>(x0: &Tensor<S>, x1: &Tensor<S>) -> Result<Tensor<S>> {
    if x0.shape() != x1.shape() {
        return Err(Error::ShapeMismatch {
            op: "target_velocity",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    x1.zip(x0, |a, b| a - b)
}

/// DDPM forward corruption α_t·x0 + σ_t·noise at a schedule index.
/// Index 0 returns x0 exactly (α_0 = 1, σ_0 = 0).
pub fn ddpm_forward<S: Scalar>(
    x0: &Tensor<S>,
    t_index: usize,
    noise: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    if t_index > schedule.steps() {
        return Err(Error::Precondition(format!(
            "schedule index {} out of range 0..={}",
            t_index,
            schedule.steps()
        )));
    }
    if x0.shape() != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "ddpm_forward",
            lhs: x0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let a = S::from_f64(schedule.alpha(t_index));
    let s = S::from_f64(schedule.sigma(t_index));
    x0.zip(noise, |x, n| a * x + s * n)
}

/// On-tape velocity model: records a forward pass for the noisy input at
/// flow time τ under prompt conditioning and returns the prediction node.
pub trait TapeVelocity<S: Scalar> {
    fn velocity(
        &self,
        tape: &mut Tape<S>,
        x_t: Var,
        tau: f64,
        spec: &PromptSpec,
    ) -> Result<Var>;
}

impl<S: Scalar, F> TapeVelocity<S> for F
where
    F: Fn(&mut Tape<S>, Var, f64, &PromptSpec) -> Result<Var>,
{
    fn velocity(&self, tape: &mut Tape<S>, x_t: Var, tau: f64, spec: &PromptSpec) -> Result<Var> {
        self(tape, x_t, tau, spec)
    }
}

/// One batch item for the flow-matching loss: noise draw, data clip, prompt.
pub struct FmSample<S: Scalar> {
    pub x0: Tensor<S>,
    pub x1: Tensor<S>,
    pub spec: PromptSpec,
}

/// Flow-matching loss on a tape: mean over the batch of
/// ‖v(x_t, t) − (x1 − x0)‖² with t ~ U(0, 1) per sample.
pub fn fm_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &impl TapeVelocity<S>,
    batch: &[FmSample<S>],
    rng: &mut impl Rng,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Precondition("fm_loss needs a non-empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for sample in batch {
        let t: f64 = rng.gen_range(0.0..1.0);
        let x_t = tape.leaf(interpolate(&sample.x0, &sample.x1, t)?);
        let v_star = tape.leaf(target_velocity(&sample.x0, &sample.x1)?);
        let pred = model.velocity(tape, x_t, t, &sample.spec)?;
        let loss = tape.mse(pred, v_star)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    tape.scalar_mul(total.unwrap(), 1.0 / batch.len() as f64)
}

/// Plain-tensor velocity field for sampling (no gradients).
pub trait SampleVelocity<S: Scalar> {
    fn velocity(&self, x: &Tensor<S>, tau: f64) -> Result<Tensor<S>>;
}

impl<S: Scalar, F> SampleVelocity<S> for F
where
    F: Fn(&Tensor<S>, f64) -> Result<Tensor<S>>,
{
    fn velocity(&self, x: &Tensor<S>, tau: f64) -> Result<Tensor<S>> {
        self(x, tau)
    }
}

/// Explicit-Euler integration of ẋ = v(x, τ) from the first grid time to
/// τ = 1. Deterministic given (field, z, grid). With `keep_trajectory`, the
/// states at every grid time plus the terminal state are returned.
pub fn ode_sample<S: Scalar>(
    field: &impl SampleVelocity<S>,
    z: &Tensor<S>,
    grid: &TimeGrid,
    keep_trajectory: bool,
) -> Result<(Tensor<S>, Option<Vec<Tensor<S>>>)> {
    let mut x = z.clone();
    let mut trajectory = keep_trajectory.then(Vec::new);
    for (k, &tau) in grid.times().iter().enumerate() {
        if let Some(tr) = trajectory.as_mut() {
            tr.push(x.clone());
        }
        let v = field.velocity(&x, tau)?;
        x = x.axpy(S::from_f64(grid.dt(k)), &v)?;
    }
    if let Some(tr) = trajectory.as_mut() {
        tr.push(x.clone());
    }
    Ok((x, trajectory))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = Tensor::<f64>::zeros(&[2]);
        let x1 = Tensor::<f64>::from_f64_slice(&[2], &[2.0, 2.0]).unwrap();
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap().data(), x0.data());
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap().data(), x1.data());
        assert_eq!(interpolate(&x0, &x1, 0.5).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn interpolate_matches_direct_formula_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = Tensor::<f64>::randn(&[8], &mut rng);
        let x1 = Tensor::<f64>::randn(&[8], &mut rng);
        for _ in 0..5 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let got = interpolate(&x0, &x1, t).unwrap();
            for i in 0..8 {
                let want = (1.0 - t) * x0.data()[i] + t * x1.data()[i];
                assert!((got.data()[i] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn target_velocity_cases() {
        let x = Tensor::<f64>::from_f64_slice(&[2], &[0.3, -0.7]).unwrap();
        assert_eq!(target_velocity(&x, &x).unwrap().data(), &[0.0, 0.0]);
        let zero = Tensor::<f64>::zeros(&[2]);
        let x1 = Tensor::<f64>::from_f64_slice(&[2], &[2.0, -2.0]).unwrap();
        assert_eq!(target_velocity(&zero, &x1).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn interpolate_time_derivative_is_target_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = Tensor::<f64>::randn(&[16], &mut rng);
        let x1 = Tensor::<f64>::randn(&[16], &mut rng);
        let v = target_velocity(&x0, &x1).unwrap();
        let h = 1e-6;
        let t = 0.4;
        let plus = interpolate(&x0, &x1, t + h).unwrap();
        let minus = interpolate(&x0, &x1, t - h).unwrap();
        for i in 0..16 {
            let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
            assert!((fd - v.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn schedule_identity_and_monotonicity() {
        let s = NoiseSchedule::default_linear();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha(0), 1.0);
        for t in 0..=1000 {
            let id = s.alpha(t) * s.alpha(t) + s.sigma2(t);
            assert!((id - 1.0).abs() < 1e-12, "t={} identity {}", t, id);
            if t > 0 {
                assert!(s.alpha(t) < s.alpha(t - 1), "alpha not strictly decreasing");
            }
        }
    }

    #[test]
    fn ddpm_forward_index_zero_is_identity() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn(&[10], &mut rng);
        let noise = Tensor::<f64>::randn(&[10], &mut rng);
        let out = ddpm_forward(&x0, 0, &noise, &s).unwrap();
        assert_eq!(out.data(), x0.data());
        assert!(ddpm_forward(&x0, 1001, &noise, &s).is_err());
    }

    #[test]
    fn ddpm_forward_monte_carlo_variance() {
        let s = NoiseSchedule::default_linear();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::zeros(&[1]);
        let t = 600;
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let noise = Tensor::<f64>::randn(&[1], &mut rng);
                ddpm_forward(&x0, t, &noise, &s).unwrap().data()[0]
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
        // Std-err of the sample variance of a normal: σ²·sqrt(2/(n−1)).
        let sigma2 = s.sigma2(t);
        let stderr = sigma2 * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!(
            (var - sigma2).abs() < 3.0 * stderr,
            "var {} vs σ² {} (3·stderr {})",
            var,
            sigma2,
            3.0 * stderr
        );
    }

    #[test]
    fn clock_mapping_round_trip() {
        let s = NoiseSchedule::default_linear();
        for t in [0usize, 1, 250, 500, 999, 1000] {
            assert_eq!(s.index_for_tau(s.tau_for_index(t)), t);
        }
    }

    #[test]
    fn grid_rejects_disorder_and_empty() {
        assert!(TimeGrid::new(vec![]).is_err());
        assert!(TimeGrid::new(vec![0.5, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.0, 1.2]).is_err());
        assert_eq!(TimeGrid::four_step().times(), &[0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn euler_constant_field_exact() {
        let grid = TimeGrid::uniform(7).unwrap();
        let z = Tensor::<f64>::from_f64_slice(&[3], &[0.1, -0.2, 0.3]).unwrap();
        let c = [1.5, -0.5, 2.0];
        let field = |x: &Tensor<f64>, _tau: f64| {
            Tensor::from_f64_slice(x.shape(), &c)
        };
        let (out, traj) = ode_sample(&field, &z, &grid, true).unwrap();
        for i in 0..3 {
            assert!((out.data()[i] - (z.data()[i] + c[i])).abs() < 1e-12);
        }
        let traj = traj.unwrap();
        assert_eq!(traj.len(), 8); // 7 grid states + terminal
        assert_eq!(traj[0].data(), z.data());
        assert_eq!(traj[7].data(), out.data());
    }

    #[test]
    fn ode_sample_deterministic() {
        let grid = TimeGrid::uniform(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = Tensor::<f64>::randn(&[4], &mut rng);
        let field =
            |x: &Tensor<f64>, tau: f64| Ok(x.map(|v| v * S(tau) + 0.1));
        #[allow(non_snake_case)]
        fn S(t: f64) -> f64 {
            0.3 * t - 0.1
        }
        let (a, _) = ode_sample(&field, &z, &grid, false).unwrap();
        let (b, _) = ode_sample(&field, &z, &grid, false).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fm_loss_zero_for_oracle_and_plugin_for_zero_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = crate::synthvid::sample_prompt(0);
        let batch: Vec<FmSample<f64>> = (0..3)
            .map(|_| FmSample {
                x0: Tensor::randn(&[6], &mut rng),
                x1: Tensor::randn(&[6], &mut rng),
                spec,
            })
            .collect();

        // Oracle returning exactly x1 − x0 per sample: loss must be 0.
        // The oracle identifies the sample by the interpolation identity
        // x_t = (1−t)x0 + t·x1, recovering v* without the originals.
        let oracle_targets: Vec<Tensor<f64>> = batch
            .iter()
            .map(|s| target_velocity(&s.x0, &s.x1).unwrap())
            .collect();
        let idx = std::cell::Cell::new(0usize);
        let oracle = |tape: &mut Tape<f64>, _x: Var, _t: f64, _s: &PromptSpec| {
            let i = idx.get();
            idx.set(i + 1);
            Ok(tape.leaf(oracle_targets[i].clone()))
        };
        let mut tape = Tape::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let loss = fm_loss(&mut tape, &oracle, &batch, &mut r1).unwrap();
        assert!(tape.value(loss).scalar_value().abs() < 1e-10);

        // Zero network: loss equals mean ‖x1 − x0‖² (mean-per-element).
        let zero_net = |tape: &mut Tape<f64>, x: Var, _t: f64, _s: &PromptSpec| {
            let sh = tape.value(x).shape().to_vec();
            Ok(tape.leaf(Tensor::zeros(&sh)))
        };
        let mut tape = Tape::new();
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let loss = fm_loss(&mut tape, &zero_net, &batch, &mut r2).unwrap();
        let expect: f64 = batch
            .iter()
            .map(|s| {
                let v = target_velocity(&s.x0, &s.x1).unwrap();
                v.data().iter().map(|d| d * d).sum::<f64>() / v.numel() as f64
            })
            .sum::<f64>()
            / batch.len() as f64;
        assert!((tape.value(loss).scalar_value() - expect).abs() < 1e-12);
    }
}
