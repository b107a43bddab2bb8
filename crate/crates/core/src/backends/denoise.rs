//! Analytic noise predictors.

use super::{Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::scheduler::{ddim_step, pred_x0, LatentTensor, NoiseSchedule};

/// Noise that makes [`pred_x0`] return `target` exactly:
/// `(x_t - sqrt(ab) * target) / sqrt(1 - ab)`.
pub fn oracle_eps(x_t: &LatentTensor, target: &LatentTensor, t: usize, sched: &NoiseSchedule) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::DegenerateTimestep { t, alpha_bar: ab });
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip_map(target, "oracle_eps", |x, y| (x - a * y) / b)
}

/// Denoiser that always predicts a fixed clean latent.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    schedule: NoiseSchedule,
    target: LatentTensor,
}

impl OracleDenoiser {
    pub fn new(schedule: NoiseSchedule, target: LatentTensor) -> Self {
        Self { schedule, target }
    }

    pub fn target(&self) -> &LatentTensor {
        &self.target
    }
}

impl Denoiser for OracleDenoiser {
    fn eps(&self, x_t: &LatentTensor, _cond: &Conditioning, t: usize) -> Result<LatentTensor> {
        oracle_eps(x_t, &self.target, t, &self.schedule)
    }
}

/// Toy video model for consistency enhancement.
///
/// It knows the noise its SDEdit start was built from, reads the clean
/// latent implied by `x_t` under that noise and predicts a point a fraction
/// `pull` of the way towards its anchor. Edits written into the trajectory
/// (e.g. by a projection step) therefore persist into later predictions,
/// while `pull = 1` degenerates to [`OracleDenoiser`].
#[derive(Debug, Clone)]
pub struct AnchoredDenoiser {
    schedule: NoiseSchedule,
    anchor: LatentTensor,
    noise: LatentTensor,
    pull: f64,
}

impl AnchoredDenoiser {
    pub fn new(schedule: NoiseSchedule, anchor: LatentTensor, noise: LatentTensor, pull: f64) -> Result<Self> {
        anchor.ensure_same_shape(&noise, "anchored denoiser")?;
        if !(0.0..=1.0).contains(&pull) {
            return Err(Error::Config(format!("denoiser pull must lie in [0, 1], got {pull}")));
        }
        Ok(Self {
            schedule,
            anchor,
            noise,
            pull,
        })
    }
}

impl Denoiser for AnchoredDenoiser {
    fn eps(&self, x_t: &LatentTensor, _cond: &Conditioning, t: usize) -> Result<LatentTensor> {
        x_t.ensure_same_shape(&self.anchor, "anchored denoiser")?;
        let ab = self.schedule.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(Error::DegenerateTimestep { t, alpha_bar: ab });
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x_t
            .data()
            .iter()
            .zip(self.anchor.data())
            .zip(self.noise.data())
            .map(|((&x, &m), &n)| {
                let implied = (x - b * n) / a;
                let predicted = implied + self.pull * (m - implied);
                (x - a * predicted) / b
            })
            .collect();
        LatentTensor::new(x_t.shape(), data)
    }
}

/// Posterior-mean denoiser for data distributed as `N(mean, prior_std^2)`
/// elementwise. Larger SDEdit depths pull its output closer to `mean`.
#[derive(Debug, Clone)]
pub struct GaussianPriorDenoiser {
    schedule: NoiseSchedule,
    mean: LatentTensor,
    prior_std: f64,
}

impl GaussianPriorDenoiser {
    pub fn new(schedule: NoiseSchedule, mean: LatentTensor, prior_std: f64) -> Result<Self> {
        if !(prior_std >= 0.0 && prior_std.is_finite()) {
            return Err(Error::Config(format!(
                "prior std must be non-negative, got {prior_std}"
            )));
        }
        Ok(Self {
            schedule,
            mean,
            prior_std,
        })
    }
}

impl Denoiser for GaussianPriorDenoiser {
    fn eps(&self, x_t: &LatentTensor, _cond: &Conditioning, t: usize) -> Result<LatentTensor> {
        let ab = self.schedule.alpha_bar(t)?;
        if ab >= 1.0 {
            return Err(Error::DegenerateTimestep { t, alpha_bar: ab });
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let tau2 = self.prior_std * self.prior_std;
        let gain = a * tau2 / (ab * tau2 + 1.0 - ab);
        x_t.zip_map(&self.mean, "gaussian prior denoiser", |x, m| {
            let predicted = m + gain * (x - a * m);
            (x - a * predicted) / b
        })
    }
}

/// Plain deterministic DDIM over the last `steps` inference steps.
pub fn run_ddim(
    x_start: &LatentTensor,
    steps: usize,
    sched: &NoiseSchedule,
    denoiser: &dyn Denoiser,
    cond: &Conditioning,
) -> Result<LatentTensor> {
    let mut x = x_start.clone();
    for (t, t_prev) in sched.tail(steps)? {
        let eps = denoiser.eps(&x, cond, t)?;
        let x0 = pred_x0(&x, &eps, t, sched)?;
        x = ddim_step(&x0, &eps, t_prev, sched)?;
    }
    Ok(x)
}
