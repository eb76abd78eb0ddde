//! A conditional probability path `p_t(x | x1)`: a [`PathFamily`] traversed
//! according to a [`SchedulerSpec`].

use crate::ctmc::ko_velocity_general;
use crate::error::{invalid, Result};
use crate::geometry::{check_token, gibbs_conditional, mixture_conditional, PathFamily, Pmf};
use crate::scheduler::SchedulerSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPath {
    family: PathFamily,
    schedule: SchedulerSpec,
}

impl ConditionalPath {
    /// Pairs a family with a scheduler of the matching parameter type: an
    /// inverse-temperature scheduler for metric paths, a mixture weight
    /// scheduler otherwise.
    pub fn new(family: PathFamily, schedule: SchedulerSpec) -> Result<Self> {
        family.validate()?;
        let metric = matches!(family, PathFamily::MetricInduced { .. });
        if metric != schedule.is_inverse_temperature() {
            return Err(invalid(if metric {
                "metric-induced paths need an inverse-temperature scheduler (metric KO table or heuristic)"
            } else {
                "mixture paths need a mixture-weight scheduler"
            }));
        }
        if !metric && schedule.param_max() > 1.0 {
            return Err(invalid("mixture weight scheduler exceeds 1"));
        }
        Ok(Self { family, schedule })
    }

    pub fn family(&self) -> &PathFamily {
        &self.family
    }

    pub fn schedule(&self) -> &SchedulerSpec {
        &self.schedule
    }

    pub fn state_count(&self) -> usize {
        self.family.state_count()
    }

    pub fn target_count(&self) -> usize {
        self.family.target_count()
    }

    pub fn mask(&self) -> Option<usize> {
        match &self.family {
            PathFamily::Mixture { mask, .. } => *mask,
            PathFamily::MetricInduced { .. } => None,
        }
    }

    /// Distribution at `t = 0`.
    pub fn source(&self) -> Pmf {
        match &self.family {
            PathFamily::MetricInduced { distances } => {
                Pmf::uniform(distances.size()).expect("distance matrices have at least two tokens")
            }
            PathFamily::Mixture { source, .. } => source.clone(),
        }
    }

    fn check_target(&self, x1: usize) -> Result<()> {
        check_token(x1, self.target_count())
    }

    /// Scheduled parameter and its time derivative for target `x1`.
    pub fn parameter(&self, t: f64, x1: usize) -> Result<(f64, f64)> {
        self.check_target(x1)?;
        let mass = match &self.family {
            PathFamily::Mixture { source, .. } => Some(source.get(x1)),
            PathFamily::MetricInduced { .. } => None,
        };
        self.schedule.evaluate(t, mass)
    }

    /// `p(· | x1)` at a given parameter value.
    pub fn marginal_at(&self, param: f64, x1: usize) -> Result<Pmf> {
        self.check_target(x1)?;
        match &self.family {
            PathFamily::MetricInduced { distances } => gibbs_conditional(distances, param, x1),
            PathFamily::Mixture { source, .. } => mixture_conditional(source, param.min(1.0), x1),
        }
    }

    /// `p_t(· | x1)`.
    pub fn marginal(&self, t: f64, x1: usize) -> Result<Pmf> {
        let (param, _) = self.parameter(t, x1)?;
        self.marginal_at(param, x1)
    }

    /// Analytic `d/dt p_t(· | x1)` from the scheduler derivative.
    pub fn derivative(&self, t: f64, x1: usize) -> Result<(Pmf, Vec<f64>)> {
        let (param, rate) = self.parameter(t, x1)?;
        let p = self.marginal_at(param, x1)?;
        let dp = match &self.family {
            PathFamily::MetricInduced { distances } => {
                let col = distances.to_target(x1);
                let mean = p.expect(col);
                p.probs().iter().zip(col).map(|(px, dx)| px * rate * (mean - dx)).collect()
            }
            PathFamily::Mixture { source, .. } => {
                let mut dp: Vec<f64> = source.probs().iter().map(|s| -rate * s).collect();
                dp[x1] += rate;
                dp
            }
        };
        Ok((p, dp))
    }

    /// Kinetic-optimal rates out of `z` for target `x1`, built from the
    /// general velocity formula applied to the analytic path.
    pub fn rates(&self, t: f64, x1: usize, z: usize) -> Result<Vec<f64>> {
        let (p, dp) = self.derivative(t, x1)?;
        ko_velocity_general(&p, &dp, z)
    }
}
