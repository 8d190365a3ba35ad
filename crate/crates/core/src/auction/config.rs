use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-win conversions are credited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Realized Bernoulli exposure and conversion draws.
    #[default]
    Stochastic,
    /// Exposure probability times conversion probability.
    Expected,
}

/// Log-normal law of predicted impression values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogNormalSpec {
    pub mu: f64,
    pub sigma: f64,
}

/// Synthetic auction environment. Agent 0 is the controlled advertiser.
///
/// `budgets` and `target_cpa` hold either one entry per agent or a single
/// entry shared by all agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_agents: usize,
    pub num_steps: usize,
    pub impressions_per_step: usize,
    pub budgets: Vec<f64>,
    pub target_cpa: Vec<f64>,
    pub value_distribution: LogNormalSpec,
    pub exposure_prob: f64,
    pub conversion_scaling: f64,
    pub reward_mode: RewardMode,
    /// Competitor coefficients are `level * u`, `u ~ U(lo, hi)` per competitor.
    pub competitor_coef_range: (f64, f64),
    /// Per-episode market level, log-uniform over `(lo, hi)`.
    pub market_level_range: (f64, f64),
    /// Bid coefficient of the controlled agent before its first action.
    pub initial_coefficient: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            num_agents: 8,
            num_steps: 48,
            impressions_per_step: 200,
            budgets: vec![300.0, 1e9],
            target_cpa: vec![10.0, 1e9],
            value_distribution: LogNormalSpec { mu: 0.0, sigma: 0.8 },
            exposure_prob: 0.8,
            conversion_scaling: 0.1,
            reward_mode: RewardMode::Expected,
            competitor_coef_range: (0.6, 1.0),
            market_level_range: (0.5, 2.0),
            initial_coefficient: 0.6,
            seed: 0,
        }
    }
}

fn per_agent(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else if i < v.len() {
        v[i]
    } else {
        // Two entries mean "controlled agent, everyone else".
        v[v.len() - 1]
    }
}

impl EnvConfig {
    pub fn budget(&self, agent: usize) -> f64 {
        per_agent(&self.budgets, agent)
    }

    pub fn cpa(&self, agent: usize) -> f64 {
        per_agent(&self.target_cpa, agent)
    }

    pub fn total_impressions(&self) -> usize {
        self.num_steps * self.impressions_per_step
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EnvConfig {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_agents == 0 {
            return Err(Error::config("env.num_agents", "must be at least 1"));
        }
        if self.num_steps == 0 {
            return Err(Error::config("env.num_steps", "must be at least 1"));
        }
        if self.impressions_per_step == 0 {
            return Err(Error::config("env.impressions_per_step", "must be at least 1"));
        }
        for (name, v) in [("env.budgets", &self.budgets), ("env.target_cpa", &self.target_cpa)] {
            if v.is_empty() || (v.len() > 2 && v.len() != self.num_agents) {
                return Err(Error::config(
                    name,
                    format!("expected 1, 2 or {} entries, got {}", self.num_agents, v.len()),
                ));
            }
        }
        if self.budgets.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::config("env.budgets", "budgets must be finite and non-negative"));
        }
        if self.target_cpa.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::config("env.target_cpa", "target CPA must be positive"));
        }
        if !(0.0..=1.0).contains(&self.exposure_prob) {
            return Err(Error::config("env.exposure_prob", "must lie in [0, 1]"));
        }
        if !(self.conversion_scaling > 0.0 && self.conversion_scaling.is_finite()) {
            return Err(Error::config("env.conversion_scaling", "must be positive"));
        }
        let LogNormalSpec { mu, sigma } = self.value_distribution;
        if !mu.is_finite() || !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config(
                "env.value_distribution",
                "mu must be finite and sigma finite and non-negative",
            ));
        }
        let (lo, hi) = self.competitor_coef_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("env.competitor_coef_range", "need 0 <= lo <= hi"));
        }
        let (lo, hi) = self.market_level_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("env.market_level_range", "need 0 < lo <= hi"));
        }
        if !(self.initial_coefficient >= 0.0 && self.initial_coefficient.is_finite()) {
            return Err(Error::config("env.initial_coefficient", "must be non-negative"));
        }
        Ok(())
    }

    /// Conversion probability given exposure for a predicted value.
    pub fn conversion_prob(&self, value: f64) -> f64 {
        (self.conversion_scaling * value).min(1.0)
    }
}
