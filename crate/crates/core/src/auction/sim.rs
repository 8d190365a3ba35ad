use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::config::{EnvConfig, RewardMode};
use crate::error::{Error, Result};

/// Number of features in a [`StepState`].
pub const STATE_DIM: usize = 8;

/// Window (in steps) of the recent CPA feature.
const CPA_WINDOW: usize = 3;

/// Cap on the recent CPA ratio when a window has cost but no conversions.
pub const CPA_RATIO_CAP: f64 = 5.0;

/// Stream reserved for per-episode competitor draws.
const COMPETITOR_STREAM: u64 = u64::MAX;

/// One auction slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionOpportunity {
    pub step: usize,
    pub values: Vec<f64>,
    pub exposed: Vec<bool>,
    pub converted: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub winner: Option<usize>,
    pub payment: f64,
    pub winning_bid: f64,
}

/// Per-agent observation after a step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepState {
    pub bid_coefficient: f64,
    pub remaining_budget_frac: f64,
    pub remaining_traffic_frac: f64,
    pub cumulative_consumption: f64,
    pub cumulative_revenue: f64,
    pub time_frac: f64,
    pub recent_win_rate: f64,
    pub recent_cpa_ratio: f64,
}

impl StepState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.bid_coefficient,
            self.remaining_budget_frac,
            self.remaining_traffic_frac,
            self.cumulative_consumption,
            self.cumulative_revenue,
            self.time_frac,
            self.recent_win_rate,
            self.recent_cpa_ratio,
        ]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::shape(
                "step_state",
                format!("expected {STATE_DIM} features, got {}", v.len()),
            ));
        }
        Ok(StepState {
            bid_coefficient: v[0],
            remaining_budget_frac: v[1],
            remaining_traffic_frac: v[2],
            cumulative_consumption: v[3],
            cumulative_revenue: v[4],
            time_frac: v[5],
            recent_win_rate: v[6],
            recent_cpa_ratio: v[7],
        })
    }

    /// State before the first step of an episode.
    pub fn initial(coefficient: f64) -> Self {
        StepState {
            bid_coefficient: coefficient,
            remaining_budget_frac: 1.0,
            remaining_traffic_frac: 1.0,
            ..StepState::default()
        }
    }
}

/// The ordered impression stream of an episode.
pub fn generate_impressions(config: &EnvConfig) -> Result<Vec<ImpressionOpportunity>> {
    config.validate()?;
    let dist = LogNormal::new(config.value_distribution.mu, config.value_distribution.sigma)
        .map_err(|e| Error::config("env.value_distribution", e.to_string()))?;
    let n = config.num_agents;
    let mut out = Vec::with_capacity(config.total_impressions());
    for j in 0..config.total_impressions() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(j as u64);
        let mut values = Vec::with_capacity(n);
        let mut exposed = Vec::with_capacity(n);
        let mut converted = Vec::with_capacity(n);
        for _ in 0..n {
            let v: f64 = dist.sample(&mut rng);
            let ue: f64 = rng.random();
            let uc: f64 = rng.random();
            values.push(v);
            exposed.push(ue < config.exposure_prob);
            converted.push(uc < config.conversion_prob(v));
        }
        out.push(ImpressionOpportunity {
            step: j / config.impressions_per_step,
            values,
            exposed,
            converted,
        });
    }
    Ok(out)
}

/// Constant bid coefficients of agents `1..n` for this episode's seed.
/// Entry 0 is a placeholder for the controlled agent.
pub fn competitor_coefficients(config: &EnvConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(COMPETITOR_STREAM);
    let (llo, lhi) = config.market_level_range;
    let level = if lhi > llo {
        (llo.ln() + rng.random::<f64>() * (lhi.ln() - llo.ln())).exp()
    } else {
        llo
    };
    let (lo, hi) = config.competitor_coef_range;
    let mut out = vec![0.0];
    for _ in 1..config.num_agents {
        let u = if hi > lo { rng.random_range(lo..hi) } else { lo };
        out.push(level * u);
    }
    out
}

/// Single-slot second-price auction; ties go to the lowest agent index.
pub fn run_auction(bids: &[f64]) -> Result<AuctionOutcome> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = 0.0f64;
    for (i, &b) in bids.iter().enumerate() {
        if b.is_nan() || b.is_infinite() {
            return Err(Error::Input(format!("bid of agent {i} is {b}")));
        }
        match best {
            Some((_, bb)) if b > bb => {
                second = second.max(bb);
                best = Some((i, b));
            }
            Some(_) => second = second.max(b),
            None if b > 0.0 => best = Some((i, b)),
            None => {}
        }
    }
    Ok(match best {
        Some((w, b)) => AuctionOutcome {
            winner: Some(w),
            payment: second.max(0.0),
            winning_bid: b,
        },
        None => AuctionOutcome {
            winner: None,
            payment: 0.0,
            winning_bid: 0.0,
        },
    })
}

/// Result of one environment step, indexed by agent.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub states: Vec<StepState>,
    pub rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub wins: Vec<usize>,
}

/// Running episode of the synthetic market.
#[derive(Debug, Clone)]
pub struct Episode {
    config: EnvConfig,
    impressions: Vec<ImpressionOpportunity>,
    step: usize,
    spent: Vec<f64>,
    conversions: Vec<f64>,
    recent: Vec<VecDeque<(f64, f64)>>,
    states: Vec<StepState>,
}

impl Episode {
    pub fn new(config: &EnvConfig) -> Result<Self> {
        let impressions = generate_impressions(config)?;
        Ok(Self::with_impressions(config, impressions))
    }

    pub fn with_impressions(config: &EnvConfig, impressions: Vec<ImpressionOpportunity>) -> Self {
        let n = config.num_agents;
        Episode {
            config: config.clone(),
            impressions,
            step: 0,
            spent: vec![0.0; n],
            conversions: vec![0.0; n],
            recent: vec![VecDeque::with_capacity(CPA_WINDOW); n],
            states: vec![StepState::initial(config.initial_coefficient); n],
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn impressions(&self) -> &[ImpressionOpportunity] {
        &self.impressions
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.num_steps
    }

    pub fn states(&self) -> &[StepState] {
        &self.states
    }

    pub fn remaining_budget(&self, agent: usize) -> f64 {
        self.config.budget(agent) - self.spent[agent]
    }

    /// Opportunities auctioned in the current step.
    pub fn current_opportunities(&self) -> &[ImpressionOpportunity] {
        let k = self.config.impressions_per_step;
        let s = self.step.min(self.config.num_steps);
        &self.impressions[s * k..((s + 1) * k).min(self.impressions.len())]
    }

    /// Plays one step with bids `coefficient[i] * v_ij`.
    pub fn step_episode(&mut self, coefficients: &[f64]) -> Result<StepOutcome> {
        if coefficients.len() != self.config.num_agents {
            return Err(Error::Input(format!(
                "expected {} coefficients, got {}",
                self.config.num_agents,
                coefficients.len()
            )));
        }
        if let Some((i, c)) = coefficients
            .iter()
            .enumerate()
            .find(|(_, c)| !(**c >= 0.0 && c.is_finite()))
        {
            return Err(Error::Input(format!("coefficient of agent {i} is {c}")));
        }
        let coefs = coefficients.to_vec();
        self.step_with_bids(&coefs, |agent, opp| coefs[agent] * opp.values[agent])
    }

    /// Plays one step with arbitrary per-opportunity bids; `coefficients` is
    /// what gets reported as each agent's bid coefficient.
    pub fn step_with_bids<F>(&mut self, coefficients: &[f64], bid: F) -> Result<StepOutcome>
    where
        F: Fn(usize, &ImpressionOpportunity) -> f64,
    {
        if self.is_done() {
            return Err(Error::State("episode already terminated".into()));
        }
        let n = self.config.num_agents;
        let k = self.config.impressions_per_step;
        let start = self.step * k;
        let mut rewards = vec![0.0; n];
        let mut costs = vec![0.0; n];
        let mut wins = vec![0usize; n];
        let mut bids = vec![0.0; n];
        for opp in &self.impressions[start..start + k] {
            for (i, b) in bids.iter_mut().enumerate() {
                let raw = bid(i, opp);
                if raw.is_nan() || raw < 0.0 {
                    return Err(Error::Input(format!("bid of agent {i} is {raw}")));
                }
                let remaining = self.config.budget(i) - self.spent[i] - costs[i];
                *b = if remaining < raw { 0.0 } else { raw };
            }
            let outcome = run_auction(&bids)?;
            if let Some(w) = outcome.winner {
                costs[w] += outcome.payment;
                wins[w] += 1;
                rewards[w] += match self.config.reward_mode {
                    RewardMode::Stochastic => {
                        f64::from(u8::from(opp.exposed[w] && opp.converted[w]))
                    }
                    RewardMode::Expected => {
                        self.config.exposure_prob * self.config.conversion_prob(opp.values[w])
                    }
                };
            }
        }
        self.step += 1;
        let t = self.step;
        let big_t = self.config.num_steps;
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            self.spent[i] += costs[i];
            self.conversions[i] += rewards[i];
            let window = &mut self.recent[i];
            if window.len() == CPA_WINDOW {
                window.pop_front();
            }
            window.push_back((costs[i], rewards[i]));
            let (wc, wr) = window
                .iter()
                .fold((0.0, 0.0), |(c, r), (dc, dr)| (c + dc, r + dr));
            let cpa_ratio = if wr > 0.0 {
                (wc / wr / self.config.cpa(i)).min(CPA_RATIO_CAP)
            } else if wc > 0.0 {
                CPA_RATIO_CAP
            } else {
                0.0
            };
            let budget = self.config.budget(i);
            let state = StepState {
                bid_coefficient: coefficients[i],
                remaining_budget_frac: if budget > 0.0 {
                    ((budget - self.spent[i]) / budget).clamp(0.0, 1.0)
                } else {
                    0.0
                },
                remaining_traffic_frac: (big_t - t) as f64 / big_t as f64,
                cumulative_consumption: self.spent[i],
                cumulative_revenue: self.conversions[i],
                time_frac: t as f64 / big_t as f64,
                recent_win_rate: wins[i] as f64 / k as f64,
                recent_cpa_ratio: cpa_ratio,
            };
            states.push(state);
        }
        self.states = states.clone();
        Ok(StepOutcome {
            states,
            rewards,
            costs,
            wins,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::config::LogNormalSpec;

    fn small(agents: usize, steps: usize, per_step: usize, seed: u64) -> EnvConfig {
        EnvConfig {
            num_agents: agents,
            num_steps: steps,
            impressions_per_step: per_step,
            seed,
            ..EnvConfig::default()
        }
    }

    #[test]
    fn stream_has_expected_count_and_nonnegative_values() {
        let imps = generate_impressions(&small(2, 2, 3, 7)).unwrap();
        assert_eq!(imps.len(), 6);
        assert!(imps.iter().all(|o| o.values.iter().all(|&v| v >= 0.0)));
        assert_eq!(imps[5].step, 1);
    }

    #[test]
    fn stream_is_deterministic() {
        let c = small(3, 4, 5, 11);
        assert_eq!(generate_impressions(&c).unwrap(), generate_impressions(&c).unwrap());
        let other = generate_impressions(&c.with_seed(12)).unwrap();
        assert_ne!(generate_impressions(&c).unwrap(), other);
    }

    #[test]
    fn degenerate_lognormal_gives_unit_values() {
        let mut c = small(2, 2, 3, 1);
        c.value_distribution = LogNormalSpec { mu: 0.0, sigma: 0.0 };
        let imps = generate_impressions(&c).unwrap();
        assert!(imps.iter().all(|o| o.values.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn invalid_distribution_is_config_error() {
        let mut c = small(2, 2, 3, 1);
        c.value_distribution.sigma = -1.0;
        assert!(generate_impressions(&c).unwrap_err().is_config());
    }

    #[test]
    fn second_price_examples() {
        let o = run_auction(&[5.0, 3.0, 2.0]).unwrap();
        assert_eq!((o.winner, o.payment), (Some(0), 3.0));
        let o = run_auction(&[4.0, 4.0, 1.0]).unwrap();
        assert_eq!((o.winner, o.payment), (Some(0), 4.0));
        let o = run_auction(&[0.0, 0.0]).unwrap();
        assert_eq!((o.winner, o.payment), (None, 0.0));
        let o = run_auction(&[1.0, 7.0, 7.0]).unwrap();
        assert_eq!((o.winner, o.payment), (Some(1), 7.0));
        assert!(run_auction(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn lone_bidder_pays_nothing() {
        let mut c = small(1, 1, 1, 3);
        c.budgets = vec![100.0];
        let mut ep = Episode::new(&c).unwrap();
        let out = ep.step_with_bids(&[1.0], |_, _| 5.0).unwrap();
        assert_eq!(out.wins[0], 1);
        assert_eq!(out.costs[0], 0.0);
    }

    #[test]
    fn zero_coefficient_never_bids() {
        let c = small(1, 3, 10, 3);
        let mut ep = Episode::new(&c).unwrap();
        while !ep.is_done() {
            let out = ep.step_episode(&[0.0]).unwrap();
            assert_eq!((out.rewards[0], out.costs[0], out.wins[0]), (0.0, 0.0, 0));
        }
        assert!(ep.step_episode(&[0.0]).is_err());
    }

    #[test]
    fn budget_is_never_exceeded() {
        let mut c = small(3, 10, 50, 5);
        c.budgets = vec![2.0, 1e9];
        let comp = competitor_coefficients(&c);
        let mut ep = Episode::new(&c).unwrap();
        let mut spent = 0.0;
        while !ep.is_done() {
            let mut coefs = comp.clone();
            coefs[0] = 1.5;
            spent += ep.step_episode(&coefs).unwrap().costs[0];
            assert!(spent <= 2.0);
        }
        assert!(spent > 0.0);
    }

    #[test]
    fn exhausted_budget_costs_nothing() {
        let mut c = small(3, 4, 50, 5);
        c.budgets = vec![0.0, 1e9];
        let mut coefs = competitor_coefficients(&c);
        coefs[0] = 50.0;
        let mut ep = Episode::new(&c).unwrap();
        while !ep.is_done() {
            let out = ep.step_episode(&coefs).unwrap();
            assert_eq!((out.costs[0], out.wins[0]), (0.0, 0));
        }
    }

    #[test]
    fn negative_coefficient_rejected() {
        let c = small(2, 1, 1, 0);
        let mut ep = Episode::new(&c).unwrap();
        assert!(matches!(ep.step_episode(&[-1.0, 0.5]), Err(Error::Input(_))));
    }
}
