//! Dual-form expert bidder.
//!
//! With the other agents held fixed, the budget- and CPA-constrained bidding
//! LP has a dual solution whose optimal primal bid is
//! `x_j = (1 + alpha_c * C) / (alpha_b + alpha_c) * v_j`. The solver searches
//! the two multipliers on a replayed impression set; rolling the resulting
//! bids through the simulator gives the expert state trajectory.

use serde::{Deserialize, Serialize};

use crate::auction::{
    competitor_coefficients, generate_impressions, realized_cpa, EnvConfig, Episode,
    EpisodeRecord, StepRecord, StepState,
};
use crate::error::{Error, Result};
use crate::par::par_map;

/// Lower bound on each multiplier; keeps `alpha_b + alpha_c` away from 0.
pub const ALPHA_FLOOR: f64 = 1e-3;
pub const ALPHA_CEIL: f64 = 1e3;
pub const GRID_POINTS: usize = 25;
pub const REL_TOL: f64 = 1e-3;
/// A constraint counts as slack below this fraction of its bound.
pub const SLACK_FRAC: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualMultipliers {
    pub alpha_b: f64,
    pub alpha_c: f64,
}

impl DualMultipliers {
    pub fn new(alpha_b: f64, alpha_c: f64) -> Result<Self> {
        if !(alpha_b >= 0.0 && alpha_c >= 0.0) {
            return Err(Error::Input(format!(
                "dual multipliers must be non-negative, got ({alpha_b}, {alpha_c})"
            )));
        }
        if alpha_b + alpha_c <= 0.0 {
            return Err(Error::DegenerateDual);
        }
        Ok(DualMultipliers { alpha_b, alpha_c })
    }

    /// Bid per unit of value at target CPA `cpa`.
    pub fn multiplier(&self, cpa: f64) -> f64 {
        (1.0 + self.alpha_c * cpa) / (self.alpha_b + self.alpha_c)
    }
}

/// Optimal primal bid for a query of value `v`.
pub fn expert_bid(v: f64, duals: &DualMultipliers, cpa: f64) -> Result<f64> {
    if duals.alpha_b + duals.alpha_c <= 0.0 {
        return Err(Error::DegenerateDual);
    }
    if !(v >= 0.0) {
        return Err(Error::Input(format!("value must be non-negative, got {v}")));
    }
    Ok(duals.multiplier(cpa) * v)
}

/// One impression seen by the controlled agent: expected conversions and the
/// highest competing bid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayItem {
    pub value: f64,
    pub price: f64,
}

/// The controlled agent's replay set for an environment, with competitors
/// bidding their episode coefficients.
pub fn replay_set(config: &EnvConfig) -> Result<Vec<ReplayItem>> {
    let imps = generate_impressions(config)?;
    let comp = competitor_coefficients(config);
    Ok(imps
        .iter()
        .map(|o| ReplayItem {
            value: config.exposure_prob * config.conversion_prob(o.values[0]),
            price: (1..config.num_agents)
                .map(|i| comp[i] * o.values[i])
                .fold(0.0, f64::max),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    pub value: f64,
    pub spend: f64,
    pub wins: usize,
}

impl Replay {
    pub fn cpa(&self) -> f64 {
        realized_cpa(self.spend, self.value)
    }
}

/// Replays bids `multiplier * value` without a budget gate. Ties go to the
/// controlled agent.
pub fn replay(items: &[ReplayItem], multiplier: f64) -> Replay {
    let mut r = Replay {
        value: 0.0,
        spend: 0.0,
        wins: 0,
    };
    for it in items {
        let bid = multiplier * it.value;
        if bid > 0.0 && bid >= it.price {
            r.value += it.value;
            r.spend += it.price;
            r.wins += 1;
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualSolution {
    pub duals: DualMultipliers,
    pub feasible: bool,
    pub replay: Replay,
}

struct Problem<'a> {
    items: &'a [ReplayItem],
    budget: f64,
    cpa: f64,
}

impl Problem<'_> {
    fn eval(&self, ab: f64, ac: f64) -> Replay {
        replay(self.items, (1.0 + ac * self.cpa) / (ab + ac))
    }

    fn feasible(&self, r: &Replay) -> bool {
        r.spend <= self.budget && r.cpa() <= self.cpa
    }

    fn violation(&self, r: &Replay) -> f64 {
        let vb = if self.budget > 0.0 {
            (r.spend - self.budget) / self.budget
        } else if r.spend > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        let vc = (r.cpa() - self.cpa) / self.cpa;
        vb.max(vc).max(0.0)
    }

    fn multiplier(&self, ab: f64, ac: f64) -> f64 {
        (1.0 + ac * self.cpa) / (ab + ac)
    }

    /// Best feasible coordinate along one axis, by log bisection between
    /// the axis end with the largest multiplier and the one with the
    /// smallest. Returns `None` when nothing on the axis is feasible.
    fn axis_search(&self, ab: f64, ac: f64, along_b: bool) -> Option<f64> {
        let at = |x: f64| if along_b { (x, ac) } else { (ab, x) };
        let kappa_at = |x: f64| {
            let (b, c) = at(x);
            self.multiplier(b, c)
        };
        let (mut good_end, mut bad_end) = if kappa_at(ALPHA_FLOOR) >= kappa_at(ALPHA_CEIL) {
            (ALPHA_CEIL, ALPHA_FLOOR)
        } else {
            (ALPHA_FLOOR, ALPHA_CEIL)
        };
        let feas = |x: f64| {
            let (b, c) = at(x);
            self.feasible(&self.eval(b, c))
        };
        // good_end: smallest multiplier; bad_end: largest.
        if feas(bad_end) {
            return Some(bad_end);
        }
        if !feas(good_end) {
            return None;
        }
        while (good_end / bad_end).ln().abs() > REL_TOL.ln_1p() {
            let mid = (good_end * bad_end).sqrt();
            if feas(mid) {
                good_end = mid;
            } else {
                bad_end = mid;
            }
        }
        Some(good_end)
    }
}

fn log_grid() -> Vec<f64> {
    let (lo, hi) = (ALPHA_FLOOR.ln(), ALPHA_CEIL.ln());
    (0..GRID_POINTS)
        .map(|i| (lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64).exp())
        .collect()
}

/// Searches the budget and CPA multipliers on a replay set.
///
/// A 25×25 log grid over `[1e-3, 1e3]²` picks the best feasible pair, which
/// coordinate bisection then pushes to the feasibility boundary. Multipliers
/// of slack constraints are pinned to the floor. When no pair is feasible the
/// pair with the smallest constraint violation is returned, flagged.
pub fn solve_duals(items: &[ReplayItem], budget: f64, cpa: f64) -> Result<DualSolution> {
    if items.is_empty() {
        return Err(Error::Input("solve_duals needs at least one impression".into()));
    }
    if !(cpa > 0.0) {
        return Err(Error::Input(format!("target CPA must be positive, got {cpa}")));
    }
    let p = Problem { items, budget, cpa };
    let grid = log_grid();
    let pairs: Vec<(f64, f64)> = grid
        .iter()
        .flat_map(|&b| grid.iter().map(move |&c| (b, c)))
        .collect();
    let evals = par_map(&pairs, |&(b, c)| p.eval(b, c));

    if budget <= 0.0 {
        let duals = DualMultipliers::new(ALPHA_CEIL, ALPHA_FLOOR)?;
        return Ok(DualSolution {
            duals,
            feasible: false,
            replay: Replay {
                value: 0.0,
                spend: 0.0,
                wins: 0,
            },
        });
    }

    let mut best: Option<(usize, &Replay)> = None;
    for (i, r) in evals.iter().enumerate() {
        if !p.feasible(r) {
            continue;
        }
        let better = match best {
            None => true,
            Some((j, rb)) => {
                r.value > rb.value
                    || (r.value == rb.value
                        && (r.spend < rb.spend
                            || (r.spend == rb.spend
                                && pairs[i].0 + pairs[i].1 < pairs[j].0 + pairs[j].1)))
            }
        };
        if better {
            best = Some((i, r));
        }
    }

    let Some((start, _)) = best else {
        let (i, r) = evals
            .iter()
            .enumerate()
            .min_by(|a, b| p.violation(a.1).total_cmp(&p.violation(b.1)))
            .expect("grid is non-empty");
        return Ok(DualSolution {
            duals: DualMultipliers::new(pairs[i].0, pairs[i].1)?,
            feasible: false,
            replay: *r,
        });
    };

    let (mut ab, mut ac) = pairs[start];
    for _ in 0..50 {
        let (pb, pc) = (ab, ac);
        if let Some(x) = p.axis_search(ab, ac, true) {
            ab = x;
        }
        if let Some(x) = p.axis_search(ab, ac, false) {
            ac = x;
        }
        if (ab / pb - 1.0).abs() < REL_TOL && (ac / pc - 1.0).abs() < REL_TOL {
            break;
        }
    }

    // Complementary slackness: a slack constraint carries a floor multiplier.
    let r = p.eval(ab, ac);
    let budget_slack = r.spend < SLACK_FRAC * budget;
    let cpa_slack = r.cpa() < SLACK_FRAC * cpa;
    if budget_slack && cpa_slack {
        let (b, c) = (ALPHA_FLOOR, ALPHA_FLOOR);
        if p.feasible(&p.eval(b, c)) {
            ab = b;
            ac = c;
        }
    } else if budget_slack && ab > ALPHA_FLOOR {
        if let Some(c) = p.axis_search(ALPHA_FLOOR, ac, false) {
            ab = ALPHA_FLOOR;
            ac = c;
        }
    } else if cpa_slack && ac > ALPHA_FLOOR {
        if let Some(b) = p.axis_search(ab, ALPHA_FLOOR, true) {
            ab = b;
            ac = ALPHA_FLOOR;
        }
    }

    Ok(DualSolution {
        duals: DualMultipliers::new(ab, ac)?,
        feasible: true,
        replay: p.eval(ab, ac),
    })
}

/// Solves the multipliers of the controlled agent for an environment seed.
pub fn solve_env(config: &EnvConfig) -> Result<DualSolution> {
    let items = replay_set(config)?;
    solve_duals(&items, config.budget(0), config.cpa(0))
}

/// Expert rollout of the controlled agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTrajectory {
    /// Post-step states `s_1..s_T`.
    pub states: Vec<StepState>,
    pub per_query_bids: Vec<f64>,
    pub realized_cost: f64,
    pub realized_value: f64,
    pub duals: DualMultipliers,
    pub record: EpisodeRecord,
}

impl ExpertTrajectory {
    pub fn state_rows(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(StepState::to_vec).collect()
    }
}

/// Plays the per-query expert bids through the simulator against the
/// episode's competitors. The reported bid coefficient of a step is the mean
/// ratio of bid to predicted value.
pub fn rollout_expert(config: &EnvConfig, duals: &DualMultipliers) -> Result<ExpertTrajectory> {
    let cpa = config.cpa(0);
    let kappa = duals.multiplier(cpa);
    if !kappa.is_finite() {
        return Err(Error::DegenerateDual);
    }
    let comp = competitor_coefficients(config);
    let mut ep = Episode::new(config)?;
    let e = config.exposure_prob;
    let expert_bid_of = |v: f64| kappa * e * config.conversion_prob(v);

    let mut states = Vec::with_capacity(config.num_steps);
    let mut bids = Vec::with_capacity(config.total_impressions());
    let mut record = EpisodeRecord {
        steps: Vec::with_capacity(config.num_steps),
        expert: Some(*duals),
    };
    let mut prev_coef = config.initial_coefficient;
    let mut cost = 0.0;
    let mut value = 0.0;
    while !ep.is_done() {
        let opps = ep.current_opportunities();
        let mut ratio_sum = 0.0;
        for o in opps {
            let b = expert_bid_of(o.values[0]);
            bids.push(b);
            ratio_sum += if o.values[0] > 0.0 { b / o.values[0] } else { 0.0 };
        }
        let coef = ratio_sum / opps.len() as f64;
        let mut coefs = comp.clone();
        coefs[0] = coef;
        let t = ep.step_index();
        let out = ep.step_with_bids(&coefs, |agent, o| {
            if agent == 0 {
                expert_bid_of(o.values[0])
            } else {
                comp[agent] * o.values[agent]
            }
        })?;
        cost += out.costs[0];
        value += out.rewards[0];
        record.steps.push(StepRecord {
            t,
            state: out.states[0].to_vec(),
            action: coef - prev_coef,
            reward: out.rewards[0],
            cost: out.costs[0],
            wins: out.wins[0],
        });
        prev_coef = coef;
        states.push(out.states[0]);
    }
    Ok(ExpertTrajectory {
        states,
        per_query_bids: bids,
        realized_cost: cost,
        realized_value: value,
        duals: *duals,
        record,
    })
}
