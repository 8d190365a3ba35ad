use serde::{Deserialize, Serialize};

use super::record::EpisodeRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub lambda: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { lambda: 2.0 }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("score.lambda", "must be positive"));
        }
        Ok(())
    }
}

/// Realized cost per conversion. Zero conversions give 0 without spend and
/// infinity with spend.
pub fn realized_cpa(cost: f64, conversions: f64) -> f64 {
    if conversions > 0.0 {
        cost / conversions
    } else if cost > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// `min((cpa_target / realized)^lambda, 1)`.
pub fn penalty(cpa_target: f64, realized: f64, lambda: f64) -> Result<f64> {
    if !(cpa_target > 0.0) {
        return Err(Error::Input(format!("target CPA must be positive, got {cpa_target}")));
    }
    if realized.is_nan() || realized < 0.0 {
        return Err(Error::Input(format!("realized CPA is {realized}")));
    }
    if realized == 0.0 {
        return Ok(1.0);
    }
    if realized.is_infinite() {
        return Ok(0.0);
    }
    Ok((cpa_target / realized).powf(lambda).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub conversions: f64,
    pub cost: f64,
    pub realized_cpa: f64,
    pub penalty: f64,
    pub score: f64,
}

/// Penalized conversions from running totals.
pub fn score_totals(
    conversions: f64,
    cost: f64,
    cpa_target: f64,
    config: &ScoreConfig,
) -> Result<ScoreBreakdown> {
    config.validate()?;
    let c = realized_cpa(cost, conversions);
    let p = penalty(cpa_target, c, config.lambda)?;
    Ok(ScoreBreakdown {
        conversions,
        cost,
        realized_cpa: c,
        penalty: p,
        score: p * conversions,
    })
}

/// Score of the controlled agent over a completed episode record.
pub fn compute_score(
    record: &EpisodeRecord,
    cpa_target: f64,
    config: &ScoreConfig,
) -> Result<ScoreBreakdown> {
    let conversions: f64 = record.steps.iter().map(|s| s.reward).sum();
    let cost: f64 = record.steps.iter().map(|s| s.cost).sum();
    score_totals(conversions, cost, cpa_target, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::record::StepRecord;

    fn record(rewards: &[f64], costs: &[f64]) -> EpisodeRecord {
        EpisodeRecord {
            steps: rewards
                .iter()
                .zip(costs)
                .enumerate()
                .map(|(t, (&r, &c))| StepRecord {
                    t,
                    state: vec![0.0; 8],
                    action: 0.0,
                    reward: r,
                    cost: c,
                    wins: 0,
                })
                .collect(),
            expert: None,
        }
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty(6.0, 12.0, 2.0).unwrap(), 0.25);
        assert_eq!(penalty(10.0, 5.0, 2.0).unwrap(), 1.0);
        assert_eq!(penalty(10.0, 10.0, 2.0).unwrap(), 1.0);
        assert_eq!(penalty(10.0, f64::INFINITY, 2.0).unwrap(), 0.0);
        assert_eq!(penalty(10.0, 0.0, 2.0).unwrap(), 1.0);
        assert!(penalty(0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn score_examples() {
        let cfg = ScoreConfig::default();
        let s = compute_score(&record(&[1.0, 3.0], &[4.0, 4.0]), 2.0, &cfg).unwrap();
        assert_eq!((s.realized_cpa, s.penalty, s.score), (2.0, 1.0, 4.0));
        let s = compute_score(&record(&[2.0, 2.0], &[10.0, 6.0]), 2.0, &cfg).unwrap();
        assert_eq!((s.realized_cpa, s.penalty, s.score), (4.0, 0.25, 1.0));
        let s = compute_score(&record(&[0.0], &[5.0]), 2.0, &cfg).unwrap();
        assert_eq!(s.score, 0.0);
        let s = compute_score(&record(&[0.0], &[0.0]), 2.0, &cfg).unwrap();
        assert_eq!(s.score, 0.0);
    }
}
