//! Episode records and their JSON Lines form.
//!
//! One line per step, fields in this order:
//! `t, state, action, reward, cost, wins`, followed by `expert` and `duals`
//! on expert rollouts. Floats are written with 17 significant digits so a
//! file round-trips bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::DualMultipliers;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// State observed after the step (`s_{t+1}`).
    pub state: Vec<f64>,
    /// Change of bid coefficient that led into this step.
    pub action: f64,
    pub reward: f64,
    pub cost: f64,
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    /// Set on expert rollouts.
    pub expert: Option<DualMultipliers>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    t: usize,
    state: Vec<f64>,
    action: f64,
    reward: f64,
    cost: f64,
    wins: usize,
    #[serde(default)]
    expert: bool,
    #[serde(default)]
    duals: Option<DualMultipliers>,
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(out: &mut String, x: f64) {
    if x.is_finite() {
        let _ = write!(out, "{x:.16e}");
    } else {
        out.push_str("null");
    }
}

impl EpisodeRecord {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.cost).sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = write!(out, "{{\"t\":{},\"state\":[", s.t);
            for (i, v) in s.state.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                fmt_f64(&mut out, *v);
            }
            out.push_str("],\"action\":");
            fmt_f64(&mut out, s.action);
            out.push_str(",\"reward\":");
            fmt_f64(&mut out, s.reward);
            out.push_str(",\"cost\":");
            fmt_f64(&mut out, s.cost);
            let _ = write!(out, ",\"wins\":{}", s.wins);
            if let Some(d) = &self.expert {
                out.push_str(",\"expert\":true,\"duals\":{\"alpha_b\":");
                fmt_f64(&mut out, d.alpha_b);
                out.push_str(",\"alpha_c\":");
                fmt_f64(&mut out, d.alpha_c);
                out.push('}');
            }
            out.push_str("}\n");
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut rec = EpisodeRecord::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(line).map_err(|e| Error::Json {
                context: format!("episode record line {}", i + 1),
                source: e,
            })?;
            if l.expert {
                rec.expert = l.duals;
            }
            rec.steps.push(StepRecord {
                t: l.t,
                state: l.state,
                action: l.action,
                reward: l.reward,
                cost: l.cost,
                wins: l.wins,
            });
        }
        Ok(rec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn jsonl_round_trips_bit_exactly(
            vals in proptest::collection::vec(-1e12f64..1e12, 1..20),
            wins in 0usize..1000,
            expert in any::<bool>(),
        ) {
            let rec = EpisodeRecord {
                steps: vals.chunks(4).enumerate().map(|(t, c)| StepRecord {
                    t,
                    state: c.to_vec(),
                    action: c[0] * 1e-7,
                    reward: c[c.len() - 1].abs(),
                    cost: c[0].abs() / 3.0,
                    wins,
                }).collect(),
                expert: expert.then_some(DualMultipliers { alpha_b: 0.1 / 3.0, alpha_c: 7.0 }),
            };
            let back = EpisodeRecord::from_jsonl(&rec.to_jsonl()).unwrap();
            prop_assert_eq!(back, rec);
        }
    }

    #[test]
    fn field_order_is_stable() {
        let rec = EpisodeRecord {
            steps: vec![StepRecord { t: 3, state: vec![1.0], action: 0.5, reward: 2.0, cost: 1.0, wins: 4 }],
            expert: None,
        };
        let line = rec.to_jsonl();
        let pos: Vec<_> = ["\"t\"", "\"state\"", "\"action\"", "\"reward\"", "\"cost\"", "\"wins\""]
            .iter()
            .map(|k| line.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(line.contains("1.0000000000000000e0"));
    }
}
