//! Synthetic second-price auction market and the penalized conversion score.

mod config;
mod record;
mod score;
mod sim;

pub use config::{EnvConfig, LogNormalSpec, RewardMode};
pub use record::{fmt_f64, EpisodeRecord, StepRecord};
pub use score::{compute_score, penalty, realized_cpa, score_totals, ScoreBreakdown, ScoreConfig};
pub use sim::{
    competitor_coefficients, generate_impressions, run_auction, AuctionOutcome, Episode,
    ImpressionOpportunity, StepOutcome, StepState, CPA_RATIO_CAP, STATE_DIM,
};
