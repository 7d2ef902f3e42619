//! Feedback decision policy on top of the scoring network.
//!
//! The network maps a UE's local observation to a scalar score `c`. A
//! sharpened sigmoid `p = sigm(gamma * c)` turns the score into a feedback
//! probability. Decisions are taken either deterministically (`a = 1` iff
//! `c >= 0`, trained through a straight-through estimator) or stochastically
//! (`a ~ Bernoulli(p)`, trained with the score-function gradient).

use crate::mimo::ChannelVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor/ceiling applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Default sigmoid sharpness.
pub const DEFAULT_GAMMA: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("scheduling weight required for a PF-aware policy")]
    MissingWeight,
}

/// What the UE observes locally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// interleaved real/imag parts of the full channel vector
    FullCsi,
    /// channel norm only
    Cqi,
}

impl InputMode {
    pub fn feature_len(&self, n_antennas: usize) -> usize {
        match self {
            InputMode::FullCsi => 2 * n_antennas,
            InputMode::Cqi => 1,
        }
    }
}

/// One UE's feedback decision together with the quantities training needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackDecision {
    pub score: f64,
    pub prob: f64,
    pub feed_back: bool,
}

/// Real feature vector for the scoring network, scaled so typical channel
/// magnitudes are order one. `feature_scale` is `1 / median ||h||` over the
/// training pool and is frozen into the checkpoint.
pub fn featurize(channel: &ChannelVector, mode: InputMode, feature_scale: f64) -> Vec<f64> {
    match mode {
        InputMode::FullCsi => {
            let mut f = Vec::with_capacity(2 * channel.entries.len());
            for e in &channel.entries {
                f.push(e.re * feature_scale);
                f.push(e.im * feature_scale);
            }
            f
        }
        InputMode::Cqi => vec![channel.norm() * feature_scale],
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Feedback probability `p = sigm(gamma * c)`.
pub fn feedback_prob(score: f64, gamma: f64) -> f64 {
    sigmoid(gamma * score)
}

/// Hard threshold used at deployment and inside direct optimization:
/// feed back iff the score is non-negative.
pub fn decide_deterministic(score: f64, gamma: f64) -> FeedbackDecision {
    FeedbackDecision {
        score,
        prob: feedback_prob(score, gamma),
        feed_back: score >= 0.0,
    }
}

/// Bernoulli draw from the sharpened sigmoid.
pub fn decide_stochastic(score: f64, gamma: f64, rng: &mut (impl Rng + ?Sized)) -> FeedbackDecision {
    let prob = feedback_prob(score, gamma);
    FeedbackDecision {
        score,
        prob,
        feed_back: rng.gen::<f64>() < prob,
    }
}

/// Straight-through surrogate derivative `d a / d c ~= gamma p (1 - p)`.
pub fn ste_derivative(score: f64, gamma: f64) -> f64 {
    let p = feedback_prob(score, gamma);
    gamma * p * (1.0 - p)
}

/// Log-probability of one action under `Bernoulli(p)`, with `p` clamped away
/// from 0 and 1 for numerical safety.
pub fn log_prob(feed_back: bool, prob: f64) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if feed_back {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// `d log Pr(a | c) / d c = (a - p) * gamma`.
pub fn grad_log_prob_wrt_score(feed_back: bool, prob: f64, gamma: f64) -> f64 {
    let a = if feed_back { 1.0 } else { 0.0 };
    (a - prob) * gamma
}
