//! Primal-dual constrained training of the self-nomination network.
//!
//! Each mini-batch runs the full pipeline (featurize, score, decide,
//! schedule, zero-force, rate) and takes one gradient step on the network
//! followed by one projected ascent step on the dual variable, which prices
//! the average feedback budget. Two primal methods are supported: direct
//! optimization through a straight-through estimator with selective gradient
//! propagation, and a REINFORCE-style Bernoulli policy gradient.

use crate::channel::{domain, stream_rng, Dataset};
use crate::micronet::{
    cqi_spec, full_csi_spec, sgd_step, Batch, Direction, Mode, NetError, Network,
};
use crate::mimo::{self, ChannelVector, MimoError};
use crate::policy::{
    decide_deterministic, decide_stochastic, featurize, grad_log_prob_wrt_score, ste_derivative,
    FeedbackDecision, InputMode,
};
use crate::scheduling::{opportunistic_schedule, pf_schedule, random_schedule, Schedule};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMethod {
    /// straight-through estimator with selective gradient propagation
    DirectOpt,
    /// Bernoulli policy gradient (score function estimator)
    PolicyGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScheduler {
    Random,
    Opportunistic,
    /// greedy weighted sum-rate over the fed-back set; with weight sampling
    /// enabled this matches the scheduler seen at proportional-fair deployment
    Pf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// average feedback budget N_FB (expected nominations per set)
    pub n_fb: f64,
    /// scheduling limit M
    pub m_max: usize,
    /// UEs per channel set
    pub total_ues: usize,
    pub method: TrainMethod,
    pub scheduler: TrainScheduler,
    pub input_mode: InputMode,
    /// train with per-UE weights drawn uniformly from [0,1] and a weight
    /// branch in the network, for later proportional-fair deployment
    pub pf_training: bool,
    /// primal learning rate
    pub alpha_p: f64,
    /// dual learning rate
    pub alpha_d: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// sigmoid sharpness
    pub gamma: f64,
    /// total transmit power P
    pub total_power: f64,
    /// noise power
    pub sigma2: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.n_fb <= 0.0 || self.alpha_p <= 0.0 || self.alpha_d <= 0.0 {
            return Err(TrainError::ConfigMismatch(
                "n_fb, alpha_p and alpha_d must be positive".into(),
            ));
        }
        if self.m_max > self.total_ues || self.m_max == 0 {
            return Err(TrainError::ConfigMismatch(
                "m_max must be in 1..=total_ues".into(),
            ));
        }
        if self.batch_size < 1 || self.epochs > 100_000 {
            return Err(TrainError::ConfigMismatch("bad batch_size/epochs".into()));
        }
        Ok(())
    }
}

/// One per-batch metrics record, written as a CSV row by the driver.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub epoch: usize,
    pub batch: usize,
    pub rate_term: f64,
    pub mean_feedback_count: f64,
    pub lambda: f64,
    /// recorded as 0 so reruns stay byte-identical; see the driver docs
    pub wall_time_ms: u64,
}

/// Network parameters, the dual variable, and the training trace.
pub struct TrainerState {
    pub net: Network,
    pub lambda: f64,
    pub epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub feature_scale: f64,
    /// samples whose scheduled set went rank deficient (rate scored 0)
    pub rank_deficient_samples: usize,
    pub total_samples: usize,
}

/// Lagrangian pieces for one batch: `rate_term` is the batch-mean weighted
/// sum-rate over scheduled users, `constraint_term` the batch-mean excess of
/// nominations over the budget, and the value assembles the minimization
/// objective `-rate_term + lambda * constraint_term`.
pub fn lagrangian_terms(
    sample_rates: &[f64],
    sample_counts: &[usize],
    lambda: f64,
    n_fb: f64,
) -> (f64, f64, f64) {
    assert_eq!(sample_rates.len(), sample_counts.len());
    let b = sample_rates.len().max(1) as f64;
    let rate_term = sample_rates.iter().sum::<f64>() / b;
    let constraint_term = sample_counts.iter().sum::<usize>() as f64 / b - n_fb;
    (rate_term, constraint_term, -rate_term + lambda * constraint_term)
}

/// Projected dual ascent: `lambda <- max(0, lambda + alpha_d * violation)`.
pub fn dual_step(lambda: f64, batch_constraint_term: f64, alpha_d: f64) -> f64 {
    assert!(alpha_d > 0.0);
    (lambda + alpha_d * batch_constraint_term).max(0.0)
}

/// Scores one channel set and returns per-UE decisions, deterministic when
/// `rng` is absent and sampled otherwise. The network must be in eval mode
/// unless part of a larger training batch.
pub fn decide_set(
    net: &mut Network,
    input_mode: InputMode,
    feature_scale: f64,
    gamma: f64,
    channels: &[&ChannelVector],
    weights: Option<&[f64]>,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<FeedbackDecision>, NetError> {
    let rows: Vec<Vec<f64>> = channels
        .iter()
        .map(|ch| featurize(ch, input_mode, feature_scale))
        .collect();
    let x = Batch::from_rows(rows);
    let w = weights.map(|ws| Batch::from_rows(ws.iter().map(|&v| vec![v]).collect()));
    let (scores, _) = net.forward_batch(&x, w.as_ref())?;
    Ok(scores
        .into_iter()
        .map(|c| match rng.as_deref_mut() {
            Some(r) => decide_stochastic(c, gamma, r),
            None => decide_deterministic(c, gamma),
        })
        .collect())
}

/// Per-user weighted rates of a scheduled set; rank-deficient sets score 0.
fn scheduled_rates(
    channels: &[&ChannelVector],
    schedule: &Schedule,
    weights: &[f64],
    total_power: f64,
    sigma2: f64,
) -> (Vec<(usize, f64)>, bool) {
    if schedule.selected.is_empty() {
        return (Vec::new(), false);
    }
    let positions: Vec<usize> = schedule
        .selected
        .iter()
        .map(|&id| {
            channels
                .iter()
                .position(|c| c.ue_id == id)
                .expect("scheduled id not in set")
        })
        .collect();
    let rows: Vec<Vec<num_complex::Complex64>> = positions
        .iter()
        .map(|&p| channels[p].entries.clone())
        .collect();
    let w: Vec<f64> = positions.iter().map(|&p| weights[p]).collect();
    match mimo::zf_precoder(&rows, total_power) {
        Ok(f) => {
            let report = mimo::compute_rates(&rows, &f, sigma2, &w);
            (
                positions
                    .iter()
                    .zip(&report.spectral_efficiency)
                    .zip(&w)
                    .map(|((&p, &r), &wk)| (p, wk * r))
                    .collect(),
                false,
            )
        }
        Err(MimoError::RankDeficient { .. }) => (Vec::new(), true),
        Err(e) => panic!("unexpected mimo error: {e}"),
    }
}

fn schedule_feedback_set<'a>(
    config: &TrainConfig,
    channels: &[&'a ChannelVector],
    decisions: &[FeedbackDecision],
    weights: &[f64],
    rng: &mut impl Rng,
) -> Schedule {
    let mut fed: Vec<&ChannelVector> = Vec::new();
    let mut fed_weights: Vec<f64> = Vec::new();
    for ((c, d), &w) in channels.iter().zip(decisions).zip(weights) {
        if d.feed_back {
            fed.push(c);
            fed_weights.push(w);
        }
    }
    match config.scheduler {
        TrainScheduler::Random => {
            let ids: Vec<usize> = fed.iter().map(|c| c.ue_id).collect();
            random_schedule(&ids, config.m_max, rng)
        }
        TrainScheduler::Opportunistic => opportunistic_schedule(&fed, config.m_max),
        TrainScheduler::Pf => pf_schedule(
            &fed,
            config.m_max,
            &fed_weights,
            config.total_power,
            config.sigma2,
        ),
    }
}

struct BatchOutcome {
    rate_term: f64,
    constraint_term: f64,
    mean_feedback_count: f64,
    rank_deficient: usize,
}

/// One primal step over a batch of channel sets, followed by nothing; the
/// caller runs the dual step on the returned constraint term.
fn primal_step(
    state: &mut TrainerState,
    sets: &[Vec<&ChannelVector>],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<BatchOutcome, TrainError> {
    let b = sets.len();
    let k = config.total_ues;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(b * k);
    let mut weights: Vec<f64> = Vec::with_capacity(b * k);
    for set in sets {
        for ch in set {
            rows.push(featurize(ch, config.input_mode, state.feature_scale));
        }
        for _ in 0..k {
            weights.push(if config.pf_training { rng.gen::<f64>() } else { 1.0 });
        }
    }
    let x = Batch::from_rows(rows);
    let w_batch = config
        .pf_training
        .then(|| Batch::from_rows(weights.iter().map(|&v| vec![v]).collect()));
    state.net.set_mode(Mode::Train);
    let (scores, cache) = state.net.forward_batch(&x, w_batch.as_ref())?;

    let mut decisions: Vec<FeedbackDecision> = Vec::with_capacity(b * k);
    for &c in &scores {
        decisions.push(match config.method {
            TrainMethod::DirectOpt => decide_deterministic(c, config.gamma),
            TrainMethod::PolicyGradient => decide_stochastic(c, config.gamma, rng),
        });
    }

    let mut upstream = vec![0.0; b * k];
    let mut sample_rates = Vec::with_capacity(b);
    let mut sample_counts = Vec::with_capacity(b);
    let mut rank_deficient = 0usize;
    for (s, set) in sets.iter().enumerate() {
        let dslice = &decisions[s * k..(s + 1) * k];
        let wslice = &weights[s * k..(s + 1) * k];
        let schedule = schedule_feedback_set(config, set, dslice, wslice, rng);
        let (per_user, deficient) =
            scheduled_rates(set, &schedule, wslice, config.total_power, config.sigma2);
        if deficient {
            rank_deficient += 1;
        }
        let rate: f64 = per_user.iter().map(|(_, r)| r).sum();
        let count = dslice.iter().filter(|d| d.feed_back).count();
        sample_rates.push(rate);
        sample_counts.push(count);

        match config.method {
            TrainMethod::DirectOpt => {
                // d/dc of [-rate + lambda * count] / B through the STE, with
                // the rate term flowing only into scheduled users
                let mut scheduled_rate = vec![0.0; k];
                for &(pos, wr) in &per_user {
                    scheduled_rate[pos] = wr;
                }
                for j in 0..k {
                    let c = dslice[j].score;
                    upstream[s * k + j] = (-scheduled_rate[j] + state.lambda)
                        * ste_derivative(c, config.gamma)
                        / b as f64;
                }
            }
            TrainMethod::PolicyGradient => {
                // ascend on score * grad log-probability of the joint action
                let score_val = rate - state.lambda * (count as f64 - config.n_fb);
                for j in 0..k {
                    let d = dslice[j];
                    upstream[s * k + j] = score_val
                        * grad_log_prob_wrt_score(d.feed_back, d.prob, config.gamma)
                        / b as f64;
                }
            }
        }
    }

    let grad = state.net.backward(&cache, &upstream)?;
    let direction = match config.method {
        TrainMethod::DirectOpt => Direction::Descend,
        TrainMethod::PolicyGradient => Direction::Ascend,
    };
    sgd_step(&mut state.net.params, &grad, config.alpha_p, direction);

    let (rate_term, constraint_term, _) =
        lagrangian_terms(&sample_rates, &sample_counts, state.lambda, config.n_fb);
    Ok(BatchOutcome {
        rate_term,
        constraint_term,
        mean_feedback_count: constraint_term + config.n_fb,
        rank_deficient,
    })
}

pub fn network_spec_for(config: &TrainConfig, n_antennas: usize) -> crate::micronet::NetSpec {
    match config.input_mode {
        InputMode::FullCsi => full_csi_spec(n_antennas, config.pf_training),
        InputMode::Cqi => cqi_spec(config.pf_training),
    }
}

/// Runs the alternating primal/dual loop over the training split.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainerState, TrainError> {
    train_from(config, dataset, None)
}

/// As `train`, but optionally resuming from an existing network and dual
/// variable (checkpoint continuation).
pub fn train_from(
    config: &TrainConfig,
    dataset: &Dataset,
    resume: Option<(Network, f64)>,
) -> Result<TrainerState, TrainError> {
    config.validate()?;
    if dataset.users_per_set() != config.total_ues {
        return Err(TrainError::ConfigMismatch(format!(
            "dataset has {} users per set, config expects {}",
            dataset.users_per_set(),
            config.total_ues
        )));
    }
    let median = dataset.median_channel_norm();
    let feature_scale = if median > 0.0 { 1.0 / median } else { 1.0 };
    let (net, lambda0) = match resume {
        Some((mut net, lambda)) => {
            let expected = network_spec_for(config, dataset.n);
            if net.spec != expected {
                return Err(TrainError::ConfigMismatch(
                    "resume checkpoint architecture does not match config".into(),
                ));
            }
            net.set_mode(Mode::Train);
            (net, lambda)
        }
        None => (
            Network::init(network_spec_for(config, dataset.n), config.seed),
            0.0,
        ),
    };
    let mut state = TrainerState {
        net,
        lambda: lambda0,
        epoch: 0,
        metrics: Vec::new(),
        feature_scale,
        rank_deficient_samples: 0,
        total_samples: 0,
    };
    let mut rng = stream_rng(config.seed, domain::TRAIN, 0);
    let train_sets = dataset.train_sets();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_sets.len()).collect();
        order.shuffle(&mut rng);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < config.batch_size {
                continue; // drop the ragged tail so batch statistics are uniform
            }
            let sets: Vec<Vec<&ChannelVector>> = chunk
                .iter()
                .map(|&i| dataset.set_channels(&train_sets[i]))
                .collect();
            let outcome = primal_step(&mut state, &sets, config, &mut rng)?;
            state.lambda = dual_step(state.lambda, outcome.constraint_term, config.alpha_d);
            state.rank_deficient_samples += outcome.rank_deficient;
            state.total_samples += chunk.len();
            state.metrics.push(MetricsRow {
                epoch,
                batch: batch_idx,
                rate_term: outcome.rate_term,
                mean_feedback_count: outcome.mean_feedback_count,
                lambda: state.lambda,
                wall_time_ms: 0,
            });
        }
        state.epoch = epoch + 1;
    }
    if config.epochs > 0 {
        refresh_running_stats(&mut state, config, dataset);
    }
    Ok(state)
}

/// Forward-only passes with frozen parameters so the batch-norm running
/// statistics match the final network instead of trailing the training
/// trajectory; without this, eval-mode scores shift systematically relative
/// to the train-mode scores the dual variable equilibrated against.
fn refresh_running_stats(state: &mut TrainerState, config: &TrainConfig, dataset: &Dataset) {
    state.net.set_mode(Mode::Train);
    let mut rng = stream_rng(config.seed, domain::TRAIN, 1);
    let train_sets = dataset.train_sets();
    for chunk in train_sets.chunks(config.batch_size).take(100) {
        if chunk.len() < 2 {
            continue;
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(chunk.len() * config.total_ues);
        let mut weights: Vec<f64> = Vec::new();
        for set in chunk {
            for ch in dataset.set_channels(set) {
                rows.push(featurize(ch, config.input_mode, state.feature_scale));
                if config.pf_training {
                    weights.push(rng.gen::<f64>());
                }
            }
        }
        let x = Batch::from_rows(rows);
        let w = config
            .pf_training
            .then(|| Batch::from_rows(weights.iter().map(|&v| vec![v]).collect()));
        let _ = state.net.forward_batch(&x, w.as_ref());
    }
    state.net.set_mode(Mode::Eval);
}

/// Mean feedback count of a trained network over held-out sets, using the
/// method's deployment decision rule (hard threshold for direct
/// optimization, seeded sampling for policy gradient).
pub fn mean_feedback_count(
    state: &mut TrainerState,
    config: &TrainConfig,
    dataset: &Dataset,
    eval_seed: u64,
) -> Result<f64, TrainError> {
    state.net.set_mode(Mode::Eval);
    let mut rng = stream_rng(eval_seed, domain::EVAL, 0);
    let mut total = 0usize;
    let mut sets = 0usize;
    let test_sets: Vec<Vec<u32>> = dataset.test_sets().to_vec();
    for set in &test_sets {
        let channels = dataset.set_channels(set);
        let weights: Vec<f64> = if config.pf_training {
            (0..channels.len()).map(|_| rng.gen::<f64>()).collect()
        } else {
            Vec::new()
        };
        let decisions = decide_set(
            &mut state.net,
            config.input_mode,
            state.feature_scale,
            config.gamma,
            &channels,
            config.pf_training.then_some(weights.as_slice()),
            match config.method {
                TrainMethod::DirectOpt => None,
                TrainMethod::PolicyGradient => Some(&mut rng),
            },
        )?;
        total += decisions.iter().filter(|d| d.feed_back).count();
        sets += 1;
    }
    Ok(total as f64 / sets.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_dataset, ArrayGeometry, ChannelModelConfig};

    fn toy_model() -> ChannelModelConfig {
        ChannelModelConfig {
            num_clusters: 3,
            angle_spread_deg: 10.0,
            pathloss_exponent: 3.0,
            cell_radius_m: 200.0,
            shadowing_std_db: 4.0,
            rayleigh_mode: false,
        }
    }

    fn toy_dataset(users_per_set: usize, num_sets: usize, n: usize) -> Dataset {
        build_dataset(
            200,
            num_sets,
            users_per_set,
            &ArrayGeometry::ula(n),
            &toy_model(),
            77,
            Some((num_sets * 5 / 6, num_sets - num_sets * 5 / 6)),
        )
        .unwrap()
    }

    fn toy_config(method: TrainMethod) -> TrainConfig {
        TrainConfig {
            n_fb: 3.0,
            m_max: 4,
            total_ues: 8,
            method,
            scheduler: TrainScheduler::Opportunistic,
            input_mode: InputMode::Cqi,
            pf_training: false,
            alpha_p: 1e-3,
            alpha_d: 1e-2,
            batch_size: 16,
            epochs: 2,
            gamma: 10.0,
            total_power: 10.0,
            sigma2: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn lagrangian_trivial_cases() {
        // nobody feeds back
        let (r, c, l) = lagrangian_terms(&[0.0, 0.0], &[0, 0], 0.5, 4.0);
        assert_eq!(r, 0.0);
        assert_eq!(c, -4.0);
        assert_eq!(l, -2.0);
        // all 10 UEs feed back with budget 4
        let (_, c, _) = lagrangian_terms(&[1.0; 3], &[10, 10, 10], 0.0, 4.0);
        assert!((c - 6.0).abs() < 1e-12);
    }

    #[test]
    fn lagrangian_matches_scalar_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rates: Vec<f64> = (0..32).map(|_| rng.gen::<f64>() * 20.0).collect();
        let counts: Vec<usize> = (0..32).map(|_| rng.gen_range(0..10)).collect();
        let lambda = 0.37;
        let n_fb = 4.0;
        let (r, c, l) = lagrangian_terms(&rates, &counts, lambda, n_fb);
        let mut r2 = 0.0;
        let mut c2 = 0.0;
        for i in 0..32 {
            r2 += rates[i] / 32.0;
            c2 += counts[i] as f64 / 32.0;
        }
        c2 -= n_fb;
        assert!((r - r2).abs() < 1e-12);
        assert!((c - c2).abs() < 1e-12);
        assert!((l - (-r2 + lambda * c2)).abs() < 1e-12);
    }

    #[test]
    fn dual_step_cases() {
        assert!((dual_step(0.2, 2.0, 0.1) - 0.4).abs() < 1e-15);
        assert_eq!(dual_step(0.05, -1.0, 0.1), 0.0);
        let l = 0.3;
        assert_eq!(dual_step(l, 0.0, 0.1), l);
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = toy_dataset(8, 60, 4);
        let mut cfg = toy_config(TrainMethod::DirectOpt);
        cfg.epochs = 0;
        let state = train(&cfg, &ds).unwrap();
        let fresh = Network::init(network_spec_for(&cfg, ds.n), cfg.seed);
        assert_eq!(state.net.params, fresh.params);
        assert_eq!(state.lambda, 0.0);
        assert!(state.metrics.is_empty());
    }

    #[test]
    fn fixed_seed_bit_identical_trajectories() {
        let ds = toy_dataset(8, 60, 4);
        for method in [TrainMethod::DirectOpt, TrainMethod::PolicyGradient] {
            let cfg = toy_config(method);
            let a = train(&cfg, &ds).unwrap();
            let b = train(&cfg, &ds).unwrap();
            assert_eq!(a.net.params, b.net.params);
            assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
            assert_eq!(a.metrics.len(), b.metrics.len());
        }
    }

    #[test]
    fn do_step_with_nothing_scheduled_and_zero_lambda_is_noop_on_rate() {
        // all scores pushed hard negative: nobody nominates, schedule empty,
        // lambda = 0, so every upstream term is lambda * ste = 0 and the
        // parameters stay exactly put
        let ds = toy_dataset(8, 60, 4);
        let mut cfg = toy_config(TrainMethod::DirectOpt);
        cfg.epochs = 0;
        let mut state = train(&cfg, &ds).unwrap();
        let nbias = state.net.params.len() - 1;
        state.net.params[nbias] = -1e6; // final dense bias
        let before = state.net.params.clone();
        let sets: Vec<Vec<&ChannelVector>> = ds.train_sets()[..16]
            .iter()
            .map(|s| ds.set_channels(s))
            .collect();
        let mut rng = stream_rng(1, domain::TRAIN, 0);
        let out = primal_step(&mut state, &sets, &cfg, &mut rng).unwrap();
        assert_eq!(out.rate_term, 0.0);
        assert_eq!(out.mean_feedback_count, 0.0);
        assert_eq!(state.net.params, before);
    }

    #[test]
    fn constraint_satisfaction_small_run() {
        // N_FB = 3 over 8 UEs: after a short run the dual variable must have
        // pulled the feedback count toward the budget
        let ds = toy_dataset(8, 240, 4);
        for method in [TrainMethod::DirectOpt, TrainMethod::PolicyGradient] {
            let mut cfg = toy_config(method);
            cfg.epochs = 30;
            cfg.alpha_d = 5e-2;
            let mut state = train(&cfg, &ds).unwrap();
            let count = mean_feedback_count(&mut state, &cfg, &ds, 999).unwrap();
            assert!(
                (count - cfg.n_fb).abs() <= 1.0 || (count <= cfg.n_fb && state.lambda == 0.0),
                "{method:?}: count {count} lambda {}",
                state.lambda
            );
        }
    }

    #[test]
    fn pg_gradient_matches_enumeration_oracle() {
        // 3 fixed channels, tiny dense net in eval mode: the exact gradient
        // enumerates all 8 joint actions weighted by their probabilities; the
        // Monte-Carlo estimator must agree within 3 standard errors per
        // coordinate
        use crate::micronet::{LayerKind, NetSpec};
        use num_complex::Complex64;

        let channels: Vec<ChannelVector> = vec![
            ChannelVector::new(0, vec![Complex64::new(1.0, 0.0), Complex64::new(0.2, 0.1)]),
            ChannelVector::new(1, vec![Complex64::new(0.1, -0.4), Complex64::new(0.9, 0.0)]),
            ChannelVector::new(2, vec![Complex64::new(0.5, 0.5), Complex64::new(-0.3, 0.6)]),
        ];
        let refs: Vec<&ChannelVector> = channels.iter().collect();
        let gamma = 4.0;
        let lambda = 0.3;
        let n_fb = 1.5;
        let (p, sigma2) = (4.0, 1.0);
        let spec = NetSpec {
            input_len: 1,
            trunk: Vec::new(),
            weight_branch: None,
            head: vec![
                LayerKind::Dense { inp: 1, out: 4 },
                LayerKind::Tanh,
                LayerKind::Dense { inp: 4, out: 1 },
            ],
        };
        let mut net = Network::init(spec, 21);
        net.set_mode(Mode::Eval);
        let feats: Vec<Vec<f64>> = refs
            .iter()
            .map(|c| featurize(c, InputMode::Cqi, 1.0))
            .collect();
        let x = Batch::from_rows(feats);
        let (scores, cache) = net.forward_batch(&x, None).unwrap();
        let probs: Vec<f64> = scores
            .iter()
            .map(|&c| crate::policy::feedback_prob(c, gamma))
            .collect();

        // the signed objective of one joint action: weighted sum-rate of the
        // full fed-back set (m_max = 3 here) minus the priced constraint
        let score_of = |pattern: usize| -> f64 {
            let fed: Vec<&ChannelVector> = (0..3)
                .filter(|k| pattern >> k & 1 == 1)
                .map(|k| refs[k])
                .collect();
            let count = fed.len() as f64;
            let rate = if fed.is_empty() {
                0.0
            } else {
                let rows: Vec<Vec<Complex64>> =
                    fed.iter().map(|c| c.entries.clone()).collect();
                match mimo::zf_precoder(&rows, p) {
                    Ok(f) => {
                        mimo::compute_rates(&rows, &f, sigma2, &vec![1.0; fed.len()])
                            .weighted_sum_rate
                    }
                    Err(_) => 0.0,
                }
            };
            rate - lambda * (count - n_fb)
        };

        // exact upstream on the three scores
        let mut exact_upstream = [0.0f64; 3];
        for pattern in 0..8usize {
            let mut pr = 1.0;
            for k in 0..3 {
                let a = pattern >> k & 1 == 1;
                pr *= if a { probs[k] } else { 1.0 - probs[k] };
            }
            let s = score_of(pattern);
            for k in 0..3 {
                let a = pattern >> k & 1 == 1;
                exact_upstream[k] += pr * s * grad_log_prob_wrt_score(a, probs[k], gamma);
            }
        }
        let exact = net.backward(&cache, &exact_upstream).unwrap();

        // Jacobian columns d(params)/d(c_k) for variance bookkeeping
        let jac: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let mut e = [0.0; 3];
                e[k] = 1.0;
                net.backward(&cache, &e).unwrap().0
            })
            .collect();

        let mut rng = stream_rng(5, domain::TRAIN, 1);
        let n_samples = 100_000usize;
        let np = exact.0.len();
        let mut sum = vec![0.0; np];
        let mut sumsq = vec![0.0; np];
        for _ in 0..n_samples {
            let mut pattern = 0usize;
            for k in 0..3 {
                if rng.gen::<f64>() < probs[k] {
                    pattern |= 1 << k;
                }
            }
            let s = score_of(pattern);
            let mut g = vec![0.0; np];
            for k in 0..3 {
                let a = pattern >> k & 1 == 1;
                let u = s * grad_log_prob_wrt_score(a, probs[k], gamma);
                for i in 0..np {
                    g[i] += u * jac[k][i];
                }
            }
            for i in 0..np {
                sum[i] += g[i];
                sumsq[i] += g[i] * g[i];
            }
        }
        for i in 0..np {
            let mean = sum[i] / n_samples as f64;
            let var = (sumsq[i] / n_samples as f64 - mean * mean).max(0.0);
            let se = (var / n_samples as f64).sqrt();
            assert!(
                (mean - exact.0[i]).abs() <= 3.0 * se + 1e-12,
                "coordinate {i}: mc {mean} exact {} se {se}",
                exact.0[i]
            );
        }
    }

    #[test]
    fn config_mismatch_detected() {
        let ds = toy_dataset(8, 24, 4);
        let mut cfg = toy_config(TrainMethod::DirectOpt);
        cfg.total_ues = 9;
        assert!(matches!(
            train(&cfg, &ds),
            Err(TrainError::ConfigMismatch(_))
        ));
        let mut cfg = toy_config(TrainMethod::DirectOpt);
        cfg.n_fb = 0.0;
        assert!(matches!(
            train(&cfg, &ds),
            Err(TrainError::ConfigMismatch(_))
        ));
    }
}
