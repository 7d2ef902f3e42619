//! Time-slotted proportional-fair evaluation loop.
//!
//! Per slot: fresh block-fading channels, per-UE feedback decisions (the
//! trained self-nomination network or a baseline rule), PF scheduling over
//! the fed-back set, ZF rates, then the running-average update that produces
//! the next slot's weights. Layouts are independent and run in parallel; the
//! slot loop inside a layout is sequential because the PF state is a
//! temporal dependency.

use crate::channel::{
    domain, stream_rng, ArrayGeometry, ChannelModelConfig, UePlacement,
};
use crate::micronet::{CheckpointMeta, Mode, Network};
use crate::mimo::{self, ChannelVector, MimoError};
use crate::policy::InputMode;
use crate::scheduling::{pf_schedule, PfState};
use crate::training::decide_set;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Net(#[from] crate::micronet::NetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PfPolicy {
    /// trained network decides; requires a PF-aware checkpoint
    SelfNomination,
    /// each UE feeds back independently with the given probability
    RandomFb { prob: f64 },
    /// every UE feeds back every slot
    AllFb,
    /// every UE wants to feed back; a uniform random subset of `n_fb` is
    /// kept whenever the count exceeds the budget
    LimitedAllFb { n_fb: usize },
}

impl PfPolicy {
    pub fn label(&self) -> String {
        match self {
            PfPolicy::SelfNomination => "self_nomination".into(),
            PfPolicy::RandomFb { prob } => format!("random_fb({prob})"),
            PfPolicy::AllFb => "all_fb".into(),
            PfPolicy::LimitedAllFb { n_fb } => format!("limited_all_fb({n_fb})"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PfRunConfig {
    /// slots per layout
    pub t: usize,
    /// running-average memory length
    pub epsilon: f64,
    pub layouts: usize,
    pub policy: PfPolicy,
    pub m_max: usize,
    pub total_ues: usize,
    pub total_power: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl PfRunConfig {
    pub fn validate(&self) -> Result<(), PfError> {
        if self.t < 1 || self.epsilon < 1.0 || self.layouts < 1 {
            return Err(PfError::CheckpointMismatch(
                "t >= 1, epsilon >= 1 and layouts >= 1 required".into(),
            ));
        }
        if let PfPolicy::RandomFb { prob } = self.policy {
            if !(0.0..=1.0).contains(&prob) {
                return Err(PfError::CheckpointMismatch("prob must be in [0,1]".into()));
            }
        }
        Ok(())
    }
}

/// Where slot channels come from.
pub enum ChannelSource {
    /// UE positions and cluster angles fixed per layout; cluster gains are
    /// redrawn each slot (block fading with fixed large-scale geometry)
    Clustered {
        geometry: ArrayGeometry,
        model: ChannelModelConfig,
        placements: Vec<Vec<UePlacement>>,
        /// amplitude scale matching the dataset's median-power normalization
        norm_scale: f64,
    },
    /// the same channels every slot (single layout)
    Static { channels: Vec<ChannelVector> },
}

impl ChannelSource {
    /// Draws fixed layouts and calibrates the normalization scale from a
    /// probe sample, mirroring dataset generation.
    pub fn clustered(
        geometry: ArrayGeometry,
        model: ChannelModelConfig,
        layouts: usize,
        total_ues: usize,
        seed: u64,
    ) -> Self {
        let placements: Vec<Vec<UePlacement>> = (0..layouts)
            .map(|l| {
                let mut rng = stream_rng(seed, domain::PF_LAYOUT, l as u64);
                (0..total_ues)
                    .map(|_| crate::channel::draw_placement(&model, &mut rng))
                    .collect()
            })
            .collect();
        let n = geometry.num_antennas() as f64;
        let mut probe_rng = stream_rng(seed, domain::POOL, u64::MAX);
        let mut powers: Vec<f64> = (0..501)
            .map(|_| {
                crate::channel::generate_channel(&geometry, &model, &mut probe_rng)
                    .iter()
                    .map(|z| z.norm_sqr())
                    .sum::<f64>()
            })
            .collect();
        powers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = powers[powers.len() / 2];
        let norm_scale = if median > 0.0 { (n / median).sqrt() } else { 1.0 };
        ChannelSource::Clustered {
            geometry,
            model,
            placements,
            norm_scale,
        }
    }

    pub fn num_layouts(&self) -> usize {
        match self {
            ChannelSource::Clustered { placements, .. } => placements.len(),
            ChannelSource::Static { .. } => 1,
        }
    }

    fn slot_channels(&self, layout: usize, rng: &mut impl Rng) -> Vec<ChannelVector> {
        match self {
            ChannelSource::Clustered {
                geometry,
                model,
                placements,
                norm_scale,
            } => placements[layout]
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let gains = crate::channel::draw_cluster_gains(model.num_clusters, rng);
                    let mut entries = crate::channel::clustered_channel(
                        geometry,
                        &p.cluster_angles,
                        &gains,
                        p.large_scale_gain,
                    );
                    for e in &mut entries {
                        *e *= *norm_scale;
                    }
                    ChannelVector::new(k, entries)
                })
                .collect(),
            ChannelSource::Static { channels } => channels.clone(),
        }
    }
}

/// Per-layout outcome of a PF run.
#[derive(Debug, Clone)]
pub struct PfLayoutReport {
    pub layout_id: usize,
    /// time-averaged rate of each UE over the whole run
    pub mean_rates: Vec<f64>,
    /// how many slots each UE was scheduled
    pub scheduled_counts: Vec<usize>,
    pub mean_feedback_count: f64,
}

#[derive(Debug, Clone)]
pub struct PfRunReport {
    pub layouts: Vec<PfLayoutReport>,
    pub t: usize,
    pub epsilon: f64,
    pub policy: String,
}

/// Log-utility summary; the value is `-inf` when any UE starved.
#[derive(Debug, Clone)]
pub struct LogUtility {
    pub value: f64,
    /// (layout_id, ue_id) pairs with zero mean rate
    pub starved: Vec<(usize, usize)>,
}

fn decide_slot(
    config: &PfRunConfig,
    channels: &[&ChannelVector],
    weights: &[f64],
    net: Option<&mut Network>,
    meta: Option<&CheckpointMeta>,
    rng: &mut impl Rng,
) -> Result<Vec<bool>, PfError> {
    let k = channels.len();
    match config.policy {
        PfPolicy::AllFb => Ok(vec![true; k]),
        PfPolicy::RandomFb { prob } => Ok((0..k).map(|_| rng.gen::<f64>() < prob).collect()),
        PfPolicy::LimitedAllFb { n_fb } => {
            if n_fb >= k {
                return Ok(vec![true; k]);
            }
            let mut picked = rand::seq::index::sample(rng, k, n_fb).into_vec();
            picked.sort_unstable();
            let mut out = vec![false; k];
            for p in picked {
                out[p] = true;
            }
            Ok(out)
        }
        PfPolicy::SelfNomination => {
            let net = net.expect("self-nomination requires a network");
            let meta = meta.expect("self-nomination requires checkpoint metadata");
            let input_mode = if meta.input_mode == 0 {
                InputMode::FullCsi
            } else {
                InputMode::Cqi
            };
            // running PF weights are fed to the weight branch unclamped: the
            // branch was trained on weights in [0,1], but a starving user's
            // weight growing past 1 must keep pushing its score upward
            let w_in: Vec<f64> = weights.to_vec();
            let decisions = decide_set(
                net,
                input_mode,
                meta.feature_scale,
                meta.gamma,
                channels,
                meta.pf_aware.then_some(w_in.as_slice()),
                if meta.method == 1 { Some(rng) } else { None },
            )?;
            Ok(decisions.iter().map(|d| d.feed_back).collect())
        }
    }
}

fn run_layout(
    config: &PfRunConfig,
    source: &ChannelSource,
    layout: usize,
    mut net: Option<Network>,
    meta: Option<&CheckpointMeta>,
) -> Result<PfLayoutReport, PfError> {
    let k = config.total_ues;
    let mut pf = PfState::new(k, config.epsilon);
    let mut rate_sums = vec![0.0; k];
    let mut scheduled_counts = vec![0usize; k];
    let mut fb_total = 0usize;
    for slot in 0..config.t {
        let idx = (layout * config.t + slot) as u64;
        let mut chan_rng = stream_rng(config.seed, domain::PF_SLOT, 2 * idx);
        let mut policy_rng = stream_rng(config.seed, domain::PF_SLOT, 2 * idx + 1);
        let channels = source.slot_channels(layout, &mut chan_rng);
        let refs: Vec<&ChannelVector> = channels.iter().collect();
        let weights = pf.weights();
        let actions = decide_slot(
            config,
            &refs,
            &weights,
            net.as_mut(),
            meta,
            &mut policy_rng,
        )?;
        fb_total += actions.iter().filter(|&&a| a).count();
        let fed: Vec<&ChannelVector> = refs
            .iter()
            .zip(&actions)
            .filter(|(_, &a)| a)
            .map(|(c, _)| *c)
            .collect();
        let fed_weights: Vec<f64> = fed.iter().map(|c| weights[c.ue_id]).collect();
        let schedule = pf_schedule(
            &fed,
            config.m_max,
            &fed_weights,
            config.total_power,
            config.sigma2,
        );
        let mut inst = vec![0.0; k];
        if !schedule.selected.is_empty() {
            let rows: Vec<Vec<num_complex::Complex64>> = schedule
                .selected
                .iter()
                .map(|&id| channels[id].entries.clone())
                .collect();
            match mimo::zf_precoder(&rows, config.total_power) {
                Ok(f) => {
                    let report = mimo::compute_rates(
                        &rows,
                        &f,
                        config.sigma2,
                        &vec![1.0; rows.len()],
                    );
                    for (&id, &r) in schedule.selected.iter().zip(&report.spectral_efficiency)
                    {
                        inst[id] = r;
                        rate_sums[id] += r;
                        scheduled_counts[id] += 1;
                    }
                }
                Err(MimoError::RankDeficient { .. }) => {}
                Err(e) => panic!("unexpected mimo error: {e}"),
            }
        }
        pf.update(&inst);
    }
    Ok(PfLayoutReport {
        layout_id: layout,
        mean_rates: rate_sums.iter().map(|&s| s / config.t as f64).collect(),
        scheduled_counts,
        mean_feedback_count: fb_total as f64 / config.t as f64,
    })
}

/// Runs the PF loop over every layout. `checkpoint` is required for the
/// self-nomination policy and ignored otherwise.
pub fn run_pf(
    config: &PfRunConfig,
    source: &ChannelSource,
    checkpoint: Option<(&Network, &CheckpointMeta)>,
) -> Result<PfRunReport, PfError> {
    config.validate()?;
    if matches!(config.policy, PfPolicy::SelfNomination) {
        match checkpoint {
            None => {
                return Err(PfError::CheckpointMismatch(
                    "self-nomination policy needs a checkpoint".into(),
                ))
            }
            Some((_, meta)) if !meta.pf_aware => {
                return Err(PfError::CheckpointMismatch(
                    "checkpoint was not trained with the weight branch".into(),
                ))
            }
            _ => {}
        }
    }
    let layouts = config.layouts.min(source.num_layouts());
    let reports: Result<Vec<PfLayoutReport>, PfError> = (0..layouts)
        .into_par_iter()
        .map(|l| {
            let net = checkpoint.map(|(n, _)| {
                let mut n = n.clone();
                n.set_mode(Mode::Eval);
                n
            });
            run_layout(config, source, l, net, checkpoint.map(|(_, m)| m))
        })
        .collect();
    Ok(PfRunReport {
        layouts: reports?,
        t: config.t,
        epsilon: config.epsilon,
        policy: config.policy.label(),
    })
}

/// Empirical CDF of per-UE mean rates over all layouts.
pub fn rate_cdf(report: &PfRunReport) -> Vec<(f64, f64)> {
    let mut rates: Vec<f64> = report
        .layouts
        .iter()
        .flat_map(|l| l.mean_rates.iter().copied())
        .collect();
    rates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = rates.len() as f64;
    rates
        .into_iter()
        .enumerate()
        .map(|(i, r)| (r, (i + 1) as f64 / n))
        .collect()
}

/// Mean over layouts of the per-layout sum of natural-log mean rates.
/// Any UE with zero mean rate is flagged and the utility is `-inf`.
pub fn log_utility(report: &PfRunReport) -> LogUtility {
    let mut starved = Vec::new();
    let mut total = 0.0;
    for l in &report.layouts {
        for (k, &r) in l.mean_rates.iter().enumerate() {
            if r <= 0.0 {
                starved.push((l.layout_id, k));
            } else {
                total += r.ln();
            }
        }
    }
    let value = if starved.is_empty() {
        total / report.layouts.len() as f64
    } else {
        f64::NEG_INFINITY
    };
    LogUtility { value, starved }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn orthogonal_static(k: usize, n: usize) -> ChannelSource {
        // equal-norm orthogonal channels: unit vectors on distinct antennas
        assert!(k <= n);
        let channels = (0..k)
            .map(|i| {
                let mut e = vec![Complex64::new(0.0, 0.0); n];
                e[i] = Complex64::new(1.0, 0.0);
                ChannelVector::new(i, e)
            })
            .collect();
        ChannelSource::Static { channels }
    }

    fn base_config(policy: PfPolicy) -> PfRunConfig {
        PfRunConfig {
            t: 10,
            epsilon: 10.0,
            layouts: 1,
            policy,
            m_max: 3,
            total_ues: 6,
            total_power: 6.0,
            sigma2: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn all_fb_single_ue_single_slot_analytic() {
        let source = orthogonal_static(1, 4);
        let mut cfg = base_config(PfPolicy::AllFb);
        cfg.t = 1;
        cfg.total_ues = 1;
        cfg.m_max = 1;
        cfg.total_power = 5.0;
        cfg.sigma2 = 0.5;
        let report = run_pf(&cfg, &source, None).unwrap();
        let expected = (1.0f64 + 5.0 * 1.0 / 0.5).log2();
        assert!((report.layouts[0].mean_rates[0] - expected).abs() < 1e-10);
        assert_eq!(report.layouts[0].mean_feedback_count, 1.0);
    }

    #[test]
    fn epsilon_one_round_robin() {
        // memoryless averages: weights cycle so each UE is scheduled about
        // T * M / K times under static identical-norm orthogonal channels
        let k = 6;
        let m = 3;
        let t = 100;
        let source = orthogonal_static(k, 8);
        let mut cfg = base_config(PfPolicy::AllFb);
        cfg.t = t;
        cfg.epsilon = 1.0;
        cfg.m_max = m;
        cfg.total_ues = k;
        let report = run_pf(&cfg, &source, None).unwrap();
        let expected = (t * m) as f64 / k as f64;
        for (ue, &c) in report.layouts[0].scheduled_counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() <= 1.0,
                "ue {ue}: scheduled {c}, expected ~{expected}"
            );
        }
    }

    #[test]
    fn limited_all_fb_with_full_budget_equals_all_fb() {
        let source = orthogonal_static(6, 8);
        let cfg_all = base_config(PfPolicy::AllFb);
        let cfg_lim = base_config(PfPolicy::LimitedAllFb { n_fb: 6 });
        let a = run_pf(&cfg_all, &source, None).unwrap();
        let b = run_pf(&cfg_lim, &source, None).unwrap();
        assert_eq!(a.layouts[0].mean_rates, b.layouts[0].mean_rates);
        assert_eq!(a.layouts[0].scheduled_counts, b.layouts[0].scheduled_counts);
    }

    #[test]
    fn all_fb_feedback_count_is_total_ues() {
        let source = orthogonal_static(6, 8);
        let cfg = base_config(PfPolicy::AllFb);
        let report = run_pf(&cfg, &source, None).unwrap();
        assert_eq!(report.layouts[0].mean_feedback_count, 6.0);
    }

    #[test]
    fn limited_all_fb_respects_budget() {
        let source = orthogonal_static(6, 8);
        let cfg = base_config(PfPolicy::LimitedAllFb { n_fb: 2 });
        let report = run_pf(&cfg, &source, None).unwrap();
        assert_eq!(report.layouts[0].mean_feedback_count, 2.0);
    }

    #[test]
    fn rate_cdf_shapes() {
        let report = PfRunReport {
            layouts: vec![PfLayoutReport {
                layout_id: 0,
                mean_rates: vec![3.0, 1.0],
                scheduled_counts: vec![1, 1],
                mean_feedback_count: 2.0,
            }],
            t: 1,
            epsilon: 1.0,
            policy: "all_fb".into(),
        };
        let cdf = rate_cdf(&report);
        assert_eq!(cdf, vec![(1.0, 0.5), (3.0, 1.0)]);
        // monotone and ending at 1.0 on a real run
        let source = orthogonal_static(6, 8);
        let r = run_pf(&base_config(PfPolicy::AllFb), &source, None).unwrap();
        let cdf = rate_cdf(&r);
        for w in cdf.windows(2) {
            assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
        assert!((cdf.last().unwrap().1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_utility_cases() {
        let mk = |rates: Vec<f64>, id: usize| PfLayoutReport {
            layout_id: id,
            mean_rates: rates,
            scheduled_counts: vec![],
            mean_feedback_count: 0.0,
        };
        let single = PfRunReport {
            layouts: vec![mk(vec![std::f64::consts::E], 0)],
            t: 1,
            epsilon: 1.0,
            policy: "x".into(),
        };
        assert!((log_utility(&single).value - 1.0).abs() < 1e-12);

        let starved = PfRunReport {
            layouts: vec![mk(vec![1.0, 0.0], 0)],
            t: 1,
            epsilon: 1.0,
            policy: "x".into(),
        };
        let u = log_utility(&starved);
        assert!(u.value.is_infinite() && u.value < 0.0);
        assert_eq!(u.starved, vec![(0, 1)]);

        // mean over layouts of utilities 3 and 5
        let two = PfRunReport {
            layouts: vec![mk(vec![3f64.exp()], 0), mk(vec![5f64.exp()], 1)],
            t: 1,
            epsilon: 1.0,
            policy: "x".into(),
        };
        assert!((log_utility(&two).value - 4.0).abs() < 1e-9);
    }

    #[test]
    fn clustered_source_deterministic_and_worker_independent() {
        let model = ChannelModelConfig {
            num_clusters: 3,
            angle_spread_deg: 10.0,
            pathloss_exponent: 3.0,
            cell_radius_m: 200.0,
            shadowing_std_db: 4.0,
            rayleigh_mode: false,
        };
        let mk = || {
            ChannelSource::clustered(ArrayGeometry::ula(8), model.clone(), 3, 6, 42)
        };
        let mut cfg = base_config(PfPolicy::RandomFb { prob: 0.7 });
        cfg.layouts = 3;
        let run = |workers: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            pool.install(|| run_pf(&cfg, &mk(), None).unwrap())
        };
        let a = run(1);
        let b = run(4);
        for (la, lb) in a.layouts.iter().zip(&b.layouts) {
            assert_eq!(la.mean_rates, lb.mean_rates);
            assert_eq!(la.mean_feedback_count, lb.mean_feedback_count);
        }
    }

    #[test]
    fn self_nomination_requires_pf_aware_checkpoint() {
        let source = orthogonal_static(6, 8);
        let cfg = base_config(PfPolicy::SelfNomination);
        assert!(matches!(
            run_pf(&cfg, &source, None),
            Err(PfError::CheckpointMismatch(_))
        ));
        let net = Network::init(crate::micronet::cqi_spec(false), 1);
        let meta = CheckpointMeta {
            input_mode: 1,
            pf_aware: false,
            method: 0,
            feature_scale: 1.0,
            n_antennas: 8,
            gamma: 10.0,
            lambda: 0.0,
        };
        assert!(matches!(
            run_pf(&cfg, &source, Some((&net, &meta))),
            Err(PfError::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn self_nomination_runs_with_pf_aware_checkpoint() {
        let source = orthogonal_static(6, 8);
        let cfg = base_config(PfPolicy::SelfNomination);
        let net = Network::init(crate::micronet::cqi_spec(true), 1);
        let meta = CheckpointMeta {
            input_mode: 1,
            pf_aware: true,
            method: 0,
            feature_scale: 1.0,
            n_antennas: 8,
            gamma: 10.0,
            lambda: 0.0,
        };
        let report = run_pf(&cfg, &source, Some((&net, &meta))).unwrap();
        assert_eq!(report.layouts.len(), 1);
        assert!(report.layouts[0].mean_feedback_count <= 6.0);
    }
}
