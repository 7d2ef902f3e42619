//! BS-side scheduling functions over the self-nominated user set, plus the
//! proportional-fair running-average bookkeeping.
//!
//! All schedulers return an ordered subset of at most `m_max` users and break
//! ties by lowest ue_id so results are deterministic. The exact subset argmax
//! behind PF scheduling is exponential; the greedy incremental weighted
//! sum-rate surrogate used here is oracle-checked against exhaustive search at
//! small sizes in the tests.

use rand::Rng;

use crate::mimo::{self, ChannelVector, MimoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMethod {
    Random,
    Opportunistic,
    Sus,
    Pf,
}

/// Ordered scheduled subset of the self-nominated set.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub selected: Vec<usize>,
    pub method: ScheduleMethod,
}

/// Uniform random subset of size `m_max` (or everything when the nominated
/// set is small enough).
pub fn random_schedule(ids: &[usize], m_max: usize, rng: &mut impl Rng) -> Schedule {
    let mut selected: Vec<usize> = if ids.len() > m_max {
        rand::seq::index::sample(rng, ids.len(), m_max)
            .into_iter()
            .map(|i| ids[i])
            .collect()
    } else {
        ids.to_vec()
    };
    selected.sort_unstable();
    Schedule {
        selected,
        method: ScheduleMethod::Random,
    }
}

/// The `m_max` users with the largest channel norms, ties broken by lowest
/// ue_id; returns everyone when the nominated set is within the limit.
pub fn opportunistic_schedule(users: &[&ChannelVector], m_max: usize) -> Schedule {
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.sort_by(|&a, &b| {
        users[b]
            .norm_sq()
            .partial_cmp(&users[a].norm_sq())
            .unwrap()
            .then(users[a].ue_id.cmp(&users[b].ue_id))
    });
    let selected = order
        .into_iter()
        .take(m_max)
        .map(|i| users[i].ue_id)
        .collect();
    Schedule {
        selected,
        method: ScheduleMethod::Opportunistic,
    }
}

/// Semi-orthogonal user selection: greedily picks the user with the largest
/// component orthogonal to the span of the already-selected channels, keeping
/// only candidates whose normalized correlation to every selected channel is
/// at most `alpha`.
pub fn sus_schedule(users: &[&ChannelVector], m_max: usize, alpha: f64) -> Schedule {
    assert!(alpha > 0.0 && alpha < 1.0, "alpha must be in (0,1)");
    let mut selected = Vec::new();
    // orthogonalized basis of the selected channels
    let mut basis: Vec<Vec<num_complex::Complex64>> = Vec::new();
    let mut candidates: Vec<usize> = (0..users.len()).collect();
    while selected.len() < m_max && !candidates.is_empty() {
        // component of each candidate orthogonal to the selected span
        let mut best: Option<(usize, f64)> = None;
        for &i in &candidates {
            let mut g = users[i].entries.clone();
            for b in &basis {
                let proj = mimo::inner(b, &g);
                let bn: f64 = b.iter().map(|z| z.norm_sqr()).sum();
                for (gv, bv) in g.iter_mut().zip(b) {
                    *gv -= bv * (proj / bn);
                }
            }
            let gn: f64 = g.iter().map(|z| z.norm_sqr()).sum();
            let better = match best {
                None => true,
                Some((bi, bn)) => {
                    gn > bn + 1e-15 * bn.max(1.0)
                        || ((gn - bn).abs() <= 1e-15 * bn.max(1.0)
                            && users[i].ue_id < users[bi].ue_id)
                }
            };
            if better {
                best = Some((i, gn));
            }
        }
        let (pick, _) = best.unwrap();
        let mut g = users[pick].entries.clone();
        for b in &basis {
            let proj = mimo::inner(b, &g);
            let bn: f64 = b.iter().map(|z| z.norm_sqr()).sum();
            for (gv, bv) in g.iter_mut().zip(b) {
                *gv -= bv * (proj / bn);
            }
        }
        basis.push(g);
        selected.push(users[pick].ue_id);
        let picked_entries = &users[pick].entries;
        let picked_norm = users[pick].norm();
        candidates.retain(|&i| {
            if i == pick {
                return false;
            }
            let corr = mimo::inner(picked_entries, &users[i].entries).norm()
                / (picked_norm * users[i].norm());
            corr <= alpha
        });
    }
    Schedule {
        selected,
        method: ScheduleMethod::Sus,
    }
}

/// Greedy weighted sum-rate scheduling: repeatedly adds the candidate whose
/// inclusion most improves the weighted sum-rate under ZF, stopping at
/// `m_max` or when no candidate strictly improves the value. Candidates whose
/// inclusion makes the set rank deficient count as no improvement.
pub fn pf_schedule(
    users: &[&ChannelVector],
    m_max: usize,
    weights: &[f64],
    total_power: f64,
    sigma2: f64,
) -> Schedule {
    assert_eq!(users.len(), weights.len());
    let mut selected_idx: Vec<usize> = Vec::new();
    let mut current_value = 0.0;
    loop {
        if selected_idx.len() >= m_max {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..users.len() {
            if selected_idx.contains(&i) {
                continue;
            }
            let mut tentative = selected_idx.clone();
            tentative.push(i);
            let value = match weighted_rate(users, &tentative, weights, total_power, sigma2) {
                Ok(v) => v,
                Err(MimoError::RankDeficient { .. }) => continue,
                Err(e) => panic!("unexpected mimo error: {e}"),
            };
            let better = match best {
                None => value > current_value,
                Some((bi, bv)) => {
                    value > bv + 1e-15 * bv.abs().max(1.0)
                        || ((value - bv).abs() <= 1e-15 * bv.abs().max(1.0)
                            && users[i].ue_id < users[bi].ue_id)
                }
            };
            if better && value > current_value {
                best = Some((i, value));
            }
        }
        match best {
            Some((i, v)) => {
                selected_idx.push(i);
                current_value = v;
            }
            None => break,
        }
    }
    let mut selected: Vec<usize> = selected_idx.iter().map(|&i| users[i].ue_id).collect();
    selected.sort_unstable();
    Schedule {
        selected,
        method: ScheduleMethod::Pf,
    }
}

/// Weighted sum-rate of a tentative index set under ZF precoding.
pub fn weighted_rate(
    users: &[&ChannelVector],
    idx: &[usize],
    weights: &[f64],
    total_power: f64,
    sigma2: f64,
) -> Result<f64, MimoError> {
    let rows: Vec<Vec<num_complex::Complex64>> =
        idx.iter().map(|&i| users[i].entries.clone()).collect();
    let w: Vec<f64> = idx.iter().map(|&i| weights[i]).collect();
    let f = mimo::zf_precoder(&rows, total_power)?;
    Ok(mimo::compute_rates(&rows, &f, sigma2, &w).weighted_sum_rate)
}

/// Per-UE running average spectral efficiencies and the derived PF weights.
#[derive(Debug, Clone)]
pub struct PfState {
    pub rbar: Vec<f64>,
    pub epsilon: f64,
    pub t: usize,
}

/// Floor applied when inverting running averages into weights, so a user
/// whose average has decayed to zero gets a very large but finite weight.
pub const RBAR_FLOOR: f64 = 1e-12;

impl PfState {
    /// All running averages start at one, the paper's worst-case setup.
    pub fn new(num_ues: usize, epsilon: f64) -> Self {
        assert!(epsilon >= 1.0, "epsilon must be >= 1");
        Self {
            rbar: vec![1.0; num_ues],
            epsilon,
            t: 0,
        }
    }

    /// `w_k = 1 / rbar_k`, floored to stay finite.
    pub fn weights(&self) -> Vec<f64> {
        self.rbar.iter().map(|&r| 1.0 / r.max(RBAR_FLOOR)).collect()
    }

    /// `rbar <- (1 - 1/eps) rbar + (1/eps) r`; unscheduled users contribute 0.
    pub fn update(&mut self, instantaneous: &[f64]) {
        assert_eq!(instantaneous.len(), self.rbar.len());
        let inv = 1.0 / self.epsilon;
        for (r, &inst) in self.rbar.iter_mut().zip(instantaneous) {
            *r = (1.0 - inv) * *r + inv * inst;
        }
        self.t += 1;
    }
}
