//! Synthetic spatial channel generation and dataset assembly.
//!
//! Channels follow a clustered geometric model: UEs are dropped uniformly in
//! a disc, each channel is a sum of steering vectors at Laplacian-spread
//! cluster angles with complex Gaussian cluster gains, scaled by a
//! log-distance pathloss with log-normal shadowing. Large-scale gains are
//! normalized so the median per-antenna power over a pool is one, leaving
//! transmit SNR controlled solely by P/sigma^2. A Rayleigh mode with i.i.d.
//! complex Gaussian entries is available for sanity baselines.
//!
//! Every sample is drawn from its own RNG stream derived from
//! (seed, sample index), so regeneration is bit-identical regardless of how
//! generation is parallelized.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::mimo::ChannelVector;

/// BS array height above the UE plane, used for elevation angles.
pub const BS_HEIGHT_M: f64 = 10.0;

/// RNG stream domains, kept disjoint so independent draws never collide.
pub mod domain {
    pub const POOL: u64 = 1;
    pub const SETS: u64 = 2;
    pub const PF_LAYOUT: u64 = 3;
    pub const PF_SLOT: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const EVAL: u64 = 6;
}

/// Deterministic per-sample RNG stream for (seed, domain, index).
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) ^ index);
    rng
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid split: train {train} + test {test} exceeds {num_sets} sets")]
    InvalidSplit {
        train: usize,
        test: usize,
        num_sets: usize,
    },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset file: {0}")]
    BadFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Ula,
    Upa,
}

/// BS antenna array geometry; `rows * cols = N`, ULA has a single row.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub kind: ArrayKind,
    pub rows: usize,
    pub cols: usize,
    /// element spacing in wavelengths
    pub element_spacing: f64,
}

impl ArrayGeometry {
    pub fn ula(n: usize) -> Self {
        Self {
            kind: ArrayKind::Ula,
            rows: 1,
            cols: n,
            element_spacing: 0.5,
        }
    }

    pub fn upa(rows: usize, cols: usize) -> Self {
        Self {
            kind: ArrayKind::Upa,
            rows,
            cols,
            element_spacing: 0.5,
        }
    }

    pub fn num_antennas(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelModelConfig {
    pub num_clusters: usize,
    pub angle_spread_deg: f64,
    pub pathloss_exponent: f64,
    pub cell_radius_m: f64,
    pub shadowing_std_db: f64,
    #[serde(default)]
    pub rayleigh_mode: bool,
}

impl ChannelModelConfig {
    pub fn validate(&self) {
        assert!(self.num_clusters >= 1, "num_clusters must be >= 1");
        assert!(self.cell_radius_m > 0.0, "cell_radius_m must be > 0");
    }
}

/// Array response for a plane wave from (azimuth, elevation).
///
/// Entry for row r, column c (antenna index `r*cols + c`) has phase
/// `2*pi*spacing*(c*sin(az)*cos(el) + r*sin(el))`; all entries have unit
/// magnitude and the squared norm equals N.
pub fn steering_vector(geometry: &ArrayGeometry, azimuth_rad: f64, elevation_rad: f64) -> Vec<Complex64> {
    let d = geometry.element_spacing;
    let mut v = Vec::with_capacity(geometry.num_antennas());
    let (sa, ca) = (azimuth_rad.sin(), elevation_rad.cos());
    let se = elevation_rad.sin();
    for r in 0..geometry.rows {
        for c in 0..geometry.cols {
            let phase = 2.0 * PI * d * (c as f64 * sa * ca + r as f64 * se);
            v.push(Complex64::from_polar(1.0, phase));
        }
    }
    v
}

/// Fixed per-UE geometry drawn once per drop: position plus large-scale gain.
#[derive(Debug, Clone)]
pub struct UePlacement {
    pub distance_m: f64,
    pub azimuth_rad: f64,
    pub elevation_rad: f64,
    /// amplitude gain from pathloss and shadowing (before pool normalization)
    pub large_scale_gain: f64,
    /// mean cluster departure angles for this UE
    pub cluster_angles: Vec<(f64, f64)>,
}

fn laplacian_sample(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.gen::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Draws a UE drop: position uniform in the disc, log-distance pathloss with
/// log-normal shadowing, Laplacian-spread cluster angles around the UE line
/// of sight.
pub fn draw_placement(config: &ChannelModelConfig, rng: &mut impl Rng) -> UePlacement {
    config.validate();
    let r = config.cell_radius_m * rng.gen::<f64>().sqrt().max(0.01);
    let az = rng.gen::<f64>() * 2.0 * PI - PI;
    let el = -(BS_HEIGHT_M / r).atan();
    let shadow_db = gaussian(rng) * config.shadowing_std_db;
    let gain_db = -10.0 * config.pathloss_exponent * (r / config.cell_radius_m).log10() + shadow_db;
    let spread = config.angle_spread_deg.to_radians();
    let cluster_angles = (0..config.num_clusters)
        .map(|_| {
            (
                az + laplacian_sample(rng, spread),
                el + laplacian_sample(rng, spread * 0.25),
            )
        })
        .collect();
    UePlacement {
        distance_m: r,
        azimuth_rad: az,
        elevation_rad: el,
        large_scale_gain: 10f64.powf(gain_db / 20.0),
        cluster_angles,
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn complex_gaussian(rng: &mut impl Rng) -> Complex64 {
    Complex64::new(gaussian(rng) / 2f64.sqrt(), gaussian(rng) / 2f64.sqrt())
}

/// Cluster gains with the per-sample power exactly normalized to one.
pub fn draw_cluster_gains(num_clusters: usize, rng: &mut impl Rng) -> Vec<Complex64> {
    let raw: Vec<Complex64> = (0..num_clusters).map(|_| complex_gaussian(rng)).collect();
    let norm: f64 = raw.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    raw.into_iter().map(|z| z / norm).collect()
}

/// Assembles `h = gain * sum_c alpha_c a(theta_c, phi_c)`.
pub fn clustered_channel(
    geometry: &ArrayGeometry,
    cluster_angles: &[(f64, f64)],
    cluster_gains: &[Complex64],
    large_scale_gain: f64,
) -> Vec<Complex64> {
    let n = geometry.num_antennas();
    let mut h = vec![Complex64::new(0.0, 0.0); n];
    for ((az, el), g) in cluster_angles.iter().zip(cluster_gains) {
        let a = steering_vector(geometry, *az, *el);
        for (hv, av) in h.iter_mut().zip(&a) {
            *hv += g * av;
        }
    }
    for hv in &mut h {
        *hv *= large_scale_gain;
    }
    h
}

/// One channel realization from the configured model (entries only; the
/// caller assigns the ue_id).
pub fn generate_channel(
    geometry: &ArrayGeometry,
    config: &ChannelModelConfig,
    rng: &mut impl Rng,
) -> Vec<Complex64> {
    if config.rayleigh_mode {
        return (0..geometry.num_antennas())
            .map(|_| Complex64::new(gaussian(rng), gaussian(rng)) / 2f64.sqrt())
            .collect();
    }
    let placement = draw_placement(config, rng);
    let gains = draw_cluster_gains(config.num_clusters, rng);
    clustered_channel(
        geometry,
        &placement.cluster_angles,
        &gains,
        placement.large_scale_gain,
    )
}

/// A pool of channel realizations plus index tuples forming channel sets,
/// partitioned into train and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub pool: Vec<ChannelVector>,
    pub sets: Vec<Vec<u32>>,
    pub num_train: usize,
    pub num_test: usize,
}

impl Dataset {
    pub fn train_sets(&self) -> &[Vec<u32>] {
        &self.sets[..self.num_train]
    }

    pub fn test_sets(&self) -> &[Vec<u32>] {
        &self.sets[self.num_train..self.num_train + self.num_test]
    }

    pub fn users_per_set(&self) -> usize {
        self.sets.first().map(|s| s.len()).unwrap_or(0)
    }

    /// Channel rows for one set, in tuple order.
    pub fn set_channels(&self, set: &[u32]) -> Vec<&ChannelVector> {
        set.iter().map(|&i| &self.pool[i as usize]).collect()
    }

    /// Median of ||h|| over the pool; the featurization scale is its inverse.
    pub fn median_channel_norm(&self) -> f64 {
        let mut norms: Vec<f64> = self.pool.iter().map(|h| h.norm()).collect();
        norms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        norms[norms.len() / 2]
    }
}

/// Builds a reproducible dataset: a channel pool, median-power normalization,
/// and random index tuples split train/test (default 6:1).
pub fn build_dataset(
    pool_size: usize,
    num_sets: usize,
    users_per_set: usize,
    geometry: &ArrayGeometry,
    config: &ChannelModelConfig,
    seed: u64,
    split: Option<(usize, usize)>,
) -> Result<Dataset, ChannelError> {
    assert!(users_per_set <= pool_size, "users_per_set exceeds pool");
    let (num_train, num_test) = match split {
        Some((tr, te)) => {
            if tr + te > num_sets {
                return Err(ChannelError::InvalidSplit {
                    train: tr,
                    test: te,
                    num_sets,
                });
            }
            (tr, te)
        }
        None => {
            let tr = num_sets * 6 / 7;
            (tr, num_sets - tr)
        }
    };

    let mut pool: Vec<ChannelVector> = (0..pool_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, domain::POOL, i as u64);
            ChannelVector::new(i, generate_channel(geometry, config, &mut rng))
        })
        .collect();

    // normalize so the median ||h||^2 / N is one
    let n = geometry.num_antennas();
    let mut powers: Vec<f64> = pool.iter().map(|h| h.norm_sq() / n as f64).collect();
    powers.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = powers[powers.len() / 2];
    let scale = 1.0 / median.sqrt();
    for h in &mut pool {
        for e in &mut h.entries {
            *e *= scale;
        }
    }

    let sets: Vec<Vec<u32>> = (0..num_sets)
        .into_par_iter()
        .map(|j| {
            let mut rng = stream_rng(seed, domain::SETS, j as u64);
            let mut idx: Vec<u32> = rand::seq::index::sample(&mut rng, pool_size, users_per_set)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();

    Ok(Dataset {
        n,
        pool,
        sets,
        num_train,
        num_test,
    })
}

const DATASET_MAGIC: &[u8; 4] = b"SNCH";
const DATASET_VERSION: u32 = 1;

/// JSON sidecar stored next to the binary dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub geometry: ArrayGeometry,
    pub config: ChannelModelConfig,
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
}

/// Writes the binary dataset: "SNCH" magic, version, N, pool_size, num_sets,
/// users_per_set, then pool entries as interleaved (re, im) little-endian
/// f64, then set tuples as little-endian u32.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), ChannelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.n as u32).to_le_bytes())?;
    w.write_all(&(ds.pool.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.sets.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.users_per_set() as u32).to_le_bytes())?;
    for h in &ds.pool {
        for e in &h.entries {
            w.write_all(&e.re.to_le_bytes())?;
            w.write_all(&e.im.to_le_bytes())?;
        }
    }
    for set in &ds.sets {
        for &i in set {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(path: &Path, split: Option<(usize, usize)>) -> Result<Dataset, ChannelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(ChannelError::BadFile("bad magic".into()));
    }
    let mut u = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32, ChannelError> {
        r.read_exact(&mut u)?;
        Ok(u32::from_le_bytes(u))
    };
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(ChannelError::BadFile(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let pool_size = read_u32(&mut r)? as usize;
    let num_sets = read_u32(&mut r)? as usize;
    let users_per_set = read_u32(&mut r)? as usize;
    let mut pool = Vec::with_capacity(pool_size);
    let mut f = [0u8; 8];
    for i in 0..pool_size {
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut f)?;
            let re = f64::from_le_bytes(f);
            r.read_exact(&mut f)?;
            let im = f64::from_le_bytes(f);
            entries.push(Complex64::new(re, im));
        }
        pool.push(ChannelVector::new(i, entries));
    }
    let mut sets = Vec::with_capacity(num_sets);
    let mut b = [0u8; 4];
    for _ in 0..num_sets {
        let mut set = Vec::with_capacity(users_per_set);
        for _ in 0..users_per_set {
            r.read_exact(&mut b)?;
            let idx = u32::from_le_bytes(b);
            if idx as usize >= pool_size {
                return Err(ChannelError::BadFile(format!("set index {idx} out of range")));
            }
            set.push(idx);
        }
        sets.push(set);
    }
    let (num_train, num_test) = match split {
        Some((tr, te)) => {
            if tr + te > num_sets {
                return Err(ChannelError::InvalidSplit {
                    train: tr,
                    test: te,
                    num_sets,
                });
            }
            (tr, te)
        }
        None => {
            let tr = num_sets * 6 / 7;
            (tr, num_sets - tr)
        }
    };
    Ok(Dataset {
        n,
        pool,
        sets,
        num_train,
        num_test,
    })
}
