//! Deterministic synthetic arc datasets.
//!
//! Each arc is drawn from one of a handful of site profiles. Within a profile
//! the aperture center follows a slow sinusoidal trajectory over control
//! points, the open-leaf envelope is a sum of Gaussian bumps over the leaf axis,
//! and the opening width is modulated over the arc. The target projection
//! slides along the leaf axis with gantry angle, and a few localized
//! excursions let groups of leaves drift and open or close over part of the
//! arc. A final envelope pass bounds the per-control-point and per-leaf
//! increments of both leaf banks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arcdata::{
    cell, Arc, ArcDataset, NormalizationSpec, NormalizedArc, Provenance, CHANNEL_CELLS,
    N_CONTROL_POINTS, N_LEAVES,
};
use crate::error::{Error, Result};
use crate::stats::median_in_place;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_arcs: usize,
    pub n_sites: usize,
    pub seed: u64,
    /// Largest allowed |Δ position| between consecutive control points (mm).
    pub max_step_control_point: f64,
    /// Largest allowed |Δ position| between adjacent leaves (mm).
    pub max_step_leaf: f64,
    /// Mean number of localized leaf excursions per arc.
    pub excursions: f64,
    /// Standard deviation of an excursion's peak shift (mm).
    pub excursion_amplitude: f64,
    /// Typical amplitude of the aperture's sweep along the leaf axis (leaves).
    pub sweep_amplitude: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_arcs: 400,
            n_sites: 4,
            seed: 0,
            max_step_control_point: 5.0,
            max_step_leaf: 10.0,
            excursions: 6.0,
            excursion_amplitude: 8.0,
            sweep_amplitude: 16.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_arcs == 0 || self.n_sites == 0 {
            return Err(Error::Config("n_arcs and n_sites must be >= 1".into()));
        }
        if !(self.max_step_control_point >= 0.0 && self.max_step_leaf >= 0.0) {
            return Err(Error::Config("smoothness bounds must be >= 0".into()));
        }
        if !(self.excursions >= 0.0 && self.excursion_amplitude >= 0.0 && self.sweep_amplitude >= 0.0) {
            return Err(Error::Config("excursion and sweep parameters must be >= 0".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A Gaussian bump over the leaf axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl Bump {
    fn eval(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.width;
        self.amplitude * (-0.5 * u * u).exp()
    }
}

/// Parameter priors shared by all arcs of one treatment site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    /// Mean aperture center along the leaf travel direction (mm).
    pub center_offset: f64,
    /// Aperture center trajectory: (amplitude mm, cycles per arc).
    pub trajectory: Vec<(f64, f64)>,
    /// Opening width modulation: (relative amplitude, cycles per arc).
    pub width_modulation: Vec<(f64, f64)>,
    /// Open-leaf envelope (gap, mm).
    pub gap_bumps: Vec<Bump>,
    /// Asymmetry of the aperture about its center (position, mm).
    pub position_bumps: Vec<Bump>,
    /// Gap of leaf pairs outside the target projection (mm).
    pub closed_gap: f64,
}

impl SiteProfile {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let n_traj = rng.gen_range(1..=3);
        let trajectory = (0..n_traj)
            .map(|k| (rng.gen_range(2.0..7.0) / (k + 1) as f64, rng.gen_range(0.5..2.5) * (k + 1) as f64))
            .collect();
        let width_modulation = (0..rng.gen_range(1..=2))
            .map(|_| (rng.gen_range(0.1..0.35), rng.gen_range(0.5..3.0)))
            .collect();
        let mid = N_LEAVES as f64 / 2.0;
        let gap_bumps = (0..rng.gen_range(1..=3))
            .map(|_| Bump {
                center: mid + rng.gen_range(-14.0..14.0),
                width: rng.gen_range(3.0..9.0),
                amplitude: rng.gen_range(18.0..45.0),
            })
            .collect();
        let position_bumps = (0..rng.gen_range(1..=4))
            .map(|_| Bump {
                center: mid + rng.gen_range(-20.0..20.0),
                width: rng.gen_range(2.0..8.0),
                amplitude: rng.gen_range(-8.0..8.0),
            })
            .collect();
        Self {
            center_offset: rng.gen_range(-3.0..3.0),
            trajectory,
            width_modulation,
            gap_bumps,
            position_bumps,
            closed_gap: rng.gen_range(11.0..17.0),
        }
    }

    /// Draw one arc (flat bank grids) from this profile, before smoothing.
    pub fn draw_banks(&self, excursions: (f64, f64), sweep_amplitude: f64, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let jitter = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| rng.gen_range(lo..hi);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let tau = std::f64::consts::TAU;
        let nc = N_CONTROL_POINTS as f64;

        let center_offset = self.center_offset + 3.0 * normal.sample(rng);
        let trajectory: Vec<(f64, f64, f64)> = self
            .trajectory
            .iter()
            .map(|&(a, f)| (a * jitter(rng, 0.6, 1.4), f * jitter(rng, 0.85, 1.15), jitter(rng, 0.0, tau)))
            .collect();
        let width_mod: Vec<(f64, f64, f64)> = self
            .width_modulation
            .iter()
            .map(|&(a, f)| (a * jitter(rng, 0.6, 1.4), f * jitter(rng, 0.85, 1.15), jitter(rng, 0.0, tau)))
            .collect();
        let jitter_bump = |b: &Bump, rng: &mut dyn rand::RngCore| Bump {
            center: b.center + 2.5 * normal.sample(rng),
            width: b.width * jitter(rng, 0.8, 1.2),
            amplitude: b.amplitude * jitter(rng, 0.7, 1.3),
        };
        let gap_bumps: Vec<Bump> = self.gap_bumps.iter().map(|b| jitter_bump(b, rng)).collect();
        let position_bumps: Vec<Bump> = self.position_bumps.iter().map(|b| jitter_bump(b, rng)).collect();
        let closed_gap = self.closed_gap * jitter(rng, 0.7, 1.3);

        // Low-amplitude smooth residual field.
        let residual: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    jitter(rng, 0.3, 1.2),
                    jitter(rng, 0.5, 3.0) / nc,
                    jitter(rng, 0.02, 0.12),
                    jitter(rng, 0.0, tau),
                )
            })
            .collect();

        // Localized excursions: a group of leaves drifts and opens or closes
        // over part of the arc.
        let (rate, amp) = excursions;
        let count = if rate > 0.0 {
            rand_distr::Poisson::new(rate).expect("positive rate").sample(rng) as usize
        } else {
            0
        };
        let mid = N_LEAVES as f64 / 2.0;
        let blobs: Vec<[f64; 6]> = (0..count)
            .map(|_| {
                [
                    jitter(rng, 0.0, nc),
                    mid + 12.0 * normal.sample(rng),
                    jitter(rng, 3.0, 12.0),
                    jitter(rng, 1.5, 5.0),
                    amp * normal.sample(rng),
                    amp * normal.sample(rng),
                ]
            })
            .collect();

        // The whole aperture slides along the leaf axis as the gantry turns.
        let sweep = (sweep_amplitude * jitter(rng, 0.5, 1.5), jitter(rng, 0.5, 1.5), jitter(rng, 0.0, tau));
        let mut bank_a = vec![0.0; CHANNEL_CELLS];
        let mut bank_b = vec![0.0; CHANNEL_CELLS];
        for c in 0..N_CONTROL_POINTS {
            let t = c as f64;
            let center = center_offset
                + trajectory
                    .iter()
                    .map(|&(a, f, p)| a * (tau * f * t / nc + p).sin())
                    .sum::<f64>();
            let width = (1.0
                + width_mod
                    .iter()
                    .map(|&(a, f, p)| a * (tau * f * t / nc + p).sin())
                    .sum::<f64>())
            .max(0.0);
            let s_c = sweep.0 * (tau * sweep.1 * t / nc + sweep.2).sin();
            for l in 0..N_LEAVES {
                let x = l as f64 - s_c;
                let envelope: f64 = gap_bumps.iter().map(|b| b.eval(x)).sum();
                let (mut drift, mut opening) = (0.0, 0.0);
                for &[c0, l0, sc, sl, dp, dg] in &blobs {
                    let (u, v) = ((t - c0) / sc, (x - l0) / sl);
                    let g = (-0.5 * (u * u + v * v)).exp();
                    drift += dp * g;
                    opening += dg * g;
                }
                let gap = (closed_gap + width * envelope + opening).max(0.0);
                let shift: f64 = position_bumps.iter().map(|b| b.eval(x)).sum::<f64>() + drift;
                let eps: f64 = residual
                    .iter()
                    .map(|&(a, fc, fl, p)| a * (tau * (fc * t + fl * x) + p).sin())
                    .sum();
                let a = center + shift + eps - 0.5 * gap;
                bank_a[cell(c, l)] = a;
                bank_b[cell(c, l)] = a + gap;
            }
        }
        (bank_a, bank_b)
    }
}

/// Midpoint of the lower and upper Lipschitz envelopes of `grid`, which has
/// |Δ| ≤ `step_cp` along control points and ≤ `step_leaf` along leaves.
fn lipschitz_midpoint(grid: &mut [f64], step_cp: f64, step_leaf: f64) {
    if !step_cp.is_finite() && !step_leaf.is_finite() {
        return;
    }
    let mut lower = grid.to_vec();
    let mut upper = grid.to_vec();
    envelope(&mut lower, step_cp, step_leaf, |a, b| a.min(b), 1.0);
    envelope(&mut upper, step_cp, step_leaf, |a, b| a.max(b), -1.0);
    for ((g, lo), hi) in grid.iter_mut().zip(&lower).zip(&upper) {
        *g = 0.5 * (lo + hi);
    }
}

fn envelope(g: &mut [f64], step_cp: f64, step_leaf: f64, pick: impl Fn(f64, f64) -> f64, sign: f64) {
    let (nc, nl) = (N_CONTROL_POINTS, N_LEAVES);
    for l in 0..nl {
        for c in 1..nc {
            g[cell(c, l)] = pick(g[cell(c, l)], g[cell(c - 1, l)] + sign * step_cp);
        }
        for c in (0..nc - 1).rev() {
            g[cell(c, l)] = pick(g[cell(c, l)], g[cell(c + 1, l)] + sign * step_cp);
        }
    }
    for c in 0..nc {
        for l in 1..nl {
            g[cell(c, l)] = pick(g[cell(c, l)], g[cell(c, l - 1)] + sign * step_leaf);
        }
        for l in (0..nl - 1).rev() {
            g[cell(c, l)] = pick(g[cell(c, l)], g[cell(c, l + 1)] + sign * step_leaf);
        }
    }
}

/// Bound the increments of both banks and restore `bank_b >= bank_a`.
pub fn enforce_smoothness(bank_a: &mut [f64], bank_b: &mut [f64], bounds: (f64, f64)) {
    let (step_cp, step_leaf) = bounds;
    lipschitz_midpoint(bank_a, step_cp, step_leaf);
    lipschitz_midpoint(bank_b, step_cp, step_leaf);
    // max of two bounded-increment grids keeps the bounds
    for (a, b) in bank_a.iter().zip(bank_b.iter_mut()) {
        if *b < *a {
            *b = *a;
        }
    }
}

/// Per-arc RNG stream derived from the dataset seed and the arc index.
pub fn arc_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn site_profiles(cfg: &GeneratorConfig) -> Vec<SiteProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    (0..cfg.n_sites).map(|_| SiteProfile::sample(&mut rng)).collect()
}

/// Draw arc `index` of the dataset; returns the site index and the arc.
pub fn generate_arc(cfg: &GeneratorConfig, sites: &[SiteProfile], index: usize) -> (usize, Arc) {
    let mut rng = arc_stream(cfg.seed, index as u64);
    let site = rng.gen_range(0..sites.len());
    let (mut a, mut b) = sites[site].draw_banks((cfg.excursions, cfg.excursion_amplitude), cfg.sweep_amplitude, &mut rng);
    enforce_smoothness(&mut a, &mut b, (cfg.max_step_control_point, cfg.max_step_leaf));
    let arc = Arc::from_banks(format!("arc-{index:05}"), &a, &b).expect("bank_b >= bank_a by construction");
    (site, arc)
}

pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<ArcDataset> {
    use rayon::prelude::*;
    cfg.validate()?;
    let sites = site_profiles(cfg);
    let arcs: Vec<Arc> = (0..cfg.n_arcs)
        .into_par_iter()
        .map(|i| generate_arc(cfg, &sites, i).1)
        .collect();
    ArcDataset::new(
        arcs,
        Some(Provenance {
            seed: cfg.seed,
            config_digest: cfg.digest(),
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Gaussian noise standard deviation in mm (divided by each channel scale).
    pub noise_sigma: f64,
    pub flip_horizontal: f64,
    pub flip_vertical: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            flip_horizontal: 0.5,
            flip_vertical: 0.5,
        }
    }
}

impl AugmentationConfig {
    pub fn none() -> Self {
        Self {
            noise_sigma: 0.0,
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !(self.noise_sigma >= 0.0) || !p_ok(self.flip_horizontal) || !p_ok(self.flip_vertical) {
            return Err(Error::Config(format!("invalid augmentation config {self:?}")));
        }
        Ok(())
    }
}

/// Reverse the leaf axis of every control point.
pub fn flip_horizontal(data: &mut [f64]) {
    for row in data.chunks_mut(N_LEAVES) {
        row.reverse();
    }
}

/// Reverse the control-point axis of each channel.
pub fn flip_vertical(data: &mut [f64]) {
    for channel in data.chunks_mut(CHANNEL_CELLS) {
        for c in 0..N_CONTROL_POINTS / 2 {
            let (top, bottom) = channel.split_at_mut((N_CONTROL_POINTS - 1 - c) * N_LEAVES);
            top[c * N_LEAVES..(c + 1) * N_LEAVES].swap_with_slice(&mut bottom[..N_LEAVES]);
        }
    }
}

pub fn augment(
    arc: &NormalizedArc,
    cfg: &AugmentationConfig,
    norm: &NormalizationSpec,
    rng: &mut impl Rng,
) -> NormalizedArc {
    let mut data = arc.as_slice().to_vec();
    if rng.gen_bool(cfg.flip_horizontal) {
        flip_horizontal(&mut data);
    }
    if rng.gen_bool(cfg.flip_vertical) {
        flip_vertical(&mut data);
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for (i, v) in data.iter_mut().enumerate() {
            *v += cfg.noise_sigma / norm.scale_of(i) * normal.sample(rng);
        }
    }
    NormalizedArc::from_vec(data).expect("shape preserved").clamp_gaps()
}

/// Shuffle with `seed` and cut into `(train, val)`.
pub fn split(ds: &ArcDataset, train_fraction: f64, seed: u64) -> Result<(ArcDataset, ArcDataset)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} not in (0, 1]")));
    }
    let n = ds.len();
    let n_train = ((train_fraction * n as f64 + 1e-9).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| ds.arcs[i].clone()).collect::<Vec<_>>();
    Ok((
        ArcDataset {
            arcs: pick(&order[..n_train]),
            provenance: ds.provenance.clone(),
        },
        ArcDataset {
            arcs: pick(&order[n_train..]),
            provenance: ds.provenance.clone(),
        },
    ))
}

/// `(median |position|, median gap)` over all cells of all arcs, in mm.
pub fn channel_medians(ds: &ArcDataset) -> (f64, f64) {
    let mut pos: Vec<f64> = ds.arcs.iter().flat_map(|a| a.positions().iter().map(|p| p.abs())).collect();
    let mut gap: Vec<f64> = ds.arcs.iter().flat_map(|a| a.gaps().iter().copied()).collect();
    (median_in_place(&mut pos), median_in_place(&mut gap))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_arcs: n,
            seed: 11,
            ..GeneratorConfig::default()
        }
    }

    fn max_steps(grid: &[f64]) -> (f64, f64) {
        let mut cp: f64 = 0.0;
        let mut leaf: f64 = 0.0;
        for c in 0..N_CONTROL_POINTS {
            for l in 0..N_LEAVES {
                if c + 1 < N_CONTROL_POINTS {
                    cp = cp.max((grid[cell(c + 1, l)] - grid[cell(c, l)]).abs());
                }
                if l + 1 < N_LEAVES {
                    leaf = leaf.max((grid[cell(c, l + 1)] - grid[cell(c, l)]).abs());
                }
            }
        }
        (cp, leaf)
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&small_cfg(6)).unwrap();
        let b = generate_dataset(&small_cfg(6)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&GeneratorConfig { seed: 12, ..small_cfg(6) }).unwrap();
        assert_ne!(a.arcs, c.arcs);
    }

    #[test]
    fn smoothness_and_gaps() {
        let ds = generate_dataset(&small_cfg(20)).unwrap();
        for arc in &ds.arcs {
            assert!(arc.gaps().iter().all(|&g| g >= 0.0));
            let (a, b) = arc.to_banks();
            for grid in [&a, &b] {
                let (cp, leaf) = max_steps(grid);
                assert!(cp <= 5.0 + 1e-9, "control-point step {cp}");
                assert!(leaf <= 10.0 + 1e-9, "leaf step {leaf}");
            }
        }
    }

    #[test]
    fn zero_bound_freezes_control_points() {
        let cfg = GeneratorConfig {
            max_step_control_point: 0.0,
            ..small_cfg(3)
        };
        for arc in generate_dataset(&cfg).unwrap().arcs {
            for c in 1..N_CONTROL_POINTS {
                for l in 0..N_LEAVES {
                    assert_eq!(arc.position(c, l), arc.position(0, l));
                    assert_eq!(arc.gap(c, l), arc.gap(0, l));
                }
            }
        }
    }

    #[test]
    fn same_site_arcs_are_closer() {
        let cfg = small_cfg(60);
        let sites = site_profiles(&cfg);
        let arcs: Vec<(usize, Vec<f64>)> = (0..cfg.n_arcs)
            .map(|i| {
                let (s, a) = generate_arc(&cfg, &sites, i);
                (s, a.to_vec())
            })
            .collect();
        let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        for i in 0..arcs.len() {
            for j in i + 1..arcs.len() {
                let d = dist(&arcs[i].1, &arcs[j].1);
                if arcs[i].0 == arcs[j].0 {
                    same.push(d);
                } else {
                    diff.push(d);
                }
            }
        }
        assert!(same.len() >= 30 && diff.len() >= 30);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) < mean(&diff), "{} vs {}", mean(&same), mean(&diff));
    }

    #[test]
    fn channel_medians_near_clinical() {
        for seed in [0, 1] {
            let ds = generate_dataset(&GeneratorConfig {
                n_arcs: 1874,
                seed,
                ..GeneratorConfig::default()
            })
            .unwrap();
            let (pos, gap) = channel_medians(&ds);
            assert!((pos - 10.5).abs() <= 0.3 * 10.5, "median |position| {pos}");
            assert!((gap - 16.8).abs() <= 0.3 * 16.8, "median gap {gap}");
        }
    }

    #[test]
    fn flips_are_involutions() {
        let base: Vec<f64> = (0..2 * CHANNEL_CELLS).map(|i| i as f64).collect();
        let mut d = base.clone();
        flip_horizontal(&mut d);
        assert_eq!(d[0], (N_LEAVES - 1) as f64);
        flip_horizontal(&mut d);
        assert_eq!(d, base);
        flip_vertical(&mut d);
        assert_eq!(d[0], ((N_CONTROL_POINTS - 1) * N_LEAVES) as f64);
        assert_eq!(d[CHANNEL_CELLS], (CHANNEL_CELLS + (N_CONTROL_POINTS - 1) * N_LEAVES) as f64);
        flip_vertical(&mut d);
        assert_eq!(d, base);
    }

    #[test]
    fn augmentation_contracts() {
        let norm = NormalizationSpec::default();
        let ds = generate_dataset(&small_cfg(4)).unwrap();
        let x = ds.arcs[0].normalize(&norm);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(augment(&x, &AugmentationConfig::none(), &norm, &mut rng), x);

        let noisy = AugmentationConfig {
            noise_sigma: 20.0,
            ..AugmentationConfig::default()
        };
        let zero_gap = NormalizedArc::zeros();
        for _ in 0..10_000 {
            let y = augment(&zero_gap, &noisy, &norm, &mut rng);
            assert!(y.gaps().iter().all(|&g| g >= 0.0));
            assert_eq!(y.as_slice().len(), x.as_slice().len());
        }
    }

    #[test]
    fn split_sizes() {
        let arcs: Vec<Arc> = (0..1874)
            .map(|i| Arc::new(format!("a{i}"), vec![0.0; CHANNEL_CELLS], vec![1.0; CHANNEL_CELLS]).unwrap())
            .collect();
        let ds = ArcDataset::new(arcs, None).unwrap();
        let (tr, va) = split(&ds, 0.9, 5).unwrap();
        assert_eq!((tr.len(), va.len()), (1686, 188));
        let ids: std::collections::HashSet<&str> = tr.arcs.iter().map(|a| a.id()).collect();
        assert!(va.arcs.iter().all(|a| !ids.contains(a.id())));
        let (all, none) = split(&ds, 1.0, 5).unwrap();
        assert_eq!((all.len(), none.len()), (1874, 0));
        let (tr2, _) = split(&ds, 0.9, 5).unwrap();
        assert_eq!(tr.arcs, tr2.arcs);
        let empty = ArcDataset::new(vec![], None).unwrap();
        assert!(matches!(split(&empty, 0.9, 1), Err(Error::EmptyDataset)));
    }
}

