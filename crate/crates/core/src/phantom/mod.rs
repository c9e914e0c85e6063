//! Synthetic three-channel phantoms seeded with small elongated (EPVS-like)
//! and cavity-like (lacune-like) objects, plus a simulated rater panel.
//!
//! Channels are ordered t1-like, flair-like, t2-like. The background is a
//! zero-mean smooth field with additive Gaussian noise, so object contrasts
//! are fixed offsets on already-normalized intensities.

pub(crate) mod io;

pub use io::{
    case_dir_name, case_path, load_case, read_case, read_manifest, write_case, write_dataset, Manifest, CASE_JSON,
    MANIFEST_JSON, SEG_RAW, VOLUME_RAW,
};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::LabelField;
use crate::types::{linear_index, voxel_count, Dims, EsoClass, EsoObject, Voxel, Volume};

pub const T1: usize = 0;
pub const FLAIR: usize = 1;
pub const T2: usize = 2;
pub const N_CHANNELS: usize = 3;

const EPVS_T1: f32 = -1.5;
const EPVS_T2: f32 = 2.0;
const LACUNE_T1: f32 = -1.5;
const LACUNE_FLAIR: f32 = -1.5;
const LACUNE_T2: f32 = 2.0;
const LACUNE_RIM_FLAIR: f32 = 1.5;

const MAX_PLACEMENT_ATTEMPTS: usize = 100;
/// Chebyshev gap kept free around every placed object.
const SEPARATION_VOX: i64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub n_objects_range: (usize, usize),
    pub frac_below_10vox: f64,
    pub lacune_fraction: f64,
    pub perfect_agreement_fraction: f64,
    pub n_raters: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing_mm: [1.0, 1.0, 1.0],
            n_objects_range: (15, 40),
            frac_below_10vox: 0.488,
            lacune_fraction: 0.028,
            perfect_agreement_fraction: 0.366,
            n_raters: 6,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
            }
        };
        frac("frac_below_10vox", self.frac_below_10vox)?;
        frac("lacune_fraction", self.lacune_fraction)?;
        frac("perfect_agreement_fraction", self.perfect_agreement_fraction)?;
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::Config(format!("dims {:?} must all be ≥ 16", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!("spacing_mm {:?} must be > 0", self.spacing_mm)));
        }
        let (lo, hi) = self.n_objects_range;
        if lo > hi {
            return Err(Error::Config(format!("n_objects_range ({lo}, {hi}) is empty")));
        }
        if self.n_raters == 0 {
            return Err(Error::Config("n_raters must be ≥ 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be ≥ 0".into()));
        }
        Ok(())
    }

    /// Probability that an EPVS is drawn from the 5–9 voxel band, chosen so
    /// that the overall small-object fraction matches `frac_below_10vox`
    /// (lacunes are never below 10 voxels).
    pub fn small_epvs_probability(&self) -> f64 {
        let epvs = 1.0 - self.lacune_fraction;
        if epvs <= 0.0 {
            0.0
        } else {
            (self.frac_below_10vox / epvs).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub volume: Volume,
    pub objects: Vec<EsoObject>,
    pub seg_mask: LabelField,
}

fn case_rng(seed: u64, case_index: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(case_index.wrapping_mul(2).wrapping_add(lane));
    rng
}

/// Deterministic in `(cfg.seed, case_index)`. Objects that cannot be placed
/// after 100 attempts are skipped.
pub fn generate_case(cfg: &PhantomConfig, case_index: u64) -> Result<Case> {
    cfg.validate()?;
    let mut rng = case_rng(cfg.seed, case_index, 0);
    let dims = cfg.dims;
    let n = voxel_count(dims);

    let mut volume = Volume::zeros(dims, cfg.spacing_mm, N_CHANNELS)?;
    for c in 0..N_CHANNELS {
        fill_background(volume.channel_mut(c), dims, cfg.noise_sigma, &mut rng);
    }

    let mut seg = LabelField::empty(dims, cfg.spacing_mm);
    let mut reserved = vec![false; n];
    let mut objects = Vec::new();
    let (lo, hi) = cfg.n_objects_range;
    let n_objects = rng.random_range(lo..=hi);
    let p_small = cfg.small_epvs_probability();

    for _ in 0..n_objects {
        let class = if rng.random::<f64>() < cfg.lacune_fraction {
            EsoClass::Lacune
        } else {
            EsoClass::Epvs
        };
        let size = match class {
            EsoClass::Lacune => {
                let d: f64 = rng.random_range(3.0..=8.0);
                (PI / 6.0 * d.powi(3)).round() as usize
            }
            _ if rng.random::<f64>() < p_small => rng.random_range(5..=9),
            _ => {
                let l: f64 = rng.random_range(10f64.ln()..=350f64.ln());
                l.exp().round() as usize
            }
        };
        let size = size.clamp(crate::types::MIN_OBJECT_VOXELS, n / 8);
        let Some(voxels) = place_object(&mut rng, class, size, dims, &reserved) else {
            continue;
        };
        let id = objects.len() as u32 + 1;
        for &v in &voxels {
            seg.data[linear_index(dims, v)] = id;
        }
        for v in dilate(&voxels, dims, SEPARATION_VOX) {
            reserved[linear_index(dims, v)] = true;
        }
        paint(&mut volume, &voxels, class);
        objects.push(EsoObject::from_voxels(id, voxels, cfg.spacing_mm, class)?);
    }

    let mut panel_rng = case_rng(cfg.seed, case_index, 1);
    simulate_rater_panel(&mut objects, cfg, &mut panel_rng);
    Ok(Case {
        volume,
        objects,
        seg_mask: seg,
    })
}

fn fill_background(out: &mut [f32], dims: Dims, noise_sigma: f64, rng: &mut impl Rng) {
    // integer wave numbers over the full grid have exactly zero mean
    let waves: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let mut k = [0.0; 3];
            while k == [0.0; 3] {
                k = [0, 1, 2].map(|_| rng.random_range(-2i32..=2) as f64);
            }
            let amp = rng.random_range(0.05..0.2);
            let phase = rng.random_range(0.0..2.0 * PI);
            (k, amp, phase)
        })
        .collect();
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [x as f64 / dims[0] as f64, y as f64 / dims[1] as f64, z as f64 / dims[2] as f64];
                let mut v = 0.0;
                for (k, amp, phase) in &waves {
                    v += amp * (2.0 * PI * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2]) + phase).cos();
                }
                let noise: f64 = StandardNormal.sample(rng);
                out[i] = (v + noise_sigma * noise) as f32;
                i += 1;
            }
        }
    }
    let mean = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
    for v in out.iter_mut() {
        *v = (*v as f64 - mean) as f32;
    }
}

fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0, 1, 2].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|c| c / n);
        }
    }
}

/// The `size` voxels nearest a jittered centre under an ellipsoidal norm.
fn place_object(
    rng: &mut impl Rng,
    class: EsoClass,
    size: usize,
    dims: Dims,
    reserved: &[bool],
) -> Option<Vec<Voxel>> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let ratio: f64 = match class {
            EsoClass::Lacune => rng.random_range(1.0..1.3),
            _ => rng.random_range(3.0..4.5),
        };
        let axis = random_unit(rng);
        let centre = [0, 1, 2].map(|a| rng.random_range(0..dims[a]) as f64 + rng.random_range(-0.5..0.5));
        let voxels = ellipsoid_voxels(centre, axis, ratio, size);
        // keep one voxel of margin for the lacune rim
        let inside = voxels.iter().all(|v| (0..3).all(|a| v[a] >= 1 && v[a] + 2 <= dims[a] as i64));
        if !inside {
            continue;
        }
        let voxels: Vec<Voxel> = voxels.iter().map(|v| v.map(|c| c as usize)).collect();
        if voxels.iter().any(|&v| reserved[linear_index(dims, v)]) {
            continue;
        }
        return Some(voxels);
    }
    None
}

fn ellipsoid_voxels(centre: [f64; 3], axis: [f64; 3], ratio: f64, size: usize) -> Vec<[i64; 3]> {
    // semi-axis of the level set holding `size` unit cells
    let s = (3.0 * size as f64 / (4.0 * PI * ratio)).cbrt();
    let r = (ratio * s).ceil() as i64 + 2;
    let c0 = centre.map(|c| c.round() as i64);
    let mut cand: Vec<(f64, [i64; 3])> = Vec::with_capacity(((2 * r + 1).pow(3)) as usize);
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let v = [c0[0] + dx, c0[1] + dy, c0[2] + dz];
                let d = [0, 1, 2].map(|a| v[a] as f64 - centre[a]);
                let along = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
                let perp2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] - along * along;
                cand.push((along * along / (ratio * ratio) + perp2, [v[2], v[1], v[0]]));
            }
        }
    }
    // order by norm, ties by z, y, x
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<[i64; 3]> = cand
        .into_iter()
        .take(size)
        .map(|(_, v)| [v[2], v[1], v[0]])
        .collect();
    out.sort_by_key(|v| (v[2], v[1], v[0]));
    out
}

fn neighbours_within(v: Voxel, dims: Dims, r: i64) -> impl Iterator<Item = Voxel> {
    let range = -r..=r;
    range.clone().flat_map(move |dz| {
        let range = -r..=r;
        range.clone().flat_map(move |dy| {
            (-r..=r).filter_map(move |dx| {
                let p = [v[0] as i64 + dx, v[1] as i64 + dy, v[2] as i64 + dz];
                ((0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64)).then(|| p.map(|c| c as usize))
            })
        })
    })
}

/// Chebyshev dilation of a voxel set (includes the set itself).
fn dilate(voxels: &[Voxel], dims: Dims, r: i64) -> Vec<Voxel> {
    let mut mark = std::collections::BTreeSet::new();
    for &v in voxels {
        mark.extend(neighbours_within(v, dims, r));
    }
    mark.into_iter().collect()
}

fn paint(volume: &mut Volume, voxels: &[Voxel], class: EsoClass) {
    let dims = volume.dims;
    let n = volume.n_voxels();
    let (t1, flair, t2) = match class {
        EsoClass::Lacune => (LACUNE_T1, LACUNE_FLAIR, LACUNE_T2),
        _ => (EPVS_T1, 0.0, EPVS_T2),
    };
    for &v in voxels {
        let i = linear_index(dims, v);
        volume.data[T1 * n + i] += t1;
        volume.data[FLAIR * n + i] += flair;
        volume.data[T2 * n + i] += t2;
    }
    if class == EsoClass::Lacune {
        let own: std::collections::BTreeSet<Voxel> = voxels.iter().copied().collect();
        for v in dilate(voxels, dims, 1) {
            if !own.contains(&v) {
                volume.data[FLAIR * n + linear_index(dims, v)] += LACUNE_RIM_FLAIR;
            }
        }
    }
}

/// Rater confusion when the panel does not agree unanimously.
const VOTE_TRUE: f64 = 0.6;
const VOTE_UNDECIDED: f64 = 0.25;
const VOTE_OTHER: f64 = 0.1;
const VOTE_NOTHING: f64 = 0.05;

fn noisy_vote(truth: EsoClass, rng: &mut impl Rng) -> EsoClass {
    let other = match truth {
        EsoClass::Lacune => EsoClass::Epvs,
        _ => EsoClass::Lacune,
    };
    let total = VOTE_TRUE + VOTE_UNDECIDED + VOTE_OTHER + VOTE_NOTHING;
    let u = rng.random::<f64>() * total;
    if u < VOTE_TRUE {
        truth
    } else if u < VOTE_TRUE + VOTE_UNDECIDED {
        EsoClass::Undecided
    } else if u < VOTE_TRUE + VOTE_UNDECIDED + VOTE_OTHER {
        other
    } else {
        EsoClass::Nothing
    }
}

/// Fills `rater_votes`. With probability `perfect_agreement_fraction` the
/// panel votes the true class unanimously; otherwise votes are drawn
/// independently and redrawn until at least two raters disagree.
pub fn simulate_rater_panel(objects: &mut [EsoObject], cfg: &PhantomConfig, rng: &mut impl Rng) {
    let n = cfg.n_raters;
    for o in objects.iter_mut() {
        let truth = o.true_class;
        if rng.random::<f64>() < cfg.perfect_agreement_fraction || n < 2 {
            o.rater_votes = vec![truth; n];
            continue;
        }
        loop {
            let votes: Vec<EsoClass> = (0..n).map(|_| noisy_vote(truth, rng)).collect();
            if votes.iter().any(|&v| v != votes[0]) {
                o.rater_votes = votes;
                break;
            }
        }
    }
}

/// Aggregate statistics over a set of cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSummary {
    pub n_cases: usize,
    pub n_objects: usize,
    pub frac_below_10vox: f64,
    pub lacune_fraction: f64,
    pub unanimous_fraction: f64,
    /// Object counts for sizes `[5,10) [10,20) [20,50) [50,100) [100,∞)`.
    pub size_histogram: [usize; 5],
}

pub fn summarize<'a>(objects: impl IntoIterator<Item = &'a EsoObject>, n_cases: usize) -> PhantomSummary {
    let mut n = 0usize;
    let (mut small, mut lac, mut unan) = (0usize, 0usize, 0usize);
    let mut hist = [0usize; 5];
    for o in objects {
        n += 1;
        let size = o.voxels.len();
        small += (size < 10) as usize;
        lac += (o.true_class == EsoClass::Lacune) as usize;
        unan += (!o.rater_votes.is_empty() && o.agreement_level() == o.rater_votes.len()) as usize;
        let b = match size {
            0..=9 => 0,
            10..=19 => 1,
            20..=49 => 2,
            50..=99 => 3,
            _ => 4,
        };
        hist[b] += 1;
    }
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    PhantomSummary {
        n_cases,
        n_objects: n,
        frac_below_10vox: frac(small),
        lacune_fraction: frac(lac),
        unanimous_fraction: frac(unan),
        size_histogram: hist,
    }
}
