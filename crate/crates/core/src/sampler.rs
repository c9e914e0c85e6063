//! Weighted patch-centre draws and balanced per-voxel proposal-network samples.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::ScalarField;
use crate::types::{linear_index, voxel_count, voxel_from_linear, Dims, Voxel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub n_rpn_samples: usize,
    pub positive_fraction: f64,
    /// Gaussian smoothing of the sampling weight map terms.
    pub weight_sigma_mm: f64,
    /// Lower bound on every weight before normalization.
    pub weight_floor: f64,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: 64,
            n_rpn_samples: 300,
            positive_fraction: 0.5,
            weight_sigma_mm: 2.0,
            weight_floor: 1e-5,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self, volume_dims: Option<Dims>) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be ≥ 1".into()));
        }
        if let Some(d) = volume_dims {
            if d.iter().any(|&n| n < self.patch_size) {
                return Err(Error::Config(format!(
                    "patch_size {} exceeds volume dims {d:?}",
                    self.patch_size
                )));
            }
        }
        if self.n_rpn_samples < 2 {
            return Err(Error::Config("n_rpn_samples must be ≥ 2".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::Config("positive_fraction must lie in [0, 1]".into()));
        }
        if !(self.weight_sigma_mm >= 0.0) || !(self.weight_floor > 0.0) {
            return Err(Error::Config("weight_sigma_mm must be ≥ 0 and weight_floor > 0".into()));
        }
        Ok(())
    }

    /// Patch extent inside a volume of `dims` (never larger than the volume).
    pub fn extent(&self, dims: Dims) -> Dims {
        dims.map(|d| d.min(self.patch_size))
    }
}

/// Ground-truth object as seen from inside a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchObject {
    /// Centre of mass relative to the patch origin, in voxels.
    pub centre_vox: [f64; 3],
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnSample {
    pub voxel: Voxel,
    pub is_positive: bool,
    pub target_offset_vox: [f64; 3],
    pub target_scale: f64,
}

/// Radius (voxels) around a centre within which voxels count as positives.
pub fn positive_radius(scale: f64) -> f64 {
    (scale / 2.0).max(1.0)
}

/// I.i.d. draws from the categorical distribution `w` by inverse CDF.
pub fn sample_patch_centres(w: &ScalarField, n: usize, seed: u64) -> Result<Vec<Voxel>> {
    let total = w.sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized(total));
    }
    if n == 0 {
        return Err(Error::Config("at least one centre must be drawn".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = CategoricalSampler::new(&w.data);
    Ok((0..n)
        .map(|_| voxel_from_linear(w.dims, sampler.draw(&mut rng)))
        .collect())
}

/// Inverse-CDF sampler over a non-negative weight vector.
#[derive(Debug, Clone)]
pub struct CategoricalSampler {
    cdf: Vec<f64>,
}

impl CategoricalSampler {
    pub fn new(weights: &[f64]) -> Self {
        let mut acc = 0.0;
        let cdf = weights
            .iter()
            .map(|&w| {
                acc += w.max(0.0);
                acc
            })
            .collect();
        Self { cdf }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cdf.last().expect("non-empty weights");
        let u = rng.random::<f64>() * total;
        let i = self.cdf.partition_point(|&c| c <= u);
        // skip trailing zero-weight cells that share the final cumulative value
        i.min(self.cdf.len() - 1)
    }
}

/// Origin of an `extent`-sized window centred on `centre`, clamped into the volume.
pub fn patch_origin(centre: Voxel, extent: Dims, dims: Dims) -> Voxel {
    let mut o = [0; 3];
    for a in 0..3 {
        let lo = centre[a].saturating_sub(extent[a] / 2);
        o[a] = lo.min(dims[a].saturating_sub(extent[a]));
    }
    o
}

/// Up to `n·positive_fraction` positives near object centres, negatives
/// uniformly over the remaining voxels, all without replacement.
pub fn select_rpn_samples(
    patch_dims: Dims,
    objects: &[PatchObject],
    spec: &PatchSpec,
    seed: u64,
) -> Result<Vec<RpnSample>> {
    let total = voxel_count(patch_dims);
    if total == 0 {
        return Err(Error::EmptyInput("patch has no voxels"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // candidate positives keyed by linear index: (squared distance, object)
    let mut candidates: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (oi, o) in objects.iter().enumerate() {
        let r = positive_radius(o.scale);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = (o.centre_vox[a] - r).ceil().max(0.0);
            let h = (o.centre_vox[a] + r).floor().min(patch_dims[a] as f64 - 1.0);
            if h < l {
                lo[a] = 1;
                hi[a] = 0;
            } else {
                lo[a] = l as usize;
                hi[a] = h as usize;
            }
        }
        if (0..3).any(|a| hi[a] < lo[a]) {
            continue;
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let d2 = (x as f64 - o.centre_vox[0]).powi(2)
                        + (y as f64 - o.centre_vox[1]).powi(2)
                        + (z as f64 - o.centre_vox[2]).powi(2);
                    if d2 > r * r {
                        continue;
                    }
                    let i = linear_index(patch_dims, [x, y, z]);
                    let e = candidates.entry(i).or_insert((d2, oi));
                    if d2 < e.0 {
                        *e = (d2, oi);
                    }
                }
            }
        }
    }

    let n = spec.n_rpn_samples.min(total);
    let want_pos = ((spec.n_rpn_samples as f64 * spec.positive_fraction).floor() as usize).min(n);
    let cand: Vec<(usize, usize)> = candidates.iter().map(|(&i, &(_, o))| (i, o)).collect();
    let n_pos = want_pos.min(cand.len());
    let mut picked: Vec<(usize, usize)> = index::sample(&mut rng, cand.len(), n_pos)
        .into_iter()
        .map(|k| cand[k])
        .collect();
    picked.sort_unstable();

    let mut out = Vec::with_capacity(n);
    for (i, oi) in picked {
        let v = voxel_from_linear(patch_dims, i);
        let o = &objects[oi];
        out.push(RpnSample {
            voxel: v,
            is_positive: true,
            target_offset_vox: [0, 1, 2].map(|a| o.centre_vox[a] - v[a] as f64),
            target_scale: o.scale,
        });
    }

    let n_neg = n - out.len();
    let pool: Vec<usize> = (0..total).filter(|i| !candidates.contains_key(i)).collect();
    let n_neg = n_neg.min(pool.len());
    let mut neg: Vec<usize> = index::sample(&mut rng, pool.len(), n_neg)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    neg.sort_unstable();
    out.extend(neg.into_iter().map(|i| RpnSample {
        voxel: voxel_from_linear(patch_dims, i),
        is_positive: false,
        target_offset_vox: [0.0; 3],
        target_scale: 0.0,
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn degenerate_distribution() {
        let mut w = ScalarField::filled([6, 6, 6], [1.0; 3], 0.0);
        w.data[linear_index([6, 6, 6], [2, 3, 4])] = 1.0;
        let c = sample_patch_centres(&w, 500, 9).unwrap();
        assert!(c.iter().all(|&v| v == [2, 3, 4]));
    }

    #[test]
    fn deterministic_and_validated() {
        let w = ScalarField::filled([4, 4, 4], [1.0; 3], 1.0 / 64.0);
        assert_eq!(sample_patch_centres(&w, 50, 3).unwrap(), sample_patch_centres(&w, 50, 3).unwrap());
        let bad = ScalarField::filled([4, 4, 4], [1.0; 3], 1.0);
        assert!(matches!(sample_patch_centres(&bad, 5, 0), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn origin_clamps_into_volume() {
        assert_eq!(patch_origin([1, 30, 63], [32; 3], [64, 64, 64]), [0, 14, 32]);
    }

    #[test]
    fn empty_patch_gives_only_negatives() {
        let s = select_rpn_samples([16, 16, 16], &[], &PatchSpec::default(), 1).unwrap();
        assert_eq!(s.len(), 300);
        assert!(s.iter().all(|s| !s.is_positive));
    }

    #[test]
    fn single_object_positives_point_at_centre() {
        let obj = PatchObject {
            centre_vox: [8.3, 7.6, 9.1],
            scale: 6.0,
        };
        let s = select_rpn_samples([20, 20, 20], &[obj], &PatchSpec::default(), 5).unwrap();
        let pos: Vec<_> = s.iter().filter(|s| s.is_positive).collect();
        assert!(!pos.is_empty());
        assert_eq!(s.len(), 300);
        for p in pos {
            let d: f64 = (0..3).map(|a| p.target_offset_vox[a].powi(2)).sum::<f64>().sqrt();
            assert!(d <= 3.0 + 1e-12);
            for a in 0..3 {
                assert!((p.voxel[a] as f64 + p.target_offset_vox[a] - obj.centre_vox[a]).abs() < 1e-12);
            }
            assert_eq!(p.target_scale, 6.0);
        }
    }

    #[test]
    fn abundant_positives_split_evenly() {
        let objs: Vec<PatchObject> = (0..4)
            .map(|i| PatchObject {
                centre_vox: [6.0 + 10.0 * (i % 2) as f64, 6.0 + 10.0 * (i / 2) as f64, 10.0],
                scale: 12.0,
            })
            .collect();
        let s = select_rpn_samples([24, 24, 24], &objs, &PatchSpec::default(), 2).unwrap();
        assert_eq!(s.iter().filter(|s| s.is_positive).count(), 150);
        assert_eq!(s.iter().filter(|s| !s.is_positive).count(), 150);
    }

    proptest! {
        #[test]
        fn selection_invariants(
            centres in prop::collection::vec((prop::array::uniform3(0.0f64..16.0), 1.0f64..12.0), 0..5),
            seed in any::<u64>(),
        ) {
            let objs: Vec<PatchObject> = centres.iter().map(|&(c, s)| PatchObject { centre_vox: c, scale: s }).collect();
            let spec = PatchSpec::default();
            let s = select_rpn_samples([16, 16, 16], &objs, &spec, seed).unwrap();
            prop_assert_eq!(s.len(), spec.n_rpn_samples);
            let uniq: HashSet<Voxel> = s.iter().map(|s| s.voxel).collect();
            prop_assert_eq!(uniq.len(), s.len());
            for p in s.iter().filter(|s| s.is_positive) {
                let target = [0, 1, 2].map(|a| p.voxel[a] as f64 + p.target_offset_vox[a]);
                let hit = objs.iter().any(|o| (0..3).all(|a| (o.centre_vox[a] - target[a]).abs() < 1e-9)
                    && p.target_offset_vox.iter().map(|d| d * d).sum::<f64>().sqrt()
                        <= positive_radius(p.target_scale) + 1e-9);
                prop_assert!(hit);
            }
        }
    }
}
