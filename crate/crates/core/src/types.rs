//! Shared volumetric and annotation value types.
//!
//! Coordinates follow one convention throughout the crate: voxel `(x, y, z)`
//! has its centre at `(x·sx, y·sy, z·sz)` millimetres, and dense arrays are
//! laid out channel-major with `x` varying fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts per axis, `[nx, ny, nz]`.
pub type Dims = [usize; 3];

/// Integer voxel index, `[x, y, z]`.
pub type Voxel = [usize; 3];

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, v: Voxel) -> usize {
    (v[2] * dims[1] + v[1]) * dims[0] + v[0]
}

#[inline]
pub fn voxel_from_linear(dims: Dims, i: usize) -> Voxel {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

#[inline]
pub fn voxel_centre_mm(v: Voxel, spacing_mm: [f64; 3]) -> [f64; 3] {
    [
        v[0] as f64 * spacing_mm[0],
        v[1] as f64 * spacing_mm[1],
        v[2] as f64 * spacing_mm[2],
    ]
}

#[inline]
pub fn distance_mm(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn mean_spacing(spacing_mm: [f64; 3]) -> f64 {
    (spacing_mm[0] + spacing_mm[1] + spacing_mm[2]) / 3.0
}

/// Dense multi-channel scalar grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn zeros(dims: Dims, spacing_mm: [f64; 3], channels: usize) -> Result<Self> {
        Self::from_data(dims, spacing_mm, channels, vec![0.0; channels * voxel_count(dims)])
    }

    pub fn from_data(
        dims: Dims,
        spacing_mm: [f64; 3],
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || channels == 0 {
            return Err(Error::Shape(format!(
                "dims {dims:?} and channels {channels} must be positive"
            )));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Shape(format!("spacing {spacing_mm:?} must be > 0")));
        }
        let expected = channels * voxel_count(dims);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "volume data has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            spacing_mm,
            channels,
            data,
        })
    }

    pub fn n_voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.n_voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, v: Voxel) -> f32 {
        self.data[c * self.n_voxels() + linear_index(self.dims, v)]
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }
}

/// Class vocabulary shared by raters and classifier heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EsoClass {
    Nothing,
    Lacune,
    #[serde(rename = "EPVS")]
    Epvs,
    Undecided,
}

impl EsoClass {
    pub const ALL: [EsoClass; 4] = [
        EsoClass::Nothing,
        EsoClass::Lacune,
        EsoClass::Epvs,
        EsoClass::Undecided,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EsoClass::Nothing => "Nothing",
            EsoClass::Lacune => "Lacune",
            EsoClass::Epvs => "EPVS",
            EsoClass::Undecided => "Undecided",
        }
    }
}

impl std::fmt::Display for EsoClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One ground-truth connected component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsoObject {
    pub id: u32,
    pub centre_mm: [f64; 3],
    pub voxels: Vec<Voxel>,
    /// Largest axis-aligned bounding-box extent, in voxels.
    pub scale: f64,
    /// Class the generator drew; raters vote noisily around it.
    pub true_class: EsoClass,
    pub rater_votes: Vec<EsoClass>,
}

pub const MIN_OBJECT_VOXELS: usize = 5;

impl EsoObject {
    pub fn from_voxels(
        id: u32,
        voxels: Vec<Voxel>,
        spacing_mm: [f64; 3],
        true_class: EsoClass,
    ) -> Result<Self> {
        if voxels.len() < MIN_OBJECT_VOXELS {
            return Err(Error::Shape(format!(
                "object {id} has {} voxels, minimum is {MIN_OBJECT_VOXELS}",
                voxels.len()
            )));
        }
        Ok(Self {
            id,
            centre_mm: centre_of_mass_mm(&voxels, spacing_mm),
            scale: largest_extent(&voxels),
            voxels,
            true_class,
            rater_votes: Vec::new(),
        })
    }

    /// Centre of mass in (fractional) voxel units.
    pub fn centre_vox(&self, spacing_mm: [f64; 3]) -> [f64; 3] {
        [
            self.centre_mm[0] / spacing_mm[0],
            self.centre_mm[1] / spacing_mm[1],
            self.centre_mm[2] / spacing_mm[2],
        ]
    }

    pub fn bounding_box(&self) -> (Voxel, Voxel) {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for v in &self.voxels {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    pub fn soft_label(&self) -> Result<SoftLabel> {
        soft_label_from_votes(&self.rater_votes)
    }

    /// Number of raters voting for the modal class.
    pub fn agreement_level(&self) -> usize {
        let mut counts = [0usize; 4];
        for v in &self.rater_votes {
            counts[v.index()] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }
}

pub fn centre_of_mass_mm(voxels: &[Voxel], spacing_mm: [f64; 3]) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    for v in voxels {
        for a in 0..3 {
            acc[a] += v[a] as f64;
        }
    }
    let n = voxels.len().max(1) as f64;
    [
        acc[0] / n * spacing_mm[0],
        acc[1] / n * spacing_mm[1],
        acc[2] / n * spacing_mm[2],
    ]
}

pub fn largest_extent(voxels: &[Voxel]) -> f64 {
    if voxels.is_empty() {
        return 0.0;
    }
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for v in voxels {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    (0..3).map(|a| hi[a] - lo[a] + 1).max().unwrap_or(1) as f64
}

/// Probability vector over [`EsoClass::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel {
    pub p: [f64; 4],
}

impl SoftLabel {
    pub fn one_hot(class: EsoClass) -> Self {
        let mut p = [0.0; 4];
        p[class.index()] = 1.0;
        Self { p }
    }

    pub fn new(p: [f64; 4]) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::TargetNotNormalized(sum));
        }
        Ok(Self { p })
    }

    pub fn argmax(&self) -> EsoClass {
        let mut best = 0;
        for k in 1..4 {
            if self.p[k] > self.p[best] {
                best = k;
            }
        }
        EsoClass::ALL[best]
    }
}

pub fn soft_label_from_votes(votes: &[EsoClass]) -> Result<SoftLabel> {
    if votes.is_empty() {
        return Err(Error::NoRaters);
    }
    let mut counts = [0usize; 4];
    for v in votes {
        counts[v.index()] += 1;
    }
    let n = votes.len() as f64;
    Ok(SoftLabel {
        p: counts.map(|c| c as f64 / n),
    })
}

/// Axis-aligned cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub centre_mm: [f64; 3],
    pub side_mm: f64,
}

impl Cuboid {
    pub fn new(centre_mm: [f64; 3], side_mm: f64) -> Result<Self> {
        if !(side_mm > 0.0) || !side_mm.is_finite() {
            return Err(Error::InvalidBox(format!("side {side_mm} must be > 0")));
        }
        Ok(Self { centre_mm, side_mm })
    }

    pub fn volume_mm3(&self) -> f64 {
        self.side_mm.powi(3)
    }

    /// Half-open containment `[c − s/2, c + s/2)` per axis.
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let h = self.side_mm * 0.5;
        (0..3).all(|a| p[a] >= self.centre_mm[a] - h && p[a] < self.centre_mm[a] + h)
    }
}

pub fn box_intersection_volume(a: &Cuboid, b: &Cuboid) -> f64 {
    let (ha, hb) = (a.side_mm * 0.5, b.side_mm * 0.5);
    let mut vol = 1.0;
    for k in 0..3 {
        let lo = (a.centre_mm[k] - ha).max(b.centre_mm[k] - hb);
        let hi = (a.centre_mm[k] + ha).min(b.centre_mm[k] + hb);
        if hi <= lo {
            return 0.0;
        }
        vol *= hi - lo;
    }
    vol
}

/// Fraction of the predicted box filled by GT voxels, and fraction of GT voxels
/// falling inside the predicted box.
pub fn overlap_ratios(det_box: &Cuboid, gt: &EsoObject, spacing_mm: [f64; 3]) -> Result<(f64, f64)> {
    let box_vol = det_box.volume_mm3();
    if !(box_vol > 0.0) {
        return Err(Error::InvalidBox("zero-volume box".into()));
    }
    if gt.voxels.is_empty() {
        return Err(Error::EmptyInput("ground-truth object has no voxels"));
    }
    let inside = gt
        .voxels
        .iter()
        .filter(|&&v| det_box.contains(voxel_centre_mm(v, spacing_mm)))
        .count();
    let voxel_vol: f64 = spacing_mm.iter().product();
    let coverage_of_pred = (inside as f64 * voxel_vol / box_vol).min(1.0);
    let coverage_of_gt = inside as f64 / gt.voxels.len() as f64;
    Ok((coverage_of_pred, coverage_of_gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub centre_mm: [f64; 3],
    pub score: f64,
    /// Characteristic size in voxels.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub proposal: Proposal,
    #[serde(rename = "box")]
    pub bbox: Cuboid,
    pub class_probs: SoftLabel,
    pub per_rater_probs: Vec<SoftLabel>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use EsoClass::*;

    #[test]
    fn soft_label_counts() {
        assert_eq!(soft_label_from_votes(&[Epvs; 6]).unwrap().p, [0.0, 0.0, 1.0, 0.0]);
        let l = soft_label_from_votes(&[Epvs, Epvs, Epvs, Lacune, Undecided, Nothing]).unwrap();
        assert_eq!(l.p, [1.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0, 1.0 / 6.0]);
        assert_eq!(soft_label_from_votes(&[Lacune, Epvs]).unwrap().p, [0.0, 0.5, 0.5, 0.0]);
        assert!(matches!(soft_label_from_votes(&[]), Err(Error::NoRaters)));
    }

    #[test]
    fn intersection_examples() {
        let a = Cuboid::new([0.0; 3], 2.0).unwrap();
        assert_eq!(box_intersection_volume(&a, &a), 8.0);
        let far = Cuboid::new([10.0, 0.0, 0.0], 2.0).unwrap();
        assert_eq!(box_intersection_volume(&a, &far), 0.0);
        let near = Cuboid::new([1.0, 0.0, 0.0], 2.0).unwrap();
        assert_eq!(box_intersection_volume(&a, &near), 4.0);
        assert!(Cuboid::new([0.0; 3], 0.0).is_err());
    }

    fn cube_object(lo: Voxel, side: usize) -> EsoObject {
        let mut voxels = Vec::new();
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    voxels.push([lo[0] + x, lo[1] + y, lo[2] + z]);
                }
            }
        }
        EsoObject::from_voxels(1, voxels, [1.0; 3], Epvs).unwrap()
    }

    #[test]
    fn overlap_exact_enclosure_and_disjoint() {
        let gt = cube_object([4, 4, 4], 2);
        assert_eq!(gt.voxels.len(), 8);
        // voxel centres 4 and 5 per axis; box [3.5, 5.5)
        let b = Cuboid::new([4.5; 3], 2.0).unwrap();
        assert_eq!(overlap_ratios(&b, &gt, [1.0; 3]).unwrap(), (1.0, 1.0));
        let far = Cuboid::new([20.0; 3], 2.0).unwrap();
        assert_eq!(overlap_ratios(&far, &gt, [1.0; 3]).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn overlap_counting() {
        // five voxels inside the 2×2×2 block at 10..=11, five far away along x
        let mut voxels: Vec<Voxel> = vec![[10, 10, 10], [11, 10, 10], [10, 11, 10], [11, 11, 10], [10, 10, 11]];
        voxels.extend((0..5).map(|i| [20 + i, 10, 10]));
        let gt = EsoObject::from_voxels(3, voxels, [1.0; 3], Epvs).unwrap();
        let b = Cuboid::new([10.5; 3], 20f64.cbrt()).unwrap();
        let (cp, cg) = overlap_ratios(&b, &gt, [1.0; 3]).unwrap();
        assert!((cp - 0.25).abs() < 1e-12);
        assert!((cg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn object_scale_and_centre() {
        let gt = cube_object([2, 3, 4], 2);
        assert_eq!(gt.scale, 2.0);
        assert_eq!(gt.centre_mm, [2.5, 3.5, 4.5]);
        let short: Vec<Voxel> = (0..4).map(|x| [x, 0, 0]).collect();
        assert!(EsoObject::from_voxels(0, short, [1.0; 3], Epvs).is_err());
    }

    fn class_strategy() -> impl Strategy<Value = EsoClass> {
        (0usize..4).prop_map(|i| EsoClass::ALL[i])
    }

    proptest! {
        #[test]
        fn soft_label_sums_to_one(votes in prop::collection::vec(class_strategy(), 1..40)) {
            let l = soft_label_from_votes(&votes).unwrap();
            let mut counts = [0usize; 4];
            for v in &votes { counts[v.index()] += 1; }
            prop_assert_eq!(counts.iter().sum::<usize>(), votes.len());
            prop_assert!((l.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn intersection_commutes_and_is_bounded(
            ca in prop::array::uniform3(-5.0f64..5.0), sa in 0.1f64..6.0,
            cb in prop::array::uniform3(-5.0f64..5.0), sb in 0.1f64..6.0,
        ) {
            let a = Cuboid::new(ca, sa).unwrap();
            let b = Cuboid::new(cb, sb).unwrap();
            let ab = box_intersection_volume(&a, &b);
            prop_assert_eq!(ab, box_intersection_volume(&b, &a));
            prop_assert!(ab <= a.volume_mm3().min(b.volume_mm3()) + 1e-9);
        }

        #[test]
        fn enclosing_box_covers_all_gt(lo in prop::array::uniform3(2usize..20), side in 2usize..5, margin in 0.01f64..3.0) {
            let gt = cube_object(lo, side);
            let (bl, bh) = gt.bounding_box();
            let centre = [0, 1, 2].map(|a| (bl[a] + bh[a]) as f64 / 2.0);
            let extent = (bh[0] - bl[0]) as f64 + 2.0 * margin;
            let b = Cuboid::new(centre, extent).unwrap();
            let (_, cg) = overlap_ratios(&b, &gt, [1.0; 3]).unwrap();
            prop_assert_eq!(cg, 1.0);
        }
    }
}
