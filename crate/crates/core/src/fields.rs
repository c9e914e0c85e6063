//! Scalar-field algorithms over voxel grids: exact Euclidean distance
//! transform, proximity targets, Gaussian smoothing, patch-sampling weights
//! and 26-neighbourhood local maxima.

use crate::types::{linear_index, mean_spacing, voxel_count, voxel_from_linear, Dims, Voxel};

/// Distance reported when a mask has no foreground at all.
pub const EDT_EMPTY_SENTINEL: f64 = 1e9;

/// Ratio between lacune and EPVS terms in the sampling weight map.
pub const LACUNE_WEIGHT_RATIO: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub data: Vec<f64>,
}

impl ScalarField {
    pub fn filled(dims: Dims, spacing_mm: [f64; 3], value: f64) -> Self {
        Self {
            dims,
            spacing_mm,
            data: vec![value; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: Dims, spacing_mm: [f64; 3], mut f: impl FnMut(Voxel) -> f64) -> Self {
        let data = (0..voxel_count(dims)).map(|i| f(voxel_from_linear(dims, i))).collect();
        Self {
            dims,
            spacing_mm,
            data,
        }
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> f64 {
        self.data[linear_index(self.dims, v)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Integer label grid: 0 is background, anything else an object id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelField {
    pub dims: Dims,
    pub spacing_mm: [f64; 3],
    pub data: Vec<u32>,
}

impl LabelField {
    pub fn empty(dims: Dims, spacing_mm: [f64; 3]) -> Self {
        Self {
            dims,
            spacing_mm,
            data: vec![0; voxel_count(dims)],
        }
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> u32 {
        self.data[linear_index(self.dims, v)]
    }

    pub fn mask_where(&self, pred: impl Fn(u32) -> bool) -> Vec<bool> {
        self.data.iter().map(|&l| pred(l)).collect()
    }
}

/// Exact Euclidean distance (mm) from every voxel centre to the nearest
/// foreground voxel centre, honouring anisotropic spacing.
///
/// Separable lower-envelope-of-parabolas transform (one pass per axis) on
/// squared distances.
pub fn euclidean_distance_transform(mask: &[bool], dims: Dims, spacing_mm: [f64; 3]) -> ScalarField {
    let n = voxel_count(dims);
    assert_eq!(mask.len(), n, "mask length does not match dims");
    let mut sq: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();

    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut scratch = EnvelopeScratch::default();
    for axis in 0..3 {
        let len = dims[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let base = a * strides[oa] + b * strides[ob];
                line.clear();
                line.extend((0..len).map(|i| sq[base + i * strides[axis]]));
                lower_envelope_1d(&line, spacing_mm[axis], &mut out, &mut scratch);
                for (i, &v) in out.iter().enumerate() {
                    sq[base + i * strides[axis]] = v;
                }
            }
        }
    }

    let data = sq
        .into_iter()
        .map(|d| if d.is_finite() { d.sqrt() } else { EDT_EMPTY_SENTINEL })
        .collect();
    ScalarField {
        dims,
        spacing_mm,
        data,
    }
}

#[derive(Default)]
struct EnvelopeScratch {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

/// `out[p] = min_q ((p − q)·h)² + f[q]` over finite `f[q]`.
fn lower_envelope_1d(f: &[f64], h: f64, out: &mut Vec<f64>, s: &mut EnvelopeScratch) {
    out.clear();
    s.sites.clear();
    s.bounds.clear();
    let pos = |q: usize| q as f64 * h;
    let intersect = |q: usize, r: usize| -> f64 {
        // abscissa where parabolas rooted at r and q (r < q) meet
        ((f[q] + pos(q) * pos(q)) - (f[r] + pos(r) * pos(r))) / (2.0 * (pos(q) - pos(r)))
    };
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match s.sites.last() {
                None => {
                    s.sites.push(q);
                    s.bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let x = intersect(q, r);
                    if x <= *s.bounds.last().unwrap() {
                        s.sites.pop();
                        s.bounds.pop();
                    } else {
                        s.sites.push(q);
                        s.bounds.push(x);
                        break;
                    }
                }
            }
        }
    }
    if s.sites.is_empty() {
        out.resize(f.len(), f64::INFINITY);
        return;
    }
    let mut k = 0;
    for p in 0..f.len() {
        let x = pos(p);
        while k + 1 < s.sites.len() && s.bounds[k + 1] < x {
            k += 1;
        }
        let q = s.sites[k];
        let d = x - pos(q);
        out.push(d * d + f[q]);
    }
}

/// Backbone regression target: `max(0, cap − d/mean_spacing)` where `d` is
/// the distance to the nearest labelled voxel.
pub fn proximity_target_map(seg: &LabelField, cap_vox: f64) -> ScalarField {
    let mask = seg.mask_where(|l| l != 0);
    let edt = euclidean_distance_transform(&mask, seg.dims, seg.spacing_mm);
    let ms = mean_spacing(seg.spacing_mm);
    ScalarField {
        dims: seg.dims,
        spacing_mm: seg.spacing_mm,
        data: edt.data.iter().map(|&d| (cap_vox - d / ms).max(0.0)).collect(),
    }
}

/// Normalized, 3σ-truncated 1D Gaussian taps; index `radius` is the centre.
pub fn gaussian_kernel_1d(sigma_vox: f64) -> Vec<f64> {
    if sigma_vox <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma_vox).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian smoothing with replicate-edge padding.
pub fn gaussian_smooth(f: &ScalarField, sigma_mm: f64) -> ScalarField {
    let mut data = f.data.clone();
    if sigma_mm <= 0.0 {
        return f.clone();
    }
    let dims = f.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    for axis in 0..3 {
        let kernel = gaussian_kernel_1d(sigma_mm / f.spacing_mm[axis]);
        if kernel.len() == 1 {
            continue;
        }
        let radius = (kernel.len() / 2) as i64;
        let len = dims[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let base = a * strides[oa] + b * strides[ob];
                line.clear();
                line.extend((0..len).map(|i| data[base + i * strides[axis]]));
                for i in 0..len {
                    let mut acc = 0.0;
                    for (t, w) in kernel.iter().enumerate() {
                        let j = (i as i64 + t as i64 - radius).clamp(0, len as i64 - 1) as usize;
                        acc += w * line[j];
                    }
                    data[base + i * strides[axis]] = acc;
                }
            }
        }
    }
    ScalarField {
        dims,
        spacing_mm: f.spacing_mm,
        data,
    }
}

/// Patch-sampling distribution mixing smoothed inverse distances to EPVS and
/// (100× heavier) lacunes, floored, then normalized to sum 1.
pub fn sampling_weight_map(
    seg: &LabelField,
    epvs_ids: &[u32],
    lacune_ids: &[u32],
    smooth_sigma_mm: f64,
    floor: f64,
) -> ScalarField {
    let term = |ids: &[u32]| -> Option<ScalarField> {
        if ids.is_empty() {
            return None;
        }
        let mask = seg.mask_where(|l| l != 0 && ids.contains(&l));
        if !mask.iter().any(|&m| m) {
            return None;
        }
        let edt = euclidean_distance_transform(&mask, seg.dims, seg.spacing_mm);
        let inv = ScalarField {
            dims: seg.dims,
            spacing_mm: seg.spacing_mm,
            data: edt.data.iter().map(|&d| 1.0 / (1.0 + d)).collect(),
        };
        Some(gaussian_smooth(&inv, smooth_sigma_mm))
    };
    let mut w = ScalarField::filled(seg.dims, seg.spacing_mm, 0.0);
    if let Some(e) = term(epvs_ids) {
        w.data.iter_mut().zip(&e.data).for_each(|(w, e)| *w += e);
    }
    if let Some(l) = term(lacune_ids) {
        w.data
            .iter_mut()
            .zip(&l.data)
            .for_each(|(w, l)| *w += LACUNE_WEIGHT_RATIO * l);
    }
    w.data.iter_mut().for_each(|v| *v = v.max(floor));
    let total = w.sum();
    w.data.iter_mut().for_each(|v| *v /= total);
    w
}

/// Voxels inside `mask` whose value is ≥ every existing 26-neighbour,
/// sorted by value descending (ties by linear index).
pub fn local_maxima_extract(f: &ScalarField, mask: &[bool]) -> Vec<(Voxel, f64)> {
    assert_eq!(mask.len(), f.len(), "mask length does not match field");
    let dims = f.dims;
    let mut out = Vec::new();
    for (i, &inside) in mask.iter().enumerate() {
        if !inside {
            continue;
        }
        let v = voxel_from_linear(dims, i);
        let value = f.data[i];
        if is_local_max(f, v, value) {
            out.push((i, v, value));
        }
    }
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(_, v, value)| (v, value)).collect()
}

fn is_local_max(f: &ScalarField, v: Voxel, value: f64) -> bool {
    let dims = f.dims;
    for dz in -1i64..=1 {
        let z = v[2] as i64 + dz;
        if z < 0 || z >= dims[2] as i64 {
            continue;
        }
        for dy in -1i64..=1 {
            let y = v[1] as i64 + dy;
            if y < 0 || y >= dims[1] as i64 {
                continue;
            }
            for dx in -1i64..=1 {
                let x = v[0] as i64 + dx;
                if x < 0 || x >= dims[0] as i64 || (dx == 0 && dy == 0 && dz == 0) {
                    continue;
                }
                if f.get([x as usize, y as usize, z as usize]) > value {
                    return false;
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_edt(mask: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
        let seeds: Vec<Voxel> = (0..mask.len())
            .filter(|&i| mask[i])
            .map(|i| voxel_from_linear(dims, i))
            .collect();
        (0..mask.len())
            .map(|i| {
                let v = voxel_from_linear(dims, i);
                seeds
                    .iter()
                    .map(|s| {
                        (0..3)
                            .map(|a| ((v[a] as f64 - s[a] as f64) * spacing[a]).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(EDT_EMPTY_SENTINEL, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_single_seed() {
        let dims = [5, 5, 5];
        let mut mask = vec![false; 125];
        mask[linear_index(dims, [2, 2, 2])] = true;
        let d = euclidean_distance_transform(&mask, dims, [1.0; 3]);
        assert_eq!(d.get([2, 2, 4]), 2.0);
        assert!((d.get([3, 3, 3]) - 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(d.get([2, 2, 2]), 0.0);
    }

    #[test]
    fn edt_degenerate_masks() {
        let dims = [4, 3, 5];
        let all = euclidean_distance_transform(&vec![true; 60], dims, [1.0; 3]);
        assert!(all.data.iter().all(|&v| v == 0.0));
        let none = euclidean_distance_transform(&vec![false; 60], dims, [1.0; 3]);
        assert!(none.data.iter().all(|&v| v == EDT_EMPTY_SENTINEL));
    }

    #[test]
    fn edt_matches_brute_force_anisotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [7, 5, 6];
        let spacing = [0.7, 1.3, 2.1];
        for _ in 0..20 {
            let mask: Vec<bool> = (0..voxel_count(dims)).map(|_| rng.random::<f64>() < 0.05).collect();
            let d = euclidean_distance_transform(&mask, dims, spacing);
            let oracle = brute_force_edt(&mask, dims, spacing);
            for (a, b) in d.data.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn proximity_values() {
        let dims = [12, 3, 3];
        let mut seg = LabelField::empty(dims, [1.0; 3]);
        seg.data[linear_index(dims, [1, 1, 1])] = 4;
        let p = proximity_target_map(&seg, 5.0);
        assert_eq!(p.get([1, 1, 1]), 5.0);
        assert_eq!(p.get([3, 1, 1]), 3.0);
        assert_eq!(p.get([6, 1, 1]), 0.0);
        assert_eq!(p.get([11, 1, 1]), 0.0);
    }

    #[test]
    fn smoothing_identity_constant_and_impulse() {
        let dims = [9, 9, 9];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = ScalarField::from_fn(dims, [1.0; 3], |_| rng.random());
        assert_eq!(gaussian_smooth(&f, 0.0), f);

        let c = ScalarField::filled(dims, [1.0; 3], 2.5);
        let s = gaussian_smooth(&c, 1.3);
        assert!(s.data.iter().all(|v| (v - 2.5).abs() < 1e-6));

        let mut imp = ScalarField::filled(dims, [1.0; 3], 0.0);
        imp.data[linear_index(dims, [4, 4, 4])] = 1.0;
        let s = gaussian_smooth(&imp, 1.0);
        // analytic centre tap: 1 / Σ_{i=-3..3} exp(-i²/2)
        let norm: f64 = (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).sum();
        let centre = 1.0 / norm;
        assert!((s.get([4, 4, 4]) - centre.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn weight_map_cases() {
        let dims = [16, 16, 16];
        let seg = LabelField::empty(dims, [1.0; 3]);
        let w = sampling_weight_map(&seg, &[], &[], 2.0, 1e-5);
        let u = 1.0 / 4096.0;
        assert!(w.data.iter().all(|&v| (v - u).abs() < 1e-15));

        let mut seg = LabelField::empty(dims, [1.0; 3]);
        seg.data[linear_index(dims, [3, 8, 8])] = 1;
        seg.data[linear_index(dims, [13, 8, 8])] = 2;
        // unsmoothed: query at x = 8 is 5 voxels from both
        let raw = sampling_weight_map(&seg, &[1], &[], 0.0, 0.0);
        let lac = sampling_weight_map(&seg, &[], &[2], 0.0, 0.0);
        let q = linear_index(dims, [8, 8, 8]);
        let e_term = raw.data[q] * raw_total(&seg, &[1]);
        let l_term = lac.data[q] * raw_total(&seg, &[2]) * LACUNE_WEIGHT_RATIO;
        assert!((l_term / e_term - 100.0).abs() < 1e-9);

        let both = sampling_weight_map(&seg, &[1], &[2], 2.0, 1e-5);
        assert!((both.sum() - 1.0).abs() < 1e-9);
    }

    fn raw_total(seg: &LabelField, ids: &[u32]) -> f64 {
        let mask = seg.mask_where(|l| ids.contains(&l));
        let d = euclidean_distance_transform(&mask, seg.dims, seg.spacing_mm);
        d.data.iter().map(|d| 1.0 / (1.0 + d)).sum()
    }

    #[test]
    fn maxima_single_peak_plateau_and_ordering() {
        let dims = [11, 11, 11];
        let blob = ScalarField::from_fn(dims, [1.0; 3], |v| {
            let r2: f64 = (0..3).map(|a| (v[a] as f64 - 5.0).powi(2)).sum();
            (-r2 / 4.0).exp()
        });
        let all = vec![true; blob.len()];
        let m = local_maxima_extract(&blob, &all);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].0, [5, 5, 5]);

        let flat = ScalarField::filled(dims, [1.0; 3], 1.0);
        assert_eq!(local_maxima_extract(&flat, &all).len(), flat.len());

        let two = ScalarField::from_fn(dims, [1.0; 3], |v| {
            let a: f64 = (0..3).map(|k| (v[k] as f64 - [2.0, 2.0, 2.0][k]).powi(2)).sum();
            let b: f64 = (0..3).map(|k| (v[k] as f64 - [8.0, 8.0, 8.0][k]).powi(2)).sum();
            0.5 * (-a).exp() + (-b).exp()
        });
        let m = local_maxima_extract(&two, &all);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].0, [8, 8, 8]);
        assert_eq!(m[1].0, [2, 2, 2]);
    }

    fn mask_strategy() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(prop::bool::weighted(0.08), 6 * 6 * 6)
    }

    proptest! {
        #[test]
        fn edt_zero_on_foreground_and_lipschitz(mask in mask_strategy()) {
            prop_assume!(mask.iter().any(|&m| m));
            let dims = [6, 6, 6];
            let spacing = [1.0, 1.5, 0.8];
            let d = euclidean_distance_transform(&mask, dims, spacing);
            for i in 0..mask.len() {
                if mask[i] { prop_assert_eq!(d.data[i], 0.0); } else { prop_assert!(d.data[i] > 0.0); }
                let v = voxel_from_linear(dims, i);
                for a in 0..3 {
                    if v[a] + 1 < dims[a] {
                        let mut w = v; w[a] += 1;
                        prop_assert!((d.data[i] - d.get(w)).abs() <= spacing[a] + 1e-9);
                    }
                }
            }
        }

        #[test]
        fn maxima_invariant_under_monotone_maps(vals in prop::collection::vec(0.0f64..10.0, 5 * 5 * 5)) {
            let dims = [5, 5, 5];
            let f = ScalarField { dims, spacing_mm: [1.0; 3], data: vals };
            let g = ScalarField { data: f.data.iter().map(|v| (v * 0.3).exp() * 2.0 + 1.0).collect(), ..f.clone() };
            let all = vec![true; f.len()];
            let mut a: Vec<Voxel> = local_maxima_extract(&f, &all).into_iter().map(|m| m.0).collect();
            let mut b: Vec<Voxel> = local_maxima_extract(&g, &all).into_iter().map(|m| m.0).collect();
            a.sort(); b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn weight_map_is_distribution(ids in prop::collection::vec((0usize..512, 1u32..4), 0..6)) {
            let dims = [8, 8, 8];
            let mut seg = LabelField::empty(dims, [1.0; 3]);
            for (i, l) in ids { seg.data[i] = l; }
            let floor = 1e-5;
            let w = sampling_weight_map(&seg, &[1, 3], &[2], 2.0, floor);
            prop_assert!((w.sum() - 1.0).abs() < 1e-9);
            prop_assert!(w.data.iter().all(|&v| v > 0.0));
        }
    }
}
