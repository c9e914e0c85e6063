//! Candidate extraction, non-maximum suppression, refinement and the
//! detections file format.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dense::{dense_maps, DenseMaps};
use super::InferConfig;
use crate::error::{Error, Result};
use crate::fields::{gaussian_smooth, local_maxima_extract, ScalarField};
use crate::model::{crop_side, extract_crop, Checkpoint, ModelParams, Net, Section, Stage};
use crate::nn::loss::softmax;
use crate::nn::Graph;
use crate::phantom::io::{read_json, write_json};
use crate::types::{distance_mm, linear_index, mean_spacing, voxel_count, Cuboid, Detection, Proposal, SoftLabel, Volume};

/// Bounds applied to the refinement network's multiplicative scale factor.
const SCALE_FACTOR_RANGE: (f64, f64) = (0.25, 4.0);
/// Smallest proposal scale, in voxels.
const MIN_SCALE: f64 = 1.0;

fn by_score_then_centre(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            (0..3)
                .map(|k| a.centre_mm[k].total_cmp(&b.centre_mm[k]))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Greedy suppression: by descending score (ties by centre, lexicographic),
/// keep a proposal iff it lies at least `radius_mm` from every kept one.
pub fn nms_prune(proposals: &[Proposal], radius_mm: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(by_score_then_centre);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept.iter().all(|k| distance_mm(k.centre_mm, p.centre_mm) >= radius_mm) {
            kept.push(p);
        }
    }
    kept
}

/// Score-gated maxima of the smoothed proximity map, shifted by the
/// regressed offsets, pruned and capped at `max_proposals`.
pub fn propose(maps: &DenseMaps, cfg: &InferConfig) -> Result<Vec<Proposal>> {
    if !maps.has_rpn() {
        return Err(Error::EmptyInput("dense maps lack proposal-network outputs"));
    }
    let dims = maps.dims;
    let n = voxel_count(dims);
    let field = ScalarField {
        dims,
        spacing_mm: maps.spacing_mm,
        data: maps.distance.iter().map(|&v| v as f64).collect(),
    };
    let smooth = if cfg.smooth_sigma_mm > 0.0 {
        gaussian_smooth(&field, cfg.smooth_sigma_mm)
    } else {
        field
    };
    let mask: Vec<bool> = maps.score.iter().map(|&s| s as f64 > cfg.score_threshold).collect();
    let maxima = local_maxima_extract(&smooth, &mask);
    let proposals: Vec<Proposal> = maxima
        .into_iter()
        .map(|(v, _)| {
            let i = linear_index(dims, v);
            let centre_vox: [f64; 3] = [0, 1, 2].map(|a| {
                let c = v[a] as f64 + maps.reg[a * n + i] as f64;
                c.clamp(0.0, (dims[a] - 1) as f64)
            });
            Proposal {
                centre_mm: [0, 1, 2].map(|a| centre_vox[a] * maps.spacing_mm[a]),
                score: maps.score[i] as f64,
                scale: (maps.reg[3 * n + i] as f64).max(MIN_SCALE),
            }
        })
        .collect();
    let mut kept = nms_prune(&proposals, cfg.nms_radius_mm);
    kept.truncate(cfg.max_proposals);
    Ok(kept)
}

/// Classifies each proposal from an image + feature crop and applies the
/// box residual (centre shift in voxels, multiplicative scale factor).
pub fn refine_proposals(
    proposals: &[Proposal],
    volume: &Volume,
    maps: &DenseMaps,
    params: &ModelParams,
) -> Result<Vec<Detection>> {
    let dims = volume.dims;
    let sp = volume.spacing_mm;
    proposals
        .par_iter()
        .map(|p| {
            let centre_vox: [f64; 3] = [0, 1, 2].map(|a| p.centre_mm[a] / sp[a]);
            let c = [0, 1, 2].map(|a| (centre_vox[a].round() as i64).clamp(0, dims[a] as i64 - 1));
            let side = crop_side(p.scale);
            let (crop, _) = extract_crop(
                &[(&volume.data, volume.channels), (&maps.features, maps.n_features)],
                dims,
                c,
                side,
            );
            let mut g = Graph::<f32>::new();
            let net = Net::bind(params, &mut g, &[Section::Rcn], None);
            let x = g.input(crop);
            let out = net.rcn(&mut g, x)?;
            let probs = |v| -> Result<SoftLabel> {
                let z: Vec<f64> = g.value(v).data().iter().map(|&x| x as f64).collect();
                let s = softmax(&z);
                SoftLabel::new([s[0], s[1], s[2], s[3]])
            };
            let class_probs = probs(out.class_logits)?;
            let per_rater_probs = out.rater_logits.iter().map(|&v| probs(v)).collect::<Result<_>>()?;
            let r = g.value(out.box_residual).data();
            let refined_vox: [f64; 3] = [0, 1, 2].map(|a| centre_vox[a] + r[a] as f64);
            let factor = (r[3] as f64).clamp(SCALE_FACTOR_RANGE.0, SCALE_FACTOR_RANGE.1);
            let scale = (p.scale * factor).max(MIN_SCALE);
            let centre_mm = [0, 1, 2].map(|a| refined_vox[a] * sp[a]);
            Ok(Detection {
                proposal: Proposal {
                    centre_mm,
                    score: p.score,
                    scale,
                },
                bbox: Cuboid::new(centre_mm, scale * mean_spacing(sp))?,
                class_probs,
                per_rater_probs,
            })
        })
        .collect()
}

/// Full inference on one volume with a checkpoint trained through `rcn_step2`.
pub fn infer_volume(volume: &Volume, ckpt: &Checkpoint, cfg: &InferConfig) -> Result<Vec<Detection>> {
    if ckpt.stage != Stage::RcnStep2 {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint has completed stage {}, inference needs {}",
            ckpt.stage,
            Stage::RcnStep2
        )));
    }
    cfg.validate()?;
    let maps = dense_maps(volume, &ckpt.params, cfg.patch_size, cfg.stride, true)?;
    let proposals = propose(&maps, cfg)?;
    refine_proposals(&proposals, volume, &maps, &ckpt.params)
}

/// One entry of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub centre_mm: [f64; 3],
    pub score: f64,
    pub scale_vox: f64,
    pub box_side_mm: f64,
    pub class_probs: [f64; 4],
    pub per_rater_probs: Vec<[f64; 4]>,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            centre_mm: d.proposal.centre_mm,
            score: d.proposal.score,
            scale_vox: d.proposal.scale,
            box_side_mm: d.bbox.side_mm,
            class_probs: d.class_probs.p,
            per_rater_probs: d.per_rater_probs.iter().map(|s| s.p).collect(),
        }
    }
}

impl TryFrom<DetectionRecord> for Detection {
    type Error = Error;

    fn try_from(r: DetectionRecord) -> Result<Self> {
        Ok(Detection {
            proposal: Proposal {
                centre_mm: r.centre_mm,
                score: r.score,
                scale: r.scale_vox,
            },
            bbox: Cuboid::new(r.centre_mm, r.box_side_mm)?,
            class_probs: SoftLabel::new(r.class_probs)?,
            per_rater_probs: r.per_rater_probs.into_iter().map(SoftLabel::new).collect::<Result<_>>()?,
        })
    }
}

pub fn detections_to_json(dets: &[Detection]) -> String {
    let recs: Vec<DetectionRecord> = dets.iter().map(DetectionRecord::from).collect();
    serde_json::to_string_pretty(&recs).expect("records serialize")
}

pub fn detections_from_json(s: &str) -> Result<Vec<Detection>> {
    let recs: Vec<DetectionRecord> =
        serde_json::from_str(s).map_err(|e| Error::Corrupt(format!("detections: {e}")))?;
    recs.into_iter().map(Detection::try_from).collect()
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let recs: Vec<DetectionRecord> = dets.iter().map(DetectionRecord::from).collect();
    write_json(path, &recs)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let recs: Vec<DetectionRecord> = read_json(path)?;
    recs.into_iter().map(Detection::try_from).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::types::voxel_from_linear;
    use proptest::prelude::*;

    fn prop(c: [f64; 3], s: f64) -> Proposal {
        Proposal {
            centre_mm: c,
            score: s,
            scale: 3.0,
        }
    }

    #[test]
    fn nms_examples() {
        let k = nms_prune(&[prop([0.0; 3], 0.8), prop([1.5, 0.0, 0.0], 0.9)], 2.0);
        assert_eq!(k, vec![prop([1.5, 0.0, 0.0], 0.9)]);
        assert_eq!(nms_prune(&[prop([0.0; 3], 0.8), prop([2.5, 0.0, 0.0], 0.9)], 2.0).len(), 2);
        let tie = nms_prune(&[prop([1.0, 0.0, 0.0], 0.5), prop([0.0, 0.0, 0.0], 0.5)], 2.0);
        assert_eq!(tie, vec![prop([0.0; 3], 0.5)]);
    }

    proptest! {
        #[test]
        fn nms_separates_and_is_idempotent(
            raw in prop::collection::vec((prop::array::uniform3(0.0f64..10.0), 0.0f64..1.0), 0..60),
            radius in 0.0f64..4.0,
        ) {
            let ps: Vec<Proposal> = raw.iter().map(|&(c, s)| prop(c, s)).collect();
            let k = nms_prune(&ps, radius);
            for i in 0..k.len() {
                for j in i + 1..k.len() {
                    prop_assert!(distance_mm(k[i].centre_mm, k[j].centre_mm) >= radius);
                }
            }
            prop_assert_eq!(nms_prune(&k, radius), k);
        }
    }

    fn maps(dims: [usize; 3]) -> DenseMaps {
        let n = voxel_count(dims);
        DenseMaps {
            dims,
            spacing_mm: [1.0; 3],
            distance: vec![0.0; n],
            features: vec![0.0; 8 * n],
            n_features: 8,
            score: vec![0.0; n],
            reg: vec![0.0; 4 * n],
        }
    }

    #[test]
    fn below_threshold_gives_nothing() {
        let mut m = maps([12, 12, 12]);
        m.distance[700] = 5.0;
        m.score.iter_mut().for_each(|s| *s = 0.25);
        assert!(propose(&m, &InferConfig::for_patch(32)).unwrap().is_empty());
    }

    #[test]
    fn peaks_become_refined_proposals() {
        let dims = [20, 20, 20];
        let mut m = maps(dims);
        let n = voxel_count(dims);
        let a = linear_index(dims, [5, 5, 5]);
        let b = linear_index(dims, [6, 5, 5]);
        let c = linear_index(dims, [14, 12, 9]);
        m.distance[a] = 5.0;
        m.distance[b] = 4.0;
        m.distance[c] = 3.0;
        for i in [a, b, c] {
            m.score[i] = 0.9;
        }
        m.score[c] = 0.6;
        m.reg[c] = 0.5;
        m.reg[3 * n + c] = 6.0;
        let cfg = InferConfig {
            smooth_sigma_mm: 0.0,
            ..InferConfig::for_patch(32)
        };
        let p = propose(&m, &cfg).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].centre_mm, [5.0, 5.0, 5.0]);
        assert_eq!(p[0].scale, MIN_SCALE);
        assert_eq!(p[1].centre_mm, [14.5, 12.0, 9.0]);
        assert_eq!(p[1].scale, 6.0);
        assert!((p[1].score - 0.6).abs() < 1e-7);
    }

    #[test]
    fn proposals_capped_in_score_order() {
        let dims = [40, 40, 40];
        let mut m = maps(dims);
        let mut k = 0;
        for i in 0..voxel_count(dims) {
            let v = voxel_from_linear(dims, i);
            if v.iter().all(|&c| c % 3 == 1 && c < 37) {
                m.distance[i] = 1.0;
                m.score[i] = 0.3 + (k % 97) as f32 / 200.0;
                k += 1;
            }
        }
        assert!(k > 300);
        let cfg = InferConfig {
            smooth_sigma_mm: 0.0,
            ..InferConfig::for_patch(32)
        };
        let p = propose(&m, &cfg).unwrap();
        assert_eq!(p.len(), 300);
        assert!(p.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn refinement_outputs_distributions() {
        let params = ModelParams::init(&ModelSpec::default(), 4).unwrap();
        let dims = [20, 20, 20];
        let m = maps(dims);
        let vol = Volume::zeros(dims, [1.0; 3], 3).unwrap();
        let props = vec![prop([0.0, 1.0, 2.0], 0.7), prop([10.0, 10.0, 10.0], 0.5)];
        let d = refine_proposals(&props, &vol, &m, &params).unwrap();
        assert_eq!(d.len(), 2);
        for det in &d {
            assert!((det.class_probs.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(det.per_rater_probs.len(), 6);
            assert_eq!(det.bbox.centre_mm, det.proposal.centre_mm);
        }
        let json = detections_to_json(&d);
        assert_eq!(detections_from_json(&json).unwrap(), d);
    }

    #[test]
    fn incomplete_checkpoint_rejected() {
        let ck = Checkpoint {
            params: ModelParams::init(&ModelSpec::default(), 0).unwrap(),
            stage: Stage::RpnStep2,
        };
        let vol = Volume::zeros([20, 20, 20], [1.0; 3], 3).unwrap();
        let e = infer_volume(&vol, &ck, &InferConfig::for_patch(20)).unwrap_err();
        assert!(matches!(e, Error::IncompatibleCheckpoint(_)));
    }
}
