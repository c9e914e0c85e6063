//! Per-stage optimisation loops.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dense::{dense_maps, extract_box, DenseMaps};
use super::infer::propose;
use super::{InferConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::fields::{proximity_target_map, sampling_weight_map};
use crate::model::{crop_side, extract_crop, BnMode, Checkpoint, ModelParams, ModelSpec, Net, Section, Stage};
use crate::nn::{Adam, AdamConfig, Graph, Tensor, Var};
use crate::phantom::Case;
use crate::sampler::{patch_origin, select_rpn_samples, CategoricalSampler, PatchObject, PatchSpec};
use crate::types::{
    distance_mm, linear_index, voxel_from_linear, Dims, EsoClass, EsoObject, Proposal, SoftLabel, Voxel,
    Volume,
};

/// Proximity cap of the backbone target, in voxels.
const PROXIMITY_CAP_VOX: f64 = 5.0;
/// Association radius floor for refinement targets, in voxels.
const MIN_MATCH_RADIUS_VOX: f64 = 2.0;

/// A training case with its regression target and patch sampler.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub volume: Volume,
    pub objects: Vec<EsoObject>,
    /// Proximity target map, one channel.
    pub target: Vec<f32>,
    sampler: CategoricalSampler,
}

impl PreparedCase {
    pub fn draw_centre(&self, rng: &mut impl Rng) -> Voxel {
        voxel_from_linear(self.volume.dims, self.sampler.draw(rng))
    }
}

/// Builds target maps and weight-map samplers. Object classes come from
/// `true_class`.
pub fn prepare_cases(cases: &[Case], patch: &PatchSpec) -> Result<Vec<PreparedCase>> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("no training cases"));
    }
    cases
        .par_iter()
        .map(|c| {
            patch.validate(None)?;
            let ids = |class: EsoClass| -> Vec<u32> {
                c.objects.iter().filter(|o| o.true_class == class).map(|o| o.id).collect()
            };
            let w = sampling_weight_map(
                &c.seg_mask,
                &ids(EsoClass::Epvs),
                &ids(EsoClass::Lacune),
                patch.weight_sigma_mm,
                patch.weight_floor,
            );
            let target = proximity_target_map(&c.seg_mask, PROXIMITY_CAP_VOX);
            Ok(PreparedCase {
                volume: c.volume.clone(),
                objects: c.objects.clone(),
                target: target.data.iter().map(|&v| v as f32).collect(),
                sampler: CategoricalSampler::new(&w.data),
            })
        })
        .collect()
}

/// Targets of one refinement-network example.
#[derive(Debug, Clone, PartialEq)]
pub struct RcnTarget {
    /// Index of the associated ground-truth object.
    pub matched: Option<usize>,
    pub class: SoftLabel,
    pub raters: Vec<SoftLabel>,
    /// Centre shift (voxels) and scale factor.
    pub residual: [f64; 4],
    /// 1 when matched, 0 otherwise.
    pub weight: f64,
}

/// Associates `proposal` with the nearest object centre within
/// `max(2, scale / 2)` voxels of that object.
pub fn rcn_targets(proposal: &Proposal, objects: &[EsoObject], spacing_mm: [f64; 3], n_raters: usize) -> Result<RcnTarget> {
    let p_vox: [f64; 3] = [0, 1, 2].map(|a| proposal.centre_mm[a] / spacing_mm[a]);
    let mut best: Option<(f64, usize)> = None;
    for (i, o) in objects.iter().enumerate() {
        let c = o.centre_vox(spacing_mm);
        let d = distance_mm(c, p_vox);
        if d <= (o.scale / 2.0).max(MIN_MATCH_RADIUS_VOX) && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    match best {
        None => Ok(RcnTarget {
            matched: None,
            class: SoftLabel::one_hot(EsoClass::Nothing),
            raters: vec![SoftLabel::one_hot(EsoClass::Nothing); n_raters],
            residual: [0.0; 4],
            weight: 0.0,
        }),
        Some((_, i)) => {
            let o = &objects[i];
            if o.rater_votes.len() != n_raters {
                return Err(Error::Shape(format!(
                    "object {} has {} votes, model expects {n_raters} raters",
                    o.id,
                    o.rater_votes.len()
                )));
            }
            let c = o.centre_vox(spacing_mm);
            Ok(RcnTarget {
                matched: Some(i),
                class: o.soft_label()?,
                raters: o.rater_votes.iter().map(|&v| SoftLabel::one_hot(v)).collect(),
                residual: [c[0] - p_vox[0], c[1] - p_vox[1], c[2] - p_vox[2], o.scale / proposal.scale],
                weight: 1.0,
            })
        }
    }
}

/// One logged iteration. Components not used by the stage are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub total: f64,
    pub rmse: Option<f64>,
    pub cls: Option<f64>,
    /// Mean per-rater cross-entropy.
    pub rater: Option<f64>,
    /// Unsquashed regression loss.
    pub reg: Option<f64>,
    pub reg_count: Option<usize>,
    pub w_reg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub stage: Stage,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "iteration,total,rmse,cls,rater,reg,reg_count,w_reg";

    pub fn to_csv(&self) -> String {
        fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map(|v| v.to_string()).unwrap_or_default()
        }
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                r.total,
                opt(r.rmse),
                opt(r.cls),
                opt(r.rater),
                opt(r.reg),
                opt(r.reg_count),
                opt(r.w_reg)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything a stage needs besides data and the incoming checkpoint.
#[derive(Debug, Clone, Default)]
pub struct StageSettings {
    pub spec: ModelSpec,
    pub patch: PatchSpec,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

/// Runs one stage; see [`train_stage_with`].
pub fn train_stage(
    stage: Stage,
    cases: &[PreparedCase],
    start: Option<Checkpoint>,
    settings: &StageSettings,
) -> Result<(Checkpoint, TrainingLog)> {
    train_stage_with(stage, cases, start, settings, |_| {})
}

/// Runs `stage` for `settings.train.iterations` iterations, calling
/// `on_row` after each. Only the stage's own section is updated; outputs of
/// frozen sections are computed once per case by tiled inference.
pub fn train_stage_with(
    stage: Stage,
    cases: &[PreparedCase],
    start: Option<Checkpoint>,
    settings: &StageSettings,
    mut on_row: impl FnMut(&LogRow),
) -> Result<(Checkpoint, TrainingLog)> {
    let StageSettings {
        spec,
        patch,
        train: cfg,
        infer,
    } = settings;
    cfg.validate()?;
    spec.validate()?;
    infer.validate()?;
    if cases.is_empty() {
        return Err(Error::EmptyInput("no training cases"));
    }
    for c in cases {
        patch.validate(Some(c.volume.dims))?;
    }
    let mut params = match (stage.prerequisite(), start) {
        (None, None) => ModelParams::init(spec, cfg.seed)?,
        (None, Some(ck)) => ck.params,
        (Some(req), None) => {
            return Err(Error::StageOrder(format!("stage {stage} requires a checkpoint from stage {req}")));
        }
        (Some(req), Some(ck)) if ck.stage != req => {
            return Err(Error::StageOrder(format!(
                "stage {stage} requires a checkpoint from stage {req}, got {}",
                ck.stage
            )));
        }
        (Some(_), Some(ck)) => ck.params,
    };
    if params.fingerprint() != spec.fingerprint() {
        return Err(Error::IncompatibleCheckpoint(
            "checkpoint was built for a different model spec".into(),
        ));
    }

    let section = stage.section();
    let trainable = params.trainable(section);
    let sizes: Vec<usize> = trainable.iter().map(|&i| params.tensors()[i].len()).collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &sizes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(Stage::ALL.iter().position(|&s| s == stage).unwrap() as u64 + 1);

    let mut runner = match section {
        Section::Backbone => Runner::Backbone,
        Section::Rpn => Runner::Rpn(
            cases
                .par_iter()
                .map(|c| dense_maps(&c.volume, &params, infer.patch_size, infer.stride, false))
                .collect::<Result<_>>()?,
        ),
        Section::Rcn => Runner::Rcn(RcnPool::build(cases, &params, infer)?),
    };

    let mut log = TrainingLog {
        stage,
        rows: Vec::with_capacity(cfg.iterations),
    };
    for it in 0..cfg.iterations {
        let w_reg = cfg.w_reg(it);
        let mut g = Graph::<f32>::new();
        let step = {
            let net = Net::bind(&params, &mut g, &[Section::Backbone, Section::Rpn, Section::Rcn], Some(section));
            let mut step = match &mut runner {
                Runner::Backbone => backbone_step(&net, &mut g, cases, patch, &mut rng)?,
                Runner::Rpn(maps) => rpn_step(&net, &mut g, cases, maps, stage, cfg, patch, w_reg, &mut rng)?,
                Runner::Rcn(pool) => rcn_step(&net, &mut g, cases, pool, stage, cfg, w_reg, &mut rng)?,
            };
            step.row.iteration = it;
            let mut grads = g.backward(step.loss);
            step.grads = net
                .trainable()
                .iter()
                .map(|&(i, v)| grads.take(v).unwrap_or_else(|| vec![0.0; params.tensors()[i].len()]))
                .collect();
            step
        };
        {
            let mut bufs = params.data_mut_at(&trainable);
            let grads: Vec<&[f32]> = step.grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut bufs, &grads);
        }
        // with lr = 0 the checkpoint stays bit-identical, running statistics included
        if cfg.lr > 0.0 {
            for (bn, s) in &step.bn_stats {
                params.update_running_stats(bn, s)?;
            }
        }
        on_row(&step.row);
        log.rows.push(step.row);
    }
    Ok((Checkpoint { params, stage }, log))
}

enum Runner {
    Backbone,
    Rpn(Vec<DenseMaps>),
    Rcn(RcnPool),
}

struct Step {
    loss: Var,
    row: LogRow,
    grads: Vec<Vec<f32>>,
    bn_stats: Vec<(String, crate::nn::BatchStats)>,
}

fn empty_row(total: f64) -> LogRow {
    LogRow {
        iteration: 0,
        total,
        rmse: None,
        cls: None,
        rater: None,
        reg: None,
        reg_count: None,
        w_reg: None,
    }
}

fn draw_patch(cases: &[PreparedCase], patch: &PatchSpec, rng: &mut ChaCha8Rng) -> (usize, Voxel, Dims) {
    let ci = rng.random_range(0..cases.len());
    let c = &cases[ci];
    let dims = c.volume.dims;
    let extent = patch.extent(dims);
    let origin = patch_origin(c.draw_centre(rng), extent, dims);
    (ci, origin, extent)
}

fn shape4(channels: usize, e: Dims) -> Vec<usize> {
    vec![channels, e[2], e[1], e[0]]
}

fn backbone_step(
    net: &Net<'_>,
    g: &mut Graph<f32>,
    cases: &[PreparedCase],
    patch: &PatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Step> {
    let (ci, origin, extent) = draw_patch(cases, patch, rng);
    let c = &cases[ci];
    let x = extract_box(&c.volume.data, c.volume.channels, c.volume.dims, origin, extent);
    let t = extract_box(&c.target, 1, c.volume.dims, origin, extent);
    let x = g.input(Tensor::new(shape4(c.volume.channels, extent), x)?);
    let out = net.backbone(g, x, BnMode::Train)?;
    let loss = g.rmse(out.distance, &Tensor::new(shape4(1, extent), t)?)?;
    let v = g.value(loss).item() as f64;
    Ok(Step {
        loss,
        row: LogRow {
            rmse: Some(v),
            ..empty_row(v)
        },
        grads: Vec::new(),
        bn_stats: out.stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn rpn_step(
    net: &Net<'_>,
    g: &mut Graph<f32>,
    cases: &[PreparedCase],
    maps: &[DenseMaps],
    stage: Stage,
    cfg: &TrainConfig,
    patch: &PatchSpec,
    w_reg: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Step> {
    let (ci, origin, extent) = draw_patch(cases, patch, rng);
    let c = &cases[ci];
    let m = &maps[ci];
    let sp = c.volume.spacing_mm;
    let objects: Vec<PatchObject> = c
        .objects
        .iter()
        .map(|o| {
            let v = o.centre_vox(sp);
            PatchObject {
                centre_vox: [0, 1, 2].map(|a| v[a] - origin[a] as f64),
                scale: o.scale,
            }
        })
        .collect();
    let samples = select_rpn_samples(extent, &objects, patch, rng.random())?;
    let feat = extract_box(&m.features, m.n_features, m.dims, origin, extent);
    let feat = g.input(Tensor::new(shape4(m.n_features, extent), feat)?);
    let out = net.rpn(g, feat)?;

    let idx: Vec<usize> = samples.iter().map(|s| linear_index(extent, s.voxel)).collect();
    let mut cls_t = Vec::with_capacity(2 * samples.len());
    let mut reg_t = Vec::with_capacity(4 * samples.len());
    let mut mask = Vec::with_capacity(4 * samples.len());
    for s in &samples {
        let pos = s.is_positive as u8 as f64;
        cls_t.extend([1.0 - pos, pos]);
        let o = s.target_offset_vox;
        reg_t.extend([o[0], o[1], o[2], s.target_scale].map(|v| v as f32));
        mask.extend([pos as f32; 4]);
    }
    let logits = g.gather_positions(out.cls_logits, &idx)?;
    let ce = g.cross_entropy(logits, &cls_t)?;
    let reg = g.gather_positions(out.reg, &idx)?;
    let (dl, lv) = g.regression_loss(reg, &reg_t, &mask, cfg.penalty())?;
    let mut terms = vec![(ce, cfg.w_cls)];
    if lv.count > 0 {
        let r = if stage.squashes_regression() { g.sigmoid(dl) } else { dl };
        terms.push((r, w_reg));
    }
    let loss = g.weighted_sum(&terms)?;
    let total = g.value(loss).item() as f64;
    Ok(Step {
        loss,
        row: LogRow {
            cls: Some(g.value(ce).item() as f64),
            reg: Some(lv.value),
            reg_count: Some(lv.count),
            w_reg: Some(w_reg),
            ..empty_row(total)
        },
        grads: Vec::new(),
        bn_stats: Vec::new(),
    })
}

/// Proposals of the frozen pipeline on every training case, split by whether
/// they associate with an object.
struct RcnPool {
    maps: Vec<DenseMaps>,
    matched: Vec<(usize, Proposal)>,
    unmatched: Vec<(usize, Proposal)>,
    /// Ground-truth boxes, used as extra jittered positives.
    truth: Vec<(usize, Proposal)>,
}

impl RcnPool {
    fn build(cases: &[PreparedCase], params: &ModelParams, infer: &InferConfig) -> Result<Self> {
        let per_case: Vec<(DenseMaps, Vec<Proposal>)> = cases
            .par_iter()
            .map(|c| {
                let maps = dense_maps(&c.volume, params, infer.patch_size, infer.stride, true)?;
                let props = propose(&maps, infer)?;
                Ok((maps, props))
            })
            .collect::<Result<_>>()?;
        let n_raters = params.spec().n_raters;
        let mut pool = RcnPool {
            maps: Vec::with_capacity(cases.len()),
            matched: Vec::new(),
            unmatched: Vec::new(),
            truth: Vec::new(),
        };
        for (ci, (maps, props)) in per_case.into_iter().enumerate() {
            let c = &cases[ci];
            for p in props {
                let t = rcn_targets(&p, &c.objects, c.volume.spacing_mm, n_raters)?;
                if t.matched.is_some() {
                    pool.matched.push((ci, p));
                } else {
                    pool.unmatched.push((ci, p));
                }
            }
            pool.truth.extend(c.objects.iter().map(|o| {
                (
                    ci,
                    Proposal {
                        centre_mm: o.centre_mm,
                        score: 1.0,
                        scale: o.scale,
                    },
                )
            }));
            pool.maps.push(maps);
        }
        Ok(pool)
    }

    /// Half positives (pipeline matches or jittered ground truth), half
    /// unmatched proposals; either side fills in when the other is empty.
    fn draw(&self, k: usize, spacing_of: impl Fn(usize) -> [f64; 3], rng: &mut ChaCha8Rng) -> Vec<(usize, Proposal)> {
        let n_pos_pool = self.matched.len() + self.truth.len();
        let n_neg_pool = self.unmatched.len();
        let want_pos = match (n_pos_pool, n_neg_pool) {
            (0, _) => 0,
            (_, 0) => k,
            _ => k.div_ceil(2),
        };
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            if j < want_pos {
                let i = rng.random_range(0..n_pos_pool);
                if i < self.matched.len() {
                    out.push(self.matched[i]);
                } else {
                    let (ci, mut p) = self.truth[i - self.matched.len()];
                    let sp = spacing_of(ci);
                    for (a, c) in p.centre_mm.iter_mut().enumerate() {
                        *c += rng.random_range(-1.0..=1.0) * sp[a];
                    }
                    p.scale *= rng.random_range(0.8..1.25);
                    out.push((ci, p));
                }
            } else {
                out.push(self.unmatched[rng.random_range(0..n_neg_pool)]);
            }
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn rcn_step(
    net: &Net<'_>,
    g: &mut Graph<f32>,
    cases: &[PreparedCase],
    pool: &RcnPool,
    stage: Stage,
    cfg: &TrainConfig,
    w_reg: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Step> {
    let k = cfg.rcn_proposals_per_iter;
    let batch = pool.draw(k, |ci| cases[ci].volume.spacing_mm, rng);
    if batch.is_empty() {
        return Err(Error::EmptyInput("no refinement training examples"));
    }
    let n_raters = net_raters(net);
    let kf = batch.len() as f64;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut reg_terms: Vec<Var> = Vec::new();
    let (mut cls_sum, mut rater_sum, mut reg_sum, mut reg_count) = (0.0, 0.0, 0.0, 0usize);
    for (ci, p) in &batch {
        let c = &cases[*ci];
        let m = &pool.maps[*ci];
        let dims = c.volume.dims;
        let sp = c.volume.spacing_mm;
        let t = rcn_targets(p, &c.objects, sp, n_raters)?;
        let centre = [0, 1, 2].map(|a| ((p.centre_mm[a] / sp[a]).round() as i64).clamp(0, dims[a] as i64 - 1));
        let (crop, _) = extract_crop(
            &[(&c.volume.data, c.volume.channels), (&m.features, m.n_features)],
            dims,
            centre,
            crop_side(p.scale),
        );
        let x = g.input(crop);
        let out = net.rcn(g, x)?;
        let ce = g.cross_entropy(out.class_logits, &t.class.p)?;
        cls_sum += g.value(ce).item() as f64;
        terms.push((ce, cfg.w_cls / kf));
        for (r, &logits) in out.rater_logits.iter().enumerate() {
            let ce = g.cross_entropy(logits, &t.raters[r].p)?;
            rater_sum += g.value(ce).item() as f64;
            terms.push((ce, cfg.w_cls / (n_raters as f64 * kf)));
        }
        if t.weight > 0.0 {
            let target = t.residual.map(|v| v as f32);
            let (dl, lv) = g.regression_loss(out.box_residual, &target, &[1.0; 4], cfg.penalty())?;
            reg_sum += lv.value;
            reg_count += lv.count;
            reg_terms.push(dl);
        }
    }
    let mut reg = None;
    if !reg_terms.is_empty() {
        let n = reg_terms.len() as f64;
        let mean: Vec<(Var, f64)> = reg_terms.iter().map(|&v| (v, 1.0 / n)).collect();
        let dl = g.weighted_sum(&mean)?;
        let r = if stage.squashes_regression() { g.sigmoid(dl) } else { dl };
        terms.push((r, w_reg));
        reg = Some(reg_sum / n);
    }
    let loss = g.weighted_sum(&terms)?;
    let total = g.value(loss).item() as f64;
    Ok(Step {
        loss,
        row: LogRow {
            cls: Some(cls_sum / kf),
            rater: Some(rater_sum / (kf * n_raters as f64)),
            reg: Some(reg.unwrap_or(0.0)),
            reg_count: Some(reg_count),
            w_reg: Some(w_reg),
            ..empty_row(total)
        },
        grads: Vec::new(),
        bn_stats: Vec::new(),
    })
}

fn net_raters(net: &Net<'_>) -> usize {
    net.params().spec().n_raters
}

/// `n` patch origins drawn from the cases' weight maps, as `(case, origin)`.
pub fn validation_patches(cases: &[PreparedCase], n: usize, patch: &PatchSpec, seed: u64) -> Vec<(usize, Voxel)> {
    if cases.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (ci, origin, _) = draw_patch(cases, patch, &mut rng);
            (ci, origin)
        })
        .collect()
}

/// Pooled rmse of the backbone (eval-mode batch norm) over `patches`, and of
/// the constant predictor equal to the pooled target mean.
pub fn backbone_rmse(
    params: &ModelParams,
    cases: &[PreparedCase],
    patches: &[(usize, Voxel)],
    patch: &PatchSpec,
) -> Result<(f64, f64)> {
    if patches.is_empty() {
        return Err(Error::EmptyInput("no validation patches"));
    }
    let per: Vec<(Vec<f32>, Vec<f32>)> = patches
        .par_iter()
        .map(|&(ci, origin)| {
            let c = &cases[ci];
            let extent = patch.extent(c.volume.dims);
            let x = extract_box(&c.volume.data, c.volume.channels, c.volume.dims, origin, extent);
            let t = extract_box(&c.target, 1, c.volume.dims, origin, extent);
            let mut g = Graph::<f32>::new();
            let net = Net::bind(params, &mut g, &[Section::Backbone], None);
            let x = g.input(Tensor::new(shape4(c.volume.channels, extent), x)?);
            let out = net.backbone(&mut g, x, BnMode::Eval)?;
            Ok((g.value(out.distance).data().to_vec(), t))
        })
        .collect::<Result<_>>()?;
    let n: usize = per.iter().map(|(_, t)| t.len()).sum();
    let mean = per.iter().flat_map(|(_, t)| t.iter()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let (mut se_model, mut se_mean) = (0.0, 0.0);
    for (p, t) in &per {
        for (&p, &t) in p.iter().zip(t) {
            se_model += (p as f64 - t as f64).powi(2);
            se_mean += (mean - t as f64).powi(2);
        }
    }
    Ok(((se_model / n as f64).sqrt(), (se_mean / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, PhantomConfig};

    fn tiny_cases(n: usize) -> Vec<Case> {
        let cfg = PhantomConfig {
            dims: [24, 24, 24],
            n_objects_range: (3, 5),
            seed: 11,
            ..Default::default()
        };
        (0..n as u64).map(|i| generate_case(&cfg, i).unwrap()).collect()
    }

    fn settings(iterations: usize, lr: f64) -> StageSettings {
        let patch = PatchSpec {
            patch_size: 20,
            n_rpn_samples: 60,
            ..Default::default()
        };
        StageSettings {
            spec: ModelSpec {
                features: 4,
                rcn_hidden: 8,
                ..Default::default()
            },
            patch,
            train: TrainConfig {
                iterations,
                lr,
                rcn_proposals_per_iter: 3,
                seed: 5,
                ..Default::default()
            },
            infer: InferConfig::for_patch(20),
        }
    }

    #[test]
    fn zero_lr_leaves_checkpoint_bit_identical() {
        let s = settings(1, 0.0);
        let cases = prepare_cases(&tiny_cases(1), &s.patch).unwrap();
        let init = ModelParams::init(&s.spec, s.train.seed).unwrap();
        let (ck, log) = train_stage(Stage::Backbone, &cases, None, &s).unwrap();
        assert_eq!(ck.params, init);
        assert_eq!(log.rows.len(), 1);
        assert!(log.rows[0].rmse.unwrap() > 0.0);
    }

    #[test]
    fn stage_order_is_enforced() {
        let s = settings(1, 1e-3);
        let cases = prepare_cases(&tiny_cases(1), &s.patch).unwrap();
        let e = train_stage(Stage::RpnStep1, &cases, None, &s).unwrap_err();
        assert!(matches!(e, Error::StageOrder(_)));
        assert!(e.to_string().contains("backbone"));
        let (ck, _) = train_stage(Stage::Backbone, &cases, None, &s).unwrap();
        let e = train_stage(Stage::RpnStep2, &cases, Some(ck), &s).unwrap_err();
        assert!(e.to_string().contains("rpn_step1"));
    }

    #[test]
    fn all_stages_run_deterministically_and_freeze_earlier_sections() {
        let s = settings(2, 1e-3);
        let cases = prepare_cases(&tiny_cases(2), &s.patch).unwrap();
        let run = || {
            let mut ck = None;
            let mut logs = Vec::new();
            for stage in Stage::ALL {
                let before = ck.clone();
                let (next, log) = train_stage(stage, &cases, ck, &s).unwrap();
                if let Some(Checkpoint { params: b, .. }) = before {
                    for (i, name) in b.names().iter().enumerate() {
                        if Section::of(name) != Some(stage.section()) {
                            assert_eq!(b.tensors()[i], next.params.tensors()[i], "{name} moved in {stage}");
                        }
                    }
                }
                logs.push(log.to_csv());
                ck = Some(next);
            }
            (ck.unwrap(), logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.params, b.params);
        assert_eq!(la, lb);
        assert_eq!(a.stage, Stage::RcnStep2);
        assert!(la[0].starts_with(TrainingLog::CSV_HEADER));
        let rcn_row = la[4].lines().nth(1).unwrap();
        assert_eq!(rcn_row.split(',').count(), 8);
    }

    #[test]
    fn association_rule() {
        let obj = EsoObject {
            id: 1,
            centre_mm: [10.0, 10.0, 10.0],
            voxels: vec![],
            scale: 8.0,
            true_class: EsoClass::Epvs,
            rater_votes: vec![EsoClass::Epvs; 6],
        };
        let at = |c: [f64; 3], scale: f64| Proposal {
            centre_mm: c,
            score: 1.0,
            scale,
        };
        let t = rcn_targets(&at([10.0; 3], 8.0), std::slice::from_ref(&obj), [1.0; 3], 6).unwrap();
        assert_eq!(t.residual, [0.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.raters, vec![t.class; 6]);
        let t = rcn_targets(&at([13.9, 10.0, 10.0], 4.0), std::slice::from_ref(&obj), [1.0; 3], 6).unwrap();
        assert_eq!(t.matched, Some(0));
        assert!((t.residual[0] + 3.9).abs() < 1e-12);
        assert_eq!(t.residual[3], 2.0);
        let t = rcn_targets(&at([14.1, 10.0, 10.0], 4.0), &[obj], [1.0; 3], 6).unwrap();
        assert_eq!(t.matched, None);
        assert_eq!(t.weight, 0.0);
        assert_eq!(t.class, SoftLabel::one_hot(EsoClass::Nothing));
    }

    #[test]
    fn validation_rmse_mean_baseline() {
        let s = settings(1, 0.0);
        let cases = prepare_cases(&tiny_cases(1), &s.patch).unwrap();
        let v = validation_patches(&cases, 3, &s.patch, 1);
        assert_eq!(v, validation_patches(&cases, 3, &s.patch, 1));
        let p = ModelParams::init(&s.spec, 0).unwrap();
        let (m, base) = backbone_rmse(&p, &cases, &v, &s.patch).unwrap();
        assert!(m.is_finite() && base > 0.0);
    }
}
