//! Backbone, proposal network and refinement network, their parameter store
//! and checkpoint format.
//!
//! Parameters live in a flat, ordered list of named `f32` tensors. Names are
//! prefixed by the section they belong to (`backbone.`, `rpn.`, `rcn.`);
//! batch-norm running statistics are stored alongside as non-trainable
//! entries ending in `.running_mean` / `.running_var`.

mod checkpoint;
mod net;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MODEL_JSON, PARAMS_BIN};
pub use net::{crop_side, extract_crop, BackboneOut, BnMode, Net, RcnOut, RpnOut};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{BatchStats, Tensor, BN_MOMENTUM};

/// Smallest patch side the dilation pyramid accepts.
pub const MIN_PATCH: usize = 17;
pub const N_CLASSES: usize = 4;
pub const RPN_CLASSES: usize = 2;
pub const RPN_REG: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub in_channels: usize,
    /// Backbone feature width `F`.
    pub features: usize,
    /// One residual level per entry.
    pub dilations: Vec<usize>,
    pub convs_per_level: usize,
    pub rcn_kernel: usize,
    /// Fully connected trunk width `H`.
    pub rcn_hidden: usize,
    pub n_raters: usize,
    /// Initial bias of the proposal scale channel, in voxels.
    pub rpn_scale_prior: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            features: 8,
            dilations: vec![1, 2, 4],
            convs_per_level: 3,
            rcn_kernel: 7,
            rcn_hidden: 32,
            n_raters: 6,
            rpn_scale_prior: 4.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.in_channels == 0 || self.features == 0 || self.rcn_hidden == 0 {
            return bad("channel widths must be ≥ 1");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) || self.convs_per_level == 0 {
            return bad("need at least one level with dilations ≥ 1");
        }
        if self.rcn_kernel.is_multiple_of(2) {
            return bad("rcn_kernel must be odd");
        }
        if self.n_raters == 0 {
            return bad("n_raters must be ≥ 1");
        }
        if !self.rpn_scale_prior.is_finite() {
            return bad("rpn_scale_prior must be finite");
        }
        Ok(())
    }

    /// Channels fed to the refinement network: image plus backbone features.
    pub fn rcn_in_channels(&self) -> usize {
        self.in_channels + self.features
    }

    /// Ordered `(name, shape)` manifest of every stored tensor.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.features;
        let mut m = Vec::new();
        let conv = |m: &mut Vec<(String, Vec<usize>)>, name: &str, co: usize, ci: usize, k: usize| {
            m.push((format!("{name}.w"), vec![co, ci, k, k, k]));
            m.push((format!("{name}.b"), vec![co]));
        };
        let bn = |m: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize| {
            for s in ["gamma", "beta", "running_mean", "running_var"] {
                m.push((format!("{name}.{s}"), vec![c]));
            }
        };
        conv(&mut m, "backbone.init", f, self.in_channels, 3);
        for l in 0..self.dilations.len() {
            for c in 0..self.convs_per_level {
                bn(&mut m, &format!("backbone.l{l}.c{c}.bn"), f);
                conv(&mut m, &format!("backbone.l{l}.c{c}"), f, f, 3);
            }
        }
        bn(&mut m, "backbone.head.bn", f);
        conv(&mut m, "backbone.head", 1, f, 1);
        conv(&mut m, "rpn.shared", f, f, 3);
        conv(&mut m, "rpn.cls", RPN_CLASSES, f, 1);
        conv(&mut m, "rpn.reg", RPN_REG, f, 1);
        conv(&mut m, "rcn.conv", 2 * f, self.rcn_in_channels(), self.rcn_kernel);
        let h = self.rcn_hidden;
        let mut fc = |name: String, o: usize, i: usize| {
            m.push((format!("{name}.w"), vec![o, i]));
            m.push((format!("{name}.b"), vec![o]));
        };
        fc("rcn.fc".into(), h, 2 * f);
        fc("rcn.cls".into(), N_CLASSES, h);
        fc("rcn.box".into(), 4, h);
        for r in 0..self.n_raters {
            fc(format!("rcn.rater{r}"), N_CLASSES, h);
        }
        m
    }

    /// Hex SHA-256 over this [`ModelSpec`] and its tensor manifest.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("spec serializes"));
        for (name, shape) in self.manifest() {
            h.update(name.as_bytes());
            for d in shape {
                h.update((d as u64).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Backbone,
    Rpn,
    Rcn,
}

impl Section {
    pub fn prefix(self) -> &'static str {
        match self {
            Section::Backbone => "backbone.",
            Section::Rpn => "rpn.",
            Section::Rcn => "rcn.",
        }
    }

    pub fn of(name: &str) -> Option<Section> {
        [Section::Backbone, Section::Rpn, Section::Rcn]
            .into_iter()
            .find(|s| name.starts_with(s.prefix()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    RpnStep1,
    RpnStep2,
    RcnStep1,
    RcnStep2,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Backbone,
        Stage::RpnStep1,
        Stage::RpnStep2,
        Stage::RcnStep1,
        Stage::RcnStep2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::RpnStep1 => "rpn_step1",
            Stage::RpnStep2 => "rpn_step2",
            Stage::RcnStep1 => "rcn_step1",
            Stage::RcnStep2 => "rcn_step2",
        }
    }

    /// Stage whose checkpoint must exist before this one may run.
    pub fn prerequisite(self) -> Option<Stage> {
        let i = Stage::ALL.iter().position(|&s| s == self).unwrap();
        i.checked_sub(1).map(|j| Stage::ALL[j])
    }

    /// Section whose parameters this stage updates.
    pub fn section(self) -> Section {
        match self {
            Stage::Backbone => Section::Backbone,
            Stage::RpnStep1 | Stage::RpnStep2 => Section::Rpn,
            Stage::RcnStep1 | Stage::RcnStep2 => Section::Rcn,
        }
    }

    /// Step one of a two-step section squashes its regression loss.
    pub fn squashes_regression(self) -> bool {
        matches!(self, Stage::RpnStep1 | Stage::RcnStep1)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// He-normal convolution / linear weights, zero biases, unit batch-norm
    /// scale. The box-residual scale factor starts at 1 and the proposal
    /// scale channel at `rpn_scale_prior`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let manifest = spec.manifest();
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in &manifest {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap();
            let data = match leaf {
                "w" => {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if shape.len() == 2 && name != "rcn.fc.w" { 1.0 } else { 2.0 };
                    let d = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                    (0..n).map(|_| d.sample(&mut rng) as f32).collect()
                }
                "gamma" | "running_var" => vec![1.0; n],
                _ => vec![0.0; n],
            };
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        let mut p = Self::from_parts(spec.clone(), manifest.into_iter().map(|(n, _)| n).collect(), tensors)?;
        p.get_mut("rpn.reg.b")?.data_mut()[3] = spec.rpn_scale_prior as f32;
        p.get_mut("rcn.box.b")?.data_mut()[3] = 1.0;
        Ok(p)
    }

    pub(crate) fn from_parts(spec: ModelSpec, names: Vec<String>, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        let manifest = spec.manifest();
        if manifest.len() != names.len() || manifest.len() != tensors.len() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected {} tensors, found {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for ((mn, ms), (n, t)) in manifest.iter().zip(names.iter().zip(&tensors)) {
            if mn != n || ms.as_slice() != t.shape() {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "entry {n} {:?} does not match {mn} {ms:?}",
                    t.shape()
                )));
            }
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            spec,
            names,
            tensors,
            index,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("no parameter named {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.tensors[i]
    }

    /// Mutable data of the tensors at the ascending indices `idx`.
    pub fn data_mut_at(&mut self, idx: &[usize]) -> Vec<&mut [f32]> {
        debug_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        self.tensors
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| idx.binary_search(i).is_ok())
            .map(|(_, t)| t.data_mut())
            .collect()
    }

    /// Indices of the trainable tensors of `section`, in manifest order.
    pub fn trainable(&self, section: Section) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| Section::of(n) == Some(section) && !is_running_stat(n))
            .map(|(i, _)| i)
            .collect()
    }

    /// `r ← m·r + (1−m)·batch` for the batch norm called `bn` (e.g. `backbone.l0.c0.bn`).
    pub fn update_running_stats(&mut self, bn: &str, stats: &BatchStats) -> Result<()> {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let t = self.get_mut(&format!("{bn}.{suffix}"))?;
            for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                *r = (BN_MOMENTUM * *r as f64 + (1.0 - BN_MOMENTUM) * b) as f32;
            }
        }
        Ok(())
    }

    pub fn running_stats(&self, bn: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let conv = |s: &str| -> Result<Vec<f64>> {
            Ok(self.get(&format!("{bn}.{s}"))?.data().iter().map(|&v| v as f64).collect())
        };
        Ok((conv("running_mean")?, conv("running_var")?))
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_is_unique_and_sectioned() {
        let s = ModelSpec::default();
        let m = s.manifest();
        let names: std::collections::HashSet<_> = m.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names.len(), m.len());
        assert!(m.iter().all(|(n, _)| Section::of(n).is_some()));
        assert_eq!(m.iter().filter(|(n, _)| n.starts_with("rcn.rater")).count(), 12);
    }

    #[test]
    fn init_is_seeded_and_biased() {
        let s = ModelSpec::default();
        let a = ModelParams::init(&s, 3).unwrap();
        assert_eq!(a, ModelParams::init(&s, 3).unwrap());
        assert_ne!(a, ModelParams::init(&s, 4).unwrap());
        assert_eq!(a.get("rcn.box.b").unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(a.get("rpn.reg.b").unwrap().data()[3], 4.0);
        assert!(a.get("backbone.l1.c2.bn.running_var").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fingerprint_tracks_spec() {
        let a = ModelSpec::default();
        let b = ModelSpec { features: 6, ..a.clone() };
        assert_eq!(a.fingerprint(), ModelSpec::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn running_stat_update() {
        let mut p = ModelParams::init(&ModelSpec::default(), 0).unwrap();
        let stats = BatchStats {
            mean: vec![1.0; 8],
            var: vec![3.0; 8],
        };
        p.update_running_stats("backbone.head.bn", &stats).unwrap();
        let (m, v) = p.running_stats("backbone.head.bn").unwrap();
        assert!((m[0] - 0.1).abs() < 1e-7 && (v[0] - 1.2).abs() < 1e-6);
    }

    #[test]
    fn stage_order() {
        assert_eq!(Stage::Backbone.prerequisite(), None);
        assert_eq!(Stage::RcnStep1.prerequisite(), Some(Stage::RpnStep2));
        assert_eq!("rpn_step2".parse::<Stage>().unwrap(), Stage::RpnStep2);
        assert!("rpn".parse::<Stage>().is_err());
    }
}
