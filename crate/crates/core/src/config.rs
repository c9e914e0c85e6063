//! The run configuration: one JSON document with every default filled in.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::RankSumConfig;
use crate::model::{ModelSpec, Stage, MIN_PATCH};
use crate::phantom::PhantomConfig;
use crate::pipeline::{InferConfig, StageSettings, TrainConfig};
use crate::sampler::PatchSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfigs {
    pub backbone: TrainConfig,
    pub rpn_step1: TrainConfig,
    pub rpn_step2: TrainConfig,
    pub rcn_step1: TrainConfig,
    pub rcn_step2: TrainConfig,
}

impl Default for StageConfigs {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            backbone: t.clone(),
            rpn_step1: t.clone(),
            rpn_step2: t.clone(),
            rcn_step1: t.clone(),
            rcn_step2: t,
        }
    }
}

impl StageConfigs {
    pub fn get(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Backbone => &self.backbone,
            Stage::RpnStep1 => &self.rpn_step1,
            Stage::RpnStep2 => &self.rpn_step2,
            Stage::RcnStep1 => &self.rcn_step1,
            Stage::RcnStep2 => &self.rcn_step2,
        }
    }

    pub fn get_mut(&mut self, stage: Stage) -> &mut TrainConfig {
        match stage {
            Stage::Backbone => &mut self.backbone,
            Stage::RpnStep1 => &mut self.rpn_step1,
            Stage::RpnStep2 => &mut self.rpn_step2,
            Stage::RcnStep1 => &mut self.rcn_step1,
            Stage::RcnStep2 => &mut self.rcn_step2,
        }
    }
}

/// Fallback locations used when the matching command-line flag is absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed inherited by every section that does not set its own.
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub patch: PatchSpec,
    pub model: ModelSpec,
    pub train: StageConfigs,
    pub infer: InferConfig,
    pub eval: RankSumConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let patch = PatchSpec::default();
        Self {
            seed: 0,
            phantom: PhantomConfig::default(),
            patch,
            model: ModelSpec::default(),
            train: StageConfigs::default(),
            infer: InferConfig::for_patch(patch.patch_size),
            eval: RankSumConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document. Missing seeds are inherited from the top-level
    /// `seed`; missing inference patch size and stride follow `patch`.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    fn from_value(mut v: Value) -> Result<Self> {
        let root = v
            .as_object_mut()
            .ok_or_else(|| Error::Config("top level must be a JSON object".into()))?;
        let seed = match root.get("seed") {
            None => 0,
            Some(s) => s
                .as_u64()
                .ok_or_else(|| Error::Config("seed must be a non-negative integer".into()))?,
        };
        let section = |root: &mut Map<String, Value>, key: &str| -> Result<()> {
            let entry = root.entry(key).or_insert_with(|| Value::Object(Map::new()));
            let obj = entry
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("{key} must be a JSON object")))?;
            obj.entry("seed").or_insert(Value::from(seed));
            Ok(())
        };
        section(root, "phantom")?;
        section(root, "eval")?;
        let train = root.entry("train").or_insert_with(|| Value::Object(Map::new()));
        let train = train
            .as_object_mut()
            .ok_or_else(|| Error::Config("train must be a JSON object".into()))?;
        for stage in Stage::ALL {
            section(train, stage.as_str())?;
        }

        let patch: PatchSpec = match root.get("patch") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("patch: {e}")))?,
            None => PatchSpec::default(),
        };
        let infer = root.entry("infer").or_insert_with(|| Value::Object(Map::new()));
        let infer = infer
            .as_object_mut()
            .ok_or_else(|| Error::Config("infer must be a JSON object".into()))?;
        infer.entry("patch_size").or_insert(Value::from(patch.patch_size));
        if !infer.contains_key("stride") {
            let p = infer["patch_size"].as_u64().unwrap_or(patch.patch_size as u64);
            infer.insert("stride".into(), Value::from((p / 2).max(1)));
        }

        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.patch.validate(Some(self.phantom.dims))?;
        self.model.validate()?;
        for s in Stage::ALL {
            self.train
                .get(s)
                .validate()
                .map_err(|e| Error::Config(format!("train.{s}: {e}")))?;
        }
        self.infer.validate()?;
        for p in [self.patch.patch_size, self.infer.patch_size] {
            if p < MIN_PATCH {
                return Err(Error::PatchTooSmall { got: p, min: MIN_PATCH });
            }
        }
        if self.model.n_raters != self.phantom.n_raters {
            return Err(Error::Config(format!(
                "model.n_raters = {} but phantom.n_raters = {}",
                self.model.n_raters, self.phantom.n_raters
            )));
        }
        Ok(())
    }

    /// Overrides the master seed and every section seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.eval.seed = seed;
        for s in Stage::ALL {
            self.train.get_mut(s).seed = seed;
        }
    }

    pub fn stage_settings(&self, stage: Stage) -> StageSettings {
        StageSettings {
            spec: self.model.clone(),
            patch: self.patch,
            train: self.train.get(stage).clone(),
            infer: self.infer.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
