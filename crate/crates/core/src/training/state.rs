use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{KdPlan, TransformParams};
use crate::error::{Error, Result};
use crate::models::{ModelConfig, ModelParams, ParamStore};
use crate::rng::{rng_from_seed, stream_seed};

use super::optim::AdamMoments;
use super::TrainConfig;

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelParams,
    pub transforms: TransformParams,
    pub adam_model: AdamMoments,
    pub adam_transforms: AdamMoments,
    /// Exponential moving average of the model parameters.
    pub ema: ParamStore,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Steps the schedule spans.
    pub total_steps: u64,
    pub rng: ChaCha8Rng,
}

const STATE_FORMAT: &str = "molkd-train-state";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: ParamStore,
    transforms: TransformParams,
    adam_model: AdamMoments,
    adam_transforms: AdamMoments,
    ema: ParamStore,
    step: u64,
    total_steps: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh model and transforms seeded from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, model_cfg: &ModelConfig, plan: Option<&KdPlan>) -> Result<Self> {
        let model = ModelParams::init(model_cfg.clone(), stream_seed(cfg.seed, &[0]))?;
        let transforms = match plan {
            Some(p) => TransformParams::init(p, stream_seed(cfg.seed, &[1])),
            None => TransformParams::empty(),
        };
        Ok(Self::from_parts(cfg, model, transforms))
    }

    pub fn from_parts(cfg: &TrainConfig, model: ModelParams, transforms: TransformParams) -> Self {
        Self {
            adam_model: AdamMoments::new(&model.params, cfg.amsgrad),
            adam_transforms: AdamMoments::new(&transforms.params, cfg.amsgrad),
            ema: model.params.clone(),
            model,
            transforms,
            step: 0,
            total_steps: 0,
            rng: rng_from_seed(stream_seed(cfg.seed, &[2])),
        }
    }

    /// The model with averaged parameters, as used for evaluation.
    pub fn ema_model(&self) -> ModelParams {
        ModelParams { config: self.model.config.clone(), params: self.ema.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.file())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }

    fn file(&self) -> StateFile {
        StateFile {
            format: STATE_FORMAT.into(),
            version: 1,
            config: self.model.config.clone(),
            params: self.model.params.clone(),
            transforms: self.transforms.clone(),
            adam_model: self.adam_model.clone(),
            adam_transforms: self.adam_transforms.clone(),
            ema: self.ema.clone(),
            step: self.step,
            total_steps: self.total_steps,
            rng: self.rng.clone(),
        }
    }

    fn from_file(f: StateFile) -> Result<Self> {
        if f.format != STATE_FORMAT || f.version != 1 {
            return Err(Error::Incompatible(format!("unsupported training state {} v{}", f.format, f.version)));
        }
        let reference = ModelParams::init(f.config.clone(), 0)?;
        let fits = |s: &ParamStore| reference.params.same_layout(s);
        let moments_fit = |a: &AdamMoments, p: &ParamStore| {
            a.m.same_layout(p) && a.v.same_layout(p) && a.v_max.as_ref().map_or(true, |x| x.same_layout(p))
        };
        if !fits(&f.params) || !fits(&f.ema) || !moments_fit(&f.adam_model, &f.params) || !moments_fit(&f.adam_transforms, &f.transforms.params) {
            return Err(Error::ShapeMismatch("training state tensors do not fit the architecture".into()));
        }
        Ok(Self {
            model: ModelParams { config: f.config, params: f.params },
            transforms: f.transforms,
            adam_model: f.adam_model,
            adam_transforms: f.adam_transforms,
            ema: f.ema,
            step: f.step,
            total_steps: f.total_steps,
            rng: f.rng,
        })
    }
}
