//! In-memory synthetic benchmarks: scene corpora, MAE pre-training and
//! sample-size sweeps over fine-tuned heads.

use std::fmt;

use crate::config::ModelConfig;
use crate::data::{local_normalize, synth_scene, Dataset, Sample, Scene, SceneParams};
use crate::error::{Error, Result};
use crate::mae::MaeModel;
use crate::optim::{compute_class_weights, AdamW, TrainPlan};
use crate::persist::mae_checkpoint;
use crate::rng;
use crate::seg::{HeadKind, Segmenter};
use crate::train::{finetune_loop, pretrain_loop, FinetuneOutcome, PretrainPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Building,
    Road,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "building" => Ok(Task::Building),
            "road" => Ok(Task::Road),
            other => Err(Error::Config(format!("unknown task {other:?} (expected building or road)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Building => "building",
            Task::Road => "road",
        }
    }

    pub fn legend(self) -> [&'static str; 2] {
        ["background", self.name()]
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scene `i` of a corpus uses seed `derive_seed(seed, [i])`.
pub fn scene_params(size: usize, seed: u64, i: usize) -> SceneParams {
    SceneParams::for_size(size, rng::derive_seed(seed, &[i as u64]))
}

pub fn synth_scenes(count: usize, size: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..count).map(|i| synth_scene(&scene_params(size, seed, i))).collect()
}

/// Normalized tiles with `task` labels; every sample starts in `train`.
pub fn scenes_dataset(scenes: &[Scene], task: Task) -> Dataset {
    let samples = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Sample {
            image: local_normalize(&s.dem).elevations,
            label: match task {
                Task::Building => s.buildings.classes.clone(),
                Task::Road => s.roads.classes.clone(),
            },
            name: format!("scene{i:04}"),
        })
        .collect::<Vec<_>>();
    Dataset {
        side: scenes.first().map_or(0, |s| s.dem.side),
        legend: task.legend().iter().map(|s| s.to_string()).collect(),
        train: (0..samples.len()).collect(),
        val: Vec::new(),
        samples,
    }
}

/// Pre-trains a fresh MAE on every sample of `data`; returns the model and
/// its per-step losses.
pub fn pretrain_mae(config: &ModelConfig, data: &Dataset, plan: &PretrainPlan) -> Result<(MaeModel, Vec<f64>)> {
    let mut model = MaeModel::new(config, plan.seed)?;
    let mut opt = AdamW::new(plan.weight_decay);
    let pool: Vec<usize> = (0..data.len()).collect();
    let losses = pretrain_loop(&mut model, &mut opt, data, &pool, plan, 0, |_, _, _| Ok(()))?;
    Ok((model, losses))
}

/// Fine-tunes one head on `train`, with class weights from the training
/// labels. The UperNet backbone is copied from `backbone`.
pub fn finetune_head(
    kind: HeadKind,
    config: &ModelConfig,
    backbone: Option<&MaeModel>,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    plan: &TrainPlan,
) -> Result<FinetuneOutcome> {
    let mut model = Segmenter::new(kind, config, plan.seed)?;
    if let (Some(b), HeadKind::UperNet) = (backbone, kind) {
        crate::persist::load_backbone(&mut model, &mae_checkpoint(b, 0, None), false)?;
    }
    let mut plan = plan.clone();
    plan.class_weights = compute_class_weights(&data.histogram(train))?;
    finetune_loop(model, data, train, val, &plan, |_| Ok(()))
}
