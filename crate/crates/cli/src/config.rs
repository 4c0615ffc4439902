//! Experiment configuration file.

use std::path::{Path, PathBuf};

use became_core::taskgen::{self, GaussianStreamSpec};
use became_core::{PipelineConfig, RunKind, TaskStream};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticStream {
    pub tasks: usize,
    pub dim: usize,
    pub classes_per_task: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub separation: f64,
}

impl Default for SyntheticStream {
    fn default() -> Self {
        SyntheticStream {
            tasks: 5,
            dim: 32,
            classes_per_task: 2,
            n_train: 500,
            n_test: 5000,
            separation: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxStream {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub classes_per_task: usize,
    /// Shuffle the class order with this seed before splitting.
    #[serde(default)]
    pub class_order_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamConfig {
    Synthetic(SyntheticStream),
    Idx(IdxStream),
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig::Synthetic(SyntheticStream::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub pipeline: PipelineConfig,
    pub seeds: Vec<u64>,
    /// Methods run next to the merging method; `multitask` supplies the
    /// upper bound used for IM.
    pub baselines: Vec<RunKind>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            stream: StreamConfig::default(),
            pipeline: PipelineConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            baselines: vec![RunKind::ProjectionOnly, RunKind::Finetune, RunKind::Multitask],
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn config_error(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config {
        key: key.to_string(),
        message: msg.to_string(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error("<file>", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            config_error(if key == "." { "<root>" } else { &key }, e.inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match &self.stream {
            StreamConfig::Synthetic(s) => {
                for (key, v) in [
                    ("stream.synthetic.tasks", s.tasks),
                    ("stream.synthetic.dim", s.dim),
                    ("stream.synthetic.n_train", s.n_train),
                    ("stream.synthetic.n_test", s.n_test),
                ] {
                    if v == 0 {
                        return Err(config_error(key, "must be at least 1"));
                    }
                }
                if s.classes_per_task < 2 {
                    return Err(config_error("stream.synthetic.classes_per_task", "must be at least 2"));
                }
                if s.n_train < s.classes_per_task || s.n_test < s.classes_per_task {
                    return Err(config_error("stream.synthetic.n_train", "needs at least one sample per class"));
                }
                if !(s.separation > 0.0 && s.separation.is_finite()) {
                    return Err(config_error("stream.synthetic.separation", "must be positive"));
                }
            }
            StreamConfig::Idx(s) => {
                for (key, path) in [
                    ("stream.idx.train_images", &s.train_images),
                    ("stream.idx.train_labels", &s.train_labels),
                    ("stream.idx.test_images", &s.test_images),
                    ("stream.idx.test_labels", &s.test_labels),
                ] {
                    if !path.is_file() {
                        return Err(config_error(key, format!("no such file {}", path.display())));
                    }
                }
                if s.classes_per_task < 2 {
                    return Err(config_error("stream.idx.classes_per_task", "must be at least 2"));
                }
            }
        }
        self.pipeline.validate().map_err(|e| config_error("pipeline", e))?;
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(config_error("seeds", "seeds must be distinct"));
        }
        if self.baselines.contains(&RunKind::Became) {
            return Err(config_error("baselines", "`became` always runs and is not a baseline"));
        }
        let mut b = self.baselines.clone();
        b.dedup();
        if b.len() != self.baselines.len() {
            return Err(config_error("baselines", "duplicate entries"));
        }
        Ok(())
    }

    /// Methods in run order: the upper bound first, then the merging method.
    pub fn methods(&self) -> Vec<RunKind> {
        let mut out = Vec::new();
        if self.baselines.contains(&RunKind::Multitask) {
            out.push(RunKind::Multitask);
        }
        out.push(RunKind::Became);
        out.extend(self.baselines.iter().copied().filter(|k| *k != RunKind::Multitask));
        out
    }

    /// The task stream for one seed. Synthetic streams are drawn from the seed;
    /// IDX streams are the same for every seed.
    pub fn build_stream(&self, seed: u64) -> Result<TaskStream, CliError> {
        match &self.stream {
            StreamConfig::Synthetic(s) => taskgen::synthetic_gaussians(
                seed,
                &GaussianStreamSpec {
                    tasks: s.tasks,
                    dim: s.dim,
                    classes_per_task: s.classes_per_task,
                    n_train: s.n_train,
                    n_test: s.n_test,
                    separation: s.separation,
                },
            )
            .map_err(|e| config_error("stream.synthetic", e)),
            StreamConfig::Idx(s) => {
                let train = taskgen::load_idx(&s.train_images, &s.train_labels)
                    .map_err(|e| config_error("stream.idx.train_images", e))?;
                let test = taskgen::load_idx(&s.test_images, &s.test_labels)
                    .map_err(|e| config_error("stream.idx.test_images", e))?;
                let order = s
                    .class_order_seed
                    .map(|cs| taskgen::permuted_class_order(train.classes(), cs));
                TaskStream::split(&train, &test, s.classes_per_task, order.as_deref())
                    .map_err(|e| config_error("stream.idx.classes_per_task", e))
            }
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub kind: RunKind,
    pub seed: u64,
    pub experiment: ExperimentConfig,
}
