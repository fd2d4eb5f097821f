//! Experiment configuration and the loaded model, dataset and crop indexes
//! it refers to.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMethod;
use crate::concepts::{ConceptConfig, DEFAULT_MAX_IMAGES, DEFAULT_MIN_IMAGES, DEFAULT_N};
use crate::crop_index::{build_crop_index, CropIndex, Exclusion};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::explain::DEFAULT_M;
use crate::model::ModelHandle;
use crate::nmf::NmfOptions;
use crate::persist;

pub const DEFAULT_SAMPLE_COUNTS: [usize; 10] = [50, 100, 200, 300, 400, 500, 600, 700, 800, 900];
pub const DEFAULT_QUIZ_ITEMS: usize = 50;
pub const DEFAULT_CONTRAST_TARGETS: usize = 10;

fn default_n_values() -> Vec<usize> {
    vec![DEFAULT_N]
}
fn default_max_images() -> usize {
    DEFAULT_MAX_IMAGES
}
fn default_min_images() -> usize {
    DEFAULT_MIN_IMAGES
}
fn default_m() -> usize {
    DEFAULT_M
}
fn one() -> usize {
    1
}
fn default_counts() -> Vec<usize> {
    DEFAULT_SAMPLE_COUNTS.to_vec()
}
fn default_quiz_items() -> usize {
    DEFAULT_QUIZ_ITEMS
}
fn default_contrast_targets() -> usize {
    DEFAULT_CONTRAST_TARGETS
}

/// JSON experiment description. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Adapter config of the model.
    pub model: PathBuf,
    /// Dataset directory (`labels.csv` plus images).
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Layers to explain; empty means the deepest cataloged layer.
    #[serde(default)]
    pub layers: Vec<String>,
    #[serde(default = "default_n_values")]
    pub n_values: Vec<usize>,
    #[serde(default)]
    pub method: AttributionMethod,
    #[serde(default = "default_max_images")]
    pub max_images: usize,
    #[serde(default = "default_min_images")]
    pub min_images: usize,
    #[serde(default)]
    pub exclusion: Exclusion,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every `class_stride`-th class.
    #[serde(default = "one")]
    pub class_stride: usize,
    /// Explicit class list; overrides `class_stride`.
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    #[serde(default = "default_counts")]
    pub sample_counts: Vec<usize>,
    #[serde(default)]
    pub nmf: NmfOptions,
    #[serde(default = "default_quiz_items")]
    pub quiz_items: usize,
    /// Random contrast targets drawn per class for shifting sweeps.
    #[serde(default = "default_contrast_targets")]
    pub contrast_targets: usize,
}

impl ExperimentConfig {
    pub fn new(model: PathBuf, dataset: PathBuf, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            model,
            dataset,
            out_dir,
            layers: Vec::new(),
            n_values: default_n_values(),
            method: AttributionMethod::default(),
            max_images: DEFAULT_MAX_IMAGES,
            min_images: DEFAULT_MIN_IMAGES,
            exclusion: Exclusion::default(),
            m: DEFAULT_M,
            seed: 0,
            class_stride: 1,
            classes: None,
            sample_counts: default_counts(),
            nmf: NmfOptions::default(),
            quiz_items: DEFAULT_QUIZ_ITEMS,
            contrast_targets: DEFAULT_CONTRAST_TARGETS,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = persist::read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.model, &mut cfg.dataset, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.model, &self.dataset] {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
        }
        if self.class_stride == 0 {
            return Err(Error::Config("class_stride must be at least 1".into()));
        }
        if self.n_values.contains(&0) {
            return Err(Error::Config("n values must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        Ok(())
    }

    pub fn concept_config(&self, layer: &str, n: usize, max_images: usize) -> ConceptConfig {
        ConceptConfig {
            layer: layer.to_string(),
            n,
            method: self.method.clone(),
            max_images,
            min_images: self.min_images.min(max_images),
            nmf: self.nmf,
            seed: self.seed,
        }
    }
}

/// A loaded experiment: model, dataset and lazily built crop indexes.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub model: ModelHandle,
    pub dataset: Dataset,
    indexes: Mutex<HashMap<String, Arc<CropIndex>>>,
}

impl Workspace {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let model = ModelHandle::load(&config.model)?;
        let dataset = Dataset::load(&config.dataset)?;
        Ok(Self::from_parts(config, model, dataset))
    }

    pub fn from_parts(config: ExperimentConfig, model: ModelHandle, dataset: Dataset) -> Self {
        Workspace { config, model, dataset, indexes: Mutex::new(HashMap::new()) }
    }

    /// Configured layers, or the deepest cataloged one.
    pub fn layers(&self) -> Vec<String> {
        if self.config.layers.is_empty() {
            vec![self.model.deepest_layer().name.clone()]
        } else {
            self.config.layers.clone()
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        match &self.config.classes {
            Some(c) => c.clone(),
            None => (0..self.model.num_classes).step_by(self.config.class_stride.max(1)).collect(),
        }
    }

    pub fn index_dir(&self, layer: &str) -> PathBuf {
        self.config.out_dir.join("index").join(layer)
    }

    /// The crop index for `layer`: from memory, from disk if it matches the
    /// current model and dataset, or freshly built and saved.
    pub fn index(&self, layer: &str) -> Result<Arc<CropIndex>> {
        if let Some(ix) = self.indexes.lock().unwrap().get(layer) {
            return Ok(ix.clone());
        }
        let dir = self.index_dir(layer);
        let cached = if dir.join("manifest.json").exists() {
            let ix = CropIndex::load(&dir)?;
            let fresh = ix.manifest.model_fingerprint == self.model.fingerprint()
                && ix.manifest.dataset_fingerprint == self.dataset.fingerprint()
                && ix.manifest.layer.name == layer;
            fresh.then_some(ix)
        } else {
            None
        };
        let ix = match cached {
            Some(ix) => ix,
            None => self.rebuild_index(layer)?,
        };
        let ix = Arc::new(ix);
        self.indexes.lock().unwrap().insert(layer.to_string(), ix.clone());
        Ok(ix)
    }

    /// Builds and saves the index for `layer` unconditionally.
    pub fn rebuild_index(&self, layer: &str) -> Result<CropIndex> {
        log::info!("building crop index for {layer} over {} images", self.dataset.len());
        let ix = build_crop_index(&self.model, &self.dataset, layer)?;
        ix.save(&self.index_dir(layer))?;
        self.indexes.lock().unwrap().remove(layer);
        Ok(ix)
    }
}
