//! Trained parameters bundled with input statistics and the config echo.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::{Dataset, Dims};
use crate::error::{MednError, Result};
use crate::model::{Model, ModelConfig};
use crate::motion_branch::BackboneFactory;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Per-channel z-score statistics of the training flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl FlowStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }

    pub fn compute(dataset: &Dataset, indices: &[usize]) -> Self {
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut count = [0usize; 2];
        for &i in indices {
            let t = dataset.samples[i].flow.tensor();
            let plane = t.shape()[2] * t.shape()[3];
            for (k, chunk) in t.data().chunks(plane).enumerate() {
                let c = k % 2;
                sum[c] += chunk.iter().sum::<f64>();
                sq[c] += chunk.iter().map(|v| v * v).sum::<f64>();
                count[c] += chunk.len();
            }
        }
        let mut out = Self::identity();
        for c in 0..2 {
            if count[c] > 0 {
                let n = count[c] as f64;
                let mean = sum[c] / n;
                out.mean[c] = mean;
                out.std[c] = (sq[c] / n - mean * mean).max(0.0).sqrt().max(1e-8);
            }
        }
        out
    }

    /// Standardized copy of a `[T-1, 2, H, W]` flow tensor.
    pub fn apply(&self, flow: &Tensor) -> Vec<f64> {
        let plane = flow.shape()[2] * flow.shape()[3];
        flow.data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(k, chunk)| {
                let c = k % 2;
                chunk.iter().map(move |v| (v - self.mean[c]) / self.std[c])
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: ModelConfig,
    dims: Dims,
    num_classes: usize,
    num_aus: usize,
    stats: FlowStats,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub dims: Dims,
    pub num_classes: usize,
    pub num_aus: usize,
    pub stats: FlowStats,
    pub seed: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&Meta {
            config: self.config.clone(),
            dims: self.dims,
            num_classes: self.num_classes,
            num_aus: self.num_aus,
            stats: self.stats.clone(),
            seed: self.seed,
        })?;
        let mut w = BufWriter::new(File::create(path)?);
        self.params.write_archive(&mut w, &meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let origin = path.display().to_string();
        let (params, meta) = ParamStore::read_archive(BufReader::new(File::open(path)?), &origin)?;
        let meta: Meta = serde_json::from_str(&meta).map_err(|e| MednError::Format {
            path: origin,
            message: format!("checkpoint metadata: {e}"),
        })?;
        Ok(Self {
            config: meta.config,
            dims: meta.dims,
            num_classes: meta.num_classes,
            num_aus: meta.num_aus,
            stats: meta.stats,
            seed: meta.seed,
            params,
        })
    }

    /// Rebuilds the network skeleton and checks that every stored parameter fits it.
    pub fn model(&self, external: Option<&BackboneFactory>) -> Result<Model> {
        let (model, mut fresh) = Model::build(
            &self.config,
            &self.dims,
            self.num_classes,
            self.num_aus,
            self.seed,
            external,
        )?;
        let missing = fresh.load_matching(&self.params);
        if !missing.is_empty() || fresh.len() != self.params.len() {
            return Err(MednError::ShapeMismatch(format!(
                "checkpoint does not fit its config; unmatched parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(model)
    }

    /// Checks that a dataset has the dims and label spaces this checkpoint was trained for.
    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        if dataset.manifest.dims != self.dims
            || dataset.num_classes() != self.num_classes
            || dataset.num_aus() != self.num_aus
        {
            return Err(MednError::ShapeMismatch(format!(
                "checkpoint expects dims {:?}, {} classes, {} AUs",
                self.dims, self.num_classes, self.num_aus
            )));
        }
        Ok(())
    }
}
