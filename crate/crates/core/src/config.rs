//! Run configuration, read from TOML with one section per stage.
//!
//! Every key has a default, so an empty file is a valid (full-scale)
//! configuration; unknown keys are rejected to catch typos.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aegan::{AeArchitecture, AeSchedule, FakeRatio, TrainSchedule};
use crate::data::{DatasetKind, DatasetParams};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::sdot::{OptimizerKind, SolverConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Defaults to a prefix of the configuration hash.
    pub run_id: Option<String>,
    pub data: DataSection,
    pub ae: AeSection,
    pub ot: OtSection,
    pub gan: GanSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    GaussianMixture,
    Segments,
    TwoRings,
    /// Images from an IDX file.
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub modes: usize,
    pub per_mode: usize,
    pub sigma: Option<f64>,
    pub idx_path: Option<PathBuf>,
    /// Keep only the first `limit` IDX images (0 = all).
    pub limit: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { kind: DataKind::GaussianMixture, modes: 3, per_mode: 1000, sigma: None, idx_path: None, limit: 0 }
    }
}

impl DataSection {
    /// Parameters of a synthetic kind; `None` for IDX input.
    pub fn synthetic(&self) -> Option<DatasetParams> {
        let kind = match self.kind {
            DataKind::GaussianMixture => DatasetKind::GaussianMixture,
            DataKind::Segments => DatasetKind::Segments,
            DataKind::TwoRings => DatasetKind::TwoRings,
            DataKind::Idx => return None,
        };
        Some(DatasetParams { kind, modes: self.modes, per_mode: self.per_mode, sigma: self.sigma })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeSection {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mse_threshold: f64,
}

impl Default for AeSection {
    fn default() -> Self {
        let s = AeSchedule::default();
        AeSection {
            latent_dim: 2,
            hidden: vec![64, 64],
            activation: Activation::LeakyRelu,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr: s.lr,
            mse_threshold: s.mse_threshold,
        }
    }
}

impl AeSection {
    pub fn architecture(&self, data_dim: usize) -> AeArchitecture {
        AeArchitecture { data_dim, latent_dim: self.latent_dim, hidden: self.hidden.clone(), activation: self.activation }
    }

    pub fn schedule(&self) -> AeSchedule {
        AeSchedule { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, mse_threshold: self.mse_threshold }
    }
}

/// Solver keys left unset take the size-dependent defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OtSection {
    /// Rips scale; unset picks it from the codes.
    pub epsilon: Option<f64>,
    pub neighbor_count: Option<usize>,
    pub mc_samples: Option<usize>,
    pub verify_samples: Option<usize>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub optimizer: Option<OptimizerKind>,
}

impl OtSection {
    pub fn solver(&self, n: usize) -> SolverConfig {
        let mut c = SolverConfig::for_targets(n);
        if let Some(v) = self.mc_samples {
            c.mc_samples = v;
        }
        if let Some(v) = self.verify_samples {
            c.verify_samples = v;
        }
        if let Some(v) = self.tolerance {
            c.tolerance = v;
        }
        if let Some(v) = self.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = self.optimizer {
            c.optimizer = v;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentSource {
    /// The extended transport map.
    Ot,
    /// Spherical Gaussian fitted to the codes (ablation).
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    pub lr_g: f64,
    pub lr_ratio: f64,
    pub t_inner: usize,
    pub beta: f64,
    pub alpha_hidden: f64,
    pub alpha_last: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub generated_parts: usize,
    pub reconstructed_parts: usize,
    pub disc_hidden: Vec<usize>,
    pub latent_source: LatentSource,
}

impl Default for GanSection {
    fn default() -> Self {
        let s = TrainSchedule::default();
        GanSection {
            lr_g: s.lr_g,
            lr_ratio: s.lr_ratio,
            t_inner: s.t_inner,
            beta: s.beta,
            alpha_hidden: s.alpha_hidden,
            alpha_last: s.alpha_last,
            batch_size: s.batch_size,
            epochs: s.epochs,
            generated_parts: s.fake_ratio.generated,
            reconstructed_parts: s.fake_ratio.reconstructed,
            disc_hidden: s.disc_hidden,
            latent_source: LatentSource::Ot,
        }
    }
}

impl GanSection {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            lr_g: self.lr_g,
            lr_ratio: self.lr_ratio,
            t_inner: self.t_inner,
            beta: self.beta,
            alpha_hidden: self.alpha_hidden,
            alpha_last: self.alpha_last,
            batch_size: self.batch_size,
            epochs: self.epochs,
            fake_ratio: FakeRatio { generated: self.generated_parts, reconstructed: self.reconstructed_parts },
            disc_hidden: self.disc_hidden.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Generated samples scored for coverage and the support certificate.
    pub samples: usize,
    /// Size of each exact-W2 block.
    pub w2_block: usize,
    /// Cube samples for the cell-uniformity test.
    pub uniformity_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { samples: 10_000, w2_block: 500, uniformity_samples: 100_000 }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Missing { path: path.to_path_buf(), what: e.to_string() })?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.kind == DataKind::Idx && d.idx_path.is_none() {
            return Err(Error::Config("data.kind = \"idx\" needs data.idx_path".into()));
        }
        if d.kind != DataKind::Idx {
            positive("data.per_mode", d.per_mode)?;
            positive("data.modes", d.modes)?;
        }
        if let Some(s) = d.sigma {
            if !(s >= 0.0) {
                return Err(Error::Config("data.sigma must be non-negative".into()));
            }
        }
        positive("ae.latent_dim", self.ae.latent_dim)?;
        positive("ae.epochs", self.ae.epochs)?;
        positive("ae.batch_size", self.ae.batch_size)?;
        if self.ae.hidden.contains(&0) || !(self.ae.lr > 0.0) {
            return Err(Error::Config("ae widths and learning rate must be positive".into()));
        }
        if let Some(e) = self.ot.epsilon {
            if !(e > 0.0) {
                return Err(Error::Config("ot.epsilon must be positive".into()));
            }
        }
        for (name, v) in [
            ("ot.mc_samples", self.ot.mc_samples),
            ("ot.verify_samples", self.ot.verify_samples),
            ("ot.max_iterations", self.ot.max_iterations),
            ("ot.neighbor_count", self.ot.neighbor_count),
        ] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        if !(self.gan.alpha_hidden >= 0.0) || self.gan.alpha_last.is_some_and(|a| !(a >= 0.0)) {
            return Err(Error::Config("feature weights must be non-negative".into()));
        }
        self.gan.schedule().validate().map_err(|e| Error::Config(e.to_string()))?;
        positive("eval.samples", self.eval.samples)?;
        positive("eval.w2_block", self.eval.w2_block)?;
        positive("eval.uniformity_samples", self.eval.uniformity_samples)?;
        Ok(())
    }
}
