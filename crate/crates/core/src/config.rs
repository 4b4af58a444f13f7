//! Run configuration for the command-line pipeline.
//!
//! A TOML file only needs the keys it changes: it is merged key by key over
//! [`RunConfig::default`], and unknown keys are rejected. After loading,
//! [`RunConfig::resolve`] derives every component seed from the master seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::models::ModelConfig;
use crate::synthetic::SyntheticShiftConfig;
use crate::training::{SegInput, TrainConfig};
use crate::{Error, Result};

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "ENDOUDA_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Read `source/` and `target/` dataset directories from here instead
    /// of generating synthetic data.
    pub directory: Option<PathBuf>,
    pub synthetic: SyntheticShiftConfig,
    pub source_count: usize,
    pub target_count: usize,
    /// Share of source images held out for validation.
    pub val_fraction: f64,
    /// Share of target images set aside as the pool that mixing draws from;
    /// the rest is the fixed test set.
    pub pool_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            directory: None,
            synthetic: SyntheticShiftConfig::default(),
            source_count: 360,
            target_count: 200,
            val_fraction: 1.0 / 6.0,
            pool_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of qualitative panels to render; 0 renders one per test image.
    pub panels: usize,
    pub batch_size: usize,
    pub write_traces: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            panels: 8,
            batch_size: 32,
            write_traces: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.0, 0.10, 0.25, 0.50, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub vae: TrainConfig,
    pub seg: TrainConfig,
    /// Source-only U-Net baseline: own encoder, raw images.
    pub naive: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut naive = TrainConfig::seg_default();
        naive.freeze_encoder = false;
        naive.seg_input = SegInput::Raw;
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            vae: TrainConfig::vae_default(),
            seg: TrainConfig::seg_default(),
            naive,
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = toml::from_str(text)?;
        let mut merged = toml::Value::try_from(RunConfig::default())
            .map_err(|e| Error::config("config", format!("defaults do not serialise: {e}")))?;
        merge(&mut merged, user);
        let cfg: RunConfig = merged.try_into()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Derives component seeds from `seed` and validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        let s = self.seed;
        self.data.synthetic.seed = s;
        self.model.init_seed = s.wrapping_add(1);
        self.vae.seed = s.wrapping_add(2);
        self.seg.seed = s.wrapping_add(3);
        self.naive.seed = s.wrapping_add(4);
        self.adapt.seed = s.wrapping_add(5);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        use crate::training::Stage;
        for (field, t, want) in [("vae.stage", &self.vae, Stage::Vae), ("seg.stage", &self.seg, Stage::Seg), ("naive.stage", &self.naive, Stage::Seg)] {
            if t.stage != want {
                return Err(Error::config(field, format!("must be {want:?}").to_lowercase()));
            }
        }
        self.model.validate()?;
        self.vae.validate()?;
        self.seg.validate()?;
        self.naive.validate()?;
        self.adapt.validate()?;
        if self.directory_data().is_none() {
            self.data.synthetic.validate()?;
            if self.data.synthetic.image_size != self.model.encoder.input_size {
                return Err(Error::config(
                    "data.synthetic.image_size",
                    format!("must equal model.encoder.input_size ({})", self.model.encoder.input_size),
                ));
            }
        }
        if self.data.source_count < 2 || self.data.target_count < 2 {
            return Err(Error::config("data.source_count", "need at least two images per domain"));
        }
        for (field, v) in [("data.val_fraction", self.data.val_fraction), ("data.pool_fraction", self.data.pool_fraction)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(field, format!("{v} is not in (0, 1)")));
            }
        }
        if self.sweep.fractions.is_empty() {
            return Err(Error::config("sweep.fractions", "must not be empty"));
        }
        for f in &self.sweep.fractions {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::config("sweep.fractions", format!("{f} is not in [0, 1]")));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn directory_data(&self) -> Option<&Path> {
        self.data.directory.as_deref()
    }

    /// Writes the resolved configuration to `<output_dir>/config.toml`.
    pub fn write_provenance(&self) -> Result<PathBuf> {
        let path = self.output_dir.join("config.toml");
        crate::io::ensure_parent(&path)?;
        std::fs::write(&path, self.to_toml_string()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_merge_over_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            seed = 9
            [vae]
            max_epochs = 3
            [data.synthetic.target]
            gamma = 2.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.vae.max_epochs, 3);
        assert_eq!(cfg.vae.learning_rate, 1e-4);
        assert_eq!(cfg.data.synthetic.target.gamma, 2.0);
        assert_eq!(cfg.data.synthetic.target.gains, [0.8, 1.2, 1.5]);
        let r = cfg.resolve().unwrap();
        assert_eq!(r.data.synthetic.seed, 9);
        assert_eq!(r.vae.seed, 11);
    }

    #[test]
    fn round_trip_and_errors() {
        let cfg = RunConfig::default().resolve().unwrap();
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_toml_str("[vae]\nlearnin_rate = 1.0").is_err());
        let err = RunConfig::from_toml_str("[sweep]\nfractions = [0.0, 1.5]").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("sweep.fractions"), "{err}");
        let err = RunConfig::from_toml_str("[data]\npool_fraction = 0.0").unwrap().resolve().unwrap_err();
        assert!(err.to_string().contains("data.pool_fraction"), "{err}");
    }
}
