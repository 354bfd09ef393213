use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel::Execution;

/// Which components are wired into the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Student prompts over the unified classes; no head, teacher or UFM.
    BaselineUnifiedStudent,
    WoStudent,
    WoTeacher,
    WoUkm,
    WoVp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::BaselineUnifiedStudent,
        Variant::WoStudent,
        Variant::WoTeacher,
        Variant::WoUkm,
        Variant::WoVp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BaselineUnifiedStudent => "baseline_unified_student",
            Variant::WoStudent => "wo_student",
            Variant::WoTeacher => "wo_teacher",
            Variant::WoUkm => "wo_ukm",
            Variant::WoVp => "wo_vp",
        }
    }

    pub fn uses_student(self) -> bool {
        self != Variant::WoStudent
    }

    pub fn uses_head(self) -> bool {
        !matches!(self, Variant::BaselineUnifiedStudent | Variant::WoStudent)
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, Variant::Full | Variant::WoStudent | Variant::WoUkm | Variant::WoVp)
    }

    pub fn uses_ufm(self) -> bool {
        matches!(self, Variant::Full | Variant::WoVp)
    }

    /// Student context projected into the visual token stream.
    pub fn uses_visual_prompts(self) -> bool {
        self.uses_student() && self != Variant::WoVp
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == key || (key == "baseline" && *v == Variant::BaselineUnifiedStudent))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub temperature: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Momentum for SGD; first-moment decay for Adam.
    pub momentum: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    /// Stop once this many epochs pass without a lower dev ACER; `0` disables.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Teacher template groups `G`.
    pub num_teachers: usize,
    /// Student context vectors `N`.
    pub num_context: usize,
    /// Shared width of both towers and of the joint space.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
    pub patch_size: usize,
    pub execution: Execution,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// When set, images are read from `<image_dir>/<sample_id>.png` instead of
    /// being rendered from their descriptors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            temperature: 0.07,
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            grad_clip: 0.0,
            epochs: 30,
            patience: 10,
            batch_size: 32,
            seed: 0,
            variant: Variant::Full,
            num_teachers: 6,
            num_context: 8,
            width: 64,
            layers: 2,
            heads: 4,
            context_len: 16,
            patch_size: 8,
            execution: Execution::default(),
            manifest: None,
            image_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.grad_clip < 0.0 {
            return fail("grad_clip must be non-negative".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(1..=8).contains(&self.num_teachers) {
            return fail(format!("num_teachers must be in 1..=8, got {}", self.num_teachers));
        }
        if self.num_context == 0 {
            return fail("num_context must be at least 1".into());
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} does not split into {} heads", self.width, self.heads));
        }
        Ok(())
    }

    /// Parses flat `key = value` text; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // relative data paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.manifest, &mut cfg.image_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = TrainConfig { variant: Variant::WoUkm, seed: 7, ..Default::default() };
        let text = cfg.to_text();
        assert!(text.contains("variant = \"wo_ukm\""));
        assert!(text.lines().all(|l| !l.starts_with('[')), "config must stay flat");
        assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_text_keeps_defaults_and_rejects_unknown_keys() {
        let cfg = TrainConfig::from_text("lambda = 0.0\nepochs = 2\n").unwrap();
        assert_eq!((cfg.lambda, cfg.epochs, cfg.temperature), (0.0, 2, 0.07));
        assert_eq!(TrainConfig::from_text("lamda = 1.0").unwrap_err().kind(), "config");
        assert_eq!(TrainConfig::from_text("temperature = 0.0").unwrap_err().kind(), "config");
    }

    #[test]
    fn variant_wiring_table() {
        assert!(Variant::Full.uses_ufm() && Variant::Full.uses_visual_prompts());
        assert!(!Variant::WoUkm.uses_ufm() && Variant::WoUkm.uses_teacher());
        assert!(!Variant::WoVp.uses_visual_prompts());
        assert!(!Variant::WoStudent.uses_visual_prompts());
        assert!(!Variant::BaselineUnifiedStudent.uses_head());
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("baseline".parse::<Variant>().unwrap(), Variant::BaselineUnifiedStudent);
    }
}
