//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::enhance::{EnhancerArch, EnhancerTrainConfig};
use crate::error::{Error, Result};
use crate::height_head::{HeadArch, HeadTrainConfig};
use crate::scenegen::{ParcelSpec, PlantationLayout, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub rgb_noise: f64,
    pub layout: PlantationLayout,
    /// Explicit parcels; when present they replace the generated layout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parcels: Option<Vec<ParcelSpec>>,
    /// Rows of a second, independently seeded scene of the same width used
    /// only for evaluation. Zero disables it.
    pub holdout_height: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection {
            height: 1036,
            width: 1036,
            cell_size: 1.0,
            rgb_noise: 0.03,
            layout: PlantationLayout::default(),
            parcels: None,
            holdout_height: 518,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Stub,
    /// Precomputed feature files `tile_XX.feat` in `ExtractorSection::dir`.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorSection {
    pub kind: ExtractorKind,
    pub channels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        ExtractorSection {
            kind: ExtractorKind::Stub,
            channels: 16,
            dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancerSection {
    pub stages: Vec<usize>,
    pub k_up: usize,
    pub c_mid: usize,
    pub k_enc: usize,
    pub train: EnhancerTrainConfig,
}

impl Default for EnhancerSection {
    fn default() -> Self {
        let a = EnhancerArch::new(16, vec![7, 2]);
        EnhancerSection {
            stages: a.stages,
            k_up: a.k_up,
            c_mid: a.c_mid,
            k_enc: a.k_enc,
            train: EnhancerTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSection {
    pub hidden1: usize,
    pub hidden2: usize,
    pub h_max: f64,
    pub train: HeadTrainConfig,
}

impl Default for HeadSection {
    fn default() -> Self {
        let a = HeadArch::new(16, 30.0);
        HeadSection {
            hidden1: a.hidden1,
            hidden2: a.hidden2,
            h_max: a.h_max,
            train: HeadTrainConfig {
                epochs: 10,
                ..HeadTrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionSection {
    pub radius_m: f64,
    pub min_height_m: f64,
    /// Distance within which a detection counts as finding a reference tree.
    pub match_radius_m: f64,
}

impl Default for DetectionSection {
    fn default() -> Self {
        DetectionSection {
            radius_m: 5.0,
            min_height_m: 2.0,
            match_radius_m: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub tile_size: usize,
    pub patch_stride: usize,
    /// When no holdout scene is configured, the last this-many tiles of
    /// the main scene are held out.
    pub holdout_tiles: usize,
    pub scene: SceneSection,
    pub extractor: ExtractorSection,
    pub enhancer: EnhancerSection,
    pub head: HeadSection,
    pub detection: DetectionSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            tile_size: 518,
            patch_stride: 14,
            holdout_tiles: 2,
            scene: SceneSection::default(),
            extractor: ExtractorSection::default(),
            enhancer: EnhancerSection::default(),
            head: HeadSection::default(),
            detection: DetectionSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_stride == 0 || self.tile_size == 0 || !self.tile_size.is_multiple_of(self.patch_stride) {
            return Err(Error::invalid(format!(
                "tile size {} is not a positive multiple of patch stride {}",
                self.tile_size, self.patch_stride
            )));
        }
        let arch = self.enhancer_arch();
        arch.validate()?;
        if !self.patch_stride.is_multiple_of(arch.total_factor()) {
            return Err(Error::invalid(format!(
                "upsample stages {:?} do not divide patch stride {}",
                arch.stages, self.patch_stride
            )));
        }
        self.head_arch().validate()?;
        if !(self.detection.radius_m > 0.0) || !(self.detection.match_radius_m > 0.0) {
            return Err(Error::invalid("detection radii must be positive"));
        }
        Ok(())
    }

    pub fn enhancer_arch(&self) -> EnhancerArch {
        EnhancerArch {
            channels: self.extractor.channels,
            stages: self.enhancer.stages.clone(),
            k_up: self.enhancer.k_up,
            c_mid: self.enhancer.c_mid,
            k_enc: self.enhancer.k_enc,
        }
    }

    pub fn head_arch(&self) -> HeadArch {
        HeadArch {
            channels: self.extractor.channels,
            hidden1: self.head.hidden1,
            hidden2: self.head.hidden2,
            h_max: self.head.h_max,
        }
    }

    /// Training settings with the run seed folded in.
    pub fn enhancer_train(&self) -> EnhancerTrainConfig {
        EnhancerTrainConfig {
            seed: self.seed.wrapping_add(self.enhancer.train.seed),
            ..self.enhancer.train.clone()
        }
    }

    pub fn head_train(&self) -> HeadTrainConfig {
        HeadTrainConfig {
            seed: self.seed.wrapping_add(self.head.train.seed).wrapping_add(1),
            ..self.head.train.clone()
        }
    }

    pub fn extractor_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    fn scene_for(&self, height: usize, seed: u64) -> SceneConfig {
        let s = &self.scene;
        let mut cfg = match &s.parcels {
            Some(parcels) => SceneConfig {
                height,
                width: s.width,
                cell_size: s.cell_size,
                parcels: parcels.clone(),
                rgb_noise: s.rgb_noise,
                rgb_height_ref_m: 30.0,
                seed,
            },
            None => SceneConfig::plantation_grid(height, s.width, &s.layout, seed),
        };
        cfg.cell_size = s.cell_size;
        cfg.rgb_noise = s.rgb_noise;
        cfg
    }

    pub fn scene_config(&self) -> SceneConfig {
        self.scene_for(self.scene.height, self.seed)
    }

    /// Independent evaluation scene, if configured. Explicit parcels are
    /// not reused: the holdout always comes from the generated layout.
    pub fn holdout_scene_config(&self) -> Option<SceneConfig> {
        (self.scene.holdout_height > 0).then(|| {
            let mut cfg = SceneConfig::plantation_grid(
                self.scene.holdout_height,
                self.scene.width,
                &self.scene.layout,
                self.seed.wrapping_add(1),
            );
            cfg.cell_size = self.scene.cell_size;
            cfg.rgb_noise = self.scene.rgb_noise;
            cfg
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tile_size / c.patch_stride, 37);
        assert_eq!(c.enhancer_arch().total_factor(), 14);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "scene": {"height": 140, "width": 280}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.scene.width, 280);
        assert_eq!(c.tile_size, 518);
        assert_eq!(c.head.h_max, 30.0);
    }

    #[test]
    fn indivisible_tile_rejected() {
        assert!(RunConfig::from_json(r#"{"tile_size": 500}"#).is_err());
        assert!(RunConfig::from_json(r#"{"enhancer": {"stages": [3]}}"#).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
