//! Declarative run configuration.
//!
//! Every knob lives in one TOML document with one table per subsystem.
//! Unknown keys are rejected. Missing keys take the defaults below.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub v_full: usize,
    pub v_coarse: usize,
    pub joints: usize,
    pub seed: u64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self {
            v_full: 386,
            v_coarse: 98,
            joints: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: [usize; 2],
    pub kernel: usize,
    pub stride: usize,
    pub d_tok: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: [16, 32],
            kernel: 4,
            stride: 4,
            d_tok: 32,
        }
    }
}

impl BackboneConfig {
    /// Side length of the feature grid after both convolutions.
    pub fn grid_side(&self) -> Result<usize> {
        let mut side = self.image_size;
        for _ in 0..2 {
            if side < self.kernel || !(side - self.kernel).is_multiple_of(self.stride) {
                return Err(Error::Config(format!(
                    "image size {} is not compatible with kernel {} and stride {}",
                    self.image_size, self.kernel, self.stride
                )));
            }
            side = (side - self.kernel) / self.stride + 1;
        }
        Ok(side)
    }

    pub fn grid_cells(&self) -> Result<usize> {
        Ok(self.grid_side()?.pow(2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Fixed weights applied to the vertex outputs of encoders A and B.
    pub fusion: [f64; 2],
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            mlp_hidden: 64,
            fusion: [1.0, 0.1],
            ln_eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbLevel {
    /// Perturb token features after the backbone.
    Feature,
    /// Perturb image pixels before the backbone.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimuConfig {
    pub n_paths: usize,
    pub dropout: f64,
    pub noise_sigma: f64,
    pub mask_ratio: f64,
    pub mask_value: f64,
    pub level: PerturbLevel,
    pub tarm: bool,
}

impl Default for SimuConfig {
    fn default() -> Self {
        Self {
            n_paths: 4,
            dropout: 0.1,
            noise_sigma: 0.05,
            mask_ratio: 0.15,
            mask_value: 0.0,
            level: PerturbLevel::Feature,
            tarm: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsMode {
    /// One contact loss per encoder output, weighted by `w_cls`.
    PerEncoder,
    /// A single contact loss on the fused features, weighted by `w_cls[0]`.
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_m: f64,
    pub w_cls: [f64; 2],
    pub w_sem: f64,
    pub w_bp: f64,
    pub cls_mode: ClsMode,
    pub clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_m: 1.0,
            w_cls: [1.0, 0.1],
            w_sem: 1.0,
            w_bp: 1.0,
            cls_mode: ClsMode::PerEncoder,
            clamp: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 8e-3,
            batch_size: 4,
            decay_factor: 0.5,
            decay_every: 10,
            patience: 5,
            max_epochs: 30,
            seed: 0,
            grad_clip: 5.0,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub pose_params: usize,
    pub contact_eps: f64,
    pub max_boxes: usize,
    pub sem_classes: usize,
    pub bp_classes: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            pose_params: 12,
            contact_eps: 1.0,
            max_boxes: 2,
            sem_classes: 4,
            bp_classes: 8,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mesh: MeshConfig,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub simu: SimuConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::ConfigParse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn unit_interval(name: &str, x: f64) -> Result<()> {
    check((0.0..1.0).contains(&x), || {
        format!("{name} must lie in [0, 1), got {x}")
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    /// Canonical serialization; the config hash is taken over this text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Hash of the knobs that determine generated data: mesh, scene and image size.
    pub fn data_hash(&self) -> String {
        #[derive(Serialize)]
        struct DataKey<'a> {
            mesh: &'a MeshConfig,
            scene: &'a SceneConfig,
            image_size: usize,
        }
        let key = DataKey {
            mesh: &self.mesh,
            scene: &self.scene,
            image_size: self.backbone.image_size,
        };
        let text = toml::to_string(&key).expect("data key is representable as TOML");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mesh;
        check(m.joints >= 2, || format!("mesh.joints must be at least 2, got {}", m.joints))?;
        check(m.v_coarse >= m.joints && m.v_coarse < m.v_full, || {
            format!(
                "mesh.v_coarse must satisfy joints <= v_coarse < v_full, got {} (v_full {})",
                m.v_coarse, m.v_full
            )
        })?;

        let b = &self.backbone;
        check(b.kernel >= 1 && b.stride >= 1, || "backbone kernel and stride must be positive".into())?;
        check(b.channels.iter().all(|&c| c >= 1) && b.d_tok >= 1, || {
            "backbone channel counts must be positive".into()
        })?;
        b.grid_side()?;

        let e = &self.encoder;
        check(e.depth >= 1, || "encoder.depth must be at least 1".into())?;
        check(e.heads >= 1 && b.d_tok.is_multiple_of(e.heads), || {
            format!("encoder.heads ({}) must divide backbone.d_tok ({})", e.heads, b.d_tok)
        })?;
        check(e.mlp_hidden >= 1, || "encoder.mlp_hidden must be positive".into())?;
        check(e.ln_eps > 0.0, || format!("encoder.ln_eps must be positive, got {}", e.ln_eps))?;
        check(e.fusion.iter().all(|w| w.is_finite()), || "encoder.fusion must be finite".into())?;

        let s = &self.simu;
        check((1..=4).contains(&s.n_paths), || {
            format!("simu.n_paths must lie in 1..=4, got {}", s.n_paths)
        })?;
        unit_interval("simu.dropout", s.dropout)?;
        unit_interval("simu.mask_ratio", s.mask_ratio)?;
        check(s.noise_sigma >= 0.0, || "simu.noise_sigma must be non-negative".into())?;
        check(s.mask_value.is_finite(), || "simu.mask_value must be finite".into())?;

        let l = &self.loss;
        let weights = [l.w_m, l.w_cls[0], l.w_cls[1], l.w_sem, l.w_bp];
        check(weights.iter().all(|w| w.is_finite() && *w >= 0.0), || {
            "loss weights must be finite and non-negative".into()
        })?;
        check(l.clamp > 0.0 && l.clamp < 0.5, || "loss.clamp must lie in (0, 0.5)".into())?;

        let t = &self.train;
        check(t.lr >= 0.0 && t.lr.is_finite(), || format!("train.lr must be non-negative, got {}", t.lr))?;
        check(t.batch_size >= 1, || "train.batch_size must be at least 1".into())?;
        check(t.max_epochs >= 1, || "train.max_epochs must be at least 1".into())?;
        check(t.patience >= 1, || "train.patience must be at least 1".into())?;
        check(t.decay_every >= 1, || "train.decay_every must be at least 1".into())?;
        check(t.decay_factor > 0.0 && t.decay_factor <= 1.0, || {
            "train.decay_factor must lie in (0, 1]".into()
        })?;
        check(t.grad_clip >= 0.0, || "train.grad_clip must be non-negative".into())?;
        check((0.0..=1.0).contains(&t.threshold), || "train.threshold must lie in [0, 1]".into())?;

        let c = &self.scene;
        check(c.pose_params == 12, || {
            format!("scene.pose_params must be 12 for the built-in generator, got {}", c.pose_params)
        })?;
        check(c.contact_eps > 0.0, || "scene.contact_eps must be positive".into())?;
        check(c.max_boxes <= 2, || "scene.max_boxes must be at most 2".into())?;
        check(c.sem_classes == 4, || "scene.sem_classes must be 4 (background, ground, box, body)".into())?;
        check(c.bp_classes == m.joints, || {
            format!("scene.bp_classes ({}) must equal mesh.joints ({})", c.bp_classes, m.joints)
        })?;
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = cfg.to_toml().parse().unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!("".parse::<RunConfig>().unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_reports_position() {
        let err = "[train]\nlr = 0.1\nbogus = 3\n".parse::<RunConfig>().unwrap_err();
        match err {
            Error::ConfigParse { line, column, .. } => assert_eq!((line, column), (3, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn head_divisibility_is_checked() {
        let err = "[encoder]\nheads = 5\n".parse::<RunConfig>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(BackboneConfig::default().grid_cells().unwrap(), 16);
        let bad = BackboneConfig {
            image_size: 62,
            ..Default::default()
        };
        assert!(bad.grid_side().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let mut cfg = RunConfig::default();
        let h0 = cfg.hash();
        let d0 = cfg.data_hash();
        cfg.train.lr = 1e-3;
        assert_ne!(cfg.hash(), h0);
        assert_eq!(cfg.data_hash(), d0);
        cfg.scene.seed += 1;
        assert_ne!(cfg.data_hash(), d0);
    }
}
