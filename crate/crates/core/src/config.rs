//! Model configuration. Every knob has an explicit default; the command
//! line tool can dump them with `--print-config`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Rendering resolution.
    pub width: usize,
    pub height: usize,
    pub samples_per_ray: usize,
    pub t_near: f64,
    pub t_far: f64,
    /// Octaves of the sinusoidal position encoding fed to the radiance head.
    pub pe_levels: usize,
    /// Hidden width of the radiance head.
    pub hidden: usize,
    pub leaky_slope: f64,
    /// Initial bias of the density output, so a fresh model starts mostly
    /// transparent.
    pub density_bias: f64,
    pub appearance: AppearanceConfig,
    /// Deformation module; `None` renders a static canonical field.
    pub led: Option<LedConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            height: 32,
            samples_per_ray: 32,
            t_near: 0.5,
            t_far: 3.5,
            pe_levels: 4,
            hidden: 64,
            leaky_slope: 0.2,
            density_bias: -2.0,
            appearance: AppearanceConfig::default(),
            led: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceMode {
    /// Plane features are free parameters in world frame.
    Direct,
    /// Plane features are predicted from a source image by a conv pyramid.
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneTransform {
    /// Rotation and the off-axis part of the translation.
    Rigid,
    RotationOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppearanceConfig {
    pub mode: AppearanceMode,
    /// Plane resolution per level, lowest first.
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    /// Half-width of the world cube spanned by the planes.
    pub extent: f64,
    /// Standard deviation of the initial direct-mode plane values.
    pub init_std: f64,
    pub encoder: EncoderConfig,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        AppearanceConfig {
            mode: AppearanceMode::Direct,
            resolutions: vec![16, 32, 64],
            channels: vec![8, 8, 8],
            extent: 1.0,
            init_std: 0.1,
            encoder: EncoderConfig::default(),
        }
    }
}

impl AppearanceConfig {
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.resolutions;
        if r.is_empty() || r.len() != self.channels.len() {
            return Err(Error::InvalidArgument(format!(
                "need one channel count per level: {} resolutions, {} channel counts",
                r.len(),
                self.channels.len()
            )));
        }
        if r[0] < 2 || r.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(format!("plane resolutions must be >= 2 and strictly increasing: {r:?}")));
        }
        if self.mode == AppearanceMode::Encoder {
            if r.windows(2).any(|w| w[1] != 2 * w[0]) {
                return Err(Error::InvalidArgument(format!("encoder mode needs resolutions doubling per level: {r:?}")));
            }
            let s = self.encoder.source_size;
            let top = *r.last().unwrap();
            if s < top || !s.is_multiple_of(top) || !(s / top).is_power_of_two() {
                return Err(Error::InvalidArgument(format!(
                    "source size {s} must be a power-of-two multiple of the finest plane resolution {top}"
                )));
            }
        }
        if !(self.extent > 0.0) || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("extent and channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub source_size: usize,
    pub feature_channels: usize,
    /// Hidden width of each per-plane decoder.
    pub psi_hidden: usize,
    pub transform: PlaneTransform,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            source_size: 64,
            feature_channels: 8,
            psi_hidden: 8,
            transform: PlaneTransform::Rigid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedConfig {
    /// Channel width of both latent maps and the decoder's hidden layers.
    pub latent: usize,
    pub expr_layers: usize,
    pub pos_layers: usize,
    pub dec_layers: usize,
    pub kernel: usize,
    /// Raster size of the SECC images before they are resized to the
    /// rendering resolution.
    pub secc_size: usize,
    /// Scale applied to the initial weights of the last decoder layer.
    pub out_init_scale: f64,
}

impl Default for LedConfig {
    fn default() -> Self {
        LedConfig {
            latent: 16,
            expr_layers: 2,
            pos_layers: 2,
            dec_layers: 2,
            kernel: 3,
            secc_size: 64,
            out_init_scale: 0.01,
        }
    }
}

impl LedConfig {
    pub fn validate(&self) -> Result<()> {
        let layers = [self.expr_layers, self.pos_layers, self.dec_layers];
        if layers.iter().any(|&l| l == 0 || l > 4) {
            return Err(Error::InvalidArgument(format!("LED stacks need 1..=4 layers, got {layers:?}")));
        }
        if self.kernel.is_multiple_of(2) || self.latent == 0 {
            return Err(Error::InvalidArgument("LED kernel must be odd and latent width positive".into()));
        }
        Ok(())
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.appearance.validate()?;
        if let Some(led) = &self.led {
            led.validate()?;
        }
        if self.samples_per_ray < 2 || self.width == 0 || self.height == 0 || self.pe_levels == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument("resolution, samples (>= 2), pe_levels and hidden must be positive".into()));
        }
        if !(self.t_near > 0.0 && self.t_near < self.t_far) {
            return Err(Error::InvalidArgument(format!("need 0 < t_near < t_far, got [{}, {}]", self.t_near, self.t_far)));
        }
        Ok(())
    }

    /// Radiance-head input width: plane features plus `γ(p)`.
    pub fn head_input(&self) -> usize {
        self.appearance.total_channels() + 6 * self.pe_levels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let mut c = ModelConfig::default();
        c.led = Some(LedConfig::default());
        c.validate().unwrap();
        let s = serde_json::to_string_pretty(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let partial: ModelConfig = serde_json::from_str(r#"{"width": 16}"#).unwrap();
        assert_eq!(partial.width, 16);
        assert_eq!(partial.samples_per_ray, 32);
    }

    #[test]
    fn rejects_bad_levels() {
        let mut c = ModelConfig::default();
        c.appearance.resolutions = vec![32, 16, 64];
        assert!(c.validate().is_err());
        c.appearance.resolutions = vec![16, 32, 64];
        c.appearance.mode = AppearanceMode::Encoder;
        c.validate().unwrap();
        c.appearance.resolutions = vec![16, 24, 64];
        assert!(c.validate().is_err());
    }
}
