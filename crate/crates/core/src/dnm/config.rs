use serde::{Deserialize, Serialize};

use super::DnmError;

/// How the audio-visual similarity map is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Time-averaged per-cell dot products.
    Static,
    /// Static map times the dot product of the final recurrent states.
    Cdf,
}

/// Which losses drive training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Correspondence loss only; `M_loc` is the localization output.
    Avc,
    /// Classification loss only; the attention weights are the localization output.
    Cls,
    /// Both losses on the shared similarity map.
    Dnm,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Avc => "avc",
            Mode::Cls => "cls",
            Mode::Dnm => "dnm",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "avc" => Some(Mode::Avc),
            "cls" => Some(Mode::Cls),
            "dnm" => Some(Mode::Dnm),
            _ => None,
        }
    }

    pub fn uses_avc(self) -> bool {
        matches!(self, Mode::Avc | Mode::Dnm)
    }

    pub fn uses_cls(self) -> bool {
        matches!(self, Mode::Cls | Mode::Dnm)
    }
}

/// Model shape and architecture choices.
///
/// Both encoders have two convolution layers. The spatial reduction from the
/// image to the `grid_w x grid_h` map is split between the two layers; the
/// temporal reduction to `time_steps` happens after the first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    /// T
    pub time_steps: usize,
    /// D, shared by visual and audio features and by both recurrent cells.
    pub feature_dim: usize,
    /// D'
    pub cls_dim: usize,
    /// K
    pub num_classes: usize,
    pub frames: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub mel_bins: usize,
    pub audio_steps: usize,
    pub visual_hidden: usize,
    pub audio_hidden: usize,
    /// Odd cube edge of the visual 3D kernels.
    pub visual_kernel: usize,
    /// Odd square edge of the audio 2D kernels.
    pub audio_kernel: usize,
    /// Odd square edge of the ConvGRU kernels.
    pub gru_kernel: usize,
    pub fusion: Fusion,
    pub mode: Mode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_w: 6,
            grid_h: 6,
            time_steps: 8,
            feature_dim: 16,
            cls_dim: 8,
            num_classes: 4,
            frames: 8,
            image_h: 24,
            image_w: 24,
            channels: 1,
            mel_bins: 16,
            audio_steps: 8,
            visual_hidden: 8,
            audio_hidden: 8,
            visual_kernel: 3,
            audio_kernel: 3,
            gru_kernel: 3,
            fusion: Fusion::Cdf,
            mode: Mode::Dnm,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for finite-difference checks of the whole model.
    pub fn tiny() -> Self {
        Self {
            grid_w: 2,
            grid_h: 2,
            time_steps: 2,
            feature_dim: 3,
            cls_dim: 2,
            num_classes: 2,
            frames: 4,
            image_h: 4,
            image_w: 4,
            channels: 1,
            mel_bins: 3,
            audio_steps: 4,
            visual_hidden: 2,
            audio_hidden: 2,
            visual_kernel: 3,
            audio_kernel: 3,
            gru_kernel: 3,
            fusion: Fusion::Cdf,
            mode: Mode::Dnm,
        }
    }

    /// I
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn validate(&self) -> Result<(), DnmError> {
        let bad = |msg: String| Err(DnmError::Config(msg));
        let positive = [
            ("grid_w", self.grid_w),
            ("grid_h", self.grid_h),
            ("time_steps", self.time_steps),
            ("feature_dim", self.feature_dim),
            ("cls_dim", self.cls_dim),
            ("num_classes", self.num_classes),
            ("frames", self.frames),
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("mel_bins", self.mel_bins),
            ("audio_steps", self.audio_steps),
            ("visual_hidden", self.visual_hidden),
            ("audio_hidden", self.audio_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, k) in [
            ("visual_kernel", self.visual_kernel),
            ("audio_kernel", self.audio_kernel),
            ("gru_kernel", self.gru_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.image_w % self.grid_w != 0 || self.image_h % self.grid_h != 0 {
            return bad(format!(
                "image {}x{} is not a multiple of the grid {}x{}",
                self.image_w, self.image_h, self.grid_w, self.grid_h
            ));
        }
        if self.frames % self.time_steps != 0 {
            return bad(format!("frames {} not divisible by time_steps {}", self.frames, self.time_steps));
        }
        if self.audio_steps % self.time_steps != 0 {
            return bad(format!(
                "audio_steps {} not divisible by time_steps {}",
                self.audio_steps, self.time_steps
            ));
        }
        if self.num_classes > 32 {
            return bad("at most 32 classes fit the label bitmap".into());
        }
        Ok(())
    }

    /// Pooling factors `(first, second)` along one spatial axis.
    pub(crate) fn spatial_factors(image: usize, grid: usize) -> (usize, usize) {
        let s = image / grid;
        let first = (1..=s).find(|d| s % d == 0 && d * d >= s).unwrap_or(s);
        (first, s / first)
    }
}
