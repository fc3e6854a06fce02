//! Aggregated run configuration: one flat key space covering every module,
//! loadable from a `key = value` text file, with command-line flags taking
//! precedence over file values and file values over the built-in defaults.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::OptimizerConfig;
use crate::branches::{FusionHead, FusionMode, ModelConfig};
use crate::dataset::{AugmentationConfig, GenerateConfig};
use crate::error::{Error, Result};
use crate::metric::{BatchController, LossConfig};
use crate::pooling::PoolMethod;
use crate::scalar::Precision;

/// Every tunable in one place. Defaults reproduce the documented training
/// recipe (margin 0.2, α = 0.5, β = 0, batch 8 → 160, 50 epochs with a
/// 10× learning-rate drop at epoch 30).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    /// Upper bound on worker threads; 0 means "let the runtime choose".
    /// Never affects numerical results.
    pub threads: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub controller: BatchController,
    pub augment: AugmentationConfig,
    pub generate: GenerateConfig,
    /// Epoch interval between periodic checkpoints (0 = final only).
    pub save_every: usize,
    /// Reshuffle attempts before a batch is padded with a positive pair.
    pub batch_retries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            threads: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            controller: BatchController::default(),
            augment: AugmentationConfig::default(),
            generate: GenerateConfig::default(),
            save_every: 0,
            batch_retries: 10,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::validation(format!("config key {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::validation(format!("config key {key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_channels(key: &str, value: &str) -> Result<[usize; 4]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::validation(format!(
            "config key {key}: expected 4 comma-separated widths, got {value:?}"
        )));
    }
    let mut out = [0usize; 4];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = parse_num(key, part)?;
    }
    Ok(out)
}

impl RunConfig {
    /// Apply one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "precision" => {
                self.precision = Precision::parse(value).ok_or_else(|| {
                    Error::validation(format!("precision must be f32 or f64, got {value:?}"))
                })?
            }
            "threads" => self.threads = parse_num(key, value)?,

            "k" => self.model.k = parse_num(key, value)?,
            "pc_channels" => self.model.pc_channels = parse_channels(key, value)?,
            "image_channels" => self.model.image_channels = parse_channels(key, value)?,
            "fusion_mode" => {
                self.model.fusion_mode = FusionMode::parse(value).ok_or_else(|| {
                    Error::validation(format!("fusion_mode must be concat or add, got {value:?}"))
                })?
            }
            "fusion_head" => {
                self.model.fusion_head = FusionHead::parse(value).ok_or_else(|| {
                    Error::validation(format!(
                        "fusion_head must be none, fc or mlp, got {value:?}"
                    ))
                })?
            }
            "pool" => {
                self.model.pool = PoolMethod::parse(value).ok_or_else(|| {
                    Error::validation(format!("pool must be gem, mac or spoc, got {value:?}"))
                })?
            }
            "quantization_step" => self.model.quantization_step = parse_num(key, value)?,

            "margin" => self.loss.margin = parse_num(key, value)?,
            "alpha" => self.loss.alpha = parse_num(key, value)?,
            "beta" => self.loss.beta = parse_num(key, value)?,

            "lr_main" => self.optimizer.lr_main = parse_num(key, value)?,
            "lr_image" => self.optimizer.lr_image_branch = parse_num(key, value)?,
            "weight_decay" => self.optimizer.weight_decay = parse_num(key, value)?,
            "epochs" => self.optimizer.epochs = parse_num(key, value)?,
            "lr_drop_epoch" => self.optimizer.lr_drop_epoch = parse_num(key, value)?,
            "lr_drop_factor" => self.optimizer.lr_drop_factor = parse_num(key, value)?,

            "batch_start" => self.controller.current_size = parse_num(key, value)?,
            "batch_cap" => self.controller.max_size = parse_num(key, value)?,
            "batch_growth" => self.controller.growth = parse_num(key, value)?,
            "batch_threshold" => self.controller.active_threshold = parse_num(key, value)?,

            "jitter_sigma" => self.augment.jitter_sigma = parse_num(key, value)?,
            "point_drop_prob" => self.augment.point_drop_prob = parse_num(key, value)?,
            "cuboid_erase_prob" => self.augment.cuboid_erase_prob = parse_num(key, value)?,
            "image_erase_prob" => self.augment.image_erase_prob = parse_num(key, value)?,
            "crop_fraction" => self.augment.crop_fraction = parse_num(key, value)?,
            "brightness" => self.augment.brightness = parse_num(key, value)?,
            "contrast" => self.augment.contrast = parse_num(key, value)?,
            "saturation" => self.augment.saturation = parse_num(key, value)?,

            "places" => self.generate.n_places = parse_num(key, value)?,
            "traversals" => self.generate.traversals = parse_num(key, value)?,
            "spacing" => self.generate.spacing_m = parse_num(key, value)?,
            "points_per_cloud" => self.generate.points_per_cloud = parse_num(key, value)?,
            "image_size" => self.generate.image_size = parse_num(key, value)?,
            "image_variants" => self.generate.image_variants = parse_num(key, value)?,
            "spurious_rgb" => self.generate.spurious_rgb = parse_bool(key, value)?,

            "save_every" => self.save_every = parse_num(key, value)?,
            "batch_retries" => self.batch_retries = parse_num(key, value)?,

            _ => return Err(Error::validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines. Blank lines and `#` comments are skipped;
    /// anything else must be an assignment with a known key.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("config line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        self.apply_text(&text)
    }

    /// Serialize every key at its current value, parseable by `apply_text`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |c: &[usize; 4]| {
            c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision.name());
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "k = {}", self.model.k);
        let _ = writeln!(s, "pc_channels = {}", join(&self.model.pc_channels));
        let _ = writeln!(s, "image_channels = {}", join(&self.model.image_channels));
        let _ = writeln!(s, "fusion_mode = {}", self.model.fusion_mode.name());
        let _ = writeln!(s, "fusion_head = {}", self.model.fusion_head.name());
        let _ = writeln!(s, "pool = {}", self.model.pool.name());
        let _ = writeln!(s, "quantization_step = {}", self.model.quantization_step);
        let _ = writeln!(s, "margin = {}", self.loss.margin);
        let _ = writeln!(s, "alpha = {}", self.loss.alpha);
        let _ = writeln!(s, "beta = {}", self.loss.beta);
        let _ = writeln!(s, "lr_main = {}", self.optimizer.lr_main);
        let _ = writeln!(s, "lr_image = {}", self.optimizer.lr_image_branch);
        let _ = writeln!(s, "weight_decay = {}", self.optimizer.weight_decay);
        let _ = writeln!(s, "epochs = {}", self.optimizer.epochs);
        let _ = writeln!(s, "lr_drop_epoch = {}", self.optimizer.lr_drop_epoch);
        let _ = writeln!(s, "lr_drop_factor = {}", self.optimizer.lr_drop_factor);
        let _ = writeln!(s, "batch_start = {}", self.controller.current_size);
        let _ = writeln!(s, "batch_cap = {}", self.controller.max_size);
        let _ = writeln!(s, "batch_growth = {}", self.controller.growth);
        let _ = writeln!(s, "batch_threshold = {}", self.controller.active_threshold);
        let _ = writeln!(s, "jitter_sigma = {}", self.augment.jitter_sigma);
        let _ = writeln!(s, "point_drop_prob = {}", self.augment.point_drop_prob);
        let _ = writeln!(s, "cuboid_erase_prob = {}", self.augment.cuboid_erase_prob);
        let _ = writeln!(s, "image_erase_prob = {}", self.augment.image_erase_prob);
        let _ = writeln!(s, "crop_fraction = {}", self.augment.crop_fraction);
        let _ = writeln!(s, "brightness = {}", self.augment.brightness);
        let _ = writeln!(s, "contrast = {}", self.augment.contrast);
        let _ = writeln!(s, "saturation = {}", self.augment.saturation);
        let _ = writeln!(s, "places = {}", self.generate.n_places);
        let _ = writeln!(s, "traversals = {}", self.generate.traversals);
        let _ = writeln!(s, "spacing = {}", self.generate.spacing_m);
        let _ = writeln!(s, "points_per_cloud = {}", self.generate.points_per_cloud);
        let _ = writeln!(s, "image_size = {}", self.generate.image_size);
        let _ = writeln!(s, "image_variants = {}", self.generate.image_variants);
        let _ = writeln!(s, "spurious_rgb = {}", self.generate.spurious_rgb);
        let _ = writeln!(s, "save_every = {}", self.save_every);
        let _ = writeln!(s, "batch_retries = {}", self.batch_retries);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.controller.validate()?;
        self.augment.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_documented_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.loss.margin, 0.2);
        assert_eq!(c.loss.alpha, 0.5);
        assert_eq!(c.loss.beta, 0.0);
        assert_eq!(c.controller.current_size, 8);
        assert_eq!(c.controller.max_size, 160);
        assert_eq!(c.optimizer.epochs, 50);
        assert_eq!(c.optimizer.lr_drop_epoch, 30);
        assert_eq!(c.optimizer.lr_main, 1e-3);
        assert_eq!(c.optimizer.lr_image_branch, 1e-4);
        assert_eq!(c.optimizer.weight_decay, 1e-3);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trips_through_every_key() {
        let mut base = RunConfig::default();
        base.set("alpha", "0.25").unwrap();
        base.set("k", "64").unwrap();
        base.set("pc_channels", "4, 8, 8, 16").unwrap();
        base.set("pool", "mac").unwrap();
        base.set("spurious_rgb", "true").unwrap();
        base.set("precision", "f64").unwrap();

        let mut reparsed = RunConfig::default();
        reparsed.apply_text(&base.to_text()).unwrap();
        assert_eq!(reparsed.to_text(), base.to_text());
        assert_eq!(reparsed.loss.alpha, 0.25);
        assert_eq!(reparsed.model.pc_channels, [4, 8, 8, 16]);
        assert_eq!(reparsed.model.pool, PoolMethod::Mac);
        assert!(reparsed.generate.spurious_rgb);
        assert_eq!(reparsed.precision, Precision::F64);
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected() {
        let mut c = RunConfig::default();
        let err = c.set("warp_factor", "9").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        assert!(c.apply_text("margin 0.2\n").is_err());
        assert!(c.apply_text("margin = zero\n").is_err());
        assert!(c.apply_text("# comment\n\nmargin = 0.3\n").is_ok());
        assert_eq!(c.loss.margin, 0.3);
    }

    #[test]
    fn later_assignments_win() {
        let mut c = RunConfig::default();
        c.apply_text("alpha = 0.1\nalpha = 0.9\n").unwrap();
        assert_eq!(c.loss.alpha, 0.9);
    }
}
