use serde::{Deserialize, Serialize};

use super::AdamConfig;
use crate::error::{Error, Result};
use crate::losses::DEFAULT_TEMPERATURE;
use crate::masking::DEFAULT_MASK_RATE;
use crate::tavp::MAX_IMAGE_REGIONS;
use crate::textproc::CutMixConfig;
use crate::views::ViewParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub text_batch: usize,
    pub image_batch: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mask_rate: f64,
    pub cutmix: CutMixConfig,
    pub tau: f64,
    /// Registered name of the contrastive positive-view strategy.
    pub contrastive_view: String,
    /// Percentage used by the crop/delete strategies.
    pub view_k: f64,
    /// Include the masked tag objective on image batches.
    pub use_tavp: bool,
    /// Never draw a sentence's patches from its paired image.
    pub exclude_paired: bool,
    pub max_regions: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            text_batch: 16,
            image_batch: 16,
            steps: 1000,
            adam: AdamConfig::default(),
            seed: 0,
            mask_rate: DEFAULT_MASK_RATE,
            cutmix: CutMixConfig::default(),
            tau: DEFAULT_TEMPERATURE,
            contrastive_view: "cmc".into(),
            view_k: 20.0,
            use_tavp: true,
            exclude_paired: true,
            max_regions: MAX_IMAGE_REGIONS,
        }
    }
}

impl TrainConfig {
    /// Masked language modeling alone: no CutMix, no contrast, no image branch.
    pub fn mlm_only(mut self) -> Self {
        self.cutmix.r_cmc = 0.0;
        self.contrastive_view = "none".into();
        self.use_tavp = false;
        self
    }

    pub fn view_params(&self) -> ViewParams {
        ViewParams {
            k_percent: self.view_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.text_batch == 0 || (self.use_tavp && self.image_batch == 0) {
            return bad("batch sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad("mask rate must lie in [0, 1]");
        }
        if !(self.tau > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.adam.lr >= 0.0)
            || !(0.0..1.0).contains(&self.adam.beta1)
            || !(0.0..1.0).contains(&self.adam.beta2)
            || !(self.adam.eps > 0.0)
        {
            return bad("invalid Adam hyperparameters");
        }
        if self.max_regions == 0 {
            return bad("max_regions must be positive");
        }
        self.cutmix.validate()
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
        }
        match key.trim() {
            "text_batch" => self.text_batch = parse(key, value)?,
            "image_batch" => self.image_batch = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.adam.lr = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "eps" => self.adam.eps = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "mask_rate" => self.mask_rate = parse(key, value)?,
            "r_cmc" => self.cutmix.r_cmc = parse(key, value)?,
            "k" => self.cutmix.k = parse(key, value)?,
            "r_ctx" => self.cutmix.r_ctx = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "contrastive_view" => self.contrastive_view = value.trim().to_string(),
            "view_k" => self.view_k = parse(key, value)?,
            "use_tavp" => self.use_tavp = parse(key, value)?,
            "exclude_paired" => self.exclude_paired = parse(key, value)?,
            "max_regions" => self.max_regions = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key=value", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }
}
