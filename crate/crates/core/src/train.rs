//! Run configuration, augmentation and the optimization loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Triplet;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossValues, LossWeights, SpatialLossConfig};
use crate::mask::ShadowMask;
use crate::model::{CrFormer, ModelConfig};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Graph, Tensor};

/// Named bundles of defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 64×64 crops, small enough for a laptop CPU.
    Desk,
    /// 400×400 crops as in the full-scale recipe.
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub spatial: SpatialLossConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    /// The learning rate halves after this many epochs.
    pub halve_every: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            epochs: 200,
            halve_every: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn learning_rate(&self, base: f64, epoch: usize) -> f64 {
        if self.halve_every == 0 {
            return base;
        }
        base * 0.5f64.powi((epoch / self.halve_every) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Side of the square training crop.
    pub crop: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { crop: 64, flip: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Stops training after this many optimizer steps, mid-epoch if needed.
    pub max_steps: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let crop = match profile {
            Profile::Desk => 64,
            Profile::Paper => 400,
        };
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            schedule: ScheduleConfig::default(),
            augment: AugmentConfig { crop, flip: true },
            batch_size: 1,
            seed: 0,
            max_steps: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.weights.validate()?;
        if self.loss.spatial.pool_size == 0 {
            return Err(Error::Config("spatial pool_size must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!(
                "only batch_size = 1 is supported, got {}",
                self.batch_size
            )));
        }
        let crop = self.augment.crop;
        let d = self.model.divisibility();
        if crop == 0 || !crop.is_multiple_of(d) || !crop.is_multiple_of(self.loss.spatial.pool_size) {
            return Err(Error::Config(format!(
                "crop {crop} must be a positive multiple of {d} and of the spatial pool size {}",
                self.loss.spatial.pool_size
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// How one training sample was derived from its source triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentInfo {
    pub flipped: bool,
    pub resized: bool,
    pub top: usize,
    pub left: usize,
}

fn flip_image(t: &Tensor) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    Tensor::from_fn(vec![c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

fn crop_image(t: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(top + size <= h && left + size <= w);
    let d = t.data();
    Tensor::from_fn(vec![c, size, size], |i| {
        let (ch, rest) = (i / (size * size), i % (size * size));
        let (y, x) = (rest / size, rest % size);
        d[(ch * h + top + y) * w + left + x]
    })
}

/// Bilinear resampling with pixel-center alignment.
fn resize_bilinear(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let d = t.data();
    let coord = |o: usize, out: usize, src: usize| {
        let s = ((o as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(src - 1), s - i0 as f64)
    };
    Tensor::from_fn(vec![c, oh, ow], |i| {
        let (ch, rest) = (i / (oh * ow), i % (oh * ow));
        let (y0, y1, fy) = coord(rest / ow, oh, h);
        let (x0, x1, fx) = coord(rest % ow, ow, w);
        let at = |y: usize, x: usize| d[(ch * h + y) * w + x];
        let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
        let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

fn resize_mask_nearest(m: &ShadowMask, oh: usize, ow: usize) -> ShadowMask {
    let mut out = ShadowMask::filled(oh, ow, false);
    for y in 0..oh {
        for x in 0..ow {
            out.set(y, x, m.get(y * m.height() / oh, x * m.width() / ow));
        }
    }
    out
}

/// Random horizontal flip and square crop.
///
/// A source smaller than the crop is first scaled up (bilinear for images,
/// nearest for the mask) so its shorter side equals the crop.
pub fn augment(t: &Triplet, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Triplet, AugmentInfo)> {
    let (mut shadow, mut gt, mut mask) = (t.shadow.clone(), t.shadow_free.clone(), t.mask.clone());
    let (h, w) = (t.height(), t.width());
    let resized = h < cfg.crop || w < cfg.crop;
    if resized {
        let s = cfg.crop as f64 / h.min(w) as f64;
        let (oh, ow) = (
            ((h as f64 * s).round() as usize).max(cfg.crop),
            ((w as f64 * s).round() as usize).max(cfg.crop),
        );
        shadow = resize_bilinear(&shadow, oh, ow);
        gt = resize_bilinear(&gt, oh, ow);
        mask = resize_mask_nearest(&mask, oh, ow);
    }
    let flipped = cfg.flip && rng.random_bool(0.5);
    if flipped {
        shadow = flip_image(&shadow);
        gt = flip_image(&gt);
        mask = mask.flip_horizontal();
    }
    let (h, w) = (mask.height(), mask.width());
    let top = rng.random_range(0..=h - cfg.crop);
    let left = rng.random_range(0..=w - cfg.crop);
    let out = Triplet::new(
        t.name.clone(),
        crop_image(&shadow, top, left, cfg.crop),
        crop_image(&gt, top, left, cfg.crop),
        mask.crop(top, left, cfg.crop, cfg.crop)?,
    )?;
    Ok((
        out,
        AugmentInfo {
            flipped,
            resized,
            top,
            left,
        },
    ))
}

/// One optimizer step as it appears in the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub sample: String,
    pub learning_rate: f64,
    pub losses: LossValues,
}

pub const LOSS_LOG_HEADER: &str = "# step l_rec l_spa total";

impl StepRecord {
    /// `step l_rec l_spa total`, with shortest round-trip float formatting.
    pub fn log_line(&self) -> String {
        let l = &self.losses;
        format!("{} {} {} {}", self.step, l.reconstruction, l.spatial, l.total)
    }
}

/// Forward pass and loss on one sample, recorded on `g`.
pub fn sample_loss(
    g: &mut Graph,
    model: &CrFormer,
    sample: &Triplet,
    loss: &LossConfig,
) -> Result<crate::loss::LossVars> {
    let x = g.constant(sample.shadow.clone());
    let gt = g.constant(sample.shadow_free.clone());
    let out = model.forward(g, x, &sample.mask)?;
    total_loss(g, out.deshadowed, out.refined, gt, &loss.weights, &loss.spatial)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs_completed: usize,
    pub final_losses: Option<LossValues>,
}

pub struct Trainer {
    model: CrFormer,
    adam: AdamState,
    config: RunConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    /// Fresh model and optimizer, both derived from `config.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = CrFormer::new(config.model.clone(), config.seed)?;
        Trainer::with_model(model, config)
    }

    pub fn with_model(model: CrFormer, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.model {
            return Err(Error::Config("model architecture differs from the run config".into()));
        }
        let adam = AdamState::new(model.params(), config.optimizer);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            adam,
            config,
            rng,
            step: 0,
        })
    }

    pub fn model(&self) -> &CrFormer {
        &self.model
    }

    pub fn into_model(self) -> CrFormer {
        self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Gradient step on an already augmented sample.
    pub fn train_step(&mut self, sample: &Triplet, epoch: usize, info: Option<&AugmentInfo>) -> Result<StepRecord> {
        let lr = self
            .config
            .schedule
            .learning_rate(self.config.optimizer.learning_rate, epoch);
        let mut g = Graph::new();
        let vars = sample_loss(&mut g, &self.model, sample, &self.config.loss)?;
        let losses = vars.values(&g);
        let step = self.step + 1;
        if !losses.total.is_finite() || !losses.reconstruction.is_finite() || !losses.spatial.is_finite() {
            return Err(self.divergence(step, epoch, sample, info, &losses));
        }
        let grads = g.backward(vars.total)?;
        let store = self.model.params_mut();
        store.zero_grad();
        grads.accumulate_into(store)?;
        self.adam.set_learning_rate(lr);
        self.adam.step(store)?;
        self.step = step;
        Ok(StepRecord {
            step,
            epoch,
            sample: sample.name.clone(),
            learning_rate: lr,
            losses,
        })
    }

    fn divergence(
        &self,
        step: usize,
        epoch: usize,
        sample: &Triplet,
        info: Option<&AugmentInfo>,
        losses: &LossValues,
    ) -> Error {
        let bad: Vec<&str> = self
            .model
            .params()
            .iter()
            .filter(|(_, _, t)| !t.all_finite())
            .map(|(_, n, _)| n)
            .collect();
        let mut detail = String::new();
        let _ = write!(
            detail,
            "{}",
            serde_json::json!({
                "step": step,
                "epoch": epoch,
                "sample": sample.name,
                "augment": info,
                "l_rec": losses.reconstruction.to_string(),
                "l_spa": losses.spatial.to_string(),
                "total": losses.total.to_string(),
                "input_finite": sample.shadow.all_finite() && sample.shadow_free.all_finite(),
                "nonfinite_parameters": bad,
            })
        );
        Error::NonFiniteLoss { step, detail }
    }

    /// Runs the configured schedule over `data`, calling `on_step` after
    /// every optimizer step. Each epoch visits the samples in a fresh
    /// seeded order.
    pub fn fit(&mut self, data: &[Triplet], mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<TrainSummary> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("no training triplets".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut last = None;
        let mut epochs_completed = 0;
        'epochs: for epoch in 0..self.config.schedule.epochs {
            order.shuffle(&mut self.rng);
            for &i in &order {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    break 'epochs;
                }
                let (sample, info) = augment(&data[i], &self.config.augment, &mut self.rng)?;
                let rec = self.train_step(&sample, epoch, Some(&info))?;
                on_step(&rec)?;
                last = Some(rec.losses);
            }
            epochs_completed = epoch + 1;
        }
        Ok(TrainSummary {
            steps: self.step,
            epochs_completed,
            final_losses: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SyntheticShadowSpec};

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                base_channels: 8,
                residual_blocks: 1,
                refine_levels: 2,
                ..ModelConfig::default()
            },
            augment: AugmentConfig { crop: 16, flip: true },
            schedule: ScheduleConfig {
                epochs: 2,
                halve_every: 1,
            },
            ..RunConfig::default()
        }
    }

    fn tiny_data() -> Vec<Triplet> {
        generate(&SyntheticShadowSpec {
            height: 20,
            width: 24,
            samples: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn schedule_halves() {
        let s = ScheduleConfig::default();
        let lrs: Vec<f64> = [0, 49, 50, 100, 150, 199]
            .iter()
            .map(|&e| s.learning_rate(2e-4, e))
            .collect();
        assert_eq!(lrs, vec![2e-4, 2e-4, 1e-4, 5e-5, 2.5e-5, 2.5e-5]);
    }

    #[test]
    fn profiles_and_toml() {
        let paper = RunConfig::for_profile(Profile::Paper);
        assert_eq!(paper.augment.crop, 400);
        paper.validate().unwrap();
        let text = paper.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), paper);
        let partial = RunConfig::from_toml("seed = 7\n[model]\nbase_channels = 16\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.model.base_channels, 16);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("batch_size = 2").is_err());
        assert!(RunConfig::from_toml("[augment]\ncrop = 30").is_err());
    }

    #[test]
    fn augment_keeps_triplet_aligned() {
        let t = &tiny_data()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = AugmentConfig { crop: 16, flip: true };
        for _ in 0..8 {
            let (a, info) = augment(t, &cfg, &mut rng).unwrap();
            assert_eq!(a.shadow.shape(), &[3, 16, 16]);
            // The synthetic shadow leaves non-shadow pixels untouched, so the
            // crop must preserve that relation.
            for (p, &m) in a.mask.values().iter().enumerate() {
                if m == 0 {
                    for c in 0..3 {
                        assert_eq!(a.shadow.data()[c * 256 + p], a.shadow_free.data()[c * 256 + p]);
                    }
                }
            }
            assert!(!info.resized);
        }
        let big = AugmentConfig { crop: 32, flip: false };
        let (a, info) = augment(t, &big, &mut rng).unwrap();
        assert!(info.resized);
        assert_eq!(a.mask.height(), 32);
    }

    #[test]
    fn zero_epochs_leave_the_initialization() {
        let cfg = RunConfig {
            schedule: ScheduleConfig {
                epochs: 0,
                halve_every: 50,
            },
            ..tiny_run()
        };
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let s = tr.fit(&tiny_data(), |_| Ok(())).unwrap();
        assert_eq!(s.steps, 0);
        let init = CrFormer::new(cfg.model, cfg.seed).unwrap();
        for ((_, _, a), (_, _, b)) in tr.model().params().iter().zip(init.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn fit_is_deterministic_and_respects_max_steps() {
        let run = |cap| {
            let mut tr = Trainer::new(RunConfig {
                max_steps: cap,
                ..tiny_run()
            })
            .unwrap();
            let mut lines = Vec::new();
            tr.fit(&tiny_data(), |r| {
                lines.push(r.log_line());
                Ok(())
            })
            .unwrap();
            lines
        };
        let a = run(None);
        assert_eq!(a.len(), 4);
        assert_eq!(a, run(None));
        assert_eq!(run(Some(3)).len(), 3);
    }

    #[test]
    fn nan_input_aborts_with_a_dump() {
        let cfg = tiny_run();
        let mut tr = Trainer::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (mut sample, _) = augment(&tiny_data()[0], &cfg.augment, &mut rng).unwrap();
        sample.shadow.data_mut()[5] = f64::NAN;
        let err = tr.train_step(&sample, 0, None).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, detail } => {
                assert_eq!(step, 1);
                assert!(detail.contains("\"sample\""));
            }
            other => panic!("unexpected {other}"),
        }
    }
}
