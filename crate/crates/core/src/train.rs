//! Minibatch training loop.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoders::{SceneImage, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{EvalAccumulator, MetricReport, DEFAULT_THRESHOLDS};
use crate::model::{Sample, Vipa};
use crate::nn::{Grads, ParamStore, Session};
use crate::optim::{AdamW, AdamWConfig, PolyDecay};
use crate::rng::{derive_seed, permutation, rng_from_seed, stream_seed, Stream};
use crate::scalar::Real;
use crate::veg::Mode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    /// Global gradient-norm clip; `None` disables.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Stop once train mIoU reaches this.
    pub target_miou: Option<f64>,
    /// Random horizontal mirroring, with "left" and "right" swapped in the
    /// expression.
    pub mirror: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 8,
            optim: AdamWConfig::default(),
            clip_norm: Some(1.0),
            seed: 0,
            target_miou: None,
            mirror: false,
        }
    }
}

/// Losses and the train-mode prediction of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleResult<T> {
    pub grads: Grads<T>,
    pub segmentation: f64,
    pub contrastive: Option<f64>,
    pub prediction: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub seg_loss: f64,
    pub contrastive_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub seg_loss: f64,
    pub contrastive_loss: f64,
    /// mIoU of the train-mode predictions seen during the epoch.
    pub train_miou: f64,
}

/// Gradients of one sample's total loss.
pub fn sample_gradients<T: Real>(model: &Vipa, params: &ParamStore<T>, sample: &Sample, gumbel_seed: u64) -> Result<SampleResult<T>> {
    let mut s = Session::new(params, true);
    let out = model.forward(&mut s, sample, Mode::Train, gumbel_seed)?;
    let losses = model.losses(&mut s, &out, sample)?;
    let segmentation = s.value(losses.segmentation).item().as_f64();
    let contrastive = losses.contrastive.map(|c| s.value(c).item().as_f64());
    let prediction = s.value(out.decoder.logits).data().iter().map(|&z| z > T::zero()).collect();
    let mut grads = Grads::zeros_like(params);
    s.backward_into(losses.total, &mut grads)?;
    Ok(SampleResult {
        grads,
        segmentation,
        contrastive,
        prediction,
    })
}

/// Left-right mirror image of a sample, relation words swapped.
pub fn mirror_sample(sample: &Sample, vocab: &Vocabulary) -> Sample {
    let (h, w) = (sample.image.height, sample.image.width);
    let mut pixels = vec![0.0; sample.image.pixels.len()];
    let mut mask = vec![false; sample.mask.len()];
    for y in 0..h {
        for x in 0..w {
            let (src, dst) = (y * w + x, y * w + (w - 1 - x));
            pixels[dst * 3..dst * 3 + 3].copy_from_slice(&sample.image.pixels[src * 3..src * 3 + 3]);
            mask[dst] = sample.mask[src];
        }
    }
    let (left, right) = (vocab.id("left"), vocab.id("right"));
    let words = sample
        .words
        .iter()
        .map(|&id| match id {
            _ if left != 0 && id == left => right,
            _ if right != 0 && id == right => left,
            _ => id,
        })
        .collect();
    Sample {
        image: SceneImage { height: h, width: w, pixels },
        mask,
        words,
    }
}

/// Per-step Gumbel seed of one sample slot.
pub fn gumbel_seed(root: u64, step: u64, slot: usize) -> u64 {
    derive_seed(derive_seed(stream_seed(root, Stream::Gumbel), step), slot as u64)
}

pub struct Trainer<'m, T: Real> {
    pub model: &'m Vipa,
    pub params: ParamStore<T>,
    pub optim: AdamW<T>,
    pub cfg: TrainConfig,
    pub epoch: usize,
}

impl<'m, T: Real> Trainer<'m, T> {
    pub fn new(model: &'m Vipa, params: ParamStore<T>, cfg: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(cfg.optim.lr >= 0.0 && cfg.optim.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        let total = (cfg.epochs * steps_per_epoch) as u64;
        let optim = AdamW::new(cfg.optim, PolyDecay::new(total), &params);
        Ok(Self {
            model,
            params,
            optim,
            cfg,
            epoch: 0,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Sample order of `epoch`.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = rng_from_seed(derive_seed(stream_seed(self.cfg.seed, Stream::Shuffle), epoch as u64));
        permutation(n, &mut rng)
    }

    /// Averages the per-sample gradients of `batch` and applies one update.
    /// `results` is filled with each sample's outcome in batch order.
    pub fn step_with(&mut self, results: Vec<SampleResult<T>>) -> Result<StepRecord> {
        let step = self.optim.step;
        let b = results.len();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut grads = Grads::zeros_like(&self.params);
        let (mut seg, mut con) = (0.0, 0.0);
        for r in &results {
            grads.add_assign(&r.grads);
            seg += r.segmentation;
            con += r.contrastive.unwrap_or(0.0);
        }
        grads.scale(T::of(1.0 / b as f64));
        let (seg, con) = (seg / b as f64, con / b as f64);
        if !seg.is_finite() || !con.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite loss".to_string(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: "non-finite gradient".to_string(),
            });
        }
        let grad_norm = grads.norm();
        if let Some(clip) = self.cfg.clip_norm {
            if grad_norm > clip {
                grads.scale(T::of(clip / grad_norm));
            }
        }
        let lr = self.optim.current_lr();
        self.optim.step(&mut self.params, &grads);
        if self.params.iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Diverged {
                step,
                reason: "non-finite parameter".to_string(),
            });
        }
        Ok(StepRecord {
            step,
            seg_loss: seg,
            contrastive_loss: con,
            lr,
            grad_norm,
        })
    }

    /// Outcome of the sample in batch position `slot` at the current step.
    pub fn sample_result(&self, slot: usize, sample: &Sample) -> Result<SampleResult<T>> {
        let seed = gumbel_seed(self.cfg.seed, self.optim.step, slot);
        if self.cfg.mirror && rng_from_seed(seed).gen_bool(0.5) {
            let mut r = sample_gradients(self.model, &self.params, &mirror_sample(sample, &self.model.vocab), seed)?;
            let w = sample.image.width;
            r.prediction = (0..r.prediction.len()).map(|i| r.prediction[i - i % w + (w - 1 - i % w)]).collect();
            Ok(r)
        } else {
            sample_gradients(self.model, &self.params, sample, seed)
        }
    }

    /// Sequential per-sample gradients for one minibatch.
    pub fn batch_results(&self, samples: &[&Sample]) -> Result<Vec<SampleResult<T>>> {
        samples.iter().enumerate().map(|(slot, s)| self.sample_result(slot, s)).collect()
    }

    /// One pass over `data`; `on_step` sees every update.
    pub fn run_epoch(&mut self, data: &[Sample], on_step: impl FnMut(&StepRecord)) -> Result<EpochRecord> {
        self.run_epoch_with(data, Self::batch_results, on_step)
    }

    /// [`Trainer::run_epoch`] with a caller-supplied minibatch evaluator,
    /// which must return results in batch order.
    pub fn run_epoch_with(
        &mut self,
        data: &[Sample],
        mut batch: impl FnMut(&Self, &[&Sample]) -> Result<Vec<SampleResult<T>>>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let order = self.epoch_order(self.epoch, data.len());
        let mut acc = EvalAccumulator::new(&DEFAULT_THRESHOLDS);
        let (mut seg, mut con, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let results = batch(self, &samples)?;
            if results.len() != samples.len() {
                return Err(Error::invalid("batch evaluator returned the wrong number of results"));
            }
            for (r, s) in results.iter().zip(&samples) {
                acc.add(&r.prediction, &s.mask)?;
            }
            let rec = self.step_with(results)?;
            on_step(&rec);
            seg += rec.seg_loss;
            con += rec.contrastive_loss;
            steps += 1;
        }
        let record = EpochRecord {
            epoch: self.epoch,
            seg_loss: seg / steps as f64,
            contrastive_loss: con / steps as f64,
            train_miou: acc.miou()?,
        };
        self.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs, stopping early at the target mIoU.
    pub fn fit(&mut self, data: &[Sample], mut on_step: impl FnMut(&StepRecord), mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.cfg.epochs {
            let rec = self.run_epoch(data, &mut on_step)?;
            on_epoch(&rec);
            records.push(rec);
            if let Some(target) = self.cfg.target_miou {
                if rec.train_miou >= target {
                    break;
                }
            }
        }
        Ok(records)
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }
}

/// Eval-mode metrics over `data`.
pub fn evaluate<T: Real>(model: &Vipa, params: &ParamStore<T>, data: &[Sample], thresholds: &[f64]) -> Result<MetricReport> {
    let mut acc = EvalAccumulator::new(thresholds);
    for s in data {
        let out = model.predict(params, s)?;
        acc.add(&out.prediction, &s.mask)?;
    }
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::KvSource;
    use crate::model::ModelConfig;
    use crate::scene::{generate_scene, SceneGrammar, SplitPolicy};

    fn setup(n: u64) -> (Vipa, ParamStore<f64>, Vec<Sample>) {
        let g = SceneGrammar::default();
        let vocab = g.vocabulary();
        let data = (0..n)
            .map(|i| generate_scene(&g, i, 32, 32, SplitPolicy::Any).unwrap().to_sample(&vocab))
            .collect();
        let cfg = ModelConfig {
            image_size: 32,
            base_channels: 8,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            joint_dim: 16,
            decoder_dims: [16, 8, 8],
            kv_source: KvSource::VisualExpression,
            ..ModelConfig::default()
        };
        let (m, p) = Vipa::new::<f64>(cfg, vocab, 1).unwrap();
        (m, p, data)
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 2,
            optim: AdamWConfig { lr, ..AdamWConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (m, p, data) = setup(3);
        let mut t = Trainer::new(&m, p.clone(), cfg(0.0), 2).unwrap();
        let rec = t.run_epoch(&data, |_| {}).unwrap();
        assert!(rec.seg_loss.is_finite());
        assert!(t.params.iter().zip(p.iter()).all(|(a, b)| a.value == b.value));
    }

    #[test]
    fn training_is_deterministic() {
        let (m, p, data) = setup(3);
        let run = || {
            let mut t = Trainer::new(&m, p.clone(), cfg(1e-3), 2).unwrap();
            let mut steps = Vec::new();
            t.fit(&data, |s| steps.push(*s), |_| {}).unwrap();
            (t.params, steps)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(sa, sb);
        assert_eq!(sa.len(), 4);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.value == y.value));
        assert!(a.iter().zip(p.iter()).any(|(x, y)| x.value != y.value));
    }

    #[test]
    fn learning_rate_decays_over_steps() {
        let (m, p, data) = setup(2);
        let mut t = Trainer::new(&m, p, cfg(1e-3), 1).unwrap();
        let mut lrs = Vec::new();
        t.fit(&data, |s| lrs.push(s.lr), |_| {}).unwrap();
        assert_eq!(lrs[0], 1e-3);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (m, p, _) = setup(1);
        let mut t = Trainer::new(&m, p.clone(), cfg(1e-3), 1).unwrap();
        let bad = SampleResult {
            grads: Grads::zeros_like(&p),
            segmentation: f64::NAN,
            contrastive: None,
            prediction: Vec::new(),
        };
        assert!(matches!(t.step_with(vec![bad]), Err(Error::Diverged { step: 0, .. })));
        assert!(t.step_with(Vec::new()).is_err());
    }

    #[test]
    fn mirroring_swaps_sides_and_relation_words() {
        let (m, _, data) = setup(1);
        let mut x = data[0].clone();
        let (left, right) = (m.vocab.id("left"), m.vocab.id("right"));
        x.words = vec![m.vocab.id("red"), left, right];
        let y = mirror_sample(&x, &m.vocab);
        assert_eq!(y.words, vec![x.words[0], right, left]);
        assert_eq!(y.mask[0], x.mask[31]);
        assert_eq!(&y.image.pixels[..3], &x.image.pixels[31 * 3..32 * 3]);
        assert_eq!(mirror_sample(&y, &m.vocab), x);
    }

    #[test]
    fn batch_size_zero_is_rejected() {
        let (m, p, _) = setup(1);
        let mut c = cfg(1e-3);
        c.batch_size = 0;
        assert!(Trainer::new(&m, p, c, 1).is_err());
    }
}
