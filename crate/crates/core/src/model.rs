//! The assembled network: encoders, visual expression generator, decoder.

use alloc::vec::Vec;

use crate::decoder::{segmentation_loss, select_keyvalue_source, Decoder, DecoderConfig, DecoderOutput, KvCandidates, KvSource};
use crate::encoders::{EncoderConfig, EncoderOutput, Encoders, FusionMode, SceneImage, Vocabulary, STAGES};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore, Session};
use crate::rng::{rng_from_seed, stream_seed, Stream};
use crate::scalar::Real;
use crate::tape::Var;
use crate::veg::{ContrastiveTargets, Mode, VegConfig, VegOutput, VisualExpressionGenerator};

/// Architecture and loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub joint_dim: usize,
    pub decoder_dims: [usize; STAGES - 1],
    pub fusion: FusionMode,
    pub kv_source: KvSource,
    pub ratio: f64,
    pub tau_init: f64,
    pub contrastive_weight: f64,
    pub contrastive: bool,
    pub step1: bool,
    pub step2: bool,
    pub global_cue: bool,
    pub local_cue: bool,
    pub use_articles: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            joint_dim: 64,
            decoder_dims: [64, 32, 32],
            fusion: FusionMode::Early,
            kv_source: KvSource::VisualExpression,
            ratio: 0.3,
            tau_init: 1.0,
            contrastive_weight: 1.0,
            contrastive: true,
            step1: true,
            step2: true,
            global_cue: true,
            local_cue: true,
            use_articles: true,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            dim: self.dim,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            vocab_size,
            fusion: self.fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder(1).validate()?;
        crate::veg::retrieval_count(self.ratio, 1)?;
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::invalid("tau_init must be positive"));
        }
        if !(self.contrastive_weight >= 0.0 && self.contrastive_weight.is_finite()) {
            return Err(Error::invalid("contrastive weight must be non-negative"));
        }
        if self.joint_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("joint dim and mlp ratio must be positive"));
        }
        if self.decoder_dims.iter().any(|d| *d == 0 || d % self.heads != 0) {
            return Err(Error::invalid("decoder dims must be positive multiples of heads"));
        }
        Ok(())
    }

    /// Grid side of the last encoder stage.
    pub fn token_grid(&self) -> usize {
        self.image_size / 32
    }
}

/// One referring-segmentation example in model terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: SceneImage,
    /// Ground truth, row-major `[H × W]`.
    pub mask: Vec<bool>,
    pub words: Vec<usize>,
}

/// Everything one forward pass leaves on the tape.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoders: EncoderOutput,
    pub veg: Option<VegOutput>,
    pub decoder: DecoderOutput,
    pub kv: Var,
    pub kv_valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub total: Var,
    pub segmentation: Var,
    pub contrastive: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Vipa {
    pub cfg: ModelConfig,
    pub vocab: Vocabulary,
    pub encoders: Encoders,
    pub veg: Option<VisualExpressionGenerator>,
    pub decoder: Decoder,
}

impl Vipa {
    /// Builds the network and registers freshly initialized parameters.
    pub fn new<T: Real>(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(stream_seed(seed, Stream::Init));
        let mut init = Init::new(&mut store, &mut rng);
        let enc_cfg = cfg.encoder(vocab.len());
        let encoders = Encoders::new(&mut init, enc_cfg)?;
        let channels = enc_cfg.stage_channels();
        let veg = match cfg.kv_source {
            KvSource::VisualExpression => Some(VisualExpressionGenerator::new(
                &mut init,
                VegConfig {
                    dim: cfg.dim,
                    joint_dim: cfg.joint_dim,
                    vision_dim: channels[STAGES - 1],
                    heads: cfg.heads,
                    mlp_ratio: cfg.mlp_ratio,
                    ratio: cfg.ratio,
                    tau_init: cfg.tau_init,
                    step1: cfg.step1,
                    step2: cfg.step2,
                    global_cue: cfg.global_cue,
                    local_cue: cfg.local_cue,
                },
            )?),
            _ => None,
        };
        let decoder = Decoder::new(
            &mut init,
            DecoderConfig {
                image_size: cfg.image_size,
                kv_dim: cfg.dim,
                heads: cfg.heads,
                mlp_ratio: cfg.mlp_ratio,
                dims: cfg.decoder_dims,
                encoder_channels: channels,
                encoder_grids: enc_cfg.stage_grids(),
            },
        )?;
        Ok((
            Self {
                cfg,
                vocab,
                encoders,
                veg,
                decoder,
            },
            store,
        ))
    }

    pub fn contrastive_targets(&self, sample: &Sample) -> Result<ContrastiveTargets> {
        ContrastiveTargets::from_mask(&sample.mask, sample.image.height, sample.image.width, self.cfg.token_grid())
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, sample: &Sample, mode: Mode, seed: u64) -> Result<ForwardOutput> {
        let enc = self.encoders.forward(s, &sample.image, &sample.words)?;
        let valid = enc.linguistic.valid.clone();
        let veg = match &self.veg {
            Some(veg) => {
                let articles: Vec<bool> = core::iter::once(false)
                    .chain(sample.words.iter().map(|&w| !self.cfg.use_articles && self.vocab.is_article(w)))
                    .chain(core::iter::repeat(false))
                    .take(valid.len())
                    .collect();
                let cues = veg.cue_rows(&valid, &articles);
                let targets = if self.cfg.contrastive {
                    Some(self.contrastive_targets(sample)?)
                } else {
                    None
                };
                Some(veg.forward(s, enc.vision.fv(), enc.advanced.tokens, &cues, targets.as_ref(), mode, seed)?)
            }
            None => None,
        };
        let candidates = KvCandidates {
            visual: veg.as_ref().map(|v| (v.expression.expression, v.expression.valid.as_slice())),
            advanced: (enc.advanced.tokens, enc.advanced.valid.as_slice()),
            vanilla: (enc.linguistic.tokens, enc.linguistic.valid.as_slice()),
        };
        let (kv, kv_valid) = select_keyvalue_source(self.cfg.kv_source, candidates)?;
        let kv_valid = kv_valid.to_vec();
        let decoder = self.decoder.forward(s, &enc.vision, kv, &kv_valid)?;
        Ok(ForwardOutput {
            encoders: enc,
            veg,
            decoder,
            kv,
            kv_valid,
        })
    }

    /// `segmentation + λ_c · contrastive`.
    pub fn losses<T: Real>(&self, s: &mut Session<'_, T>, out: &ForwardOutput, sample: &Sample) -> Result<Losses> {
        let segmentation = segmentation_loss(s, out.decoder.logits, &sample.mask)?;
        let contrastive = out.veg.as_ref().and_then(|v| v.contrastive_loss);
        let total = match contrastive {
            Some(c) if self.cfg.contrastive_weight > 0.0 => {
                let weighted = s.tape.scale(c, T::of(self.cfg.contrastive_weight))?;
                s.tape.add(segmentation, weighted)?
            }
            _ => segmentation,
        };
        Ok(Losses {
            total,
            segmentation,
            contrastive,
        })
    }

    /// Evaluation-mode prediction.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, sample: &Sample) -> Result<crate::decoder::SegmentationOutput<T>> {
        let mut s = Session::new(params, false);
        let out = self.forward(&mut s, sample, Mode::Eval, 0)?;
        let logits = s.value(out.decoder.logits).data().to_vec();
        Ok(crate::decoder::predict_mask(&logits, sample.image.height, sample.image.width))
    }
}
