//! Toy vision and language encoders plus the cross-modal fusion that turns
//! linguistic tokens into advanced linguistic tokens.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{key_mask, AttentionBlock, Init, LayerNorm, Linear, ParamId, Session};
use crate::scalar::Real;
use crate::tape::{RowMap, Var};
use crate::tensor::Tensor;

/// Maximum number of linguistic tokens including the class token.
pub const MAX_TOKENS: usize = 21;
pub const MAX_WORDS: usize = MAX_TOKENS - 1;
pub const PATCH: usize = 4;
pub const STAGES: usize = 4;
pub const UNK: &str = "<unk>";
pub const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// RGB image, row-major `[H × W × 3]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl SceneImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::shape("scene_image", &[height, width, 3], &[pixels.len()]));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height * self.width, 3], |i| T::of(self.pixels[i]))
    }
}

/// Token vocabulary; the line number in a vocabulary file is the id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// `<unk>` is always id 0.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens = vec![UNK.to_string()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self { tokens }
    }

    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let tokens: Vec<String> = lines.iter().map(|l| l.as_ref().to_string()).collect();
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Vocabulary("vocabulary must start with <unk>".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.tokens.iter().position(|t| t == word).unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercased whitespace split; unknown words map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(&w.to_lowercase())).collect()
    }

    pub fn is_article(&self, id: usize) -> bool {
        self.word(id).map(|w| ARTICLES.contains(&w)).unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMode {
    None,
    Late,
    Early,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Late => "late",
            FusionMode::Early => "early",
        }
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "late" => Ok(FusionMode::Late),
            "early" => Ok(FusionMode::Early),
            other => Err(Error::invalid(alloc::format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub fusion: FusionMode,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::invalid(alloc::format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        for c in self.stage_channels() {
            if c % self.heads != 0 {
                return Err(Error::invalid("stage channels must be divisible by heads"));
            }
        }
        if self.dim % self.heads != 0 {
            return Err(Error::invalid("dim must be divisible by heads"));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; STAGES] {
        core::array::from_fn(|i| self.base_channels << i)
    }

    /// Square grid side per stage: strides 4, 2, 2, 2.
    pub fn stage_grids(&self) -> [usize; STAGES] {
        core::array::from_fn(|i| self.image_size / PATCH >> i)
    }
}

/// Per-stage feature maps `F_i [H_i·W_i × C_i]` on the tape.
#[derive(Debug, Clone, Copy)]
pub struct VisionFeatures {
    pub stages: [Var; STAGES],
    pub grids: [usize; STAGES],
    pub channels: [usize; STAGES],
}

impl VisionFeatures {
    /// Flattened last-stage tokens `F_v`.
    pub fn fv(&self) -> Var {
        self.stages[STAGES - 1]
    }

    pub fn tokens(&self) -> usize {
        self.grids[STAGES - 1] * self.grids[STAGES - 1]
    }
}

/// `E_L`: row 0 is the class token, then one row per word, then padding.
#[derive(Debug, Clone)]
pub struct LinguisticTokens {
    pub tokens: Var,
    pub word_ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl LinguisticTokens {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// `Ê_L`, same layout and validity as the tokens it came from.
#[derive(Debug, Clone)]
pub struct AdvancedLinguisticTokens {
    pub tokens: Var,
    pub valid: Vec<bool>,
}

/// One bidirectional exchange between vision tokens and linguistic tokens.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub lang_from_vision: AttentionBlock,
    pub vision_from_lang: AttentionBlock,
}

impl FusionLayer {
    fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, name: &str, dim: usize, vision_dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            lang_from_vision: AttentionBlock::new(init, &alloc::format!("{name}.l2v"), dim, vision_dim, heads, mlp_ratio)?,
            vision_from_lang: AttentionBlock::new(init, &alloc::format!("{name}.v2l"), vision_dim, dim, heads, mlp_ratio)?,
        })
    }

    /// Returns updated `(language, vision)`; both directions read the inputs
    /// as they were before this layer.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, lang: Var, valid: &[bool], vision: Var) -> Result<(Var, Var)> {
        let lang_next = advance_rows(s, &self.lang_from_vision, lang, valid, vision)?;
        let n = s.value(vision).rows();
        let mask = key_mask(n, valid);
        let vision_next = self.vision_from_lang.forward(s, vision, Some(lang), Some(&mask))?.out;
        Ok((lang_next, vision_next))
    }
}

/// Cross-attention of valid linguistic rows over `kv`; padding rows are
/// copied through untouched.
pub fn advance_rows<T: Real>(s: &mut Session<'_, T>, block: &AttentionBlock, lang: Var, valid: &[bool], kv: Var) -> Result<Var> {
    let rows: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if rows.len() == valid.len() {
        return Ok(block.forward(s, lang, Some(kv), None)?.out);
    }
    let pads: Vec<usize> = (0..valid.len()).filter(|&i| !valid[i]).collect();
    let q = s.tape.gather_rows(lang, &rows)?;
    let upd = block.forward(s, q, Some(kv), None)?.out;
    let upd = s.tape.row_mix(upd, Arc::new(RowMap::scatter(valid.len(), &rows)))?;
    let pad_rows = s.tape.gather_rows(lang, &pads)?;
    let pad_rows = s.tape.row_mix(pad_rows, Arc::new(RowMap::scatter(valid.len(), &pads)))?;
    s.tape.add(upd, pad_rows)
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub cfg: EncoderConfig,
    pub embed: Linear,
    pub position: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub merges: Vec<(LayerNorm, Linear)>,
    patchify: Arc<RowMap>,
    merge_maps: Vec<Arc<RowMap>>,
}

impl VisionEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels();
        let grids = cfg.stage_grids();
        let embed = Linear::new(init, "vision.embed", PATCH * PATCH * 3, ch[0])?;
        let position = init.tensor("vision.position", grid_positions(grids[0], ch[0]))?;
        let mut blocks = Vec::new();
        let mut merges = Vec::new();
        for i in 0..STAGES {
            blocks.push(AttentionBlock::new(init, &alloc::format!("vision.stage{}", i + 1), ch[i], ch[i], cfg.heads, cfg.mlp_ratio)?);
            if i + 1 < STAGES {
                let norm = LayerNorm::new(init, &alloc::format!("vision.merge{}.norm", i + 1), 4 * ch[i])?;
                let lin = Linear::new(init, &alloc::format!("vision.merge{}.reduce", i + 1), 4 * ch[i], ch[i + 1])?;
                merges.push((norm, lin));
            }
        }
        let patchify = Arc::new(block_order_map(cfg.image_size, PATCH));
        let merge_maps = (0..STAGES - 1).map(|i| Arc::new(block_order_map(grids[i], 2))).collect();
        Ok(Self {
            cfg,
            embed,
            position,
            blocks,
            merges,
            patchify,
            merge_maps,
        })
    }

    /// Stage tokens before stage `i` runs (patch embedding or merge of the
    /// previous stage).
    fn stage_input<T: Real>(&self, s: &mut Session<'_, T>, i: usize, prev: Var) -> Result<Var> {
        let grids = self.cfg.stage_grids();
        let ch = self.cfg.stage_channels();
        if i == 0 {
            let px = s.tape.row_mix(prev, self.patchify.clone())?;
            let patches = s.tape.reshape(px, &[grids[0] * grids[0], PATCH * PATCH * 3])?;
            let x = self.embed.forward(s, patches)?;
            let pos = s.param(self.position);
            return s.tape.add(x, pos);
        }
        let (norm, reduce) = &self.merges[i - 1];
        let grouped = s.tape.row_mix(prev, self.merge_maps[i - 1].clone())?;
        let grouped = s.tape.reshape(grouped, &[grids[i] * grids[i], 4 * ch[i - 1]])?;
        let h = norm.forward(s, grouped)?;
        reduce.forward(s, h)
    }

    /// Runs the four stages. `fuse` is called after each stage block with
    /// the stage index and current tokens and may replace them.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        image: Var,
        mut fuse: impl FnMut(&mut Session<'_, T>, usize, Var) -> Result<Var>,
    ) -> Result<VisionFeatures> {
        let expected = self.cfg.image_size * self.cfg.image_size;
        if s.value(image).rows() != expected || s.value(image).cols() != 3 {
            return Err(Error::shape("encode_image", s.value(image).shape(), &[expected, 3]));
        }
        let mut stages = [image; STAGES];
        let mut x = image;
        for i in 0..STAGES {
            x = self.stage_input(s, i, x)?;
            x = self.blocks[i].forward(s, x, None, None)?.out;
            x = fuse(s, i, x)?;
            stages[i] = x;
        }
        Ok(VisionFeatures {
            stages,
            grids: self.cfg.stage_grids(),
            channels: self.cfg.stage_channels(),
        })
    }
}

/// Reorders the rows of a `side × side` grid so that each `block × block`
/// tile becomes contiguous (tiles row-major, pixels row-major inside).
pub fn block_order_map(side: usize, block: usize) -> RowMap {
    let tiles = side / block;
    let mut order = Vec::with_capacity(side * side);
    for ty in 0..tiles {
        for tx in 0..tiles {
            for dy in 0..block {
                for dx in 0..block {
                    order.push((ty * block + dy) * side + tx * block + dx);
                }
            }
        }
    }
    RowMap::gather(side * side, &order)
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, i) = (idx / dim, idx % dim);
        let freq = libm::pow(10_000.0, -((i / 2 * 2) as f64) / dim as f64);
        let angle = pos as f64 * freq;
        T::of(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) })
    })
}

/// Sinusoidal table for a `side × side` grid `[side² × dim]`: the first half
/// of the channels encodes the row, the second half the column.
pub fn grid_positions<T: Real>(side: usize, dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let rows: Tensor<T> = sinusoidal_positions(side, half);
    let cols: Tensor<T> = sinusoidal_positions(side, dim - half);
    Tensor::from_fn(&[side * side, dim], |idx| {
        let (cell, c) = (idx / dim, idx % dim);
        let (y, x) = (cell / side, cell % side);
        if c < half {
            rows.row(y)[c]
        } else {
            cols.row(x)[c - half]
        }
    })
}

#[derive(Debug, Clone)]
pub struct LanguageEncoder {
    pub dim: usize,
    pub vocab_size: usize,
    pub embedding: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<AttentionBlock>,
}

impl LanguageEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: &EncoderConfig) -> Result<Self> {
        let embedding = init.uniform("language.embedding", &[cfg.vocab_size, cfg.dim], 1.0)?;
        let cls = init.uniform("language.cls", &[1, cfg.dim], 1.0)?;
        let blocks = (0..2)
            .map(|i| AttentionBlock::new(init, &alloc::format!("language.block{}", i + 1), cfg.dim, cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            dim: cfg.dim,
            vocab_size: cfg.vocab_size,
            embedding,
            cls,
            blocks,
        })
    }

    /// Encodes word ids, optionally padding the token sequence to `pad_to`
    /// rows. Padding rows are masked out as keys everywhere.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, words: &[usize], pad_to: Option<usize>) -> Result<LinguisticTokens> {
        if words.len() > MAX_WORDS {
            return Err(Error::invalid(alloc::format!("expression has {} words, at most {MAX_WORDS} allowed", words.len())));
        }
        if let Some(&bad) = words.iter().find(|&&w| w >= self.vocab_size) {
            return Err(Error::Vocabulary(alloc::format!("id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let real = words.len() + 1;
        let len = pad_to.unwrap_or(real).max(real);
        if len > MAX_TOKENS {
            return Err(Error::invalid(alloc::format!("token sequence {len} exceeds {MAX_TOKENS}")));
        }
        let mut word_map = vec![Vec::new(); len];
        for (j, &w) in words.iter().enumerate() {
            word_map[j + 1].push((w as u32, 1.0));
        }
        let mut cls_map = vec![Vec::new(); len];
        cls_map[0].push((0, 1.0));
        let emb = s.param(self.embedding);
        let cls = s.param(self.cls);
        let x = s.tape.row_mix(emb, Arc::new(RowMap { in_rows: self.vocab_size, entries: word_map }))?;
        let c = s.tape.row_mix(cls, Arc::new(RowMap { in_rows: 1, entries: cls_map }))?;
        let x = s.tape.add(x, c)?;
        let pos = s.constant(sinusoidal_positions(len, self.dim));
        let mut x = s.tape.add(x, pos)?;
        let valid: Vec<bool> = (0..len).map(|i| i < real).collect();
        let mask = key_mask(len, &valid);
        for b in &self.blocks {
            x = b.forward(s, x, None, Some(&mask))?.out;
        }
        Ok(LinguisticTokens {
            tokens: x,
            word_ids: words.to_vec(),
            valid,
        })
    }
}

/// Cross-modal wiring selected by [`FusionMode`].
#[derive(Debug, Clone)]
pub struct Fusion {
    pub mode: FusionMode,
    /// Early: layers for stages 3 and 4. Late: one layer after stage 4.
    pub layers: Vec<FusionLayer>,
}

impl Fusion {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: &EncoderConfig) -> Result<Self> {
        let ch = cfg.stage_channels();
        let layers = match cfg.fusion {
            FusionMode::None => Vec::new(),
            FusionMode::Late => vec![FusionLayer::new(init, "fusion.late", cfg.dim, ch[3], cfg.heads, cfg.mlp_ratio)?],
            FusionMode::Early => vec![
                FusionLayer::new(init, "fusion.stage3", cfg.dim, ch[2], cfg.heads, cfg.mlp_ratio)?,
                FusionLayer::new(init, "fusion.stage4", cfg.dim, ch[3], cfg.heads, cfg.mlp_ratio)?,
            ],
        };
        Ok(Self { mode: cfg.fusion, layers })
    }

    /// Which fusion layer (if any) runs after vision stage `stage` (0-based).
    pub fn layer_for_stage(&self, stage: usize) -> Option<&FusionLayer> {
        match self.mode {
            FusionMode::None => None,
            FusionMode::Late => (stage == STAGES - 1).then(|| &self.layers[0]),
            FusionMode::Early => match stage {
                2 => Some(&self.layers[0]),
                3 => Some(&self.layers[1]),
                _ => None,
            },
        }
    }
}

/// Both encoders and their fusion.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub cfg: EncoderConfig,
    pub vision: VisionEncoder,
    pub language: LanguageEncoder,
    pub fusion: Fusion,
}

/// Everything the encoders hand downstream.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub vision: VisionFeatures,
    pub linguistic: LinguisticTokens,
    pub advanced: AdvancedLinguisticTokens,
}

impl Encoders {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            vision: VisionEncoder::new(init, cfg)?,
            language: LanguageEncoder::new(init, &cfg)?,
            fusion: Fusion::new(init, &cfg)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, image: &SceneImage, words: &[usize]) -> Result<EncoderOutput> {
        if image.height != self.cfg.image_size || image.width != self.cfg.image_size {
            return Err(Error::shape("encode_image", &[image.height, image.width], &[self.cfg.image_size, self.cfg.image_size]));
        }
        let linguistic = self.language.forward(s, words, None)?;
        let img = s.constant(image.to_tensor());
        let mut lang = linguistic.tokens;
        let valid = linguistic.valid.clone();
        let fusion = &self.fusion;
        let vision = self.vision.forward(s, img, |s, stage, x| match fusion.layer_for_stage(stage) {
            Some(layer) => {
                let (l, v) = layer.forward(s, lang, &valid, x)?;
                lang = l;
                Ok(v)
            }
            None => Ok(x),
        })?;
        let advanced = AdvancedLinguisticTokens {
            tokens: lang,
            valid: linguistic.valid.clone(),
        };
        Ok(EncoderOutput {
            vision,
            linguistic,
            advanced,
        })
    }
}
