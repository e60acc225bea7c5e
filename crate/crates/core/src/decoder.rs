//! Segmentation decoder: vision queries attend to a key-value token set at
//! each stage, features climb back up the encoder pyramid, and a per-pixel
//! projection yields mask logits.

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::Rng;

use crate::encoders::{VisionFeatures, STAGES};
use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::nn::{key_mask, AttentionBlock, AttentionOutput, Init, Linear, Session};
use crate::scalar::Real;
use crate::tape::{RowMap, Var};

/// Which token set the decoder attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KvSource {
    /// Visual expression `Ê_V`.
    #[default]
    VisualExpression,
    /// Advanced linguistic tokens `Ê_L`.
    AdvancedLinguistic,
    /// Language encoder output `E_L`.
    VanillaLinguistic,
}

impl KvSource {
    pub const ALL: [KvSource; 3] = [KvSource::VanillaLinguistic, KvSource::AdvancedLinguistic, KvSource::VisualExpression];

    pub fn as_str(self) -> &'static str {
        match self {
            KvSource::VisualExpression => "VE",
            KvSource::AdvancedLinguistic => "advanced_LE",
            KvSource::VanillaLinguistic => "vanilla_LE",
        }
    }
}

impl FromStr for KvSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VE" | "ve" => Ok(KvSource::VisualExpression),
            "advanced_LE" | "advanced_le" => Ok(KvSource::AdvancedLinguistic),
            "vanilla_LE" | "vanilla_le" => Ok(KvSource::VanillaLinguistic),
            other => Err(Error::invalid(alloc::format!("unknown key-value source {other:?}"))),
        }
    }
}

/// Candidate key-value sets, each `[L × D]` with its own validity.
#[derive(Debug, Clone, Copy)]
pub struct KvCandidates<'a> {
    pub visual: Option<(Var, &'a [bool])>,
    pub advanced: (Var, &'a [bool]),
    pub vanilla: (Var, &'a [bool]),
}

pub fn select_keyvalue_source<'a>(tag: KvSource, candidates: KvCandidates<'a>) -> Result<(Var, &'a [bool])> {
    match tag {
        KvSource::VisualExpression => candidates
            .visual
            .ok_or_else(|| Error::invalid("visual expression was not generated")),
        KvSource::AdvancedLinguistic => Ok(candidates.advanced),
        KvSource::VanillaLinguistic => Ok(candidates.vanilla),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    pub image_size: usize,
    pub kv_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Width of each decoder stage, coarse to fine.
    pub dims: [usize; STAGES - 1],
    pub encoder_channels: [usize; STAGES],
    pub encoder_grids: [usize; STAGES],
}

/// Binary mask prediction at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutput<T> {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<T>,
    pub prediction: Vec<bool>,
}

impl<T: Real> SegmentationOutput<T> {
    /// Threshold at `σ(logit) > 0.5`, i.e. `logit > 0`.
    pub fn from_logits(height: usize, width: usize, logits: Vec<T>) -> Self {
        let prediction = logits.iter().map(|&z| z > T::zero()).collect();
        Self {
            height,
            width,
            logits,
            prediction,
        }
    }

    pub fn probabilities(&self) -> Vec<T> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub fuse: Linear,
    pub block: AttentionBlock,
    upsample: Arc<RowMap>,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub stages: Vec<DecoderStage>,
    pub head: Linear,
    resize: Arc<RowMap>,
}

/// Decoder result on the tape.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[H·W × 1]` logits at input resolution.
    pub logits: Var,
    /// Final stage-1 features.
    pub features: Var,
    /// Attention-weight node of each stage, coarse to fine.
    pub attention: Vec<Var>,
    pub grids: Vec<usize>,
}

impl Decoder {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: DecoderConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut prev_dim = cfg.encoder_channels[STAGES - 1];
        for (k, &dim) in cfg.dims.iter().enumerate() {
            let enc = STAGES - 2 - k;
            if dim % cfg.heads != 0 {
                return Err(Error::invalid("decoder dims must be divisible by heads"));
            }
            let name = alloc::format!("decoder.stage{}", k + 1);
            let fuse = Linear::new(init, &alloc::format!("{name}.fuse"), prev_dim + cfg.encoder_channels[enc], dim)?;
            let block = AttentionBlock::new(init, &name, dim, cfg.kv_dim, cfg.heads, cfg.mlp_ratio)?;
            let upsample = Arc::new(nearest_upsample_map(cfg.encoder_grids[enc + 1]));
            stages.push(DecoderStage { fuse, block, upsample });
            prev_dim = dim;
        }
        let head = Linear::new(init, "decoder.head", prev_dim, 1)?;
        let resize = Arc::new(bilinear_resize_map(cfg.encoder_grids[0], cfg.image_size));
        Ok(Self { cfg, stages, head, resize })
    }

    /// Runs every stage from last-stage features up to stage-1 resolution.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, vision: &VisionFeatures, kv: Var, kv_valid: &[bool]) -> Result<DecoderOutput> {
        let mut x = vision.fv();
        let mut attention = Vec::new();
        let mut grids = Vec::new();
        for (k, stage) in self.stages.iter().enumerate() {
            let enc = STAGES - 2 - k;
            x = upsample_and_fuse(s, &stage.fuse, &stage.upsample, x, vision.stages[enc])?;
            let out = decode_stage(s, &stage.block, x, kv, kv_valid)?;
            attention.push(out.weights);
            grids.push(vision.grids[enc]);
            x = out.out;
        }
        let logits = predict_logits(s, &self.head, &self.resize, x)?;
        Ok(DecoderOutput {
            logits,
            features: x,
            attention,
            grids,
        })
    }
}

/// `F_o = MHCA(F, kv) + F`, `F_d = MLP(F_o) + F_o`, attending valid kv rows
/// only.
pub fn decode_stage<T: Real>(s: &mut Session<'_, T>, block: &AttentionBlock, features: Var, kv: Var, kv_valid: &[bool]) -> Result<AttentionOutput> {
    if !kv_valid.iter().any(|&v| v) {
        return Err(Error::invalid("decoder key-value set has no valid row"));
    }
    let n = s.value(features).rows();
    let mask = key_mask(n, kv_valid);
    block.forward(s, features, Some(kv), Some(&mask))
}

/// Nearest-neighbour 2× upsampling of `x` (a `g × g` grid), channel concat
/// with the encoder features at `2g × 2g`, then a linear reduction.
pub fn upsample_and_fuse<T: Real>(s: &mut Session<'_, T>, reduce: &Linear, upsample: &Arc<RowMap>, x: Var, encoder: Var) -> Result<Var> {
    let up = s.tape.row_mix(x, upsample.clone())?;
    if s.value(up).rows() != s.value(encoder).rows() {
        return Err(Error::shape("upsample_and_fuse", s.value(up).shape(), s.value(encoder).shape()));
    }
    let cat = s.tape.concat_cols(up, encoder)?;
    reduce.forward(s, cat)
}

/// Per-pixel linear to one logit, then bilinear resize to input resolution.
pub fn predict_logits<T: Real>(s: &mut Session<'_, T>, head: &Linear, resize: &Arc<RowMap>, features: Var) -> Result<Var> {
    let z = head.forward(s, features)?;
    s.tape.row_mix(z, resize.clone())
}

/// `g × g` → `2g × 2g`, each source cell copied into its 2×2 block.
pub fn nearest_upsample_map(side: usize) -> RowMap {
    let out = 2 * side;
    let idx: Vec<usize> = (0..out * out).map(|o| (o / out / 2) * side + (o % out) / 2).collect();
    RowMap::gather(side * side, &idx)
}

/// Bilinear resize of a square grid with half-pixel centers and edge clamp.
pub fn bilinear_resize_map(src: usize, dst: usize) -> RowMap {
    let scale = src as f64 / dst as f64;
    let axis = |o: usize| -> [(usize, f64); 2] {
        let c = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (libm::floor(c) as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        let t = c - i0 as f64;
        [(i0, 1.0 - t), (i1, t)]
    };
    let mut entries = Vec::with_capacity(dst * dst);
    for y in 0..dst {
        let ay = axis(y);
        for x in 0..dst {
            let ax = axis(x);
            let mut e: Vec<(u32, f64)> = Vec::with_capacity(4);
            for &(iy, wy) in &ay {
                for &(ix, wx) in &ax {
                    let w = wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let id = (iy * src + ix) as u32;
                    match e.iter_mut().find(|(j, _)| *j == id) {
                        Some(slot) => slot.1 += w,
                        None => e.push((id, w)),
                    }
                }
            }
            entries.push(e);
        }
    }
    RowMap { in_rows: src * src, entries }
}

/// BCE-with-logits mean plus soft Dice (`ε = 1`), weighted 1:1.
pub fn segmentation_loss<T: Real>(s: &mut Session<'_, T>, logits: Var, gt: &[bool]) -> Result<Var> {
    if s.value(logits).len() != gt.len() {
        return Err(Error::shape("segmentation_loss", s.value(logits).shape(), &[gt.len()]));
    }
    let target: Arc<Vec<T>> = Arc::new(gt.iter().map(|&g| if g { T::one() } else { T::zero() }).collect());
    let bce = s.tape.bce_with_logits(logits, target.clone())?;
    let dice = s.tape.soft_dice(logits, target, T::one())?;
    s.tape.add(bce, dice)
}

/// Thresholded prediction straight from logits.
pub fn predict_mask<T: Real>(logits: &[T], height: usize, width: usize) -> SegmentationOutput<T> {
    SegmentationOutput::from_logits(height, width, logits.to_vec())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::rng_from_seed;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn block(dim: usize, kv_dim: usize) -> (AttentionBlock, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(31);
        let b = AttentionBlock::new(&mut Init::new(&mut store, &mut rng), "d", dim, kv_dim, 2, 2).unwrap();
        (b, store)
    }

    #[test]
    fn zero_output_and_mlp_leave_features() {
        let (b, mut store) = block(4, 6);
        store.fill_prefix("d.attn.out", 0.0);
        store.fill_prefix("d.mlp.fc2", 0.0);
        let mut s = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (f, kv) = (s.constant(rand(&mut rng, &[5, 4])), s.constant(rand(&mut rng, &[3, 6])));
        let out = decode_stage(&mut s, &b, f, kv, &[true, false, true]).unwrap();
        assert_eq!(s.value(out.out), s.value(f));
    }

    #[test]
    fn single_valid_kv_row_takes_all_weight() {
        let (b, store) = block(4, 6);
        let mut s = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, kv) = (s.constant(rand(&mut rng, &[5, 4])), s.constant(rand(&mut rng, &[3, 6])));
        let out = decode_stage(&mut s, &b, f, kv, &[false, true, false]).unwrap();
        let w = s.tape.attention_weights(out.weights).unwrap();
        for r in 0..5 {
            assert_eq!(w.row(r), &[0.0, 1.0, 0.0]);
        }
        assert!(decode_stage(&mut s, &b, f, kv, &[false; 3]).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one_over_valid_keys() {
        let (b, store) = block(4, 6);
        let mut s = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, kv) = (s.constant(rand(&mut rng, &[7, 4])), s.constant(rand(&mut rng, &[4, 6])));
        let valid = [true, true, false, true];
        let out = decode_stage(&mut s, &b, f, kv, &valid).unwrap();
        let w = s.tape.attention_weights(out.weights).unwrap();
        for r in 0..7 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert_eq!(w.at(r, 2), 0.0);
        }
    }

    #[test]
    fn kv_permutation_leaves_output_unchanged() {
        let (b, store) = block(4, 6);
        let mut s = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kv_t = rand(&mut rng, &[3, 6]);
        let perm = [2, 0, 1];
        let permuted = Tensor::from_fn(&[3, 6], |i| kv_t.at(perm[i / 6], i % 6));
        let f = s.constant(rand(&mut rng, &[5, 4]));
        let (a, p) = (s.constant(kv_t), s.constant(permuted));
        let valid = [true, false, true];
        let pvalid: Vec<bool> = perm.iter().map(|&i| valid[i]).collect();
        let x = decode_stage(&mut s, &b, f, a, &valid).unwrap();
        let y = decode_stage(&mut s, &b, f, p, &pvalid).unwrap();
        assert!(s.value(x.out).max_abs_diff(s.value(y.out)) <= 1e-9);
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, false);
        let x = s.constant(Tensor::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let up = s.tape.row_mix(x, Arc::new(nearest_upsample_map(2))).unwrap();
        let want = [1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0];
        assert_eq!(s.value(up).data(), &want);
    }

    #[test]
    fn fuse_with_zero_decoder_input_passes_encoder_features() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(5);
        let reduce = Linear::new(&mut Init::new(&mut store, &mut rng), "f", 2 + 3, 3).unwrap();
        let id = store.id("f.weight").unwrap();
        let w = store.get_mut(id);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for c in 0..3 {
            w.data_mut()[c * 5 + 2 + c] = 1.0;
        }
        let mut s = Session::new(&store, false);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = s.constant(Tensor::zeros(&[1, 2]));
        let enc = s.constant(rand(&mut r, &[4, 3]));
        let out = upsample_and_fuse(&mut s, &reduce, &Arc::new(nearest_upsample_map(1)), x, enc).unwrap();
        assert_eq!(s.value(out), s.value(enc));
        assert_eq!(reduce.in_dim, 5);
        let bad = s.constant(Tensor::zeros(&[9, 3]));
        assert!(upsample_and_fuse(&mut s, &reduce, &Arc::new(nearest_upsample_map(1)), x, bad).is_err());
    }

    #[test]
    fn bilinear_resize_preserves_constants_and_weights_sum_to_one() {
        let map = bilinear_resize_map(16, 64);
        assert_eq!(map.entries.len(), 64 * 64);
        for e in &map.entries {
            assert!((e.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let same = bilinear_resize_map(4, 4);
        for (i, e) in same.entries.iter().enumerate() {
            assert_eq!(e, &vec![(i as u32, 1.0)]);
        }
    }

    fn decoder_cfg() -> DecoderConfig {
        DecoderConfig {
            image_size: 64,
            kv_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            dims: [8, 8, 8],
            encoder_channels: [4, 4, 8, 8],
            encoder_grids: [16, 8, 4, 2],
        }
    }

    fn vision(s: &mut Session<'_, f64>, rng: &mut ChaCha8Rng) -> VisionFeatures {
        let cfg = decoder_cfg();
        let stages = core::array::from_fn(|i| {
            let g = cfg.encoder_grids[i];
            s.constant(rand(rng, &[g * g, cfg.encoder_channels[i]]))
        });
        VisionFeatures {
            stages,
            grids: cfg.encoder_grids,
            channels: cfg.encoder_channels,
        }
    }

    #[test]
    fn decoder_yields_full_resolution_logits() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(7);
        let dec = Decoder::new(&mut Init::new(&mut store, &mut rng), decoder_cfg()).unwrap();
        let mut s = Session::new(&store, false);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let v = vision(&mut s, &mut r);
        let kv = s.constant(rand(&mut r, &[3, 8]));
        let out = dec.forward(&mut s, &v, kv, &[true, true, false]).unwrap();
        assert_eq!(s.value(out.logits).shape(), &[64 * 64, 1]);
        assert_eq!(out.grids, vec![4, 8, 16]);
        assert_eq!(out.attention.len(), 3);
    }

    #[test]
    fn zero_head_predicts_background() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(9);
        let dec = Decoder::new(&mut Init::new(&mut store, &mut rng), decoder_cfg()).unwrap();
        store.fill_prefix("decoder.head", 0.0);
        let mut s = Session::new(&store, false);
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let v = vision(&mut s, &mut r);
        let kv = s.constant(rand(&mut r, &[2, 8]));
        let out = dec.forward(&mut s, &v, kv, &[true, true]).unwrap();
        let pred = predict_mask(s.value(out.logits).data(), 64, 64);
        assert!(pred.logits.iter().all(|&z| z == 0.0));
        assert!(pred.prediction.iter().all(|&p| !p));
    }

    #[test]
    fn raising_one_logit_flips_only_that_pixel() {
        let logits = vec![-0.5, 0.2, -0.1, 0.0];
        let base = predict_mask(&logits, 2, 2).prediction;
        let mut raised = logits.clone();
        raised[2] = 3.0;
        let after = predict_mask(&raised, 2, 2).prediction;
        for i in [0, 1, 3] {
            assert_eq!(base[i], after[i]);
        }
        assert!(after[2]);
    }

    #[test]
    fn segmentation_loss_examples() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, false);
        let gt = [true, true, false, false];
        let z = s.constant(Tensor::zeros(&[4, 1]));
        let bce = s.tape.bce_with_logits(z, Arc::new(vec![1.0, 1.0, 0.0, 0.0])).unwrap();
        assert!((s.value(bce).item() - 0.693147).abs() < 1e-6);
        let mut last = f64::INFINITY;
        for c in [2.0, 5.0, 10.0, 20.0] {
            let x = s.constant(Tensor::from_f64(&[4, 1], &[c, c, -c, -c]).unwrap());
            let l = segmentation_loss(&mut s, x, &gt).unwrap();
            let l = s.value(l).item();
            assert!(l < last && l > 0.0);
            last = l;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn segmentation_loss_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_t = rand(&mut rng, &[20, 1]).map(|v| 4.0 * v);
        let gt: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store, false);
        let x = s.constant(x_t.clone());
        let l = segmentation_loss(&mut s, x, &gt).unwrap();
            let l = s.value(l).item();
        let (mut bce, mut inter, mut psum, mut qsum) = (0.0, 0.0, 0.0, 0.0);
        for (i, &z) in x_t.data().iter().enumerate() {
            let p = 1.0 / (1.0 + (-z).exp());
            let y = if gt[i] { 1.0 } else { 0.0 };
            bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            inter += p * y;
            psum += p;
            qsum += y;
        }
        let want = bce / 20.0 + 1.0 - (2.0 * inter + 1.0) / (psum + qsum + 1.0);
        assert!((l - want).abs() <= 1e-10);
    }

    #[test]
    fn key_value_sources() {
        assert_eq!(KvSource::default(), KvSource::VisualExpression);
        for k in KvSource::ALL {
            assert_eq!(k.as_str().parse::<KvSource>().unwrap(), k);
        }
        assert!("LE".parse::<KvSource>().is_err());
        let mut tape = crate::tape::Tape::<f64>::new();
        let (a, b) = (tape.constant(Tensor::zeros(&[1, 2])), tape.constant(Tensor::zeros(&[1, 2])));
        let valid = [true];
        let c = KvCandidates {
            visual: None,
            advanced: (a, &valid),
            vanilla: (b, &valid),
        };
        assert_eq!(select_keyvalue_source(KvSource::VanillaLinguistic, c).unwrap().0, b);
        assert!(select_keyvalue_source(KvSource::VisualExpression, c).is_err());
    }
}
