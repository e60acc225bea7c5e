//! Analytic gradients of every differentiable building block against
//! central finite differences. Each check returns its worst relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vipa_core::decoder::{segmentation_loss, KvSource};
use vipa_core::gradcheck::{finite_difference_gradient, relative_error};
use vipa_core::model::{ModelConfig, Vipa};
use vipa_core::nn::{AttentionBlock, AttentionConfig, Grads, Init, Linear, Mlp, MultiHeadAttention, ParamStore, Session};
use vipa_core::rng::sample_gumbel;
use vipa_core::scene::{generate_scene, SceneGrammar, SplitPolicy};
use vipa_core::veg::{compute_relevance, pixel_contrastive_loss, retrieve_informative_tokens, ContrastiveTargets, Mode};
use vipa_core::{Result, Tensor, Var};

pub const SEEDS: u64 = 10;
pub const STEP: f64 = 1e-6;
/// Per-operation bound, 64-bit.
pub const TOL: f64 = 1e-5;
/// End-to-end probe bound.
pub const PROBE_TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn weighted_sum(s: &mut Session<'_, f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = s.constant(w.clone());
    let p = s.tape.mul(y, w)?;
    s.tape.sum(p)
}

/// Largest relative error over every parameter and every input of the
/// scalar function `f`.
fn worst_error<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Session<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| {
        let mut s = Session::new(store, false);
        let vars: Vec<Var> = inputs.iter().map(|t| s.tape.leaf(t.clone(), false)).collect();
        let loss = f(&mut s, &vars).unwrap();
        s.value(loss).item()
    };
    let mut s = Session::new(store, true);
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut s, &vars).unwrap();
    let mut grads = Grads::zeros_like(store);
    s.backward_into(loss, &mut grads).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = s.tape.grad_or_zeros(*v);
        let numeric = finite_difference_gradient(
            |x| {
                let mut ins = inputs.to_vec();
                ins[k] = x.clone();
                eval(store, &ins)
            },
            &inputs[k],
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric, FLOOR));
    }
    for id in store.ids() {
        let numeric = finite_difference_gradient(
            |x| {
                let mut st = store.clone();
                *st.get_mut(id) = x.clone();
                eval(&st, inputs)
            },
            store.get(id),
            STEP,
        );
        worst = worst.max(relative_error(grads.get(id), &numeric, FLOOR));
    }
    worst
}

fn over_seeds(case: impl FnMut(u64) -> f64) -> f64 {
    (0..SEEDS).map(case).fold(0.0, f64::max)
}

pub fn cosine_relevance() -> f64 {
    over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (pv, pl) = {
            let mut init = Init::new(&mut store, &mut rng);
            (Linear::new(&mut init, "pv", 5, 4).unwrap(), Linear::new(&mut init, "pl", 3, 4).unwrap())
        };
        let fv = rand_tensor(&mut rng, &[6, 5]);
        let el = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[3, 6]);
        worst_error(&store, &[fv, el], |s, x| {
            let rel = compute_relevance(s, &pv, &pl, x[0], x[1])?;
            weighted_sum(s, rel.scores, &w)
        })
    })
}

pub fn gumbel_retrieval_straight_through() -> f64 {
    // The hard mask passes the gradient of S′ on its selected entries; the
    // oracle differentiates the relaxation H ⊙ S′ with H held fixed.
    over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (l, n, d) = (3, 8, 4);
        let scores = rand_tensor(&mut rng, &[l, n]);
        let fv = rand_tensor(&mut rng, &[n, d]);
        let w = rand_tensor(&mut rng, &[l, d]);
        let log_tau = rng.gen_range(-0.5..0.5);
        let cues = vec![true; l];
        let noise_seed = seed + 100;
        let store = ParamStore::<f64>::new();

        let mut s = Session::new(&store, true);
        let sv = s.tape.leaf(scores.clone(), true);
        let tv = s.tape.leaf(Tensor::scalar(log_tau), true);
        let fvv = s.constant(fv.clone());
        let r = retrieve_informative_tokens(&mut s, sv, &cues, 0.3, tv, Mode::Train, noise_seed).unwrap();
        assert!(r.mask.iter().filter(|&&m| m).count() == l * 2);
        let agg = s.tape.matmul(r.mask_var, fvv).unwrap();
        let loss = weighted_sum(&mut s, agg, &w).unwrap();
        s.tape.backward(loss).unwrap();
        let (g_scores, g_tau) = (s.tape.grad_or_zeros(sv), s.tape.grad_or_zeros(tv));

        let hard = r.mask.clone();
        let g = sample_gumbel::<f64>(&[l, n], noise_seed);
        let relaxed = |x: &Tensor<f64>, lt: f64| -> f64 {
            let tau = lt.exp();
            let mut total = 0.0;
            for j in 0..l {
                let z: Vec<f64> = (0..n).map(|i| (x.row(j)[i] + g.row(j)[i]) / tau).collect();
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = e.iter().sum();
                for c in 0..d {
                    let agg: f64 = (0..n).filter(|&i| hard[j * n + i]).map(|i| e[i] / sum * fv.row(i)[c]).sum();
                    total += agg * w.row(j)[c];
                }
            }
            total
        };
        let n_scores = finite_difference_gradient(|x| relaxed(x, log_tau), &scores, STEP);
        let n_tau = finite_difference_gradient(|t| relaxed(&scores, t.item()), &Tensor::scalar(log_tau), STEP);
        relative_error(&g_scores, &n_scores, FLOOR).max(relative_error(&g_tau, &n_tau, FLOOR))
    })
}

fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
    for r in 0..rows {
        let keep = rng.gen_range(0..cols);
        m[r * cols + keep] = true;
    }
    m
}

pub fn masked_cross_attention() -> f64 {
    over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mha = {
            let mut init = Init::new(&mut store, &mut rng);
            MultiHeadAttention::new(&mut init, "mhca", 4, 6, AttentionConfig::new(4, 2).unwrap(), 4).unwrap()
        };
        let q = rand_tensor(&mut rng, &[3, 4]);
        let kv = rand_tensor(&mut rng, &[5, 6]);
        let mask = random_mask(&mut rng, 3, 5);
        let w = rand_tensor(&mut rng, &[3, 4]);
        worst_error(&store, &[q, kv], |s, x| {
            let out = mha.forward(s, x[0], x[1], Some(&mask))?;
            weighted_sum(s, out.out, &w)
        })
    })
}

pub fn self_attention_block() -> f64 {
    over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = {
            let mut init = Init::new(&mut store, &mut rng);
            AttentionBlock::new(&mut init, "mhsa", 4, 4, 2, 2).unwrap()
        };
        let x = rand_tensor(&mut rng, &[5, 4]);
        let w = rand_tensor(&mut rng, &[5, 4]);
        worst_error(&store, &[x], |s, x| {
            let out = block.forward(s, x[0], None, None)?;
            weighted_sum(s, out.out, &w)
        })
    })
}

pub fn mlp() -> f64 {
    over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mlp = {
            let mut init = Init::new(&mut store, &mut rng);
            Mlp::new(&mut init, "mlp", 4, 8, 3).unwrap()
        };
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        worst_error(&store, &[x], |s, x| {
            let y = mlp.forward(s, x[0])?;
            weighted_sum(s, y, &w)
        })
    })
}

pub fn bce_plus_dice() -> f64 {
    over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[24, 1], |_| rng.gen_range(-3.0..3.0));
        let gt: Vec<bool> = (0..24).map(|_| rng.gen_bool(0.4)).collect();
        worst_error(&ParamStore::new(), &[logits], |s, x| segmentation_loss(s, x[0], &gt))
    })
}

pub fn pixel_contrastive() -> f64 {
    over_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row = rand_tensor(&mut rng, &[1, 16]);
        let labels: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.3)).collect();
        let targets = ContrastiveTargets::from_labels(&labels);
        let scale = rng.gen_range(0.5..4.0);
        worst_error(&ParamStore::new(), &[row], |s, x| {
            let c = s.constant(Tensor::scalar(scale));
            let logits = s.tape.mul_scalar(x[0], c)?;
            pixel_contrastive_loss(s, logits, &targets)
        })
    })
}

/// One probe parameter per module of the assembled model, random
/// coordinates, evaluation-mode retrieval (a constant mask) so that the
/// whole loss is smooth.
pub fn end_to_end_probe_parameters() -> Vec<(String, f64)> {
    let grammar = SceneGrammar::default();
    let vocab = grammar.vocabulary();
    let scene = generate_scene(&grammar, 5, 32, 32, SplitPolicy::Any).unwrap();
    let sample = scene.to_sample(&vocab);
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
    let (model, store) = Vipa::new::<f64>(cfg, vocab, 3).unwrap();
    let total = |s: &mut Session<'_, f64>| {
        let out = model.forward(s, &sample, Mode::Eval, 0).unwrap();
        model.losses(s, &out, &sample).unwrap().total
    };
    let mut s = Session::new(&store, true);
    let loss = total(&mut s);
    let mut grads = Grads::zeros_like(&store);
    s.backward_into(loss, &mut grads).unwrap();

    let probes = [
        "vision.embed.weight",
        "vision.stage2.attn.q.weight",
        "language.",
        "fusion.",
        "veg.project_vision.weight",
        "veg.project_language.weight",
        "veg.log_scale",
        "veg.aggregate.weight",
        "veg.refine.attn.v.weight",
        "veg.share.mlp",
        "decoder.stage1.attn.k.weight",
        "decoder.stage3.fuse.weight",
        "decoder.head.weight",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut out = Vec::new();
    for prefix in probes {
        let param = store.iter().find(|p| p.name.starts_with(prefix)).unwrap_or_else(|| panic!("no parameter {prefix}"));
        let id = store.id(&param.name).unwrap();
        let analytic = grads.get(id);
        let mut worst: f64 = 0.0;
        for _ in 0..6 {
            let i = rng.gen_range(0..param.value.len());
            let fd = |h: f64| {
                let mut st = store.clone();
                st.get_mut(id).data_mut()[i] += h;
                let mut s = Session::new(&st, false);
                let l = total(&mut s);
                s.value(l).item()
            };
            let numeric = (fd(STEP) - fd(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
        out.push((param.name.clone(), worst));
    }
    out
}

/// Every per-operation check, by name.
pub const OPERATIONS: [(&str, fn() -> f64); 7] = [
    ("cosine relevance", cosine_relevance),
    ("gumbel retrieval (straight-through)", gumbel_retrieval_straight_through),
    ("masked cross-attention", masked_cross_attention),
    ("self-attention block", self_attention_block),
    ("mlp", mlp),
    ("bce + dice", bce_plus_dice),
    ("pixel contrastive", pixel_contrastive),
];
