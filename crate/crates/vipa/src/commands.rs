//! The work behind each subcommand, callable without the argument parser.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use vipa_core::decoder::KvSource;
use vipa_core::encoders::{FusionMode, Vocabulary};
use vipa_core::metrics::{EvalAccumulator, MetricReport, DEFAULT_THRESHOLDS};
use vipa_core::model::{Sample, Vipa};
use vipa_core::nn::{ParamStore, Session};
use vipa_core::scene::{SceneGrammar, Split};
use vipa_core::train::{EpochRecord, SampleResult, StepRecord, Trainer};
use vipa_core::veg::Mode;
use vipa_core::{Precision, Real};

use crate::checkpoint::{peek_precision, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, mask_to_pnm, Dataset, SplitCounts, StoredSample};
use crate::error::{Error, IoContext, Result};
use crate::pnm::{heatmap, Image};

macro_rules! with_precision {
    ($p:expr, $f:ident ( $($arg:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn gen(out: &Path, seed: u64, size: usize, counts: SplitCounts) -> Result<usize> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::usage(format!("--size must be a positive multiple of 32, got {size}")));
    }
    Ok(generate_dataset(out, &SceneGrammar::default(), seed, size, counts)?.len())
}

/// Per-sample gradients fanned out over `threads` scoped workers; results
/// come back in batch order so the reduction is the same as sequential.
pub fn parallel_batch<T: Real>(threads: usize) -> impl FnMut(&Trainer<'_, T>, &[&Sample]) -> vipa_core::Result<Vec<SampleResult<T>>> {
    move |tr, samples| {
        if threads <= 1 || samples.len() < 2 {
            return tr.batch_results(samples);
        }
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    scope.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(k, s)| tr.sample_result(c * chunk + k, s))
                            .collect::<vipa_core::Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(samples.len());
            for h in handles {
                out.extend(h.join().expect("gradient worker panicked")?);
            }
            Ok(out)
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    /// CSV of `step,seg_loss,contrastive_loss,lr`.
    pub log: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    pub step: u64,
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = Dataset::open(&args.data)?;
    let samples = ds.samples(Split::Train)?;
    with_precision!(cfg.precision, train_as(cfg, args, &ds.vocab, &samples))
}

fn train_as<T: Real>(cfg: &RunConfig, args: &TrainArgs, vocab: &Vocabulary, samples: &[Sample]) -> Result<TrainSummary> {
    if samples.is_empty() {
        return Err(Error::usage("dataset has no train samples"));
    }
    let (model, mut params) = Vipa::new::<T>(cfg.model.clone(), vocab.clone(), cfg.seed)?;
    let spe = samples.len().div_ceil(cfg.batch_size);
    let resumed = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            if !ck.config.same_architecture(cfg) || ck.vocab != *vocab {
                return Err(Error::Checkpoint {
                    path: path.clone(),
                    message: "architecture or vocabulary differs from the run config".into(),
                });
            }
            params.load_from(&ck.params)?;
            Some(ck)
        }
        None => None,
    };
    let mut trainer = Trainer::new(&model, params, cfg.train_config(), spe)?;
    if let Some(ck) = resumed {
        let (m, v) = ck.moments.ok_or_else(|| Error::Checkpoint {
            path: args.resume.clone().unwrap_or_default(),
            message: "no optimizer state to resume from".into(),
        })?;
        trainer.optim.restore(ck.step, m, v);
        trainer.epoch = (ck.step / spe as u64) as usize;
        log::info!("resumed at step {} (epoch {})", ck.step, trainer.epoch);
    }
    let save = |tr: &Trainer<'_, T>| -> Result<()> {
        let (m, v) = tr.optim.moments();
        Checkpoint {
            config: cfg.clone(),
            vocab: vocab.clone(),
            step: tr.optim.step,
            params: tr.params.clone(),
            moments: Some((m.to_vec(), v.to_vec())),
        }
        .save(&args.checkpoint)
    };
    if args.resume.is_none() {
        save(&trainer)?;
    }
    let mut log = match &args.log {
        Some(path) => {
            let append = args.resume.is_some() && path.exists();
            let file = OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(path).at(path)?;
            let mut w = csv::Writer::from_writer(file);
            if !append {
                w.write_record(["step", "seg_loss", "contrastive_loss", "lr"])?;
            }
            Some((w, path.clone()))
        }
        None => None,
    };
    let mut log_err: Option<Error> = None;
    let mut on_step = |r: &StepRecord| {
        if let Some((w, _)) = &mut log {
            if let Err(e) = w.write_record([r.step.to_string(), r.seg_loss.to_string(), r.contrastive_loss.to_string(), r.lr.to_string()]) {
                log_err.get_or_insert(e.into());
            }
        }
    };
    let mut epochs = Vec::new();
    let started = Instant::now();
    while trainer.epoch < cfg.epochs {
        let rec = match trainer.run_epoch_with(samples, parallel_batch(cfg.threads), &mut on_step) {
            Ok(rec) => rec,
            Err(e @ vipa_core::Error::Diverged { .. }) => {
                log::error!("{e}; last good checkpoint: {}", args.checkpoint.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        save(&trainer)?;
        log::info!(
            "epoch {} seg {:.4} contrastive {:.4} train mIoU {:.3} ({:.1}s)",
            rec.epoch,
            rec.seg_loss,
            rec.contrastive_loss,
            rec.train_miou,
            started.elapsed().as_secs_f64()
        );
        epochs.push(rec);
        if cfg.target_miou.is_some_and(|t| rec.train_miou >= t) {
            break;
        }
    }
    if let Some(e) = log_err {
        return Err(e);
    }
    if let Some((mut w, path)) = log {
        w.flush().at(&path)?;
    }
    Ok(TrainSummary {
        epochs,
        step: trainer.optim.step,
    })
}

/// Eval-mode predictions, fanned out over `threads`, merged in sample order.
pub fn accumulate<T: Real>(model: &Vipa, params: &ParamStore<T>, samples: &[Sample], threads: usize) -> Result<EvalAccumulator> {
    let part = |chunk: &[Sample]| -> Result<EvalAccumulator> {
        let mut acc = EvalAccumulator::new(&DEFAULT_THRESHOLDS);
        for s in chunk {
            let out = model.predict(params, s)?;
            acc.add(&out.prediction, &s.mask)?;
        }
        Ok(acc)
    };
    if threads <= 1 || samples.len() < 2 {
        return part(samples);
    }
    let chunk = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples.chunks(chunk).map(|c| scope.spawn(move || part(c))).collect();
        let mut acc = EvalAccumulator::new(&DEFAULT_THRESHOLDS);
        for h in handles {
            acc.merge(&h.join().expect("evaluation worker panicked")?);
        }
        Ok(acc)
    })
}

/// Trivial predictors for sanity checks of the metric pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    GroundTruth,
    Background,
}

impl std::str::FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gt" => Ok(Baseline::GroundTruth),
            "background" => Ok(Baseline::Background),
            _ => Err(format!("unknown baseline {s:?} (gt, background)")),
        }
    }
}

pub fn evaluate_baseline(samples: &[StoredSample], baseline: Baseline) -> Result<MetricReport> {
    let mut acc = EvalAccumulator::new(&DEFAULT_THRESHOLDS);
    for s in samples {
        let pred = match baseline {
            Baseline::GroundTruth => s.mask.clone(),
            Baseline::Background => vec![false; s.mask.len()],
        };
        acc.add(&pred, &s.mask)?;
    }
    Ok(acc.report()?)
}

pub fn evaluate(checkpoint: &Path, data: &Path, split: Split, threads: usize) -> Result<MetricReport> {
    let ds = Dataset::open(data)?;
    with_precision!(peek_precision(checkpoint)?, evaluate_as(checkpoint, &ds, split, threads))
}

fn evaluate_as<T: Real>(checkpoint: &Path, ds: &Dataset, split: Split, threads: usize) -> Result<MetricReport> {
    let (model, params) = load_model::<T>(checkpoint)?;
    let samples: Vec<Sample> = ds.load(split)?.iter().map(|s| s.to_sample(&model.vocab)).collect();
    if samples.is_empty() {
        return Err(Error::usage(format!("dataset has no {} samples", split.as_str())));
    }
    Ok(accumulate(&model, &params, &samples, threads)?.report()?)
}

/// Model and weights of a checkpoint.
pub fn load_model<T: Real>(path: &Path) -> Result<(Vipa, ParamStore<T>)> {
    let ck = Checkpoint::<T>::load(path)?;
    let (model, mut params) = Vipa::new::<T>(ck.config.model.clone(), ck.vocab.clone(), ck.config.seed)?;
    params.load_from(&ck.params).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("weights do not fit the embedded config: {e}"),
    })?;
    Ok((model, params))
}

/// Predicted mask for `image` and `expression`, written as a 0/255 graymap.
pub fn infer(checkpoint: &Path, sample: &StoredSample, out: &Path) -> Result<Vec<bool>> {
    let mask = with_precision!(peek_precision(checkpoint)?, infer_as(checkpoint, sample))?;
    mask_to_pnm(&mask, sample.image.width, sample.image.height).write(out)?;
    Ok(mask)
}

fn infer_as<T: Real>(checkpoint: &Path, sample: &StoredSample) -> Result<Vec<bool>> {
    let (model, params) = load_model::<T>(checkpoint)?;
    if sample.image.height != model.cfg.image_size || sample.image.width != model.cfg.image_size {
        return Err(Error::usage(format!(
            "image is {}×{}, model expects {}×{}",
            sample.image.width, sample.image.height, model.cfg.image_size, model.cfg.image_size
        )));
    }
    let unknown: Vec<&str> = sample.expression.split_whitespace().filter(|w| model.vocab.id(&w.to_lowercase()) == 0).collect();
    if !unknown.is_empty() {
        log::warn!("words outside the vocabulary map to <unk>: {}", unknown.join(" "));
    }
    Ok(model.predict(&params, &sample.to_sample(&model.vocab))?.prediction)
}

/// One cell of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub kv_source: KvSource,
    pub fusion: FusionMode,
    /// `None` for key-value sources that do not retrieve.
    pub ratio: Option<f64>,
    /// `full`, or the name of the switched-off component.
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: AblationCell,
    /// `Err` holds the failure message; the sweep continues past it.
    pub outcome: std::result::Result<MetricReport, String>,
    pub seconds: f64,
}

pub const TOGGLES: [&str; 6] = ["step1", "step2", "global_cue", "local_cue", "articles", "contrastive"];

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub data: PathBuf,
    pub kv_sources: Vec<KvSource>,
    pub fusions: Vec<FusionMode>,
    pub ratios: Vec<f64>,
    /// Also run the full VE model with each component of [`TOGGLES`] off.
    pub toggles: bool,
    pub eval_split: Split,
}

pub fn ablation_cells(args: &AblateArgs) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &fusion in &args.fusions {
        for &kv in &args.kv_sources {
            if kv == KvSource::VisualExpression {
                for &r in &args.ratios {
                    cells.push(AblationCell { kv_source: kv, fusion, ratio: Some(r), variant: "full".into() });
                }
            } else {
                cells.push(AblationCell { kv_source: kv, fusion, ratio: None, variant: "full".into() });
            }
        }
    }
    if args.toggles {
        let fusion = args.fusions.first().copied().unwrap_or(FusionMode::Early);
        let ratio = args.ratios.first().copied();
        for t in TOGGLES {
            cells.push(AblationCell { kv_source: KvSource::VisualExpression, fusion, ratio, variant: format!("no_{t}") });
        }
    }
    cells
}

fn cell_config(base: &RunConfig, cell: &AblationCell) -> std::result::Result<RunConfig, String> {
    let mut cfg = base.clone();
    cfg.model.kv_source = cell.kv_source;
    cfg.model.fusion = cell.fusion;
    if let Some(r) = cell.ratio {
        cfg.model.ratio = r;
    }
    if let Some(t) = cell.variant.strip_prefix("no_") {
        cfg.set(t, "false")?;
    }
    Ok(cfg)
}

/// Trains and evaluates every cell with the same seed and data.
pub fn ablate(base: &RunConfig, args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let ds = Dataset::open(&args.data)?;
    let train = ds.samples(Split::Train)?;
    let eval = ds.samples(args.eval_split)?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::usage("ablation needs train and evaluation samples"));
    }
    let mut rows = Vec::new();
    for cell in ablation_cells(args) {
        let started = Instant::now();
        let outcome = cell_config(base, &cell)
            .and_then(|cfg| cfg.validate().map(|_| cfg).map_err(|e| e.to_string()))
            .and_then(|cfg| with_precision!(cfg.precision, run_cell(&cfg, &ds.vocab, &train, &eval)).map_err(|e| e.to_string()));
        let seconds = started.elapsed().as_secs_f64();
        match &outcome {
            Ok(r) => log::info!("{} oIoU {:.4} mIoU {:.4} ({seconds:.1}s)", cell_label(&cell), r.oiou, r.miou),
            Err(e) => log::warn!("{} FAILED: {e}", cell_label(&cell)),
        }
        rows.push(AblationRow { cell, outcome, seconds });
    }
    Ok(rows)
}

fn run_cell<T: Real>(cfg: &RunConfig, vocab: &Vocabulary, train: &[Sample], eval: &[Sample]) -> Result<MetricReport> {
    let (model, params) = Vipa::new::<T>(cfg.model.clone(), vocab.clone(), cfg.seed)?;
    let spe = train.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(&model, params, cfg.train_config(), spe)?;
    while trainer.epoch < cfg.epochs {
        let rec = trainer.run_epoch_with(train, parallel_batch(cfg.threads), |_| {})?;
        if cfg.target_miou.is_some_and(|t| rec.train_miou >= t) {
            break;
        }
    }
    Ok(accumulate(&model, &trainer.params, eval, cfg.threads)?.report()?)
}

fn cell_label(c: &AblationCell) -> String {
    let r = c.ratio.map_or_else(|| "-".to_string(), |r| r.to_string());
    format!("kv={} fusion={} r={r} variant={}", c.kv_source.as_str(), c.fusion.as_str(), c.variant)
}

pub const ABLATION_HEADER: [&str; 11] = ["kv_source", "fusion", "ratio", "variant", "status", "oiou", "miou", "p@0.5", "p@0.7", "seconds", "error"];

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_HEADER)?;
    for row in rows {
        let c = &row.cell;
        let ratio = c.ratio.map_or_else(String::new, |r| r.to_string());
        let mut rec = vec![c.kv_source.as_str().to_string(), c.fusion.as_str().to_string(), ratio, c.variant.clone()];
        match &row.outcome {
            Ok(r) => {
                let p = |t: f64| r.precision.iter().find(|(x, _)| *x == t).map_or(String::new(), |(_, v)| v.to_string());
                rec.extend(["ok".to_string(), r.oiou.to_string(), r.miou.to_string(), p(0.5), p(0.7)]);
                rec.push(row.seconds.to_string());
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(["FAILED".to_string(), String::new(), String::new(), String::new(), String::new()]);
                rec.push(row.seconds.to_string());
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    w.flush().at(path)
}

/// Parses a file written by [`write_ablation_csv`]. Sample counts are not
/// stored and come back as 0.
pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != ABLATION_HEADER {
        return Err(Error::Parse { path: path.to_path_buf(), offset: 0, message: format!("unexpected header {header:?}") });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte() as usize);
        let bad = |m: String| Error::Parse { path: path.to_path_buf(), offset, message: m };
        let f = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(format!("column {} is not a number: {:?}", ABLATION_HEADER[i], &rec[i]))) };
        let cell = AblationCell {
            kv_source: rec[0].parse().map_err(|e: vipa_core::Error| bad(e.to_string()))?,
            fusion: rec[1].parse().map_err(|e: vipa_core::Error| bad(e.to_string()))?,
            ratio: if rec[2].is_empty() { None } else { Some(f(2)?) },
            variant: rec[3].to_string(),
        };
        let outcome = match &rec[4] {
            "ok" => Ok(MetricReport { oiou: f(5)?, miou: f(6)?, precision: vec![(0.5, f(7)?), (0.7, f(8)?)], samples: 0 }),
            "FAILED" => Err(rec[10].to_string()),
            s => return Err(bad(format!("unknown status {s:?}"))),
        };
        rows.push(AblationRow { cell, outcome, seconds: f(9)? });
    }
    Ok(rows)
}

/// Plain-text ablation table followed by the reference trends and whether
/// this run reproduces them.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<12} {:<6} {:<5} {:<16} {:>7} {:>7}\n", "kv_source", "fusion", "r", "variant", "oIoU", "mIoU");
    for row in rows {
        let c = &row.cell;
        let r = c.ratio.map_or_else(|| "-".to_string(), |r| r.to_string());
        let (o, m) = match &row.outcome {
            Ok(rep) => (format!("{:.4}", rep.oiou), format!("{:.4}", rep.miou)),
            Err(_) => ("FAILED".to_string(), String::new()),
        };
        out.push_str(&format!("{:<12} {:<6} {:<5} {:<16} {:>7} {:>7}\n", c.kv_source.as_str(), c.fusion.as_str(), r, c.variant, o, m));
    }
    let full = |kv: KvSource, ratio: Option<f64>| {
        rows.iter()
            .filter(|r| r.cell.variant == "full" && r.cell.kv_source == kv && (ratio.is_none() || r.cell.ratio == ratio))
            .filter_map(|r| r.outcome.as_ref().ok().map(|m| m.oiou))
            .fold(None, |best: Option<f64>, v| Some(best.map_or(v, |b| b.max(v))))
    };
    let (ve, adv, van) = (full(KvSource::VisualExpression, None), full(KvSource::AdvancedLinguistic, None), full(KvSource::VanillaLinguistic, None));
    if let (Some(ve), Some(adv), Some(van)) = (ve, adv, van) {
        let holds = ve > adv && adv > van;
        out.push_str(&format!(
            "reference trend VE > advanced_LE > vanilla_LE (oIoU): {} here ({ve:.4} / {adv:.4} / {van:.4})\n",
            if holds { "reproduced" } else { "not reproduced" }
        ));
    }
    let ratios: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.cell.variant == "full" && r.cell.kv_source == KvSource::VisualExpression)
        .filter_map(|r| Some((r.cell.ratio?, r.outcome.as_ref().ok()?.oiou)))
        .collect();
    if ratios.len() > 1 {
        let top = ratios.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
        let best: Vec<String> = ratios.iter().filter(|r| r.1 == top).map(|r| r.0.to_string()).collect();
        let verdict = if best.len() == 1 && best[0] == "0.3" { "reproduced" } else { "not reproduced" };
        out.push_str(&format!(
            "reference trend r = 0.3 best among retrieval ratios: best here r ∈ {{{}}} ({verdict})\n",
            best.join(", ")
        ));
    }
    out
}

/// What [`dump_attention`] wrote and the checks it ran on the dumped maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    /// Last-stage grid side; relevance and mask heatmaps are this size.
    pub grid: usize,
    pub n_p: Option<usize>,
    /// Ones per retrieval-mask row, cue rows only.
    pub mask_row_sums: Vec<usize>,
    /// Largest `|row sum − 1|` over every decoder attention map.
    pub attention_row_error: f64,
    pub files: Vec<PathBuf>,
}

pub fn dump_attention(checkpoint: &Path, sample: &StoredSample, out: &Path) -> Result<AttentionDump> {
    std::fs::create_dir_all(out).at(out)?;
    with_precision!(peek_precision(checkpoint)?, dump_as(checkpoint, sample, out))
}

fn write_matrix(path: &Path, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for r in 0..rows {
        w.write_record(values[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()))?;
    }
    w.flush().at(path)
}

fn dump_as<T: Real>(checkpoint: &Path, stored: &StoredSample, out: &Path) -> Result<AttentionDump> {
    let (model, params) = load_model::<T>(checkpoint)?;
    let sample = stored.to_sample(&model.vocab);
    let mut s = Session::new(&params, false);
    let fwd = model.forward(&mut s, &sample, Mode::Eval, 0)?;
    let grid = model.cfg.token_grid();
    let mut files = Vec::new();
    let mut mask_row_sums = Vec::new();
    let mut n_p = None;
    if let Some(veg) = &fwd.veg {
        let scores = s.value(veg.relevance.scores);
        let (l, n) = (scores.rows(), scores.cols());
        let sc: Vec<f64> = scores.data().iter().map(|v| v.as_f64()).collect();
        let ret = &veg.retrieval;
        let mask: Vec<f64> = ret.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let path = out.join("relevance.csv");
        write_matrix(&path, l, n, &sc)?;
        files.push(path);
        let path = out.join("mask.csv");
        write_matrix(&path, l, n, &mask)?;
        files.push(path);
        for &j in &veg.expression.cues {
            let path = out.join(format!("relevance_{j:02}.pgm"));
            Image::gray(grid, grid, heatmap(&sc[j * n..(j + 1) * n])).write(&path)?;
            files.push(path);
            let path = out.join(format!("mask_{j:02}.pgm"));
            Image::gray(grid, grid, ret.mask_row(j).iter().map(|&m| if m { 255 } else { 0 }).collect()).write(&path)?;
            files.push(path);
            mask_row_sums.push(ret.mask_row(j).iter().filter(|&&m| m).count());
        }
        n_p = Some(ret.n_p);
    }
    let mut attention_row_error: f64 = 0.0;
    for (k, (&w, &g)) in fwd.decoder.attention.iter().zip(&fwd.decoder.grids).enumerate() {
        let att = s.tape.attention_weights(w).ok_or_else(|| Error::usage("decoder attention weights unavailable"))?;
        let (nq, nk) = (att.rows(), att.cols());
        let vals: Vec<f64> = att.data().iter().map(|v| v.as_f64()).collect();
        for r in 0..nq {
            let sum: f64 = vals[r * nk..(r + 1) * nk].iter().sum();
            attention_row_error = attention_row_error.max((sum - 1.0).abs());
        }
        let path = out.join(format!("decoder_stage{}.csv", k + 1));
        write_matrix(&path, nq, nk, &vals)?;
        files.push(path);
        for j in (0..nk).filter(|&j| fwd.kv_valid[j]) {
            let column: Vec<f64> = (0..nq).map(|r| vals[r * nk + j]).collect();
            let path = out.join(format!("decoder_stage{}_kv{j:02}.pgm", k + 1));
            Image::gray(g, g, heatmap(&column)).write(&path)?;
            files.push(path);
        }
    }
    Ok(AttentionDump {
        grid,
        n_p,
        mask_row_sums,
        attention_row_error,
        files,
    })
}
