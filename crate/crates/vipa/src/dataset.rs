//! Sample directories, dataset manifests and vocabulary files.
//!
//! A sample directory holds `image.ppm` (P6), `mask.pgm` (P5, 0/255) and
//! `expression.txt` (one UTF-8 line). The manifest is a tab-separated file
//! with one `path split expression` row per sample, paths relative to the
//! manifest's directory.

use std::path::{Path, PathBuf};

use vipa_core::encoders::{SceneImage, Vocabulary};
use vipa_core::model::Sample;
use vipa_core::scene::{generate_split, SceneGrammar, Split, SyntheticScene};

use crate::error::{Error, IoContext, Result};
use crate::pnm::{Image, Kind};

pub const IMAGE_FILE: &str = "image.ppm";
pub const MASK_FILE: &str = "mask.pgm";
pub const EXPRESSION_FILE: &str = "expression.txt";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";

/// What a sample directory stores.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub image: SceneImage,
    pub mask: Vec<bool>,
    pub expression: String,
}

impl StoredSample {
    pub fn from_scene(scene: &SyntheticScene) -> Self {
        Self {
            image: scene.image.clone(),
            mask: scene.gt_mask.clone(),
            expression: scene.expression_text(),
        }
    }

    pub fn to_sample(&self, vocab: &Vocabulary) -> Sample {
        Sample {
            image: self.image.clone(),
            mask: self.mask.clone(),
            words: vocab.tokenize(&self.expression),
        }
    }
}

pub fn image_to_pnm(image: &SceneImage) -> Image {
    let data = image.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Image::rgb(image.width, image.height, data)
}

pub fn mask_to_pnm(mask: &[bool], width: usize, height: usize) -> Image {
    Image::gray(width, height, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
}

pub fn save_sample(dir: &Path, sample: &StoredSample) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    let (w, h) = (sample.image.width, sample.image.height);
    image_to_pnm(&sample.image).write(&dir.join(IMAGE_FILE))?;
    mask_to_pnm(&sample.mask, w, h).write(&dir.join(MASK_FILE))?;
    let path = dir.join(EXPRESSION_FILE);
    std::fs::write(&path, format!("{}\n", sample.expression)).at(&path)
}

pub fn load_sample(dir: &Path) -> Result<StoredSample> {
    let img = Image::read(&dir.join(IMAGE_FILE), Kind::Rgb)?;
    let mask_path = dir.join(MASK_FILE);
    let mask = Image::read(&mask_path, Kind::Gray)?;
    if (mask.width, mask.height) != (img.width, img.height) {
        return Err(Error::Parse {
            path: mask_path,
            offset: 0,
            message: format!("mask is {}×{}, image is {}×{}", mask.width, mask.height, img.width, img.height),
        });
    }
    let pixels = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    let image = SceneImage::new(img.height, img.width, pixels)?;
    let path = dir.join(EXPRESSION_FILE);
    let text = std::fs::read_to_string(&path).at(&path)?;
    Ok(StoredSample {
        image,
        mask: mask.data.iter().map(|&b| b >= 128).collect(),
        expression: text.lines().next().unwrap_or("").trim().to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
    pub expression: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)?;
    for e in entries {
        w.write_record([e.path.to_string_lossy().as_ref(), e.split.as_str(), e.expression.as_str()])?;
    }
    w.flush().at(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte() as usize);
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        };
        if rec.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", rec.len())));
        }
        let split = Split::parse(&rec[1]).map_err(|e| bad(e.to_string()))?;
        out.push(ManifestEntry {
            path: PathBuf::from(&rec[0]),
            split,
            expression: rec[2].to_string(),
        });
    }
    Ok(out)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    std::fs::write(path, text).at(path)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).at(path)?;
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    Ok(Vocabulary::from_lines(&lines)?)
}

/// Counts per split for [`generate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub held_out: usize,
}

/// Renders every split under `out` and writes the manifest and vocabulary.
pub fn generate_dataset(out: &Path, grammar: &SceneGrammar, seed: u64, size: usize, counts: SplitCounts) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(out).at(out)?;
    let mut entries = Vec::new();
    for (split, n) in [(Split::Train, counts.train), (Split::Val, counts.val), (Split::HeldOut, counts.held_out)] {
        for (i, scene) in generate_split(grammar, seed, split, n, size)?.iter().enumerate() {
            let rel = PathBuf::from(split.as_str()).join(format!("{i:05}"));
            let stored = StoredSample::from_scene(scene);
            save_sample(&out.join(&rel), &stored)?;
            entries.push(ManifestEntry {
                path: rel,
                split,
                expression: stored.expression,
            });
        }
    }
    write_manifest(&out.join(MANIFEST_FILE), &entries)?;
    write_vocab(&out.join(VOCAB_FILE), &grammar.vocabulary())?;
    log::info!("wrote {} samples to {}", entries.len(), out.display());
    Ok(entries)
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub vocab: Vocabulary,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = read_manifest(&root.join(MANIFEST_FILE))?;
        let vocab = read_vocab(&root.join(VOCAB_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            vocab,
            entries,
        })
    }

    pub fn load(&self, split: Split) -> Result<Vec<StoredSample>> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| load_sample(&self.root.join(&e.path)))
            .collect()
    }

    pub fn samples(&self, split: Split) -> Result<Vec<Sample>> {
        Ok(self.load(split)?.iter().map(|s| s.to_sample(&self.vocab)).collect())
    }
}
