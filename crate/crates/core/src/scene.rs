//! Synthetic referring-segmentation scenes: a few flat-colored shapes on a
//! noisy background and a short expression that picks out exactly one of
//! them.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::encoders::{SceneImage, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Sample;
use crate::rng::{derive_seed, rng_from_seed, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Size {
    Small,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Left,
    Right,
    Top,
    Bottom,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.90, 0.15, 0.15],
            Color::Green => [0.15, 0.80, 0.20],
            Color::Blue => [0.20, 0.30, 0.95],
            Color::Yellow => [0.95, 0.90, 0.15],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::Left, Relation::Right, Relation::Top, Relation::Bottom];

    pub fn word(self) -> &'static str {
        match self {
            Relation::Left => "left",
            Relation::Right => "right",
            Relation::Top => "top",
            Relation::Bottom => "bottom",
        }
    }

    /// Half-plane test on the object center.
    pub fn holds(self, obj: &SceneObject, height: usize, width: usize) -> bool {
        let (mx, my) = (width as f64 / 2.0, height as f64 / 2.0);
        match self {
            Relation::Left => obj.cx < mx,
            Relation::Right => obj.cx > mx,
            Relation::Top => obj.cy < my,
            Relation::Bottom => obj.cy > my,
        }
    }
}

/// Expression templates. Attributes not named by a template are unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    /// "the <color> <shape>"
    ColorShape,
    /// "the <size> <color> <shape>"
    SizeColorShape,
    /// "<color> <shape> on the <relation>"
    ColorShapeRelation,
    /// "the <size> <shape>"
    SizeShape,
    /// "the <shape> on the <relation>"
    ShapeRelation,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::ColorShape,
        Template::SizeColorShape,
        Template::ColorShapeRelation,
        Template::SizeShape,
        Template::ShapeRelation,
    ];
}

/// Parsed referring expression: the attribute constraints it imposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Query {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<Size>,
    pub relation: Option<Relation>,
}

impl Query {
    pub fn from_template(t: Template, obj: &SceneObject, relation: Option<Relation>) -> Self {
        let mut q = Query {
            shape: Some(obj.shape),
            ..Default::default()
        };
        match t {
            Template::ColorShape => q.color = Some(obj.color),
            Template::SizeColorShape => {
                q.size = Some(obj.size);
                q.color = Some(obj.color);
            }
            Template::ColorShapeRelation => {
                q.color = Some(obj.color);
                q.relation = relation;
            }
            Template::SizeShape => q.size = Some(obj.size),
            Template::ShapeRelation => q.relation = relation,
        }
        q
    }

    /// Recovers constraints from an expression's words.
    pub fn parse<S: AsRef<str>>(words: &[S]) -> Self {
        let mut q = Query::default();
        for w in words {
            let w = w.as_ref();
            if let Some(s) = Shape::ALL.iter().find(|s| s.word() == w) {
                q.shape = Some(*s);
            }
            if let Some(c) = Color::ALL.iter().find(|c| c.word() == w) {
                q.color = Some(*c);
            }
            if let Some(z) = Size::ALL.iter().find(|z| z.word() == w) {
                q.size = Some(*z);
            }
            if let Some(r) = Relation::ALL.iter().find(|r| r.word() == w) {
                q.relation = Some(*r);
            }
        }
        q
    }

    pub fn matches(&self, obj: &SceneObject, height: usize, width: usize) -> bool {
        self.shape.map_or(true, |s| s == obj.shape)
            && self.color.map_or(true, |c| c == obj.color)
            && self.size.map_or(true, |z| z == obj.size)
            && self.relation.map_or(true, |r| r.holds(obj, height, width))
    }

    pub fn words(&self) -> Vec<String> {
        let mut w: Vec<&str> = Vec::new();
        let has_rel = self.relation.is_some();
        if !(has_rel && self.color.is_some()) {
            w.push("the");
        }
        if let Some(z) = self.size {
            w.push(z.word());
        }
        if let Some(c) = self.color {
            w.push(c.word());
        }
        if let Some(s) = self.shape {
            w.push(s.word());
        }
        if let Some(r) = self.relation {
            w.extend(["on", "the", r.word()]);
        }
        w.into_iter().map(ToString::to_string).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl SceneObject {
    /// Pixel-center coverage test; no anti-aliasing.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
        let r = self.radius;
        match self.shape {
            Shape::Circle => px * px + py * py <= r * r,
            Shape::Square => {
                let h = r * 0.85;
                px.abs() <= h && py.abs() <= h
            }
            Shape::Triangle => {
                // apex up, base at +0.8r, half-width r at the base
                let top = -r;
                let base = 0.8 * r;
                if py < top || py > base {
                    return false;
                }
                let half = r * (py - top) / (base - top);
                px.abs() <= half
            }
        }
    }

    pub fn triple(&self) -> (Size, Color, Shape) {
        (self.size, self.color, self.shape)
    }
}

/// Vocabulary and held-out attribute combinations of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrammar {
    pub held_out: Vec<(Size, Color, Shape)>,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneGrammar {
    fn default() -> Self {
        Self {
            held_out: vec![
                (Size::Large, Color::Yellow, Shape::Triangle),
                (Size::Small, Color::Blue, Shape::Circle),
                (Size::Large, Color::Red, Shape::Square),
            ],
            min_objects: 2,
            max_objects: 4,
        }
    }
}

impl SceneGrammar {
    pub fn words(&self) -> Vec<&'static str> {
        let mut w = vec!["the", "a", "on"];
        w.extend(Size::ALL.iter().map(|s| s.word()));
        w.extend(Color::ALL.iter().map(|s| s.word()));
        w.extend(Shape::ALL.iter().map(|s| s.word()));
        w.extend(Relation::ALL.iter().map(|s| s.word()));
        w
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(&self.words())
    }

    pub fn is_held_out(&self, obj: &SceneObject) -> bool {
        self.held_out.contains(&obj.triple())
    }
}

/// Which attribute combinations a generated scene may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitPolicy {
    /// No restriction.
    Any,
    /// No object is a held-out combination.
    Seen,
    /// The referent is a held-out combination.
    HeldOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: SceneImage,
    pub gt_mask: Vec<bool>,
    pub expression: Vec<String>,
    pub distractors: usize,
    pub objects: Vec<SceneObject>,
    pub referent: usize,
}

impl SyntheticScene {
    pub fn expression_text(&self) -> String {
        self.expression.join(" ")
    }

    pub fn to_sample(&self, vocab: &Vocabulary) -> Sample {
        Sample {
            image: self.image.clone(),
            mask: self.gt_mask.clone(),
            words: vocab.tokenize(&self.expression_text()),
        }
    }

    /// Objects satisfying the expression, by exhaustive check.
    pub fn matching_objects(&self) -> Vec<usize> {
        let q = Query::parse(&self.expression);
        (0..self.objects.len())
            .filter(|&i| q.matches(&self.objects[i], self.image.height, self.image.width))
            .collect()
    }
}

const PLACEMENT_RETRIES: usize = 100;
const REGENERATIONS: u64 = 64;

/// Deterministic scene for `seed`.
pub fn generate_scene(grammar: &SceneGrammar, seed: u64, height: usize, width: usize, policy: SplitPolicy) -> Result<SyntheticScene> {
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::invalid(alloc::format!("scene size {height}x{width} must be a positive multiple of 16")));
    }
    if grammar.min_objects < 1 || grammar.max_objects < grammar.min_objects {
        return Err(Error::invalid("object count range is empty"));
    }
    for attempt in 0..REGENERATIONS {
        let mut rng = rng_from_seed(derive_seed(seed, attempt));
        if let Some(scene) = try_generate(grammar, &mut rng, height, width, policy) {
            return Ok(scene);
        }
    }
    Err(Error::Generation(alloc::format!("seed {seed}: no valid scene after {REGENERATIONS} attempts")))
}

fn sample_object(grammar: &SceneGrammar, rng: &mut SeededRng, policy: SplitPolicy, referent: bool) -> (Shape, Color, Size) {
    loop {
        let shape = Shape::ALL[rng.gen_range(0..3)];
        let color = Color::ALL[rng.gen_range(0..4)];
        let size = Size::ALL[rng.gen_range(0..2)];
        let held = grammar.held_out.contains(&(size, color, shape));
        let ok = match policy {
            SplitPolicy::Any => true,
            SplitPolicy::Seen => !held,
            SplitPolicy::HeldOut => !referent || held,
        };
        if ok {
            return (shape, color, size);
        }
    }
}

fn radius_for(size: Size, side: f64, rng: &mut SeededRng) -> f64 {
    match size {
        Size::Small => side * rng.gen_range(0.09..0.12),
        Size::Large => side * rng.gen_range(0.17..0.21),
    }
}

fn try_generate(grammar: &SceneGrammar, rng: &mut SeededRng, height: usize, width: usize, policy: SplitPolicy) -> Option<SyntheticScene> {
    let side = height.min(width) as f64;
    let count = rng.gen_range(grammar.min_objects..=grammar.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for k in 0..count {
        let (mut shape, mut color, mut size) = sample_object(grammar, rng, policy, k == 0);
        if k > 0 && rng.gen_bool(0.6) {
            // distractor sharing attributes with the referent
            let r = objects[0];
            match rng.gen_range(0..3) {
                0 => shape = r.shape,
                1 => color = r.color,
                _ => {
                    shape = r.shape;
                    color = r.color;
                }
            }
            if policy == SplitPolicy::Seen && grammar.held_out.contains(&(size, color, shape)) {
                size = if size == Size::Small { Size::Large } else { Size::Small };
                if grammar.held_out.contains(&(size, color, shape)) {
                    return None;
                }
            }
        }
        let radius = radius_for(size, side, rng);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let cx = rng.gen_range(radius + 1.0..width as f64 - radius - 1.0);
            let cy = rng.gen_range(radius + 1.0..height as f64 - radius - 1.0);
            let clear = objects.iter().all(|o| {
                let (dx, dy) = (o.cx - cx, o.cy - cy);
                libm::sqrt(dx * dx + dy * dy) > o.radius + radius + 2.0
            });
            let off_midline = (cx - width as f64 / 2.0).abs() > 1.0 && (cy - height as f64 / 2.0).abs() > 1.0;
            if clear && off_midline {
                placed = Some((cx, cy));
                break;
            }
        }
        let (cx, cy) = placed?;
        objects.push(SceneObject {
            shape,
            color,
            size,
            cx,
            cy,
            radius,
        });
    }
    let referent = 0;
    let target = objects[referent];
    let mut unique: Vec<Query> = Vec::new();
    for t in Template::ALL {
        let relations: Vec<Option<Relation>> = match t {
            Template::ColorShapeRelation | Template::ShapeRelation => Relation::ALL.iter().map(|&r| Some(r)).collect(),
            _ => vec![None],
        };
        for rel in relations {
            if let Some(r) = rel {
                if !r.holds(&target, height, width) {
                    continue;
                }
            }
            let q = Query::from_template(t, &target, rel);
            let hits = objects.iter().filter(|o| q.matches(o, height, width)).count();
            if hits == 1 {
                unique.push(q);
            }
        }
    }
    if unique.is_empty() {
        return None;
    }
    let query = unique[rng.gen_range(0..unique.len())];
    let image = render(&objects, rng, height, width);
    let gt_mask: Vec<bool> = (0..height * width).map(|i| target.covers(i % width, i / width)).collect();
    let on = gt_mask.iter().filter(|&&m| m).count();
    if on == 0 || 2 * on >= height * width {
        return None;
    }
    Some(SyntheticScene {
        image,
        gt_mask,
        expression: query.words(),
        distractors: objects.len() - 1,
        objects,
        referent,
    })
}

fn render(objects: &[SceneObject], rng: &mut SeededRng, height: usize, width: usize) -> SceneImage {
    let base: f64 = rng.gen_range(0.05..0.30);
    let mut pixels = vec![0.0; height * width * 3];
    let tints: Vec<[f64; 3]> = objects
        .iter()
        .map(|o| {
            let c = o.color.rgb();
            let j: f64 = rng.gen_range(-0.05..0.05);
            [c[0] + j, c[1] + j, c[2] + j]
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let noise: f64 = rng.gen_range(-0.04..0.04);
            let mut rgb = [base + noise; 3];
            if let Some(k) = objects.iter().position(|o| o.covers(x, y)) {
                rgb = tints[k];
            }
            for c in 0..3 {
                pixels[(y * width + x) * 3 + c] = quantize(rgb[c]);
            }
        }
    }
    SceneImage { height, width, pixels }
}

/// Snaps to the nearest of the 256 levels an 8-bit pixmap can hold.
pub fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

/// Dataset partition, by seed range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    /// Validation scenes whose referent is a held-out combination.
    HeldOut,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::HeldOut => "heldout",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "heldout" => Ok(Split::HeldOut),
            other => Err(Error::invalid(alloc::format!("unknown split {other:?}"))),
        }
    }

    /// Disjoint seed ranges per split.
    pub fn seed(self, root: u64, index: u64) -> u64 {
        let offset = match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::HeldOut => 2 << 40,
        };
        root.wrapping_add(offset).wrapping_add(index)
    }

    pub fn policy(self) -> SplitPolicy {
        match self {
            Split::Train | Split::Val => SplitPolicy::Seen,
            Split::HeldOut => SplitPolicy::HeldOut,
        }
    }
}

/// `n` scenes of one split.
pub fn generate_split(grammar: &SceneGrammar, root: u64, split: Split, n: usize, size: usize) -> Result<Vec<SyntheticScene>> {
    (0..n as u64)
        .map(|i| generate_scene(grammar, split.seed(root, i), size, size, split.policy()))
        .collect()
}
