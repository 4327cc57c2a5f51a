//! Deterministic renderer for the desk benchmark.
//!
//! Images show one shape over a background. Coarse attributes (shape, hue) are
//! large and easy to see; fine attributes (stripe count, centre dot) are small.
//! Position, size, colour jitter, background and pixel noise vary per image.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Image, LabeledImageDataset, Split};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng, Rng};

pub const MIN_RESOLUTION: u32 = 8;
const SUPERSAMPLE: usize = 3;
const PIXEL_NOISE: f32 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Diamond];

    pub fn word(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Diamond => "diamond",
        }
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of half-size `s`.
    fn contains(self, dx: f32, dy: f32, s: f32) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= s * s,
            Self::Square => dx.abs() <= 0.85 * s && dy.abs() <= 0.85 * s,
            Self::Diamond => dx.abs() + dy.abs() <= 1.15 * s,
            Self::Triangle => dy >= -s && dy <= 0.8 * s && dx.abs() <= 1.05 * s * (dy + s) / (1.8 * s),
        }
    }

    /// Vertical extent `(top, bottom)` relative to the centre.
    fn extent(self, s: f32) -> (f32, f32) {
        match self {
            Self::Circle => (-s, s),
            Self::Square => (-0.85 * s, 0.85 * s),
            Self::Diamond => (-1.15 * s, 1.15 * s),
            Self::Triangle => (-s, 0.8 * s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hue {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

impl Hue {
    pub const ALL: [Hue; 6] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Yellow,
        Self::Purple,
        Self::Orange,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::Purple => "purple",
            Self::Orange => "orange",
        }
    }

    fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [0.85, 0.15, 0.15],
            Self::Green => [0.2, 0.75, 0.25],
            Self::Blue => [0.2, 0.35, 0.9],
            Self::Yellow => [0.9, 0.8, 0.15],
            Self::Purple => [0.6, 0.25, 0.8],
            Self::Orange => [0.95, 0.5, 0.1],
        }
    }
}

pub const STRIPE_WORDS: [&str; 4] = ["nostripe", "onestripe", "twostripe", "threestripe"];
pub const MARK_WORDS: [&str; 2] = ["plain", "dotted"];

/// Background distribution of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Any grey level with a random tint and gradient.
    Varied,
    /// Dark teal backdrop with a lighter lower half.
    Dusk,
}

/// Concrete attributes of one rendered image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: ShapeKind,
    pub hue: Hue,
    pub stripes: u8,
    pub dotted: bool,
}

/// A class: coarse attributes always fixed, fine attributes fixed or drawn
/// per image (`None`). Only fixed attributes appear in the class name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassSpec {
    pub shape: ShapeKind,
    pub hue: Hue,
    pub stripes: Option<u8>,
    pub dotted: Option<bool>,
}

impl ClassSpec {
    pub fn exact(a: Attributes) -> Self {
        Self {
            shape: a.shape,
            hue: a.hue,
            stripes: Some(a.stripes),
            dotted: Some(a.dotted),
        }
    }

    pub fn coarse(shape: ShapeKind, hue: Hue) -> Self {
        Self {
            shape,
            hue,
            stripes: None,
            dotted: None,
        }
    }

    pub fn name(&self) -> String {
        let mut words = Vec::new();
        if let Some(d) = self.dotted {
            words.push(MARK_WORDS[d as usize]);
        }
        if let Some(s) = self.stripes {
            words.push(STRIPE_WORDS[s as usize]);
        }
        words.push(self.hue.word());
        words.push(self.shape.word());
        words.join(" ")
    }

    fn draw<R: rand::Rng>(&self, rng: &mut R) -> Attributes {
        Attributes {
            shape: self.shape,
            hue: self.hue,
            stripes: self.stripes.unwrap_or_else(|| rng.random_range(0..4)),
            dotted: self.dotted.unwrap_or_else(|| rng.random_bool(0.5)),
        }
    }
}

/// Every word the renderer can name, for building vocabularies.
pub fn attribute_words() -> Vec<&'static str> {
    let mut w: Vec<&str> = Vec::new();
    w.extend(MARK_WORDS);
    w.extend(STRIPE_WORDS);
    w.extend(Hue::ALL.iter().map(|h| h.word()));
    w.extend(ShapeKind::ALL.iter().map(|s| s.word()));
    w
}

/// Per-image nuisance draw, kept in the render log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub cx: f32,
    pub cy: f32,
    pub half_size: f32,
    pub color: [f32; 3],
    pub background: [f32; 3],
    pub gradient: f32,
}

fn draw_nuisance(attrs: &Attributes, style: Style, res: f32, rng: &mut Rng) -> Nuisance {
    let cx = res / 2.0 + rng.random_range(-0.12..0.12) * res;
    let cy = res / 2.0 + rng.random_range(-0.12..0.12) * res;
    let half_size = rng.random_range(0.26..0.36) * res;
    let base = attrs.hue.rgb();
    let bright: f32 = rng.random_range(0.85..1.1);
    let mut color = [0.0; 3];
    for (c, b) in color.iter_mut().zip(base) {
        *c = ((b + rng.random_range(-0.07..0.07)) * bright).clamp(0.0, 1.0);
    }
    let (background, gradient) = match style {
        Style::Varied => {
            let g: f32 = rng.random_range(0.05..0.95);
            let mut bg = [0.0; 3];
            for c in bg.iter_mut() {
                *c = (g + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0);
            }
            (bg, rng.random_range(-0.15..0.15))
        }
        Style::Dusk => {
            let mut bg = [0.12, 0.22, 0.28];
            for c in bg.iter_mut() {
                *c += rng.random_range(-0.04..0.04);
            }
            (bg, rng.random_range(0.08..0.16))
        }
    };
    Nuisance {
        cx,
        cy,
        half_size,
        color,
        background,
        gradient,
    }
}

/// Renders `attrs` at `res x res` with a fresh nuisance draw.
pub fn render(attrs: &Attributes, style: Style, res: u32, rng: &mut Rng) -> (Image, Nuisance) {
    let r = res as f32;
    let n = draw_nuisance(attrs, style, r, rng);
    let s = n.half_size;
    let (top, bottom) = attrs.shape.extent(s);
    let thickness = (0.1 * 2.0 * s).max(0.9);
    let stripe_centres: Vec<f32> = (0..attrs.stripes)
        .map(|j| top + (j as f32 + 1.0) / (attrs.stripes as f32 + 1.0) * (bottom - top))
        .collect();
    let dot_r = 0.3 * s;
    let dark = [n.color[0] * 0.2, n.color[1] * 0.2, n.color[2] * 0.2];
    let plane = (res * res) as usize;
    let mut chw = vec![0.0f32; plane * 3];
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in 0..res as usize {
        for px in 0..res as usize {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                    let (dx, dy) = (x - n.cx, y - n.cy);
                    let rgb = if attrs.shape.contains(dx, dy, s) {
                        if attrs.dotted && dx * dx + dy * dy <= dot_r * dot_r {
                            [0.95, 0.95, 0.95]
                        } else if stripe_centres.iter().any(|c| (dy - c).abs() <= thickness / 2.0) {
                            dark
                        } else {
                            n.color
                        }
                    } else {
                        let t = y / r - 0.5;
                        [
                            n.background[0] + n.gradient * t,
                            n.background[1] + n.gradient * t,
                            n.background[2] + n.gradient * t,
                        ]
                    };
                    for c in 0..3 {
                        acc[c] += rgb[c];
                    }
                }
            }
            for c in 0..3 {
                let noise: f32 = StandardNormal.sample(rng);
                chw[c * plane + py * res as usize + px] = (acc[c] * inv + PIXEL_NOISE * noise).clamp(0.0, 1.0);
            }
        }
    }
    (Image::from_chw(res, res, &chw), n)
}

/// How strongly classes of a benchmark differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineGrain {
    /// Classes differ in shape and hue; fine attributes are random.
    Low,
    /// One shape; classes differ in fine attributes and one of four hues.
    Medium,
    /// One shape; classes differ in fine attributes and share one of two hues.
    High,
}

/// Class list of a benchmark with `n` classes.
pub fn benchmark_classes(n: usize, fine_grain: FineGrain) -> Result<Vec<ClassSpec>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {n}")));
    }
    let fine_combos = 8;
    match fine_grain {
        FineGrain::Low => {
            let combos: Vec<ClassSpec> = Hue::ALL
                .iter()
                .flat_map(|&h| ShapeKind::ALL.iter().map(move |&s| ClassSpec::coarse(s, h)))
                .collect();
            if n > combos.len() {
                return Err(Error::invalid(format!("at most {} coarse classes", combos.len())));
            }
            // interleave shapes so the first classes differ in shape first
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let s = ShapeKind::ALL[i % 4];
                let h = Hue::ALL[(i / 4 + i) % 6];
                let spec = ClassSpec::coarse(s, h);
                if out.contains(&spec) {
                    return Err(Error::invalid("duplicate coarse class"));
                }
                out.push(spec);
            }
            Ok(out)
        }
        FineGrain::Medium | FineGrain::High => {
            if n > fine_combos {
                return Err(Error::invalid(format!(
                    "fine-grained benchmarks support at most {fine_combos} classes, got {n}"
                )));
            }
            let hues: &[Hue] = if fine_grain == FineGrain::High {
                &[Hue::Red, Hue::Blue]
            } else {
                &[Hue::Red, Hue::Blue, Hue::Green, Hue::Yellow]
            };
            Ok((0..n)
                .map(|i| ClassSpec {
                    shape: ShapeKind::Circle,
                    hue: hues[i % hues.len()],
                    stripes: Some((i % 4) as u8),
                    dotted: Some((i / 4) % 2 == 1),
                })
                .collect())
        }
    }
}

/// One entry of the render log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderRecord {
    pub split: Split,
    pub index: usize,
    pub attributes: Attributes,
    pub nuisance: Nuisance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProceduralSpec {
    pub classes: usize,
    pub per_class: usize,
    pub resolution: u32,
    pub seed: u64,
    pub fine_grain: FineGrain,
    pub style: Style,
}

/// Train/val/test splits plus the attribute log.
#[derive(Debug, Clone)]
pub struct ProceduralBenchmark {
    pub train: LabeledImageDataset,
    pub val: LabeledImageDataset,
    pub test: LabeledImageDataset,
    pub classes: Vec<ClassSpec>,
    pub log: Vec<RenderRecord>,
}

/// Fractions of each class assigned to train and val; the rest is test.
const TRAIN_FRACTION: f64 = 0.5;
const VAL_FRACTION: f64 = 0.1;

pub fn make_procedural(spec: &ProceduralSpec) -> Result<ProceduralBenchmark> {
    let classes = benchmark_classes(spec.classes, spec.fine_grain)?;
    render_benchmark(&classes, spec.per_class, spec.resolution, spec.style, spec.seed)
}

/// Renders an arbitrary class list into splits.
pub fn render_benchmark(
    classes: &[ClassSpec],
    per_class: usize,
    resolution: u32,
    style: Style,
    seed: u64,
) -> Result<ProceduralBenchmark> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::invalid(format!(
            "resolution {resolution} below renderer minimum {MIN_RESOLUTION}"
        )));
    }
    if classes.is_empty() {
        return Err(Error::invalid("no classes to render"));
    }
    let names: Vec<String> = classes.iter().map(ClassSpec::name).collect();
    let n_train = ((per_class as f64) * TRAIN_FRACTION).round() as usize;
    let n_val = ((per_class as f64) * VAL_FRACTION).round() as usize;
    let mut splits = [
        LabeledImageDataset::new(Split::Train, names.clone()),
        LabeledImageDataset::new(Split::Val, names.clone()),
        LabeledImageDataset::new(Split::Test, names.clone()),
    ];
    let mut log = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut r = rng(derive_seed(seed, "procedural", label as u64));
        for i in 0..per_class {
            let attrs = class.draw(&mut r);
            let (image, nuisance) = render(&attrs, style, resolution, &mut r);
            let which = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            let ds = &mut splits[which];
            log.push(RenderRecord {
                split: ds.split,
                index: ds.len(),
                attributes: attrs,
                nuisance,
            });
            ds.push(image, label);
        }
    }
    let [train, val, test] = splits;
    Ok(ProceduralBenchmark {
        train,
        val,
        test,
        classes: classes.to_vec(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64, fine_grain: FineGrain) -> ProceduralSpec {
        ProceduralSpec {
            classes: 8,
            per_class: 20,
            resolution: 16,
            seed,
            fine_grain,
            style: Style::Varied,
        }
    }

    #[test]
    fn deterministic_hashes() {
        let a = make_procedural(&spec(1, FineGrain::High)).unwrap();
        let b = make_procedural(&spec(1, FineGrain::High)).unwrap();
        assert_eq!(a.train.content_hash(), b.train.content_hash());
        assert_eq!(a.test.content_hash(), b.test.content_hash());
        let c = make_procedural(&spec(2, FineGrain::High)).unwrap();
        assert_ne!(a.train.content_hash(), c.train.content_hash());
    }

    #[test]
    fn high_fine_grain_pairs_share_coarse_and_differ_fine() {
        let b = make_procedural(&spec(3, FineGrain::High)).unwrap();
        // check from the per-image log, grouped by class
        let mut per_class: Vec<Option<Attributes>> = vec![None; 8];
        for rec in &b.log {
            let ds = match rec.split {
                Split::Train => &b.train,
                Split::Val => &b.val,
                Split::Test => &b.test,
            };
            let label = ds.items()[rec.index].label;
            match per_class[label] {
                None => per_class[label] = Some(rec.attributes),
                Some(a) => assert_eq!(a, rec.attributes, "fine attributes fixed per class"),
            }
        }
        let attrs: Vec<Attributes> = per_class.into_iter().map(Option::unwrap).collect();
        for i in 0..attrs.len() {
            for j in i + 1..attrs.len() {
                let (a, b) = (attrs[i], attrs[j]);
                let shared_coarse = (a.shape == b.shape) as u8 + (a.hue == b.hue) as u8;
                let differ_fine = (a.stripes != b.stripes) as u8 + (a.dotted != b.dotted) as u8;
                assert!(shared_coarse >= 1 && differ_fine >= 1, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn pixels_in_unit_range_and_splits_disjoint() {
        let b = make_procedural(&spec(4, FineGrain::Low)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for ds in [&b.train, &b.val, &b.test] {
            for item in ds.items() {
                assert!(item.image.to_chw().iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(seen.insert(item.image.content_hash()), "image shared between splits");
            }
        }
        assert_eq!(b.train.len() + b.val.len() + b.test.len(), 8 * 20);
    }

    #[test]
    fn rejects_tiny_resolution_and_single_class() {
        let mut s = spec(0, FineGrain::High);
        s.resolution = 4;
        assert!(matches!(make_procedural(&s), Err(Error::InvalidArgument(_))));
        s.resolution = 16;
        s.classes = 1;
        assert!(make_procedural(&s).is_err());
    }
}
