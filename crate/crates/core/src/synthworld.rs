//! Procedural corpus of colored geometric shapes.
//!
//! Rendering is a pure function of the scene spec: identical specs produce
//! bit-identical images. Shapes are drawn with 2x supersampling so partially
//! covered pixels blend predictably, which keeps pixel-count oracles stable.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::validation(format!("unknown shape '{name}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Color::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::validation(format!("unknown color '{name}'")))
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// One (shape, color) pair out of the 16-concept vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Concept {
    pub shape: Shape,
    pub color: Color,
}

impl Concept {
    pub fn new(shape: Shape, color: Color) -> Self {
        Concept { shape, color }
    }

    /// All 16 concepts in a fixed order (shape-major).
    pub fn vocabulary() -> Vec<Concept> {
        let mut v = Vec::with_capacity(16);
        for shape in Shape::ALL {
            for color in Color::ALL {
                v.push(Concept { shape, color });
            }
        }
        v
    }

    /// Index of this concept in `vocabulary()` order.
    pub fn index(self) -> usize {
        let s = Shape::ALL.iter().position(|&x| x == self.shape).unwrap();
        let c = Color::ALL.iter().position(|&x| x == self.color).unwrap();
        s * Color::ALL.len() + c
    }

    pub fn from_index(idx: usize) -> Result<Self> {
        if idx >= 16 {
            return Err(Error::validation(format!("concept index {idx} out of range")));
        }
        Ok(Concept {
            shape: Shape::ALL[idx / 4],
            color: Color::ALL[idx % 4],
        })
    }

    /// Stable identifier like "red_circle".
    pub fn slug(self) -> String {
        format!("{}_{}", self.color.name(), self.shape.name())
    }

    pub fn from_slug(slug: &str) -> Result<Self> {
        let (color, shape) = slug
            .split_once('_')
            .ok_or_else(|| Error::validation(format!("bad concept slug '{slug}'")))?;
        Ok(Concept {
            shape: Shape::from_name(shape)?,
            color: Color::from_name(color)?,
        })
    }
}

/// Fixed caption template; the sole prompt grammar of the corpus.
pub fn make_caption(concept: Concept) -> String {
    format!(
        "an image of a {} {}",
        concept.color.name(),
        concept.shape.name()
    )
}

/// Scene description; rendering depends on nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    /// Shape center in normalized [0,1]^2 coordinates.
    pub position: (f64, f64),
    /// Shape extent as a fraction of the image side, in [0.2, 0.5].
    pub scale: f64,
    /// Background gray level in [0,1].
    pub background: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| -> Result<()> {
            if !(lo..=hi).contains(&v) || !v.is_finite() {
                return Err(Error::validation(format!(
                    "field {name}={v} outside [{lo}, {hi}]"
                )));
            }
            Ok(())
        };
        check("position.x", self.position.0, 0.0, 1.0)?;
        check("position.y", self.position.1, 0.0, 1.0)?;
        check("scale", self.scale, 0.2, 0.5)?;
        check("background", self.background, 0.0, 1.0)?;
        Ok(())
    }

    pub fn concept(&self) -> Concept {
        Concept::new(self.shape, self.color)
    }
}

/// Pixel-space sample: [3, side, side] planes with entries in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub planes: Tensor,
}

impl Image {
    pub fn side(&self) -> usize {
        self.planes.shape()[1]
    }

    pub fn from_tensor(planes: Tensor) -> Result<Self> {
        let shape = planes.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::validation(format!(
                "image tensor must be [3, side, side], got {shape:?}"
            )));
        }
        Ok(Image { planes })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let side = self.side();
        let d = self.planes.data();
        [
            d[y * side + x],
            d[side * side + y * side + x],
            d[2 * side * side + y * side + x],
        ]
    }
}

/// Signed membership test in normalized unit coordinates relative to the
/// shape center; `half` is half the shape extent.
fn covered(shape: Shape, dx: f64, dy: f64, half: f64) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= half * half,
        Shape::Square => dx.abs() <= half && dy.abs() <= half,
        Shape::Triangle => {
            // Upward-pointing isoceles triangle inscribed in the box.
            if dy < -half || dy > half {
                return false;
            }
            // Width grows linearly from apex (top) to base (bottom).
            let t = (dy + half) / (2.0 * half);
            dx.abs() <= t * half
        }
        Shape::Cross => {
            let arm = half / 3.0;
            (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
        }
    }
}

/// Render a spec to a [3, side, side] image with 2x supersampling.
pub fn render_scene(spec: &SceneSpec, side: usize) -> Result<Image> {
    if side < 16 {
        return Err(Error::validation(format!("side {side} below minimum 16")));
    }
    spec.validate()?;

    let rgb = spec.color.rgb();
    let bg = spec.background;
    let half = spec.scale / 2.0;
    let (cx, cy) = spec.position;
    let n = side;
    let mut planes = Tensor::zeros(&[3, n, n]);
    let inv = 1.0 / n as f64;

    // 2x2 subsample offsets inside each pixel.
    const SUB: [f64; 2] = [0.25, 0.75];
    for y in 0..n {
        for x in 0..n {
            let mut coverage = 0.0;
            for sy in SUB {
                for sx in SUB {
                    let px = (x as f64 + sx) * inv - cx;
                    let py = (y as f64 + sy) * inv - cy;
                    if covered(spec.shape, px, py, half) {
                        coverage += 0.25;
                    }
                }
            }
            for (c, &channel_value) in rgb.iter().enumerate() {
                let v = coverage * channel_value + (1.0 - coverage) * bg;
                planes.data_mut()[c * n * n + y * n + x] = v;
            }
        }
    }
    Ok(Image { planes })
}

/// One labeled training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedImage {
    pub image: Image,
    pub caption: String,
    pub concept: Concept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Pretrain,
    Forget,
    Retain,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Eval => "eval",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pretrain" => Ok(Split::Pretrain),
            "forget" => Ok(Split::Forget),
            "retain" => Ok(Split::Retain),
            "eval" => Ok(Split::Eval),
            other => Err(Error::validation(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub items: Vec<CaptionedImage>,
    pub split: Split,
    pub seed: u64,
}

/// Draw a scene for `concept` from the per-item stream. Position keeps the
/// shape fully inside the frame; background stays mid-gray so every color
/// reads against it.
fn sample_scene(concept: Concept, item_seed: u64) -> SceneSpec {
    let mut rng = Rng::new(item_seed);
    let scale = rng.uniform_in(0.25, 0.5);
    let margin = scale / 2.0 + 0.05;
    let x = rng.uniform_in(margin, 1.0 - margin);
    let y = rng.uniform_in(margin, 1.0 - margin);
    let background = rng.uniform_in(0.25, 0.75);
    SceneSpec {
        shape: concept.shape,
        color: concept.color,
        position: (x, y),
        scale,
        background,
        seed: item_seed,
    }
}

/// Build a deterministic corpus. Per-item seeds are `seed ^ index`, so
/// parallel generation would match serial generation element-for-element.
pub fn build_corpus(
    split: Split,
    concept: Option<Concept>,
    n: usize,
    seed: u64,
    side: usize,
) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::validation("corpus size n must be positive"));
    }
    if split == Split::Forget && concept.is_none() {
        return Err(Error::validation("forget split requires a concept"));
    }

    let vocabulary = Concept::vocabulary();
    let mut items = Vec::with_capacity(n);
    for index in 0..n {
        let item_seed = seed ^ index as u64;
        let item_concept = match split {
            Split::Forget => concept.unwrap(),
            Split::Retain => {
                // Round-robin over everything except the excluded concept.
                let pool: Vec<Concept> = vocabulary
                    .iter()
                    .copied()
                    .filter(|c| Some(*c) != concept)
                    .collect();
                pool[index % pool.len()]
            }
            Split::Pretrain | Split::Eval => match concept {
                Some(c) => c,
                None => vocabulary[index % vocabulary.len()],
            },
        };
        let spec = sample_scene(item_concept, item_seed);
        let image = render_scene(&spec, side)?;
        items.push(CaptionedImage {
            image,
            caption: make_caption(item_concept),
            concept: item_concept,
        });
    }
    Ok(Corpus { items, split, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn red_circle_spec() -> SceneSpec {
        SceneSpec {
            shape: Shape::Circle,
            color: Color::Red,
            position: (0.5, 0.5),
            scale: 0.4,
            background: 0.5,
            seed: 0,
        }
    }

    #[test]
    fn caption_template() {
        assert_eq!(
            make_caption(Concept::new(Shape::Circle, Color::Red)),
            "an image of a red circle"
        );
        assert_eq!(
            make_caption(Concept::new(Shape::Cross, Color::Yellow)),
            "an image of a yellow cross"
        );
    }

    #[test]
    fn caption_injective_over_vocabulary() {
        let captions: Vec<String> = Concept::vocabulary().into_iter().map(make_caption).collect();
        for (i, a) in captions.iter().enumerate() {
            for b in &captions[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn degenerate_scale_rejected() {
        let mut spec = red_circle_spec();
        spec.scale = 0.0;
        let err = render_scene(&spec, 32).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("scale")));
    }

    #[test]
    fn tiny_side_rejected() {
        let err = render_scene(&red_circle_spec(), 8).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn red_circle_area_fraction() {
        // Pixel-count oracle: a circle of diameter 0.4 covers pi * 0.2^2 of
        // the unit square. Count pixels at least half covered by red.
        let image = render_scene(&red_circle_spec(), 32).unwrap();
        let side = image.side();
        let mut dominant = 0usize;
        for y in 0..side {
            for x in 0..side {
                let [r, g, b] = image.pixel(y, x);
                if r - g.max(b) > 0.2 {
                    dominant += 1;
                }
            }
        }
        let fraction = dominant as f64 / (side * side) as f64;
        let expected = core::f64::consts::PI * 0.2 * 0.2;
        assert!(
            (fraction - expected).abs() <= 0.2 * expected,
            "fraction {fraction} vs expected {expected}"
        );
    }

    #[test]
    fn rendering_is_pure() {
        let a = render_scene(&red_circle_spec(), 32).unwrap();
        let b = render_scene(&red_circle_spec(), 32).unwrap();
        assert_eq!(a.planes.data(), b.planes.data());
    }

    #[test]
    fn pixels_in_unit_range() {
        for shape in Shape::ALL {
            let spec = SceneSpec {
                shape,
                ..red_circle_spec()
            };
            let image = render_scene(&spec, 32).unwrap();
            assert!(image.planes.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn forget_corpus_fixes_concept_and_varies_images() {
        let concept = Concept::new(Shape::Circle, Color::Red);
        let corpus = build_corpus(Split::Forget, Some(concept), 5, 7, 32).unwrap();
        assert_eq!(corpus.items.len(), 5);
        for item in &corpus.items {
            assert_eq!(item.concept, concept);
        }
        // Pairwise distinct pixel data.
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(
                    corpus.items[i].image.planes.data(),
                    corpus.items[j].image.planes.data(),
                    "items {i} and {j} identical"
                );
            }
        }
    }

    #[test]
    fn pretrain_corpus_covers_all_concepts() {
        let corpus = build_corpus(Split::Pretrain, None, 1600, 1, 32).unwrap();
        let mut histogram = [0usize; 16];
        for item in &corpus.items {
            histogram[item.concept.index()] += 1;
        }
        for (idx, count) in histogram.iter().enumerate() {
            assert!(*count >= 50, "concept {idx} appears {count} < 50 times");
        }
    }

    #[test]
    fn corpus_deterministic() {
        let concept = Concept::new(Shape::Square, Color::Blue);
        let a = build_corpus(Split::Forget, Some(concept), 4, 99, 32).unwrap();
        let b = build_corpus(Split::Forget, Some(concept), 4, 99, 32).unwrap();
        for (x, y) in a.items.iter().zip(&b.items) {
            assert_eq!(x.image.planes.data(), y.image.planes.data());
            assert_eq!(x.caption, y.caption);
        }
    }

    #[test]
    fn zero_items_rejected() {
        let err = build_corpus(Split::Pretrain, None, 0, 1, 32).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn forget_without_concept_rejected() {
        let err = build_corpus(Split::Forget, None, 5, 1, 32).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
