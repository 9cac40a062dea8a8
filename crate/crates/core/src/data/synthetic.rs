//! Desk-scale stand-in for aerial imagery: up to four colored shapes placed
//! in the quadrants of a 32×32 RGB canvas, captioned by a small grammar.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionRecord, ImageSource, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCENE_SIZE: usize = 32;
pub const SCENE_CHANNELS: usize = 3;
const SLOT: usize = SCENE_SIZE / 2;
const MAX_SHAPES: usize = 4;

/// Listing template: "a red square and a blue circle".
const TEMPLATE_LIST: u32 = 0;
/// Counting template: "three red squares in the image".
const TEMPLATE_COUNT: u32 = 1;

const COUNT_WORDS: [&str; 5] = ["zero", "one", "two", "three", "four"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Cross];

    fn word(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Cross => "cross",
        }
    }

    fn plural(self) -> &'static str {
        match self {
            ShapeKind::Square => "squares",
            ShapeKind::Circle => "circles",
            ShapeKind::Cross => "crosses",
        }
    }

    fn covers(self, dx: f64, dy: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= 5.0 && dy.abs() <= 5.0,
            ShapeKind::Circle => dx * dx + dy * dy <= 36.0,
            ShapeKind::Cross => {
                (dx.abs() <= 1.5 && dy.abs() <= 6.0) || (dy.abs() <= 1.5 && dx.abs() <= 6.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub shape: ShapeKind,
    pub color: Color,
    /// Pixel column of the shape's center.
    pub x: usize,
    /// Pixel row of the shape's center.
    pub y: usize,
}

/// Shapes fill quadrants in reading order; the template index picks the
/// caption grammar.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub shapes: Vec<PlacedShape>,
    pub template: u32,
}

fn slot_center(slot: usize) -> (usize, usize) {
    (SLOT / 2 + SLOT * (slot % 2), SLOT / 2 + SLOT * (slot / 2))
}

fn word_of<T: Copy>(all: &[T], word: &str, name: impl Fn(T) -> &'static str) -> Option<T> {
    all.iter().copied().find(|&v| name(v) == word)
}

impl SceneDescriptor {
    /// Places `(shape, color)` pairs into quadrants in reading order.
    pub fn new(items: &[(ShapeKind, Color)], template: u32) -> Result<Self> {
        if items.is_empty() || items.len() > MAX_SHAPES {
            return Err(Error::Input(format!(
                "a scene holds 1 to {MAX_SHAPES} shapes, got {}",
                items.len()
            )));
        }
        let shapes = items
            .iter()
            .enumerate()
            .map(|(slot, &(shape, color))| {
                let (x, y) = slot_center(slot);
                PlacedShape { shape, color, x, y }
            })
            .collect();
        let scene = SceneDescriptor { shapes, template };
        scene.caption()?;
        Ok(scene)
    }

    fn uniform(&self) -> bool {
        self.shapes
            .windows(2)
            .all(|w| w[0].shape == w[1].shape && w[0].color == w[1].color)
    }

    /// Template indices whose grammar can describe this scene.
    pub fn valid_templates(&self) -> Vec<u32> {
        let n = self.shapes.len();
        let mut out = Vec::new();
        if n <= 3 {
            out.push(TEMPLATE_LIST);
        }
        if n >= 2 && self.uniform() {
            out.push(TEMPLATE_COUNT);
        }
        out
    }

    fn caption_with(&self, template: u32) -> Result<String> {
        if !self.valid_templates().contains(&template) {
            return Err(Error::Input(format!(
                "template {template} cannot describe a scene of {} shapes",
                self.shapes.len()
            )));
        }
        Ok(match template {
            TEMPLATE_LIST => self
                .shapes
                .iter()
                .map(|s| format!("a {} {}", s.color.word(), s.shape.word()))
                .collect::<Vec<_>>()
                .join(" and "),
            _ => {
                let s = self.shapes[0];
                format!(
                    "{} {} {} in the image",
                    COUNT_WORDS[self.shapes.len()],
                    s.color.word(),
                    s.shape.plural()
                )
            }
        })
    }

    /// The caption named by `self.template`.
    pub fn caption(&self) -> Result<String> {
        self.caption_with(self.template)
    }

    /// Primary caption first, then every other valid phrasing.
    pub fn references(&self) -> Result<Vec<String>> {
        let mut out = vec![self.caption()?];
        for t in self.valid_templates() {
            if t != self.template {
                out.push(self.caption_with(t)?);
            }
        }
        Ok(out)
    }

    /// Inverse of [`SceneDescriptor::caption`].
    pub fn parse(caption: &str) -> Result<Self> {
        let bad = || Error::Input(format!("not a synthetic caption: `{caption}`"));
        let words: Vec<&str> = caption.split_whitespace().collect();
        if let [count, color, plural, "in", "the", "image"] = words[..] {
            let n = COUNT_WORDS.iter().position(|&w| w == count).ok_or_else(bad)?;
            let color = word_of(&Color::ALL, color, Color::word).ok_or_else(bad)?;
            let shape = word_of(&ShapeKind::ALL, plural, ShapeKind::plural).ok_or_else(bad)?;
            return Self::new(&vec![(shape, color); n], TEMPLATE_COUNT).map_err(|_| bad());
        }
        let mut items = Vec::new();
        for chunk in words.split(|&w| w == "and") {
            match chunk {
                ["a", color, shape] => {
                    let color = word_of(&Color::ALL, color, Color::word).ok_or_else(bad)?;
                    let shape = word_of(&ShapeKind::ALL, shape, ShapeKind::word).ok_or_else(bad)?;
                    items.push((shape, color));
                }
                _ => return Err(bad()),
            }
        }
        Self::new(&items, TEMPLATE_LIST).map_err(|_| bad())
    }

    /// `[32 × 32 × 3]` image on a black background.
    pub fn rasterize(&self) -> Tensor {
        let mut img = Tensor::zeros(&[SCENE_SIZE, SCENE_SIZE, SCENE_CHANNELS]);
        let data = img.data_mut();
        for s in &self.shapes {
            let rgb = s.color.rgb();
            for row in 0..SCENE_SIZE {
                for col in 0..SCENE_SIZE {
                    let dx = col as f64 + 0.5 - s.x as f64;
                    let dy = row as f64 + 0.5 - s.y as f64;
                    if s.shape.covers(dx, dy) {
                        let base = (row * SCENE_SIZE + col) * SCENE_CHANNELS;
                        data[base..base + SCENE_CHANNELS].copy_from_slice(&rgb);
                    }
                }
            }
        }
        img
    }

    fn sample<R: Rng>(rng: &mut R) -> Self {
        let count = rng.gen_range(1..=MAX_SHAPES);
        let uniform = count == MAX_SHAPES || (count >= 2 && rng.gen_bool(0.5));
        let pick = |rng: &mut R| {
            (
                *ShapeKind::ALL.choose(rng).expect("nonempty"),
                *Color::ALL.choose(rng).expect("nonempty"),
            )
        };
        let items: Vec<_> = if uniform {
            vec![pick(rng); count]
        } else {
            (0..count).map(|_| pick(rng)).collect()
        };
        let template = if count == MAX_SHAPES { TEMPLATE_COUNT } else { TEMPLATE_LIST };
        let mut scene = SceneDescriptor::new(&items, template).expect("sampled scene is describable");
        scene.template = *scene.valid_templates().choose(rng).expect("at least one template");
        scene
    }
}

/// `n` records, a pure function of `(n, seed)`. The first 80% are train,
/// then 10% val and 10% test.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Vec<CaptionRecord>> {
    if n < 1 {
        return Err(Error::Input("synthetic dataset size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_eval = n / 10;
    let n_train = n - 2 * n_eval;
    (0..n)
        .map(|i| {
            let scene = SceneDescriptor::sample(&mut rng);
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_eval {
                Split::Val
            } else {
                Split::Test
            };
            Ok(CaptionRecord {
                id: format!("synth-{i:05}"),
                captions: scene.references()?,
                image: ImageSource::Scene(scene),
                split,
            })
        })
        .collect()
}
