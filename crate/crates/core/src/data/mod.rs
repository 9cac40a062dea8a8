//! Caption records, the synthetic scene generator, tokenization and the
//! JSONL annotation loader.

mod annotations;
mod synthetic;
mod vocab;

use serde::{Deserialize, Serialize};

pub use annotations::{load_annotations, load_ppm, parse_annotation_line, record_to_json, write_jsonl};
pub use synthetic::{
    generate_synthetic, Color, PlacedShape, SceneDescriptor, ShapeKind, SCENE_CHANNELS, SCENE_SIZE,
};
pub use vocab::{tokenize, TokenSequence, Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    /// `[H × W × C]`, values in `[0, 1]`.
    Pixels(Tensor),
    Scene(SceneDescriptor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    pub id: String,
    pub image: ImageSource,
    pub captions: Vec<String>,
    pub split: Split,
}

pub const MAX_REFERENCES: usize = 5;

impl CaptionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.captions.is_empty() || self.captions.len() > MAX_REFERENCES {
            return Err(Error::Input(format!(
                "record `{}` has {} captions, expected 1 to {MAX_REFERENCES}",
                self.id,
                self.captions.len()
            )));
        }
        if let ImageSource::Pixels(t) = &self.image {
            validate_pixels(t)?;
        }
        Ok(())
    }

    /// Raw pixels, rasterizing synthetic scenes on demand.
    pub fn pixels(&self) -> Result<Tensor> {
        match &self.image {
            ImageSource::Pixels(t) => Ok(t.clone()),
            ImageSource::Scene(s) => Ok(s.rasterize()),
        }
    }
}

pub(crate) fn validate_pixels(t: &Tensor) -> Result<()> {
    if t.rank() != 3 {
        return Err(Error::Input(format!("image must be H×W×C, got shape {:?}", t.shape())));
    }
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("pixel values must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Records belonging to `split`, in their original order.
pub fn filter_split(records: &[CaptionRecord], split: Split) -> Vec<CaptionRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}
