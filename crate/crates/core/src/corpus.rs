//! Loading and validation of embeddings, datasets and feature sidecars.
//!
//! Three on-disk formats:
//!
//! * embeddings: text, one `token v1 v2 ... vd` record per line (GloVe layout);
//! * dataset: JSON Lines, one image per line with detected objects and
//!   captions split into phrases;
//! * features: binary `MAFF` sidecar holding one `f32` row per detected object.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::numerics::mean_of;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.1;

pub const FEATURE_MAGIC: &[u8; 4] = b"MAFF";
pub const FEATURE_VERSION: u32 = 1;

/// Splits on single spaces, lowercases, and drops empty fragments.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let words: Vec<String> = text
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    if words.is_empty() {
        Err(Error::EmptyPhrase)
    } else {
        Ok(words)
    }
}

/// Token → vector table with a designated UNK vector.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
    unk: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from `(token, vector)` entries. Tokens are lowercased;
    /// the first occurrence of a token wins. UNK is the mean of the kept vectors.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: AsRef<str>,
    {
        if dim == 0 {
            return Err(Error::Format("embedding dimension must be positive".into()));
        }
        let mut table = EmbeddingTable {
            dim,
            tokens: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            unk: vec![0.0; dim],
        };
        for (token, vector) in entries {
            if vector.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding for {:?} has {} values, expected {dim}",
                    token.as_ref(),
                    vector.len()
                )));
            }
            table.insert(token.as_ref(), vector);
        }
        if table.tokens.is_empty() {
            return Err(Error::Format("embedding table is empty".into()));
        }
        table.unk = mean_of(table.vectors.iter().map(Vec::as_slice)).expect("nonempty");
        Ok(table)
    }

    fn insert(&mut self, token: &str, vector: Vec<f64>) {
        let key = token.to_lowercase();
        if self.index.contains_key(&key) {
            return;
        }
        self.index.insert(key.clone(), self.tokens.len());
        self.tokens.push(key);
        self.vectors.push(vector);
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut entries: Vec<(String, Vec<f64>)> = Vec::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("nonblank line has a field");
            let values = parts
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|e| Error::parse(path, lineno, format!("bad value {p:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(path, lineno, "non-finite embedding value"));
            }
            let d = *dim.get_or_insert(values.len());
            if d == 0 {
                return Err(Error::parse(path, lineno, "record has no vector values"));
            }
            if values.len() != d {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("expected {d} values, found {}", values.len()),
                ));
            }
            entries.push((token.to_string(), values));
        }
        let dim = dim.ok_or_else(|| Error::Format(format!("{}: empty embedding file", path.display())))?;
        EmbeddingTable::from_entries(dim, entries)
    }

    /// Writes the table in the text format accepted by [`EmbeddingTable::load`].
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (token, v) in self.tokens.iter().zip(&self.vectors) {
            let mut line = token.clone();
            for x in v {
                line.push(' ');
                line.push_str(&x.to_string());
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn dim(&self) -> usize {
        self.dim
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

    pub fn unk(&self) -> &[f64] {
        &self.unk
    }

    /// Stored vector for `token`, if in vocabulary.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .or_else(|| self.index.get(&token.to_lowercase()))
            .map(|&i| self.vectors[i].as_slice())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.get(token).is_some()
    }

    /// Stored vector or UNK. Never fails.
    pub fn embed_word(&self, token: &str) -> &[f64] {
        self.get(token).unwrap_or(&self.unk)
    }

    /// Mean of the label's word vectors (`"traffic light"` → mean of two).
    pub fn embed_label(&self, label: &str) -> Vec<f64> {
        match tokenize(label) {
            Ok(words) => mean_of(words.iter().map(|w| self.embed_word(w))).expect("nonempty"),
            Err(_) => self.unk.clone(),
        }
    }

    /// Mean of per-attribute label embeddings; zero vector when there are none.
    pub fn embed_attributes<S: AsRef<str>>(&self, attributes: &[S]) -> Vec<f64> {
        let per: Vec<Vec<f64>> = attributes.iter().map(|a| self.embed_label(a.as_ref())).collect();
        mean_of(per.iter().map(Vec::as_slice)).unwrap_or_else(|| vec![0.0; self.dim])
    }
}

/// Row-major matrix of frozen detector features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    count: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl FeatureStore {
    pub fn new(count: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Format("feature dimension must be positive".into()));
        }
        if rows.len() != count * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {count}x{dim}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite feature value".into()));
        }
        Ok(FeatureStore { count, dim, rows })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("feature file shorter than header".into()));
        }
        if &bytes[0..4] != FEATURE_MAGIC {
            return Err(Error::Format("bad feature magic (expected MAFF)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        let count = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        let body = &bytes[16..];
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("feature header overflows".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "feature header declares {count}x{dim} but body has {} bytes",
                body.len()
            )));
        }
        let rows = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        FeatureStore::new(count, dim, rows)
    }

    /// Encodes as `MAFF`; values are narrowed to `f32`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.rows.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    pub confidence: f64,
    pub feature_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseRecord {
    pub phrase_id: String,
    pub text: String,
    #[serde(skip)]
    pub words: Vec<String>,
    #[serde(default)]
    pub gt_boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub phrases: Vec<PhraseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectRecord>,
    pub captions: Vec<CaptionRecord>,
}

impl ImageRecord {
    pub fn whole_box(&self) -> BBox {
        BBox::whole_image(self.width, self.height)
    }
}

/// Validated images plus the feature rows their objects point into.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub features: FeatureStore,
}

impl Dataset {
    pub fn phrase_count(&self) -> usize {
        self.images
            .iter()
            .flat_map(|im| &im.captions)
            .map(|c| c.phrases.len())
            .sum()
    }

    /// Every distinct phrase token, in first-seen order.
    pub fn phrase_vocabulary(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in self.images.iter().flat_map(|im| &im.captions).flat_map(|c| &c.phrases) {
            for w in &p.words {
                if seen.insert(w.as_str()) {
                    out.push(w.clone());
                }
            }
        }
        out
    }

    /// Writes the images as JSON Lines and the features as `MAFF`.
    pub fn write(&self, jsonl_path: impl AsRef<Path>, features_path: impl AsRef<Path>) -> Result<()> {
        write_images(&self.images, jsonl_path)?;
        self.features.write(features_path)
    }
}

pub fn write_images(images: &[ImageRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for im in images {
        let line = serde_json::to_string(im).expect("records serialize");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn validate_image(
    mut image: ImageRecord,
    features: &FeatureStore,
    threshold: f64,
    path: &Path,
    lineno: usize,
) -> Result<ImageRecord> {
    let err = |msg: String| Error::parse(path, lineno, msg);
    if image.width == 0 || image.height == 0 {
        return Err(err(format!("image {} has zero size", image.image_id)));
    }
    image.objects.retain(|o| o.confidence > threshold);
    for obj in &mut image.objects {
        if obj.feature_index >= features.count() {
            return Err(err(format!(
                "feature_index {} out of range (store holds {})",
                obj.feature_index,
                features.count()
            )));
        }
        if !(0.0..=1.0).contains(&obj.confidence) {
            return Err(err(format!("confidence {} outside [0,1]", obj.confidence)));
        }
        let clamped = obj.bbox.clamp_to(image.width, image.height);
        if !clamped.is_well_formed() {
            return Err(err(format!("degenerate object box {:?}", <[f64; 4]>::from(obj.bbox))));
        }
        obj.bbox = clamped;
        if obj.label.trim().is_empty() {
            return Err(err("object with empty label".into()));
        }
    }
    let mut ids = HashSet::new();
    for cap in &mut image.captions {
        if cap.phrases.is_empty() {
            return Err(err(format!("caption {} has no phrases", cap.caption_id)));
        }
        for p in &mut cap.phrases {
            p.words = tokenize(&p.text)
                .map_err(|_| err(format!("phrase {} is empty", p.phrase_id)))?;
            if let Some(b) = p.gt_boxes.iter().find(|b| !b.is_well_formed()) {
                return Err(err(format!(
                    "phrase {} has malformed gt box {:?}",
                    p.phrase_id,
                    <[f64; 4]>::from(*b)
                )));
            }
            if !ids.insert(p.phrase_id.clone()) {
                return Err(err(format!("duplicate phrase_id {}", p.phrase_id)));
            }
        }
    }
    Ok(image)
}

/// Loads a JSONL dataset and its feature sidecar, dropping objects whose
/// confidence is not strictly above `confidence_threshold`.
pub fn load_dataset(
    jsonl_path: impl AsRef<Path>,
    features_path: impl AsRef<Path>,
    confidence_threshold: f64,
) -> Result<Dataset> {
    let features = FeatureStore::load(features_path)?;
    let path = jsonl_path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut images = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, format!("malformed JSON: {e}")))?;
        if !seen_ids.insert(raw.image_id.clone()) {
            return Err(Error::parse(path, lineno, format!("duplicate image_id {}", raw.image_id)));
        }
        images.push(validate_image(raw, &features, confidence_threshold, path, lineno)?);
    }
    Ok(Dataset { images, features })
}
