//! Deterministic datasets with planted phrase-object alignments.
//!
//! Every image holds distinct concepts (or, in duplicate-label mode, one pair
//! of same-label objects told apart only by subtype features). Captions name
//! the most salient objects, sometimes through a synonym whose embedding is
//! unrelated to the label, so that matching labels to words is not enough.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::corpus::{tokenize, CaptionRecord, Dataset, EmbeddingTable, FeatureStore, ImageRecord, ObjectRecord, PhraseRecord};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Rng};

/// Placement attempts per object before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 2000;

pub const IMAGES_FILE: &str = "images.jsonl";
pub const FEATURES_FILE: &str = "features.maff";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub objects_per_image: usize,
    pub phrases_per_caption: usize,
    pub captions_per_image: usize,
    /// Number of concepts (object labels).
    pub vocab_size: usize,
    pub d_text: usize,
    pub d_visual: usize,
    pub feature_noise_sigma: f64,
    /// Probability that a phrase gets a distractor adjective.
    pub distractor_rate: f64,
    pub n_adjectives: usize,
    /// Probability that a phrase uses the concept's synonym instead of its label.
    pub synonym_rate: f64,
    /// Cosine between a synonym and its label embedding.
    pub synonym_similarity: f64,
    /// Other labels each synonym leans towards.
    pub decoys: usize,
    /// Cosine between a synonym and each of its decoy labels.
    pub decoy_similarity: f64,
    /// Subtypes per concept; above one, phrases carry a subtype modifier word.
    pub subtypes: usize,
    /// Plant two same-label objects of different subtypes in every image.
    pub duplicate_labels: bool,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_images: 200,
            objects_per_image: 4,
            phrases_per_caption: 3,
            captions_per_image: 5,
            vocab_size: 20,
            d_text: 32,
            d_visual: 24,
            feature_noise_sigma: 0.1,
            distractor_rate: 0.3,
            n_adjectives: 10,
            synonym_rate: 0.8,
            synonym_similarity: 0.2,
            decoys: 6,
            decoy_similarity: 0.35,
            subtypes: 1,
            duplicate_labels: false,
            image_size: 100,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Two same-label objects per image, four subtypes per concept.
    pub fn duplicate_labels() -> Self {
        SynthConfig {
            subtypes: 4,
            duplicate_labels: true,
            synonym_rate: 0.3,
            synonym_similarity: 0.5,
            decoys: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_images == 0
            || self.objects_per_image == 0
            || self.phrases_per_caption == 0
            || self.captions_per_image == 0
            || self.vocab_size == 0
            || self.d_text == 0
            || self.d_visual == 0
            || self.subtypes == 0
            || self.image_size == 0
        {
            return bad("counts and dimensions must be positive");
        }
        if self.phrases_per_caption > self.objects_per_image {
            return bad("phrases_per_caption must not exceed objects_per_image");
        }
        let distinct = self.objects_per_image - usize::from(self.duplicate_labels);
        if distinct > self.vocab_size {
            return bad("not enough concepts for distinct labels per image");
        }
        if self.duplicate_labels && (self.objects_per_image < 2 || self.subtypes < 2) {
            return bad("duplicate-label mode needs at least two objects and two subtypes");
        }
        if !(self.feature_noise_sigma.is_finite() && self.feature_noise_sigma >= 0.0) {
            return bad("feature_noise_sigma must be non-negative");
        }
        for (name, p) in [
            ("distractor_rate", self.distractor_rate),
            ("synonym_rate", self.synonym_rate),
            ("synonym_similarity", self.synonym_similarity),
            ("decoy_similarity", self.decoy_similarity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.decoys >= self.vocab_size {
            return bad("decoys must be fewer than concepts");
        }
        let rho = self.synonym_similarity;
        if rho * rho + self.decoys as f64 * self.decoy_similarity * self.decoy_similarity > 1.0 {
            return bad("synonym and decoy similarities exceed a unit vector");
        }
        if self.distractor_rate > 0.0 && self.n_adjectives == 0 {
            return bad("distractors need at least one adjective");
        }
        Ok(())
    }
}

pub fn label_token(concept: usize) -> String {
    format!("c{concept}")
}

pub fn synonym_token(concept: usize) -> String {
    format!("s{concept}")
}

pub fn adjective_token(i: usize) -> String {
    format!("a{i}")
}

pub fn modifier_token(subtype: usize) -> String {
    format!("m{subtype}")
}

/// A generated dataset and its embedding table.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub table: EmbeddingTable,
}

/// Paths of the three files written by [`Synthetic::write`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthPaths {
    pub images: PathBuf,
    pub features: PathBuf,
    pub embeddings: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        SynthPaths {
            images: dir.join(IMAGES_FILE),
            features: dir.join(FEATURES_FILE),
            embeddings: dir.join(EMBEDDINGS_FILE),
        }
    }
}

impl Synthetic {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<SynthPaths> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = SynthPaths::in_dir(dir);
        self.dataset.write(&paths.images, &paths.features)?;
        self.table.write(&paths.embeddings)?;
        Ok(paths)
    }
}

fn unit_vector(rng: &mut Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Removes from `v` its components along the (orthonormal) `basis`.
fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let along = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= along * y);
    }
}

/// Unit vector orthogonal to `basis`, or a plain random unit vector when
/// `basis` already spans the space.
fn orthogonal_unit(rng: &mut Rng, d: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    for _ in 0..8 {
        let mut v = unit_vector(rng, d);
        project_out(&mut v, basis);
        let n = norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
    unit_vector(rng, d)
}

/// Label vectors are orthonormal while they fit in the space. A synonym has
/// cosine `synonym_similarity` with its own label, `decoy_similarity` with
/// each of its decoy labels, and (when room allows) zero with the rest.
fn build_table(cfg: &SynthConfig, rng: &mut Rng) -> Result<EmbeddingTable> {
    let d = cfg.d_text;
    let mut labels: Vec<Vec<f64>> = Vec::with_capacity(cfg.vocab_size);
    for _ in 0..cfg.vocab_size {
        let basis = &labels[..labels.len().min(d.saturating_sub(1))];
        let v = orthogonal_unit(rng, d, basis);
        labels.push(v);
    }
    let basis = &labels[..labels.len().min(d.saturating_sub(1))];
    let rho = cfg.synonym_similarity;
    let tau = cfg.decoy_similarity;
    let rest = (1.0 - rho * rho - cfg.decoys as f64 * tau * tau).max(0.0).sqrt();
    let mut entries = Vec::new();
    for (c, label) in labels.iter().enumerate() {
        let mut others: Vec<usize> = (0..cfg.vocab_size).filter(|&o| o != c).collect();
        rng.shuffle(&mut others);
        let noise = orthogonal_unit(rng, d, basis);
        let mut syn: Vec<f64> = label.iter().zip(&noise).map(|(l, r)| rho * l + rest * r).collect();
        for &o in &others[..cfg.decoys] {
            syn.iter_mut().zip(&labels[o]).for_each(|(x, l)| *x += tau * l);
        }
        let n = norm(&syn);
        entries.push((label_token(c), label.clone()));
        entries.push((synonym_token(c), syn.into_iter().map(|x| x / n).collect()));
    }
    for i in 0..cfg.n_adjectives {
        entries.push((adjective_token(i), unit_vector(rng, d)));
    }
    if cfg.subtypes > 1 {
        for s in 0..cfg.subtypes {
            entries.push((modifier_token(s), unit_vector(rng, d)));
        }
    }
    EmbeddingTable::from_entries(d, entries)
}

/// Samples `sizes.len()` non-overlapping boxes; the first is placed near the
/// image center.
fn place_boxes(sizes: &[(f64, f64)], side: f64, image: usize, rng: &mut Rng) -> Result<Vec<BBox>> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(sizes.len());
    for (i, &(w, h)) in sizes.iter().enumerate() {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let (x, y) = if i == 0 {
                let jitter = 0.05 * side;
                (
                    (side - w) / 2.0 + rng.uniform(-jitter, jitter),
                    (side - h) / 2.0 + rng.uniform(-jitter, jitter),
                )
            } else {
                (rng.uniform(0.0, side - w), rng.uniform(0.0, side - h))
            };
            let b = BBox::new(x.round(), y.round(), (x + w).round(), (y + h).round());
            let clear = boxes
                .iter()
                .all(|o| b.x2 <= o.x1 || o.x2 <= b.x1 || b.y2 <= o.y1 || o.y2 <= b.y1);
            if clear {
                placed = Some(b);
                break;
            }
        }
        boxes.push(placed.ok_or(Error::Packing {
            image,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?);
    }
    Ok(boxes)
}

/// Object planted in an image before serialization.
struct Planted {
    concept: usize,
    subtype: usize,
    bbox: BBox,
}

pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let table = build_table(cfg, &mut root.fork(1))?;

    let mut proto_rng = root.fork(2);
    let normal_vec = |rng: &mut Rng| -> Vec<f64> { (0..cfg.d_visual).map(|_| rng.normal()).collect() };
    let concept_protos: Vec<Vec<f64>> = (0..cfg.vocab_size).map(|_| normal_vec(&mut proto_rng)).collect();
    let subtype_protos: Vec<Vec<f64>> = (0..cfg.subtypes).map(|_| normal_vec(&mut proto_rng)).collect();

    let side = f64::from(cfg.image_size);
    let mut rng = root.fork(3);
    let mut features = Vec::new();
    let mut images = Vec::with_capacity(cfg.n_images);
    for i in 0..cfg.n_images {
        let m = cfg.objects_per_image;
        let mut concepts: Vec<usize> = (0..cfg.vocab_size).collect();
        rng.shuffle(&mut concepts);
        let distinct = m - usize::from(cfg.duplicate_labels);
        let mut labels: Vec<(usize, usize)> = concepts[..distinct]
            .iter()
            .map(|&c| (c, rng.below(cfg.subtypes)))
            .collect();
        if cfg.duplicate_labels {
            let first = labels[0].1;
            let other = (first + 1 + rng.below(cfg.subtypes - 1)) % cfg.subtypes;
            labels.push((labels[0].0, other));
        }

        // larger first, so object 0 is both the largest and the most central
        let mut sizes: Vec<(f64, f64)> = (0..m)
            .map(|_| (rng.uniform(0.12, 0.3) * side, rng.uniform(0.12, 0.3) * side))
            .collect();
        sizes.sort_by(|a, b| (b.0 * b.1).total_cmp(&(a.0 * a.1)));
        let boxes = place_boxes(&sizes, side, i, &mut rng)?;

        rng.shuffle(&mut labels);
        let mut planted: Vec<Planted> = labels
            .into_iter()
            .zip(boxes)
            .map(|((concept, subtype), bbox)| Planted { concept, subtype, bbox })
            .collect();
        rng.shuffle(&mut planted);

        // salience: duplicate-label pairs first, then by area
        let mut named: Vec<usize> = (0..m).collect();
        let pair_concept = cfg.duplicate_labels.then(|| concepts[0]);
        named.sort_by(|&a, &b| {
            let pa = Some(planted[a].concept) == pair_concept;
            let pb = Some(planted[b].concept) == pair_concept;
            pb.cmp(&pa)
                .then(planted[b].bbox.area().total_cmp(&planted[a].bbox.area()))
                .then(a.cmp(&b))
        });
        named.truncate(cfg.phrases_per_caption);

        let objects = planted
            .iter()
            .map(|p| {
                let index = features.len() / cfg.d_visual;
                for k in 0..cfg.d_visual {
                    let x = concept_protos[p.concept][k]
                        + subtype_protos[p.subtype][k]
                        + cfg.feature_noise_sigma * rng.normal();
                    features.push(f64::from(x as f32));
                }
                ObjectRecord {
                    bbox: p.bbox,
                    label: label_token(p.concept),
                    attributes: Vec::new(),
                    confidence: 1.0,
                    feature_index: index,
                }
            })
            .collect();

        let captions = (0..cfg.captions_per_image)
            .map(|c| {
                let mut targets = named.clone();
                rng.shuffle(&mut targets);
                let phrases = targets
                    .iter()
                    .enumerate()
                    .map(|(k, &obj)| {
                        let p = &planted[obj];
                        let mut words = Vec::new();
                        if rng.bernoulli(cfg.distractor_rate) {
                            words.push(adjective_token(rng.below(cfg.n_adjectives)));
                        }
                        if cfg.subtypes > 1 {
                            words.push(modifier_token(p.subtype));
                        }
                        words.push(if rng.bernoulli(cfg.synonym_rate) {
                            synonym_token(p.concept)
                        } else {
                            label_token(p.concept)
                        });
                        let text = words.join(" ");
                        PhraseRecord {
                            phrase_id: format!("p{c}_{k}"),
                            words: tokenize(&text).expect("generated phrases are nonempty"),
                            text,
                            gt_boxes: vec![p.bbox],
                        }
                    })
                    .collect();
                CaptionRecord {
                    caption_id: format!("c{c}"),
                    phrases,
                }
            })
            .collect();

        images.push(ImageRecord {
            image_id: format!("img{i:05}"),
            width: cfg.image_size,
            height: cfg.image_size,
            objects,
            captions,
        });
    }
    let count = features.len() / cfg.d_visual;
    let features = FeatureStore::new(count, cfg.d_visual, features)?;
    Ok(Synthetic {
        dataset: Dataset { images, features },
        table,
    })
}
