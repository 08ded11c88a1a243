//! Phrase-to-box prediction: the trained model, the training-free
//! attention method, and the label/geometry baselines.
//!
//! Every method emits exactly one [`Prediction`] per phrase. When a method has
//! no candidate (no objects, or no label matched) it falls back to the whole
//! image box.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::corpus::{tokenize, Dataset, EmbeddingTable, ImageRecord, PhraseRecord};
use crate::error::{Error, Result};
use crate::model::{compute_image_vfr, forward_pair, word_object_scores, ImageInput, ModelParams};
use crate::numerics::{argmax, axpy, cosine, dot, mean_of, softmax, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub phrase_id: String,
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub object_index: Option<usize>,
}

impl Prediction {
    fn object(image: &ImageRecord, phrase: &PhraseRecord, m: usize) -> Self {
        Prediction {
            phrase_id: phrase.phrase_id.clone(),
            image_id: image.image_id.clone(),
            bbox: image.objects[m].bbox,
            object_index: Some(m),
        }
    }

    fn whole(image: &ImageRecord, phrase: &PhraseRecord) -> Self {
        Prediction {
            phrase_id: phrase.phrase_id.clone(),
            image_id: image.image_id.clone(),
            bbox: image.whole_box(),
            object_index: None,
        }
    }

    fn choose(image: &ImageRecord, phrase: &PhraseRecord, m: Option<usize>) -> Self {
        match m {
            Some(m) => Prediction::object(image, phrase, m),
            None => Prediction::whole(image, phrase),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Random,
    Center,
    Max,
    Whole,
    Direct,
    GloveMax,
    GloveAvg,
    GloveAtt,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Random,
        Method::Center,
        Method::Max,
        Method::Whole,
        Method::Direct,
        Method::GloveMax,
        Method::GloveAvg,
        Method::GloveAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Center => "center",
            Method::Max => "max",
            Method::Whole => "whole",
            Method::Direct => "direct",
            Method::GloveMax => "glove-max",
            Method::GloveAvg => "glove-avg",
            Method::GloveAtt => "glove-att",
        }
    }

    pub fn needs_embeddings(self) -> bool {
        matches!(self, Method::GloveMax | Method::GloveAvg | Method::GloveAtt)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

fn phrases(image: &ImageRecord) -> impl Iterator<Item = &PhraseRecord> {
    image.captions.iter().flat_map(|c| &c.phrases)
}

/// Largest-area object among `candidates`; lowest index on ties.
fn largest(image: &ImageRecord, candidates: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for m in candidates {
        let area = image.objects[m].bbox.area();
        match best {
            Some((_, a)) if area <= a => {}
            _ => best = Some((m, area)),
        }
    }
    best.map(|(m, _)| m)
}

fn label_key(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Distinct labels of the image, in first-occurrence order.
fn distinct_labels(image: &ImageRecord) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for o in &image.objects {
        let k = label_key(&o.label);
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

fn largest_with_label(image: &ImageRecord, label: &str) -> Option<usize> {
    largest(
        image,
        image
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| label_key(&o.label) == label)
            .map(|(m, _)| m),
    )
}

/// Picks the label with the highest finite score, then its largest box.
fn pick_by_label_score(image: &ImageRecord, labels: &[String], scores: &[f64]) -> Option<usize> {
    let finite: Vec<f64> = scores
        .iter()
        .map(|&s| if s.is_finite() { s } else { f64::NEG_INFINITY })
        .collect();
    let best = argmax(&finite)?;
    if !finite[best].is_finite() {
        return None;
    }
    largest_with_label(image, &labels[best])
}

/// Row-wise argmax of a similarity matrix: the selected object per phrase.
pub fn select_objects(similarity: &crate::numerics::Mat) -> Vec<usize> {
    (0..similarity.rows())
        .map(|n| argmax(similarity.row(n)).expect("at least one object"))
        .collect()
}

/// Trained-model prediction: each phrase goes to `argmax_m A[n][m]`.
pub fn predict_weak(
    image: &ImageRecord,
    params: &ModelParams,
    table: &EmbeddingTable,
    features: &crate::corpus::FeatureStore,
) -> Result<Vec<Prediction>> {
    if image.objects.is_empty() {
        return Ok(phrases(image).map(|p| Prediction::whole(image, p)).collect());
    }
    let input = ImageInput::encode(image, table, features);
    let vfr = compute_image_vfr(&input, params)?;
    let mut out = Vec::new();
    for cap in &image.captions {
        let words: Vec<Vec<String>> = cap.phrases.iter().map(|p| p.words.clone()).collect();
        let trace = forward_pair(params, &vfr, &params.encode_caption(&words, table))?;
        for (p, &m) in cap.phrases.iter().zip(&trace.row_argmax) {
            out.push(Prediction::object(image, p, m));
        }
    }
    Ok(out)
}

fn phrase_words(p: &PhraseRecord) -> Vec<String> {
    if p.words.is_empty() {
        tokenize(&p.text).unwrap_or_default()
    } else {
        p.words.clone()
    }
}

/// Training-free prediction from label embeddings only: attention pooling of
/// the phrase's word vectors against label embeddings, then the best-scoring
/// distinct label by dot product and its largest box.
pub fn predict_unsup(image: &ImageRecord, table: &EmbeddingTable) -> Vec<Prediction> {
    let labels = distinct_labels(image);
    let label_vecs: Vec<Vec<f64>> = labels.iter().map(|l| table.embed_label(l)).collect();
    let object_vecs: Vec<Vec<f64>> = image.objects.iter().map(|o| table.embed_label(&o.label)).collect();
    phrases(image)
        .map(|p| {
            let words = phrase_words(p);
            let h: Vec<&[f64]> = words.iter().map(|w| table.embed_word(w)).collect();
            let pick = (|| {
                let scores = word_object_scores(&h, &object_vecs, table.dim()).ok()?;
                let beta = softmax(&scores.alpha).ok()?;
                let mut pooled = vec![0.0; table.dim()];
                for (hk, b) in h.iter().zip(&beta) {
                    axpy(&mut pooled, *b, hk);
                }
                let s: Vec<f64> = label_vecs.iter().map(|l| dot(&pooled, l)).collect();
                pick_by_label_score(image, &labels, &s)
            })();
            Prediction::choose(image, p, pick)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GloveMode {
    /// Best single word-label cosine.
    Max,
    /// Cosine between the mean word vector and the label.
    Avg,
}

/// Label selection by cosine similarity of word embeddings.
pub fn baseline_glove(image: &ImageRecord, table: &EmbeddingTable, mode: GloveMode) -> Vec<Prediction> {
    let labels = distinct_labels(image);
    let label_vecs: Vec<Vec<f64>> = labels.iter().map(|l| table.embed_label(l)).collect();
    phrases(image)
        .map(|p| {
            let words = phrase_words(p);
            let h: Vec<&[f64]> = words.iter().map(|w| table.embed_word(w)).collect();
            let scores: Vec<f64> = match mode {
                GloveMode::Max => label_vecs
                    .iter()
                    .map(|l| {
                        h.iter()
                            .filter_map(|hk| cosine(hk, l))
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .collect(),
                GloveMode::Avg => {
                    let mean = mean_of(h.iter().copied());
                    label_vecs
                        .iter()
                        .map(|l| {
                            mean.as_deref()
                                .and_then(|m| cosine(m, l))
                                .unwrap_or(f64::NEG_INFINITY)
                        })
                        .collect()
                }
            };
            Prediction::choose(image, p, pick_by_label_score(image, &labels, &scores))
        })
        .collect()
}

/// Objects whose label equals a phrase word, or whose every label token
/// occurs among the phrase words; the largest match wins.
pub fn baseline_direct_match(image: &ImageRecord) -> Vec<Prediction> {
    phrases(image)
        .map(|p| {
            let words = phrase_words(p);
            let matches = image.objects.iter().enumerate().filter(|(_, o)| {
                let key = label_key(&o.label);
                words.contains(&key)
                    || tokenize(&key).is_ok_and(|toks| toks.iter().all(|t| words.contains(t)))
            });
            Prediction::choose(image, p, largest(image, matches.map(|(m, _)| m)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Geometric {
    Random,
    Center,
    Max,
    Whole,
}

/// Content-blind baselines: a random object, the object nearest the image
/// center (L1), the largest object, or the whole image.
pub fn baseline_geometric(image: &ImageRecord, method: Geometric, rng: &mut Rng) -> Vec<Prediction> {
    let (cx, cy) = (image.width as f64 / 2.0, image.height as f64 / 2.0);
    let fixed = match method {
        Geometric::Center => {
            let d: Vec<f64> = image
                .objects
                .iter()
                .map(|o| {
                    let (x, y) = o.bbox.center();
                    -((x - cx).abs() + (y - cy).abs())
                })
                .collect();
            argmax(&d)
        }
        Geometric::Max => largest(image, 0..image.objects.len()),
        Geometric::Whole | Geometric::Random => None,
    };
    phrases(image)
        .map(|p| {
            let m = match method {
                Geometric::Random if !image.objects.is_empty() => Some(rng.below(image.objects.len())),
                Geometric::Whole | Geometric::Random => None,
                _ => fixed,
            };
            Prediction::choose(image, p, m)
        })
        .collect()
}

/// Runs a training-free method over a whole dataset. `table` is required for
/// the embedding methods.
pub fn run_baseline(
    dataset: &Dataset,
    method: Method,
    table: Option<&EmbeddingTable>,
    seed: u64,
) -> Result<Vec<Prediction>> {
    let need_table = || {
        table.ok_or_else(|| Error::Config(format!("method {method} needs an embedding table")))
    };
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(dataset.phrase_count());
    for im in &dataset.images {
        let preds = match method {
            Method::Random => baseline_geometric(im, Geometric::Random, &mut rng),
            Method::Center => baseline_geometric(im, Geometric::Center, &mut rng),
            Method::Max => baseline_geometric(im, Geometric::Max, &mut rng),
            Method::Whole => baseline_geometric(im, Geometric::Whole, &mut rng),
            Method::Direct => baseline_direct_match(im),
            Method::GloveMax => baseline_glove(im, need_table()?, GloveMode::Max),
            Method::GloveAvg => baseline_glove(im, need_table()?, GloveMode::Avg),
            Method::GloveAtt => predict_unsup(im, need_table()?),
        };
        out.extend(preds);
    }
    Ok(out)
}

pub fn predict_weak_dataset(dataset: &Dataset, params: &ModelParams, table: &EmbeddingTable) -> Result<Vec<Prediction>> {
    use rayon::prelude::*;
    let per_image = dataset
        .images
        .par_iter()
        .map(|im| predict_weak(im, params, table, &dataset.features))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

pub fn predict_unsup_dataset(dataset: &Dataset, table: &EmbeddingTable) -> Vec<Prediction> {
    dataset.images.iter().flat_map(|im| predict_unsup(im, table)).collect()
}

pub fn write_predictions(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in preds {
        let line = serde_json::to_string(p).expect("prediction serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, format!("malformed prediction: {e}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CaptionRecord, ObjectRecord};
    use crate::numerics::Mat;

    fn obj(label: &str, bbox: BBox) -> ObjectRecord {
        ObjectRecord {
            bbox,
            label: label.into(),
            attributes: vec![],
            confidence: 0.9,
            feature_index: 0,
        }
    }

    fn image(objects: Vec<ObjectRecord>, texts: &[&str]) -> ImageRecord {
        ImageRecord {
            image_id: "img".into(),
            width: 640,
            height: 480,
            objects,
            captions: vec![CaptionRecord {
                caption_id: "c".into(),
                phrases: texts
                    .iter()
                    .enumerate()
                    .map(|(i, t)| PhraseRecord {
                        phrase_id: format!("p{i}"),
                        text: t.to_string(),
                        words: tokenize(t).unwrap(),
                        gt_boxes: vec![],
                    })
                    .collect(),
            }],
        }
    }

    fn sq(x: f64, y: f64, side: f64) -> BBox {
        BBox::new(x, y, x + side, y + side)
    }

    fn onehot_table(words: &[&str]) -> EmbeddingTable {
        let n = words.len();
        EmbeddingTable::from_entries(
            n,
            words.iter().enumerate().map(|(i, w)| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                (*w, v)
            }),
        )
        .unwrap()
    }

    #[test]
    fn select_objects_examples() {
        let a = Mat::from_rows(&[vec![0.1, 0.9], vec![0.5, 0.2]]).unwrap();
        assert_eq!(select_objects(&a), vec![1, 0]);
        assert_eq!(select_objects(&Mat::from_rows(&[vec![0.3, 0.3]]).unwrap()), vec![0]);
        assert_eq!(select_objects(&Mat::from_rows(&[vec![-7.0]]).unwrap()), vec![0]);
    }

    #[test]
    fn geometric_examples() {
        let im = image(
            vec![obj("a", BBox::new(300.0, 220.0, 340.0, 260.0)), obj("b", BBox::new(0.0, 0.0, 1.0, 1.0))],
            &["x"],
        );
        let mut rng = Rng::new(0);
        let whole = baseline_geometric(&im, Geometric::Whole, &mut rng);
        assert_eq!(whole[0].bbox, BBox::new(0.0, 0.0, 640.0, 480.0));
        assert_eq!(whole[0].object_index, None);
        assert_eq!(baseline_geometric(&im, Geometric::Center, &mut rng)[0].object_index, Some(0));

        let im = image(vec![obj("a", BBox::new(0.0, 0.0, 4.0, 3.0)), obj("b", sq(10.0, 10.0, 3.0))], &["x"]);
        assert_eq!(baseline_geometric(&im, Geometric::Max, &mut rng)[0].object_index, Some(0));

        let empty = image(vec![], &["x"]);
        for g in [Geometric::Random, Geometric::Center, Geometric::Max] {
            assert_eq!(baseline_geometric(&empty, g, &mut rng)[0].object_index, None);
        }
    }

    #[test]
    fn random_is_seeded() {
        let im = image((0..6).map(|i| obj("a", sq(i as f64 * 50.0, 0.0, 10.0))).collect(), &["a", "b", "c", "d"]);
        let a = baseline_geometric(&im, Geometric::Random, &mut Rng::new(9));
        let b = baseline_geometric(&im, Geometric::Random, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn direct_match_examples() {
        let im = image(
            vec![obj("table", sq(0.0, 0.0, 100.0)), obj("apple", sq(200.0, 200.0, 10.0))],
            &["a red apple"],
        );
        assert_eq!(baseline_direct_match(&im)[0].object_index, Some(1));

        let im = image(
            vec![obj("apple", BBox::new(0.0, 0.0, 10.0, 5.0)), obj("apple", BBox::new(50.0, 50.0, 60.0, 58.0))],
            &["an apple"],
        );
        assert_eq!(baseline_direct_match(&im)[0].object_index, Some(1));

        let im = image(vec![obj("dog", sq(0.0, 0.0, 10.0))], &["a cat"]);
        let p = &baseline_direct_match(&im)[0];
        assert_eq!(p.object_index, None);
        assert_eq!(p.bbox, im.whole_box());

        let im = image(vec![obj("Traffic Light", sq(0.0, 0.0, 10.0))], &["the light on the traffic pole"]);
        assert_eq!(baseline_direct_match(&im)[0].object_index, Some(0));
    }

    #[test]
    fn unsup_examples() {
        let table = onehot_table(&["man", "dog", "older"]);
        let single = image(vec![obj("dog", sq(0.0, 0.0, 5.0))], &["an older man"]);
        assert_eq!(predict_unsup(&single, &table)[0].object_index, Some(0));

        let im = image(vec![obj("dog", sq(0.0, 0.0, 30.0)), obj("man", sq(100.0, 100.0, 10.0))], &["man"]);
        assert_eq!(predict_unsup(&im, &table)[0].object_index, Some(1));

        let im = image(
            vec![
                obj("man", sq(0.0, 0.0, 10.0)),
                obj("dog", sq(50.0, 50.0, 40.0)),
                obj("man", sq(200.0, 200.0, 20.0)),
            ],
            &["an older man"],
        );
        let p = &predict_unsup(&im, &table)[0];
        assert_eq!(p.object_index, Some(2));
        assert_eq!(p.bbox.area(), 400.0);

        let empty = image(vec![], &["man"]);
        assert_eq!(predict_unsup(&empty, &table)[0].object_index, None);
    }

    #[test]
    fn glove_examples() {
        let table =
            EmbeddingTable::from_entries(2, [("x", vec![1.0, 0.0]), ("y", vec![0.0, 1.0]), ("z", vec![1.0, 0.0])])
                .unwrap();
        let im = image(vec![obj("y", sq(0.0, 0.0, 10.0)), obj("x", sq(100.0, 100.0, 10.0))], &["z"]);
        assert_eq!(baseline_glove(&im, &table, GloveMode::Avg)[0].object_index, Some(1));
        assert_eq!(baseline_glove(&im, &table, GloveMode::Max)[0].object_index, Some(1));

        // orthogonal label beats a negatively aligned one
        let table = EmbeddingTable::from_entries(
            2,
            [("q", vec![1.0, 0.0]), ("neg", vec![-1.0, 0.2]), ("orth", vec![0.0, 1.0])],
        )
        .unwrap();
        let im = image(vec![obj("neg", sq(0.0, 0.0, 10.0)), obj("orth", sq(100.0, 100.0, 10.0))], &["q"]);
        assert_eq!(baseline_glove(&im, &table, GloveMode::Avg)[0].object_index, Some(1));
    }

    #[test]
    fn glove_zero_vectors_fall_back() {
        let table = EmbeddingTable::from_entries(2, [("z", vec![0.0, 0.0]), ("o", vec![0.0, 0.0])]).unwrap();
        let im = image(vec![obj("o", sq(0.0, 0.0, 10.0))], &["z"]);
        assert_eq!(baseline_glove(&im, &table, GloveMode::Avg)[0].object_index, None);
        assert_eq!(baseline_glove(&im, &table, GloveMode::Max)[0].object_index, None);
    }

    #[test]
    fn glove_avg_matches_unsup_with_uniform_attention() {
        // one object per label and equal-norm embeddings: uniform attention
        // reduces the attention pooling to the mean, and dot equals cosine
        let table = EmbeddingTable::from_entries(
            3,
            [
                ("p", vec![0.6, 0.8, 0.0]),
                ("q", vec![0.0, 0.6, 0.8]),
                ("l1", vec![1.0, 0.0, 0.0]),
                ("l2", vec![0.0, 0.0, 1.0]),
            ],
        )
        .unwrap();
        let im = image(vec![obj("l1", sq(0.0, 0.0, 10.0))], &["p q", "q", "p"]);
        assert_eq!(
            predict_unsup(&im, &table).iter().map(|p| p.object_index).collect::<Vec<_>>(),
            baseline_glove(&im, &table, GloveMode::Avg).iter().map(|p| p.object_index).collect::<Vec<_>>()
        );
        let im = image(
            vec![obj("l1", sq(0.0, 0.0, 10.0)), obj("l2", sq(100.0, 0.0, 10.0))],
            &["p q", "q", "p"],
        );
        let unsup: Vec<_> = predict_unsup(&im, &table).iter().map(|p| p.object_index).collect();
        let avg: Vec<_> = baseline_glove(&im, &table, GloveMode::Avg).iter().map(|p| p.object_index).collect();
        assert_eq!(unsup, avg);
    }

    #[test]
    fn one_prediction_per_phrase() {
        let table = onehot_table(&["a", "b"]);
        let im = image(vec![obj("a", sq(0.0, 0.0, 10.0))], &["a", "b", "a b", "zz"]);
        let ds = Dataset {
            images: vec![im],
            features: crate::corpus::FeatureStore::new(1, 1, vec![0.0]).unwrap(),
        };
        for m in Method::ALL {
            assert_eq!(run_baseline(&ds, m, Some(&table), 1).unwrap().len(), 4, "{m}");
        }
        assert!(run_baseline(&ds, Method::GloveAvg, None, 1).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }
}
