//! Forward computation and hand-derived backward pass.
//!
//! For one image with objects `m` and one caption with phrases `n`, each
//! phrase holding words `k`:
//!
//! ```text
//! v_m     = l_m + W_t t_m + W_fᵀ f_m                  object representation
//! a_k     = softmax_m(h_k · v_m / √d)                 word-object matching
//! α_k     = max_m a_k[m]
//! β       = softmax_k(α)
//! e_n     = W_p Σ_k β_k h_k                           phrase representation
//! A[n][m] = e_n · v_m
//! sim     = mean_n max_m A[n][m]
//! ```
//!
//! Training contrasts each caption against every image in its batch:
//! `L = mean_j [ logsumexp_i sim(i, j) − sim(j, j) ]`.
//!
//! `W_f` is stored as `d_V × d_T` and applied transposed. Every `max` routes
//! its gradient through the recorded argmax (lowest index on ties).

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, FeatureStore, ImageRecord};
use crate::error::{Error, Result};
use crate::numerics::{argmax, axpy, dot, log_sum_exp, softmax, Mat};

pub const UNK_TOKEN: &str = "<unk>";

/// How word vectors are pooled into a phrase vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// β = softmax of each word's best matching score.
    #[default]
    Attention,
    /// β uniform.
    Mean,
}

/// Which object cues enter `v_m`, and how phrases are pooled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub use_labels: bool,
    pub use_attributes: bool,
    pub use_features: bool,
    pub pooling: Pooling,
}

impl Default for FeatureFlags {
    fn default() -> Self {
        FeatureFlags {
            use_labels: true,
            use_attributes: false,
            use_features: true,
            pooling: Pooling::Attention,
        }
    }
}

/// Trainable word vocabulary. Row 0 is always [`UNK_TOKEN`].
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: vec![UNK_TOKEN.to_string()],
            index: HashMap::from([(UNK_TOKEN.to_string(), 0)]),
        };
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// In-table words of `words`, first-seen order. OOV words share the UNK row.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a String>, table: &EmbeddingTable) -> Self {
        Vocab::new(words.into_iter().filter(|w| table.contains(w)).cloned())
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

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }
}

/// Trainable state: word embeddings and the three projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub vocab: Vocab,
    /// `V × d_T`
    pub word_emb: Mat,
    /// `d_T × d_T`
    pub w_t: Mat,
    /// `d_V × d_T`
    pub w_f: Mat,
    /// `d_T × d_T`
    pub w_p: Mat,
    pub flags: FeatureFlags,
}

impl ModelParams {
    pub fn new(
        vocab: Vocab,
        word_emb: Mat,
        w_t: Mat,
        w_f: Mat,
        w_p: Mat,
        flags: FeatureFlags,
    ) -> Result<Self> {
        let d = word_emb.cols();
        let ok = word_emb.rows() == vocab.len()
            && d > 0
            && w_t.shape() == (d, d)
            && w_f.cols() == d
            && w_f.rows() > 0
            && w_p.shape() == (d, d);
        if !ok {
            return Err(Error::Shape(format!(
                "params: vocab {}, word_emb {:?}, w_t {:?}, w_f {:?}, w_p {:?}",
                vocab.len(),
                word_emb.shape(),
                w_t.shape(),
                w_f.shape(),
                w_p.shape()
            )));
        }
        Ok(ModelParams {
            vocab,
            word_emb,
            w_t,
            w_f,
            w_p,
            flags,
        })
    }

    pub fn d_text(&self) -> usize {
        self.word_emb.cols()
    }

    pub fn d_visual(&self) -> usize {
        self.w_f.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.word_emb.is_finite() && self.w_t.is_finite() && self.w_f.is_finite() && self.w_p.is_finite()
    }

    /// Trainable row for in-vocabulary words, the frozen table vector for
    /// words the model never saw, and the UNK row for everything else.
    pub fn word_ref(&self, word: &str, table: &EmbeddingTable) -> WordRef {
        match self.vocab.get(word) {
            Some(r) => WordRef::Row(r),
            None => match table.get(word) {
                Some(v) => WordRef::Frozen(v.to_vec()),
                None => WordRef::Row(0),
            },
        }
    }

    pub fn word_vector<'a>(&'a self, w: &'a WordRef) -> &'a [f64] {
        match w {
            WordRef::Row(r) => self.word_emb.row(*r),
            WordRef::Frozen(v) => v,
        }
    }

    pub fn encode_caption(&self, words: &[Vec<String>], table: &EmbeddingTable) -> CaptionInput {
        CaptionInput {
            phrases: words
                .iter()
                .map(|ws| PhraseInput {
                    words: ws.iter().map(|w| self.word_ref(w, table)).collect(),
                })
                .collect(),
        }
    }
}

/// Per-object inputs to the visual representation.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInput {
    pub label: Vec<f64>,
    pub attributes: Vec<f64>,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub objects: Vec<ObjectInput>,
}

impl ImageInput {
    pub fn encode(image: &ImageRecord, table: &EmbeddingTable, features: &FeatureStore) -> Self {
        ImageInput {
            objects: image
                .objects
                .iter()
                .map(|o| ObjectInput {
                    label: table.embed_label(&o.label),
                    attributes: table.embed_attributes(&o.attributes),
                    feature: features.row(o.feature_index).to_vec(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WordRef {
    Row(usize),
    Frozen(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseInput {
    pub words: Vec<WordRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionInput {
    pub phrases: Vec<PhraseInput>,
}

/// `v = l + W_t t + W_fᵀ f`, each term gated by the model's flags.
pub fn compute_vfr(obj: &ObjectInput, params: &ModelParams) -> Result<Vec<f64>> {
    let d = params.d_text();
    if obj.label.len() != d || obj.attributes.len() != d || obj.feature.len() != params.d_visual() {
        return Err(Error::Shape(format!(
            "object inputs l={}, t={}, f={} for d_T={d}, d_V={}",
            obj.label.len(),
            obj.attributes.len(),
            obj.feature.len(),
            params.d_visual()
        )));
    }
    let flags = params.flags;
    let mut v = if flags.use_labels {
        obj.label.clone()
    } else {
        vec![0.0; d]
    };
    if flags.use_attributes {
        axpy(&mut v, 1.0, &params.w_t.matvec(&obj.attributes)?);
    }
    if flags.use_features {
        axpy(&mut v, 1.0, &params.w_f.matvec_t(&obj.feature)?);
    }
    Ok(v)
}

pub fn compute_image_vfr(image: &ImageInput, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    image.objects.iter().map(|o| compute_vfr(o, params)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordObjectScores {
    /// `K × M`, each row a softmax over objects.
    pub a: Mat,
    pub alpha: Vec<f64>,
    /// Object attaining `alpha[k]`.
    pub argmax: Vec<usize>,
}

/// Scaled dot-product matching of every word against every object.
pub fn word_object_scores<H: AsRef<[f64]>>(h: &[H], v: &[Vec<f64>], d: usize) -> Result<WordObjectScores> {
    if v.is_empty() {
        return Err(Error::NoObjects);
    }
    if h.is_empty() {
        return Err(Error::EmptyPhrase);
    }
    let scale = 1.0 / (d as f64).sqrt();
    let m = v.len();
    let mut a = Mat::zeros(h.len(), m);
    let mut alpha = Vec::with_capacity(h.len());
    let mut arg = Vec::with_capacity(h.len());
    for (k, hk) in h.iter().enumerate() {
        let hk = hk.as_ref();
        let scores: Vec<f64> = v.iter().map(|vm| dot(hk, vm) * scale).collect();
        let probs = softmax(&scores)?;
        let best = argmax(&probs).expect("nonempty");
        alpha.push(probs[best]);
        arg.push(best);
        a.row_mut(k).copy_from_slice(&probs);
    }
    Ok(WordObjectScores { a, alpha, argmax: arg })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tfr {
    pub beta: Vec<f64>,
    /// `Σ_k β_k h_k`
    pub pooled: Vec<f64>,
    /// `W_p · pooled`
    pub e: Vec<f64>,
}

/// Attention-pooled phrase representation.
pub fn compute_tfr<H: AsRef<[f64]>>(h: &[H], alpha: &[f64], w_p: &Mat) -> Result<Tfr> {
    if h.len() != alpha.len() {
        return Err(Error::Shape(format!("{} words but {} weights", h.len(), alpha.len())));
    }
    let beta = softmax(alpha)?;
    let mut pooled = vec![0.0; w_p.cols()];
    for (hk, &b) in h.iter().zip(&beta) {
        let hk = hk.as_ref();
        if hk.len() != pooled.len() {
            return Err(Error::Shape(format!("word vector {} vs d_T {}", hk.len(), pooled.len())));
        }
        axpy(&mut pooled, b, hk);
    }
    let e = w_p.matvec(&pooled)?;
    Ok(Tfr { beta, pooled, e })
}

/// `A[n][m] = e_n · v_m`
pub fn similarity_matrix(e: &[Vec<f64>], v: &[Vec<f64>]) -> Mat {
    let mut a = Mat::zeros(e.len(), v.len());
    for (n, en) in e.iter().enumerate() {
        for (m, vm) in v.iter().enumerate() {
            a.set(n, m, dot(en, vm));
        }
    }
    a
}

/// Mean over phrases of the best object score, plus each row's argmax.
pub fn image_caption_sim(a: &Mat) -> Result<(f64, Vec<usize>)> {
    if a.cols() == 0 {
        return Err(Error::NoObjects);
    }
    if a.rows() == 0 {
        return Err(Error::EmptyPhrase);
    }
    let mut total = 0.0;
    let mut arg = Vec::with_capacity(a.rows());
    for n in 0..a.rows() {
        let row = a.row(n);
        let m = argmax(row).expect("nonempty");
        total += row[m];
        arg.push(m);
    }
    Ok((total / a.rows() as f64, arg))
}

/// Mean over captions `j` of `−log softmax_i(sims[·][j])[j]`.
///
/// `sims[i][j]` is the similarity of image `i` with caption `j`; the
/// diagonal holds the positive pairs.
pub fn contrastive_loss(sims: &Mat) -> f64 {
    let b = sims.rows();
    debug_assert_eq!(b, sims.cols());
    let mut total = 0.0;
    let mut col = vec![0.0; b];
    for j in 0..b {
        for (i, c) in col.iter_mut().enumerate() {
            *c = sims.get(i, j);
        }
        total += log_sum_exp(&col) - sims.get(j, j);
    }
    total / b as f64
}

/// `∂L/∂sims` for [`contrastive_loss`].
pub fn contrastive_loss_grad(sims: &Mat) -> Mat {
    let b = sims.rows();
    let mut g = Mat::zeros(b, b);
    let mut col = vec![0.0; b];
    for j in 0..b {
        for (i, c) in col.iter_mut().enumerate() {
            *c = sims.get(i, j);
        }
        let p = softmax(&col).expect("b >= 1");
        for (i, pi) in p.iter().enumerate() {
            let delta = if i == j { 1.0 } else { 0.0 };
            g.set(i, j, (pi - delta) / b as f64);
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseTrace {
    pub h: Vec<Vec<f64>>,
    pub scores: WordObjectScores,
    pub tfr: Tfr,
}

/// Cached intermediates for one (image, caption) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTrace {
    pub phrases: Vec<PhraseTrace>,
    /// `N × M` phrase-object similarity.
    pub similarity: Mat,
    pub row_argmax: Vec<usize>,
    pub sim: f64,
}

impl PairTrace {
    /// Every argmax decision taken in the pair; a change means a `max` switched.
    pub fn argmax_signature(&self) -> Vec<usize> {
        let mut sig = self.row_argmax.clone();
        for p in &self.phrases {
            sig.extend_from_slice(&p.scores.argmax);
        }
        sig
    }
}

/// Forward pass of one caption against one image's object representations.
pub fn forward_pair(params: &ModelParams, vfr: &[Vec<f64>], caption: &CaptionInput) -> Result<PairTrace> {
    if vfr.is_empty() {
        return Err(Error::NoObjects);
    }
    let d = params.d_text();
    let mut phrases = Vec::with_capacity(caption.phrases.len());
    for p in &caption.phrases {
        let h: Vec<Vec<f64>> = p.words.iter().map(|w| params.word_vector(w).to_vec()).collect();
        let scores = word_object_scores(&h, vfr, d)?;
        let tfr = match params.flags.pooling {
            Pooling::Attention => compute_tfr(&h, &scores.alpha, &params.w_p)?,
            Pooling::Mean => compute_tfr(&h, &vec![0.0; h.len()], &params.w_p)?,
        };
        phrases.push(PhraseTrace { h, scores, tfr });
    }
    let e: Vec<Vec<f64>> = phrases.iter().map(|p| p.tfr.e.clone()).collect();
    let similarity = similarity_matrix(&e, vfr);
    let (sim, row_argmax) = image_caption_sim(&similarity)?;
    Ok(PairTrace {
        phrases,
        similarity,
        row_argmax,
        sim,
    })
}

/// Forward state for a batch of positive pairs `(images[i], captions[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchTrace {
    pub vfr: Vec<Vec<Vec<f64>>>,
    /// Row-major `B × B`: `pairs[i * B + j]` is image `i` with caption `j`.
    pub pairs: Vec<PairTrace>,
    pub sims: Mat,
    pub loss: f64,
}

impl BatchTrace {
    pub fn batch_size(&self) -> usize {
        self.vfr.len()
    }

    pub fn pair(&self, image: usize, caption: usize) -> Result<&PairTrace> {
        let b = self.batch_size();
        if image >= b || caption >= b {
            return Err(Error::MissingTrace { image, caption });
        }
        self.pairs
            .get(image * b + caption)
            .ok_or(Error::MissingTrace { image, caption })
    }

    pub fn argmax_signature(&self) -> Vec<usize> {
        self.pairs.iter().flat_map(|p| p.argmax_signature()).collect()
    }
}

pub fn batch_forward(params: &ModelParams, images: &[&ImageInput], captions: &[&CaptionInput]) -> Result<BatchTrace> {
    let b = images.len();
    if b == 0 || captions.len() != b {
        return Err(Error::Shape(format!("batch of {b} images and {} captions", captions.len())));
    }
    let vfr = images
        .par_iter()
        .map(|im| compute_image_vfr(im, params))
        .collect::<Result<Vec<_>>>()?;
    let rows = vfr
        .par_iter()
        .map(|v| {
            captions
                .iter()
                .map(|c| forward_pair(params, v, c))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<PairTrace> = rows.into_iter().flatten().collect();
    let mut sims = Mat::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            sims.set(i, j, pairs[i * b + j].sim);
        }
    }
    let loss = contrastive_loss(&sims);
    Ok(BatchTrace { vfr, pairs, sims, loss })
}

/// Gradients with the same shapes as [`ModelParams`]; word-embedding rows are
/// stored sparsely by vocabulary index.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub word_emb: BTreeMap<usize, Vec<f64>>,
    pub w_t: Mat,
    pub w_f: Mat,
    pub w_p: Mat,
}

impl Gradients {
    pub fn zeros(params: &ModelParams) -> Self {
        let d = params.d_text();
        Gradients {
            word_emb: BTreeMap::new(),
            w_t: Mat::zeros(d, d),
            w_f: Mat::zeros(params.d_visual(), d),
            w_p: Mat::zeros(d, d),
        }
    }

    pub fn dense_word_emb(&self, rows: usize, d: usize) -> Mat {
        let mut m = Mat::zeros(rows, d);
        for (&r, g) in &self.word_emb {
            m.row_mut(r).copy_from_slice(g);
        }
        m
    }

    fn add_word(&mut self, row: usize, scale: f64, g: &[f64]) {
        let d = g.len();
        let acc = self.word_emb.entry(row).or_insert_with(|| vec![0.0; d]);
        axpy(acc, scale, g);
    }

    fn merge(&mut self, other: Gradients) {
        for (r, g) in other.word_emb {
            self.add_word(r, 1.0, &g);
        }
        axpy(self.w_t.as_mut_slice(), 1.0, other.w_t.as_slice());
        axpy(self.w_f.as_mut_slice(), 1.0, other.w_f.as_slice());
        axpy(self.w_p.as_mut_slice(), 1.0, other.w_p.as_slice());
    }

    pub fn is_finite(&self) -> bool {
        self.w_t.is_finite()
            && self.w_f.is_finite()
            && self.w_p.is_finite()
            && self.word_emb.values().flatten().all(|v| v.is_finite())
    }
}

/// Accumulates `weight · ∂sim/∂(·)` for one pair. Object-representation
/// gradients land in `dv`; everything else in `grads`.
fn backward_pair(
    params: &ModelParams,
    vfr: &[Vec<f64>],
    caption: &CaptionInput,
    trace: &PairTrace,
    weight: f64,
    dv: &mut [Vec<f64>],
    grads: &mut Gradients,
) {
    let d = params.d_text();
    let scale = 1.0 / (d as f64).sqrt();
    let n_phrases = trace.phrases.len() as f64;
    let attention = params.flags.pooling == Pooling::Attention;
    for ((phrase, pt), &m_star) in caption.phrases.iter().zip(&trace.phrases).zip(&trace.row_argmax) {
        let g_a = weight / n_phrases;
        if g_a == 0.0 {
            continue;
        }
        // A[n][m*] = e_n · v_m*
        let g_e: Vec<f64> = vfr[m_star].iter().map(|x| g_a * x).collect();
        axpy(&mut dv[m_star], g_a, &pt.tfr.e);
        // e = W_p · pooled
        grads.w_p.add_outer(1.0, &g_e, &pt.tfr.pooled);
        let g_pooled = params.w_p.matvec_t(&g_e).expect("shapes checked in forward");
        // pooled = Σ β_k h_k
        let beta = &pt.tfr.beta;
        let mut g_h: Vec<Vec<f64>> = beta.iter().map(|&b| g_pooled.iter().map(|x| b * x).collect()).collect();
        if attention {
            let g_beta: Vec<f64> = pt.h.iter().map(|hk| dot(hk, &g_pooled)).collect();
            let mean: f64 = beta.iter().zip(&g_beta).map(|(b, g)| b * g).sum();
            let a = &pt.scores.a;
            for (k, hk) in pt.h.iter().enumerate() {
                // β = softmax(α), α_k = a_k[m*_k], a_k = softmax_m(h_k·v_m/√d)
                let g_alpha = beta[k] * (g_beta[k] - mean);
                if g_alpha == 0.0 {
                    continue;
                }
                let mk = pt.scores.argmax[k];
                let a_star = a.get(k, mk);
                for (m, vm) in vfr.iter().enumerate() {
                    let delta = if m == mk { 1.0 } else { 0.0 };
                    let g_s = g_alpha * a.get(k, m) * (delta - a_star) * scale;
                    axpy(&mut g_h[k], g_s, vm);
                    axpy(&mut dv[m], g_s, hk);
                }
            }
        }
        for (w, gh) in phrase.words.iter().zip(&g_h) {
            if let WordRef::Row(r) = w {
                grads.add_word(*r, 1.0, gh);
            }
        }
    }
}

/// Analytic gradient of the batch loss in `trace` with respect to every
/// trainable parameter.
///
/// Rows (images) are processed in parallel and reduced in index order, so the
/// result does not depend on the thread count.
pub fn backward(
    params: &ModelParams,
    images: &[&ImageInput],
    captions: &[&CaptionInput],
    trace: &BatchTrace,
) -> Result<Gradients> {
    let b = trace.batch_size();
    if images.len() != b || captions.len() != b || trace.pairs.len() != b * b {
        return Err(Error::MissingTrace {
            image: images.len(),
            caption: captions.len(),
        });
    }
    let g_sims = contrastive_loss_grad(&trace.sims);
    let partials = (0..b)
        .into_par_iter()
        .map(|i| -> Result<Gradients> {
            let vfr = &trace.vfr[i];
            let mut grads = Gradients::zeros(params);
            let mut dv = vec![vec![0.0; params.d_text()]; vfr.len()];
            for (j, caption) in captions.iter().enumerate() {
                let pair = trace.pair(i, j)?;
                backward_pair(params, vfr, caption, pair, g_sims.get(i, j), &mut dv, &mut grads);
            }
            let flags = params.flags;
            for (obj, g_v) in images[i].objects.iter().zip(&dv) {
                if flags.use_attributes {
                    grads.w_t.add_outer(1.0, g_v, &obj.attributes);
                }
                if flags.use_features {
                    grads.w_f.add_outer(1.0, &obj.feature, g_v);
                }
            }
            Ok(grads)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::zeros(params);
    for g in partials {
        total.merge(g);
    }
    Ok(total)
}
