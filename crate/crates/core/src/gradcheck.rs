//! Central finite-difference check of [`crate::model::backward`].

use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::model::{
    backward, batch_forward, CaptionInput, FeatureFlags, Gradients, ImageInput, ModelParams, ObjectInput,
    PhraseInput, Vocab, WordRef,
};
use crate::numerics::{Mat, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tensor {
    WordEmb,
    Wt,
    Wf,
    Wp,
}

impl Tensor {
    pub const ALL: [Tensor; 4] = [Tensor::WordEmb, Tensor::Wt, Tensor::Wf, Tensor::Wp];

    fn of(self, p: &ModelParams) -> &Mat {
        match self {
            Tensor::WordEmb => &p.word_emb,
            Tensor::Wt => &p.w_t,
            Tensor::Wf => &p.w_f,
            Tensor::Wp => &p.w_p,
        }
    }

    fn of_mut(self, p: &mut ModelParams) -> &mut Mat {
        match self {
            Tensor::WordEmb => &mut p.word_emb,
            Tensor::Wt => &mut p.w_t,
            Tensor::Wf => &mut p.w_f,
            Tensor::Wp => &mut p.w_p,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tensor::WordEmb => "word_emb",
            Tensor::Wt => "w_t",
            Tensor::Wf => "w_f",
            Tensor::Wp => "w_p",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub batch: usize,
    pub max_phrases: usize,
    pub max_objects: usize,
    pub max_words: usize,
    pub d_text: usize,
    pub d_visual: usize,
    pub vocab_size: usize,
    pub step: f64,
    pub tolerance: f64,
    pub flags: FeatureFlags,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            batch: 3,
            max_phrases: 3,
            max_objects: 4,
            max_words: 3,
            d_text: 5,
            d_visual: 7,
            vocab_size: 6,
            step: 1e-5,
            tolerance: 1e-5,
            flags: FeatureFlags {
                use_labels: true,
                use_attributes: true,
                use_features: true,
                pooling: Default::default(),
            },
        }
    }
}

/// A small batch with random parameters and inputs.
#[derive(Clone, Debug)]
pub struct Instance {
    pub params: ModelParams,
    pub images: Vec<ImageInput>,
    pub captions: Vec<CaptionInput>,
}

fn normal_vec(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

fn normal_mat(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, normal_vec(rng, rows * cols, scale)).expect("sized")
}

impl Instance {
    pub fn random(seed: u64, cfg: &GradCheckConfig) -> Self {
        let mut rng = Rng::new(seed);
        let (d, dv) = (cfg.d_text, cfg.d_visual);
        let vocab = Vocab::new((1..cfg.vocab_size).map(|i| format!("w{i}")));
        let params = ModelParams::new(
            vocab,
            normal_mat(&mut rng, cfg.vocab_size, d, 1.0),
            normal_mat(&mut rng, d, d, 0.4),
            normal_mat(&mut rng, dv, d, 0.4),
            normal_mat(&mut rng, d, d, 0.4),
            cfg.flags,
        )
        .expect("consistent shapes");
        let images = (0..cfg.batch)
            .map(|_| {
                let m = 1 + rng.below(cfg.max_objects);
                ImageInput {
                    objects: (0..m)
                        .map(|_| ObjectInput {
                            label: normal_vec(&mut rng, d, 1.0),
                            attributes: normal_vec(&mut rng, d, 1.0),
                            feature: normal_vec(&mut rng, dv, 1.0),
                        })
                        .collect(),
                }
            })
            .collect();
        let captions = (0..cfg.batch)
            .map(|_| {
                let n = 1 + rng.below(cfg.max_phrases);
                CaptionInput {
                    phrases: (0..n)
                        .map(|_| {
                            let k = 1 + rng.below(cfg.max_words);
                            PhraseInput {
                                words: (0..k).map(|_| WordRef::Row(rng.below(cfg.vocab_size))).collect(),
                            }
                        })
                        .collect(),
                }
            })
            .collect();
        Instance {
            params,
            images,
            captions,
        }
    }

    fn refs(&self) -> (Vec<&ImageInput>, Vec<&CaptionInput>) {
        (self.images.iter().collect(), self.captions.iter().collect())
    }

    /// Batch loss and argmax signature under `params`.
    pub fn evaluate(&self, params: &ModelParams) -> Result<(f64, Vec<usize>)> {
        let (im, cap) = self.refs();
        let t = batch_forward(params, &im, &cap)?;
        Ok((t.loss, t.argmax_signature()))
    }

    pub fn analytic(&self) -> Result<Gradients> {
        let (im, cap) = self.refs();
        let t = batch_forward(&self.params, &im, &cap)?;
        backward(&self.params, &im, &cap, &t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Coordinate {
    pub tensor: Tensor,
    pub row: usize,
    pub col: usize,
}

impl fmt::Display for Coordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{}]", self.tensor.name(), self.row, self.col)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub checked: usize,
    /// Coordinates whose ±step perturbation changes an argmax; not compared.
    pub skipped: Vec<Coordinate>,
    pub max_rel_err: f64,
    pub worst: Option<Coordinate>,
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "seed {:>3}: {} checked, {} tie-skipped, max rel err {:.3e}{} -> {}",
            self.seed,
            self.checked,
            self.skipped.len(),
            self.max_rel_err,
            self.worst.map(|c| format!(" at {c}")).unwrap_or_default(),
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn analytic_at(grads: &Gradients, c: Coordinate) -> f64 {
    match c.tensor {
        Tensor::WordEmb => grads.word_emb.get(&c.row).map_or(0.0, |g| g[c.col]),
        Tensor::Wt => grads.w_t.get(c.row, c.col),
        Tensor::Wf => grads.w_f.get(c.row, c.col),
        Tensor::Wp => grads.w_p.get(c.row, c.col),
    }
}

/// Compares `analytic` against central differences on every coordinate of
/// every trainable tensor.
pub fn compare(inst: &Instance, analytic: &Gradients, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (_, base_sig) = inst.evaluate(&inst.params)?;
    let mut params = inst.params.clone();
    let mut report = GradCheckReport {
        seed,
        checked: 0,
        skipped: Vec::new(),
        max_rel_err: 0.0,
        worst: None,
        tolerance: cfg.tolerance,
        passed: true,
    };
    for tensor in Tensor::ALL {
        let (rows, cols) = tensor.of(&inst.params).shape();
        for row in 0..rows {
            for col in 0..cols {
                let c = Coordinate { tensor, row, col };
                let orig = tensor.of(&params).get(row, col);
                tensor.of_mut(&mut params).set(row, col, orig + cfg.step);
                let (plus, sig_plus) = inst.evaluate(&params)?;
                tensor.of_mut(&mut params).set(row, col, orig - cfg.step);
                let (minus, sig_minus) = inst.evaluate(&params)?;
                tensor.of_mut(&mut params).set(row, col, orig);
                if sig_plus != base_sig || sig_minus != base_sig {
                    report.skipped.push(c);
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * cfg.step);
                let err = relative_error(analytic_at(analytic, c), numeric);
                report.checked += 1;
                if err > report.max_rel_err || err.is_nan() {
                    report.max_rel_err = err;
                    report.worst = Some(c);
                }
            }
        }
    }
    report.passed = report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// Builds the instance for `seed` and checks its analytic gradients.
pub fn grad_check(seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let inst = Instance::random(seed, cfg);
    let grads = inst.analytic()?;
    compare(&inst, &grads, seed, cfg)
}
