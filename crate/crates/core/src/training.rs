//! Parameter initialization, batching, the epoch loop, and checkpoints.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, EmbeddingTable, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::{backward, batch_forward, CaptionInput, FeatureFlags, ImageInput, ModelParams, Vocab};
use crate::numerics::{adam_step, xavier_init, AdamState, Mat, Rng};

/// Initialization scheme for a projection matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// All zeros.
    Zero,
    /// Xavier uniform.
    Xavier,
    /// Identity plus `id_noise_scale` times Xavier noise.
    IdNoise,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::Zero => "zero",
            Init::Xavier => "xavier",
            Init::IdNoise => "id-noise",
        }
    }
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Init::Zero),
            "xavier" => Ok(Init::Xavier),
            "id-noise" => Ok(Init::IdNoise),
            other => Err(Error::Config(format!("unknown init scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub init_wf: Init,
    pub init_wp: Init,
    pub init_wt: Init,
    pub id_noise_scale: f64,
    pub flags: FeatureFlags,
    pub confidence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 64,
            lr: 1e-5,
            seed: 0,
            init_wf: Init::Zero,
            init_wp: Init::IdNoise,
            init_wt: Init::Zero,
            id_noise_scale: 0.01,
            flags: FeatureFlags::default(),
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.id_noise_scale.is_finite() && self.id_noise_scale >= 0.0) {
            return bad("id noise scale must be non-negative");
        }
        if !(0.0..1.0).contains(&self.confidence_threshold) {
            return bad("confidence threshold must lie in [0, 1)");
        }
        Ok(())
    }
}

fn init_matrix(scheme: Init, rows: usize, cols: usize, noise: f64, rng: &mut Rng) -> Mat {
    match scheme {
        Init::Zero => Mat::zeros(rows, cols),
        Init::Xavier => xavier_init(rows, cols, rng),
        Init::IdNoise => {
            let mut m = xavier_init(rows, cols, rng);
            m.as_mut_slice().iter_mut().for_each(|x| *x *= noise);
            for i in 0..rows.min(cols) {
                m.set(i, i, m.get(i, i) + 1.0);
            }
            m
        }
    }
}

/// Word embeddings copied from `table` for every token in `vocab` (UNK row
/// from the table's UNK vector); projections per the configured schemes.
pub fn init_params(config: &TrainConfig, table: &EmbeddingTable, vocab: Vocab, d_visual: usize, rng: &Rng) -> ModelParams {
    let d = table.dim();
    let mut word_emb = Mat::zeros(vocab.len(), d);
    for (r, tok) in vocab.tokens().iter().enumerate() {
        let v = if r == 0 { table.unk() } else { table.embed_word(tok) };
        word_emb.row_mut(r).copy_from_slice(v);
    }
    let noise = config.id_noise_scale;
    let w_t = init_matrix(config.init_wt, d, d, noise, &mut rng.fork(1));
    let w_f = init_matrix(config.init_wf, d_visual, d, noise, &mut rng.fork(2));
    let w_p = init_matrix(config.init_wp, d, d, noise, &mut rng.fork(3));
    ModelParams::new(vocab, word_emb, w_t, w_f, w_p, config.flags).expect("shapes follow from table and d_visual")
}

/// Initial parameters for training on `dataset`: the vocabulary is every
/// in-table phrase word of the dataset.
pub fn init_for_dataset(config: &TrainConfig, dataset: &Dataset, table: &EmbeddingTable) -> ModelParams {
    let words = dataset.phrase_vocabulary();
    let vocab = Vocab::from_words(&words, table);
    init_params(config, table, vocab, dataset.features.dim(), &Rng::new(config.seed))
}

/// `(image index, caption index)`
pub type PairRef = (usize, usize);

/// Every (image, caption) pair whose image has at least one object, plus the
/// number of pairs dropped for having none.
pub fn training_pairs(dataset: &Dataset) -> (Vec<PairRef>, usize) {
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (i, im) in dataset.images.iter().enumerate() {
        for c in 0..im.captions.len() {
            if im.objects.is_empty() {
                dropped += 1;
            } else {
                pairs.push((i, c));
            }
        }
    }
    (pairs, dropped)
}

/// Shuffled batches for `epoch`. The final short batch is kept.
pub fn make_batches(dataset: &Dataset, batch_size: usize, rng: &Rng, epoch: usize) -> Result<Vec<Vec<PairRef>>> {
    let (mut pairs, dropped) = training_pairs(dataset);
    if dropped > 0 && epoch == 0 {
        log::info!("excluded {dropped} image-caption pairs with no detected objects");
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    rng.fork(epoch as u64).shuffle(&mut pairs);
    Ok(pairs.chunks(batch_size).map(<[PairRef]>::to_vec).collect())
}

/// Adam state for each trainable tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    word_emb: AdamState,
    w_t: AdamState,
    w_f: AdamState,
    w_p: AdamState,
    word_grad: Vec<f64>,
}

impl Optimizer {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Optimizer {
            word_emb: AdamState::new(params.word_emb.as_slice().len(), lr),
            w_t: AdamState::new(params.w_t.as_slice().len(), lr),
            w_f: AdamState::new(params.w_f.as_slice().len(), lr),
            w_p: AdamState::new(params.w_p.as_slice().len(), lr),
            word_grad: vec![0.0; params.word_emb.as_slice().len()],
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &crate::model::Gradients) -> Result<()> {
        let d = params.d_text();
        self.word_grad.iter_mut().for_each(|x| *x = 0.0);
        for (&r, g) in &grads.word_emb {
            self.word_grad[r * d..(r + 1) * d].copy_from_slice(g);
        }
        adam_step(params.word_emb.as_mut_slice(), &self.word_grad, &mut self.word_emb)?;
        adam_step(params.w_t.as_mut_slice(), grads.w_t.as_slice(), &mut self.w_t)?;
        adam_step(params.w_f.as_mut_slice(), grads.w_f.as_slice(), &mut self.w_f)?;
        adam_step(params.w_p.as_mut_slice(), grads.w_p.as_slice(), &mut self.w_p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wallclock_s: f64,
}

/// Inputs encoded once for the whole run.
struct Encoded {
    images: Vec<ImageInput>,
    captions: Vec<Vec<CaptionInput>>,
}

fn encode(dataset: &Dataset, params: &ModelParams, table: &EmbeddingTable) -> Encoded {
    let images = dataset
        .images
        .iter()
        .map(|im| ImageInput::encode(im, table, &dataset.features))
        .collect();
    let captions = dataset
        .images
        .iter()
        .map(|im| {
            im.captions
                .iter()
                .map(|c| {
                    let words: Vec<Vec<String>> = c.phrases.iter().map(|p| p.words.clone()).collect();
                    params.encode_caption(&words, table)
                })
                .collect()
        })
        .collect();
    Encoded { images, captions }
}

/// Mean contrastive loss over `dataset` under `params`, batched like training
/// but without shuffling.
pub fn dataset_loss(dataset: &Dataset, params: &ModelParams, table: &EmbeddingTable, batch_size: usize) -> Result<f64> {
    let enc = encode(dataset, params, table);
    let (pairs, _) = training_pairs(dataset);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for batch in pairs.chunks(batch_size.max(1)) {
        let images: Vec<&ImageInput> = batch.iter().map(|&(i, _)| &enc.images[i]).collect();
        let caps: Vec<&CaptionInput> = batch.iter().map(|&(i, c)| &enc.captions[i][c]).collect();
        total += batch_forward(params, &images, &caps)?.loss * batch.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Runs the full schedule from `params`, calling `on_epoch` after each epoch.
pub fn train_from(
    mut params: ModelParams,
    dataset: &Dataset,
    table: &EmbeddingTable,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    config.validate()?;
    let enc = encode(dataset, &params, table);
    let mut opt = Optimizer::new(&params, config.lr);
    let shuffle_rng = Rng::new(config.seed).fork(4);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let batches = make_batches(dataset, config.batch_size, &shuffle_rng, epoch)?;
        let (mut total, mut count) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            let images: Vec<&ImageInput> = batch.iter().map(|&(i, _)| &enc.images[i]).collect();
            let caps: Vec<&CaptionInput> = batch.iter().map(|&(i, c)| &enc.captions[i][c]).collect();
            let trace = batch_forward(&params, &images, &caps)?;
            if !trace.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                    loss: trace.loss,
                });
            }
            let grads = backward(&params, &images, &caps, &trace)?;
            opt.step(&mut params, &grads)?;
            total += trace.loss * batch.len() as f64;
            count += batch.len();
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: total / count as f64,
            wallclock_s: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {:>3}  loss {:.6}  ({:.2}s)", stats.epoch, stats.mean_loss, stats.wallclock_s);
        on_epoch(&stats);
        epoch_losses.push(stats.mean_loss);
    }
    Ok(Checkpoint {
        config: config.clone(),
        params,
        epoch_losses,
    })
}

/// Initializes from `table` and trains on `dataset`.
pub fn train(
    dataset: &Dataset,
    table: &EmbeddingTable,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<Checkpoint> {
    config.validate()?;
    let params = init_for_dataset(config, dataset, table);
    train_from(params, dataset, table, config, on_epoch)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MAFC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters with the configuration that produced them.
///
/// Binary layout (little-endian): `MAFC`, u32 version, u32 d_T, u32 d_V,
/// u32 vocab size, each token as u32 length + UTF-8 bytes, then `f64` tensors
/// `word_emb`, `w_t`, `w_f`, `w_p` row-major, then the config as u32 length +
/// JSON, then u32 epoch count + one `f64` mean loss per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub epoch_losses: Vec<f64>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("bad UTF-8 in checkpoint: {e}")))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, p.d_text());
        put_u32(&mut out, p.d_visual());
        put_u32(&mut out, p.vocab.len());
        for t in p.vocab.tokens() {
            put_u32(&mut out, t.len());
            out.extend_from_slice(t.as_bytes());
        }
        for m in [&p.word_emb, &p.w_t, &p.w_f, &p.w_p] {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        put_u32(&mut out, cfg.len());
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.epoch_losses.len());
        for v in &self.epoch_losses {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| Error::Format("not a checkpoint".into()))? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic (expected MAFC)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let d = r.u32()? as usize;
        let dv = r.u32()? as usize;
        let v = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(v.min(1 << 20));
        for _ in 0..v {
            tokens.push(r.string()?);
        }
        let vocab = Vocab::new(tokens.iter().skip(1).cloned());
        if vocab.tokens() != tokens.as_slice() {
            return Err(Error::Format("checkpoint vocabulary is not UNK-first and unique".into()));
        }
        let word_emb = Mat::from_vec(v, d, r.f64s(v * d)?)?;
        let w_t = Mat::from_vec(d, d, r.f64s(d * d)?)?;
        let w_f = Mat::from_vec(dv, d, r.f64s(dv * d)?)?;
        let w_p = Mat::from_vec(d, d, r.f64s(d * d)?)?;
        let cfg = r.string()?;
        let config: TrainConfig =
            serde_json::from_str(&cfg).map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
        let n = r.u32()? as usize;
        let epoch_losses = r.f64s(n)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        let params = ModelParams::new(vocab, word_emb, w_t, w_f, w_p, config.flags)?;
        Ok(Checkpoint {
            config,
            params,
            epoch_losses,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}
