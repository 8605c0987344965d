//! Training: click scoring, negative-sampling batch construction, the
//! (K+1)-way softmax loss, Adam, and checkpoint persistence.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Impression;
use crate::error::{ConfigError, TensorError, TrainError};
use crate::eval::{aggregate, ImpressionScores, RankingMetrics};
use crate::model::{ModelDims, ParamStore, ParamTensor, View, ALL_VIEWS};
use crate::news_encoder::{encode_news, EncodeOptions};
use crate::tensor::{Tape, TensorId};
use crate::text::{unknown_news, TokenizedNews};
use crate::user_encoder::encode_user;

/// One training unit: a clicked news plus K non-clicked news from the
/// same impression.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub history: Vec<String>,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Hyperparameters. Defaults: 300-d word and
/// 100-d category embeddings, 400 filters of window 3, 200-d attention
/// queries, negative ratio 4, 20% dropout, Adam, batches of 100.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub word_dim: usize,
    pub cat_dim: usize,
    pub n_filters: usize,
    pub cnn_window: usize,
    pub dense_dim: usize,
    pub query_dim: usize,
    pub neg_ratio: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub m_max: usize,
    pub p_max: usize,
    pub n_max: usize,
    pub val_fraction: f64,
    pub active_views: Vec<View>,
    pub word_attention: bool,
    pub news_attention: bool,
    pub view_attention: bool,
    pub mask_empty_views: bool,
    pub freeze_embeddings: bool,
    pub mrr_first_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            word_dim: 300,
            cat_dim: 100,
            n_filters: 400,
            cnn_window: 3,
            dense_dim: 400,
            query_dim: 200,
            neg_ratio: 4,
            dropout: 0.2,
            batch_size: 100,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 5,
            seed: 42,
            m_max: 30,
            p_max: 100,
            n_max: 50,
            val_fraction: 0.1,
            active_views: ALL_VIEWS.to_vec(),
            word_attention: true,
            news_attention: true,
            view_attention: true,
            mask_empty_views: false,
            freeze_embeddings: false,
            mrr_first_only: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("word_dim", self.word_dim),
            ("cat_dim", self.cat_dim),
            ("n_filters", self.n_filters),
            ("cnn_window", self.cnn_window),
            ("query_dim", self.query_dim),
            ("neg_ratio", self.neg_ratio),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("m_max", self.m_max),
            ("p_max", self.p_max),
            ("n_max", self.n_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.cnn_window % 2 == 0 {
            return Err(ConfigError::Invalid("cnn_window must be odd".into()));
        }
        if self.dense_dim != self.n_filters {
            return Err(ConfigError::Invalid(format!(
                "dense_dim ({}) must equal n_filters ({}): all view vectors share that dimension",
                self.dense_dim, self.n_filters
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(ConfigError::Invalid("val_fraction must be in [0,1)".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(ConfigError::Invalid("learning_rate must be nonnegative".into()));
        }
        if self.active_views.is_empty() {
            return Err(ConfigError::Invalid("active_views must be nonempty".into()));
        }
        Ok(())
    }

    pub fn dims(&self, vocab_size: usize, n_categories: usize, n_subcategories: usize) -> ModelDims {
        ModelDims {
            vocab_size,
            word_dim: self.word_dim,
            n_categories,
            n_subcategories,
            cat_dim: self.cat_dim,
            n_filters: self.n_filters,
            cnn_half_window: self.cnn_window / 2,
            query_dim: self.query_dim,
        }
    }

    pub fn encode_options(&self, training: bool) -> EncodeOptions {
        EncodeOptions {
            active_views: self.active_views.clone(),
            word_attention: self.word_attention,
            view_attention: self.view_attention,
            news_attention: self.news_attention,
            dropout: self.dropout,
            training,
            mask_empty_views: self.mask_empty_views,
        }
    }
}

/// Inner-product click score.
pub fn score(u: &[f64], cand: &[f64]) -> Result<f64, TensorError> {
    if u.len() != cand.len() {
        return Err(TensorError::ShapeMismatch {
            op: "score",
            detail: format!("{} vs {}", u.len(), cand.len()),
        });
    }
    Ok(u.iter().zip(cand).map(|(a, b)| a * b).sum())
}

/// One sample per clicked candidate; negatives drawn from the non-clicked
/// candidates of the same impression, without replacement when enough
/// exist, with replacement otherwise. Impressions with no non-clicked
/// candidate are skipped and counted.
pub fn build_samples<R: Rng>(
    impressions: &[Impression],
    neg_ratio: usize,
    n_max: usize,
    rng: &mut R,
) -> (Vec<TrainSample>, usize) {
    assert!(neg_ratio >= 1);
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for imp in impressions {
        let negatives: Vec<&str> = imp
            .candidates
            .iter()
            .filter(|c| c.clicked == 0)
            .map(|c| c.news_id.as_str())
            .collect();
        let positives: Vec<&str> = imp
            .candidates
            .iter()
            .filter(|c| c.clicked != 0)
            .map(|c| c.news_id.as_str())
            .collect();
        if positives.is_empty() {
            continue;
        }
        if negatives.is_empty() {
            skipped += 1;
            continue;
        }
        let history: Vec<String> = crate::eval::recent_history(&imp.history, n_max).to_vec();
        for pos in positives {
            let negs: Vec<String> = if negatives.len() >= neg_ratio {
                let mut pool = negatives.clone();
                pool.shuffle(rng);
                pool.truncate(neg_ratio);
                pool.into_iter().map(String::from).collect()
            } else {
                (0..neg_ratio)
                    .map(|_| negatives[rng.gen_range(0..negatives.len())].to_string())
                    .collect()
            };
            samples.push(TrainSample {
                history: history.clone(),
                positive: pos.to_string(),
                negatives: negs,
            });
        }
    }
    (samples, skipped)
}

/// Posterior click probability of the positive under a (K+1)-way softmax
/// (max-subtracted) and its negative log-likelihood.
pub fn sample_loss(pos: f64, negs: &[f64]) -> (f64, f64) {
    let max = negs.iter().cloned().fold(pos, f64::max);
    let z: f64 = (pos - max).exp() + negs.iter().map(|y| (y - max).exp()).sum::<f64>();
    let p = (pos - max).exp() / z;
    (p, -p.ln())
}

/// Adam optimizer state (first/second moment per parameter, step counter).
#[derive(Debug, Clone)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| -> BTreeMap<String, Vec<f64>> {
            p.tensors
                .iter()
                .map(|(name, t)| (name.clone(), vec![0.0; t.data.len()]))
                .collect()
        };
        AdamState { m: zeros(params), v: zeros(params), t: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One Adam step with bias correction. Parameters named in `frozen` are
/// left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    frozen: &[&str],
) -> Result<(), TensorError> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, tensor) in params.tensors.iter_mut() {
        if frozen.contains(&name.as_str()) {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| TensorError::ShapeMismatch {
            op: "adam_step",
            detail: format!("missing gradient for {name}"),
        })?;
        if g.len() != tensor.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                detail: format!("gradient length {} vs parameter {}", g.len(), tensor.data.len()),
            });
        }
        let m = state.m.get_mut(name).unwrap();
        let v = state.v.get_mut(name).unwrap();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Per-epoch log line, mirrored into the metrics CSV.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_mrr: f64,
    pub val_ndcg5: f64,
    pub val_ndcg10: f64,
}

pub struct TrainOutput {
    /// Parameters from the epoch with the best validation AUC.
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub epoch_logs: Vec<EpochLog>,
    pub skipped_impressions: usize,
}

/// Forward one batch on a fresh tape, returning the mean loss tensor.
/// Each distinct news id in the batch is encoded once.
fn batch_loss<R: Rng>(
    tape: &mut Tape,
    bound: &crate::model::BoundParams,
    news: &HashMap<String, TokenizedNews>,
    batch: &[&TrainSample],
    cfg: &TrainConfig,
    dims: &ModelDims,
    rng: &mut R,
) -> Result<TensorId, TensorError> {
    let opts = cfg.encode_options(true);

    // Deterministic encode order: first appearance across the batch.
    let mut seen: std::collections::HashSet<&str> = std::collections::HashSet::new();
    let mut order: Vec<&str> = Vec::new();
    for s in batch {
        for id in s
            .history
            .iter()
            .chain(std::iter::once(&s.positive))
            .chain(s.negatives.iter())
        {
            if seen.insert(id.as_str()) {
                order.push(id.as_str());
            }
        }
    }
    let mut encoded: HashMap<&str, TensorId> = HashMap::new();
    for id in order {
        let item = news
            .get(id)
            .cloned()
            .unwrap_or_else(|| unknown_news(id, cfg.m_max, cfg.p_max));
        let out = encode_news(tape, bound, &item, &opts, dims, rng)?;
        encoded.insert(id, out.r);
    }

    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let history: Vec<TensorId> = s.history.iter().map(|id| encoded[id.as_str()]).collect();
        let user = encode_user(tape, bound, &history, dims.n_filters, cfg.news_attention)?;
        let mut scores = Vec::with_capacity(1 + s.negatives.len());
        for id in std::iter::once(&s.positive).chain(s.negatives.iter()) {
            let r = encoded[id.as_str()];
            let rt = tape.transpose(r)?;
            scores.push(tape.matmul(user.u, rt)?);
        }
        let all = tape.stack_rows(&scores)?;
        let lse = tape.log_sum_exp(all)?;
        losses.push(tape.sub(lse, scores[0])?);
    }
    let stacked = tape.stack_rows(&losses)?;
    let total = tape.sum(stacked)?;
    tape.scale(total, 1.0 / batch.len() as f64)
}

/// Validation samples are ranked as (K+1)-candidate pseudo-impressions.
fn validate_metrics(
    params: &ParamStore,
    news: &HashMap<String, TokenizedNews>,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    dims: &ModelDims,
) -> Result<RankingMetrics, TensorError> {
    let opts = cfg.encode_options(false);
    let mut cache: HashMap<String, Vec<f64>> = HashMap::new();
    let mut fallback: HashMap<String, TokenizedNews> = HashMap::new();
    let mut vector_of = |id: &str| -> Result<Vec<f64>, TensorError> {
        if let Some(v) = cache.get(id) {
            return Ok(v.clone());
        }
        let item = match news.get(id) {
            Some(n) => n.clone(),
            None => fallback
                .entry(id.to_string())
                .or_insert_with(|| unknown_news(id, cfg.m_max, cfg.p_max))
                .clone(),
        };
        let v = crate::news_encoder::encode_news_vector(params, dims, &item, &opts)?.r;
        cache.insert(id.to_string(), v.clone());
        Ok(v)
    };
    let mut scored = Vec::with_capacity(samples.len());
    for s in samples {
        let history: Vec<Vec<f64>> = s
            .history
            .iter()
            .map(|id| vector_of(id))
            .collect::<Result<_, _>>()?;
        let (u, _) = crate::user_encoder::encode_user_vector(params, dims, &history, cfg.news_attention)?;
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (i, id) in std::iter::once(&s.positive).chain(s.negatives.iter()).enumerate() {
            scores.push(score(&u, &vector_of(id)?)?);
            labels.push(u8::from(i == 0));
        }
        scored.push(ImpressionScores { scores, labels });
    }
    Ok(aggregate(scored, cfg.mrr_first_only))
}

/// Full training run: negative-sampling batches, Adam, per-epoch validation,
/// best-by-validation-AUC parameter selection. Deterministic given the seed.
pub fn train(
    news: &HashMap<String, TokenizedNews>,
    impressions: &[Impression],
    cfg: &TrainConfig,
    dims: &ModelDims,
    pretrained_words: Option<Vec<f64>>,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    dims.validate()?;
    if impressions.is_empty() {
        return Err(ConfigError::Invalid("no training impressions".into()).into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::init(dims, cfg.seed, pretrained_words);
    let (mut samples, skipped) = build_samples(impressions, cfg.neg_ratio, cfg.n_max, &mut rng);
    if samples.is_empty() {
        return Err(ConfigError::Invalid("no training samples (no impressions with both a click and a non-click)".into()).into());
    }
    samples.shuffle(&mut rng);
    let n_val = ((samples.len() as f64) * cfg.val_fraction).round() as usize;
    let val_samples: Vec<TrainSample> = samples.drain(..n_val.min(samples.len().saturating_sub(1))).collect();
    let train_samples = samples;

    let adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let mut adam = AdamState::new(&params);
    let frozen: Vec<&str> = if cfg.freeze_embeddings { vec!["word_embedding"] } else { vec![] };

    let mut epoch_logs = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut best_auc = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let loss = batch_loss(&mut tape, &bound, news, &batch, cfg, dims, &mut rng)
                .map_err(numeric_or(cfg, epoch))?;
            let loss_value = tape.scalar(loss);
            tape.backward(loss).map_err(numeric_or(cfg, epoch))?;
            let grads = bound.grads(&tape);
            adam_step(&mut params, &grads, &mut adam, &adam_cfg, &frozen)?;
            loss_sum += loss_value * batch.len() as f64;
        }
        let val = if val_samples.is_empty() {
            RankingMetrics {
                auc: 0.0,
                mrr: 0.0,
                ndcg5: 0.0,
                ndcg10: 0.0,
                n_impressions_used: 0,
                n_impressions_skipped: 0,
            }
        } else {
            validate_metrics(&params, news, &val_samples, cfg, dims)?
        };
        epoch_logs.push(EpochLog {
            epoch,
            train_loss: loss_sum / train_samples.len() as f64,
            val_auc: val.auc,
            val_mrr: val.mrr,
            val_ndcg5: val.ndcg5,
            val_ndcg10: val.ndcg10,
        });
        if val.auc > best_auc {
            best_auc = val.auc;
            best_epoch = epoch;
            best_params = params.clone();
        }
    }

    Ok(TrainOutput { best_params, best_epoch, epoch_logs, skipped_impressions: skipped })
}

fn numeric_or(_cfg: &TrainConfig, epoch: usize) -> impl Fn(TensorError) -> TrainError {
    move |e| match e {
        TensorError::NonFinite { op, node } => TrainError::Numerical(format!(
            "non-finite value during epoch {epoch}: op {op}, tape node {node}"
        )),
        other => TrainError::Tensor(other),
    }
}

pub fn write_metrics_csv(path: &Path, logs: &[EpochLog]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_auc,val_mrr,val_ndcg5,val_ndcg10")?;
    for l in logs {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            l.epoch, l.train_loss, l.val_auc, l.val_mrr, l.val_ndcg5, l.val_ndcg10
        )?;
    }
    Ok(())
}

// ── checkpoint format ────────────────────────────────────────────────
//
// magic "NAMLCKP1"
// u32 dims-JSON length, bytes
// u32 config-JSON length, bytes
// 32-byte vocabulary hash
// u32 tensor count, then per tensor:
//   u16 name length, name bytes, u8 dtype (0 = f64), u8 ndim,
//   ndim x u32 dims, little-endian f64 data

const CHECKPOINT_MAGIC: &[u8; 8] = b"NAMLCKP1";

pub struct Checkpoint {
    pub params: ParamStore,
    pub dims: ModelDims,
    pub config: TrainConfig,
    pub vocab_hash: [u8; 32],
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    dims: &ModelDims,
    config: &TrainConfig,
    vocab_hash: [u8; 32],
) -> Result<(), TrainError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let dims_json = serde_json::to_vec(dims).expect("dims serialize");
    buf.extend_from_slice(&(dims_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&dims_json);
    let cfg_json = serde_json::to_vec(config).expect("config serialize");
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&vocab_hash);
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in &params.tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(0u8); // f64
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| {
        TrainError::Data(crate::error::DataError::Io { path: path.display().to_string(), source: e })
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::MalformedCheckpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let buf = fs::read(path).map_err(|e| {
        TrainError::Data(crate::error::DataError::Io { path: path.display().to_string(), source: e })
    })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(TrainError::MalformedCheckpoint("bad magic".into()));
    }
    let n = r.u32()? as usize;
    let dims: ModelDims = serde_json::from_slice(r.take(n)?)
        .map_err(|e| TrainError::MalformedCheckpoint(format!("dims json: {e}")))?;
    let n = r.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| TrainError::MalformedCheckpoint(format!("config json: {e}")))?;
    let vocab_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| TrainError::MalformedCheckpoint(format!("tensor name: {e}")))?;
        let dtype = r.u8()?;
        if dtype != 0 {
            return Err(TrainError::MalformedCheckpoint(format!("unknown dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, ParamTensor { shape, data });
    }
    if r.pos != buf.len() {
        return Err(TrainError::MalformedCheckpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { params: ParamStore { tensors }, dims, config, vocab_hash })
}

/// Refuse to use a checkpoint against a vocabulary it was not trained with.
pub fn check_vocab_compat(ckpt: &Checkpoint, vocab_hash: [u8; 32]) -> Result<(), TrainError> {
    if ckpt.vocab_hash != vocab_hash {
        return Err(TrainError::IncompatibleCheckpoint(
            "vocabulary hash does not match the checkpoint".into(),
        ));
    }
    Ok(())
}
