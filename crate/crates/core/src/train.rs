//! Training loop: Adam, global-norm gradient clipping, review-level
//! mini-batches, early stopping on a held-out split, and evaluation.
//!
//! All randomness derives from one master seed fanned out to named
//! streams (init, dropout, shuffle, split, embed), so runs with the same
//! seed and config produce identical parameters and reports.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{
    load_embeddings, observed_lengths, pad_and_mask, unroll_aspects, AspectVocab, PaddedReview,
    Review, Tokenizer, Vocab, NUM_CLASSES,
};
use crate::error::{Error, Result};
use crate::layers::masked_cross_entropy;
use crate::model::{argmax_class, Dims, Model, ModelKind};
use crate::tensor::{GradientMap, Tape, Tensor};

/// Named RNG streams drawn from the master seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const EMBED: u64 = 5;
}

pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Every training hyperparameter. L2 regularization is fixed at zero.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub seed: u64,
    pub dims: Dims,
    pub l2: f64,
    /// Fraction of training reviews held out for early stopping. At zero
    /// the accuracy column of the report tracks the training set instead.
    pub val_fraction: f64,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            batch_size: 10,
            patience: 10,
            dropout_rate: 0.5,
            max_epochs: 200,
            seed: 42,
            dims: Dims::default(),
            l2: 0.0,
            val_fraction: 0.1,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config(
                "adam_eps and clip_norm must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        if self.l2 != 0.0 {
            return Err(Error::Config(
                "l2 regularization is fixed at zero; set l2 = 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn manifest(&self, kind: ModelKind, tokenizer: Tokenizer) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("model".into(), kind.as_str().into());
        map.insert(
            "tokenizer".into(),
            match tokenizer {
                Tokenizer::Simple => "simple".into(),
                Tokenizer::Pretokenized => "pretokenized".into(),
            },
        );
        map.insert("learning_rate".into(), self.learning_rate.to_string());
        map.insert("beta1".into(), self.beta1.to_string());
        map.insert("beta2".into(), self.beta2.to_string());
        map.insert("adam_eps".into(), self.adam_eps.to_string());
        map.insert("clip_norm".into(), self.clip_norm.to_string());
        map.insert("batch_size".into(), self.batch_size.to_string());
        map.insert("patience".into(), self.patience.to_string());
        map.insert("dropout_rate".into(), self.dropout_rate.to_string());
        map.insert("max_epochs".into(), self.max_epochs.to_string());
        map.insert("seed".into(), self.seed.to_string());
        map.insert("word_dim".into(), self.dims.word.to_string());
        map.insert("aspect_dim".into(), self.dims.aspect.to_string());
        map.insert("hidden_dim".into(), self.dims.hidden.to_string());
        map.insert("l2".into(), self.l2.to_string());
        map.insert("val_fraction".into(), self.val_fraction.to_string());
        map.insert("min_count".into(), self.min_count.to_string());
        map
    }
}

// ── Gradient clipping ────────────────────────────────────────────────

/// L2 norm of all gradients concatenated.
pub fn global_norm(grads: &GradientMap) -> f64 {
    grads
        .tensors()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale every gradient jointly when the global norm exceeds
/// `max_norm`; otherwise a no-op.
pub fn clip_gradients(mut grads: GradientMap, max_norm: f64) -> GradientMap {
    let norm = global_norm(&grads);
    if norm > max_norm {
        let factor = max_norm / norm;
        for t in grads.tensors_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
    grads
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Per-parameter first/second moment estimates keyed by parameter name.
#[derive(Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }
}

/// One Adam update on a single parameter:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - a * m_hat / (sqrt(v_hat) + eps)` with bias-corrected
/// `m_hat = m / (1 - b1^t)`, `v_hat = v / (1 - b2^t)`.
pub fn adam_update(
    theta: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    cfg: &TrainConfig,
) {
    debug_assert_eq!(theta.shape(), grad.shape());
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let md = m.data_mut();
    for (mi, &g) in md.iter_mut().zip(grad.data()) {
        *mi = b1 * *mi + (1.0 - b1) * g;
    }
    let vd = v.data_mut();
    for (vi, &g) in vd.iter_mut().zip(grad.data()) {
        *vi = b2 * *vi + (1.0 - b2) * g * g;
    }
    let td = theta.data_mut();
    for ((ti, mi), vi) in td.iter_mut().zip(m.data()).zip(v.data()) {
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        *ti -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// Apply one Adam step to every parameter of the model. `watched` must be
/// the tape-tracked alias of `model` that produced `grads`; the step
/// counter increments before the update.
pub fn adam_step(
    model: &mut Model,
    watched: &Model,
    grads: &GradientMap,
    state: &mut AdamState,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let tracked = watched.named_params();
    let mut i = 0;
    let t = state.t;
    model.visit_mut(&mut |name, theta| {
        let (tracked_name, tracked_tensor) = &tracked[i];
        debug_assert_eq!(&name, tracked_name);
        i += 1;
        let grad = grads.get_or_zeros(tracked_tensor);
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        let v = state
            .v
            .entry(name)
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        adam_update(theta, &grad, m, v, t, cfg);
    });
}

// ── Epoch loop ───────────────────────────────────────────────────────

/// One pass over the data in shuffled review-level mini-batches:
/// forward, masked cross-entropy, backward, clip, Adam. Returns the mean
/// batch loss.
pub fn run_epoch(
    model: &mut Model,
    data: &[PaddedReview],
    cfg: &TrainConfig,
    state: &mut AdamState,
    shuffle_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(shuffle_rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let watched = model.watch(&mut tape);
        let mut probs: Option<Tensor> = None;
        let mut labels: Vec<usize> = Vec::new();
        let mut mask: Vec<bool> = Vec::new();
        for &idx in chunk {
            let review = &data[idx];
            let p = watched.review_probs(
                &mut tape,
                review,
                cfg.dropout_rate,
                true,
                dropout_rng,
            )?;
            probs = Some(match probs {
                Some(acc) => tape.concat(&acc, &p, 0)?,
                None => p,
            });
            for s in 0..review.sentence_mask.len() {
                if review.sentence_mask[s] {
                    let label = review.labels[s].ok_or_else(|| {
                        Error::Validation(format!(
                            "review {} has an unlabeled instance; training needs polarities",
                            review.review_id
                        ))
                    })?;
                    labels.push(label);
                    mask.push(true);
                } else {
                    labels.push(0);
                    mask.push(false);
                }
            }
        }
        let probs = probs.expect("non-empty batch");
        let (loss, n_real) = masked_cross_entropy(&mut tape, &probs, &labels, &mask)?;
        if n_real == 0 {
            continue;
        }
        total += loss.item();
        batches += 1;
        let grads = tape.backward(&loss)?;
        drop(tape);
        let grads = clip_gradients(grads, cfg.clip_norm);
        adam_step(model, &watched, &grads, state, cfg);
    }
    if batches == 0 {
        return Err(Error::Config(
            "training dataset has no labeled instances".into(),
        ));
    }
    Ok(total / batches as f64)
}

// ── Early stopping ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stop once `patience` epochs have passed without improving on the best
/// accuracy; ties keep the first occurrence as best. Returns the decision
/// and the zero-based index of the best epoch.
pub fn early_stop_check(history: &[f64], patience: usize) -> (StopDecision, usize) {
    assert!(!history.is_empty(), "early_stop_check needs history");
    let mut best = 0;
    for (i, &acc) in history.iter().enumerate() {
        if acc > history[best] {
            best = i;
        }
    }
    let current = history.len() - 1;
    if current - best >= patience {
        (StopDecision::Stop, best)
    } else {
        (StopDecision::Continue, best)
    }
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[gold][predicted]` over real instances.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub n_instances: usize,
}

impl EvalReport {
    pub fn gold_counts(&self) -> [usize; NUM_CLASSES] {
        let mut out = [0; NUM_CLASSES];
        for (g, row) in self.confusion.iter().enumerate() {
            out[g] = row.iter().sum();
        }
        out
    }
}

/// Accuracy and confusion matrix over all real, labeled instances;
/// dropout off, padded slots excluded.
pub fn evaluate(model: &Model, data: &[PaddedReview]) -> Result<EvalReport> {
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut rng = stream_rng(0, streams::DROPOUT); // unused at inference
    for review in data {
        let mut tape = Tape::new();
        let probs = model.review_probs(&mut tape, review, 0.0, false, &mut rng)?;
        for s in 0..review.sentence_mask.len() {
            if !review.sentence_mask[s] {
                continue;
            }
            let gold = review.labels[s].ok_or_else(|| {
                Error::Validation(format!(
                    "review {} has an unlabeled instance; evaluation needs polarities",
                    review.review_id
                ))
            })?;
            let pred = argmax_class(&probs.data()[s * NUM_CLASSES..(s + 1) * NUM_CLASSES]);
            confusion[gold][pred] += 1;
            total += 1;
            if pred == gold {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Validation(
            "evaluation corpus has no labeled instances".into(),
        ));
    }
    Ok(EvalReport {
        accuracy: correct as f64 / total as f64,
        confusion,
        n_instances: total,
    })
}

// ── Full training driver ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub elapsed_ms: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose checkpoint is returned.
    pub best_epoch: usize,
    pub stopping_epoch: usize,
    pub wall_time_ms: u128,
    /// Whether the accuracy column tracks a held-out split (true) or the
    /// training set itself (val_fraction = 0).
    pub has_holdout: bool,
}

impl TrainReport {
    /// Line-delimited records, one per epoch.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&format!(
                "epoch={}\ttrain_loss={:.6}\tval_acc={:.6}\telapsed_ms={}\n",
                r.epoch, r.train_loss, r.val_acc, r.elapsed_ms
            ));
        }
        out
    }

    /// The deterministic portion of the report (wall times excluded),
    /// for seed-reproducibility comparisons.
    pub fn deterministic_fields(&self) -> Vec<(usize, String, String)> {
        self.epochs
            .iter()
            .map(|r| {
                (
                    r.epoch,
                    format!("{:.12}", r.train_loss),
                    format!("{:.12}", r.val_acc),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub kind: ModelKind,
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub embeddings: Option<PathBuf>,
}

pub struct FitOutcome {
    /// Best checkpoint by held-out accuracy; its model is the state to
    /// evaluate and predict with.
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub embedding_coverage: Option<f64>,
}

/// Train a model on parsed reviews: build the vocabulary and padding
/// lengths from the corpus, hold out a seeded review-level split for
/// early stopping, and return the best checkpoint.
pub fn fit(reviews: &[Review], opts: &FitOptions) -> Result<FitOutcome> {
    let cfg = &opts.config;
    cfg.validate()?;
    let started = Instant::now();

    // Unroll and drop reviews without labeled instances.
    let mut unrolled: Vec<(usize, Vec<crate::data::SentenceInstance>)> = Vec::new();
    for (i, review) in reviews.iter().enumerate() {
        let instances = unroll_aspects(review, opts.tokenizer);
        if instances.is_empty() {
            log::warn!(
                "review {} has no aspect-annotated sentences; dropped",
                review.review_id
            );
            continue;
        }
        unrolled.push((i, instances));
    }
    if unrolled.is_empty() {
        return Err(Error::Config(
            "corpus has no reviews with aspect annotations".into(),
        ));
    }

    let instance_lists: Vec<Vec<crate::data::SentenceInstance>> =
        unrolled.iter().map(|(_, v)| v.clone()).collect();
    let (l, h) = observed_lengths(&instance_lists);

    // Vocabulary over the sentences that survive unrolling (deduplicated
    // across aspect copies of the same sentence).
    let mut vocab_sentences: Vec<Vec<String>> = Vec::new();
    for (_, instances) in &unrolled {
        let mut last_id: Option<&str> = None;
        for inst in instances {
            if last_id != Some(inst.sentence_id.as_str()) {
                vocab_sentences.push(inst.tokens.clone());
                last_id = Some(inst.sentence_id.as_str());
            }
        }
    }
    let vocab = Vocab::build(vocab_sentences.iter().map(|s| s.as_slice()), cfg.min_count);
    let aspects = AspectVocab::build(reviews);

    // Optional pre-trained word table.
    let mut embedding_coverage = None;
    let word_table = match &opts.embeddings {
        Some(path) => {
            let mut rng = stream_rng(cfg.seed, streams::EMBED);
            let load = load_embeddings(path, &vocab, cfg.dims.word, &mut rng)?;
            log::info!(
                "embeddings: {}/{} non-reserved tokens covered ({:.1}%)",
                load.found,
                vocab.len().saturating_sub(2),
                load.coverage * 100.0
            );
            embedding_coverage = Some(load.coverage);
            Some(load.table)
        }
        None => None,
    };

    // Seeded review-level holdout.
    let mut split_rng = stream_rng(cfg.seed, streams::SPLIT);
    let mut order: Vec<usize> = (0..unrolled.len()).collect();
    order.shuffle(&mut split_rng);
    let n_val = (cfg.val_fraction * unrolled.len() as f64).floor() as usize;
    let val_set: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();

    let pad = |indices: &[usize]| -> Vec<PaddedReview> {
        indices
            .iter()
            .map(|&j| {
                let (orig, instances) = &unrolled[j];
                pad_and_mask(
                    &reviews[*orig].review_id,
                    instances,
                    l,
                    h,
                    &vocab,
                    &aspects,
                )
            })
            .collect()
    };
    let train_idx: Vec<usize> = (0..unrolled.len()).filter(|i| !val_set.contains(i)).collect();
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_data = pad(&train_idx);
    let val_data = pad(&val_idx);
    if train_data.is_empty() {
        return Err(Error::Config(
            "validation split leaves no training reviews".into(),
        ));
    }

    let mut init_rng = stream_rng(cfg.seed, streams::INIT);
    let mut model = Model::init(
        opts.kind,
        cfg.dims,
        vocab.len(),
        aspects.n_entities(),
        aspects.n_attributes(),
        &mut init_rng,
        word_table,
    );

    let mut adam = AdamState::new();
    let mut shuffle_rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, streams::DROPOUT);
    let manifest = cfg.manifest(opts.kind, opts.tokenizer);
    let snapshot = |model: &Model| -> Vec<u8> {
        Checkpoint {
            model: model.clone(),
            vocab: vocab.clone(),
            aspects: aspects.clone(),
            tokenizer: opts.tokenizer,
            sentence_len: l,
            review_len: h,
            config: manifest.clone(),
        }
        .to_bytes()
    };

    let mut history: Vec<f64> = Vec::new();
    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_bytes: Option<Vec<u8>> = None;
    let mut best_epoch = 0usize;
    let has_holdout = !val_data.is_empty();
    let mut stopping_epoch = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let epoch_start = Instant::now();
        let train_loss = run_epoch(
            &mut model,
            &train_data,
            cfg,
            &mut adam,
            &mut shuffle_rng,
            &mut dropout_rng,
        )?;
        let acc_data = if has_holdout { &val_data } else { &train_data };
        let val_acc = evaluate(&model, acc_data)?.accuracy;
        history.push(val_acc);
        let (decision, best_idx) = early_stop_check(&history, cfg.patience);
        if best_idx + 1 != best_epoch {
            best_epoch = best_idx + 1;
            best_bytes = Some(snapshot(&model));
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
            elapsed_ms: epoch_start.elapsed().as_millis(),
        });
        stopping_epoch = epoch;
        if decision == StopDecision::Stop {
            log::info!(
                "early stop at epoch {} (best epoch {})",
                epoch,
                best_epoch
            );
            break;
        }
    }

    let bytes = best_bytes.expect("at least one epoch ran");
    let checkpoint = Checkpoint::from_bytes(&bytes)?;
    Ok(FitOutcome {
        checkpoint,
        report: TrainReport {
            epochs: records,
            best_epoch,
            stopping_epoch,
            wall_time_ms: started.elapsed().as_millis(),
            has_holdout,
        },
        embedding_coverage,
    })
}
