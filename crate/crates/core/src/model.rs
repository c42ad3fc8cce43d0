//! The hierarchical review model and the sentence-level baseline.
//!
//! The hierarchical path encodes each sentence with a BiLSTM over word
//! embeddings, concatenates the two final states with the aspect vector,
//! feeds the per-sentence vectors through a review-level BiLSTM, and
//! projects every real sentence position to a distribution over the three
//! sentiment classes. The baseline applies a projection head directly to
//! the sentence vector and is context-blind by construction.
//!
//! Concatenation order is fixed as `[h_fw ; h_bw ; aspect]`. Dropout is
//! applied after the embedding lookup and after each BiLSTM level's
//! output (the baseline drops out the sentence vector before its head).

use rand::Rng;

use crate::data::{PaddedReview, Polarity, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::layers::{
    affine_softmax, bilstm, dropout, embedding_lookup, uniform_init, LstmParams, StepMask,
};
use crate::tensor::{Tape, Tensor};

/// Embedding and hidden sizes: word embedding `k`, aspect embedding `m`,
/// LSTM output `d` per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub word: usize,
    pub aspect: usize,
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            word: 300,
            aspect: 15,
            hidden: 200,
        }
    }
}

impl Dims {
    /// Sentence vector width: both direction finals plus the aspect slot.
    pub fn sentence_vec(&self) -> usize {
        2 * self.hidden + self.aspect
    }
}

/// All trainable arrays of the hierarchical model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: Dims,
    pub word_table: Tensor,
    pub entity_table: Tensor,
    pub attribute_table: Tensor,
    pub sent_fw: LstmParams,
    pub sent_bw: LstmParams,
    pub rev_fw: LstmParams,
    pub rev_bw: LstmParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

/// Trainable arrays of the sentence-level baseline: the first layer of the
/// hierarchical model plus its own projection head.
#[derive(Debug, Clone)]
pub struct BaselineParams {
    pub dims: Dims,
    pub word_table: Tensor,
    pub entity_table: Tensor,
    pub attribute_table: Tensor,
    pub sent_fw: LstmParams,
    pub sent_bw: LstmParams,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

fn word_table_init(vocab_size: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let mut table = uniform_init(vocab_size, k, rng);
    let data = table.data_mut();
    for v in data[..k].iter_mut() {
        *v = 0.0; // PAD row stays zero
    }
    table
}

impl ModelParams {
    pub fn init(
        dims: Dims,
        vocab_size: usize,
        n_entities: usize,
        n_attributes: usize,
        rng: &mut impl Rng,
        word_table: Option<Tensor>,
    ) -> ModelParams {
        let word_table =
            word_table.unwrap_or_else(|| word_table_init(vocab_size, dims.word, rng));
        ModelParams {
            word_table,
            entity_table: uniform_init(n_entities, dims.aspect, rng),
            attribute_table: uniform_init(n_attributes, dims.aspect, rng),
            sent_fw: LstmParams::init(dims.word, dims.hidden, rng),
            sent_bw: LstmParams::init(dims.word, dims.hidden, rng),
            rev_fw: LstmParams::init(dims.sentence_vec(), dims.hidden, rng),
            rev_bw: LstmParams::init(dims.sentence_vec(), dims.hidden, rng),
            out_w: uniform_init(2 * dims.hidden, NUM_CLASSES, rng),
            out_b: Tensor::zeros(&[NUM_CLASSES]),
            dims,
        }
    }

    /// All-zero arrays of the right shapes, a skeleton for checkpoint
    /// loading.
    pub fn zeros(
        dims: Dims,
        vocab_size: usize,
        n_entities: usize,
        n_attributes: usize,
    ) -> ModelParams {
        let zero_lstm = |input: usize, hidden: usize| LstmParams {
            w_i: Tensor::zeros(&[input, hidden]),
            u_i: Tensor::zeros(&[hidden, hidden]),
            b_i: Tensor::zeros(&[hidden]),
            w_f: Tensor::zeros(&[input, hidden]),
            u_f: Tensor::zeros(&[hidden, hidden]),
            b_f: Tensor::zeros(&[hidden]),
            w_o: Tensor::zeros(&[input, hidden]),
            u_o: Tensor::zeros(&[hidden, hidden]),
            b_o: Tensor::zeros(&[hidden]),
            w_c: Tensor::zeros(&[input, hidden]),
            u_c: Tensor::zeros(&[hidden, hidden]),
            b_c: Tensor::zeros(&[hidden]),
        };
        ModelParams {
            word_table: Tensor::zeros(&[vocab_size, dims.word]),
            entity_table: Tensor::zeros(&[n_entities, dims.aspect]),
            attribute_table: Tensor::zeros(&[n_attributes, dims.aspect]),
            sent_fw: zero_lstm(dims.word, dims.hidden),
            sent_bw: zero_lstm(dims.word, dims.hidden),
            rev_fw: zero_lstm(dims.sentence_vec(), dims.hidden),
            rev_bw: zero_lstm(dims.sentence_vec(), dims.hidden),
            out_w: Tensor::zeros(&[2 * dims.hidden, NUM_CLASSES]),
            out_b: Tensor::zeros(&[NUM_CLASSES]),
            dims,
        }
    }

    pub fn watch(&self, tape: &mut Tape) -> ModelParams {
        ModelParams {
            dims: self.dims,
            word_table: tape.param(&self.word_table),
            entity_table: tape.param(&self.entity_table),
            attribute_table: tape.param(&self.attribute_table),
            sent_fw: self.sent_fw.watch(tape),
            sent_bw: self.sent_bw.watch(tape),
            rev_fw: self.rev_fw.watch(tape),
            rev_bw: self.rev_bw.watch(tape),
            out_w: tape.param(&self.out_w),
            out_b: tape.param(&self.out_b),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("word_table".into(), &self.word_table);
        f("entity_table".into(), &self.entity_table);
        f("attribute_table".into(), &self.attribute_table);
        self.sent_fw.visit("sent_fw", f);
        self.sent_bw.visit("sent_bw", f);
        self.rev_fw.visit("rev_fw", f);
        self.rev_bw.visit("rev_bw", f);
        f("out_w".into(), &self.out_w);
        f("out_b".into(), &self.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("word_table".into(), &mut self.word_table);
        f("entity_table".into(), &mut self.entity_table);
        f("attribute_table".into(), &mut self.attribute_table);
        self.sent_fw.visit_mut("sent_fw", f);
        self.sent_bw.visit_mut("sent_bw", f);
        self.rev_fw.visit_mut("rev_fw", f);
        self.rev_bw.visit_mut("rev_bw", f);
        f("out_w".into(), &mut self.out_w);
        f("out_b".into(), &mut self.out_b);
    }
}

impl BaselineParams {
    pub fn init(
        dims: Dims,
        vocab_size: usize,
        n_entities: usize,
        n_attributes: usize,
        rng: &mut impl Rng,
        word_table: Option<Tensor>,
    ) -> BaselineParams {
        let word_table =
            word_table.unwrap_or_else(|| word_table_init(vocab_size, dims.word, rng));
        BaselineParams {
            word_table,
            entity_table: uniform_init(n_entities, dims.aspect, rng),
            attribute_table: uniform_init(n_attributes, dims.aspect, rng),
            sent_fw: LstmParams::init(dims.word, dims.hidden, rng),
            sent_bw: LstmParams::init(dims.word, dims.hidden, rng),
            out_w: uniform_init(dims.sentence_vec(), NUM_CLASSES, rng),
            out_b: Tensor::zeros(&[NUM_CLASSES]),
            dims,
        }
    }

    /// All-zero arrays of the right shapes, a skeleton for checkpoint
    /// loading.
    pub fn zeros(
        dims: Dims,
        vocab_size: usize,
        n_entities: usize,
        n_attributes: usize,
    ) -> BaselineParams {
        let full = ModelParams::zeros(dims, vocab_size, n_entities, n_attributes);
        BaselineParams {
            word_table: full.word_table,
            entity_table: full.entity_table,
            attribute_table: full.attribute_table,
            sent_fw: full.sent_fw,
            sent_bw: full.sent_bw,
            out_w: Tensor::zeros(&[dims.sentence_vec(), NUM_CLASSES]),
            out_b: Tensor::zeros(&[NUM_CLASSES]),
            dims,
        }
    }

    pub fn watch(&self, tape: &mut Tape) -> BaselineParams {
        BaselineParams {
            dims: self.dims,
            word_table: tape.param(&self.word_table),
            entity_table: tape.param(&self.entity_table),
            attribute_table: tape.param(&self.attribute_table),
            sent_fw: self.sent_fw.watch(tape),
            sent_bw: self.sent_bw.watch(tape),
            out_w: tape.param(&self.out_w),
            out_b: tape.param(&self.out_b),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("word_table".into(), &self.word_table);
        f("entity_table".into(), &self.entity_table);
        f("attribute_table".into(), &self.attribute_table);
        self.sent_fw.visit("sent_fw", f);
        self.sent_bw.visit("sent_bw", f);
        f("out_w".into(), &self.out_w);
        f("out_b".into(), &self.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("word_table".into(), &mut self.word_table);
        f("entity_table".into(), &mut self.entity_table);
        f("attribute_table".into(), &mut self.attribute_table);
        self.sent_fw.visit_mut("sent_fw", f);
        self.sent_bw.visit_mut("sent_bw", f);
        f("out_w".into(), &mut self.out_w);
        f("out_b".into(), &mut self.out_b);
    }
}

/// Which of the two architectures a checkpoint or run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hierarchical,
    Baseline,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Hierarchical => "hlstm",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "hlstm" => Ok(ModelKind::Hierarchical),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!(
                "unknown model '{}', expected 'hlstm' or 'baseline'",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Hierarchical(ModelParams),
    Baseline(BaselineParams),
}

/// Average of the entity and attribute embedding rows.
pub fn aspect_embed(
    tape: &mut Tape,
    entity_idx: usize,
    attribute_idx: usize,
    entity_table: &Tensor,
    attribute_table: &Tensor,
) -> Result<Tensor> {
    let e = tape.select_row(entity_table, entity_idx)?;
    let a = tape.select_row(attribute_table, attribute_idx)?;
    let sum = tape.add(&e, &a)?;
    tape.scale(&sum, 0.5)
}

/// Sentence-level parameters shared by both architectures.
pub struct EncodeCtx<'a> {
    pub word_table: &'a Tensor,
    pub entity_table: &'a Tensor,
    pub attribute_table: &'a Tensor,
    pub sent_fw: &'a LstmParams,
    pub sent_bw: &'a LstmParams,
    pub dims: Dims,
}

/// Encode one sentence instance: embedding lookup, dropout, sentence
/// BiLSTM, then `[final_fw.h ; final_bw.h ; aspect]`. A fully padded slot
/// yields the zero vector with a zero aspect slot.
pub fn encode_sentence(
    tape: &mut Tape,
    ctx: &EncodeCtx,
    token_ids: &[usize],
    token_mask: &StepMask,
    aspect: Option<(usize, usize)>,
    dropout_rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let xs = embedding_lookup(tape, token_ids, ctx.word_table)?;
    let xs = dropout(tape, &xs, dropout_rate, training, rng)?;
    let (_, (fin_fw, fin_bw)) = bilstm(tape, &xs, token_mask, ctx.sent_fw, ctx.sent_bw)?;
    let states = tape.concat(&fin_fw.h, &fin_bw.h, 0)?;
    let aspect_vec = match aspect {
        Some((e, a)) => aspect_embed(tape, e, a, ctx.entity_table, ctx.attribute_table)?,
        None => Tensor::zeros(&[ctx.dims.aspect]),
    };
    tape.concat(&states, &aspect_vec, 0)
}

/// Hierarchical forward pass over one padded review: per-sentence
/// probability rows, `[h, 3]`. Padded slots emit the uniform placeholder
/// and must be excluded downstream via the sentence mask.
pub fn forward_review(
    tape: &mut Tape,
    review: &PaddedReview,
    p: &ModelParams,
    dropout_rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let ctx = EncodeCtx {
        word_table: &p.word_table,
        entity_table: &p.entity_table,
        attribute_table: &p.attribute_table,
        sent_fw: &p.sent_fw,
        sent_bw: &p.sent_bw,
        dims: p.dims,
    };
    let h = review.sentence_mask.len();
    let mut sent_vecs = Vec::with_capacity(h);
    for s in 0..h {
        if review.sentence_mask[s] {
            sent_vecs.push(encode_sentence(
                tape,
                &ctx,
                &review.token_ids[s],
                &review.token_masks[s],
                review.aspects[s],
                dropout_rate,
                training,
                rng,
            )?);
        } else {
            sent_vecs.push(Tensor::zeros(&[p.dims.sentence_vec()]));
        }
    }
    let stacked = tape.stack_rows(&sent_vecs)?;
    let stacked = dropout(tape, &stacked, dropout_rate, training, rng)?;
    let smask = StepMask::new(review.sentence_mask.clone())?;
    let (hs, _) = bilstm(tape, &stacked, &smask, &p.rev_fw, &p.rev_bw)?;
    let mut prob_rows = Vec::with_capacity(h);
    for s in 0..h {
        if review.sentence_mask[s] {
            let h_s = tape.select_row(&hs, s)?;
            prob_rows.push(affine_softmax(tape, &h_s, &p.out_w, &p.out_b)?);
        } else {
            prob_rows.push(Tensor::fill(&[NUM_CLASSES], 1.0 / NUM_CLASSES as f64)?);
        }
    }
    tape.stack_rows(&prob_rows)
}

/// Baseline forward pass for a single instance: sentence encoding,
/// dropout, projection head. No review context.
pub fn forward_sentence_baseline(
    tape: &mut Tape,
    token_ids: &[usize],
    token_mask: &StepMask,
    aspect: Option<(usize, usize)>,
    p: &BaselineParams,
    dropout_rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let ctx = EncodeCtx {
        word_table: &p.word_table,
        entity_table: &p.entity_table,
        attribute_table: &p.attribute_table,
        sent_fw: &p.sent_fw,
        sent_bw: &p.sent_bw,
        dims: p.dims,
    };
    let v = encode_sentence(
        tape,
        &ctx,
        token_ids,
        token_mask,
        aspect,
        dropout_rate,
        training,
        rng,
    )?;
    let v = dropout(tape, &v, dropout_rate, training, rng)?;
    affine_softmax(tape, &v, &p.out_w, &p.out_b)
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Hierarchical(_) => ModelKind::Hierarchical,
            Model::Baseline(_) => ModelKind::Baseline,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            Model::Hierarchical(p) => p.dims,
            Model::Baseline(p) => p.dims,
        }
    }

    pub fn init(
        kind: ModelKind,
        dims: Dims,
        vocab_size: usize,
        n_entities: usize,
        n_attributes: usize,
        rng: &mut impl Rng,
        word_table: Option<Tensor>,
    ) -> Model {
        match kind {
            ModelKind::Hierarchical => Model::Hierarchical(ModelParams::init(
                dims, vocab_size, n_entities, n_attributes, rng, word_table,
            )),
            ModelKind::Baseline => Model::Baseline(BaselineParams::init(
                dims, vocab_size, n_entities, n_attributes, rng, word_table,
            )),
        }
    }

    pub fn watch(&self, tape: &mut Tape) -> Model {
        match self {
            Model::Hierarchical(p) => Model::Hierarchical(p.watch(tape)),
            Model::Baseline(p) => Model::Baseline(p.watch(tape)),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            Model::Hierarchical(p) => p.visit(f),
            Model::Baseline(p) => p.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            Model::Hierarchical(p) => p.visit_mut(f),
            Model::Baseline(p) => p.visit_mut(f),
        }
    }

    /// Named parameter tensors in visit order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Per-sentence probability rows `[h, 3]` for one padded review,
    /// uniform placeholders at padded slots for either architecture.
    pub fn review_probs(
        &self,
        tape: &mut Tape,
        review: &PaddedReview,
        dropout_rate: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        match self {
            Model::Hierarchical(p) => {
                forward_review(tape, review, p, dropout_rate, training, rng)
            }
            Model::Baseline(p) => {
                let h = review.sentence_mask.len();
                let mut rows = Vec::with_capacity(h);
                for s in 0..h {
                    if review.sentence_mask[s] {
                        rows.push(forward_sentence_baseline(
                            tape,
                            &review.token_ids[s],
                            &review.token_masks[s],
                            review.aspects[s],
                            p,
                            dropout_rate,
                            training,
                            rng,
                        )?);
                    } else {
                        rows.push(Tensor::fill(&[NUM_CLASSES], 1.0 / NUM_CLASSES as f64)?);
                    }
                }
                tape.stack_rows(&rows)
            }
        }
    }
}

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate().skip(1) {
        if v > probs[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode labels for every real slot of a review; padded slots
/// yield `None`.
pub fn predict(model: &Model, review: &PaddedReview) -> Result<Vec<Option<Polarity>>> {
    let mut tape = Tape::new();
    // inference draws nothing from the stream; any seed works
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    let probs = model.review_probs(&mut tape, review, 0.0, false, &mut rng)?;
    let c = NUM_CLASSES;
    Ok(review
        .sentence_mask
        .iter()
        .enumerate()
        .map(|(s, &real)| {
            if real {
                Polarity::from_index(argmax_class(&probs.data()[s * c..(s + 1) * c]))
            } else {
                None
            }
        })
        .collect())
}
