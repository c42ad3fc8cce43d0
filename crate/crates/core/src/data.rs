//! Corpus ingestion and preparation: XML review corpus parsing and
//! writing, tokenization, vocabulary, aspect unrolling, padding and
//! masking, pre-trained embedding files, and a synthetic review generator
//! for end-to-end checks.
//!
//! Corpus schema (UTF-8):
//!
//! ```xml
//! <Reviews>
//!   <Review rid="...">
//!     <sentences>
//!       <sentence id="...">
//!         <text>...</text>
//!         <Opinions>
//!           <Opinion category="ENTITY#ATTRIBUTE" polarity="positive"/>
//!         </Opinions>
//!       </sentence>
//!     </sentences>
//!   </Review>
//! </Reviews>
//! ```
//!
//! `Opinions` may be absent (a sentence with no aspect); `polarity` may be
//! absent (an unlabeled instance, accepted for prediction only).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use quick_xml::escape::{escape, resolve_predefined_entity};
use quick_xml::events::Event;
use quick_xml::Reader;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{uniform_init, StepMask};
use crate::tensor::Tensor;

// ── Domain types ─────────────────────────────────────────────────────

/// Sentiment class. The index order is the prediction tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

pub const NUM_CLASSES: usize = 3;

impl Polarity {
    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
            Polarity::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Polarity> {
        match i {
            0 => Some(Polarity::Positive),
            1 => Some(Polarity::Negative),
            2 => Some(Polarity::Neutral),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Polarity> {
        match s {
            "positive" => Ok(Polarity::Positive),
            "negative" => Ok(Polarity::Negative),
            "neutral" => Ok(Polarity::Neutral),
            other => Err(Error::Validation(format!("unknown polarity '{}'", other))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Entity + attribute pair a sentence expresses sentiment about.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AspectCategory {
    pub entity: String,
    pub attribute: String,
}

impl AspectCategory {
    pub fn new(entity: impl Into<String>, attribute: impl Into<String>) -> AspectCategory {
        AspectCategory {
            entity: entity.into(),
            attribute: attribute.into(),
        }
    }

    /// Parse the rendered `ENTITY#ATTRIBUTE` form.
    pub fn parse(s: &str) -> Result<AspectCategory> {
        let mut parts = s.splitn(2, '#');
        match (parts.next(), parts.next()) {
            (Some(e), Some(a)) if !e.is_empty() && !a.is_empty() => {
                Ok(AspectCategory::new(e, a))
            }
            _ => Err(Error::Validation(format!(
                "aspect category must be ENTITY#ATTRIBUTE, got '{}'",
                s
            ))),
        }
    }
}

impl fmt::Display for AspectCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.entity, self.attribute)
    }
}

/// One aspect annotation on a sentence. `polarity` is `None` for
/// unlabeled corpora (prediction input).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub aspect: AspectCategory,
    pub polarity: Option<Polarity>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSentence {
    pub sentence_id: String,
    pub text: String,
    pub annotations: Vec<Annotation>,
}

/// One review: ordered sentences with zero or more annotations each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Review {
    pub review_id: String,
    pub sentences: Vec<RawSentence>,
}

// ── Corpus parsing and writing ───────────────────────────────────────

fn line_of(content: &str, byte_pos: usize) -> usize {
    let upto = byte_pos.min(content.len());
    content[..upto].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parse a corpus file. Errors carry the line number of the offending
/// markup; unknown polarity strings are rejected.
pub fn parse_corpus(path: &Path) -> Result<Vec<Review>> {
    let content = fs::read_to_string(path)?;
    parse_corpus_str(&content)
}

pub fn parse_corpus_str(content: &str) -> Result<Vec<Review>> {
    let mut reader = Reader::from_str(content);
    let mut reviews: Vec<Review> = Vec::new();
    let mut review: Option<Review> = None;
    let mut sentence: Option<RawSentence> = None;
    let mut in_text = false;
    let mut text_buf = String::new();

    loop {
        let line = line_of(content, reader.buffer_position() as usize);
        let parse_err = |msg: String| Error::Parse { line, msg };
        let event = reader.read_event().map_err(|e| {
            let line = line_of(content, reader.buffer_position() as usize);
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        match event {
            Event::Start(e) => match e.name().as_ref() {
                b"Reviews" | b"sentences" | b"Opinions" => {}
                b"Review" => {
                    let rid = get_attr(&e, "rid")
                        .map_err(&parse_err)?
                        .ok_or_else(|| parse_err("Review element missing rid attribute".into()))?;
                    review = Some(Review {
                        review_id: rid,
                        sentences: Vec::new(),
                    });
                }
                b"sentence" => {
                    let id = get_attr(&e, "id")
                        .map_err(&parse_err)?
                        .ok_or_else(|| parse_err("sentence element missing id attribute".into()))?;
                    sentence = Some(RawSentence {
                        sentence_id: id,
                        text: String::new(),
                        annotations: Vec::new(),
                    });
                }
                b"text" => {
                    in_text = true;
                    text_buf.clear();
                }
                b"Opinion" => {
                    let annotation = opinion_annotation(&e, line)?;
                    match sentence.as_mut() {
                        Some(s) => s.annotations.push(annotation),
                        None => return Err(parse_err("Opinion outside of a sentence".into())),
                    }
                }
                other => {
                    return Err(parse_err(format!(
                        "unexpected element <{}>",
                        String::from_utf8_lossy(other)
                    )))
                }
            },
            Event::Empty(e) => match e.name().as_ref() {
                b"Opinion" => {
                    let annotation = opinion_annotation(&e, line)?;
                    match sentence.as_mut() {
                        Some(s) => s.annotations.push(annotation),
                        None => return Err(parse_err("Opinion outside of a sentence".into())),
                    }
                }
                b"Opinions" => {}
                b"text" => {
                    if let Some(s) = sentence.as_mut() {
                        s.text = String::new();
                    }
                }
                other => {
                    return Err(parse_err(format!(
                        "unexpected empty element <{}/>",
                        String::from_utf8_lossy(other)
                    )))
                }
            },
            Event::End(e) => match e.name().as_ref() {
                b"text" => {
                    in_text = false;
                    if let Some(s) = sentence.as_mut() {
                        s.text = std::mem::take(&mut text_buf);
                    }
                }
                b"sentence" => {
                    let s = sentence
                        .take()
                        .ok_or_else(|| parse_err("stray </sentence>".into()))?;
                    match review.as_mut() {
                        Some(r) => r.sentences.push(s),
                        None => return Err(parse_err("sentence outside of a Review".into())),
                    }
                }
                b"Review" => {
                    let r = review
                        .take()
                        .ok_or_else(|| parse_err("stray </Review>".into()))?;
                    reviews.push(r);
                }
                _ => {}
            },
            Event::Text(t) => {
                if in_text {
                    let decoded = t.decode().map_err(|e| parse_err(e.to_string()))?;
                    text_buf.push_str(&decoded);
                }
            }
            Event::CData(c) => {
                if in_text {
                    let decoded = c.decode().map_err(|e| parse_err(e.to_string()))?;
                    text_buf.push_str(&decoded);
                }
            }
            Event::GeneralRef(r) => {
                if in_text {
                    if let Some(ch) = r
                        .resolve_char_ref()
                        .map_err(|e| parse_err(e.to_string()))?
                    {
                        text_buf.push(ch);
                    } else {
                        let name = r.decode().map_err(|e| parse_err(e.to_string()))?;
                        match resolve_predefined_entity(&name) {
                            Some(s) => text_buf.push_str(s),
                            None => return Err(parse_err(format!("unknown entity &{};", name))),
                        }
                    }
                }
            }
            Event::Decl(_) | Event::Comment(_) | Event::PI(_) | Event::DocType(_) => {}
            Event::Eof => break,
        }
    }
    if review.is_some() || sentence.is_some() {
        return Err(Error::Parse {
            line: line_of(content, content.len()),
            msg: "unexpected end of file inside an element".into(),
        });
    }
    Ok(reviews)
}

fn get_attr(
    e: &quick_xml::events::BytesStart,
    name: &str,
) -> std::result::Result<Option<String>, String> {
    match e.try_get_attribute(name) {
        Ok(Some(a)) => match a.normalized_value(quick_xml::XmlVersion::Implicit1_0) {
            Ok(v) => Ok(Some(v.into_owned())),
            Err(err) => Err(format!("bad attribute '{}': {}", name, err)),
        },
        Ok(None) => Ok(None),
        Err(err) => Err(format!("bad attribute '{}': {}", name, err)),
    }
}

fn opinion_annotation(e: &quick_xml::events::BytesStart, line: usize) -> Result<Annotation> {
    let wrap = |msg: String| Error::Parse { line, msg };
    let category = get_attr(e, "category")
        .map_err(wrap)?
        .ok_or_else(|| wrap("Opinion element missing category attribute".into()))?;
    let aspect = AspectCategory::parse(&category)?;
    let polarity = match get_attr(e, "polarity").map_err(wrap)? {
        Some(p) => Some(Polarity::parse(&p)?),
        None => None,
    };
    Ok(Annotation { aspect, polarity })
}

/// Serialize reviews in the corpus schema. `parse_corpus_str` of the
/// output reproduces the input exactly.
pub fn write_corpus_string(reviews: &[Review]) -> String {
    let mut out = String::new();
    out.push_str("<Reviews>\n");
    for review in reviews {
        out.push_str(&format!(
            "  <Review rid=\"{}\">\n    <sentences>\n",
            escape(review.review_id.as_str())
        ));
        for s in &review.sentences {
            out.push_str(&format!(
                "      <sentence id=\"{}\">\n        <text>{}</text>\n",
                escape(s.sentence_id.as_str()),
                escape(s.text.as_str())
            ));
            if !s.annotations.is_empty() {
                out.push_str("        <Opinions>\n");
                for a in &s.annotations {
                    match a.polarity {
                        Some(p) => out.push_str(&format!(
                            "          <Opinion category=\"{}\" polarity=\"{}\"/>\n",
                            escape(a.aspect.to_string().as_str()),
                            p.as_str()
                        )),
                        None => out.push_str(&format!(
                            "          <Opinion category=\"{}\"/>\n",
                            escape(a.aspect.to_string().as_str())
                        )),
                    }
                }
                out.push_str("        </Opinions>\n");
            }
            out.push_str("      </sentence>\n");
        }
        out.push_str("    </sentences>\n  </Review>\n");
    }
    out.push_str("</Reviews>\n");
    out
}

pub fn write_corpus(path: &Path, reviews: &[Review]) -> Result<()> {
    fs::write(path, write_corpus_string(reviews))?;
    Ok(())
}

// ── Tokenization ─────────────────────────────────────────────────────

/// Tokenization mode. `Simple` lowercases, splits on whitespace, and
/// peels leading/trailing punctuation into their own tokens (internal
/// punctuation like apostrophes is kept). `Pretokenized` splits on
/// whitespace only, for externally segmented input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tokenizer {
    #[default]
    Simple,
    Pretokenized,
}

impl Tokenizer {
    pub fn run(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Pretokenized => text.split_whitespace().map(str::to_owned).collect(),
            Tokenizer::Simple => {
                let mut out = Vec::new();
                for word in text.split_whitespace() {
                    let lower = word.to_lowercase();
                    let chars: Vec<char> = lower.chars().collect();
                    let is_punct = |c: char| !c.is_alphanumeric();
                    let mut start = 0;
                    let mut end = chars.len();
                    let mut trail = Vec::new();
                    while start < end && is_punct(chars[start]) {
                        out.push(chars[start].to_string());
                        start += 1;
                    }
                    while end > start && is_punct(chars[end - 1]) {
                        trail.push(chars[end - 1].to_string());
                        end -= 1;
                    }
                    if start < end {
                        out.push(chars[start..end].iter().collect());
                    }
                    out.extend(trail.into_iter().rev());
                }
                out
            }
        }
    }
}

// ── Vocabulary ───────────────────────────────────────────────────────

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token-to-index map with reserved padding and unknown entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Index all corpus tokens with frequency >= `min_count`, ordered by
    /// frequency descending then lexicographic.
    pub fn build<'a>(
        sentences: impl Iterator<Item = &'a [String]>,
        min_count: usize,
    ) -> Vocab {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for sentence in sentences {
            for token in sentence {
                *freq.entry(token).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, count)| count >= min_count)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        tokens.extend(entries.into_iter().map(|(t, _)| t.to_owned()));
        Vocab::from_tokens(tokens).expect("reserved tokens present")
    }

    /// Rebuild from an ordered token list (checkpoint manifest).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Validation(
                "vocabulary must start with the reserved <pad> and <unk> entries".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token '{t}'")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of a token, or the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Entity and attribute index maps with a dedicated out-of-vocabulary row
/// each, for aspect categories unseen at training time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AspectVocab {
    entities: Vec<String>,
    attributes: Vec<String>,
    e_index: HashMap<String, usize>,
    a_index: HashMap<String, usize>,
}

pub const ASPECT_OOV_TOKEN: &str = "<oov>";

impl AspectVocab {
    pub fn build(reviews: &[Review]) -> AspectVocab {
        let mut entities: Vec<String> = Vec::new();
        let mut attributes: Vec<String> = Vec::new();
        for review in reviews {
            for s in &review.sentences {
                for a in &s.annotations {
                    entities.push(a.aspect.entity.clone());
                    attributes.push(a.aspect.attribute.clone());
                }
            }
        }
        entities.sort();
        entities.dedup();
        attributes.sort();
        attributes.dedup();
        entities.push(ASPECT_OOV_TOKEN.to_owned());
        attributes.push(ASPECT_OOV_TOKEN.to_owned());
        AspectVocab::from_lists(entities, attributes).expect("oov entries present")
    }

    pub fn from_lists(entities: Vec<String>, attributes: Vec<String>) -> Result<AspectVocab> {
        if entities.last().map(String::as_str) != Some(ASPECT_OOV_TOKEN)
            || attributes.last().map(String::as_str) != Some(ASPECT_OOV_TOKEN)
        {
            return Err(Error::Validation(
                "aspect vocabulary must end with the reserved <oov> entry".into(),
            ));
        }
        let index = |list: &[String]| -> HashMap<String, usize> {
            list.iter()
                .enumerate()
                .map(|(i, s)| (s.clone(), i))
                .collect()
        };
        Ok(AspectVocab {
            e_index: index(&entities),
            a_index: index(&attributes),
            entities,
            attributes,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    /// Map an aspect to (entity row, attribute row); unseen parts map to
    /// the OOV row and are reported via the second return.
    pub fn ids(&self, aspect: &AspectCategory) -> ((usize, usize), bool) {
        let e = self.e_index.get(&aspect.entity).copied();
        let a = self.a_index.get(&aspect.attribute).copied();
        let oov = e.is_none() || a.is_none();
        (
            (
                e.unwrap_or(self.entities.len() - 1),
                a.unwrap_or(self.attributes.len() - 1),
            ),
            oov,
        )
    }
}

// ── Aspect unrolling ─────────────────────────────────────────────────

/// One (sentence, aspect, polarity) triple after unrolling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceInstance {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub aspect: AspectCategory,
    pub polarity: Option<Polarity>,
}

/// Unroll aspects: one instance per (sentence, aspect) pair, multi-aspect
/// sentences repeated in succession, zero-aspect sentences removed.
/// Returns an empty list for a review with no annotated sentences.
pub fn unroll_aspects(review: &Review, tokenizer: Tokenizer) -> Vec<SentenceInstance> {
    let mut out = Vec::new();
    for s in &review.sentences {
        if s.annotations.is_empty() {
            continue;
        }
        let tokens = tokenizer.run(&s.text);
        for a in &s.annotations {
            out.push(SentenceInstance {
                sentence_id: s.sentence_id.clone(),
                tokens: tokens.clone(),
                aspect: a.aspect.clone(),
                polarity: a.polarity,
            });
        }
    }
    out
}

// ── Padding ──────────────────────────────────────────────────────────

/// Identity of a real instance slot, carried through to prediction output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMeta {
    pub sentence_id: String,
    pub aspect: AspectCategory,
}

/// One review padded to `h` instance slots of `l` token positions each.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedReview {
    pub review_id: String,
    /// `h x l` token ids; PAD fills beyond each sentence and whole slots.
    pub token_ids: Vec<Vec<usize>>,
    /// Per-slot step masks of length `l`.
    pub token_masks: Vec<StepMask>,
    /// Which of the `h` slots hold a real instance.
    pub sentence_mask: Vec<bool>,
    /// (entity row, attribute row) for real slots.
    pub aspects: Vec<Option<(usize, usize)>>,
    /// Gold class for labeled real slots.
    pub labels: Vec<Option<usize>>,
    pub meta: Vec<Option<InstanceMeta>>,
}

impl PaddedReview {
    pub fn n_real(&self) -> usize {
        self.sentence_mask.iter().filter(|&&m| m).count()
    }
}

/// Pad one review's unrolled instances to `l` tokens and `h` slots.
/// Instances longer than `l` and reviews longer than `h` are truncated
/// from the end with a warning.
pub fn pad_and_mask(
    review_id: &str,
    instances: &[SentenceInstance],
    l: usize,
    h: usize,
    vocab: &Vocab,
    aspects: &AspectVocab,
) -> PaddedReview {
    let mut kept = instances;
    if kept.len() > h {
        log::warn!(
            "review {}: {} instances exceed the review length {}; truncating",
            review_id,
            kept.len(),
            h
        );
        kept = &kept[..h];
    }
    let mut token_ids = Vec::with_capacity(h);
    let mut token_masks = Vec::with_capacity(h);
    let mut sentence_mask = Vec::with_capacity(h);
    let mut aspect_ids = Vec::with_capacity(h);
    let mut labels = Vec::with_capacity(h);
    let mut meta = Vec::with_capacity(h);
    for inst in kept {
        let mut tokens = &inst.tokens[..];
        if tokens.len() > l {
            log::warn!(
                "sentence {}: {} tokens exceed the sentence length {}; truncating",
                inst.sentence_id,
                tokens.len(),
                l
            );
            tokens = &tokens[..l];
        }
        let mut ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
        ids.resize(l, PAD_ID);
        token_ids.push(ids);
        token_masks.push(StepMask::with_prefix(tokens.len(), l));
        sentence_mask.push(true);
        let ((e, a), oov) = aspects.ids(&inst.aspect);
        if oov {
            log::warn!(
                "sentence {}: aspect {} unseen at training time; using the OOV row",
                inst.sentence_id,
                inst.aspect
            );
        }
        aspect_ids.push(Some((e, a)));
        labels.push(inst.polarity.map(Polarity::index));
        meta.push(Some(InstanceMeta {
            sentence_id: inst.sentence_id.clone(),
            aspect: inst.aspect.clone(),
        }));
    }
    while token_ids.len() < h {
        token_ids.push(vec![PAD_ID; l]);
        token_masks.push(StepMask::with_prefix(0, l));
        sentence_mask.push(false);
        aspect_ids.push(None);
        labels.push(None);
        meta.push(None);
    }
    PaddedReview {
        review_id: review_id.to_owned(),
        token_ids,
        token_masks,
        sentence_mask,
        aspects: aspect_ids,
        labels,
        meta,
    }
}

/// Unroll and pad a parsed corpus against an existing vocabulary and
/// padding geometry (evaluation and prediction against a checkpoint).
/// Reviews without annotated sentences are dropped with a warning.
pub fn prepare_reviews(
    reviews: &[Review],
    tokenizer: Tokenizer,
    vocab: &Vocab,
    aspects: &AspectVocab,
    l: usize,
    h: usize,
) -> Vec<PaddedReview> {
    let mut out = Vec::new();
    for review in reviews {
        let instances = unroll_aspects(review, tokenizer);
        if instances.is_empty() {
            log::warn!(
                "review {} has no aspect-annotated sentences; dropped",
                review.review_id
            );
            continue;
        }
        out.push(pad_and_mask(
            &review.review_id,
            &instances,
            l,
            h,
            vocab,
            aspects,
        ));
    }
    out
}

/// Sentence length `l` and review length `h` observed in a corpus of
/// unrolled reviews: the maxima over instances and instance counts.
pub fn observed_lengths(unrolled: &[Vec<SentenceInstance>]) -> (usize, usize) {
    let mut l = 1;
    let mut h = 1;
    for instances in unrolled {
        h = h.max(instances.len());
        for inst in instances {
            l = l.max(inst.tokens.len());
        }
    }
    (l, h)
}

// ── Pre-trained embeddings ───────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingLoad {
    pub table: Tensor,
    /// Fraction of non-reserved vocabulary tokens found in the file.
    pub coverage: f64,
    pub found: usize,
    pub duplicates: usize,
}

/// Load a text embedding file: one entry per line, token then `k` decimal
/// values. Vocabulary rows found in the file are copied; missing rows and
/// `<unk>` keep their random initialization; the `<pad>` row is zero.
/// Duplicate tokens keep the first occurrence.
pub fn load_embeddings(
    path: &Path,
    vocab: &Vocab,
    k: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingLoad> {
    let content = fs::read_to_string(path)?;
    let mut table = uniform_init(vocab.len(), k, rng);
    {
        let data = table.data_mut();
        for v in data[..k].iter_mut() {
            *v = 0.0; // PAD row
        }
    }
    let mut seen: HashMap<String, ()> = HashMap::new();
    let mut found = 0usize;
    let mut duplicates = 0usize;
    let data = table.data_mut();
    for (lineno, line) in content.lines().enumerate() {
        let lineno = lineno + 1;
        let mut fields = line.split_whitespace();
        let token = fields.next().ok_or(Error::Format {
            line: lineno,
            msg: "empty line".into(),
        })?;
        let values: Vec<&str> = fields.collect();
        if values.len() != k {
            return Err(Error::Format {
                line: lineno,
                msg: format!("expected {} dimensions, found {}", k, values.len()),
            });
        }
        if seen.insert(token.to_owned(), ()).is_some() {
            duplicates += 1;
            log::warn!(
                "embedding file line {}: duplicate token '{}'; keeping the first occurrence",
                lineno,
                token
            );
            continue;
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        if id == PAD_ID {
            continue; // PAD stays zero
        }
        for (j, v) in values.iter().enumerate() {
            data[id * k + j] = v.parse::<f64>().map_err(|_| Error::Format {
                line: lineno,
                msg: format!("bad float '{}'", v),
            })?;
        }
        if id != UNK_ID {
            found += 1;
        }
    }
    let non_reserved = vocab.len().saturating_sub(2);
    let coverage = if non_reserved == 0 {
        0.0
    } else {
        found as f64 / non_reserved as f64
    };
    Ok(EmbeddingLoad {
        table,
        coverage,
        found,
        duplicates,
    })
}

// ── Synthetic corpus generator ───────────────────────────────────────

/// Parameters of the synthetic review generator. Unambiguous sentences
/// carry class-specific tokens and the review theme as their label;
/// ambiguous sentences contain only the shared `ambig` token and inherit
/// the theme, which equals the majority label of the review's unambiguous
/// sentences. Solving ambiguous sentences therefore requires review
/// context.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub train_reviews: usize,
    pub test_reviews: usize,
    pub sentences_min: usize,
    pub sentences_max: usize,
    /// Target fraction of ambiguous sentences per review, in [0, 1).
    pub ambiguity_rate: f64,
    /// Number of filler tokens shared by all classes.
    pub filler_vocab: usize,
    /// Class-specific tokens per class.
    pub class_tokens: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_reviews: 500,
            test_reviews: 200,
            sentences_min: 2,
            sentences_max: 6,
            ambiguity_rate: 0.5,
            filler_vocab: 30,
            class_tokens: 4,
            seed: 42,
        }
    }
}

pub const AMBIG_TOKEN: &str = "ambig";

const CLASS_STEMS: [&str; NUM_CLASSES] = ["good", "bad", "meh"];
const SYNTH_ENTITIES: [&str; 4] = ["FOOD", "SERVICE", "AMBIENCE", "DRINKS"];
const SYNTH_ATTRIBUTES: [&str; 3] = ["QUALITY", "GENERAL", "PRICES"];

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config(format!(
                "ambiguity rate must lie in [0, 1), got {}",
                self.ambiguity_rate
            )));
        }
        if self.sentences_min == 0 || self.sentences_min > self.sentences_max {
            return Err(Error::Config(format!(
                "invalid sentences-per-review range {}..={}",
                self.sentences_min, self.sentences_max
            )));
        }
        if self.class_tokens == 0 || self.filler_vocab == 0 {
            return Err(Error::Config(
                "class_tokens and filler_vocab must be positive".into(),
            ));
        }
        if self.train_reviews == 0 || self.test_reviews == 0 {
            return Err(Error::Config("review counts must be positive".into()));
        }
        Ok(())
    }
}

/// Generate deterministic (train, test) corpora from the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<Review>, Vec<Review>)> {
    spec.validate()?;
    let train = generate_split(spec, "train", 0, spec.train_reviews);
    let test = generate_split(spec, "test", 1, spec.test_reviews);
    Ok((train, test))
}

fn generate_split(spec: &SyntheticSpec, prefix: &str, stream: u64, count: usize) -> Vec<Review> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    (0..count)
        .map(|i| generate_review(spec, &format!("{}_r{:04}", prefix, i), &mut rng))
        .collect()
}

fn generate_review(spec: &SyntheticSpec, rid: &str, rng: &mut ChaCha8Rng) -> Review {
    let theme = rng.random_range(0..NUM_CLASSES);
    let n_s = rng.random_range(spec.sentences_min..=spec.sentences_max);
    let n_amb = usize::min(
        n_s - 1,
        (spec.ambiguity_rate * n_s as f64).round() as usize,
    );
    let mut positions: Vec<usize> = (0..n_s).collect();
    positions.shuffle(rng);
    let ambiguous: Vec<bool> = {
        let mut flags = vec![false; n_s];
        for &p in positions.iter().take(n_amb) {
            flags[p] = true;
        }
        flags
    };
    let polarity = Polarity::from_index(theme).expect("theme in range");
    let sentences = (0..n_s)
        .map(|j| {
            let tokens = if ambiguous[j] {
                vec![AMBIG_TOKEN.to_owned(); rng.random_range(2..=4)]
            } else {
                unambiguous_tokens(spec, theme, rng)
            };
            let aspect = AspectCategory::new(
                SYNTH_ENTITIES[rng.random_range(0..SYNTH_ENTITIES.len())],
                SYNTH_ATTRIBUTES[rng.random_range(0..SYNTH_ATTRIBUTES.len())],
            );
            RawSentence {
                sentence_id: format!("{}:{}", rid, j),
                text: tokens.join(" "),
                annotations: vec![Annotation {
                    aspect,
                    polarity: Some(polarity),
                }],
            }
        })
        .collect();
    Review {
        review_id: rid.to_owned(),
        sentences,
    }
}

fn unambiguous_tokens(spec: &SyntheticSpec, theme: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let class_token =
        |rng: &mut ChaCha8Rng| format!("{}{}", CLASS_STEMS[theme], rng.random_range(0..spec.class_tokens));
    let len = rng.random_range(3..=6);
    let mut tokens = vec![class_token(rng)];
    for _ in 1..len {
        if rng.random_range(0.0..1.0) < 0.3 {
            tokens.push(class_token(rng));
        } else {
            tokens.push(format!("w{}", rng.random_range(0..spec.filler_vocab)));
        }
    }
    tokens.shuffle(rng);
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    // ── tokenizer ────────────────────────────────────────────────

    #[test]
    fn tokenize_basic_sentence() {
        assert_eq!(
            Tokenizer::Simple.run("I love this restaurant."),
            strs(&["i", "love", "this", "restaurant", "."])
        );
    }

    #[test]
    fn tokenize_empty() {
        assert!(Tokenizer::Simple.run("").is_empty());
    }

    #[test]
    fn tokenize_keeps_internal_apostrophe() {
        assert_eq!(
            Tokenizer::Simple.run("Don't leave"),
            strs(&["don't", "leave"])
        );
    }

    #[test]
    fn tokenize_peels_leading_and_trailing() {
        assert_eq!(
            Tokenizer::Simple.run("(Hello)! world.."),
            strs(&["(", "hello", ")", "!", "world", ".", "."])
        );
    }

    #[test]
    fn pretokenized_splits_only() {
        assert_eq!(
            Tokenizer::Pretokenized.run("Keep CASE as-is."),
            strs(&["Keep", "CASE", "as-is."])
        );
    }

    // ── vocab ────────────────────────────────────────────────────

    #[test]
    fn vocab_min_count_threshold() {
        let sents = [strs(&["a", "a", "b"])];
        let vocab = Vocab::build(sents.iter().map(|s| s.as_slice()), 2);
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.id("a"), 2);
        assert_eq!(vocab.id("b"), UNK_ID);
        assert_eq!(vocab.id(PAD_TOKEN), PAD_ID);
    }

    #[test]
    fn vocab_empty_corpus() {
        let vocab = Vocab::build(std::iter::empty(), 1);
        assert_eq!(vocab.tokens(), &[PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()]);
    }

    #[test]
    fn vocab_frequency_then_lexicographic() {
        let sents = [strs(&["b", "b", "c", "a", "c", "z"])];
        let vocab = Vocab::build(sents.iter().map(|s| s.as_slice()), 1);
        // b and c tie at 2 -> b first; a and z tie at 1 -> a first
        assert_eq!(vocab.id("b"), 2);
        assert_eq!(vocab.id("c"), 3);
        assert_eq!(vocab.id("a"), 4);
        assert_eq!(vocab.id("z"), 5);
    }

    // ── corpus parsing ───────────────────────────────────────────

    const MINIMAL: &str = r#"<Reviews>
  <Review rid="r1">
    <sentences>
      <sentence id="r1:0">
        <text>Great sushi.</text>
        <Opinions>
          <Opinion category="FOOD#QUALITY" polarity="positive"/>
        </Opinions>
      </sentence>
    </sentences>
  </Review>
</Reviews>
"#;

    #[test]
    fn parse_minimal_corpus() {
        let reviews = parse_corpus_str(MINIMAL).unwrap();
        assert_eq!(reviews.len(), 1);
        assert_eq!(reviews[0].review_id, "r1");
        assert_eq!(reviews[0].sentences.len(), 1);
        let s = &reviews[0].sentences[0];
        assert_eq!(s.text, "Great sushi.");
        assert_eq!(s.annotations.len(), 1);
        assert_eq!(s.annotations[0].aspect.to_string(), "FOOD#QUALITY");
        assert_eq!(s.annotations[0].polarity, Some(Polarity::Positive));
    }

    #[test]
    fn parse_two_opinions_in_order() {
        let xml = r#"<Reviews><Review rid="r"><sentences><sentence id="s">
<text>It has great sushi and even better service.</text>
<Opinions>
<Opinion category="FOOD#QUALITY" polarity="positive"/>
<Opinion category="SERVICE#GENERAL" polarity="positive"/>
</Opinions>
</sentence></sentences></Review></Reviews>"#;
        let reviews = parse_corpus_str(xml).unwrap();
        let s = &reviews[0].sentences[0];
        assert_eq!(s.annotations.len(), 2);
        assert_eq!(s.annotations[0].aspect.entity, "FOOD");
        assert_eq!(s.annotations[1].aspect.entity, "SERVICE");
    }

    #[test]
    fn parse_unknown_polarity_is_validation_error() {
        let xml = MINIMAL.replace("positive", "wonderful");
        let err = parse_corpus_str(&xml).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn parse_malformed_markup_reports_line() {
        let xml = "<Reviews>\n  <Review rid=\"r\">\n    <sentences>\n      </oops>\n";
        let err = parse_corpus_str(xml).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert!(line >= 3, "line {}", line),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn parse_missing_polarity_is_unlabeled() {
        let xml = r#"<Reviews><Review rid="r"><sentences><sentence id="s">
<text>ok</text><Opinions><Opinion category="FOOD#QUALITY"/></Opinions>
</sentence></sentences></Review></Reviews>"#;
        let reviews = parse_corpus_str(xml).unwrap();
        assert_eq!(reviews[0].sentences[0].annotations[0].polarity, None);
    }

    #[test]
    fn corpus_roundtrip_with_escapes() {
        let reviews = vec![Review {
            review_id: "r<1>".into(),
            sentences: vec![
                RawSentence {
                    sentence_id: "s&1".into(),
                    text: "5 < 7 & \"quotes\" 'apostrophe'".into(),
                    annotations: vec![Annotation {
                        aspect: AspectCategory::new("FOOD", "QUALITY"),
                        polarity: Some(Polarity::Neutral),
                    }],
                },
                RawSentence {
                    sentence_id: "s2".into(),
                    text: "no aspects here".into(),
                    annotations: vec![],
                },
            ],
        }];
        let xml = write_corpus_string(&reviews);
        let parsed = parse_corpus_str(&xml).unwrap();
        assert_eq!(parsed, reviews);
    }

    // ── unrolling ────────────────────────────────────────────────

    fn review_with_aspect_counts(counts: &[usize]) -> Review {
        let sentences = counts
            .iter()
            .enumerate()
            .map(|(i, &n)| RawSentence {
                sentence_id: format!("s{}", i),
                text: format!("sentence {}", i),
                annotations: (0..n)
                    .map(|j| Annotation {
                        aspect: AspectCategory::new(format!("E{}", j), "A"),
                        polarity: Some(Polarity::Positive),
                    })
                    .collect(),
            })
            .collect();
        Review {
            review_id: "r".into(),
            sentences,
        }
    }

    #[test]
    fn unroll_multi_aspect_in_succession() {
        let review = review_with_aspect_counts(&[2, 0, 1]);
        let instances = unroll_aspects(&review, Tokenizer::Simple);
        let ids: Vec<&str> = instances.iter().map(|i| i.sentence_id.as_str()).collect();
        assert_eq!(ids, ["s0", "s0", "s2"]);
        assert_eq!(instances[0].aspect.entity, "E0");
        assert_eq!(instances[1].aspect.entity, "E1");
    }

    #[test]
    fn unroll_all_aspect_free_is_empty() {
        let review = review_with_aspect_counts(&[0, 0]);
        assert!(unroll_aspects(&review, Tokenizer::Simple).is_empty());
    }

    #[test]
    fn unroll_single() {
        let review = review_with_aspect_counts(&[1]);
        assert_eq!(unroll_aspects(&review, Tokenizer::Simple).len(), 1);
    }

    #[test]
    fn unroll_preserves_order_and_count() {
        let review = review_with_aspect_counts(&[1, 3, 0, 2]);
        let instances = unroll_aspects(&review, Tokenizer::Simple);
        assert_eq!(instances.len(), 6);
        let ids: Vec<&str> = instances.iter().map(|i| i.sentence_id.as_str()).collect();
        assert_eq!(ids, ["s0", "s1", "s1", "s1", "s3", "s3"]);
    }

    // ── padding ──────────────────────────────────────────────────

    fn tiny_vocab() -> Vocab {
        let sents = [strs(&["a", "a", "a", "b", "b", "c"])];
        Vocab::build(sents.iter().map(|s| s.as_slice()), 1)
    }

    fn tiny_aspects() -> AspectVocab {
        AspectVocab::from_lists(
            vec!["FOOD".into(), ASPECT_OOV_TOKEN.into()],
            vec!["QUALITY".into(), ASPECT_OOV_TOKEN.into()],
        )
        .unwrap()
    }

    fn instance(tokens: &[&str]) -> SentenceInstance {
        SentenceInstance {
            sentence_id: "s".into(),
            tokens: strs(tokens),
            aspect: AspectCategory::new("FOOD", "QUALITY"),
            polarity: Some(Polarity::Negative),
        }
    }

    #[test]
    fn pad_tokens_and_masks() {
        let padded = pad_and_mask(
            "r",
            &[instance(&["a", "c"])],
            4,
            4,
            &tiny_vocab(),
            &tiny_aspects(),
        );
        assert_eq!(padded.token_ids[0], vec![2, 4, PAD_ID, PAD_ID]);
        assert_eq!(padded.token_masks[0].flags(), &[true, true, false, false]);
        assert_eq!(padded.sentence_mask, vec![true, false, false, false]);
        assert_eq!(padded.labels[0], Some(1));
        assert_eq!(padded.aspects[0], Some((0, 0)));
        assert!(padded.aspects[1].is_none());
    }

    #[test]
    fn pad_appends_all_pad_slots() {
        let padded = pad_and_mask(
            "r",
            &[instance(&["a"]), instance(&["b"])],
            2,
            4,
            &tiny_vocab(),
            &tiny_aspects(),
        );
        assert_eq!(padded.sentence_mask, vec![true, true, false, false]);
        assert_eq!(padded.token_ids[2], vec![PAD_ID, PAD_ID]);
        assert_eq!(padded.token_masks[3].n_real(), 0);
    }

    #[test]
    fn pad_exact_length_has_full_mask() {
        let padded = pad_and_mask(
            "r",
            &[instance(&["a", "b", "c"])],
            3,
            1,
            &tiny_vocab(),
            &tiny_aspects(),
        );
        assert_eq!(padded.token_masks[0].n_real(), 3);
    }

    #[test]
    fn pad_strip_recovers_instances() {
        let insts = [instance(&["a", "b"]), instance(&["c"])];
        let vocab = tiny_vocab();
        let padded = pad_and_mask("r", &insts, 4, 3, &vocab, &tiny_aspects());
        for (slot, inst) in insts.iter().enumerate() {
            let n = padded.token_masks[slot].n_real();
            let recovered: Vec<usize> = padded.token_ids[slot][..n].to_vec();
            let expect: Vec<usize> = inst.tokens.iter().map(|t| vocab.id(t)).collect();
            assert_eq!(recovered, expect);
        }
    }

    #[test]
    fn pad_unseen_aspect_maps_to_oov() {
        let mut inst = instance(&["a"]);
        inst.aspect = AspectCategory::new("LOCATION", "WEIRD");
        let padded = pad_and_mask("r", &[inst], 2, 1, &tiny_vocab(), &tiny_aspects());
        assert_eq!(padded.aspects[0], Some((1, 1)));
    }

    // ── embeddings ───────────────────────────────────────────────

    #[test]
    fn embeddings_loaded_and_coverage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "a 1.0 2.0\nzz 9.0 9.0\n").unwrap();
        let vocab = tiny_vocab(); // pad unk a b c
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let load = load_embeddings(&path, &vocab, 2, &mut rng).unwrap();
        assert_eq!(load.found, 1);
        assert!((load.coverage - 1.0 / 3.0).abs() < 1e-12);
        let d = load.table.data();
        assert_eq!(&d[0..2], &[0.0, 0.0]); // PAD row zero
        assert_eq!(&d[2 * 2..2 * 2 + 2], &[1.0, 2.0]); // row for "a"
        let b_row = &d[3 * 2..3 * 2 + 2];
        assert!(b_row.iter().any(|&v| v != 0.0)); // unmatched rows randomized
    }

    #[test]
    fn embeddings_dim_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "a 1.0 2.0\nb 1.0\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = load_embeddings(&path, &tiny_vocab(), 2, &mut rng).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn embeddings_duplicate_first_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.txt");
        fs::write(&path, "a 1.0 2.0\na 8.0 8.0\n").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let load = load_embeddings(&path, &tiny_vocab(), 2, &mut rng).unwrap();
        assert_eq!(load.duplicates, 1);
        assert_eq!(&load.table.data()[4..6], &[1.0, 2.0]);
    }

    // ── synthetic generator ──────────────────────────────────────

    #[test]
    fn synthetic_deterministic_bytes() {
        let spec = SyntheticSpec {
            train_reviews: 5,
            test_reviews: 3,
            ..SyntheticSpec::default()
        };
        let (tr1, te1) = generate_synthetic(&spec).unwrap();
        let (tr2, te2) = generate_synthetic(&spec).unwrap();
        assert_eq!(write_corpus_string(&tr1), write_corpus_string(&tr2));
        assert_eq!(write_corpus_string(&te1), write_corpus_string(&te2));
    }

    #[test]
    fn synthetic_all_ambiguous_is_config_error() {
        let spec = SyntheticSpec {
            ambiguity_rate: 1.0,
            ..SyntheticSpec::default()
        };
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_zero_ambiguity_has_no_ambig_tokens() {
        let spec = SyntheticSpec {
            train_reviews: 10,
            test_reviews: 2,
            ambiguity_rate: 0.0,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        for review in &train {
            for s in &review.sentences {
                assert!(!s.text.contains(AMBIG_TOKEN));
            }
        }
    }

    #[test]
    fn synthetic_labels_follow_unambiguous_majority() {
        let spec = SyntheticSpec {
            train_reviews: 50,
            test_reviews: 10,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate_synthetic(&spec).unwrap();
        for review in train.iter().chain(&test) {
            let is_ambig =
                |s: &RawSentence| s.text.split(' ').all(|t| t == AMBIG_TOKEN);
            let mut counts = [0usize; NUM_CLASSES];
            for s in review.sentences.iter().filter(|s| !is_ambig(s)) {
                counts[s.annotations[0].polarity.unwrap().index()] += 1;
            }
            let majority = counts
                .iter()
                .enumerate()
                .max_by_key(|&(_, c)| c)
                .map(|(i, _)| i)
                .unwrap();
            assert!(counts.iter().filter(|&&c| c == counts[majority]).count() == 1);
            for s in review.sentences.iter().filter(|s| is_ambig(s)) {
                assert_eq!(s.annotations[0].polarity.unwrap().index(), majority);
            }
            // every review keeps at least one unambiguous sentence
            assert!(counts.iter().sum::<usize>() >= 1);
        }
    }

    #[test]
    fn synthetic_roundtrips_through_corpus_format() {
        let spec = SyntheticSpec {
            train_reviews: 4,
            test_reviews: 2,
            ..SyntheticSpec::default()
        };
        let (train, _) = generate_synthetic(&spec).unwrap();
        let xml = write_corpus_string(&train);
        assert_eq!(parse_corpus_str(&xml).unwrap(), train);
    }

    // ── property tests ───────────────────────────────────────────

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_text() -> impl Strategy<Value = String> {
            // XML-safe after escaping; \r excluded (readers normalize EOLs)
            proptest::string::string_regex("[ -~]{0,40}").unwrap()
        }

        fn arb_review(idx: usize) -> impl Strategy<Value = Review> {
            let sentence = (arb_text(), proptest::collection::vec(0usize..3, 0..3)).prop_map(
                |(text, polarities)| RawSentence {
                    sentence_id: "s".into(),
                    text,
                    annotations: polarities
                        .into_iter()
                        .map(|p| Annotation {
                            aspect: AspectCategory::new("FOOD", "QUALITY"),
                            polarity: Polarity::from_index(p),
                        })
                        .collect(),
                },
            );
            proptest::collection::vec(sentence, 1..4).prop_map(move |mut sentences| {
                for (i, s) in sentences.iter_mut().enumerate() {
                    s.sentence_id = format!("r{}:{}", idx, i);
                }
                Review {
                    review_id: format!("r{}", idx),
                    sentences,
                }
            })
        }

        proptest! {
            #[test]
            fn corpus_roundtrip(reviews in proptest::collection::vec(arb_review(0), 0..4)) {
                let reviews: Vec<Review> = reviews
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut r)| {
                        r.review_id = format!("r{}", i);
                        r
                    })
                    .collect();
                let xml = write_corpus_string(&reviews);
                prop_assert_eq!(parse_corpus_str(&xml).unwrap(), reviews);
            }

            #[test]
            fn unroll_count_matches_annotations(review in arb_review(0)) {
                let total: usize = review.sentences.iter().map(|s| s.annotations.len()).sum();
                let instances = unroll_aspects(&review, Tokenizer::Simple);
                prop_assert_eq!(instances.len(), total);
            }

            #[test]
            fn padding_never_alters_real_tokens(
                tokens in proptest::collection::vec("[a-c]", 1..5),
                l in 5usize..8,
            ) {
                let vocab = tiny_vocab();
                let inst = SentenceInstance {
                    sentence_id: "s".into(),
                    tokens: tokens.clone(),
                    aspect: AspectCategory::new("FOOD", "QUALITY"),
                    polarity: Some(Polarity::Positive),
                };
                let padded = pad_and_mask("r", &[inst], l, 2, &vocab, &tiny_aspects());
                let n = padded.token_masks[0].n_real();
                prop_assert_eq!(n, tokens.len());
                for (j, t) in tokens.iter().enumerate() {
                    prop_assert_eq!(padded.token_ids[0][j], vocab.id(t));
                }
                for j in n..l {
                    prop_assert_eq!(padded.token_ids[0][j], PAD_ID);
                }
            }
        }
    }
}
