//! Caption generation: conditioning vectors from an image embedding, POS
//! template sampling, beam-search MAP decoding from the SC-NLM, and ranking
//! by a weighted translation + language-model score.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ingest::CaptionRecord;
use crate::joint::{score, JointModel};
use crate::kn::{kn_logprob, TrigramCounts};
use crate::nlm::{
    forward_tags, scnlm_attribute, scnlm_distribution_with_attribute, word_context, ScnlmModel,
};
use crate::numcore::{unit_normalize, SeededRng};
use crate::regularities::{EmbeddingIndex, ItemKind};

pub const MIN_TEMPLATE_LEN: usize = 4;
pub const MAX_TEMPLATE_LEN: usize = 12;

/// Distinct POS sequences with their corpus frequencies, most frequent first
/// and then lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct PosTemplatePool {
    templates: Vec<(Vec<String>, usize)>,
}

impl PosTemplatePool {
    pub fn new(entries: Vec<(Vec<String>, usize)>) -> Result<Self> {
        let mut merged: HashMap<Vec<String>, usize> = HashMap::new();
        for (t, f) in entries {
            if !(MIN_TEMPLATE_LEN..=MAX_TEMPLATE_LEN).contains(&t.len()) {
                return Err(Error::invalid(
                    "POS template",
                    format!("length {} outside [{MIN_TEMPLATE_LEN}, {MAX_TEMPLATE_LEN}]", t.len()),
                ));
            }
            if f == 0 {
                return Err(Error::invalid("POS template", "frequency 0"));
            }
            *merged.entry(t).or_insert(0) += f;
        }
        let mut templates: Vec<_> = merged.into_iter().collect();
        templates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(PosTemplatePool { templates })
    }

    /// Tag sequences of `records` whose length is in `[4, 12]`.
    pub fn from_records(records: &[CaptionRecord]) -> Self {
        let entries = records
            .iter()
            .filter(|r| (MIN_TEMPLATE_LEN..=MAX_TEMPLATE_LEN).contains(&r.tags.len()))
            .map(|r| (r.tags.clone(), 1))
            .collect();
        PosTemplatePool::new(entries).expect("lengths filtered")
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[(Vec<String>, usize)] {
        &self.templates
    }
}

/// Draws a template with probability proportional to its frequency.
pub fn sample_pos_template<'a>(pool: &'a PosTemplatePool, rng: &mut SeededRng) -> Result<&'a [String]> {
    if pool.is_empty() {
        return Err(Error::Empty("POS template pool"));
    }
    let weights: Vec<f64> = pool.templates.iter().map(|(_, f)| *f as f64).collect();
    Ok(&pool.templates[rng.weighted_index(&weights)].0)
}

/// Origin of a conditioning vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CondTag {
    Image,
    Bag,
    Concept(String),
}

impl CondTag {
    pub fn label(&self) -> String {
        match self {
            CondTag::Image => "image".into(),
            CondTag::Bag => "bag".into(),
            CondTag::Concept(id) => format!("concept:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Nearest words and nearest sentences pooled into the bag of concepts.
    pub top_concepts: usize,
    pub candidate_count: usize,
    pub return_count: usize,
    pub beam: usize,
    pub w_translation: f64,
    pub w_lm: f64,
    /// Repetition penalty base.
    pub gamma: f64,
    /// Also condition on each concept separately.
    pub per_concept: bool,
    pub stopwords: HashSet<String>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            top_concepts: 5,
            candidate_count: 1000,
            return_count: 5,
            beam: 8,
            w_translation: 1.0,
            w_lm: 0.25,
            gamma: 0.5,
            per_concept: false,
            stopwords: HashSet::new(),
            seed: 1234,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.return_count < 1 || self.candidate_count < self.return_count {
            return Err(Error::invalid(
                "candidate counts",
                format!("need candidates {} >= top {} >= 1", self.candidate_count, self.return_count),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("gamma", format!("{} outside (0, 1]", self.gamma)));
        }
        if self.beam < 1 {
            return Err(Error::invalid("beam", "width must be at least 1"));
        }
        if self.top_concepts < 1 {
            return Err(Error::invalid("concepts", "N must be at least 1"));
        }
        Ok(())
    }
}

/// Word and sentence embeddings searched for concepts. Words are embedded as
/// one-token sentences; reserved tokens and stopwords are left out. Every
/// caption is indexed under its text.
pub fn build_concept_index(
    model: &JointModel,
    records: &[CaptionRecord],
    stopwords: &HashSet<String>,
) -> Result<EmbeddingIndex> {
    let mut index = EmbeddingIndex::new();
    for (id, word) in model.vocab.tokens().iter().enumerate() {
        if model.vocab.is_reserved(id) || stopwords.contains(word) {
            continue;
        }
        index.insert(word, ItemKind::Word, &model.encode(&[id])?)?;
    }
    for r in records {
        if !r.tokens.is_empty() {
            index.insert(&r.text(), ItemKind::Sentence, &model.encode_tokens(&r.tokens)?)?;
        }
    }
    Ok(index)
}

/// The unit image embedding, the bag of concepts (normalized mean of the
/// top-N words and top-N sentences) and, when enabled, each concept alone.
pub fn conditioning_candidates(
    image_embedding: &[f64],
    index: &EmbeddingIndex,
    config: &GenConfig,
) -> Result<Vec<(CondTag, Vec<f64>)>> {
    if index.is_empty() {
        return Err(Error::Empty("concept index"));
    }
    let mut out = vec![(CondTag::Image, unit_normalize(image_embedding)?)];
    let mut concepts = index.nearest(image_embedding, ItemKind::Word, config.top_concepts, None)?;
    concepts.extend(index.nearest(image_embedding, ItemKind::Sentence, config.top_concepts, None)?);
    let vectors: Vec<&[f64]> = concepts
        .iter()
        .map(|(id, _)| index.vector(index.position(id).expect("hit comes from index")))
        .collect();
    let k = image_embedding.len();
    let mut mean = vec![0.0; k];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x / vectors.len() as f64;
        }
    }
    out.push((CondTag::Bag, unit_normalize(&mean)?));
    if config.per_concept {
        for ((id, _), v) in concepts.iter().zip(vectors) {
            out.push((CondTag::Concept(id.clone()), v.to_vec()));
        }
    }
    Ok(out)
}

/// Words the decoder may emit: everything but the reserved tokens.
pub fn generation_vocabulary(model: &ScnlmModel) -> Vec<usize> {
    (0..model.dims().vocab)
        .filter(|&w| !crate::ingest::RESERVED.contains(&model.word(w)))
        .collect()
}

/// Beam search for the most probable word sequence under `template`. Every
/// position reads the forward tag window from the template; hypotheses are
/// ordered by log-probability and then by word ids.
pub fn map_decode(
    model: &ScnlmModel,
    u: &[f64],
    template: &[usize],
    beam: usize,
    allowed: &[usize],
) -> Result<(Vec<usize>, f64)> {
    if beam < 1 {
        return Err(Error::invalid("beam", "width must be at least 1"));
    }
    if allowed.is_empty() {
        return Err(Error::Empty("allowed words"));
    }
    let p = &model.params;
    let d = model.dims();
    let (start, endpos) = (model.start(), model.tags.endpos());
    let attributes: Vec<Vec<f64>> = (0..template.len())
        .map(|pos| scnlm_attribute(u, &forward_tags(template, pos, d.forward + 1, endpos), p))
        .collect::<Result<_>>()?;
    let mut hyps: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for u_hat in &attributes {
        let mut next = Vec::with_capacity(hyps.len() * allowed.len());
        for (words, lp) in &hyps {
            let ctx = word_context(words, words.len(), d.context, start);
            let probs = scnlm_distribution_with_attribute(&ctx, u_hat, p)?;
            for &w in allowed {
                let mut seq = words.clone();
                seq.push(w);
                next.push((seq, lp + probs[w].ln()));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(beam);
        hyps = next;
    }
    Ok(hyps.swap_remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub translation: f64,
    pub lm: f64,
    pub total: f64,
}

/// `γ^(c-1)` multiplied over non-stopwords occurring `c > 1` times.
pub fn repetition_penalty<S: AsRef<str>>(tokens: &[S], stopwords: &HashSet<String>, gamma: f64) -> f64 {
    let mut counts: HashMap<&str, i32> = HashMap::new();
    for t in tokens {
        if !stopwords.contains(t.as_ref()) {
            *counts.entry(t.as_ref()).or_insert(0) += 1;
        }
    }
    let mut keys: Vec<_> = counts.into_iter().collect();
    keys.sort();
    keys.into_iter()
        .filter(|(_, c)| *c > 1)
        .fold(1.0, |acc, (_, c)| acc * gamma.powi(c - 1))
}

/// Translation `((1 + cos) / 2) · penalty`, LM `kn_logprob / len` and their
/// weighted sum.
pub fn score_candidate<S: AsRef<str>>(
    tokens: &[S],
    image_embedding: &[f64],
    encoder: &JointModel,
    kn: &TrigramCounts,
    config: &GenConfig,
) -> Result<Scores> {
    if tokens.is_empty() {
        return Err(Error::Empty("candidate"));
    }
    let v = encoder.encode_tokens(tokens)?;
    let cos = score(image_embedding, &v)?;
    let translation = 0.5 * (1.0 + cos) * repetition_penalty(tokens, &config.stopwords, config.gamma);
    let lm = kn_logprob(kn, tokens)? / tokens.len() as f64;
    Ok(Scores {
        translation,
        lm,
        total: config.w_translation * translation + config.w_lm * lm,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<String>,
    pub template: Vec<String>,
    pub cond: CondTag,
    pub scores: Scores,
}

impl Candidate {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Models needed for generation.
#[derive(Debug, Clone, Copy)]
pub struct Generator<'a> {
    pub encoder: &'a JointModel,
    pub decoder: &'a ScnlmModel,
    pub kn: &'a TrigramCounts,
    pub concepts: &'a EmbeddingIndex,
    pub templates: &'a PosTemplatePool,
}

fn image_seed(seed: u64, image_id: &str) -> u64 {
    // FNV-1a, stable across platforms
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

impl Generator<'_> {
    /// Generates `candidate_count` candidates by cycling through the
    /// conditioning vectors with a sampled template each, then returns the
    /// best `return_count` distinct captions by total score (ties by tokens).
    pub fn generate(&self, image_id: &str, features: &[f64], config: &GenConfig) -> Result<Vec<Candidate>> {
        config.validate()?;
        let x = self.encoder.embed_image(features)?;
        let conds = conditioning_candidates(&x, self.concepts, config)?;
        let allowed = generation_vocabulary(self.decoder);
        let mut rng = SeededRng::new(image_seed(config.seed, image_id));
        let mut decoded: HashMap<(usize, Vec<String>), Vec<String>> = HashMap::new();
        let mut seen: HashSet<Vec<String>> = HashSet::new();
        let mut out = Vec::new();
        for i in 0..config.candidate_count {
            let c = i % conds.len();
            let template = sample_pos_template(self.templates, &mut rng)?.to_vec();
            let key = (c, template.clone());
            let tokens = match decoded.get(&key) {
                Some(t) => t.clone(),
                None => {
                    let tags = self.decoder.tags.ids(&template)?;
                    let (ids, _) = map_decode(self.decoder, &conds[c].1, &tags, config.beam, &allowed)?;
                    let t: Vec<String> = ids.iter().map(|&w| self.decoder.word(w).to_string()).collect();
                    decoded.insert(key, t.clone());
                    t
                }
            };
            if !seen.insert(tokens.clone()) {
                continue;
            }
            let scores = score_candidate(&tokens, &x, self.encoder, self.kn, config)?;
            out.push(Candidate {
                tokens,
                template,
                cond: conds[c].0.clone(),
                scores,
            });
        }
        out.sort_by(|a, b| b.scores.total.total_cmp(&a.scores.total).then_with(|| a.tokens.cmp(&b.tokens)));
        out.truncate(config.return_count);
        Ok(out)
    }
}

pub const TSV_HEADER: &str = "image_id\trank\ttotal\ttranslation\tlm\tcaption";

/// `image_id rank total translation lm caption` rows.
pub fn candidates_tsv(image_id: &str, candidates: &[Candidate]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(r, c)| {
            format!(
                "{image_id}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
                r + 1,
                c.scores.total,
                c.scores.translation,
                c.scores.lm,
                c.text()
            )
        })
        .collect()
}

/// Gallery-style block: original caption, nearest training sentence, samples.
pub fn report_block(image_id: &str, original: Option<&str>, nearest: Option<&str>, candidates: &[Candidate]) -> String {
    let mut s = format!("image: {image_id}\n");
    s.push_str(&format!("  original: {}\n", original.unwrap_or("-")));
    s.push_str(&format!("  nearest training sentence: {}\n", nearest.unwrap_or("-")));
    for (i, c) in candidates.iter().enumerate() {
        s.push_str(&format!(
            "  {}. {}  [{} | {}]\n",
            i + 1,
            c.text(),
            c.cond.label(),
            c.template.join(" ")
        ));
    }
    s
}
