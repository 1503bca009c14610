//! Joint image-sentence embedding trained with a bidirectional hinge ranking
//! loss over cosine scores.

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::ingest::{CaptionRecord, FeatureStore, Vocabulary, INIT_SCALE};
use crate::lstm::{self, LstmParams};
use crate::numcore::{
    dot, sgd_step, unit_normalize, unit_normalize_with_norm, zero_params, Matrix, Parameters,
    SeededRng,
};

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Lstm,
    Linear,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Lstm => "lstm",
            EncoderKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(EncoderKind::Lstm),
            "linear" => Ok(EncoderKind::Linear),
            other => Err(Error::invalid("encoder", format!("{other:?} (expected lstm or linear)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SentenceEncoder {
    /// Final hidden state of an LSTM; word embeddings stay fixed.
    Lstm(LstmParams),
    /// Sum of word embeddings; word embeddings are trained.
    Linear,
}

/// Image projection `W_I` (K x D), sentence encoder, vocabulary and margin.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub vocab: Vocabulary,
    pub image_proj: Matrix,
    pub encoder: SentenceEncoder,
    pub margin: f64,
}

impl Parameters for JointModel {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("W_I", &self.image_proj);
        match &self.encoder {
            SentenceEncoder::Lstm(p) => p.for_each_param(&mut |n, m| f(&format!("lstm.{n}"), m)),
            SentenceEncoder::Linear => f("W_T", self.vocab.table()),
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("W_I", &mut self.image_proj);
        match &mut self.encoder {
            SentenceEncoder::Lstm(p) => {
                p.for_each_param_mut(&mut |n, m| f(&format!("lstm.{n}"), m))
            }
            SentenceEncoder::Linear => f("W_T", self.vocab.table_mut()),
        }
    }
}

impl JointModel {
    /// `W_I` and encoder weights from `uniform[-0.08, 0.08)`.
    pub fn new(
        vocab: Vocabulary,
        feature_dim: usize,
        kind: EncoderKind,
        margin: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !(margin > 0.0) {
            return Err(Error::invalid("margin", format!("{margin} must be positive")));
        }
        if !vocab.has_reserved() {
            return Err(Error::invalid("vocabulary", "reserved tokens missing"));
        }
        let k = vocab.dim();
        let image_proj = Matrix::uniform(k, feature_dim, -INIT_SCALE, INIT_SCALE, rng);
        let encoder = match kind {
            EncoderKind::Lstm => SentenceEncoder::Lstm(LstmParams::init(k, rng)),
            EncoderKind::Linear => SentenceEncoder::Linear,
        };
        Ok(JointModel {
            vocab,
            image_proj,
            encoder,
            margin,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self.encoder {
            SentenceEncoder::Lstm(_) => EncoderKind::Lstm,
            SentenceEncoder::Linear => EncoderKind::Linear,
        }
    }

    /// Embedding dimension `K`.
    pub fn dim(&self) -> usize {
        self.image_proj.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.image_proj.cols()
    }

    pub fn embed_image(&self, q: &[f64]) -> Result<Vec<f64>> {
        embed_image(q, &self.image_proj)
    }

    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        match &self.encoder {
            SentenceEncoder::Lstm(p) => lstm::encode_sentence(tokens, &self.vocab, p),
            SentenceEncoder::Linear => linear_encode(tokens, &self.vocab),
        }
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>> {
        self.encode(&self.vocab.ids(tokens))
    }

    pub fn zero_grads(&self) -> JointModel {
        let mut g = self.clone();
        zero_params(&mut g);
        g
    }

    /// Ranking loss of a batch of `(features, tokens)` pairs; when `grads` is
    /// given the gradient is accumulated into it.
    pub fn batch_loss(
        &self,
        batch: &[(&[f64], &[usize])],
        mut grads: Option<&mut JointModel>,
    ) -> Result<f64> {
        let images: Vec<Vec<f64>> = batch
            .iter()
            .map(|(q, _)| self.embed_image(q))
            .collect::<Result<_>>()?;
        let (sentences, traces) = match &self.encoder {
            SentenceEncoder::Lstm(p) => {
                let traces: Vec<lstm::LstmTrace> = batch
                    .iter()
                    .map(|(_, t)| lstm::forward(t, self.vocab.table(), p))
                    .collect::<Result<_>>()?;
                (traces.iter().map(|t| t.output().to_vec()).collect(), traces)
            }
            SentenceEncoder::Linear => (
                batch
                    .iter()
                    .map(|(_, t)| linear_encode(t, &self.vocab))
                    .collect::<Result<Vec<_>>>()?,
                Vec::new(),
            ),
        };
        let out = ranking_loss(&images, &sentences, self.margin)?;
        if let Some(g) = grads.as_deref_mut() {
            for (idx, ((q, tokens), (dx, dv))) in batch
                .iter()
                .zip(out.d_images.iter().zip(&out.d_sentences))
                .enumerate()
            {
                g.image_proj.add_outer(1.0, dx, q);
                match (&self.encoder, &mut g.encoder) {
                    (SentenceEncoder::Lstm(p), SentenceEncoder::Lstm(gp)) => {
                        lstm::backward(&traces[idx], dv, p, gp);
                    }
                    (SentenceEncoder::Linear, SentenceEncoder::Linear) => {
                        let table = g.vocab.table_mut();
                        for &t in tokens.iter() {
                            for (w, d) in table.row_mut(t).iter_mut().zip(dv) {
                                *w += d;
                            }
                        }
                    }
                    _ => return Err(Error::invalid("gradient holder", "encoder kind differs")),
                }
            }
        }
        Ok(out.loss)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set_dim("K", self.dim());
        a.set_dim("D", self.feature_dim());
        a.set_dim("V", self.vocab.len());
        a.set_meta("embed.encoder", self.kind().name());
        a.set_meta("embed.margin", self.margin);
        a.set_list("embed.vocab", self.vocab.tokens().to_vec());
        a.insert_tensor("embed.W_T", self.vocab.table().clone());
        a.insert_tensor("embed.W_I", self.image_proj.clone());
        if let SentenceEncoder::Lstm(p) = &self.encoder {
            a.put_params("embed.lstm.", p);
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if !a.has_prefix("embed.") {
            return Err(Error::MissingModel("embedding model (embed.*)".into()));
        }
        let k = a.dim("K")?;
        let d = a.dim("D")?;
        let v = a.dim("V")?;
        let tokens = a.list("embed.vocab")?.to_vec();
        if tokens.len() != v {
            return Err(Error::Archive(format!("vocabulary has {} tokens, V={v}", tokens.len())));
        }
        let table = a.tensor_shaped("embed.W_T", v, k)?.clone();
        let vocab = Vocabulary::new(tokens, table)?;
        let image_proj = a.tensor_shaped("embed.W_I", k, d)?.clone();
        let kind: EncoderKind = a.meta("embed.encoder")?.parse()?;
        let encoder = match kind {
            EncoderKind::Lstm => {
                let mut p = LstmParams::zeros(k);
                a.get_params("embed.lstm.", &mut p)?;
                SentenceEncoder::Lstm(p)
            }
            EncoderKind::Linear => SentenceEncoder::Linear,
        };
        Ok(JointModel {
            vocab,
            image_proj,
            encoder,
            margin: a.meta_parse("embed.margin")?,
        })
    }
}

/// `x = W_I q`.
pub fn embed_image(q: &[f64], image_proj: &Matrix) -> Result<Vec<f64>> {
    if q.len() != image_proj.cols() {
        return Err(Error::shape("image features", image_proj.cols(), q.len()));
    }
    if let Some(index) = q.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "image features".into(),
            index,
        });
    }
    Ok(image_proj.matvec(q))
}

/// Cosine similarity: both arguments are unit-normalized first.
pub fn score(x: &[f64], v: &[f64]) -> Result<f64> {
    if x.len() != v.len() {
        return Err(Error::shape("score operands", x.len(), v.len()));
    }
    Ok(dot(&unit_normalize(x)?, &unit_normalize(v)?))
}

/// Sum of the word embedding rows of `tokens`.
pub fn linear_encode(tokens: &[usize], vocab: &Vocabulary) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    let mut v = vec![0.0; vocab.dim()];
    for &t in tokens {
        vocab.check_id(t)?;
        for (acc, w) in v.iter_mut().zip(vocab.embedding(t)) {
            *acc += w;
        }
    }
    Ok(v)
}

/// Loss value and gradients with respect to the un-normalized embeddings.
#[derive(Debug, Clone)]
pub struct RankingLoss {
    pub loss: f64,
    pub d_images: Vec<Vec<f64>>,
    pub d_sentences: Vec<Vec<f64>>,
}

/// Bidirectional hinge ranking loss where pair `i` is `(images[i],
/// sentences[i])` and every other batch member serves as a contrastive term:
///
/// ```text
/// Σ_i Σ_{k≠i} [α - s(x_i, v_i) + s(x_i, v_k)]₊ + Σ_i Σ_{k≠i} [α - s(v_i, x_i) + s(v_i, x_k)]₊
/// ```
pub fn ranking_loss(images: &[Vec<f64>], sentences: &[Vec<f64>], margin: f64) -> Result<RankingLoss> {
    let b = images.len();
    if sentences.len() != b {
        return Err(Error::shape("ranking batch", b, sentences.len()));
    }
    if b < 2 {
        return Err(Error::invalid("ranking batch", format!("size {b}: need at least 2 pairs")));
    }
    let xs: Vec<(Vec<f64>, f64)> = images
        .iter()
        .map(|x| unit_normalize_with_norm(x))
        .collect::<Result<_>>()?;
    let vs: Vec<(Vec<f64>, f64)> = sentences
        .iter()
        .map(|v| unit_normalize_with_norm(v))
        .collect::<Result<_>>()?;
    let k = xs[0].0.len();
    if vs.iter().chain(&xs).any(|(u, _)| u.len() != k) {
        return Err(Error::shape("embedding dimension", k, "mixed"));
    }
    // s[i][j] = cos(x_i, v_j)
    let s: Vec<Vec<f64>> = xs
        .iter()
        .map(|(x, _)| vs.iter().map(|(v, _)| dot(x, v)).collect())
        .collect();
    let mut g = vec![vec![0.0; b]; b];
    let mut loss = 0.0;
    for i in 0..b {
        for c in 0..b {
            if c == i {
                continue;
            }
            let image_term = margin - s[i][i] + s[i][c];
            if image_term > 0.0 {
                loss += image_term;
                g[i][i] -= 1.0;
                g[i][c] += 1.0;
            }
            let sentence_term = margin - s[i][i] + s[c][i];
            if sentence_term > 0.0 {
                loss += sentence_term;
                g[i][i] -= 1.0;
                g[c][i] += 1.0;
            }
        }
    }
    let back = |unit: &[f64], norm: f64, d_unit: &[f64]| -> Vec<f64> {
        let proj = dot(unit, d_unit);
        unit.iter()
            .zip(d_unit)
            .map(|(u, d)| (d - u * proj) / norm)
            .collect()
    };
    let mut d_images = Vec::with_capacity(b);
    for i in 0..b {
        let mut dx = vec![0.0; k];
        for j in 0..b {
            if g[i][j] != 0.0 {
                crate::numcore::axpy(g[i][j], &vs[j].0, &mut dx);
            }
        }
        d_images.push(back(&xs[i].0, xs[i].1, &dx));
    }
    let mut d_sentences = Vec::with_capacity(b);
    for j in 0..b {
        let mut dv = vec![0.0; k];
        for i in 0..b {
            if g[i][j] != 0.0 {
                crate::numcore::axpy(g[i][j], &xs[i].0, &mut dv);
            }
        }
        d_sentences.push(back(&vs[j].0, vs[j].1, &dv));
    }
    Ok(RankingLoss {
        loss,
        d_images,
        d_sentences,
    })
}

/// Source of contrastive terms for the ranking loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastivePolicy {
    /// Every other member of the minibatch; reshuffling each epoch resamples
    /// them.
    InBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by this after every epoch.
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub contrastive: ContrastivePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            learning_rate: 1.0,
            decay: 0.99,
            epochs: 15,
            seed: 1234,
            contrastive: ContrastivePolicy::InBatch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay", "must lie in (0, 1]"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Mean loss per pair for each epoch.
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Splits a permutation into minibatches, folding a trailing singleton into
/// the previous batch.
fn minibatches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map_or(false, |c| c.len() < 2) {
        let n = order.len();
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..n];
    }
    out
}

/// Minibatch SGD on the ranking loss. Gradients are averaged over the batch;
/// the data order is reshuffled every epoch from `config.seed`.
pub fn train_embedding(
    records: &[CaptionRecord],
    features: &FeatureStore,
    model: &mut JointModel,
    config: &TrainConfig,
) -> Result<TrainingLog> {
    config.validate()?;
    if records.len() < 2 {
        return Err(Error::invalid(
            "training set",
            format!("{} pairs: need at least 2 for contrastive terms", records.len()),
        ));
    }
    if features.dim() != model.feature_dim() {
        return Err(Error::shape("feature dimension", model.feature_dim(), features.dim()));
    }
    let pairs: Vec<(&[f64], Vec<usize>)> = records
        .iter()
        .map(|r| Ok((features.get(&r.image_id)?, model.vocab.ids(&r.tokens))))
        .collect::<Result<_>>()?;
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut lr = config.learning_rate;
    let mut log = TrainingLog::default();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in minibatches(&order, config.batch_size) {
            let batch: Vec<(&[f64], &[usize])> = chunk
                .iter()
                .map(|&i| (pairs[i].0, pairs[i].1.as_slice()))
                .collect();
            let mut grads = model.zero_grads();
            total += model.batch_loss(&batch, Some(&mut grads))?;
            sgd_step(model, &grads, lr / batch.len() as f64);
        }
        log.epoch_losses.push(total / pairs.len() as f64);
        log.learning_rates.push(lr);
        lr *= config.decay;
    }
    Ok(log)
}
