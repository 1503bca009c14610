//! Neural language models: log-bilinear (LBL), multiplicative with a factored
//! word tensor (MNLM), and the structure-content model (SC-NLM) whose
//! attribute vector mixes POS-tag context with a content vector.
//!
//! Column vectors throughout: `C^(i)` maps K to K, `W_fk` is F x K,
//! `W_fd` is F x G and `W_fv` is F x V.

use indexmap::IndexSet;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::ingest::{CaptionRecord, TagSet, INIT_SCALE, START};
use crate::numcore::{
    log_softmax, sgd_step, stable_softmax, zero_params, Matrix, Parameters, SeededRng,
};

fn check_index(what: &'static str, index: usize, size: usize) -> Result<()> {
    if index >= size {
        return Err(Error::OutOfRange {
            what,
            index,
            size,
        });
    }
    Ok(())
}

fn check_context(context: &[usize], expected: usize, vocab: usize) -> Result<()> {
    if context.len() != expected {
        return Err(Error::shape("word context", expected, context.len()));
    }
    for &w in context {
        check_index("context word", w, vocab)?;
    }
    Ok(())
}

fn check_vector(what: &str, v: &[f64], len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::shape(what, len, v.len()));
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: what.to_string(),
            index,
        });
    }
    Ok(())
}

fn context_mats(n: usize, k: usize, scale: f64, rng: &mut SeededRng) -> Vec<Matrix> {
    (0..n)
        .map(|_| Matrix::uniform(k, k, -scale, scale, rng))
        .collect()
}

/// `log((c_i + 1) / (N + V))` over the target tokens of `examples`.
pub fn log_unigram_bias(examples: &[NlmExample], vocab: usize) -> Matrix {
    let mut counts = vec![0.0; vocab];
    let mut total = 0.0;
    for ex in examples {
        for &w in &ex.words {
            if w < vocab {
                counts[w] += 1.0;
                total += 1.0;
            }
        }
    }
    let values = counts
        .iter()
        .map(|c| ((c + 1.0) / (total + vocab as f64)).ln())
        .collect();
    Matrix::column(values).expect("finite log frequencies")
}

// ---------------------------------------------------------------------------
// Log-bilinear model

#[derive(Debug, Clone, PartialEq)]
pub struct LblParams {
    /// Word representations, one row per word (V x K).
    pub r: Matrix,
    pub context: Vec<Matrix>,
    pub bias: Matrix,
}

impl Parameters for LblParams {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("R", &self.r);
        for (i, c) in self.context.iter().enumerate() {
            f(&format!("C{}", i + 1), c);
        }
        f("b", &self.bias);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("R", &mut self.r);
        for (i, c) in self.context.iter_mut().enumerate() {
            f(&format!("C{}", i + 1), c);
        }
        f("b", &mut self.bias);
    }
}

impl LblParams {
    pub fn zeros(vocab: usize, k: usize, context: usize) -> Self {
        LblParams {
            r: Matrix::zeros(vocab, k),
            context: vec![Matrix::zeros(k, k); context],
            bias: Matrix::zeros(vocab, 1),
        }
    }

    pub fn init(vocab: usize, k: usize, context: usize, rng: &mut SeededRng) -> Result<Self> {
        if context == 0 {
            return Err(Error::invalid("context size", "must be at least 1"));
        }
        Ok(LblParams {
            r: Matrix::uniform(vocab, k, -INIT_SCALE, INIT_SCALE, rng),
            context: context_mats(context, k, INIT_SCALE, rng),
            bias: Matrix::zeros(vocab, 1),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.r.rows()
    }

    pub fn dim(&self) -> usize {
        self.r.cols()
    }

    fn predict(&self, context: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_context(context, self.context.len(), self.vocab_size())?;
        let mut r_hat = vec![0.0; self.dim()];
        for (c, &w) in self.context.iter().zip(context) {
            c.matvec_acc(self.r.row(w), &mut r_hat);
        }
        let mut logits = self.r.matvec(&r_hat);
        for (l, b) in logits.iter_mut().zip(self.bias.as_slice()) {
            *l += b;
        }
        Ok((r_hat, logits))
    }
}

/// `softmax(R r̂ + b)` with `r̂ = Σ C^(i) r_{w_i}`.
pub fn lbl_distribution(context: &[usize], params: &LblParams) -> Result<Vec<f64>> {
    stable_softmax(&params.predict(context)?.1)
}

// ---------------------------------------------------------------------------
// Factored tensor and multiplicative model

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredTensor {
    pub w_fk: Matrix,
    pub w_fd: Matrix,
    pub w_fv: Matrix,
    pub bias: Matrix,
}

impl Parameters for FactoredTensor {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("W_fk", &self.w_fk);
        f("W_fd", &self.w_fd);
        f("W_fv", &self.w_fv);
        f("b", &self.bias);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("W_fk", &mut self.w_fk);
        f("W_fd", &mut self.w_fd);
        f("W_fv", &mut self.w_fv);
        f("b", &mut self.bias);
    }
}

impl FactoredTensor {
    pub fn zeros(vocab: usize, k: usize, g: usize, factors: usize) -> Self {
        FactoredTensor {
            w_fk: Matrix::zeros(factors, k),
            w_fd: Matrix::zeros(factors, g),
            w_fv: Matrix::zeros(factors, vocab),
            bias: Matrix::zeros(vocab, 1),
        }
    }

    pub fn init(vocab: usize, k: usize, g: usize, factors: usize, rng: &mut SeededRng) -> Result<Self> {
        FactoredTensor::init_scaled(vocab, k, g, factors, INIT_SCALE, rng)
    }

    pub fn init_scaled(
        vocab: usize,
        k: usize,
        g: usize,
        factors: usize,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if vocab == 0 || k == 0 || g == 0 || factors == 0 {
            return Err(Error::invalid("factored tensor", "V, K, G and F must be positive"));
        }
        let u = |r, c, rng: &mut SeededRng| Matrix::uniform(r, c, -scale, scale, rng);
        Ok(FactoredTensor {
            w_fk: u(factors, k, rng),
            w_fd: u(factors, g, rng),
            w_fv: u(factors, vocab, rng),
            bias: Matrix::zeros(vocab, 1),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.w_fv.cols()
    }

    pub fn dim(&self) -> usize {
        self.w_fk.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.w_fd.cols()
    }

    pub fn factors(&self) -> usize {
        self.w_fk.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factors();
        self.w_fd.ensure_shape("W_fd", f, self.attr_dim())?;
        self.w_fv.ensure_shape("W_fv", f, self.vocab_size())?;
        self.bias.ensure_shape("b", self.vocab_size(), 1)
    }

    /// Column `w` of the folded embedding matrix: `W_fkᵀ W_fv(:, w)`.
    pub fn folded_column(&self, w: usize) -> Vec<f64> {
        self.w_fk.tmatvec(&self.w_fv.col(w))
    }
}

/// Folded word embeddings `E = W_fkᵀ W_fv` (K x V).
pub fn fold_embeddings(factored: &FactoredTensor) -> Result<Matrix> {
    factored.validate()?;
    factored.w_fk.transpose().matmul(&factored.w_fv)
}

/// Intermediate values of one factored prediction.
#[derive(Debug, Clone)]
struct FactoredStep {
    context: Vec<usize>,
    embedded: Vec<Vec<f64>>,
    r_hat: Vec<f64>,
    /// `W_fk r̂`
    a: Vec<f64>,
    /// `W_fd u`
    d: Vec<f64>,
    f: Vec<f64>,
    logits: Vec<f64>,
}

fn factored_forward(
    ft: &FactoredTensor,
    context_mats: &[Matrix],
    context: &[usize],
    u: &[f64],
) -> Result<FactoredStep> {
    check_context(context, context_mats.len(), ft.vocab_size())?;
    check_vector("attribute vector", u, ft.attr_dim())?;
    let mut r_hat = vec![0.0; ft.dim()];
    let embedded: Vec<Vec<f64>> = context.iter().map(|&w| ft.folded_column(w)).collect();
    for (c, e) in context_mats.iter().zip(&embedded) {
        c.matvec_acc(e, &mut r_hat);
    }
    let a = ft.w_fk.matvec(&r_hat);
    let d = ft.w_fd.matvec(u);
    let f: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x * y).collect();
    let mut logits = ft.w_fv.tmatvec(&f);
    for (l, b) in logits.iter_mut().zip(ft.bias.as_slice()) {
        *l += b;
    }
    Ok(FactoredStep {
        context: context.to_vec(),
        embedded,
        r_hat,
        a,
        d,
        f,
        logits,
    })
}

/// Accumulates gradients for `dlogits` and returns `dL/du`.
fn factored_backward(
    step: &FactoredStep,
    dlogits: &[f64],
    u: &[f64],
    ft: &FactoredTensor,
    context_mats: &[Matrix],
    g_ft: &mut FactoredTensor,
    g_context: &mut [Matrix],
) -> Vec<f64> {
    for (b, d) in g_ft.bias.as_mut_slice().iter_mut().zip(dlogits) {
        *b += d;
    }
    g_ft.w_fv.add_outer(1.0, &step.f, dlogits);
    let df = ft.w_fv.matvec(dlogits);
    let da: Vec<f64> = df.iter().zip(&step.d).map(|(x, y)| x * y).collect();
    let dd: Vec<f64> = df.iter().zip(&step.a).map(|(x, y)| x * y).collect();
    g_ft.w_fd.add_outer(1.0, &dd, u);
    g_ft.w_fk.add_outer(1.0, &da, &step.r_hat);
    let dr_hat = ft.w_fk.tmatvec(&da);
    for (i, (&w, e)) in step.context.iter().zip(&step.embedded).enumerate() {
        g_context[i].add_outer(1.0, &dr_hat, e);
        let de = context_mats[i].tmatvec(&dr_hat);
        // e = W_fkᵀ v with v = W_fv(:, w)
        let v = ft.w_fv.col(w);
        g_ft.w_fk.add_outer(1.0, &v, &de);
        let dv = ft.w_fk.matvec(&de);
        for (row, dvr) in dv.iter().enumerate() {
            let cur = g_ft.w_fv.get(row, w);
            g_ft.w_fv.set(row, w, cur + dvr);
        }
    }
    ft.w_fd.tmatvec(&dd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnlmParams {
    pub factored: FactoredTensor,
    pub context: Vec<Matrix>,
}

impl Parameters for MnlmParams {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.factored.for_each_param(f);
        for (i, c) in self.context.iter().enumerate() {
            f(&format!("C{}", i + 1), c);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.factored.for_each_param_mut(f);
        for (i, c) in self.context.iter_mut().enumerate() {
            f(&format!("C{}", i + 1), c);
        }
    }
}

impl MnlmParams {
    pub fn init(
        vocab: usize,
        k: usize,
        g: usize,
        factors: usize,
        context: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if context == 0 {
            return Err(Error::invalid("context size", "must be at least 1"));
        }
        let factored = FactoredTensor::init(vocab, k, g, factors, rng)?;
        Ok(MnlmParams {
            factored,
            context: context_mats(context, k, INIT_SCALE, rng),
        })
    }
}

/// `softmax(W_fvᵀ f + b)` with `f = (W_fk r̂) • (W_fd u)` and
/// `r̂ = Σ C^(i) E(:, w_i)`.
pub fn mnlm_distribution(context: &[usize], u: &[f64], params: &MnlmParams) -> Result<Vec<f64>> {
    let step = factored_forward(&params.factored, &params.context, context, u)?;
    stable_softmax(&step.logits)
}

// ---------------------------------------------------------------------------
// Structure-content model

#[derive(Debug, Clone, PartialEq)]
pub struct ScnlmParams {
    pub factored: FactoredTensor,
    pub context: Vec<Matrix>,
    /// Tag embeddings, one row per tag (tags x G).
    pub tag_table: Matrix,
    /// `T^(n)..T^(n+k)`, each G x G.
    pub structure: Vec<Matrix>,
    /// `T^(u)`, G x K.
    pub content: Matrix,
    /// Structure bias, G x 1.
    pub structure_bias: Matrix,
}

impl Parameters for ScnlmParams {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.factored.for_each_param(f);
        for (i, c) in self.context.iter().enumerate() {
            f(&format!("C{}", i + 1), c);
        }
        f("tags", &self.tag_table);
        for (i, t) in self.structure.iter().enumerate() {
            f(&format!("T{i}"), t);
        }
        f("T_u", &self.content);
        f("b_s", &self.structure_bias);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.factored.for_each_param_mut(f);
        for (i, c) in self.context.iter_mut().enumerate() {
            f(&format!("C{}", i + 1), c);
        }
        f("tags", &mut self.tag_table);
        for (i, t) in self.structure.iter_mut().enumerate() {
            f(&format!("T{i}"), t);
        }
        f("T_u", &mut self.content);
        f("b_s", &mut self.structure_bias);
    }
}

/// Sizes of an SC-NLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScnlmDims {
    pub vocab: usize,
    pub tags: usize,
    /// Word representation size `K`; also the content vector size.
    pub k: usize,
    /// Attribute size `G`.
    pub g: usize,
    pub factors: usize,
    /// Word context `n - 1`.
    pub context: usize,
    /// Forward tag context `k`; `k + 1` tags are read.
    pub forward: usize,
}

impl ScnlmParams {
    pub fn zeros(d: ScnlmDims) -> Self {
        ScnlmParams {
            factored: FactoredTensor::zeros(d.vocab, d.k, d.g, d.factors),
            context: vec![Matrix::zeros(d.k, d.k); d.context],
            tag_table: Matrix::zeros(d.tags, d.g),
            structure: vec![Matrix::zeros(d.g, d.g); d.forward + 1],
            content: Matrix::zeros(d.g, d.k),
            structure_bias: Matrix::zeros(d.g, 1),
        }
    }

    pub fn init(d: ScnlmDims, rng: &mut SeededRng) -> Result<Self> {
        ScnlmParams::init_scaled(d, INIT_SCALE, rng)
    }

    /// Weights uniform in `[-scale, scale]`, structure bias zero.
    pub fn init_scaled(d: ScnlmDims, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("init scale", format!("{scale} is not a positive number")));
        }
        if d.context == 0 {
            return Err(Error::invalid("context size", "must be at least 1"));
        }
        if d.tags == 0 {
            return Err(Error::invalid("tag set", "empty"));
        }
        let factored = FactoredTensor::init_scaled(d.vocab, d.k, d.g, d.factors, scale, rng)?;
        let context = context_mats(d.context, d.k, scale, rng);
        let tag_table = Matrix::uniform(d.tags, d.g, -scale, scale, rng);
        let structure = context_mats(d.forward + 1, d.g, scale, rng);
        let content = Matrix::uniform(d.g, d.k, -scale, scale, rng);
        Ok(ScnlmParams {
            factored,
            context,
            tag_table,
            structure,
            content,
            structure_bias: Matrix::zeros(d.g, 1),
        })
    }

    pub fn dims(&self) -> ScnlmDims {
        ScnlmDims {
            vocab: self.factored.vocab_size(),
            tags: self.tag_table.rows(),
            k: self.factored.dim(),
            g: self.factored.attr_dim(),
            factors: self.factored.factors(),
            context: self.context.len(),
            forward: self.structure.len().saturating_sub(1),
        }
    }

    /// Pre-activation of the attribute vector.
    fn attribute_input(&self, u: &[f64], tags: &[usize]) -> Result<Vec<f64>> {
        let d = self.dims();
        check_vector("content vector", u, d.k)?;
        if tags.len() != self.structure.len() {
            return Err(Error::shape("forward tag context", self.structure.len(), tags.len()));
        }
        let mut pre = self.content.matvec(u);
        for (t, &tag) in self.structure.iter().zip(tags) {
            check_index("tag", tag, d.tags)?;
            t.matvec_acc(self.tag_table.row(tag), &mut pre);
        }
        for (p, b) in pre.iter_mut().zip(self.structure_bias.as_slice()) {
            *p += b;
        }
        Ok(pre)
    }
}

/// `û = ReLU(Σ T^(i) t_i + T^(u) u + b)` over the `k + 1` forward tags.
pub fn scnlm_attribute(u: &[f64], tags: &[usize], params: &ScnlmParams) -> Result<Vec<f64>> {
    Ok(params
        .attribute_input(u, tags)?
        .into_iter()
        .map(|x| x.max(0.0))
        .collect())
}

/// Next-word distribution given a precomputed attribute vector.
pub fn scnlm_distribution_with_attribute(
    context: &[usize],
    u_hat: &[f64],
    params: &ScnlmParams,
) -> Result<Vec<f64>> {
    let step = factored_forward(&params.factored, &params.context, context, u_hat)?;
    stable_softmax(&step.logits)
}

/// The multiplicative model with attribute [`scnlm_attribute`].
pub fn scnlm_distribution(
    context: &[usize],
    tags: &[usize],
    u: &[f64],
    params: &ScnlmParams,
) -> Result<Vec<f64>> {
    let u_hat = scnlm_attribute(u, tags, params)?;
    scnlm_distribution_with_attribute(context, &u_hat, params)
}

// ---------------------------------------------------------------------------
// Sentences, NLL and training

/// One training sentence in index form.
#[derive(Debug, Clone, PartialEq)]
pub struct NlmExample {
    pub words: Vec<usize>,
    pub tags: Vec<usize>,
    pub cond: Vec<f64>,
}

/// Word context of position `pos`, oldest first, padded with `start`.
pub fn word_context(words: &[usize], pos: usize, size: usize, start: usize) -> Vec<usize> {
    (0..size)
        .map(|i| {
            let back = size - i;
            if pos >= back {
                words[pos - back]
            } else {
                start
            }
        })
        .collect()
}

/// Tags `t_pos..t_{pos+k}`, padded with `endpos` past the end.
pub fn forward_tags(tags: &[usize], pos: usize, count: usize, endpos: usize) -> Vec<usize> {
    (pos..pos + count)
        .map(|i| tags.get(i).copied().unwrap_or(endpos))
        .collect()
}

/// A next-word model trainable by [`train_nlm`].
pub trait SentenceModel: Parameters + Clone {
    fn vocab_size(&self) -> usize;

    /// Summed negative log-likelihood of every word of `ex`; gradients are
    /// accumulated into `grads` when given.
    fn sentence_nll(&self, ex: &NlmExample, grads: Option<&mut Self>) -> Result<f64>;
}

fn nll_and_dlogits(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    check_index("target word", target, logits.len())?;
    let logp = log_softmax(logits)?;
    let mut d: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    d[target] -= 1.0;
    Ok((-logp[target], d))
}

/// LBL with its `<start>` padding index.
#[derive(Debug, Clone, PartialEq)]
pub struct LblModel {
    pub params: LblParams,
    pub start: usize,
}

impl Parameters for LblModel {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.params.for_each_param(f)
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.params.for_each_param_mut(f)
    }
}

impl SentenceModel for LblModel {
    fn vocab_size(&self) -> usize {
        self.params.vocab_size()
    }

    fn sentence_nll(&self, ex: &NlmExample, mut grads: Option<&mut Self>) -> Result<f64> {
        let p = &self.params;
        let mut total = 0.0;
        for pos in 0..ex.words.len() {
            let ctx = word_context(&ex.words, pos, p.context.len(), self.start);
            let (r_hat, logits) = p.predict(&ctx)?;
            let (nll, dl) = nll_and_dlogits(&logits, ex.words[pos])?;
            total += nll;
            if let Some(g) = grads.as_deref_mut() {
                let g = &mut g.params;
                for (b, d) in g.bias.as_mut_slice().iter_mut().zip(&dl) {
                    *b += d;
                }
                g.r.add_outer(1.0, &dl, &r_hat);
                let dr_hat = p.r.tmatvec(&dl);
                for (i, &w) in ctx.iter().enumerate() {
                    g.context[i].add_outer(1.0, &dr_hat, p.r.row(w));
                    let dw = p.context[i].tmatvec(&dr_hat);
                    for (x, y) in g.r.row_mut(w).iter_mut().zip(&dw) {
                        *x += y;
                    }
                }
            }
        }
        Ok(total)
    }
}

/// Multiplicative model; the example's `cond` is the attribute `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct MnlmModel {
    pub params: MnlmParams,
    pub start: usize,
}

impl Parameters for MnlmModel {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.params.for_each_param(f)
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.params.for_each_param_mut(f)
    }
}

impl SentenceModel for MnlmModel {
    fn vocab_size(&self) -> usize {
        self.params.factored.vocab_size()
    }

    fn sentence_nll(&self, ex: &NlmExample, mut grads: Option<&mut Self>) -> Result<f64> {
        let p = &self.params;
        let mut total = 0.0;
        for pos in 0..ex.words.len() {
            let ctx = word_context(&ex.words, pos, p.context.len(), self.start);
            let step = factored_forward(&p.factored, &p.context, &ctx, &ex.cond)?;
            let (nll, dl) = nll_and_dlogits(&step.logits, ex.words[pos])?;
            total += nll;
            if let Some(g) = grads.as_deref_mut() {
                let g = &mut g.params;
                factored_backward(&step, &dl, &ex.cond, &p.factored, &p.context, &mut g.factored, &mut g.context);
            }
        }
        Ok(total)
    }
}

/// SC-NLM with its word list and tag set.
#[derive(Debug, Clone, PartialEq)]
pub struct ScnlmModel {
    pub words: IndexSet<String>,
    pub tags: TagSet,
    pub params: ScnlmParams,
}

impl Parameters for ScnlmModel {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        self.params.for_each_param(f)
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        self.params.for_each_param_mut(f)
    }
}

impl ScnlmModel {
    /// `words` must contain `<start>`. `G` equals `K` unless `g` is given.
    pub fn new(
        words: Vec<String>,
        tags: TagSet,
        k: usize,
        g: Option<usize>,
        factors: usize,
        context: usize,
        forward: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let words: IndexSet<String> = words.into_iter().collect();
        if !words.contains(START) {
            return Err(Error::invalid("NLM vocabulary", "missing <start>"));
        }
        let dims = ScnlmDims {
            vocab: words.len(),
            tags: tags.len(),
            k,
            g: g.unwrap_or(k),
            factors,
            context,
            forward,
        };
        Ok(ScnlmModel {
            params: ScnlmParams::init(dims, rng)?,
            words,
            tags,
        })
    }

    /// Redraws every weight uniformly in `[-scale, scale]`.
    pub fn reinit(&mut self, scale: f64, rng: &mut SeededRng) -> Result<()> {
        self.params = ScnlmParams::init_scaled(self.dims(), scale, rng)?;
        Ok(())
    }

    pub fn start(&self) -> usize {
        self.words.get_index_of(START).expect("<start> present")
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get_index(id).map_or("", String::as_str)
    }

    pub fn word_id(&self, w: &str) -> Option<usize> {
        self.words.get_index_of(w)
    }

    pub fn dims(&self) -> ScnlmDims {
        self.params.dims()
    }

    /// Index form of `record`; unknown words map to `<unk>` when present.
    pub fn example(&self, record: &CaptionRecord, cond: Vec<f64>) -> Result<NlmExample> {
        let unk = self.words.get_index_of(crate::ingest::UNK);
        let words = record
            .tokens
            .iter()
            .map(|t| {
                self.words.get_index_of(t.as_str()).or(unk).ok_or_else(|| {
                    Error::invalid("NLM vocabulary", format!("unknown word {t:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tags = self.tags.ids(&record.tags)?;
        if tags.len() != words.len() {
            return Err(Error::shape("tag sequence", words.len(), tags.len()));
        }
        check_vector("conditioning vector", &cond, self.dims().k)?;
        Ok(NlmExample { words, tags, cond })
    }

    /// Pairs each record with its conditioning vector.
    pub fn examples(&self, records: &[CaptionRecord], conds: &[Vec<f64>]) -> Result<Vec<NlmExample>> {
        if records.len() != conds.len() {
            return Err(Error::invalid(
                "conditioning vectors",
                format!("{} records but {} vectors", records.len(), conds.len()),
            ));
        }
        records
            .iter()
            .zip(conds)
            .map(|(r, c)| self.example(r, c.clone()))
            .collect()
    }

    /// Sets the output bias to smoothed log unigram frequencies of `examples`.
    pub fn init_bias(&mut self, examples: &[NlmExample]) {
        self.params.factored.bias = log_unigram_bias(examples, self.dims().vocab);
    }

    pub fn to_archive(&self) -> Archive {
        let d = self.dims();
        let mut a = Archive::new();
        for (name, v) in [
            ("scnlm.V", d.vocab),
            ("scnlm.K", d.k),
            ("scnlm.G", d.g),
            ("scnlm.F", d.factors),
            ("scnlm.context", d.context),
            ("scnlm.forward", d.forward),
        ] {
            a.set_dim(name, v);
        }
        a.set_list("scnlm.words", self.words.iter().cloned().collect());
        a.set_list("scnlm.tags", self.tags.tags().to_vec());
        a.put_params("scnlm.", &self.params);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if !a.has_prefix("scnlm.") {
            return Err(Error::MissingModel("SC-NLM (scnlm.*)".into()));
        }
        let words: IndexSet<String> = a.list("scnlm.words")?.iter().cloned().collect();
        let tags = TagSet::new(a.list("scnlm.tags")?.to_vec())?;
        let dims = ScnlmDims {
            vocab: a.dim("scnlm.V")?,
            tags: tags.len(),
            k: a.dim("scnlm.K")?,
            g: a.dim("scnlm.G")?,
            factors: a.dim("scnlm.F")?,
            context: a.dim("scnlm.context")?,
            forward: a.dim("scnlm.forward")?,
        };
        if words.len() != dims.vocab || !words.contains(START) {
            return Err(Error::Archive("SC-NLM word list inconsistent with V".into()));
        }
        let mut params = ScnlmParams::zeros(dims);
        a.get_params("scnlm.", &mut params)?;
        Ok(ScnlmModel {
            words,
            tags,
            params,
        })
    }
}

impl SentenceModel for ScnlmModel {
    fn vocab_size(&self) -> usize {
        self.params.factored.vocab_size()
    }

    fn sentence_nll(&self, ex: &NlmExample, mut grads: Option<&mut Self>) -> Result<f64> {
        let p = &self.params;
        let (start, endpos) = (self.start(), self.tags.endpos());
        if ex.tags.len() != ex.words.len() {
            return Err(Error::shape("tag sequence", ex.words.len(), ex.tags.len()));
        }
        let mut total = 0.0;
        for pos in 0..ex.words.len() {
            let ctx = word_context(&ex.words, pos, p.context.len(), start);
            let tags = forward_tags(&ex.tags, pos, p.structure.len(), endpos);
            let pre = p.attribute_input(&ex.cond, &tags)?;
            let u_hat: Vec<f64> = pre.iter().map(|x| x.max(0.0)).collect();
            let step = factored_forward(&p.factored, &p.context, &ctx, &u_hat)?;
            let (nll, dl) = nll_and_dlogits(&step.logits, ex.words[pos])?;
            total += nll;
            if let Some(g) = grads.as_deref_mut() {
                let g = &mut g.params;
                let du_hat = factored_backward(&step, &dl, &u_hat, &p.factored, &p.context, &mut g.factored, &mut g.context);
                let dpre: Vec<f64> = du_hat
                    .iter()
                    .zip(&pre)
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                for (b, d) in g.structure_bias.as_mut_slice().iter_mut().zip(&dpre) {
                    *b += d;
                }
                g.content.add_outer(1.0, &dpre, &ex.cond);
                for (i, &tag) in tags.iter().enumerate() {
                    g.structure[i].add_outer(1.0, &dpre, p.tag_table.row(tag));
                    let dt = p.structure[i].tmatvec(&dpre);
                    for (x, y) in g.tag_table.row_mut(tag).iter_mut().zip(&dt) {
                        *x += y;
                    }
                }
            }
        }
        Ok(total)
    }
}

/// Where conditioning vectors come from during SC-NLM training.
/// Decoder words (first-seen order, then `<start>`) and tag set of `records`.
pub fn decoder_vocabulary(records: &[CaptionRecord]) -> Result<(Vec<String>, TagSet)> {
    let mut words = IndexSet::new();
    let mut tags = IndexSet::new();
    for r in records {
        words.extend(r.tokens.iter().cloned());
        tags.extend(r.tags.iter().cloned());
    }
    words.insert(START.to_string());
    Ok((words.into_iter().collect(), TagSet::new(tags.into_iter().collect())?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditioningSource {
    /// Encoder embedding of the caption itself; allows text-only training.
    TextEmbedding,
    /// Projected features of the paired image.
    ImageEmbedding,
}

impl std::str::FromStr for ConditioningSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ConditioningSource::TextEmbedding),
            "image" => Ok(ConditioningSource::ImageEmbedding),
            other => Err(Error::invalid("conditioning", format!("{other:?} (expected text or image)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlmTrainConfig {
    pub context: usize,
    pub forward: usize,
    pub factors: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub seed: u64,
    pub conditioning: ConditioningSource,
}

impl Default for NlmTrainConfig {
    fn default() -> Self {
        NlmTrainConfig {
            context: 5,
            forward: 3,
            factors: 100,
            epochs: 20,
            learning_rate: 0.1,
            decay: 0.99,
            seed: 1234,
            conditioning: ConditioningSource::TextEmbedding,
        }
    }
}

impl NlmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate", "must be positive"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid("decay", "must lie in (0, 1]"));
        }
        if self.context == 0 {
            return Err(Error::invalid("context size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NlmTrainLog {
    /// Mean per-token NLL of each epoch.
    pub epoch_nll: Vec<f64>,
}

/// Per-sentence SGD on the mean token NLL, reshuffled every epoch.
pub fn train_nlm<M: SentenceModel>(
    model: &mut M,
    examples: &[NlmExample],
    config: &NlmTrainConfig,
) -> Result<NlmTrainLog> {
    config.validate()?;
    if examples.iter().all(|e| e.words.is_empty()) && config.epochs > 0 {
        return Err(Error::Empty("training corpus"));
    }
    let mut rng = SeededRng::new(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut lr = config.learning_rate;
    let mut log = NlmTrainLog::default();
    let mut grads = model.clone();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in &order {
            let ex = &examples[i];
            if ex.words.is_empty() {
                continue;
            }
            zero_params(&mut grads);
            total += model.sentence_nll(ex, Some(&mut grads))?;
            count += ex.words.len();
            sgd_step(model, &grads, lr / ex.words.len() as f64);
        }
        log.epoch_nll.push(total / count as f64);
        lr *= config.decay;
    }
    Ok(log)
}

/// `exp(total NLL / token count)`.
pub fn perplexity<M: SentenceModel>(model: &M, examples: &[NlmExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        total += model.sentence_nll(ex, None)?;
        count += ex.words.len();
    }
    if count == 0 {
        return Err(Error::Empty("perplexity corpus"));
    }
    Ok((total / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::check_model_gradient;
    use proptest::prelude::*;

    fn softmax_ref(logits: &[f64]) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }

    fn rand_matrix(r: usize, c: usize, scale: f64, rng: &mut SeededRng) -> Matrix {
        Matrix::uniform(r, c, -scale, scale, rng)
    }

    fn rand_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    fn random_factored(v: usize, k: usize, g: usize, f: usize, scale: f64, rng: &mut SeededRng) -> FactoredTensor {
        FactoredTensor {
            w_fk: rand_matrix(f, k, scale, rng),
            w_fd: rand_matrix(f, g, scale, rng),
            w_fv: rand_matrix(f, v, scale, rng),
            bias: rand_matrix(v, 1, scale, rng),
        }
    }

    fn assert_distribution(p: &[f64]) {
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
        assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn lbl_zero_params_uniform() {
        let p = LblParams::zeros(7, 3, 2);
        let d = lbl_distribution(&[0, 4], &p).unwrap();
        for x in d {
            assert!((x - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lbl_matches_explicit_arithmetic() {
        let mut rng = SeededRng::new(11);
        let p = LblParams {
            r: rand_matrix(5, 2, 1.0, &mut rng),
            context: vec![rand_matrix(2, 2, 1.0, &mut rng)],
            bias: rand_matrix(5, 1, 1.0, &mut rng),
        };
        let w = 3;
        let c = &p.context[0];
        let r_hat = [
            c.get(0, 0) * p.r.get(w, 0) + c.get(0, 1) * p.r.get(w, 1),
            c.get(1, 0) * p.r.get(w, 0) + c.get(1, 1) * p.r.get(w, 1),
        ];
        let logits: Vec<f64> = (0..5)
            .map(|i| r_hat[0] * p.r.get(i, 0) + r_hat[1] * p.r.get(i, 1) + p.bias.get(i, 0))
            .collect();
        let want = softmax_ref(&logits);
        let got = lbl_distribution(&[w], &p).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(lbl_distribution(&[9], &p).is_err());
        assert!(lbl_distribution(&[1, 2], &p).is_err());
    }

    #[test]
    fn lbl_dominant_bias() {
        let mut p = LblParams::zeros(6, 2, 1);
        p.bias.set(4, 0, 20.0);
        let d = lbl_distribution(&[0], &p).unwrap();
        assert!(d[4] > 0.999);
    }

    #[test]
    fn fold_cases() {
        let mut ft = FactoredTensor::zeros(3, 3, 2, 3);
        ft.w_fk = Matrix::identity(3);
        ft.w_fv = Matrix::identity(3);
        assert_eq!(fold_embeddings(&ft).unwrap(), Matrix::identity(3));

        let mut rng = SeededRng::new(12);
        let ft = random_factored(4, 3, 2, 2, 1.0, &mut rng);
        let e = fold_embeddings(&ft).unwrap();
        assert_eq!(e.shape(), (3, 4));
        for k in 0..3 {
            for v in 0..4 {
                let hand = ft.w_fk.get(0, k) * ft.w_fv.get(0, v) + ft.w_fk.get(1, k) * ft.w_fv.get(1, v);
                assert!((e.get(k, v) - hand).abs() < 1e-15);
                assert!((ft.folded_column(v)[k] - hand).abs() < 1e-15);
            }
        }

        let mut zero_fk = ft.clone();
        zero_fk.w_fk.fill(0.0);
        assert!(fold_embeddings(&zero_fk).unwrap().as_slice().iter().all(|x| *x == 0.0));
    }

    /// Logits from the explicit V x K x G tensor, contracted with `u` and the
    /// predicted representation.
    fn unfactored_logits(ft: &FactoredTensor, context: &[Matrix], words: &[usize], u: &[f64]) -> Vec<f64> {
        let (v, k, g, f) = (ft.vocab_size(), ft.dim(), ft.attr_dim(), ft.factors());
        let mut tensor = vec![vec![vec![0.0; g]; k]; v];
        for vi in 0..v {
            for ki in 0..k {
                for gi in 0..g {
                    let mut s = 0.0;
                    for fi in 0..f {
                        s += ft.w_fv.get(fi, vi) * ft.w_fd.get(fi, gi) * ft.w_fk.get(fi, ki);
                    }
                    tensor[vi][ki][gi] = s;
                }
            }
        }
        let t_u: Vec<Vec<f64>> = (0..v)
            .map(|vi| (0..k).map(|ki| (0..g).map(|gi| u[gi] * tensor[vi][ki][gi]).sum()).collect())
            .collect();
        let mut e = vec![vec![0.0; v]; k];
        for ki in 0..k {
            for vi in 0..v {
                e[ki][vi] = (0..f).map(|fi| ft.w_fk.get(fi, ki) * ft.w_fv.get(fi, vi)).sum();
            }
        }
        let mut r_hat = vec![0.0; k];
        for (c, &w) in context.iter().zip(words) {
            for a in 0..k {
                for b in 0..k {
                    r_hat[a] += c.get(a, b) * e[b][w];
                }
            }
        }
        (0..v)
            .map(|vi| (0..k).map(|ki| t_u[vi][ki] * r_hat[ki]).sum::<f64>() + ft.bias.get(vi, 0))
            .collect()
    }

    #[test]
    fn factored_matches_unfactored_tensor() {
        let mut rng = SeededRng::new(13);
        for _ in 0..100 {
            let ft = random_factored(4, 2, 2, 2, 1.0, &mut rng);
            let context = vec![rand_matrix(2, 2, 1.0, &mut rng), rand_matrix(2, 2, 1.0, &mut rng)];
            let words = [rng.below(4), rng.below(4)];
            let u = rand_vec(2, &mut rng);
            let step = factored_forward(&ft, &context, &words, &u).unwrap();
            let want = unfactored_logits(&ft, &context, &words, &u);
            for (a, b) in step.logits.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mnlm_structural_zeros() {
        let mut rng = SeededRng::new(14);
        let mut p = MnlmParams::init(6, 3, 3, 4, 2, &mut rng).unwrap();
        p.factored.bias = rand_matrix(6, 1, 1.0, &mut rng);
        let d = mnlm_distribution(&[1, 2], &[0.0; 3], &p).unwrap();
        let want = softmax_ref(p.factored.bias.as_slice());
        for (a, b) in d.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        p.factored.w_fd.fill(0.0);
        let a = mnlm_distribution(&[1, 2], &[0.3, -2.0, 1.0], &p).unwrap();
        let b = mnlm_distribution(&[1, 2], &[5.0, 1.0, 0.0], &p).unwrap();
        assert_eq!(a, b);
        assert!(mnlm_distribution(&[1, 2], &[f64::NAN, 0.0, 0.0], &p).is_err());
    }

    fn random_scnlm(d: ScnlmDims, scale: f64, rng: &mut SeededRng) -> ScnlmParams {
        let mut p = ScnlmParams::zeros(d);
        p.for_each_param_mut(&mut |_, m| {
            let (r, c) = m.shape();
            *m = rand_matrix(r, c, scale, rng);
        });
        p
    }

    fn small_dims() -> ScnlmDims {
        ScnlmDims {
            vocab: 6,
            tags: 3,
            k: 4,
            g: 4,
            factors: 3,
            context: 2,
            forward: 2,
        }
    }

    #[test]
    fn attribute_cases() {
        let d = small_dims();
        let mut p = ScnlmParams::zeros(d);
        assert_eq!(scnlm_attribute(&[1.0; 4], &[0, 1, 2], &p).unwrap(), vec![0.0; 4]);
        p.structure_bias = Matrix::column(vec![1.0, -1.0, 2.0, -0.5]).unwrap();
        assert_eq!(scnlm_attribute(&[1.0; 4], &[0, 1, 2], &p).unwrap(), vec![1.0, 0.0, 2.0, 0.0]);
        assert!(scnlm_attribute(&[1.0; 4], &[0, 1], &p).is_err());
        assert!(scnlm_attribute(&[1.0; 4], &[0, 1, 7], &p).is_err());

        let mut rng = SeededRng::new(15);
        let p = random_scnlm(d, 1.0, &mut rng);
        let u = rand_vec(4, &mut rng);
        let tags = [2, 0, 1];
        let mut want = vec![0.0; 4];
        for gi in 0..4 {
            let mut s = p.structure_bias.get(gi, 0);
            for (i, &t) in tags.iter().enumerate() {
                for j in 0..4 {
                    s += p.structure[i].get(gi, j) * p.tag_table.get(t, j);
                }
            }
            for j in 0..4 {
                s += p.content.get(gi, j) * u[j];
            }
            want[gi] = s.max(0.0);
        }
        let got = scnlm_attribute(&u, &tags, &p).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn scnlm_composition() {
        let d = small_dims();
        let p = ScnlmParams::zeros(d);
        let dist = scnlm_distribution(&[0, 1], &[0, 1, 2], &[1.0; 4], &p).unwrap();
        assert!(dist.iter().all(|x| (x - 1.0 / 6.0).abs() < 1e-15));

        let mut rng = SeededRng::new(16);
        let p = random_scnlm(d, 1.0, &mut rng);
        let u = rand_vec(4, &mut rng);
        let u_hat = scnlm_attribute(&u, &[1, 1, 0], &p).unwrap();
        let m = MnlmParams {
            factored: p.factored.clone(),
            context: p.context.clone(),
        };
        assert_eq!(
            scnlm_distribution(&[3, 5], &[1, 1, 0], &u, &p).unwrap(),
            mnlm_distribution(&[3, 5], &u_hat, &m).unwrap()
        );
    }

    #[test]
    fn tags_ignored_without_structure_terms() {
        let mut rng = SeededRng::new(17);
        let mut p = random_scnlm(small_dims(), 1.0, &mut rng);
        for t in &mut p.structure {
            t.fill(0.0);
        }
        p.structure_bias.fill(0.0);
        let u = rand_vec(4, &mut rng);
        let a = scnlm_distribution(&[2, 3], &[0, 1, 2], &u, &p).unwrap();
        let b = scnlm_distribution(&[2, 3], &[2, 0, 1], &u, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_padding() {
        assert_eq!(word_context(&[7, 8, 9], 0, 3, 0), vec![0, 0, 0]);
        assert_eq!(word_context(&[7, 8, 9], 2, 3, 0), vec![0, 7, 8]);
        assert_eq!(word_context(&[7, 8, 9, 10], 3, 2, 0), vec![8, 9]);
        assert_eq!(forward_tags(&[1, 2, 3], 1, 3, 9), vec![2, 3, 9]);
        assert_eq!(forward_tags(&[1, 2, 3], 0, 1, 9), vec![1]);
    }

    fn example(v: usize, len: usize, tags: usize, cond: usize, rng: &mut SeededRng) -> NlmExample {
        NlmExample {
            words: (0..len).map(|_| rng.below(v)).collect(),
            tags: (0..len).map(|_| rng.below(tags)).collect(),
            cond: rand_vec(cond, rng),
        }
    }

    #[test]
    fn lbl_gradient_check() {
        let mut rng = SeededRng::new(18);
        let model = LblModel {
            params: LblParams {
                r: rand_matrix(20, 8, 0.5, &mut rng),
                context: vec![rand_matrix(8, 8, 0.5, &mut rng), rand_matrix(8, 8, 0.5, &mut rng)],
                bias: rand_matrix(20, 1, 0.5, &mut rng),
            },
            start: 0,
        };
        let ex = example(20, 4, 1, 0, &mut rng);
        let mut g = model.clone();
        zero_params(&mut g);
        model.sentence_nll(&ex, Some(&mut g)).unwrap();
        let r = check_model_gradient(&model, &g, |m| m.sentence_nll(&ex, None), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn mnlm_gradient_check() {
        let mut rng = SeededRng::new(19);
        let model = MnlmModel {
            params: MnlmParams {
                factored: random_factored(20, 8, 8, 5, 0.5, &mut rng),
                context: vec![rand_matrix(8, 8, 0.5, &mut rng), rand_matrix(8, 8, 0.5, &mut rng)],
            },
            start: 0,
        };
        let ex = example(20, 3, 1, 8, &mut rng);
        let mut g = model.clone();
        zero_params(&mut g);
        model.sentence_nll(&ex, Some(&mut g)).unwrap();
        let r = check_model_gradient(&model, &g, |m| m.sentence_nll(&ex, None), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn tiny_scnlm(d: ScnlmDims, scale: f64, rng: &mut SeededRng) -> ScnlmModel {
        let mut words: Vec<String> = (0..d.vocab - 1).map(|i| format!("w{i}")).collect();
        words.push(START.into());
        let tags = TagSet::new((0..d.tags - 1).map(|i| format!("T{i}")).collect()).unwrap();
        ScnlmModel {
            words: words.into_iter().collect(),
            tags,
            params: random_scnlm(d, scale, rng),
        }
    }

    #[test]
    fn scnlm_gradient_check() {
        let mut rng = SeededRng::new(20);
        let d = ScnlmDims {
            vocab: 20,
            tags: 5,
            k: 8,
            g: 8,
            factors: 5,
            context: 2,
            forward: 2,
        };
        let model = tiny_scnlm(d, 0.5, &mut rng);
        let ex = example(20, 3, 5, 8, &mut rng);
        let mut g = model.clone();
        zero_params(&mut g);
        model.sentence_nll(&ex, Some(&mut g)).unwrap();
        let r = check_model_gradient(&model, &g, |m| m.sentence_nll(&ex, None), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn perplexity_cases() {
        let mut rng = SeededRng::new(21);
        let uniform = LblModel {
            params: LblParams::zeros(10, 3, 2),
            start: 0,
        };
        let corpus: Vec<NlmExample> = (0..4).map(|_| example(10, 5, 1, 0, &mut rng)).collect();
        assert!((perplexity(&uniform, &corpus).unwrap() - 10.0).abs() < 1e-9);
        assert!(perplexity(&uniform, &[]).is_err());

        let model = LblModel {
            params: LblParams {
                r: rand_matrix(10, 3, 1.0, &mut rng),
                context: vec![rand_matrix(3, 3, 1.0, &mut rng), rand_matrix(3, 3, 1.0, &mut rng)],
                bias: rand_matrix(10, 1, 1.0, &mut rng),
            },
            start: 0,
        };
        let mut total = 0.0;
        let mut n = 0.0;
        for ex in &corpus {
            for pos in 0..ex.words.len() {
                let ctx = word_context(&ex.words, pos, 2, 0);
                total += lbl_distribution(&ctx, &model.params).unwrap()[ex.words[pos]].ln();
                n += 1.0;
            }
        }
        let want = (-total / n).exp();
        assert!((perplexity(&model, &corpus).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn repeated_sentence_is_memorized() {
        let mut rng = SeededRng::new(22);
        let mut model = LblModel {
            params: LblParams::init(10, 6, 2, &mut rng).unwrap(),
            start: 9,
        };
        let ex = NlmExample {
            words: vec![1, 4, 2, 7, 3],
            tags: vec![],
            cond: vec![],
        };
        let corpus = vec![ex; 4];
        let config = NlmTrainConfig {
            epochs: 200,
            learning_rate: 1.0,
            decay: 1.0,
            ..Default::default()
        };
        let log = train_nlm(&mut model, &corpus, &config).unwrap();
        assert!(*log.epoch_nll.last().unwrap() < 0.05, "{:?}", log.epoch_nll.last());
        assert!(log.epoch_nll[0] > *log.epoch_nll.last().unwrap());
    }

    #[test]
    fn training_determinism_and_noop() {
        let mut rng = SeededRng::new(23);
        let d = small_dims();
        let base = tiny_scnlm(d, 0.08, &mut rng);
        let corpus: Vec<NlmExample> = (0..5).map(|_| example(6, 4, 3, 4, &mut rng)).collect();
        let mut zero = base.clone();
        let config = NlmTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_nlm(&mut zero, &corpus, &config).unwrap();
        assert_eq!(zero, base);

        let config = NlmTrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let mut a = base.clone();
        let mut b = base.clone();
        let la = train_nlm(&mut a, &corpus, &config).unwrap();
        let lb = train_nlm(&mut b, &corpus, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, base);
    }

    #[test]
    fn scnlm_archive_round_trip() {
        let mut rng = SeededRng::new(24);
        let m = tiny_scnlm(small_dims(), 0.5, &mut rng);
        let a = Archive::from_bytes(&m.to_archive().to_bytes().unwrap()).unwrap();
        assert_eq!(ScnlmModel::from_archive(&a).unwrap(), m);
        assert!(matches!(ScnlmModel::from_archive(&Archive::new()), Err(Error::MissingModel(_))));
    }

    #[test]
    fn example_requires_matching_conditioning() {
        let mut rng = SeededRng::new(25);
        let m = tiny_scnlm(small_dims(), 0.5, &mut rng);
        let rec = CaptionRecord::new("img", &["w1", "w2"], &["T0", "T1"]).unwrap();
        let ex = m.example(&rec, vec![0.0; 4]).unwrap();
        assert_eq!(ex.words, vec![1, 2]);
        assert!(m.example(&rec, vec![0.0; 3]).is_err());
        assert!(m.examples(&[rec], &[]).is_err());
    }

    proptest! {
        #[test]
        fn distributions_are_normalized(seed in 0u64..10_000, scale in 0.01f64..1.5) {
            let mut rng = SeededRng::new(seed);
            let p = random_scnlm(small_dims(), scale, &mut rng);
            let u: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let tags = [rng.below(3), rng.below(3), rng.below(3)];
            let u_hat = scnlm_attribute(&u, &tags, &p).unwrap();
            prop_assert!(u_hat.iter().all(|x| *x >= 0.0));
            let d = scnlm_distribution(&[rng.below(6), rng.below(6)], &tags, &u, &p).unwrap();
            assert_distribution(&d);
            let lbl = LblParams {
                r: rand_matrix(6, 3, scale, &mut rng),
                context: vec![rand_matrix(3, 3, scale, &mut rng)],
                bias: rand_matrix(6, 1, scale, &mut rng),
            };
            assert_distribution(&lbl_distribution(&[rng.below(6)], &lbl).unwrap());
        }
    }
}
