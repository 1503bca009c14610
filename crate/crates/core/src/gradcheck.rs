//! Finite-difference checks of every hand-written backward pass, on small
//! random models.

use crate::error::Result;
use crate::ingest::{TagSet, Vocabulary, START};
use crate::joint::{EncoderKind, JointModel};
use crate::nlm::{
    LblModel, LblParams, MnlmModel, MnlmParams, NlmExample, ScnlmDims, ScnlmModel, ScnlmParams,
    SentenceModel,
};
use crate::numcore::{check_model_gradient, zero_params, GradCheckReport, Matrix, Parameters, SeededRng};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const SCALE: f64 = 0.5;

/// Redraws every parameter uniformly in `[-scale, scale]`.
fn redraw<P: Parameters>(p: &mut P, scale: f64, rng: &mut SeededRng) {
    p.for_each_param_mut(&mut |_, m| {
        let (r, c) = m.shape();
        *m = Matrix::uniform(r, c, -scale, scale, rng);
    });
}

fn nlm_check<M: SentenceModel>(model: &M, ex: &NlmExample) -> Result<GradCheckReport> {
    let mut g = model.clone();
    zero_params(&mut g);
    model.sentence_nll(ex, Some(&mut g))?;
    check_model_gradient(model, &g, |m| m.sentence_nll(ex, None), EPS)
}

fn random_example(v: usize, len: usize, tags: usize, cond: usize, rng: &mut SeededRng) -> NlmExample {
    NlmExample {
        words: (0..len).map(|_| rng.below(v)).collect(),
        tags: (0..len).map(|_| rng.below(tags.max(1))).collect(),
        cond: (0..cond).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    }
}

/// LSTM encoder under the ranking loss, K = D = 8, batch of 3.
pub fn ranking_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let k = 8;
    let tokens = (0..12).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::new(tokens, Matrix::uniform(12, k, -1.0, 1.0, rng))?.with_reserved(rng);
    let mut model = JointModel::new(vocab, 8, EncoderKind::Lstm, 0.2, rng)?;
    redraw(&mut model, 0.4, rng);
    let feats: Vec<Vec<f64>> = (0..3).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
    let sents: Vec<Vec<usize>> = vec![vec![0, 3, 5], vec![7, 1], vec![2, 9, 11, 4]];
    let batch: Vec<(&[f64], &[usize])> = feats.iter().zip(&sents).map(|(q, s)| (q.as_slice(), s.as_slice())).collect();
    let mut grads = model.zero_grads();
    model.batch_loss(&batch, Some(&mut grads))?;
    check_model_gradient(&model, &grads, |m| m.batch_loss(&batch, None), EPS)
}

/// LBL, V = 20, K = 8, two context words.
pub fn lbl_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let mut model = LblModel {
        params: LblParams::init(20, 8, 2, rng)?,
        start: 0,
    };
    redraw(&mut model, SCALE, rng);
    nlm_check(&model, &random_example(20, 4, 0, 0, rng))
}

/// Multiplicative NLM, V = 20, K = G = 8, F = 5.
pub fn mnlm_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let mut model = MnlmModel {
        params: MnlmParams::init(20, 8, 8, 5, 2, rng)?,
        start: 0,
    };
    redraw(&mut model, SCALE, rng);
    nlm_check(&model, &random_example(20, 3, 0, 8, rng))
}

/// SC-NLM with the MNLM dimensions and forward context k = 2.
pub fn scnlm_case(rng: &mut SeededRng) -> Result<GradCheckReport> {
    let d = ScnlmDims {
        vocab: 20,
        tags: 5,
        k: 8,
        g: 8,
        factors: 5,
        context: 2,
        forward: 2,
    };
    let mut words: Vec<String> = (0..d.vocab - 1).map(|i| format!("w{i}")).collect();
    words.push(START.into());
    let mut model = ScnlmModel {
        words: words.into_iter().collect(),
        tags: TagSet::new((0..d.tags - 1).map(|i| format!("T{i}")).collect())?,
        params: ScnlmParams::zeros(d),
    };
    redraw(&mut model, SCALE, rng);
    nlm_check(&model, &random_example(20, 3, 5, 8, rng))
}

/// All four checks, labelled.
pub fn gradient_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = SeededRng::new(seed);
    Ok(vec![
        ("lstm+ranking", ranking_case(&mut rng)?),
        ("lbl", lbl_case(&mut rng)?),
        ("mnlm", mnlm_case(&mut rng)?),
        ("scnlm", scnlm_case(&mut rng)?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_for_several_seeds() {
        for seed in [1, 2, 3] {
            for (name, r) in gradient_suite(seed).unwrap() {
                assert!(r.max_rel_error < TOLERANCE, "{name} seed {seed}: {r:?}");
                assert!(r.entries_checked > 0);
            }
        }
    }
}
