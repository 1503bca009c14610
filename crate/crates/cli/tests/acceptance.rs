//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test -p mmcap-cli --test acceptance`.

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use mmcap::eval::{median_rank, rank_all, recall_at_k, Item};
use mmcap::fixtures::{analogy_space, grammar_corpus, random_ranking, retrieval_pairs, AnalogySpace, Content, TEMPLATES};
use mmcap::generation::{generation_vocabulary, map_decode};
use mmcap::gradcheck::{gradient_suite, TOLERANCE};
use mmcap::ingest::{build_vocabulary, CaptionRecord, TagSet, START};
use mmcap::joint::{train_embedding, EncoderKind, JointModel, TrainConfig};
use mmcap::kn::build_kn_trigram;
use mmcap::nlm::{
    decoder_vocabulary, forward_tags, mnlm_distribution, perplexity, scnlm_distribution, train_nlm, word_context,
    MnlmParams, NlmTrainConfig, ScnlmDims, ScnlmModel, ScnlmParams,
};
use mmcap::numcore::{Matrix, Parameters, SeededRng};
use mmcap::regularities::{analogy_query, analogy_with_resort, DEFAULT_POOL, DEFAULT_VISIBLE};

type Outcome = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite_check() -> Outcome {
    let reports = gradient_suite(1).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let detail = reports
        .iter()
        .map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst < TOLERANCE, detail)
}

/// Logits from the explicit tensor `T^u = W_fvᵀ diag(W_fd u) W_fk`, built
/// entry by entry.
fn explicit_logits(p: &MnlmParams, context: &[usize], u: &[f64]) -> Vec<f64> {
    let ft = &p.factored;
    let (v, k, g, f) = (ft.w_fv.cols(), ft.w_fk.cols(), ft.w_fd.cols(), ft.w_fk.rows());
    let mut tu = vec![vec![0.0; k]; v];
    for (vi, row) in tu.iter_mut().enumerate() {
        for (ki, cell) in row.iter_mut().enumerate() {
            for fi in 0..f {
                let du: f64 = (0..g).map(|gi| ft.w_fd.get(fi, gi) * u[gi]).sum();
                *cell += ft.w_fv.get(fi, vi) * du * ft.w_fk.get(fi, ki);
            }
        }
    }
    let embed = |w: usize, ki: usize| -> f64 { (0..f).map(|fi| ft.w_fk.get(fi, ki) * ft.w_fv.get(fi, w)).sum() };
    let mut r = vec![0.0; k];
    for (c, &w) in p.context.iter().zip(context) {
        for (a, ra) in r.iter_mut().enumerate() {
            *ra += (0..k).map(|b| c.get(a, b) * embed(w, b)).sum::<f64>();
        }
    }
    (0..v).map(|vi| (0..k).map(|ki| tu[vi][ki] * r[ki]).sum::<f64>() + ft.bias.get(vi, 0)).collect()
}

fn factored_oracle() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut p = MnlmParams::init(4, 2, 2, 2, 2, &mut rng).map_err(|e| e.to_string())?;
        p.for_each_param_mut(&mut |_, m| {
            let (r, c) = m.shape();
            *m = Matrix::uniform(r, c, -1.0, 1.0, &mut rng);
        });
        let context = [rng.below(4), rng.below(4)];
        let u: Vec<f64> = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let got = mnlm_distribution(&context, &u, &p).map_err(|e| e.to_string())?;
        let logits = explicit_logits(&p, &context, &u);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        for (pw, l) in got.iter().zip(&logits) {
            worst = worst.max((pw.ln() - (l - lse)).abs());
        }
    }
    ensure(worst < 1e-10, format!("max |log p - explicit| = {worst:.1e} over 100 draws"))
}

fn overfit_retrieval() -> Outcome {
    let (records, features) = retrieval_pairs(50, 16, 11).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(12);
    let vocab = build_vocabulary(&records, 1, 16, &mut rng).map_err(|e| e.to_string())?;
    let mut model = JointModel::new(vocab, 16, EncoderKind::Lstm, 0.2, &mut rng).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        batch_size: 10,
        decay: 1.0,
        epochs: 500,
        ..Default::default()
    };
    train_embedding(&records, &features, &mut model, &config).map_err(|e| e.to_string())?;
    let images: Vec<Item> = records
        .iter()
        .map(|r| (r.image_id.clone(), model.embed_image(features.get(&r.image_id).unwrap()).unwrap()))
        .collect();
    let captions: Vec<Item> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (format!("cap{i:03}"), model.encode_tokens(&r.tokens).unwrap()))
        .collect();
    let truth: HashMap<String, Vec<String>> =
        records.iter().enumerate().map(|(i, r)| (r.image_id.clone(), vec![format!("cap{i:03}")])).collect();
    let (a, s) = rank_all(&images, &captions, &truth).map_err(|e| e.to_string())?;
    let (ra, rs) = (recall_at_k(&a, 1), recall_at_k(&s, 1));
    ensure(ra == 100.0 && rs == 100.0, format!("R@1 annotation {ra:.1}, search {rs:.1}"))
}

fn random_baseline() -> Outcome {
    let mut in_band = 0;
    let mut r10 = 0.0;
    for seed in 0..20 {
        let (_, search) = random_ranking(1000, 16, seed).map_err(|e| e.to_string())?;
        if (450.0..=550.0).contains(&median_rank(&search).map_err(|e| e.to_string())?) {
            in_band += 1;
        }
        r10 += recall_at_k(&search, 10) / 20.0;
    }
    ensure(
        in_band >= 19 && (0.5..=1.6).contains(&r10),
        format!("{in_band}/20 medians in [450, 550], mean R@10 {r10:.2}%"),
    )
}

fn kn_normalization() -> Outcome {
    let corpus = grammar_corpus(4, 1);
    let sentences: Vec<Vec<String>> = corpus.records.iter().map(|r| r.tokens.clone()).collect();
    let kn = build_kn_trigram(&sentences, 0.75).map_err(|e| e.to_string())?;
    let v = kn.vocab_size();
    let mut rng = SeededRng::new(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (rng.below(v), rng.below(v));
        let sum: f64 = (0..v).filter(|&c| c != kn.start()).map(|c| kn.prob(a, b, c)).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    ensure(v <= 50 && worst < 1e-9, format!("V = {v}, max |sum - 1| = {worst:.1e}"))
}

fn grammar_decoding() -> Outcome {
    let corpus = grammar_corpus(16, 7);
    let (words, tags) = decoder_vocabulary(&corpus.records).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(1);
    let mut model = ScnlmModel::new(words, tags, 16, None, 32, 3, 2, &mut rng).map_err(|e| e.to_string())?;
    model.reinit(0.32, &mut rng).map_err(|e| e.to_string())?;
    let examples = model.examples(&corpus.records, &corpus.conds).map_err(|e| e.to_string())?;
    model.init_bias(&examples);
    let config = NlmTrainConfig {
        context: 3,
        forward: 2,
        factors: 32,
        epochs: 60,
        learning_rate: 0.1,
        ..Default::default()
    };
    train_nlm(&mut model, &examples, &config).map_err(|e| e.to_string())?;
    let ppl = perplexity(&model, &examples).map_err(|e| e.to_string())?;
    let allowed = generation_vocabulary(&model);
    let (mut total, mut exact) = (0, 0);
    for content in Content::all() {
        let u = corpus.space.vector(&content);
        for t in TEMPLATES {
            let tags = model.tags.ids(t).map_err(|e| e.to_string())?;
            let (ids, _) = map_decode(&model, &u, &tags, 8, &allowed).map_err(|e| e.to_string())?;
            let got: Vec<&str> = ids.iter().map(|&w| model.word(w)).collect();
            total += 1;
            exact += usize::from(got == content.sentence(t));
        }
    }
    ensure(
        ppl <= 1.05 && exact == total,
        format!("perplexity {ppl:.4}, {exact}/{total} sentences decoded"),
    )
}

fn sequence_logprob(m: &ScnlmModel, u: &[f64], template: &[usize], words: &[usize]) -> f64 {
    let d = m.dims();
    (0..words.len())
        .map(|pos| {
            let ctx = word_context(words, pos, d.context, m.start());
            let tags = forward_tags(template, pos, d.forward + 1, m.tags.endpos());
            scnlm_distribution(&ctx, &tags, u, &m.params).unwrap()[words[pos]].ln()
        })
        .sum()
}

fn exact_map() -> Outcome {
    let mut agree = 0;
    for seed in 0..20 {
        let mut words: Vec<String> = (0..4).map(|i| format!("w{i}")).collect();
        words.push(START.into());
        let tags = TagSet::new(vec!["A".into(), "B".into()]).map_err(|e| e.to_string())?;
        let mut rng = SeededRng::new(1000 + seed);
        let mut m = ScnlmModel::new(words, tags, 4, None, 3, 2, 1, &mut rng).map_err(|e| e.to_string())?;
        m.reinit(1.0, &mut rng).map_err(|e| e.to_string())?;
        let u: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let template = [rng.below(2), rng.below(2), rng.below(2)];
        let allowed = generation_vocabulary(&m);
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    let lp = sequence_logprob(&m, &u, &template, &[a, b, c]);
                    if lp > best.1 {
                        best = (vec![a, b, c], lp);
                    }
                }
            }
        }
        let (got, _) = map_decode(&m, &u, &template, 64, &allowed).map_err(|e| e.to_string())?;
        agree += usize::from(got == best.0);
    }
    ensure(agree == 20, format!("{agree}/20 models match exhaustive argmax"))
}

fn linear_regularities() -> Outcome {
    let space = analogy_space(32, 8, 21).map_err(|e| e.to_string())?;
    let (mut before, mut after) = (0, 0);
    for a in &space.analogies {
        let q = space.index.vector(space.index.position(&a.query_id).unwrap()).to_vec();
        let (wn, wp) = (space.word(&a.negative), space.word(&a.positive));
        let hits = analogy_query(&q, wn, wp, &space.index, 1, Some(&a.query_id)).map_err(|e| e.to_string())?;
        before += usize::from(AnalogySpace::class_of(&hits[0].0) == a.target);
        let order = analogy_with_resort(&q, wn, wp, &space.index, DEFAULT_POOL, DEFAULT_VISIBLE, Some(&a.query_id))
            .map_err(|e| e.to_string())?;
        after += usize::from(AnalogySpace::class_of(&order[0]) == a.target);
    }
    let n = space.analogies.len();
    ensure(
        n == 24 && before == n && after == n,
        format!("rank-1 hits {before}/{n} before resort, {after}/{n} after"),
    )
}

fn mmcap(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmcap"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(out.stdout)
}

fn generation_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = tmp.path();
    mmcap(d, &["fixture", "--kind", "world", "--out-dir", "w"])?;
    mmcap(
        d,
        &[
            "train-embed", "--captions", "w/captions.tsv", "--features", "w/features.txt", "--model-out", "e.mmc",
            "--dim-k", "16", "--epochs", "300", "--batch", "10", "--decay", "1.0",
        ],
    )?;
    mmcap(
        d,
        &[
            "train-scnlm", "--captions", "w/captions.tsv", "--model-in", "e.mmc", "--model-out", "s.mmc",
            "--context", "3", "--forward", "2", "--factors", "32", "--epochs", "200", "--init-scale", "0.3",
        ],
    )?;
    mmcap(d, &["train-kn", "--captions", "w/captions.tsv", "--model-in", "s.mmc", "--model-out", "all.mmc"])?;
    let run = |out: &str| {
        mmcap(
            d,
            &[
                "generate", "--model-in", "all.mmc", "--features", "w/features.txt", "--captions", "w/captions.tsv",
                "--stopwords", "w/stopwords.txt", "--candidates", "1000", "--top", "5", "--out", out,
            ],
        )?;
        std::fs::read(d.join(out)).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a.tsv")?, run("b.tsv")?);
    let text = String::from_utf8_lossy(&a);
    let mut per_image: HashMap<&str, usize> = HashMap::new();
    for line in text.lines().skip(1) {
        *per_image.entry(line.split('\t').next().unwrap_or("")).or_default() += 1;
    }
    let rows: usize = per_image.values().sum();
    let shaped = per_image.len() == 10 && per_image.values().all(|n| (1..=5).contains(n));
    ensure(
        a == b && shaped,
        format!(
            "{rows} rows over {} images (at most 5 each), runs identical: {} (same platform only)",
            per_image.len(),
            a == b
        ),
    )
}

fn perplexity_anchors() -> Outcome {
    let mut words: Vec<String> = (0..9).map(|i| format!("w{i}")).collect();
    words.push(START.into());
    let tags = TagSet::new(vec!["X".into()]).map_err(|e| e.to_string())?;
    let d = ScnlmDims {
        vocab: 10,
        tags: tags.len(),
        k: 4,
        g: 4,
        factors: 3,
        context: 2,
        forward: 1,
    };
    let uniform = ScnlmModel {
        words: words.iter().cloned().collect(),
        tags,
        params: ScnlmParams::zeros(d),
    };
    let records: Vec<CaptionRecord> = ["w1 w2 w3", "w4 w4 w8 w0 w5"]
        .iter()
        .map(|s| {
            let toks: Vec<&str> = s.split(' ').collect();
            CaptionRecord::new("i", &toks, &vec!["X"; toks.len()]).unwrap()
        })
        .collect();
    let ex = uniform.examples(&records, &[vec![0.3; 4], vec![-1.0; 4]]).map_err(|e| e.to_string())?;
    let ppl_uniform = perplexity(&uniform, &ex).map_err(|e| e.to_string())?;

    let corpus = grammar_corpus(8, 3);
    let one = vec![corpus.records[1].clone()];
    let (words, tags) = decoder_vocabulary(&one).map_err(|e| e.to_string())?;
    let mut rng = SeededRng::new(1);
    let mut model = ScnlmModel::new(words, tags, 8, None, 8, 3, 2, &mut rng).map_err(|e| e.to_string())?;
    model.reinit(0.3, &mut rng).map_err(|e| e.to_string())?;
    let ex = model.examples(&one, &[corpus.conds[1].clone()]).map_err(|e| e.to_string())?;
    let config = NlmTrainConfig {
        context: 3,
        forward: 2,
        factors: 8,
        epochs: 30_000,
        learning_rate: 0.3,
        decay: 1.0,
        ..Default::default()
    };
    train_nlm(&mut model, &ex, &config).map_err(|e| e.to_string())?;
    let ppl_one = perplexity(&model, &ex).map_err(|e| e.to_string())?;
    ensure(
        (ppl_uniform - 10.0).abs() < 1e-9 && ppl_one <= 1.0 + 1e-6,
        format!("uniform V=10 perplexity {ppl_uniform:.12}, memorized sentence {:.9}", ppl_one),
    )
}

fn main() -> ExitCode {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "gradient suite", limit: secs(60), run: gradient_suite_check },
        Criterion { id: 2, name: "factored-tensor oracle", limit: secs(5), run: factored_oracle },
        Criterion { id: 3, name: "overfit retrieval", limit: secs(300), run: overfit_retrieval },
        Criterion { id: 4, name: "random ranking baseline", limit: secs(60), run: random_baseline },
        Criterion { id: 5, name: "Kneser-Ney normalization", limit: secs(5), run: kn_normalization },
        Criterion { id: 6, name: "deterministic grammar", limit: secs(300), run: grammar_decoding },
        Criterion { id: 7, name: "exact MAP decoding", limit: secs(30), run: exact_map },
        Criterion { id: 8, name: "linear-encoder regularities", limit: secs(5), run: linear_regularities },
        Criterion { id: 9, name: "generation determinism", limit: secs(300), run: generation_determinism },
        Criterion { id: 10, name: "perplexity anchors", limit: None, run: perplexity_anchors },
    ];
    let mut failed = 0;
    for c in &criteria {
        let t = Instant::now();
        let outcome = (c.run)();
        let took = t.elapsed();
        let slow = c.limit.is_some_and(|l| took > l);
        let limit = c.limit.map(|l| format!(" (limit {}s)", l.as_secs())).unwrap_or_default();
        let (ok, detail) = match outcome {
            Ok(d) => (!slow, d),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "{} {:>2}. {}: {detail}; {:.2}s{limit}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            took.as_secs_f64()
        );
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
