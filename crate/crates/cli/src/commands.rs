use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use mmcap::archive::Archive;
use mmcap::eval::{rank_all, table_row, Item, TABLE_HEADER};
use mmcap::fixtures::{image_world, retrieval_pairs};
use mmcap::generation::{
    build_concept_index, candidates_tsv, report_block, GenConfig, Generator, PosTemplatePool, TSV_HEADER,
};
use mmcap::gradcheck::{gradient_suite, TOLERANCE};
use mmcap::ingest::{
    build_vocabulary, captions_to_text, load_captions_raw, load_image_features, load_stopwords,
    load_word_embeddings, map_unknown, CaptionRecord, FeatureStore,
};
use mmcap::joint::{train_embedding, EncoderKind, JointModel, TrainConfig};
use mmcap::kn::{build_kn_trigram, load_text_corpus, TrigramCounts};
use mmcap::nlm::{
    decoder_vocabulary, perplexity, train_nlm, ConditioningSource, NlmTrainConfig, ScnlmModel,
};
use mmcap::numcore::{unit_normalize, SeededRng};
use mmcap::regularities::{
    analogy_query, analogy_tsv, analogy_with_resort, pca_csv, pca_project, EmbeddingIndex, ItemKind,
};

use crate::config::run_config_path;
use crate::{
    AnalogyArgs, Conditioning, Encoder, FixtureArgs, FixtureKind, GenerateArgs, GradcheckArgs, PcaArgs,
    RankArgs, TrainEmbedArgs, TrainKnArgs, TrainScnlmArgs,
};

type CliResult<T> = Result<T, String>;

const LSTM_CAVEAT: &str = "word-arithmetic regularities are not well observed with an LSTM encoder";

fn err(e: mmcap::Error) -> String {
    e.to_string()
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    value.as_ref().ok_or_else(|| format!("missing required flag --{flag}"))
}

/// Reports the first absent required flag before any file is read.
fn check_flags(flags: &[(bool, &str)]) -> CliResult<()> {
    match flags.iter().find(|(present, _)| !present) {
        Some((_, flag)) => Err(format!("missing required flag --{flag}")),
        None => Ok(()),
    }
}

fn write_with_config(path: &Path, contents: &[u8], run_config: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))?;
    let cfg = run_config_path(path);
    fs::write(&cfg, run_config).map_err(|e| format!("{}: {e}", cfg.display()))
}

fn save_archive(archive: &Archive, path: &Path, run_config: &str) -> CliResult<()> {
    write_with_config(path, &archive.to_bytes().map_err(err)?, run_config)
}

fn load_archive(path: &Path) -> CliResult<Archive> {
    Archive::load(path).map_err(err)
}

/// Refuses to overwrite an input: every stage writes a new archive.
fn distinct_output(input: &Path, output: &Path) -> CliResult<()> {
    if input == output {
        return Err(format!(
            "--model-out {} is the same file as --model-in; inputs are never modified",
            output.display()
        ));
    }
    Ok(())
}

fn features(path: &Option<PathBuf>) -> CliResult<FeatureStore> {
    load_image_features(required(path, "features")?).map_err(err)
}

fn captions(path: &Option<PathBuf>) -> CliResult<Vec<CaptionRecord>> {
    load_captions_raw(required(path, "captions")?).map_err(err)
}

fn unit(v: &[f64]) -> CliResult<Vec<f64>> {
    unit_normalize(v).map_err(err)
}

pub fn train_embed(a: &TrainEmbedArgs, run_config: &str) -> CliResult<()> {
    check_flags(&[(a.captions.is_some(), "captions"), (a.features.is_some(), "features"), (a.model_out.is_some(), "model-out")])?;
    let mut records = captions(&a.captions)?;
    let feats = features(&a.features)?;
    let out = required(&a.model_out, "model-out")?;
    let mut rng = SeededRng::new(a.common.seed);
    let vocab = match &a.embeddings {
        Some(p) => {
            let v = load_word_embeddings(p).map_err(err)?;
            if let Some(k) = a.dim_k {
                if k != v.dim() {
                    return Err(format!("--dim-k {k} does not match K={} in --embeddings {}", v.dim(), p.display()));
                }
            }
            v
        }
        None => build_vocabulary(&records, a.min_count, a.dim_k.unwrap_or(300), &mut rng).map_err(err)?,
    };
    map_unknown(&mut records, &vocab);
    let kind = match a.encoder {
        Encoder::Lstm => EncoderKind::Lstm,
        Encoder::Linear => EncoderKind::Linear,
    };
    let mut model = JointModel::new(vocab, feats.dim(), kind, a.margin, &mut rng).map_err(err)?;
    let config = TrainConfig {
        batch_size: a.batch,
        learning_rate: a.lr,
        decay: a.decay,
        epochs: a.epochs,
        seed: a.common.seed,
        ..Default::default()
    };
    let log = train_embedding(&records, &feats, &mut model, &config).map_err(err)?;
    println!("epoch\tloss\tlr");
    for (i, (l, r)) in log.epoch_losses.iter().zip(&log.learning_rates).enumerate() {
        println!("{}\t{l:.6}\t{r:.6}", i + 1);
    }
    save_archive(&model.to_archive(), out, run_config)
}

pub fn train_scnlm(a: &TrainScnlmArgs, run_config: &str) -> CliResult<()> {
    check_flags(&[(a.captions.is_some(), "captions"), (a.model_in.is_some(), "model-in"), (a.model_out.is_some(), "model-out")])?;
    let records = captions(&a.captions)?;
    let input = required(&a.model_in, "model-in")?;
    let out = required(&a.model_out, "model-out")?;
    distinct_output(input, out)?;
    let mut archive = load_archive(input)?;
    let encoder = JointModel::from_archive(&archive).map_err(err)?;
    let conds: Vec<Vec<f64>> = match a.conditioning {
        Conditioning::Text => records
            .iter()
            .map(|r| unit(&encoder.encode_tokens(&r.tokens).map_err(err)?))
            .collect::<CliResult<_>>()?,
        Conditioning::Image => {
            let feats = features(&a.features)?;
            records
                .iter()
                .map(|r| {
                    let q = feats.get(&r.image_id).map_err(err)?;
                    unit(&encoder.embed_image(q).map_err(err)?)
                })
                .collect::<CliResult<_>>()?
        }
    };
    let (words, tags) = decoder_vocabulary(&records).map_err(err)?;
    let mut rng = SeededRng::new(a.common.seed);
    let mut decoder = ScnlmModel::new(words, tags, encoder.dim(), a.dim_g, a.factors, a.context, a.forward, &mut rng)
        .map_err(err)?;
    decoder.reinit(a.init_scale, &mut rng).map_err(err)?;
    let examples = decoder.examples(&records, &conds).map_err(err)?;
    decoder.init_bias(&examples);
    let config = NlmTrainConfig {
        context: a.context,
        forward: a.forward,
        factors: a.factors,
        epochs: a.epochs,
        learning_rate: a.lr,
        decay: a.decay,
        seed: a.common.seed,
        conditioning: match a.conditioning {
            Conditioning::Text => ConditioningSource::TextEmbedding,
            Conditioning::Image => ConditioningSource::ImageEmbedding,
        },
    };
    let log = train_nlm(&mut decoder, &examples, &config).map_err(err)?;
    println!("epoch\tnll");
    for (i, nll) in log.epoch_nll.iter().enumerate() {
        println!("{}\t{nll:.6}", i + 1);
    }
    println!("perplexity\t{:.6}", perplexity(&decoder, &examples).map_err(err)?);
    archive.merge(decoder.to_archive());
    archive.set_meta("scnlm.conditioning", a.conditioning.name());
    save_archive(&archive, out, run_config)
}

impl Conditioning {
    fn name(self) -> &'static str {
        match self {
            Conditioning::Text => "text",
            Conditioning::Image => "image",
        }
    }
}

pub fn train_kn(a: &TrainKnArgs, run_config: &str) -> CliResult<()> {
    let out = required(&a.model_out, "model-out")?;
    let corpus: Vec<Vec<String>> = match (&a.captions, &a.corpus) {
        (Some(_), Some(_)) => return Err("give only one of --captions and --corpus".into()),
        (Some(_), None) => captions(&a.captions)?.into_iter().map(|r| r.tokens).collect(),
        (None, Some(p)) => load_text_corpus(p).map_err(err)?,
        (None, None) => return Err("missing required flag --captions (or --corpus)".into()),
    };
    let kn = build_kn_trigram(&corpus, a.discount).map_err(err)?;
    let mut archive = match &a.model_in {
        Some(p) => {
            distinct_output(p, out)?;
            load_archive(p)?
        }
        None => Archive::new(),
    };
    archive.merge(kn.to_archive());
    println!("words\t{}\ttokens\t{}", kn.vocab_size(), kn.total_tokens());
    save_archive(&archive, out, run_config)
}

/// Images in first-mention order and captions keyed `image#n`.
fn ranking_items(encoder: &JointModel, records: &[CaptionRecord], feats: &FeatureStore) -> CliResult<(Vec<Item>, Vec<Item>, HashMap<String, Vec<String>>)> {
    let mut images = Vec::new();
    let mut captions = Vec::new();
    let mut truth: HashMap<String, Vec<String>> = HashMap::new();
    for r in records {
        let list = truth.entry(r.image_id.clone()).or_default();
        if list.is_empty() {
            let q = feats.get(&r.image_id).map_err(err)?;
            images.push((r.image_id.clone(), encoder.embed_image(q).map_err(err)?));
        }
        let id = format!("{}#{}", r.image_id, list.len());
        list.push(id.clone());
        captions.push((id, encoder.encode_tokens(&r.tokens).map_err(err)?));
    }
    Ok((images, captions, truth))
}

pub fn rank(a: &RankArgs, run_config: &str) -> CliResult<()> {
    check_flags(&[(a.model_in.is_some(), "model-in"), (a.captions.is_some(), "captions"), (a.features.is_some(), "features")])?;
    let input = required(&a.model_in, "model-in")?;
    let mut records = captions(&a.captions)?;
    let feats = features(&a.features)?;
    let encoder = JointModel::from_archive(&load_archive(input)?).map_err(err)?;
    map_unknown(&mut records, &encoder.vocab);
    let (images, caps, truth) = ranking_items(&encoder, &records, &feats)?;
    let (ann, search) = rank_all(&images, &caps, &truth).map_err(err)?;
    let table = format!("{TABLE_HEADER}\n{}\n", table_row(&ann, &search).map_err(err)?);
    print!("{table}");
    if let Some(out) = &a.out {
        write_with_config(out, table.as_bytes(), run_config)?;
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs, run_config: &str) -> CliResult<()> {
    check_flags(&[(a.model_in.is_some(), "model-in"), (a.features.is_some(), "features"), (a.captions.is_some(), "captions")])?;
    let input = required(&a.model_in, "model-in")?;
    let feats = features(&a.features)?;
    let records = captions(&a.captions)?;
    let archive = load_archive(input)?;
    let encoder = JointModel::from_archive(&archive).map_err(err)?;
    let decoder = ScnlmModel::from_archive(&archive).map_err(err)?;
    let kn = TrigramCounts::from_archive(&archive).map_err(err)?;
    let stopwords: HashSet<String> = match &a.stopwords {
        Some(p) => load_stopwords(p).map_err(err)?,
        None => HashSet::new(),
    };
    let concepts = build_concept_index(&encoder, &records, &stopwords).map_err(err)?;
    let templates = PosTemplatePool::from_records(&records);
    let config = GenConfig {
        top_concepts: a.concepts,
        candidate_count: a.candidates,
        return_count: a.top,
        beam: a.beam,
        w_translation: a.wt,
        w_lm: a.wlm,
        gamma: a.gamma,
        per_concept: a.per_concept,
        stopwords,
        seed: a.common.seed,
    };
    config.validate().map_err(err)?;
    let generator = Generator {
        encoder: &encoder,
        decoder: &decoder,
        kn: &kn,
        concepts: &concepts,
        templates: &templates,
    };
    let ids: Vec<String> = if a.images.is_empty() {
        feats.ids().map(str::to_string).collect()
    } else {
        a.images.clone()
    };
    let mut tsv = format!("{TSV_HEADER}\n");
    let mut report = String::new();
    for id in &ids {
        let q = feats.get(id).map_err(err)?;
        let cands = generator.generate(id, q, &config).map_err(err)?;
        tsv.push_str(&candidates_tsv(id, &cands));
        if a.report.is_some() {
            let original = records.iter().find(|r| &r.image_id == id).map(CaptionRecord::text);
            let x = encoder.embed_image(q).map_err(err)?;
            let nearest = concepts.nearest(&x, ItemKind::Sentence, 1, None).map_err(err)?;
            report.push_str(&report_block(id, original.as_deref(), nearest.first().map(|(s, _)| s.as_str()), &cands));
        }
    }
    match &a.out {
        Some(out) => write_with_config(out, tsv.as_bytes(), run_config)?,
        None => print!("{tsv}"),
    }
    if let Some(path) = &a.report {
        write_with_config(path, report.as_bytes(), run_config)?;
    }
    Ok(())
}

fn image_index(encoder: &JointModel, feats: &FeatureStore) -> CliResult<EmbeddingIndex> {
    let mut index = EmbeddingIndex::new();
    for (id, q) in feats.iter() {
        index
            .insert(id, ItemKind::Image, &encoder.embed_image(q).map_err(err)?)
            .map_err(err)?;
    }
    Ok(index)
}

fn word_vector(encoder: &JointModel, word: &str) -> CliResult<Vec<f64>> {
    let w = word.to_lowercase();
    let id = encoder
        .vocab
        .id(&w)
        .ok_or_else(|| format!("word {w:?} is not in the model vocabulary"))?;
    unit(&encoder.encode(&[id]).map_err(err)?)
}

pub fn analogy(a: &AnalogyArgs, run_config: &str) -> CliResult<()> {
    check_flags(&[(a.model_in.is_some(), "model-in"), (a.features.is_some(), "features"), (a.query.is_some(), "query"), (a.negative.is_some(), "negative"), (a.positive.is_some(), "positive")])?;
    let input = required(&a.model_in, "model-in")?;
    let feats = features(&a.features)?;
    let query = required(&a.query, "query")?;
    let negative = required(&a.negative, "negative")?;
    let positive = required(&a.positive, "positive")?;
    let encoder = JointModel::from_archive(&load_archive(input)?).map_err(err)?;
    if encoder.kind() == EncoderKind::Lstm {
        if !a.force {
            return Err(format!(
                "analogy queries expect a linear-encoder archive; {LSTM_CAVEAT} (pass --force to run anyway)"
            ));
        }
        eprintln!("warning: {LSTM_CAVEAT}");
    }
    let index = image_index(&encoder, &feats)?;
    let pos = index.position(query).ok_or_else(|| format!("--query image {query} has no features"))?;
    let q = index.vector(pos).to_vec();
    let (wn, wp) = (word_vector(&encoder, negative)?, word_vector(&encoder, positive)?);
    let hits = analogy_query(&q, &wn, &wp, &index, a.pool, Some(query)).map_err(err)?;
    let order = analogy_with_resort(&q, &wn, &wp, &index, a.pool, a.visible, Some(query)).map_err(err)?;
    let scores: HashMap<&str, f64> = hits.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let shown: Vec<(String, f64)> = order.into_iter().map(|id| {
        let s = scores[id.as_str()];
        (id, s)
    }).collect();
    let tsv = analogy_tsv(&shown);
    print!("{tsv}");
    if let Some(out) = &a.out {
        write_with_config(out, tsv.as_bytes(), run_config)?;
    }
    Ok(())
}

pub fn pca(a: &PcaArgs, run_config: &str) -> CliResult<()> {
    check_flags(&[(a.model_in.is_some(), "model-in"), (a.features.is_some(), "features")])?;
    let input = required(&a.model_in, "model-in")?;
    let feats = features(&a.features)?;
    let encoder = JointModel::from_archive(&load_archive(input)?).map_err(err)?;
    let mut index = image_index(&encoder, &feats)?;
    for w in &a.words {
        index.insert(w, ItemKind::Word, &word_vector(&encoder, w)?).map_err(err)?;
    }
    let vectors: Vec<Vec<f64>> = index.iter().map(|(_, _, v)| v.to_vec()).collect();
    let projection = pca_project(&vectors, a.components).map_err(err)?;
    let ratios: Vec<String> = projection.explained_ratio.iter().map(|r| format!("{r:.4}")).collect();
    eprintln!("explained variance ratio: {}", ratios.join(" "));
    let csv = pca_csv(&index, &projection);
    match &a.out {
        Some(out) => write_with_config(out, csv.as_bytes(), run_config),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let suite = gradient_suite(a.common.seed).map_err(err)?;
    println!("model\tmax_rel_error\tentries\tworst");
    let mut failed = Vec::new();
    for (name, r) in &suite {
        println!("{name}\t{:.3e}\t{}\t{}[{}]", r.max_rel_error, r.entries_checked, r.worst_param, r.worst_index);
        if !(r.max_rel_error < TOLERANCE) {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("gradient check above {TOLERANCE:e} for {}", failed.join(", ")))
    }
}

pub fn fixture(a: &FixtureArgs, run_config: &str) -> CliResult<()> {
    let dir = required(&a.out_dir, "out-dir")?;
    fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let (records, feats, stopwords) = match a.kind {
        FixtureKind::World => {
            let w = image_world(12, a.common.seed).map_err(err)?;
            let mut stop: Vec<String> = w.stopwords.into_iter().collect();
            stop.sort();
            (w.records, w.features, Some(stop))
        }
        FixtureKind::Pairs => {
            let (r, f) = retrieval_pairs(50, 16, a.common.seed).map_err(err)?;
            (r, f, None)
        }
    };
    write_with_config(&dir.join("captions.tsv"), captions_to_text(&records).as_bytes(), run_config)?;
    write_with_config(&dir.join("features.txt"), feats.to_text().as_bytes(), run_config)?;
    if let Some(stop) = stopwords {
        write_with_config(&dir.join("stopwords.txt"), format!("{}\n", stop.join("\n")).as_bytes(), run_config)?;
    }
    println!("wrote {} captions for {} images to {}", records.len(), feats.len(), dir.display());
    Ok(())
}
