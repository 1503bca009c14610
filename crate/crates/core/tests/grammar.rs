use mmcap::fixtures::{grammar_corpus, Content, TEMPLATES};
use mmcap::generation::{generation_vocabulary, map_decode};
use mmcap::nlm::{decoder_vocabulary, perplexity, train_nlm, NlmTrainConfig, ScnlmModel};
use mmcap::numcore::SeededRng;

fn trained() -> (ScnlmModel, mmcap::fixtures::GrammarCorpus) {
    let corpus = grammar_corpus(16, 7);
    let (words, tags) = decoder_vocabulary(&corpus.records).unwrap();
    let mut rng = SeededRng::new(1);
    let mut model = ScnlmModel::new(words, tags, 16, None, 32, 3, 2, &mut rng).unwrap();
    model.reinit(0.32, &mut rng).unwrap();
    let examples = model.examples(&corpus.records, &corpus.conds).unwrap();
    model.init_bias(&examples);
    let config = NlmTrainConfig {
        context: 3,
        forward: 2,
        factors: 32,
        epochs: 60,
        learning_rate: 0.1,
        ..Default::default()
    };
    let log = train_nlm(&mut model, &examples, &config).unwrap();
    assert!(log.epoch_nll.last().unwrap() < &log.epoch_nll[0]);
    (model, corpus)
}

#[test]
fn grammar_is_learned_and_decoded() {
    let (model, corpus) = trained();
    let examples = model.examples(&corpus.records, &corpus.conds).unwrap();
    let ppl = perplexity(&model, &examples).unwrap();
    assert!(ppl <= 1.05, "perplexity {ppl}");

    let allowed = generation_vocabulary(&model);
    for content in Content::all() {
        let u = corpus.space.vector(&content);
        for t in TEMPLATES {
            let tags = model.tags.ids(t).unwrap();
            let (ids, _) = map_decode(&model, &u, &tags, 8, &allowed).unwrap();
            let got: Vec<&str> = ids.iter().map(|&w| model.word(w)).collect();
            assert_eq!(got, content.sentence(t));
        }
    }
}
