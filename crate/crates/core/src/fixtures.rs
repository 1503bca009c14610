//! Synthetic data sets: a deterministic POS-template grammar, a small
//! image world built on it, random retrieval pairs and an exact-sum analogy
//! space.

use std::collections::HashSet;

use crate::error::Result;
use crate::eval::{rank_all, RankResult};
use crate::ingest::{CaptionRecord, FeatureStore};
use crate::numcore::{unit_normalize, SeededRng};
use crate::regularities::{EmbeddingIndex, ItemKind};

pub const COLORS: [&str; 3] = ["red", "blue", "green"];
pub const OBJECTS: [&str; 3] = ["dog", "cat", "car"];
pub const ACTIONS: [&str; 2] = ["runs", "sits"];
pub const PLACES: [&str; 2] = ["park", "street"];

/// Templates of the grammar. `DT` is always "the" and `IN` always "in"; the
/// other tags read one attribute of the content.
pub const TEMPLATES: [&[&str]; 3] = [
    &["DT", "JJ", "NN", "VBZ"],
    &["DT", "JJ", "NN", "VBZ", "IN", "DT", "LOC"],
    &["DT", "NN", "VBZ", "IN", "DT", "LOC"],
];

pub const STOPWORDS: [&str; 2] = ["the", "in"];

/// Indices into `COLORS`, `OBJECTS`, `ACTIONS`, `PLACES`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Content {
    pub color: usize,
    pub object: usize,
    pub action: usize,
    pub place: usize,
}

impl Content {
    pub fn all() -> Vec<Content> {
        let mut out = Vec::new();
        for color in 0..COLORS.len() {
            for object in 0..OBJECTS.len() {
                for action in 0..ACTIONS.len() {
                    for place in 0..PLACES.len() {
                        out.push(Content {
                            color,
                            object,
                            action,
                            place,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn word(&self, tag: &str) -> &'static str {
        match tag {
            "DT" => "the",
            "IN" => "in",
            "JJ" => COLORS[self.color],
            "NN" => OBJECTS[self.object],
            "VBZ" => ACTIONS[self.action],
            "LOC" => PLACES[self.place],
            other => panic!("tag {other} is not in the grammar"),
        }
    }

    /// The unique sentence of this content under `template`.
    pub fn sentence(&self, template: &[&str]) -> Vec<&'static str> {
        template.iter().map(|t| self.word(t)).collect()
    }
}

/// One unit attribute vector per value of each attribute.
#[derive(Debug, Clone)]
pub struct ContentSpace {
    pub colors: Vec<Vec<f64>>,
    pub objects: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub places: Vec<Vec<f64>>,
}

fn random_unit(k: usize, rng: &mut SeededRng) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
    unit_normalize(&v).expect("gaussian vector is non-zero")
}

impl ContentSpace {
    pub fn new(k: usize, rng: &mut SeededRng) -> Self {
        let mut draw = |n: usize| (0..n).map(|_| random_unit(k, rng)).collect();
        ContentSpace {
            colors: draw(COLORS.len()),
            objects: draw(OBJECTS.len()),
            actions: draw(ACTIONS.len()),
            places: draw(PLACES.len()),
        }
    }

    /// Unit-normalized sum of the content's attribute vectors.
    pub fn vector(&self, c: &Content) -> Vec<f64> {
        let parts = [
            &self.colors[c.color],
            &self.objects[c.object],
            &self.actions[c.action],
            &self.places[c.place],
        ];
        let k = parts[0].len();
        let sum: Vec<f64> = (0..k).map(|i| parts.iter().map(|p| p[i]).sum()).collect();
        unit_normalize(&sum).expect("attribute sum is non-zero")
    }
}

/// Every (content, template) sentence with its conditioning vector.
#[derive(Debug, Clone)]
pub struct GrammarCorpus {
    pub records: Vec<CaptionRecord>,
    pub conds: Vec<Vec<f64>>,
    pub contents: Vec<Content>,
    pub space: ContentSpace,
}

fn caption(id: &str, content: &Content, template: &[&str]) -> CaptionRecord {
    CaptionRecord::new(id, &content.sentence(template), template).expect("grammar sentence is non-empty")
}

pub fn grammar_corpus(k: usize, seed: u64) -> GrammarCorpus {
    let mut rng = SeededRng::new(seed);
    let space = ContentSpace::new(k, &mut rng);
    let contents = Content::all();
    let mut records = Vec::new();
    let mut conds = Vec::new();
    for (i, c) in contents.iter().enumerate() {
        for t in TEMPLATES {
            records.push(caption(&format!("c{i:02}"), c, t));
            conds.push(space.vector(c));
        }
    }
    GrammarCorpus {
        records,
        conds,
        contents,
        space,
    }
}

/// Ten images of distinct contents with one caption per template. Features
/// are a fixed random linear map of the content vector plus small noise.
#[derive(Debug, Clone)]
pub struct ImageWorld {
    pub records: Vec<CaptionRecord>,
    pub features: FeatureStore,
    pub contents: Vec<(String, Content)>,
    pub stopwords: HashSet<String>,
}

pub fn image_world(feature_dim: usize, seed: u64) -> Result<ImageWorld> {
    let mut rng = SeededRng::new(seed);
    let k = 8;
    let space = ContentSpace::new(k, &mut rng);
    let map: Vec<Vec<f64>> = (0..feature_dim).map(|_| (0..k).map(|_| rng.normal()).collect()).collect();
    let mut all = Content::all();
    rng.shuffle(&mut all);
    let mut features = FeatureStore::new(feature_dim)?;
    let mut records = Vec::new();
    let mut contents = Vec::new();
    for (i, c) in all.into_iter().take(10).enumerate() {
        let id = format!("img{i:02}");
        let u = space.vector(&c);
        let q: Vec<f64> = map
            .iter()
            .map(|row| row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + 0.01 * rng.normal())
            .collect();
        features.insert(&id, q)?;
        for t in TEMPLATES {
            records.push(caption(&id, &c, t));
        }
        contents.push((id, c));
    }
    Ok(ImageWorld {
        records,
        features,
        contents,
        stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
    })
}

/// `n` random feature vectors, each paired with one random caption over a
/// 30-word vocabulary.
pub fn retrieval_pairs(n: usize, feature_dim: usize, seed: u64) -> Result<(Vec<CaptionRecord>, FeatureStore)> {
    let mut rng = SeededRng::new(seed);
    let words: Vec<String> = (0..30).map(|i| format!("w{i:02}")).collect();
    let mut features = FeatureStore::new(feature_dim)?;
    let mut records = Vec::new();
    for i in 0..n {
        let id = format!("img{i:03}");
        features.insert(&id, (0..feature_dim).map(|_| rng.normal()).collect())?;
        let len = 3 + rng.below(4);
        let toks: Vec<&str> = (0..len).map(|_| words[rng.below(words.len())].as_str()).collect();
        let tags = vec!["X"; len];
        records.push(CaptionRecord::new(&id, &toks, &tags)?);
    }
    Ok((records, features))
}

/// Ranks `n` random image embeddings against `n` random caption embeddings
/// with one-to-one ground truth.
pub fn random_ranking(n: usize, k: usize, seed: u64) -> Result<(RankResult, RankResult)> {
    let mut rng = SeededRng::new(seed);
    let mut draw = |prefix: &str| -> Vec<(String, Vec<f64>)> {
        (0..n)
            .map(|i| (format!("{prefix}{i:05}"), (0..k).map(|_| rng.normal()).collect()))
            .collect()
    };
    let images = draw("img");
    let captions = draw("cap");
    let truth = (0..n).map(|i| (format!("img{i:05}"), vec![format!("cap{i:05}")])).collect();
    rank_all(&images, &captions, &truth)
}

/// One analogy: retrieve `target` class from `query_id` by swapping
/// `negative` for `positive`.
#[derive(Debug, Clone, PartialEq)]
pub struct Analogy {
    pub query_id: String,
    pub negative: String,
    pub positive: String,
    pub target: String,
}

#[derive(Debug, Clone)]
pub struct AnalogySpace {
    pub words: Vec<(String, Vec<f64>)>,
    pub index: EmbeddingIndex,
    pub analogies: Vec<Analogy>,
}

impl AnalogySpace {
    pub fn word(&self, w: &str) -> &[f64] {
        &self.words.iter().find(|(x, _)| x == w).expect("fixture word").1
    }

    /// Class of an image id: `color_object`.
    pub fn class_of(id: &str) -> &str {
        id.rsplit_once('#').map_or(id, |(c, _)| c)
    }
}

pub const ANALOGY_COLORS: [&str; 3] = ["red", "blue", "green"];
pub const ANALOGY_OBJECTS: [&str; 4] = ["car", "boat", "house", "bird"];

/// Images are exact sums `v_color + v_object` of unit word vectors, stored
/// `copies` times each under ids `color_object#i`. Analogies swap the color
/// of the first copy of every class, giving 3 x 4 x 2 = 24 queries.
pub fn analogy_space(k: usize, copies: usize, seed: u64) -> Result<AnalogySpace> {
    let mut rng = SeededRng::new(seed);
    let words: Vec<(String, Vec<f64>)> = ANALOGY_COLORS
        .iter()
        .chain(&ANALOGY_OBJECTS)
        .map(|w| (w.to_string(), random_unit(k, &mut rng)))
        .collect();
    let vec_of = |w: &str| words.iter().find(|(x, _)| x == w).expect("fixture word").1.clone();
    let mut index = EmbeddingIndex::new();
    for c in ANALOGY_COLORS {
        for o in ANALOGY_OBJECTS {
            let (a, b) = (vec_of(c), vec_of(o));
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            for i in 0..copies {
                index.insert(&format!("{c}_{o}#{i}"), ItemKind::Image, &sum)?;
            }
        }
    }
    let mut analogies = Vec::new();
    for c in ANALOGY_COLORS {
        for o in ANALOGY_OBJECTS {
            for p in ANALOGY_COLORS.iter().filter(|p| **p != c) {
                analogies.push(Analogy {
                    query_id: format!("{c}_{o}#0"),
                    negative: c.to_string(),
                    positive: p.to_string(),
                    target: format!("{p}_{o}"),
                });
            }
        }
    }
    Ok(AnalogySpace {
        words,
        index,
        analogies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_corpus_shape() {
        let g = grammar_corpus(8, 1);
        assert_eq!(g.records.len(), 36 * 3);
        // templates without LOC or JJ collapse contents differing only there
        let texts: HashSet<String> = g.records.iter().map(|r| r.text()).collect();
        assert_eq!(texts.len(), 18 + 36 + 12);
        assert!(g.records.iter().all(|r| r.tags.len() == r.tokens.len()));
    }

    #[test]
    fn image_world_shape() {
        let w = image_world(12, 2).unwrap();
        assert_eq!(w.features.len(), 10);
        assert_eq!(w.records.len(), 30);
    }

    #[test]
    fn analogy_count() {
        let s = analogy_space(16, 2, 3).unwrap();
        assert_eq!(s.analogies.len(), 24);
        assert_eq!(s.index.len(), 24);
        assert_eq!(AnalogySpace::class_of("red_car#1"), "red_car");
    }
}
