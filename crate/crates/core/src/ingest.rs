//! Loaders and serializers for the external text formats, plus the
//! vocabularies built from them.
//!
//! * word embeddings: `V K` header, then `token f1 .. fK` per line
//! * image features: `D=<int>` header, then `image_id<TAB>f1 .. fD`
//! * captions: `image_id<TAB>tok1 .. tokN<TAB>tag1 .. tagN`
//! * stopwords: one token per line

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, SeededRng};

pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const UNK: &str = "<unk>";
pub const ENDPOS: &str = "<endpos>";
pub const RESERVED: [&str; 3] = [START, END, UNK];

/// Seed for embeddings of reserved tokens appended to a loaded vocabulary.
pub const RESERVED_SEED: u64 = 0x5EED_0001;
/// Half-width of the uniform initialisation range used throughout.
pub const INIT_SCALE: f64 = 0.08;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        message: message.into(),
    }
}

fn read_lines<R: BufRead>(reader: R, source: &str) -> Result<Vec<String>> {
    reader
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(source, e))
}

fn parse_floats(fields: &[&str], source: &str, line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(source, line, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(source, line, format!("non-finite value {f:?}")));
            }
            Ok(v)
        })
        .collect()
}

fn write_floats(out: &mut String, values: &[f64], sep: char) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(sep);
        }
        let _ = write!(out, "{v}");
    }
}

/// Token/index bijection with the word embedding table `W_T` (one row per
/// token).
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    table: Matrix,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, table: Matrix) -> Result<Self> {
        if tokens.len() != table.rows() {
            return Err(Error::shape("embedding table rows", tokens.len(), table.rows()));
        }
        table.check_finite("embedding table")?;
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            table,
        })
    }

    /// Appends any missing reserved tokens with embeddings drawn from `rng`.
    pub fn with_reserved(mut self, rng: &mut SeededRng) -> Self {
        let missing: Vec<&str> = RESERVED
            .iter()
            .copied()
            .filter(|t| !self.index.contains_key(*t))
            .collect();
        if missing.is_empty() {
            return self;
        }
        let k = self.dim();
        let mut values = self.table.clone().into_vec();
        for t in missing {
            self.index.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
            values.extend((0..k).map(|_| rng.uniform(-INIT_SCALE, INIT_SCALE)));
        }
        self.table = Matrix::new(self.tokens.len(), k, values).expect("consistent table");
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Embedding dimension `K`.
    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| self.unk())
    }

    pub fn start(&self) -> usize {
        self.index[START]
    }

    pub fn end(&self) -> usize {
        self.index[END]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        RESERVED.contains(&self.tokens[id].as_str())
    }

    pub fn has_reserved(&self) -> bool {
        RESERVED.iter().all(|t| self.index.contains_key(*t))
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Matrix {
        &mut self.table
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        self.table.row(id)
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.len() {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: id,
                size: self.len(),
            });
        }
        Ok(())
    }

    /// Serializes in the `V K` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.len(), self.dim());
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push(' ');
            write_floats(&mut out, self.table.row(i), ' ');
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_word_embeddings(path: &Path) -> Result<Vocabulary> {
    read_word_embeddings(open(path)?, &path.display().to_string())
}

/// Parses word embeddings and appends the reserved tokens when absent.
pub fn read_word_embeddings<R: BufRead>(reader: R, source: &str) -> Result<Vocabulary> {
    let lines = read_lines(reader, source)?;
    let header = lines
        .first()
        .ok_or_else(|| parse_err(source, 1, "empty embedding file"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let (v, k) = match dims.as_slice() {
        [v, k] => (
            v.parse::<usize>()
                .map_err(|_| parse_err(source, 1, "bad vocabulary size"))?,
            k.parse::<usize>()
                .map_err(|_| parse_err(source, 1, "bad dimension"))?,
        ),
        _ => return Err(parse_err(source, 1, "expected header \"<V> <K>\"")),
    };
    if v == 0 || k == 0 {
        return Err(parse_err(source, 1, "V and K must be positive"));
    }
    let body: Vec<(usize, &String)> = lines
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    if body.len() != v {
        return Err(parse_err(
            source,
            lines.len(),
            format!("header declares {v} words, found {}", body.len()),
        ));
    }
    let mut tokens = Vec::with_capacity(v);
    let mut seen = HashSet::with_capacity(v);
    let mut values = Vec::with_capacity(v * k);
    for (i, line) in body {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != k + 1 {
            return Err(parse_err(
                source,
                lineno,
                format!("expected {k} values, found {}", fields.len().saturating_sub(1)),
            ));
        }
        let token = fields[0].to_string();
        if !seen.insert(token.clone()) {
            return Err(parse_err(source, lineno, format!("duplicate token {token:?}")));
        }
        values.extend(parse_floats(&fields[1..], source, lineno)?);
        tokens.push(token);
    }
    let table = Matrix::new(v, k, values)?;
    let mut rng = SeededRng::new(RESERVED_SEED);
    Ok(Vocabulary::new(tokens, table)?.with_reserved(&mut rng))
}

/// Vocabulary of corpus tokens with frequency `>= min_count`, ordered by
/// descending frequency then lexicographically, followed by the reserved
/// tokens. All embeddings are drawn from `uniform[-0.08, 0.08)`.
pub fn build_vocabulary(
    records: &[CaptionRecord],
    min_count: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::invalid("min_count", "must be at least 1"));
    }
    if k == 0 {
        return Err(Error::invalid("embedding dimension", "must be positive"));
    }
    if records.is_empty() {
        return Err(Error::Empty("caption corpus"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        for t in &r.tokens {
            if !RESERVED.contains(&t.as_str()) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut tokens: Vec<String> = kept.into_iter().map(|(t, _)| t.to_string()).collect();
    tokens.extend(RESERVED.iter().map(|t| t.to_string()));
    let table = Matrix::uniform(tokens.len(), k, -INIT_SCALE, INIT_SCALE, rng);
    Vocabulary::new(tokens, table)
}

/// One caption with its per-token structure tags (POS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl CaptionRecord {
    pub fn new(image_id: &str, tokens: &[&str], tags: &[&str]) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != tags.len() {
            return Err(Error::invalid(
                "caption",
                format!("{} tokens, {} tags", tokens.len(), tags.len()),
            ));
        }
        Ok(CaptionRecord {
            image_id: image_id.to_string(),
            tokens: tokens.iter().map(|t| t.to_lowercase()).collect(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}", self.image_id, self.tokens.join(" "), self.tags.join(" "))
    }
}

fn parse_caption_line(line: &str, source: &str, lineno: usize) -> Result<CaptionRecord> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 3 {
        return Err(parse_err(
            source,
            lineno,
            format!("expected 3 tab-separated columns, found {}", cols.len()),
        ));
    }
    let image_id = cols[0].trim();
    if image_id.is_empty() {
        return Err(parse_err(source, lineno, "empty image id"));
    }
    let tokens: Vec<String> = cols[1].split_whitespace().map(str::to_lowercase).collect();
    let tags: Vec<String> = cols[2].split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(parse_err(source, lineno, "empty caption"));
    }
    if tokens.len() != tags.len() {
        return Err(parse_err(
            source,
            lineno,
            format!("{} tokens but {} tags", tokens.len(), tags.len()),
        ));
    }
    Ok(CaptionRecord {
        image_id: image_id.to_string(),
        tokens,
        tags,
    })
}

/// Parses a caption TSV without vocabulary mapping (tokens lowercased).
pub fn read_captions_raw<R: BufRead>(reader: R, source: &str) -> Result<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (i, line) in read_lines(reader, source)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_caption_line(line, source, i + 1)?);
    }
    Ok(out)
}

pub fn load_captions_raw(path: &Path) -> Result<Vec<CaptionRecord>> {
    read_captions_raw(open(path)?, &path.display().to_string())
}

/// Parses a caption TSV, replacing out-of-vocabulary tokens with `<unk>`.
pub fn read_caption_corpus<R: BufRead>(
    reader: R,
    source: &str,
    vocab: &Vocabulary,
) -> Result<Vec<CaptionRecord>> {
    let mut records = read_captions_raw(reader, source)?;
    map_unknown(&mut records, vocab);
    Ok(records)
}

pub fn load_caption_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<CaptionRecord>> {
    read_caption_corpus(open(path)?, &path.display().to_string(), vocab)
}

pub fn map_unknown(records: &mut [CaptionRecord], vocab: &Vocabulary) {
    for r in records {
        for t in &mut r.tokens {
            if vocab.id(t).is_none() {
                *t = UNK.to_string();
            }
        }
    }
}

pub fn captions_to_text(records: &[CaptionRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

/// Image feature vectors keyed by id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    features: IndexMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("feature dimension", "must be positive"));
        }
        Ok(FeatureStore {
            dim,
            features: IndexMap::new(),
        })
    }

    pub fn insert(&mut self, image_id: &str, q: Vec<f64>) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::shape(format!("features of {image_id}"), self.dim, q.len()));
        }
        if let Some(index) = q.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("features of {image_id}"),
                index,
            });
        }
        if self.features.contains_key(image_id) {
            return Err(Error::invalid("features", format!("duplicate image id {image_id}")));
        }
        self.features.insert(image_id.to_string(), q);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Result<&[f64]> {
        self.features
            .get(image_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingFeature(image_id.to_string()))
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.features.contains_key(image_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.features.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("D={}\n", self.dim);
        for (id, q) in &self.features {
            out.push_str(id);
            out.push('\t');
            write_floats(&mut out, q, ' ');
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_image_features(path: &Path) -> Result<FeatureStore> {
    read_image_features(open(path)?, &path.display().to_string())
}

pub fn read_image_features<R: BufRead>(reader: R, source: &str) -> Result<FeatureStore> {
    let lines = read_lines(reader, source)?;
    let header = lines
        .first()
        .ok_or_else(|| parse_err(source, 1, "empty feature file"))?;
    let dim: usize = header
        .trim()
        .strip_prefix("D=")
        .and_then(|d| d.parse().ok())
        .ok_or_else(|| parse_err(source, 1, "expected header \"D=<int>\""))?;
    let mut store = FeatureStore::new(dim).map_err(|e| parse_err(source, 1, e.to_string()))?;
    for (i, line) in lines.iter().enumerate().skip(1) {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(source, lineno, "expected image_id<TAB>values"))?;
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.len() != dim {
            return Err(parse_err(
                source,
                lineno,
                format!("image {id}: expected {dim} values, found {}", fields.len()),
            ));
        }
        let q = parse_floats(&fields, source, lineno)?;
        if store.contains(id) {
            return Err(parse_err(source, lineno, format!("duplicate image id {id}")));
        }
        store.insert(id, q)?;
    }
    Ok(store)
}

pub fn read_stopwords<R: BufRead>(reader: R, source: &str) -> Result<HashSet<String>> {
    Ok(read_lines(reader, source)?
        .iter()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

pub fn load_stopwords(path: &Path) -> Result<HashSet<String>> {
    read_stopwords(open(path)?, &path.display().to_string())
}

/// Structure-tag inventory; always contains `<endpos>` for padding past the
/// end of a sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TagSet {
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagSet {
    pub fn new(tags: Vec<String>) -> Result<Self> {
        let mut tags = tags;
        if !tags.iter().any(|t| t == ENDPOS) {
            tags.push(ENDPOS.to_string());
        }
        let mut index = HashMap::new();
        for (i, t) in tags.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid("tag set", format!("duplicate tag {t:?}")));
            }
        }
        Ok(TagSet { tags, index })
    }

    /// Sorted distinct tags of `records`, then `<endpos>`.
    pub fn from_records(records: &[CaptionRecord]) -> Self {
        let distinct: std::collections::BTreeSet<&str> = records
            .iter()
            .flat_map(|r| r.tags.iter().map(String::as_str))
            .filter(|t| *t != ENDPOS)
            .collect();
        TagSet::new(distinct.into_iter().map(str::to_string).collect()).expect("distinct tags")
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn id(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::invalid("tag", format!("unknown tag {tag:?}")))
    }

    pub fn endpos(&self) -> usize {
        self.index[ENDPOS]
    }

    pub fn ids<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter().map(|t| self.id(t.as_ref())).collect()
    }
}

/// Most-frequent-tag lookup tagger for building test fixtures from untagged
/// text. Unknown tokens receive `fallback`.
#[derive(Debug, Clone)]
pub struct LookupTagger {
    table: HashMap<String, String>,
    fallback: String,
}

impl LookupTagger {
    pub fn from_records(records: &[CaptionRecord], fallback: &str) -> Self {
        let mut counts: HashMap<&str, BTreeMap<&str, usize>> = HashMap::new();
        for r in records {
            for (tok, tag) in r.tokens.iter().zip(&r.tags) {
                *counts.entry(tok).or_default().entry(tag).or_default() += 1;
            }
        }
        let table = counts
            .into_iter()
            .map(|(tok, tags)| {
                // BTreeMap order makes ties resolve to the lexicographically first tag
                let best = tags
                    .iter()
                    .fold(("", 0), |best, (t, c)| if *c > best.1 { (*t, *c) } else { best })
                    .0;
                (tok.to_string(), best.to_string())
            })
            .collect();
        LookupTagger {
            table,
            fallback: fallback.to_string(),
        }
    }

    pub fn tag<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<String> {
        tokens
            .iter()
            .map(|t| {
                self.table
                    .get(&t.as_ref().to_lowercase())
                    .cloned()
                    .unwrap_or_else(|| self.fallback.clone())
            })
            .collect()
    }
}
