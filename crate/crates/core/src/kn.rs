//! Interpolated Kneser-Ney trigram model with a single absolute discount.
//!
//! Sentences are padded as `<start> <start> w_1 .. w_n <end>`. The predictable
//! set is every vocabulary type except `<start>`; the lowest order
//! interpolates with a uniform distribution over that set so every type keeps
//! non-zero probability when `D > 0`.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use indexmap::IndexSet;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::ingest::{END, START, UNK};
use crate::numcore::Matrix;

pub const DEFAULT_DISCOUNT: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub struct TrigramCounts {
    words: IndexSet<String>,
    discount: f64,
    trigram: HashMap<(usize, usize, usize), u64>,
    /// `c(a b ·)`: occurrences of `(a, b)` as a trigram history.
    bigram: HashMap<(usize, usize), u64>,
    /// `c(a · ·)`
    unigram: Vec<u64>,
    /// `N1+(a b ·)`: distinct continuations of a history.
    history_types: HashMap<(usize, usize), u64>,
    /// `N1+(· b c)`
    mid_cont: HashMap<(usize, usize), u64>,
    /// `N1+(· b ·)`
    mid_total: Vec<u64>,
    /// Distinct `c` with `N1+(· b c) > 0`.
    mid_types: Vec<u64>,
    /// `N1+(· c)`: distinct left neighbours of `c`.
    low_cont: Vec<u64>,
    /// `N1+(· ·)`
    low_total: u64,
    /// Distinct `c` with `N1+(· c) > 0`.
    low_types: u64,
    tokens: u64,
}

impl TrigramCounts {
    pub fn new(discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::invalid("discount", format!("{discount} outside [0, 1)")));
        }
        let mut c = TrigramCounts {
            words: IndexSet::new(),
            discount,
            trigram: HashMap::new(),
            bigram: HashMap::new(),
            unigram: Vec::new(),
            history_types: HashMap::new(),
            mid_cont: HashMap::new(),
            mid_total: Vec::new(),
            mid_types: Vec::new(),
            low_cont: Vec::new(),
            low_total: 0,
            low_types: 0,
            tokens: 0,
        };
        for w in [START, END, UNK] {
            c.intern(w);
        }
        Ok(c)
    }

    /// Index of `word`, adding it to the vocabulary if new.
    pub fn intern(&mut self, word: &str) -> usize {
        let (id, added) = self.words.insert_full(word.to_string());
        if added {
            self.unigram.push(0);
            self.mid_total.push(0);
            self.mid_types.push(0);
            self.low_cont.push(0);
        }
        id
    }

    /// Records one occurrence of trigram `(a, b, c)` and updates every
    /// derived table.
    pub fn add(&mut self, a: usize, b: usize, c: usize) {
        let n = self.trigram.entry((a, b, c)).or_insert(0);
        *n += 1;
        let first = *n == 1;
        *self.bigram.entry((a, b)).or_insert(0) += 1;
        self.unigram[a] += 1;
        if first {
            *self.history_types.entry((a, b)).or_insert(0) += 1;
            let m = self.mid_cont.entry((b, c)).or_insert(0);
            *m += 1;
            self.mid_total[b] += 1;
            if *m == 1 {
                self.mid_types[b] += 1;
                self.low_cont[c] += 1;
                self.low_total += 1;
                if self.low_cont[c] == 1 {
                    self.low_types += 1;
                }
            }
        }
    }

    /// Adds a sentence with its boundary padding; unknown words are interned.
    pub fn add_sentence<S: AsRef<str>>(&mut self, sentence: &[S]) {
        let start = self.intern(START);
        let end = self.intern(END);
        let mut ids = vec![start, start];
        ids.extend(sentence.iter().map(|w| self.intern(w.as_ref())));
        ids.push(end);
        for t in ids.windows(3) {
            self.add(t[0], t[1], t[2]);
        }
        self.tokens += sentence.len() as u64 + 1;
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn words(&self) -> &IndexSet<String> {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.get_index_of(word)
    }

    /// Index of `word`, or of `<unk>` when absent.
    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or_else(|| self.id(UNK).expect("<unk> interned"))
    }

    pub fn start(&self) -> usize {
        self.id(START).expect("<start> interned")
    }

    /// Number of predicted tokens (words plus one `<end>` per sentence).
    pub fn total_tokens(&self) -> u64 {
        self.tokens
    }

    pub fn trigram_count(&self, a: usize, b: usize, c: usize) -> u64 {
        self.trigram.get(&(a, b, c)).copied().unwrap_or(0)
    }

    pub fn bigram_count(&self, a: usize, b: usize) -> u64 {
        self.bigram.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn unigram_count(&self, a: usize) -> u64 {
        self.unigram.get(a).copied().unwrap_or(0)
    }

    pub fn trigrams(&self) -> impl Iterator<Item = ((usize, usize, usize), u64)> + '_ {
        self.trigram.iter().map(|(k, v)| (*k, *v))
    }

    fn predictable(&self) -> f64 {
        (self.words.len() - 1) as f64
    }

    fn p_low(&self, c: usize) -> f64 {
        let d = self.discount;
        let uniform = 1.0 / self.predictable();
        if self.low_total == 0 {
            return uniform;
        }
        let n = self.low_total as f64;
        let cont = self.low_cont.get(c).copied().unwrap_or(0) as f64;
        (cont - d).max(0.0) / n + d * self.low_types as f64 / n * uniform
    }

    fn p_mid(&self, b: usize, c: usize) -> f64 {
        let total = self.mid_total.get(b).copied().unwrap_or(0);
        if total == 0 {
            return self.p_low(c);
        }
        let d = self.discount;
        let n = total as f64;
        let cont = self.mid_cont.get(&(b, c)).copied().unwrap_or(0) as f64;
        (cont - d).max(0.0) / n + d * self.mid_types[b] as f64 / n * self.p_low(c)
    }

    /// `P_KN(c | a, b)`; zero for `c = <start>`.
    pub fn prob(&self, a: usize, b: usize, c: usize) -> f64 {
        if c == self.start() {
            return 0.0;
        }
        let history = self.bigram_count(a, b);
        if history == 0 {
            return self.p_mid(b, c);
        }
        let d = self.discount;
        let n = history as f64;
        let types = self.history_types[&(a, b)] as f64;
        (self.trigram_count(a, b, c) as f64 - d).max(0.0) / n + d * types / n * self.p_mid(b, c)
    }

    /// Conditional distribution over the whole vocabulary.
    pub fn distribution(&self, a: usize, b: usize) -> Vec<f64> {
        (0..self.words.len()).map(|c| self.prob(a, b, c)).collect()
    }

    pub fn to_archive(&self) -> Archive {
        let mut entries: Vec<_> = self.trigram.iter().collect();
        entries.sort();
        let mut values = Vec::with_capacity(entries.len() * 4);
        for (&(a, b, c), &n) in entries {
            values.extend([a as f64, b as f64, c as f64, n as f64]);
        }
        let mut archive = Archive::new();
        archive.set_meta("kn.discount", self.discount);
        archive.set_meta("kn.tokens", self.tokens);
        archive.set_list("kn.words", self.words.iter().cloned().collect());
        archive.insert_tensor(
            "kn.trigrams",
            Matrix::new(values.len() / 4, 4, values).expect("integer counts"),
        );
        archive
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if !archive.has_prefix("kn.") {
            return Err(Error::MissingModel("Kneser-Ney model (kn.*)".into()));
        }
        let mut counts = TrigramCounts::new(archive.meta_parse("kn.discount")?)?;
        let words = archive.list("kn.words")?;
        for w in words {
            counts.intern(w);
        }
        if counts.words.len() != words.len() {
            return Err(Error::Archive("Kneser-Ney word list has duplicates or misses reserved tokens".into()));
        }
        let table = archive.tensor("kn.trigrams")?;
        if table.cols() != 4 {
            return Err(Error::Archive("kn.trigrams must have 4 columns".into()));
        }
        let v = counts.words.len();
        for r in 0..table.rows() {
            let row = table.row(r);
            let as_index = |x: f64| -> Result<usize> {
                if x < 0.0 || x.fract() != 0.0 || x as usize >= v {
                    return Err(Error::Archive(format!("bad trigram index {x}")));
                }
                Ok(x as usize)
            };
            let (a, b, c) = (as_index(row[0])?, as_index(row[1])?, as_index(row[2])?);
            if row[3] < 1.0 || row[3].fract() != 0.0 {
                return Err(Error::Archive(format!("bad trigram count {}", row[3])));
            }
            for _ in 0..row[3] as u64 {
                counts.add(a, b, c);
            }
        }
        counts.tokens = archive.meta_parse("kn.tokens")?;
        Ok(counts)
    }
}

/// Counts every sentence of `corpus`.
pub fn build_kn_trigram<S: AsRef<str>>(corpus: &[Vec<S>], discount: f64) -> Result<TrigramCounts> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty("Kneser-Ney corpus"));
    }
    let mut counts = TrigramCounts::new(discount)?;
    for s in corpus {
        if !s.is_empty() {
            counts.add_sentence(s);
        }
    }
    Ok(counts)
}

/// Natural-log probability of `sentence` followed by `<end>`; unknown words
/// score as `<unk>`.
pub fn kn_logprob<S: AsRef<str>>(model: &TrigramCounts, sentence: &[S]) -> Result<f64> {
    if sentence.is_empty() {
        return Err(Error::Empty("sentence"));
    }
    let start = model.start();
    let mut ids = vec![start, start];
    ids.extend(sentence.iter().map(|w| model.id_or_unk(w.as_ref())));
    ids.push(model.id(END).expect("<end> interned"));
    Ok(ids.windows(3).map(|t| model.prob(t[0], t[1], t[2]).ln()).sum())
}

/// One sentence per line, whitespace-separated and lowercased; blank lines
/// are skipped.
pub fn read_text_corpus<R: BufRead>(reader: R, source: &str) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(Path::new(source), e))?;
        let toks: Vec<String> = line.split_whitespace().map(str::to_lowercase).collect();
        if !toks.is_empty() {
            out.push(toks);
        }
    }
    Ok(out)
}

pub fn load_text_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_text_corpus(std::io::BufReader::new(f), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::SeededRng;
    use proptest::prelude::*;

    fn corpus(lines: &[&str]) -> Vec<Vec<String>> {
        lines
            .iter()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect()
    }

    fn random_corpus(seed: u64, sentences: usize, vocab: usize) -> Vec<Vec<String>> {
        let mut rng = SeededRng::new(seed);
        (0..sentences)
            .map(|_| {
                let len = 1 + rng.below(6);
                (0..len).map(|_| format!("w{}", rng.below(vocab))).collect()
            })
            .collect()
    }

    #[test]
    fn single_sentence_counts() {
        let m = build_kn_trigram(&corpus(&["a b"]), 0.75).unwrap();
        let id = |w: &str| m.id(w).unwrap();
        let (s, e, a, b) = (id(START), id(END), id("a"), id("b"));
        assert_eq!(m.trigram_count(s, s, a), 1);
        assert_eq!(m.trigram_count(s, a, b), 1);
        assert_eq!(m.trigram_count(a, b, e), 1);
        assert_eq!(m.trigrams().count(), 3);
        assert_eq!(m.bigram_count(s, s), 1);
        assert_eq!(m.bigram_count(s, a), 1);
        assert_eq!(m.bigram_count(a, b), 1);
        assert_eq!(m.unigram_count(s), 2);
        assert_eq!(m.unigram_count(a), 1);
        assert_eq!(m.unigram_count(b), 0);
        assert_eq!(m.total_tokens(), 3);
        assert!(build_kn_trigram::<String>(&[], 0.75).is_err());
        assert!(build_kn_trigram(&corpus(&["a"]), 1.0).is_err());
    }

    #[test]
    fn duplicated_corpus_doubles_counts() {
        let c = random_corpus(1, 10, 6);
        let once = build_kn_trigram(&c, 0.75).unwrap();
        let twice = build_kn_trigram(&[c.clone(), c].concat(), 0.75).unwrap();
        for (k, n) in once.trigrams() {
            assert_eq!(twice.trigram_count(k.0, k.1, k.2), 2 * n);
        }
        assert_eq!(twice.trigrams().count(), once.trigrams().count());
        assert_eq!(twice.total_tokens(), 2 * once.total_tokens());
    }

    #[test]
    fn marginals_match_brute_force() {
        let m = build_kn_trigram(&random_corpus(2, 20, 8), 0.75).unwrap();
        let v = m.vocab_size();
        for a in 0..v {
            let mut row = 0;
            for b in 0..v {
                let sum: u64 = (0..v).map(|c| m.trigram_count(a, b, c)).sum();
                assert_eq!(sum, m.bigram_count(a, b));
                row += m.bigram_count(a, b);
            }
            assert_eq!(row, m.unigram_count(a));
        }
    }

    #[test]
    fn normalization_over_random_contexts() {
        let m = build_kn_trigram(&random_corpus(3, 30, 12), 0.75).unwrap();
        let mut rng = SeededRng::new(4);
        let v = m.vocab_size();
        for _ in 0..100 {
            let (a, b) = (rng.below(v), rng.below(v));
            let sum: f64 = m.distribution(a, b).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "{sum}");
        }
    }

    #[test]
    fn unknown_word_is_finite() {
        let m = build_kn_trigram(&corpus(&["the cat sat", "a dog ran"]), 0.75).unwrap();
        let lp = kn_logprob(&m, &["<unk>"]).unwrap();
        assert!(lp.is_finite() && lp < 0.0);
        let lp = kn_logprob(&m, &["zebra", "cat"]).unwrap();
        assert!(lp.is_finite());
        assert!(kn_logprob::<&str>(&m, &[]).is_err());
    }

    #[test]
    fn zero_discount_is_maximum_likelihood() {
        let m = build_kn_trigram(&corpus(&["x a b c", "y b d"]), 0.0).unwrap();
        let id = |w: &str| m.id(w).unwrap();
        assert!((m.prob(id("a"), id("b"), id("c")) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logprob_sums_positions() {
        let m = build_kn_trigram(&random_corpus(5, 15, 6), 0.75).unwrap();
        let s = ["w1", "w3", "w0"];
        let id = |w: &str| m.id(w).unwrap();
        let st = m.start();
        let want = m.prob(st, st, id("w1")).ln()
            + m.prob(st, id("w1"), id("w3")).ln()
            + m.prob(id("w1"), id("w3"), id("w0")).ln()
            + m.prob(id("w3"), id("w0"), id(END)).ln();
        assert!((kn_logprob(&m, &s).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn archive_round_trip() {
        let m = build_kn_trigram(&random_corpus(6, 10, 5), 0.6).unwrap();
        let a = Archive::from_bytes(&m.to_archive().to_bytes().unwrap()).unwrap();
        assert_eq!(TrigramCounts::from_archive(&a).unwrap(), m);
    }

    #[test]
    fn text_corpus_reader() {
        let c = read_text_corpus("The Cat\n\n  a dog  ran\n".as_bytes(), "mem").unwrap();
        assert_eq!(c, corpus(&["the cat", "a dog ran"]));
    }

    proptest! {
        #[test]
        fn extra_trigram_never_lowers_its_probability(
            seed in 0u64..5_000, pick in 0usize..1_000, d in 0.05f64..0.95
        ) {
            let mut m = build_kn_trigram(&random_corpus(seed, 8, 5), d).unwrap();
            let v = m.vocab_size();
            let a = pick % v;
            let b = (pick / v) % v;
            let c = 1 + (pick / (v * v)) % (v - 1);
            prop_assume!(c != m.start());
            let before = m.prob(a, b, c);
            m.add(a, b, c);
            prop_assert!(m.prob(a, b, c) >= before - 1e-15);
            let sum: f64 = m.distribution(a, b).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn logprob_finite_and_nonpositive(seed in 0u64..5_000, words in proptest::collection::vec(0usize..9, 1..8)) {
            let m = build_kn_trigram(&random_corpus(seed, 10, 6), DEFAULT_DISCOUNT).unwrap();
            let s: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
            let lp = kn_logprob(&m, &s).unwrap();
            prop_assert!(lp.is_finite() && lp <= 0.0);
        }
    }
}
