//! Vector arithmetic over the joint space, mean-resort of retrieved sets and
//! PCA projections.

use crate::error::{Error, Result};
use crate::numcore::{dot, l2_norm, unit_normalize, NORM_EPS};

pub const DEFAULT_VISIBLE: usize = 4;
pub const DEFAULT_POOL: usize = 12;
const PCA_TOL: f64 = 1e-10;
const PCA_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemKind {
    Image,
    Word,
    Sentence,
}

impl ItemKind {
    pub fn name(self) -> &'static str {
        match self {
            ItemKind::Image => "image",
            ItemKind::Word => "word",
            ItemKind::Sentence => "sentence",
        }
    }
}

/// Unit-normalized vectors with ids and kinds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    kinds: Vec<ItemKind>,
    vectors: Vec<Vec<f64>>,
}

impl EmbeddingIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `v / ‖v‖`.
    pub fn insert(&mut self, id: &str, kind: ItemKind, v: &[f64]) -> Result<()> {
        if let Some(first) = self.vectors.first() {
            if first.len() != v.len() {
                return Err(Error::shape("index vector", first.len(), v.len()));
            }
        }
        self.vectors.push(unit_normalize(v)?);
        self.ids.push(id.to_string());
        self.kinds.push(kind);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn kind(&self, i: usize) -> ItemKind {
        self.kinds[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ItemKind, &[f64])> {
        self.ids
            .iter()
            .zip(&self.kinds)
            .zip(&self.vectors)
            .map(|((id, k), v)| (id.as_str(), *k, v.as_slice()))
    }

    /// Items of `kind` by descending cosine with `query`, ties by insertion
    /// order, skipping `exclude`.
    pub fn nearest(&self, query: &[f64], kind: ItemKind, top_n: usize, exclude: Option<&str>) -> Result<Vec<(String, f64)>> {
        if self.is_empty() {
            return Err(Error::Empty("embedding index"));
        }
        if query.len() != self.vectors[0].len() {
            return Err(Error::shape("query vector", self.vectors[0].len(), query.len()));
        }
        let q = unit_normalize(query)?;
        let mut scored: Vec<(usize, f64)> = self
            .iter()
            .enumerate()
            .filter(|(_, (id, k, _))| *k == kind && exclude.map_or(true, |e| e != *id))
            .map(|(i, (_, _, v))| (i, dot(&q, v)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(top_n);
        Ok(scored.into_iter().map(|(i, s)| (self.ids[i].clone(), s)).collect())
    }
}

fn require_unit(what: &'static str, v: &[f64]) -> Result<()> {
    let n = l2_norm(v);
    if (n - 1.0).abs() > 1e-8 {
        return Err(Error::invalid(what, format!("norm {n} is not 1")));
    }
    Ok(())
}

/// Images ranked by cosine with `q - w_n + w_p`; `query_id` is left out.
pub fn analogy_query(
    q: &[f64],
    w_n: &[f64],
    w_p: &[f64],
    index: &EmbeddingIndex,
    top_n: usize,
    query_id: Option<&str>,
) -> Result<Vec<(String, f64)>> {
    require_unit("query image", q)?;
    require_unit("negative word", w_n)?;
    require_unit("positive word", w_p)?;
    if w_n.len() != q.len() || w_p.len() != q.len() {
        return Err(Error::shape("analogy operands", q.len(), w_n.len().max(w_p.len())));
    }
    let combined: Vec<f64> = q
        .iter()
        .zip(w_n.iter().zip(w_p))
        .map(|(a, (n, p))| a - n + p)
        .collect();
    let norm = l2_norm(&combined);
    if norm < NORM_EPS {
        return Err(Error::DegenerateNorm {
            norm,
            threshold: NORM_EPS,
        });
    }
    index.nearest(&combined, ItemKind::Image, top_n, query_id)
}

/// Reorders `items` by ascending Euclidean distance to their mean; equal
/// distances keep their input order.
pub fn resort_by_mean(items: &[(String, Vec<f64>)]) -> Result<Vec<String>> {
    let first = items.first().ok_or(Error::Empty("resort set"))?;
    let k = first.1.len();
    let mut mean = vec![0.0; k];
    for (_, v) in items {
        if v.len() != k {
            return Err(Error::shape("resort vector", k, v.len()));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= items.len() as f64;
    }
    let mut dist: Vec<(usize, f64)> = items
        .iter()
        .enumerate()
        .map(|(i, (_, v))| {
            let d: f64 = v.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
            (i, d.sqrt())
        })
        .collect();
    dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(dist.into_iter().map(|(i, _)| items[i].0.clone()).collect())
}

/// Analogy retrieval of a `pool`, resorted by mean, truncated to `visible`.
pub fn analogy_with_resort(
    q: &[f64],
    w_n: &[f64],
    w_p: &[f64],
    index: &EmbeddingIndex,
    pool: usize,
    visible: usize,
    query_id: Option<&str>,
) -> Result<Vec<String>> {
    let hits = analogy_query(q, w_n, w_p, index, pool, query_id)?;
    let items: Vec<(String, Vec<f64>)> = hits
        .into_iter()
        .map(|(id, _)| {
            let i = index.position(&id).expect("hit comes from index");
            (id, index.vector(i).to_vec())
        })
        .collect();
    let mut ids = resort_by_mean(&items)?;
    ids.truncate(visible);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    /// One row of `components` coordinates per input vector.
    pub coords: Vec<Vec<f64>>,
    /// Fraction of total variance captured by each component.
    pub explained_ratio: Vec<f64>,
    /// Unit principal axes.
    pub axes: Vec<Vec<f64>>,
}

/// Projection of mean-centred `vectors` onto the top `components` principal
/// axes, found by power iteration with deflation. Each axis is signed so its
/// largest-magnitude coordinate is positive.
pub fn pca_project(vectors: &[Vec<f64>], components: usize) -> Result<PcaProjection> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::invalid("PCA input", format!("{n} vectors: need at least 3")));
    }
    let k = vectors[0].len();
    if components == 0 || components > k {
        return Err(Error::invalid("PCA components", format!("{components} with dimension {k}")));
    }
    for v in vectors {
        if v.len() != k {
            return Err(Error::shape("PCA vector", k, v.len()));
        }
    }
    let mut mean = vec![0.0; k];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centred: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![vec![0.0; k]; k];
    for v in &centred {
        for i in 0..k {
            for j in 0..k {
                cov[i][j] += v[i] * v[j] / (n - 1) as f64;
            }
        }
    }
    let trace: f64 = (0..k).map(|i| cov[i][i]).sum();
    let mut axes = Vec::with_capacity(components);
    let mut eigenvalues = Vec::with_capacity(components);
    for c in 0..components {
        let (lambda, axis) = top_eigenpair(&cov, c);
        if !(lambda > 1e-12 * trace.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankDeficient {
                requested: components,
                attained: c,
            });
        }
        for i in 0..k {
            for j in 0..k {
                cov[i][j] -= lambda * axis[i] * axis[j];
            }
        }
        eigenvalues.push(lambda);
        axes.push(axis);
    }
    let coords = centred
        .iter()
        .map(|v| axes.iter().map(|a| dot(v, a)).collect())
        .collect();
    Ok(PcaProjection {
        coords,
        explained_ratio: eigenvalues.iter().map(|l| l / trace).collect(),
        axes,
    })
}

fn top_eigenpair(m: &[Vec<f64>], salt: usize) -> (f64, Vec<f64>) {
    let k = m.len();
    // fixed, non-degenerate start vector
    let mut v: Vec<f64> = (0..k)
        .map(|i| 1.0 + ((i * 7 + salt * 13) % 11) as f64 / 11.0)
        .collect();
    let norm = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= norm);
    let apply = |v: &[f64]| -> Vec<f64> { m.iter().map(|row| dot(row, v)).collect() };
    for _ in 0..PCA_MAX_ITERS {
        let w = apply(&v);
        let n = l2_norm(&w);
        if n < 1e-300 {
            return (0.0, v);
        }
        let next: Vec<f64> = w.iter().map(|x| x / n).collect();
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }
    let lambda = dot(&v, &apply(&v));
    let pivot = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    (lambda, v)
}

/// `rank\tid\tscore` lines.
pub fn analogy_tsv(hits: &[(String, f64)]) -> String {
    hits.iter()
        .enumerate()
        .map(|(r, (id, s))| format!("{}\t{id}\t{s:.6}\n", r + 1))
        .collect()
}

/// `id,kind,x,y` with a header line.
pub fn pca_csv(index: &EmbeddingIndex, projection: &PcaProjection) -> String {
    let mut out = String::from("id,kind,x,y\n");
    for ((id, kind, _), c) in index.iter().zip(&projection.coords) {
        let y = c.get(1).copied().unwrap_or(0.0);
        out.push_str(&format!("{id},{},{:.6},{:.6}\n", kind.name(), c[0], y));
    }
    out
}
