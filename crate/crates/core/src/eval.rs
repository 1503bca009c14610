//! Bidirectional ranking evaluation: Recall@K and median rank of the best
//! ground-truth item.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numcore::{dot, unit_normalize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Rank all captions for each image query.
    Annotation,
    /// Rank all images for each caption query.
    Search,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankResult {
    pub direction: Direction,
    /// 1-based rank of the best ground-truth item, in query order.
    pub ranks: Vec<usize>,
    pub candidates: usize,
}

/// An identified embedding.
pub type Item = (String, Vec<f64>);

fn normalized(items: &[Item]) -> Result<Vec<Vec<f64>>> {
    items.iter().map(|(_, v)| unit_normalize(v)).collect()
}

/// Rank of each ground-truth candidate `g` is one plus the number of
/// candidates with a higher score, or an equal score and a smaller id.
fn best_rank(scores: &[f64], ids: &[&str], truth: &[usize]) -> usize {
    truth
        .iter()
        .map(|&g| {
            let sg = scores[g];
            1 + scores
                .iter()
                .zip(ids)
                .enumerate()
                .filter(|&(c, (s, id))| c != g && (*s > sg || (*s == sg && (*id, c) < (ids[g], g))))
                .count()
        })
        .min()
        .unwrap_or(usize::MAX)
}

/// Annotation and search ranks. `ground_truth` maps image ids to caption
/// ids; every image and every caption must have at least one match.
pub fn rank_all(
    images: &[Item],
    captions: &[Item],
    ground_truth: &HashMap<String, Vec<String>>,
) -> Result<(RankResult, RankResult)> {
    if images.is_empty() || captions.is_empty() {
        return Err(Error::Empty("ranking candidates"));
    }
    let xs = normalized(images)?;
    let vs = normalized(captions)?;
    let caption_index: HashMap<&str, usize> = captions
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (id.as_str(), i))
        .collect();
    let mut image_truth: Vec<Vec<usize>> = Vec::with_capacity(images.len());
    let mut caption_truth: Vec<Vec<usize>> = vec![Vec::new(); captions.len()];
    for (i, (id, _)) in images.iter().enumerate() {
        let mut truth = Vec::new();
        for c in ground_truth.get(id).map(Vec::as_slice).unwrap_or(&[]) {
            let j = *caption_index.get(c.as_str()).ok_or_else(|| {
                Error::invalid("ground truth", format!("image {id}: unknown caption {c}"))
            })?;
            truth.push(j);
            caption_truth[j].push(i);
        }
        if truth.is_empty() {
            return Err(Error::invalid("ground truth", format!("image {id} has no caption")));
        }
        image_truth.push(truth);
    }
    if let Some(j) = caption_truth.iter().position(Vec::is_empty) {
        return Err(Error::invalid(
            "ground truth",
            format!("caption {} has no image", captions[j].0),
        ));
    }
    let caption_ids: Vec<&str> = captions.iter().map(|(id, _)| id.as_str()).collect();
    let image_ids: Vec<&str> = images.iter().map(|(id, _)| id.as_str()).collect();
    let annotation = xs
        .iter()
        .zip(&image_truth)
        .map(|(x, truth)| {
            let scores: Vec<f64> = vs.iter().map(|v| dot(x, v)).collect();
            best_rank(&scores, &caption_ids, truth)
        })
        .collect();
    let search = vs
        .iter()
        .zip(&caption_truth)
        .map(|(v, truth)| {
            let scores: Vec<f64> = xs.iter().map(|x| dot(x, v)).collect();
            best_rank(&scores, &image_ids, truth)
        })
        .collect();
    Ok((
        RankResult {
            direction: Direction::Annotation,
            ranks: annotation,
            candidates: captions.len(),
        },
        RankResult {
            direction: Direction::Search,
            ranks: search,
            candidates: images.len(),
        },
    ))
}

/// Percentage of queries ranked within the top `k`.
pub fn recall_at_k(result: &RankResult, k: usize) -> f64 {
    if result.ranks.is_empty() {
        return 0.0;
    }
    let hits = result.ranks.iter().filter(|&&r| r <= k).count();
    100.0 * hits as f64 / result.ranks.len() as f64
}

pub fn median_rank(result: &RankResult) -> Result<f64> {
    if result.ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    let mut r = result.ranks.clone();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

pub const TABLE_HEADER: &str =
    "ann_R@1\tann_R@5\tann_R@10\tann_Medr\tsearch_R@1\tsearch_R@5\tsearch_R@10\tsearch_Medr";

/// `R@1 R@5 R@10 Medr` for annotation then search, tab-separated.
pub fn table_row(annotation: &RankResult, search: &RankResult) -> Result<String> {
    let mut cells = Vec::with_capacity(8);
    for r in [annotation, search] {
        for k in [1, 5, 10] {
            cells.push(format!("{:.1}", recall_at_k(r, k)));
        }
        cells.push(format!("{}", median_rank(r)?));
    }
    Ok(cells.join("\t"))
}
