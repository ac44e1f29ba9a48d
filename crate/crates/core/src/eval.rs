//! Cosine ranking and Recall@K.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{dot, normalize_with_norm, Embedding};
use crate::modality::ModalitySignature;

/// Pool indices by cosine to `query`, highest first; equal scores keep
/// ascending index order.
pub fn rank_candidates(query: &Embedding, pool: &[Embedding]) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput("candidate pool"));
    }
    let (q, _) = normalize_with_norm(query.as_slice())?;
    let scores = pool
        .iter()
        .map(|c| Ok(dot(&q, &normalize_with_norm(c.as_slice())?.0)))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Fraction of 1-based ranks that are `<= k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("ranks"));
    }
    if let Some(r) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::InvalidConfig(format!("ranks are 1-based, got {r}")));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedEmbedding {
    pub id: String,
    pub signature: ModalitySignature,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalStats {
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub query_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub query_count: usize,
    pub pool_size: usize,
    /// Keyed `"<query signature>-><target signature>"`.
    pub per_signature: BTreeMap<String, RetrievalStats>,
}

fn stats(ranks: &[usize], ks: &[usize]) -> Result<RetrievalStats> {
    let recall_at = ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(ranks, k)?)))
        .collect::<Result<_>>()?;
    Ok(RetrievalStats {
        recall_at,
        mean_rank: ranks.iter().sum::<usize>() as f64 / ranks.len() as f64,
        query_count: ranks.len(),
    })
}

/// Rank of the ground-truth item for every query and Recall@K overall and
/// per (query signature, target signature). Ties are broken by candidate
/// id, so the result does not depend on pool order.
pub fn evaluate(
    queries: &[TaggedEmbedding],
    pool: &[TaggedEmbedding],
    ground_truth: &BTreeMap<String, String>,
    ks: &[usize],
) -> Result<RetrievalReport> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("queries"));
    }
    if pool.is_empty() {
        return Err(Error::EmptyInput("candidate pool"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "K values must be positive, got {ks:?}"
        )));
    }
    let by_id: BTreeMap<&str, usize> = pool
        .iter()
        .enumerate()
        .map(|(i, c)| (c.id.as_str(), i))
        .collect();
    let units = pool
        .iter()
        .map(|c| normalize_with_norm(c.embedding.as_slice()).map(|(u, _)| u))
        .collect::<Result<Vec<_>>>()?;

    let ranked: Vec<(usize, String)> = queries
        .par_iter()
        .map(|q| {
            let target_id = ground_truth.get(&q.id).ok_or_else(|| {
                Error::MissingGroundTruth(format!("query {} has no ground truth", q.id))
            })?;
            let &t = by_id.get(target_id.as_str()).ok_or_else(|| {
                Error::MissingGroundTruth(format!(
                    "ground truth {target_id} of query {} is not in the pool",
                    q.id
                ))
            })?;
            let (u, _) = normalize_with_norm(q.embedding.as_slice())?;
            let scores: Vec<f64> = units.iter().map(|c| dot(&u, c)).collect();
            let st = scores[t];
            let ahead = (0..pool.len())
                .filter(|&i| match scores[i].total_cmp(&st) {
                    Ordering::Greater => true,
                    Ordering::Equal => pool[i].id < pool[t].id,
                    Ordering::Less => false,
                })
                .count();
            Ok((ahead + 1, format!("{}->{}", q.signature, pool[t].signature)))
        })
        .collect::<Result<_>>()?;

    let ranks: Vec<usize> = ranked.iter().map(|r| r.0).collect();
    let overall = stats(&ranks, ks)?;
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (rank, key) in ranked {
        groups.entry(key).or_default().push(rank);
    }
    let per_signature = groups
        .into_iter()
        .map(|(k, r)| Ok((k, stats(&r, ks)?)))
        .collect::<Result<_>>()?;
    Ok(RetrievalReport {
        recall_at: overall.recall_at,
        mean_rank: overall.mean_rank,
        query_count: overall.query_count,
        pool_size: pool.len(),
        per_signature,
    })
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// CSV with one row for the whole query set (`all`) and one per
    /// signature pair: `group,queries,R@k...,mean_rank`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group".to_string(), "queries".to_string()];
        header.extend(self.recall_at.keys().map(|k| format!("R@{k}")));
        header.push("mean_rank".into());
        w.write_record(&header)?;
        let mut row = |group: &str, s: &RetrievalStats| -> Result<()> {
            let mut rec = vec![group.to_string(), s.query_count.to_string()];
            rec.extend(s.recall_at.values().map(|v| v.to_string()));
            rec.push(s.mean_rank.to_string());
            w.write_record(&rec)?;
            Ok(())
        };
        let all = RetrievalStats {
            recall_at: self.recall_at.clone(),
            mean_rank: self.mean_rank,
            query_count: self.query_count,
        };
        row("all", &all)?;
        for (k, s) in &self.per_signature {
            row(k, s)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    fn tagged(id: &str, sig: ModalitySignature, v: &[f64]) -> TaggedEmbedding {
        TaggedEmbedding {
            id: id.into(),
            signature: sig,
            embedding: e(v),
        }
    }

    #[test]
    fn own_copy_ranks_first() {
        let q = e(&[0.0, 2.0, 0.0]);
        let pool = [
            e(&[1.0, 0.0, 0.0]),
            e(&[0.0, 0.0, 3.0]),
            e(&[0.0, 2.0, 0.0]),
        ];
        assert_eq!(rank_candidates(&q, &pool).unwrap()[0], 2);
    }

    #[test]
    fn identical_pool_keeps_index_order() {
        let pool = vec![e(&[0.3, 0.4]); 5];
        assert_eq!(
            rank_candidates(&e(&[1.0, -1.0]), &pool).unwrap(),
            vec![0, 1, 2, 3, 4]
        );
    }

    #[test]
    fn ranking_errors() {
        assert!(matches!(
            rank_candidates(&e(&[1.0]), &[]),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            rank_candidates(&e(&[0.0, 0.0]), &[e(&[1.0, 0.0])]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 1, 1], 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 3, 4], 2).unwrap(), 0.5);
        assert!(matches!(recall_at_k(&[], 1), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn self_retrieval() {
        let t = ModalitySignature::TEXT;
        let items = vec![
            tagged("a", t, &[1.0, 0.0, 0.0]),
            tagged("b", t, &[0.0, 1.0, 0.0]),
            tagged("c", t, &[0.5, 0.5, 1.0]),
        ];
        let gt = items.iter().map(|i| (i.id.clone(), i.id.clone())).collect();
        let r = evaluate(&items, &items, &gt, &[1, 2, 3]).unwrap();
        assert!(r.recall_at.values().all(|v| *v == 1.0));
        assert_eq!(r.mean_rank, 1.0);
        assert_eq!(r.per_signature["text->text"].query_count, 3);
    }

    #[test]
    fn missing_ground_truth() {
        let t = ModalitySignature::TEXT;
        let items = vec![tagged("a", t, &[1.0, 0.0])];
        let mut gt = BTreeMap::new();
        assert!(matches!(
            evaluate(&items, &items, &gt, &[1]),
            Err(Error::MissingGroundTruth(_))
        ));
        gt.insert("a".to_string(), "zzz".to_string());
        assert!(matches!(
            evaluate(&items, &items, &gt, &[1]),
            Err(Error::MissingGroundTruth(_))
        ));
    }

    #[test]
    fn ties_break_by_id_not_position() {
        let t = ModalitySignature::TEXT;
        let q = vec![tagged("q", t, &[1.0, 0.0])];
        let mut gt = BTreeMap::new();
        gt.insert("q".to_string(), "b".to_string());
        let a = tagged("a", t, &[2.0, 0.0]);
        let b = tagged("b", t, &[1.0, 0.0]);
        let r1 = evaluate(&q, &[a.clone(), b.clone()], &gt, &[1]).unwrap();
        let r2 = evaluate(&q, &[b, a], &gt, &[1]).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.mean_rank, 2.0);
    }

    #[test]
    fn csv_shape() {
        let t = ModalitySignature::TEXT;
        let items = vec![tagged("a", t, &[1.0, 0.0]), tagged("b", t, &[0.0, 1.0])];
        let gt = items.iter().map(|i| (i.id.clone(), i.id.clone())).collect();
        let csv = evaluate(&items, &items, &gt, &[1, 5, 10])
            .unwrap()
            .to_csv()
            .unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "group,queries,R@1,R@5,R@10,mean_rank");
        assert_eq!(lines[1], "all,2,1,1,1,1");
        assert_eq!(lines[2], "text->text,2,1,1,1,1");
    }
}
