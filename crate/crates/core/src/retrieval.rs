//! Exact cosine nearest-neighbour retrieval and snippet voting.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::container::read_u32;
use crate::error::{argument, Error, Result};
use crate::features::{slice_passage, HopConfig, PassageRef};
use crate::geometry::{Direction, Modality};
use crate::model::{EmbeddingVector, SnippetModel};
use crate::parallel;

pub const INDEX_MAGIC: &[u8; 4] = b"EIDX";
/// Votes cast by each query snippet.
pub const DEFAULT_TOP_K: usize = 5;

/// Embeddings of one modality for a set of passages.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub modality: Modality,
    pub passage_ids: Vec<String>,
    /// `(n, D)`, one row per passage.
    pub matrix: Array2<f32>,
    pub fingerprint: String,
}

fn unit_rows(m: &Array2<f32>) -> Array2<f64> {
    let mut u = m.mapv(f64::from);
    for mut row in u.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    u
}

impl EmbeddingIndex {
    pub fn new(modality: Modality, passage_ids: Vec<String>, matrix: Array2<f32>, fingerprint: String) -> Result<Self> {
        if passage_ids.is_empty() {
            return Err(argument("cannot build an empty index"));
        }
        if passage_ids.len() != matrix.nrows() {
            return Err(argument("one passage id per index row required"));
        }
        let unique: BTreeSet<&String> = passage_ids.iter().collect();
        if unique.len() != passage_ids.len() {
            return Err(argument("duplicate passage id in index"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(argument("index contains non-finite values"));
        }
        Ok(Self {
            modality,
            passage_ids,
            matrix,
            fingerprint,
        })
    }

    pub fn from_embeddings(embs: &[EmbeddingVector], fingerprint: &str) -> Result<Self> {
        let first = embs.first().ok_or_else(|| argument("cannot build an empty index"))?;
        let d = first.values.len();
        let mut matrix = Array2::zeros((embs.len(), d));
        for (i, e) in embs.iter().enumerate() {
            if e.modality != first.modality || e.values.len() != d {
                return Err(argument("index rows must share modality and dimension"));
            }
            matrix.row_mut(i).assign(&ArrayView1::from(&e.values[..]));
        }
        Self::new(
            first.modality,
            embs.iter().map(|e| e.passage_id.clone()).collect(),
            matrix,
            fingerprint.to_string(),
        )
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, i: usize) -> EmbeddingVector {
        EmbeddingVector {
            values: self.matrix.row(i).to_vec(),
            modality: self.modality,
            passage_id: self.passage_ids[i].clone(),
        }
    }

    /// Errors unless the index was built by the checkpoint with `fingerprint`.
    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<()> {
        if self.fingerprint != fingerprint {
            return Err(Error::Fingerprint {
                index: self.fingerprint.clone(),
                checkpoint: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, d) = self.matrix.dim();
        let mut out = Vec::with_capacity(12 + n * d * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.matrix.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut put_str = |s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        for id in &self.passage_ids {
            put_str(id);
        }
        put_str(&self.fingerprint);
        out.push(match self.modality {
            Modality::Sheet => 0,
            Modality::Audio => 1,
        });
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("index: {m}"));
        if bytes.len() < 12 || &bytes[..4] != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = read_u32(bytes, 4) as usize;
        let d = read_u32(bytes, 8) as usize;
        let mut at = 12;
        let need = n.checked_mul(d).and_then(|v| v.checked_mul(4)).ok_or_else(|| bad("size overflow"))?;
        if bytes.len() < at + need {
            return Err(bad("truncated rows"));
        }
        let rows = crate::container::read_f32s(&bytes[at..at + need]);
        at += need;
        let get_str = |at: &mut usize| -> Result<String> {
            if bytes.len() < *at + 4 {
                return Err(bad("truncated id table"));
            }
            let len = read_u32(bytes, *at) as usize;
            *at += 4;
            if bytes.len() < *at + len {
                return Err(bad("truncated id table"));
            }
            let s = std::str::from_utf8(&bytes[*at..*at + len]).map_err(|_| bad("id is not UTF-8"))?;
            *at += len;
            Ok(s.to_string())
        };
        let ids = (0..n).map(|_| get_str(&mut at)).collect::<Result<Vec<_>>>()?;
        let fingerprint = get_str(&mut at)?;
        let modality = match bytes.get(at) {
            Some(0) => Modality::Sheet,
            Some(1) => Modality::Audio,
            _ => return Err(bad("missing or unknown modality tag")),
        };
        if at + 1 != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::new(modality, ids, Array2::from_shape_vec((n, d), rows).unwrap(), fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One candidate in a ranked list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    /// Cosine distance for nearest-neighbour search; the summed hit
    /// distance for voting.
    pub distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub direction: Direction,
    pub entries: Vec<RankedEntry>,
    /// 1-based rank of the candidate sharing the query's id.
    pub true_rank: Option<usize>,
}

impl RankedList {
    fn finish(query_id: &str, direction: Direction, entries: Vec<RankedEntry>) -> Self {
        let true_rank = entries.iter().position(|e| e.passage_id == query_id).map(|p| p + 1);
        Self {
            query_id: query_id.to_string(),
            direction,
            entries,
            true_rank,
        }
    }
}

fn by_distance_then_id(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    a.distance.total_cmp(&b.distance).then_with(|| a.passage_id.cmp(&b.passage_id))
}

/// Cosine distances from unit query rows to unit candidate rows.
fn distances(q: &Array2<f64>, c: &Array2<f64>) -> Array2<f64> {
    q.dot(&c.t()).mapv(|s| 1.0 - s.clamp(-1.0, 1.0))
}

/// Ranks every index row by cosine distance to `q`.
pub fn query(index: &EmbeddingIndex, q: &EmbeddingVector) -> Result<RankedList> {
    if q.values.len() != index.dim() {
        return Err(argument(format!(
            "query has {} dimensions, index has {}",
            q.values.len(),
            index.dim()
        )));
    }
    if q.modality == index.modality {
        return Err(argument("query and index must be of different modalities"));
    }
    let qm = Array2::from_shape_vec((1, q.values.len()), q.values.clone()).unwrap();
    let d = distances(&unit_rows(&qm), &unit_rows(&index.matrix));
    Ok(rank_row(d.row(0), &index.passage_ids, &q.passage_id, Direction::from_query(q.modality)))
}

fn rank_row(d: ArrayView1<'_, f64>, ids: &[String], query_id: &str, direction: Direction) -> RankedList {
    let mut entries: Vec<RankedEntry> = ids
        .iter()
        .zip(d.iter())
        .map(|(id, dist)| RankedEntry {
            passage_id: id.clone(),
            distance: *dist,
            votes: None,
        })
        .collect();
    entries.sort_by(by_distance_then_id);
    RankedList::finish(query_id, direction, entries)
}

/// Ranks all candidates for every query row; both sides must cover the
/// same passage ids.
pub fn retrieve_all(queries: &EmbeddingIndex, candidates: &EmbeddingIndex) -> Result<Vec<RankedList>> {
    if queries.dim() != candidates.dim() {
        return Err(argument("query and candidate dimensions differ"));
    }
    if queries.modality == candidates.modality {
        return Err(argument("query and candidate indices share a modality"));
    }
    let qs: BTreeSet<&String> = queries.passage_ids.iter().collect();
    let cs: BTreeSet<&String> = candidates.passage_ids.iter().collect();
    if qs != cs {
        return Err(argument("query and candidate indices cover different passages"));
    }
    let d = distances(&unit_rows(&queries.matrix), &unit_rows(&candidates.matrix));
    let direction = Direction::from_query(queries.modality);
    Ok(parallel::map_range(queries.len(), |i| {
        rank_row(d.row(i), &candidates.passage_ids, &queries.passage_ids[i], direction)
    }))
}

/// 1-based rank of row `i` of `c` for query row `i` of `q`, with the
/// same tie-breaking as [`query`] given the ids.
pub fn diagonal_ranks(q: &Array2<f32>, c: &Array2<f32>, ids: &[String]) -> Vec<usize> {
    let d = distances(&unit_rows(q), &unit_rows(c));
    (0..q.nrows())
        .map(|i| {
            let own = d[[i, i]];
            1 + (0..c.nrows())
                .filter(|&j| {
                    j != i && (d[[i, j]] < own || (d[[i, j]] == own && ids[j] < ids[i]))
                })
                .count()
        })
        .collect()
}

/// Snippet embeddings of candidate passages for voting.
#[derive(Debug, Clone)]
pub struct SnippetBank {
    pub modality: Modality,
    pub passage_ids: Vec<String>,
    owners: Vec<usize>,
    unit: Array2<f64>,
}

impl SnippetBank {
    /// `embeddings[p]` holds the snippet embeddings of passage `p`.
    pub fn new(modality: Modality, passage_ids: Vec<String>, embeddings: &[Array2<f32>]) -> Result<Self> {
        if passage_ids.is_empty() || passage_ids.len() != embeddings.len() {
            return Err(argument("snippet bank needs one embedding block per passage"));
        }
        let d = embeddings[0].ncols();
        if embeddings.iter().any(|e| e.ncols() != d || e.nrows() == 0) {
            return Err(argument("snippet embeddings must be non-empty with a common width"));
        }
        let views: Vec<_> = embeddings.iter().map(|e| e.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views).unwrap();
        let owners = embeddings
            .iter()
            .enumerate()
            .flat_map(|(p, e)| std::iter::repeat_n(p, e.nrows()))
            .collect();
        Ok(Self {
            modality,
            passage_ids,
            owners,
            unit: unit_rows(&all),
        })
    }

    /// Slices and embeds candidate passages with a snippet model.
    pub fn build(model: &SnippetModel<f32>, passages: &[PassageRef<'_>], hops: &HopConfig) -> Result<Self> {
        let first = passages.first().ok_or_else(|| argument("no candidate passages"))?;
        let modality = first.modality();
        let embs = passages
            .iter()
            .map(|p| embed_passage_snippets(model, *p, hops))
            .collect::<Result<Vec<_>>>()?;
        Self::new(modality, passages.iter().map(|p| p.passage_id().to_string()).collect(), &embs)
    }

    pub fn snippet_count(&self) -> usize {
        self.owners.len()
    }
}

/// Embeds every snippet of a passage with the snippet model.
pub fn embed_passage_snippets(model: &SnippetModel<f32>, p: PassageRef<'_>, hops: &HopConfig) -> Result<Array2<f32>> {
    let seq = slice_passage(p, hops.for_modality(p.modality()))?;
    model.embed_snippets(p.modality(), &seq.snippets)
}

/// Votes for candidate passages: each query snippet's `top_k` nearest
/// bank snippets vote for their passages. Order: votes descending, summed
/// hit distance ascending, passage id.
pub fn vote(query_snippets: &Array2<f32>, query_id: &str, query_modality: Modality, bank: &SnippetBank, top_k: usize) -> Result<RankedList> {
    if top_k == 0 {
        return Err(argument("top_k must be positive"));
    }
    if query_modality == bank.modality {
        return Err(argument("query and candidate snippets share a modality"));
    }
    if query_snippets.nrows() == 0 || query_snippets.ncols() != bank.unit.ncols() {
        return Err(argument("query snippet embeddings do not match the bank"));
    }
    let d = distances(&unit_rows(query_snippets), &bank.unit);
    let n = bank.passage_ids.len();
    let mut votes = vec![0u32; n];
    let mut sums = vec![0f64; n];
    let mut order: Vec<usize> = (0..bank.snippet_count()).collect();
    for row in d.rows() {
        let key = |j: &usize| (row[*j], &bank.passage_ids[bank.owners[*j]], *j);
        order.sort_by(|a, b| {
            let (da, ia, ja) = key(a);
            let (db, ib, jb) = key(b);
            da.total_cmp(&db).then_with(|| ia.cmp(ib)).then(ja.cmp(&jb))
        });
        for &j in order.iter().take(top_k) {
            votes[bank.owners[j]] += 1;
            sums[bank.owners[j]] += row[j];
        }
    }
    let mut entries: Vec<RankedEntry> = (0..n)
        .map(|p| RankedEntry {
            passage_id: bank.passage_ids[p].clone(),
            distance: sums[p],
            votes: Some(votes[p]),
        })
        .collect();
    entries.sort_by(|a, b| b.votes.cmp(&a.votes).then_with(|| by_distance_then_id(a, b)));
    Ok(RankedList::finish(query_id, Direction::from_query(query_modality), entries))
}

/// Snippet-voting retrieval of one query passage.
pub fn baseline_retrieve(
    model: &SnippetModel<f32>,
    query: PassageRef<'_>,
    bank: &SnippetBank,
    hops: &HopConfig,
    top_k: usize,
) -> Result<RankedList> {
    let q = embed_passage_snippets(model, query, hops)?;
    vote(&q, query.passage_id(), query.modality(), bank, top_k)
}

/// Compact per-query record written to `ranks.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanks {
    pub query_id: String,
    pub true_rank: Option<usize>,
    pub top10: Vec<RankedEntry>,
}

/// Retrieval output for one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RanksFile {
    pub direction: Direction,
    pub dataset: String,
    pub variant: String,
    pub n_candidates: usize,
    pub fingerprints: Vec<String>,
    pub queries: Vec<QueryRanks>,
}

impl RanksFile {
    pub fn from_lists(lists: &[RankedList], dataset: &str, variant: &str, fingerprints: Vec<String>) -> Result<Self> {
        let first = lists.first().ok_or_else(|| argument("no ranked lists"))?;
        let n = first.entries.len();
        if lists.iter().any(|l| l.entries.len() != n || l.direction != first.direction) {
            return Err(argument("ranked lists differ in candidate count or direction"));
        }
        Ok(Self {
            direction: first.direction,
            dataset: dataset.to_string(),
            variant: variant.to_string(),
            n_candidates: n,
            fingerprints,
            queries: lists
                .iter()
                .map(|l| QueryRanks {
                    query_id: l.query_id.clone(),
                    true_rank: l.true_rank,
                    top10: l.entries.iter().take(10).cloned().collect(),
                })
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Vote totals per passage, for inspection.
pub fn vote_counts(list: &RankedList) -> BTreeMap<String, u32> {
    list.entries
        .iter()
        .map(|e| (e.passage_id.clone(), e.votes.unwrap_or(0)))
        .collect()
}
