//! Retrieval scoring, linear-probe metrics and compute accounting.

mod probe;
mod profile;

pub use probe::{probe_metrics, train_linear_probe, LinearProbeConfig, ProbeTruth};
pub use profile::{
    c2c_ratio, instrumented_profile, profile, BreakdownRow, ComputeProfile, InstrumentedCount, FLOP_CONVENTION,
};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::model::{EmbeddingStrategy, Modality};
use crate::numerics::Tensor;

/// Set of class indices below 64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct LabelSet(pub u64);

impl LabelSet {
    pub fn from_indices(idx: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut bits = 0u64;
        for i in idx {
            if i >= 64 {
                return Err(Error::Input(format!("class index {i} exceeds the 64-class limit")));
            }
            bits |= 1 << i;
        }
        Ok(LabelSet(bits))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 >> i & 1 == 1
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn indices(self) -> impl Iterator<Item = usize> {
        (0..64).filter(move |&i| self.contains(i))
    }
}

/// Class codes sorted lexically; a code's position is its bit.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    pub codes: Vec<String>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Reads `id,labels` rows where `labels` joins class codes with `;`.
pub fn read_labels(path: &Path) -> Result<(Vocabulary, BTreeMap<String, LabelSet>)> {
    let fail = |m: String| Error::Data(format!("{}: {m}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| fail(e.to_string()))?;
    let header = rdr.headers().map_err(|e| fail(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["id", "labels"] {
        return Err(fail(format!("expected header id,labels, found {}", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut raw: Vec<(String, Vec<String>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| fail(format!("row {}: {e}", line + 2)))?;
        let codes: Vec<String> =
            rec[1].split(';').map(str::trim).filter(|c| !c.is_empty()).map(str::to_string).collect();
        if codes.is_empty() {
            return Err(fail(format!("row {}: {} has no labels", line + 2, &rec[0])));
        }
        raw.push((rec[0].to_string(), codes));
    }
    let mut codes: Vec<String> = raw.iter().flat_map(|(_, c)| c.iter().cloned()).collect();
    codes.sort();
    codes.dedup();
    if codes.len() > 64 {
        return Err(fail(format!("{} classes exceed the 64-class limit", codes.len())));
    }
    let mut out = BTreeMap::new();
    for (id, cs) in raw {
        let set = LabelSet::from_indices(cs.iter().map(|c| codes.binary_search(c).expect("collected above")))?;
        if out.insert(id.clone(), set).is_some() {
            return Err(fail(format!("duplicate id {id:?}")));
        }
    }
    Ok((Vocabulary { codes }, out))
}

/// Query/target modalities plus retrieval depth and embedding choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub query: Modality,
    pub target: Modality,
    pub k: usize,
    pub strategy: EmbeddingStrategy,
}

impl RetrievalTask {
    pub fn new(query: Modality, target: Modality, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("retrieval depth k must be at least 1".into()));
        }
        Ok(RetrievalTask { query, target, k, strategy: EmbeddingStrategy::default() })
    }

    pub fn is_cross_modal(&self) -> bool {
        self.query != self.target
    }
}

impl fmt::Display for RetrievalTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}→{}", self.query, self.target)
    }
}

/// Parses `"S1>S2"` or `"S1→S2"` into `(query, target)`.
pub fn parse_task(s: &str) -> Result<(Modality, Modality)> {
    let (q, r) = s
        .split_once('>')
        .or_else(|| s.split_once('→'))
        .ok_or_else(|| Error::Parameter(format!("task {s:?} is not of the form S1>S2")))?;
    Ok((Modality::from_str(q.trim())?, Modality::from_str(r.trim())?))
}

fn unit_rows(t: &Tensor, what: &str) -> Result<(usize, Vec<f64>)> {
    let (n, d) = t.dims2()?;
    let mut out = t.data().to_vec();
    for (i, row) in out.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Evaluation(format!(
                "{what} embedding {i} has norm {norm}; cosine similarity is undefined"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    debug_assert_eq!(out.len(), n * d);
    Ok((d, out))
}

/// Top-`k` gallery indices per query by cosine similarity, descending, ties
/// to the lower gallery index. With `exclude_self`, a gallery item whose id
/// equals the query id is never returned.
pub fn retrieve(
    queries: &Tensor,
    query_ids: &[String],
    gallery: &Tensor,
    gallery_ids: &[String],
    k: usize,
    exclude_self: bool,
) -> Result<Vec<Vec<usize>>> {
    let (nq, dq) = queries.dims2()?;
    let (ng, dg) = gallery.dims2()?;
    if dq != dg {
        return Err(dim_err!("query width {dq} differs from gallery width {dg}"));
    }
    if nq != query_ids.len() || ng != gallery_ids.len() {
        return Err(dim_err!("{nq} queries/{} ids, {ng} gallery rows/{} ids", query_ids.len(), gallery_ids.len()));
    }
    if ng == 0 {
        return Err(Error::Input("gallery is empty".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("retrieval depth k must be at least 1".into()));
    }
    let (d, q) = unit_rows(queries, "query")?;
    let (_, g) = unit_rows(gallery, "gallery")?;
    (0..nq)
        .into_par_iter()
        .map(|i| {
            let qi = &q[i * d..(i + 1) * d];
            let mut cand: Vec<(usize, f64)> = (0..ng)
                .filter(|&j| !(exclude_self && gallery_ids[j] == query_ids[i]))
                .map(|j| (j, qi.iter().zip(&g[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum()))
                .collect();
            if cand.len() < k {
                return Err(Error::Input(format!(
                    "query {} has {} candidates, fewer than k = {k}",
                    query_ids[i],
                    cand.len()
                )));
            }
            cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            Ok(cand[..k].iter().map(|c| c.0).collect())
        })
        .collect()
}

/// Mean over the top `k` retrieved items of the label-set F1 `2|A∩B|/(|A|+|B|)`.
pub fn retrieval_f1(query: LabelSet, retrieved: &[LabelSet], k: usize) -> Result<f64> {
    if k == 0 || k > retrieved.len() {
        return Err(Error::Parameter(format!("k = {k} outside 1..={}", retrieved.len())));
    }
    if query.is_empty() || retrieved[..k].iter().any(|r| r.is_empty()) {
        return Err(Error::Input("empty label set in retrieval scoring".into()));
    }
    let s: f64 =
        retrieved[..k].iter().map(|r| 2.0 * query.intersection(*r).len() as f64 / (query.len() + r.len()) as f64).sum();
    Ok(s / k as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: String,
    pub f1_percent: f64,
    pub n_queries: usize,
    pub k: usize,
}

/// Runs retrieval and scores it against the label table.
pub fn evaluate_retrieval(
    task: &RetrievalTask,
    queries: &Tensor,
    query_ids: &[String],
    gallery: &Tensor,
    gallery_ids: &[String],
    labels: &BTreeMap<String, LabelSet>,
) -> Result<RetrievalReport> {
    let lookup = |id: &String| labels.get(id).copied().ok_or_else(|| Error::Data(format!("no labels for id {id:?}")));
    let ranked = retrieve(queries, query_ids, gallery, gallery_ids, task.k, !task.is_cross_modal())?;
    let mut total = 0.0;
    for (qi, hits) in ranked.iter().enumerate() {
        let got = hits.iter().map(|&j| lookup(&gallery_ids[j])).collect::<Result<Vec<_>>>()?;
        total += retrieval_f1(lookup(&query_ids[qi])?, &got, task.k)?;
    }
    let n = ranked.len();
    Ok(RetrievalReport {
        task: task.to_string(),
        f1_percent: if n == 0 { 0.0 } else { 100.0 * total / n as f64 },
        n_queries: n,
        k: task.k,
    })
}
