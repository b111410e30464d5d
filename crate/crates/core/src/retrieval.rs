//! Exhaustive search over descriptor and code indexes, and mAP with the
//! Oxford junk protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::store::{check_code, BinaryCodeFile, GlobalDescriptorFile};

/// Items ordered best-first with a name tie-break.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: String,
    /// `(item name, score)`; cosine similarity or Hamming distance.
    pub items: Vec<(String, f64)>,
}

impl RankedList {
    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.items.iter().map(|(n, _)| n.as_str())
    }
}

pub fn hamming_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

fn cosine(a: &[f32], b: &[f64], b_norm: f64) -> f64 {
    let (mut dot, mut aa) = (0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let x = x as f64;
        dot += x * y;
        aa += x * x;
    }
    let denom = aa.sqrt() * b_norm;
    if denom > 0.0 {
        dot / denom
    } else {
        0.0
    }
}

fn rank(
    query: &str,
    mut items: Vec<(String, f64)>,
    descending: bool,
    top_k: Option<usize>,
) -> RankedList {
    items.sort_by(|a, b| {
        let by_score = if descending {
            b.1.total_cmp(&a.1)
        } else {
            a.1.total_cmp(&b.1)
        };
        by_score.then_with(|| a.0.cmp(&b.0))
    });
    if let Some(k) = top_k {
        items.truncate(k);
    }
    RankedList {
        query: query.to_owned(),
        items,
    }
}

/// Linear scan by cosine similarity, descending.
pub fn search_cosine(
    index: &GlobalDescriptorFile,
    query_name: &str,
    q: &[f64],
    top_k: Option<usize>,
) -> Result<RankedList> {
    if q.len() != index.dim() {
        return Err(Error::DimensionMismatch {
            expected: index.dim(),
            actual: q.len(),
        });
    }
    let q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let items = index
        .iter()
        .map(|(name, v)| (name.to_owned(), cosine(v, q, q_norm)))
        .collect();
    Ok(rank(query_name, items, true, top_k))
}

/// Linear scan by Hamming distance, ascending.
pub fn search_hamming(
    index: &BinaryCodeFile,
    query_name: &str,
    q: &[u64],
    top_k: Option<usize>,
) -> Result<RankedList> {
    check_code(index.bits(), q)?;
    let items = index
        .iter()
        .map(|(name, c)| (name.to_owned(), hamming_distance(c, q) as f64))
        .collect();
    Ok(rank(query_name, items, false, top_k))
}

/// Ground truth of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTruth {
    pub name: String,
    /// Image named on the query line, with any `oxc1_`/`paris_`-style
    /// dataset prefix kept as written.
    pub image: String,
    /// `(x1, y1, x2, y2)`; consumed only when cropping the query image.
    pub bbox: Option<[f64; 4]>,
    /// good ∪ ok
    pub positives: BTreeSet<String>,
    pub junk: BTreeSet<String>,
}

impl QueryTruth {
    pub fn new(
        name: impl Into<String>,
        positives: impl IntoIterator<Item = impl Into<String>>,
        junk: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self> {
        let name = name.into();
        let q = Self {
            image: name.clone(),
            name,
            bbox: None,
            positives: positives.into_iter().map(Into::into).collect(),
            junk: junk.into_iter().map(Into::into).collect(),
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::GroundTruth(format!(
                "query {} has no positives",
                self.name
            )));
        }
        if let Some(both) = self.positives.intersection(&self.junk).next() {
            return Err(Error::GroundTruth(format!(
                "query {}: {both} is listed as both positive and junk",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    queries: BTreeMap<String, QueryTruth>,
}

impl GroundTruth {
    pub fn new(queries: impl IntoIterator<Item = QueryTruth>) -> Result<Self> {
        let mut gt = Self::default();
        for q in queries {
            q.validate()?;
            if gt.queries.contains_key(&q.name) {
                return Err(Error::GroundTruth(format!("duplicate query {}", q.name)));
            }
            gt.queries.insert(q.name.clone(), q);
        }
        Ok(gt)
    }

    pub fn get(&self, name: &str) -> Option<&QueryTruth> {
        self.queries.get(name)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Queries in name order.
    pub fn queries(&self) -> impl Iterator<Item = &QueryTruth> + '_ {
        self.queries.values()
    }
}

fn read_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::GroundTruth(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

/// Reads every `<q>_query.txt` in `dir` together with its `<q>_good.txt`,
/// `<q>_ok.txt` and `<q>_junk.txt`.
pub fn parse_oxford_gt(dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let dir = dir.as_ref();
    let mut names = Vec::new();
    for entry in fs::read_dir(dir)
        .map_err(|e| Error::GroundTruth(format!("cannot list {}: {e}", dir.display())))?
    {
        let file = entry?.file_name();
        if let Some(q) = file.to_str().and_then(|f| f.strip_suffix("_query.txt")) {
            names.push(q.to_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::GroundTruth(format!(
            "no *_query.txt files in {}",
            dir.display()
        )));
    }
    let mut queries = Vec::with_capacity(names.len());
    for name in names {
        let line = fs::read_to_string(dir.join(format!("{name}_query.txt")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let (image, bbox) = match fields.as_slice() {
            [image, coords @ ..] if coords.len() == 4 => {
                let mut bbox = [0.0; 4];
                for (b, c) in bbox.iter_mut().zip(coords) {
                    *b = c.parse().map_err(|_| {
                        Error::GroundTruth(format!("query {name}: bad bbox value {c:?}"))
                    })?;
                }
                (image.to_string(), bbox)
            }
            _ => {
                return Err(Error::GroundTruth(format!(
                    "query {name}: expected 'image x1 y1 x2 y2', got {:?}",
                    line.trim()
                )))
            }
        };
        let mut positives = read_list(&dir.join(format!("{name}_good.txt")))?;
        positives.extend(read_list(&dir.join(format!("{name}_ok.txt")))?);
        let junk = read_list(&dir.join(format!("{name}_junk.txt")))?;
        queries.push(QueryTruth {
            name,
            image,
            bbox: Some(bbox),
            positives,
            junk,
        });
    }
    GroundTruth::new(queries)
}

/// Trapezoidal average precision after deleting junk items from the ranking.
pub fn average_precision<'a>(
    ranked: impl IntoIterator<Item = &'a str>,
    truth: &QueryTruth,
) -> Result<f64> {
    if truth.positives.is_empty() {
        return Err(Error::GroundTruth(format!(
            "query {} has no positives",
            truth.name
        )));
    }
    let total = truth.positives.len() as f64;
    let (mut ap, mut hits, mut rank) = (0.0, 0usize, 0usize);
    let (mut prev_recall, mut prev_precision) = (0.0, 1.0);
    for item in ranked {
        if truth.junk.contains(item) {
            continue;
        }
        rank += 1;
        if truth.positives.contains(item) {
            hits += 1;
        }
        let recall = hits as f64 / total;
        let precision = hits as f64 / rank as f64;
        ap += (recall - prev_recall) * (precision + prev_precision) / 2.0;
        prev_recall = recall;
        prev_precision = precision;
    }
    Ok(ap)
}

/// Per-query AP (in input order) and their unweighted mean.
pub fn mean_ap(lists: &[RankedList], gt: &GroundTruth) -> Result<(Vec<(String, f64)>, f64)> {
    if lists.is_empty() {
        return Err(Error::Empty("no ranked lists to evaluate".into()));
    }
    let mut per_query = Vec::with_capacity(lists.len());
    for list in lists {
        let truth = gt.get(&list.query).ok_or_else(|| {
            Error::GroundTruth(format!("query {} is not in the ground truth", list.query))
        })?;
        per_query.push((list.query.clone(), average_precision(list.names(), truth)?));
    }
    let map = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64;
    Ok((per_query, map))
}
