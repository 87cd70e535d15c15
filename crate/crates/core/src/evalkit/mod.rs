//! Two-task evaluation: image retrieval (pages, each counted once) and pattern
//! spotting (boxes, IoU strictly above the threshold), scored by mean average
//! precision.

pub mod reference;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::spotting::{DetectionLine, PageLine, RunResults};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Categories in the first (and last) this many ranks form the Top (Worst) tier.
pub const TIER_SPAN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub page_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub query_id: String,
    pub category: String,
    pub instances: Vec<Instance>,
    /// Query `[w, h]`; falls back to the run's box size when absent.
    #[serde(default)]
    pub query_size: Option<[u32; 2]>,
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruthEntry>> {
    let file = std::fs::File::open(path).map_err(|_| Error::MissingAsset(path.to_path_buf()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: GroundTruthEntry = serde_json::from_str(&line)?;
        if entry.instances.is_empty() {
            return Err(Error::InvalidInput(format!("query {} has no instances", entry.query_id)));
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Relevance flag per ranked detection.
///
/// In rank order, a detection is a true positive when some not-yet-matched
/// instance on the same page overlaps it with IoU strictly greater than
/// `iou_thresh`; it then claims the best-overlapping such instance.
pub fn match_detections<'a>(
    detections: impl IntoIterator<Item = (&'a str, BBox)>,
    instances: &[Instance],
    iou_thresh: f64,
) -> Vec<bool> {
    let mut taken = vec![false; instances.len()];
    detections
        .into_iter()
        .map(|(page, bbox)| {
            let mut best: Option<(usize, f64)> = None;
            for (n, inst) in instances.iter().enumerate() {
                if taken[n] || inst.page_id != page {
                    continue;
                }
                let o = iou(&bbox, &inst.bbox);
                if o > iou_thresh && best.map_or(true, |(_, b)| o > b) {
                    best = Some((n, o));
                }
            }
            match best {
                Some((n, _)) => {
                    taken[n] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Non-interpolated average precision: mean over the `num_relevant` items of
/// the precision at each true-positive rank; unretrieved items contribute 0.
pub fn average_precision(flags: &[bool], num_relevant: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(Error::ZeroRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (n, &relevant) in flags.iter().enumerate() {
        if relevant {
            hits += 1;
            sum += hits as f64 / (n + 1) as f64;
        }
    }
    Ok(sum / num_relevant as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Top,
    Medium,
    Worst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEval {
    pub query_id: String,
    pub category: String,
    pub ap_retrieval: f64,
    pub ap_spotting: f64,
    /// Natural log of the query area `w * h`.
    pub log_size: Option<f64>,
    pub in_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: String,
    pub queries: usize,
    pub map_retrieval: f64,
    pub map_spotting: f64,
    /// 1-based rank by spotting mAP.
    pub rank: usize,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub map_retrieval: f64,
    pub map_spotting: f64,
    pub queries: Vec<QueryEval>,
    pub categories: Vec<CategoryEval>,
}

fn tier_for(rank: usize, n: usize) -> Tier {
    if rank <= TIER_SPAN {
        Tier::Top
    } else if rank + TIER_SPAN > n {
        Tier::Worst
    } else {
        Tier::Medium
    }
}

fn page_ranking<'a>(pages: Option<&'a Vec<PageLine>>, detections: Option<&'a Vec<DetectionLine>>) -> Vec<&'a str> {
    match pages {
        Some(p) if !p.is_empty() => p.iter().map(|l| l.page_id.as_str()).collect(),
        _ => detections
            .map(|d| d.iter().map(|l| l.page_id.as_str()).collect())
            .unwrap_or_default(),
    }
}

/// Scores a run against ground truth. Queries missing from the run score 0.
/// When `known_pages` is given, any page outside it is rejected.
pub fn evaluate(
    run: &RunResults,
    ground_truth: &[GroundTruthEntry],
    known_pages: Option<&HashSet<String>>,
    iou_thresh: f64,
) -> Result<EvalReport> {
    let gt_ids: HashSet<&str> = ground_truth.iter().map(|g| g.query_id.as_str()).collect();
    if let Some(unknown) = run.query_ids().find(|q| !gt_ids.contains(q.as_str())) {
        return Err(Error::UnknownQueryId(unknown.clone()));
    }
    if let Some(known) = known_pages {
        let mentioned = run
            .detections
            .values()
            .flatten()
            .map(|d| &d.page_id)
            .chain(run.pages.values().flatten().map(|p| &p.page_id))
            .chain(ground_truth.iter().flat_map(|g| g.instances.iter().map(|i| &i.page_id)));
        for page in mentioned {
            if !known.contains(page) {
                return Err(Error::UnknownPageId(page.clone()));
            }
        }
    }

    let mut queries = Vec::with_capacity(ground_truth.len());
    for gt in ground_truth {
        let dets = run.detections.get(&gt.query_id);
        let in_run = dets.is_some() || run.pages.contains_key(&gt.query_id);

        let spot_flags = match dets {
            Some(d) => match_detections(d.iter().map(|l| (l.page_id.as_str(), l.bbox)), &gt.instances, iou_thresh),
            None => Vec::new(),
        };
        let ap_spotting = average_precision(&spot_flags, gt.instances.len())?;

        let relevant_pages: HashSet<&str> = gt.instances.iter().map(|i| i.page_id.as_str()).collect();
        let mut counted: HashSet<&str> = HashSet::new();
        let page_flags: Vec<bool> = page_ranking(run.pages.get(&gt.query_id), dets)
            .into_iter()
            .map(|p| relevant_pages.contains(p) && counted.insert(p))
            .collect();
        let ap_retrieval = average_precision(&page_flags, relevant_pages.len())?;

        let size = gt
            .query_size
            .map(|[w, h]| (w as i64, h as i64))
            .or_else(|| dets.and_then(|d| d.first()).map(|l| (l.bbox.w, l.bbox.h)));
        queries.push(QueryEval {
            query_id: gt.query_id.clone(),
            category: gt.category.clone(),
            ap_retrieval,
            ap_spotting,
            log_size: size.filter(|&(w, h)| w > 0 && h > 0).map(|(w, h)| ((w * h) as f64).ln()),
            in_run,
        });
    }

    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let mut by_category: BTreeMap<&str, Vec<&QueryEval>> = BTreeMap::new();
    for q in &queries {
        by_category.entry(q.category.as_str()).or_default().push(q);
    }
    let mut categories: Vec<CategoryEval> = by_category
        .into_iter()
        .map(|(cat, qs)| CategoryEval {
            category: cat.to_string(),
            queries: qs.len(),
            map_retrieval: mean(&mut qs.iter().map(|q| q.ap_retrieval)),
            map_spotting: mean(&mut qs.iter().map(|q| q.ap_spotting)),
            rank: 0,
            tier: Tier::Medium,
        })
        .collect();
    categories.sort_by(|a, b| b.map_spotting.total_cmp(&a.map_spotting).then_with(|| a.category.cmp(&b.category)));
    let n = categories.len();
    for (pos, c) in categories.iter_mut().enumerate() {
        c.rank = pos + 1;
        c.tier = tier_for(pos + 1, n);
    }

    Ok(EvalReport {
        iou_threshold: iou_thresh,
        map_retrieval: mean(&mut queries.iter().map(|q| q.ap_retrieval)),
        map_spotting: mean(&mut queries.iter().map(|q| q.ap_spotting)),
        queries,
        categories,
    })
}

/// `query_id,category,tier,log_size,ap_spotting` rows for size-vs-AP plots.
pub fn write_size_csv<W: Write>(report: &EvalReport, out: W) -> Result<()> {
    let tiers: BTreeMap<&str, Tier> = report.categories.iter().map(|c| (c.category.as_str(), c.tier)).collect();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["query_id", "category", "tier", "log_size", "ap_spotting"])
        .map_err(csv_err)?;
    for q in &report.queries {
        let tier = match tiers.get(q.category.as_str()) {
            Some(Tier::Top) => "top",
            Some(Tier::Worst) => "worst",
            _ => "medium",
        };
        w.write_record([
            q.query_id.as_str(),
            q.category.as_str(),
            tier,
            &q.log_size.map(|v| format!("{v:.6}")).unwrap_or_default(),
            &format!("{:.6}", q.ap_spotting),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
