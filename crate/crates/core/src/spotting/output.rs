use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::SpotResult;
use crate::error::Result;
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub query_id: String,
    pub rank: usize,
    pub page_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageLine {
    pub query_id: String,
    pub rank: usize,
    pub page_id: String,
    pub score: f64,
}

/// One line of a run file; detection lines carry a box, page lines do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunLine {
    Detection(DetectionLine),
    Page(PageLine),
}

/// Writes detection lines followed by page-ranking lines.
pub fn write_run<W: Write>(result: &SpotResult, mut out: W) -> Result<()> {
    for d in &result.detections {
        let line = DetectionLine {
            query_id: result.query_id.clone(),
            rank: d.rank,
            page_id: d.page_id.clone(),
            bbox: d.bbox,
            score: d.score,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    for p in &result.pages {
        let line = PageLine {
            query_id: result.query_id.clone(),
            rank: p.rank,
            page_id: p.page_id.clone(),
            score: p.score,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Per-query ranked lists parsed from a run file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunResults {
    pub detections: BTreeMap<String, Vec<DetectionLine>>,
    pub pages: BTreeMap<String, Vec<PageLine>>,
}

impl RunResults {
    pub fn push(&mut self, line: RunLine) {
        match line {
            RunLine::Detection(d) => self.detections.entry(d.query_id.clone()).or_default().push(d),
            RunLine::Page(p) => self.pages.entry(p.query_id.clone()).or_default().push(p),
        }
    }

    pub fn add_result(&mut self, result: &SpotResult) {
        let mut buf = Vec::new();
        write_run(result, &mut buf).expect("in-memory write");
        for line in buf.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            self.push(serde_json::from_slice(line).expect("round-trip of our own output"));
        }
    }

    /// Sorts every list by rank.
    pub fn normalize(&mut self) {
        for v in self.detections.values_mut() {
            v.sort_by_key(|d| d.rank);
        }
        for v in self.pages.values_mut() {
            v.sort_by_key(|p| p.rank);
        }
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        let mut ids: Vec<&String> = self.detections.keys().chain(self.pages.keys()).collect();
        ids.sort();
        ids.dedup();
        ids.into_iter()
    }
}

pub fn read_run<R: BufRead>(input: R) -> Result<RunResults> {
    let mut run = RunResults::default();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        run.push(serde_json::from_str(&line)?);
    }
    run.normalize();
    Ok(run)
}
