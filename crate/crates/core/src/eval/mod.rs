//! Detection-to-object matching, sensitivity, overlap by rater agreement and
//! the size comparison between found and missed objects.

mod ranksum;

pub use ranksum::{midranks, wilcoxon_ranksum, wilcoxon_ranksum_with, PValueMethod, RankSum, RankSumConfig};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::io::write_json;
use crate::types::{distance_mm, mean_spacing, overlap_ratios, Detection, EsoClass, EsoObject};

/// Objects with at least this many voxels count as "large" in the report.
pub const LARGE_OBJECT_VOXELS: usize = 10;
/// Floor of the centre-distance gate, in millimetres.
pub const MIN_MATCH_DISTANCE_MM: f64 = 2.0;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    /// Every rater voted the same class.
    Unanimous,
    /// At least one rater voted "Nothing".
    AnyNothing,
    Other,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Unanimous, Stratum::AnyNothing, Stratum::Other];

    pub fn of(o: &EsoObject) -> Stratum {
        if !o.rater_votes.is_empty() && o.agreement_level() == o.rater_votes.len() {
            Stratum::Unanimous
        } else if o.rater_votes.contains(&EsoClass::Nothing) {
            Stratum::AnyNothing
        } else {
            Stratum::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Unanimous => "unanimous",
            Stratum::AnyNothing => "any_nothing",
            Stratum::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub gt_id: u32,
    pub matched: bool,
    pub best_detection: Option<usize>,
    pub coverage_of_pred: f64,
    pub coverage_of_gt: f64,
    pub gt_scale: f64,
    pub n_voxels: usize,
    pub agreement_level: usize,
    pub stratum: Stratum,
}

/// For every object, the best detection among those whose centre lies within
/// `max(2 mm, scale · mean spacing)` of the object centre and whose box
/// covers part of it: highest coverage of the object, ties to the higher
/// score, then to the lower index. One detection may match several objects.
pub fn match_detections(dets: &[Detection], gts: &[EsoObject], spacing_mm: [f64; 3]) -> Result<Vec<MatchResult>> {
    let ms = mean_spacing(spacing_mm);
    gts.iter()
        .map(|o| {
            let gate = (o.scale * ms).max(MIN_MATCH_DISTANCE_MM);
            let mut best: Option<(usize, f64, f64, f64)> = None;
            for (i, d) in dets.iter().enumerate() {
                if distance_mm(d.bbox.centre_mm, o.centre_mm) > gate {
                    continue;
                }
                let (cp, cg) = overlap_ratios(&d.bbox, o, spacing_mm)?;
                if cg <= 0.0 {
                    continue;
                }
                let score = d.proposal.score;
                let better = match best {
                    None => true,
                    Some((_, bcg, _, bs)) => cg > bcg || (cg == bcg && score > bs),
                };
                if better {
                    best = Some((i, cg, cp, score));
                }
            }
            Ok(MatchResult {
                gt_id: o.id,
                matched: best.is_some(),
                best_detection: best.map(|b| b.0),
                coverage_of_pred: best.map_or(0.0, |b| b.2),
                coverage_of_gt: best.map_or(0.0, |b| b.1),
                gt_scale: o.scale,
                n_voxels: o.voxels.len(),
                agreement_level: o.agreement_level(),
                stratum: Stratum::of(o),
            })
        })
        .collect()
}

/// Matches of one case plus its detection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMatches {
    pub case: String,
    pub matches: Vec<MatchResult>,
    pub n_detections: usize,
    /// Detections that are the best match of no object.
    pub unmatched_detections: usize,
}

pub fn evaluate_case(case: &str, dets: &[Detection], gts: &[EsoObject], spacing_mm: [f64; 3]) -> Result<CaseMatches> {
    let matches = match_detections(dets, gts, spacing_mm)?;
    let mut used = vec![false; dets.len()];
    for m in &matches {
        if let Some(i) = m.best_detection {
            used[i] = true;
        }
    }
    Ok(CaseMatches {
        case: case.to_string(),
        n_detections: dets.len(),
        unmatched_detections: used.iter().filter(|&&u| !u).count(),
        matches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: Stratum,
    pub count: usize,
    pub matched: usize,
    /// Median over matched members; `None` when there are none.
    pub median_coverage_of_pred: Option<f64>,
    pub median_coverage_of_gt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeComparison {
    pub matched_count: usize,
    pub missed_count: usize,
    pub median_scale_matched: Option<f64>,
    pub median_scale_missed: Option<f64>,
    /// `None` unless both groups are non-empty.
    pub test: Option<RankSum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_cases: usize,
    pub n_gt: usize,
    pub n_matched: usize,
    /// `None` when there are no objects.
    pub sensitivity: Option<f64>,
    /// Sensitivity over objects of at least [`LARGE_OBJECT_VOXELS`] voxels.
    pub sensitivity_large: Option<f64>,
    pub sensitivity_small: Option<f64>,
    pub n_detections: usize,
    pub unmatched_detections: usize,
    pub strata: Vec<StratumSummary>,
    pub size_comparison: SizeComparison,
    pub cases: Vec<CaseMatches>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn build_report(cases: &[CaseMatches], cfg: &RankSumConfig) -> Result<EvalReport> {
    let all: Vec<&MatchResult> = cases.iter().flat_map(|c| &c.matches).collect();
    let n_matched = all.iter().filter(|m| m.matched).count();
    let count_where = |f: &dyn Fn(&MatchResult) -> bool| -> (usize, usize) {
        let sel: Vec<_> = all.iter().filter(|m| f(m)).collect();
        (sel.iter().filter(|m| m.matched).count(), sel.len())
    };
    let (ml, nl) = count_where(&|m| m.n_voxels >= LARGE_OBJECT_VOXELS);
    let (msm, nsm) = count_where(&|m| m.n_voxels < LARGE_OBJECT_VOXELS);

    let strata = Stratum::ALL
        .iter()
        .map(|&s| {
            let members: Vec<_> = all.iter().filter(|m| m.stratum == s).collect();
            let hit: Vec<_> = members.iter().filter(|m| m.matched).collect();
            StratumSummary {
                stratum: s,
                count: members.len(),
                matched: hit.len(),
                median_coverage_of_pred: median(&hit.iter().map(|m| m.coverage_of_pred).collect::<Vec<_>>()),
                median_coverage_of_gt: median(&hit.iter().map(|m| m.coverage_of_gt).collect::<Vec<_>>()),
            }
        })
        .collect();

    let found: Vec<f64> = all.iter().filter(|m| m.matched).map(|m| m.gt_scale).collect();
    let missed: Vec<f64> = all.iter().filter(|m| !m.matched).map(|m| m.gt_scale).collect();
    let test = if found.is_empty() || missed.is_empty() {
        None
    } else {
        Some(wilcoxon_ranksum_with(&found, &missed, cfg)?)
    };

    Ok(EvalReport {
        n_cases: cases.len(),
        n_gt: all.len(),
        n_matched,
        sensitivity: ratio(n_matched, all.len()),
        sensitivity_large: ratio(ml, nl),
        sensitivity_small: ratio(msm, nsm),
        n_detections: cases.iter().map(|c| c.n_detections).sum(),
        unmatched_detections: cases.iter().map(|c| c.unmatched_detections).sum(),
        strata,
        size_comparison: SizeComparison {
            matched_count: found.len(),
            missed_count: missed.len(),
            median_scale_matched: median(&found),
            median_scale_missed: median(&missed),
            test,
        },
        cases: cases.to_vec(),
    })
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "case,gt_id,matched,best_detection,coverage_of_pred,coverage_of_gt,gt_scale,n_voxels,agreement_level,stratum";

    /// One row per ground-truth object.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.cases {
            for m in &c.matches {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{}",
                    c.case,
                    m.gt_id,
                    m.matched,
                    m.best_detection.map(|i| i.to_string()).unwrap_or_default(),
                    m.coverage_of_pred,
                    m.coverage_of_gt,
                    m.gt_scale,
                    m.n_voxels,
                    m.agreement_level,
                    m.stratum.as_str()
                );
            }
        }
        s
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(REPORT_JSON), self)?;
        let csv = dir.join(REPORT_CSV);
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
