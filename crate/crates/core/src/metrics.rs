//! Event-based affiliation metrics and plain pointwise diagnostics.
//!
//! Time is discrete. Each ground-truth event owns the zone of timesteps
//! closer to it than to any other event (ties go to the earlier event).
//! Inside a zone, a predicted point's distance to the event is compared with
//! that of a uniformly random point of the zone (precision), and each event
//! point's distance to the nearest prediction is compared with its distance
//! to a uniformly random point of the zone (recall). Scores are survival
//! probabilities, so an exact hit scores one.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::Error;
use crate::Result;

/// Maximal runs of ones as half-open intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLabels {
    pub labels: Vec<u8>,
    pub events: Vec<Range<usize>>,
}

impl EventLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels reconstructed from intervals over `[0, total)`.
    pub fn from_events(events: Vec<Range<usize>>, total: usize) -> Result<Self> {
        let mut labels = alloc::vec![0u8; total];
        for e in &events {
            if e.end > total {
                return Err(Error::OutOfBounds { needed: e.end, available: total });
            }
            labels[e.clone()].iter_mut().for_each(|v| *v = 1);
        }
        extract_events(&labels)
    }
}

pub fn extract_events(labels: &[u8]) -> Result<EventLabels> {
    if let Some(i) = labels.iter().position(|&v| v > 1) {
        return Err(Error::InvalidData(format!("label {} at index {i} is not 0 or 1", labels[i])));
    }
    let mut events = Vec::new();
    let mut start = None;
    for (t, &v) in labels.iter().enumerate() {
        match (v, start) {
            (1, None) => start = Some(t),
            (0, Some(s)) => {
                events.push(s..t);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        events.push(s..labels.len());
    }
    Ok(EventLabels { labels: labels.to_vec(), events })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffiliationReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when no predicted point falls anywhere (precision then reads 0).
    pub precision_defined: bool,
    /// False when there are no truth events (recall then reads 0).
    pub recall_defined: bool,
    /// Per truth event: zone precision (if the zone holds predictions) and recall.
    pub zone_precision: Vec<Option<f64>>,
    pub zone_recall: Vec<f64>,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn gap(t: usize, e: &Range<usize>) -> usize {
    if t < e.start {
        e.start - t
    } else if t >= e.end {
        t + 1 - e.end
    } else {
        0
    }
}

/// Zone boundaries `[z_0, z_1, ..., z_k]` partitioning `domain` among `events`.
fn zones(events: &[Range<usize>], domain: &Range<usize>) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(events.len() + 1);
    bounds.push(domain.start);
    for pair in events.windows(2) {
        // first t strictly nearer the right event: t - last > next - t
        let (last, next) = (pair[0].end - 1, pair[1].start);
        bounds.push((last + next) / 2 + 1);
    }
    bounds.push(domain.end);
    bounds
}

fn check_inputs(pred: &EventLabels, truth: &EventLabels, domain: &Range<usize>) -> Result<()> {
    if domain.start >= domain.end {
        return Err(Error::InvalidData(format!("empty evaluation domain {domain:?}")));
    }
    for e in pred.events.iter().chain(&truth.events) {
        if e.start < domain.start || e.end > domain.end || e.is_empty() {
            return Err(Error::OutOfBounds { needed: e.end, available: domain.end });
        }
    }
    Ok(())
}

/// Count of `x` in `zone` with `gap(x, event) >= d`.
fn event_survival(zone: &Range<usize>, event: &Range<usize>, d: usize) -> usize {
    if d == 0 {
        return zone.len();
    }
    let left = event.start - zone.start;
    let right = zone.end - event.end;
    (left + 1).saturating_sub(d) + (right + 1).saturating_sub(d)
}

/// Count of `y` in `zone` with `|x - y| >= d`.
fn point_survival(zone: &Range<usize>, x: usize, d: usize) -> usize {
    if d == 0 {
        return zone.len();
    }
    let below = if x >= zone.start + d { x - d + 1 - zone.start } else { 0 };
    let above = zone.end.saturating_sub(x + d);
    below + above
}

fn assemble(zone_precision: Vec<Option<f64>>, zone_recall: Vec<f64>) -> AffiliationReport {
    let defined: Vec<f64> = zone_precision.iter().flatten().copied().collect();
    let precision_defined = !defined.is_empty();
    let recall_defined = !zone_recall.is_empty();
    let precision = if precision_defined { defined.iter().sum::<f64>() / defined.len() as f64 } else { 0.0 };
    let recall = if recall_defined { zone_recall.iter().sum::<f64>() / zone_recall.len() as f64 } else { 0.0 };
    let f1 = if precision_defined && recall_defined { harmonic(precision, recall) } else { 0.0 };
    AffiliationReport { precision, recall, f1, precision_defined, recall_defined, zone_precision, zone_recall }
}

/// Affiliation precision, recall and F1 over `[0, total)`.
pub fn affiliation_metrics(pred: &EventLabels, truth: &EventLabels, total: usize) -> Result<AffiliationReport> {
    affiliation_metrics_in(pred, truth, 0..total)
}

/// As [`affiliation_metrics`] over an arbitrary timestep range.
pub fn affiliation_metrics_in(pred: &EventLabels, truth: &EventLabels, domain: Range<usize>) -> Result<AffiliationReport> {
    check_inputs(pred, truth, &domain)?;
    let bounds = zones(&truth.events, &domain);
    let points: Vec<usize> = pred.events.iter().flat_map(|e| e.clone()).collect();
    let mut zone_precision = Vec::with_capacity(truth.events.len());
    let mut zone_recall = Vec::with_capacity(truth.events.len());
    for (j, event) in truth.events.iter().enumerate() {
        let zone = bounds[j]..bounds[j + 1];
        let lo = points.partition_point(|&t| t < zone.start);
        let hi = points.partition_point(|&t| t < zone.end);
        let inside = &points[lo..hi];
        if inside.is_empty() {
            zone_precision.push(None);
            zone_recall.push(0.0);
            continue;
        }
        let size = zone.len() as f64;
        let p = inside.iter().map(|&y| event_survival(&zone, event, gap(y, event)) as f64 / size).sum::<f64>() / inside.len() as f64;
        let mut r = 0.0;
        for x in event.clone() {
            let k = inside.partition_point(|&y| y < x);
            let after = inside.get(k).map(|&y| y - x);
            let before = k.checked_sub(1).map(|i| x - inside[i]);
            let d = match (before, after) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("zone holds predictions"),
            };
            r += point_survival(&zone, x, d) as f64 / size;
        }
        zone_precision.push(Some(p));
        zone_recall.push(r / event.len() as f64);
    }
    Ok(assemble(zone_precision, zone_recall))
}

/// Direct-summation reference: every distance and survival count is
/// evaluated by scanning all timesteps of the zone.
pub fn affiliation_brute_force(pred: &EventLabels, truth: &EventLabels, domain: Range<usize>) -> Result<AffiliationReport> {
    check_inputs(pred, truth, &domain)?;
    let dist_to_set = |t: usize, set: &[usize]| set.iter().map(|&u| t.abs_diff(u)).min();
    let truth_sets: Vec<Vec<usize>> = truth.events.iter().map(|e| e.clone().collect()).collect();
    // owner of each timestep: nearest event, earliest on ties
    let owner = |t: usize| -> usize {
        let mut best = (usize::MAX, 0);
        for (j, set) in truth_sets.iter().enumerate() {
            let d = dist_to_set(t, set).unwrap_or(usize::MAX);
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    };
    let is_pred = |t: usize| pred.events.iter().any(|e| e.contains(&t));
    let mut zone_precision = Vec::new();
    let mut zone_recall = Vec::new();
    for (j, set) in truth_sets.iter().enumerate() {
        let zone: Vec<usize> = domain.clone().filter(|&t| owner(t) == j).collect();
        let preds: Vec<usize> = zone.iter().copied().filter(|&t| is_pred(t)).collect();
        if preds.is_empty() {
            zone_precision.push(None);
            zone_recall.push(0.0);
            continue;
        }
        let n = zone.len() as f64;
        let mut p = 0.0;
        for &y in &preds {
            let d = dist_to_set(y, set).unwrap();
            p += zone.iter().filter(|&&x| dist_to_set(x, set).unwrap() >= d).count() as f64 / n;
        }
        let mut r = 0.0;
        for &x in set {
            let d = dist_to_set(x, &preds).unwrap();
            r += zone.iter().filter(|&&y| x.abs_diff(y) >= d).count() as f64 / n;
        }
        zone_precision.push(Some(p / preds.len() as f64));
        zone_recall.push(r / set.len() as f64);
    }
    Ok(assemble(zone_precision, zone_recall))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Confusion-matrix precision, recall and F1 without point adjustment.
pub fn pointwise_metrics(pred: &[u8], truth: &[u8]) -> Result<PointwiseReport> {
    if pred.len() != truth.len() {
        return Err(crate::error::shape_err(&[truth.len()], &[pred.len()]));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    let (precision, recall) = (ratio(tp, fp), ratio(tp, fn_));
    Ok(PointwiseReport { precision, recall, f1: harmonic(precision, recall) })
}
