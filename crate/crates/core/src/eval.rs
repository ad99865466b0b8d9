//! Candidate matching, FROC analysis, bootstrap bands and patch stitching.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{nms, Box3};
use crate::data::{csv_io, NoduleAnnotation};
use crate::error::{Error, Result};
use crate::par;
use crate::rng::derive_seed;

/// False-positive rates per scan at which sensitivity is reported.
pub const FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub scan_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub probability: f64,
}

impl Candidate {
    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    TruePositive(usize),
    FalsePositive,
    /// Another hit on an already detected nodule.
    Ignored,
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Candidates in descending probability; ties keep the lower index first.
fn probability_order(probs: impl ExactSizeIterator<Item = f64>) -> Vec<usize> {
    let p: Vec<f64> = probs.collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    order
}

/// Tags each candidate (in input order) and flags detected nodules.
///
/// Candidates are visited by descending probability. A candidate hits a
/// nodule when it lies within the nodule's radius; it becomes the true
/// positive of the nearest hit nodule not yet detected. Hits on detected
/// nodules only are ignored, candidates hitting nothing are false positives.
pub fn match_candidates(candidates: &[Candidate], gts: &[NoduleAnnotation]) -> (Vec<Tag>, Vec<bool>) {
    let mut tags = vec![Tag::FalsePositive; candidates.len()];
    let mut detected = vec![false; gts.len()];
    for i in probability_order(candidates.iter().map(|c| c.probability)) {
        let c = candidates[i].center();
        let mut any_hit = false;
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let d = distance(c, gt.center());
            if d <= gt.diameter / 2.0 {
                any_hit = true;
                if !detected[g] && best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, g));
                }
            }
        }
        tags[i] = match best {
            Some((_, g)) => {
                detected[g] = true;
                Tag::TruePositive(g)
            }
            None if any_hit => Tag::Ignored,
            None => Tag::FalsePositive,
        };
    }
    (tags, detected)
}

/// Matched candidates of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub scan_id: String,
    pub n_gt: usize,
    /// `(probability, tag)` per candidate.
    pub entries: Vec<(f64, Tag)>,
}

impl ScanResult {
    pub fn new(scan_id: impl Into<String>, candidates: &[Candidate], gts: &[NoduleAnnotation]) -> Self {
        let (tags, _) = match_candidates(candidates, gts);
        ScanResult {
            scan_id: scan_id.into(),
            n_gt: gts.len(),
            entries: candidates.iter().map(|c| c.probability).zip(tags).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    /// `(fp_per_scan, sensitivity)` ascending, starting at the origin.
    pub points: Vec<(f64, f64)>,
    /// Sensitivity at each of [`FP_RATES`].
    pub sensitivities: [f64; 7],
    pub mean: f64,
}

pub fn mean_score(sensitivities: &[f64]) -> f64 {
    sensitivities.iter().sum::<f64>() / sensitivities.len() as f64
}

/// Linear interpolation on an ascending curve; constant beyond its ends.
pub fn interpolate(points: &[(f64, f64)], fp: f64) -> f64 {
    match points.iter().rposition(|&(x, _)| x <= fp) {
        None => points.first().map_or(0.0, |p| p.1),
        Some(i) if i + 1 == points.len() => points[i].1,
        Some(i) => {
            let ((x0, y0), (x1, y1)) = (points[i], points[i + 1]);
            y0 + (y1 - y0) * (fp - x0) / (x1 - x0)
        }
    }
}

/// Sweeps every distinct probability as a closed threshold (`p ≥ t` active).
pub fn froc(scans: &[ScanResult]) -> Result<FrocCurve> {
    if scans.is_empty() {
        return Err(Error::Invalid("FROC needs at least one scan".into()));
    }
    let total_gt: usize = scans.iter().map(|s| s.n_gt).sum();
    if total_gt == 0 {
        return Err(Error::Invalid("FROC needs at least one ground-truth nodule".into()));
    }
    let mut events: Vec<(f64, Tag)> = scans
        .iter()
        .flat_map(|s| s.entries.iter().copied())
        .filter(|(_, t)| *t != Tag::Ignored)
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_scans = scans.len() as f64;
    let mut points = vec![(0.0, 0.0)];
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            match events[i].1 {
                Tag::TruePositive(_) => tp += 1,
                _ => fp += 1,
            }
            i += 1;
        }
        points.push((fp as f64 / n_scans, tp as f64 / total_gt as f64));
    }
    let sensitivities = FP_RATES.map(|r| interpolate(&points, r));
    Ok(FrocCurve { points, mean: mean_score(&sensitivities), sensitivities })
}

/// Percentile interval per target rate over scan-level resamples drawn
/// with replacement. Resamples without any nodule are redrawn.
pub fn bootstrap_band(scans: &[ScanResult], n_resamples: usize, level: f64, seed: u64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0, 1)")));
    }
    froc(scans)?;
    let n = scans.len();
    let draws: Vec<[f64; 7]> = par::map_range(n_resamples, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
        loop {
            let sample: Vec<ScanResult> = (0..n).map(|_| scans[rng.random_range(0..n)].clone()).collect();
            if let Ok(c) = froc(&sample) {
                return c.sensitivities;
            }
        }
    });
    let tail = (1.0 - level) / 2.0;
    Ok((0..FP_RATES.len())
        .map(|k| {
            let mut v: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            v.sort_by(f64::total_cmp);
            (quantile(&v, tail), quantile(&v, 1.0 - tail))
        })
        .collect())
}

/// Linear interpolation between order statistics of sorted `v`.
fn quantile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Merges detections already in volume coordinates: centers clamped into
/// the volume, one global NMS pass, then the `top_k` most probable.
pub fn stitch_candidates(
    scan_id: &str,
    detections: &[(Box3, f64)],
    dims: [usize; 3],
    nms_thresh: f64,
    top_k: usize,
) -> Vec<Candidate> {
    let boxes: Vec<Box3> = detections
        .iter()
        .map(|(b, _)| Box3 {
            cx: b.cx.clamp(0.0, dims[0] as f64 - 1.0),
            cy: b.cy.clamp(0.0, dims[1] as f64 - 1.0),
            cz: b.cz.clamp(0.0, dims[2] as f64 - 1.0),
            r: b.r,
        })
        .collect();
    let probs: Vec<f64> = detections.iter().map(|d| d.1).collect();
    let mut kept = nms(&boxes, &probs, nms_thresh);
    kept.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    kept.truncate(top_k);
    kept.into_iter()
        .map(|i| Candidate { scan_id: scan_id.to_string(), x: boxes[i].cx, y: boxes[i].cy, z: boxes[i].cz, probability: probs[i] })
        .collect()
}

/// Groups candidates and annotations by scan. Scans listed only among
/// candidates count as nodule-free and are returned separately.
pub fn evaluate(candidates: &[Candidate], annotations: &[NoduleAnnotation]) -> (Vec<ScanResult>, Vec<String>) {
    let mut gts: BTreeMap<&str, Vec<NoduleAnnotation>> = BTreeMap::new();
    for a in annotations {
        gts.entry(&a.scan_id).or_default().push(a.clone());
    }
    let mut cands: BTreeMap<&str, Vec<Candidate>> = BTreeMap::new();
    for c in candidates {
        cands.entry(&c.scan_id).or_default().push(c.clone());
    }
    let unknown: Vec<String> = cands.keys().filter(|k| !gts.contains_key(*k)).map(|k| k.to_string()).collect();
    let mut ids: Vec<&str> = gts.keys().chain(cands.keys()).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    let results = par::map_range(ids.len(), |i| {
        let id = ids[i];
        let c = cands.get(id).map_or(&[][..], Vec::as_slice);
        let g = gts.get(id).map_or(&[][..], Vec::as_slice);
        ScanResult::new(id, c, g)
    });
    (results, unknown)
}

pub fn read_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let c: Candidate = row?;
        if !(c.probability > 0.0 && c.probability <= 1.0) {
            return Err(Error::Invalid(format!("{}: probability {} outside (0, 1]", c.scan_id, c.probability)));
        }
        out.push(c);
    }
    Ok(out)
}

pub fn write_candidates(path: &Path, candidates: &[Candidate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    if candidates.is_empty() {
        w.write_record(["scan_id", "x", "y", "z", "probability"])?;
    }
    for c in candidates {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rows `fp_per_scan,sensitivity,lower,upper` and a `mean,<value>` trailer.
/// Bounds are left empty without a band.
pub fn froc_csv(curve: &FrocCurve, band: Option<&[(f64, f64)]>) -> String {
    let mut s = String::from("fp_per_scan,sensitivity,lower,upper\n");
    for (k, rate) in FP_RATES.iter().enumerate() {
        let sens = curve.sensitivities[k];
        match band {
            Some(b) => writeln!(s, "{rate},{sens},{},{}", b[k].0, b[k].1).unwrap(),
            None => writeln!(s, "{rate},{sens},,").unwrap(),
        }
    }
    writeln!(s, "mean,{}", curve.mean).unwrap();
    s
}

pub fn write_froc_csv(path: &Path, curve: &FrocCurve, band: Option<&[(f64, f64)]>) -> Result<()> {
    std::fs::write(path, froc_csv(curve, band)).map_err(|e| Error::io(path, e))
}

/// One curve of an SVG plot.
pub struct PlotSeries<'a> {
    pub label: &'a str,
    pub curve: &'a FrocCurve,
    pub band: Option<&'a [(f64, f64)]>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Sensitivity against log₂ FP/scan over `[0.125, 8]`, bands dashed.
pub fn froc_svg(series: &[PlotSeries]) -> String {
    let (w, h, m) = (560.0, 400.0, 50.0);
    let px = |fp: f64| m + (fp.max(0.125).log2() + 3.0) / 6.0 * (w - 2.0 * m);
    let py = |s: f64| h - m - s * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (k, rate) in FP_RATES.iter().enumerate() {
        let x = px(*rate);
        writeln!(s, "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>", py(0.0), py(1.0)).unwrap();
        writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", h - m + 16.0, FP_RATES[k]).unwrap();
    }
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        writeln!(s, "<line x1=\"{m}\" y1=\"{0:.1}\" x2=\"{1:.1}\" y2=\"{0:.1}\" stroke=\"#ddd\"/>", py(v), w - m).unwrap();
        writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>", m - 6.0, py(v) + 4.0).unwrap();
    }
    writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">average false positives per scan</text>", w / 2.0, h - 12.0).unwrap();
    writeln!(s, "<text x=\"14\" y=\"{:.1}\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">sensitivity</text>", h / 2.0, h / 2.0).unwrap();
    let polyline = |pts: &[(f64, f64)]| pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect::<Vec<_>>().join(" ");
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = ser.curve.points.iter().copied().filter(|p| p.0 >= 0.125 && p.0 <= 8.0).collect();
        pts.extend(FP_RATES.iter().zip(ser.curve.sensitivities).map(|(&r, s)| (r, s)));
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", polyline(&pts)).unwrap();
        if let Some(b) = ser.band {
            for pick in [|p: &(f64, f64)| p.0, |p: &(f64, f64)| p.1] {
                let pts: Vec<(f64, f64)> = FP_RATES.iter().zip(b).map(|(&r, p)| (r, pick(p))).collect();
                writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-dasharray=\"5,4\" points=\"{}\"/>", polyline(&pts)).unwrap();
            }
        }
        writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{} (mean {:.3})</text>", m + 10.0, m + 16.0 * (i + 1) as f64, ser.label, ser.curve.mean).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x: f64, d: f64) -> NoduleAnnotation {
        NoduleAnnotation { scan_id: "s".into(), x, y: 10.0, z: 10.0, diameter: d }
    }

    fn cand(x: f64, p: f64) -> Candidate {
        Candidate { scan_id: "s".into(), x, y: 10.0, z: 10.0, probability: p }
    }

    #[test]
    fn hit_rule_examples() {
        let g = [gt(10.0, 8.0)];
        assert_eq!(match_candidates(&[cand(10.0, 0.5)], &g).0, vec![Tag::TruePositive(0)]);
        assert_eq!(match_candidates(&[cand(15.0, 0.5)], &g).0, vec![Tag::FalsePositive]);
        assert_eq!(match_candidates(&[cand(14.0, 0.5)], &g).0, vec![Tag::TruePositive(0)]);
        let (tags, det) = match_candidates(&[cand(12.0, 0.4), cand(11.0, 0.9)], &g);
        assert_eq!(tags, vec![Tag::Ignored, Tag::TruePositive(0)]);
        assert_eq!(det, vec![true]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let g = [gt(10.0, 8.0)];
        let (tags, _) = match_candidates(&[cand(12.0, 0.5), cand(10.0, 0.5)], &g);
        assert_eq!(tags, vec![Tag::TruePositive(0), Tag::Ignored]);
    }

    #[test]
    fn perfect_detection_scores_one() {
        let g = [gt(10.0, 8.0), gt(30.0, 6.0)];
        let s = ScanResult::new("s", &[cand(10.0, 1.0), cand(30.0, 1.0)], &g);
        let c = froc(&[s]).unwrap();
        assert_eq!(c.sensitivities, [1.0; 7]);
        assert_eq!(c.mean, 1.0);
    }

    #[test]
    fn empty_candidates_score_zero() {
        let s = ScanResult::new("s", &[], &[gt(10.0, 8.0)]);
        assert_eq!(froc(&[s]).unwrap().sensitivities, [0.0; 7]);
        assert!(froc(&[ScanResult::new("s", &[], &[])]).is_err());
    }

    #[test]
    fn interpolation_is_linear_then_flat() {
        let pts = [(0.0, 0.0), (1.0, 0.5), (3.0, 0.9)];
        assert_eq!(interpolate(&pts, 0.5), 0.25);
        assert_eq!(interpolate(&pts, 2.0), 0.7);
        assert_eq!(interpolate(&pts, 8.0), 0.9);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25), 0.25);
    }

    #[test]
    fn stitching_truncates_and_suppresses() {
        let dets: Vec<(Box3, f64)> = (0..150).map(|i| (Box3::new(i as f64 * 10.0, 5.0, 5.0, 2.0), (i as f64 + 1.0) / 200.0)).collect();
        let out = stitch_candidates("s", &dets, [2000, 20, 20], 0.1, 100);
        assert_eq!(out.len(), 100);
        assert_eq!(out[0].probability, 150.0 / 200.0);
        assert_eq!(out[99].probability, 51.0 / 200.0);
        let dup = [(Box3::new(10.0, 10.0, 10.0, 5.0), 0.9), (Box3::new(11.0, 10.0, 10.0, 5.0), 0.8)];
        assert_eq!(stitch_candidates("s", &dup, [32; 3], 0.1, 100).len(), 1);
        let outside = [(Box3::new(-3.0, 40.0, 10.0, 5.0), 0.9)];
        let c = &stitch_candidates("s", &outside, [32; 3], 0.1, 100)[0];
        assert_eq!((c.x, c.y), (0.0, 31.0));
    }

    #[test]
    fn froc_csv_layout() {
        let s = ScanResult::new("s", &[cand(10.0, 0.9)], &[gt(10.0, 8.0)]);
        let text = froc_csv(&froc(&[s]).unwrap(), None);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "fp_per_scan,sensitivity,lower,upper");
        assert_eq!(lines[1], "0.125,1,,");
        assert_eq!(lines[8], "mean,1");
    }
}
