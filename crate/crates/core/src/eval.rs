//! Gold evaluation of policies, the performance surface over reward-model
//! accuracy and training steps, and windowed dynamics statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::{segment_response, Axis, TaskInstance, Token};
use crate::error::{Error, Result};
use crate::policy::{argmax, FeatureMap, PolicyParams};
use crate::reward_model::RewardModelIdentity;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfRecord {
    /// Fraction of generated segments that are gold-relevant.
    pub relevance_ratio: f64,
    /// Fraction of generated segments free of forbidden tokens.
    pub factuality_ratio: f64,
    /// Mean gold coverage of the required set.
    pub completeness_reward: f64,
    pub n_eval_instances: usize,
}

impl PerfRecord {
    pub fn metric(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Relevance => self.relevance_ratio,
            Axis::Factuality => self.factuality_ratio,
            Axis::Completeness => self.completeness_reward,
        }
    }
}

/// Greedy decode: always the most likely token, lowest id on ties.
pub fn greedy_response(
    policy: &PolicyParams,
    fmap: &FeatureMap,
    instance: &TaskInstance,
    len: usize,
) -> Result<Vec<Token>> {
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        let logits = policy.logits(&fmap.featurize(instance, &out))?;
        out.push(argmax(&logits) as Token);
    }
    Ok(out)
}

/// One greedy response per instance, scored by the gold rules.
pub fn evaluate_policy(
    policy: &PolicyParams,
    fmap: &FeatureMap,
    segment_len: usize,
    instances: &[TaskInstance],
) -> Result<PerfRecord> {
    if instances.is_empty() {
        return Err(Error::usage("evaluation needs a non-empty validation split"));
    }
    let mut segments = 0usize;
    let mut relevant = 0usize;
    let mut factual = 0usize;
    let mut coverage = 0.0;
    for inst in instances {
        let resp = greedy_response(policy, fmap, inst, fmap.max_gen_len)?;
        for seg in segment_response(&resp, segment_len)? {
            segments += 1;
            relevant += usize::from(inst.segment_relevant(&seg.tokens));
            factual += usize::from(inst.segment_factual(&seg.tokens));
        }
        coverage += inst.coverage(&resp);
    }
    let denom = segments.max(1) as f64;
    Ok(PerfRecord {
        relevance_ratio: relevant as f64 / denom,
        factuality_ratio: factual as f64 / denom,
        completeness_reward: coverage / instances.len() as f64,
        n_eval_instances: instances.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub perf: PerfRecord,
}

/// What surface construction needs from one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub seed: u64,
    pub reward_model: Option<RewardModelIdentity>,
    pub evals: Vec<EvalPoint>,
}

/// One empirical sample of performance as a function of reward-model
/// accuracy and policy training steps. Field order is the CSV column order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub rm_step: u64,
    pub rm_accuracy_proxy: f64,
    pub rm_accuracy_gold: f64,
    pub lm_step: u64,
    pub relevance_ratio: f64,
    pub factuality_ratio: f64,
    pub completeness_reward: f64,
}

impl SurfacePoint {
    pub fn metric(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Relevance => self.relevance_ratio,
            Axis::Factuality => self.factuality_ratio,
            Axis::Completeness => self.completeness_reward,
        }
    }
}

/// One point per (run, evaluation point), sorted by `(rm_step, lm_step)`.
/// Points sharing both keys keep the order of `runs`.
pub fn build_surface(runs: &[RunOutcome]) -> Result<Vec<SurfacePoint>> {
    let mut points = Vec::new();
    for run in runs {
        let rm = run.reward_model.as_ref().ok_or_else(|| {
            Error::data(format!("run {} has no reward-model identity", run.run_id))
        })?;
        points.extend(run.evals.iter().map(|e| SurfacePoint {
            rm_step: rm.step,
            rm_accuracy_proxy: rm.accuracy_proxy,
            rm_accuracy_gold: rm.accuracy_gold,
            lm_step: e.step,
            relevance_ratio: e.perf.relevance_ratio,
            factuality_ratio: e.perf.factuality_ratio,
            completeness_reward: e.perf.completeness_reward,
        }));
    }
    points.sort_by_key(|p| (p.rm_step, p.lm_step));
    Ok(points)
}

/// Highest `axis` metric; ties go to the smaller `lm_step`, then the
/// smaller `rm_step`.
pub fn best_checkpoint_report(surface: &[SurfacePoint], axis: Axis) -> Result<SurfacePoint> {
    let mut iter = surface.iter();
    let mut best = *iter
        .next()
        .ok_or_else(|| Error::usage("best-checkpoint report needs a non-empty surface"))?;
    for p in iter {
        let (m, b) = (p.metric(axis), best.metric(axis));
        if m > b || (m == b && (p.lm_step, p.rm_step) < (best.lm_step, best.rm_step)) {
            best = *p;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsStats {
    pub series: String,
    pub window: usize,
    pub window_starts: Vec<u64>,
    pub means: Vec<f64>,
    /// Population variances.
    pub variances: Vec<f64>,
}

/// Means and population variances over consecutive non-overlapping windows
/// of `window` points; the last window may be shorter.
pub fn dynamics_stats(series: &str, points: &[(u64, f64)], window: usize) -> Result<DynamicsStats> {
    if window == 0 {
        return Err(Error::usage("dynamics window must be at least 1"));
    }
    let mut stats = DynamicsStats {
        series: series.to_string(),
        window,
        window_starts: Vec::new(),
        means: Vec::new(),
        variances: Vec::new(),
    };
    for chunk in points.chunks(window) {
        let n = chunk.len() as f64;
        let mean = chunk.iter().map(|p| p.1).sum::<f64>() / n;
        let var = chunk.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n;
        stats.window_starts.push(chunk[0].0);
        stats.means.push(mean);
        stats.variances.push(var);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotFormat {
    Csv,
    Svg,
}

impl FromStr for PlotFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(PlotFormat::Csv),
            "svg" => Ok(PlotFormat::Svg),
            other => Err(Error::usage(format!("unsupported plot format `{other}` (csv or svg)"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PlotData<'a> {
    Surface { points: &'a [SurfacePoint], axis: Axis },
    Dynamics(&'a [DynamicsStats]),
}

/// Row of `dynamics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub series: String,
    pub window_start: u64,
    pub mean: f64,
    pub variance: f64,
}

pub fn dynamics_rows(stats: &[DynamicsStats]) -> Vec<DynamicsRow> {
    stats
        .iter()
        .flat_map(|s| {
            s.window_starts
                .iter()
                .zip(&s.means)
                .zip(&s.variances)
                .map(|((&w, &m), &v)| DynamicsRow {
                    series: s.series.clone(),
                    window_start: w,
                    mean: m,
                    variance: v,
                })
        })
        .collect()
}

pub fn emit_plot_data(data: PlotData<'_>, format: PlotFormat) -> Result<Vec<u8>> {
    match format {
        PlotFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            match data {
                PlotData::Surface { points, .. } => {
                    if points.is_empty() {
                        w.write_record(SURFACE_COLUMNS)?;
                    }
                    for p in points {
                        w.serialize(p)?;
                    }
                }
                PlotData::Dynamics(stats) => {
                    let rows = dynamics_rows(stats);
                    if rows.is_empty() {
                        w.write_record(DYNAMICS_COLUMNS)?;
                    }
                    for r in rows {
                        w.serialize(r)?;
                    }
                }
            }
            w.into_inner()
                .map_err(|e| Error::data(format!("csv buffer: {e}")))
        }
        PlotFormat::Svg => match data {
            PlotData::Surface { points, axis } => {
                if points.is_empty() {
                    return Err(Error::usage("cannot draw an empty surface"));
                }
                Ok(surface_svg(points, axis).into_bytes())
            }
            PlotData::Dynamics(stats) => {
                if stats.iter().all(|s| s.means.is_empty()) {
                    return Err(Error::usage("cannot draw empty dynamics"));
                }
                Ok(dynamics_svg(stats).into_bytes())
            }
        },
    }
}

pub const SURFACE_COLUMNS: [&str; 7] = [
    "rm_step",
    "rm_accuracy_proxy",
    "rm_accuracy_gold",
    "lm_step",
    "relevance_ratio",
    "factuality_ratio",
    "completeness_reward",
];

pub const DYNAMICS_COLUMNS: [&str; 4] = ["series", "window_start", "mean", "variance"];

pub fn parse_surface_csv(bytes: &[u8]) -> Result<Vec<SurfacePoint>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != SURFACE_COLUMNS {
        return Err(Error::data(format!("unexpected surface columns {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn parse_dynamics_csv(bytes: &[u8]) -> Result<Vec<DynamicsRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn heat(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 * v) as u8;
    let b = (255.0 * (1.0 - v)) as u8;
    format!("rgb({r},64,{b})")
}

fn surface_svg(points: &[SurfacePoint], axis: Axis) -> String {
    // Cell value: mean metric over all points sharing (rm_step, lm_step).
    let mut cells: BTreeMap<(u64, u64), (f64, usize)> = BTreeMap::new();
    let mut rows: BTreeMap<u64, f64> = BTreeMap::new();
    for p in points {
        let c = cells.entry((p.rm_step, p.lm_step)).or_default();
        c.0 += p.metric(axis);
        c.1 += 1;
        rows.insert(p.rm_step, p.rm_accuracy_proxy);
    }
    let mut cols: Vec<u64> = points.iter().map(|p| p.lm_step).collect();
    cols.sort_unstable();
    cols.dedup();
    let (lo, hi) = cells
        .values()
        .map(|(s, n)| s / *n as f64)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cw = (W - 2.0 * MARGIN) / cols.len() as f64;
    let ch = (H - 2.0 * MARGIN) / rows.len() as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="14" text-anchor="middle">{} by reward-model accuracy and policy step (range {lo:.3}..{hi:.3})</text>"#,
        W / 2.0,
        axis
    );
    for (ri, (rm_step, acc)) in rows.iter().enumerate() {
        let y = H - MARGIN - (ri + 1) as f64 * ch;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{acc:.3}</text>"#,
            MARGIN - 4.0,
            y + ch / 2.0
        );
        for (ci, lm_step) in cols.iter().enumerate() {
            if let Some((sum, n)) = cells.get(&(*rm_step, *lm_step)) {
                let v = sum / *n as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"><title>rm_step {rm_step}, lm_step {lm_step}: {v:.4}</title></rect>"#,
                    MARGIN + ci as f64 * cw,
                    y,
                    cw,
                    ch,
                    heat((v - lo) / span)
                );
            }
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">policy training step ({} .. {})</text>"#,
        W / 2.0,
        H - 20.0,
        cols[0],
        cols[cols.len() - 1]
    );
    s.push_str("</svg>\n");
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn dynamics_svg(stats: &[DynamicsStats]) -> String {
    let xs = stats.iter().flat_map(|s| s.window_starts.iter().map(|&x| x as f64));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let ys = stats.iter().flat_map(|s| s.means.iter().copied());
    let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let xspan = if x1 > x0 { x1 - x0 } else { 1.0 };
    let yspan = if y1 > y0 { y1 - y0 } else { 1.0 };
    let px = |x: f64| MARGIN + (x - x0) / xspan * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / yspan * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="grey"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for (i, st) in stats.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = st
            .window_starts
            .iter()
            .zip(&st.means)
            .map(|(&x, &y)| format!("{:.1},{:.1}", px(x as f64), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            st.series
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            MARGIN + 6.0,
            MARGIN + 14.0 + 12.0 * i as f64,
            st.series
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">step {x0} .. {x1}, window mean {y0:.4} .. {y1:.4}</text>"#,
        W / 2.0,
        H - 20.0
    );
    s.push_str("</svg>\n");
    s
}
