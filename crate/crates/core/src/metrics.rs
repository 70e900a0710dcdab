//! Qini, MAPE and COPC per treatment group, and their population-weighted
//! aggregates.
//!
//! Definitions used throughout (also written into every report header):
//!
//! * Qini curve: rows ranked by predicted uplift (descending, ties by row
//!   order). At prefix fraction `φ = g/G` the incremental gain is
//!   `Y_t(φ) − Y_c(φ)·N_t(φ)/N_c(φ)` (just `Y_t(φ)` while the prefix has no
//!   control rows). The Qini coefficient is the trapezoidal area under that
//!   curve minus the area under the chord from the origin to its endpoint,
//!   divided by the row count.
//! * MAPE: `|mean predicted uplift − reference ATE| / |reference ATE|` for the
//!   group, the reference being the mean true uplift when known and the
//!   difference of arm outcome means otherwise.
//! * COPC: `Σ y / Σ ŷ` with `ŷ` the predicted outcome of each row's own arm.

use std::io::Write;

use crate::dataset::{format_f64, Dataset};
use crate::error::{Error, Result};
use crate::uplift::{predict_rows, TLearnerModel};

pub const DEFAULT_GRID: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct QiniCurve {
    /// `(φ, gain)` from `(0, 0)` to `(1, endpoint)`.
    pub points: Vec<(f64, f64)>,
    pub n_rows: usize,
}

impl QiniCurve {
    pub fn endpoint(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.1)
    }
}

pub fn qini_curve(scores: &[f64], treated: &[bool], y: &[u8], grid: usize) -> Result<QiniCurve> {
    let n = scores.len();
    if treated.len() != n || y.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: treated.len().min(y.len()),
        });
    }
    if grid == 0 {
        return Err(Error::config("qini grid must have at least one point"));
    }
    let n_treated = treated.iter().filter(|&&t| t).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::invalid("qini curve needs both treated and control rows"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut points = Vec::with_capacity(grid + 1);
    points.push((0.0, 0.0));
    let (mut yt, mut yc, mut nt, mut nc) = (0.0, 0.0, 0usize, 0usize);
    let mut taken = 0;
    for g in 1..=grid {
        let upto = g * n / grid;
        for &i in &order[taken..upto] {
            if treated[i] {
                nt += 1;
                yt += f64::from(y[i]);
            } else {
                nc += 1;
                yc += f64::from(y[i]);
            }
        }
        taken = upto;
        let gain = if nc == 0 { yt } else { yt - yc * nt as f64 / nc as f64 };
        points.push((g as f64 / grid as f64, gain));
    }
    Ok(QiniCurve { points, n_rows: n })
}

pub fn qini_coefficient(curve: &QiniCurve) -> f64 {
    let area: f64 = curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    let chord = curve.endpoint() / 2.0;
    (area - chord) / curve.n_rows as f64
}

/// `None` when the reference ATE is zero (metric undefined).
pub fn group_mape(predicted_mean: f64, reference_ate: f64) -> Option<f64> {
    (reference_ate != 0.0).then(|| (predicted_mean - reference_ate).abs() / reference_ate.abs())
}

/// Mean of per-row `|pred − true| / |true|`, skipping rows with zero true
/// uplift. Only meaningful on synthetic data.
pub fn per_sample_mape(predicted: &[f64], truth: &[f64]) -> Option<f64> {
    let terms: Vec<f64> = predicted
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t != 0.0)
        .map(|(p, t)| (p - t).abs() / t.abs())
        .collect();
    (!terms.is_empty()).then(|| terms.iter().sum::<f64>() / terms.len() as f64)
}

pub fn group_copc(predicted: &[f64], y: &[u8]) -> Result<f64> {
    let denom: f64 = predicted.iter().sum();
    if !(denom > 0.0) {
        return Err(Error::invalid("COPC undefined: predicted outcomes sum to zero"));
    }
    let clicks: f64 = y.iter().map(|&v| f64::from(v)).sum();
    Ok(clicks / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MapeMode {
    #[default]
    Group,
    PerSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub treatment: u32,
    /// Weight of the group in the aggregates.
    pub size: usize,
    pub qini: f64,
    pub mape: Option<f64>,
    pub copc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub groups: Vec<GroupMetrics>,
    pub population: usize,
    /// `Σ size / population`.
    pub coverage: f64,
    pub w_qini: f64,
    pub w_mape: Option<f64>,
    pub w_copc: f64,
}

/// Aggregates are `Σ size_g·metric_g / population`. Groups without a defined
/// MAPE are left out of `w_mape`, which is then rescaled to the coverage of
/// the remaining groups' share.
pub fn weighted_report(groups: Vec<GroupMetrics>, population: usize) -> Result<MetricsReport> {
    if groups.is_empty() {
        return Err(Error::invalid("no groups to aggregate"));
    }
    let covered: usize = groups.iter().map(|g| g.size).sum();
    let population = population.max(covered);
    if population == 0 {
        return Err(Error::invalid("groups are all empty"));
    }
    let pop = population as f64;
    let coverage = covered as f64 / pop;
    let w_qini = groups.iter().map(|g| g.size as f64 * g.qini).sum::<f64>() / pop;
    let w_copc = groups.iter().map(|g| g.size as f64 * g.copc).sum::<f64>() / pop;
    let with_mape: Vec<(f64, f64)> = groups
        .iter()
        .filter_map(|g| g.mape.map(|m| (g.size as f64, m)))
        .collect();
    for g in groups.iter().filter(|g| g.mape.is_none()) {
        log::warn!("treatment {}: reference ATE is zero, MAPE left out of w_mape", g.treatment);
    }
    let mape_weight: f64 = with_mape.iter().map(|(s, _)| s).sum();
    let w_mape = (mape_weight > 0.0)
        .then(|| with_mape.iter().map(|(s, m)| s * m).sum::<f64>() / mape_weight * coverage);
    Ok(MetricsReport {
        groups,
        population,
        coverage,
        w_qini,
        w_mape,
        w_copc,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// One curve per group, same order as `report.groups`.
    pub curves: Vec<QiniCurve>,
}

/// Score `model` on `data`: one group per non-control treatment present in
/// both, each made of that treatment's rows plus all control rows.
pub fn evaluate(model: &TLearnerModel, data: &Dataset, grid: usize, mape_mode: MapeMode) -> Result<Evaluation> {
    let by_t = data.group_indices();
    let control = by_t.first().filter(|g| !g.is_empty()).ok_or(Error::EmptyGroup(0))?;
    let mut groups = Vec::new();
    let mut curves = Vec::new();
    for (t, treated_rows) in by_t.iter().enumerate().skip(1) {
        let t = t as u32;
        if treated_rows.is_empty() || !model.has_treatment(t) {
            continue;
        }
        let mut rows: Vec<usize> = treated_rows.iter().chain(control).copied().collect();
        rows.sort_unstable();
        let (uplift, prob) = predict_rows(model, data, t, &rows)?;
        let treated: Vec<bool> = rows.iter().map(|&i| data.treatment(i) == t).collect();
        let y: Vec<u8> = rows.iter().map(|&i| data.outcome(i)).collect();
        let curve = qini_curve(&uplift, &treated, &y, grid)?;

        let predicted_mean = uplift.iter().sum::<f64>() / uplift.len() as f64;
        let mape = match (data.true_uplift(), mape_mode) {
            (Some(truth), MapeMode::PerSample) => {
                let truth: Vec<f64> = rows.iter().map(|&i| truth[i]).collect();
                per_sample_mape(&uplift, &truth)
            }
            (Some(truth), MapeMode::Group) => {
                let ate = rows.iter().map(|&i| truth[i]).sum::<f64>() / rows.len() as f64;
                group_mape(predicted_mean, ate)
            }
            (None, _) => {
                let mean_of = |idx: &[usize]| {
                    idx.iter().map(|&i| f64::from(data.outcome(i))).sum::<f64>() / idx.len() as f64
                };
                group_mape(predicted_mean, mean_of(treated_rows) - mean_of(control))
            }
        };
        groups.push(GroupMetrics {
            treatment: t,
            size: treated_rows.len(),
            qini: qini_coefficient(&curve),
            mape,
            copc: group_copc(&prob, &y)?,
        });
        curves.push(curve);
    }
    if groups.is_empty() {
        return Err(Error::invalid("no treatment group shared by model and data"));
    }
    let population = by_t.iter().skip(1).map(Vec::len).sum();
    Ok(Evaluation {
        report: weighted_report(groups, population)?,
        curves,
    })
}

pub const REPORT_DEFINITIONS: &[&str] = &[
    "# qini: area between cumulative incremental gain Y_t - Y_c*N_t/N_c and the random chord, trapezoid over the phi grid, divided by row count",
    "# mape: |mean predicted uplift - reference ATE| / |reference ATE| per group (reference = mean true uplift, else arm mean difference)",
    "# copc: sum(y) / sum(predicted outcome of own arm)",
    "# aggregates: sum(size*metric)/population; coverage = sum(size)/population",
];

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

impl MetricsReport {
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        for line in REPORT_DEFINITIONS {
            writeln!(writer, "{line}")?;
        }
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["group", "size", "qini", "mape", "copc", "coverage"])?;
        for g in &self.groups {
            w.write_record([
                g.treatment.to_string(),
                g.size.to_string(),
                format_f64(g.qini),
                opt(g.mape),
                format_f64(g.copc),
                String::new(),
            ])?;
        }
        w.write_record([
            "weighted".to_owned(),
            self.population.to_string(),
            format_f64(self.w_qini),
            opt(self.w_mape),
            format_f64(self.w_copc),
            format_f64(self.coverage),
        ])?;
        w.flush()?;
        Ok(())
    }
}

pub fn write_curves_csv<W: Write>(groups: &[GroupMetrics], curves: &[QiniCurve], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["group", "phi", "gain"])?;
    for (g, c) in groups.iter().zip(curves) {
        for (phi, gain) in &c.points {
            w.write_record([g.treatment.to_string(), format_f64(*phi), format_f64(*gain)])?;
        }
    }
    w.flush()?;
    Ok(())
}
