//! Pseudo-sample matching.
//!
//! For a fusion ratio `k` and selected features `X_s`, every RCT row of
//! treatment `i` is shifted on `X_s` by `(1 + 1/k)·δ_i`, where
//! `δ_i = V_avg − V_i` is the gap between the pooled RCT mean and the group
//! mean. Those pseudo samples are then used as queries: each one pulls its
//! `k` nearest observational rows of the same treatment and bucket. Because
//! the matched rows centre on `V_i + (1 + 1/k)·δ_i`, the fused group mean
//! `(V_i + k·V_i^obs) / (1 + k)` lands on `V_avg` for every treatment.
//!
//! Pseudo samples never enter the output; the fused dataset is the RCT plus
//! the matched observational rows, ordered RCT-first and then by
//! `(bucket, pseudo index, distance rank)`.

use std::collections::BTreeMap;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nnindex::{KdTree, Metric, NeighborIndex, PointSet, SplitRule, DEFAULT_LEAF_SIZE};
use crate::rng;

/// Selected columns `X_s` and their distance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub columns: Vec<usize>,
    pub weights: Vec<f64>,
}

impl FeatureSelection {
    pub fn new(columns: Vec<usize>) -> Self {
        let weights = vec![1.0; columns.len()];
        FeatureSelection { columns, weights }
    }

    pub fn with_weights(columns: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let sel = FeatureSelection { columns, weights };
        if sel.weights.len() != sel.columns.len() {
            return Err(Error::config(format!(
                "{} weights for {} selected features",
                sel.weights.len(),
                sel.columns.len()
            )));
        }
        Ok(sel)
    }

    /// Resolve feature names against a dataset header.
    pub fn from_names(data: &Dataset, names: &[impl AsRef<str>]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| {
                data.feature_index(n.as_ref())
                    .ok_or_else(|| Error::config(format!("unknown feature {:?}", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(columns))
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::config("feature selection is empty"));
        }
        if self.weights.len() != self.columns.len() {
            return Err(Error::config("feature weights and selected features differ in length"));
        }
        if let Some(c) = self.columns.iter().find(|&&c| c >= n_features) {
            return Err(Error::config(format!(
                "selected feature {c} out of range ({n_features} features)"
            )));
        }
        let mut sorted = self.columns.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("selected features must be unique"));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("feature weight {w} must be positive")));
        }
        Ok(())
    }

    fn project(&self, row: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|&c| row[c]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BucketColumn {
    /// Bins `(-∞, e_0), [e_0, e_1), …, [e_last, ∞)`.
    Edges { column: usize, edges: Vec<f64> },
    /// Already discrete: the value itself (rounded) is the bin.
    Discrete { column: usize },
}

impl BucketColumn {
    pub fn column(&self) -> usize {
        match self {
            BucketColumn::Edges { column, .. } | BucketColumn::Discrete { column } => *column,
        }
    }

    fn bin(&self, v: f64) -> i64 {
        match self {
            BucketColumn::Edges { edges, .. } => edges.partition_point(|&e| e <= v) as i64,
            BucketColumn::Discrete { .. } => v.round() as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BucketSpec {
    pub columns: Vec<BucketColumn>,
}

/// Tuple of per-column bin indices. Empty when no bucketing is configured.
pub type BucketId = Vec<i64>;

impl BucketSpec {
    pub fn none() -> Self {
        BucketSpec::default()
    }

    pub fn validate(&self, n_features: usize) -> Result<()> {
        for b in &self.columns {
            if b.column() >= n_features {
                return Err(Error::config(format!("bucket column {} out of range", b.column())));
            }
            if let BucketColumn::Edges { edges, column } = b {
                if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
                    return Err(Error::config(format!(
                        "bucket edges for column {column} must be finite and strictly increasing"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parse `col:e1|e2|e3` (edges) or `col` (discrete) items separated by `;`,
    /// where `col` is a feature name.
    pub fn parse(text: &str, feature_names: &[String]) -> Result<Self> {
        let mut columns = Vec::new();
        for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, edges) = match item.split_once(':') {
                Some((n, e)) => (n.trim(), Some(e)),
                None => (item, None),
            };
            let column = feature_names
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| Error::config(format!("unknown bucket feature {name:?}")))?;
            columns.push(match edges {
                None => BucketColumn::Discrete { column },
                Some(e) => BucketColumn::Edges {
                    column,
                    edges: e
                        .split('|')
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .map_err(|err| Error::config(format!("bucket edge {v:?}: {err}")))
                        })
                        .collect::<Result<_>>()?,
                },
            });
        }
        Ok(BucketSpec { columns })
    }
}

pub fn bucket_id(row: &[f64], spec: &BucketSpec) -> BucketId {
    spec.columns.iter().map(|b| b.bin(row[b.column()])).collect()
}

/// Mean vectors, per-treatment deltas and matching targets for one ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPlan {
    pub ratio: usize,
    /// Pooled RCT mean over `X_s`.
    pub v_avg: Vec<f64>,
    /// `V_i`, indexed by treatment id.
    pub group_means: Vec<Vec<f64>>,
    /// `δ_i = V_avg − V_i`
    pub deltas: Vec<Vec<f64>>,
    /// `V_i^obs = V_i + (1 + 1/k)·δ_i`
    pub target_means: Vec<Vec<f64>>,
}

impl FusionPlan {
    /// `1 + 1/k`
    pub fn shift_factor(&self) -> f64 {
        1.0 + 1.0 / self.ratio as f64
    }

    pub fn n_treatments(&self) -> usize {
        self.group_means.len()
    }
}

pub fn compute_mean_vectors(rct: &Dataset, sel: &FeatureSelection, ratio: usize) -> Result<FusionPlan> {
    sel.validate(rct.n_features())?;
    if ratio == 0 {
        return Err(Error::config("fusion ratio k must be >= 1"));
    }
    if rct.is_empty() {
        return Err(Error::invalid("RCT dataset is empty"));
    }
    let j = sel.len();
    let groups = rct.group_indices();
    if let Some(t) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyGroup(t as u32));
    }

    let mut v_avg = vec![0.0; j];
    let mut group_means = vec![vec![0.0; j]; groups.len()];
    for (i, row) in rct.rows().enumerate() {
        let g = &mut group_means[rct.treatment(i) as usize];
        for (m, &c) in sel.columns.iter().enumerate() {
            v_avg[m] += row[c];
            g[m] += row[c];
        }
    }
    let n = rct.n_rows() as f64;
    v_avg.iter_mut().for_each(|v| *v /= n);
    for (g, rows) in group_means.iter_mut().zip(&groups) {
        let n = rows.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
    }

    let factor = 1.0 + 1.0 / ratio as f64;
    let deltas: Vec<Vec<f64>> = group_means
        .iter()
        .map(|g| v_avg.iter().zip(g).map(|(a, b)| a - b).collect())
        .collect();
    let target_means = group_means
        .iter()
        .zip(&deltas)
        .map(|(g, d)| g.iter().zip(d).map(|(v, dv)| v + factor * dv).collect())
        .collect();
    Ok(FusionPlan {
        ratio,
        v_avg,
        group_means,
        deltas,
        target_means,
    })
}

/// One pseudo row per RCT row: selected columns shifted by
/// `(1 + 1/k)·δ_{T(row)}`, everything else copied.
pub fn build_pseudo_samples(rct: &Dataset, plan: &FusionPlan, sel: &FeatureSelection) -> Result<Dataset> {
    let factor = plan.shift_factor();
    let mut pseudo = Dataset::empty(rct.feature_names().to_vec(), rct.true_uplift().is_some());
    let mut buf = Vec::with_capacity(rct.n_features());
    for i in 0..rct.n_rows() {
        let t = rct.treatment(i) as usize;
        let delta = plan.deltas.get(t).ok_or(Error::UnknownTreatment(t as u32))?;
        buf.clear();
        buf.extend_from_slice(rct.row(i));
        for (m, &c) in sel.columns.iter().enumerate() {
            buf[c] += factor * delta[m];
        }
        pseudo.push_row(
            &buf,
            rct.treatment(i),
            rct.outcome(i),
            rct.source(i),
            rct.true_uplift().map(|u| u[i]),
        )?;
    }
    Ok(pseudo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationKind {
    /// Map the range of the union to `[0, 1]`.
    #[default]
    MinMax,
    ZScore,
}

/// Per selected column: `(v − offset) / scale`, or 0 when `scale == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub kind: NormalizationKind,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn apply(&self, m: usize, v: f64) -> f64 {
        if self.scale[m] == 0.0 {
            0.0
        } else {
            (v - self.offset[m]) / self.scale[m]
        }
    }

    /// Normalized selected vector of a full row.
    pub fn transform(&self, sel: &FeatureSelection, row: &[f64]) -> Vec<f64> {
        sel.columns
            .iter()
            .enumerate()
            .map(|(m, &c)| self.apply(m, row[c]))
            .collect()
    }
}

/// Fit on the union of pseudo and observational rows, per selected column.
pub fn fit_normalization(
    pseudo: &Dataset,
    obs: &Dataset,
    sel: &FeatureSelection,
    kind: NormalizationKind,
) -> Result<Normalization> {
    if pseudo.is_empty() && obs.is_empty() {
        return Err(Error::invalid("cannot fit normalization on empty data"));
    }
    let union = || pseudo.rows().chain(obs.rows());
    let j = sel.len();
    match kind {
        NormalizationKind::MinMax => {
            let mut lo = vec![f64::INFINITY; j];
            let mut hi = vec![f64::NEG_INFINITY; j];
            for row in union() {
                for (m, &c) in sel.columns.iter().enumerate() {
                    lo[m] = lo[m].min(row[c]);
                    hi[m] = hi[m].max(row[c]);
                }
            }
            let scale = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
            Ok(Normalization {
                kind,
                offset: lo,
                scale,
            })
        }
        NormalizationKind::ZScore => {
            let n = (pseudo.n_rows() + obs.n_rows()) as f64;
            let mut mean = vec![0.0; j];
            for row in union() {
                for (m, &c) in sel.columns.iter().enumerate() {
                    mean[m] += row[c];
                }
            }
            mean.iter_mut().for_each(|v| *v /= n);
            let mut var = vec![0.0; j];
            for row in union() {
                for (m, &c) in sel.columns.iter().enumerate() {
                    var[m] += (row[c] - mean[m]).powi(2);
                }
            }
            let scale = var.iter().map(|v| (v / n).sqrt()).collect();
            Ok(Normalization {
                kind,
                offset: mean,
                scale,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Brute,
    #[default]
    Kdtree,
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "brute" => Ok(Backend::Brute),
            "kdtree" => Ok(Backend::Kdtree),
            other => Err(format!("unknown backend {other:?} (brute|kdtree)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Replacement {
    With,
    #[default]
    Without,
}

impl std::str::FromStr for Replacement {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "with" => Ok(Replacement::With),
            "without" => Ok(Replacement::Without),
            other => Err(format!("unknown replacement policy {other:?} (with|without)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub selection: FeatureSelection,
    pub buckets: BucketSpec,
    pub ratio: usize,
    pub backend: Backend,
    pub metric: Metric,
    pub normalization: NormalizationKind,
    pub max_distance: Option<f64>,
    pub replacement: Replacement,
    pub leaf_size: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            selection: FeatureSelection::new(Vec::new()),
            buckets: BucketSpec::none(),
            ratio: 3,
            backend: Backend::Kdtree,
            metric: Metric::Euclidean,
            normalization: NormalizationKind::MinMax,
            max_distance: None,
            replacement: Replacement::Without,
            leaf_size: DEFAULT_LEAF_SIZE,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::config("fusion ratio k must be >= 1"));
        }
        self.selection.validate(n_features)?;
        self.buckets.validate(n_features)?;
        if let Some(r) = self.max_distance {
            if !(r >= 0.0) {
                return Err(Error::config("max_distance must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Where an appended observational row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRecord {
    pub obs_row: usize,
    /// Index of the pseudo sample (= RCT row) that selected it; `None` for
    /// random selection.
    pub pseudo_index: Option<usize>,
    pub bucket: BucketId,
    pub treatment: u32,
    /// 0-based position among the pseudo sample's matches.
    pub rank: usize,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    /// RCT rows first, then the appended observational rows.
    pub data: Dataset,
    pub n_rct: usize,
    pub provenance: Vec<MatchRecord>,
}

impl FusedDataset {
    pub fn n_matched(&self) -> usize {
        self.provenance.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub bucket: BucketId,
    pub treatment: u32,
    pub n_pseudo: usize,
    pub n_candidates: usize,
    pub matched: usize,
    /// `k·n_pseudo − matched`
    pub shortfall: usize,
    /// Candidates dropped by `max_distance`.
    pub over_max_distance: usize,
    pub mean_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FusionReport {
    pub cells: Vec<CellReport>,
}

impl FusionReport {
    pub fn total_matched(&self) -> usize {
        self.cells.iter().map(|c| c.matched).sum()
    }

    pub fn total_shortfall(&self) -> usize {
        self.cells.iter().map(|c| c.shortfall).sum()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "bucket",
            "treatment",
            "n_pseudo",
            "n_candidates",
            "matched",
            "shortfall",
            "over_max_distance",
            "mean_distance",
        ])?;
        for c in &self.cells {
            let bucket = c.bucket.iter().map(i64::to_string).collect::<Vec<_>>().join("|");
            w.write_record([
                bucket,
                c.treatment.to_string(),
                c.n_pseudo.to_string(),
                c.n_candidates.to_string(),
                c.matched.to_string(),
                c.shortfall.to_string(),
                c.over_max_distance.to_string(),
                c.mean_distance.map(crate::dataset::format_f64).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: FusedDataset,
    pub report: FusionReport,
    pub plan: FusionPlan,
    pub normalization: Normalization,
}

struct Cell {
    treatment: u32,
    pseudo: Vec<usize>,
    obs: Vec<usize>,
}

fn check_schema(rct: &Dataset, obs: &Dataset) -> Result<()> {
    if rct.n_features() != obs.n_features() {
        return Err(Error::Dimension {
            expected: rct.n_features(),
            got: obs.n_features(),
        });
    }
    Ok(())
}

fn output_schema(rct: &Dataset, obs: &Dataset) -> Dataset {
    let keep_uplift = rct.true_uplift().is_some() && obs.true_uplift().is_some();
    Dataset::empty(rct.feature_names().to_vec(), keep_uplift)
}

fn append_row(out: &mut Dataset, src: &Dataset, i: usize) -> Result<()> {
    out.push_row(
        src.row(i),
        src.treatment(i),
        src.outcome(i),
        src.source(i),
        if out.true_uplift().is_some() {
            src.true_uplift().map(|u| u[i])
        } else {
            None
        },
    )
}

/// Pseudo-sample matching fusion of `rct` with `obs`.
pub fn fuse(rct: &Dataset, obs: &Dataset, config: &FusionConfig) -> Result<FusionOutput> {
    check_schema(rct, obs)?;
    config.validate(rct.n_features())?;
    let sel = &config.selection;
    let k = config.ratio;

    let plan = compute_mean_vectors(rct, sel, k)?;
    let n_t = plan.n_treatments();
    let obs_groups = obs.group_indices();
    for t in 0..n_t {
        if obs_groups.get(t).is_none_or(Vec::is_empty) {
            return Err(Error::InsufficientData {
                treatment: t as u32,
                needed: 1,
                available: 0,
            });
        }
    }
    let pseudo = build_pseudo_samples(rct, &plan, sel)?;
    let norm = fit_normalization(&pseudo, obs, sel, config.normalization)?;

    // bucket -> treatment -> cell
    let mut cells: BTreeMap<BucketId, BTreeMap<u32, Cell>> = BTreeMap::new();
    for (i, row) in pseudo.rows().enumerate() {
        let t = pseudo.treatment(i);
        cells
            .entry(bucket_id(row, &config.buckets))
            .or_default()
            .entry(t)
            .or_insert_with(|| Cell {
                treatment: t,
                pseudo: Vec::new(),
                obs: Vec::new(),
            })
            .pseudo
            .push(i);
    }
    for (i, row) in obs.rows().enumerate() {
        let t = obs.treatment(i);
        if t as usize >= n_t {
            continue;
        }
        let b = bucket_id(row, &config.buckets);
        // Cells without pseudo samples can never be queried.
        if let Some(cell) = cells.get_mut(&b).and_then(|m| m.get_mut(&t)) {
            cell.obs.push(i);
        }
    }

    let pseudo_norm: Vec<Vec<f64>> = pseudo.rows().map(|r| norm.transform(sel, r)).collect();

    let buckets: Vec<(BucketId, BTreeMap<u32, Cell>)> = cells.into_iter().collect();
    let per_bucket: Vec<(Vec<MatchRecord>, Vec<CellReport>)> = buckets
        .into_par_iter()
        .map(|(bucket, cells)| {
            let mut matches = Vec::new();
            let mut reports = Vec::new();
            for cell in cells.into_values() {
                let (m, r) = match_cell(&bucket, &cell, obs, sel, &norm, &pseudo_norm, config)?;
                matches.extend(m);
                reports.push(r);
            }
            matches.sort_by_key(|m| (m.pseudo_index, m.rank));
            Ok((matches, reports))
        })
        .collect::<Result<_>>()?;

    let mut data = output_schema(rct, obs);
    for i in 0..rct.n_rows() {
        append_row(&mut data, rct, i)?;
    }
    let mut provenance = Vec::new();
    let mut report = FusionReport::default();
    for (matches, reports) in per_bucket {
        for m in &matches {
            append_row(&mut data, obs, m.obs_row)?;
        }
        provenance.extend(matches);
        report.cells.extend(reports);
    }
    log::debug!(
        "fusion k={k}: {} rct rows, {} matched, shortfall {}",
        rct.n_rows(),
        provenance.len(),
        report.total_shortfall()
    );
    Ok(FusionOutput {
        fused: FusedDataset {
            data,
            n_rct: rct.n_rows(),
            provenance,
        },
        report,
        plan,
        normalization: norm,
    })
}

fn match_cell(
    bucket: &BucketId,
    cell: &Cell,
    obs: &Dataset,
    sel: &FeatureSelection,
    norm: &Normalization,
    pseudo_norm: &[Vec<f64>],
    config: &FusionConfig,
) -> Result<(Vec<MatchRecord>, CellReport)> {
    let k = config.ratio;
    let mut report = CellReport {
        bucket: bucket.clone(),
        treatment: cell.treatment,
        n_pseudo: cell.pseudo.len(),
        n_candidates: cell.obs.len(),
        matched: 0,
        shortfall: 0,
        over_max_distance: 0,
        mean_distance: None,
    };
    let mut matches = Vec::new();
    if !cell.obs.is_empty() {
        let j = sel.len();
        let mut coords = Vec::with_capacity(cell.obs.len() * j);
        for &o in &cell.obs {
            coords.extend(norm.transform(sel, obs.row(o)));
        }
        let set = PointSet::weighted(j, coords, cell.obs.clone(), &sel.weights, config.metric)?;
        let index: Box<dyn NeighborIndex> = match config.backend {
            Backend::Brute => Box::new(set),
            Backend::Kdtree => Box::new(KdTree::build(&set, config.leaf_size, SplitRule::MaxSpread)?),
        };
        let mut used = vec![false; obs.n_rows()];
        let mut distance_sum = 0.0;
        for &p in &cell.pseudo {
            let found = match config.replacement {
                Replacement::With => index.knn(&pseudo_norm[p], k),
                Replacement::Without => index.knn_filtered(&pseudo_norm[p], k, &|id| !used[id]),
            };
            for (rank, nb) in found.into_iter().enumerate() {
                if config.max_distance.is_some_and(|r| nb.distance > r) {
                    report.over_max_distance += 1;
                    continue;
                }
                if config.replacement == Replacement::Without {
                    used[nb.id] = true;
                }
                distance_sum += nb.distance;
                matches.push(MatchRecord {
                    obs_row: nb.id,
                    pseudo_index: Some(p),
                    bucket: bucket.clone(),
                    treatment: cell.treatment,
                    rank,
                    distance: Some(nb.distance),
                });
            }
        }
        if !matches.is_empty() {
            report.mean_distance = Some(distance_sum / matches.len() as f64);
        }
    }
    report.matched = matches.len();
    report.shortfall = k * cell.pseudo.len() - matches.len();
    Ok((matches, report))
}

/// Control arm: `k·|rct_i|` observational rows per treatment `i`, drawn
/// uniformly without replacement.
pub fn random_fuse(rct: &Dataset, obs: &Dataset, ratio: usize, seed: u64) -> Result<FusedDataset> {
    check_schema(rct, obs)?;
    if ratio == 0 {
        return Err(Error::config("fusion ratio k must be >= 1"));
    }
    let rct_groups = rct.group_indices();
    let obs_groups = obs.group_indices();
    let mut data = output_schema(rct, obs);
    for i in 0..rct.n_rows() {
        append_row(&mut data, rct, i)?;
    }
    let mut provenance = Vec::new();
    for (t, rows) in rct_groups.iter().enumerate() {
        let needed = ratio * rows.len();
        if needed == 0 {
            continue;
        }
        let pool: &[usize] = obs_groups.get(t).map_or(&[], Vec::as_slice);
        if pool.len() < needed {
            return Err(Error::InsufficientData {
                treatment: t as u32,
                needed,
                available: pool.len(),
            });
        }
        let mut rng = rng::stream(seed, "random-fuse", t as u64);
        let mut picked: Vec<usize> = index::sample(&mut rng, pool.len(), needed)
            .into_iter()
            .map(|p| pool[p])
            .collect();
        picked.sort_unstable();
        for o in picked {
            append_row(&mut data, obs, o)?;
            provenance.push(MatchRecord {
                obs_row: o,
                pseudo_index: None,
                bucket: Vec::new(),
                treatment: t as u32,
                rank: 0,
                distance: None,
            });
        }
    }
    Ok(FusedDataset {
        data,
        n_rct: rct.n_rows(),
        provenance,
    })
}

/// Per-treatment mean of the selected columns.
pub fn group_means(data: &Dataset, sel: &FeatureSelection) -> Vec<Option<Vec<f64>>> {
    data.group_indices()
        .iter()
        .map(|rows| {
            (!rows.is_empty()).then(|| {
                let mut m = vec![0.0; sel.len()];
                for &i in rows {
                    for (acc, v) in m.iter_mut().zip(sel.project(data.row(i))) {
                        *acc += v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= rows.len() as f64);
                m
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSmd {
    pub a: u32,
    pub b: u32,
    /// `None` when the pooled SD is zero but the means differ.
    pub smd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSmd {
    pub column: usize,
    pub pairs: Vec<PairSmd>,
    pub max: f64,
    pub mean: f64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmdReport {
    pub features: Vec<FeatureSmd>,
}

impl SmdReport {
    /// Mean SMD over features and treatment pairs (flagged pairs excluded).
    pub fn mean(&self) -> f64 {
        let vals: Vec<f64> = self
            .features
            .iter()
            .flat_map(|f| f.pairs.iter().filter_map(|p| p.smd))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn max(&self) -> f64 {
        self.features.iter().map(|f| f.max).fold(0.0, f64::max)
    }
}

/// `|mean_a − mean_b| / sqrt((var_a + var_b) / 2)` for every selected
/// feature and treatment pair.
pub fn smd_report(data: &Dataset, columns: &[usize]) -> Result<SmdReport> {
    let groups: Vec<(u32, Vec<usize>)> = data
        .group_indices()
        .into_iter()
        .enumerate()
        .filter(|(_, g)| !g.is_empty())
        .map(|(t, g)| (t as u32, g))
        .collect();
    if groups.len() < 2 {
        return Err(Error::invalid("SMD needs at least two non-empty treatment groups"));
    }
    if let Some(c) = columns.iter().find(|&&c| c >= data.n_features()) {
        return Err(Error::config(format!("column {c} out of range")));
    }
    let moments = |rows: &[usize], c: usize| {
        let n = rows.len() as f64;
        let mean = rows.iter().map(|&i| data.value(i, c)).sum::<f64>() / n;
        let var = if rows.len() > 1 {
            rows.iter().map(|&i| (data.value(i, c) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var)
    };
    let features = columns
        .iter()
        .map(|&c| {
            let stats: Vec<(f64, f64)> = groups.iter().map(|(_, g)| moments(g, c)).collect();
            let mut pairs = Vec::new();
            for a in 0..groups.len() {
                for b in a + 1..groups.len() {
                    let (ma, va) = stats[a];
                    let (mb, vb) = stats[b];
                    let pooled = ((va + vb) / 2.0).sqrt();
                    let diff = (ma - mb).abs();
                    let smd = if pooled > 0.0 {
                        Some(diff / pooled)
                    } else if diff == 0.0 {
                        Some(0.0)
                    } else {
                        None
                    };
                    pairs.push(PairSmd {
                        a: groups[a].0,
                        b: groups[b].0,
                        smd,
                    });
                }
            }
            let vals: Vec<f64> = pairs.iter().filter_map(|p| p.smd).collect();
            FeatureSmd {
                column: c,
                max: vals.iter().copied().fold(0.0, f64::max),
                mean: if vals.is_empty() {
                    0.0
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                },
                flagged: pairs.len() - vals.len(),
                pairs,
            }
        })
        .collect();
    Ok(SmdReport { features })
}
