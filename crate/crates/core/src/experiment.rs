//! End-to-end simulation study: generate, split, fuse, train, evaluate and
//! aggregate across repetitions.
//!
//! All randomness hangs off one master seed. Repetition `r` derives its own
//! seed, and from it named sub-seeds for the generator, the train/test split,
//! the random-selection arm and the learner, so any stage can be replayed in
//! isolation (the CLI subcommands do exactly that).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_f64, Dataset};
use crate::dgp::{self, DgpConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::metrics::{self, MapeMode, MetricsReport};
use crate::rng;
use crate::uplift::{Hyper, TLearnerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepetitionSeeds {
    pub repetition: usize,
    pub dgp: u64,
    pub split: u64,
    pub random_fuse: u64,
    pub learner: u64,
}

impl RepetitionSeeds {
    pub fn new(master: u64, repetition: usize) -> Self {
        let rep = rng::derive_seed(master, &format!("repetition/{repetition}"));
        RepetitionSeeds {
            repetition,
            dgp: rng::derive_seed(rep, "dgp"),
            split: rng::derive_seed(rep, "split"),
            random_fuse: rng::derive_seed(rep, "random-fuse"),
            learner: rng::derive_seed(rep, "learner"),
        }
    }
}

/// Shuffle row indices with `seed` and cut at `round(fraction·n)`. Both parts
/// keep the original row order.
pub fn train_test_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("train fraction must be in (0, 1)"));
    }
    let n = data.n_rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, "split", 0));
    let cut = ((n as f64) * fraction).round() as usize;
    let (train, test) = idx.split_at(cut);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySettings {
    pub ratios: Vec<usize>,
    pub repetitions: usize,
    pub master_seed: u64,
    pub train_fraction: f64,
    pub grid: usize,
    pub per_sample_mape: bool,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            ratios: vec![1, 3, 5],
            repetitions: 10,
            master_seed: 2025,
            train_fraction: 0.8,
            grid: metrics::DEFAULT_GRID,
            per_sample_mape: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: StudySettings,
    pub dgp: DgpConfig,
    /// `ratio` here is ignored; each entry of `experiment.ratios` is used.
    pub fusion: FusionConfig,
    #[serde(default)]
    pub learner: Hyper,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.experiment;
        if s.ratios.is_empty() || s.ratios.contains(&0) {
            return Err(Error::config("experiment.ratios must be a non-empty list of positive integers"));
        }
        if s.repetitions == 0 {
            return Err(Error::config("experiment.repetitions must be >= 1"));
        }
        if !(s.train_fraction > 0.0 && s.train_fraction < 1.0) {
            return Err(Error::config("experiment.train_fraction must be in (0, 1)"));
        }
        self.dgp.validate()?;
        let mut f = self.fusion.clone();
        f.ratio = 1;
        f.validate(self.dgp.covariates.dim())?;
        self.learner.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn paper_default() -> Self {
        let dgp = DgpConfig::paper_default();
        ExperimentConfig {
            experiment: StudySettings::default(),
            fusion: default_fusion(&dgp),
            dgp,
            learner: Hyper::default(),
        }
    }

    /// Generator config for one repetition.
    pub fn dgp_for(&self, seeds: &RepetitionSeeds) -> DgpConfig {
        let mut d = self.dgp.clone();
        d.seed = seeds.dgp;
        d
    }

    pub fn fusion_for(&self, ratio: usize) -> FusionConfig {
        let mut f = self.fusion.clone();
        f.ratio = ratio;
        f
    }

    pub fn learner_for(&self, seeds: &RepetitionSeeds) -> Hyper {
        let mut h = self.learner.clone();
        h.seed = seeds.learner;
        h
    }

    pub fn mape_mode(&self) -> MapeMode {
        if self.experiment.per_sample_mape {
            MapeMode::PerSample
        } else {
            MapeMode::Group
        }
    }
}

fn default_fusion(dgp: &DgpConfig) -> FusionConfig {
    use crate::fusion::{BucketColumn, BucketSpec, FeatureSelection};
    // the covariates that drive the outcome or the assignment, plus the
    // derived columns built from them; the bucketing key is matched exactly
    let columns: Vec<usize> = [2, 4, 5, 13, 15, 16]
        .into_iter()
        .filter(|&c| c < dgp.covariates.dim())
        .collect();
    FusionConfig {
        selection: FeatureSelection::new(columns),
        buckets: BucketSpec {
            columns: vec![BucketColumn::Discrete { column: 0 }],
        },
        ..FusionConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    Baseline,
    Random,
    Fused,
}

impl Arm {
    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Random => "random",
            Arm::Fused => "fused",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "random" => Ok(Arm::Random),
            "fused" => Ok(Arm::Fused),
            other => Err(format!("unknown arm {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TestSet {
    Biased,
    GroundTruth,
}

impl TestSet {
    pub fn as_str(self) -> &'static str {
        match self {
            TestSet::Biased => "biased",
            TestSet::GroundTruth => "ground_truth",
        }
    }
}

impl fmt::Display for TestSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "biased" => Ok(TestSet::Biased),
            "ground_truth" => Ok(TestSet::GroundTruth),
            other => Err(format!("unknown test set {other:?}")),
        }
    }
}

/// One trained model scored on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub repetition: usize,
    pub arm: Arm,
    /// 0 for the baseline.
    pub ratio: usize,
    pub test_set: TestSet,
    pub w_qini: f64,
    pub w_mape: Option<f64>,
    pub w_copc: f64,
    pub coverage: f64,
}

impl RunRecord {
    fn from_report(repetition: usize, arm: Arm, ratio: usize, test_set: TestSet, r: &MetricsReport) -> Self {
        RunRecord {
            repetition,
            arm,
            ratio,
            test_set,
            w_qini: r.w_qini,
            w_mape: r.w_mape,
            w_copc: r.w_copc,
            coverage: r.coverage,
        }
    }
}

/// Mean SMD over the selected features of one training set.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRecord {
    pub repetition: usize,
    /// `rct_train`, `fused`, `random`, `observational` or `ground_truth`.
    pub dataset: String,
    pub ratio: usize,
    pub mean_smd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionOutput {
    pub runs: Vec<RunRecord>,
    pub balance: Vec<BalanceRecord>,
    pub models: Vec<(Arm, usize, TLearnerModel)>,
}

#[allow(clippy::too_many_arguments)]
fn score(
    out: &mut Vec<RunRecord>,
    rep: usize,
    arm: Arm,
    ratio: usize,
    model: &TLearnerModel,
    test: &Dataset,
    gt: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let grid = cfg.experiment.grid;
    for (set, data) in [(TestSet::Biased, test), (TestSet::GroundTruth, gt)] {
        let e = metrics::evaluate(model, data, grid, cfg.mape_mode())?;
        out.push(RunRecord::from_report(rep, arm, ratio, set, &e.report));
    }
    Ok(())
}

/// Everything for one repetition, sequentially.
pub fn run_repetition(cfg: &ExperimentConfig, repetition: usize) -> Result<RepetitionOutput> {
    let seeds = RepetitionSeeds::new(cfg.experiment.master_seed, repetition);
    let t0 = Instant::now();
    let gen = dgp::generate(&cfg.dgp_for(&seeds))?;
    log::info!("rep {repetition}: generate {:.2?}", t0.elapsed());

    let (train, test) = train_test_split(&gen.biased_rct.data, cfg.experiment.train_fraction, seeds.split)?;
    let obs = &gen.observational.data;
    let gt = &gen.ground_truth.data;
    let hyper = cfg.learner_for(&seeds);
    let sel_cols = cfg.fusion.selection.columns.clone();

    let mut runs = Vec::new();
    let mut models = Vec::new();
    let mut balance = Vec::new();
    let mut smd = |name: &str, ratio: usize, data: &Dataset| -> Result<()> {
        balance.push(BalanceRecord {
            repetition,
            dataset: name.to_owned(),
            ratio,
            mean_smd: fusion::smd_report(data, &sel_cols)?.mean(),
        });
        Ok(())
    };
    smd("rct_train", 0, &train)?;
    smd("observational", 0, obs)?;
    smd("ground_truth", 0, gt)?;

    let t = Instant::now();
    let (baseline, _) = TLearnerModel::fit(&train, &hyper)?;
    score(&mut runs, repetition, Arm::Baseline, 0, &baseline, &test, gt, cfg)?;
    models.push((Arm::Baseline, 0, baseline));
    log::info!("rep {repetition}: baseline {:.2?}", t.elapsed());

    for &k in &cfg.experiment.ratios {
        let t = Instant::now();
        let fused = fusion::fuse(&train, obs, &cfg.fusion_for(k))?;
        log::info!(
            "rep {repetition}: fuse k={k} {:.2?} ({} matched, shortfall {})",
            t.elapsed(),
            fused.fused.n_matched(),
            fused.report.total_shortfall()
        );
        smd("fused", k, &fused.fused.data)?;
        let (model, _) = TLearnerModel::fit(&fused.fused.data, &hyper)?;
        score(&mut runs, repetition, Arm::Fused, k, &model, &test, gt, cfg)?;
        models.push((Arm::Fused, k, model));

        let random = fusion::random_fuse(&train, obs, k, seeds.random_fuse)?;
        smd("random", k, &random.data)?;
        let (model, _) = TLearnerModel::fit(&random.data, &hyper)?;
        score(&mut runs, repetition, Arm::Random, k, &model, &test, gt, cfg)?;
        models.push((Arm::Random, k, model));
        log::info!("rep {repetition}: k={k} train+evaluate {:.2?}", t.elapsed());
    }
    Ok(RepetitionOutput { runs, balance, models })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub runs: Vec<RunRecord>,
    pub balance: Vec<BalanceRecord>,
    pub models_trained: usize,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let start = Instant::now();
    let outputs: Vec<Result<RepetitionOutput>> = (0..cfg.experiment.repetitions)
        .into_par_iter()
        .map(|r| {
            run_repetition(cfg, r).inspect_err(|e| log::error!("repetition {r} failed: {e}"))
        })
        .collect();
    let mut result = ExperimentResult {
        runs: Vec::new(),
        balance: Vec::new(),
        models_trained: 0,
    };
    let mut failed = 0;
    let mut first_err = None;
    for o in outputs {
        match o {
            Ok(o) => {
                result.models_trained += o.models.len();
                result.runs.extend(o.runs);
                result.balance.extend(o.balance);
            }
            Err(e) => {
                failed += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(Error::invalid(format!("{failed} repetition(s) failed; first error: {e}")));
    }
    log::info!("experiment finished in {:.2?}", start.elapsed());
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Sample standard deviation (`n − 1`); 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSd {
                mean: f64::NAN,
                sd: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanSd { mean, sd, n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub arm: Arm,
    pub ratio: usize,
    pub test_set: TestSet,
    pub qini: MeanSd,
    pub mape: MeanSd,
    pub copc: MeanSd,
}

/// Across-repetition mean and SD per `(arm, ratio, test set)`.
pub fn summarize(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(TestSet, Arm, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        cells.entry((r.test_set, r.arm, r.ratio)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((test_set, arm, ratio), rs)| {
            let q: Vec<f64> = rs.iter().map(|r| r.w_qini).collect();
            let m: Vec<f64> = rs.iter().filter_map(|r| r.w_mape).collect();
            let c: Vec<f64> = rs.iter().map(|r| r.w_copc).collect();
            SummaryRow {
                arm,
                ratio,
                test_set,
                qini: MeanSd::of(&q),
                mape: MeanSd::of(&m),
                copc: MeanSd::of(&c),
            }
        })
        .collect()
}

impl ExperimentResult {
    pub fn summary(&self) -> Vec<SummaryRow> {
        summarize(&self.runs)
    }

    /// Per-repetition values of one cell, ordered by repetition.
    pub fn values(&self, arm: Arm, ratio: usize, test_set: TestSet, metric: fn(&RunRecord) -> Option<f64>) -> Vec<f64> {
        let mut rs: Vec<&RunRecord> = self
            .runs
            .iter()
            .filter(|r| r.arm == arm && r.ratio == ratio && r.test_set == test_set)
            .collect();
        rs.sort_by_key(|r| r.repetition);
        rs.into_iter().filter_map(metric).collect()
    }

    pub fn mean_smd(&self, dataset: &str, ratio: usize) -> Vec<f64> {
        let mut b: Vec<&BalanceRecord> = self
            .balance
            .iter()
            .filter(|b| b.dataset == dataset && b.ratio == ratio)
            .collect();
        b.sort_by_key(|b| b.repetition);
        b.into_iter().map(|b| b.mean_smd).collect()
    }

    pub fn write_all(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let file = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        write_runs_csv(&self.runs, file("runs.csv")?)?;
        write_summary_csv(&self.summary(), file("summary.csv")?)?;
        write_balance_csv(&self.balance, file("balance.csv")?)?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

pub fn write_runs_csv<W: Write>(runs: &[RunRecord], writer: W) -> Result<()> {
    let mut sorted: Vec<&RunRecord> = runs.iter().collect();
    sorted.sort_by_key(|r| (r.repetition, r.arm, r.ratio, r.test_set));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["repetition", "arm", "ratio", "test_set", "w_qini", "w_mape", "w_copc", "coverage"])?;
    for r in sorted {
        w.write_record([
            r.repetition.to_string(),
            r.arm.to_string(),
            r.ratio.to_string(),
            r.test_set.to_string(),
            format_f64(r.w_qini),
            opt(r.w_mape),
            format_f64(r.w_copc),
            format_f64(r.coverage),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs_csv<R: Read>(reader: R, source_name: &str) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Parse {
                source_name: source_name.to_owned(),
                line,
                column: header.get(i).cloned().unwrap_or_default(),
                message: "missing field".into(),
            })
        };
        let parse_err = |i: usize, msg: String| Error::Parse {
            source_name: source_name.to_owned(),
            line,
            column: header.get(i).cloned().unwrap_or_default(),
            message: msg,
        };
        let num = |i: usize| -> Result<f64> {
            let s = field(i)?;
            s.parse().map_err(|e| parse_err(i, format!("{e}: {s:?}")))
        };
        let mape = field(5)?;
        out.push(RunRecord {
            repetition: field(0)?.parse().map_err(|e| parse_err(0, format!("{e}")))?,
            arm: field(1)?.parse().map_err(|e| parse_err(1, e))?,
            ratio: field(2)?.parse().map_err(|e| parse_err(2, format!("{e}")))?,
            test_set: field(3)?.parse().map_err(|e| parse_err(3, e))?,
            w_qini: num(4)?,
            w_mape: if mape.is_empty() { None } else { Some(num(5)?) },
            w_copc: num(6)?,
            coverage: num(7)?,
        });
    }
    Ok(out)
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "test_set", "arm", "ratio", "n", "qini_mean", "qini_sd", "mape_mean", "mape_sd", "copc_mean", "copc_sd",
    ])?;
    for r in rows {
        w.write_record([
            r.test_set.to_string(),
            r.arm.to_string(),
            r.ratio.to_string(),
            r.qini.n.to_string(),
            format_f64(r.qini.mean),
            format_f64(r.qini.sd),
            format_f64(r.mape.mean),
            format_f64(r.mape.sd),
            format_f64(r.copc.mean),
            format_f64(r.copc.sd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_balance_csv<W: Write>(rows: &[BalanceRecord], writer: W) -> Result<()> {
    let mut sorted: Vec<&BalanceRecord> = rows.iter().collect();
    sorted.sort_by(|a, b| (a.repetition, &a.dataset, a.ratio).cmp(&(b.repetition, &b.dataset, b.ratio)));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["repetition", "dataset", "ratio", "mean_smd"])?;
    for b in sorted {
        w.write_record([
            b.repetition.to_string(),
            b.dataset.clone(),
            b.ratio.to_string(),
            format_f64(b.mean_smd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::paper_default();
        cfg.dgp.n_rct = 300;
        cfg.dgp.obs_multiplier = 10;
        cfg.dgp.ground_truth_multiplier = 5;
        cfg.experiment.repetitions = 2;
        cfg.experiment.ratios = vec![3];
        cfg.learner.max_epochs = 300;
        cfg
    }

    #[test]
    fn repetition_seeds_are_distinct_and_stable() {
        let a = RepetitionSeeds::new(7, 0);
        assert_eq!(a, RepetitionSeeds::new(7, 0));
        let all = [a.dgp, a.split, a.random_fuse, a.learner];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_ne!(a.dgp, RepetitionSeeds::new(7, 1).dgp);
        assert_ne!(a.dgp, RepetitionSeeds::new(8, 0).dgp);
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let cfg = small_config();
        let data = crate::dgp::generate_cohort(&cfg.dgp, crate::dgp::Cohort::BiasedRct, 1000)
            .unwrap()
            .data;
        let (train, test) = train_test_split(&data, 0.8, 3).unwrap();
        assert_eq!((train.n_rows(), test.n_rows()), (800, 200));
        let mut rows: Vec<&[f64]> = train.rows().chain(test.rows()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut orig: Vec<&[f64]> = data.rows().collect();
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, orig);
        assert_eq!(train_test_split(&data, 0.8, 3).unwrap().0, train);
        assert!(train_test_split(&data, 1.0, 3).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::paper_default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.clone();
        bad.experiment.ratios = vec![0];
        assert!(ExperimentConfig::from_toml_str(&bad.to_toml_string()).is_err());
    }

    #[test]
    fn counts_models_and_reports() {
        let mut cfg = small_config();
        cfg.experiment.repetitions = 3;
        let result = run_experiment(&cfg).unwrap();
        // baseline + fused + random per repetition, each scored on two test sets
        assert_eq!(result.models_trained, 9);
        assert_eq!(result.runs.len(), 18);
        for row in result.summary() {
            assert_eq!(row.qini.n, 3);
        }
    }

    #[test]
    fn runs_are_deterministic_across_thread_counts() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| run_experiment(&cfg).unwrap());
        let csv = |r: &ExperimentResult| {
            let mut v = Vec::new();
            write_runs_csv(&r.runs, &mut v).unwrap();
            v
        };
        assert_eq!(csv(&a), csv(&b));
    }

    #[test]
    fn summary_matches_manual_aggregation() {
        let result = run_experiment(&small_config()).unwrap();
        let mut buf = Vec::new();
        write_runs_csv(&result.runs, &mut buf).unwrap();
        let back = read_runs_csv(buf.as_slice(), "runs").unwrap();
        let mut sorted = result.runs.clone();
        sorted.sort_by_key(|r| (r.repetition, r.arm, r.ratio, r.test_set));
        assert_eq!(back, sorted);

        for row in summarize(&back) {
            let q: Vec<f64> = back
                .iter()
                .filter(|r| r.arm == row.arm && r.ratio == row.ratio && r.test_set == row.test_set)
                .map(|r| r.w_qini)
                .collect();
            let mean = q.iter().sum::<f64>() / q.len() as f64;
            let sd = (q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (q.len() - 1) as f64).sqrt();
            assert!((row.qini.mean - mean).abs() < 1e-15);
            assert!((row.qini.sd - sd).abs() < 1e-15);
        }
    }

    #[test]
    fn malformed_runs_report_location() {
        let text = "repetition,arm,ratio,test_set,w_qini,w_mape,w_copc,coverage\n0,fused,3,biased,abc,,1,1\n";
        match read_runs_csv(text.as_bytes(), "runs.csv") {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(column, "w_qini");
            }
            other => panic!("unexpected {other:?}"),
        }
        let text = "repetition,arm,ratio,test_set,w_qini,w_mape,w_copc,coverage\n0,magic,3,biased,1,,1,1\n";
        assert!(read_runs_csv(text.as_bytes(), "runs.csv").is_err());
    }

    #[test]
    fn mean_sd_edge_cases() {
        assert_eq!(MeanSd::of(&[2.0]).sd, 0.0);
        assert!(MeanSd::of(&[]).mean.is_nan());
        let m = MeanSd::of(&[1.0, 3.0]);
        assert_eq!((m.mean, m.sd), (2.0, 2f64.sqrt()));
    }
}
