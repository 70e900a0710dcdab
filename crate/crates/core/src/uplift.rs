//! T-learner uplift model: one L2-regularised logistic regression per
//! treatment arm, uplift = `p(t, x) − p(0, x)`.
//!
//! Features are standardised with statistics of the whole training set before
//! any arm is fitted. Each arm minimises
//!
//! ```text
//! (1/n) Σ [log(1 + e^z) − y·z] + (λ/2)‖w‖²,   z = b + w·x
//! ```
//!
//! by full-batch gradient descent. A step that would raise the loss is
//! rejected and the learning rate halved, so the accepted loss sequence never
//! increases. Arms whose outcomes are all 0 or all 1 fall back to the Laplace
//! estimate `(Σy + 1) / (n + 2)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{format_f64, Dataset};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub learning_rate: f64,
    pub l2: f64,
    pub max_epochs: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    /// Seeds the (tiny) random initial weights.
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            learning_rate: 1.0,
            l2: 0.01,
            max_epochs: 2000,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.l2 >= 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::config(
                "learner needs learning_rate > 0, l2 >= 0 and tolerance >= 0",
            ));
        }
        Ok(())
    }
}

/// Per-column centring and scaling fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let d = data.n_features();
        let n = data.n_rows().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in data.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in data.rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn transform_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s));
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Logistic model on standardised inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Logistic {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl Logistic {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }
}

/// Regularised mean log-loss and its gradient `(∂/∂w, ∂/∂b)`.
/// `rows` is row-major with `weights.len()` columns.
pub fn loss_and_gradient(rows: &[f64], y: &[u8], model: &Logistic, l2: f64) -> (f64, Vec<f64>, f64) {
    let d = model.weights.len();
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; d];
    let mut gb = 0.0;
    for (x, &yi) in rows.chunks_exact(d.max(1)).zip(y) {
        let x = &x[..d];
        let z = model.score(x);
        loss += softplus(z) - f64::from(yi) * z;
        let r = sigmoid(z) - f64::from(yi);
        gb += r;
        for (g, v) in gw.iter_mut().zip(x) {
            *g += r * v;
        }
    }
    let penalty: f64 = model.weights.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
    for (g, w) in gw.iter_mut().zip(&model.weights) {
        *g = *g / n + l2 * w;
    }
    (loss / n + penalty, gw, gb / n)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArmModel {
    Logistic(Logistic),
    /// Laplace-smoothed rate for single-class arms.
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArmTrainLog {
    pub rows: usize,
    pub epochs: usize,
    pub rate_halvings: usize,
    /// Accepted loss after each epoch, starting with the initial loss.
    pub losses: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TLearnerModel {
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub hyper: Hyper,
    /// Indexed by treatment id; `None` for arms absent from training data.
    pub arms: Vec<Option<ArmModel>>,
}

/// Gradient descent for one arm on already standardised rows.
pub fn fit_logistic(rows: &[f64], y: &[u8], d: usize, hyper: &Hyper, stream: u64) -> (Logistic, ArmTrainLog) {
    let mut rng = rng::stream(hyper.seed, "learner/init", stream);
    let mut model = Logistic {
        intercept: 0.0,
        weights: (0..d).map(|_| 1e-3 * rng.sample::<f64, _>(StandardNormal)).collect(),
    };
    let mut log = ArmTrainLog {
        rows: y.len(),
        ..Default::default()
    };
    let mut lr = hyper.learning_rate;
    let (mut loss, mut gw, mut gb) = loss_and_gradient(rows, y, &model, hyper.l2);
    log.losses.push(loss);
    while log.epochs < hyper.max_epochs {
        let gnorm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if gnorm < hyper.tolerance {
            break;
        }
        let candidate = Logistic {
            intercept: model.intercept - lr * gb,
            weights: model.weights.iter().zip(&gw).map(|(w, g)| w - lr * g).collect(),
        };
        let (c_loss, c_gw, c_gb) = loss_and_gradient(rows, y, &candidate, hyper.l2);
        if c_loss > loss || !c_loss.is_finite() {
            lr /= 2.0;
            log.rate_halvings += 1;
            log::trace!("loss rose to {c_loss}, halving learning rate to {lr}");
            if lr < 1e-12 {
                break;
            }
            continue;
        }
        model = candidate;
        loss = c_loss;
        gw = c_gw;
        gb = c_gb;
        log.epochs += 1;
        log.losses.push(loss);
    }
    (model, log)
}

impl TLearnerModel {
    pub fn fit(train: &Dataset, hyper: &Hyper) -> Result<(Self, Vec<ArmTrainLog>)> {
        hyper.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let standardizer = Standardizer::fit(train);
        let d = train.n_features();
        let groups = train.group_indices();
        let fitted: Vec<Option<(ArmModel, ArmTrainLog)>> = groups
            .par_iter()
            .enumerate()
            .map(|(t, rows)| {
                if rows.is_empty() {
                    return None;
                }
                let y: Vec<u8> = rows.iter().map(|&i| train.outcome(i)).collect();
                let positives = y.iter().filter(|&&v| v == 1).count();
                if positives == 0 || positives == y.len() {
                    let p = (positives as f64 + 1.0) / (y.len() as f64 + 2.0);
                    log::warn!(
                        "treatment {t}: all {} outcomes equal {}, using constant p = {p}",
                        y.len(),
                        u8::from(positives > 0)
                    );
                    let log = ArmTrainLog {
                        rows: y.len(),
                        degenerate: true,
                        ..Default::default()
                    };
                    return Some((ArmModel::Constant(p), log));
                }
                let mut x = Vec::with_capacity(rows.len() * d);
                let mut buf = Vec::with_capacity(d);
                for &i in rows {
                    standardizer.transform_into(train.row(i), &mut buf);
                    x.extend_from_slice(&buf);
                }
                let (model, log) = fit_logistic(&x, &y, d, hyper, t as u64);
                log::debug!(
                    "treatment {t}: {} rows, {} epochs, loss {:.6}, {} halvings",
                    log.rows,
                    log.epochs,
                    log.losses.last().copied().unwrap_or(f64::NAN),
                    log.rate_halvings
                );
                Some((ArmModel::Logistic(model), log))
            })
            .collect();
        let mut arms = Vec::with_capacity(fitted.len());
        let mut logs = Vec::with_capacity(fitted.len());
        for f in fitted {
            match f {
                Some((m, l)) => {
                    arms.push(Some(m));
                    logs.push(l);
                }
                None => {
                    arms.push(None);
                    logs.push(ArmTrainLog::default());
                }
            }
        }
        Ok((
            TLearnerModel {
                feature_names: train.feature_names().to_vec(),
                standardizer,
                hyper: hyper.clone(),
                arms,
            },
            logs,
        ))
    }

    fn arm(&self, t: u32) -> Result<&ArmModel> {
        self.arms
            .get(t as usize)
            .and_then(Option::as_ref)
            .ok_or(Error::UnknownTreatment(t))
    }

    pub fn has_treatment(&self, t: u32) -> bool {
        self.arm(t).is_ok()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// `P(Y = 1 | t, x)`, strictly inside (0, 1).
    pub fn predict_outcome(&self, t: u32, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let arm = self.arm(t)?;
        let mut buf = Vec::with_capacity(x.len());
        self.standardizer.transform_into(x, &mut buf);
        Ok(Self::arm_prob(arm, &buf))
    }

    fn arm_prob(arm: &ArmModel, z: &[f64]) -> f64 {
        let p = match arm {
            ArmModel::Logistic(m) => sigmoid(m.score(z)),
            ArmModel::Constant(p) => *p,
        };
        p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
    }

    /// `p(t, x) − p(0, x)`.
    pub fn predict_uplift(&self, t: u32, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let (treated, control) = (self.arm(t)?, self.arm(0)?);
        let mut buf = Vec::with_capacity(x.len());
        self.standardizer.transform_into(x, &mut buf);
        Ok(Self::arm_prob(treated, &buf) - Self::arm_prob(control, &buf))
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format_f64(*x)).collect::<Vec<_>>().join("\t");
        let mut s = String::new();
        let _ = writeln!(s, "psm-fusion-tlearner\t1");
        let _ = writeln!(s, "features\t{}", self.feature_names.join("\t"));
        let _ = writeln!(s, "mean\t{}", join(&self.standardizer.mean));
        let _ = writeln!(s, "scale\t{}", join(&self.standardizer.scale));
        let h = &self.hyper;
        let _ = writeln!(
            s,
            "hyper\tlearning_rate={}\tl2={}\tmax_epochs={}\ttolerance={}\tseed={}",
            format_f64(h.learning_rate),
            format_f64(h.l2),
            h.max_epochs,
            format_f64(h.tolerance),
            h.seed
        );
        for (t, arm) in self.arms.iter().enumerate() {
            match arm {
                None => {}
                Some(ArmModel::Constant(p)) => {
                    let _ = writeln!(s, "arm\t{t}\tconstant\t{}", format_f64(*p));
                }
                Some(ArmModel::Logistic(m)) => {
                    let _ = writeln!(s, "arm\t{t}\tlogistic\t{}", format_f64(m.intercept));
                    let _ = writeln!(s, "weights\t{}", join(&m.weights));
                }
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            source_name: source_name.to_owned(),
            line: line as u64 + 1,
            column: String::new(),
            message: msg,
        };
        let mut lines = text.lines().enumerate().peekable();
        let mut next = |want: &str| -> Result<(usize, Vec<&str>)> {
            let (no, line) = lines.next().ok_or_else(|| err(0, format!("missing {want:?} line")))?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields[0] != want {
                return Err(err(no, format!("expected {want:?}, found {:?}", fields[0])));
            }
            Ok((no, fields))
        };
        let floats = |no: usize, fields: &[&str]| -> Result<Vec<f64>> {
            fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| err(no, format!("{e}: {f:?}"))))
                .collect()
        };

        let (no, header) = next("psm-fusion-tlearner")?;
        if header.get(1) != Some(&"1") {
            return Err(err(no, "unsupported model format version".into()));
        }
        let (_, names) = next("features")?;
        let feature_names: Vec<String> = names[1..].iter().map(|s| s.to_string()).collect();
        let (no, mean) = next("mean")?;
        let mean = floats(no, &mean[1..])?;
        let (no, scale) = next("scale")?;
        let scale = floats(no, &scale[1..])?;
        if mean.len() != feature_names.len() || scale.len() != feature_names.len() {
            return Err(err(no, "standardizer length differs from feature count".into()));
        }
        let (no, hyper_fields) = next("hyper")?;
        let mut hyper = Hyper::default();
        for kv in &hyper_fields[1..] {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| err(no, format!("malformed hyperparameter {kv:?}")))?;
            let bad = |e: &dyn std::fmt::Display| err(no, format!("{k}: {e}"));
            match k {
                "learning_rate" => hyper.learning_rate = v.parse().map_err(|e| bad(&e))?,
                "l2" => hyper.l2 = v.parse().map_err(|e| bad(&e))?,
                "max_epochs" => hyper.max_epochs = v.parse().map_err(|e| bad(&e))?,
                "tolerance" => hyper.tolerance = v.parse().map_err(|e| bad(&e))?,
                "seed" => hyper.seed = v.parse().map_err(|e| bad(&e))?,
                other => return Err(err(no, format!("unknown hyperparameter {other:?}"))),
            }
        }

        let mut arms: Vec<Option<ArmModel>> = Vec::new();
        loop {
            let (no, line) = lines.next().ok_or_else(|| err(0, "missing \"end\" line".into()))?;
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[0] {
                "end" => break,
                "arm" if fields.len() == 4 => {
                    let t: usize = fields[1].parse().map_err(|e| err(no, format!("treatment: {e}")))?;
                    let value: f64 = fields[3].parse().map_err(|e| err(no, format!("{e}")))?;
                    let arm = match fields[2] {
                        "constant" => ArmModel::Constant(value),
                        "logistic" => {
                            let (wno, w) = lines
                                .next()
                                .ok_or_else(|| err(no, "missing weights line".into()))?;
                            let wf: Vec<&str> = w.split('\t').collect();
                            if wf[0] != "weights" {
                                return Err(err(wno, "expected \"weights\"".into()));
                            }
                            let weights = floats(wno, &wf[1..])?;
                            if weights.len() != feature_names.len() {
                                return Err(err(wno, "weight count differs from feature count".into()));
                            }
                            ArmModel::Logistic(Logistic {
                                intercept: value,
                                weights,
                            })
                        }
                        other => return Err(err(no, format!("unknown arm kind {other:?}"))),
                    };
                    if arms.len() <= t {
                        arms.resize(t + 1, None);
                    }
                    arms[t] = Some(arm);
                }
                other => return Err(err(no, format!("unexpected line {other:?}"))),
            }
        }
        Ok(TLearnerModel {
            feature_names,
            standardizer: Standardizer { mean, scale },
            hyper,
            arms,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}

/// Predicted uplift and own-arm outcome probability for every row with
/// treatment `t` or control.
pub fn predict_rows(model: &TLearnerModel, data: &Dataset, t: u32, rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if data.n_features() != model.n_features() {
        return Err(Error::Dimension {
            expected: model.n_features(),
            got: data.n_features(),
        });
    }
    let treated = model.arm(t)?;
    let control = model.arm(0)?;
    let mut uplift = Vec::with_capacity(rows.len());
    let mut prob = Vec::with_capacity(rows.len());
    let mut buf = Vec::with_capacity(data.n_features());
    for &i in rows {
        model.standardizer.transform_into(data.row(i), &mut buf);
        let p1 = TLearnerModel::arm_prob(treated, &buf);
        let p0 = TLearnerModel::arm_prob(control, &buf);
        uplift.push(p1 - p0);
        prob.push(if data.treatment(i) == t { p1 } else { p0 });
    }
    Ok((uplift, prob))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{default_feature_names, Source};
    use proptest::prelude::*;

    fn dataset(features: Vec<f64>, d: usize, t: Vec<u32>, y: Vec<u8>) -> Dataset {
        let n = t.len();
        Dataset::new(default_feature_names(d), features, t, y, vec![Source::Rct; n], None).unwrap()
    }

    fn constant_model(p1: f64, p0: f64) -> TLearnerModel {
        TLearnerModel {
            feature_names: default_feature_names(2),
            standardizer: Standardizer::identity(2),
            hyper: Hyper::default(),
            arms: vec![Some(ArmModel::Constant(p0)), Some(ArmModel::Constant(p1))],
        }
    }

    fn logistic_model(intercept: f64, weights: Vec<f64>) -> TLearnerModel {
        let d = weights.len();
        let arm = ArmModel::Logistic(Logistic { intercept, weights });
        TLearnerModel {
            feature_names: default_feature_names(d),
            standardizer: Standardizer::identity(d),
            hyper: Hyper::default(),
            arms: vec![Some(arm.clone()), Some(arm)],
        }
    }

    #[test]
    fn prediction_examples() {
        assert_eq!(logistic_model(0.0, vec![0.0, 0.0]).predict_outcome(1, &[3.0, 4.0]).unwrap(), 0.5);
        let p = logistic_model(1e6, vec![0.0, 0.0]).predict_outcome(0, &[0.0, 0.0]).unwrap();
        assert!(p > 1.0 - 1e-12 && p < 1.0);
        let p = logistic_model(0.0, vec![1.0, 0.0]).predict_outcome(0, &[2.0, -7.0]).unwrap();
        assert!((p - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-12);
        assert!((p - 0.8808).abs() < 1e-4);
        assert_eq!(logistic_model(0.3, vec![1.0, 2.0]).predict_uplift(1, &[0.5, 0.1]).unwrap(), 0.0);
        let u = constant_model(0.9, 0.4).predict_uplift(1, &[1.0, 2.0]).unwrap();
        assert!((u - 0.5).abs() < 1e-12);
        assert!(matches!(
            constant_model(0.9, 0.4).predict_outcome(2, &[0.0, 0.0]),
            Err(Error::UnknownTreatment(2))
        ));
        assert!(constant_model(0.9, 0.4).predict_outcome(0, &[0.0]).is_err());
    }

    #[test]
    fn separable_pair_is_regularised() {
        let data = dataset(vec![-1.0, 1.0], 1, vec![0, 0], vec![0, 1]);
        let (model, logs) = TLearnerModel::fit(&data, &Hyper::default()).unwrap();
        for x in [-1.0, 1.0] {
            let p = model.predict_outcome(0, &[x]).unwrap();
            assert!((0.02..=0.98).contains(&p), "p = {p}");
        }
        assert!(logs[0].losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_class_arm_uses_laplace() {
        let data = dataset(vec![0.0, 1.0, 2.0, 3.0, 4.0], 1, vec![1, 1, 1, 0, 0], vec![1, 1, 1, 0, 1]);
        let (model, logs) = TLearnerModel::fit(&data, &Hyper::default()).unwrap();
        assert!(logs[1].degenerate);
        let p = model.predict_outcome(1, &[10.0]).unwrap();
        assert!((p - 4.0 / 5.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_logistic_weights() {
        use rand::Rng;
        let n = 10_000;
        let w = [1.0, -0.8, 0.6];
        let b = -0.3;
        let mut rng = rng::stream(42, "test/logistic", 0);
        let mut feats = Vec::with_capacity(n * 3);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let z = b + w.iter().zip(&x).map(|(a, v)| a * v).sum::<f64>();
            y.push(u8::from(rng.gen::<f64>() < sigmoid(z)));
            feats.extend(x);
        }
        let data = dataset(feats, 3, vec![0; n], y);
        let hyper = Hyper {
            l2: 1e-4,
            ..Hyper::default()
        };
        let (model, _) = TLearnerModel::fit(&data, &hyper).unwrap();
        let Some(ArmModel::Logistic(m)) = &model.arms[0] else {
            panic!("expected a logistic arm")
        };
        for (j, truth) in w.iter().enumerate() {
            let raw = m.weights[j] / model.standardizer.scale[j];
            assert!((raw - truth).abs() <= 0.1 * truth.abs(), "w{j}: {raw} vs {truth}");
        }
    }

    #[test]
    fn mean_uplift_tracks_ground_truth() {
        use crate::dgp::{generate_cohort, Cohort, DgpConfig};
        let cfg = DgpConfig::paper_default();
        let gt = generate_cohort(&cfg, Cohort::GroundTruth, 100_000).unwrap().data;
        let (model, _) = TLearnerModel::fit(&gt, &Hyper::default()).unwrap();
        let rows: Vec<usize> = (0..gt.n_rows()).collect();
        let (u, _) = predict_rows(&model, &gt, 1, &rows).unwrap();
        let pred = u.iter().sum::<f64>() / u.len() as f64;
        let truth = gt.true_uplift().unwrap().iter().sum::<f64>() / gt.n_rows() as f64;
        assert!((pred - truth).abs() <= 0.03, "{pred} vs {truth}");
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        use crate::dgp::{generate_cohort, Cohort, DgpConfig};
        let data = generate_cohort(&DgpConfig::paper_default(), Cohort::BiasedRct, 400).unwrap().data;
        let hyper = Hyper {
            seed: 9,
            ..Hyper::default()
        };
        let (a, _) = TLearnerModel::fit(&data, &hyper).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
        let (b, _) = pool.install(|| TLearnerModel::fit(&data, &hyper).unwrap());
        assert_eq!(a, b);
        let text = a.to_text();
        let back = TLearnerModel::from_text(&text, "model").unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_model_reports_line() {
        let text = constant_model(0.9, 0.4).to_text().replace("constant\t0.4", "constant\tabc");
        match TLearnerModel::from_text(&text, "m.txt") {
            Err(Error::Parse { line, source_name, .. }) => {
                assert_eq!(source_name, "m.txt");
                assert_eq!(line, 6);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(TLearnerModel::from_text("psm-fusion-tlearner\t2\n", "m").is_err());
    }

    /// Central-difference gradient of the regularised loss.
    fn numeric_gradient(rows: &[f64], y: &[u8], m: &Logistic, l2: f64) -> (Vec<f64>, f64) {
        let h = 1e-6;
        let f = |m: &Logistic| loss_and_gradient(rows, y, m, l2).0;
        let mut gw = Vec::new();
        for j in 0..m.weights.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            plus.weights[j] += h;
            minus.weights[j] -= h;
            gw.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        let mut plus = m.clone();
        let mut minus = m.clone();
        plus.intercept += h;
        minus.intercept -= h;
        (gw, (f(&plus) - f(&minus)) / (2.0 * h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn analytic_gradient_matches_finite_differences(
            d in 1usize..5,
            n in 2usize..12,
            seed in any::<u64>(),
            l2 in 0.0f64..0.5,
        ) {
            use rand::Rng;
            let mut r = rng::stream(seed, "test/grad", 0);
            let rows: Vec<f64> = (0..n * d).map(|_| r.gen_range(-2.0..2.0)).collect();
            let y: Vec<u8> = (0..n).map(|_| u8::from(r.gen::<bool>())).collect();
            let m = Logistic {
                intercept: r.gen_range(-1.0..1.0),
                weights: (0..d).map(|_| r.gen_range(-1.5..1.5)).collect(),
            };
            let (_, gw, gb) = loss_and_gradient(&rows, &y, &m, l2);
            let (nw, nb) = numeric_gradient(&rows, &y, &m, l2);
            for (a, b) in gw.iter().chain([&gb]).zip(nw.iter().chain([&nb])) {
                prop_assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-2), "{} vs {}", a, b);
            }
        }

        #[test]
        fn loss_never_increases_and_predictions_are_bounded(seed in any::<u64>(), lr in 0.5f64..20.0) {
            use rand::Rng;
            let mut r = rng::stream(seed, "test/train", 0);
            let n = 60;
            let feats: Vec<f64> = (0..n * 2).map(|_| r.gen_range(-3.0..3.0)).collect();
            let t: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
            let y: Vec<u8> = (0..n).map(|i| u8::from(feats[2 * i] + r.gen_range(-1.0..1.0) > 0.0)).collect();
            let data = dataset(feats, 2, t, y);
            let hyper = Hyper { learning_rate: lr, max_epochs: 200, ..Hyper::default() };
            let (model, logs) = TLearnerModel::fit(&data, &hyper).unwrap();
            for log in &logs {
                prop_assert!(log.losses.windows(2).all(|w| w[1] <= w[0]));
            }
            for x in [[-50.0, 50.0], [0.0, 0.0], [50.0, -50.0]] {
                for t in 0..2 {
                    let p = model.predict_outcome(t, &x).unwrap();
                    prop_assert!(p > 0.0 && p < 1.0);
                }
                let u = model.predict_uplift(1, &x).unwrap();
                prop_assert!(u > -1.0 && u < 1.0);
            }
        }
    }
}
