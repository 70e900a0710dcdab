//! Column-oriented tabular data shared by every stage of the pipeline.
//!
//! A row is a covariate vector, a treatment id (0 is the control arm), a
//! binary outcome and a source tag. Synthetic rows may also carry their true
//! uplift. The CSV layout is
//!
//! ```text
//! <feature_0>,...,<feature_{j-1}>,t,y[,true_uplift],source
//! ```
//!
//! where every column before `t` is a covariate.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Rct,
    Obs,
    Gt,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Rct => "rct",
            Source::Obs => "obs",
            Source::Gt => "gt",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rct" => Ok(Source::Rct),
            "obs" => Ok(Source::Obs),
            "gt" => Ok(Source::Gt),
            other => Err(format!("unknown source tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    /// Row-major `n_rows × n_features`.
    features: Vec<f64>,
    treatment: Vec<u32>,
    outcome: Vec<u8>,
    source: Vec<Source>,
    true_uplift: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        features: Vec<f64>,
        treatment: Vec<u32>,
        outcome: Vec<u8>,
        source: Vec<Source>,
        true_uplift: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = treatment.len();
        let d = feature_names.len();
        if features.len() != n * d {
            return Err(Error::Dimension {
                expected: n * d,
                got: features.len(),
            });
        }
        for len in [outcome.len(), source.len()]
            .into_iter()
            .chain(true_uplift.as_ref().map(Vec::len))
        {
            if len != n {
                return Err(Error::Dimension { expected: n, got: len });
            }
        }
        if let Some(bad) = outcome.iter().position(|&y| y > 1) {
            return Err(Error::invalid(format!("row {bad}: outcome must be 0 or 1")));
        }
        Ok(Dataset {
            feature_names,
            features,
            treatment,
            outcome,
            source,
            true_uplift,
        })
    }

    /// An empty dataset with the given schema.
    pub fn empty(feature_names: Vec<String>, with_uplift: bool) -> Self {
        Dataset {
            feature_names,
            features: Vec::new(),
            treatment: Vec::new(),
            outcome: Vec::new(),
            source: Vec::new(),
            true_uplift: with_uplift.then(Vec::new),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.treatment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatment.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // not chunks_exact: a zero-feature dataset still has rows
        let d = self.n_features();
        (0..self.n_rows()).map(move |i| &self.features[i * d..(i + 1) * d])
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.features[row * self.n_features() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.rows().map(|r| r[col]).collect()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn treatment(&self, i: usize) -> u32 {
        self.treatment[i]
    }

    pub fn treatments(&self) -> &[u32] {
        &self.treatment
    }

    pub fn outcome(&self, i: usize) -> u8 {
        self.outcome[i]
    }

    pub fn outcomes(&self) -> &[u8] {
        &self.outcome
    }

    pub fn source(&self, i: usize) -> Source {
        self.source[i]
    }

    pub fn sources(&self) -> &[Source] {
        &self.source
    }

    pub fn true_uplift(&self) -> Option<&[f64]> {
        self.true_uplift.as_deref()
    }

    /// Number of treatment arms, `max id + 1`.
    pub fn n_treatments(&self) -> usize {
        self.treatment.iter().max().map_or(0, |&t| t as usize + 1)
    }

    /// Row indices grouped by treatment id, indexed `0..n_treatments()`.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_treatments()];
        for (i, &t) in self.treatment.iter().enumerate() {
            groups[t as usize].push(i);
        }
        groups
    }

    pub fn push_row(
        &mut self,
        x: &[f64],
        t: u32,
        y: u8,
        source: Source,
        true_uplift: Option<f64>,
    ) -> Result<()> {
        if x.len() != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        if y > 1 {
            return Err(Error::invalid("outcome must be 0 or 1"));
        }
        match (&mut self.true_uplift, true_uplift) {
            (Some(col), Some(u)) => col.push(u),
            (None, None) => {}
            (Some(_), None) => return Err(Error::invalid("row is missing true_uplift")),
            (None, Some(_)) => return Err(Error::invalid("dataset has no true_uplift column")),
        }
        self.features.extend_from_slice(x);
        self.treatment.push(t);
        self.outcome.push(y);
        self.source.push(source);
        Ok(())
    }

    /// Copy row `i` of `other` (same schema) onto the end of `self`.
    pub fn push_from(&mut self, other: &Dataset, i: usize) -> Result<()> {
        self.push_row(
            other.row(i),
            other.treatment(i),
            other.outcome(i),
            other.source(i),
            other.true_uplift().map(|u| u[i]),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.n_features();
        let mut features = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            feature_names: self.feature_names.clone(),
            features,
            treatment: indices.iter().map(|&i| self.treatment[i]).collect(),
            outcome: indices.iter().map(|&i| self.outcome[i]).collect(),
            source: indices.iter().map(|&i| self.source[i]).collect(),
            true_uplift: self
                .true_uplift
                .as_ref()
                .map(|u| indices.iter().map(|&i| u[i]).collect()),
        }
    }

    /// Drop the true-uplift column (e.g. before mixing with rows that lack it).
    pub fn without_uplift(mut self) -> Dataset {
        self.true_uplift = None;
        self
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.extend(["t", "y"]);
        if self.true_uplift.is_some() {
            header.push("true_uplift");
        }
        header.push("source");
        w.write_record(&header)?;

        let mut record: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            record.extend(self.row(i).iter().map(|v| format_f64(*v)));
            record.push(self.treatment[i].to_string());
            record.push(self.outcome[i].to_string());
            if let Some(u) = &self.true_uplift {
                record.push(format_f64(u[i]));
            }
            record.push(self.source[i].to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path.as_ref())?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(reader: R, source_name: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        let missing = |col: &str| Error::Parse {
            source_name: source_name.to_owned(),
            line: 1,
            column: col.to_owned(),
            message: format!("header has no {col:?} column"),
        };
        let t_col = header.iter().position(|h| h == "t").ok_or_else(|| missing("t"))?;
        let y_col = header.iter().position(|h| h == "y").ok_or_else(|| missing("y"))?;
        let s_col = header
            .iter()
            .position(|h| h == "source")
            .ok_or_else(|| missing("source"))?;
        let u_col = header.iter().position(|h| h == "true_uplift");
        let feature_names: Vec<String> = header[..t_col].to_vec();
        let mut data = Dataset::empty(feature_names, u_col.is_some());

        let mut x = Vec::with_capacity(t_col);
        for record in r.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            let parse_err = |col: usize, message: String| Error::Parse {
                source_name: source_name.to_owned(),
                line,
                column: header.get(col).cloned().unwrap_or_default(),
                message,
            };
            if record.len() != header.len() {
                return Err(parse_err(
                    record.len().min(header.len().saturating_sub(1)),
                    format!("expected {} fields, found {}", header.len(), record.len()),
                ));
            }
            x.clear();
            for c in 0..t_col {
                let v: f64 = record[c]
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(c, format!("{e}: {:?}", &record[c])))?;
                x.push(v);
            }
            let t: u32 = record[t_col]
                .trim()
                .parse()
                .map_err(|e| parse_err(t_col, format!("{e}: {:?}", &record[t_col])))?;
            let y: u8 = match record[y_col].trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(parse_err(y_col, format!("outcome must be 0 or 1, got {other:?}"))),
            };
            let u = match u_col {
                Some(c) => Some(
                    record[c]
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(c, format!("{e}: {:?}", &record[c])))?,
                ),
                None => None,
            };
            let s: Source = record[s_col].trim().parse().map_err(|e| parse_err(s_col, e))?;
            data.push_row(&x, t, y, s, u)?;
        }
        Ok(data)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), &path.display().to_string())
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

pub fn default_feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("x_{j}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        Dataset::new(
            default_feature_names(2),
            vec![1.0, 2.5, -0.125, 1e-17],
            vec![0, 1],
            vec![1, 0],
            vec![Source::Rct, Source::Obs],
            Some(vec![0.25, -0.1]),
        )
        .unwrap()
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x_0,x_1,t,y,true_uplift,source\n"));
        let back = Dataset::read_csv(&buf[..], "mem").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn malformed_value_reports_location() {
        let text = "x_0,t,y,source\n1.0,0,1,rct\nabc,1,0,obs\n";
        let err = Dataset::read_csv(text.as_bytes(), "bad.csv").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "x_0");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn bad_outcome_rejected() {
        let text = "x_0,t,y,source\n1.0,0,2,rct\n";
        let err = Dataset::read_csv(text.as_bytes(), "bad.csv").unwrap_err();
        assert!(matches!(err, Error::Parse { ref column, .. } if column == "y"));
    }

    #[test]
    fn length_mismatch_rejected() {
        let err = Dataset::new(
            default_feature_names(1),
            vec![1.0, 2.0],
            vec![0],
            vec![1],
            vec![Source::Rct],
            None,
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn groups_and_subset() {
        let d = sample();
        assert_eq!(d.group_indices(), vec![vec![0], vec![1]]);
        let s = d.subset(&[1]);
        assert_eq!(s.row(0), &[-0.125, 1e-17]);
        assert_eq!(s.true_uplift().unwrap(), &[-0.1]);
    }
}
