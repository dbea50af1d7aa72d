//! Longitudinal dataset representation, covariate encoding, time rescaling and
//! CSV ingestion/export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One subject's time series and subject-level covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub times_raw: Vec<f64>,
    pub times_scaled: Vec<f64>,
    pub responses: Vec<f64>,
    pub covariates: Vec<f64>,
}

impl SubjectRecord {
    #[inline]
    pub fn n_obs(&self) -> usize {
        self.responses.len()
    }
}

/// Raw per-subject input before scaling.
#[derive(Debug, Clone)]
pub struct RawSubject {
    pub subject_id: String,
    pub times: Vec<f64>,
    pub responses: Vec<f64>,
    pub covariates: Vec<f64>,
}

/// All subjects on one shared abscissa in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub subjects: Vec<SubjectRecord>,
    pub total_obs: usize,
    pub covariate_names: Vec<String>,
    /// `(t_min, t_max)` of the affine map onto `[0, 1]`.
    pub scaling: (f64, f64),
}

/// Affine map of raw times onto `[0, 1]`.
pub fn scale_times(raw: &[f64], t_min: f64, t_max: f64) -> Result<Vec<f64>> {
    if !(t_min < t_max) || !t_min.is_finite() || !t_max.is_finite() {
        return Err(Error::DegenerateTimeRange { t_min, t_max });
    }
    let span = t_max - t_min;
    raw.iter()
        .map(|&t| {
            if !(t >= t_min && t <= t_max) {
                Err(Error::TimeOutOfRange {
                    value: t,
                    t_min,
                    t_max,
                })
            } else {
                Ok((t - t_min) / span)
            }
        })
        .collect()
}

impl LongitudinalDataset {
    /// Builds a dataset, sorting each subject's observations by time. When
    /// `scaling` is `None` the dataset-wide min/max of the raw times is used.
    pub fn from_raw(
        raw: Vec<RawSubject>,
        covariate_names: Vec<String>,
        scaling: Option<(f64, f64)>,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidParameter("dataset has no subjects".into()));
        }
        let p = covariate_names.len();
        for s in &raw {
            if s.times.is_empty() {
                return Err(Error::EmptySubject(s.subject_id.clone()));
            }
            if s.times.len() != s.responses.len() {
                return Err(Error::Dimension(format!(
                    "subject `{}`: {} times but {} responses",
                    s.subject_id,
                    s.times.len(),
                    s.responses.len()
                )));
            }
            if s.covariates.len() != p {
                return Err(Error::Dimension(format!(
                    "subject `{}` has {} covariates, expected {p}",
                    s.subject_id,
                    s.covariates.len()
                )));
            }
            if s.times.iter().chain(&s.responses).chain(&s.covariates).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("subject `{}`", s.subject_id)));
            }
        }
        let (t_min, t_max) = match scaling {
            Some(range) => range,
            None => raw.iter().flat_map(|s| s.times.iter()).fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), &t| (lo.min(t), hi.max(t)),
            ),
        };
        let mut subjects = Vec::with_capacity(raw.len());
        let mut total_obs = 0;
        for s in raw {
            let mut order: Vec<usize> = (0..s.times.len()).collect();
            order.sort_by(|&a, &b| s.times[a].total_cmp(&s.times[b]));
            let times_raw: Vec<f64> = order.iter().map(|&i| s.times[i]).collect();
            let responses: Vec<f64> = order.iter().map(|&i| s.responses[i]).collect();
            let times_scaled = scale_times(&times_raw, t_min, t_max)?;
            total_obs += responses.len();
            subjects.push(SubjectRecord {
                subject_id: s.subject_id,
                times_raw,
                times_scaled,
                responses,
                covariates: s.covariates,
            });
        }
        Ok(Self {
            subjects,
            total_obs,
            covariate_names,
            scaling: (t_min, t_max),
        })
    }

    #[inline]
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    #[inline]
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Scaled times of every observation in subject order.
    pub fn stacked_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times_scaled.iter().copied())
            .collect()
    }

    /// Row offset of each subject in the stacked observation vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.subjects
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.n_obs();
                o
            })
            .collect()
    }

    /// `m × p` covariate rows.
    pub fn covariate_rows(&self) -> Vec<Vec<f64>> {
        self.subjects.iter().map(|s| s.covariates.clone()).collect()
    }

    /// Maps a scaled time back to the raw time axis.
    #[inline]
    pub fn unscale(&self, t: f64) -> f64 {
        self.scaling.0 + t * (self.scaling.1 - self.scaling.0)
    }

    /// Copy keeping only the covariate columns at `support` (in that order).
    pub fn restrict_covariates(&self, support: &[usize]) -> Result<Self> {
        if let Some(&bad) = support.iter().find(|&&j| j >= self.n_covariates()) {
            return Err(Error::Dimension(format!("covariate index {bad} out of range")));
        }
        let mut out = self.clone();
        out.covariate_names = support.iter().map(|&j| self.covariate_names[j].clone()).collect();
        for (dst, src) in out.subjects.iter_mut().zip(&self.subjects) {
            dst.covariates = support.iter().map(|&j| src.covariates[j]).collect();
        }
        Ok(out)
    }

    /// Copy with responses replaced subject by subject (same time grids).
    pub fn with_responses(&self, responses: Vec<Vec<f64>>) -> Result<Self> {
        if responses.len() != self.n_subjects() {
            return Err(Error::Dimension("response blocks vs subjects".into()));
        }
        let mut out = self.clone();
        for (s, y) in out.subjects.iter_mut().zip(responses) {
            if y.len() != s.n_obs() {
                return Err(Error::Dimension(format!(
                    "subject `{}` response length",
                    s.subject_id
                )));
            }
            s.responses = y;
        }
        Ok(out)
    }

    /// Copy whose times are rescaled against the raw range `scaling`.
    pub fn with_scaling(&self, scaling: (f64, f64)) -> Result<Self> {
        let mut out = self.clone();
        for s in &mut out.subjects {
            s.times_scaled = scale_times(&s.times_raw, scaling.0, scaling.1)?;
        }
        out.scaling = scaling;
        Ok(out)
    }

    /// Copy with subjects reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.subjects = order.iter().map(|&i| self.subjects[i].clone()).collect();
        out
    }

    /// Writes the long-format CSV (`id, time, response, covariates...`).
    pub fn export_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "time".to_string(), "response".to_string()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for s in &self.subjects {
            for (t, y) in s.times_raw.iter().zip(&s.responses) {
                let mut rec = vec![s.subject_id.clone(), t.to_string(), y.to_string()];
                rec.extend(s.covariates.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    /// Expanded to indicator columns for every level except the reference
    /// (the lexicographically first level when unspecified).
    Categorical { reference: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateColumn {
    pub name: String,
    #[serde(flatten)]
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<CovariateColumn>,
}

impl CovariateSchema {
    pub fn numeric(names: &[&str]) -> Self {
        Self {
            columns: names
                .iter()
                .map(|n| CovariateColumn {
                    name: n.to_string(),
                    kind: CovariateKind::Numeric,
                })
                .collect(),
        }
    }

    pub fn push_categorical(mut self, name: &str, reference: Option<&str>) -> Self {
        self.columns.push(CovariateColumn {
            name: name.into(),
            kind: CovariateKind::Categorical {
                reference: reference.map(str::to_string),
            },
        });
        self
    }

    pub fn push_numeric(mut self, name: &str) -> Self {
        self.columns.push(CovariateColumn {
            name: name.into(),
            kind: CovariateKind::Numeric,
        });
        self
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
    }

    /// Treats every column outside `exclude` as a covariate: numeric when all
    /// of its cells parse as numbers, categorical otherwise.
    fn infer(headers: &[String], rows: &[csv::StringRecord], exclude: &[usize]) -> Self {
        let columns = headers
            .iter()
            .enumerate()
            .filter(|(j, _)| !exclude.contains(j))
            .map(|(j, name)| {
                let numeric = rows
                    .iter()
                    .all(|r| r.get(j).is_some_and(|v| v.trim().parse::<f64>().is_ok()));
                CovariateColumn {
                    name: name.clone(),
                    kind: if numeric {
                        CovariateKind::Numeric
                    } else {
                        CovariateKind::Categorical { reference: None }
                    },
                }
            })
            .collect();
        Self { columns }
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone)]
pub struct CsvLayout {
    pub id_col: String,
    pub time_col: String,
    pub response_col: String,
}

impl Default for CsvLayout {
    fn default() -> Self {
        Self {
            id_col: "id".into(),
            time_col: "time".into(),
            response_col: "response".into(),
        }
    }
}

fn column_index(headers: &[String], name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_cell(record: &csv::StringRecord, idx: usize, row: usize, what: &str) -> Result<f64> {
    let cell = record.get(idx).unwrap_or("").trim();
    if cell.is_empty() {
        return Err(Error::MalformedRow {
            row,
            message: format!("missing {what}"),
        });
    }
    let v: f64 = cell.parse().map_err(|_| Error::MalformedRow {
        row,
        message: format!("non-numeric {what} `{cell}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::MalformedRow {
            row,
            message: format!("non-finite {what}"),
        });
    }
    Ok(v)
}

/// Reads a long-format CSV (one row per subject/time, covariates repeated per
/// row). Rows are grouped by id in order of first appearance and time-sorted
/// within subject; times are rescaled by the dataset-wide min/max.
///
/// With `schema = None` the covariate columns are inferred.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    schema: Option<&CovariateSchema>,
    layout: &CsvLayout,
) -> Result<LongitudinalDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, layout)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: Option<&CovariateSchema>,
    layout: &CsvLayout,
) -> Result<LongitudinalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let id_idx = column_index(&headers, &layout.id_col)?;
    let time_idx = column_index(&headers, &layout.time_col)?;
    let resp_idx = column_index(&headers, &layout.response_col)?;

    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::MalformedRow {
            row: k + 1,
            message: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::MalformedRow {
                row: k + 1,
                message: format!("{} fields, header has {}", rec.len(), headers.len()),
            });
        }
        rows.push(rec);
    }
    if rows.is_empty() {
        return Err(Error::InvalidParameter("csv has no data rows".into()));
    }

    let inferred;
    let schema = match schema {
        Some(s) => s,
        None => {
            inferred = CovariateSchema::infer(&headers, &rows, &[id_idx, time_idx, resp_idx]);
            &inferred
        }
    };
    let col_idx: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| column_index(&headers, &c.name))
        .collect::<Result<_>>()?;

    // Categorical levels and their indicator columns.
    let mut covariate_names = Vec::new();
    let mut encoders: Vec<Vec<String>> = Vec::with_capacity(schema.columns.len());
    for (c, &j) in schema.columns.iter().zip(&col_idx) {
        match &c.kind {
            CovariateKind::Numeric => {
                covariate_names.push(c.name.clone());
                encoders.push(Vec::new());
            }
            CovariateKind::Categorical { reference } => {
                let levels: BTreeSet<String> =
                    rows.iter().map(|r| r.get(j).unwrap_or("").trim().to_string()).collect();
                if let Some((row, _)) = rows
                    .iter()
                    .enumerate()
                    .find(|(_, r)| r.get(j).unwrap_or("").trim().is_empty())
                {
                    return Err(Error::MalformedRow {
                        row: row + 1,
                        message: format!("missing value for `{}`", c.name),
                    });
                }
                let reference = match reference {
                    Some(r) if levels.contains(r) => r.clone(),
                    Some(r) => {
                        return Err(Error::InvalidParameter(format!(
                            "reference level `{r}` not present in column `{}`",
                            c.name
                        )))
                    }
                    None => levels.iter().next().cloned().unwrap_or_default(),
                };
                let kept: Vec<String> = levels.into_iter().filter(|l| *l != reference).collect();
                for l in &kept {
                    covariate_names.push(format!("{}_{}", c.name, l));
                }
                encoders.push(kept);
            }
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, (RawSubject, usize)> = BTreeMap::new();
    for (k, rec) in rows.iter().enumerate() {
        let row = k + 1;
        let id = rec.get(id_idx).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: "empty subject id".into(),
            });
        }
        let t = parse_cell(rec, time_idx, row, "time")?;
        let y = parse_cell(rec, resp_idx, row, "response")?;
        let mut x = Vec::with_capacity(covariate_names.len());
        for ((c, &j), enc) in schema.columns.iter().zip(&col_idx).zip(&encoders) {
            match c.kind {
                CovariateKind::Numeric => x.push(parse_cell(rec, j, row, &c.name)?),
                CovariateKind::Categorical { .. } => {
                    let v = rec.get(j).unwrap_or("").trim();
                    x.extend(enc.iter().map(|l| if l == v { 1.0 } else { 0.0 }));
                }
            }
        }
        match grouped.get_mut(&id) {
            Some((subj, _)) => {
                if subj.covariates != x {
                    return Err(Error::MalformedRow {
                        row,
                        message: format!("covariates differ from earlier rows of subject `{id}`"),
                    });
                }
                subj.times.push(t);
                subj.responses.push(y);
            }
            None => {
                order.push(id.clone());
                grouped.insert(
                    id.clone(),
                    (
                        RawSubject {
                            subject_id: id,
                            times: vec![t],
                            responses: vec![y],
                            covariates: x,
                        },
                        row,
                    ),
                );
            }
        }
    }
    let raw: Vec<RawSubject> = order
        .iter()
        .map(|id| grouped.remove(id).map(|(s, _)| s).expect("grouped id"))
        .collect();
    LongitudinalDataset::from_raw(raw, covariate_names, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read(text: &str, schema: Option<&CovariateSchema>) -> Result<LongitudinalDataset> {
        read_csv(text.as_bytes(), schema, &CsvLayout::default())
    }

    #[test]
    fn scale_time_examples() {
        assert_eq!(scale_times(&[-30.0, 0.0], -30.0, 0.0).unwrap(), vec![0.0, 1.0]);
        assert_eq!(scale_times(&[-15.0], -30.0, 0.0).unwrap(), vec![0.5]);
        let u = scale_times(&[-30.0, -20.0, -10.0, 0.0], -30.0, 0.0).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in u.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            scale_times(&[1.0], -30.0, 0.0),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(matches!(
            scale_times(&[0.0], 0.0, 0.0),
            Err(Error::DegenerateTimeRange { .. })
        ));
    }

    #[test]
    fn single_subject_file_is_scaled() {
        let ds = read("id,time,response\na,0,1\na,-30,2\na,-15,3\n", None).unwrap();
        assert_eq!(ds.n_subjects(), 1);
        assert_eq!(ds.subjects[0].times_scaled, vec![0.0, 0.5, 1.0]);
        assert_eq!(ds.subjects[0].responses, vec![2.0, 3.0, 1.0]);
        assert_eq!(ds.total_obs, 3);
    }

    #[test]
    fn shared_scaling_across_subjects() {
        let ds = read("id,time,response\na,-30,0\na,-10,0\nb,-20,1\nb,0,1\n", None).unwrap();
        assert_eq!(ds.scaling, (-30.0, 0.0));
        assert_eq!(ds.subjects[1].times_scaled[1], 1.0);
        assert_eq!(ds.subjects[0].times_scaled[0], 0.0);
    }

    #[test]
    fn categorical_indicator_drops_reference() {
        let schema = CovariateSchema::default().push_categorical("grp", Some("A"));
        let ds = read(
            "id,time,response,grp\n1,0,0,A\n1,1,0,A\n2,0,1,B\n2,1,1,B\n3,0,0,A\n3,1,2,A\n",
            Some(&schema),
        )
        .unwrap();
        assert_eq!(ds.covariate_names, vec!["grp_B"]);
        let col: Vec<f64> = ds.subjects.iter().map(|s| s.covariates[0]).collect();
        assert_eq!(col, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn inferred_schema_mixes_kinds() {
        let ds = read(
            "id,time,response,age,sex\n1,0,0,50,F\n1,1,0,50,F\n2,0,1,60,M\n2,1,1,60,M\n",
            None,
        )
        .unwrap();
        assert_eq!(ds.covariate_names, vec!["age", "sex_M"]);
        assert_eq!(ds.subjects[1].covariates, vec![60.0, 1.0]);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            read("id,time\na,0\n", None),
            Err(Error::MissingColumn(c)) if c == "response"
        ));
        assert!(matches!(
            read("id,time,response\na,0,1\na,1,x\n", None),
            Err(Error::MalformedRow { row: 2, .. })
        ));
        assert!(matches!(
            read("id,time,response\na,0,1\na,1,\n", None),
            Err(Error::MalformedRow { row: 2, .. })
        ));
        assert!(matches!(
            read("id,time,response\na,3,1\nb,3,1\n", None),
            Err(Error::DegenerateTimeRange { .. })
        ));
        assert!(matches!(
            read("id,time,response,x\na,0,1,1\na,1,1,2\n", None),
            Err(Error::MalformedRow { row: 2, .. })
        ));
        assert!(matches!(
            LongitudinalDataset::from_raw(
                vec![RawSubject {
                    subject_id: "z".into(),
                    times: vec![],
                    responses: vec![],
                    covariates: vec![],
                }],
                vec![],
                None
            ),
            Err(Error::EmptySubject(_))
        ));
    }

    #[test]
    fn time_ties_are_kept() {
        let ds = read("id,time,response\na,0,1\na,0,2\na,5,3\n", None).unwrap();
        assert_eq!(ds.subjects[0].times_scaled, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn export_round_trip() {
        let ds = read(
            "id,time,response,age\ns1,-30,0.125,61.5\ns1,-7,-1.3e-3,61.5\ns2,-12,2.75,40\ns2,0,0.1,40\n",
            None,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), None, &CsvLayout::default()).unwrap();
        assert_eq!(back, ds);
    }
}
