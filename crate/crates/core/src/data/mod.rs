//! In-memory datasets, CSV interchange, synthetic generators and gap splits.
//!
//! CSV files carry a header row with the target in the last column. Lines
//! starting with `#` are comments; the pipeline uses one to stamp every file
//! with its configuration hash and seed.

mod gap;
pub mod synth;

pub use gap::{make_gap_splits, make_gap_splits_with_fraction, GapSplit};

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Targets::Classes { .. } => TaskKind::Classification,
            Targets::Real(_) => TaskKind::Regression,
        }
    }

    /// Target of row `i` as a real number (class index for classification).
    pub fn value(&self, i: usize) -> f64 {
        match self {
            Targets::Classes { labels, .. } => labels[i] as f64,
            Targets::Real(v) => v[i],
        }
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Inputs (`N × D`, row-major) paired with per-row targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, targets: Targets) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::Dimension {
                context: "dataset targets",
                expected: inputs.nrows(),
                got: targets.len(),
            });
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite input at row {}",
                i / inputs.ncols().max(1)
            )));
        }
        match &targets {
            Targets::Classes { labels, n_classes } => {
                if *n_classes < 2 {
                    return Err(Error::Input("classification needs at least 2 classes".into()));
                }
                if let Some(i) = labels.iter().position(|&c| c >= *n_classes) {
                    return Err(Error::Input(format!(
                        "class index {} at row {i} outside [0, {n_classes})",
                        labels[i]
                    )));
                }
            }
            Targets::Real(v) => {
                if let Some(i) = v.iter().position(|t| !t.is_finite()) {
                    return Err(Error::Input(format!("non-finite target at row {i}")));
                }
            }
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn classification(inputs: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(inputs, Targets::Classes { labels, n_classes })
    }

    pub fn regression(inputs: Array2<f64>, targets: Vec<f64>) -> Result<Self> {
        Self::new(inputs, Targets::Real(targets))
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn kind(&self) -> TaskKind {
        self.targets.kind()
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { n_classes, .. } => Some(*n_classes),
            Targets::Real(_) => None,
        }
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.inputs.row(i)
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), idx),
            targets: self.targets.select(idx),
        }
    }

    /// Concatenation of `self` with itself `times` times.
    pub fn repeated(&self, times: usize) -> Dataset {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.len()).collect();
        self.subset(&idx)
    }

    pub fn write_csv(&self, path: &Path, stamp: Option<&str>) -> Result<()> {
        let mut buf = Vec::new();
        if let Some(stamp) = stamp {
            writeln!(buf, "# {stamp}").map_err(|e| Error::io(path, e))?;
        }
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
            header.push("y".into());
            w.write_record(&header)?;
            for (i, row) in self.inputs.outer_iter().enumerate() {
                let mut rec: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                rec.push(match &self.targets {
                    Targets::Classes { labels, .. } => labels[i].to_string(),
                    Targets::Real(v) => fmt_f64(v[i]),
                });
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads only the input columns of a dataset CSV, ignoring the target.
    pub fn read_csv_inputs(path: &Path) -> Result<Array2<f64>> {
        read_inputs_csv(path, true)
    }

    /// Reads a CSV written by [`Dataset::write_csv`] (or any headered CSV with
    /// the target last). For classification, `n_classes` defaults to
    /// `max label + 1`.
    pub fn read_csv(path: &Path, kind: TaskKind, n_classes: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(file);
        let ncols = rdr.headers()?.len();
        if ncols < 2 {
            return Err(Error::Input(format!(
                "{}: need at least one input column and a target column",
                path.display()
            )));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Input(format!("{}: row {r} column {c}: cannot parse {field:?}", path.display()))
                })?;
                if c + 1 == ncols {
                    ys.push(v);
                } else {
                    xs.push(v);
                }
            }
        }
        let n = ys.len();
        let inputs = Array2::from_shape_vec((n, ncols - 1), xs)
            .map_err(|e| Error::Input(format!("{}: ragged rows: {e}", path.display())))?;
        match kind {
            TaskKind::Regression => Dataset::regression(inputs, ys),
            TaskKind::Classification => {
                let mut labels = Vec::with_capacity(n);
                for (i, y) in ys.iter().enumerate() {
                    if *y < 0.0 || y.fract() != 0.0 {
                        return Err(Error::Input(format!(
                            "{}: row {i}: class label {y} is not a non-negative integer",
                            path.display()
                        )));
                    }
                    labels.push(*y as usize);
                }
                let m = n_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |&c| (c + 1).max(2)));
                Dataset::classification(inputs, labels, m)
            }
        }
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes an input matrix with header `x0,x1,…` and no target column.
pub fn write_inputs_csv(path: &Path, inputs: &Array2<f64>, stamp: Option<&str>) -> Result<()> {
    let mut buf = Vec::new();
    if let Some(stamp) = stamp {
        writeln!(buf, "# {stamp}").map_err(|e| Error::io(path, e))?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record((0..inputs.ncols()).map(|j| format!("x{j}")))?;
        for row in inputs.outer_iter() {
            w.write_record(row.iter().map(|v| fmt_f64(*v)))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a matrix written by [`write_inputs_csv`].
pub fn read_inputs(path: &Path) -> Result<Array2<f64>> {
    read_inputs_csv(path, false)
}

fn read_inputs_csv(path: &Path, drop_last: bool) -> Result<Array2<f64>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let ncols = rdr.headers()?.len() - usize::from(drop_last);
    let mut xs = Vec::new();
    let mut n = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().take(ncols).enumerate() {
            xs.push(field.parse::<f64>().map_err(|_| {
                Error::Input(format!("{}: row {r} column {c}: cannot parse {field:?}", path.display()))
            })?);
        }
        n += 1;
    }
    let m = Array2::from_shape_vec((n, ncols), xs).map_err(|e| Error::Input(format!("{}: ragged rows: {e}", path.display())))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{}: non-finite input", path.display())));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_out_of_range_label() {
        let err = Dataset::classification(array![[0.0], [1.0]], vec![0, 2], 2).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Dataset::regression(array![[f64::NAN]], vec![0.0]).is_err());
        assert!(Dataset::regression(array![[0.0]], vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = Dataset::regression(array![[0.1, -1e-300], [1.0 / 3.0, 2.5]], vec![std::f64::consts::PI, -0.0])
            .unwrap();
        ds.write_csv(&path, Some("config_hash=abc seed=1")).unwrap();
        let back = Dataset::read_csv(&path, TaskKind::Regression, None).unwrap();
        assert_eq!(ds, back);

        let cls = Dataset::classification(array![[0.5], [0.25], [2.0]], vec![1, 0, 2], 3).unwrap();
        cls.write_csv(&path, None).unwrap();
        assert_eq!(Dataset::read_csv(&path, TaskKind::Classification, None).unwrap(), cls);
    }
}
