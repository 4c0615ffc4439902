//! Continual-learning metrics over an accuracy matrix.
//!
//! `A[t][i]` is the test accuracy on task `i` after learning task `t`
//! (1-based, `i <= t`).
//!
//! * ACC = mean of the final row
//! * BWT = mean over `i < T` of `A[T][i] - A[i][i]`
//! * IM  = sum over `i` of `A*_i - A[i][i]`, `A*_i` the joint-training upper bound
//! * AOA = mean over `i >= 2` of the accuracy after the first epoch on task `i`
//! * AAA = mean over `t` of the mean of row `t`
//! * STD = population standard deviation of the final row

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    /// Row `t - 1` holds `t` entries.
    rows: Vec<Vec<Option<f64>>>,
    upper_bound: Option<Vec<f64>>,
    epoch1: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rows: (1..=tasks).map(|t| vec![None; t]).collect(),
            upper_bound: None,
            epoch1: vec![None; tasks],
        }
    }

    /// Builds a matrix from full lower-triangular rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (t, row) in rows.iter().enumerate() {
            if row.len() < t + 1 {
                return Err(Error::rejected(format!("row {} has {} entries, needs {}", t + 1, row.len(), t + 1)));
            }
            for (i, &v) in row.iter().take(t + 1).enumerate() {
                m.set(t + 1, i + 1, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    fn check_value(v: f64, what: &str) -> Result<()> {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::rejected(format!("{what} = {v} outside [0, 1]")))
        }
    }

    pub fn set(&mut self, t: usize, i: usize, v: f64) -> Result<()> {
        if t == 0 || t > self.tasks || i == 0 || i > t {
            return Err(Error::rejected(format!("A[{t}][{i}] is outside the lower triangle")));
        }
        Self::check_value(v, &format!("A[{t}][{i}]"))?;
        self.rows[t - 1][i - 1] = Some(v);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t.checked_sub(1)?)?.get(i.checked_sub(1)?).copied().flatten()
    }

    /// Entry that a metric needs; missing entries are named in the error.
    pub fn require(&self, t: usize, i: usize) -> Result<f64> {
        self.get(t, i)
            .ok_or_else(|| Error::rejected(format!("accuracy entry A[{t}][{i}] is undefined")))
    }

    pub fn set_upper_bound(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.tasks {
            return Err(Error::rejected(format!("{} upper bounds for {} tasks", values.len(), self.tasks)));
        }
        for (i, &v) in values.iter().enumerate() {
            Self::check_value(v, &format!("A*[{}]", i + 1))?;
        }
        self.upper_bound = Some(values);
        Ok(())
    }

    pub fn upper_bound(&self) -> Option<&[f64]> {
        self.upper_bound.as_deref()
    }

    pub fn set_epoch1(&mut self, task: usize, v: f64) -> Result<()> {
        if task == 0 || task > self.tasks {
            return Err(Error::rejected(format!("no task {task}")));
        }
        Self::check_value(v, &format!("A_epoch1[{task}]"))?;
        self.epoch1[task - 1] = Some(v);
        Ok(())
    }

    pub fn epoch1(&self, task: usize) -> Option<f64> {
        self.epoch1.get(task.checked_sub(1)?).copied().flatten()
    }

    pub fn final_row(&self) -> Result<Vec<f64>> {
        (1..=self.tasks).map(|i| self.require(self.tasks, i)).collect()
    }

    /// Writes `row,task_1..task_T`, one line per learned task, then optional
    /// `upper_bound` and `epoch1` lines. Undefined cells are empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec!["row".to_string()];
        header.extend((1..=self.tasks).map(|i| format!("task_{i}")));
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in 1..=self.tasks {
            let mut rec = vec![t.to_string()];
            rec.extend((1..=self.tasks).map(|i| cell(self.get(t, i))));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        if let Some(ub) = &self.upper_bound {
            let mut rec = vec!["upper_bound".to_string()];
            rec.extend(ub.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        if self.epoch1.iter().any(Option::is_some) {
            let mut rec = vec!["epoch1".to_string()];
            rec.extend(self.epoch1.iter().map(|&v| cell(v)));
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        let tasks = header.len().saturating_sub(1);
        if tasks == 0 || &header[0] != "row" {
            return Err(Error::format("acc_matrix.header", "expected `row,task_1,...`"));
        }
        let mut m = AccuracyMatrix::new(tasks);
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let key = rec.get(0).unwrap_or_default().to_string();
            let parse = |i: usize| -> Result<Option<f64>> {
                let s = rec.get(i).unwrap_or_default().trim();
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::format(format!("acc_matrix.{key}.task_{i}"), format!("`{s}` is not a number")))
                }
            };
            match key.as_str() {
                "upper_bound" => {
                    let ub = (1..=tasks)
                        .map(|i| parse(i)?.ok_or_else(|| Error::format("acc_matrix.upper_bound", format!("missing task_{i}"))))
                        .collect::<Result<Vec<_>>>()?;
                    m.set_upper_bound(ub)?;
                }
                "epoch1" => {
                    for i in 1..=tasks {
                        if let Some(v) = parse(i)? {
                            m.set_epoch1(i, v)?;
                        }
                    }
                }
                _ => {
                    let t: usize = key
                        .parse()
                        .map_err(|_| Error::format("acc_matrix.row", format!("unknown row key `{key}`")))?;
                    for i in 1..=tasks {
                        if let Some(v) = parse(i)? {
                            m.set(t, i, v)?;
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path.display().to_string(), e.to_string())
}

/// All metrics computable from the given inputs; absent ones are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    pub im: Option<f64>,
    pub aoa: Option<f64>,
    pub aaa: Option<f64>,
    pub std: Option<f64>,
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = ["acc", "bwt", "im", "aoa", "aaa", "std"];

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.acc, self.bwt, self.im, self.aoa, self.aaa, self.std]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["metric", "value"]).map_err(|e| csv_error(path, e))?;
        for (name, v) in Self::NAMES.iter().zip(self.values()) {
            w.write_record([name.to_string(), v.map(|x| x.to_string()).unwrap_or_default()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn metrics(a: &AccuracyMatrix) -> Result<MetricReport> {
    let t_max = a.tasks();
    if t_max == 0 {
        return Err(Error::rejected("accuracy matrix has no tasks"));
    }
    let last = a.final_row()?;
    let acc = last.iter().sum::<f64>() / t_max as f64;
    let std = (last.iter().map(|v| (v - acc).powi(2)).sum::<f64>() / t_max as f64).sqrt();

    let bwt = if t_max >= 2 {
        let per = per_task_bwt(a)?;
        Some(per[..t_max - 1].iter().sum::<f64>() / (t_max - 1) as f64)
    } else {
        None
    };
    let im = match a.upper_bound() {
        Some(_) => Some(per_task_im(a)?.iter().sum()),
        None => None,
    };
    let aoa = if t_max >= 2 && (2..=t_max).all(|i| a.epoch1(i).is_some()) {
        Some((2..=t_max).filter_map(|i| a.epoch1(i)).sum::<f64>() / (t_max - 1) as f64)
    } else {
        None
    };
    let mut aaa = 0.0;
    for t in 1..=t_max {
        let row: f64 = (1..=t).map(|i| a.require(t, i)).sum::<Result<f64>>()?;
        aaa += row / t as f64;
    }
    aaa /= t_max as f64;

    Ok(MetricReport {
        acc: Some(acc),
        bwt,
        im,
        aoa,
        aaa: Some(aaa),
        std: Some(std),
    })
}

/// `A[T][i] - A[i][i]` for every task.
pub fn per_task_bwt(a: &AccuracyMatrix) -> Result<Vec<f64>> {
    let t_max = a.tasks();
    (1..=t_max).map(|i| Ok(a.require(t_max, i)? - a.require(i, i)?)).collect()
}

/// `A*_i - A[i][i]` for every task.
pub fn per_task_im(a: &AccuracyMatrix) -> Result<Vec<f64>> {
    let ub = a
        .upper_bound()
        .ok_or_else(|| Error::rejected("intransigence needs the upper-bound accuracies"))?;
    (1..=a.tasks()).map(|i| Ok(ub[i - 1] - a.require(i, i)?)).collect()
}

/// Residuals of `A[T][i] = A*_i - IM_i + BWT_i`; zero up to rounding.
pub fn tradeoff_identity_check(a: &AccuracyMatrix) -> Result<Vec<f64>> {
    tradeoff_residuals(a, &per_task_bwt(a)?, &per_task_im(a)?)
}

fn tradeoff_residuals(a: &AccuracyMatrix, bwt: &[f64], im: &[f64]) -> Result<Vec<f64>> {
    let ub = a
        .upper_bound()
        .ok_or_else(|| Error::rejected("identity check needs the upper-bound accuracies"))?;
    (1..=a.tasks())
        .map(|i| Ok(a.require(a.tasks(), i)? - (ub[i - 1] - im[i - 1] + bwt[i - 1])))
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
