//! File writers. Numbers are printed in shortest round-trip form so equal
//! values always produce equal bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use metamorph::ensemble::EnsembleStats;
use metamorph::Trajectory;
use serde::Serialize;

use crate::error::{io, CliError};

pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Output directory that remembers what was written, in write order.
pub struct OutputDir {
    dir: PathBuf,
    files: Vec<String>,
}

pub type CsvWriter = csv::Writer<BufWriter<File>>;

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", path.display()))
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn target(&mut self, name: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io(parent))?;
        }
        self.files.push(name.to_string());
        Ok(path)
    }

    /// Writes a CSV with `header`, filling rows through `fill`.
    pub fn csv<F>(&mut self, name: &str, header: &[String], fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut CsvWriter) -> csv::Result<()>,
    {
        let path = self.target(name)?;
        let file = File::create(&path).map_err(io(&path))?;
        let mut w = csv::WriterBuilder::new().from_writer(BufWriter::new(file));
        w.write_record(header).map_err(csv_err(&path))?;
        fill(&mut w).map_err(csv_err(&path))?;
        w.flush().map_err(io(&path))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.target(name)?;
        let file = File::create(&path).map_err(io(&path))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        writeln!(w).and_then(|_| w.flush()).map_err(io(&path))
    }
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

/// `t, i, q_1..q_d, p_1..p_d`, one row per (step, landmark).
pub fn landmark_trajectory(out: &mut OutputDir, name: &str, traj: &Trajectory, n: usize, d: usize) -> Result<(), CliError> {
    let mut cols = header(&["t", "i"]);
    cols.extend((1..=d).map(|k| format!("q_{k}")));
    cols.extend((1..=d).map(|k| format!("p_{k}")));
    out.csv(name, &cols, |w| {
        for (t, x) in traj.times.iter().zip(&traj.states) {
            for i in 0..n {
                let mut row = vec![num(*t), i.to_string()];
                row.extend(x[i * d..(i + 1) * d].iter().map(|v| num(*v)));
                row.extend(x[n * d + i * d..n * d + (i + 1) * d].iter().map(|v| num(*v)));
                w.write_record(&row)?;
            }
        }
        Ok(())
    })
}

/// Long-format landmark positions for plotting:
/// `t, entity, coordinate, value, realization`.
pub fn landmark_long<'a, I>(out: &mut OutputDir, name: &str, runs: I, n: usize, d: usize) -> Result<(), CliError>
where
    I: IntoIterator<Item = (usize, &'a Trajectory)>,
{
    out.csv(name, &header(&["t", "entity", "coordinate", "value", "realization"]), |w| {
        for (r, traj) in runs {
            let r = r.to_string();
            for (t, x) in traj.times.iter().zip(&traj.states) {
                let t = num(*t);
                for i in 0..n {
                    let entity = i.to_string();
                    for k in 0..d {
                        w.write_record([&t, &entity, &format!("q_{}", k + 1), &num(x[i * d + k]), &r])?;
                    }
                }
            }
        }
        Ok(())
    })
}

/// `mean.csv`, `variance.csv` and, with selected coordinates,
/// `covariance.csv`, plus `stats.json`. `label` names state coordinate `c`
/// as `(entity, coordinate)`.
pub fn ensemble_stats(
    out: &mut OutputDir,
    stats: &EnsembleStats,
    label: impl Fn(usize) -> (String, String),
    csv: bool,
    json: bool,
) -> Result<(), CliError> {
    if json {
        out.json("stats.json", stats)?;
    }
    if !csv {
        return Ok(());
    }
    for (name, table) in [("mean.csv", &stats.mean), ("variance.csv", &stats.variance)] {
        out.csv(name, &header(&["t", "entity", "coordinate", "value"]), |w| {
            for (t, row) in stats.times.iter().zip(table.iter()) {
                let t = num(*t);
                for (c, v) in row.iter().enumerate() {
                    let (e, k) = label(c);
                    w.write_record([&t, &e, &k, &num(*v)])?;
                }
            }
            Ok(())
        })?;
    }
    if !stats.covariance_coords.is_empty() {
        out.csv("covariance.csv", &header(&["t", "row", "col", "value"]), |w| {
            for (t, mat) in stats.times.iter().zip(&stats.covariance) {
                let t = num(*t);
                for (a, row) in stats.covariance_coords.iter().zip(mat) {
                    for (b, v) in stats.covariance_coords.iter().zip(row) {
                        w.write_record([&t, &a.to_string(), &b.to_string(), &num(*v)])?;
                    }
                }
            }
            Ok(())
        })?;
    }
    Ok(())
}
