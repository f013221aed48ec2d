use super::RunLog;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: plotting failed: {message}")]
    Plot { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExportError + '_ {
    move |source| ExportError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `states.csv` (one row per step and agent) and `summary.csv`
/// (one row per step) into `dir`. Returns the written paths.
pub fn export_csv(log: &RunLog, dir: &Path) -> Result<Vec<PathBuf>, ExportError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let states_path = dir.join("states.csv");
    let mut w = csv::Writer::from_path(&states_path).map_err(csv_err(&states_path))?;
    w.write_record(["t", "agent", "p_x", "p_y", "theta", "v", "u1", "u2", "h2_min"])
        .map_err(csv_err(&states_path))?;
    for s in &log.steps {
        for (i, x) in s.states.iter().enumerate() {
            let h2_min = s.h2[i].iter().copied().reduce(f64::min);
            let mut rec = vec![s.t.to_string(), i.to_string()];
            rec.extend(x.iter().map(f64::to_string));
            rec.extend(s.inputs[i].iter().map(f64::to_string));
            rec.push(h2_min.map_or_else(String::new, |h| h.to_string()));
            w.write_record(&rec).map_err(csv_err(&states_path))?;
        }
    }
    w.flush().map_err(io_err(&states_path))?;

    let summary_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path).map_err(csv_err(&summary_path))?;
    w.write_record(["t", "J", "sqp_iters", "wall_ms"])
        .map_err(csv_err(&summary_path))?;
    for s in &log.steps {
        w.write_record([
            s.t.to_string(),
            s.cost.to_string(),
            s.sqp_iterations.to_string(),
            (s.wall_time_s * 1e3).to_string(),
        ])
        .map_err(csv_err(&summary_path))?;
    }
    w.flush().map_err(io_err(&summary_path))?;
    Ok(vec![states_path, summary_path])
}

/// Writes the full log as `run.json` in `dir`.
pub fn export_json(log: &RunLog, dir: &Path) -> Result<PathBuf, ExportError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("run.json");
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, log).map_err(|source| ExportError::Json {
        path: path.clone(),
        source,
    })?;
    out.flush().map_err(io_err(&path))?;
    Ok(path)
}

pub fn import_json(path: &Path) -> Result<RunLog, ExportError> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| ExportError::Json {
        path: path.to_path_buf(),
        source,
    })
}
