use std::path::{Path, PathBuf};

use super::run::{CurveRow, Phase, RunResult};
use crate::dv::GibbsDensity;
use crate::error::{Error, Result};
use crate::persist::{read_json, save_model, write_atomic, write_json};

/// Columns of the curve CSV, in order. A trailing `config_hash` column is appended.
pub const CURVE_COLUMNS: [&str; 9] =
    ["run_id", "seed", "phase", "epoch", "train_loss", "val_loss", "dv_estimate", "entropy_estimate", "wall_seconds"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmitFormats {
    pub curves: bool,
    pub result: bool,
    pub model: bool,
}

impl EmitFormats {
    pub fn all() -> Self {
        Self { curves: true, result: true, model: true }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Parse {
        path: path.to_owned(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

pub fn write_curves_csv(path: &Path, rows: &[CurveRow], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = csv_err(path);
    let mut header: Vec<&str> = CURVE_COLUMNS.to_vec();
    header.push("config_hash");
    w.write_record(&header).map_err(&err)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.phase.as_str().to_owned(),
            r.epoch.to_string(),
            r.train_loss.map_or(String::new(), |v| v.to_string()),
            r.val_loss.to_string(),
            r.dv_estimate.to_string(),
            r.entropy_estimate.to_string(),
            r.wall_seconds.to_string(),
            config_hash.to_owned(),
        ])
        .map_err(&err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Read a curve CSV back; returns the rows and the config hash column.
pub fn read_curves_csv(path: &Path) -> Result<(Vec<CurveRow>, String)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let err = csv_err(path);
    let mut rows = Vec::new();
    let mut hash = String::new();
    for rec in r.records() {
        let rec = rec.map_err(&err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let parse_err = |what: &str| Error::Parse { path: path.to_owned(), line, message: format!("bad {what}") };
        let f = |i: usize| rec.get(i).ok_or_else(|| parse_err("row length"));
        let num = |i: usize, what: &str| -> Result<f64> { f(i)?.parse().map_err(|_| parse_err(what)) };
        let phase = match f(2)? {
            "knife" => Phase::Knife,
            "remedi" => Phase::Remedi,
            _ => return Err(parse_err("phase")),
        };
        rows.push(CurveRow {
            run_id: f(0)?.to_owned(),
            seed: f(1)?.parse().map_err(|_| parse_err("seed"))?,
            phase,
            epoch: f(3)?.parse().map_err(|_| parse_err("epoch"))?,
            train_loss: if f(4)?.is_empty() { None } else { Some(num(4, "train_loss")?) },
            val_loss: num(5, "val_loss")?,
            dv_estimate: num(6, "dv_estimate")?,
            entropy_estimate: num(7, "entropy_estimate")?,
            wall_seconds: num(8, "wall_seconds")?,
        });
        hash = f(9)?.to_owned();
    }
    Ok((rows, hash))
}

pub fn read_result(path: &Path) -> Result<RunResult> {
    read_json(path)
}

/// Write `<run_id>_seed<seed>_{curves.csv,result.json,model.json}` under `dir`.
pub fn emit(
    result: &RunResult,
    gibbs: Option<&GibbsDensity>,
    dir: &Path,
    formats: EmitFormats,
) -> Result<Vec<PathBuf>> {
    let stem = format!("{}_seed{}", result.run_id, result.seed);
    let mut written = Vec::new();
    if formats.curves {
        let p = dir.join(format!("{stem}_curves.csv"));
        write_curves_csv(&p, &result.curves, &result.config_hash)?;
        written.push(p);
    }
    if formats.result {
        let p = dir.join(format!("{stem}_result.json"));
        write_json(&p, result)?;
        written.push(p);
    }
    if let (true, Some(g)) = (formats.model, gibbs) {
        let p = dir.join(format!("{stem}_model.json"));
        save_model(&p, g, Some(result.config_hash.clone()))?;
        written.push(p);
    }
    Ok(written)
}
