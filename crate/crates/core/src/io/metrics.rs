//! Per-epoch metrics CSVs.
//!
//! Detection runs:
//! `epoch,lr,train_box,train_cls,train_dfl,val_box,val_cls,val_dfl,precision,recall,map50,map50_95,seconds`
//!
//! Contrastive runs: `epoch,lr,loss,seconds`
//!
//! Reals are written with six decimals; undefined values are empty cells.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DETECTION_COLUMNS: [&str; 13] = [
    "epoch",
    "lr",
    "train_box",
    "train_cls",
    "train_dfl",
    "val_box",
    "val_cls",
    "val_dfl",
    "precision",
    "recall",
    "map50",
    "map50_95",
    "seconds",
];

pub const CONTRASTIVE_COLUMNS: [&str; 4] = ["epoch", "lr", "loss", "seconds"];

/// Gain-weighted loss components; the total is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub box_loss: f64,
    pub cls_loss: f64,
    pub dfl_loss: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.box_loss + self.cls_loss + self.dfl_loss
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    pub val: Option<LossParts>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub map50: Option<f64>,
    pub map50_95: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub seconds: f64,
}

/// Fine-tuning history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<MetricsRecord>,
    pub seconds: f64,
    pub config: String,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn detection_csv(records: &[MetricsRecord]) -> String {
    let mut s = DETECTION_COLUMNS.join(",");
    s.push('\n');
    for r in records {
        let v = r.val;
        let cells = [
            r.epoch.to_string(),
            cell(Some(r.lr)),
            cell(Some(r.train.box_loss)),
            cell(Some(r.train.cls_loss)),
            cell(Some(r.train.dfl_loss)),
            cell(v.map(|v| v.box_loss)),
            cell(v.map(|v| v.cls_loss)),
            cell(v.map(|v| v.dfl_loss)),
            cell(r.precision),
            cell(r.recall),
            cell(r.map50),
            cell(r.map50_95),
            cell(Some(r.seconds)),
        ];
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

pub fn contrastive_csv(records: &[ContrastiveRecord]) -> String {
    let mut s = CONTRASTIVE_COLUMNS.join(",");
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.epoch, r.lr, r.loss, r.seconds);
    }
    s
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    super::write_file(path, detection_csv(records).as_bytes())
}

pub fn write_contrastive_csv(records: &[ContrastiveRecord], path: &Path) -> Result<()> {
    super::write_file(path, contrastive_csv(records).as_bytes())
}

fn rows<'a>(text: &'a str, columns: &[&str], path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, h)| h).unwrap_or_default();
    if header.split(',').ne(columns.iter().copied()) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!("header `{header}` does not match `{}`", columns.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                path: path.into(),
                line: i + 1,
                msg: format!("{} cells, expected {}", cells.len(), columns.len()),
            });
        }
        out.push((i + 1, cells));
    }
    Ok(out)
}

fn num(s: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("bad number `{s}`"),
    })
}

fn req(s: &str, path: &Path, line: usize) -> Result<f64> {
    num(s, path, line)?.ok_or_else(|| Error::Parse {
        path: path.into(),
        line,
        msg: "required value missing".into(),
    })
}

pub fn parse_detection_csv(text: &str, path: &Path) -> Result<Vec<MetricsRecord>> {
    rows(text, &DETECTION_COLUMNS, path)?
        .into_iter()
        .map(|(ln, c)| {
            let val = match (num(c[5], path, ln)?, num(c[6], path, ln)?, num(c[7], path, ln)?) {
                (Some(b), Some(cl), Some(d)) => Some(LossParts {
                    box_loss: b,
                    cls_loss: cl,
                    dfl_loss: d,
                }),
                _ => None,
            };
            Ok(MetricsRecord {
                epoch: req(c[0], path, ln)? as usize,
                lr: req(c[1], path, ln)?,
                train: LossParts {
                    box_loss: req(c[2], path, ln)?,
                    cls_loss: req(c[3], path, ln)?,
                    dfl_loss: req(c[4], path, ln)?,
                },
                val,
                precision: num(c[8], path, ln)?,
                recall: num(c[9], path, ln)?,
                map50: num(c[10], path, ln)?,
                map50_95: num(c[11], path, ln)?,
                seconds: req(c[12], path, ln)?,
            })
        })
        .collect()
}

pub fn parse_contrastive_csv(text: &str, path: &Path) -> Result<Vec<ContrastiveRecord>> {
    rows(text, &CONTRASTIVE_COLUMNS, path)?
        .into_iter()
        .map(|(ln, c)| {
            Ok(ContrastiveRecord {
                epoch: req(c[0], path, ln)? as usize,
                lr: req(c[1], path, ln)?,
                loss: req(c[2], path, ln)?,
                seconds: req(c[3], path, ln)?,
            })
        })
        .collect()
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detection_csv(&text, path)
}

pub fn read_contrastive_csv(path: &Path) -> Result<Vec<ContrastiveRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_contrastive_csv(&text, path)
}
