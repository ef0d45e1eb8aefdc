//! Feature vectors and the line-oriented files that carry them between
//! pipeline stages.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::Label;

/// Fixed-dimension embedding of one flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

/// Stacks vectors into a row matrix; every vector must share one dimension.
pub fn to_matrix(vectors: &[FeatureVector]) -> Result<Array2<f64>> {
    let d = vectors.first().map(|v| v.dim()).unwrap_or(0);
    let mut out = Array2::zeros((vectors.len(), d));
    for (i, v) in vectors.iter().enumerate() {
        if v.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: v.dim() });
        }
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&v.0));
    }
    Ok(out)
}

pub fn from_matrix(m: &Array2<f64>) -> Vec<FeatureVector> {
    m.outer_iter().map(|r| FeatureVector(r.to_vec())).collect()
}

/// One line of a feature store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: u64,
    pub label: Label,
    pub features: FeatureVector,
}

fn join_values(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    parts.join(" ")
}

fn parse_values(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad value `{t}`: {e}")))
        .collect()
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn write_header(w: &mut impl Write, header: &[String]) -> std::io::Result<()> {
    for h in header {
        writeln!(w, "# {h}")?;
    }
    Ok(())
}

/// `sample_id,label,v1 v2 ... v_d`
pub fn save_feature_store(records: &[FeatureRecord], path: &Path, header: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_header(&mut w, header)?;
    for r in records {
        writeln!(w, "{},{},{}", r.id, r.label, join_values(&r.features.0))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_feature_store(path: &Path) -> Result<Vec<FeatureRecord>> {
    let text = fs::read_to_string(path)?;
    let mut dim = None;
    data_lines(&text)
        .map(|(no, line)| {
            let f: Vec<&str> = line.split(',').collect();
            // synthetic batches carry a trailing region column
            if f.len() != 3 && f.len() != 4 {
                return Err(Error::parse(path, no, format!("expected 3 fields, found {}", f.len())));
            }
            let id = f[0].trim().parse::<u64>().map_err(|e| Error::parse(path, no, format!("bad id: {e}")))?;
            let label = f[1].parse::<Label>().map_err(|r| Error::parse(path, no, r))?;
            let values = parse_values(f[2]).map_err(|r| Error::parse(path, no, r))?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(Error::parse(path, no, format!("expected {d} values, found {}", values.len())))
                }
                _ => {}
            }
            Ok(FeatureRecord {
                id,
                label,
                features: FeatureVector(values),
            })
        })
        .collect()
}

/// Per-sample detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub score: f64,
    pub label: Label,
}

/// `sample_id,score,label`
pub fn save_predictions(preds: &[Prediction], path: &Path, header: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_header(&mut w, header)?;
    for p in preds {
        writeln!(w, "{},{},{}", p.id, p.score, p.label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path)?;
    data_lines(&text)
        .map(|(no, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::parse(path, no, format!("expected 3 fields, found {}", f.len())));
            }
            Ok(Prediction {
                id: f[0].trim().parse().map_err(|e| Error::parse(path, no, format!("bad id: {e}")))?,
                score: f[1].trim().parse().map_err(|e| Error::parse(path, no, format!("bad score: {e}")))?,
                label: f[2].parse().map_err(|r| Error::parse(path, no, r))?,
            })
        })
        .collect()
}

/// `sample_id,log_density`
pub fn save_density_report(rows: &[(u64, f64)], path: &Path, header: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_header(&mut w, header)?;
    for (id, ld) in rows {
        writeln!(w, "{id},{ld}")?;
    }
    w.flush()?;
    Ok(())
}
