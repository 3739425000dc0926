//! On-disk series formats.
//!
//! CSV: one line per time step, `N·C` comma-separated decimal values in
//! node-major, channel-minor order. An optional first line that does not
//! parse as numbers is treated as a header. `NaN` is accepted as a token.
//!
//! Binary: a 24-byte header of three little-endian `u64` values
//! `T_total, N, C`, followed by `T_total·N·C` little-endian IEEE-754
//! `f32` values in row-major `[t][n][c]` order. Nothing else.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NanPolicy {
    #[default]
    Reject,
    /// Replace a missing value with the previous step's value for the same
    /// node and channel (leading gaps take the first observed value).
    ForwardFill,
}

/// What the caller expects a series file to contain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataLayout {
    pub format: DataFormat,
    /// Expected number of time steps; `None` accepts whatever the file holds.
    pub t_total: Option<usize>,
    pub n_nodes: usize,
    pub channels: usize,
    #[serde(default)]
    pub nan_policy: NanPolicy,
    #[serde(default = "default_interval")]
    pub interval_minutes: u32,
    #[serde(default = "default_ratios")]
    pub split_ratios: [f64; 3],
}

fn default_interval() -> u32 {
    5
}

fn default_ratios() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

impl DataLayout {
    pub fn csv(n_nodes: usize) -> Self {
        Self {
            format: DataFormat::Csv,
            t_total: None,
            n_nodes,
            channels: 1,
            nan_policy: NanPolicy::Reject,
            interval_minutes: 5,
            split_ratios: default_ratios(),
        }
    }

    pub fn binary(n_nodes: usize) -> Self {
        Self {
            format: DataFormat::Binary,
            ..Self::csv(n_nodes)
        }
    }
}

pub fn load_dataset(path: &Path, layout: &DataLayout) -> Result<SeriesDataset> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let width = layout.n_nodes * layout.channels;
    if width == 0 {
        return Err(Error::Data("layout declares zero nodes or channels".into()));
    }
    let (t_total, mut values) = match layout.format {
        DataFormat::Csv => parse_csv(&bytes, width)?,
        DataFormat::Binary => parse_binary(&bytes, layout)?,
    };
    if let Some(expected) = layout.t_total {
        if expected != t_total {
            return Err(Error::Data(format!(
                "declared T_total = {expected} but the file holds {t_total} steps"
            )));
        }
    }
    if t_total == 0 {
        return Err(Error::Data(format!("{} holds no time steps", path.display())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        match layout.nan_policy {
            NanPolicy::Reject => {
                let pos = values.iter().position(|v| !v.is_finite()).unwrap();
                return Err(Error::Data(format!(
                    "non-finite value at step {}, column {} (nan_policy = reject)",
                    pos / width,
                    pos % width
                )));
            }
            NanPolicy::ForwardFill => forward_fill(&mut values, width)?,
        }
    }
    let tensor = Tensor::new(vec![t_total, layout.n_nodes, layout.channels], values)?;
    SeriesDataset::new(tensor, layout.interval_minutes, layout.split_ratios)
}

fn parse_csv(bytes: &[u8], width: usize) -> Result<(usize, Vec<f64>)> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Data("CSV is not valid UTF-8".into()))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if rows == 0 && values.is_empty() && lineno == 0 => continue, // header
            Err(e) => return Err(Error::Data(format!("line {}: {e}", lineno + 1))),
        };
        if row.len() != width {
            return Err(Error::Data(format!(
                "line {} has {} columns, layout declares {}",
                lineno + 1,
                row.len(),
                width
            )));
        }
        values.extend(row);
        rows += 1;
    }
    Ok((rows, values))
}

fn parse_binary(bytes: &[u8], layout: &DataLayout) -> Result<(usize, Vec<f64>)> {
    if bytes.len() < 24 {
        return Err(Error::Data("binary series is shorter than its 24-byte header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap()) as usize;
    let (t, n, c) = (word(0), word(1), word(2));
    if n != layout.n_nodes || c != layout.channels {
        return Err(Error::Data(format!(
            "file header says N={n}, C={c}; layout declares N={}, C={}",
            layout.n_nodes, layout.channels
        )));
    }
    let count = t
        .checked_mul(n)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Data("header extents overflow".into()))?;
    let body = &bytes[24..];
    if body.len() != count * 4 {
        return Err(Error::Data(format!(
            "header declares {count} values ({} bytes) but the body has {} bytes",
            count * 4,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((t, values))
}

fn forward_fill(values: &mut [f64], width: usize) -> Result<()> {
    let rows = values.len() / width;
    for col in 0..width {
        let first = (0..rows)
            .map(|r| values[r * width + col])
            .find(|v| v.is_finite())
            .ok_or_else(|| Error::Data(format!("column {col} has no finite value to fill from")))?;
        let mut last = first;
        for r in 0..rows {
            let v = &mut values[r * width + col];
            if v.is_finite() {
                last = *v;
            } else {
                *v = last;
            }
        }
    }
    Ok(())
}

/// Writes the raw series (normalization is not undone) as CSV with a
/// `n{node}_c{channel}` header.
pub fn save_csv(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let (t, n, c) = (ds.t_total(), ds.n_nodes(), ds.channels());
    let mut out = String::new();
    let header: Vec<String> = (0..n).flat_map(|i| (0..c).map(move |j| format!("n{i}_c{j}"))).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in ds.data().data().chunks(n * c).take(t) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the series in the binary format (values rounded to f32).
pub fn save_binary(ds: &SeriesDataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + ds.data().numel() * 4);
    for d in [ds.t_total(), ds.n_nodes(), ds.channels()] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in ds.data().data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}
