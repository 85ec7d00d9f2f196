//! Dense depth frames and the AbsRel / RMSE / δ<1.25 metrics.
//!
//! Binary layout: `b"DPTH"`, height and width as little-endian `u32`, then `height·width`
//! little-endian `f32` values in row-major order. NaN marks an invalid pixel.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";

/// Ratio threshold of the δ accuracy metric.
pub const DELTA_THRESHOLD: f64 = 1.25;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthFrame {
    /// Pixels that are finite and positive are valid; everything else is masked out.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_len(height, width, values.len())?;
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    /// Explicit mask; every pixel it marks valid must hold a finite positive depth.
    pub fn with_mask(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_len(height, width, values.len())?;
        if valid.len() != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} mask entries for {} depth values",
                valid.len(),
                values.len()
            )));
        }
        if let Some(i) = (0..values.len()).find(|&i| valid[i] && !(values[i].is_finite() && values[i] > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} is marked valid but holds depth {}",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_values(self.height, self.width, self.values.iter().map(|v| f(*v)).collect())
    }

    pub fn from_dpth_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != DEPTH_MAGIC {
            return Err(Error::InvalidArgument("missing DPTH header".into()));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Dimension(format!("{height}×{width} depth frame is too large")))?;
        if body.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{height}×{width} frame needs {expected} payload bytes, found {}",
                body.len()
            )));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_values(height, width, values)
    }

    /// Invalid pixels are written as NaN.
    pub fn to_dpth_bytes(&self) -> Result<Vec<u8>> {
        let h = u32::try_from(self.height).map_err(|_| Error::Dimension("height exceeds u32".into()))?;
        let w = u32::try_from(self.width).map_err(|_| Error::Dimension("width exceeds u32".into()))?;
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        for (v, ok) in self.values.iter().zip(&self.valid) {
            let x = if *ok { *v as f32 } else { f32::NAN };
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    /// One image row per line, comma separated; `nan` or an empty cell is invalid.
    pub fn from_csv_str(content: &str, source: &Path) -> Result<Self> {
        let mut values = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|cell| {
                    let cell = cell.trim();
                    if cell.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        f64::from_str(cell).map_err(|_| Error::Parse {
                            path: source.to_path_buf(),
                            line: i + 1,
                            msg: format!("'{cell}' is not a number"),
                        })
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Parse {
                        path: source.to_path_buf(),
                        line: i + 1,
                        msg: format!("row has {} cells, expected {w}", row.len()),
                    })
                }
                _ => {}
            }
            values.extend(row);
            height += 1;
        }
        Self::from_values(height, width.unwrap_or(0), values)
    }

    /// Dispatches on extension: `.csv` as text, anything else as DPTH binary.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Self::from_csv_str(&text, path)
        } else {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            Self::from_dpth_bytes(&bytes).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
        }
    }

    pub fn save_dpth(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_dpth_bytes()?).map_err(|e| Error::io(path, e))
    }
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height.checked_mul(width) != Some(len) {
        return Err(Error::ShapeMismatch(format!(
            "{len} depth values for a {height}×{width} frame"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    #[default]
    Metric,
    ScaleShift,
}

impl FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "metric" => Ok(Alignment::Metric),
            "scale-shift" => Ok(Alignment::ScaleShift),
            other => Err(Error::InvalidArgument(format!(
                "unknown alignment '{other}' (expected metric or scale-shift)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    /// Percentage in [0, 100].
    pub delta_1_25: f64,
    pub n_pixels: usize,
    pub scale: f64,
    pub shift: f64,
}

/// Least-squares `(s, t)` minimizing Σ(s·p + t − g)². A constant prediction carries no
/// scale information, so it gets `s = 0, t = mean(g)`.
pub fn fit_scale_shift(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let p_mean = pred.iter().sum::<f64>() / n;
    let g_mean = gt.iter().sum::<f64>() / n;
    let mut var_p = 0.0;
    let mut cov = 0.0;
    let mut sq_p = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        var_p += (p - p_mean) * (p - p_mean);
        cov += (p - p_mean) * (g - g_mean);
        sq_p += p * p;
    }
    if var_p <= 1e-15 * sq_p {
        return (0.0, g_mean);
    }
    let s = cov / var_p;
    (s, g_mean - s * p_mean)
}

pub fn depth_metrics(pred: &DepthFrame, gt: &DepthFrame, alignment: Alignment) -> Result<DepthMetrics> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}×{}, ground truth is {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let (p, g): (Vec<f64>, Vec<f64>) = (0..gt.values.len())
        .filter(|&i| pred.valid[i] && gt.valid[i])
        .map(|i| (pred.values[i], gt.values[i]))
        .unzip();
    if p.is_empty() {
        return Err(Error::Empty("no jointly valid depth pixels"));
    }
    if g.iter().any(|v| *v <= 0.0) {
        return Err(Error::InvalidArgument("nonpositive ground-truth depth at a valid pixel".into()));
    }
    let (scale, shift) = match alignment {
        Alignment::Metric => (1.0, 0.0),
        Alignment::ScaleShift => fit_scale_shift(&p, &g),
    };

    let n = p.len();
    let mut abs_rel = 0.0;
    let mut sq = 0.0;
    let mut within = 0usize;
    for (pv, gv) in p.iter().zip(&g) {
        let a = if alignment == Alignment::Metric { *pv } else { scale * pv + shift };
        let err = a - gv;
        abs_rel += err.abs() / gv;
        sq += err * err;
        if a > 0.0 && (a / gv).max(gv / a) < DELTA_THRESHOLD {
            within += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n as f64,
        rmse: (sq / n as f64).sqrt(),
        delta_1_25: 100.0 * within as f64 / n as f64,
        n_pixels: n,
        scale,
        shift,
    })
}

/// Unweighted mean over frames; `scale`/`shift` are averaged too and only indicative.
pub fn mean_metrics(frames: &[DepthMetrics]) -> Result<DepthMetrics> {
    if frames.is_empty() {
        return Err(Error::Empty("depth frames"));
    }
    let n = frames.len() as f64;
    let avg = |f: fn(&DepthMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
    Ok(DepthMetrics {
        abs_rel: avg(|m| m.abs_rel),
        rmse: avg(|m| m.rmse),
        delta_1_25: avg(|m| m.delta_1_25),
        n_pixels: frames.iter().map(|m| m.n_pixels).sum(),
        scale: avg(|m| m.scale),
        shift: avg(|m| m.shift),
    })
}
