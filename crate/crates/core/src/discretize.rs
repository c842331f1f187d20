//! Representative disparity values for N bins: uniform (UD), log-uniform
//! (SID) and learned adaptive partitions.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for DisparityRange {
    fn default() -> Self {
        Self { lo: 0.01, hi: 1.0 }
    }
}

impl DisparityRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "disparity range needs 0 <= lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ud,
    Sid,
    Addv,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ud => "ud",
            Strategy::Sid => "sid",
            Strategy::Addv => "addv",
        })
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ud" => Ok(Strategy::Ud),
            "sid" => Ok(Strategy::Sid),
            "addv" => Ok(Strategy::Addv),
            _ => Err(Error::InvalidArgument(format!("unknown strategy {s:?}"))),
        }
    }
}

/// Strictly increasing representative values `b¹ < … < bᴺ`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinPartition {
    values: Vec<f64>,
    strategy: Strategy,
}

impl BinPartition {
    pub fn new(values: Vec<f64>, strategy: Strategy) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("a partition needs at least one bin".into()));
        }
        if values.windows(2).any(|w| !(w[0] < w[1])) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "bin values must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { values, strategy })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `[N]` tensor of the values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.values.len()], self.values.clone())
    }

    /// Writes `index,value` rows (1-based index) with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "index,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(out, "{},{}", i + 1, v)?;
        }
        Ok(())
    }
}

fn check_count(n: usize) -> Result<()> {
    if n < 1 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    Ok(())
}

/// Equal-width bins over the range, represented by their centers.
pub fn uniform_bins(n: usize, range: DisparityRange) -> Result<BinPartition> {
    check_count(n)?;
    let width = (range.hi - range.lo) / n as f64;
    let values = (0..n).map(|i| range.lo + (i as f64 + 0.5) * width).collect();
    BinPartition::new(values, Strategy::Ud)
}

/// Edges of the log-uniform partition, `N + 1` values from `lo` to `hi`.
pub fn sid_edges(n: usize, range: DisparityRange) -> Result<Vec<f64>> {
    check_count(n)?;
    if !(range.lo > 0.0) {
        return Err(Error::InvalidArgument(
            "log-uniform bins need a strictly positive lower bound".into(),
        ));
    }
    let (ln_lo, ln_ratio) = (range.lo.ln(), (range.hi / range.lo).ln());
    Ok((0..=n)
        .map(|i| (ln_lo + i as f64 / n as f64 * ln_ratio).exp())
        .collect())
}

/// Log-uniform bins represented by the geometric center of their edges.
pub fn sid_bins(n: usize, range: DisparityRange) -> Result<BinPartition> {
    check_count(n)?;
    if !(range.lo > 0.0) {
        return Err(Error::InvalidArgument(
            "log-uniform bins need a strictly positive lower bound".into(),
        ));
    }
    let (ln_lo, ln_ratio) = (range.lo.ln(), (range.hi / range.lo).ln());
    let values = (0..n)
        .map(|i| (ln_lo + (i as f64 + 0.5) / n as f64 * ln_ratio).exp())
        .collect();
    BinPartition::new(values, Strategy::Sid)
}

pub fn fixed_bins(strategy: Strategy, n: usize, range: DisparityRange) -> Result<BinPartition> {
    match strategy {
        Strategy::Ud => uniform_bins(n, range),
        Strategy::Sid => sid_bins(n, range),
        Strategy::Addv => Err(Error::InvalidArgument(
            "adaptive bins are produced from features, not from a range".into(),
        )),
    }
}

/// Tape form of the adaptive map along `axis`:
/// sigmoid → cumulative sum → divide by the last (largest) entry.
pub fn adaptive_bins_on_tape(tape: &Tape, width_logits: Var, axis: usize) -> Result<Var> {
    let widths = tape.sigmoid(width_logits)?;
    let cum = tape.cumsum(widths, axis)?;
    tape.normalize_by_last(cum, axis)
}

/// Adaptive partition from `[N, 1, 1]` (or `[N]`) width logits.
pub fn adaptive_bins(width_logits: &Tensor) -> Result<BinPartition> {
    let n = width_logits.len();
    check_count(n)?;
    let tape = Tape::new();
    let x = tape.constant(width_logits.reshape(&[n])?);
    let b = adaptive_bins_on_tape(&tape, x, 0)?;
    let values = tape.value(b).data().to_vec();
    BinPartition::new(values, Strategy::Addv)
}
