//! Arithmetic cost accounting.
//!
//! Costs are multiply-accumulates. A conv costs `cout * cin * kh * kw` per
//! output location; a transposed conv `cin * cout * kh * kw` per input
//! location; a pooling window `k^2` per output value; elementwise ops (ReLU
//! outside a conv, batchnorm, add) one per value; bilinear resampling four
//! per output value; concat and crop nothing. A non-local block over `n`
//! positions with `c` channels and `ce` embedding channels costs
//! `2 n^2 ce + n^2 c` plus its four 1x1 projections.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn conv_macs(cin: usize, cout: usize, kh: usize, kw: usize, ho: usize, wo: usize) -> u64 {
    (cout * cin * kh * kw) as u64 * (ho * wo) as u64
}

pub fn deconv_macs(cin: usize, cout: usize, kh: usize, kw: usize, hin: usize, win: usize) -> u64 {
    (cin * cout * kh * kw) as u64 * (hin * win) as u64
}

pub fn pool_macs(window: usize, channels: usize, ho: usize, wo: usize) -> u64 {
    (window * channels) as u64 * (ho * wo) as u64
}

pub fn elementwise_macs(channels: usize, h: usize, w: usize) -> u64 {
    (channels * h * w) as u64
}

pub fn bilinear_macs(channels: usize, h: usize, w: usize) -> u64 {
    4 * elementwise_macs(channels, h, w)
}

pub fn nonlocal_macs(n: usize, c: usize, ce: usize) -> u64 {
    let (n, c, ce) = (n as u64, c as u64, ce as u64);
    2 * n * n * ce + n * n * c + 4 * c * ce * n
}

/// FLOPs convention: one per MAC, or two (multiply and add counted apart).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convention {
    #[default]
    #[serde(rename = "macs")]
    Macs,
    #[serde(rename = "2macs")]
    TwoMacs,
}

impl Convention {
    pub fn factor(self) -> f64 {
        match self {
            Convention::Macs => 1.0,
            Convention::TwoMacs => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Convention::Macs => "macs",
            Convention::TwoMacs => "2macs",
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(Convention::Macs),
            "2macs" => Ok(Convention::TwoMacs),
            other => Err(Error::schema("convention", format!("expected macs or 2macs, got {other}"))),
        }
    }
}

/// Where a layer sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostRole {
    Trunk,
    Head,
    /// Selective module and mask downsampling: extra work the baseline lacks.
    Overhead,
}

impl CostRole {
    pub fn name(self) -> &'static str {
        match self {
            CostRole::Trunk => "trunk",
            CostRole::Head => "head",
            CostRole::Overhead => "overhead",
        }
    }
}

/// Dense cost of one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub role: CostRole,
    /// Output grid the cost is spread over.
    pub hw: (usize, usize),
    pub macs: u64,
    /// Runs masked; its cost scales with the mask population.
    pub guided: bool,
}

impl LayerCost {
    pub fn new(name: impl Into<String>, role: CostRole, macs: u64, hw: (usize, usize)) -> Self {
        Self { name: name.into(), role, hw, macs, guided: false }
    }

    pub fn overhead(name: impl Into<String>, macs: u64, hw: (usize, usize)) -> Self {
        Self::new(name, CostRole::Overhead, macs, hw)
    }

    /// MACs for one output location of a guided layer.
    pub fn macs_per_location(&self) -> Result<u64> {
        let cells = (self.hw.0 * self.hw.1) as u64;
        if cells == 0 || !self.macs.is_multiple_of(cells) {
            return Err(Error::invalid(format!(
                "layer `{}`: {} MACs do not split over a {}x{} grid",
                self.name, self.macs, self.hw.0, self.hw.1
            )));
        }
        Ok(self.macs / cells)
    }

    /// Exact masked cost with `ones` active output locations.
    pub fn masked_macs(&self, ones: usize) -> Result<u64> {
        if ones > self.hw.0 * self.hw.1 {
            return Err(Error::invalid(format!("layer `{}`: {ones} active cells exceed the grid", self.name)));
        }
        Ok(self.macs_per_location()? * ones as u64)
    }
}

/// Dense cost scaled by density `d`.
pub fn flops_masked(dense: f64, d: f64) -> f64 {
    dense * d
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsRow {
    pub name: String,
    pub role: CostRole,
    pub guided: bool,
    pub dense_flops: f64,
    pub masked_flops: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsReport {
    pub convention: Convention,
    pub images: usize,
    pub rows: Vec<FlopsRow>,
    /// Baseline detector: all non-overhead layers, dense.
    pub dense_total: f64,
    /// Non-overhead layers after masking.
    pub masked_total: f64,
    /// Selective module and mask derivation.
    pub overhead_total: f64,
    pub reduced_absolute: f64,
    /// `100 * (1 - masked_total / dense_total)`.
    pub reduced_percent: f64,
    /// Same with the overhead added to the masked side.
    pub reduced_percent_with_overhead: f64,
    /// Restricted to guided layers.
    pub guided_reduced_percent: f64,
}

fn percent(part: f64, whole: f64) -> f64 {
    if whole == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - part / whole)
    }
}

/// Averages per-image costs. Each entry of `images` gives, per cost row, the
/// number of active output cells of a guided row (`None` for dense rows).
pub fn report(costs: &[LayerCost], images: &[Vec<Option<usize>>], convention: Convention) -> Result<FlopsReport> {
    let k = convention.factor();
    let n = images.len().max(1) as f64;
    let mut rows = Vec::with_capacity(costs.len());
    for (i, c) in costs.iter().enumerate() {
        let cells = (c.hw.0 * c.hw.1) as f64;
        let mut masked = 0.0;
        let mut density = 0.0;
        for img in images {
            let entry = img.get(i).copied().ok_or_else(|| Error::shape("image work shorter than the cost list"))?;
            match (c.guided, entry) {
                (true, Some(ones)) => {
                    masked += c.masked_macs(ones)? as f64;
                    density += ones as f64 / cells;
                }
                (true, None) => return Err(Error::invalid(format!("guided layer `{}` without a mask", c.name))),
                (false, _) => {
                    masked += c.macs as f64;
                    density += 1.0;
                }
            }
        }
        if images.is_empty() {
            masked = c.macs as f64;
            density = 1.0;
        }
        rows.push(FlopsRow {
            name: c.name.clone(),
            role: c.role,
            guided: c.guided,
            dense_flops: k * c.macs as f64,
            masked_flops: k * masked / n,
            density: if images.is_empty() { 1.0 } else { density / n },
        });
    }
    Ok(FlopsReport::from_rows(convention, images.len(), rows))
}

impl FlopsReport {
    pub fn from_rows(convention: Convention, images: usize, rows: Vec<FlopsRow>) -> Self {
        let sum = |f: &dyn Fn(&FlopsRow) -> bool, dense: bool| -> f64 {
            rows.iter()
                .filter(|r| f(r))
                .map(|r| if dense { r.dense_flops } else { r.masked_flops })
                .sum()
        };
        let base = |r: &FlopsRow| r.role != CostRole::Overhead;
        let dense_total = sum(&base, true);
        let masked_total = sum(&base, false);
        let overhead_total = sum(&|r: &FlopsRow| r.role == CostRole::Overhead, false);
        let guided_dense = sum(&|r: &FlopsRow| r.guided, true);
        let guided_masked = sum(&|r: &FlopsRow| r.guided, false);
        Self {
            convention,
            images,
            dense_total,
            masked_total,
            overhead_total,
            reduced_absolute: dense_total - masked_total,
            reduced_percent: percent(masked_total, dense_total),
            reduced_percent_with_overhead: percent(masked_total + overhead_total, dense_total),
            guided_reduced_percent: percent(guided_masked, guided_dense),
            rows,
        }
    }

    /// Baseline total in units of 1e9.
    pub fn dense_giga(&self) -> f64 {
        self.dense_total / 1e9
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:<8}  {:>6}  {:>16}  {:>16}  {:>7}",
            "layer", "role", "guided", "dense_flops", "masked_flops", "density"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:<8}  {:>6}  {:>16.0}  {:>16.1}  {:>7.4}",
                r.name,
                r.role.name(),
                if r.guided { "yes" } else { "no" },
                r.dense_flops,
                r.masked_flops,
                r.density
            );
        }
        let _ = writeln!(s, "convention: {} ({} image(s) averaged)", self.convention.name(), self.images);
        let _ = writeln!(s, "dense total:      {:.4} G", self.dense_total / 1e9);
        let _ = writeln!(s, "masked total:     {:.4} G", self.masked_total / 1e9);
        let _ = writeln!(s, "overhead:         {:.4} G", self.overhead_total / 1e9);
        let _ = writeln!(s, "reduced:          {:.4} G ({:.2}%)", self.reduced_absolute / 1e9, self.reduced_percent);
        let _ = writeln!(s, "reduced w/ ovh:   {:.2}%", self.reduced_percent_with_overhead);
        let _ = writeln!(s, "guided reduced:   {:.2}%", self.guided_reduced_percent);
        s
    }

    /// Per-layer rows followed by summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,role,guided,dense_flops,masked_flops,density\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.name,
                r.role.name(),
                r.guided,
                r.dense_flops,
                r.masked_flops,
                r.density
            );
        }
        let _ = writeln!(s, "total,summary,,{},{},", self.dense_total, self.masked_total);
        let _ = writeln!(s, "overhead,summary,,,{},", self.overhead_total);
        let _ = writeln!(s, "reduced_absolute,summary,,,{},", self.reduced_absolute);
        let _ = writeln!(s, "reduced_percent,summary,,,{},", self.reduced_percent);
        let _ = writeln!(s, "reduced_percent_with_overhead,summary,,,{},", self.reduced_percent_with_overhead);
        let _ = writeln!(s, "guided_reduced_percent,summary,,,{},", self.guided_reduced_percent);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_examples() {
        assert_eq!(conv_macs(3, 64, 3, 3, 300, 300), 155_520_000);
        assert_eq!(conv_macs(1, 1, 1, 1, 1, 1), 1);
    }

    #[test]
    fn masked_examples() {
        let d = 155_520_000.0;
        assert_eq!(flops_masked(d, 1.0), d);
        assert_eq!(flops_masked(d, 0.0), 0.0);
        assert_eq!(flops_masked(d, 0.5), 77_760_000.0);
        let c = LayerCost { guided: true, ..LayerCost::new("c", CostRole::Trunk, 155_520_000, (300, 300)) };
        assert_eq!(c.masked_macs(45_000).unwrap(), 77_760_000);
    }

    fn costs() -> Vec<LayerCost> {
        vec![
            LayerCost::new("a", CostRole::Trunk, 400, (2, 2)),
            LayerCost { guided: true, ..LayerCost::new("b", CostRole::Trunk, 1000, (10, 10)) },
            LayerCost::overhead("sel", 50, (2, 2)),
        ]
    }

    #[test]
    fn all_ones_reduces_nothing() {
        let r = report(&costs(), &[vec![None, Some(100), None]], Convention::Macs).unwrap();
        assert_eq!(r.reduced_percent, 0.0);
        assert!(r.reduced_percent_with_overhead < 0.0);
        assert_eq!(r.overhead_total, 50.0);
    }

    #[test]
    fn averaging_is_linear() {
        let r = report(&costs(), &[vec![None, Some(40), None], vec![None, Some(60), None]], Convention::Macs).unwrap();
        let mean = report(&costs(), &[vec![None, Some(50), None]], Convention::Macs).unwrap();
        assert_eq!(r.masked_total, mean.masked_total);
        assert_eq!(r.guided_reduced_percent, 50.0);
        assert_eq!(r.reduced_percent, 100.0 * (1.0 - r.masked_total / r.dense_total));
    }

    #[test]
    fn convention_doubles() {
        let a = report(&costs(), &[], Convention::Macs).unwrap();
        let b = report(&costs(), &[], Convention::TwoMacs).unwrap();
        assert_eq!(2.0 * a.dense_total, b.dense_total);
        assert_eq!("2macs".parse::<Convention>().unwrap(), Convention::TwoMacs);
        assert!("flops".parse::<Convention>().is_err());
    }
}
