//! Analytic parameter and multiply-accumulate accounting.
//!
//! One MAC is one multiply-accumulate. Convolutions cost
//! `Ho·Wo·Cout·(Cin/groups)·Kh·Kw` per image, batch norm its inference form
//! (scale and shift, 2 per element), bilinear resizing 4 per output element,
//! the 2×2 blur a depthwise convolution. Pooling, activations, dropout,
//! padding and concatenation are free.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::arch::{Graph, Layer, Node};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub out_shape: [usize; 4],
    pub params: u64,
    /// Per stochastic pass.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    /// Summed over all `samples` passes.
    pub total_macs: u64,
    pub input_shape: [usize; 4],
    pub samples: u64,
}

/// Trainable scalars of one node, from its layer geometry.
pub fn node_params(node: &Node) -> u64 {
    match &node.layer {
        Layer::Conv { spec, .. } => spec.param_count() as u64,
        Layer::BatchNorm { .. } => 2 * node.channels as u64,
        _ => 0,
    }
}

/// Per-pass MACs of one node producing `out`.
pub fn node_macs(node: &Node, out: [usize; 4]) -> u64 {
    let [n, c, h, w] = out.map(|d| d as u64);
    match &node.layer {
        Layer::Conv { spec, .. } => n * spec.macs(out[2], out[3]),
        Layer::BatchNorm { .. } => 2 * n * c * h * w,
        Layer::ResizeLike => 4 * n * c * h * w,
        Layer::BlurPool2x2S2 => 4 * n * c * h * w,
        _ => 0,
    }
}

/// Per-layer and total trainable parameter counts.
pub fn count_params(graph: &Graph) -> (Vec<(String, u64)>, u64) {
    let rows: Vec<(String, u64)> = graph
        .nodes()
        .iter()
        .filter(|n| n.layer != Layer::Input)
        .map(|n| (n.name.clone(), node_params(n)))
        .collect();
    let total = rows.iter().map(|r| r.1).sum();
    (rows, total)
}

/// Full cost report for an N×C×H×W input and `samples` Monte Carlo passes.
pub fn count_macs(graph: &Graph, input_shape: [usize; 4], samples: u64) -> Result<CostReport> {
    if samples == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    let shapes = graph.infer_shapes(input_shape)?;
    let rows: Vec<CostRow> = graph
        .nodes()
        .iter()
        .zip(&shapes)
        .filter(|(n, _)| n.layer != Layer::Input)
        .map(|(n, &s)| CostRow {
            name: n.name.clone(),
            kind: n.layer.kind(),
            out_shape: s,
            params: node_params(n),
            macs: node_macs(n, s),
        })
        .collect();
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs = samples * rows.iter().map(|r| r.macs).sum::<u64>();
    Ok(CostReport { rows, total_params, total_macs, input_shape, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::invalid(format!("unknown report format `{other}` (expected text or csv)"))),
        }
    }
}

/// Millions with two decimals.
pub fn format_params(p: u64) -> String {
    format!("{:.2}M", p as f64 / 1e6)
}

/// Billions with one decimal.
pub fn format_macs(m: u64) -> String {
    format!("{:.1}G", m as f64 / 1e9)
}

fn shape_str(s: [usize; 4]) -> String {
    format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3])
}

pub fn render_report(report: &CostReport, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("name,kind,out_shape,params,macs\n");
            for r in &report.rows {
                let _ = writeln!(out, "{},{},{},{},{}", r.name, r.kind, shape_str(r.out_shape), r.params, r.macs);
            }
            let _ = writeln!(out, "total,,{},{},{}", shape_str(report.input_shape), report.total_params, report.total_macs);
        }
        ReportFormat::Text => {
            let width = report.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(5);
            let _ = writeln!(
                out,
                "{:<width$}  {:<9}  {:<16}  {:>10}  {:>14}",
                "name", "kind", "out_shape", "params", "macs"
            );
            for r in &report.rows {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:<9}  {:<16}  {:>10}  {:>14}",
                    r.name,
                    r.kind,
                    shape_str(r.out_shape),
                    r.params,
                    r.macs
                );
            }
            let _ = writeln!(
                out,
                "{:<width$}  {:<9}  {:<16}  {:>10}  {:>14}  ({} params, {} MACs, S={})",
                "total",
                "",
                shape_str(report.input_shape),
                report.total_params,
                report.total_macs,
                format_params(report.total_params),
                format_macs(report.total_macs),
                report.samples
            );
        }
    }
    out
}

/// Totals `(params, macs)` from the last line of a CSV report.
pub fn parse_csv_totals(csv: &str) -> Result<(u64, u64)> {
    let last = csv.lines().last().ok_or_else(|| Error::invalid("empty report"))?;
    let f: Vec<&str> = last.split(',').collect();
    if f.len() != 5 || f[0] != "total" {
        return Err(Error::invalid(format!("malformed totals row `{last}`")));
    }
    let num = |s: &str| s.parse::<u64>().map_err(|e| Error::invalid(format!("totals row: {e}")));
    Ok((num(f[3])?, num(f[4])?))
}
