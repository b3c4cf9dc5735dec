//! Results tables: one row per clustering/fusion configuration with
//! patch- and cluster-level accuracy and F1.

use crate::fusion::{BinaryMetrics, FusionMethod};

use super::config::ClusteringMethod;
use super::report::RunReport;

const MISSING: &str = "—";

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub clustering: ClusteringMethod,
    pub fusion: FusionMethod,
    pub patch: Option<BinaryMetrics>,
    pub cluster: Option<BinaryMetrics>,
}

fn order_key(row: &TableRow) -> (u8, usize, FusionMethod) {
    match row.clustering {
        ClusteringMethod::InfoDensity(k) => (0, k, row.fusion),
        ClusteringMethod::Phenotype(k) => (1, k, row.fusion),
    }
}

/// Rows from every report, information-density methods first, then by `k`,
/// vote before SVM.
pub fn collect_rows(reports: &[RunReport]) -> Vec<TableRow> {
    let mut rows: Vec<TableRow> = reports
        .iter()
        .flat_map(|r| &r.results)
        .map(|r| TableRow {
            label: r.label.clone(),
            clustering: r.clustering,
            fusion: r.fusion,
            patch: r.metrics.patch,
            cluster: r.metrics.cluster,
        })
        .collect();
    rows.sort_by_key(order_key);
    rows
}

fn values(row: &TableRow) -> [Option<f64>; 4] {
    [
        row.patch.map(|m| m.accuracy),
        row.patch.map(|m| m.f1),
        row.cluster.map(|m| m.accuracy),
        row.cluster.map(|m| m.f1),
    ]
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| format!("{v:.2}"))
}

pub fn render_text(rows: &[TableRow]) -> String {
    let width = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{:width$} {:<9} {}\n", "", "patch", "cluster");
    out.push_str(&format!("{:width$} {:<4} {:<4} {:<4} {:<4}\n", "method", "acc", "F1", "acc", "F1"));
    for r in rows {
        let cells: Vec<String> = values(r).iter().map(|v| format!("{:<4}", cell(*v))).collect();
        out.push_str(format!("{:width$} {}", r.label, cells.join(" ")).trim_end());
        out.push('\n');
    }
    out
}

pub fn render_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("method,patch_accuracy,patch_f1,cluster_accuracy,cluster_f1\n");
    for r in rows {
        let cells: Vec<String> = values(r).iter().map(|v| v.map_or_else(String::new, |v| format!("{v:.4}"))).collect();
        out.push_str(&format!("{},{}\n", r.label, cells.join(",")));
    }
    out
}
