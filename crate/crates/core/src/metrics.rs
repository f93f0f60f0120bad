//! Confusion-matrix metrics and cluster-to-class matching.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::data::LabelMask;

/// Largest cluster count the exhaustive matcher accepts.
pub const MAX_MATCH_CLUSTERS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("mask shapes differ: prediction {pred:?}, ground truth {gt:?}")]
    Shape { pred: (usize, usize), gt: (usize, usize) },
    #[error("label {label} at pixel {index} is outside 0..{classes}")]
    Label { label: u8, index: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("{clusters} clusters cannot cover {classes} classes")]
    TooFewClusters { clusters: usize, classes: usize },
    #[error("exhaustive matching supports at most {MAX_MATCH_CLUSTERS} clusters, got {0}")]
    TooManyClusters(usize),
    #[error("matrices of size {0} and {1} cannot be merged")]
    SizeMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Integer counts indexed by (row label, column label).
#[derive(Debug, Clone, PartialEq, Eq)]
struct Counts {
    rows: usize,
    cols: usize,
    cells: Vec<u64>,
}

impl Counts {
    fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![0; rows * cols] }
    }

    fn add(&mut self, row_mask: &LabelMask, col_mask: &LabelMask) -> Result<()> {
        let (rs, cs) = ((row_mask.height(), row_mask.width()), (col_mask.height(), col_mask.width()));
        if rs != cs {
            return Err(MetricsError::Shape { pred: cs, gt: rs });
        }
        let check = |labels: &[u8], n: usize| {
            labels
                .iter()
                .position(|&l| l as usize >= n)
                .map_or(Ok(()), |i| Err(MetricsError::Label { label: labels[i], index: i, classes: n }))
        };
        check(row_mask.labels(), self.rows)?;
        check(col_mask.labels(), self.cols)?;
        for (&r, &c) in row_mask.labels().iter().zip(col_mask.labels()) {
            self.cells[r as usize * self.cols + c as usize] += 1;
        }
        Ok(())
    }

    fn get(&self, r: usize, c: usize) -> u64 {
        self.cells[r * self.cols + c]
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix(Counts);

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self(Counts::new(num_classes, num_classes))
    }

    pub fn num_classes(&self) -> usize {
        self.0.rows
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.0.get(gt, pred)
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        self.0.add(gt, pred)
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(MetricsError::SizeMismatch(self.num_classes(), other.num_classes()));
        }
        self.0.cells.iter_mut().zip(&other.0.cells).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.0.cells.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        (0..self.num_classes()).map(|p| self.get(k, p)).sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.num_classes()).map(|g| self.get(g, k)).sum()
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let trace: u64 = (0..self.num_classes()).map(|k| self.get(k, k)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// `None` marks a class absent from both prediction and ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|k| {
                let tp = self.get(k, k);
                let union = self.row_sum(k) + self.col_sum(k) - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over defined per-class IoUs.
    pub fn mean_iou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(MetricsError::Empty);
        }
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn precision_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|k| {
                let c = self.col_sum(k);
                (c > 0).then(|| self.get(k, k) as f64 / c as f64)
            })
            .collect()
    }

    pub fn recall_per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|k| {
                let r = self.row_sum(k);
                (r > 0).then(|| self.get(k, k) as f64 / r as f64)
            })
            .collect()
    }
}

/// Co-occurrence counts of predicted clusters (rows) and true classes (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable(Counts);

impl ContingencyTable {
    pub fn new(clusters: usize, classes: usize) -> Self {
        Self(Counts::new(clusters, classes))
    }

    pub fn clusters(&self) -> usize {
        self.0.rows
    }

    pub fn classes(&self) -> usize {
        self.0.cols
    }

    pub fn get(&self, cluster: usize, class: usize) -> u64 {
        self.0.get(cluster, class)
    }

    pub fn accumulate(&mut self, clusters: &LabelMask, gt: &LabelMask) -> Result<()> {
        self.0.add(clusters, gt)
    }
}

/// `map[cluster]` is the class assigned to that cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMapping {
    pub map: Vec<u8>,
}

impl ClusterMapping {
    pub fn apply(&self, clusters: &LabelMask) -> LabelMask {
        clusters.map_labels(|c| self.map[c as usize])
    }

    /// Pixels whose mapped class matches the ground truth.
    pub fn matched(&self, table: &ContingencyTable) -> u64 {
        self.map.iter().enumerate().map(|(k, &c)| table.get(k, c as usize)).sum()
    }
}

/// Chooses the cluster-to-class map with the most matched pixels. Every class
/// receives a distinct cluster, found by exhaustive search over injective
/// assignments; the remaining clusters take their plurality class. Ties keep
/// the assignment that is lexicographically first in cluster ids.
pub fn match_table(table: &ContingencyTable) -> Result<ClusterMapping> {
    let (k, n) = (table.clusters(), table.classes());
    if k < n {
        return Err(MetricsError::TooFewClusters { clusters: k, classes: n });
    }
    if k > MAX_MATCH_CLUSTERS {
        return Err(MetricsError::TooManyClusters(k));
    }
    let plurality: Vec<(u8, u64)> = (0..k)
        .map(|c| {
            let mut best = (0u8, table.get(c, 0));
            for cls in 1..n {
                if table.get(c, cls) > best.1 {
                    best = (cls as u8, table.get(c, cls));
                }
            }
            best
        })
        .collect();
    let plurality_total: u64 = plurality.iter().map(|p| p.1).sum();

    struct Search<'a> {
        table: &'a ContingencyTable,
        plurality: &'a [(u8, u64)],
        chosen: Vec<usize>,
        used: Vec<bool>,
        best: Option<(u64, Vec<usize>)>,
    }

    impl Search<'_> {
        /// `score` counts matched pixels of assigned clusters minus the
        /// plurality mass those clusters no longer contribute.
        fn run(&mut self, score: i64) {
            let class = self.chosen.len();
            if class == self.table.classes() {
                let s = score as u64;
                if self.best.as_ref().is_none_or(|b| s > b.0) {
                    self.best = Some((s, self.chosen.clone()));
                }
                return;
            }
            for c in 0..self.table.clusters() {
                if self.used[c] {
                    continue;
                }
                self.used[c] = true;
                self.chosen.push(c);
                let delta = self.table.get(c, class) as i64 - self.plurality[c].1 as i64;
                self.run(score + delta);
                self.chosen.pop();
                self.used[c] = false;
            }
        }
    }

    let mut search = Search { table, plurality: &plurality, chosen: Vec::new(), used: vec![false; k], best: None };
    search.run(plurality_total as i64);
    let (_, chosen) = search.best.expect("at least one assignment exists");
    let mut map: Vec<u8> = plurality.iter().map(|p| p.0).collect();
    for (class, &cluster) in chosen.iter().enumerate() {
        map[cluster] = class as u8;
    }
    Ok(ClusterMapping { map })
}

/// Matches a single predicted cluster mask against its ground truth.
pub fn match_clusters_to_classes(
    pred_clusters: &LabelMask,
    gt: &LabelMask,
    clusters: usize,
    num_classes: usize,
) -> Result<ClusterMapping> {
    if clusters < num_classes {
        return Err(MetricsError::TooFewClusters { clusters, classes: num_classes });
    }
    let mut t = ContingencyTable::new(clusters, num_classes);
    t.accumulate(pred_clusters, gt)?;
    match_table(&t)
}

/// Evaluated metrics with class names, ready for display or `key = value` output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub pa: f64,
    pub iou: Vec<Option<f64>>,
    pub mean_iou: f64,
}

pub fn format_optional(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl MetricReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[&str]) -> Result<Self> {
        let class_names = (0..cm.num_classes())
            .map(|k| class_names.get(k).map_or_else(|| format!("class{k}"), |s| s.to_string()))
            .collect();
        Ok(Self { class_names, pa: cm.pixel_accuracy()?, iou: cm.iou_per_class(), mean_iou: cm.mean_iou()? })
    }

    /// Lines `<prefix>pa`, `<prefix>iou.<class>`, `<prefix>mean_iou`.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = format!("{prefix}pa = {}\n", self.pa);
        for (name, v) in self.class_names.iter().zip(&self.iou) {
            let _ = writeln!(s, "{prefix}iou.{name} = {}", format_optional(*v));
        }
        let _ = writeln!(s, "{prefix}mean_iou = {}", self.mean_iou);
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.class_names.iter().map(|n| n.len() + 4).max().unwrap_or(0).max(7);
        writeln!(f, "{:<width$}  {:>9}", "metric", "value")?;
        writeln!(f, "{:<width$}  {:>9.4}", "PA", self.pa)?;
        for (name, v) in self.class_names.iter().zip(&self.iou) {
            let cell = v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"));
            writeln!(f, "{:<width$}  {cell:>9}", format!("IoU {name}"))?;
        }
        writeln!(f, "{:<width$}  {:>9.4}", "MeanIoU", self.mean_iou)
    }
}
