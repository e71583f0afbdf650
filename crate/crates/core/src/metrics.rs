//! Task/domain performance ratios and kept-parameter structure reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::matrix_dims;
use crate::pruners::SparseDelta;

/// `pruned / dense`.
pub fn task_ratio(dense: f64, pruned: f64) -> Result<f64> {
    if !(dense > 0.0) {
        return Err(Error::Argument(format!("dense score must be positive, got {dense}")));
    }
    if !(pruned >= 0.0) {
        return Err(Error::Argument(format!("pruned score must be non-negative, got {pruned}")));
    }
    Ok(pruned / dense)
}

/// Geometric mean of task ratios, computed in log space.
pub fn domain_ratio(ratios: &[f64]) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::Argument("domain ratio needs at least one task".into()));
    }
    if let Some(bad) = ratios.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(Error::Argument(format!("task ratios must be positive and finite, got {bad}")));
    }
    let mean_log = ratios.iter().map(|r| r.ln()).sum::<f64>() / ratios.len() as f64;
    Ok(mean_log.exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub name: String,
    pub dense: f64,
    pub pruned: f64,
}

/// Task-score file: `{"domain": ..., "tasks": [{"name", "dense", "pruned"}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScoreSet {
    pub domain: String,
    pub tasks: Vec<TaskScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub task_ratios: BTreeMap<String, f64>,
    pub domain_ratio: f64,
    /// `domain_ratio * 100`, as tables report it.
    pub domain_percent: f64,
    /// Set when a pruned score of zero forced the ratio to 0.
    pub degenerate: bool,
}

impl TaskScoreSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let set: TaskScoreSet = serde_json::from_str(text)?;
        let mut names = std::collections::HashSet::new();
        for t in &set.tasks {
            if !names.insert(&t.name) {
                return Err(Error::Argument(format!("duplicate task {}", t.name)));
            }
        }
        Ok(set)
    }

    pub fn report(&self) -> Result<DomainReport> {
        let mut task_ratios = BTreeMap::new();
        let mut ratios = Vec::new();
        for t in &self.tasks {
            let r = task_ratio(t.dense, t.pruned)?;
            task_ratios.insert(t.name.clone(), r);
            ratios.push(r);
        }
        let degenerate = ratios.iter().any(|&r| r == 0.0);
        let domain_ratio = if degenerate { 0.0 } else { domain_ratio(&ratios)? };
        Ok(DomainReport {
            domain: self.domain.clone(),
            task_ratios,
            domain_ratio,
            domain_percent: domain_ratio * 100.0,
            degenerate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionCounts {
    pub tensor_name: String,
    pub rows: usize,
    pub cols: usize,
    pub row_kept: Vec<usize>,
    pub col_kept: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub per_layer_kept: BTreeMap<usize, usize>,
    pub per_layer_total: BTreeMap<usize, usize>,
    /// Keyed by tensor name.
    pub per_unit_kept: BTreeMap<String, usize>,
    pub dimensions: Vec<DimensionCounts>,
}

/// Kept-count aggregation per layer, per unit and, for the selected units,
/// per matrix row and column.
pub fn structure_report(sparse: &SparseDelta, units_of_interest: &[&str]) -> Result<StructureReport> {
    let mut per_layer_kept = BTreeMap::new();
    let mut per_layer_total = BTreeMap::new();
    let mut per_unit_kept = BTreeMap::new();
    for (u, key) in sparse.topology.units.iter().enumerate() {
        *per_layer_kept.entry(key.layer).or_insert(0) += sparse.kept_counts[u];
        *per_layer_total.entry(key.layer).or_insert(0) += sparse.masks[u].len();
        per_unit_kept.insert(key.tensor_name.clone(), sparse.kept_counts[u]);
    }
    let mut dimensions = Vec::new();
    for &name in units_of_interest {
        let u = sparse
            .topology
            .unit_index(name)
            .ok_or_else(|| Error::Topology(format!("unknown unit {name}")))?;
        let (rows, cols) = matrix_dims(&sparse.values[u].shape);
        let mut row_kept = vec![0; rows];
        let mut col_kept = vec![0; cols];
        for i in sparse.masks[u].iter_ones() {
            row_kept[i / cols] += 1;
            col_kept[i % cols] += 1;
        }
        dimensions.push(DimensionCounts { tensor_name: name.to_string(), rows, cols, row_kept, col_kept });
    }
    Ok(StructureReport { per_layer_kept, per_layer_total, per_unit_kept, dimensions })
}

impl StructureReport {
    /// CSV with columns `kind,layer,unit,index,kept`, one row per layer,
    /// unit, row and column.
    pub fn write_csv(&self, sparse: &SparseDelta, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["kind", "layer", "unit", "index", "kept"]).map_err(csv_err)?;
        for (l, k) in &self.per_layer_kept {
            w.write_record(["layer", &l.to_string(), "", "", &k.to_string()]).map_err(csv_err)?;
        }
        for key in &sparse.topology.units {
            let k = self.per_unit_kept[&key.tensor_name];
            w.write_record(["unit", &key.layer.to_string(), &key.tensor_name, "", &k.to_string()])
                .map_err(csv_err)?;
        }
        for d in &self.dimensions {
            let layer = sparse.topology.units[sparse.topology.unit_index(&d.tensor_name).unwrap()]
                .layer
                .to_string();
            for (kind, counts) in [("row", &d.row_kept), ("col", &d.col_kept)] {
                for (i, k) in counts.iter().enumerate() {
                    w.write_record([kind, &layer, &d.tensor_name, &i.to_string(), &k.to_string()])
                        .map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::{DeltaModel, DeltaTensor};
    use crate::pruners::{prune_magnitude, PruneMethod};
    use crate::topology::{ModelTopology, NamingRule};
    use bitvec::prelude::*;
    use indexmap::IndexMap;

    #[test]
    fn ratios() {
        assert_eq!(task_ratio(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(task_ratio(0.4, 0.1).unwrap(), 0.25);
        assert!(task_ratio(0.0, 0.1).is_err());
        assert!(task_ratio(0.5, -0.1).is_err());
        assert_eq!(domain_ratio(&[0.25, 4.0]).unwrap(), 1.0);
        assert!((domain_ratio(&[0.7, 0.7]).unwrap() - 0.7).abs() < 1e-15);
        assert!(domain_ratio(&[0.5, 0.0]).is_err());
        assert!(domain_ratio(&[]).is_err());
    }

    #[test]
    fn score_file_and_degenerate_flag() {
        let json = r#"{"domain":"math","tasks":[{"name":"a","dense":0.5,"pruned":0.25},{"name":"b","dense":0.2,"pruned":0.4}]}"#;
        let r = TaskScoreSet::from_json(json).unwrap().report().unwrap();
        assert!((r.domain_ratio - 1.0).abs() < 1e-15);
        assert!(!r.degenerate);
        let zero = r#"{"domain":"x","tasks":[{"name":"a","dense":0.5,"pruned":0.0},{"name":"b","dense":0.5,"pruned":0.5}]}"#;
        let r = TaskScoreSet::from_json(zero).unwrap().report().unwrap();
        assert!(r.degenerate);
        assert_eq!(r.domain_percent, 0.0);
        let dup = r#"{"domain":"x","tasks":[{"name":"a","dense":1,"pruned":1},{"name":"a","dense":1,"pruned":1}]}"#;
        assert!(TaskScoreSet::from_json(dup).is_err());
    }

    fn square_model() -> DeltaModel {
        let topology = ModelTopology::from_names(["layers.0.q.weight", "layers.1.k.weight"], &NamingRule::defaults()).unwrap();
        DeltaModel {
            topology,
            units: vec![
                DeltaTensor::new(vec![4, 4], (0..16).map(|i| i as f64 + 1.0).collect()).unwrap(),
                DeltaTensor::new(vec![2, 3], vec![1.0; 6]).unwrap(),
            ],
            passthrough: IndexMap::new(),
        }
    }

    #[test]
    fn full_mask_counts_everything() {
        let s = prune_magnitude(&square_model(), 0.0).unwrap();
        let r = structure_report(&s, &["layers.1.k.weight"]).unwrap();
        assert_eq!(r.per_layer_kept, r.per_layer_total);
        assert_eq!(r.per_layer_kept[&0], 16);
        assert_eq!(r.dimensions[0].row_kept, vec![3, 3]);
        assert_eq!(r.dimensions[0].col_kept, vec![2, 2, 2]);
        assert!(structure_report(&s, &["nope"]).is_err());
    }

    #[test]
    fn checkerboard_rows_and_cols() {
        let mut s = prune_magnitude(&square_model(), 0.0).unwrap();
        let board: BitVec = (0..16).map(|i| (i / 4 + i % 4) % 2 == 0).collect();
        s.kept_counts[0] = board.count_ones();
        s.masks[0] = board;
        s.method = PruneMethod::Dp;
        let r = structure_report(&s, &["layers.0.q.weight"]).unwrap();
        assert_eq!(r.dimensions[0].row_kept, vec![2; 4]);
        assert_eq!(r.dimensions[0].col_kept, vec![2; 4]);
        let mut buf = Vec::new();
        r.write_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("kind,layer,unit,index,kept\n"));
        assert_eq!(text.lines().count(), 1 + 2 + 2 + 8);
    }
}
