//! Outlier-mass significance per layer and per linear unit, and the
//! per-unit pruning rates derived from it.
//!
//! For rate target `alpha` and fluctuation cap `lambda`:
//!
//! ```text
//! layer_dif[l]  = mean_l(sig_l) - sig_l
//! unit_dif[lj]  = weighted_mean(sig_lj; count_lj) - sig_lj
//! norm(x)       = x * lambda / max|x|      (per collection, 0 if max|x| == 0)
//! theta[lj]     = clamp(alpha + norm(layer_dif)[l] + norm(unit_dif)[lj], 0, 1)
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::delta::DeltaModel;
use crate::error::{Error, Result};
use crate::exec;
use crate::topology::LinearKey;

pub const DEFAULT_OUTLIER_FACTOR: f64 = 5.0;
pub const DEFAULT_LAMBDA: f64 = 0.08;

/// Which elements the mean magnitude behind the outlier threshold is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdScope {
    #[default]
    Global,
    PerLayer,
    PerUnit,
}

/// Whether significance is outlier mass per parameter or the raw mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigNormalization {
    #[default]
    PerParameter,
    RawSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceConfig {
    pub outlier_factor: f64,
    #[serde(default)]
    pub scope: ThresholdScope,
    #[serde(default)]
    pub normalization: SigNormalization,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        SignificanceConfig {
            outlier_factor: DEFAULT_OUTLIER_FACTOR,
            scope: ThresholdScope::Global,
            normalization: SigNormalization::PerParameter,
        }
    }
}

impl SignificanceConfig {
    pub fn with_factor(outlier_factor: f64) -> Self {
        SignificanceConfig { outlier_factor, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub config: SignificanceConfig,
    pub global_mean_magnitude: f64,
    /// Distinct layer indices, ascending.
    pub layers: Vec<usize>,
    pub per_layer_sig: Vec<f64>,
    /// Aligned with the delta's topology units.
    pub units: Vec<LinearKey>,
    pub per_unit_sig: Vec<f64>,
    pub per_unit_count: Vec<usize>,
    /// Position of each unit's layer within `layers`.
    pub unit_layer: Vec<usize>,
}

impl SignificanceReport {
    /// Builds a report straight from significance values, bypassing any delta.
    pub fn from_parts(
        units: Vec<LinearKey>,
        per_unit_sig: Vec<f64>,
        per_unit_count: Vec<usize>,
        per_layer_sig: Vec<(usize, f64)>,
    ) -> Result<Self> {
        if per_unit_sig.len() != units.len() || per_unit_count.len() != units.len() {
            return Err(Error::Argument("unit-aligned vectors differ in length".into()));
        }
        let layers: Vec<usize> = per_layer_sig.iter().map(|(l, _)| *l).collect();
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("layers must be strictly ascending".into()));
        }
        let unit_layer = units
            .iter()
            .map(|k| {
                layers
                    .binary_search(&k.layer)
                    .map_err(|_| Error::Topology(format!("unit {} has no layer entry", k.tensor_name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SignificanceReport {
            config: SignificanceConfig::default(),
            global_mean_magnitude: f64::NAN,
            layers,
            per_layer_sig: per_layer_sig.into_iter().map(|(_, s)| s).collect(),
            units,
            per_unit_sig,
            per_unit_count,
            unit_layer,
        })
    }
}

pub fn compute_significance(delta: &DeltaModel, config: &SignificanceConfig) -> Result<SignificanceReport> {
    if !(config.outlier_factor > 0.0) {
        return Err(Error::Argument(format!(
            "outlier factor must be positive, got {}",
            config.outlier_factor
        )));
    }
    if delta.units.is_empty() {
        return Err(Error::Argument("delta has no classified linear units".into()));
    }
    let topo = &delta.topology;
    let layers = topo.layers();
    let unit_layer = topo.unit_layer_positions();

    let abs_sums = exec::map(&delta.units, |t| t.values.iter().map(|v| v.abs()).sum::<f64>());
    let counts: Vec<usize> = delta.units.iter().map(|t| t.numel()).collect();

    let total_abs: f64 = abs_sums.iter().sum();
    let total_count: usize = counts.iter().sum();
    let global_mean = total_abs / total_count as f64;

    let mut layer_abs = vec![0.0; layers.len()];
    let mut layer_count = vec![0usize; layers.len()];
    for (u, &l) in unit_layer.iter().enumerate() {
        layer_abs[l] += abs_sums[u];
        layer_count[l] += counts[u];
    }

    let thresholds: Vec<f64> = (0..delta.units.len())
        .map(|u| {
            let mean = match config.scope {
                ThresholdScope::Global => global_mean,
                ThresholdScope::PerLayer => layer_abs[unit_layer[u]] / layer_count[unit_layer[u]] as f64,
                ThresholdScope::PerUnit => abs_sums[u] / counts[u] as f64,
            };
            config.outlier_factor * mean
        })
        .collect();

    let masses = exec::map_range(delta.units.len(), |u| {
        let t = thresholds[u];
        delta.units[u].values.iter().map(|v| v.abs()).filter(|&a| a > t).sum::<f64>()
    });

    let mut layer_mass = vec![0.0; layers.len()];
    for (u, &l) in unit_layer.iter().enumerate() {
        layer_mass[l] += masses[u];
    }

    let (per_unit_sig, per_layer_sig) = match config.normalization {
        SigNormalization::PerParameter => (
            masses.iter().zip(&counts).map(|(m, &c)| m / c as f64).collect(),
            layer_mass.iter().zip(&layer_count).map(|(m, &c)| m / c as f64).collect(),
        ),
        SigNormalization::RawSum => (masses, layer_mass),
    };

    Ok(SignificanceReport {
        config: *config,
        global_mean_magnitude: global_mean,
        layers,
        per_layer_sig,
        units: topo.units.clone(),
        per_unit_sig,
        per_unit_count: counts,
        unit_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRate {
    pub layer: usize,
    pub sig: f64,
    /// Fluctuation before normalization.
    pub dif: f64,
    /// Fluctuation after normalization; what gets added to alpha.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRate {
    #[serde(flatten)]
    pub key: LinearKey,
    pub count: usize,
    pub sig: f64,
    pub dif: f64,
    pub offset: f64,
    pub layer_offset: f64,
    pub theta: f64,
}

impl UnitRate {
    /// Elements this unit keeps at its rate.
    pub fn kept(&self) -> usize {
        kept_count(self.count, self.theta)
    }
}

/// Per-linear-unit pruning rates plus the intermediates that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRatePlan {
    pub alpha: f64,
    pub lambda: f64,
    pub realized_sparsity: f64,
    pub layers: Vec<LayerRate>,
    pub units: Vec<UnitRate>,
}

/// `floor(count * (1 - theta) + 0.5)`, capped at `count`.
pub fn kept_count(count: usize, theta: f64) -> usize {
    let k = (count as f64 * (1.0 - theta) + 0.5).floor();
    (k.max(0.0) as usize).min(count)
}

/// Scales a collection so its largest magnitude equals `lambda`.
pub fn normalize_fluctuation(xs: &[f64], lambda: f64) -> Vec<f64> {
    let max_abs = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max_abs == 0.0 {
        return vec![0.0; xs.len()];
    }
    // dividing first keeps |ratio| <= 1, so the cap holds exactly and is hit
    // exactly at the arg-max
    xs.iter().map(|x| (x / max_abs) * lambda).collect()
}

fn check_rate_args(alpha: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(lambda > 0.0) {
        return Err(Error::Argument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

fn build_plan(report: &SignificanceReport, alpha: f64, lambda: f64, unit_level: bool) -> Result<PruneRatePlan> {
    check_rate_args(alpha, lambda)?;
    let n = report.layers.len();
    if n == 0 {
        return Err(Error::Argument("significance report has no layers".into()));
    }
    let layer_mean = report.per_layer_sig.iter().sum::<f64>() / n as f64;
    let layer_dif: Vec<f64> = report.per_layer_sig.iter().map(|s| -s + layer_mean).collect();
    let layer_offset = normalize_fluctuation(&layer_dif, lambda);

    let total: usize = report.per_unit_count.iter().sum();
    let weighted: f64 = report
        .per_unit_sig
        .iter()
        .zip(&report.per_unit_count)
        .map(|(s, &c)| s * c as f64)
        .sum();
    let unit_mean = weighted / total as f64;
    let unit_dif: Vec<f64> = report.per_unit_sig.iter().map(|s| -s + unit_mean).collect();
    let unit_offset = if unit_level {
        normalize_fluctuation(&unit_dif, lambda)
    } else {
        vec![0.0; unit_dif.len()]
    };

    let layers = (0..n)
        .map(|i| LayerRate {
            layer: report.layers[i],
            sig: report.per_layer_sig[i],
            dif: layer_dif[i],
            offset: layer_offset[i],
        })
        .collect();
    let units = (0..report.units.len())
        .map(|u| UnitRate {
            key: report.units[u].clone(),
            count: report.per_unit_count[u],
            sig: report.per_unit_sig[u],
            dif: unit_dif[u],
            offset: unit_offset[u],
            layer_offset: layer_offset[report.unit_layer[u]],
            theta: 0.0,
        })
        .collect();
    let mut plan = PruneRatePlan { alpha, lambda, realized_sparsity: 0.0, layers, units };
    plan.set_alpha(alpha)?;
    Ok(plan)
}

/// Per-unit rates from both the layer-level and unit-level fluctuations.
pub fn plan_rates(report: &SignificanceReport, alpha: f64, lambda: f64) -> Result<PruneRatePlan> {
    build_plan(report, alpha, lambda, true)
}

/// Layer-level fluctuation only: every unit of a layer shares one rate.
pub fn plan_layer_rates(report: &SignificanceReport, alpha: f64, lambda: f64) -> Result<PruneRatePlan> {
    build_plan(report, alpha, lambda, false)
}

impl PruneRatePlan {
    /// A plan where every unit is pruned at exactly `alpha`.
    pub fn uniform(units: &[LinearKey], counts: &[usize], alpha: f64) -> Result<Self> {
        check_rate_args(alpha, 1.0)?;
        let mut plan = PruneRatePlan {
            alpha,
            lambda: 0.0,
            realized_sparsity: 0.0,
            layers: Vec::new(),
            units: units
                .iter()
                .zip(counts)
                .map(|(k, &count)| UnitRate {
                    key: k.clone(),
                    count,
                    sig: 0.0,
                    dif: 0.0,
                    offset: 0.0,
                    layer_offset: 0.0,
                    theta: 0.0,
                })
                .collect(),
        };
        plan.set_alpha(alpha)?;
        Ok(plan)
    }

    /// Re-targets the plan at a new alpha, keeping every offset fixed.
    pub fn set_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        self.alpha = alpha;
        for u in &mut self.units {
            u.theta = (alpha + u.layer_offset + u.offset).clamp(0.0, 1.0);
        }
        let total: usize = self.units.iter().map(|u| u.count).sum();
        let kept: usize = self.units.iter().map(UnitRate::kept).sum();
        self.realized_sparsity = if total == 0 { 0.0 } else { 1.0 - kept as f64 / total as f64 };
        Ok(())
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut p = self.clone();
        p.set_alpha(alpha)?;
        Ok(p)
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.theta).collect()
    }

    /// Hex SHA-256 of the plan's JSON form.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delta::DeltaTensor;
    use crate::topology::{ModelTopology, NamingRule, UnitKind};
    use indexmap::IndexMap;
    use proptest::prelude::*;

    fn model(units: Vec<(usize, &str, Vec<f64>)>) -> DeltaModel {
        let names: Vec<String> = units.iter().map(|(l, u, _)| format!("layers.{l}.{u}.weight")).collect();
        let topology = ModelTopology::from_names(names.iter().map(String::as_str), &NamingRule::defaults()).unwrap();
        let mut tensors = Vec::new();
        for k in &topology.units {
            let (_, _, v) = units.iter().find(|(l, u, _)| format!("layers.{l}.{u}.weight") == k.tensor_name).unwrap();
            tensors.push(DeltaTensor::new(vec![v.len()], v.clone()).unwrap());
        }
        DeltaModel { topology, units: tensors, passthrough: IndexMap::new() }
    }

    fn key(layer: usize, unit: UnitKind) -> LinearKey {
        let tensor_name = format!("layers.{layer}.{unit}.weight");
        LinearKey { layer, unit, tensor_name }
    }

    #[test]
    fn uniform_magnitudes_have_no_outliers() {
        let d = model(vec![(0, "q", vec![0.3; 10]), (1, "q", vec![-0.3; 10])]);
        let r = compute_significance(&d, &SignificanceConfig::default()).unwrap();
        assert!(r.per_unit_sig.iter().chain(&r.per_layer_sig).all(|&s| s == 0.0));
        let plan = plan_rates(&r, 0.7, 0.08).unwrap();
        assert!(plan.units.iter().all(|u| u.theta == 0.7));
    }

    #[test]
    fn single_outlier_hand_computation() {
        let mut v = vec![0.0; 100];
        v[42] = 1.0;
        let d = model(vec![(0, "q", v)]);
        let r = compute_significance(&d, &SignificanceConfig::default()).unwrap();
        assert_eq!(r.global_mean_magnitude, 0.01);
        assert_eq!(r.per_unit_sig, vec![0.01]);
        assert_eq!(r.per_layer_sig, vec![0.01]);
        assert_eq!(r.per_unit_count, vec![100]);
    }

    #[test]
    fn all_zero_delta_is_not_an_error() {
        let d = model(vec![(0, "q", vec![0.0; 4])]);
        let r = compute_significance(&d, &SignificanceConfig::default()).unwrap();
        assert_eq!(r.per_unit_sig, vec![0.0]);
    }

    #[test]
    fn bad_arguments() {
        let d = model(vec![(0, "q", vec![1.0; 4])]);
        assert!(compute_significance(&d, &SignificanceConfig::with_factor(0.0)).is_err());
        let r = compute_significance(&d, &SignificanceConfig::default()).unwrap();
        assert!(plan_rates(&r, 1.5, 0.08).is_err());
        assert!(plan_rates(&r, 0.5, 0.0).is_err());
        let empty = SignificanceReport::from_parts(vec![], vec![], vec![], vec![]).unwrap();
        assert!(matches!(plan_rates(&empty, 0.5, 0.08), Err(Error::Argument(_))));
    }

    #[test]
    fn two_layer_closed_form() {
        let s = 0.01;
        let units = vec![key(0, UnitKind::QProj), key(0, UnitKind::KProj), key(1, UnitKind::QProj), key(1, UnitKind::KProj)];
        let r = SignificanceReport::from_parts(
            units,
            vec![s, s, 3.0 * s, 3.0 * s],
            vec![16; 4],
            vec![(0, s), (1, 3.0 * s)],
        )
        .unwrap();
        let plan = plan_rates(&r, 0.9, 0.08).unwrap();
        assert!((plan.layers[0].dif - s).abs() < 1e-15);
        assert!((plan.layers[1].dif + s).abs() < 1e-15);
        assert!((plan.layers[0].offset - 0.08).abs() < 1e-15);
        assert!((plan.layers[1].offset + 0.08).abs() < 1e-15);
        let th = plan.thetas();
        assert_eq!(th[0], 1.0);
        assert_eq!(th[1], 1.0);
        assert!((th[2] - 0.74).abs() < 1e-12);
        assert!((th[3] - 0.74).abs() < 1e-12);

        let unclamped = plan.with_alpha(0.5).unwrap();
        assert!((unclamped.units[0].theta - 0.66).abs() < 1e-12);
    }

    #[test]
    fn threshold_scopes_and_raw_sums() {
        // layer 0 small magnitudes with one local outlier, layer 1 large and flat
        let mut small = vec![0.001; 50];
        small[0] = 0.02;
        let d = model(vec![(0, "q", small), (1, "q", vec![0.5; 50])]);
        let global = compute_significance(&d, &SignificanceConfig::default()).unwrap();
        assert_eq!(global.per_unit_sig, vec![0.0, 0.0]);
        let per_unit = compute_significance(
            &d,
            &SignificanceConfig { scope: ThresholdScope::PerUnit, ..Default::default() },
        )
        .unwrap();
        assert!((per_unit.per_unit_sig[0] - 0.02 / 50.0).abs() < 1e-15);
        let per_layer = compute_significance(
            &d,
            &SignificanceConfig { scope: ThresholdScope::PerLayer, ..Default::default() },
        )
        .unwrap();
        assert_eq!(per_layer.per_unit_sig, per_unit.per_unit_sig);
        let raw = compute_significance(
            &d,
            &SignificanceConfig { scope: ThresholdScope::PerUnit, normalization: SigNormalization::RawSum, ..Default::default() },
        )
        .unwrap();
        assert!((raw.per_unit_sig[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_count(8, 0.5), 4);
        assert_eq!(kept_count(10, 0.25), 8); // 7.5 rounds up
        assert_eq!(kept_count(10, 1.0), 0);
        assert_eq!(kept_count(10, 0.0), 10);
    }

    #[test]
    fn normalization_edge_cases() {
        assert_eq!(normalize_fluctuation(&[0.0, 0.0], 0.08), vec![0.0, 0.0]);
        assert_eq!(normalize_fluctuation(&[1.0, -4.0, 2.0], 0.08), vec![0.02, -0.08, 0.04]);
    }

    #[test]
    fn plan_json_shape() {
        let r = SignificanceReport::from_parts(vec![key(0, UnitKind::QProj)], vec![0.0], vec![4], vec![(0, 0.0)]).unwrap();
        let plan = plan_rates(&r, 0.5, 0.08).unwrap();
        let v: serde_json::Value = serde_json::to_value(&plan).unwrap();
        assert_eq!(v["units"][0]["tensor_name"], "layers.0.q_proj.weight");
        assert_eq!(v["units"][0]["theta"], 0.5);
        assert_eq!(v["realized_sparsity"], 0.5);
        let back: PruneRatePlan = serde_json::from_value(v).unwrap();
        assert_eq!(back, plan);
        assert_eq!(back.content_hash(), plan.content_hash());
    }

    proptest! {
        #[test]
        fn raising_a_sig_never_raises_its_difs(
            sigs in prop::collection::vec(0.0f64..1.0, 4),
            bump in 0.0f64..1.0,
            which in 0usize..4,
        ) {
            let units = vec![key(0, UnitKind::QProj), key(0, UnitKind::KProj), key(1, UnitKind::QProj), key(1, UnitKind::KProj)];
            let counts = vec![10, 20, 30, 40];
            let layer_sig = |s: &[f64]| vec![
                (0, (s[0] * 10.0 + s[1] * 20.0) / 30.0),
                (1, (s[2] * 30.0 + s[3] * 40.0) / 70.0),
            ];
            let before = plan_rates(&SignificanceReport::from_parts(units.clone(), sigs.clone(), counts.clone(), layer_sig(&sigs)).unwrap(), 0.5, 0.08).unwrap();
            let mut raised = sigs.clone();
            raised[which] += bump;
            let after = plan_rates(&SignificanceReport::from_parts(units, raised.clone(), counts, layer_sig(&raised)).unwrap(), 0.5, 0.08).unwrap();
            let l = which / 2;
            prop_assert!(after.units[which].dif <= before.units[which].dif + 1e-15);
            prop_assert!(after.layers[l].dif <= before.layers[l].dif + 1e-15);
        }
    }
}
