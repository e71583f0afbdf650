//! Sparsification strategies over a delta: magnitude, OWL-style layerwise,
//! per-linear-unit dynamic rates, and random drop-and-rescale.

use std::collections::HashMap;

use bitvec::prelude::*;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{Tensor, TensorArchive};
use crate::delta::{DeltaModel, DeltaTensor};
use crate::error::{Error, Result};
use crate::exec;
use crate::significance::{
    compute_significance, kept_count, plan_layer_rates, PruneRatePlan, SignificanceConfig,
};
use crate::topology::{ModelTopology, NamingRule};

pub const MASK_SUFFIX: &str = ".__mask__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Magnitude,
    Owl,
    Dp,
    Dare,
}

impl PruneMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneMethod::Magnitude => "magnitude",
            PruneMethod::Owl => "owl",
            PruneMethod::Dp => "dp",
            PruneMethod::Dare => "dare",
        }
    }
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(PruneMethod::Magnitude),
            "owl" => Ok(PruneMethod::Owl),
            "dp" => Ok(PruneMethod::Dp),
            "dare" => Ok(PruneMethod::Dare),
            other => Err(Error::Argument(format!("unknown pruning method {other:?}"))),
        }
    }
}

/// A pruned delta. Per-unit vectors are aligned with `topology.units`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta {
    pub topology: ModelTopology,
    pub masks: Vec<BitVec>,
    pub values: Vec<DeltaTensor>,
    pub kept_counts: Vec<usize>,
    /// Unclassified tensors, never pruned.
    pub passthrough: IndexMap<String, DeltaTensor>,
    pub method: PruneMethod,
    /// Target alpha for deterministic methods, drop probability for DARE.
    pub rate: f64,
    pub rate_plan: Option<PruneRatePlan>,
    pub plan_hash: Option<String>,
    pub seed: Option<u64>,
    /// Per-partition factors when this delta came out of amplification.
    pub gammas: Option<Vec<f64>>,
}

impl SparseDelta {
    pub fn to_delta(&self) -> DeltaModel {
        DeltaModel {
            topology: self.topology.clone(),
            units: self.values.clone(),
            passthrough: self.passthrough.clone(),
        }
    }

    pub fn total_count(&self) -> usize {
        self.masks.iter().map(BitVec::len).sum()
    }

    pub fn total_kept(&self) -> usize {
        self.kept_counts.iter().sum()
    }

    pub fn realized_sparsity(&self) -> f64 {
        1.0 - self.total_kept() as f64 / self.total_count() as f64
    }

    pub fn unit_sparsity(&self, unit: usize) -> f64 {
        1.0 - self.kept_counts[unit] as f64 / self.masks[unit].len() as f64
    }

    /// Checks that values vanish off-mask and kept counts equal popcounts.
    pub fn validate(&self) -> Result<()> {
        for (u, ((mask, vals), &kept)) in self.masks.iter().zip(&self.values).zip(&self.kept_counts).enumerate() {
            let name = &self.topology.units[u].tensor_name;
            if mask.len() != vals.numel() {
                return Err(Error::Shape(format!("{name}: mask length differs from values")));
            }
            if mask.count_ones() != kept {
                return Err(Error::Internal(format!("{name}: kept count {kept} != popcount")));
            }
            if mask.iter().by_vals().zip(&vals.values).any(|(m, &v)| !m && v != 0.0) {
                return Err(Error::Internal(format!("{name}: nonzero value outside mask")));
            }
        }
        Ok(())
    }

    /// Values and masks per unit, passthrough tensors, and provenance metadata.
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (u, key) in self.topology.units.iter().enumerate() {
            let vals = &self.values[u];
            a.insert(key.tensor_name.clone(), vals.to_tensor()).expect("unique names");
            let bytes: Vec<u8> = self.masks[u].iter().by_vals().map(u8::from).collect();
            a.insert(
                format!("{}{MASK_SUFFIX}", key.tensor_name),
                Tensor::from_u8(vals.shape.clone(), bytes).expect("mask shape matches values"),
            )
            .expect("unique names");
        }
        for (name, t) in &self.passthrough {
            a.insert(name.clone(), t.to_tensor()).expect("unique names");
        }
        let m = &mut a.metadata;
        m.insert("kind".into(), "sparse".into());
        m.insert("method".into(), self.method.as_str().into());
        let rate_key = if self.method == PruneMethod::Dare { "p" } else { "alpha" };
        m.insert(rate_key.into(), self.rate.to_string());
        if let Some(seed) = self.seed {
            m.insert("seed".into(), seed.to_string());
        }
        let hash = self.rate_plan.as_ref().map(PruneRatePlan::content_hash).or_else(|| self.plan_hash.clone());
        if let Some(h) = hash {
            m.insert("plan_hash".into(), h);
        }
        if let Some(g) = &self.gammas {
            m.insert("gammas".into(), serde_json::to_string(g).unwrap());
        }
        a
    }

    pub fn from_archive(archive: &TensorArchive, rules: &[NamingRule]) -> Result<Self> {
        let mut masks_by_name: HashMap<&str, &Tensor> = HashMap::new();
        let mut value_names = Vec::new();
        for (name, t) in archive.iter() {
            match name.strip_suffix(MASK_SUFFIX) {
                Some(base) => {
                    masks_by_name.insert(base, t);
                }
                None => value_names.push(name),
            }
        }
        let topology = ModelTopology::from_names(value_names, rules)?;
        let mut masks = Vec::new();
        let mut values = Vec::new();
        let mut kept_counts = Vec::new();
        for key in &topology.units {
            let vals = archive.get(&key.tensor_name).unwrap();
            let mask_t = masks_by_name
                .remove(key.tensor_name.as_str())
                .ok_or_else(|| Error::Parse(format!("{} has no mask entry", key.tensor_name)))?;
            let bytes = mask_t
                .as_u8()
                .ok_or_else(|| Error::Parse(format!("{} mask is not u8", key.tensor_name)))?;
            if mask_t.shape() != vals.shape() {
                return Err(Error::Parse(format!("{} mask shape differs from values", key.tensor_name)));
            }
            let mask: BitVec = bytes.iter().map(|&b| b != 0).collect();
            kept_counts.push(mask.count_ones());
            masks.push(mask);
            values.push(DeltaTensor::new(vals.shape().to_vec(), vals.to_f64_vec())?);
        }
        if let Some(orphan) = masks_by_name.keys().next() {
            return Err(Error::Parse(format!("mask for {orphan} has no classified value tensor")));
        }
        let passthrough = topology
            .unclassified
            .iter()
            .map(|n| {
                let t = archive.get(n).unwrap();
                Ok((n.clone(), DeltaTensor::new(t.shape().to_vec(), t.to_f64_vec())?))
            })
            .collect::<Result<_>>()?;

        let meta = &archive.metadata;
        let method: PruneMethod = meta
            .get("method")
            .ok_or_else(|| Error::Parse("sparse archive lacks method metadata".into()))?
            .parse()?;
        let rate_key = if method == PruneMethod::Dare { "p" } else { "alpha" };
        let parse_num = |k: &str| -> Result<Option<f64>> {
            meta.get(k)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("metadata {k}: {e}"))))
                .transpose()
        };
        let sparse = SparseDelta {
            topology,
            masks,
            values,
            kept_counts,
            passthrough,
            method,
            rate: parse_num(rate_key)?.unwrap_or(f64::NAN),
            rate_plan: None,
            plan_hash: meta.get("plan_hash").cloned(),
            seed: meta
                .get("seed")
                .map(|s| s.parse().map_err(|e| Error::Parse(format!("metadata seed: {e}"))))
                .transpose()?,
            gammas: meta.get("gammas").map(|g| serde_json::from_str(g)).transpose()?,
        };
        sparse.validate()?;
        Ok(sparse)
    }
}

/// Flat indices ordered by descending magnitude; equal magnitudes keep the
/// lower index first.
pub fn magnitude_order(values: &[f64]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_unstable_by(|&a, &b| by_magnitude(values, a, b));
    idx
}

fn by_magnitude(values: &[f64], a: u32, b: u32) -> std::cmp::Ordering {
    values[b as usize]
        .abs()
        .total_cmp(&values[a as usize].abs())
        .then(a.cmp(&b))
}

/// Mask of the `k` largest-magnitude elements under the same total order as
/// [`magnitude_order`].
pub fn top_k_mask(values: &[f64], k: usize) -> BitVec {
    let n = values.len();
    let mut mask = bitvec![0; n];
    if k == 0 {
        return mask;
    }
    if k >= n {
        mask.fill(true);
        return mask;
    }
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| by_magnitude(values, a, b));
    for &i in &idx[..k] {
        mask.set(i as usize, true);
    }
    mask
}

fn apply_mask(values: &DeltaTensor, mask: &BitVec) -> DeltaTensor {
    DeltaTensor {
        shape: values.shape.clone(),
        values: values
            .values
            .iter()
            .zip(mask.iter().by_vals())
            .map(|(&v, m)| if m { v } else { 0.0 })
            .collect(),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Top-k pruning of every unit at its own rate.
fn prune_at_rates(delta: &DeltaModel, thetas: &[f64]) -> (Vec<BitVec>, Vec<DeltaTensor>, Vec<usize>) {
    let results = exec::map_range(delta.units.len(), |u| {
        let t = &delta.units[u];
        let mask = top_k_mask(&t.values, kept_count(t.numel(), thetas[u]));
        let vals = apply_mask(t, &mask);
        let kept = mask.count_ones();
        (mask, vals, kept)
    });
    let mut masks = Vec::with_capacity(results.len());
    let mut values = Vec::with_capacity(results.len());
    let mut kept = Vec::with_capacity(results.len());
    for (m, v, k) in results {
        masks.push(m);
        values.push(v);
        kept.push(k);
    }
    (masks, values, kept)
}

fn assemble_sparse(
    delta: &DeltaModel,
    thetas: &[f64],
    method: PruneMethod,
    rate: f64,
    plan: Option<PruneRatePlan>,
) -> SparseDelta {
    let (masks, values, kept_counts) = prune_at_rates(delta, thetas);
    SparseDelta {
        topology: delta.topology.clone(),
        masks,
        values,
        kept_counts,
        passthrough: delta.passthrough.clone(),
        method,
        rate,
        plan_hash: plan.as_ref().map(PruneRatePlan::content_hash),
        rate_plan: plan,
        seed: None,
        gammas: None,
    }
}

/// Keeps the `round(count * (1 - alpha))` largest-magnitude elements per unit.
pub fn prune_magnitude(delta: &DeltaModel, alpha: f64) -> Result<SparseDelta> {
    check_alpha(alpha)?;
    let thetas = vec![alpha; delta.units.len()];
    Ok(assemble_sparse(delta, &thetas, PruneMethod::Magnitude, alpha, None))
}

/// Layerwise rates from layer-level significance only, magnitude pruning
/// inside each unit at its layer's rate.
pub fn prune_owl(delta: &DeltaModel, alpha: f64, lambda: f64, outlier_factor: f64) -> Result<SparseDelta> {
    check_alpha(alpha)?;
    let report = compute_significance(delta, &SignificanceConfig::with_factor(outlier_factor))?;
    let plan = plan_layer_rates(&report, alpha, lambda)?;
    let thetas = plan.thetas();
    Ok(assemble_sparse(delta, &thetas, PruneMethod::Owl, alpha, Some(plan)))
}

pub(crate) fn check_plan(delta: &DeltaModel, plan: &PruneRatePlan) -> Result<()> {
    if plan.units.len() != delta.units.len() {
        return Err(Error::Topology(format!(
            "plan covers {} units, delta has {}",
            plan.units.len(),
            delta.units.len()
        )));
    }
    for ((rate, key), t) in plan.units.iter().zip(&delta.topology.units).zip(&delta.units) {
        if rate.key.tensor_name != key.tensor_name || rate.count != t.numel() {
            return Err(Error::Topology(format!(
                "plan entry {} (count {}) does not match delta unit {} (count {})",
                rate.key.tensor_name,
                rate.count,
                key.tensor_name,
                t.numel()
            )));
        }
    }
    Ok(())
}

/// Magnitude pruning inside each unit at the plan's per-unit rate.
pub fn prune_dp(delta: &DeltaModel, plan: &PruneRatePlan) -> Result<SparseDelta> {
    check_plan(delta, plan)?;
    let thetas = plan.thetas();
    Ok(assemble_sparse(delta, &thetas, PruneMethod::Dp, plan.alpha, Some(plan.clone())))
}

/// Per-tensor random stream derived from `(seed, tensor_name)`.
pub fn stream_rng(seed: u64, tensor_name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"dppa-dare");
    h.update(seed.to_le_bytes());
    h.update(tensor_name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn dare_tensor(values: &[f64], p: f64, rng: &mut ChaCha8Rng) -> (BitVec, Vec<f64>) {
    let scale = 1.0 / (1.0 - p);
    let mut mask = BitVec::with_capacity(values.len());
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let keep = rng.gen::<f64>() >= p;
        mask.push(keep);
        out.push(if keep { v * scale } else { 0.0 });
    }
    (mask, out)
}

fn check_drop_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!("drop probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Drops each element with probability `p` and rescales survivors by `1/(1-p)`.
pub fn prune_dare(delta: &DeltaModel, p: f64, seed: u64) -> Result<SparseDelta> {
    check_drop_probability(p)?;
    let results = exec::map_range(delta.units.len(), |u| {
        let name = &delta.topology.units[u].tensor_name;
        let t = &delta.units[u];
        let (mask, vals) = dare_tensor(&t.values, p, &mut stream_rng(seed, name));
        let kept = mask.count_ones();
        (mask, DeltaTensor { shape: t.shape.clone(), values: vals }, kept)
    });
    let mut masks = Vec::new();
    let mut values = Vec::new();
    let mut kept_counts = Vec::new();
    for (m, v, k) in results {
        masks.push(m);
        values.push(v);
        kept_counts.push(k);
    }
    Ok(SparseDelta {
        topology: delta.topology.clone(),
        masks,
        values,
        kept_counts,
        passthrough: delta.passthrough.clone(),
        method: PruneMethod::Dare,
        rate: p,
        rate_plan: None,
        plan_hash: None,
        seed: Some(seed),
        gammas: None,
    })
}

/// Sum of the rescaled tensor after one DARE draw per seed; draws fan out
/// across seeds.
pub fn dare_trial_sums(values: &[f64], p: f64, tensor_name: &str, seeds: &[u64]) -> Result<Vec<f64>> {
    check_drop_probability(p)?;
    Ok(exec::map(seeds, |&s| {
        let (_, out) = dare_tensor(values, p, &mut stream_rng(s, tensor_name));
        out.iter().sum()
    }))
}
