//! Delta parameters: extraction, merging back onto a base, offset statistics.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::archive::{Tensor, TensorArchive, TensorData};
use crate::error::{Error, Result};
use crate::exec;
use crate::topology::{ModelTopology, NamingRule};

/// `f64` tensor holding delta values.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl DeltaTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = crate::archive::element_count(&shape)?;
        if n != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(DeltaTensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DeltaTensor { shape, values: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f64(self.shape.clone(), self.values.clone()).expect("shape checked at construction")
    }

    fn from_tensor(t: &Tensor) -> Self {
        DeltaTensor { shape: t.shape().to_vec(), values: t.to_f64_vec() }
    }
}

/// Per-tensor difference `finetuned - base`, split into classified linear
/// units (aligned with `topology.units`) and unclassified passthrough tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaModel {
    pub topology: ModelTopology,
    pub units: Vec<DeltaTensor>,
    pub passthrough: IndexMap<String, DeltaTensor>,
}

/// Borrowed view of a delta; what scoring oracles consume.
#[derive(Debug, Clone, Copy)]
pub struct DeltaView<'a> {
    pub topology: &'a ModelTopology,
    pub units: &'a [DeltaTensor],
    pub passthrough: &'a IndexMap<String, DeltaTensor>,
}

impl<'a> DeltaView<'a> {
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        for (key, t) in self.topology.units.iter().zip(self.units) {
            a.insert(key.tensor_name.clone(), t.to_tensor()).expect("names are unique");
        }
        for (name, t) in self.passthrough {
            a.insert(name.clone(), t.to_tensor()).expect("names are unique");
        }
        a.metadata.insert("kind".into(), "delta".into());
        a
    }
}

impl DeltaModel {
    pub fn view(&self) -> DeltaView<'_> {
        DeltaView { topology: &self.topology, units: &self.units, passthrough: &self.passthrough }
    }

    /// Number of classified elements.
    pub fn classified_len(&self) -> usize {
        self.units.iter().map(DeltaTensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty() && self.passthrough.is_empty()
    }

    /// Stores every tensor as `f64`, classified units first.
    pub fn to_archive(&self) -> TensorArchive {
        self.view().to_archive()
    }

    /// Rebuilds a delta from an archive, classifying names with `rules`.
    pub fn from_archive(archive: &TensorArchive, rules: &[NamingRule]) -> Result<Self> {
        let topology = ModelTopology::from_names(archive.names(), rules)?;
        let units = topology
            .units
            .iter()
            .map(|k| DeltaTensor::from_tensor(archive.get(&k.tensor_name).unwrap()))
            .collect();
        let passthrough = topology
            .unclassified
            .iter()
            .map(|n| (n.clone(), DeltaTensor::from_tensor(archive.get(n).unwrap())))
            .collect();
        Ok(DeltaModel { topology, units, passthrough })
    }

    /// Multiplies every value, passthrough included, by `c`.
    pub fn scaled(&self, c: f64) -> DeltaModel {
        let scale = |t: &DeltaTensor| DeltaTensor {
            shape: t.shape.clone(),
            values: t.values.iter().map(|v| v * c).collect(),
        };
        DeltaModel {
            topology: self.topology.clone(),
            units: self.units.iter().map(scale).collect(),
            passthrough: self.passthrough.iter().map(|(k, t)| (k.clone(), scale(t))).collect(),
        }
    }
}

fn pair<'a>(base: &'a TensorArchive, finetuned: &'a TensorArchive, name: &str) -> Result<(&'a Tensor, &'a Tensor)> {
    let b = base
        .get(name)
        .ok_or_else(|| Error::Topology(format!("{name} missing from base checkpoint")))?;
    let f = finetuned
        .get(name)
        .ok_or_else(|| Error::Topology(format!("{name} missing from fine-tuned checkpoint")))?;
    if b.shape() != f.shape() {
        return Err(Error::Shape(format!(
            "{name}: base shape {:?} vs fine-tuned shape {:?}",
            b.shape(),
            f.shape()
        )));
    }
    Ok((b, f))
}

fn subtract(base: &Tensor, finetuned: &Tensor) -> DeltaTensor {
    let b = base.to_f64_vec();
    let f = finetuned.to_f64_vec();
    DeltaTensor {
        shape: base.shape().to_vec(),
        values: f.iter().zip(&b).map(|(f, b)| f - b).collect(),
    }
}

/// Element-wise `finetuned - base` over every tensor of the checkpoints.
pub fn compute_delta(
    base: &TensorArchive,
    finetuned: &TensorArchive,
    topology: &ModelTopology,
) -> Result<DeltaModel> {
    for name in finetuned.names() {
        if !base.contains(name) {
            return Err(Error::Topology(format!("{name} missing from base checkpoint")));
        }
    }
    let classified = topology.units.iter().filter(|k| base.contains(&k.tensor_name)).count();
    let mapped = classified + topology.unclassified.iter().filter(|n| base.contains(n)).count();
    if mapped != base.len() || classified != topology.units.len() {
        return Err(Error::Topology("topology does not cover the base checkpoint".into()));
    }

    let units = exec::try_map(&topology.units, |k| {
        let (b, f) = pair(base, finetuned, &k.tensor_name)?;
        Ok::<_, Error>(subtract(b, f))
    })?;
    let mut passthrough = IndexMap::new();
    for name in &topology.unclassified {
        let (b, f) = pair(base, finetuned, name)?;
        passthrough.insert(name.clone(), subtract(b, f));
    }
    Ok(DeltaModel { topology: topology.clone(), units, passthrough })
}

/// `W_m = W_B + sum_i delta_i`, accumulated in `f64` and rounded once.
pub fn merge(base: &TensorArchive, deltas: &[DeltaModel]) -> Result<TensorArchive> {
    merge_weighted(base, deltas, &vec![1.0; deltas.len()])
}

/// Same as [`merge`] with a scalar coefficient per delta.
pub fn merge_weighted(
    base: &TensorArchive,
    deltas: &[DeltaModel],
    coefficients: &[f64],
) -> Result<TensorArchive> {
    if deltas.is_empty() {
        return Err(Error::Argument("merge needs at least one delta".into()));
    }
    if coefficients.len() != deltas.len() {
        return Err(Error::Argument(format!(
            "{} coefficients for {} deltas",
            coefficients.len(),
            deltas.len()
        )));
    }
    let mut lookups: Vec<HashMap<&str, &DeltaTensor>> = Vec::with_capacity(deltas.len());
    for d in deltas {
        let mut m = HashMap::new();
        for (k, t) in d.topology.units.iter().zip(&d.units) {
            m.insert(k.tensor_name.as_str(), t);
        }
        for (n, t) in &d.passthrough {
            m.insert(n.as_str(), t);
        }
        for (name, t) in &m {
            let b = base
                .get(name)
                .ok_or_else(|| Error::Topology(format!("delta tensor {name} not in base")))?;
            if b.shape() != t.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: base shape {:?} vs delta shape {:?}",
                    b.shape(),
                    t.shape
                )));
            }
        }
        lookups.push(m);
    }

    let entries: Vec<(&str, &Tensor)> = base.iter().collect();
    let merged = exec::try_map(&entries, |&(name, tensor)| {
        let mut acc = tensor.to_f64_vec();
        for (lookup, &c) in lookups.iter().zip(coefficients) {
            if let Some(d) = lookup.get(name) {
                for (a, v) in acc.iter_mut().zip(&d.values) {
                    *a += c * v;
                }
            }
        }
        let data = match tensor.data() {
            TensorData::F64(_) => TensorData::F64(acc),
            _ => TensorData::F32(acc.into_iter().map(|v| v as f32).collect()),
        };
        Tensor::new(tensor.shape().to_vec(), data)
    })?;

    let mut out = TensorArchive::new();
    out.metadata = base.metadata.clone();
    for ((name, _), t) in entries.into_iter().zip(merged) {
        out.insert(name, t)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetQuantileReport {
    pub percentiles: Vec<f64>,
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl OffsetQuantileReport {
    /// Multiplies every reported value by `c` (for display scaling).
    pub fn scaled(mut self, c: f64) -> Self {
        self.values.iter_mut().for_each(|v| *v *= c);
        self.min *= c;
        self.max *= c;
        self
    }
}

/// Linear-interpolation quantile of sorted data at fraction `p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn sort_values(values: &mut [f64]) {
    #[cfg(feature = "parallel")]
    if exec::is_parallel() {
        use rayon::slice::ParallelSliceMut;
        values.par_sort_unstable_by(f64::total_cmp);
        return;
    }
    values.sort_unstable_by(f64::total_cmp);
}

/// Empirical quantiles over every delta element (classified and passthrough).
/// NaN elements are ignored.
pub fn offset_quantiles(delta: &DeltaModel, percentiles: &[f64]) -> Result<OffsetQuantileReport> {
    let pooled = delta
        .units
        .iter()
        .chain(delta.passthrough.values())
        .flat_map(|t| t.values.iter().copied());
    quantiles_of(pooled, percentiles)
}

pub fn quantiles_of(values: impl Iterator<Item = f64>, percentiles: &[f64]) -> Result<OffsetQuantileReport> {
    if percentiles.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Argument("percentiles must lie in [0, 1]".into()));
    }
    if percentiles.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Argument("percentiles must be sorted".into()));
    }
    let mut all: Vec<f64> = values.filter(|v| !v.is_nan()).collect();
    if all.is_empty() {
        return Err(Error::Argument("no delta values to summarize".into()));
    }
    sort_values(&mut all);
    Ok(OffsetQuantileReport {
        percentiles: percentiles.to_vec(),
        values: percentiles.iter().map(|&p| quantile_sorted(&all, p)).collect(),
        min: all[0],
        max: all[all.len() - 1],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticModel;
    use crate::topology::parse_topology;
    use proptest::prelude::*;

    fn pair_model(seed: u64) -> (TensorArchive, TensorArchive, ModelTopology) {
        let m = SyntheticModel { layers: 2, hidden: 8, intermediate: 12, seed, ..Default::default() };
        let (base, ft) = m.generate();
        let topo = parse_topology(&base, &NamingRule::defaults()).unwrap();
        (base, ft, topo)
    }

    #[test]
    fn identical_checkpoints_give_zero_delta() {
        let (base, _, topo) = pair_model(1);
        let d = compute_delta(&base, &base, &topo).unwrap();
        assert!(d.units.iter().chain(d.passthrough.values()).all(|t| t.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_base_gives_finetuned() {
        let (_, ft, topo) = pair_model(2);
        let mut zero = TensorArchive::new();
        for (n, t) in ft.iter() {
            zero.insert(n, Tensor::from_f32(t.shape().to_vec(), vec![0.0; t.numel()]).unwrap()).unwrap();
        }
        let d = compute_delta(&zero, &ft, &topo).unwrap();
        for (k, t) in topo.units.iter().zip(&d.units) {
            assert_eq!(t.values, ft.get(&k.tensor_name).unwrap().to_f64_vec());
        }
    }

    #[test]
    fn subtraction_matches_scalar_loop() {
        let (base, ft, topo) = pair_model(3);
        let d = compute_delta(&base, &ft, &topo).unwrap();
        for (k, t) in topo.units.iter().zip(&d.units) {
            let b = base.get(&k.tensor_name).unwrap().as_f32().unwrap();
            let f = ft.get(&k.tensor_name).unwrap().as_f32().unwrap();
            for i in 0..b.len() {
                assert_eq!(t.values[i], f[i] as f64 - b[i] as f64);
            }
        }
        for (n, t) in &d.passthrough {
            let b = base.get(n).unwrap().as_f32().unwrap();
            let f = ft.get(n).unwrap().as_f32().unwrap();
            assert_eq!(t.values[0], f[0] as f64 - b[0] as f64);
        }
    }

    #[test]
    fn shape_and_name_mismatches() {
        let (base, ft, topo) = pair_model(4);
        let mut bad = TensorArchive::new();
        for (n, t) in ft.iter() {
            let t = if n == topo.units[0].tensor_name {
                Tensor::from_f32(vec![t.numel()], t.as_f32().unwrap().to_vec()).unwrap()
            } else {
                t.clone()
            };
            bad.insert(n, t).unwrap();
        }
        assert!(matches!(compute_delta(&base, &bad, &topo), Err(Error::Shape(_))));

        let mut missing = TensorArchive::new();
        for (n, t) in ft.iter().skip(1) {
            missing.insert(n, t.clone()).unwrap();
        }
        assert!(matches!(compute_delta(&base, &missing, &topo), Err(Error::Topology(_))));
    }

    #[test]
    fn merge_identity_and_cancellation() {
        let (base, ft, topo) = pair_model(5);
        let d = compute_delta(&base, &ft, &topo).unwrap();
        assert_eq!(merge(&base, std::slice::from_ref(&d)).unwrap(), ft);
        let neg = d.scaled(-1.0);
        assert_eq!(merge(&base, &[d, neg]).unwrap(), base);
        assert!(matches!(merge(&base, &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn merge_three_matches_scalar_loop() {
        let (base, _, topo) = pair_model(6);
        let deltas: Vec<DeltaModel> = (10..13)
            .map(|s| {
                let (_, ft, _) = pair_model(s);
                // fine-tuned checkpoints of other seeds only share shapes with `base`
                compute_delta(&base, &ft, &topo).unwrap()
            })
            .collect();
        let merged = merge(&base, &deltas).unwrap();
        for (name, t) in base.iter() {
            let b = t.as_f32().unwrap();
            let got = merged.get(name).unwrap().as_f32().unwrap();
            let idx = topo.unit_index(name);
            for i in 0..b.len() {
                let mut acc = b[i] as f64;
                for d in &deltas {
                    acc += match idx {
                        Some(u) => d.units[u].values[i],
                        None => d.passthrough[name].values[i],
                    };
                }
                assert_eq!(got[i].to_bits(), (acc as f32).to_bits());
            }
        }
    }

    #[test]
    fn weighted_merge() {
        let (base, ft, topo) = pair_model(7);
        let d = compute_delta(&base, &ft, &topo).unwrap();
        let half = merge_weighted(&base, &[d.clone(), d.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(half, ft);
        assert!(merge_weighted(&base, &[d], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn zero_delta_quantiles() {
        let (base, _, topo) = pair_model(8);
        let d = compute_delta(&base, &base, &topo).unwrap();
        let r = offset_quantiles(&d, &[0.1, 0.5, 0.9]).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0, 0.0]);
        assert_eq!((r.min, r.max), (0.0, 0.0));
    }

    #[test]
    fn quantile_interpolation() {
        let r = quantiles_of([4.0, 1.0, 3.0, 2.0].into_iter(), &[0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(r.values, vec![1.0, 1.75, 2.5, 4.0]);
        assert!(quantiles_of([1.0].into_iter(), &[0.5, 0.1]).is_err());
        assert!(quantiles_of([1.0].into_iter(), &[1.5]).is_err());
        assert!(quantiles_of(std::iter::empty(), &[0.5]).is_err());
    }

    proptest! {
        #[test]
        fn quantiles_permutation_invariant(mut xs in prop::collection::vec(-1e3f64..1e3, 1..200), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let ps = [0.0, 0.1, 0.33, 0.5, 0.9, 1.0];
            let a = quantiles_of(xs.iter().copied(), &ps).unwrap();
            xs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = quantiles_of(xs.iter().copied(), &ps).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.values.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(a.min <= a.values[0] && a.values[5] <= a.max);
        }
    }
}
