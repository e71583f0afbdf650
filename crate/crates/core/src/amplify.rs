//! Partition amplification: split the kept delta into importance bands and
//! search one scale factor per band against a scoring oracle.
//!
//! Method 1 scores each band with every later band zeroed. Method 2 keeps
//! the later bands present at unit scale. Both are greedy coordinate
//! searches over a discrete grid, one band at a time, most important first.

use std::collections::HashMap;
use std::io::Write;

use bitvec::prelude::*;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::delta::{DeltaModel, DeltaTensor, DeltaView};
use crate::error::{Error, Result};
use crate::exec;
use crate::oracle::Oracle;
use crate::pruners::{check_plan, magnitude_order, PruneMethod, SparseDelta};
use crate::significance::{kept_count, PruneRatePlan};
use crate::topology::ModelTopology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    RateLadder,
    MagnitudeBands,
}

/// Disjoint partitions of a delta's kept elements, most important first.
///
/// Per unit, the elements are ranked once; partition `i` of unit `u` is the
/// slice `order[u][bounds[u][i]..bounds[u][i + 1]]`.
#[derive(Debug, Clone)]
pub struct PartitionSchedule {
    pub kind: ScheduleKind,
    /// Rate ladder for `RateLadder`; empty for magnitude bands.
    pub rates: Vec<f64>,
    pub topology: ModelTopology,
    source: Vec<DeltaTensor>,
    passthrough: IndexMap<String, DeltaTensor>,
    order: Vec<Vec<u32>>,
    bounds: Vec<Vec<usize>>,
    method: PruneMethod,
    target_rate: f64,
    plan: Option<PruneRatePlan>,
    seed: Option<u64>,
}

/// `0.9, 0.8, ...` down to `target`, then `target` itself.
pub fn default_rate_ladder(target: f64) -> Vec<f64> {
    let mut rates: Vec<f64> = (0..9)
        .map(|i| (9 - i) as f64 / 10.0)
        .filter(|&r| r > target + 1e-9)
        .collect();
    rates.push(target);
    rates
}

/// `{0.5, 0.75, ..., 5.0}`.
pub fn default_amplify_grid() -> Vec<f64> {
    (2..=20).map(|i| i as f64 * 0.25).collect()
}

/// `{0.1, 0.2, ..., 2.0}`.
pub fn default_reduction_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 10.0).collect()
}

/// Bands formed by dynamic-rate masks at each rung of a descending ladder.
pub fn build_schedule(delta: &DeltaModel, plan: &PruneRatePlan, rates: &[f64]) -> Result<PartitionSchedule> {
    check_plan(delta, plan)?;
    if rates.is_empty() {
        return Err(Error::Argument("rate ladder must be nonempty".into()));
    }
    if rates.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(Error::Argument("every ladder rate must lie in (0, 1)".into()));
    }
    if rates.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Argument("ladder rates must be strictly descending".into()));
    }
    let plans = rates.iter().map(|&r| plan.with_alpha(r)).collect::<Result<Vec<_>>>()?;
    let per_unit = exec::map_range(delta.units.len(), |u| {
        let order = magnitude_order(&delta.units[u].values);
        let count = delta.units[u].numel();
        let mut bounds = vec![0usize];
        bounds.extend(plans.iter().map(|p| kept_count(count, p.units[u].theta)));
        (order, bounds)
    });
    let mut order = Vec::with_capacity(per_unit.len());
    let mut bounds = Vec::with_capacity(per_unit.len());
    for (u, (o, b)) in per_unit.into_iter().enumerate() {
        if b.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Internal(format!(
                "masks of {} do not nest across the ladder",
                delta.topology.units[u].tensor_name
            )));
        }
        order.push(o);
        bounds.push(b);
    }
    let target = *rates.last().unwrap();
    Ok(PartitionSchedule {
        kind: ScheduleKind::RateLadder,
        rates: rates.to_vec(),
        topology: delta.topology.clone(),
        source: delta.units.clone(),
        passthrough: delta.passthrough.clone(),
        order,
        bounds,
        method: PruneMethod::Dp,
        target_rate: target,
        plan: Some(plan.with_alpha(target)?),
        seed: None,
    })
}

/// Splits the kept set of a random-drop delta into `bands` magnitude
/// quantile bands pooled across units, largest magnitudes first.
pub fn dare_schedule(sparse: &SparseDelta, bands: usize) -> Result<PartitionSchedule> {
    if sparse.method != PruneMethod::Dare {
        return Err(Error::Argument("magnitude bands need a DARE-pruned delta".into()));
    }
    if bands == 0 {
        return Err(Error::Argument("bands must be at least 1".into()));
    }
    sparse.validate()?;
    let order: Vec<Vec<u32>> = exec::map_range(sparse.values.len(), |u| {
        let mask = &sparse.masks[u];
        magnitude_order(&sparse.values[u].values)
            .into_iter()
            .filter(|&i| mask[i as usize])
            .collect()
    });

    // global ranking: magnitude desc, then unit, then flat index
    let mut pooled: Vec<(u32, u32)> = Vec::with_capacity(sparse.total_kept());
    for (u, o) in order.iter().enumerate() {
        pooled.extend(o.iter().map(|&i| (u as u32, i)));
    }
    let mag = |&(u, i): &(u32, u32)| sparse.values[u as usize].values[i as usize].abs();
    pooled.sort_unstable_by(|a, b| mag(b).total_cmp(&mag(a)).then(a.cmp(b)));

    let total = pooled.len();
    let starts: Vec<usize> = (0..=bands).map(|b| b * total / bands).collect();
    let mut bounds = vec![vec![0usize; bands + 1]; order.len()];
    let mut seen = vec![0usize; order.len()];
    let mut band = 0;
    for (pos, &(u, _)) in pooled.iter().enumerate() {
        while pos >= starts[band + 1] {
            band += 1;
            for (b, s) in bounds.iter_mut().zip(&seen) {
                b[band] = *s;
            }
        }
        seen[u as usize] += 1;
    }
    while band < bands {
        band += 1;
        for (b, s) in bounds.iter_mut().zip(&seen) {
            b[band] = *s;
        }
    }

    Ok(PartitionSchedule {
        kind: ScheduleKind::MagnitudeBands,
        rates: Vec::new(),
        topology: sparse.topology.clone(),
        source: sparse.values.clone(),
        passthrough: sparse.passthrough.clone(),
        order,
        bounds,
        method: PruneMethod::Dare,
        target_rate: sparse.rate,
        plan: None,
        seed: sparse.seed,
    })
}

impl PartitionSchedule {
    pub fn partition_count(&self) -> usize {
        self.bounds.first().map_or(0, |b| b.len() - 1)
    }

    pub fn partition_size(&self, i: usize) -> usize {
        self.bounds.iter().map(|b| b[i + 1] - b[i]).sum()
    }

    pub fn is_partition_empty(&self, i: usize) -> bool {
        self.partition_size(i) == 0
    }

    /// Flat indices of partition `i` inside unit `u`.
    pub fn members(&self, i: usize, u: usize) -> &[u32] {
        let b = &self.bounds[u];
        &self.order[u][b[i]..b[i + 1]]
    }

    /// Union of all partitions, per unit.
    pub fn support(&self) -> Vec<BitVec> {
        exec::map_range(self.order.len(), |u| {
            let mut m = bitvec![0; self.source[u].numel()];
            let end = *self.bounds[u].last().unwrap();
            for &i in &self.order[u][..end] {
                m.set(i as usize, true);
            }
            m
        })
    }

    /// Unit tensors with partition `i` scaled by `factors[i]`; a factor of
    /// exactly zero leaves the partition out.
    pub fn candidate_units(&self, factors: &[f64]) -> Vec<DeltaTensor> {
        exec::map_range(self.order.len(), |u| {
            let src = &self.source[u];
            let mut out = vec![0.0; src.numel()];
            for (i, &f) in factors.iter().enumerate() {
                if f == 0.0 {
                    continue;
                }
                for &idx in self.members(i, u) {
                    out[idx as usize] = f * src.values[idx as usize];
                }
            }
            DeltaTensor { shape: src.shape.clone(), values: out }
        })
    }

    pub fn view<'a>(&'a self, units: &'a [DeltaTensor]) -> DeltaView<'a> {
        DeltaView { topology: &self.topology, units, passthrough: &self.passthrough }
    }
}

/// Scales each partition by its factor; the mask is the union of partitions.
pub fn assemble(schedule: &PartitionSchedule, gammas: &[f64]) -> Result<SparseDelta> {
    if gammas.len() != schedule.partition_count() {
        return Err(Error::Argument(format!(
            "{} factors for {} partitions",
            gammas.len(),
            schedule.partition_count()
        )));
    }
    let masks = schedule.support();
    let kept_counts = schedule.bounds.iter().map(|b| *b.last().unwrap()).collect();
    Ok(SparseDelta {
        topology: schedule.topology.clone(),
        masks,
        values: schedule.candidate_units(gammas),
        kept_counts,
        passthrough: schedule.passthrough.clone(),
        method: schedule.method,
        rate: schedule.target_rate,
        plan_hash: schedule.plan.as_ref().map(PruneRatePlan::content_hash),
        rate_plan: schedule.plan.clone(),
        seed: schedule.seed,
        gammas: Some(gammas.to_vec()),
    })
}

/// Hex SHA-256 over unit names and value bits.
pub fn candidate_hash(topology: &ModelTopology, units: &[DeltaTensor]) -> String {
    let parts = exec::map(units, |t| {
        let mut h = Sha256::new();
        for v in &t.values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize()
    });
    let mut h = Sha256::new();
    for (k, p) in topology.units.iter().zip(parts) {
        h.update(k.tensor_name.as_bytes());
        h.update([0]);
        h.update(p);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    Method1,
    Method2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMethod {
    Method1,
    Method2,
    DareReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub gamma: f64,
    pub score: f64,
    pub candidate_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplificationProfile {
    pub method: ProfileMethod,
    pub gammas: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub final_score: f64,
    pub oracle_calls: usize,
    pub cache_hits: usize,
    pub reproducible: bool,
}

impl AmplificationProfile {
    /// One JSON object per trace record.
    pub fn write_trace_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.trace {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Trace records of one step.
    pub fn step_records(&self, step: usize) -> impl Iterator<Item = &TraceRecord> {
        self.trace.iter().filter(move |r| r.step == step)
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Argument("factor grid must be nonempty".into()));
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::Argument("factor grid must be finite".into()));
    }
    if !grid.contains(&1.0) {
        return Err(Error::Argument("factor grid must contain 1.0".into()));
    }
    Ok(())
}

struct CachedOracle<'a> {
    oracle: &'a mut dyn Oracle,
    cache: HashMap<String, f64>,
    calls: usize,
    hits: usize,
}

impl CachedOracle<'_> {
    fn score(&mut self, schedule: &PartitionSchedule, factors: &[f64], step: usize) -> Result<(f64, String)> {
        let units = schedule.candidate_units(factors);
        let hash = candidate_hash(&schedule.topology, &units);
        if let Some(&s) = self.cache.get(&hash) {
            self.hits += 1;
            return Ok((s, hash));
        }
        let score = self
            .oracle
            .score(schedule.view(&units))
            .map_err(|e| match e {
                Error::Oracle { .. } => e,
                other => Error::Oracle { step, message: other.to_string() },
            })?;
        if !score.is_finite() {
            return Err(Error::Oracle { step, message: format!("non-finite score {score}") });
        }
        self.calls += 1;
        self.cache.insert(hash.clone(), score);
        Ok((score, hash))
    }
}

/// Greedy per-partition factor search. Ties go to the smallest factor.
/// Empty partitions are skipped and keep factor 1.0.
pub fn search(
    schedule: &PartitionSchedule,
    method: SearchMethod,
    oracle: &mut dyn Oracle,
    grid: &[f64],
) -> Result<AmplificationProfile> {
    check_grid(grid)?;
    let parts = schedule.partition_count();
    let reproducible = oracle.deterministic();
    let mut cached = CachedOracle { oracle, cache: HashMap::new(), calls: 0, hits: 0 };
    let mut gammas = vec![1.0; parts];
    let mut trace = Vec::new();
    for step in 0..parts {
        if schedule.is_partition_empty(step) {
            continue;
        }
        let mut best: Option<(f64, f64)> = None;
        for &g in grid {
            let factors: Vec<f64> = (0..parts)
                .map(|i| match i.cmp(&step) {
                    std::cmp::Ordering::Less => gammas[i],
                    std::cmp::Ordering::Equal => g,
                    std::cmp::Ordering::Greater => match method {
                        SearchMethod::Method1 => 0.0,
                        SearchMethod::Method2 => 1.0,
                    },
                })
                .collect();
            let (score, candidate_hash) = cached.score(schedule, &factors, step)?;
            trace.push(TraceRecord { step, gamma: g, score, candidate_hash });
            best = match best {
                Some((bg, bs)) if bs > score || (bs == score && bg <= g) => Some((bg, bs)),
                _ => Some((g, score)),
            };
        }
        gammas[step] = best.expect("grid is nonempty").0;
    }
    let (final_score, _) = cached.score(schedule, &gammas, parts)?;
    Ok(AmplificationProfile {
        method: match method {
            SearchMethod::Method1 => ProfileMethod::Method1,
            SearchMethod::Method2 => ProfileMethod::Method2,
        },
        gammas,
        trace,
        final_score,
        oracle_calls: cached.calls,
        cache_hits: cached.hits,
        reproducible,
    })
}

pub fn search_method1(schedule: &PartitionSchedule, oracle: &mut dyn Oracle, grid: &[f64]) -> Result<AmplificationProfile> {
    search(schedule, SearchMethod::Method1, oracle, grid)
}

pub fn search_method2(schedule: &PartitionSchedule, oracle: &mut dyn Oracle, grid: &[f64]) -> Result<AmplificationProfile> {
    search(schedule, SearchMethod::Method2, oracle, grid)
}

/// Magnitude bands over a DARE delta, searched with the method-2 loop on a
/// grid that may shrink bands.
pub fn amplify_dare(
    sparse: &SparseDelta,
    oracle: &mut dyn Oracle,
    grid: &[f64],
    bands: usize,
) -> Result<AmplificationProfile> {
    let schedule = dare_schedule(sparse, bands)?;
    let mut profile = search(&schedule, SearchMethod::Method2, oracle, grid)?;
    profile.method = ProfileMethod::DareReduction;
    Ok(profile)
}
