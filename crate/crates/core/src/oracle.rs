//! Candidate scoring oracles. Higher scores are better.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::Duration;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::delta::{DeltaModel, DeltaTensor, DeltaView};
use crate::error::{Error, Result};
use crate::exec;
use crate::pruners::stream_rng;

/// Environment variable that overrides where candidate files are written.
pub const TMPDIR_ENV: &str = "DPPA_TMPDIR";

pub trait Oracle {
    fn score(&mut self, candidate: DeltaView<'_>) -> Result<f64>;

    /// Whether repeated calls on the same candidate return the same score.
    fn deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    ProxyCosine,
    ProxyReconstruction,
    ProxyQuadratic,
    ExternalCommand,
}

/// Declarative oracle description, as stored in pipeline configs.
///
/// Config keys: `probe_seed`, `probe_batch` (reconstruction); `command`,
/// `base_path`, `timeout_secs`, `deterministic` (external).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub kind: OracleKind,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl OracleSpec {
    pub fn new(kind: OracleKind) -> Self {
        OracleSpec { kind, config: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.config.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Argument(format!("oracle config {key}={v:?} is not valid"))),
        }
    }

    /// Instantiates the oracle; `reference` is the dense delta proxies compare against.
    pub fn build(&self, reference: &DeltaModel) -> Result<Box<dyn Oracle>> {
        Ok(match self.kind {
            OracleKind::ProxyCosine => Box::new(CosineOracle::new(reference.units.clone())),
            OracleKind::ProxyQuadratic => Box::new(QuadraticOracle::new(reference.units.clone())),
            OracleKind::ProxyReconstruction => Box::new(ReconstructionOracle::new(
                reference,
                self.get("probe_seed", 0u64)?,
                self.get("probe_batch", 16usize)?,
            )?),
            OracleKind::ExternalCommand => {
                let command = self
                    .config
                    .get("command")
                    .ok_or_else(|| Error::Argument("external oracle needs `command`".into()))?;
                let argv = shlex::split(command)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::Argument(format!("cannot split command {command:?}")))?;
                let base_path = self
                    .config
                    .get("base_path")
                    .ok_or_else(|| Error::Argument("external oracle needs `base_path`".into()))?;
                Box::new(ExternalOracle {
                    argv,
                    base_path: PathBuf::from(base_path),
                    timeout: Duration::from_secs_f64(self.get("timeout_secs", 600.0f64)?),
                    deterministic: self.get("deterministic", false)?,
                })
            }
        })
    }
}

fn unit_pairs<'a>(
    candidate: &'a [DeltaTensor],
    reference: &'a [DeltaTensor],
) -> Result<Vec<(&'a DeltaTensor, &'a DeltaTensor)>> {
    if candidate.len() != reference.len() {
        return Err(Error::Shape(format!(
            "candidate has {} units, reference {}",
            candidate.len(),
            reference.len()
        )));
    }
    for (c, r) in candidate.iter().zip(reference) {
        if c.values.len() != r.values.len() {
            return Err(Error::Shape("candidate unit size differs from reference".into()));
        }
    }
    Ok(candidate.iter().zip(reference).collect())
}

/// Cosine similarity between flattened candidate and reference units.
pub struct CosineOracle {
    reference: Vec<DeltaTensor>,
}

impl CosineOracle {
    pub fn new(reference: Vec<DeltaTensor>) -> Self {
        CosineOracle { reference }
    }
}

impl Oracle for CosineOracle {
    fn score(&mut self, candidate: DeltaView<'_>) -> Result<f64> {
        let pairs = unit_pairs(candidate.units, &self.reference)?;
        let parts = exec::map(&pairs, |(c, r)| {
            let mut dot = 0.0;
            let mut cc = 0.0;
            let mut rr = 0.0;
            for (a, b) in c.values.iter().zip(&r.values) {
                dot += a * b;
                cc += a * a;
                rr += b * b;
            }
            (dot, cc, rr)
        });
        let (dot, cc, rr) = parts
            .into_iter()
            .fold((0.0, 0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
        if cc == 0.0 || rr == 0.0 {
            return Ok(0.0);
        }
        Ok(dot / (cc.sqrt() * rr.sqrt()))
    }
}

/// `-||candidate - target||^2` summed over units.
pub struct QuadraticOracle {
    target: Vec<DeltaTensor>,
}

impl QuadraticOracle {
    pub fn new(target: Vec<DeltaTensor>) -> Self {
        QuadraticOracle { target }
    }
}

impl Oracle for QuadraticOracle {
    fn score(&mut self, candidate: DeltaView<'_>) -> Result<f64> {
        let pairs = unit_pairs(candidate.units, &self.target)?;
        let parts = exec::map(&pairs, |(c, t)| {
            c.values.iter().zip(&t.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        });
        Ok(-parts.iter().sum::<f64>())
    }
}

/// Matrix view of a unit: `rows = shape[0]`, `cols = numel / rows`.
pub fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let n: usize = shape.iter().product();
    let rows = shape.first().copied().unwrap_or(1);
    (rows, n / rows)
}

/// Seeded standard-normal probe matrix, `cols x batch`, row-major.
pub fn probe_matrix(seed: u64, tensor_name: &str, cols: usize, batch: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, &format!("probe:{tensor_name}"));
    (0..cols * batch).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Output reconstruction error on random probes.
///
/// Base weights cancel in `(W_B + c)X - (W_B + D)X`, so the score is
/// `-sum_u ||(c_u - D_u) X_u||^2`.
pub struct ReconstructionOracle {
    reference: Vec<DeltaTensor>,
    probes: Vec<Vec<f64>>,
    batch: usize,
}

impl ReconstructionOracle {
    pub fn new(reference: &DeltaModel, seed: u64, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Argument("probe batch must be positive".into()));
        }
        let probes = exec::map_range(reference.units.len(), |u| {
            let (_, cols) = matrix_dims(&reference.units[u].shape);
            probe_matrix(seed, &reference.topology.units[u].tensor_name, cols, batch)
        });
        Ok(ReconstructionOracle { reference: reference.units.clone(), probes, batch })
    }
}

impl Oracle for ReconstructionOracle {
    fn score(&mut self, candidate: DeltaView<'_>) -> Result<f64> {
        let pairs = unit_pairs(candidate.units, &self.reference)?;
        let batch = self.batch;
        let probes = &self.probes;
        let parts = exec::map_range(pairs.len(), |u| {
            let (c, r) = pairs[u];
            let (rows, cols) = matrix_dims(&c.shape);
            let x = &probes[u];
            let mut err = 0.0;
            let mut out = vec![0.0; batch];
            for i in 0..rows {
                out.iter_mut().for_each(|o| *o = 0.0);
                for j in 0..cols {
                    let d = c.values[i * cols + j] - r.values[i * cols + j];
                    if d == 0.0 {
                        continue;
                    }
                    let xrow = &x[j * batch..(j + 1) * batch];
                    for (o, xv) in out.iter_mut().zip(xrow) {
                        *o += d * xv;
                    }
                }
                err += out.iter().map(|o| o * o).sum::<f64>();
            }
            err
        });
        Ok(-parts.iter().sum::<f64>())
    }
}

/// Runs `argv... <base> <candidate>` and reads one number from stdout.
pub struct ExternalOracle {
    pub argv: Vec<String>,
    pub base_path: PathBuf,
    pub timeout: Duration,
    pub deterministic: bool,
}

impl Oracle for ExternalOracle {
    fn score(&mut self, candidate: DeltaView<'_>) -> Result<f64> {
        let dir = match std::env::var_os(TMPDIR_ENV) {
            Some(d) => tempfile::Builder::new().prefix("dppa-oracle").tempdir_in(d)?,
            None => tempfile::Builder::new().prefix("dppa-oracle").tempdir()?,
        };
        let path = dir.path().join("candidate.dppa");
        candidate.to_archive().save(&path)?;

        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .arg(&self.base_path)
            .arg(&path)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Argument(format!("cannot start {:?}: {e}", self.argv[0])))?;
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut s = String::new();
            stdout.read_to_string(&mut s).map(|_| s)
        });
        let status = match child.wait_timeout(self.timeout)? {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Argument(format!("oracle timed out after {:?}", self.timeout)));
            }
        };
        let out = reader
            .join()
            .map_err(|_| Error::Internal("stdout reader panicked".into()))??;
        if !status.success() {
            return Err(Error::Argument(format!("oracle exited with {status}")));
        }
        let text = out.trim();
        let score: f64 = text
            .parse()
            .map_err(|_| Error::Argument(format!("oracle printed {text:?}, expected one number")))?;
        if !score.is_finite() {
            return Err(Error::Argument(format!("oracle printed non-finite score {text}")));
        }
        Ok(score)
    }

    fn deterministic(&self) -> bool {
        self.deterministic
    }
}
