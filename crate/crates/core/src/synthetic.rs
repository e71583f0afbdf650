//! Seeded LLaMA-shaped synthetic checkpoint pairs for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{Tensor, TensorArchive};
use crate::topology::UnitKind;

#[derive(Debug, Clone)]
pub struct SyntheticModel {
    pub layers: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub vocab: usize,
    pub base_std: f64,
    pub delta_std: f64,
    /// Fraction of delta elements inflated into heavy outliers.
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticModel {
    fn default() -> Self {
        SyntheticModel {
            layers: 2,
            hidden: 64,
            intermediate: 128,
            vocab: 32,
            base_std: 0.02,
            delta_std: 0.001,
            outlier_fraction: 0.01,
            seed: 0,
        }
    }
}

impl SyntheticModel {
    pub fn unit_name(layer: usize, unit: &UnitKind) -> String {
        let block = match unit {
            UnitKind::GateProj | UnitKind::UpProj | UnitKind::DownProj => "mlp",
            _ => "self_attn",
        };
        format!("model.layers.{layer}.{block}.{unit}.weight")
    }

    fn shape(&self, unit: &UnitKind) -> Vec<usize> {
        match unit {
            UnitKind::GateProj | UnitKind::UpProj => vec![self.intermediate, self.hidden],
            UnitKind::DownProj => vec![self.hidden, self.intermediate],
            _ => vec![self.hidden, self.hidden],
        }
    }

    /// Tensor names and shapes in archive order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("model.embed_tokens.weight".to_string(), vec![self.vocab, self.hidden])];
        for l in 0..self.layers {
            out.push((format!("model.layers.{l}.input_layernorm.weight"), vec![self.hidden]));
            for u in &UnitKind::STANDARD {
                out.push((Self::unit_name(l, u), self.shape(u)));
            }
        }
        out
    }

    /// Returns `(base, finetuned)`. Each tensor gets its own delta scale so
    /// significance differs across layers and units.
    pub fn generate(&self) -> (TensorArchive, TensorArchive) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base_dist = Normal::new(0.0, self.base_std).unwrap();
        let mut base = TensorArchive::new();
        let mut ft = TensorArchive::new();
        for (name, shape) in self.layout() {
            let n: usize = shape.iter().product();
            let unit_scale = rng.gen_range(0.5..2.0) * self.delta_std;
            let delta_dist = Normal::new(0.0, unit_scale).unwrap();
            let mut b = Vec::with_capacity(n);
            let mut f = Vec::with_capacity(n);
            for _ in 0..n {
                let w = base_dist.sample(&mut rng) as f32;
                let mut d = delta_dist.sample(&mut rng);
                if rng.gen_bool(self.outlier_fraction) {
                    d *= 10.0;
                }
                b.push(w);
                f.push((w as f64 + d) as f32);
            }
            base.insert(name.clone(), Tensor::from_f32(shape.clone(), b).unwrap()).unwrap();
            ft.insert(name, Tensor::from_f32(shape, f).unwrap()).unwrap();
        }
        (base, ft)
    }
}
