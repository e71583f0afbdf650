//! Maps tensor names onto (layer, linear unit) coordinates.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::archive::TensorArchive;
use crate::error::{Error, Result};

/// Linear sub-module inside a transformer layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnitKind {
    QProj,
    KProj,
    VProj,
    OProj,
    GateProj,
    UpProj,
    DownProj,
    Custom(String),
}

impl UnitKind {
    pub const STANDARD: [UnitKind; 7] = [
        UnitKind::QProj,
        UnitKind::KProj,
        UnitKind::VProj,
        UnitKind::OProj,
        UnitKind::GateProj,
        UnitKind::UpProj,
        UnitKind::DownProj,
    ];

    pub fn label(&self) -> &str {
        match self {
            UnitKind::QProj => "q_proj",
            UnitKind::KProj => "k_proj",
            UnitKind::VProj => "v_proj",
            UnitKind::OProj => "o_proj",
            UnitKind::GateProj => "gate_proj",
            UnitKind::UpProj => "up_proj",
            UnitKind::DownProj => "down_proj",
            UnitKind::Custom(s) => s,
        }
    }
}

impl FromStr for UnitKind {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "q_proj" | "q" => UnitKind::QProj,
            "k_proj" | "k" => UnitKind::KProj,
            "v_proj" | "v" => UnitKind::VProj,
            "o_proj" | "o" => UnitKind::OProj,
            "gate_proj" | "gate" => UnitKind::GateProj,
            "up_proj" | "up" => UnitKind::UpProj,
            "down_proj" | "down" => UnitKind::DownProj,
            other => UnitKind::Custom(other.to_string()),
        })
    }
}

impl fmt::Display for UnitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for UnitKind {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for UnitKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinearKey {
    pub layer: usize,
    pub unit: UnitKind,
    pub tensor_name: String,
}

/// A naming rule. `pattern` is a regex with a named `layer` capture; the unit
/// comes either from a named `unit` capture or from the fixed `unit` label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamingRule {
    pub pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl NamingRule {
    pub fn new(pattern: impl Into<String>) -> Self {
        NamingRule { pattern: pattern.into(), unit: None }
    }

    pub fn with_unit(pattern: impl Into<String>, unit: impl Into<String>) -> Self {
        NamingRule { pattern: pattern.into(), unit: Some(unit.into()) }
    }

    /// `[<prefix>.]layers.<l>.[<block>.]<unit>.weight` for the seven standard
    /// projections (short aliases `q`, `k`, ... accepted).
    pub fn defaults() -> Vec<NamingRule> {
        vec![NamingRule::new(
            r"^(?:.+\.)?layers\.(?P<layer>\d+)\.(?:[A-Za-z_]+\.)?(?P<unit>q_proj|k_proj|v_proj|o_proj|gate_proj|up_proj|down_proj|q|k|v|o|gate|up|down)\.weight$",
        )]
    }
}

struct CompiledRule {
    regex: Regex,
    unit: Option<UnitKind>,
}

impl CompiledRule {
    fn compile(rule: &NamingRule) -> Result<Self> {
        let regex = Regex::new(&rule.pattern)
            .map_err(|e| Error::Argument(format!("bad naming rule {:?}: {e}", rule.pattern)))?;
        let names: Vec<_> = regex.capture_names().flatten().collect();
        if !names.contains(&"layer") {
            return Err(Error::Argument(format!(
                "naming rule {:?} lacks a `layer` capture",
                rule.pattern
            )));
        }
        let unit = rule.unit.as_deref().map(|u| u.parse().unwrap());
        if unit.is_none() && !names.contains(&"unit") {
            return Err(Error::Argument(format!(
                "naming rule {:?} has neither a `unit` capture nor a fixed unit",
                rule.pattern
            )));
        }
        Ok(CompiledRule { regex, unit })
    }

    fn classify(&self, name: &str) -> Option<(usize, UnitKind)> {
        let caps = self.regex.captures(name)?;
        let layer = caps.name("layer")?.as_str().parse().ok()?;
        let unit = match &self.unit {
            Some(u) => u.clone(),
            None => caps.name("unit")?.as_str().parse().unwrap(),
        };
        Some((layer, unit))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTopology {
    pub layer_count: usize,
    /// Sorted by (layer, unit).
    pub units: Vec<LinearKey>,
    /// Tensors no rule matched, in archive order.
    pub unclassified: Vec<String>,
}

impl ModelTopology {
    pub fn from_names<'a>(
        names: impl IntoIterator<Item = &'a str>,
        rules: &[NamingRule],
    ) -> Result<Self> {
        if rules.is_empty() {
            return Err(Error::Argument("naming rules must be nonempty".into()));
        }
        let compiled = rules.iter().map(CompiledRule::compile).collect::<Result<Vec<_>>>()?;
        let mut units = Vec::new();
        let mut unclassified = Vec::new();
        let mut owner: HashMap<(usize, UnitKind), String> = HashMap::new();
        for name in names {
            let mut hit: Option<(usize, UnitKind)> = None;
            for rule in &compiled {
                if let Some(key) = rule.classify(name) {
                    match &hit {
                        Some(prev) if *prev != key => {
                            return Err(Error::Topology(format!(
                                "{name} matches rules giving ({}, {}) and ({}, {})",
                                prev.0, prev.1, key.0, key.1
                            )))
                        }
                        _ => hit = Some(key),
                    }
                }
            }
            match hit {
                Some((layer, unit)) => {
                    if let Some(other) = owner.insert((layer, unit.clone()), name.to_string()) {
                        return Err(Error::Topology(format!(
                            "{name} and {other} both map to layer {layer} unit {unit}"
                        )));
                    }
                    units.push(LinearKey { layer, unit, tensor_name: name.to_string() });
                }
                None => unclassified.push(name.to_string()),
            }
        }
        units.sort_by(|a, b| (a.layer, &a.unit).cmp(&(b.layer, &b.unit)));
        let layer_count = units.iter().map(|k| k.layer).collect::<BTreeSet<_>>().len();
        Ok(ModelTopology { layer_count, units, unclassified })
    }

    /// Distinct layer indices, ascending.
    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.units.iter().map(|k| k.layer).collect();
        v.dedup();
        v
    }

    /// For each unit, the position of its layer within [`Self::layers`].
    pub fn unit_layer_positions(&self) -> Vec<usize> {
        let layers = self.layers();
        self.units
            .iter()
            .map(|k| layers.binary_search(&k.layer).unwrap())
            .collect()
    }

    pub fn unit_index(&self, tensor_name: &str) -> Option<usize> {
        self.units.iter().position(|k| k.tensor_name == tensor_name)
    }
}

pub fn parse_topology(archive: &TensorArchive, rules: &[NamingRule]) -> Result<ModelTopology> {
    ModelTopology::from_names(archive.names(), rules)
}
