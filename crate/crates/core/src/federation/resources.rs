use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::LayerShape;
use crate::aggregate::ClientId;
use crate::error::{Error, Result};
use crate::model::OptimizerKind;
use crate::seed;
use crate::taskgen::ClientSpec;

/// The four LoRA configuration types, from least to most resourced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConfigType {
    Type1,
    Type2,
    Type3,
    Type4,
}

impl ConfigType {
    pub const ALL: [ConfigType; 4] = [
        ConfigType::Type1,
        ConfigType::Type2,
        ConfigType::Type3,
        ConfigType::Type4,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for ConfigType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "type{}", self.index() + 1)
    }
}

/// Per-layer ranks for each configuration type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPalette {
    pub ranks: [Vec<usize>; 4],
}

impl RankPalette {
    /// Toy palette for `layers` layers: type1 rank 2, type2 rank 4, type3
    /// rank 4 on the first layer and 8 elsewhere, type4 rank 8.
    pub fn toy(layers: usize) -> Self {
        let type3 = (0..layers).map(|l| if l == 0 { 4 } else { 8 }).collect();
        Self {
            ranks: [vec![2; layers], vec![4; layers], type3, vec![8; layers]],
        }
    }

    pub fn ranks_for(&self, t: ConfigType) -> &[usize] {
        &self.ranks[t.index()]
    }

    /// Largest rank any type uses on each layer.
    pub fn max_ranks(&self) -> Vec<usize> {
        let layers = self.ranks[0].len();
        (0..layers)
            .map(|l| self.ranks.iter().map(|r| r[l]).max().unwrap_or(1))
            .collect()
    }

    pub fn validate(&self, shapes: &[LayerShape]) -> Result<()> {
        for (t, ranks) in self.ranks.iter().enumerate() {
            if ranks.len() != shapes.len() {
                return Err(Error::InvalidConfig(format!(
                    "palette type{} lists {} ranks for {} layers",
                    t + 1,
                    ranks.len(),
                    shapes.len()
                )));
            }
            for (shape, &r) in shapes.iter().zip(ranks) {
                shape.check_rank(r)?;
            }
        }
        Ok(())
    }

    /// `"2,2;4,4;4,8;8,8"`.
    pub fn to_spec(&self) -> String {
        self.ranks
            .iter()
            .map(|r| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(';').collect();
        if parts.len() != 4 {
            return Err(Error::InvalidConfig(format!(
                "palette {spec:?} needs four ';'-separated types"
            )));
        }
        let mut ranks: [Vec<usize>; 4] = Default::default();
        for (slot, part) in ranks.iter_mut().zip(parts) {
            *slot = part
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad rank {x:?} in palette")))
                })
                .collect::<Result<_>>()?;
        }
        Ok(Self { ranks })
    }
}

/// Mixture weights over the four configuration types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDistribution {
    pub name: String,
    pub weights: [f64; 4],
}

impl ResourceDistribution {
    pub fn new(name: impl Into<String>, weights: [f64; 4]) -> Result<Self> {
        let d = Self {
            name: name.into(),
            weights,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn uniform() -> Self {
        Self::preset("uniform").expect("known preset")
    }

    pub fn heavy_tail_strong() -> Self {
        Self::preset("heavy_tail_strong").expect("known preset")
    }

    pub fn point_mass(t: ConfigType) -> Self {
        let mut weights = [0.0; 4];
        weights[t.index()] = 1.0;
        Self {
            name: format!("point_{t}"),
            weights,
        }
    }

    /// Named presets; shapes follow the qualitative resource histograms
    /// (light tail dominated by type1, strong tail by type4).
    pub fn preset(name: &str) -> Result<Self> {
        let weights = match name {
            "uniform" => [0.25, 0.25, 0.25, 0.25],
            "heavy_tail_light" => [0.70, 0.10, 0.10, 0.10],
            "normal" => [0.15, 0.35, 0.35, 0.15],
            "heavy_tail_strong" => [0.10, 0.10, 0.10, 0.70],
            "point_type1" => return Ok(Self::point_mass(ConfigType::Type1)),
            "point_type2" => return Ok(Self::point_mass(ConfigType::Type2)),
            "point_type3" => return Ok(Self::point_mass(ConfigType::Type3)),
            "point_type4" => return Ok(Self::point_mass(ConfigType::Type4)),
            other => {
                return Err(Error::InvalidDistribution(format!("unknown preset {other:?}")))
            }
        };
        Self::new(name, weights)
    }

    /// Preset name or four comma-separated weights.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.contains(',') {
            let w: Vec<f64> = spec
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::InvalidDistribution(format!("bad weight {x:?}")))
                })
                .collect::<Result<_>>()?;
            let weights: [f64; 4] = w
                .try_into()
                .map_err(|_| Error::InvalidDistribution(format!("{spec:?} needs 4 weights")))?;
            return Self::new("custom", weights);
        }
        Self::preset(spec)
    }

    pub fn to_spec(&self) -> String {
        if Self::preset(&self.name).map(|p| p.weights == self.weights).unwrap_or(false) {
            self.name.clone()
        } else {
            self.weights.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidDistribution(format!(
                "weights {:?} must be finite and non-negative",
                self.weights
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "weights {:?} sum to {total}, not 1",
                self.weights
            )));
        }
        Ok(())
    }

    /// Type with the largest weight (first on ties).
    pub fn modal_type(&self) -> ConfigType {
        let mut best = 0;
        for i in 1..4 {
            if self.weights[i] > self.weights[best] {
                best = i;
            }
        }
        ConfigType::ALL[best]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: ClientId,
    pub config_type: ConfigType,
    pub ranks: Vec<usize>,
    pub sample_count: usize,
    pub optimizer: OptimizerKind,
}

impl ClientProfile {
    /// Σ adapter params / Σ base params.
    pub fn cost_ratio(&self, shapes: &[LayerShape]) -> f64 {
        let adapter: usize = shapes
            .iter()
            .zip(&self.ranks)
            .map(|(s, &r)| s.adapter_params(r))
            .sum();
        let base: usize = shapes.iter().map(|s| s.base_params()).sum();
        adapter as f64 / base as f64
    }
}

/// Independent categorical draw of a configuration type per client.
pub fn assign_resources(
    dist: &ResourceDistribution,
    clients: &[ClientSpec],
    palette: &RankPalette,
    optimizer: OptimizerKind,
    seed_value: u64,
) -> Result<Vec<ClientProfile>> {
    dist.validate()?;
    let mut rng = seed::rng(seed_value, &[seed::TAG_RESOURCES]);
    Ok(clients
        .iter()
        .map(|c| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = ConfigType::Type4;
            for t in ConfigType::ALL {
                acc += dist.weights[t.index()];
                if u < acc {
                    chosen = t;
                    break;
                }
            }
            // Guard against a trailing zero weight absorbing round-off.
            while dist.weights[chosen.index()] == 0.0 && chosen.index() > 0 {
                chosen = ConfigType::ALL[chosen.index() - 1];
            }
            ClientProfile {
                client_id: c.id,
                config_type: chosen,
                ranks: palette.ranks_for(chosen).to_vec(),
                sample_count: c.sample_count,
                optimizer,
            }
        })
        .collect())
}
