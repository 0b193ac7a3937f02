use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::presets;
use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::taskgen::{short_hash, WorldConfig};

/// Everything one `run` needs: world and federation settings, the seed
/// list and the output directory.
///
/// Each seed `s` drives one independent replicate with both the world seed
/// and the federation seed set to `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub world: WorldConfig,
    pub fed: FedConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            world: WorldConfig::default(),
            fed: FedConfig::default(),
            seeds: vec![0],
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Starts from a preset's base recipe.
    pub fn from_preset(name: &str) -> Result<Self> {
        let (world, fed, seeds) = presets::base(name)?;
        Ok(Self {
            preset: Some(name.to_string()),
            world,
            fed,
            seeds,
            out: PathBuf::from("out").join(name),
        })
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` line,
    /// wherever it appears, is applied first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, name)) => Self::from_preset(name)?,
            None => Self::default(),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Reads and parses a config file. A missing or unreadable file is an
    /// `InvalidConfig` error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse()
                            .map_err(|_| Error::InvalidConfig(format!("bad seed {s:?}")))
                    })
                    .collect::<Result<_>>()?;
            }
            "out" => self.out = PathBuf::from(value),
            "preset" => *self = Self::from_preset(value)?,
            "world.seed" | "fed.seed" => {
                return Err(Error::InvalidConfig(format!(
                    "{key} is set per replicate; use seeds = ..."
                )))
            }
            _ => {
                if let Some(k) = key.strip_prefix("world.") {
                    self.world.set(k, value)?;
                } else if let Some(k) = key.strip_prefix("fed.") {
                    self.fed.set(k, value)?;
                } else {
                    return Err(Error::InvalidConfig(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be non-empty".into()));
        }
        self.world.validate()?;
        self.fed.validate()
    }

    /// World config for replicate `seed`.
    pub fn world_for(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            ..self.world.clone()
        }
    }

    /// Federation config for replicate `seed`.
    pub fn fed_for(&self, seed: u64) -> FedConfig {
        FedConfig {
            seed,
            ..self.fed.clone()
        }
    }

    /// Canonical listing without seeds (they are listed separately).
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .world
            .entries()
            .into_iter()
            .filter(|(k, _)| k != "seed")
            .map(|(k, v)| (format!("world.{k}"), v))
            .collect();
        out.extend(
            self.fed
                .entries()
                .into_iter()
                .filter(|(k, _)| k != "seed")
                .map(|(k, v)| (format!("fed.{k}"), v)),
        );
        out
    }

    pub fn seeds_spec(&self) -> String {
        self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    }

    /// Short hash over the canonical entries and the seed list.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(text, "{k}={v}");
        }
        let _ = writeln!(text, "seeds={}", self.seeds_spec());
        short_hash(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::Strategy;

    #[test]
    fn parses_dotted_keys_and_comments() {
        let cfg = RunConfig::parse(
            "# demo\nfed.strategy = hetlora\nworld.num_clients=50 # inline\nseeds = 3, 4\n",
        )
        .unwrap();
        assert_eq!(cfg.fed.strategy, Strategy::HetLora);
        assert_eq!(cfg.world.num_clients, 50);
        assert_eq!(cfg.seeds, vec![3, 4]);
    }

    #[test]
    fn preset_applies_first() {
        let cfg = RunConfig::parse("fed.max_rounds = 7\npreset = fig5a\n").unwrap();
        assert_eq!(cfg.fed.max_rounds, 7);
        assert_eq!(cfg.preset.as_deref(), Some("fig5a"));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("nonsense").is_err());
        assert!(RunConfig::parse("bogus.key = 1").is_err());
        assert!(RunConfig::parse("preset = nope").is_err());
        assert!(RunConfig::parse("fed.seed = 1").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_overrides(&["fed.max_rounds"]).is_err());
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.apply_overrides(&["fed.max_rounds=3"]).unwrap();
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seeds = vec![1];
        assert_ne!(a.hash(), c.hash());
    }
}
