//! Synthetic federated worlds.
//!
//! Every archetype's teacher is the shared frozen base plus an exactly
//! low-rank delta per layer: a shared component common to all archetypes
//! and an archetype-specific component. Clients either own one archetype
//! (meta-task mode) or draw each sample's archetype from a Dirichlet mixture
//! (mixture mode).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::ClientId;
use crate::error::{Error, Result};
use crate::lowrank::{matmul, Matrix};
use crate::model::{forward_weights, Batch, FrozenBase};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    /// One archetype per client.
    MetaTask,
    /// Per-client Dirichlet mixture over archetypes.
    Mixture,
}

impl TaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::MetaTask => "meta",
            TaskMode::Mixture => "mixture",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "meta" | "metatask" | "meta_task" => Ok(TaskMode::MetaTask),
            "mixture" | "dirichlet" => Ok(TaskMode::Mixture),
            other => Err(Error::InvalidConfig(format!("unknown task mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_clients: usize,
    pub num_archetypes: usize,
    /// `[input, hidden..., output]`.
    pub layer_dims: Vec<usize>,
    pub shared_rank: usize,
    pub shared_scale: f64,
    /// Rank of each archetype-specific component.
    pub specific_rank: usize,
    pub specific_scale: f64,
    pub noise_sigma: f64,
    pub samples_min: usize,
    pub samples_max: usize,
    pub mode: TaskMode,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_clients: 200,
            num_archetypes: 8,
            layer_dims: vec![32, 32, 16],
            shared_rank: 4,
            shared_scale: 1.0,
            specific_rank: 2,
            specific_scale: 0.5,
            noise_sigma: 0.1,
            samples_min: 60,
            samples_max: 140,
            mode: TaskMode::MetaTask,
            dirichlet_alpha: 0.5,
            seed: 0,
        }
    }
}

impl WorldConfig {
    /// Configured rank of every archetype's full teacher delta.
    pub fn teacher_rank(&self) -> usize {
        let specific = if self.specific_scale > 0.0 { self.specific_rank } else { 0 };
        let shared = if self.shared_scale > 0.0 { self.shared_rank } else { 0 };
        shared + specific
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layer_dims.len() < 2 || self.layer_dims.iter().any(|&d| d == 0) {
            return bad(format!("layer_dims {:?} needs >= 2 positive widths", self.layer_dims));
        }
        if self.num_archetypes == 0 || self.num_archetypes > self.num_clients {
            return bad(format!(
                "num_archetypes {} must be in 1..={}",
                self.num_archetypes, self.num_clients
            ));
        }
        let min_dim = self
            .layer_dims
            .windows(2)
            .map(|w| w[0].min(w[1]))
            .min()
            .unwrap_or(0);
        if self.teacher_rank() > min_dim {
            return bad(format!(
                "teacher rank {} exceeds the narrowest layer ({min_dim})",
                self.teacher_rank()
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(self.shared_scale >= 0.0 && self.specific_scale >= 0.0) {
            return bad("component scales must be >= 0".into());
        }
        if self.samples_min < 10 || self.samples_min > self.samples_max {
            return bad(format!(
                "samples range {}..={} must start at >= 10",
                self.samples_min, self.samples_max
            ));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad(format!("dirichlet_alpha {} must be > 0", self.dirichlet_alpha));
        }
        Ok(())
    }

    /// Canonical `key=value` listing (stable order); also the hashing input.
    pub fn entries(&self) -> Vec<(String, String)> {
        let dims = self
            .layer_dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("num_clients".into(), self.num_clients.to_string()),
            ("num_archetypes".into(), self.num_archetypes.to_string()),
            ("layer_dims".into(), dims),
            ("shared_rank".into(), self.shared_rank.to_string()),
            ("shared_scale".into(), self.shared_scale.to_string()),
            ("specific_rank".into(), self.specific_rank.to_string()),
            ("specific_scale".into(), self.specific_scale.to_string()),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("samples_min".into(), self.samples_min.to_string()),
            ("samples_max".into(), self.samples_max.to_string()),
            ("mode".into(), self.mode.as_str().into()),
            ("dirichlet_alpha".into(), self.dirichlet_alpha.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_clients" => self.num_clients = parse(key, value)?,
            "num_archetypes" => self.num_archetypes = parse(key, value)?,
            "layer_dims" => {
                self.layer_dims = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "shared_rank" => self.shared_rank = parse(key, value)?,
            "shared_scale" => self.shared_scale = parse(key, value)?,
            "specific_rank" | "teacher_rank" => self.specific_rank = parse(key, value)?,
            "specific_scale" => self.specific_scale = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "samples_min" => self.samples_min = parse(key, value)?,
            "samples_max" => self.samples_max = parse(key, value)?,
            "mode" => self.mode = TaskMode::parse(value)?,
            "dirichlet_alpha" => self.dirichlet_alpha = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown world key {other:?}"))),
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(text, "{k}={v}");
        }
        short_hash(&text)
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse {key}={value:?}")))
}

pub(crate) fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Assignment {
    Archetype(usize),
    Mixture(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: ClientId,
    pub assignment: Assignment,
    pub sample_count: usize,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub base: Arc<FrozenBase>,
    pub shared_delta: Vec<Matrix>,
    /// `[archetype][layer]` full teacher delta (shared + specific).
    pub teacher_deltas: Vec<Vec<Matrix>>,
    teacher_weights: Vec<Vec<Matrix>>,
    pub clients: Vec<ClientSpec>,
}

/// `scale · P · Q / sqrt(in · rank)` with Gaussian `P` (out x rank) and `Q`
/// (rank x in); `‖Δ‖_F² ≈ scale² · out`.
fn low_rank_gaussian<R: Rng + ?Sized>(
    out: usize,
    inp: usize,
    rank: usize,
    scale: f64,
    rng: &mut R,
) -> Matrix {
    if rank == 0 || scale == 0.0 {
        return Matrix::zeros(out, inp);
    }
    let p = Matrix::gaussian(out, rank, 1.0, rng);
    let q = Matrix::gaussian(rank, inp, 1.0, rng);
    let norm = scale / ((inp * rank) as f64).sqrt();
    matmul(&p, &q).expect("inner dims agree").map(|x| x * norm)
}

fn dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let dims = &cfg.layer_dims;
    let layers = dims.len() - 1;
    let mut rng = seed::rng(cfg.seed, &[seed::TAG_WORLD_BASE]);
    let bases: Vec<Matrix> = (0..layers)
        .map(|l| Matrix::gaussian(dims[l + 1], dims[l], (1.0 / dims[l] as f64).sqrt(), &mut rng))
        .collect();
    let base = Arc::new(FrozenBase::new(bases)?);

    let mut rng = seed::rng(cfg.seed, &[seed::TAG_WORLD_SHARED]);
    let shared_delta: Vec<Matrix> = (0..layers)
        .map(|l| low_rank_gaussian(dims[l + 1], dims[l], cfg.shared_rank, cfg.shared_scale, &mut rng))
        .collect();

    let teacher_deltas: Vec<Vec<Matrix>> = (0..cfg.num_archetypes)
        .map(|t| {
            let mut rng = seed::rng(cfg.seed, &[seed::TAG_WORLD_SPECIFIC, t as u64]);
            (0..layers)
                .map(|l| {
                    let spec = low_rank_gaussian(
                        dims[l + 1],
                        dims[l],
                        cfg.specific_rank,
                        cfg.specific_scale,
                        &mut rng,
                    );
                    shared_delta[l].add(&spec).expect("same shape")
                })
                .collect()
        })
        .collect();
    let teacher_weights = teacher_deltas
        .iter()
        .map(|deltas| {
            base.layers()
                .iter()
                .zip(deltas)
                .map(|(w0, d)| w0.add(d).expect("same shape"))
                .collect()
        })
        .collect();

    let mut rng = seed::rng(cfg.seed, &[seed::TAG_WORLD_ASSIGN]);
    let mut archetypes: Vec<usize> = (0..cfg.num_clients).map(|c| c % cfg.num_archetypes).collect();
    archetypes.shuffle(&mut rng);
    let clients = (0..cfg.num_clients)
        .map(|c| {
            let assignment = match cfg.mode {
                TaskMode::MetaTask => Assignment::Archetype(archetypes[c]),
                TaskMode::Mixture => {
                    Assignment::Mixture(dirichlet(cfg.dirichlet_alpha, cfg.num_archetypes, &mut rng))
                }
            };
            let sample_count = rng.random_range(cfg.samples_min..=cfg.samples_max);
            ClientSpec {
                id: ClientId(c as u32),
                assignment,
                sample_count,
            }
        })
        .collect();

    Ok(World {
        config: cfg.clone(),
        base,
        shared_delta,
        teacher_deltas,
        teacher_weights,
        clients,
    })
}

/// Train/validation/test split of one client's samples (8:1:1, remainder
/// to train).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: ClientId,
    pub assignment: Assignment,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    pub sample_count: usize,
}

pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

impl World {
    pub fn num_layers(&self) -> usize {
        self.base.layers().len()
    }

    pub fn client(&self, id: ClientId) -> Result<&ClientSpec> {
        self.clients
            .get(id.0 as usize)
            .ok_or_else(|| Error::InvalidConfig(format!("no client {id}")))
    }

    pub fn teacher_weights(&self, archetype: usize) -> &[Matrix] {
        &self.teacher_weights[archetype]
    }

    /// Noise-free teacher output for inputs drawn from one archetype.
    pub fn teacher_forward(&self, archetype: usize, inputs: &Matrix) -> Result<Matrix> {
        forward_weights(&self.teacher_weights[archetype], inputs)
    }

    /// Expected per-sample loss of a perfect model: `½ σ² d_out`.
    pub fn noise_floor(&self) -> f64 {
        0.5 * self.config.noise_sigma.powi(2) * self.base.output_dim() as f64
    }

    /// Mean pairwise Frobenius distance between archetype teacher deltas,
    /// summed over layers.
    pub fn mean_pairwise_teacher_distance(&self) -> f64 {
        let t = self.teacher_deltas.len();
        if t < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        let mut pairs = 0;
        for a in 0..t {
            for b in (a + 1)..t {
                let sq: f64 = self.teacher_deltas[a]
                    .iter()
                    .zip(&self.teacher_deltas[b])
                    .map(|(x, y)| x.sub(y).expect("same shape").sum_squares())
                    .sum();
                total += sq.sqrt();
                pairs += 1;
            }
        }
        total / pairs as f64
    }

    /// Datasets for every client at its configured size.
    pub fn all_datasets(&self) -> Result<Vec<ClientDataset>> {
        use rayon::prelude::*;
        self.clients
            .par_iter()
            .map(|c| gen_client_dataset(self, c.id, c.sample_count))
            .collect()
    }
}

pub fn gen_client_dataset(world: &World, client_id: ClientId, n: usize) -> Result<ClientDataset> {
    if n < 10 {
        return Err(Error::DatasetTooSmall(n));
    }
    let spec = world.client(client_id)?;
    let p0 = world.base.input_dim();
    let d_out = world.base.output_dim();
    let mut rng = seed::rng(world.config.seed, &[seed::TAG_CLIENT_DATA, client_id.0 as u64]);
    let inputs = Matrix::gaussian(n, p0, 1.0, &mut rng);
    let archetypes: Vec<usize> = match &spec.assignment {
        Assignment::Archetype(t) => vec![*t; n],
        Assignment::Mixture(pi) => (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                pi.iter()
                    .position(|&w| {
                        acc += w;
                        u < acc
                    })
                    .unwrap_or(pi.len() - 1)
            })
            .collect(),
    };
    let mut targets = Matrix::zeros(n, d_out);
    // Group rows by archetype so each teacher runs once.
    for t in archetypes.iter().copied().collect::<BTreeSet<_>>() {
        let rows: Vec<usize> = (0..n).filter(|&i| archetypes[i] == t).collect();
        let x = Matrix::from_fn(rows.len(), p0, |i, j| inputs[(rows[i], j)]);
        let y = world.teacher_forward(t, &x)?;
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..d_out {
                targets[(r, j)] = y[(i, j)];
            }
        }
    }
    let sigma = world.config.noise_sigma;
    if sigma > 0.0 {
        for y in targets.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            *y += sigma * z;
        }
    }
    let all = Batch::new(inputs, targets)?;
    let (n_train, n_val, _) = split_sizes(n);
    let idx: Vec<usize> = (0..n).collect();
    Ok(ClientDataset {
        client_id,
        assignment: spec.assignment.clone(),
        train: all.select(&idx[..n_train])?,
        val: all.select(&idx[n_train..n_train + n_val])?,
        test: all.select(&idx[n_train + n_val..])?,
        sample_count: n,
    })
}

/// `count` clients drawn without replacement from those outside `trained`,
/// returned in ascending id order.
pub fn unseen_pool(
    world: &World,
    trained: &BTreeSet<ClientId>,
    count: usize,
    seed_value: u64,
) -> Result<Vec<ClientId>> {
    let mut eligible: Vec<ClientId> = world
        .clients
        .iter()
        .map(|c| c.id)
        .filter(|id| !trained.contains(id))
        .collect();
    if count > eligible.len() {
        return Err(Error::PoolExhausted {
            requested: count,
            available: eligible.len(),
        });
    }
    let mut rng = seed::rng(seed_value, &[seed::TAG_UNSEEN]);
    eligible.shuffle(&mut rng);
    let mut pool: Vec<ClientId> = eligible.into_iter().take(count).collect();
    pool.sort();
    Ok(pool)
}

const SNAPSHOT_MAGIC: &str = "flexlora-world v1";

/// Text snapshot: header with config hash, the config, and one record per
/// client. Worlds are pure functions of their config, so loading regenerates
/// the world and checks every record.
pub fn dump_world(world: &World) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{SNAPSHOT_MAGIC}");
    let _ = writeln!(out, "hash {}", world.config.hash());
    for (k, v) in world.config.entries() {
        let _ = writeln!(out, "config {k}={v}");
    }
    for c in &world.clients {
        let _ = writeln!(out, "client {}", client_record(c));
    }
    let _ = writeln!(out, "end");
    out
}

fn client_record(c: &ClientSpec) -> String {
    let assign = match &c.assignment {
        Assignment::Archetype(t) => format!("archetype={t}"),
        Assignment::Mixture(pi) => format!(
            "mix={}",
            pi.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(",")
        ),
    };
    format!("{} n={} {assign}", c.id, c.sample_count)
}

pub fn load_world(text: &str) -> Result<World> {
    let snap = |m: &str| Error::Snapshot(m.to_string());
    let mut lines = text.lines();
    if lines.next() != Some(SNAPSHOT_MAGIC) {
        return Err(snap("missing or unsupported header"));
    }
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("hash "))
        .ok_or_else(|| snap("missing hash line"))?
        .to_string();
    let mut cfg = WorldConfig::default();
    let mut records = Vec::new();
    let mut ended = false;
    for line in lines {
        if let Some(kv) = line.strip_prefix("config ") {
            let (k, v) = kv.split_once('=').ok_or_else(|| snap("malformed config line"))?;
            cfg.set(k, v)?;
        } else if let Some(rec) = line.strip_prefix("client ") {
            records.push(rec.to_string());
        } else if line == "end" {
            ended = true;
            break;
        } else if !line.trim().is_empty() {
            return Err(snap(&format!("unexpected line {line:?}")));
        }
    }
    if !ended {
        return Err(snap("truncated snapshot"));
    }
    if cfg.hash() != hash {
        return Err(snap("config hash mismatch"));
    }
    let world = gen_world(&cfg)?;
    if records.len() != world.clients.len() {
        return Err(snap("client count mismatch"));
    }
    for (rec, c) in records.iter().zip(&world.clients) {
        if *rec != client_record(c) {
            return Err(snap(&format!("client record {} does not replay", c.id)));
        }
    }
    Ok(world)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            num_clients: 12,
            num_archetypes: 3,
            layer_dims: vec![6, 5, 4],
            shared_rank: 1,
            specific_rank: 1,
            samples_min: 20,
            samples_max: 30,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn split_ratio() {
        assert_eq!(split_sizes(100), (80, 10, 10));
        assert_eq!(split_sizes(19), (17, 1, 1));
    }

    #[test]
    fn too_small_dataset() {
        let w = gen_world(&small()).unwrap();
        assert_eq!(gen_client_dataset(&w, ClientId(0), 9), Err(Error::DatasetTooSmall(9)));
    }

    #[test]
    fn invalid_configs() {
        let mut c = small();
        c.num_archetypes = 13;
        assert!(gen_world(&c).is_err());
        let mut c = small();
        c.noise_sigma = -1.0;
        assert!(gen_world(&c).is_err());
        let mut c = small();
        c.shared_rank = 4;
        assert!(gen_world(&c).is_err());
    }

    #[test]
    fn noiseless_targets_are_teacher_outputs() {
        let mut c = small();
        c.noise_sigma = 0.0;
        let w = gen_world(&c).unwrap();
        let ds = gen_client_dataset(&w, ClientId(3), 100).unwrap();
        let Assignment::Archetype(t) = ds.assignment else { panic!() };
        let y = w.teacher_forward(t, &ds.train.inputs).unwrap();
        assert_eq!(y, ds.train.targets);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (80, 10, 10));
    }

    #[test]
    fn no_specific_component_means_identical_teachers() {
        let mut c = small();
        c.specific_rank = 0;
        let w = gen_world(&c).unwrap();
        for t in 1..c.num_archetypes {
            assert_eq!(w.teacher_deltas[t], w.teacher_deltas[0]);
        }
        assert_eq!(w.mean_pairwise_teacher_distance(), 0.0);
    }

    #[test]
    fn unseen_pool_edges() {
        let w = gen_world(&small()).unwrap();
        let none = BTreeSet::new();
        assert!(unseen_pool(&w, &none, 0, 1).unwrap().is_empty());
        let all: BTreeSet<ClientId> = w.clients.iter().map(|c| c.id).collect();
        assert!(matches!(
            unseen_pool(&w, &all, 1, 1),
            Err(Error::PoolExhausted { requested: 1, available: 0 })
        ));
    }

    #[test]
    fn snapshot_roundtrip_and_tamper() {
        let mut c = small();
        c.mode = TaskMode::Mixture;
        let w = gen_world(&c).unwrap();
        let text = dump_world(&w);
        let back = load_world(&text).unwrap();
        assert_eq!(back.clients, w.clients);
        assert_eq!(dump_world(&back), text);
        let tampered = text.replace("config seed=0", "config seed=1");
        assert!(matches!(load_world(&tampered), Err(Error::Snapshot(_))));
        assert!(load_world("nope").is_err());
    }

    #[test]
    fn mixture_weights_are_distributions() {
        let mut c = small();
        c.mode = TaskMode::Mixture;
        let w = gen_world(&c).unwrap();
        for client in &w.clients {
            let Assignment::Mixture(pi) = &client.assignment else { panic!() };
            assert_eq!(pi.len(), 3);
            assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(pi.iter().all(|&p| p >= 0.0));
        }
    }
}
