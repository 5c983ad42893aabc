//! Permutation-invariant sensory-neuron policy for cart-pole, trained with a
//! (μ, λ) Gaussian evolution strategy.
//!
//! Each sensor reading passes through shared maps `f_K(o_i, a_{t−1})` and
//! `f_V(o_i)`; a fixed bank of latent queries attends over the sensors, so
//! reordering the observation leaves the message unchanged.

pub mod cartpole;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::block::modulated_attention;
use crate::error::{param_err, Error, Result};
use crate::modulation::ModulationKind;
use crate::seed::derive;
use crate::tensor::Tensor;

pub use cartpole::{cartpole_step, CartPoleState};

/// Width of the per-sensor key and value features.
pub const FEATURES: usize = 16;
pub const LATENTS: usize = 4;
pub const CARTPOLE_SENSORS: usize = 4;

/// Flat genome layout.
const FK_W: usize = 0;
const FK_B: usize = FK_W + 2 * FEATURES;
const FV_W: usize = FK_B + FEATURES;
const FV_B: usize = FV_W + FEATURES;
const LAT: usize = FV_B + FEATURES;
const WQ: usize = LAT + LATENTS * FEATURES;
const WK: usize = WQ + FEATURES * FEATURES;
const WV: usize = WK + FEATURES * FEATURES;
const HEAD_W: usize = WV + FEATURES * FEATURES;
const HEAD_B: usize = HEAD_W + LATENTS * FEATURES;
pub const GENOME_LEN: usize = HEAD_B + 1;

/// Attention flavour used to pool sensor neurons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoder {
    /// Unmodulated latent-query attention.
    Standard,
    Co4,
    TM1,
    TM2,
    TM3,
    TM4,
}

impl Encoder {
    pub fn modulation(self) -> Option<ModulationKind> {
        match self {
            Encoder::Standard => None,
            Encoder::Co4 => Some(ModulationKind::Cooperation),
            Encoder::TM1 => Some(ModulationKind::TM1),
            Encoder::TM2 => Some(ModulationKind::TM2),
            Encoder::TM3 => Some(ModulationKind::TM3),
            Encoder::TM4 => Some(ModulationKind::TM4),
        }
    }
}

impl fmt::Display for Encoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoder::Standard => "standard",
            Encoder::Co4 => "co4",
            Encoder::TM1 => "tm1",
            Encoder::TM2 => "tm2",
            Encoder::TM3 => "tm3",
            Encoder::TM4 => "tm4",
        })
    }
}

impl FromStr for Encoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Encoder::Standard),
            "co4" => Ok(Encoder::Co4),
            "tm1" => Ok(Encoder::TM1),
            "tm2" => Ok(Encoder::TM2),
            "tm3" => Ok(Encoder::TM3),
            "tm4" => Ok(Encoder::TM4),
            other => Err(param_err(format!("unknown encoder `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensoryObs {
    pub components: Vec<f64>,
    pub prev_action: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PiPolicy {
    pub sensors: usize,
    pub encoder: Encoder,
}

fn block(genome: &[f64], at: usize, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_parts(vec![rows, cols], genome[at..at + rows * cols].to_vec())
}

impl PiPolicy {
    pub fn cartpole(encoder: Encoder) -> Self {
        Self {
            sensors: CARTPOLE_SENSORS,
            encoder,
        }
    }

    fn check(&self, obs: &SensoryObs, genome: &[f64]) -> Result<()> {
        if obs.components.len() != self.sensors {
            return Err(Error::Dimension {
                op: "pi_encode",
                left: vec![self.sensors],
                right: vec![obs.components.len()],
            });
        }
        if genome.len() != GENOME_LEN {
            return Err(Error::Dimension {
                op: "genome",
                left: vec![GENOME_LEN],
                right: vec![genome.len()],
            });
        }
        Ok(())
    }

    /// Per-sensor rows `K = f_K(o_i, a)·W_k` and `V = f_V(o_i)·W_v`, and the
    /// latent queries `Q = latents·W_q`.
    pub fn project(&self, obs: &SensoryObs, genome: &[f64]) -> Result<(Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
        self.check(obs, genome)?;
        let n = obs.components.len();
        let mut fk = Vec::with_capacity(n * FEATURES);
        let mut fv = Vec::with_capacity(n * FEATURES);
        for &o in &obs.components {
            for j in 0..FEATURES {
                let zk = o * genome[FK_W + j] + obs.prev_action * genome[FK_W + FEATURES + j] + genome[FK_B + j];
                fk.push(zk.tanh());
                fv.push((o * genome[FV_W + j] + genome[FV_B + j]).tanh());
            }
        }
        let fk = Tensor::new(vec![n, FEATURES], fk)?;
        let fv = Tensor::new(vec![n, FEATURES], fv)?;
        let q = block(genome, LAT, LATENTS, FEATURES).matmul(&block(genome, WQ, FEATURES, FEATURES))?;
        let k = fk.matmul(&block(genome, WK, FEATURES, FEATURES))?;
        let v = fv.matmul(&block(genome, WV, FEATURES, FEATURES))?;
        Ok((q, k, v))
    }

    /// `LATENTS × FEATURES` message pooled from the sensor neurons.
    pub fn pi_encode(&self, obs: &SensoryObs, genome: &[f64]) -> Result<Tensor<f64>> {
        let (q, k, v) = self.project(obs, genome)?;
        modulated_attention(&q, &k, &v, self.encoder.modulation())
    }

    /// Action in `(−1, 1)`; its sign selects the pushing direction.
    pub fn act(&self, obs: &SensoryObs, genome: &[f64]) -> Result<f64> {
        let m = self.pi_encode(obs, genome)?;
        let z: f64 = m
            .data()
            .iter()
            .zip(&genome[HEAD_W..HEAD_B])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + genome[HEAD_B];
        Ok(z.tanh())
    }

    /// Survival steps of one episode started from [`CartPoleState::random`].
    pub fn rollout(&self, genome: &[f64], seed: u64) -> Result<u32> {
        let mut s = CartPoleState::random(seed);
        let mut prev = 0.0;
        while !s.terminated {
            let obs = SensoryObs {
                components: s.observation().to_vec(),
                prev_action: prev,
            };
            prev = self.act(&obs, genome)?;
            let force = if prev >= 0.0 {
                cartpole::FORCE
            } else {
                -cartpole::FORCE
            };
            s = cartpole_step(&s, force)?;
        }
        Ok(s.step_count)
    }

    pub fn mean_fitness(&self, genome: &[f64], seeds: &[u64]) -> Result<f64> {
        let mut total = 0.0;
        for &s in seeds {
            total += self.rollout(genome, s)? as f64;
        }
        Ok(total / seeds.len().max(1) as f64)
    }
}

const TAG_TRAIN_EPISODE: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_RANDOM_GENOME: u64 = 4;
/// Held-out evaluation episodes are shared by every run.
const TEST_EPISODE_KEY: u64 = 0x7E57;

pub const INIT_SCALE: f64 = 0.25;

pub fn gaussian_genome(seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).expect("finite scale");
    (0..GENOME_LEN).map(|_| normal.sample(&mut rng)).collect()
}

pub fn test_episode_seeds(count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| derive(&[TEST_EPISODE_KEY, i])).collect()
}

/// Mean fitness of `count` independent `N(0, INIT_SCALE)` genomes, each on
/// its own held-out episode.
pub fn random_baseline(encoder: Encoder, count: usize, seed: u64) -> Result<f64> {
    let policy = PiPolicy::cartpole(encoder);
    let episodes = test_episode_seeds(count);
    let mut total = 0.0;
    for (i, &ep) in episodes.iter().enumerate() {
        let g = gaussian_genome(derive(&[seed, TAG_RANDOM_GENOME, i as u64]), INIT_SCALE);
        total += policy.rollout(&g, ep)? as f64;
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EsConfig {
    pub encoder: Encoder,
    pub generations: usize,
    pub population: usize,
    pub sigma: f64,
    /// Standard deviation of the initial center genome.
    pub init_scale: f64,
    /// Elite size μ; `0` selects `population / 4`.
    pub elite: usize,
    /// Training episodes per fitness evaluation.
    pub episodes: usize,
    /// Held-out episodes for the final center-genome score.
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for EsConfig {
    fn default() -> Self {
        Self {
            encoder: Encoder::Co4,
            generations: 20,
            population: 32,
            sigma: 0.1,
            init_scale: INIT_SCALE,
            elite: 0,
            episodes: 3,
            eval_episodes: 100,
            seed: 0,
        }
    }
}

impl EsConfig {
    pub fn elite_size(&self) -> usize {
        if self.elite == 0 {
            (self.population / 4).max(1)
        } else {
            self.elite
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population < 4 {
            return Err(param_err("population must be at least 4"));
        }
        if self.generations == 0 || self.episodes == 0 {
            return Err(param_err("generations and episodes must be positive"));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(param_err(format!("invalid sigma {}", self.sigma)));
        }
        if self.elite_size() > self.population {
            return Err(param_err("elite larger than population"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub generation: usize,
    /// Best member fitness seen so far.
    pub best: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct EsResult {
    pub center: Vec<f64>,
    pub best_genome: Vec<f64>,
    pub best_fitness: f64,
    pub curve: Vec<CurveRow>,
    /// Center genome scored on the held-out episodes.
    pub final_fitness: f64,
}

pub fn es_train(cfg: &EsConfig) -> Result<EsResult> {
    cfg.validate()?;
    let policy = PiPolicy::cartpole(cfg.encoder);
    let train_eps: Vec<u64> = (0..cfg.episodes as u64)
        .map(|e| derive(&[cfg.seed, TAG_TRAIN_EPISODE, e]))
        .collect();
    let mut center = gaussian_genome(derive(&[cfg.seed, TAG_INIT]), cfg.init_scale);
    let mut best_genome = center.clone();
    let mut best_fitness = f64::NEG_INFINITY;
    let mut curve = Vec::with_capacity(cfg.generations);
    let mu = cfg.elite_size();

    for generation in 0..cfg.generations {
        let mut members = Vec::with_capacity(cfg.population);
        for m in 0..cfg.population {
            let eps = gaussian_genome(derive(&[cfg.seed, TAG_NOISE, generation as u64, m as u64]), 1.0);
            let g: Vec<f64> = center.iter().zip(&eps).map(|(c, e)| c + cfg.sigma * e).collect();
            let f = policy.mean_fitness(&g, &train_eps)?;
            members.push((f, g));
        }
        // stable sort keeps member order among ties
        members.sort_by(|a, b| b.0.total_cmp(&a.0));
        if members[0].0 > best_fitness {
            best_fitness = members[0].0;
            best_genome = members[0].1.clone();
        }
        let n = members.len() as f64;
        let mean = members.iter().map(|m| m.0).sum::<f64>() / n;
        let var = members.iter().map(|m| (m.0 - mean).powi(2)).sum::<f64>() / n;
        curve.push(CurveRow {
            generation,
            best: best_fitness,
            mean,
            std: var.sqrt(),
        });
        center = (0..GENOME_LEN)
            .map(|j| members[..mu].iter().map(|m| m.1[j]).sum::<f64>() / mu as f64)
            .collect();
    }
    let final_fitness = policy.mean_fitness(&center, &test_episode_seeds(cfg.eval_episodes))?;
    Ok(EsResult {
        center,
        best_genome,
        best_fitness,
        curve,
        final_fitness,
    })
}

pub fn write_curve<W: Write>(curve: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(c: &[f64]) -> SensoryObs {
        SensoryObs {
            components: c.to_vec(),
            prev_action: 0.3,
        }
    }

    #[test]
    fn zero_genome_gives_zero_message() {
        let g = vec![0.0; GENOME_LEN];
        for enc in [Encoder::Standard, Encoder::Co4, Encoder::TM2] {
            let m = PiPolicy::cartpole(enc).pi_encode(&obs(&[0.1, -2.0, 0.5, 3.0]), &g).unwrap();
            assert_eq!(m.shape(), &[LATENTS, FEATURES]);
            assert!(m.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_sensor_gets_full_weight() {
        let p = PiPolicy {
            sensors: 1,
            encoder: Encoder::Co4,
        };
        let g = gaussian_genome(5, 0.5);
        let (q, k, _) = p.project(&obs(&[0.7]), &g).unwrap();
        let w = crate::block::attention_weights(&q, &k).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sensor_count_checked() {
        let g = vec![0.0; GENOME_LEN];
        let p = PiPolicy::cartpole(Encoder::Co4);
        assert!(p.pi_encode(&obs(&[1.0, 2.0]), &g).is_err());
        assert!(p.pi_encode(&obs(&[1.0; 4]), &g[1..]).is_err());
    }

    #[test]
    fn rollout_deterministic_and_capped() {
        let p = PiPolicy::cartpole(Encoder::Co4);
        let g = gaussian_genome(9, 0.5);
        let a = p.rollout(&g, 4).unwrap();
        assert_eq!(a, p.rollout(&g, 4).unwrap());
        assert!(a <= cartpole::MAX_STEPS);
    }

    #[test]
    fn zero_sigma_curve_is_flat() {
        let cfg = EsConfig {
            generations: 3,
            population: 4,
            sigma: 0.0,
            episodes: 1,
            eval_episodes: 1,
            ..EsConfig::default()
        };
        let r = es_train(&cfg).unwrap();
        assert!(r.curve.windows(2).all(|w| w[0].mean == w[1].mean && w[0].best == w[1].best));
        assert!(r.curve.iter().all(|c| c.std == 0.0));
    }

    #[test]
    fn same_seed_same_curve() {
        let cfg = EsConfig {
            generations: 2,
            population: 4,
            episodes: 1,
            eval_episodes: 2,
            seed: 11,
            ..EsConfig::default()
        };
        let a = es_train(&cfg).unwrap();
        let b = es_train(&cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.final_fitness, b.final_fitness);
        assert!(a.curve.windows(2).all(|w| w[1].best >= w[0].best));
    }

    #[test]
    fn invalid_config() {
        let cfg = EsConfig {
            population: 3,
            ..EsConfig::default()
        };
        assert!(es_train(&cfg).is_err());
        assert!("tm9".parse::<Encoder>().is_err());
    }
}
