//! Synthetic attributed graphs with ground-truth interventional twins.
//!
//! Every node draws `S ~ Bernoulli(p)` and a latent `z ~ N(0, I)`. Observed
//! features are a fixed random subset of latent coordinates shifted by `S·v`,
//! with `S` appended as an explicit column. A pair is linked with probability
//! `q·σ(cos(zₙ, zₘ) + a·1(Sₙ = Sₘ))`, where `q` rescales the whole edge model
//! to a target mean degree.
//!
//! The two interventional graphs (`S ← 0` and `S ← 1` for every node) reuse
//! the latent draws, the mask, `q`, and the per-pair uniforms, so they differ
//! from the factual graph only through the terms that depend on `S`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{cosine, sigmoid, Tensor};
use crate::graphdata::{Adjacency, Graph, GraphError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// How a direction vector (`v` or `w`) is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSpec {
    /// Isotropic random direction with the given norm, drawn per seed.
    RandomUnit { scale: f64 },
    Zero,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_nodes: usize,
    pub latent_dim: usize,
    pub observed_dim: usize,
    pub p_sensitive: f64,
    /// Additive logit bonus for same-group pairs.
    pub homophily: f64,
    pub target_mean_degree: f64,
    /// Sensitive shift in observed-feature space.
    pub v: VectorSpec,
    /// Label direction in latent space.
    pub w: VectorSpec,
    /// Reuse the factual edges for the interventional graphs instead of
    /// regenerating them with common random numbers.
    pub freeze_cf_edges: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_nodes: 2000,
            latent_dim: 50,
            observed_dim: 50,
            p_sensitive: 0.4,
            homophily: 0.01,
            target_mean_degree: 5.09,
            v: VectorSpec::RandomUnit { scale: 0.5 },
            w: VectorSpec::RandomUnit { scale: 1.0 },
            freeze_cf_edges: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(self.p_sensitive > 0.0 && self.p_sensitive < 1.0) {
            return bad(format!("p_sensitive {} must lie in (0, 1)", self.p_sensitive));
        }
        if self.observed_dim > self.latent_dim {
            return bad(format!(
                "observed_dim {} exceeds latent_dim {}",
                self.observed_dim, self.latent_dim
            ));
        }
        if !(self.target_mean_degree > 0.0) {
            return bad(format!("target_mean_degree {} must be positive", self.target_mean_degree));
        }
        if self.n_nodes < 2 {
            return bad("need at least two nodes".into());
        }
        Ok(())
    }
}

/// The factual graph, its two population-wide interventions, and the draws
/// that generated them.
#[derive(Clone, Debug)]
pub struct SynthBundle {
    pub factual: Graph,
    pub cf_all0: Graph,
    pub cf_all1: Graph,
    pub latent: Tensor,
    pub mask: Vec<usize>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    /// Edge-probability scale chosen by density calibration.
    pub q: f64,
    /// Median-quantized `wᵀz + Σ S/(2|nei|)` task labels per graph
    /// (factual, S←0, S←1). These are not anomaly labels.
    pub task_labels: [Vec<u8>; 3],
}

/// JSON-serializable record of a bundle's generating draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub seed: u64,
    pub q: f64,
    pub mask: Vec<usize>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub freeze_cf_edges: bool,
    pub task_labels_factual: Vec<u8>,
    pub task_labels_cf_all0: Vec<u8>,
    pub task_labels_cf_all1: Vec<u8>,
}

impl SynthBundle {
    pub fn meta(&self, cfg: &SynthConfig) -> BundleMeta {
        BundleMeta {
            seed: cfg.seed,
            q: self.q,
            mask: self.mask.clone(),
            v: self.v.clone(),
            w: self.w.clone(),
            freeze_cf_edges: cfg.freeze_cf_edges,
            task_labels_factual: self.task_labels[0].clone(),
            task_labels_cf_all0: self.task_labels[1].clone(),
            task_labels_cf_all1: self.task_labels[2].clone(),
        }
    }
}

/// Uniform random `observed_dim`-subset of `0..latent_dim`, sorted.
pub fn sample_mask<R: Rng + ?Sized>(latent_dim: usize, observed_dim: usize, rng: &mut R) -> Vec<usize> {
    let mut mask = index::sample(rng, latent_dim, observed_dim).into_vec();
    mask.sort_unstable();
    mask
}

fn resolve_vector<R: Rng + ?Sized>(spec: &VectorSpec, dim: usize, rng: &mut R, what: &str) -> Result<Vec<f64>, SynthError> {
    match spec {
        VectorSpec::Zero => Ok(vec![0.0; dim]),
        VectorSpec::Fixed(v) if v.len() == dim => Ok(v.clone()),
        VectorSpec::Fixed(v) => Err(SynthError::Config(format!("{what} has length {}, expected {dim}", v.len()))),
        VectorSpec::RandomUnit { scale } => {
            let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            Ok(raw.into_iter().map(|x| scale * x / norm).collect())
        }
    }
}

/// Index of pair `(i, j)`, `i < j`, in row-major upper-triangle order.
fn pair_index(n: usize, i: usize, j: usize) -> usize {
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

struct Draws {
    latent: Tensor,
    mask: Vec<usize>,
    v: Vec<f64>,
    w: Vec<f64>,
    pair_cos: Vec<f64>,
    uniforms: Vec<f64>,
}

fn same_group_bonus(s: &[u8], i: usize, j: usize, a: f64) -> f64 {
    if s[i] == s[j] {
        a
    } else {
        0.0
    }
}

fn build_edges(n: usize, s: &[u8], draws: &Draws, a: f64, q: f64) -> Adjacency {
    let mut adj = Adjacency::empty(n);
    for i in 0..n {
        for j in i + 1..n {
            let k = pair_index(n, i, j);
            let p = q * sigmoid(draws.pair_cos[k] + same_group_bonus(s, i, j, a));
            if draws.uniforms[k] < p {
                adj.add_edge(i, j);
            }
        }
    }
    adj
}

fn build_features(s: &[u8], draws: &Draws) -> Tensor {
    let n = s.len();
    let d = draws.mask.len();
    let mut x = Tensor::zeros(&[n, d + 1]);
    for i in 0..n {
        let z = draws.latent.row(i);
        let si = f64::from(s[i]);
        let row = x.row_mut(i);
        for (k, &m) in draws.mask.iter().enumerate() {
            row[k] = z[m] + si * draws.v[k];
        }
        row[d] = si;
    }
    x
}

/// Binary quantization of `wᵀzₙ + Σ_{m∈nei(n)} Sₘ / (2|nei(n)|)` at the median.
fn task_labels(s: &[u8], adj: &Adjacency, draws: &Draws) -> Vec<u8> {
    let n = s.len();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let lin: f64 = draws.latent.row(i).iter().zip(&draws.w).map(|(z, w)| z * w).sum();
            let nei = adj.neighbors(i);
            let social = if nei.is_empty() {
                0.0
            } else {
                nei.iter().map(|&m| f64::from(s[m])).sum::<f64>() / (2.0 * nei.len() as f64)
            };
            lin + social
        })
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n.is_multiple_of(2) {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    } else {
        sorted[n / 2]
    };
    scores.iter().map(|&x| u8::from(x > median)).collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthBundle, SynthError> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let coin = Bernoulli::new(cfg.p_sensitive).map_err(|e| SynthError::Config(e.to_string()))?;
    let s: Vec<u8> = (0..n).map(|_| u8::from(coin.sample(&mut rng))).collect();
    let latent_vals: Vec<f64> = (0..n * cfg.latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let latent = Tensor::matrix(n, cfg.latent_dim, latent_vals).expect("sized");
    let mask = sample_mask(cfg.latent_dim, cfg.observed_dim, &mut rng);
    let v = resolve_vector(&cfg.v, cfg.observed_dim, &mut rng, "v")?;
    let w = resolve_vector(&cfg.w, cfg.latent_dim, &mut rng, "w")?;

    let n_pairs = n * (n - 1) / 2;
    let mut pair_cos = Vec::with_capacity(n_pairs);
    for i in 0..n {
        for j in i + 1..n {
            pair_cos.push(cosine(latent.row(i), latent.row(j)));
        }
    }
    let uniforms: Vec<f64> = (0..n_pairs).map(|_| rng.random::<f64>()).collect();
    let draws = Draws {
        latent,
        mask,
        v,
        w,
        pair_cos,
        uniforms,
    };

    let a = cfg.homophily;
    let mut mass = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            mass += sigmoid(draws.pair_cos[pair_index(n, i, j)] + same_group_bonus(&s, i, j, a));
        }
    }
    let q = cfg.target_mean_degree * n as f64 / (2.0 * mass);
    if q > 1.0 {
        return Err(SynthError::Config(format!(
            "mean degree {} unreachable: calibration scale {q} exceeds 1",
            cfg.target_mean_degree
        )));
    }

    let factual_adj = build_edges(n, &s, &draws, a, q);
    let make = |s: &[u8], adj: Adjacency| -> Result<(Graph, Vec<u8>), SynthError> {
        let labels = task_labels(s, &adj, &draws);
        let g = Graph::new(build_features(s, &draws), adj, s.to_vec(), None, Some(draws.mask.len()))?;
        Ok((g, labels))
    };
    let cf_adj = |s: &[u8]| {
        if cfg.freeze_cf_edges {
            factual_adj.clone()
        } else {
            build_edges(n, s, &draws, a, q)
        }
    };
    let s0 = vec![0u8; n];
    let s1 = vec![1u8; n];
    let (cf_all0, t0) = make(&s0, cf_adj(&s0))?;
    let (cf_all1, t1) = make(&s1, cf_adj(&s1))?;
    let (factual, tf) = make(&s, factual_adj.clone())?;

    Ok(SynthBundle {
        factual,
        cf_all0,
        cf_all1,
        latent: draws.latent,
        mask: draws.mask,
        v: draws.v,
        w: draws.w,
        q,
        task_labels: [tf, t0, t1],
    })
}

/// Edge counts and pair counts split by whether endpoints share `S`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroupEdgeStats {
    pub within_edges: usize,
    pub within_pairs: usize,
    pub cross_edges: usize,
    pub cross_pairs: usize,
}

impl GroupEdgeStats {
    pub fn of(g: &Graph) -> Self {
        let s = g.sensitive();
        let ones = s.iter().filter(|&&x| x == 1).count();
        let zeros = s.len() - ones;
        let mut st = Self {
            within_pairs: ones * ones.saturating_sub(1) / 2 + zeros * zeros.saturating_sub(1) / 2,
            cross_pairs: ones * zeros,
            ..Self::default()
        };
        for (u, v) in g.adjacency().edges() {
            if s[u] == s[v] {
                st.within_edges += 1;
            } else {
                st.cross_edges += 1;
            }
        }
        st
    }

    pub fn add(&mut self, other: &Self) {
        self.within_edges += other.within_edges;
        self.within_pairs += other.within_pairs;
        self.cross_edges += other.cross_edges;
        self.cross_pairs += other.cross_pairs;
    }

    pub fn within_rate(&self) -> f64 {
        self.within_edges as f64 / self.within_pairs as f64
    }

    pub fn cross_rate(&self) -> f64 {
        self.cross_edges as f64 / self.cross_pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_nodes: 300,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn pair_index_enumerates_upper_triangle() {
        let n = 7;
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                assert_eq!(pair_index(n, i, j), k);
                k += 1;
            }
        }
    }

    #[test]
    fn mask_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_mask(8, 8, &mut rng), (0..8).collect::<Vec<_>>());
        let a = sample_mask(50, 25, &mut ChaCha8Rng::seed_from_u64(42));
        let b = sample_mask(50, 25, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&i| i < 50));
    }

    #[test]
    fn zero_shift_leaves_only_the_sensitive_column_different() {
        let cfg = SynthConfig {
            v: VectorSpec::Zero,
            ..small(3)
        };
        let b = generate(&cfg).unwrap();
        let d = b.mask.len();
        for g in [&b.cf_all0, &b.cf_all1] {
            for i in 0..cfg.n_nodes {
                assert_eq!(&g.features().row(i)[..d], &b.factual.features().row(i)[..d]);
            }
        }
        assert!(b.cf_all0.sensitive().iter().all(|&s| s == 0));
        assert!(b.cf_all1.features().column(d).iter().all(|&s| s == 1.0));
    }

    #[test]
    fn no_sensitive_dependence_makes_graphs_identical() {
        let cfg = SynthConfig {
            v: VectorSpec::Zero,
            homophily: 0.0,
            ..small(4)
        };
        let b = generate(&cfg).unwrap();
        assert_eq!(b.factual.adjacency(), b.cf_all0.adjacency());
        assert_eq!(b.factual.adjacency(), b.cf_all1.adjacency());
    }

    #[test]
    fn interventional_edges_share_draws() {
        // with every node in one group the homophily bonus is uniform, so both
        // interventions see identical per-pair probabilities
        let b = generate(&small(5)).unwrap();
        assert_eq!(b.cf_all0.adjacency(), b.cf_all1.adjacency());
        assert_eq!(b.cf_all0.sensitive_col(), Some(b.mask.len()));
    }

    #[test]
    fn frozen_edges_reuse_factual_structure() {
        let cfg = SynthConfig {
            freeze_cf_edges: true,
            ..small(6)
        };
        let b = generate(&cfg).unwrap();
        assert_eq!(b.factual.adjacency(), b.cf_all1.adjacency());
    }

    #[test]
    fn task_labels_are_median_balanced() {
        let b = generate(&small(8)).unwrap();
        for labels in &b.task_labels {
            let pos = labels.iter().filter(|&&y| y == 1).count() as i64;
            assert!((pos - 150).abs() <= 1, "{pos}");
        }
        assert!(b.factual.labels().is_none());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(9)).unwrap();
        let b = generate(&small(9)).unwrap();
        assert_eq!(a.factual, b.factual);
        assert_eq!(a.q, b.q);
        let c = generate(&small(10)).unwrap();
        assert_ne!(a.factual, c.factual);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SynthConfig { p_sensitive: 1.0, ..small(0) },
            SynthConfig { observed_dim: 51, ..small(0) },
            SynthConfig { target_mean_degree: 0.0, ..small(0) },
            SynthConfig { target_mean_degree: 1000.0, ..small(0) },
            SynthConfig { v: VectorSpec::Fixed(vec![1.0]), ..small(0) },
        ] {
            assert!(matches!(generate(&cfg), Err(SynthError::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn random_unit_vectors_have_requested_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = resolve_vector(&VectorSpec::RandomUnit { scale: 0.5 }, 25, &mut rng, "v").unwrap();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 0.5).abs() < 1e-12);
    }
}
