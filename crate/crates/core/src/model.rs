//! Split-latent graph autoencoder with an adversarial head.
//!
//! A two-layer graph-convolutional encoder `Z = Â relu(Â X W₁) W₂` feeds
//! four heads: a content decoder on `Z_c`, an environment decoder on `Z_e`,
//! the inner-product structure decoder on `Z`, and a discriminator on `Z_c`.
//!
//! Checkpoint layout: one JSON header line ([`CheckpointHeader`]) followed by
//! every parameter as little-endian `f64`, groups in the order encoder,
//! content, environment, discriminator, tensors within a group in
//! [`ModelState`] field order (weight before bias, layer 1 before layer 2),
//! each tensor row-major.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{sigmoid, AdamState, CsrMatrix, DiffError, Tape, Tensor, Var};
use crate::graphdata::{normalize_adjacency, Graph};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] DiffError),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
}

/// How the two decoders share the feature columns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderLayout {
    /// Content decoder emits the non-sensitive columns, environment decoder
    /// the sensitive column through a sigmoid.
    #[default]
    Partition,
    /// Both decoders emit all columns and the outputs are summed.
    Summed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub sensitive_col: Option<usize>,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub split_ratio: f64,
    /// Attribute weight in the reconstruction loss and the score.
    pub alpha_rec: f64,
    pub disc_hidden: usize,
    pub layout: DecoderLayout,
    /// Whether the sensitive column counts toward the attribute score.
    pub score_include_sensitive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            sensitive_col: None,
            hidden_dim: 32,
            latent_dim: 16,
            split_ratio: 0.5,
            alpha_rec: 0.5,
            disc_hidden: 16,
            layout: DecoderLayout::Partition,
            score_include_sensitive: true,
        }
    }
}

impl ModelConfig {
    /// Copies the input width and sensitive column of `g` into `self`.
    pub fn for_graph(mut self, g: &Graph) -> Self {
        self.input_dim = g.n_features();
        self.sensitive_col = g.sensitive_col();
        self
    }

    pub fn content_dim(&self) -> usize {
        (self.split_ratio * self.latent_dim as f64).round() as usize
    }

    pub fn env_dim(&self) -> usize {
        self.latent_dim.saturating_sub(self.content_dim())
    }

    /// Output widths of the content and environment decoders.
    pub fn decoder_widths(&self) -> (usize, usize) {
        match (self.layout, self.sensitive_col) {
            (DecoderLayout::Summed, _) => (self.input_dim, self.input_dim),
            (DecoderLayout::Partition, Some(_)) => (self.input_dim - 1, 1),
            (DecoderLayout::Partition, None) => (self.input_dim, 1),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.disc_hidden == 0 {
            return fail("input_dim, hidden_dim and disc_hidden must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail(format!("split_ratio {} outside (0, 1)", self.split_ratio));
        }
        if self.content_dim() < 1 || self.env_dim() < 1 {
            return fail(format!(
                "latent_dim {} with split_ratio {} leaves an empty block",
                self.latent_dim, self.split_ratio
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha_rec) {
            return fail(format!("alpha_rec {} outside [0, 1]", self.alpha_rec));
        }
        if let Some(c) = self.sensitive_col {
            if c >= self.input_dim {
                return fail(format!("sensitive_col {c} out of range for {} columns", self.input_dim));
            }
            if self.layout == DecoderLayout::Partition && self.input_dim < 2 {
                return fail("partition layout needs a non-sensitive column".into());
            }
        }
        Ok(())
    }
}

/// Parameter groups, in checkpoint order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Encoder,
    Content,
    Environment,
    Discriminator,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Encoder, Group::Content, Group::Environment, Group::Discriminator];
}

/// Weights `[W₁, b₁, W₂, b₂]` of a one-hidden-layer perceptron.
fn mlp(rng: &mut ChaCha8Rng, inp: usize, hidden: usize, out: usize) -> Vec<Tensor> {
    vec![
        glorot(rng, inp, hidden),
        Tensor::vector(vec![0.0; hidden]),
        glorot(rng, hidden, out),
        Tensor::vector(vec![0.0; out]),
    ]
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::matrix(fan_in, fan_out, values).expect("sized")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    /// `[W₁ (D×h), W₂ (h×d)]`.
    pub encoder: Vec<Tensor>,
    pub content: Vec<Tensor>,
    pub environment: Vec<Tensor>,
    pub discriminator: Vec<Tensor>,
    pub adam: [AdamState; 4],
}

/// Latent blocks `Z_c` and `Z_e`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSplit {
    pub content: Tensor,
    pub environment: Tensor,
}

impl LatentSplit {
    pub fn joined(&self) -> Tensor {
        let (n, dc, de) = (self.content.rows(), self.content.cols(), self.environment.cols());
        let mut values = Vec::with_capacity(n * (dc + de));
        for r in 0..n {
            values.extend_from_slice(self.content.row(r));
            values.extend_from_slice(self.environment.row(r));
        }
        Tensor::matrix(n, dc + de, values).expect("sized")
    }
}

/// Graph-side constants shared by every forward pass on one graph.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub features: Tensor,
    pub norm_adj: Arc<CsrMatrix>,
}

impl GraphInput {
    pub fn new(g: &Graph) -> Self {
        Self {
            features: g.features().clone(),
            norm_adj: Arc::new(normalize_adjacency(g.adjacency())),
        }
    }

    /// Same graph with different features (the adjacency is shared).
    pub fn with_features(&self, features: Tensor) -> Self {
        Self {
            features,
            norm_adj: Arc::clone(&self.norm_adj),
        }
    }
}

/// Tape handles for one parameter group.
pub type Bound = Vec<Var>;

/// Tape handles for the whole model.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub encoder: Bound,
    pub content: Bound,
    pub environment: Bound,
    pub discriminator: Bound,
}

impl BoundModel {
    pub fn group(&self, g: Group) -> &Bound {
        match g {
            Group::Encoder => &self.encoder,
            Group::Content => &self.content,
            Group::Environment => &self.environment,
            Group::Discriminator => &self.discriminator,
        }
    }
}

/// Forward handles of a decoded graph.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub z: Var,
    pub z_c: Var,
    pub z_e: Var,
    /// Full reconstruction in the original column order.
    pub x_hat: Var,
    /// Environment decoder output.
    pub x_hat_e: Var,
}

impl ModelState {
    /// Seeded Glorot initialization, groups drawn in checkpoint order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (dc, de) = (config.content_dim(), config.env_dim());
        let (out_c, out_e) = config.decoder_widths();
        let h = config.hidden_dim;
        let encoder = vec![glorot(&mut rng, config.input_dim, h), glorot(&mut rng, h, config.latent_dim)];
        let content = mlp(&mut rng, dc, h, out_c);
        let environment = mlp(&mut rng, de, h, out_e);
        let discriminator = mlp(&mut rng, dc, config.disc_hidden, 1);
        let adam = [
            AdamState::for_params(&encoder),
            AdamState::for_params(&content),
            AdamState::for_params(&environment),
            AdamState::for_params(&discriminator),
        ];
        Ok(Self {
            config,
            encoder,
            content,
            environment,
            discriminator,
            adam,
        })
    }

    pub fn group(&self, g: Group) -> &[Tensor] {
        match g {
            Group::Encoder => &self.encoder,
            Group::Content => &self.content,
            Group::Environment => &self.environment,
            Group::Discriminator => &self.discriminator,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut Vec<Tensor> {
        match g {
            Group::Encoder => &mut self.encoder,
            Group::Content => &mut self.content,
            Group::Environment => &mut self.environment,
            Group::Discriminator => &mut self.discriminator,
        }
    }

    pub fn n_params(&self) -> usize {
        Group::ALL.iter().flat_map(|&g| self.group(g)).map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        Group::ALL.iter().flat_map(|&g| self.group(g)).all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`; groups in `trainable` become
    /// gradient leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> BoundModel {
        let mut put = |g: Group| -> Bound {
            let train = trainable.contains(&g);
            self.group(g)
                .iter()
                .map(|t| if train { tape.param(t.clone()) } else { tape.constant(t.clone()) })
                .collect()
        };
        BoundModel {
            encoder: put(Group::Encoder),
            content: put(Group::Content),
            environment: put(Group::Environment),
            discriminator: put(Group::Discriminator),
        }
    }

    fn check_input(&self, input: &GraphInput) -> Result<(), ModelError> {
        let x = &input.features;
        if x.cols() != self.config.input_dim || x.rows() != input.norm_adj.rows() {
            return Err(DiffError::Shape {
                op: "encode",
                left: x.shape().to_vec(),
                right: vec![input.norm_adj.rows(), self.config.input_dim],
            }
            .into());
        }
        Ok(())
    }

    /// `Z = Â relu(Â X W₁) W₂` on the tape.
    pub fn encode_on(&self, tape: &mut Tape, m: &BoundModel, input: &GraphInput) -> Result<Var, ModelError> {
        self.check_input(input)?;
        let x = tape.constant(input.features.clone());
        let ax = tape.spmm(&input.norm_adj, x)?;
        let h = tape.matmul(ax, m.encoder[0])?;
        let h = tape.relu(h);
        let ah = tape.spmm(&input.norm_adj, h)?;
        Ok(tape.matmul(ah, m.encoder[1])?)
    }

    pub fn split_on(&self, tape: &mut Tape, z: Var) -> Result<(Var, Var), ModelError> {
        let dc = self.config.content_dim();
        let z_c = tape.slice_cols(z, 0, dc)?;
        let z_e = tape.slice_cols(z, dc, self.config.latent_dim)?;
        Ok((z_c, z_e))
    }

    fn mlp_on(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var, DiffError> {
        let h = tape.matmul(x, p[0])?;
        let h = tape.add_row(h, p[1])?;
        let h = tape.relu(h);
        let o = tape.matmul(h, p[2])?;
        tape.add_row(o, p[3])
    }

    /// Environment decoder output.
    pub fn decode_env_on(&self, tape: &mut Tape, m: &BoundModel, z_e: Var) -> Result<Var, ModelError> {
        let o = Self::mlp_on(tape, &m.environment, z_e)?;
        Ok(match self.config.layout {
            DecoderLayout::Partition => tape.sigmoid(o),
            DecoderLayout::Summed => o,
        })
    }

    /// Returns `(X̂, X̂_e)` with `X̂` in the original column order.
    pub fn decode_on(&self, tape: &mut Tape, m: &BoundModel, z_c: Var, z_e: Var) -> Result<(Var, Var), ModelError> {
        let x_c = Self::mlp_on(tape, &m.content, z_c)?;
        let x_e = self.decode_env_on(tape, m, z_e)?;
        let x_hat = match (self.config.layout, self.config.sensitive_col) {
            (DecoderLayout::Summed, _) => tape.add(x_c, x_e)?,
            (DecoderLayout::Partition, None) => x_c,
            (DecoderLayout::Partition, Some(col)) => {
                let d = self.config.input_dim;
                let mut parts = Vec::with_capacity(3);
                if col > 0 {
                    parts.push(tape.slice_cols(x_c, 0, col)?);
                }
                parts.push(x_e);
                if col + 1 < d {
                    parts.push(tape.slice_cols(x_c, col, d - 1)?);
                }
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat_cols(&parts)?
                }
            }
        };
        Ok((x_hat, x_e))
    }

    /// `sigmoid(Z Zᵀ)`.
    pub fn decode_structure_on(&self, tape: &mut Tape, z: Var) -> Result<Var, ModelError> {
        let logits = tape.matmul_nt(z, z)?;
        Ok(tape.sigmoid(logits))
    }

    /// Discriminator probabilities as an `n×1` matrix.
    pub fn discriminate_on(&self, tape: &mut Tape, m: &BoundModel, z_c: Var) -> Result<Var, ModelError> {
        let o = Self::mlp_on(tape, &m.discriminator, z_c)?;
        Ok(tape.sigmoid(o))
    }

    /// Encoder, both decoders.
    pub fn forward_on(&self, tape: &mut Tape, m: &BoundModel, input: &GraphInput) -> Result<Decoded, ModelError> {
        let z = self.encode_on(tape, m, input)?;
        let (z_c, z_e) = self.split_on(tape, z)?;
        let (x_hat, x_hat_e) = self.decode_on(tape, m, z_c, z_e)?;
        Ok(Decoded {
            z,
            z_c,
            z_e,
            x_hat,
            x_hat_e,
        })
    }

    pub fn encode(&self, input: &GraphInput) -> Result<LatentSplit, ModelError> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, &[]);
        let z = self.encode_on(&mut tape, &m, input)?;
        let (z_c, z_e) = self.split_on(&mut tape, z)?;
        Ok(LatentSplit {
            content: tape.value(z_c).clone(),
            environment: tape.value(z_e).clone(),
        })
    }

    /// `(X̂, X̂_e)` for a given latent.
    pub fn decode(&self, split: &LatentSplit) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, &[]);
        let z_c = tape.constant(split.content.clone());
        let z_e = tape.constant(split.environment.clone());
        let (x, xe) = self.decode_on(&mut tape, &m, z_c, z_e)?;
        Ok((tape.value(x).clone(), tape.value(xe).clone()))
    }

    pub fn decode_structure(&self, split: &LatentSplit) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let z = tape.constant(split.joined());
        let a = self.decode_structure_on(&mut tape, z)?;
        Ok(tape.value(a).clone())
    }

    /// Discriminator probabilities as a vector.
    pub fn discriminate(&self, z_c: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, &[]);
        let z = tape.constant(z_c.clone());
        let p = self.discriminate_on(&mut tape, &m, z)?;
        Ok(tape.value(p).values().to_vec())
    }

    /// Anomaly scores of the current model on `input`, whose adjacency
    /// must be `adj` (used for the structure error).
    pub fn score(&self, input: &GraphInput, g: &Graph) -> Result<Vec<f64>, ModelError> {
        let split = self.encode(input)?;
        let (x_hat, _) = self.decode(&split)?;
        let z = split.joined();
        let include = if self.config.score_include_sensitive {
            None
        } else {
            self.config.sensitive_col
        };
        Ok(anomaly_score_latent(&input.features, g, &x_hat, &z, self.config.alpha_rec, include))
    }

    /// Writes the checkpoint described in the module docs.
    pub fn save(&self, path: &Path, seed: u64, epoch: usize) -> Result<(), ModelError> {
        let err = |msg: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg,
        };
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            seed,
            epoch,
            n_params: self.n_params(),
        };
        let mut out = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
        out.push(b'\n');
        for g in Group::ALL {
            for t in self.group(g) {
                for v in t.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut f = fs::File::create(path).map_err(|e| err(e.to_string()))?;
        f.write_all(&out).map_err(|e| err(e.to_string()))
    }

    /// Reads a checkpoint; Adam moments start fresh.
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader), ModelError> {
        let err = |msg: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            msg,
        };
        let f = fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let mut reader = BufReader::new(f);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| err(e.to_string()))?;
        let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| err(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(err(format!("unknown format {:?}", header.format)));
        }
        let mut state = Self::new(header.config.clone(), 0)?;
        if state.n_params() != header.n_params {
            return Err(err(format!(
                "header declares {} parameters, config implies {}",
                header.n_params,
                state.n_params()
            )));
        }
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob).map_err(|e| err(e.to_string()))?;
        if blob.len() != 8 * header.n_params {
            return Err(err(format!("expected {} bytes of parameters, found {}", 8 * header.n_params, blob.len())));
        }
        let mut chunks = blob.chunks_exact(8);
        for g in Group::ALL {
            for t in state.group_mut(g) {
                for v in t.values_mut() {
                    *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
                }
            }
        }
        Ok((state, header))
    }
}

pub const CHECKPOINT_FORMAT: &str = "decaf-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    pub n_params: usize,
}

/// `sᵢ = α‖xᵢ − x̂ᵢ‖ + (1 − α)‖aᵢ − âᵢ‖` with a dense `Â_hat`.
pub fn anomaly_score(x: &Tensor, a: &Tensor, x_hat: &Tensor, a_hat: &Tensor, alpha: f64) -> Vec<f64> {
    (0..x.rows())
        .map(|i| {
            let ex = dist(x.row(i), x_hat.row(i));
            let ea = dist(a.row(i), a_hat.row(i));
            alpha * ex + (1.0 - alpha) * ea
        })
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Same score with `Â_hat = sigmoid(ZZᵀ)` formed one row at a time.
/// `exclude_col` drops one feature column from the attribute error.
pub fn anomaly_score_latent(
    x: &Tensor,
    g: &Graph,
    x_hat: &Tensor,
    z: &Tensor,
    alpha: f64,
    exclude_col: Option<usize>,
) -> Vec<f64> {
    let n = x.rows();
    let adj = g.adjacency();
    let mut row = vec![0.0; n];
    (0..n)
        .map(|i| {
            let ex: f64 = x
                .row(i)
                .iter()
                .zip(x_hat.row(i))
                .enumerate()
                .filter(|(j, _)| Some(*j) != exclude_col)
                .map(|(_, (p, q))| (p - q) * (p - q))
                .sum();
            if alpha >= 1.0 {
                return ex.sqrt();
            }
            let zi = z.row(i);
            for (j, r) in row.iter_mut().enumerate() {
                let dot: f64 = zi.iter().zip(z.row(j)).map(|(a, b)| a * b).sum();
                *r = sigmoid(dot);
            }
            let mut ea: f64 = row.iter().map(|p| p * p).sum();
            for &j in adj.neighbors(i) {
                ea += (1.0 - row[j]) * (1.0 - row[j]) - row[j] * row[j];
            }
            alpha * ex.sqrt() + (1.0 - alpha) * ea.max(0.0).sqrt()
        })
        .collect()
}
