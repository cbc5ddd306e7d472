//! Loss terms and the alternating optimization loop.
//!
//! Each epoch first fits the discriminator to predict `S` from a detached
//! `Z_c`, then updates encoder and decoders on
//! `λ₁·L_rec + λ₂·L_dis − λ₃·L_adv + λ₄·L_cf` with the discriminator frozen.
//! Terms whose weight is zero are left off the tape entirely.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{adam_step, cosine, AdamConfig, CsrMatrix, DiffError, Tape, Tensor, Var};
use crate::graphdata::{flip_sensitive, Graph};
use crate::model::{Group, GraphInput, ModelConfig, ModelError, ModelState};
use crate::numfmt::fmt_g17;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {term} at epoch {epoch}")]
    NonFinite { epoch: usize, term: &'static str },
}

impl From<DiffError> for TrainError {
    fn from(e: DiffError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lr: f64,
    pub disc_lr: f64,
    pub epochs: usize,
    pub disc_steps: usize,
    pub seed: u64,
    pub contamination: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.5,
            lambda4: 0.5,
            lr: 5e-3,
            disc_lr: 5e-3,
            epochs: 100,
            disc_steps: 1,
            seed: 0,
            contamination: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }

    pub fn with_lambdas(mut self, l: [f64; 4]) -> Self {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4] = l;
        self
    }

    /// The same config with the fairness terms switched off.
    pub fn baseline(&self) -> Self {
        self.clone().with_lambdas([self.lambda1, 0.0, 0.0, 0.0])
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.lambdas().iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return fail(format!("lambdas must be finite and nonnegative, got {:?}", self.lambdas()));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.disc_lr >= 0.0) {
            return fail("learning rates must be nonnegative".into());
        }
        if !(self.contamination > 0.0 && self.contamination < 1.0) {
            return fail(format!("contamination {} outside (0, 1)", self.contamination));
        }
        if self.lambda2 > 0.0 && model.content_dim() != model.env_dim() {
            return fail(format!(
                "lambda2 > 0 needs d_c = d_e for the cosine loss, got {} and {}",
                model.content_dim(),
                model.env_dim()
            ));
        }
        Ok(())
    }
}

/// Loss values of one epoch, measured before that epoch's update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_dis: f64,
    pub l_adv: f64,
    pub l_cf: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainTrace {
    pub records: Vec<LossRecord>,
}

impl TrainTrace {
    pub const HEADER: &'static str = "epoch,l_rec,l_dis,l_adv,l_cf,l_total";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch,
                fmt_g17(r.l_rec),
                fmt_g17(r.l_dis),
                fmt_g17(r.l_adv),
                fmt_g17(r.l_cf),
                fmt_g17(r.l_total)
            )?;
        }
        Ok(())
    }
}

/// `α·mean((X − X̂)²) + (1 − α)·ea`, where `ea` is the structure error
/// `mean((A − Â_hat)²)` already on the tape. The structure part is skipped
/// when `α = 1` or `ea` is absent.
pub fn l_rec_on(tape: &mut Tape, x_hat: Var, x: &Arc<Vec<f64>>, ea: Option<Var>, alpha: f64) -> Result<Var, DiffError> {
    let ex = tape.mse_target(x_hat, x)?;
    let ex = tape.scale(ex, alpha);
    match ea {
        Some(ea) if alpha < 1.0 => {
            let ea = tape.scale(ea, 1.0 - alpha);
            tape.add(ex, ea)
        }
        _ => Ok(ex),
    }
}

/// Structure error `mean((A − sigmoid(ZZᵀ))²)` without the dense product.
pub fn structure_error_on(tape: &mut Tape, z: Var, adj: &Arc<CsrMatrix>) -> Result<Var, DiffError> {
    tape.gram_sigmoid_mse(z, adj)
}

/// Mean absolute row cosine between the two latent blocks.
pub fn l_dis_on(tape: &mut Tape, z_c: Var, z_e: Var) -> Result<Var, DiffError> {
    let c = tape.row_cosine(z_c, z_e)?;
    let c = tape.abs(c);
    Ok(tape.mean(c))
}

pub fn l_adv_on(tape: &mut Tape, p: Var, s: &Arc<Vec<f64>>) -> Result<Var, DiffError> {
    tape.bce(p, s)
}

/// `(1/N) Σₙ ‖x̂ₑⁿ − x̂ₑ^cf,ⁿ‖²`.
pub fn l_cf_on(tape: &mut Tape, x_e: Var, x_e_cf: Var) -> Result<Var, DiffError> {
    let n = tape.value(x_e).rows() as f64;
    let d = tape.sub(x_e, x_e_cf)?;
    Ok(tape.sum_square(d, n))
}

fn eval(build: impl FnOnce(&mut Tape) -> Result<Var, DiffError>) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).item())
}

pub fn l_rec(x: &Tensor, x_hat: &Tensor, a: &Tensor, a_hat: &Tensor, alpha: f64) -> Result<f64, DiffError> {
    eval(|t| {
        let xh = t.constant(x_hat.clone());
        let ah = t.constant(a_hat.clone());
        let ea = t.mse_target(ah, &Arc::new(a.values().to_vec()))?;
        l_rec_on(t, xh, &Arc::new(x.values().to_vec()), Some(ea), alpha)
    })
}

pub fn l_dis(z_c: &Tensor, z_e: &Tensor) -> Result<f64, DiffError> {
    eval(|t| {
        let (a, b) = (t.constant(z_c.clone()), t.constant(z_e.clone()));
        l_dis_on(t, a, b)
    })
}

pub fn l_adv(p: &[f64], s: &[u8]) -> Result<f64, DiffError> {
    eval(|t| {
        let p = t.constant(Tensor::vector(p.to_vec()));
        l_adv_on(t, p, &Arc::new(s.iter().map(|&v| f64::from(v)).collect()))
    })
}

pub fn l_cf(x_e: &Tensor, x_e_cf: &Tensor) -> Result<f64, DiffError> {
    eval(|t| {
        let (a, b) = (t.constant(x_e.clone()), t.constant(x_e_cf.clone()));
        l_cf_on(t, a, b)
    })
}

/// Constant inputs for training on one graph.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub graph: Graph,
    pub input: GraphInput,
    /// Same structure with every sensitive value flipped.
    pub cf_input: GraphInput,
    x: Arc<Vec<f64>>,
    adj: Arc<CsrMatrix>,
    s: Arc<Vec<f64>>,
}

impl TrainData {
    pub fn new(g: &Graph) -> Self {
        let input = GraphInput::new(g);
        let cf_input = input.with_features(flip_sensitive(g).features().clone());
        Self {
            graph: g.clone(),
            input,
            cf_input,
            x: Arc::new(g.features().values().to_vec()),
            adj: Arc::new(adjacency_csr(g)),
            s: Arc::new(g.sensitive().iter().map(|&v| f64::from(v)).collect()),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    /// Unnormalized 0/1 adjacency, the structure reconstruction target.
    pub fn adjacency(&self) -> &Arc<CsrMatrix> {
        &self.adj
    }
}

fn adjacency_csr(g: &Graph) -> CsrMatrix {
    let adj = g.adjacency();
    let rows = (0..g.n_nodes()).map(|u| adj.neighbors(u).iter().map(|&v| (v, 1.0)).collect()).collect();
    CsrMatrix::from_rows(g.n_nodes(), rows)
}

fn check(epoch: usize, term: &'static str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { epoch, term })
    }
}

fn grads_of(tape: &Tape, vars: &[Var], params: &[Tensor]) -> Vec<Vec<f64>> {
    vars.iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect()
}

fn update(state: &mut ModelState, tape: &Tape, vars: &[Var], group: Group, lr: f64) {
    let grads = grads_of(tape, vars, state.group(group));
    let idx = Group::ALL.iter().position(|&g| g == group).expect("known group");
    let adam = AdamConfig::with_lr(lr);
    let mut params = std::mem::take(state.group_mut(group));
    adam_step(&mut params, &grads, &mut state.adam[idx], &adam);
    *state.group_mut(group) = params;
}

fn diagnostic_dis(tape: &Tape, z_c: Var, z_e: Var) -> f64 {
    let (a, b) = (tape.value(z_c), tape.value(z_e));
    if a.cols() != b.cols() {
        return 0.0;
    }
    (0..a.rows()).map(|r| cosine(a.row(r), b.row(r)).abs()).sum::<f64>() / a.rows() as f64
}

/// Discriminator updates on a detached content latent. Returns the BCE
/// before the last step.
pub fn discriminator_phase(
    data: &TrainData,
    state: &mut ModelState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    let z_c = state.encode(&data.input)?.content;
    let mut loss = 0.0;
    for _ in 0..cfg.disc_steps {
        let mut tape = Tape::new();
        let m = state.bind(&mut tape, &[Group::Discriminator]);
        let z = tape.constant(z_c.clone());
        let p = state.discriminate_on(&mut tape, &m, z)?;
        let l = l_adv_on(&mut tape, p, &data.s)?;
        loss = check(epoch, "discriminator bce", tape.value(l).item())?;
        tape.backward(l)?;
        update(state, &tape, &m.discriminator, Group::Discriminator, cfg.disc_lr);
    }
    Ok(loss)
}

const GENERATOR: [Group; 3] = [Group::Encoder, Group::Content, Group::Environment];

/// One epoch: discriminator phase (if `λ₃ > 0`), then generator phase.
pub fn train_step(
    data: &TrainData,
    state: &mut ModelState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossRecord, TrainError> {
    if cfg.lambda3 > 0.0 {
        discriminator_phase(data, state, cfg, epoch)?;
    }

    let mut tape = Tape::new();
    let m = state.bind(&mut tape, &GENERATOR);
    let dec = state.forward_on(&mut tape, &m, &data.input)?;
    let alpha = state.config.alpha_rec;
    let ea = if alpha < 1.0 {
        Some(structure_error_on(&mut tape, dec.z, &data.adj)?)
    } else {
        None
    };
    let rec = l_rec_on(&mut tape, dec.x_hat, &data.x, ea, alpha)?;
    let rec_v = check(epoch, "l_rec", tape.value(rec).item())?;
    let mut total = tape.scale(rec, cfg.lambda1);

    let dis_v = if cfg.lambda2 > 0.0 {
        let dis = l_dis_on(&mut tape, dec.z_c, dec.z_e)?;
        let v = check(epoch, "l_dis", tape.value(dis).item())?;
        let term = tape.scale(dis, cfg.lambda2);
        total = tape.add(total, term)?;
        v
    } else {
        check(epoch, "l_dis", diagnostic_dis(&tape, dec.z_c, dec.z_e))?
    };

    let mut adv_v = 0.0;
    if cfg.lambda3 > 0.0 {
        let p = state.discriminate_on(&mut tape, &m, dec.z_c)?;
        let adv = l_adv_on(&mut tape, p, &data.s)?;
        adv_v = check(epoch, "l_adv", tape.value(adv).item())?;
        let term = tape.scale(adv, cfg.lambda3);
        total = tape.sub(total, term)?;
    }

    let mut cf_v = 0.0;
    if cfg.lambda4 > 0.0 {
        let z_cf = state.encode_on(&mut tape, &m, &data.cf_input)?;
        let (_, z_e_cf) = state.split_on(&mut tape, z_cf)?;
        let x_e_cf = state.decode_env_on(&mut tape, &m, z_e_cf)?;
        let cf = l_cf_on(&mut tape, dec.x_hat_e, x_e_cf)?;
        cf_v = check(epoch, "l_cf", tape.value(cf).item())?;
        let term = tape.scale(cf, cfg.lambda4);
        total = tape.add(total, term)?;
    }

    let total_v = check(epoch, "l_total", tape.value(total).item())?;
    tape.backward(total)?;
    for g in GENERATOR {
        update(state, &tape, m.group(g), g, cfg.lr);
    }
    if !state.is_finite() {
        return Err(TrainError::NonFinite { epoch, term: "parameters" });
    }
    Ok(LossRecord {
        epoch,
        l_rec: rec_v,
        l_dis: dis_v,
        l_adv: adv_v,
        l_cf: cf_v,
        l_total: total_v,
    })
}

/// Plain reconstruction training, kept separate from [`train_step`] so the
/// two can be compared.
pub fn baseline_step(
    data: &TrainData,
    state: &mut ModelState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossRecord, TrainError> {
    let mut tape = Tape::new();
    let m = state.bind(&mut tape, &GENERATOR);
    let z = state.encode_on(&mut tape, &m, &data.input)?;
    let (z_c, z_e) = state.split_on(&mut tape, z)?;
    let (x_hat, _) = state.decode_on(&mut tape, &m, z_c, z_e)?;
    let alpha = state.config.alpha_rec;
    let ea = if alpha < 1.0 {
        Some(structure_error_on(&mut tape, z, &data.adj)?)
    } else {
        None
    };
    let rec = l_rec_on(&mut tape, x_hat, &data.x, ea, alpha)?;
    let rec_v = check(epoch, "l_rec", tape.value(rec).item())?;
    let dis_v = check(epoch, "l_dis", diagnostic_dis(&tape, z_c, z_e))?;
    let total = tape.scale(rec, cfg.lambda1);
    let total_v = check(epoch, "l_total", tape.value(total).item())?;
    tape.backward(total)?;
    for g in GENERATOR {
        update(state, &tape, m.group(g), g, cfg.lr);
    }
    if !state.is_finite() {
        return Err(TrainError::NonFinite { epoch, term: "parameters" });
    }
    Ok(LossRecord {
        epoch,
        l_rec: rec_v,
        l_dis: dis_v,
        l_adv: 0.0,
        l_cf: 0.0,
        l_total: total_v,
    })
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: ModelState,
    pub trace: TrainTrace,
    /// Anomaly scores on the training graph after the last epoch.
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Path {
    Decaf,
    Baseline,
}

fn fit_impl(g: &Graph, model: &ModelConfig, cfg: &TrainConfig, path: Path) -> Result<FitResult, TrainError> {
    let model = model.clone().for_graph(g);
    cfg.validate(&model)?;
    let data = TrainData::new(g);
    let mut state = ModelState::new(model, cfg.seed)?;
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let rec = match path {
            Path::Decaf => train_step(&data, &mut state, cfg, epoch)?,
            Path::Baseline => baseline_step(&data, &mut state, cfg, epoch)?,
        };
        log::trace!("epoch {epoch}: {rec:?}");
        trace.records.push(rec);
    }
    let scores = state.score(&data.input, g)?;
    Ok(FitResult { state, trace, scores })
}

/// Trains the full objective from a model seeded with `cfg.seed`.
/// Labels on `g` are not read.
pub fn fit(g: &Graph, model: &ModelConfig, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_impl(g, model, cfg, Path::Decaf)
}

/// Reconstruction-only training; `λ₂..λ₄` in `cfg` are ignored.
pub fn fit_baseline(g: &Graph, model: &ModelConfig, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    fit_impl(g, model, &cfg.baseline(), Path::Baseline)
}
