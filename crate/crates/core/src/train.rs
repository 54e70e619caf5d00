//! Losses, the joint optimization step, scheduling, checkpoints.
//!
//! One step records the whole pipeline on a batch, scores each patch's
//! reconstruction as the reward for every block decision in it, and applies a
//! single Adam update to all parameter groups:
//!
//! `L_total = L_SFR + L_DCT + omega * L_SFD`.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var, BLOCK_AREA};
use crate::config::Config;
use crate::data::{hex_digest, Dataset, Prefetcher, TrainingSample};
use crate::error::{Error, Result};
use crate::model::{ActionPolicy, Forward, FreqSr};
use crate::params::{ParamId, ParamStore};
use crate::sfd::{policy_loss, reward, sfd_loss, value_loss};
use crate::tensor::{Scalar, Tensor};

/// Basis regularizer: `lambda/2 * sum_{i != j} (w_i . w_j)^2 +
/// mu/2 * sum_t (var(w_t) - var(w_t^dct))^2`, variances Bessel-corrected.
pub fn l_dct<T: Scalar>(
    g: &mut Graph<T>,
    filters: Var,
    reference: &Tensor<T>,
    lambda: f64,
    mu: f64,
) -> Var {
    let (orth, var) = dct_terms(g, filters, reference);
    let a = g.scale(orth, T::lit(0.5 * lambda));
    let b = g.scale(var, T::lit(0.5 * mu));
    g.add(a, b)
}

/// Unweighted `(sum_{i != j} (w_i . w_j)^2, sum_t (var_t - var_t^dct)^2)`.
pub fn dct_terms<T: Scalar>(g: &mut Graph<T>, filters: Var, reference: &Tensor<T>) -> (Var, Var) {
    let gram = g.matmul(filters, filters, false, true);
    let off = Tensor::from_vec(
        &[BLOCK_AREA, BLOCK_AREA],
        (0..BLOCK_AREA * BLOCK_AREA)
            .map(|i| {
                if i / BLOCK_AREA == i % BLOCK_AREA {
                    T::zero()
                } else {
                    T::one()
                }
            })
            .collect(),
    )
    .expect("64x64");
    let off = g.constant(off);
    let masked = g.mul(gram, off);
    let sq = g.mul(masked, masked);
    let orth = g.sum_all(sq);

    let refv = g.constant(reference.clone());
    let target = g.row_variance(refv);
    let target = g.constant(g.value(target).clone());
    let v = g.row_variance(filters);
    let d = g.sub(v, target);
    let d2 = g.mul(d, d);
    let var = g.sum_all(d2);
    (orth, var)
}

/// `1/2 * mean((sr - hr)^2)`.
pub fn l_sfr<T: Scalar>(g: &mut Graph<T>, sr: Var, hr: Var) -> Var {
    let m = g.mse(sr, hr);
    g.scale(m, T::lit(0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub omega: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &Config) -> Self {
        LossWeights {
            lambda: cfg.train.lambda_orth,
            mu: cfg.train.mu_var,
            omega: cfg.train.omega,
            beta: cfg.sfd.beta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sfr: f64,
    pub l_dct: f64,
    pub l_sfd: f64,
    pub l_total: f64,
    pub weights: LossWeights,
}

/// Assembles the reported total from its parts, rejecting non-finite terms.
pub fn total_loss(
    l_sfr: f64,
    l_dct: f64,
    l_sfd: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [("l_sfr", l_sfr), ("l_dct", l_dct), ("l_sfd", l_sfd)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_sfr,
        l_dct,
        l_sfd,
        l_total: l_sfr + l_dct + weights.omega * l_sfd,
        weights,
    })
}

/// Cosine annealing from `base` at step 0 to `floor` at `total`.
pub fn lr_schedule(step: usize, total: usize, base: f64, floor: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    floor + (base - floor) * 0.5 * (1.0 + (PI * t).cos())
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in p
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p - lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// A batch as `[B, 1, P, P]` tensors plus its scales.
pub fn batch_tensors<T: Scalar>(
    batch: &[TrainingSample],
) -> Result<(Tensor<T>, Tensor<T>, Vec<f64>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Empty("empty batch".into()))?;
    let shape = first.hr.shape().to_vec();
    let mut lr = Vec::new();
    let mut hr = Vec::new();
    for s in batch {
        if s.hr.shape() != shape.as_slice() || s.lr.shape() != shape.as_slice() {
            return Err(Error::Shape("batch patches differ in shape".into()));
        }
        lr.extend(s.lr.data().iter().map(|&v| T::lit(v)));
        hr.extend(s.hr.data().iter().map(|&v| T::lit(v)));
    }
    let dims = [batch.len(), 1, shape[0], shape[1]];
    Ok((
        Tensor::from_vec(&dims, lr)?,
        Tensor::from_vec(&dims, hr)?,
        batch.iter().map(|s| s.scale).collect(),
    ))
}

/// Every node of one training objective.
pub struct LossGraph {
    pub forward: Forward,
    pub l_sfr: Var,
    pub l_dct: Var,
    pub l_sfd: Option<Var>,
    pub total: Var,
    /// Reward of each patch.
    pub rewards: Vec<f64>,
    /// Advantage of each block (empty under a fixed action).
    pub advantages: Vec<f64>,
}

/// Externally held rewards (per patch), advantages and policy states (per
/// block).
#[derive(Clone, Debug, Default)]
pub struct Frozen<T> {
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub states: Option<Tensor<T>>,
}

/// Records `L_total` for a batch. Rewards and advantages are computed from
/// this pass unless `frozen` supplies them.
pub fn loss_graph<T: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    model: &FreqSr<T>,
    lr: &Tensor<T>,
    hr: &Tensor<T>,
    scales: &[f64],
    policy: &ActionPolicy,
    frozen: Option<&Frozen<T>>,
    rng: &mut R,
) -> Result<LossGraph> {
    let w = LossWeights::from_config(&model.config);
    let x = g.constant(lr.clone());
    let target = g.constant(hr.clone());
    let states = frozen.and_then(|f| f.states.as_ref());
    let fwd = model.forward_with_states(g, x, scales, policy, states, rng)?;
    let ls = l_sfr(g, fwd.sr, target);
    let filters = g.param(&model.store, model.cdct);
    let ld = l_dct(g, filters, &model.dct_reference, w.lambda, w.mu);

    let bn = scales.len();
    let rewards: Vec<f64> = match frozen {
        Some(f) => f.rewards.clone(),
        None => {
            let sr = g.value(fwd.sr);
            let n = sr.len() / bn;
            (0..bn)
                .map(|b| {
                    let slice = |t: &Tensor<T>| {
                        Tensor::from_vec(&[n], t.data()[b * n..(b + 1) * n].to_vec())
                    };
                    reward(&slice(sr)?, &slice(hr)?)
                })
                .collect::<Result<_>>()?
        }
    };
    let mut total = g.add(ls, ld);
    let mut l_sfd = None;
    let mut advantages = Vec::new();
    if let Some((logits, values)) = fwd.policy {
        let per_image = fwd.grid.1 * fwd.grid.2;
        let block_rewards: Vec<f64> = rewards
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, per_image))
            .collect();
        advantages = match frozen {
            Some(f) => f.advantages.clone(),
            None => g
                .value(values)
                .data()
                .iter()
                .zip(&block_rewards)
                .map(|(&v, &r)| r - v.as_f64())
                .collect(),
        };
        let lp = policy_loss(g, logits, &fwd.indices, &advantages, w.beta)?;
        let lv = value_loss(g, values, &block_rewards)?;
        let sfd = sfd_loss(g, lp, lv);
        let weighted = g.scale(sfd, T::lit(w.omega));
        total = g.add(total, weighted);
        l_sfd = Some(sfd);
    }
    Ok(LossGraph {
        forward: fwd,
        l_sfr: ls,
        l_dct: ld,
        l_sfd,
        total,
        rewards,
        advantages,
    })
}

/// Model, optimizer and sampling state of a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: FreqSr<f32>,
    pub adam: Adam<f32>,
    pub step: usize,
    /// Drives action sampling.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: Config) -> Result<Self> {
        let seed = config.train.seed;
        let model = FreqSr::new(config, seed)?;
        let t = &model.config.train;
        let adam = Adam::new(&model.store, t.adam_beta1, t.adam_beta2, t.adam_eps);
        Ok(TrainState {
            model,
            adam,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ac70),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub l_sfr: f64,
    pub l_dct: f64,
    pub l_sfd: f64,
    pub l_total: f64,
    pub mean_action: f64,
}

fn scalar<T: Scalar>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].as_f64()
}

/// One joint update on a batch.
pub fn train_step(state: &mut TrainState, batch: &[TrainingSample]) -> Result<StepReport> {
    let (lr_img, hr_img, scales) = batch_tensors::<f32>(batch)?;
    let policy = state.model.policy_for(crate::sfd::ActionMode::Sample);
    let mut g = Graph::new();
    let lg = loss_graph(
        &mut g,
        &state.model,
        &lr_img,
        &hr_img,
        &scales,
        &policy,
        None,
        &mut state.rng,
    )?;
    let w = LossWeights::from_config(&state.model.config);
    let parts = total_loss(
        scalar(&g, lg.l_sfr),
        scalar(&g, lg.l_dct),
        lg.l_sfd.map_or(0.0, |v| scalar(&g, v)),
        w,
    )?;
    let recorded = scalar(&g, lg.total);
    if !recorded.is_finite() {
        return Err(Error::NonFinite(format!("l_total = {recorded}")));
    }
    let grads = g.backward(lg.total).dense_params(&state.model.store);
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {}",
            state.model.store.name(ParamId(i))
        )));
    }
    let t = &state.model.config.train;
    let lr = lr_schedule(state.step, t.steps, t.lr, t.lr_floor);
    state.adam.step(&mut state.model.store, &grads, lr);
    state.step += 1;
    let actions = &lg.forward.actions;
    Ok(StepReport {
        step: state.step,
        lr,
        l_sfr: parts.l_sfr,
        l_dct: parts.l_dct,
        l_sfd: parts.l_sfd,
        l_total: parts.l_total,
        mean_action: actions.iter().sum::<usize>() as f64 / actions.len() as f64,
    })
}

/// Appends step reports as CSV rows, writing the header on creation.
pub struct TrainingLog {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl TrainingLog {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::Writer::from_path(path)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        Ok(TrainingLog {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, r: &StepReport) -> Result<()> {
        self.writer
            .serialize(r)
            .map_err(|e| Error::Serde(format!("{}: {e}", self.path.display())))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_training_log(path: &Path) -> Result<Vec<StepReport>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Serde(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Emit a progress line every this many steps (0 disables).
    pub log_every: usize,
}

/// Runs `config.train.steps` steps from a fresh state.
pub fn train(
    config: Config,
    dataset: Arc<Dataset>,
    opts: &TrainOptions,
) -> Result<(TrainState, Vec<StepReport>)> {
    let mut state = TrainState::new(config)?;
    let reports = train_from(&mut state, dataset, opts)?;
    Ok((state, reports))
}

/// Continues `state` up to `config.train.steps` steps.
pub fn train_from(
    state: &mut TrainState,
    dataset: Arc<Dataset>,
    opts: &TrainOptions,
) -> Result<Vec<StepReport>> {
    let t = state.model.config.train.clone();
    let remaining = t.steps.saturating_sub(state.step);
    let mut log = opts.log.as_deref().map(TrainingLog::create).transpose()?;
    let batches =
        Prefetcher::spawn(dataset, t.batch_size, t.steps, t.seed, t.prefetch).skip(state.step);
    let mut reports = Vec::with_capacity(remaining);
    for batch in batches.take(remaining) {
        let report = train_step(state, &batch?)?;
        if opts.log_every > 0 && report.step % opts.log_every == 0 {
            log::info!(
                "step {} lr {:.3e} l_sfr {:.6} l_dct {:.3e} l_sfd {:.4} mean_action {:.2}",
                report.step,
                report.lr,
                report.l_sfr,
                report.l_dct,
                report.l_sfd,
                report.mean_action
            );
        }
        if let Some(l) = log.as_mut() {
            l.append(&report)?;
        }
        reports.push(report);
    }
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(state, path)?;
    }
    Ok(reports)
}

pub const CHECKPOINT_MAGIC: &[u8] = b"FREQSR-CHECKPOINT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    step: usize,
    config_toml: String,
    adam_t: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
    payload_len: usize,
    payload_sha256: String,
}

/// Writes the model, optimizer moments, step and sampling state atomically
/// (temporary file, then rename).
///
/// Layout: magic line, header length (u64 LE), JSON header, f32 LE payload.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let store = &state.model.store;
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let groups: [(&str, Vec<&Tensor<f32>>); 3] = [
        ("", store.iter().map(|(_, _, t)| t).collect()),
        ("adam.m/", state.adam.m.iter().collect()),
        ("adam.v/", state.adam.v.iter().collect()),
    ];
    for (prefix, ts) in groups {
        for ((_, name, _), t) in store.iter().zip(ts) {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset: payload.len() / 4,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        step: state.step,
        config_toml: state.model.config.to_toml_string(),
        adam_t: state.adam.t,
        rng: RngState {
            seed: hex_bytes(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        tensors,
        payload_len: payload.len(),
        payload_sha256: hex_digest(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Serde(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&payload)?;
        f.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn hex_bytes(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len() / 2)
        .map(|i| u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok())
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| corrupt("missing magic line"))?;
    if rest.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| corrupt(&format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let payload = &rest[hlen..];
    if payload.len() != header.payload_len || hex_digest(payload) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let config = Config::from_toml_str(&header.config_toml)?;
    let mut state = TrainState::new(config)?;
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let n = state.model.store.len();
    if header.tensors.len() != 3 * n {
        return Err(corrupt("tensor count does not match the configured model"));
    }
    for (i, e) in header.tensors.iter().enumerate() {
        let (group, idx) = (i / n, i % n);
        let expected = state.model.store.name(ParamId(idx));
        let name = e.name.rsplit('/').next().unwrap_or(&e.name);
        if name != expected {
            return Err(corrupt(&format!(
                "tensor {} where {expected} was expected",
                e.name
            )));
        }
        let len: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + len)
            .ok_or_else(|| corrupt(&format!("tensor {} out of bounds", e.name)))?
            .to_vec();
        let t = Tensor::from_vec(&e.shape, data)?;
        let slot = match group {
            0 => state.model.store.get_mut(ParamId(idx)),
            1 => &mut state.adam.m[idx],
            _ => &mut state.adam.v[idx],
        };
        if slot.shape() != t.shape() {
            return Err(corrupt(&format!(
                "tensor {} has shape {:?}",
                e.name,
                t.shape()
            )));
        }
        *slot = t;
    }
    state.step = header.step;
    state.adam.t = header.adam_t;
    let seed: [u8; 32] = unhex(&header.rng.seed)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| corrupt("rng seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(
        header
            .rng
            .word_pos
            .parse()
            .map_err(|_| corrupt("rng position"))?,
    );
    state.rng = rng;
    Ok(state)
}

/// Central finite differences of `L_total` against the analytic gradient for
/// chosen scalar entries `(parameter, flat index)`. Actions, rewards,
/// advantages and policy states are frozen at their values from the unperturbed pass. Returns
/// `(analytic, numeric)` pairs.
pub fn gradient_check(
    model: &FreqSr<f64>,
    batch: &[TrainingSample],
    entries: &[(ParamId, usize)],
    eps: f64,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let (lr, hr, scales) = batch_tensors::<f64>(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let policy = model.policy_for(crate::sfd::ActionMode::Sample);
    let lg = loss_graph(&mut g, model, &lr, &hr, &scales, &policy, None, &mut rng)?;
    let frozen = match &policy {
        ActionPolicy::Fixed(_) => policy.clone(),
        _ => ActionPolicy::Given(lg.forward.indices.clone()),
    };
    let held = Frozen {
        rewards: lg.rewards.clone(),
        advantages: lg.advantages.clone(),
        states: lg.forward.states.map(|s| g.value(s).clone()),
    };
    let grads = g.backward(lg.total);
    let eval = |m: &FreqSr<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let lg = loss_graph(
            &mut g,
            m,
            &lr,
            &hr,
            &scales,
            &frozen,
            Some(&held),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        Ok(scalar(&g, lg.total))
    };
    let mut probe = model.clone();
    entries
        .iter()
        .map(|&(id, k)| {
            let analytic = grads.param(id).map_or(0.0, |t| t.data()[k]);
            let orig = probe.store.get(id).data()[k];
            probe.store.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.store.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.store.get_mut(id).data_mut()[k] = orig;
            Ok((analytic, (up - down) / (2.0 * eps)))
        })
        .collect()
}

/// Relative error used by the gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-8))
}
