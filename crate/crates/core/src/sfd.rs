//! Scale-aware feature division.
//!
//! Each 8x8 block is a one-step decision problem: the state is the block's
//! spectrum plus the scale factor, the action is a valid frequency point `a`
//! (how many leading zigzag coefficients count as reliable low frequency), and
//! the reward is the reconstruction quality of the whole patch. With a single
//! step the return is the immediate reward, so the advantage is `R - V(s)`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::autograd::{softmax_rows, Graph, Var, BLOCK_AREA};
use crate::config::SfdConfig;
use crate::dct::SpectralMap;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const STATE_LEN: usize = BLOCK_AREA + 1;

/// `[scaled spectrum (64), r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SfdState<T>(pub Vec<T>);

/// Builds the state of one block. `state_scale` conditions the coefficients
/// (the default 1/8 maps a block's DC of at most 8 to at most 1).
pub fn build_state<T: Scalar>(spectrum: &[T], r: f64, state_scale: f64) -> Result<SfdState<T>> {
    if spectrum.len() != BLOCK_AREA {
        return Err(Error::Shape(format!(
            "block spectrum must have 64 entries, got {}",
            spectrum.len()
        )));
    }
    let s = T::lit(state_scale);
    let mut v: Vec<T> = spectrum.iter().map(|&c| c * s).collect();
    v.push(T::lit(r));
    Ok(SfdState(v))
}

/// States of every block of a `[B, 64, Hb, Wb]` batch, rows ordered
/// `(b, i, j)`, as an `[B*Hb*Wb, 65]` matrix.
pub fn batch_states<T: Scalar>(spec: &Tensor<T>, scales: &[f64], state_scale: f64) -> Tensor<T> {
    let s = spec.shape();
    let (bn, hb, wb) = (s[0], s[2], s[3]);
    assert_eq!(s[1], BLOCK_AREA);
    assert_eq!(scales.len(), bn);
    let nb = hb * wb;
    let d = spec.data();
    let k = T::lit(state_scale);
    let mut out = Vec::with_capacity(bn * nb * STATE_LEN);
    for (b, &r) in scales.iter().enumerate() {
        for p in 0..nb {
            for c in 0..BLOCK_AREA {
                out.push(d[(b * BLOCK_AREA + c) * nb + p] * k);
            }
            out.push(T::lit(r));
        }
    }
    Tensor::from_vec(&[bn * nb, STATE_LEN], out).expect("state matrix")
}

/// Separate actor and critic MLPs, two tanh hidden layers each.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    actor: [Linear; 3],
    critic: [Linear; 3],
    pub num_actions: usize,
    pub action_min: usize,
}

/// Logits and value for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput<T> {
    pub logits: Vec<T>,
    pub value: T,
}

impl<T: Scalar> PolicyOutput<T> {
    pub fn probabilities(&self) -> Vec<T> {
        softmax_rows(&self.logits, self.logits.len())
    }

    /// Entropy in nats.
    pub fn entropy(&self) -> T {
        -self
            .probabilities()
            .iter()
            .filter(|p| **p > T::zero())
            .map(|&p| p * p.ln())
            .sum::<T>()
    }
}

fn mlp<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    hidden: usize,
    out: usize,
    rng: &mut R,
) -> [Linear; 3] {
    let tanh_gain = 0.5f64.sqrt();
    [
        Linear::new(
            store,
            &format!("{name}.fc1"),
            STATE_LEN,
            hidden,
            tanh_gain,
            rng,
        ),
        Linear::new(
            store,
            &format!("{name}.fc2"),
            hidden,
            hidden,
            tanh_gain,
            rng,
        ),
        // Small output layer: near-uniform policy and near-zero value at init.
        Linear::new(store, &format!("{name}.out"), hidden, out, 0.01, rng),
    ]
}

impl ActorCritic {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SfdConfig,
        rng: &mut R,
    ) -> Self {
        let n = cfg.num_actions();
        ActorCritic {
            actor: mlp(store, &format!("{prefix}.actor"), cfg.hidden, n, rng),
            critic: mlp(store, &format!("{prefix}.critic"), cfg.hidden, 1, rng),
            num_actions: n,
            action_min: cfg.action_min,
        }
    }

    fn run<T: Scalar>(
        layers: &[Linear; 3],
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Var {
        let h = layers[0].forward(g, store, x);
        let h = g.tanh(h);
        let h = layers[1].forward(g, store, h);
        let h = g.tanh(h);
        layers[2].forward(g, store, h)
    }

    /// Batched forward: `[N, 65]` states to `[N, A]` logits and `[N]` values.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        states: Var,
    ) -> (Var, Var) {
        let n = g.shape(states)[0];
        let logits = Self::run(&self.actor, g, store, states);
        let v = Self::run(&self.critic, g, store, states);
        let values = g.reshape(v, &[n]);
        (logits, values)
    }

    /// Evaluates states without recording gradients for later use.
    pub fn evaluate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        states: &[SfdState<T>],
    ) -> Vec<PolicyOutput<T>> {
        let mut data = Vec::with_capacity(states.len() * STATE_LEN);
        for s in states {
            assert_eq!(s.0.len(), STATE_LEN, "state length");
            data.extend_from_slice(&s.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[states.len(), STATE_LEN], data).expect("states"));
        let (logits, values) = self.forward(&mut g, store, x);
        let (l, v) = (g.value(logits).data(), g.value(values).data());
        let k = self.num_actions;
        (0..states.len())
            .map(|i| PolicyOutput {
                logits: l[i * k..(i + 1) * k].to_vec(),
                value: v[i],
            })
            .collect()
    }

    /// Action value `a` for a 0-based logit index.
    pub fn action_of(&self, index: usize) -> usize {
        self.action_min + index
    }
}

pub fn actor_critic_forward<T: Scalar>(
    ac: &ActorCritic,
    store: &ParamStore<T>,
    state: &SfdState<T>,
) -> PolicyOutput<T> {
    ac.evaluate(store, std::slice::from_ref(state)).remove(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    /// Draw from the policy.
    Sample,
    /// Most probable action, lowest index on ties.
    Greedy,
}

/// Picks a 0-based logit index from one row of logits.
pub fn select_index<T: Scalar, R: Rng + ?Sized>(
    logits: &[T],
    mode: ActionMode,
    rng: &mut R,
) -> usize {
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            let p: Vec<f64> = softmax_rows(logits, logits.len())
                .into_iter()
                .map(|v| v.as_f64())
                .collect();
            WeightedIndex::new(&p)
                .expect("softmax yields valid weights")
                .sample(rng)
        }
    }
}

/// Picks an action `a` (1-based, offset by `action_min`).
pub fn select_action<T: Scalar, R: Rng + ?Sized>(
    out: &PolicyOutput<T>,
    mode: ActionMode,
    action_min: usize,
    rng: &mut R,
) -> usize {
    action_min + select_index(&out.logits, mode, rng)
}

/// Binary mask with ones on the first `a` zigzag indices.
pub fn make_mask(a: usize) -> Result<[f64; BLOCK_AREA]> {
    if !(1..=BLOCK_AREA).contains(&a) {
        return Err(Error::OutOfRange(format!("action {a} outside [1, 64]")));
    }
    let mut m = [0.0; BLOCK_AREA];
    m[..a].fill(1.0);
    Ok(m)
}

/// Mask grid `[B, 64, Hb, Wb]` from per-block actions ordered `(b, i, j)`.
pub fn mask_grid<T: Scalar>(
    actions: &[usize],
    bn: usize,
    hb: usize,
    wb: usize,
) -> Result<Tensor<T>> {
    let nb = hb * wb;
    if actions.len() != bn * nb {
        return Err(Error::Shape(format!(
            "{} actions for {bn}x{hb}x{wb} blocks",
            actions.len()
        )));
    }
    let mut out = vec![T::zero(); bn * BLOCK_AREA * nb];
    for b in 0..bn {
        for p in 0..nb {
            let a = actions[b * nb + p];
            if !(1..=BLOCK_AREA).contains(&a) {
                return Err(Error::OutOfRange(format!("action {a} outside [1, 64]")));
            }
            for c in 0..a {
                out[(b * BLOCK_AREA + c) * nb + p] = T::one();
            }
        }
    }
    Tensor::from_vec(&[bn, BLOCK_AREA, hb, wb], out)
}

/// `(f * M, f * (1 - M))` for a spectral map and a `[64, Hb, Wb]` mask.
pub fn divide<T: Scalar>(
    f: &SpectralMap<T>,
    mask: &Tensor<T>,
) -> Result<(SpectralMap<T>, SpectralMap<T>)> {
    if mask.shape() != f.coeffs.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match spectrum {:?}",
            mask.shape(),
            f.coeffs.shape()
        )));
    }
    let low = f.coeffs.zip_map(mask, |x, m| x * m);
    let high = f.coeffs.zip_map(mask, |x, m| x * (T::one() - m));
    Ok((
        SpectralMap {
            coeffs: low,
            source_shape: f.source_shape,
        },
        SpectralMap {
            coeffs: high,
            source_shape: f.source_shape,
        },
    ))
}

/// `1 - MSE(i_sr, i_hr)`.
pub fn reward<T: Scalar>(i_sr: &Tensor<T>, i_hr: &Tensor<T>) -> Result<f64> {
    if i_sr.shape() != i_hr.shape() {
        return Err(Error::Shape(format!(
            "reward inputs {:?} vs {:?}",
            i_sr.shape(),
            i_hr.shape()
        )));
    }
    if i_sr.is_empty() {
        return Err(Error::Empty("reward on empty patches".into()));
    }
    let mse = i_sr
        .data()
        .iter()
        .zip(i_hr.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / i_sr.len() as f64;
    Ok(1.0 - mse)
}

pub fn advantage(r: f64, v: f64) -> f64 {
    r - v
}

fn check_finite(name: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.into()))
    }
}

/// `-mean(A log pi(a|s)) - beta * mean(H(pi))`.
///
/// `indices` are 0-based logit indices; `advantages` enter as constants. The
/// entropy term is subtracted so that minimizing the loss raises entropy.
pub fn policy_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    indices: &[usize],
    advantages: &[f64],
    beta: f64,
) -> Result<Var> {
    check_finite("advantages", advantages)?;
    if !g.value(logits).all_finite() {
        return Err(Error::NonFinite("policy logits".into()));
    }
    let n = g.shape(logits)[0];
    if indices.len() != n || advantages.len() != n {
        return Err(Error::Shape(format!(
            "{n} logit rows, {} actions, {} advantages",
            indices.len(),
            advantages.len()
        )));
    }
    let logp = g.log_softmax(logits);
    let chosen = g.gather(logp, indices);
    let adv = g.constant(Tensor::from_f64(&[n], advantages)?);
    let weighted = g.mul(chosen, adv);
    let pg = g.mean_all(weighted);
    let p = g.softmax(logits);
    let plogp = g.mul(p, logp);
    // sum(p log p) / N is the negated mean entropy.
    let neg_h = g.sum_all(plogp);
    let bonus = g.scale(neg_h, T::lit(beta / n as f64));
    let pg = g.scale(pg, T::lit(-1.0));
    Ok(g.add(pg, bonus))
}

/// `1/2 mean((R - V)^2)`.
pub fn value_loss<T: Scalar>(g: &mut Graph<T>, values: Var, rewards: &[f64]) -> Result<Var> {
    check_finite("rewards", rewards)?;
    if !g.value(values).all_finite() {
        return Err(Error::NonFinite("critic values".into()));
    }
    let n = g.value(values).len();
    if rewards.len() != n {
        return Err(Error::Shape(format!(
            "{n} values vs {} rewards",
            rewards.len()
        )));
    }
    let r = g.constant(Tensor::from_f64(g.shape(values), rewards)?);
    let m = g.mse(values, r);
    Ok(g.scale(m, T::lit(0.5)))
}

/// `1/2 (L_pi + L_v)`.
pub fn sfd_loss<T: Scalar>(g: &mut Graph<T>, policy: Var, value: Var) -> Var {
    let s = g.add(policy, value);
    g.scale(s, T::lit(0.5))
}
