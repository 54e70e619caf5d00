//! The full pipeline: trainable block transform, per-block division and
//! high-frequency recovery, inverse transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var, BLOCK, BLOCK_AREA};
use crate::config::Config;
use crate::dct::make_dct_basis;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::sfd::{batch_states, mask_grid, select_index, ActionMode, ActorCritic};
use crate::sfr::Sfr;
use crate::tensor::{Scalar, Tensor};

pub const CDCT_PARAM: &str = "cdct.filters";

/// How the per-block valid frequency points are chosen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionPolicy {
    Sample,
    Greedy,
    /// The same action for every block; the policy is not evaluated.
    Fixed(usize),
    /// Preset 0-based logit indices, one per block; the policy is evaluated
    /// but not consulted.
    Given(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct FreqSr<T> {
    pub config: Config,
    pub store: ParamStore<T>,
    pub cdct: ParamId,
    pub ac: ActorCritic,
    pub sfr: Sfr,
    /// Analytic basis the basis loss pulls the filters toward.
    pub dct_reference: Tensor<T>,
}

/// Nodes of one forward pass.
pub struct Forward {
    pub spec: Var,
    pub f_low: Var,
    pub f_high: Var,
    pub recovered: Var,
    pub f_sr: Var,
    /// `[B, 1, H, W]`.
    pub sr: Var,
    /// Policy input `[N, 65]`, logits `[N, A]` and values `[N]`, absent
    /// under a fixed action.
    pub policy: Option<(Var, Var)>,
    pub states: Option<Var>,
    /// 0-based logit indices, one per block, ordered `(b, i, j)`.
    pub indices: Vec<usize>,
    /// Valid frequency point of each block.
    pub actions: Vec<usize>,
    pub grid: (usize, usize, usize),
}

impl<T: Scalar> FreqSr<T> {
    pub fn new(config: Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let reference = make_dct_basis::<T>().filters;
        let cdct = store.add(CDCT_PARAM, reference.clone());
        let ac = ActorCritic::new(&mut store, "sfd", &config.sfd, &mut rng);
        let sfr = Sfr::new(&mut store, "sfr", &config.sfr, &mut rng);
        Ok(FreqSr {
            config,
            store,
            cdct,
            ac,
            sfr,
            dct_reference: reference,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> FreqSr<U> {
        FreqSr {
            config: self.config.clone(),
            store: self.store.cast(),
            cdct: self.cdct,
            ac: self.ac.clone(),
            sfr: self.sfr.clone(),
            dct_reference: self.dct_reference.cast(),
        }
    }

    /// Policy implied by the config for a requested mode.
    pub fn policy_for(&self, mode: ActionMode) -> ActionPolicy {
        match (self.config.sfd.fixed_action, mode) {
            (Some(a), _) => ActionPolicy::Fixed(a),
            (None, ActionMode::Sample) => ActionPolicy::Sample,
            (None, ActionMode::Greedy) => ActionPolicy::Greedy,
        }
    }

    /// Records the pipeline for `images: [B, 1, H, W]` (bicubic-upsampled
    /// inputs, 8-divisible) with one scale per image.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        images: Var,
        scales: &[f64],
        policy: &ActionPolicy,
        rng: &mut R,
    ) -> Result<Forward> {
        self.forward_with_states(g, images, scales, policy, None, rng)
    }

    /// As [`forward`](Self::forward), optionally feeding the policy preset
    /// states instead of the ones derived from this pass's spectrum.
    pub fn forward_with_states<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        images: Var,
        scales: &[f64],
        policy: &ActionPolicy,
        states: Option<&Tensor<T>>,
        rng: &mut R,
    ) -> Result<Forward> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::Shape(format!(
                "expected [B, 1, H, W] images, got {s:?}"
            )));
        }
        let (bn, h, w) = (s[0], s[2], s[3]);
        if h % BLOCK != 0 || w % BLOCK != 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("{h}x{w} is not 8-divisible")));
        }
        if scales.len() != bn {
            return Err(Error::Shape(format!(
                "{} scales for {bn} images",
                scales.len()
            )));
        }
        for &r in scales {
            crate::check_scale(r)?;
        }
        let (hb, wb) = (h / BLOCK, w / BLOCK);
        let filters = g.param(&self.store, self.cdct);
        let spec = g.block_dct(images, filters);

        let (policy_vars, state_var, indices, actions) = match policy {
            &ActionPolicy::Fixed(a) => {
                if !(1..=BLOCK_AREA).contains(&a) {
                    return Err(Error::OutOfRange(format!(
                        "fixed action {a} outside [1, 64]"
                    )));
                }
                (None, None, Vec::new(), vec![a; bn * hb * wb])
            }
            _ => {
                let states = match states {
                    Some(s) if s.shape() == [bn * hb * wb, crate::sfd::STATE_LEN] => s.clone(),
                    Some(s) => return Err(Error::Shape(format!("preset states {:?}", s.shape()))),
                    None => batch_states(g.value(spec), scales, self.config.sfd.state_scale),
                };
                let states = g.constant(states);
                let (logits, values) = self.ac.forward(g, &self.store, states);
                let k = self.ac.num_actions;
                let indices: Vec<usize> = match policy {
                    ActionPolicy::Given(idx) => {
                        if idx.len() != bn * hb * wb || idx.iter().any(|&i| i >= k) {
                            return Err(Error::OutOfRange(format!(
                                "need {} action indices below {k}",
                                bn * hb * wb
                            )));
                        }
                        idx.clone()
                    }
                    _ => {
                        let mode = if *policy == ActionPolicy::Sample {
                            ActionMode::Sample
                        } else {
                            ActionMode::Greedy
                        };
                        let lv = g.value(logits).data();
                        lv.chunks(k)
                            .map(|row| select_index(row, mode, rng))
                            .collect()
                    }
                };
                let actions = indices.iter().map(|&i| self.ac.action_of(i)).collect();
                (Some((logits, values)), Some(states), indices, actions)
            }
        };

        let mask = mask_grid::<T>(&actions, bn, hb, wb)?;
        let inv = mask.map(|m| T::one() - m);
        let mask = g.constant(mask);
        let inv = g.constant(inv);
        let f_low = g.mul(spec, mask);
        let f_high = g.mul(spec, inv);
        let recovered = self.sfr.recover(g, &self.store, f_high, scales, inv);
        let f_sr = g.add(f_low, recovered);
        let sr = g.block_idct(f_sr, filters);
        Ok(Forward {
            spec,
            f_low,
            f_high,
            recovered,
            f_sr,
            sr,
            policy: policy_vars,
            states: state_var,
            indices,
            actions,
            grid: (bn, hb, wb),
        })
    }

    /// Inference on `[B, 1, H, W]` inputs; returns the output images and the
    /// per-block actions.
    pub fn run(
        &self,
        images: &Tensor<T>,
        scales: &[f64],
        mode: ActionMode,
        seed: u64,
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fwd = self.forward(&mut g, x, scales, &self.policy_for(mode), &mut rng)?;
        Ok((g.value(fwd.sr).clone(), fwd.actions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SfrConfig;

    fn tiny() -> Config {
        let mut cfg = Config::default();
        cfg.sfr = SfrConfig {
            num_dense_groups: 1,
            blocks_per_group: 2,
            channels: 8,
            expansion: 2,
            se_reduction: 4,
            num_experts: 2,
            recursion_depth: 1,
            use_sfa: true,
            use_dense: true,
        };
        cfg.sfd.hidden = 16;
        cfg
    }

    fn images(seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(
            &[2, 1, 16, 24],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn fresh_model_reproduces_input() {
        let model = FreqSr::<f64>::new(tiny(), 1).unwrap();
        let x = images(2);
        let (y, actions) = model.run(&x, &[2.0, 3.5], ActionMode::Greedy, 0).unwrap();
        assert_eq!(actions.len(), 2 * 2 * 3);
        assert!(actions.iter().all(|a| (1..=13).contains(a)));
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn low_frequencies_pass_through() {
        let mut model = FreqSr::<f64>::new(tiny(), 3).unwrap();
        let ids: Vec<_> = model.store.ids_with_prefix("sfr.fuse.proj").collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in ids {
            let shape = model.store.get(id).shape().to_vec();
            *model.store.get_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
        }
        let mut g = Graph::new();
        let x = g.constant(images(5));
        let fwd = model
            .forward(&mut g, x, &[1.3, 4.0], &ActionPolicy::Sample, &mut rng)
            .unwrap();
        let (bn, hb, wb) = fwd.grid;
        let nb = hb * wb;
        let (low, sr) = (g.value(fwd.f_low).data(), g.value(fwd.f_sr).data());
        let rec = g.value(fwd.recovered).data();
        assert!(rec.iter().any(|&v| v != 0.0));
        for b in 0..bn {
            for p in 0..nb {
                let a = fwd.actions[b * nb + p];
                for c in 0..a {
                    let i = (b * 64 + c) * nb + p;
                    assert_eq!(sr[i], low[i]);
                }
            }
        }
    }

    #[test]
    fn fixed_policy_and_input_checks() {
        let mut cfg = tiny();
        cfg.sfd.fixed_action = Some(3);
        let model = FreqSr::<f64>::new(cfg, 1).unwrap();
        let (_, actions) = model
            .run(&images(1), &[2.0, 2.0], ActionMode::Sample, 0)
            .unwrap();
        assert!(actions.iter().all(|&a| a == 3));
        assert!(matches!(
            model.run(&images(1), &[2.0, 5.0], ActionMode::Greedy, 0),
            Err(Error::Scale(_))
        ));
        assert!(matches!(
            model.run(
                &Tensor::zeros(&[1, 1, 12, 16]),
                &[2.0],
                ActionMode::Greedy,
                0
            ),
            Err(Error::Dimension(_))
        ));
    }
}
