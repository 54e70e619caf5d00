//! Scale-aware feature recovery.
//!
//! Predicts the high-frequency part of each block spectrum from the masked
//! input and the scale factor. Operates on the `[B, 64, Hb, Wb]` block grid:
//!
//! ```text
//! f_high -> shallow 3x3 -> ([dense group -> SFA] x groups) x recursion
//!        -> global fuse (with long skip from the shallow features)
//!        -> + f_high -> remask
//! ```
//!
//! Weights are shared across recursion passes.

use rand::Rng;

use crate::autograd::{Graph, Var, BLOCK_AREA};
use crate::config::SfrConfig;
use crate::nn::{Conv, Gain, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

const LINEAR_GAIN: f64 = std::f64::consts::FRAC_1_SQRT_2;
const CONTROLLER_WIDTH: usize = 16;

/// Wide-activation residual block with squeeze-and-excitation:
/// `lambda_res * SE(WA(x)) + lambda_skip * x`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    expand: Conv,
    reduce: Conv,
    spatial: Conv,
    se_down: Linear,
    se_up: Linear,
    pub lambda_res: Gain,
    pub lambda_skip: Gain,
}

impl ResidualBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SfrConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        let wide = c * cfg.expansion;
        let squeezed = c / cfg.se_reduction;
        ResidualBlock {
            expand: Conv::new(store, &format!("{name}.expand"), c, wide, 1, true, 1.0, rng),
            reduce: Conv::new(
                store,
                &format!("{name}.reduce"),
                wide,
                c,
                1,
                true,
                LINEAR_GAIN,
                rng,
            ),
            spatial: Conv::new(
                store,
                &format!("{name}.spatial"),
                c,
                c,
                3,
                true,
                LINEAR_GAIN,
                rng,
            ),
            se_down: Linear::new(store, &format!("{name}.se_down"), c, squeezed, 1.0, rng),
            se_up: Linear::new(
                store,
                &format!("{name}.se_up"),
                squeezed,
                c,
                LINEAR_GAIN,
                rng,
            ),
            lambda_res: Gain::new(store, &format!("{name}.lambda_res"), 1.0),
            lambda_skip: Gain::new(store, &format!("{name}.lambda_skip"), 1.0),
        }
    }

    /// Channel gates in `(0, 1)`, `[B, C]`.
    pub fn se_gate<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let pooled = g.gap(x);
        let h = self.se_down.forward(g, store, pooled);
        let h = g.relu(h);
        let h = self.se_up.forward(g, store, h);
        g.sigmoid(h)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.expand.forward(g, store, x);
        let h = g.relu(h);
        let h = self.reduce.forward(g, store, h);
        let h = self.spatial.forward(g, store, h);
        let gate = self.se_gate(g, store, h);
        let h = g.channel_scale(h, gate);
        let a = self.lambda_res.apply(g, store, h);
        let b = self.lambda_skip.apply(g, store, x);
        g.add(a, b)
    }
}

/// Residual blocks whose inputs fuse all earlier outputs (dense wiring), or a
/// plain chain when dense wiring is disabled.
#[derive(Clone, Debug)]
pub struct DenseGroup {
    pub blocks: Vec<ResidualBlock>,
    fuse: Vec<Conv>,
    out: Option<Conv>,
}

impl DenseGroup {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SfrConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        let d = cfg.blocks_per_group;
        let blocks = (0..d)
            .map(|i| ResidualBlock::new(store, &format!("{name}.rb{i}"), cfg, rng))
            .collect();
        let (fuse, out) = if cfg.use_dense {
            let fuse = (1..d)
                .map(|i| {
                    Conv::new(
                        store,
                        &format!("{name}.fuse{i}"),
                        (i + 1) * c,
                        c,
                        1,
                        true,
                        LINEAR_GAIN,
                        rng,
                    )
                })
                .collect();
            let out = Conv::new(
                store,
                &format!("{name}.out"),
                (d + 1) * c,
                c,
                1,
                true,
                LINEAR_GAIN,
                rng,
            );
            (fuse, Some(out))
        } else {
            (Vec::new(), None)
        };
        DenseGroup { blocks, fuse, out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f0: Var) -> Var {
        let Some(out) = &self.out else {
            return self.blocks.iter().fold(f0, |x, rb| rb.forward(g, store, x));
        };
        let mut feats = vec![f0];
        for (i, rb) in self.blocks.iter().enumerate() {
            let input = if i == 0 {
                f0
            } else {
                let cat = g.concat_channels(&feats);
                self.fuse[i - 1].forward(g, store, cat)
            };
            let y = rb.forward(g, store, input);
            feats.push(y);
        }
        let cat = g.concat_channels(&feats);
        out.forward(g, store, cat)
    }
}

/// Scale-aware feature adaption: a two-layer controller turns `r` into routing
/// weights over expert 3x3 kernels; the mixed kernel's response is merged with
/// the input, then cascaded with it once more.
#[derive(Clone, Debug)]
pub struct Sfa {
    ctrl1: Linear,
    ctrl2: Linear,
    experts: ParamId,
    merge: Conv,
    cascade: Conv,
    channels: usize,
    num_experts: usize,
}

impl Sfa {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SfrConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        let e = cfg.num_experts;
        Sfa {
            ctrl1: Linear::new(
                store,
                &format!("{name}.ctrl1"),
                1,
                CONTROLLER_WIDTH,
                1.0,
                rng,
            ),
            ctrl2: Linear::new(
                store,
                &format!("{name}.ctrl2"),
                CONTROLLER_WIDTH,
                e,
                LINEAR_GAIN,
                rng,
            ),
            experts: store.add_he(
                format!("{name}.experts"),
                &[e, c * c * 9],
                c * 9,
                LINEAR_GAIN,
                rng,
            ),
            merge: Conv::new(
                store,
                &format!("{name}.merge"),
                2 * c,
                c,
                1,
                true,
                LINEAR_GAIN,
                rng,
            ),
            cascade: Conv::new(
                store,
                &format!("{name}.cascade"),
                2 * c,
                c,
                1,
                true,
                LINEAR_GAIN,
                rng,
            ),
            channels: c,
            num_experts: e,
        }
    }

    /// Softmax routing weights `[B, E]`.
    pub fn routing<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        scales: &[f64],
    ) -> Var {
        let r = g.constant(Tensor::from_f64(&[scales.len(), 1], scales).expect("scale column"));
        let h = self.ctrl1.forward(g, store, r);
        let h = g.relu(h);
        let logits = self.ctrl2.forward(g, store, h);
        g.softmax(logits)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        scales: &[f64],
    ) -> Var {
        let b = scales.len();
        let c = self.channels;
        let w = self.routing(g, store, scales);
        let experts = g.param(store, self.experts);
        let mixed = g.matmul(w, experts, false, false);
        let kernels = g.reshape(mixed, &[b, c, c, 3, 3]);
        let y = g.conv2d(x, kernels, None, 1);
        let cat = g.concat_channels(&[y, x]);
        let merged = self.merge.forward(g, store, cat);
        let cat = g.concat_channels(&[merged, x]);
        self.cascade.forward(g, store, cat)
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }
}

/// `proj(lambda_deep * f_D + lambda_skip * relu(fc(GAP(conv1x1(f_s)))))`, the
/// pooled branch broadcast over the grid. The projection to 64 spectral
/// channels starts at zero so a fresh model leaves the input spectrum intact.
#[derive(Clone, Debug)]
pub struct GlobalFuse {
    squeeze: Conv,
    excite: Linear,
    pub lambda_skip: Gain,
    pub lambda_deep: Gain,
    pub proj: Conv,
}

impl GlobalFuse {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &SfrConfig,
        rng: &mut R,
    ) -> Self {
        let c = cfg.channels;
        let proj = Conv {
            w: store.add_zeros(format!("{name}.proj.w"), &[BLOCK_AREA, c, 1, 1]),
            b: Some(store.add_zeros(format!("{name}.proj.b"), &[BLOCK_AREA])),
            k: 1,
        };
        GlobalFuse {
            squeeze: Conv::new(
                store,
                &format!("{name}.squeeze"),
                c,
                c,
                1,
                true,
                LINEAR_GAIN,
                rng,
            ),
            excite: Linear::new(store, &format!("{name}.excite"), c, c, 1.0, rng),
            lambda_skip: Gain::new(store, &format!("{name}.lambda_skip"), 1.0),
            lambda_deep: Gain::new(store, &format!("{name}.lambda_deep"), 1.0),
            proj,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_d: Var,
        f_s: Var,
    ) -> Var {
        let s = self.squeeze.forward(g, store, f_s);
        let pooled = g.gap(s);
        let e = self.excite.forward(g, store, pooled);
        let e = g.relu(e);
        let e = self.lambda_skip.apply(g, store, e);
        let d = self.lambda_deep.apply(g, store, f_d);
        let fused = g.channel_add(d, e);
        self.proj.forward(g, store, fused)
    }
}

/// `f * (1 - M)`, with the complement mask supplied directly.
pub fn remask<T: Scalar>(g: &mut Graph<T>, f: Var, inv_mask: Var) -> Var {
    g.mul(f, inv_mask)
}

#[derive(Clone, Debug)]
pub struct Sfr {
    pub cfg: SfrConfig,
    pub shallow: Conv,
    pub groups: Vec<DenseGroup>,
    pub sfa: Vec<Sfa>,
    pub fuse: GlobalFuse,
}

impl Sfr {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SfrConfig,
        rng: &mut R,
    ) -> Self {
        let shallow = Conv::new(
            store,
            &format!("{prefix}.shallow"),
            BLOCK_AREA,
            cfg.channels,
            3,
            true,
            LINEAR_GAIN,
            rng,
        );
        let mut groups = Vec::new();
        let mut sfa = Vec::new();
        for i in 0..cfg.num_dense_groups {
            groups.push(DenseGroup::new(store, &format!("{prefix}.dg{i}"), cfg, rng));
            if cfg.use_sfa {
                sfa.push(Sfa::new(store, &format!("{prefix}.sfa{i}"), cfg, rng));
            }
        }
        let fuse = GlobalFuse::new(store, &format!("{prefix}.fuse"), cfg, rng);
        Sfr {
            cfg: cfg.clone(),
            shallow,
            groups,
            sfa,
            fuse,
        }
    }

    pub fn shallow_extract<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_high: Var,
    ) -> Var {
        self.shallow.forward(g, store, f_high)
    }

    /// Deep features after all groups and recursion passes.
    pub fn deep<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_s: Var,
        scales: &[f64],
    ) -> Var {
        let mut x = f_s;
        for _ in 0..self.cfg.recursion_depth {
            for (i, group) in self.groups.iter().enumerate() {
                x = group.forward(g, store, x);
                if let Some(sfa) = self.sfa.get(i) {
                    x = sfa.forward(g, store, x, scales);
                }
            }
        }
        x
    }

    /// Recovered high-frequency spectrum `[B, 64, Hb, Wb]`, zero wherever the
    /// complement mask is zero.
    pub fn recover<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_high: Var,
        scales: &[f64],
        inv_mask: Var,
    ) -> Var {
        assert_eq!(
            g.shape(f_high)[0],
            scales.len(),
            "one scale per batch element"
        );
        let f_s = self.shallow_extract(g, store, f_high);
        let f_d = self.deep(g, store, f_s, scales);
        let hf = self.fuse.forward(g, store, f_d, f_s);
        let hf = g.add(hf, f_high);
        remask(g, hf, inv_mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SfrConfig {
        SfrConfig {
            num_dense_groups: 2,
            blocks_per_group: 2,
            channels: 8,
            expansion: 2,
            se_reduction: 4,
            num_experts: 3,
            recursion_depth: 2,
            use_sfa: true,
            use_dense: true,
        }
    }

    fn build(cfg: &SfrConfig, seed: u64) -> (ParamStore<f64>, Sfr) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sfr = Sfr::new(&mut store, "sfr", cfg, &mut rng);
        (store, sfr)
    }

    fn randomize(store: &mut ParamStore<f64>, prefix: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids_with_prefix(prefix).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 0.1, &mut rng);
        }
    }

    fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn shallow_bias_shape_and_linearity() {
        let (mut store, sfr) = build(&small_cfg(), 1);
        let bias = Tensor::randn(&[8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        *store.get_mut(sfr.shallow.b.unwrap()) = bias.clone();
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 64, 3, 5]));
        let y = sfr.shallow_extract(&mut g, &store, z);
        assert_eq!(g.shape(y), &[1, 8, 3, 5]);
        for (c, chunk) in g.value(y).data().chunks(15).enumerate() {
            assert!(chunk.iter().all(|&v| v == bias.data()[c]));
        }
        *store.get_mut(sfr.shallow.b.unwrap()) = Tensor::zeros(&[8]);
        let mut g = Graph::new();
        let x = input(&[1, 64, 3, 5], 3);
        let x1 = g.constant(x.clone());
        let x2 = g.constant(x.scale(2.0));
        let y1 = sfr.shallow_extract(&mut g, &store, x1);
        let y2 = sfr.shallow_extract(&mut g, &store, x2);
        assert!(g.value(y1).scale(2.0).max_abs_diff(g.value(y2)) < 1e-12);
    }

    #[test]
    fn residual_block_degenerate_and_gate_range() {
        let cfg = small_cfg();
        let (mut store, sfr) = build(&cfg, 4);
        let rb = sfr.groups[0].blocks[0].clone();
        let x = input(&[2, 8, 4, 4], 5);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gate = rb.se_gate(&mut g, &store, xv);
        assert!(g.value(gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let zero = g.constant(Tensor::zeros(&[2, 8, 4, 4]));
        let y0 = rb.forward(&mut g, &store, zero);
        assert_eq!(g.value(y0).max_abs(), 0.0);
        *store.get_mut(rb.lambda_res.0) = Tensor::scalar(0.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = rb.forward(&mut g, &store, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn dense_group_contracts() {
        let cfg = small_cfg();
        let (store, sfr) = build(&cfg, 6);
        let mut plain_cfg = cfg.clone();
        plain_cfg.use_dense = false;
        let (plain_store, plain) = build(&plain_cfg, 6);
        let x = input(&[1, 8, 3, 3], 7);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let dense = sfr.groups[0].forward(&mut g, &store, xv);
        assert_eq!(g.shape(dense), &[1, 8, 3, 3]);
        let mut g2 = Graph::new();
        let xv2 = g2.constant(x);
        let chained = plain.groups[0].forward(&mut g2, &plain_store, xv2);
        assert!(g.value(dense).max_abs_diff(g2.value(chained)) > 1e-3);
    }

    #[test]
    fn dense_group_with_identity_blocks_is_affine() {
        let mut cfg = small_cfg();
        cfg.blocks_per_group = 1;
        let (mut store, sfr) = build(&cfg, 8);
        let rb = &sfr.groups[0].blocks[0];
        *store.get_mut(rb.lambda_res.0) = Tensor::scalar(0.0);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let y = sfr.groups[0].forward(&mut g, &store, v);
            g.value(y).clone()
        };
        let a = input(&[1, 8, 3, 3], 9);
        let b = input(&[1, 8, 3, 3], 10);
        let mid = a.zip_map(&b, |x, y| 0.3 * x + 0.7 * y);
        let lhs = run(&mid);
        let rhs = run(&a).zip_map(&run(&b), |x, y| 0.3 * x + 0.7 * y);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn sfa_routing_and_scale_awareness() {
        let cfg = small_cfg();
        let (store, sfr) = build(&cfg, 11);
        let sfa = &sfr.sfa[0];
        let mut g = Graph::new();
        let w = sfa.routing(&mut g, &store, &[1.1, 2.5, 4.0]);
        for row in g.value(w).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let x = input(&[1, 8, 4, 4], 12);
        let xv = g.constant(x);
        let a = sfa.forward(&mut g, &store, xv, &[1.5]);
        let b = sfa.forward(&mut g, &store, xv, &[3.5]);
        assert!(g.value(a).max_abs_diff(g.value(b)) > 1e-6);

        let mut single = cfg.clone();
        single.num_experts = 1;
        let (store1, sfr1) = build(&single, 11);
        let mut g = Graph::new();
        let xv = g.constant(input(&[1, 8, 4, 4], 12));
        let a = sfr1.sfa[0].forward(&mut g, &store1, xv, &[1.5]);
        let b = sfr1.sfa[0].forward(&mut g, &store1, xv, &[3.5]);
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn global_fuse_degenerate_and_gap_constant() {
        let cfg = small_cfg();
        let (mut store, sfr) = build(&cfg, 13);
        randomize(&mut store, "sfr.fuse.proj", 14);
        *store.get_mut(sfr.fuse.lambda_skip.0) = Tensor::scalar(0.0);
        *store.get_mut(sfr.fuse.lambda_deep.0) = Tensor::scalar(1.7);
        let mut g = Graph::new();
        let fd = g.constant(input(&[1, 8, 3, 3], 15));
        let fs = g.constant(input(&[1, 8, 3, 3], 16));
        let out = sfr.fuse.forward(&mut g, &store, fd, fs);
        let scaled = g.scale(fd, 1.7);
        let expected = sfr.fuse.proj.forward(&mut g, &store, scaled);
        assert!(g.value(out).max_abs_diff(g.value(expected)) < 1e-12);

        let c = g.constant(
            Tensor::from_vec(
                &[1, 2, 2, 2],
                vec![3.0; 4].into_iter().chain(vec![-1.0; 4]).collect(),
            )
            .unwrap(),
        );
        let p = g.gap(c);
        assert_eq!(g.value(p).data(), &[3.0, -1.0]);
    }

    #[test]
    fn shallow_features_reach_output_through_skip() {
        let cfg = small_cfg();
        let (mut store, sfr) = build(&cfg, 17);
        randomize(&mut store, "sfr.fuse", 18);
        let fd = input(&[1, 8, 2, 2], 19);
        let fs = input(&[1, 8, 2, 2], 20);
        let eval = |fs: &Tensor<f64>| {
            let mut g = Graph::new();
            let a = g.constant(fd.clone());
            let b = g.constant(fs.clone());
            let o = sfr.fuse.forward(&mut g, &store, a, b);
            g.value(o).sum()
        };
        let mut total = 0.0;
        for i in 0..fs.len() {
            let mut p = fs.clone();
            p.data_mut()[i] += 1e-5;
            let mut m = fs.clone();
            m.data_mut()[i] -= 1e-5;
            total += ((eval(&p) - eval(&m)) / 2e-5).abs();
        }
        assert!(total > 1e-6);
    }

    #[test]
    fn remask_cases() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(input(&[1, 64, 2, 2], 21));
        let inv13 = crate::sfd::mask_grid::<f64>(&[13; 4], 1, 2, 2)
            .unwrap()
            .map(|m| 1.0 - m);
        let inv = g.constant(inv13);
        let out = remask(&mut g, f, inv);
        assert!(g.value(out).data()[..13 * 4].iter().all(|&v| v == 0.0));
        let ones = g.constant(Tensor::zeros(&[1, 64, 2, 2]));
        let z = remask(&mut g, f, ones);
        assert_eq!(g.value(z).max_abs(), 0.0);
        let id = g.constant(Tensor::full(&[1, 64, 2, 2], 1.0));
        let same = remask(&mut g, f, id);
        assert_eq!(g.value(same), g.value(f));
    }

    #[test]
    fn zero_input_recovers_zero_and_param_count_ignores_recursion() {
        let cfg = small_cfg();
        let (store, sfr) = build(&cfg, 22);
        let mut g = Graph::new();
        let f = g.constant(Tensor::zeros(&[2, 64, 2, 3]));
        let inv = g.constant(Tensor::full(&[2, 64, 2, 3], 1.0));
        let out = sfr.recover(&mut g, &store, f, &[2.0, 3.0], inv);
        assert_eq!(g.value(out).max_abs(), 0.0);
        let mut deeper = cfg.clone();
        deeper.recursion_depth = 5;
        let (store5, _) = build(&deeper, 22);
        assert_eq!(store.numel(), store5.numel());
    }
}
