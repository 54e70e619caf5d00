//! A small reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records every operation of one forward pass. Values live on the
//! tape; [`Graph::backward`] walks it in reverse and returns gradients for every
//! node that depends on a trainable leaf. Parameters enter through
//! [`Graph::param`], which caches one leaf per [`ParamId`] so weights reused
//! several times in a pass (shared recursion) accumulate a single gradient.
//!
//! Tensor layouts: feature maps are `[B, C, H, W]`, matrices are row-major
//! `[rows, cols]`, images entering the block transform are `[B, 1, H, W]`.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

pub const BLOCK: usize = 8;
pub const BLOCK_AREA: usize = BLOCK * BLOCK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScalarMul {
        s: Var,
        x: Var,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        pad: usize,
        per_sample: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Gap(Var),
    ChannelScale {
        x: Var,
        s: Var,
    },
    ChannelAdd {
        x: Var,
        s: Var,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    BlockDct {
        img: Var,
        filters: Var,
    },
    BlockIdct {
        spec: Var,
        filters: Var,
    },
    LogSoftmax(Var),
    Softmax(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    RowVariance(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter, `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Gradients for every parameter of `store`, zero-filled where absent.
    pub fn dense_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, t)| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected a [B, C, H, W] tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims2(s: &[usize]) -> (usize, usize) {
    assert_eq!(s.len(), 2, "expected a matrix, got {s:?}");
    (s[0], s[1])
}

/// Unfolds one `[C, H, W]` map into `[C*k*k, Ho*Wo]` columns (zero padding).
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..][..w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [T]) {
    let ho = h + 2 * pad + 1 - k;
    let wo = w + 2 * pad + 1 - k;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ci * h * w + iy as usize * w..][..w];
                    for ox in 0..wo {
                        let ix = ox as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Gathers the non-overlapping 8x8 blocks of one `[H, W]` image into rows of
/// `[Hb*Wb, 64]`, block-major, pixels row-major within a block.
pub(crate) fn gather_blocks<T: Scalar>(img: &[T], h: usize, w: usize, out: &mut [T]) {
    let (hb, wb) = (h / BLOCK, w / BLOCK);
    for i in 0..hb {
        for j in 0..wb {
            let row = &mut out[(i * wb + j) * BLOCK_AREA..][..BLOCK_AREA];
            for x in 0..BLOCK {
                let src = &img[(i * BLOCK + x) * w + j * BLOCK..][..BLOCK];
                row[x * BLOCK..(x + 1) * BLOCK].copy_from_slice(src);
            }
        }
    }
}

/// Writes (accumulating) a channel-major `[64, Hb*Wb]` pixel matrix back to the image.
fn scatter_blocks_t<T: Scalar>(pt: &[T], h: usize, w: usize, img: &mut [T]) {
    let (hb, wb) = (h / BLOCK, w / BLOCK);
    let nb = hb * wb;
    for q in 0..BLOCK_AREA {
        let (x, y) = (q / BLOCK, q % BLOCK);
        let src = &pt[q * nb..(q + 1) * nb];
        for i in 0..hb {
            let line = &mut img[(i * BLOCK + x) * w..][..w];
            for j in 0..wb {
                let p = &mut line[j * BLOCK + y];
                *p = *p + src[i * wb + j];
            }
        }
    }
}

/// Inverse of [`scatter_blocks_t`] without accumulation: image to `[64, Hb*Wb]`.
fn gather_blocks_t<T: Scalar>(img: &[T], h: usize, w: usize, pt: &mut [T]) {
    let (hb, wb) = (h / BLOCK, w / BLOCK);
    let nb = hb * wb;
    for q in 0..BLOCK_AREA {
        let (x, y) = (q / BLOCK, q % BLOCK);
        let dst = &mut pt[q * nb..(q + 1) * nb];
        for i in 0..hb {
            let line = &img[(i * BLOCK + x) * w..][..w];
            for j in 0..wb {
                dst[i * wb + j] = line[j * BLOCK + y];
            }
        }
    }
}

fn accum<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradient (e.g. an input under test).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node, so a
    /// graph must only ever read from one store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// `s * x` for a one-element tensor `s`.
    pub fn scalar_mul(&mut self, s: Var, x: Var) -> Var {
        assert_eq!(self.value(s).len(), 1, "scalar_mul needs a 1-element scale");
        let c = self.value(s).data()[0];
        let v = self.value(x).scale(c);
        self.push(v, Op::ScalarMul { s, x }, &[s, x])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Stride-1 2-D convolution with zero padding.
    ///
    /// `w` is `[Co, Ci, k, k]`, or `[B, Co, Ci, k, k]` for one kernel per sample.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let (bn, ci, h, wd) = dims4(self.shape(x));
        let ws = self.shape(w).to_vec();
        let per_sample = ws.len() == 5;
        let (co, wci, k) = if per_sample {
            assert_eq!(ws[0], bn, "per-sample kernels must match the batch");
            (ws[1], ws[2], ws[3])
        } else {
            assert_eq!(ws.len(), 4, "conv weight must be [Co, Ci, k, k]");
            (ws[0], ws[1], ws[2])
        };
        assert_eq!(wci, ci, "conv input channels");
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[co], "conv bias shape");
        }
        let ho = h + 2 * pad + 1 - k;
        let wo = wd + 2 * pad + 1 - k;
        let kk = ci * k * k;
        let mut out = vec![T::zero(); bn * co * ho * wo];
        let mut cols = vec![T::zero(); kk * ho * wo];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bn {
                let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                let wb = if per_sample {
                    &wv[bi * co * kk..(bi + 1) * co * kk]
                } else {
                    wv
                };
                let rhs: &[T] = if k == 1 && pad == 0 {
                    xb
                } else {
                    im2col(xb, ci, h, wd, k, pad, &mut cols);
                    &cols
                };
                let yb = &mut out[bi * co * ho * wo..(bi + 1) * co * ho * wo];
                gemm(false, false, co, ho * wo, kk, wb, rhs, T::zero(), yb);
                if let Some(bv) = b {
                    let bias = self.value(bv).data();
                    for (c, row) in yb.chunks_mut(ho * wo).enumerate() {
                        for y in row {
                            *y = *y + bias[c];
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[bn, co, ho, wo], out).expect("conv output");
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                k,
                pad,
                per_sample,
            },
            &parents,
        )
    }

    /// `x W^T + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, i) = dims2(self.shape(x));
        let (o, wi) = dims2(self.shape(w));
        assert_eq!(i, wi, "linear input width");
        let mut out = vec![T::zero(); n * o];
        gemm(
            false,
            true,
            n,
            o,
            i,
            self.value(x).data(),
            self.value(w).data(),
            T::zero(),
            &mut out,
        );
        if let Some(bv) = b {
            let bias = self.value(bv).data();
            assert_eq!(bias.len(), o, "linear bias width");
            for row in out.chunks_mut(o) {
                for (y, &bb) in row.iter_mut().zip(bias) {
                    *y = *y + bb;
                }
            }
        }
        let t = Tensor::from_vec(&[n, o], out).expect("linear output");
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(t, Op::Linear { x, w, b }, &parents)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a matrix.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ar, ac) = dims2(self.shape(a));
        let (br, bc) = dims2(self.shape(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm(
            ta,
            tb,
            m,
            n,
            k,
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            &mut out,
        );
        let t = Tensor::from_vec(&[m, n], out).expect("matmul output");
        self.push(t, Op::Matmul { a, b, ta, tb }, &[a, b])
    }

    /// Global average pooling `[B, C, H, W] -> [B, C]`.
    pub fn gap(&mut self, x: Var) -> Var {
        let (bn, c, h, w) = dims4(self.shape(x));
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::from_vec(&[bn, c], out).expect("gap output");
        self.push(t, Op::Gap(x), &[x])
    }

    /// Multiplies each channel map by a per-sample, per-channel factor `s: [B, C]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (bn, c, h, w) = dims4(self.shape(x));
        assert_eq!(self.shape(s), &[bn, c], "channel_scale factor shape");
        let hw = h * w;
        let sv = self.value(s).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(ch, &f)| ch.iter().map(move |&v| v * f))
            .collect();
        let t = Tensor::from_vec(&[bn, c, h, w], data).expect("channel_scale output");
        self.push(t, Op::ChannelScale { x, s }, &[x, s])
    }

    /// Adds a per-sample, per-channel offset `s: [B, C]` broadcast over space.
    pub fn channel_add(&mut self, x: Var, s: Var) -> Var {
        let (bn, c, h, w) = dims4(self.shape(x));
        assert_eq!(self.shape(s), &[bn, c], "channel_add offset shape");
        let hw = h * w;
        let sv = self.value(s).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(sv)
            .flat_map(|(ch, &f)| ch.iter().map(move |&v| v + f))
            .collect();
        let t = Tensor::from_vec(&[bn, c, h, w], data).expect("channel_add output");
        self.push(t, Op::ChannelAdd { x, s }, &[x, s])
    }

    /// Concatenates `[B, C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let (bn, _, h, w) = dims4(self.shape(parts[0]));
        let chans: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (b2, c, h2, w2) = dims4(self.shape(p));
                assert!(b2 == bn && h2 == h && w2 == w, "concat spatial mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(bn * total * hw);
        for bi in 0..bn {
            for (&p, &c) in parts.iter().zip(&chans) {
                data.extend_from_slice(&self.value(p).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let t = Tensor::from_vec(&[bn, total, h, w], data).expect("concat output");
        self.push(t, Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Block transform: `[B, 1, H, W]` image and `[64, 64]` filters (row k is
    /// filter k flattened row-major) to a `[B, 64, H/8, W/8]` coefficient map.
    pub fn block_dct(&mut self, img: Var, filters: Var) -> Var {
        let (bn, c, h, w) = dims4(self.shape(img));
        assert_eq!(c, 1, "block_dct takes single-channel images");
        assert!(
            h % BLOCK == 0 && w % BLOCK == 0,
            "block_dct needs 8-divisible dims"
        );
        assert_eq!(self.shape(filters), &[BLOCK_AREA, BLOCK_AREA]);
        let (hb, wb) = (h / BLOCK, w / BLOCK);
        let nb = hb * wb;
        let mut out = vec![T::zero(); bn * BLOCK_AREA * nb];
        let mut rows = vec![T::zero(); nb * BLOCK_AREA];
        let f = self.value(filters).data();
        for bi in 0..bn {
            gather_blocks(
                &self.value(img).data()[bi * h * w..(bi + 1) * h * w],
                h,
                w,
                &mut rows,
            );
            let dst = &mut out[bi * BLOCK_AREA * nb..(bi + 1) * BLOCK_AREA * nb];
            gemm(
                false,
                true,
                BLOCK_AREA,
                nb,
                BLOCK_AREA,
                f,
                &rows,
                T::zero(),
                dst,
            );
        }
        let t = Tensor::from_vec(&[bn, BLOCK_AREA, hb, wb], out).expect("dct output");
        self.push(t, Op::BlockDct { img, filters }, &[img, filters])
    }

    /// Transpose of [`Graph::block_dct`]: coefficient map back to `[B, 1, H, W]`.
    pub fn block_idct(&mut self, spec: Var, filters: Var) -> Var {
        let (bn, c, hb, wb) = dims4(self.shape(spec));
        assert_eq!(c, BLOCK_AREA, "block_idct takes 64 channels");
        assert_eq!(self.shape(filters), &[BLOCK_AREA, BLOCK_AREA]);
        let (h, w) = (hb * BLOCK, wb * BLOCK);
        let nb = hb * wb;
        let mut out = vec![T::zero(); bn * h * w];
        let mut pt = vec![T::zero(); BLOCK_AREA * nb];
        let f = self.value(filters).data();
        for bi in 0..bn {
            let s = &self.value(spec).data()[bi * BLOCK_AREA * nb..(bi + 1) * BLOCK_AREA * nb];
            gemm(
                true,
                false,
                BLOCK_AREA,
                nb,
                BLOCK_AREA,
                f,
                s,
                T::zero(),
                &mut pt,
            );
            scatter_blocks_t(&pt, h, w, &mut out[bi * h * w..(bi + 1) * h * w]);
        }
        let t = Tensor::from_vec(&[bn, 1, h, w], out).expect("idct output");
        self.push(t, Op::BlockIdct { spec, filters }, &[spec, filters])
    }

    /// Row-wise log-softmax of an `[N, K]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (n, k) = dims2(self.shape(x));
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let t = Tensor::from_vec(&[n, k], out).expect("log_softmax output");
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (n, k) = dims2(self.shape(x));
        let out = softmax_rows(self.value(x).data(), k);
        let t = Tensor::from_vec(&[n, k], out).expect("softmax output");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Picks `x[n, idx[n]]` from an `[N, K]` matrix.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Var {
        let (n, k) = dims2(self.shape(x));
        assert_eq!(idx.len(), n, "gather index count");
        let xv = self.value(x).data();
        let out: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < k, "gather index out of range");
                xv[r * k + c]
            })
            .collect();
        let t = Tensor::from_vec(&[n], out).expect("gather output");
        self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::MeanAll(x), &[x])
    }

    /// Unbiased (Bessel-corrected) variance of each row of an `[R, Q]` matrix.
    pub fn row_variance(&mut self, x: Var) -> Var {
        let (r, q) = dims2(self.shape(x));
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(q)
            .map(|row| bessel_variance(row))
            .collect();
        let t = Tensor::from_vec(&[r], out).expect("row_variance output");
        self.push(t, Op::RowVariance(x), &[x])
    }

    /// Mean of squared differences, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accum(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    accum(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accum(grads, *a, g.scale(*c));
                }
            }
            Op::ScalarMul { s, x } => {
                if self.needs(*s) {
                    let d: T = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum();
                    accum(grads, *s, Tensor::scalar(d));
                }
                if self.needs(*x) {
                    accum(grads, *x, g.scale(self.value(*s).data()[0]));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let d = g.zip_map(
                        self.value(*a),
                        |gv, xv| {
                            if xv > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        },
                    );
                    accum(grads, *a, d);
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv)));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    accum(grads, *a, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv)));
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                k,
                pad,
                per_sample,
            } => self.backprop_conv(g, *x, *w, *b, *k, *pad, *per_sample, grads),
            Op::Linear { x, w, b } => {
                let (n, i_dim) = dims2(self.shape(*x));
                let (o, _) = dims2(self.shape(*w));
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); n * i_dim];
                    gemm(
                        false,
                        false,
                        n,
                        i_dim,
                        o,
                        g.data(),
                        self.value(*w).data(),
                        T::zero(),
                        &mut dx,
                    );
                    accum(grads, *x, Tensor::from_vec(&[n, i_dim], dx).unwrap());
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * i_dim];
                    gemm(
                        true,
                        false,
                        o,
                        i_dim,
                        n,
                        g.data(),
                        self.value(*x).data(),
                        T::zero(),
                        &mut dw,
                    );
                    accum(grads, *w, Tensor::from_vec(&[o, i_dim], dw).unwrap());
                }
                if let Some(bv) = b {
                    if self.needs(*bv) {
                        let mut db = vec![T::zero(); o];
                        for row in g.data().chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d = *d + v;
                            }
                        }
                        accum(grads, *bv, Tensor::from_vec(&[o], db).unwrap());
                    }
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let (ar, ac) = dims2(self.shape(*a));
                let (br, bc) = dims2(self.shape(*b));
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    if ta {
                        gemm(tb, true, k, m, n, bv, g.data(), T::zero(), &mut da);
                    } else {
                        gemm(false, !tb, m, k, n, g.data(), bv, T::zero(), &mut da);
                    }
                    accum(grads, *a, Tensor::from_vec(&[ar, ac], da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if tb {
                        gemm(true, ta, n, k, m, g.data(), av, T::zero(), &mut db);
                    } else {
                        gemm(!ta, false, k, n, m, av, g.data(), T::zero(), &mut db);
                    }
                    accum(grads, *b, Tensor::from_vec(&[br, bc], db).unwrap());
                }
            }
            Op::Gap(x) => {
                if self.needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let hw = shape[2] * shape[3];
                    let inv = T::lit(1.0 / hw as f64);
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
                        .collect();
                    accum(grads, *x, Tensor::from_vec(&shape, data).unwrap());
                }
            }
            Op::ChannelScale { x, s } => {
                let shape = self.shape(*x).to_vec();
                let hw = shape[2] * shape[3];
                if self.needs(*x) {
                    let sv = self.value(*s).data();
                    let data: Vec<T> = g
                        .data()
                        .chunks(hw)
                        .zip(sv)
                        .flat_map(|(ch, &f)| ch.iter().map(move |&v| v * f))
                        .collect();
                    accum(grads, *x, Tensor::from_vec(&shape, data).unwrap());
                }
                if self.needs(*s) {
                    let data: Vec<T> = g
                        .data()
                        .chunks(hw)
                        .zip(self.value(*x).data().chunks(hw))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accum(grads, *s, Tensor::from_vec(self.shape(*s), data).unwrap());
                }
            }
            Op::ChannelAdd { x, s } => {
                let shape = self.shape(*x).to_vec();
                let hw = shape[2] * shape[3];
                if self.needs(*x) {
                    accum(grads, *x, g.clone());
                }
                if self.needs(*s) {
                    let data: Vec<T> = g
                        .data()
                        .chunks(hw)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    accum(grads, *s, Tensor::from_vec(self.shape(*s), data).unwrap());
                }
            }
            Op::Concat(parts) => {
                let (bn, total, h, w) = dims4(y.shape());
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(bn * c * hw);
                        for bi in 0..bn {
                            let start = (bi * total + offset) * hw;
                            data.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        accum(grads, p, Tensor::from_vec(&[bn, c, h, w], data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    accum(grads, *x, g.clone().reshape(self.shape(*x)).unwrap());
                }
            }
            Op::BlockDct { img, filters } => {
                let (bn, _, h, w) = dims4(self.shape(*img));
                let nb = (h / BLOCK) * (w / BLOCK);
                let f = self.value(*filters).data();
                if self.needs(*img) {
                    let mut dimg = vec![T::zero(); bn * h * w];
                    let mut pt = vec![T::zero(); BLOCK_AREA * nb];
                    for bi in 0..bn {
                        let gs = &g.data()[bi * BLOCK_AREA * nb..(bi + 1) * BLOCK_AREA * nb];
                        gemm(
                            true,
                            false,
                            BLOCK_AREA,
                            nb,
                            BLOCK_AREA,
                            f,
                            gs,
                            T::zero(),
                            &mut pt,
                        );
                        scatter_blocks_t(&pt, h, w, &mut dimg[bi * h * w..(bi + 1) * h * w]);
                    }
                    accum(grads, *img, Tensor::from_vec(&[bn, 1, h, w], dimg).unwrap());
                }
                if self.needs(*filters) {
                    let mut df = vec![T::zero(); BLOCK_AREA * BLOCK_AREA];
                    let mut rows = vec![T::zero(); nb * BLOCK_AREA];
                    for bi in 0..bn {
                        gather_blocks(
                            &self.value(*img).data()[bi * h * w..(bi + 1) * h * w],
                            h,
                            w,
                            &mut rows,
                        );
                        let gs = &g.data()[bi * BLOCK_AREA * nb..(bi + 1) * BLOCK_AREA * nb];
                        gemm(
                            false,
                            false,
                            BLOCK_AREA,
                            BLOCK_AREA,
                            nb,
                            gs,
                            &rows,
                            T::one(),
                            &mut df,
                        );
                    }
                    accum(
                        grads,
                        *filters,
                        Tensor::from_vec(&[BLOCK_AREA, BLOCK_AREA], df).unwrap(),
                    );
                }
            }
            Op::BlockIdct { spec, filters } => {
                let (bn, _, hb, wb) = dims4(self.shape(*spec));
                let (h, w) = (hb * BLOCK, wb * BLOCK);
                let nb = hb * wb;
                let f = self.value(*filters).data();
                let mut gpt = vec![T::zero(); BLOCK_AREA * nb];
                let mut dspec = self
                    .needs(*spec)
                    .then(|| vec![T::zero(); bn * BLOCK_AREA * nb]);
                let mut df = self
                    .needs(*filters)
                    .then(|| vec![T::zero(); BLOCK_AREA * BLOCK_AREA]);
                for bi in 0..bn {
                    gather_blocks_t(&g.data()[bi * h * w..(bi + 1) * h * w], h, w, &mut gpt);
                    if let Some(ds) = dspec.as_mut() {
                        let dst = &mut ds[bi * BLOCK_AREA * nb..(bi + 1) * BLOCK_AREA * nb];
                        gemm(
                            false,
                            false,
                            BLOCK_AREA,
                            nb,
                            BLOCK_AREA,
                            f,
                            &gpt,
                            T::zero(),
                            dst,
                        );
                    }
                    if let Some(dfv) = df.as_mut() {
                        let s = &self.value(*spec).data()
                            [bi * BLOCK_AREA * nb..(bi + 1) * BLOCK_AREA * nb];
                        gemm(
                            false,
                            true,
                            BLOCK_AREA,
                            BLOCK_AREA,
                            nb,
                            s,
                            &gpt,
                            T::one(),
                            dfv,
                        );
                    }
                }
                if let Some(ds) = dspec {
                    accum(
                        grads,
                        *spec,
                        Tensor::from_vec(&[bn, BLOCK_AREA, hb, wb], ds).unwrap(),
                    );
                }
                if let Some(dfv) = df {
                    accum(
                        grads,
                        *filters,
                        Tensor::from_vec(&[BLOCK_AREA, BLOCK_AREA], dfv).unwrap(),
                    );
                }
            }
            Op::LogSoftmax(x) => {
                if self.needs(*x) {
                    let k = y.shape()[1];
                    let mut dx = Vec::with_capacity(y.len());
                    for (gr, yr) in g.data().chunks(k).zip(y.data().chunks(k)) {
                        let gs: T = gr.iter().copied().sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| gv - yv.exp() * gs));
                    }
                    accum(grads, *x, Tensor::from_vec(y.shape(), dx).unwrap());
                }
            }
            Op::Softmax(x) => {
                if self.needs(*x) {
                    let k = y.shape()[1];
                    let mut dx = Vec::with_capacity(y.len());
                    for (gr, yr) in g.data().chunks(k).zip(y.data().chunks(k)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                    }
                    accum(grads, *x, Tensor::from_vec(y.shape(), dx).unwrap());
                }
            }
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let k = shape[1];
                    let mut dx = Tensor::zeros(&shape);
                    for (r, (&c, &gv)) in idx.iter().zip(g.data()).enumerate() {
                        dx.data_mut()[r * k + c] = gv;
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    accum(grads, *x, Tensor::full(self.shape(*x), g.data()[0]));
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let n = self.value(*x).len().max(1);
                    accum(
                        grads,
                        *x,
                        Tensor::full(self.shape(*x), g.data()[0] / T::lit(n as f64)),
                    );
                }
            }
            Op::RowVariance(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let q = xv.shape()[1];
                    let denom = T::lit((q - 1) as f64);
                    let two = T::lit(2.0);
                    let mut dx = Vec::with_capacity(xv.len());
                    for (row, &gv) in xv.data().chunks(q).zip(g.data()) {
                        let mean = row.iter().copied().sum::<T>() / T::lit(q as f64);
                        dx.extend(row.iter().map(|&v| gv * two * (v - mean) / denom));
                    }
                    accum(grads, *x, Tensor::from_vec(xv.shape(), dx).unwrap());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
        pad: usize,
        per_sample: bool,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (bn, ci, h, wd) = dims4(self.shape(x));
        let (_, co, ho, wo) = dims4(g.shape());
        let kk = ci * k * k;
        let hw_out = ho * wo;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let direct = k == 1 && pad == 0;
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        let mut dx = need_x.then(|| vec![T::zero(); bn * ci * h * wd]);
        let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
        let mut cols = vec![T::zero(); if direct { 0 } else { kk * hw_out }];
        let mut dcols = vec![T::zero(); if direct { 0 } else { kk * hw_out }];
        for bi in 0..bn {
            let gb = &g.data()[bi * co * hw_out..(bi + 1) * co * hw_out];
            let xb = &xv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
            let (wb, woff) = if per_sample {
                (&wv[bi * co * kk..(bi + 1) * co * kk], bi * co * kk)
            } else {
                (wv, 0)
            };
            if let Some(dwv) = dw.as_mut() {
                let rhs: &[T] = if direct {
                    xb
                } else {
                    im2col(xb, ci, h, wd, k, pad, &mut cols);
                    &cols
                };
                let dst = &mut dwv[woff..woff + co * kk];
                gemm(false, true, co, kk, hw_out, gb, rhs, T::one(), dst);
            }
            if let Some(dxv) = dx.as_mut() {
                let dst = &mut dxv[bi * ci * h * wd..(bi + 1) * ci * h * wd];
                if direct {
                    gemm(true, false, kk, hw_out, co, wb, gb, T::one(), dst);
                } else {
                    gemm(true, false, kk, hw_out, co, wb, gb, T::zero(), &mut dcols);
                    col2im(&dcols, ci, h, wd, k, pad, dst);
                }
            }
        }
        if let Some(d) = dx {
            accum(grads, x, Tensor::from_vec(self.shape(x), d).unwrap());
        }
        if let Some(d) = dw {
            accum(grads, w, Tensor::from_vec(self.shape(w), d).unwrap());
        }
        if let Some(bv) = b {
            if self.needs(bv) {
                let mut db = vec![T::zero(); co];
                for (c, ch) in g.data().chunks(hw_out).enumerate() {
                    db[c % co] = db[c % co] + ch.iter().copied().sum::<T>();
                }
                accum(grads, bv, Tensor::from_vec(&[co], db).unwrap());
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s = s + *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
    out
}

/// Variance with the `n - 1` denominator.
pub fn bessel_variance<T: Scalar>(row: &[T]) -> T {
    let n = row.len();
    if n < 2 {
        return T::zero();
    }
    let mean = row.iter().copied().sum::<T>() / T::lit(n as f64);
    row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::lit((n - 1) as f64)
}
