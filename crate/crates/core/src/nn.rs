//! Parameterized layers: thin handles over ids in a [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Square-kernel convolution with "same" zero padding and an optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub k: usize,
}

impl Conv {
    /// He-initialized weight scaled by `gain`, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_he(
            format!("{name}.w"),
            &[cout, cin, k, k],
            cin * k * k,
            gain,
            rng,
        );
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[cout]));
        Conv { w, b, k }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|id| g.param(store, id));
        g.conv2d(x, w, b, self.k / 2)
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_he(format!("{name}.w"), &[cout, cin], cin, gain, rng);
        let b = store.add_zeros(format!("{name}.b"), &[cout]);
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, Some(b))
    }
}

/// Learned scalar multiplier.
#[derive(Clone, Debug)]
pub struct Gain(pub ParamId);

impl Gain {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, init: f64) -> Self {
        Gain(store.add_scalar(name, init))
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let s = g.param(store, self.0);
        g.scalar_mul(s, x)
    }
}
