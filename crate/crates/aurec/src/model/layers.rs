//! Parameterised layer building blocks. Each struct owns the parameter ids
//! of one layer; `apply` pulls them onto a tape (optionally frozen, which
//! keeps them out of the gradient while still recording the pull).

use rand::Rng;

use crate::nn::{he_normal, ones, xavier_normal, zeros, ParamId, ParamStore, Scalar, Tape, Var};

/// Largest group count <= 8 that divides the channel count.
pub fn gn_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}

fn pull<S: Scalar>(t: &Tape<S>, store: &ParamStore<S>, id: ParamId, frozen: bool) -> Var {
    if frozen {
        t.param_frozen(store, id)
    } else {
        t.param(store, id)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            he_normal(&[cout, cin, k, k], cin * k * k, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), zeros(&[cout])));
        Conv { w, b, stride, pad }
    }

    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var, frozen: bool) -> Var {
        let w = pull(t, store, self.w, frozen);
        let b = self.b.map(|b| pull(t, store, b, frozen));
        t.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvT {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            he_normal(&[cin, cout, k, k], cin * k * k, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), zeros(&[cout])));
        ConvT { w, b, stride, pad }
    }

    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var, frozen: bool) -> Var {
        let w = pull(t, store, self.w, frozen);
        let b = self.b.map(|b| pull(t, store, b, frozen));
        t.conv_t2d(x, w, b, self.stride, self.pad)
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        Norm {
            g: store.add(format!("{name}.g"), ones(&[channels])),
            b: store.add(format!("{name}.b"), zeros(&[channels])),
            groups: gn_groups(channels),
        }
    }

    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var, frozen: bool) -> Var {
        let g = pull(t, store, self.g, frozen);
        let b = pull(t, store, self.b, frozen);
        t.group_norm(x, g, b, self.groups, 1e-5)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            xavier_normal(&[din, dout], din, dout, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), zeros(&[dout])));
        Linear { w, b }
    }

    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var, frozen: bool) -> Var {
        let w = pull(t, store, self.w, frozen);
        let b = self.b.map(|b| pull(t, store, b, frozen));
        t.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        LayerNorm {
            g: store.add(format!("{name}.g"), ones(&[dim])),
            b: store.add(format!("{name}.b"), zeros(&[dim])),
        }
    }

    pub fn apply<S: Scalar>(&self, t: &Tape<S>, store: &ParamStore<S>, x: Var, frozen: bool) -> Var {
        let g = pull(t, store, self.g, frozen);
        let b = pull(t, store, self.b, frozen);
        t.layer_norm(x, g, b, 1e-5)
    }
}
