use rand::Rng;

use crate::diffcore::{DiffError, Graph, ParamId, ParamStore, Scalar, Tensor, Var, LAYER_NORM_EPS};

/// 2×2 stride-2 convolution, layer norm, SiLU, 3×3 convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Down {
    proj_w: ParamId,
    proj_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
}

/// 3×3 convolution, layer norm, SiLU, 3×3 convolution to `4·out`, pixel shuffle ×2.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Up {
    conv1_w: ParamId,
    conv1_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

fn bias<T: Scalar>(store: &mut ParamStore<T>, name: String, n: usize) -> ParamId {
    store.add(name, Tensor::zeros(&[n]), true)
}

fn gain<T: Scalar>(store: &mut ParamStore<T>, name: String, n: usize) -> ParamId {
    store.add(name, Tensor::full(&[n], T::one()), true)
}

impl Down {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self {
            proj_w: store.add_kernel(format!("{name}.proj.w"), [cout, cin, 2, 2], rng),
            proj_b: bias(store, format!("{name}.proj.b"), cout),
            ln_g: gain(store, format!("{name}.norm.g"), cout),
            ln_b: bias(store, format!("{name}.norm.b"), cout),
            conv_w: store.add_kernel(format!("{name}.conv.w"), [cout, cout, 3, 3], rng),
            conv_b: bias(store, format!("{name}.conv.b"), cout),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, DiffError> {
        let (w, b) = (g.param(self.proj_w), g.param(self.proj_b));
        let y = g.conv2d(x, w, Some(b), 2)?;
        let (lg, lb) = (g.param(self.ln_g), g.param(self.ln_b));
        let y = g.layer_norm(y, lg, lb, LAYER_NORM_EPS)?;
        let y = g.silu(y);
        let (w, b) = (g.param(self.conv_w), g.param(self.conv_b));
        g.conv2d(y, w, Some(b), 1)
    }
}

impl Up {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        mid: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1_w: store.add_kernel(format!("{name}.conv1.w"), [mid, cin, 3, 3], rng),
            conv1_b: bias(store, format!("{name}.conv1.b"), mid),
            ln_g: gain(store, format!("{name}.norm.g"), mid),
            ln_b: bias(store, format!("{name}.norm.b"), mid),
            conv2_w: store.add_kernel(format!("{name}.conv2.w"), [4 * cout, mid, 3, 3], rng),
            conv2_b: bias(store, format!("{name}.conv2.b"), 4 * cout),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, DiffError> {
        let (w, b) = (g.param(self.conv1_w), g.param(self.conv1_b));
        let y = g.conv2d(x, w, Some(b), 1)?;
        let (lg, lb) = (g.param(self.ln_g), g.param(self.ln_b));
        let y = g.layer_norm(y, lg, lb, LAYER_NORM_EPS)?;
        let y = g.silu(y);
        let (w, b) = (g.param(self.conv2_w), g.param(self.conv2_b));
        let y = g.conv2d(y, w, Some(b), 1)?;
        g.pixel_shuffle(y, 2)
    }
}

/// Zero-initialized 3×3 output convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

impl Head {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            w: store.add(format!("{name}.w"), Tensor::zeros(&[cout, cin, 3, 3]), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[cout]), true),
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, DiffError> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), 1)
    }
}

/// U-net with two down and two up stages whose output is split into three equal
/// channel groups: background update, new mixed state, observation update.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Fusion {
    d1: Down,
    d2: Down,
    u1: Up,
    u2: Up,
    width: usize,
}

impl Fusion {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, width: usize, widths: [usize; 3], rng: &mut R) -> Self {
        let [w0, w1, w2] = widths;
        Self {
            d1: Down::new(store, &format!("{name}.down1"), 3 * width, w0, rng),
            d2: Down::new(store, &format!("{name}.down2"), w0, w1, rng),
            u1: Up::new(store, &format!("{name}.up1"), w1, w2, w2, rng),
            u2: Up::new(store, &format!("{name}.up2"), w2 + w0, w2, 3 * width, rng),
            width,
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, b: Var, o: Var, m: Var) -> Result<[Var; 3], DiffError> {
        let x = g.concat(&[b, o, m])?;
        let d1 = self.d1.apply(g, x)?;
        let d2 = self.d2.apply(g, d1)?;
        let u1 = self.u1.apply(g, d2)?;
        let cat = g.concat(&[u1, d1])?;
        let out = self.u2.apply(g, cat)?;
        let w = self.width;
        Ok([g.slice_channels(out, 0, w)?, g.slice_channels(out, w, w)?, g.slice_channels(out, 2 * w, w)?])
    }
}
