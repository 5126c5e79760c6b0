use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::obsmodel::SuperObsGrid;
use crate::toyatm::GridState;

use super::inputs::{assemble, NetInputs, Normalization};
use super::layers::{Down, Fusion, Head, Up};
use super::{NetConfig, NetError};

/// Which network: the full assimilation model or the background-only corrector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(rename = "assi")]
    Assimilation,
    #[serde(rename = "corr")]
    Correction,
}

#[derive(Debug, Clone, Copy)]
struct BgBranch {
    d1: Down,
    d2: Down,
    u1: Up,
    u2: Up,
    head: Head,
}

#[derive(Debug, Clone, Copy)]
struct SideBranch {
    d1: Down,
    d2: Down,
    u1: Up,
}

#[derive(Debug, Clone, Copy)]
struct ObsPath {
    obs: SideBranch,
    mixed: SideBranch,
    fusion: [Fusion; 2],
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    bg_mean: ParamId,
    bg_std: ParamId,
    obs_mean: ParamId,
    obs_std: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    bg: BgBranch,
    obs: Option<ObsPath>,
    norm: NormIds,
}

/// Network parameters plus the wiring that turns inputs into an analysis increment.
#[derive(Debug, Clone)]
pub struct DaNet<T: Scalar> {
    config: NetConfig,
    variant: Variant,
    store: ParamStore<T>,
    layout: Layout,
}

fn side<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, w: [usize; 3], rng: &mut ChaCha8Rng) -> SideBranch {
    SideBranch {
        d1: Down::new(store, &format!("{name}.down1"), cin, w[0], rng),
        d2: Down::new(store, &format!("{name}.down2"), w[0], w[1], rng),
        u1: Up::new(store, &format!("{name}.up1"), w[1], w[2], w[2], rng),
    }
}

fn build<T: Scalar>(cfg: &NetConfig, variant: Variant, seed: u64) -> (ParamStore<T>, Layout) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let w = cfg.widths;
    let norm = NormIds {
        bg_mean: s.add("norm.bg_mean", Tensor::zeros(&[cfg.channels]), false),
        bg_std: s.add("norm.bg_std", Tensor::full(&[cfg.channels], T::one()), false),
        obs_mean: s.add("norm.obs_mean", Tensor::zeros(&[cfg.obs_channels]), false),
        obs_std: s.add("norm.obs_std", Tensor::full(&[cfg.obs_channels], T::one()), false),
    };
    let bg = BgBranch {
        d1: Down::new(&mut s, "bg.down1", cfg.channels, w[0], &mut rng),
        d2: Down::new(&mut s, "bg.down2", w[0], w[1], &mut rng),
        u1: Up::new(&mut s, "bg.up1", w[1], w[2], w[2], &mut rng),
        u2: Up::new(&mut s, "bg.up2", w[2] + w[0], w[2], w[2], &mut rng),
        head: Head::new(&mut s, "bg.head", w[2], cfg.channels),
    };
    let obs = (variant == Variant::Assimilation).then(|| ObsPath {
        obs: side(&mut s, "obs", cfg.obs_planes(), w, &mut rng),
        mixed: side(&mut s, "mixed", cfg.mixed_planes(), w, &mut rng),
        fusion: [
            Fusion::new(&mut s, "fusion1", w[0], w, &mut rng),
            Fusion::new(&mut s, "fusion2", w[1], w, &mut rng),
        ],
    });
    (s, Layout { bg, obs, norm })
}

impl<T: Scalar> DaNet<T> {
    pub fn new(config: &NetConfig, variant: Variant, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let (store, layout) = build(config, variant, seed);
        Ok(Self {
            config: config.clone(),
            variant,
            store,
            layout,
        })
    }

    /// Wraps an existing parameter store, checking names and shapes against the layout.
    pub fn from_store(config: &NetConfig, variant: Variant, store: ParamStore<T>) -> Result<Self, NetError> {
        let template = Self::new(config, variant, 0)?;
        let expect: Vec<_> = template.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
        let got: Vec<_> = store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect();
        if expect != got {
            let first = expect
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expect.len(), got.len()));
            return Err(NetError::Config(format!("parameter set does not match the network: {first}")));
        }
        Ok(Self { store, ..template })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    /// Trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        self.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DaNet<U> {
        DaNet {
            config: self.config.clone(),
            variant: self.variant,
            store: self.store.cast(),
            layout: self.layout,
        }
    }

    pub fn normalization(&self) -> Normalization {
        let v = |id| self.store.value(id).data().iter().map(|x: &T| x.as_f64()).collect();
        let n = &self.layout.norm;
        Normalization {
            bg_mean: v(n.bg_mean),
            bg_std: v(n.bg_std),
            obs_mean: v(n.obs_mean),
            obs_std: v(n.obs_std),
        }
    }

    /// The corrector never reads observation statistics, so it accepts them empty.
    pub fn set_normalization(&mut self, norm: &Normalization) -> Result<(), NetError> {
        let n = self.layout.norm;
        let skip_obs = self.variant == Variant::Correction && norm.obs_mean.is_empty() && norm.obs_std.is_empty();
        for (id, vals) in [(n.bg_mean, &norm.bg_mean), (n.bg_std, &norm.bg_std), (n.obs_mean, &norm.obs_mean), (n.obs_std, &norm.obs_std)] {
            if skip_obs && (id == n.obs_mean || id == n.obs_std) {
                continue;
            }
            let p = self.store.get_mut(id);
            if p.value.len() != vals.len() {
                return Err(NetError::Input(format!("{}: {} values for {} entries", p.name, vals.len(), p.value.len())));
            }
            p.value.data_mut().iter_mut().zip(vals.iter()).for_each(|(d, &v)| *d = T::of(v));
        }
        Ok(())
    }

    pub fn assemble_inputs(&self, background: &GridState<T>, obs: Option<&SuperObsGrid>) -> Result<NetInputs<T>, NetError> {
        assemble(&self.config, &self.normalization(), background, obs)
    }

    /// Records the normalized increment `[C, H, W]` on `g`. With `with_obs`, the
    /// observation and mixed flows and both fusion modules contribute on the crop.
    pub fn increment(&self, g: &mut Graph<'_, T>, inputs: &NetInputs<T>, with_obs: bool) -> Result<Var, NetError> {
        let bg = &self.layout.bg;
        let x = g.input(inputs.bg_work.clone());
        let b1 = bg.d1.apply(g, x)?;
        let b2 = bg.d2.apply(g, b1)?;
        let u1 = bg.u1.apply(g, b2)?;
        let cat = g.concat(&[u1, b1])?;
        let u2 = bg.u2.apply(g, cat)?;
        let mut inc = bg.head.apply(g, u2)?;

        if with_obs {
            let path = self
                .layout
                .obs
                .ok_or_else(|| NetError::Input("the correction network has no observation path".into()))?;
            let (Some(obs), Some(mixed)) = (&inputs.obs, &inputs.mixed) else {
                return Err(NetError::Input("observations were not assembled".into()));
            };
            let c = self.config.crop;
            let o = g.input(obs.clone());
            let m = g.input(mixed.clone());
            let o1 = path.obs.d1.apply(g, o)?;
            let m1 = path.mixed.d1.apply(g, m)?;
            let bc1 = g.crop(b1, c.row / 2, c.col / 2, c.h / 2, c.w / 2)?;
            let [ub, m1, uo] = path.fusion[0].apply(g, bc1, o1, m1)?;
            let bc1 = g.add(bc1, ub)?;
            let o1 = g.add(o1, uo)?;

            let bc2 = bg.d2.apply(g, bc1)?;
            let o2 = path.obs.d2.apply(g, o1)?;
            let m2 = path.mixed.d2.apply(g, m1)?;
            let [ub, m2, uo] = path.fusion[1].apply(g, bc2, o2, m2)?;
            let bc2 = g.add(bc2, ub)?;
            let o2 = g.add(o2, uo)?;

            let cu1 = bg.u1.apply(g, bc2)?;
            let ou1 = path.obs.u1.apply(g, o2)?;
            let mu1 = path.mixed.u1.apply(g, m2)?;
            let s = g.add(cu1, ou1)?;
            let s = g.add(s, mu1)?;
            let cat = g.concat(&[s, bc1])?;
            let cu2 = bg.u2.apply(g, cat)?;
            let inc_crop = bg.head.apply(g, cu2)?;
            inc = g.paste(inc, inc_crop, c.row, c.col)?;
        }
        if (self.config.h, self.config.w) != self.config.work_extent() {
            inc = g.resize(inc, self.config.h, self.config.w)?;
        }
        Ok(inc)
    }

    /// `background + std ⊙ increment`, exact when the increment is zero.
    pub fn apply_increment(&self, inputs: &NetInputs<T>, inc: &Tensor<T>) -> GridState<T> {
        let std = &self.normalization().bg_std;
        let mut out = inputs.background.clone();
        for (ch, s) in std.iter().enumerate() {
            let s = T::of(*s);
            for (o, &d) in out.plane_mut(ch).iter_mut().zip(inc.plane(ch)) {
                *o = *o + s * d;
            }
        }
        GridState { fields: out }
    }

    fn run(&self, inputs: &NetInputs<T>, with_obs: bool) -> Result<GridState<T>, NetError> {
        let mut g = Graph::new(&self.store);
        let inc = self.increment(&mut g, inputs, with_obs)?;
        Ok(self.apply_increment(inputs, g.value(inc)))
    }

    /// Analysis from background and observations (the corrector ignores `obs`).
    pub fn forward(&self, background: &GridState<T>, obs: Option<&SuperObsGrid>) -> Result<GridState<T>, NetError> {
        match self.variant {
            Variant::Correction => self.forward_corr(background),
            Variant::Assimilation => {
                let obs = obs.ok_or_else(|| NetError::Input("the assimilation network needs observations".into()))?;
                let inputs = self.assemble_inputs(background, Some(obs))?;
                self.run(&inputs, true)
            }
        }
    }

    /// Background branch and increment head only.
    pub fn forward_corr(&self, background: &GridState<T>) -> Result<GridState<T>, NetError> {
        let inputs = self.assemble_inputs(background, None)?;
        self.run(&inputs, false)
    }

    /// Parameter ids of the increment head.
    pub fn head(&self) -> (ParamId, ParamId) {
        (self.layout.bg.head.w, self.layout.bg.head.b)
    }
}
