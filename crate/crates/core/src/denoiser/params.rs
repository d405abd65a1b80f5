//! Parameter containers, generic over the leaf type so the same layout holds
//! weights (`DMatrix<f64>`), gradients (`DMatrix<f64>`) and tape handles (`Var`).
//!
//! `visit` order is the canonical flattening order used by the optimizer,
//! checkpoints and content hashes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    /// Latent tokens per example (a flattened w×h grid).
    pub n_tokens: usize,
    /// Channels per latent token.
    pub d_latent: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub layers_per_rat: usize,
    pub d_text: usize,
    pub d_time: usize,
    pub d_hidden: usize,
    /// Advance the text state with the recurrent cell at each RAT block.
    /// When off, every RAT block shifts from the initial state alone.
    pub recurrent: bool,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_tokens: 16,
            d_latent: 1,
            d_model: 32,
            n_layers: 12,
            layers_per_rat: 4,
            d_text: 8,
            d_time: 16,
            d_hidden: 64,
            recurrent: true,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [self.n_tokens, self.d_latent, self.d_model, self.d_text, self.d_time, self.d_hidden];
        if widths.contains(&0) || self.n_layers == 0 || self.layers_per_rat == 0 {
            return Err(Error::Config("denoiser widths and depths must be >= 1".into()));
        }
        if !self.n_layers.is_multiple_of(self.layers_per_rat) {
            return Err(Error::Config(format!(
                "n_layers ({}) must be divisible by layers_per_rat ({})",
                self.n_layers, self.layers_per_rat
            )));
        }
        Ok(())
    }

    pub fn n_rat(&self) -> usize {
        self.n_layers / self.layers_per_rat
    }

    /// Length of one flattened latent.
    pub fn latent_len(&self) -> usize {
        self.n_tokens * self.d_latent
    }
}

/// `y = x·w + b` with `w: in×out` and `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

/// One hidden SiLU layer feeding one or more linear heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub heads: Vec<Linear<T>>,
}

/// Gated recurrent cell carrying the text state across RAT blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gru<T> {
    pub w_z: T,
    pub u_z: T,
    pub b_z: T,
    pub w_r: T,
    pub u_r: T,
    pub b_r: T,
    pub w_n: T,
    pub b_n: T,
    pub u_n: T,
    pub b_un: T,
}

pub const HEAD_GAMMA_ATTN: usize = 0;
pub const HEAD_BETA_ATTN: usize = 1;
pub const HEAD_GAMMA_FF: usize = 2;
pub const HEAD_BETA_FF: usize = 3;
pub const HEAD_ALPHA_ATTN: usize = 0;
pub const HEAD_ALPHA_FF: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    /// Time-conditioned scale and shift: heads γ_attn, β_attn, γ_ff, β_ff.
    pub modulation: Mlp<T>,
    /// Time-conditioned gates: heads α_attn, α_ff.
    pub gate: Mlp<T>,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatBlock<T> {
    /// Single head producing the channel-wise shift from the recurrent state.
    pub shift: Mlp<T>,
    pub blocks: Vec<Block<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net<T> {
    pub input: Linear<T>,
    pub pos: T,
    pub h0: Linear<T>,
    pub gru: Gru<T>,
    pub rats: Vec<RatBlock<T>>,
    pub output: Linear<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear { w: f(&self.w), b: f(&self.b) }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{p}.w"), &self.w);
        f(format!("{p}.b"), &self.b);
    }
    fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl<T> Mlp<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.map(f),
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
        }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        self.hidden.visit(&format!("{p}.hidden"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{p}.head{i}"), f);
        }
    }
    fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.hidden.visit_mut(f);
        self.heads.iter_mut().for_each(|h| h.visit_mut(f));
    }
}

impl<T> Gru<T> {
    fn fields(&self) -> [(&'static str, &T); 10] {
        [
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("b_r", &self.b_r),
            ("w_n", &self.w_n),
            ("b_n", &self.b_n),
            ("u_n", &self.u_n),
            ("b_un", &self.b_un),
        ]
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Gru<U> {
        Gru {
            w_z: f(&self.w_z),
            u_z: f(&self.u_z),
            b_z: f(&self.b_z),
            w_r: f(&self.w_r),
            u_r: f(&self.u_r),
            b_r: f(&self.b_r),
            w_n: f(&self.w_n),
            b_n: f(&self.b_n),
            u_n: f(&self.u_n),
            b_un: f(&self.b_un),
        }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        for (name, v) in self.fields() {
            f(format!("{p}.{name}"), v);
        }
    }
    fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        for v in [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_n,
            &mut self.b_n,
            &mut self.u_n,
            &mut self.b_un,
        ] {
            f(v);
        }
    }
}

impl<T> Block<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Block<U> {
        Block {
            modulation: self.modulation.map(f),
            gate: self.gate.map(f),
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
            ff1: self.ff1.map(f),
            ff2: self.ff2.map(f),
        }
    }
    fn visit<'a>(&'a self, p: &str, f: &mut impl FnMut(String, &'a T)) {
        self.modulation.visit(&format!("{p}.modulation"), f);
        self.gate.visit(&format!("{p}.gate"), f);
        f(format!("{p}.wq"), &self.wq);
        f(format!("{p}.wk"), &self.wk);
        f(format!("{p}.wv"), &self.wv);
        f(format!("{p}.wo"), &self.wo);
        self.ff1.visit(&format!("{p}.ff1"), f);
        self.ff2.visit(&format!("{p}.ff2"), f);
    }
    fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.modulation.visit_mut(f);
        self.gate.visit_mut(f);
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

impl<T> Net<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Net<U> {
        let f = &mut f;
        Net {
            input: self.input.map(f),
            pos: f(&self.pos),
            h0: self.h0.map(f),
            gru: self.gru.map(f),
            rats: self
                .rats
                .iter()
                .map(|r| RatBlock {
                    shift: r.shift.map(f),
                    blocks: r.blocks.iter().map(|b| b.map(f)).collect(),
                })
                .collect(),
            output: self.output.map(f),
        }
    }

    /// Calls `f(name, leaf)` for every leaf in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        let f = &mut f;
        self.input.visit("input", f);
        f("pos".into(), &self.pos);
        self.h0.visit("h0", f);
        self.gru.visit("gru", f);
        for (ri, r) in self.rats.iter().enumerate() {
            r.shift.visit(&format!("rat{ri}.shift"), f);
            for (bi, b) in r.blocks.iter().enumerate() {
                b.visit(&format!("rat{ri}.block{bi}"), f);
            }
        }
        self.output.visit("output", f);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut T)) {
        let f = &mut f;
        self.input.visit_mut(f);
        f(&mut self.pos);
        self.h0.visit_mut(f);
        self.gru.visit_mut(f);
        for r in &mut self.rats {
            r.shift.visit_mut(f);
            r.blocks.iter_mut().for_each(|b| b.visit_mut(f));
        }
        self.output.visit_mut(f);
    }
}

pub type Weights = Net<DMatrix<f64>>;

impl Net<DMatrix<f64>> {
    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, m| n += m.len());
        n
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.visit(|_, m| out.extend(m.iter()));
        out
    }

    /// Overwrites every leaf from `flat` in canonical order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.n_params(), flat.len())));
        }
        let mut off = 0;
        self.visit_mut(|m| {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, m| ok &= m.iter().all(|x| x.is_finite()));
        ok
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(|n, _| out.push(n));
        out
    }
}

/// Weights of the denoiser together with the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub net: Weights,
}

impl DenoiserParams {
    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    /// SHA-256 of the little-endian parameter payload, hex encoded.
    pub fn content_hash(&self) -> String {
        super::checkpoint::payload_hash(&self.net.flatten())
    }
}

/// Closed-form parameter count for a configuration.
pub fn param_count(c: &DenoiserConfig) -> usize {
    let (dm, dh, dt, dtime) = (c.d_model, c.d_hidden, c.d_text, c.d_time);
    let linear = |i: usize, o: usize| i * o + o;
    let io = linear(c.d_latent, dm) + c.n_tokens * dm + linear(dm, c.d_latent);
    let h0 = linear(dt, dm);
    let gru = 3 * (dt * dm + dm * dm + dm) + dm;
    let shift = linear(dm, dh) + linear(dh, dm);
    let block = linear(dtime, dh) + 4 * linear(dh, dm) + linear(dtime, dh) + 2 * linear(dh, dm) + 4 * dm * dm + linear(dm, dh) + linear(dh, dm);
    io + h0 + gru + c.n_rat() * shift + c.n_layers * block
}

fn normal(g: &mut rng::Rng, r: usize, c: usize, std: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| std * rng::normal(g))
}

fn linear(g: &mut rng::Rng, i: usize, o: usize) -> Linear<DMatrix<f64>> {
    Linear {
        w: normal(g, i, o, 1.0 / (i as f64).sqrt()),
        b: DMatrix::zeros(1, o),
    }
}

fn zero_linear(i: usize, o: usize) -> Linear<DMatrix<f64>> {
    Linear {
        w: DMatrix::zeros(i, o),
        b: DMatrix::zeros(1, o),
    }
}

/// Scaled-normal initialization. Gate heads and the RAT shift head start at
/// zero, so a fresh network is the input/output projection of `x_t` alone.
pub fn init_denoiser(config: &DenoiserConfig) -> Result<DenoiserParams> {
    config.validate()?;
    let c = config;
    let mut g = rng::seeded(c.seed);
    let (dm, dh) = (c.d_model, c.d_hidden);
    let input = linear(&mut g, c.d_latent, dm);
    let pos = normal(&mut g, c.n_tokens, dm, 0.02);
    let h0 = linear(&mut g, c.d_text, dm);
    let su = 1.0 / (dm as f64).sqrt();
    let sw = 1.0 / (c.d_text as f64).sqrt();
    let gru = Gru {
        w_z: normal(&mut g, c.d_text, dm, sw),
        u_z: normal(&mut g, dm, dm, su),
        b_z: DMatrix::zeros(1, dm),
        w_r: normal(&mut g, c.d_text, dm, sw),
        u_r: normal(&mut g, dm, dm, su),
        b_r: DMatrix::zeros(1, dm),
        w_n: normal(&mut g, c.d_text, dm, sw),
        b_n: DMatrix::zeros(1, dm),
        u_n: normal(&mut g, dm, dm, su),
        b_un: DMatrix::zeros(1, dm),
    };
    let rats = (0..c.n_rat())
        .map(|_| RatBlock {
            shift: Mlp {
                hidden: linear(&mut g, dm, dh),
                heads: vec![zero_linear(dh, dm)],
            },
            blocks: (0..c.layers_per_rat)
                .map(|_| Block {
                    modulation: Mlp {
                        hidden: linear(&mut g, c.d_time, dh),
                        heads: (0..4).map(|_| linear(&mut g, dh, dm)).collect(),
                    },
                    gate: Mlp {
                        hidden: linear(&mut g, c.d_time, dh),
                        heads: vec![zero_linear(dh, dm), zero_linear(dh, dm)],
                    },
                    wq: normal(&mut g, dm, dm, su),
                    wk: normal(&mut g, dm, dm, su),
                    wv: normal(&mut g, dm, dm, su),
                    wo: normal(&mut g, dm, dm, su),
                    ff1: linear(&mut g, dm, dh),
                    ff2: linear(&mut g, dh, dm),
                })
                .collect(),
        })
        .collect();
    let output = linear(&mut g, dm, c.d_latent);
    Ok(DenoiserParams {
        config: config.clone(),
        net: Net {
            input,
            pos,
            h0,
            gru,
            rats,
            output,
        },
    })
}

/// Replaces every weight with an independent normal draw of scale `std`;
/// used to probe the network away from its zero-gate starting point.
pub fn randomize(params: &mut DenoiserParams, std: f64, seed: u64) {
    let mut g = rng::seeded(seed);
    params.net.visit_mut(|m| m.iter_mut().for_each(|x| *x = std * rng::normal(&mut g)));
}
