//! The ε-predictor.
//!
//! Layout, for a batch of `B` latents of `n_tokens` tokens each (rows are
//! tokens, stacked sample by sample):
//!
//! ```text
//! c   = x·W_in + b_in + pos                      (B·n × d_model)
//! h   = tanh(cond·W_h0 + b_h0)                   (B × d_model)
//! for each RAT block:
//!     h = gru(h, cond)
//!     c = c + shift_mlp(h)                       same shift for every token
//!     for each transformer block:
//!         γa, βa, γf, βf = modulation_mlp(temb)
//!         αa, αf         = gate_mlp(temb)
//!         c = c + αa ⊙ attn((1 + γa) ⊙ c + βa)
//!         c = c + αf ⊙ ff((1 + γf) ⊙ c + βf)
//! eps = c·W_out + b_out
//! ```
//!
//! The text condition reaches the latent only through the additive RAT shift.
//! Time reaches it only through the block modulation and gates.

mod checkpoint;
mod params;
mod tape;

use nalgebra::DMatrix;

pub use checkpoint::{load_checkpoint, payload_hash, save_checkpoint};
pub use params::{
    init_denoiser, param_count, randomize, Block, DenoiserConfig, DenoiserParams, Gru, Linear, Mlp, Net, RatBlock, Weights,
    HEAD_ALPHA_ATTN, HEAD_ALPHA_FF, HEAD_BETA_ATTN, HEAD_BETA_FF, HEAD_GAMMA_ATTN, HEAD_GAMMA_FF,
};
pub use tape::{Tape, Var};

use crate::diffusion::{noisy_batch, sample_draws, Draw, EpsModel, Example, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Sinusoidal embedding at geometric frequencies `10000^(−i/half)`:
/// sines in the first half, cosines in the second, a trailing zero when
/// `d_time` is odd.
pub fn time_embedding(t: usize, d_time: usize, max_t: usize) -> Result<Vec<f64>> {
    if t == 0 || t > max_t {
        return Err(Error::Timestep { t, max: max_t });
    }
    Ok(sinusoid(t, d_time))
}

fn sinusoid(t: usize, d_time: usize) -> Vec<f64> {
    let half = d_time / 2;
    let mut e = vec![0.0; d_time];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        e[i] = arg.sin();
        e[half + i] = arg.cos();
    }
    e
}

fn mlp_hidden(tape: &mut Tape, mlp: &Mlp<Var>, x: Var) -> Var {
    let h = tape.matmul(x, mlp.hidden.w);
    let h = tape.add_row(h, mlp.hidden.b);
    tape.silu(h)
}

fn linear(tape: &mut Tape, l: &Linear<Var>, x: Var) -> Var {
    let y = tape.matmul(x, l.w);
    tape.add_row(y, l.b)
}

fn gru_step(tape: &mut Tape, g: &Gru<Var>, h: Var, cond: Var) -> Var {
    let gate = |tape: &mut Tape, w: Var, u: Var, b: Var| {
        let a = tape.matmul(cond, w);
        let c = tape.matmul(h, u);
        let s = tape.add(a, c);
        let s = tape.add_row(s, b);
        tape.sigmoid(s)
    };
    let z = gate(tape, g.w_z, g.u_z, g.b_z);
    let r = gate(tape, g.w_r, g.u_r, g.b_r);
    let xn = tape.matmul(cond, g.w_n);
    let xn = tape.add_row(xn, g.b_n);
    let hn = tape.matmul(h, g.u_n);
    let hn = tape.add_row(hn, g.b_un);
    let rh = tape.mul(r, hn);
    let pre = tape.add(xn, rh);
    let cand = tape.tanh(pre);
    // (1 − z)·cand + z·h
    let diff = tape.sub(h, cand);
    let zd = tape.mul(z, diff);
    tape.add(cand, zd)
}

/// Applies `c + α ⊙ sublayer((1 + γ) ⊙ c + β)` with per-sample `γ, β, α`
/// broadcast over the sample's tokens.
fn modulated(tape: &mut Tape, c: Var, gamma: Var, beta: Var, alpha: Var, n: usize, sub: impl FnOnce(&mut Tape, Var) -> Var) -> Var {
    let g = tape.repeat_rows(gamma, n);
    let g = tape.one_plus(g);
    let b = tape.repeat_rows(beta, n);
    let a = tape.repeat_rows(alpha, n);
    let u = tape.mul(g, c);
    let u = tape.add(u, b);
    let y = sub(tape, u);
    let y = tape.mul(a, y);
    tape.add(c, y)
}

fn block_forward(tape: &mut Tape, blk: &Block<Var>, c: Var, temb: Var, n: usize) -> Var {
    let hm = mlp_hidden(tape, &blk.modulation, temb);
    let heads: Vec<Var> = blk.modulation.heads.iter().map(|h| linear(tape, h, hm)).collect();
    let hg = mlp_hidden(tape, &blk.gate, temb);
    let gates: Vec<Var> = blk.gate.heads.iter().map(|h| linear(tape, h, hg)).collect();

    let c = modulated(tape, c, heads[HEAD_GAMMA_ATTN], heads[HEAD_BETA_ATTN], gates[HEAD_ALPHA_ATTN], n, |tape, u| {
        let q = tape.matmul(u, blk.wq);
        let k = tape.matmul(u, blk.wk);
        let v = tape.matmul(u, blk.wv);
        let a = tape.attention(q, k, v, n);
        tape.matmul(a, blk.wo)
    });
    modulated(tape, c, heads[HEAD_GAMMA_FF], heads[HEAD_BETA_FF], gates[HEAD_ALPHA_FF], n, |tape, u| {
        let f = linear(tape, &blk.ff1, u);
        let f = tape.silu(f);
        linear(tape, &blk.ff2, f)
    })
}

/// Records the forward pass of `net` on `tape` and returns the output node.
/// `x` is `B·n_tokens × d_latent`, `temb` is `B × d_time`, `cond` is `B × d_text`.
pub fn forward(tape: &mut Tape, cfg: &DenoiserConfig, net: &Net<Var>, x: Var, temb: Var, cond: Var) -> Var {
    let n = cfg.n_tokens;
    let batch = tape.value(x).nrows() / n;
    let c = linear(tape, &net.input, x);
    let pos = tape.tile_rows(net.pos, batch);
    let mut c = tape.add(c, pos);

    let h = linear(tape, &net.h0, cond);
    let mut h = tape.tanh(h);
    for rat in &net.rats {
        if cfg.recurrent {
            h = gru_step(tape, &net.gru, h, cond);
        }
        let hs = mlp_hidden(tape, &rat.shift, h);
        let shift = linear(tape, &rat.shift.heads[0], hs);
        let shift = tape.repeat_rows(shift, n);
        c = tape.add(c, shift);
        for blk in &rat.blocks {
            c = block_forward(tape, blk, c, temb, n);
        }
    }
    linear(tape, &net.output, c)
}

struct Bound {
    tape: Tape,
    vars: Net<Var>,
    out: Var,
}

fn bind(params: &DenoiserParams, x_t: &[Vec<f64>], t: &[usize], cond: &[Vec<f64>]) -> Result<Bound> {
    let cfg = &params.config;
    let b = x_t.len();
    if b == 0 || t.len() != b || cond.len() != b {
        return Err(Error::Shape(format!("batch sizes differ: x {b}, t {}, cond {}", t.len(), cond.len())));
    }
    if let Some(bad) = x_t.iter().find(|x| x.len() != cfg.latent_len()) {
        return Err(Error::Shape(format!("latent has length {}, expected {}", bad.len(), cfg.latent_len())));
    }
    if let Some(bad) = cond.iter().find(|c| c.len() != cfg.d_text) {
        return Err(Error::Shape(format!("condition has length {}, expected {}", bad.len(), cfg.d_text)));
    }
    if let Some(&bad) = t.iter().find(|&&t| t == 0) {
        return Err(Error::Timestep { t: bad, max: usize::MAX });
    }
    let n = cfg.n_tokens;
    let dl = cfg.d_latent;
    let x = DMatrix::from_fn(b * n, dl, |r, c| x_t[r / n][(r % n) * dl + c]);
    let rows: Vec<Vec<f64>> = t.iter().map(|&t| sinusoid(t, cfg.d_time)).collect();
    let temb = DMatrix::from_fn(b, cfg.d_time, |r, c| rows[r][c]);
    let cm = DMatrix::from_fn(b, cfg.d_text, |r, c| cond[r][c]);

    let mut tape = Tape::new();
    let vars = params.net.map(|m| tape.leaf(m.clone()));
    let x = tape.leaf(x);
    let temb = tape.leaf(temb);
    let cm = tape.leaf(cm);
    let out = forward(&mut tape, cfg, &vars, x, temb, cm);
    Ok(Bound { tape, vars, out })
}

fn unflatten_rows(m: &DMatrix<f64>, b: usize, n: usize) -> Vec<Vec<f64>> {
    let dl = m.ncols();
    (0..b)
        .map(|s| {
            let mut v = Vec::with_capacity(n * dl);
            for tok in 0..n {
                for c in 0..dl {
                    v.push(m[(s * n + tok, c)]);
                }
            }
            v
        })
        .collect()
}

/// Batched ε prediction. Latents are flattened token-major.
pub fn denoise_batch(params: &DenoiserParams, x_t: &[Vec<f64>], t: &[usize], cond: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let bound = bind(params, x_t, t, cond)?;
    Ok(unflatten_rows(bound.tape.value(bound.out), x_t.len(), params.config.n_tokens))
}

pub fn denoise(params: &DenoiserParams, x_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
    Ok(denoise_batch(params, &[x_t.to_vec()], &[t], &[cond.to_vec()])?.remove(0))
}

impl EpsModel for DenoiserParams {
    fn predict_eps(&self, x_t: &[Vec<f64>], t: &[usize], cond: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        denoise_batch(self, x_t, t, cond)
    }
}

/// Loss and exact gradient of the ε-prediction loss under fixed draws.
pub fn loss_and_grad(params: &DenoiserParams, batch: &[Example], draws: &[Draw], sched: &NoiseSchedule) -> Result<(f64, Weights)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch"));
    }
    let x_t = noisy_batch(batch, draws, sched)?;
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let conds: Vec<Vec<f64>> = batch.iter().map(|e| e.cond.clone()).collect();
    let Bound { mut tape, vars, out } = bind(params, &x_t, &ts, &conds)?;
    let n = params.config.n_tokens;
    let dl = params.config.d_latent;
    let target = DMatrix::from_fn(batch.len() * n, dl, |r, c| draws[r / n].eps[(r % n) * dl + c]);
    let loss = tape.squared_error(out, target, 1.0 / batch.len() as f64);
    let value = tape.value(loss)[(0, 0)];
    let grads = tape.backward(loss);
    let g = vars.map(|v| {
        let shape = tape.value(*v).shape();
        grads[v.index()].clone().unwrap_or_else(|| DMatrix::zeros(shape.0, shape.1))
    });
    Ok((value, g))
}

/// Samples `(t, ε)` per example from `rng`, then returns loss and gradient.
pub fn denoiser_grad(params: &DenoiserParams, batch: &[Example], sched: &NoiseSchedule, rng: &mut Rng) -> Result<(f64, Weights)> {
    let draws = sample_draws(batch, sched, rng);
    loss_and_grad(params, batch, &draws, sched)
}

#[cfg(test)]
mod tests;
