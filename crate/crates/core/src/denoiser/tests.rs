use nalgebra::DMatrix;

use super::*;
use crate::diffusion::{build_schedule, Example};
use crate::rng;

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        n_tokens: 4,
        d_latent: 1,
        d_model: 8,
        n_layers: 4,
        layers_per_rat: 4,
        d_text: 3,
        d_time: 6,
        d_hidden: 8,
        recurrent: true,
        seed: 3,
    }
}

fn two_rat() -> DenoiserConfig {
    DenoiserConfig {
        n_tokens: 3,
        d_latent: 2,
        d_model: 5,
        n_layers: 2,
        layers_per_rat: 1,
        d_text: 3,
        d_time: 4,
        d_hidden: 6,
        recurrent: true,
        seed: 9,
    }
}

fn batch(cfg: &DenoiserConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut g = rng::seeded(seed);
    (0..n)
        .map(|_| Example {
            x0: rng::normal_vec(&mut g, cfg.latent_len()),
            cond: rng::normal_vec(&mut g, cfg.d_text),
        })
        .collect()
}

// Plain-loop reference forward for one sample, independent of the tape.

type M = DMatrix<f64>;

fn row_times(x: &[f64], w: &M) -> Vec<f64> {
    (0..w.ncols()).map(|j| (0..w.nrows()).map(|i| x[i] * w[(i, j)]).sum()).collect()
}

fn lin(x: &[f64], l: &Linear<M>) -> Vec<f64> {
    row_times(x, &l.w).iter().enumerate().map(|(j, v)| v + l.b[(0, j)]).collect()
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn sigm(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn hidden(x: &[f64], m: &Mlp<M>) -> Vec<f64> {
    lin(x, &m.hidden).into_iter().map(silu).collect()
}

fn reference(params: &DenoiserParams, x: &[f64], t: usize, cond: &[f64]) -> Vec<f64> {
    let cfg = &params.config;
    let net = &params.net;
    let (n, dl, dm) = (cfg.n_tokens, cfg.d_latent, cfg.d_model);
    let temb: Vec<f64> = {
        let half = cfg.d_time / 2;
        let mut e = vec![0.0; cfg.d_time];
        for i in 0..half {
            let w = 1.0 / 10000f64.powf(i as f64 / half as f64);
            e[i] = (t as f64 * w).sin();
            e[half + i] = (t as f64 * w).cos();
        }
        e
    };
    let mut c: Vec<Vec<f64>> = (0..n)
        .map(|tok| {
            let xi = &x[tok * dl..(tok + 1) * dl];
            lin(xi, &net.input).iter().enumerate().map(|(j, v)| v + net.pos[(tok, j)]).collect()
        })
        .collect();
    let mut h: Vec<f64> = lin(cond, &net.h0).into_iter().map(f64::tanh).collect();
    let g = &net.gru;
    for rat in &net.rats {
        if cfg.recurrent {
            let pre = |w: &M, u: &M, b: &M| -> Vec<f64> {
                let a = row_times(cond, w);
                let c = row_times(&h, u);
                (0..dm).map(|j| a[j] + c[j] + b[(0, j)]).collect()
            };
            let z: Vec<f64> = pre(&g.w_z, &g.u_z, &g.b_z).into_iter().map(sigm).collect();
            let r: Vec<f64> = pre(&g.w_r, &g.u_r, &g.b_r).into_iter().map(sigm).collect();
            let xn = row_times(cond, &g.w_n);
            let hn = row_times(&h, &g.u_n);
            h = (0..dm)
                .map(|j| {
                    let cand = (xn[j] + g.b_n[(0, j)] + r[j] * (hn[j] + g.b_un[(0, j)])).tanh();
                    (1.0 - z[j]) * cand + z[j] * h[j]
                })
                .collect();
        }
        let shift = lin(&hidden(&h, &rat.shift), &rat.shift.heads[0]);
        for row in c.iter_mut() {
            for j in 0..dm {
                row[j] += shift[j];
            }
        }
        for blk in &rat.blocks {
            let hm = hidden(&temb, &blk.modulation);
            let m: Vec<Vec<f64>> = blk.modulation.heads.iter().map(|l| lin(&hm, l)).collect();
            let hg = hidden(&temb, &blk.gate);
            let a: Vec<Vec<f64>> = blk.gate.heads.iter().map(|l| lin(&hg, l)).collect();

            let u: Vec<Vec<f64>> = c.iter().map(|r| (0..dm).map(|j| (1.0 + m[0][j]) * r[j] + m[1][j]).collect()).collect();
            let q: Vec<Vec<f64>> = u.iter().map(|r| row_times(r, &blk.wq)).collect();
            let k: Vec<Vec<f64>> = u.iter().map(|r| row_times(r, &blk.wk)).collect();
            let v: Vec<Vec<f64>> = u.iter().map(|r| row_times(r, &blk.wv)).collect();
            for i in 0..n {
                let s: Vec<f64> = (0..n).map(|j| (0..dm).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dm as f64).sqrt()).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let att: Vec<f64> = (0..dm).map(|d| (0..n).map(|j| e[j] / z * v[j][d]).sum()).collect();
                let o = row_times(&att, &blk.wo);
                for d in 0..dm {
                    c[i][d] += a[0][d] * o[d];
                }
            }
            for row in c.iter_mut() {
                let u: Vec<f64> = (0..dm).map(|j| (1.0 + m[2][j]) * row[j] + m[3][j]).collect();
                let f: Vec<f64> = lin(&u, &blk.ff1).into_iter().map(silu).collect();
                let f = lin(&f, &blk.ff2);
                for d in 0..dm {
                    row[d] += a[1][d] * f[d];
                }
            }
        }
    }
    c.iter().flat_map(|r| lin(r, &net.output)).collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = init_denoiser(&tiny()).unwrap();
    let b = init_denoiser(&tiny()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.content_hash(), b.content_hash());
    let c = init_denoiser(&DenoiserConfig { seed: 4, ..tiny() }).unwrap();
    assert_ne!(a.content_hash(), c.content_hash());
}

#[test]
fn closed_form_param_count() {
    for cfg in [tiny(), two_rat(), DenoiserConfig::default()] {
        let p = init_denoiser(&cfg).unwrap();
        assert_eq!(p.n_params(), param_count(&cfg));
        assert_eq!(p.net.flatten().len(), p.n_params());
    }
}

#[test]
fn rejects_bad_config() {
    let cfg = DenoiserConfig { n_layers: 5, ..tiny() };
    assert!(matches!(init_denoiser(&cfg), Err(Error::Config(_))));
}

#[test]
fn fresh_network_is_input_output_projection() {
    let p = init_denoiser(&two_rat()).unwrap();
    let cfg = &p.config;
    let mut g = rng::seeded(1);
    let x = rng::normal_vec(&mut g, cfg.latent_len());
    let expect: Vec<f64> = (0..cfg.n_tokens)
        .flat_map(|tok| {
            let e: Vec<f64> = lin(&x[tok * 2..tok * 2 + 2], &p.net.input)
                .iter()
                .enumerate()
                .map(|(j, v)| v + p.net.pos[(tok, j)])
                .collect();
            lin(&e, &p.net.output)
        })
        .collect();
    for t in [1, 7, 50] {
        let c = rng::normal_vec(&mut g, cfg.d_text);
        let got = denoise(&p, &x, t, &c).unwrap();
        assert_close(&got, &expect, 1e-12);
    }
}

#[test]
fn matches_plain_loop_reference() {
    for cfg in [tiny(), two_rat(), DenoiserConfig { recurrent: false, ..two_rat() }] {
        let mut p = init_denoiser(&cfg).unwrap();
        randomize(&mut p, 0.4, 11);
        let ex = batch(&cfg, 3, 2);
        let xs: Vec<Vec<f64>> = ex.iter().map(|e| e.x0.clone()).collect();
        let cs: Vec<Vec<f64>> = ex.iter().map(|e| e.cond.clone()).collect();
        let ts = [1, 17, 40];
        let got = denoise_batch(&p, &xs, &ts, &cs).unwrap();
        for i in 0..3 {
            assert_close(&got[i], &reference(&p, &xs[i], ts[i], &cs[i]), 1e-10);
        }
    }
}

#[test]
fn batch_rows_are_independent() {
    let cfg = two_rat();
    let mut p = init_denoiser(&cfg).unwrap();
    randomize(&mut p, 0.4, 5);
    let ex = batch(&cfg, 4, 6);
    let xs: Vec<Vec<f64>> = ex.iter().map(|e| e.x0.clone()).collect();
    let cs: Vec<Vec<f64>> = ex.iter().map(|e| e.cond.clone()).collect();
    let ts = [3, 1, 9, 30];
    let all = denoise_batch(&p, &xs, &ts, &cs).unwrap();
    for i in 0..4 {
        assert_eq!(all[i], denoise(&p, &xs[i], ts[i], &cs[i]).unwrap());
        assert_eq!(all[i].len(), cfg.latent_len());
    }
}

#[test]
fn shape_errors() {
    let p = init_denoiser(&tiny()).unwrap();
    assert!(matches!(denoise(&p, &[0.0; 3], 1, &[0.0; 3]), Err(Error::Shape(_))));
    assert!(matches!(denoise(&p, &[0.0; 4], 1, &[0.0; 2]), Err(Error::Shape(_))));
    assert!(matches!(denoise(&p, &[0.0; 4], 0, &[0.0; 3]), Err(Error::Timestep { .. })));
}

#[test]
fn time_embedding_oracle() {
    // d_time = 4: frequencies 1 and 1/100.
    let e = time_embedding(3, 4, 50).unwrap();
    let want = [3f64.sin(), 0.03f64.sin(), 3f64.cos(), 0.03f64.cos()];
    assert_close(&e, &want, 1e-15);
    let odd = time_embedding(2, 5, 50).unwrap();
    assert_eq!(odd[4], 0.0);
    assert!(time_embedding(0, 4, 50).is_err());
    assert!(time_embedding(51, 4, 50).is_err());
}

#[test]
fn time_embedding_injective_and_bounded() {
    let embs: Vec<Vec<f64>> = (1..=1000).map(|t| time_embedding(t, 16, 1000).unwrap()).collect();
    for e in &embs {
        assert!(e.iter().all(|v| v.abs() <= 1.0));
    }
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).powi(2)).sum();
            assert!(d > 1e-8, "t={} and t={} collide", i + 1, j + 1);
        }
    }
}

fn numeric_check(cfg: &DenoiserConfig) {
    let mut p = init_denoiser(cfg).unwrap();
    randomize(&mut p, 0.3, 21);
    let sched = build_schedule(50, 1e-4, 0.02).unwrap();
    let ex = batch(cfg, 2, 8);
    let mut g = rng::seeded(4);
    let draws = sample_draws(&ex, &sched, &mut g);
    let (_, grad) = loss_and_grad(&p, &ex, &draws, &sched).unwrap();
    let flat = p.net.flatten();
    let gflat = grad.flatten();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let mut q = p.clone();
        let mut f = flat.clone();
        f[i] += h;
        q.net.assign_flat(&f).unwrap();
        let lp = loss_and_grad(&q, &ex, &draws, &sched).unwrap().0;
        f[i] -= 2.0 * h;
        q.net.assign_flat(&f).unwrap();
        let lm = loss_and_grad(&q, &ex, &draws, &sched).unwrap().0;
        let num = (lp - lm) / (2.0 * h);
        let a = gflat[i];
        let scale = a.abs().max(num.abs());
        if scale < 1e-8 {
            continue;
        }
        let rel = (a - num).abs() / scale;
        worst = worst.max(rel);
        assert!(rel < 1e-4, "param {i} ({}): analytic {a}, numeric {num}", names_at(&p, i));
    }
    assert!(worst.is_finite());
}

fn names_at(p: &DenoiserParams, i: usize) -> String {
    let mut off = 0;
    let mut out = String::new();
    p.net.visit(|name, m| {
        if out.is_empty() && i < off + m.len() {
            out = name;
        }
        off += m.len();
    });
    out
}

#[test]
fn gradient_matches_finite_differences() {
    numeric_check(&tiny());
}

#[test]
fn gradient_matches_finite_differences_across_rat_blocks() {
    numeric_check(&two_rat());
    numeric_check(&DenoiserConfig { recurrent: false, ..two_rat() });
}

#[test]
fn gradient_reachability_at_init() {
    let cfg = two_rat();
    let p = init_denoiser(&cfg).unwrap();
    let sched = build_schedule(50, 1e-4, 0.02).unwrap();
    let ex = batch(&cfg, 3, 1);
    let mut g = rng::seeded(2);
    let (_, grad) = denoiser_grad(&p, &ex, &sched, &mut g).unwrap();
    let norm = |m: &DMatrix<f64>| m.norm();
    let blk = &grad.rats[0].blocks[0];
    assert!(norm(&grad.output.w) > 0.0);
    assert!(norm(&grad.input.w) > 0.0);
    assert!(norm(&blk.gate.heads[HEAD_ALPHA_ATTN].w) > 0.0);
    assert!(norm(&blk.gate.heads[HEAD_ALPHA_FF].w) > 0.0);
    assert!(norm(&grad.rats[0].shift.heads[0].w) > 0.0);
    // Everything behind a zero gate or a zero shift head is unreachable.
    for m in [&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.ff1.w, &blk.modulation.heads[0].w] {
        assert_eq!(norm(m), 0.0);
    }
    assert_eq!(norm(&grad.rats[0].shift.hidden.w), 0.0);
    assert_eq!(norm(&grad.gru.w_z), 0.0);
    assert_eq!(norm(&grad.h0.w), 0.0);
}

#[test]
fn condition_enters_only_through_shift() {
    // Zeroing every shift head removes all dependence on the text condition,
    // even with every other weight active: no multiplicative path from h.
    let cfg = two_rat();
    let mut p = init_denoiser(&cfg).unwrap();
    randomize(&mut p, 0.4, 13);
    for r in &mut p.net.rats {
        r.shift.heads[0].w.fill(0.0);
        r.shift.heads[0].b.fill(0.0);
    }
    let mut g = rng::seeded(3);
    let x = rng::normal_vec(&mut g, cfg.latent_len());
    let a = denoise(&p, &x, 5, &rng::normal_vec(&mut g, 3)).unwrap();
    let b = denoise(&p, &x, 5, &rng::normal_vec(&mut g, 3)).unwrap();
    assert_eq!(a, b);

    // With a shift head active, the output moves with the condition.
    let mut q = init_denoiser(&cfg).unwrap();
    randomize(&mut q, 0.4, 13);
    let a = denoise(&q, &x, 5, &[1.0, 0.0, 0.0]).unwrap();
    let b = denoise(&q, &x, 5, &[0.0, 1.0, 0.0]).unwrap();
    assert_ne!(a, b);
}

#[test]
fn scaled_loss_scales_gradient() {
    let cfg = two_rat();
    let mut p = init_denoiser(&cfg).unwrap();
    randomize(&mut p, 0.3, 2);
    let sched = build_schedule(50, 1e-4, 0.02).unwrap();
    let ex = batch(&cfg, 2, 3);
    let draws = sample_draws(&ex, &sched, &mut rng::seeded(1));
    // Duplicating the batch keeps the mean loss and the gradient.
    let doubled: Vec<Example> = ex.iter().chain(&ex).cloned().collect();
    let ddraws: Vec<_> = draws.iter().chain(&draws).cloned().collect();
    let (l1, g1) = loss_and_grad(&p, &ex, &draws, &sched).unwrap();
    let (l2, g2) = loss_and_grad(&p, &doubled, &ddraws, &sched).unwrap();
    assert!((l1 - l2).abs() < 1e-12 * l1.abs().max(1.0));
    assert_close(&g2.flatten(), &g1.flatten(), 1e-10);
}

#[test]
fn loss_matches_model_loss() {
    let cfg = tiny();
    let mut p = init_denoiser(&cfg).unwrap();
    randomize(&mut p, 0.3, 7);
    let sched = build_schedule(50, 1e-4, 0.02).unwrap();
    let ex = batch(&cfg, 3, 4);
    let draws = sample_draws(&ex, &sched, &mut rng::seeded(9));
    let (l, _) = loss_and_grad(&p, &ex, &draws, &sched).unwrap();
    let m = crate::diffusion::ddpm_loss_with_draws(&ex, &draws, &p, &sched).unwrap();
    assert!((l - m).abs() < 1e-10 * m.max(1.0));
}

#[test]
fn deterministic_gradient() {
    let cfg = tiny();
    let p = init_denoiser(&cfg).unwrap();
    let sched = build_schedule(50, 1e-4, 0.02).unwrap();
    let ex = batch(&cfg, 2, 4);
    let a = denoiser_grad(&p, &ex, &sched, &mut rng::seeded(5)).unwrap();
    let b = denoiser_grad(&p, &ex, &sched, &mut rng::seeded(5)).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}
