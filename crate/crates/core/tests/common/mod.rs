//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use moie_core::carve::{cumulative_weight, residual_weight};
use moie_core::diffcore::{bce_with_logits, cross_entropy, kd_loss, Activation, Dense, Mlp, Tape, Tensor, Var};
use moie_core::folx::{self, FOLRule};
use moie_core::models::{mdn_normalize, EntropyExpert, MdnMode, MdnState, Selector};
use moie_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Places `ps` on the tape as trainable leaves.
pub fn leaves(tape: &mut Tape, ps: &[Tensor]) -> Vec<Var> {
    ps.iter().map(|p| tape.param(p.clone())).collect()
}

/// Largest relative difference between tape gradients and central finite
/// differences over every entry of every parameter. `f` builds the loss from
/// parameter values and returns it with the leaves holding them, in order.
pub fn grad_check(params: &[Tensor], f: impl Fn(&mut Tape, &[Tensor]) -> Result<(Var, Vec<Var>)>) -> f64 {
    let value = |ps: &[Tensor]| {
        let mut tape = Tape::new();
        let (loss, _) = f(&mut tape, ps).unwrap();
        tape.value(loss).item().unwrap()
    };
    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, params).unwrap();
    let grads = tape.backward(loss).unwrap().collect(&vars, &tape);

    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (pi, g) in grads.iter().enumerate() {
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + FD_STEP;
            let up = value(&work);
            work[pi].data_mut()[e] = orig - FD_STEP;
            let down = value(&work);
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[e];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// [`grad_check`] for losses built directly from plain leaves.
pub fn grad_check_leaves(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    grad_check(params, |t, ps| {
        let vars = leaves(t, ps);
        Ok((f(t, &vars)?, vars))
    })
}

fn mlp_params(m: &Mlp) -> Vec<Tensor> {
    m.layers().iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
}

fn mlp_from(params: &[Var], acts: &[Activation]) -> Vec<(Var, Var, Activation)> {
    acts.iter().enumerate().map(|(i, &a)| (params[2 * i], params[2 * i + 1], a)).collect()
}

fn forward(tape: &mut Tape, x: Var, layers: &[(Var, Var, Activation)]) -> Result<Var> {
    let mut h = x;
    for &(w, b, act) in layers {
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        h = match act {
            Activation::Relu => tape.relu(z),
            Activation::Sigmoid => tape.sigmoid(z),
            Activation::Identity => z,
        };
    }
    Ok(h)
}

/// One gradient-check family: name and worst error over its configurations.
pub struct GradCase {
    pub name: &'static str,
    pub configs: usize,
    pub worst: f64,
}

fn family(name: &'static str, configs: usize, run: impl Fn(u64) -> f64) -> GradCase {
    let worst = (0..configs as u64).map(run).fold(0.0, f64::max);
    GradCase { name, configs, worst }
}

/// The full gradient suite, `configs` random configurations per family.
pub fn gradient_suite(configs: usize) -> Vec<GradCase> {
    vec![
        family("dense relu + squared loss", configs, |s| {
            let mut r = rng(100 + s);
            let (n, i, o) = (r.random_range(2..6), r.random_range(1..5), r.random_range(1..5));
            let x = uniform(n, i, -1.0, 1.0, &mut r);
            let layer = Dense::init(i, o, Activation::Relu, &mut r);
            let b = uniform(1, o, -0.5, 0.5, &mut r);
            grad_check_leaves(&[layer.weight, b], |t, p| {
                let xv = t.constant(x.clone());
                let h = forward(t, xv, &mlp_from(p, &[Activation::Relu]))?;
                let sq = t.square(h);
                Ok(t.mean(sq))
            })
        }),
        family("dense sigmoid + squared loss", configs, |s| {
            let mut r = rng(200 + s);
            let (n, i, o) = (r.random_range(2..6), r.random_range(1..5), r.random_range(1..5));
            let x = uniform(n, i, -2.0, 2.0, &mut r);
            let w = uniform(i, o, -1.0, 1.0, &mut r);
            let b = uniform(1, o, -1.0, 1.0, &mut r);
            grad_check_leaves(&[w, b, x], |t, p| {
                let h = forward(t, p[2], &mlp_from(p, &[Activation::Sigmoid]))?;
                let sq = t.square(h);
                Ok(t.sum(sq))
            })
        }),
        family("2-layer mlp + cross-entropy", configs, |s| {
            let mut r = rng(300 + s);
            let (n, d, h, k) = (r.random_range(2..8), r.random_range(1..6), r.random_range(2..6), r.random_range(2..4));
            let x = uniform(n, d, -1.0, 1.0, &mut r);
            let y = labels(n, k, &mut r);
            let mut ps = mlp_params(&Mlp::new(&[d, h, k], Activation::Relu, Activation::Identity, &mut r).unwrap());
            ps[1] = uniform(1, h, -0.3, 0.3, &mut r);
            grad_check_leaves(&ps, |t, p| {
                let xv = t.constant(x.clone());
                let logits = forward(t, xv, &mlp_from(p, &[Activation::Relu, Activation::Identity]))?;
                cross_entropy(t, logits, &y)
            })
        }),
        family("bce with logits", configs, |s| {
            let mut r = rng(400 + s);
            let (n, k) = (r.random_range(1..8), r.random_range(1..4));
            let logits = uniform(n, k, -4.0, 4.0, &mut r);
            let targets =
                Tensor::matrix(n, k, (0..n * k).map(|_| f64::from(r.random_range(0..2u8))).collect()).unwrap();
            grad_check_leaves(&[logits], |t, p| {
                let per = bce_with_logits(t, p[0], &targets)?;
                Ok(t.mean(per))
            })
        }),
        family("kd loss", configs, |s| {
            let mut r = rng(500 + s);
            let (n, k) = (r.random_range(1..8), r.random_range(2..5));
            let student = uniform(n, k, -3.0, 3.0, &mut r);
            let teacher = uniform(n, k, -3.0, 3.0, &mut r);
            let y = labels(n, k, &mut r);
            let alpha = r.random_range(0.0..1.0);
            let temp = r.random_range(0.5..20.0);
            grad_check_leaves(&[student], |t, p| kd_loss(t, p[0], &teacher, &y, alpha, temp))
        }),
        family("entropy layer + cross-entropy + entropy penalty", configs, |s| {
            let mut r = rng(600 + s);
            let (n, m, h, k) = (r.random_range(2..6), r.random_range(2..7), r.random_range(2..5), r.random_range(2..4));
            let temp = r.random_range(0.3..2.0);
            let lambda = r.random_range(0.0..0.1);
            let mut expert = EntropyExpert::new(m, k, h, temp, lambda, &mut r).unwrap();
            expert.gamma = uniform(k, m, -1.0, 1.0, &mut r);
            let c = uniform(n, m, 0.0, 1.0, &mut r);
            let y = labels(n, k, &mut r);
            let params: Vec<Tensor> = expert.params_mut().into_iter().map(|p| p.clone()).collect();
            grad_check(&params, |t, ps| {
                let mut e = expert.clone();
                for (dst, src) in e.params_mut().into_iter().zip(ps) {
                    *dst = src.clone();
                }
                let bound = e.bind(t);
                let cv = t.constant(c.clone());
                let (logits, entropy) = bound.forward(t, cv)?;
                let ce = cross_entropy(t, logits, &y)?;
                let pen = t.scale(entropy, lambda);
                Ok((t.add(ce, pen)?, bound.vars()))
            })
        }),
        family("selector + selective kd risk + coverage penalty", configs, |s| {
            let mut r = rng(700 + s);
            let (n, m, h, k) = (r.random_range(3..8), r.random_range(1..6), r.random_range(1..5), r.random_range(2..4));
            let c = uniform(n, m, 0.0, 1.0, &mut r);
            let student = uniform(n, k, -2.0, 2.0, &mut r);
            let teacher = uniform(n, k, -2.0, 2.0, &mut r);
            let y = labels(n, k, &mut r);
            let tau = r.random_range(0.6..0.95);
            let sel = Selector::new(m, h, &mut r).unwrap();
            let mut ps = mlp_params(&sel.body);
            ps.push(student);
            let acts = [Activation::Relu, Activation::Sigmoid];
            grad_check_leaves(&ps, |t, p| {
                let cv = t.constant(c.clone());
                let pi = forward(t, cv, &mlp_from(p, &acts))?;
                let per = moie_core::diffcore::kd_loss_per_sample(t, p[4], &teacher, &y, 0.9, 10.0)?;
                let weighted = t.mul(pi, per)?;
                let num = t.sum(weighted);
                let den = t.sum(pi);
                let risk = t.div_scalar(num, den)?;
                let zeta = t.mean(pi);
                let gap = t.scale(zeta, -1.0);
                let gap = t.add_scalar(gap, tau);
                let gap = t.relu(gap);
                let pen = t.square(gap);
                let pen = t.scale(pen, 32.0);
                t.add(risk, pen)
            })
        }),
    ]
}

/// Largest |Σ_k cumulative_weight + residual − 1| over `tuples` random
/// selector tuples of length 1..=`max_k`.
pub fn telescoping_error(tuples: usize, max_k: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..tuples {
        let k = r.random_range(1..=max_k);
        let pis: Vec<f64> = (0..k)
            .map(|_| match r.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => r.random_range(0.0..1.0),
            })
            .collect();
        let total: f64 = (1..=k).map(|j| cumulative_weight(&pis, j).unwrap()).sum::<f64>() + residual_weight(&pis);
        worst = worst.max((total - 1.0).abs());
    }
    worst
}

/// Independent least squares by Gauss-Jordan elimination with partial
/// pivoting on the normal equations of `[1, x]`. Returns the intercept
/// followed by one coefficient per column of `x`.
pub fn ols_fit(x: &Tensor, y: &[f64]) -> Vec<f64> {
    let (n, k) = (x.rows(), x.cols());
    let p = k + 1;
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..n {
        let mut row = vec![1.0];
        row.extend_from_slice(x.row(i));
        for r in 0..p {
            for c in 0..p {
                a[r][c] += row[r] * row[c];
            }
            a[r][p] += row[r] * y[i];
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        for c in col..=p {
            a[col][c] /= d;
        }
        for r in 0..p {
            if r != col {
                let f = a[r][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..p).map(|r| a[r][p]).collect()
}

pub fn ols_slopes(meta: &Tensor, y: &[f64]) -> Vec<f64> {
    ols_fit(meta, y)[1..].to_vec()
}

pub struct MdnCheck {
    pub max_slope: f64,
    pub max_mean_shift: f64,
}

/// Train-mode MDN on random batches: post-hoc OLS slopes of every output
/// column on every metadata column, and mean shifts with centered metadata.
pub fn mdn_check(batches: usize, seed: u64) -> MdnCheck {
    let mut r = rng(seed);
    let (mut max_slope, mut max_mean_shift) = (0.0f64, 0.0f64);
    for _ in 0..batches {
        let n = r.random_range(16..96);
        let k = r.random_range(1..4);
        let w = r.random_range(1..6);
        let mut meta = uniform(n, k, -1.0, 1.0, &mut r);
        let mix = uniform(k, w, -3.0, 3.0, &mut r);
        let noise = uniform(n, w, -1.0, 1.0, &mut r);
        let z = meta.matmul(&mix).unwrap().zip_map(&noise, |a, b| a + b).unwrap().map(|v| v + 2.0);
        let mut st = MdnState::new(0, k, w, 0.9).unwrap();
        let out = mdn_normalize(&z, &meta, &mut st, MdnMode::Train).unwrap();
        for j in 0..w {
            for s in ols_slopes(&meta, &out.column(j)) {
                max_slope = max_slope.max(s.abs());
            }
        }

        for c in 0..k {
            let col = meta.column(c);
            let mean = col.iter().sum::<f64>() / n as f64;
            for i in 0..n {
                let v = meta.get(i, c) - mean;
                meta.set(i, c, v);
            }
        }
        let mut st = MdnState::new(0, k, w, 0.9).unwrap();
        let out = mdn_normalize(&z, &meta, &mut st, MdnMode::Train).unwrap();
        for j in 0..w {
            let before = z.column(j).iter().sum::<f64>() / n as f64;
            let after = out.column(j).iter().sum::<f64>() / n as f64;
            max_mean_shift = max_mean_shift.max((before - after).abs());
        }
    }
    MdnCheck { max_slope, max_mean_shift }
}

/// Every boolean vector over `m` concepts, as rows of 0/1.
pub fn hypercube(m: usize) -> Tensor {
    let rows = 1usize << m;
    Tensor::matrix(rows, m, (0..rows).flat_map(|p| (0..m).map(move |j| ((p >> j) & 1) as f64)).collect()).unwrap()
}

pub struct FolCheck {
    pub experts: usize,
    pub max_selected: usize,
    pub mismatches: usize,
    pub inputs_checked: usize,
}

/// Truth table of class `y` for `rule`'s oracle: a pattern over the selected
/// concepts is in the class iff some covered sample predicted `y` shows it.
fn oracle_contains(rule: &FOLRule, covered_preds: &[(u64, usize)], input: u64) -> bool {
    let mask = rule.selected.iter().fold(0u64, |a, &j| a | 1 << j);
    !rule.selected.is_empty() && covered_preds.iter().any(|&(bits, p)| p == rule.class && bits & mask == input & mask)
}

/// Random entropy experts with at most `max_m` concepts, random covered sets
/// and thresholds; raw and simplified rules are compared with the oracle on
/// every one of the 2^m boolean inputs. With threshold 0 and the whole
/// hypercube covered the oracle is the expert's own decision table.
pub fn fol_check(experts: usize, max_m: usize, seed: u64) -> FolCheck {
    let mut r = rng(seed);
    let mut out = FolCheck { experts, max_selected: 0, mismatches: 0, inputs_checked: 0 };
    for e in 0..experts {
        let m = r.random_range(1..=max_m);
        let k = r.random_range(2..4);
        let mut expert = EntropyExpert::new(m, k, 4, r.random_range(0.3..1.5), 0.0, &mut r).unwrap();
        expert.gamma = uniform(k, m, -2.0, 2.0, &mut r);
        let cube = hypercube(m);
        let (covered, threshold) = if e % 4 == 0 {
            (cube.clone(), 0.0)
        } else {
            let n = r.random_range(1..=(1usize << m).min(300));
            let rows: Vec<usize> = (0..n).map(|_| r.random_range(0..1usize << m)).collect();
            let jitter = uniform(n, m, -0.3, 0.3, &mut r);
            let noisy = cube.select_rows(&rows).zip_map(&jitter, |a, b| (a + b).clamp(0.0, 1.0)).unwrap();
            (noisy, r.random_range(0.0..1.0))
        };
        let preds = expert.forward(&covered).unwrap().argmax_rows();
        let covered_preds: Vec<(u64, usize)> =
            (0..covered.rows()).map(|i| (folx::binarize(covered.row(i)), preds[i])).collect();
        let cube_preds = expert.forward(&cube).unwrap().argmax_rows();
        let raw = folx::extract_fol_raw(&expert, &covered, threshold).unwrap();
        let simple = folx::extract_fol(&expert, &covered, threshold).unwrap();
        for (a, b) in raw.iter().zip(&simple) {
            out.max_selected = out.max_selected.max(a.selected.len());
            for input in 0..(1u64 << m) {
                let want = if threshold == 0.0 && e % 4 == 0 {
                    cube_preds[input as usize] == a.class
                } else {
                    oracle_contains(a, &covered_preds, input)
                };
                out.inputs_checked += 1;
                if folx::rule_eval_packed(a, input) != want || folx::rule_eval_packed(b, input) != want {
                    out.mismatches += 1;
                }
            }
        }
    }
    out
}
