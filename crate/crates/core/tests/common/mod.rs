//! Independent reference implementations used by the integration tests.
//! Everything here works on plain nested `Vec`s with explicit loops.

#![allow(dead_code)]

use rand::Rng;
use surgphase::numerics::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect()).collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b.first().map_or(0, Vec::len));
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn add_bias(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "col count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Softmax of `scores` restricted to `allowed`; disallowed entries are 0.
pub fn softmax_where(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    let m = scores.iter().zip(allowed).filter(|(_, &a)| a).map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().zip(allowed).map(|(s, &a)| if a { (s - m).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Projection weights for one attention layer.
#[derive(Clone, Debug)]
pub struct Proj {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub bo: Vec<f64>,
}

impl Proj {
    pub fn random<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Proj {
        Proj {
            wq: random_mat(rng, d, d, scale),
            wk: random_mat(rng, d, d, scale),
            wv: random_mat(rng, d, d, scale),
            wo: random_mat(rng, d, d, scale),
            bo: random_mat(rng, 1, d, scale).remove(0),
        }
    }

    pub fn params(&self) -> surgphase::hta::AttentionParams {
        surgphase::hta::AttentionParams {
            wq: from_mat(&self.wq),
            wk: from_mat(&self.wk),
            wv: from_mat(&self.wv),
            wo: from_mat(&self.wo),
            bo: Tensor::vector(self.bo.clone()).unwrap(),
        }
    }
}

/// Dense multi-head self-attention over `x` with a `n × n` permission mask
/// (`None` = all pairs). Rows whose mask is all false are returned as zeros.
pub fn dense_attention(x: &Mat, p: &Proj, heads: usize, mask: Option<&Vec<Vec<bool>>>) -> Mat {
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let (q, k, v) = (mat_mul(x, &p.wq), mat_mul(x, &p.wk), mat_mul(x, &p.wv));
    let mut concat = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let allowed: Vec<bool> = (0..n).map(|j| mask.is_none_or(|m| m[i][j])).collect();
            if !allowed.iter().any(|&a| a) {
                continue;
            }
            let scores: Vec<f64> =
                (0..n).map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let w = softmax_where(&scores, &allowed);
            for c in cols.clone() {
                concat[i][c] = (0..n).map(|j| w[j] * v[j][c]).sum();
            }
        }
    }
    add_bias(&mat_mul(&concat, &p.wo), &p.bo)
}

pub fn layer_norm_rows(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sd = (var + 1e-6).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mu) / sd * gamma[j] + beta[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Relaxed/strict scoring by walking every frame and checking every transition.
pub struct WalkReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub jaccard: f64,
    pub f1: f64,
    pub per_phase: Vec<(f64, f64, f64, f64)>,
}

pub fn frame_walk(gt: &[usize], pred: &[usize], fps: f64, phases: usize, relaxed: bool) -> WalkReport {
    let n = gt.len();
    let w = (10.0 * fps).round() as i64;
    let transitions: Vec<usize> = (1..n).filter(|&b| gt[b] != gt[b - 1]).collect();
    let scored: Vec<usize> = (0..n)
        .map(|f| {
            if pred[f] == gt[f] || !relaxed {
                return pred[f];
            }
            for &b in &transitions {
                let dist = f as i64 - b as i64;
                let before_ok = (-w..0).contains(&dist) && pred[f] == gt[b];
                let after_ok = (0..w).contains(&dist) && pred[f] == gt[b - 1];
                if before_ok || after_ok {
                    return gt[f];
                }
            }
            pred[f]
        })
        .collect();
    let mut per_phase = Vec::new();
    let mut present = Vec::new();
    for p in 0..phases {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for f in 0..n {
            match (gt[f] == p, scored[f] == p) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                _ => {}
            }
        }
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        let (pr, rc) = (div(tp, tp + fp), div(tp, tp + fneg));
        let f1 = if pr + rc > 0.0 { 2.0 * pr * rc / (pr + rc) } else { 0.0 };
        per_phase.push((pr, rc, div(tp, tp + fp + fneg), f1));
        present.push(tp + fp + fneg > 0.0);
    }
    let macro_of = |i: usize| {
        let vals: Vec<f64> =
            per_phase.iter().zip(&present).filter(|(_, &p)| p).map(|(m, _)| [m.0, m.1, m.2, m.3][i]).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    WalkReport {
        accuracy: (0..n).filter(|&f| scored[f] == gt[f]).count() as f64 / n as f64,
        precision: macro_of(0),
        recall: macro_of(1),
        jaccard: macro_of(2),
        f1: macro_of(3),
        per_phase,
    }
}

/// Random run-structured label sequence.
pub fn random_runs<R: Rng>(rng: &mut R, n: usize, phases: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cur = rng.gen_range(0..phases);
    while out.len() < n {
        let run = rng.gen_range(1..=30);
        for _ in 0..run.min(n - out.len()) {
            out.push(cur);
        }
        cur = if rng.gen_bool(0.7) { (cur + 1) % phases } else { rng.gen_range(0..phases) };
    }
    out
}
