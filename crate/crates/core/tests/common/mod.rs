//! Independent brute-force reference implementations and shared invariant
//! suites.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod invariants;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reid_core::eval::{EvalMeta, ProtocolConfig};
use reid_core::losses::{batch_hard_loss, MarginMode};
use reid_core::mining::{compute_np, mine_positive_pairs, PairSelection};

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    (s + 1e-12).sqrt()
}

fn row(e: ArrayView2<'_, f64>, i: usize) -> Vec<f64> {
    e.row(i).to_vec()
}

/// `(farthest positive, closest negative)` per anchor by full scan.
pub fn batch_hard_selection(e: ArrayView2<'_, f64>, labels: &[u64]) -> Vec<(usize, usize)> {
    let n = e.nrows();
    let mut out = Vec::new();
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            let d = distance(&row(e, a), &row(e, j));
            if j != a && labels[j] == labels[a] && pos.is_none_or(|(_, best)| d > best) {
                pos = Some((j, d));
            }
            if labels[j] != labels[a] && neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        out.push((pos.unwrap().0, neg.unwrap().0));
    }
    out
}

pub struct ProtocolOutcome {
    pub cmc: Vec<f64>,
    pub map: f64,
    pub first_matches: Vec<usize>,
    pub aps: Vec<f64>,
}

/// Ranks the eligible gallery by repeated minimum extraction (distance,
/// then index) and scores each query from the full relevance list.
pub fn cmc_map(
    q: ArrayView2<'_, f64>,
    qm: &[EvalMeta],
    g: ArrayView2<'_, f64>,
    gm: &[EvalMeta],
    k_max: usize,
) -> Option<ProtocolOutcome> {
    let mut first_matches = Vec::new();
    let mut aps = Vec::new();
    for qi in 0..q.nrows() {
        let mut remaining: Vec<usize> = (0..g.nrows())
            .filter(|&j| {
                !(gm[j].person_id == qm[qi].person_id && gm[j].camera_id == qm[qi].camera_id)
            })
            .collect();
        let mut ranked = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for c in 1..remaining.len() {
                let dc = distance(&row(q, qi), &row(g, remaining[c]));
                let db = distance(&row(q, qi), &row(g, remaining[best]));
                if dc < db || (dc == db && remaining[c] < remaining[best]) {
                    best = c;
                }
            }
            ranked.push(remaining.remove(best));
        }
        let relevant: Vec<bool> = ranked
            .iter()
            .map(|&j| gm[j].person_id == qm[qi].person_id)
            .collect();
        let total = relevant.iter().filter(|r| **r).count();
        if total == 0 {
            continue;
        }
        let mut sum = 0.0;
        for k in 0..relevant.len() {
            if relevant[k] {
                let hits = relevant[..=k].iter().filter(|r| **r).count();
                sum += hits as f64 / (k + 1) as f64;
            }
        }
        aps.push(sum / total as f64);
        first_matches.push(relevant.iter().position(|r| *r).unwrap() + 1);
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    let cmc = (1..=k_max)
        .map(|k| first_matches.iter().filter(|&&f| f <= k).count() as f64 / n)
        .collect();
    let map = aps.iter().sum::<f64>() / n;
    Some(ProtocolOutcome {
        cmc,
        map,
        first_matches,
        aps,
    })
}

/// Greedy matching by rescanning every unused `(i, j)` for the minimum each round.
pub fn rescan_greedy(
    e1: ArrayView2<'_, f64>,
    e2: ArrayView2<'_, f64>,
    np: usize,
) -> Vec<(usize, usize, f64)> {
    let mut used1 = vec![false; e1.nrows()];
    let mut used2 = vec![false; e2.nrows()];
    let mut out = Vec::new();
    for _ in 0..np {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..e1.nrows() {
            for j in 0..e2.nrows() {
                if used1[i] || used2[j] {
                    continue;
                }
                let d = distance(&row(e1, i), &row(e2, j));
                let better = match best {
                    None => true,
                    Some((bd, bi, bj)) => d < bd || (d == bd && (i, j) < (bi, bj)),
                };
                if better {
                    best = Some((d, i, j));
                }
            }
        }
        let Some((d, i, j)) = best else { break };
        used1[i] = true;
        used2[j] = true;
        out.push((i, j, d));
    }
    out
}

/// Eval-mode forward by explicit loops.
pub fn forward_eval(m: &reid_core::Model, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, f) = x.dim();
    let h = m.b1.len();
    let out_dim = m.b2.len();
    let mut e = Array2::zeros((n, out_dim));
    for r in 0..n {
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut s = m.b1[j];
            for i in 0..f {
                s += x[[r, i]] * m.w1[[i, j]];
            }
            let relu = if s > 0.0 { s } else { 0.0 };
            hidden[j] = m.gamma[j] * (relu - m.running_mean[j]) / (m.running_var[j] + 1e-5).sqrt()
                + m.beta[j];
        }
        for o in 0..out_dim {
            let mut s = m.b2[o];
            for j in 0..h {
                s += hidden[j] * m.w2[[j, o]];
            }
            e[[r, o]] = s;
        }
    }
    e
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Batch-hard selections on `instances` random P <= 5, K <= 4 batches.
pub fn batch_hard_agreement(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let p = rng.random_range(2..=5);
        let k = rng.random_range(2..=4);
        let mut labels: Vec<u64> = (0..p * k).map(|i| (i / k) as u64 * 7).collect();
        labels.shuffle(&mut rng);
        let e = random_matrix(&mut rng, p * k, 3);
        let got =
            batch_hard_loss(e.view(), &labels, MarginMode::Softplus).map_err(|e| e.to_string())?;
        let got: Vec<(usize, usize)> = got
            .triplets
            .iter()
            .map(|t| (t.positive, t.negative))
            .collect();
        if got != batch_hard_selection(e.view(), &labels) {
            return Err(format!("batch-hard selection differs on instance {case}"));
        }
    }
    Ok(())
}

fn random_protocol_instance(
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Vec<EvalMeta>, Array2<f64>, Vec<EvalMeta>) {
    let nq = rng.random_range(1..=8);
    let ng = rng.random_range(1..=20);
    let persons = rng.random_range(1..=6);
    let meta = |rng: &mut ChaCha8Rng| EvalMeta {
        person_id: rng.random_range(0..persons),
        camera_id: rng.random_range(0..3),
    };
    let qm: Vec<EvalMeta> = (0..nq).map(|_| meta(rng)).collect();
    let gm: Vec<EvalMeta> = (0..ng).map(|_| meta(rng)).collect();
    let q = random_matrix(rng, nq, 2);
    let mut g = random_matrix(rng, ng, 2);
    // Duplicate rows exercise tie-breaking.
    if ng > 2 && rng.random_bool(0.5) {
        let src = g.row(0).to_owned();
        g.row_mut(ng - 1).assign(&src);
    }
    (q, qm, g, gm)
}

/// `cmc_map` against [`cmc_map`] above on `instances` scorable random
/// instances with gallery size <= 20. Exact equality.
pub fn cmc_agreement(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protocol = ProtocolConfig {
        k_max: 20,
        ..Default::default()
    };
    let mut checked = 0;
    while checked < instances {
        let (q, qm, g, gm) = random_protocol_instance(&mut rng);
        let got = reid_core::eval::cmc_map(q.view(), &qm, g.view(), &gm, &protocol);
        match (cmc_map(q.view(), &qm, g.view(), &gm, 20), got) {
            (None, Err(_)) => {}
            (Some(w), Ok(r)) => {
                let firsts: Vec<usize> = r.per_query.iter().map(|p| p.first_match).collect();
                let aps: Vec<f64> = r.per_query.iter().map(|p| p.average_precision).collect();
                if r.cmc != w.cmc || r.map != w.map || firsts != w.first_matches || aps != w.aps {
                    return Err(format!("protocol differs on instance {checked}"));
                }
                checked += 1;
            }
            _ => return Err("oracle and library disagree on scorability".into()),
        }
    }
    Ok(())
}

/// Greedy mining against the rescan oracle on `instances` random instances.
pub fn greedy_agreement(instances: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..instances {
        let n1 = rng.random_range(1..=12);
        let n2 = rng.random_range(1..=12);
        let e1 = random_matrix(&mut rng, n1, 3);
        let e2 = random_matrix(&mut rng, n2, 3);
        let np = compute_np(n1, n2, rng.random_range(0.05..=1.0));
        let got = mine_positive_pairs(e1.view(), e2.view(), np, PairSelection::Greedy)
            .map_err(|e| e.to_string())?;
        let want = rescan_greedy(e1.view(), e2.view(), np);
        let same = got.len() == want.len()
            && got
                .iter()
                .zip(&want)
                .all(|(g, w)| (g.0, g.1) == (w.0, w.1) && (g.2 - w.2).abs() < 1e-12);
        if !same {
            return Err(format!("greedy mining differs on instance {case}"));
        }
    }
    Ok(())
}
