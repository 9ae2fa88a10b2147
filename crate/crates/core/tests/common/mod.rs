//! Brute-force references shared by the integration and acceptance tests.
//!
//! Everything here works on plain nested vectors with explicit loops and
//! never calls into the library's tensor ops.

#![allow(dead_code)]

use dfen_core::equalization::{Equalization, EqualizationFlags};
use dfen_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `[C][h·w]`, channel-first with row-major pixels.
pub type Map = Vec<Vec<f64>>;

pub fn to_map(t: &Tensor) -> Map {
    let s = t.shape();
    let hw = s[1] * s[2];
    (0..s[0]).map(|c| t.data()[c * hw..(c + 1) * hw].to_vec()).collect()
}

pub fn to_tensor(m: &Map, h: usize, w: usize) -> Tensor {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::new(&[m.len(), h, w], flat).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, hw: usize) -> Map {
    (0..c).map(|_| (0..hw).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

pub fn max_diff(a: &Map, b: &Map) -> f64 {
    let mut m: f64 = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb) {
            m = m.max((x - y).abs());
        }
    }
    m
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Row `k` of a `[rows×cols]` weight tensor.
fn row(t: &Tensor, k: usize) -> &[f64] {
    let cols = t.shape()[1];
    &t.data()[k * cols..(k + 1) * cols]
}

/// Similarity refinement. Returns `(out, S)` with `S[p][q]`.
pub fn refine(r: &Map, x: &Map) -> (Map, Vec<Vec<f64>>) {
    let c = r.len();
    let hw = r[0].len();
    let mut s = Vec::with_capacity(hw);
    for p in 0..hw {
        let mut logits = vec![0.0; hw];
        for q in 0..hw {
            let mut dot = 0.0;
            for k in 0..c {
                dot += r[k][p] * x[k][q];
            }
            logits[q] = dot / (c as f64).sqrt();
        }
        s.push(softmax(&logits));
    }
    let mut out = vec![vec![0.0; hw]; c];
    for k in 0..c {
        for p in 0..hw {
            let mut acc = 0.0;
            for q in 0..hw {
                acc += s[p][q] * x[k][q];
            }
            out[k][p] = acc;
        }
    }
    (out, s)
}

pub struct IlfemOracle {
    pub g: Vec<f64>,
    pub r_ci: Map,
    pub s_il: Vec<Vec<f64>>,
    pub r_il: Map,
}

/// Image-level path read off the parameters of `eq`.
pub fn ilfem(eq: &Equalization, store: &ParamStore, r: &Map) -> IlfemOracle {
    let c = r.len();
    let hw = r[0].len();
    let score = eq.gap_score.as_ref().unwrap();
    let sw = store.get(score.weight);
    let sb = store.get(score.bias).data()[0];
    let scores: Vec<f64> = (0..hw)
        .map(|p| (0..c).map(|k| sw.data()[k] * r[k][p]).sum::<f64>() + sb)
        .collect();
    let a = softmax(&scores);
    let g: Vec<f64> = (0..c).map(|k| (0..hw).map(|p| a[p] * r[k][p]).sum()).collect();

    let coarse = eq.coarse.as_ref().unwrap();
    let w = store.get(coarse.weight);
    let b = store.get(coarse.bias);
    let mut r_ci = vec![vec![0.0; hw]; c];
    for k in 0..c {
        let wk = row(w, k);
        for p in 0..hw {
            let mut acc = b.data()[k];
            for j in 0..c {
                acc += wk[j] * r[j][p] + wk[c + j] * g[j];
            }
            r_ci[k][p] = acc;
        }
    }
    let (r_il, s_il) = refine(r, &r_ci);
    IlfemOracle { g, r_ci, s_il, r_il }
}

pub struct ClfemOracle {
    /// `D[z][p]`.
    pub d: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub prototypes: Vec<Option<Vec<f64>>>,
    pub r_cc: Map,
    pub s_cl: Vec<Vec<f64>>,
    pub r_cl: Map,
}

/// Class-level path read off the parameters of `eq`.
pub fn clfem(eq: &Equalization, store: &ParamStore, r: &Map) -> ClfemOracle {
    let c = r.len();
    let hw = r[0].len();
    let proj = eq.class_proj.as_ref().unwrap();
    let w = store.get(proj.weight);
    let b = store.get(proj.bias);
    let z = w.shape()[0];
    let mut d = vec![vec![0.0; hw]; z];
    let mut assignment = vec![0; hw];
    for p in 0..hw {
        let logits: Vec<f64> = (0..z)
            .map(|k| b.data()[k] + (0..c).map(|j| row(w, k)[j] * r[j][p]).sum::<f64>())
            .collect();
        let probs = softmax(&logits);
        let mut best = 0;
        for k in 0..z {
            d[k][p] = probs[k];
            if probs[k] > probs[best] {
                best = k;
            }
        }
        assignment[p] = best;
    }
    let mut prototypes = vec![None; z];
    for (cls, proto) in prototypes.iter_mut().enumerate() {
        let members: Vec<usize> = (0..hw).filter(|&p| assignment[p] == cls).collect();
        if members.is_empty() {
            continue;
        }
        let denom: f64 = members.iter().map(|&p| d[cls][p].exp()).sum();
        let mut v = vec![0.0; c];
        for &p in &members {
            let wgt = d[cls][p].exp() / denom;
            for k in 0..c {
                v[k] += wgt * r[k][p];
            }
        }
        *proto = Some(v);
    }
    let mut r_cc = vec![vec![0.0; hw]; c];
    for p in 0..hw {
        let v = prototypes[assignment[p]].as_ref().unwrap();
        for k in 0..c {
            r_cc[k][p] = v[k];
        }
    }
    let (r_cl, s_cl) = refine(r, &r_cc);
    ClfemOracle {
        d,
        assignment,
        prototypes,
        r_cc,
        s_cl,
        r_cl,
    }
}

/// Both equalization branches with parameters drawn at `scale`.
pub fn equalization(seed: u64, channels: usize, classes: usize, scale: f64) -> (Equalization, ParamStore) {
    let mut store = ParamStore::new(seed);
    let eq = Equalization::new(&mut store, channels, classes, EqualizationFlags { ilfem: true, clfem: true });
    store.randomize(seed.wrapping_add(1), scale);
    (eq, store)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A 4×4 prediction/target pair with hand-counted one-vs-rest confusion
/// values `[tp, fp, fn, tn]` per class.
pub struct CraftedCase {
    pub target: &'static str,
    pub pred: &'static str,
    pub classes: usize,
    pub counts: &'static [[u64; 4]],
}

pub fn labels(s: &str) -> Vec<usize> {
    s.bytes().map(|b| (b - b'0') as usize).collect()
}

pub const CRAFTED: [CraftedCase; 10] = [
    // Exact match.
    CraftedCase { target: "0000011001100000", pred: "0000011001100000", classes: 2, counts: &[[12, 0, 0, 4], [4, 0, 0, 12]] },
    // Foreground missed entirely.
    CraftedCase { target: "0000010001100000", pred: "0000000000000000", classes: 2, counts: &[[13, 3, 0, 0], [0, 0, 3, 13]] },
    // No foreground anywhere.
    CraftedCase { target: "0000000000000000", pred: "0000000000000000", classes: 2, counts: &[[16, 0, 0, 0], [0, 0, 0, 16]] },
    // Disjoint blobs.
    CraftedCase { target: "1100110000000000", pred: "0000000000110011", classes: 2, counts: &[[8, 4, 4, 0], [0, 4, 4, 8]] },
    // Blob shifted down one row.
    CraftedCase { target: "0110011000000000", pred: "0000011001100000", classes: 2, counts: &[[10, 2, 2, 2], [2, 2, 2, 10]] },
    // Everything predicted foreground.
    CraftedCase { target: "1000000000000000", pred: "1111111111111111", classes: 2, counts: &[[0, 0, 15, 1], [1, 15, 0, 0]] },
    CraftedCase { target: "0011001122002200", pred: "0001011122000200", classes: 3, counts: &[[7, 2, 1, 6], [3, 1, 1, 11], [3, 0, 1, 12]] },
    // Class 2 absent from both.
    CraftedCase { target: "1111000000000000", pred: "1110100000000000", classes: 3, counts: &[[11, 1, 1, 3], [3, 1, 1, 11], [0, 0, 0, 16]] },
    // Two classes swapped.
    CraftedCase { target: "1111222200000000", pred: "2222111100000000", classes: 3, counts: &[[8, 0, 0, 8], [0, 4, 4, 8], [0, 4, 4, 8]] },
    // One extra pixel.
    CraftedCase { target: "0000000000000001", pred: "0000000000000011", classes: 2, counts: &[[14, 0, 1, 1], [1, 1, 0, 14]] },
];

fn frac(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `(dsc, se, sp, acc)` of one class from its counts.
pub fn scores_from_counts([tp, fp, fn_, tn]: [u64; 4]) -> [f64; 4] {
    [
        frac(2 * tp, 2 * tp + fp + fn_),
        frac(tp, tp + fn_),
        frac(tn, tn + fp),
        frac(tp + tn, tp + tn + fp + fn_),
    ]
}
