mod common;

use common::{max_diff, random_map, rng, to_map, to_tensor, Map};
use dfen_core::swin::{SwinBlock, WindowAttention, MASK_VALUE};
use dfen_core::{Binder, ParamStore, Tape, Tensor};

fn w(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c]
}

/// Window attention written from the cyclic-shift definition: roll the map
/// by `-shift`, label the wrapped bands, attend inside each window, roll back.
fn attention_oracle(attn: &WindowAttention, store: &ParamStore, x: &Map, side: usize, shift: usize) -> Map {
    let (c, heads, win) = (attn.channels, attn.heads, attn.window);
    let d = c / heads;
    let (qw, qb) = (store.get(attn.qkv.weight), store.get(attn.qkv.bias));
    let (pw, pb) = (store.get(attn.proj.weight), store.get(attn.proj.bias));
    let table = store.get(attn.rel_bias);
    let tside = 2 * win - 1;
    let at = |i: usize, j: usize| ((i + shift) % side) * side + (j + shift) % side;
    let band = |p: usize| if shift == 0 || p < side - win { 0 } else if p < side - shift { 1 } else { 2 };
    let label = |i: usize, j: usize| band(i) * 3 + band(j);

    let proj_row = |row: usize, p: usize| qb.data()[row] + (0..c).map(|k| w(qw, row, k) * x[k][at(p / side, p % side)]).sum::<f64>();
    let mut merged = vec![vec![0.0; side * side]; c];
    for wr in 0..side / win {
        for wc in 0..side / win {
            let cells: Vec<(usize, usize)> = (0..win * win).map(|t| (wr * win + t / win, wc * win + t % win)).collect();
            for h in 0..heads {
                for &(ai, aj) in &cells {
                    let a = ai * side + aj;
                    let mut scores = Vec::new();
                    for &(bi, bj) in &cells {
                        let bidx = bi * side + bj;
                        let mut s = 0.0;
                        for e in 0..d {
                            s += proj_row(h * d + e, a) * proj_row(c + h * d + e, bidx);
                        }
                        s /= (d as f64).sqrt();
                        let (dr, dc) = (ai % win + win - 1 - bi % win, aj % win + win - 1 - bj % win);
                        s += table.data()[h * tside * tside + dr * tside + dc];
                        if label(ai, aj) != label(bi, bj) {
                            s += MASK_VALUE;
                        }
                        scores.push(s);
                    }
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for e in 0..d {
                        let mut acc = 0.0;
                        for (k, &(bi, bj)) in cells.iter().enumerate() {
                            acc += (scores[k] - m).exp() / z * proj_row(2 * c + h * d + e, bi * side + bj);
                        }
                        merged[h * d + e][at(ai, aj)] = acc;
                    }
                }
            }
        }
    }
    (0..c)
        .map(|o| (0..side * side).map(|p| pb.data()[o] + (0..c).map(|k| w(pw, o, k) * merged[k][p]).sum::<f64>()).collect())
        .collect()
}

#[test]
fn window_attention_matches_cyclic_shift_oracle() {
    for (seed, side, win, heads) in [(0, 8, 4, 2), (1, 8, 4, 3), (2, 4, 2, 1), (3, 6, 3, 2), (4, 4, 4, 2)] {
        let c = 6;
        let mut store = ParamStore::new(seed);
        let attn = WindowAttention::new(&mut store, "a", c, heads, win);
        store.randomize(seed + 10, 0.7);
        let x = random_map(&mut rng(seed), c, side * side);
        for shifted in [false, true] {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &store);
            let got = attn.forward(&b, tape.constant(to_tensor(&x, side, side)), shifted).unwrap();
            let shift = if shifted && win < side { win / 2 } else { 0 };
            let want = attention_oracle(&attn, &store, &x, side, shift);
            let err = max_diff(&to_map(&got.value()), &want);
            assert!(err <= 1e-12, "side {side} window {win} shifted {shifted}: {err:e}");
        }
    }
}

#[test]
fn zero_weight_block_is_identity() {
    for shifted in [false, true] {
        let mut store = ParamStore::new(5);
        let block = SwinBlock::new(&mut store, "b", 6, 3, 4, shifted);
        store.randomize(6, 0.5);
        // Zeroing the two residual branch outputs is enough.
        for id in [block.attn.proj.weight, block.attn.proj.bias, block.mlp.fc2.weight, block.mlp.fc2.bias] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let x = to_tensor(&random_map(&mut rng(8), 6, 64), 8, 8);
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        assert_eq!(block.forward(&b, tape.constant(x.clone())).unwrap().value().as_ref(), &x);

        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &store);
        assert_eq!(block.forward(&b, tape.constant(x.clone())).unwrap().value().as_ref(), &x);
    }
}

#[test]
fn attention_rows_are_stochastic_and_masked() {
    let mut store = ParamStore::new(2);
    let attn = WindowAttention::new(&mut store, "a", 4, 2, 4);
    store.randomize(3, 1.0);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let x = tape.constant(to_tensor(&random_map(&mut rng(1), 4, 64), 8, 8));
    let (_, weights) = attn.forward_with_attention(&b, x, true).unwrap();
    let weights = weights.value();
    let n = 16;
    let mut blocked = 0;
    for row in weights.data().chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        blocked += row.iter().filter(|&&v| v == 0.0).count();
    }
    // Only the three windows touching the wrapped border have masked pairs.
    assert!(blocked > 0);
}
