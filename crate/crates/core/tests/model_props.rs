mod common;

use common::{gradcheck, probe_loss};
use minusformer::layers::Bound;
use minusformer::model::{input_decomposition_check, Minusformer, MinusformerConfig, Sign};
use minusformer::{SeededRng, Tensor};
use proptest::prelude::*;

fn cfg(blocks: usize, seed: u64) -> MinusformerConfig {
    let mut c = MinusformerConfig::new(12, 4, 3).with_embed_dim(8);
    c.n_blocks = blocks;
    c.heads = 2;
    c.dropout = 0.0;
    c.seed = seed;
    c
}

fn input(c: &MinusformerConfig, batch: usize, seed: u64) -> Tensor {
    let mut r = SeededRng::new(seed);
    Tensor::from_fn(&[batch, c.input_len, c.n_variates], |_| r.normal())
}

/// Alternating sum computed directly from the block predictions.
fn alternating_sum(blocks: &[Tensor]) -> Vec<f64> {
    let n = blocks.len();
    let mut acc = vec![0.0; blocks[0].len()];
    for (l, b) in blocks.iter().enumerate() {
        let sign = if (n - 1 - l) % 2 == 0 { 1.0 } else { -1.0 };
        for (a, v) in acc.iter_mut().zip(b.data()) {
            *a += sign * v;
        }
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_stream_telescopes(blocks in 1usize..=8, seed in any::<u64>(), gate in any::<bool>()) {
        let mut c = cfg(blocks, seed);
        c.gate_enabled = gate;
        let m = Minusformer::new(c.clone()).unwrap();
        let (_, trace) = m.forward(&input(&c, 2, seed ^ 0x5eed)).unwrap();
        let ohat: Vec<Tensor> = trace.blocks.iter().map(|b| b.ohat.clone()).collect();
        let alt = alternating_sum(&ohat);
        let worst = alt.iter().zip(trace.stream_out.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-9, "deviation {worst}");
    }

    #[test]
    fn sign_flipped_addition_is_exact(blocks in 1usize..=8, seed in any::<u64>()) {
        let c = cfg(blocks, seed);
        let m = Minusformer::new(c.clone()).unwrap();
        let (_, trace) = m.forward(&input(&c, 1, seed)).unwrap();
        let n = trace.blocks.len();
        let mut acc = vec![0.0; trace.stream_out.len()];
        for (l, b) in trace.blocks.iter().enumerate() {
            let flip = (n - 1 - l) % 2 == 1;
            for (a, v) in acc.iter_mut().zip(b.ohat.data()) {
                *a += if flip { -*v } else { *v };
            }
        }
        prop_assert!(acc.iter().zip(trace.stream_out.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn input_stream_decomposes(blocks in 1usize..=5, seed in any::<u64>()) {
        let mut c = cfg(blocks, seed);
        c.gate_enabled = false;
        c.norm_enabled = false;
        let m = Minusformer::new(c.clone()).unwrap();
        let x = input(&c, 2, seed);
        prop_assert!(input_decomposition_check(&m, &x).unwrap() < 1e-9);

        // independent reconstruction from the trace
        let (_, trace) = m.forward(&x).unwrap();
        let mut recon = trace.blocks.last().unwrap().residual.data().to_vec();
        for b in &trace.blocks {
            for (i, r) in recon.iter_mut().enumerate() {
                *r += b.xhat1.data()[i] + b.xhat2.data()[i];
            }
        }
        let worst = recon.iter().zip(trace.embedded.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(worst < 1e-9);
    }
}

#[test]
fn output_stream_starts_at_zero() {
    // with one block the stream is Ô_1 - O_0, so O_0 = 0 means it equals Ô_1
    let c = cfg(1, 3);
    let m = Minusformer::new(c.clone()).unwrap();
    let (_, trace) = m.forward(&input(&c, 1, 1)).unwrap();
    assert!(trace.stream_out.data().iter().zip(trace.blocks[0].ohat.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn plus_output_sign_accumulates() {
    let mut c = cfg(3, 4);
    c.output_sign = Sign::Plus;
    let m = Minusformer::new(c.clone()).unwrap();
    let (_, trace) = m.forward(&input(&c, 1, 2)).unwrap();
    let mut sum = vec![0.0; trace.stream_out.len()];
    for b in &trace.blocks {
        for (s, v) in sum.iter_mut().zip(b.ohat.data()) {
            *s += v;
        }
    }
    assert!(sum.iter().zip(trace.stream_out.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn forward_is_bit_identical_across_instances() {
    let c = cfg(4, 11);
    let x = input(&c, 3, 5);
    let a = Minusformer::new(c.clone()).unwrap().predict(&x).unwrap();
    let b = Minusformer::new(c).unwrap().predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn batch_rows_are_independent() {
    let c = cfg(2, 8);
    let m = Minusformer::new(c.clone()).unwrap();
    let x = input(&c, 3, 9);
    let full = m.predict(&x).unwrap();
    let per = c.input_len * c.n_variates;
    let out = c.pred_len * c.n_variates;
    for b in 0..3 {
        let xb = Tensor::new(vec![1, c.input_len, c.n_variates], x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
        let yb = m.predict(&xb).unwrap();
        for (u, v) in yb.data().iter().zip(&full.data()[b * out..(b + 1) * out]) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for gate in [true, false] {
        let mut c = cfg(2, 21);
        c.gate_enabled = gate;
        let m = Minusformer::new(c.clone()).unwrap();
        let mut inputs = vec![input(&c, 2, 4)];
        inputs.extend(m.params.ids().map(|id| m.params.get(id).clone()));
        let err = gradcheck(&inputs, 1e-5, |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let out = m.forward_graph(g, &p, v[0], false, &mut SeededRng::new(0))?;
            probe_loss(g, out.pred)
        });
        assert!(err < 1e-4, "gate={gate}: max rel err {err}");
    }
}
