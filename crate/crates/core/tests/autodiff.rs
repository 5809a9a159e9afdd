//! Finite-difference checks for every differentiable op, in 64-bit mode.

use proptest::prelude::*;
use transdiff_core::autograd::{concat_rows, Graph, Var};
use transdiff_core::gradcheck::{grad_check, grad_check_params};
use transdiff_core::nn::{
    build_mask_mrar, transformer_forward, AttentionMask, BlockLayout, Init, Linear, ParamBuilder, SelfAttention,
    TransformerBlock,
};
use transdiff_core::{ParamStore, Result, SeededRng, Tensor};

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-4;

fn rand(seed: u64, shape: &[usize]) -> Tensor<f64> {
    SeededRng::new(seed, 77).normal_tensor(shape)
}

/// Weighted sum with fixed random weights so every output element matters.
fn probe<'g>(v: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let w = v.graph().constant(rand(seed ^ 0xABCD, &v.shape()));
    Ok(v.mul(&w)?.sum())
}

fn check(seed: u64, shape: &[usize], f: impl for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>) {
    let x = rand(seed, shape);
    let err = grad_check(|g, v| probe(f(g, v)?, seed), &x, STEP).unwrap();
    assert!(err <= TOL, "max relative error {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn elementwise_ops(seed in 0u64..1000) {
        check(seed, &[3, 4], |g, x| {
            let y = g.constant(rand(seed + 1, &[3, 4]));
            x.add(&y)?.mul(&x)?.sub(&y.scale(0.5))?.reshape(&[4, 3])
        });
    }

    #[test]
    fn activations(seed in 0u64..1000) {
        check(seed, &[2, 5], |_, x| Ok(x.gelu().add(&x.silu())?.add(&x.sin())?));
    }

    #[test]
    fn matmul_both_sides(seed in 0u64..1000) {
        check(seed, &[3, 4], |g, x| {
            let w = g.constant(rand(seed + 2, &[4, 2]));
            let a = g.constant(rand(seed + 3, &[5, 3]));
            a.matmul(&x)?.matmul(&w)
        });
    }

    #[test]
    fn bias_and_layer_norm(seed in 0u64..1000) {
        check(seed, &[4, 6], |g, x| {
            let gm = g.constant(rand(seed + 4, &[6]));
            let b = x.slice_rows(0, 1)?.reshape(&[6])?;
            x.add_bias(&b)?.layer_norm(Some((&gm, &b)))?.layer_norm(None)
        });
    }

    #[test]
    fn modulate_and_gate(seed in 0u64..1000) {
        // x is [2*3, 4]; per-sequence vectors are slices of x itself so all
        // three inputs receive gradient.
        check(seed, &[6, 4], |_, x| {
            let shift = x.gather_rows(&[1, 4])?.scale(0.3);
            let scale = x.gather_rows(&[0, 5])?.scale(0.2);
            let gate = x.gather_rows(&[2, 3])?;
            x.modulate(&shift, &scale, 3)?.gate(&gate, 3)
        });
    }

    #[test]
    fn row_and_column_plumbing(seed in 0u64..1000) {
        check(seed, &[4, 5], |_, x| {
            let a = x.gather_rows(&[3, 0, 0, 2])?;
            let b = x.slice_cols(1, 3)?;
            let c = concat_rows(&[a.slice_cols(0, 3)?, b])?;
            Ok(c.mean().add(&c.sum())?.add(&c.mse(&c.scale(0.25))?)?.reshape(&[1, 1])?)
        });
    }

    #[test]
    fn masked_attention(seed in 0u64..1000) {
        let layout = BlockLayout::mrar(1, 1, 2, 1).unwrap();
        let mask = build_mask_mrar(&layout);
        check(seed, &[8, 6], move |_, x| {
            let q = x.scale(0.7);
            let k = x.sin();
            x.attention(&k, &q, &mask, 3)
        });
    }
}

#[test]
fn attention_layer_with_mse_head() {
    // one attention layer + MSE head on a random 8-dim input
    let mut store = ParamStore::<f64>::new();
    let mut rng = SeededRng::new(42, 0);
    let (attn, head) = {
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        (
            SelfAttention::new(&mut b, "attn", 8, 2, Init::Normal(0.3)).unwrap(),
            Linear::new(&mut b, "head", 8, 1, Init::Normal(0.3)).unwrap(),
        )
    };
    let x = rand(5, &[4, 8]);
    let target = rand(6, &[4, 1]);
    let mask = AttentionMask::zeros(4);
    let report = grad_check_params(
        &store,
        |g, p| {
            let h = attn.forward(p, &g.constant(x.clone()), &mask)?;
            head.forward(p, &h)?.mse(&g.constant(target.clone()))
        },
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");

    // and with respect to the input
    let err = grad_check(
        |g, v| {
            let p = g.bind(&store);
            let h = attn.forward(&p, &v, &mask)?;
            head.forward(&p, &h)?.mse(&g.constant(target.clone()))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn two_block_stack() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = SeededRng::new(8, 0);
    let blocks: Vec<_> = {
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        (0..2)
            .map(|i| TransformerBlock::new(&mut b, &format!("blk{i}"), 8, 2, 2, Init::Normal(0.2)).unwrap())
            .collect()
    };
    let mask = build_mask_mrar(&BlockLayout::mrar(1, 2, 3, 1).unwrap());
    let x = rand(9, &[12, 8]);
    let report = grad_check_params(
        &store,
        |g, p| probe(transformer_forward(&g.constant(x.clone()), &mask, p, &blocks)?, 3),
        STEP,
    )
    .unwrap();
    assert!(report.max_rel_error <= TOL, "{report:?}");
}

#[test]
fn evaluation_is_bitwise_deterministic() {
    let run = || {
        let g = Graph::<f32>::new();
        let x = g.leaf(SeededRng::new(1, 2).normal_tensor(&[6, 4]));
        let y = x.attention(&x, &x, &AttentionMask::zeros(3), 2).unwrap().gelu().sum();
        let grads = g.backward(y).unwrap();
        (y.value().item(), grads.get(x).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn shape_mismatches_are_rejected() {
    let g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 3]));
    let b = g.leaf(Tensor::zeros(&[3, 2]));
    assert!(a.add(&b).is_err());
    assert!(a.matmul(&a).is_err());
    assert!(a.add_bias(&g.leaf(Tensor::zeros(&[2]))).is_err());
    assert!(a.gather_rows(&[2]).is_err());
    assert!(a.slice_cols(2, 2).is_err());
    assert!(a.modulate(&b, &b, 1).is_err());
    assert!(g.backward(a).is_err());
}
