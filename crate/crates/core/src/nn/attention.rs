//! Masked multi-head scaled-dot-product attention kernels.
//!
//! Inputs are `[batch * seq, width]` matrices; head `h` owns columns
//! `h * dh .. (h + 1) * dh`. Softmax probabilities are kept for the
//! backward pass.

use crate::error::{shape_err, Error, Result};
use crate::nn::mask::AttentionMask;
use crate::tensor::{gemm, Element, MatView, MatViewMut, Tensor};

pub(crate) fn forward<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<(Tensor<E>, Vec<E>)> {
    let (rows, width) = q.expect_2d("attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let seq = mask.size();
    if heads == 0 || width % heads != 0 {
        return Err(shape_err("attention", format!("width {width} not divisible by {heads} heads")));
    }
    if seq == 0 || rows % seq != 0 {
        return Err(shape_err(
            "attention",
            format!("{rows} tokens do not split into sequences of mask size {seq}"),
        ));
    }
    for i in 0..seq {
        if mask.row(i).iter().all(|&m| m == f64::NEG_INFINITY) {
            return Err(Error::FullyMaskedRow(i));
        }
    }
    let batch = rows / seq;
    let dh = width / heads;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mask_e: Vec<E> = (0..seq * seq)
        .map(|idx| E::from_f64(mask.entry(idx / seq, idx % seq)))
        .collect();

    let mut probs = vec![E::zero(); batch * heads * seq * seq];
    let mut out = vec![E::zero(); rows * width];
    for b in 0..batch {
        for h in 0..heads {
            let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let qb = MatView::new(q.data(), rows, width).block(b * seq, seq, h * dh, dh);
            let kb = MatView::new(k.data(), rows, width).block(b * seq, seq, h * dh, dh);
            gemm(scale, qb, kb.t(), E::zero(), MatViewMut::new(p, seq, seq));
            for (row, mrow) in p.chunks_exact_mut(seq).zip(mask_e.chunks_exact(seq)) {
                let mut max = E::neg_infinity();
                for (s, &m) in row.iter_mut().zip(mrow) {
                    *s += m;
                    max = max.max(*s);
                }
                let mut total = E::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
            }
            let vb = MatView::new(v.data(), rows, width).block(b * seq, seq, h * dh, dh);
            let ob = MatViewMut::new(&mut out, rows, width).block(b * seq, seq, h * dh, dh);
            gemm(E::one(), MatView::new(p, seq, seq), vb, E::zero(), ob);
        }
    }
    Ok((Tensor::from_parts(vec![rows, width], out), probs))
}

pub(crate) fn backward<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    probs: &[E],
    grad_out: &[E],
    heads: usize,
    seq: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let (rows, width) = (q.rows(), q.cols());
    let batch = rows / seq;
    let dh = width / heads;
    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = vec![E::zero(); rows * width];
    let mut dk = vec![E::zero(); rows * width];
    let mut dv = vec![E::zero(); rows * width];
    let mut dp = vec![E::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
            let pv = MatView::new(p, seq, seq);
            let go = MatView::new(grad_out, rows, width).block(b * seq, seq, h * dh, dh);
            let vb = MatView::new(v.data(), rows, width).block(b * seq, seq, h * dh, dh);
            // dV = P^T dO
            gemm(
                E::one(),
                pv.t(),
                go,
                E::zero(),
                MatViewMut::new(&mut dv, rows, width).block(b * seq, seq, h * dh, dh),
            );
            // dP = dO V^T
            gemm(E::one(), go, vb.t(), E::zero(), MatViewMut::new(&mut dp, seq, seq));
            // dS = P * (dP - rowsum(dP * P))
            for (dprow, prow) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                let dot: E = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pp) in dprow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            let ds = MatView::new(&dp, seq, seq);
            let qb = MatView::new(q.data(), rows, width).block(b * seq, seq, h * dh, dh);
            let kb = MatView::new(k.data(), rows, width).block(b * seq, seq, h * dh, dh);
            gemm(
                scale,
                ds,
                kb,
                E::zero(),
                MatViewMut::new(&mut dq, rows, width).block(b * seq, seq, h * dh, dh),
            );
            gemm(
                scale,
                ds.t(),
                qb,
                E::zero(),
                MatViewMut::new(&mut dk, rows, width).block(b * seq, seq, h * dh, dh),
            );
        }
    }
    (dq, dk, dv)
}
