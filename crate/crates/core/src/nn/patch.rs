//! Spatial patch merge/split between `(h*w) x d` latents and
//! `((h/f)*(w/f)) x (d*f*f)` condition-resolution tokens.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

fn check(x: &Tensor<impl Element>, h: usize, w: usize, f: usize, tokens: usize, channels: usize) -> Result<()> {
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Compression { f, h, w });
    }
    if x.shape() != [tokens, channels] {
        return Err(shape_err(
            "patch",
            format!("expected [{tokens}, {channels}], got {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Flatten each non-overlapping `f x f` patch of a row-major `h x w` token
/// grid into one token. Within a token the layout is
/// `(row_in_patch, col_in_patch, channel)`.
pub fn patch_merge<E: Element>(x: &Tensor<E>, h: usize, w: usize, f: usize) -> Result<Tensor<E>> {
    let d = x.shape().get(1).copied().unwrap_or(0);
    check(x, h, w, f, h * w, d)?;
    let (ph, pw) = (h / f, w / f);
    let width = d * f * f;
    let mut out = vec![E::zero(); h * w * d];
    for i in 0..h {
        for j in 0..w {
            let tok = (i / f) * pw + j / f;
            let off = ((i % f) * f + j % f) * d;
            let src = &x.data()[(i * w + j) * d..(i * w + j + 1) * d];
            out[tok * width + off..tok * width + off + d].copy_from_slice(src);
        }
    }
    Tensor::from_vec(&[ph * pw, width], out)
}

/// Exact inverse of [`patch_merge`].
pub fn patch_split<E: Element>(c: &Tensor<E>, h: usize, w: usize, f: usize) -> Result<Tensor<E>> {
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Compression { f, h, w });
    }
    let width = c.shape().get(1).copied().unwrap_or(0);
    if width % (f * f) != 0 {
        return Err(shape_err("patch_split", format!("width {width} not divisible by f^2")));
    }
    let d = width / (f * f);
    check(c, h, w, f, (h / f) * (w / f), width)?;
    let pw = w / f;
    let mut out = vec![E::zero(); h * w * d];
    for i in 0..h {
        for j in 0..w {
            let tok = (i / f) * pw + j / f;
            let off = ((i % f) * f + j % f) * d;
            out[(i * w + j) * d..(i * w + j + 1) * d]
                .copy_from_slice(&c.data()[tok * width + off..tok * width + off + d]);
        }
    }
    Tensor::from_vec(&[h * w, d], out)
}
