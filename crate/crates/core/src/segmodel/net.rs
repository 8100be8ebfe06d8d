//! Two-level encoder-decoder: forward pass with activation cache and the
//! matching hand-written backward pass.

use rand::{Rng, RngCore};

use super::layers::*;

/// Parameter tensor indices, fixed by [`layout`].
pub(crate) const ENC1_W: usize = 0;
pub(crate) const ENC1_B: usize = 1;
pub(crate) const ENC2_W: usize = 2;
pub(crate) const ENC2_B: usize = 3;
pub(crate) const MID_W: usize = 4;
pub(crate) const MID_B: usize = 5;
pub(crate) const DEC2_W: usize = 6;
pub(crate) const DEC2_B: usize = 7;
pub(crate) const DEC1_W: usize = 8;
pub(crate) const DEC1_B: usize = 9;
pub(crate) const HEAD_W: usize = 10;
pub(crate) const HEAD_B: usize = 11;

pub(crate) const NAMES: [&str; 12] = [
    "enc1.weight",
    "enc1.bias",
    "enc2.weight",
    "enc2.bias",
    "mid.weight",
    "mid.bias",
    "dec2.weight",
    "dec2.bias",
    "dec1.weight",
    "dec1.bias",
    "head.weight",
    "head.bias",
];

/// Tensor shapes for widths `[w0, w1, w2]`, in [`NAMES`] order.
pub(crate) fn layout(widths: [usize; 3]) -> Vec<Vec<usize>> {
    let [w0, w1, w2] = widths;
    vec![
        vec![w0, 1, 3, 3],
        vec![w0],
        vec![w1, w0, 3, 3],
        vec![w1],
        vec![w2, w1, 3, 3],
        vec![w2],
        vec![w1, w2 + w1, 3, 3],
        vec![w1],
        vec![w0, w1 + w0, 3, 3],
        vec![w0],
        vec![2, w0],
        vec![2],
    ]
}

/// Everything the backward pass needs from one forward pass.
pub(crate) struct Cache {
    input: Tensor,
    a1: Tensor,
    p1: Tensor,
    arg1: Vec<u32>,
    a2: Tensor,
    p2: Tensor,
    arg2: Vec<u32>,
    a3: Tensor,
    c2: Tensor,
    a4: Tensor,
    mask4: Option<Vec<f64>>,
    c1: Tensor,
    a5: Tensor,
    mask5: Option<Vec<f64>>,
    d5: Tensor,
}

/// Inverted dropout mask: entries are 0 or `1/(1-rate)`.
fn dropout_mask(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

fn apply_mask(t: &mut Tensor, mask: &[f64]) {
    for (v, m) in t.data.iter_mut().zip(mask) {
        *v *= m;
    }
}

fn conv_relu(x: &Tensor, p: &[Vec<f64>], w: usize, b: usize) -> Tensor {
    let co = p[b].len();
    let mut out = conv3x3(x, &p[w], &p[b], co);
    relu_inplace(&mut out);
    out
}

/// Runs the network on a `1 x H x W` input (`H`, `W` divisible by 4) and
/// returns the two-channel logits. `dropout` supplies the mask stream when
/// dropout is active.
pub(crate) fn forward(
    params: &[Vec<f64>],
    input: Tensor,
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> (Tensor, Cache) {
    let a1 = conv_relu(&input, params, ENC1_W, ENC1_B);
    let (p1, arg1) = maxpool2(&a1);
    let a2 = conv_relu(&p1, params, ENC2_W, ENC2_B);
    let (p2, arg2) = maxpool2(&a2);
    let a3 = conv_relu(&p2, params, MID_W, MID_B);
    let c2 = upsample2(&a3).concat(&a2);
    let a4 = conv_relu(&c2, params, DEC2_W, DEC2_B);

    let mut dropout = dropout.filter(|(rate, _)| *rate > 0.0);
    let mask4 = dropout
        .as_mut()
        .map(|(rate, rng)| dropout_mask(a4.data.len(), *rate, &mut **rng));
    let mut d4 = a4.clone();
    if let Some(m) = &mask4 {
        apply_mask(&mut d4, m);
    }
    let c1 = upsample2(&d4).concat(&a1);
    let a5 = conv_relu(&c1, params, DEC1_W, DEC1_B);
    let mask5 = dropout
        .as_mut()
        .map(|(rate, rng)| dropout_mask(a5.data.len(), *rate, &mut **rng));
    let mut d5 = a5.clone();
    if let Some(m) = &mask5 {
        apply_mask(&mut d5, m);
    }
    let logits = conv1x1(&d5, &params[HEAD_W], &params[HEAD_B], 2);
    (
        logits,
        Cache {
            input,
            a1,
            p1,
            arg1,
            a2,
            p2,
            arg2,
            a3,
            c2,
            a4,
            mask4,
            c1,
            a5,
            mask5,
            d5,
        },
    )
}

/// Accumulates parameter gradients for logit gradient `grad_logits` into
/// `grads` (same layout as the parameters).
pub(crate) fn backward(params: &[Vec<f64>], cache: &Cache, grad_logits: &Tensor, grads: &mut [Vec<f64>]) {
    let w1 = params[ENC2_B].len();
    let w2 = params[MID_B].len();
    let mut g5 = {
        let (w, b) = pair(grads, HEAD_W);
        conv1x1_backward(&cache.d5, &params[HEAD_W], grad_logits, w, b)
    };
    if let Some(m) = &cache.mask5 {
        apply_mask(&mut g5, m);
    }
    relu_backward_inplace(&mut g5, &cache.a5);

    let gc1 = {
        let (w, b) = pair(grads, DEC1_W);
        conv3x3_backward(&cache.c1, &params[DEC1_W], &g5, w, b, true).expect("input grad")
    };
    let (gu1, g_skip1) = gc1.split(w1);
    let mut g4 = upsample2_backward(&gu1);
    if let Some(m) = &cache.mask4 {
        apply_mask(&mut g4, m);
    }
    relu_backward_inplace(&mut g4, &cache.a4);

    let gc2 = {
        let (w, b) = pair(grads, DEC2_W);
        conv3x3_backward(&cache.c2, &params[DEC2_W], &g4, w, b, true).expect("input grad")
    };
    let (gu2, g_skip2) = gc2.split(w2);
    let mut g3 = upsample2_backward(&gu2);
    relu_backward_inplace(&mut g3, &cache.a3);

    let gp2 = {
        let (w, b) = pair(grads, MID_W);
        conv3x3_backward(&cache.p2, &params[MID_W], &g3, w, b, true).expect("input grad")
    };
    let mut g2 = maxpool2_backward(&gp2, &cache.arg2, cache.a2.c, cache.a2.h, cache.a2.w);
    for (g, s) in g2.data.iter_mut().zip(&g_skip2.data) {
        *g += s;
    }
    relu_backward_inplace(&mut g2, &cache.a2);

    let gp1 = {
        let (w, b) = pair(grads, ENC2_W);
        conv3x3_backward(&cache.p1, &params[ENC2_W], &g2, w, b, true).expect("input grad")
    };
    let mut g1 = maxpool2_backward(&gp1, &cache.arg1, cache.a1.c, cache.a1.h, cache.a1.w);
    for (g, s) in g1.data.iter_mut().zip(&g_skip1.data) {
        *g += s;
    }
    relu_backward_inplace(&mut g1, &cache.a1);

    let (w, b) = pair(grads, ENC1_W);
    conv3x3_backward(&cache.input, &params[ENC1_W], &g1, w, b, false);
}

fn pair(grads: &mut [Vec<f64>], weight_index: usize) -> (&mut [f64], &mut [f64]) {
    let (w, b) = grads[weight_index..].split_at_mut(1);
    (&mut w[0], &mut b[0])
}

/// Foreground probability of a two-logit softmax.
#[inline]
pub(crate) fn foreground_prob(z0: f64, z1: f64) -> f64 {
    1.0 / (1.0 + (z0 - z1).exp())
}

/// `ln(1 + e^t)` without overflow.
#[inline]
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Cross-entropy of label `y` under logits `(z0, z1)`.
#[inline]
pub(crate) fn pixel_ce(z0: f64, z1: f64, y: u8) -> f64 {
    if y == 1 {
        softplus(z0 - z1)
    } else {
        softplus(z1 - z0)
    }
}
