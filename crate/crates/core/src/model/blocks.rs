//! Building blocks: amplitude-phase entanglement, efficient channel
//! attention, residual blocks, channel-wise transformer, and the
//! fusion-dynamic-alignment module.

use super::{ArchConfig, Binder, Init};
use crate::error::{Error, Result};
use crate::tensor::{concat, ComplexHalfSpectrum, Scalar, Tensor};

pub(crate) const LEAKY_SLOPE: f64 = 0.1;

/// Convolution layer with stored weight/bias under `name`.
pub(crate) fn conv<T: Scalar>(
    b: &Binder<T>,
    name: &str,
    x: &Tensor<T>,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    winit: Init,
) -> Result<Tensor<T>> {
    let cin = x.shape()[1];
    if cin % groups != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} channels not divisible by {} groups",
            name, cin, groups
        )));
    }
    let w = b.get(&format!("{name}.w"), &[cout, cin / groups, k, k], winit)?;
    let bias = b.get(&format!("{name}.b"), &[cout], Init::Zeros)?;
    x.conv2d(&w, Some(&bias), stride, pad, groups)
}

/// Depthwise 3x3 followed by pointwise 1x1.
pub(crate) fn dsconv<T: Scalar>(
    b: &Binder<T>,
    name: &str,
    x: &Tensor<T>,
    cout: usize,
) -> Result<Tensor<T>> {
    let cin = x.shape()[1];
    let dw = conv(b, &format!("{name}.dw"), x, cin, 3, 1, 1, cin, Init::FanIn)?;
    conv(b, &format!("{name}.pw"), &dw, cout, 1, 1, 0, 1, Init::FanIn)
}

/// Channel-attention bottleneck gate: X * sigmoid(W_up(relu(W_dn(gap(X))))).
fn channel_attention<T: Scalar>(
    b: &Binder<T>,
    name: &str,
    x: &Tensor<T>,
    reduction: usize,
) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    let mid = (c / reduction).max(1);
    let pooled = x.global_avg_pool()?;
    let dn = conv(b, &format!("{name}.dn"), &pooled, mid, 1, 1, 0, 1, Init::FanIn)?.relu();
    let up = conv(b, &format!("{name}.up"), &dn, c, 1, 1, 0, 1, Init::FanIn)?;
    x.mul(&up.sigmoid())
}

/// Two 1x1 convolutions with a ReLU between, applied on the half-grid.
fn branch<T: Scalar>(b: &Binder<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    let h = conv(b, &format!("{name}.w1"), x, c, 1, 1, 0, 1, Init::FanIn)?.relu();
    conv(b, &format!("{name}.w2"), &h, c, 1, 1, 0, 1, Init::FanIn)
}

/// Spatial branch S: two 3x3 convolutions with a LeakyReLU between.
fn spatial_branch<T: Scalar>(b: &Binder<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    let h = conv(b, &format!("{name}.c1"), x, c, 3, 1, 1, 1, Init::FanIn)?
        .leaky_relu(T::cast(LEAKY_SLOPE));
    conv(b, &format!("{name}.c2"), &h, c, 3, 1, 1, 1, Init::FanIn)
}

/// Amplitude-phase entangled Fourier block:
/// A' = W2A(relu(W1A(A))), P' likewise,
/// A_hat = A' + A' * softmax(pool(CA(P' - P))),
/// P_hat = P' + P' * softmax(pool(CA(A' - A))),
/// out = S(X) + irfft2(A_hat * exp(i * P_hat)).
/// The softmax runs over the channel axis of the pooled vector.
pub fn ape_forward<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    x: &Tensor<T>,
    cfg: &ArchConfig,
) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let spec = x.rfft2()?;
    let amp = spec.amplitude();
    let pha = spec.phase();
    let a1 = branch(b, &format!("{prefix}.amp"), &amp)?;
    let p1 = branch(b, &format!("{prefix}.pha"), &pha)?;
    let amp_gate = channel_attention(
        b,
        &format!("{prefix}.ca_p"),
        &p1.sub(&pha)?,
        cfg.ca_reduction,
    )?
    .global_avg_pool()?
    .softmax(1)?;
    let pha_gate = channel_attention(
        b,
        &format!("{prefix}.ca_a"),
        &a1.sub(&amp)?,
        cfg.ca_reduction,
    )?
    .global_avg_pool()?
    .softmax(1)?;
    let a_hat = a1.add(&a1.mul(&amp_gate)?)?;
    let p_hat = p1.add(&p1.mul(&pha_gate)?)?;
    let four = ComplexHalfSpectrum::from_polar(&a_hat, &p_hat, h, w)?.irfft2(h, w)?;
    spatial_branch(b, &format!("{prefix}.s"), x)?.add(&four)
}

/// Plain Fourier block for the "common Fourier module" ablation: amplitude
/// and phase are processed independently, no cross-entanglement.
pub(crate) fn fourier_block_forward<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let rank = x.shape().len();
    let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
    let spec = x.rfft2()?;
    let a1 = branch(b, &format!("{prefix}.amp"), &spec.amplitude())?;
    let p1 = branch(b, &format!("{prefix}.pha"), &spec.phase())?;
    let four = ComplexHalfSpectrum::from_polar(&a1, &p1, h, w)?.irfft2(h, w)?;
    spatial_branch(b, &format!("{prefix}.s"), x)?.add(&four)
}

/// Efficient channel attention: 1D conv of size k over the pooled channel
/// descriptor, sigmoid gate, channel-wise rescale.
pub fn eca_forward<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    x: &Tensor<T>,
    kernel: usize,
) -> Result<Tensor<T>> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidArgument("ECA kernel must be odd".into()));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let desc = x.global_avg_pool()?.reshape(&[n, 1, 1, c])?;
    // pad only the channel axis by hand; conv2d pads both spatial dims
    let p = (kernel - 1) / 2;
    let zeros = Tensor::zeros(&[n, 1, 1, p]);
    let padded = concat(&[&zeros, &desc, &zeros], 3)?;
    let w = b.get(&format!("{prefix}.w"), &[1, 1, 1, kernel], Init::FanIn)?;
    let bias = b.get(&format!("{prefix}.b"), &[1], Init::Zeros)?;
    let gate = padded
        .conv2d(&w, Some(&bias), 1, 0, 1)?
        .sigmoid()
        .reshape(&[n, c, 1, 1])?;
    x.mul(&gate)
}

/// X + leaky_relu(ECA(DSConv(X))): the residual unit of both encoders.
pub fn residual_block_forward<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    x: &Tensor<T>,
    eca_kernel: usize,
) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    let f = dsconv(b, &format!("{prefix}.conv"), x, c)?;
    let f = eca_forward(b, &format!("{prefix}.eca"), &f, eca_kernel)?;
    x.add(&f.leaky_relu(T::cast(LEAKY_SLOPE)))
}

fn layer_norm_2d<T: Scalar>(b: &Binder<T>, name: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.shape()[1];
    let gamma = b.get(&format!("{name}.g"), &[c], Init::Ones)?;
    let beta = b.get(&format!("{name}.b"), &[c], Init::Zeros)?;
    x.layer_norm(&gamma, &beta)
}

/// l2-normalize along the last axis with an epsilon inside the sqrt.
fn l2_normalize_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let axis = x.shape().len() - 1;
    let norm = x.square().sum_axis(axis)?.add_scalar(T::cast(1e-12)).sqrt();
    x.div(&norm)
}

/// Channel-wise attention internals: (attention weights, values).
/// Attention is (N*heads, C/h, C/h) with rows summing to 1.
fn attention_parts<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    xn: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = (
        xn.shape()[0],
        xn.shape()[1],
        xn.shape()[2],
        xn.shape()[3],
    );
    if c % heads != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} channels not divisible by {} heads",
            c, heads
        )));
    }
    let ch = c / heads;
    let hw = h * w;
    let to_heads = |t: Tensor<T>| t.reshape(&[n * heads, ch, hw]);
    let q = to_heads(conv(b, &format!("{prefix}.q"), xn, c, 1, 1, 0, 1, Init::FanIn)?)?;
    let k = to_heads(conv(b, &format!("{prefix}.k"), xn, c, 1, 1, 0, 1, Init::FanIn)?)?;
    let v = to_heads(conv(b, &format!("{prefix}.v"), xn, c, 1, 1, 0, 1, Init::FanIn)?)?;
    let qn = l2_normalize_last(&q)?;
    let kn = l2_normalize_last(&k)?;
    let tau = b.get(&format!("{prefix}.tau"), &[1, 1, 1], Init::Ones)?;
    let scores = qn.matmul(&kn.transpose_last2()?)?.mul(&tau)?;
    Ok((scores.softmax(2)?, v))
}

/// Attention weights alone, exposed so the row-stochastic property is
/// directly testable.
pub fn transformer_attention<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    x: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let xn = layer_norm_2d(b, &format!("{prefix}.ln1"), x)?;
    Ok(attention_parts(b, &format!("{prefix}.attn"), &xn, heads)?.0)
}

/// Channel-wise transformer block: LN -> transposed self-attention ->
/// residual, then LN -> gated feed-forward -> residual.
pub fn transformer_block_forward<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    x: &Tensor<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let xn = layer_norm_2d(b, &format!("{prefix}.ln1"), x)?;
    let (attn, v) = attention_parts(b, &format!("{prefix}.attn"), &xn, heads)?;
    let ctx = attn.matmul(&v)?.reshape(&[n, c, h, w])?;
    let proj = conv(b, &format!("{prefix}.attn.o"), &ctx, c, 1, 1, 0, 1, Init::FanIn)?;
    let y = x.add(&proj)?;
    let yn = layer_norm_2d(b, &format!("{prefix}.ln2"), &y)?;
    let hidden = 2 * c;
    let a = conv(b, &format!("{prefix}.ffn.a"), &yn, hidden, 1, 1, 0, 1, Init::FanIn)?;
    let g = conv(b, &format!("{prefix}.ffn.g"), &yn, hidden, 1, 1, 0, 1, Init::FanIn)?;
    let gated = a.mul(&g.sigmoid())?;
    let out = conv(b, &format!("{prefix}.ffn.o"), &gated, c, 1, 1, 0, 1, Init::FanIn)?;
    y.add(&out)
}

/// Per-position cosine similarity along the channel axis, with the
/// denominator guarded so zero-norm positions produce ~0.
fn cosine_sim<T: Scalar>(a: &Tensor<T>, bt: &Tensor<T>) -> Result<Tensor<T>> {
    let dot = a.mul(bt)?.sum_axis(1)?;
    let na = a.square().sum_axis(1)?.sqrt();
    let nb = bt.square().sum_axis(1)?.sqrt();
    dot.div(&na.mul(&nb)?.add_scalar(T::cast(1e-8)))
}

/// Fusion with dynamic alignment. Multi-scale depthwise views of the event
/// feature are weighted per position by softmax-normalized cosine
/// similarity to the image feature, then refined by a predicted-offset
/// (deformable) resampling, and finally fused with F_f and F_img through a
/// depthwise-separable convolution.
pub fn fda_forward<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    f_img: &Tensor<T>,
    f_e: &Tensor<T>,
    f_f: &Tensor<T>,
) -> Result<Tensor<T>> {
    if f_img.shape()[2..] != f_e.shape()[2..] || f_img.shape()[2..] != f_f.shape()[2..] {
        return Err(Error::ShapeMismatch(format!(
            "fda spatial dims differ: img {:?}, events {:?}, fused {:?}",
            f_img.shape(),
            f_e.shape(),
            f_f.shape()
        )));
    }
    if f_img.shape()[1] != f_e.shape()[1] {
        return Err(Error::ShapeMismatch(
            "image and event features must share channel count".into(),
        ));
    }
    let c = f_img.shape()[1];
    let mut scaled = Vec::new();
    let mut sims = Vec::new();
    for s in [3usize, 5, 7] {
        let fe_s = conv(
            b,
            &format!("{prefix}.scale{s}"),
            f_e,
            c,
            s,
            1,
            (s - 1) / 2,
            c,
            Init::FanIn,
        )?;
        sims.push(cosine_sim(&fe_s, f_img)?);
        scaled.push(fe_s);
    }
    let sim_refs: Vec<&Tensor<T>> = sims.iter().collect();
    let weights = concat(&sim_refs, 1)?.softmax(1)?;
    let mut f_ef: Option<Tensor<T>> = None;
    for (i, fe_s) in scaled.iter().enumerate() {
        let w_s = weights.narrow(1, i, 1)?;
        let term = fe_s.mul(&w_s)?;
        f_ef = Some(match f_ef {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let f_ef = f_ef.expect("three scales");
    // deformable refinement: offsets from the event/image pair, zero-init
    // so alignment starts as the identity; magnitude bounded to 4 px
    let off_in = concat(&[&f_ef, f_img], 1)?;
    let flow = conv(
        b,
        &format!("{prefix}.offset"),
        &off_in,
        2,
        3,
        1,
        1,
        1,
        Init::Zeros,
    )?
    .tanh_act()
    .scale(T::cast(4.0));
    let aligned = f_ef.bilinear_sample(&flow)?;
    let fused_in = concat(&[f_f, f_img, &aligned], 1)?;
    dsconv(b, &format!("{prefix}.fuse"), &fused_in, f_f.shape()[1])
}

/// Plain fusion for the "w/o FDA" ablation: concat and fuse, no alignment.
pub(crate) fn fuse_plain<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    f_img: &Tensor<T>,
    f_e: &Tensor<T>,
    f_f: &Tensor<T>,
) -> Result<Tensor<T>> {
    let fused_in = concat(&[f_f, f_img, f_e], 1)?;
    dsconv(b, &format!("{prefix}.fuse"), &fused_in, f_f.shape()[1])
}
