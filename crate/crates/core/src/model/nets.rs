//! The two networks and the combined two-stage forward pass.

use super::blocks::{
    ape_forward, conv, fda_forward, fourier_block_forward, fuse_plain, residual_block_forward,
    transformer_block_forward, LEAKY_SLOPE,
};
use super::{AblationFlags, ArchConfig, Binder, Init};
use crate::error::{Error, Result};
use crate::tensor::{concat, Scalar, Tensor};

fn check_dims<T: Scalar>(x: &Tensor<T>, levels: usize) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "expected (N, C, H, W), got {:?}",
            s
        )));
    }
    let div = 1 << (levels - 1);
    if s[2] % div != 0 || s[3] % div != 0 {
        return Err(Error::ShapeMismatch(format!(
            "spatial dims {}x{} not divisible by {}",
            s[2], s[3], div
        )));
    }
    Ok(())
}

fn down<T: Scalar>(b: &Binder<T>, name: &str, x: &Tensor<T>, cout: usize) -> Result<Tensor<T>> {
    conv(b, name, x, cout, 3, 2, 1, 1, Init::FanIn)
}

fn up<T: Scalar>(b: &Binder<T>, name: &str, x: &Tensor<T>, cout: usize) -> Result<Tensor<T>> {
    let cin = x.shape()[1];
    let w = b.get(&format!("{name}.w"), &[cin, cout, 2, 2], Init::FanIn)?;
    let bias = b.get(&format!("{name}.b"), &[cout], Init::Zeros)?;
    x.transposed_conv2d(&w, Some(&bias), 2)
}

/// Stage 1: Fourier-prior visibility restoration. Encoder of APE blocks
/// with strided-conv downsampling, plain conv decoder with transposed-conv
/// upsampling and additive skips, plus a global residual onto the input.
/// Output is unclamped; clamp to [0,1] at evaluation only.
pub fn visibility_forward<T: Scalar>(
    b: &Binder<T>,
    cfg: &ArchConfig,
    x: &Tensor<T>,
    flags: &AblationFlags,
) -> Result<Tensor<T>> {
    check_dims(x, cfg.levels())?;
    let levels = cfg.levels();
    let mut feat = conv(b, "vis.stem", x, cfg.widths[0], 3, 1, 1, 1, Init::FanIn)?;
    let mut skips = Vec::new();
    for l in 0..levels {
        feat = if flags.no_ape {
            fourier_block_forward(b, &format!("vis.enc{l}"), &feat)?
        } else {
            ape_forward(b, &format!("vis.enc{l}"), &feat, cfg)?
        };
        if l + 1 < levels {
            skips.push(feat.clone());
            feat = down(b, &format!("vis.down{l}"), &feat, cfg.widths[l + 1])?;
        }
    }
    for l in (0..levels - 1).rev() {
        feat = conv(
            b,
            &format!("vis.dec{l}.conv"),
            &feat,
            feat.shape()[1],
            3,
            1,
            1,
            1,
            Init::FanIn,
        )?
        .leaky_relu(T::cast(LEAKY_SLOPE));
        feat = up(b, &format!("vis.dec{l}.up"), &feat, cfg.widths[l])?;
        feat = feat.add(&skips[l])?;
    }
    let out = conv(b, "vis.head", &feat, 3, 3, 1, 1, 1, Init::FanIn)?;
    out.add(x)
}

/// One residual-ECA encoder over either the image or the event voxel.
/// Returns per-level features, shallow to deep.
fn feature_encoder<T: Scalar>(
    b: &Binder<T>,
    prefix: &str,
    cfg: &ArchConfig,
    x: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let levels = cfg.levels();
    let mut feat = conv(
        b,
        &format!("{prefix}.stem"),
        x,
        cfg.widths[0],
        3,
        1,
        1,
        1,
        Init::FanIn,
    )?;
    let mut out = Vec::new();
    for l in 0..levels {
        feat = residual_block_forward(b, &format!("{prefix}.res{l}"), &feat, cfg.eca_kernel)?;
        out.push(feat.clone());
        if l + 1 < levels {
            feat = down(b, &format!("{prefix}.down{l}"), &feat, cfg.widths[l + 1])?;
        }
    }
    Ok(out)
}

/// Stage 2: event-guided structure refinement. Parallel image/event
/// encoders, per-level fusion (conv on the concat -> transformer -> FDA),
/// and a transformer decoder with additive skips; global residual onto the
/// stage-1 image.
pub fn refinement_forward<T: Scalar>(
    b: &Binder<T>,
    cfg: &ArchConfig,
    x1: &Tensor<T>,
    voxel: &Tensor<T>,
    flags: &AblationFlags,
) -> Result<Tensor<T>> {
    check_dims(x1, cfg.levels())?;
    if voxel.shape().len() != 4
        || voxel.shape()[0] != x1.shape()[0]
        || voxel.shape()[2..] != x1.shape()[2..]
    {
        return Err(Error::ShapeMismatch(format!(
            "voxel {:?} does not match image {:?}",
            voxel.shape(),
            x1.shape()
        )));
    }
    let levels = cfg.levels();
    let img_feats = feature_encoder(b, "ref.img", cfg, x1)?;
    let ev_feats = feature_encoder(b, "ref.ev", cfg, voxel)?;
    let mut fused = Vec::new();
    for l in 0..levels {
        let cat = concat(&[&img_feats[l], &ev_feats[l]], 1)?;
        let f = conv(
            b,
            &format!("ref.fuse{l}.conv"),
            &cat,
            cfg.widths[l],
            3,
            1,
            1,
            1,
            Init::FanIn,
        )?;
        let f = transformer_block_forward(b, &format!("ref.fuse{l}.tf"), &f, cfg.heads)?;
        let f = if flags.no_fda {
            fuse_plain(b, &format!("ref.fuse{l}.fda"), &img_feats[l], &ev_feats[l], &f)?
        } else {
            fda_forward(b, &format!("ref.fuse{l}.fda"), &img_feats[l], &ev_feats[l], &f)?
        };
        fused.push(f);
    }
    let mut feat = fused[levels - 1].clone();
    for l in (0..levels - 1).rev() {
        feat = transformer_block_forward(b, &format!("ref.dec{l}.tf"), &feat, cfg.heads)?;
        feat = up(b, &format!("ref.dec{l}.up"), &feat, cfg.widths[l])?;
        feat = feat.add(&fused[l])?;
    }
    feat = transformer_block_forward(b, "ref.dec_final.tf", &feat, cfg.heads)?;
    let out = conv(b, "ref.head", &feat, 3, 3, 1, 1, 1, Init::FanIn)?;
    out.add(x1)
}

/// Both stages: x' = visibility(x), x_hat = refinement(x', E). Stage 2
/// always consumes the stage-1 output, never the raw input (unless stage 1
/// itself is ablated away).
pub fn full_forward<T: Scalar>(
    b: &Binder<T>,
    cfg: &ArchConfig,
    x: &Tensor<T>,
    voxel: &Tensor<T>,
    flags: &AblationFlags,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let x1 = if flags.no_stage1 {
        x.clone()
    } else {
        visibility_forward(b, cfg, x, flags)?
    };
    let x2 = if flags.no_stage2 {
        x1.clone()
    } else {
        refinement_forward(b, cfg, &x1, voxel, flags)?
    };
    Ok((x1, x2))
}
