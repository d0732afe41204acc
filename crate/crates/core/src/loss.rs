//! Training objectives: Charbonnier reconstruction, perceptual distance
//! through a frozen random feature pyramid, and the contrastive ratio over
//! spatial-frequency negatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Loss hyperparameters. Defaults follow the training recipe.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub stage1_weight: f64,
    pub epsilon: f64,
    pub k: usize,
    /// Per-pixel Charbonnier variant (mean over sqrt((a-b)^2 + eps));
    /// default off, the literal whole-image form is used.
    pub per_pixel_charbonnier: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 0.5,
            lambda_c: 0.1,
            stage1_weight: 0.1,
            epsilon: 1e-6,
            k: 4,
            per_pixel_charbonnier: false,
        }
    }
}

/// sqrt(||a - b||_2 + eps), taken literally on the whole image. A tiny
/// inner guard keeps the gradient of the L2 norm finite at a == b while
/// perturbing the value by less than 1e-9.
pub fn charbonnier<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "charbonnier shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let sq = a.sub(b)?.square().sum();
    Ok(sq
        .add_scalar(T::cast(1e-24))
        .sqrt()
        .add_scalar(T::cast(epsilon))
        .sqrt())
}

/// mean(sqrt((a - b)^2 + eps)): the common smooth-L1-style variant, kept
/// behind a flag for experimentation.
pub fn charbonnier_per_pixel<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "charbonnier shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.sub(b)?.square().add_scalar(T::cast(epsilon)).sqrt().mean())
}

fn charbonnier_cfg<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    if w.per_pixel_charbonnier {
        charbonnier_per_pixel(a, b, w.epsilon)
    } else {
        charbonnier(a, b, w.epsilon)
    }
}

/// Frozen random 4-stage conv pyramid standing in for a pretrained feature
/// extractor. Widths 8, 16, 32, 64 with stride-2 transitions; weights are
/// drawn once from a seeded fan-in-scaled uniform and never trained, so the
/// same seed yields the same features in any process.
pub struct PerceptualExtractor<T: Scalar> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

const PERCEPTUAL_WIDTHS: [usize; 4] = [8, 16, 32, 64];

impl<T: Scalar> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = 3;
        for cout in PERCEPTUAL_WIDTHS {
            let fan_in = cin * 9;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<T> = (0..cout * cin * 9)
                .map(|_| T::cast(rng.gen_range(-bound..bound)))
                .collect();
            let b: Vec<T> = (0..cout)
                .map(|_| T::cast(rng.gen_range(-bound..bound)))
                .collect();
            stages.push((
                Tensor::from_vec(w, &[cout, cin, 3, 3]).unwrap(),
                Tensor::from_vec(b, &[cout]).unwrap(),
            ));
            cin = cout;
        }
        PerceptualExtractor { stages }
    }

    /// Stage activations for a (N, 3, H, W) image; H, W divisible by 8.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected (N, 3, H, W), got {:?}",
                s
            )));
        }
        if s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial dims {}x{} not divisible by 8",
                s[2], s[3]
            )));
        }
        let mut feats = Vec::new();
        let mut cur = x.clone();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            cur = cur
                .conv2d(w, Some(b), stride, 1, 1)?
                .leaky_relu(T::cast(0.1));
            feats.push(cur.clone());
        }
        Ok(feats)
    }
}

/// Sum over stages of the mean absolute feature difference.
pub fn perceptual<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: &PerceptualExtractor<T>,
) -> Result<Tensor<T>> {
    let fa = f.features(a)?;
    let fb = f.features(b)?;
    let mut total: Option<Tensor<T>> = None;
    for (xa, xb) in fa.iter().zip(&fb) {
        let d = xa.sub(xb)?.abs().mean();
        total = Some(match total {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    Ok(total.expect("at least one stage"))
}

/// L_c = d(x_hat, y) / ((1/K) * sum_k d(x_hat, neg_k) + 1e-8) with d the
/// perceptual distance; pulls the output toward the target and away from
/// the synthesized negatives.
pub fn contrastive<T: Scalar>(
    x_hat: &Tensor<T>,
    y: &Tensor<T>,
    negatives: &[Tensor<T>],
    f: &PerceptualExtractor<T>,
) -> Result<Tensor<T>> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    let num = perceptual(x_hat, y, f)?;
    let mut denom: Option<Tensor<T>> = None;
    for neg in negatives {
        let d = perceptual(x_hat, neg, f)?;
        denom = Some(match denom {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    let k = T::cast(negatives.len() as f64);
    let denom = denom
        .expect("nonempty")
        .scale(T::one() / k)
        .add_scalar(T::cast(1e-8));
    num.div(&denom)
}

/// Per-term values of one objective evaluation, for CSV logging.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub l_r1: f64,
    pub l_p1: f64,
    pub l_r2: f64,
    pub l_p2: f64,
    pub l_c: f64,
    pub total: f64,
}

/// stage1_weight * (L_r1 + lambda_p * L_p1) + (L_r2 + lambda_p * L_p2 +
/// lambda_c * L_c). The contrastive term is skipped when lambda_c == 0 or
/// no negatives are supplied.
pub fn total_loss<T: Scalar>(
    x1: &Tensor<T>,
    x_hat: &Tensor<T>,
    y: &Tensor<T>,
    negatives: &[Tensor<T>],
    w: &LossWeights,
    f: &PerceptualExtractor<T>,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let l_r1 = charbonnier_cfg(x1, y, w)?;
    let l_p1 = perceptual(x1, y, f)?;
    let l_r2 = charbonnier_cfg(x_hat, y, w)?;
    let l_p2 = perceptual(x_hat, y, f)?;
    let stage1 = l_r1.add(&l_p1.scale(T::cast(w.lambda_p)))?.scale(T::cast(w.stage1_weight));
    let mut stage2 = l_r2.add(&l_p2.scale(T::cast(w.lambda_p)))?;
    let l_c_val;
    if w.lambda_c != 0.0 && !negatives.is_empty() {
        let l_c = contrastive(x_hat, y, negatives, f)?;
        l_c_val = l_c.item().as_f64();
        stage2 = stage2.add(&l_c.scale(T::cast(w.lambda_c)))?;
    } else {
        l_c_val = 0.0;
    }
    let total = stage1.add(&stage2)?;
    let breakdown = LossBreakdown {
        l_r1: l_r1.item().as_f64(),
        l_p1: l_p1.item().as_f64(),
        l_r2: l_r2.item().as_f64(),
        l_p2: l_p2.item().as_f64(),
        l_c: l_c_val,
        total: total.item().as_f64(),
    };
    Ok((total, breakdown))
}
