//! Training losses and their weighted aggregation.

use monoview_autodiff::{lit, Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon_color: f64,
    pub recon_alpha: f64,
    pub adv_color: f64,
    pub adv_alpha: f64,
    pub pose_consistency: f64,
    /// 0 disables pose supervision.
    pub pose_supervised: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { recon_color: 1.0, recon_alpha: 1.0, adv_color: 1.0, adv_alpha: 1.0, pose_consistency: 50.0, pose_supervised: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon_color, self.recon_alpha, self.adv_color, self.adv_alpha, self.pose_consistency, self.pose_supervised];
        if all.iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Unweighted loss terms of one step; absent optional terms count as 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub recon_color: f64,
    pub recon_alpha: f64,
    pub adv_color: Option<f64>,
    pub adv_alpha: Option<f64>,
    pub pose_consistency: Option<f64>,
    pub pose_supervised: Option<f64>,
    pub disc_color: Option<f64>,
    pub disc_alpha: Option<f64>,
}

/// Per-term values and the weighted generator total. Discriminator losses
/// are reported but not part of the total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_color: f64,
    pub recon_alpha: f64,
    pub adv_color: f64,
    pub adv_alpha: f64,
    pub pose_consistency: f64,
    pub pose_supervised: f64,
    pub disc_color: f64,
    pub disc_alpha: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.recon_color * self.recon_color
            + w.recon_alpha * self.recon_alpha
            + w.adv_color * self.adv_color
            + w.adv_alpha * self.adv_alpha
            + w.pose_consistency * self.pose_consistency
            + w.pose_supervised * self.pose_supervised
    }

    /// `(name, value)` pairs in a fixed order.
    pub fn terms(&self) -> [(&'static str, f64); 9] {
        [
            ("recon_color", self.recon_color),
            ("recon_alpha", self.recon_alpha),
            ("adv_color", self.adv_color),
            ("adv_alpha", self.adv_alpha),
            ("pose_consistency", self.pose_consistency),
            ("pose_supervised", self.pose_supervised),
            ("disc_color", self.disc_color),
            ("disc_alpha", self.disc_alpha),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

pub fn combine_losses(terms: &LossTerms, weights: &LossWeights) -> LossReport {
    let mut report = LossReport {
        recon_color: terms.recon_color,
        recon_alpha: terms.recon_alpha,
        adv_color: terms.adv_color.unwrap_or(0.0),
        adv_alpha: terms.adv_alpha.unwrap_or(0.0),
        pose_consistency: terms.pose_consistency.unwrap_or(0.0),
        pose_supervised: terms.pose_supervised.unwrap_or(0.0),
        disc_color: terms.disc_color.unwrap_or(0.0),
        disc_alpha: terms.disc_alpha.unwrap_or(0.0),
        total: 0.0,
    };
    report.total = report.weighted_total(weights);
    report
}

fn mean_sq<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
    s / lit(a.len().max(1) as f64)
}

/// Mean squared difference over all pixels and channels.
pub fn reconstruction_loss<T: Scalar>(target: &[T], rendered: &[T]) -> Result<T> {
    if target.len() != rendered.len() {
        return Err(Error::Argument(format!("{} target values vs {} rendered", target.len(), rendered.len())));
    }
    Ok(mean_sq(target, rendered))
}

fn log_sigmoid<T: Scalar>(x: T) -> T {
    monoview_autodiff::sigmoid(x).max(lit(LOG_FLOOR)).ln()
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>) -> T {
    let (s, n) = v.fold((T::zero(), 0usize), |(s, n), x| (s + x, n + 1));
    s / lit(n.max(1) as f64)
}

/// `(discriminator loss, non-saturating generator loss)` from logits.
pub fn adversarial_losses<T: Scalar>(real_logits: &[T], fake_logits: &[T]) -> (T, T) {
    let d = -mean(real_logits.iter().map(|&x| log_sigmoid(x))) - mean(fake_logits.iter().map(|&x| log_sigmoid(-x)));
    let g = -mean(fake_logits.iter().map(|&x| log_sigmoid(x)));
    (d, g)
}

/// Mean squared difference over the 7 pose numbers.
pub fn pose_consistency_loss<T: Scalar>(sampled: &CameraPose<T>, reestimated: &CameraPose<T>) -> T {
    mean_sq(&sampled.params(), &reestimated.params())
}

/// Translation MSE plus rotation-parameter MSE; needs a ground-truth pose.
pub fn pose_supervised_loss<T: Scalar>(pred: &CameraPose<T>, gt: Option<&CameraPose<T>>) -> Result<T> {
    let gt = gt.ok_or_else(|| Error::Argument("pose-supervised loss on a record without ground-truth pose".into()))?;
    let (p, g) = (pred.params(), gt.params());
    Ok(mean_sq(&p[4..], &g[4..]) + mean_sq(&p[..4], &g[..4]))
}

/// Differentiable mean squared difference.
pub fn mse<'g, T: Scalar>(a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
    a.sub(b).square().mean()
}

/// `−mean log s(real) − mean log s(−fake)`.
pub fn discriminator_loss<'g, T: Scalar>(real: Var<'g, T>, fake: Var<'g, T>) -> Var<'g, T> {
    let floor = lit(LOG_FLOOR);
    real.log_sigmoid_clamped(floor).mean().add(fake.scale(-T::one()).log_sigmoid_clamped(floor).mean()).scale(-T::one())
}

/// Non-saturating `−mean log s(fake)`, or the saturating `mean log s(−fake)`.
pub fn generator_loss<'g, T: Scalar>(fake: Var<'g, T>, saturating: bool) -> Var<'g, T> {
    let floor = lit(LOG_FLOOR);
    if saturating {
        fake.scale(-T::one()).log_sigmoid_clamped(floor).mean()
    } else {
        fake.log_sigmoid_clamped(floor).mean().scale(-T::one())
    }
}

/// Pose supervision on the rows of `pred`/`gt` (`[B, 7]`) selected by
/// `labeled`; averaged over labeled rows. `None` when no row is labeled.
pub fn pose_supervised<'g, T: Scalar>(pred: Var<'g, T>, gt: Var<'g, T>, labeled: &[bool]) -> Option<Var<'g, T>> {
    let rows: Vec<usize> = labeled.iter().enumerate().filter(|(_, l)| **l).map(|(i, _)| i).collect();
    if rows.is_empty() {
        return None;
    }
    let idx: std::rc::Rc<[usize]> = rows.into();
    let (p, g) = (pred.gather_rows(idx.clone()), gt.gather_rows(idx));
    Some(mse(p.slice_cols(4, 7), g.slice_cols(4, 7)).add(mse(p.slice_cols(0, 4), g.slice_cols(0, 4))))
}
