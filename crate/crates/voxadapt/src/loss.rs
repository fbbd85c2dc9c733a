//! Reconstruction, adversarial, and joint losses plus the equilibrium
//! bookkeeping that balances each generator/discriminator pair.
//!
//! Both discriminators are autoencoders whose score for an input is the
//! mean L1 error of reconstructing it. The discriminator objective drives
//! that score down on the "true" side and up (weighted by a slowly adapted
//! scalar) on the generated side; the scalar integrates the mismatch
//! between the two sides over time and stays clamped to [0, 1].
//!
//! The scalar coefficient helpers are shared with the training tapes so
//! a loss assembled from tape ops and the same loss computed here from
//! raw scores agree bit for bit.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("{which} must be a non-negative score, got {value}")]
    NegativeScore { which: &'static str, value: f64 },
    #[error("loss weight must lie in [0,1], got {0}")]
    WeightOutOfRange(f64),
    #[error("cannot total losses: {0} missing from the report")]
    MissingComponent(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Balance scalars and their update hyperparameters for both adversarial
/// pairs: `k` weights the 2D pair, `s` the 3D pair.
#[derive(Debug, Clone)]
pub struct EquilibriumState {
    pub k: f64,
    pub s: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    /// Update `s` with the generated-sample score in the gamma position.
    /// Off by default: the balanced form mirrors the `k` update, which is
    /// also how the 2D pair is written; the literal variant exists for
    /// comparison runs.
    pub literal_s_update: bool,
}

impl Default for EquilibriumState {
    fn default() -> Self {
        EquilibriumState {
            k: 0.0,
            s: 0.0,
            lambda2: 0.01,
            lambda3: 0.01,
            gamma2: 1.15,
            gamma3: 1.15,
            literal_s_update: false,
        }
    }
}

/// Weights trading reconstruction against adversarial feedback in the two
/// generator objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub phi2: f64,
    pub phi3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            phi2: 0.7,
            phi3: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for v in [self.phi2, self.phi3] {
            if !(0.0..=1.0).contains(&v) {
                return Err(LossError::WeightOutOfRange(v));
            }
        }
        Ok(())
    }
}

/// Every scalar logged for one training step. Components of an inactive
/// branch are `None` (the 3D branch during 2D pretraining and vice versa).
#[derive(Debug, Clone, Default)]
pub struct LossReport {
    pub rec2_w: Option<f64>,
    pub rec2_wv: Option<f64>,
    pub adv2: Option<f64>,
    pub g2: Option<f64>,
    pub d2: Option<f64>,
    pub rec3: Option<f64>,
    pub adv3: Option<f64>,
    pub g3: Option<f64>,
    pub d3: Option<f64>,
    pub k: f64,
    pub s: f64,
    pub g_total: f64,
    pub d_total: f64,
    pub m2: Option<f64>,
    pub m3: Option<f64>,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.rec2_w, self.rec2_wv, self.adv2, self.g2, self.d2, self.rec3,
            self.adv3, self.g3, self.d3, self.m2, self.m3,
        ]
        .iter()
        .flatten()
        .chain([self.k, self.s, self.g_total, self.d_total].iter())
        .all(|v| v.is_finite())
    }

    pub fn max_magnitude(&self) -> f64 {
        [
            self.rec2_w, self.rec2_wv, self.adv2, self.g2, self.d2, self.rec3,
            self.adv3, self.g3, self.d3, self.m2, self.m3,
        ]
        .iter()
        .flatten()
        .chain([self.k, self.s, self.g_total, self.d_total].iter())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

fn check_score(which: &'static str, value: f64) -> Result<(), LossError> {
    if value < 0.0 || !value.is_finite() {
        return Err(LossError::NegativeScore { which, value });
    }
    Ok(())
}

/// Mean L1 between an image batch and its reconstruction.
pub fn rec_loss_2d(x: &Tensor, reconstruction: &Tensor) -> Result<f64, LossError> {
    Ok(reconstruction.mean_abs_diff(x)?)
}

/// Mean L1 between generated voxel batches and their ground truths.
/// Only synthesized-domain items have ground truths, so only those are
/// ever passed here.
pub fn rec_loss_3d(generated: &Tensor, truth: &Tensor) -> Result<f64, LossError> {
    Ok(generated.mean_abs_diff(truth)?)
}

/// Coefficients of the 2D generator objective:
/// `w_rec * (rec_w + rec_wv) + w_adv * adv_w`.
pub fn g2_coeffs(phi2: f64) -> (f64, f64) {
    (0.5 * (1.0 - phi2), phi2)
}

/// Coefficients of the 3D generator objective:
/// `w_rec * rec3 + w_adv * adv_mean`.
pub fn g3_coeffs(phi3: f64) -> (f64, f64) {
    (1.0 - phi3, phi3)
}

/// The mean generated-side score entering the 3D losses.
pub fn adv_mean_3d(score_gen_w: f64, score_gen_wv: f64) -> f64 {
    0.5 * (score_gen_w + score_gen_wv)
}

/// 2D discriminator objective and the next balance scalar.
///
/// The discriminator treats the synthesized-domain reconstruction as its
/// "true" side: `L_D2 = score_synth - k * score_fake`, and `k` moves by
/// `lambda2 * (gamma2 * score_synth - score_fake)`, clamped to [0, 1].
pub fn d2_losses(
    score_fake_domain: f64,
    score_synth_domain: f64,
    eq: &EquilibriumState,
) -> Result<(f64, f64), LossError> {
    check_score("fake-domain score", score_fake_domain)?;
    check_score("synth-domain score", score_synth_domain)?;
    let loss = score_synth_domain + (-eq.k) * score_fake_domain;
    let next_k = eq.k + eq.lambda2 * (eq.gamma2 * score_synth_domain - score_fake_domain);
    Ok((loss, next_k.clamp(0.0, 1.0)))
}

/// 2D generator objective: reconstruction on both domains plus the
/// adversarial score of the real-style domain.
pub fn g2_loss(
    rec_w: f64,
    rec_wv: f64,
    adv_w: f64,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    check_score("rec_w", rec_w)?;
    check_score("rec_wv", rec_wv)?;
    check_score("adv_w", adv_w)?;
    let (w_rec, w_adv) = g2_coeffs(cfg.phi2);
    Ok(w_rec * (rec_w + rec_wv) + w_adv * adv_w)
}

/// 3D discriminator objective and the next balance scalar.
///
/// `L_D3 = score_real - 0.5 * s * (score_gen_w + score_gen_wv)`. The
/// balanced update moves `s` by `lambda3 * (gamma3 * score_real -
/// adv_mean)`; the literal variant replaces `score_real` with
/// `score_gen_w` in the gamma position.
pub fn d3_losses(
    score_real_voxel: f64,
    score_gen_w: f64,
    score_gen_wv: f64,
    eq: &EquilibriumState,
) -> Result<(f64, f64), LossError> {
    check_score("real-voxel score", score_real_voxel)?;
    check_score("generated score (w)", score_gen_w)?;
    check_score("generated score (wv)", score_gen_wv)?;
    let loss = score_real_voxel + (-0.5 * eq.s) * (score_gen_w + score_gen_wv);
    let anchor = if eq.literal_s_update {
        score_gen_w
    } else {
        score_real_voxel
    };
    let next_s =
        eq.s + eq.lambda3 * (eq.gamma3 * anchor - adv_mean_3d(score_gen_w, score_gen_wv));
    Ok((loss, next_s.clamp(0.0, 1.0)))
}

/// 3D generator objective: voxel reconstruction plus the mean generated
/// adversarial score.
pub fn g3_loss(rec3: f64, adv_mean: f64, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    check_score("rec3", rec3)?;
    check_score("adv_mean", adv_mean)?;
    let (w_rec, w_adv) = g3_coeffs(cfg.phi3);
    Ok(w_rec * rec3 + w_adv * adv_mean)
}

/// Joint objectives: the generator side sums both generator losses, the
/// discriminator side both discriminator losses.
pub fn total_losses(report: &LossReport) -> Result<(f64, f64), LossError> {
    let g2 = report.g2.ok_or(LossError::MissingComponent("L_G2"))?;
    let g3 = report.g3.ok_or(LossError::MissingComponent("L_G3"))?;
    let d2 = report.d2.ok_or(LossError::MissingComponent("L_D2"))?;
    let d3 = report.d3.ok_or(LossError::MissingComponent("L_D3"))?;
    Ok((g2 + g3, d2 + d3))
}

/// Convergence monitor: the true-side score plus the absolute balance
/// mismatch. Low and falling means the pair is converging.
pub fn convergence_measure(real_score: f64, fake_score: f64, gamma: f64) -> f64 {
    real_score + (gamma * real_score - fake_score).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn d2_example_values() {
        let eq = EquilibriumState::default();
        let (loss, k) = d2_losses(0.4, 0.5, &eq).unwrap();
        assert_eq!(loss, 0.5);
        assert!((k - 0.00175).abs() < 1e-15);
        let (loss, k) = d2_losses(0.0, 0.0, &eq).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(k, eq.k);
    }

    #[test]
    fn d2_clamps_below_zero() {
        let eq = EquilibriumState::default();
        let (_, k) = d2_losses(0.5, 0.0, &eq).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn d2_rejects_negative_scores() {
        let eq = EquilibriumState::default();
        assert!(d2_losses(-0.1, 0.5, &eq).is_err());
        assert!(d2_losses(0.1, -0.5, &eq).is_err());
    }

    #[test]
    fn g2_example_and_boundaries() {
        let cfg = LossConfig {
            phi2: 0.7,
            phi3: 0.2,
        };
        let v = g2_loss(0.2, 0.1, 0.3, &cfg).unwrap();
        assert!((v - 0.255).abs() < 1e-15, "{v}");
        let pure_rec = g2_loss(0.2, 0.1, 0.9, &LossConfig { phi2: 0.0, phi3: 0.2 }).unwrap();
        assert!((pure_rec - 0.5 * 0.3).abs() < 1e-15);
        let pure_adv = g2_loss(0.2, 0.1, 0.9, &LossConfig { phi2: 1.0, phi3: 0.2 }).unwrap();
        assert_eq!(pure_adv, 0.9);
        assert!(g2_loss(0.1, 0.1, 0.1, &LossConfig { phi2: 1.5, phi3: 0.2 }).is_err());
    }

    #[test]
    fn d3_example_values() {
        let mut eq = EquilibriumState {
            s: 1.0,
            ..Default::default()
        };
        let (loss, _) = d3_losses(0.6, 0.5, 0.3, &eq).unwrap();
        assert!((loss - 0.2).abs() < 1e-15, "{loss}");
        eq.s = 0.0;
        let (loss, s) = d3_losses(0.6, 0.5, 0.3, &eq).unwrap();
        assert_eq!(loss, 0.6);
        assert!((s - 0.0029).abs() < 1e-15, "{s}");
    }

    #[test]
    fn d3_literal_variant_moves_differently() {
        let mut eq = EquilibriumState {
            s: 0.5,
            ..Default::default()
        };
        let (_, balanced) = d3_losses(0.6, 0.5, 0.3, &eq).unwrap();
        eq.literal_s_update = true;
        let (_, literal) = d3_losses(0.6, 0.5, 0.3, &eq).unwrap();
        assert!((balanced - (0.5 + 0.01 * (1.15 * 0.6 - 0.4))).abs() < 1e-15);
        assert!((literal - (0.5 + 0.01 * (1.15 * 0.5 - 0.4))).abs() < 1e-15);
        assert_ne!(balanced, literal);
    }

    #[test]
    fn g3_example_and_boundaries() {
        let cfg = LossConfig {
            phi2: 0.7,
            phi3: 0.2,
        };
        let v = g3_loss(0.5, 0.25, &cfg).unwrap();
        assert!((v - 0.45).abs() < 1e-15, "{v}");
        assert_eq!(
            g3_loss(0.5, 0.9, &LossConfig { phi2: 0.7, phi3: 0.0 }).unwrap(),
            0.5
        );
        assert_eq!(
            g3_loss(0.5, 0.9, &LossConfig { phi2: 0.7, phi3: 1.0 }).unwrap(),
            0.9
        );
    }

    #[test]
    fn totals_sum_components_and_flag_missing_ones() {
        let mut report = LossReport {
            g2: Some(0.255),
            g3: Some(0.45),
            d2: Some(0.5),
            d3: Some(0.2),
            ..Default::default()
        };
        let (g, d) = total_losses(&report).unwrap();
        assert!((g - 0.705).abs() < 1e-15);
        assert!((d - 0.7).abs() < 1e-15);
        report.g3 = None;
        assert!(matches!(
            total_losses(&report),
            Err(LossError::MissingComponent("L_G3"))
        ));
        let zeros = LossReport {
            g2: Some(0.0),
            g3: Some(0.0),
            d2: Some(0.0),
            d3: Some(0.0),
            ..Default::default()
        };
        assert_eq!(total_losses(&zeros).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn convergence_measure_examples() {
        assert_eq!(convergence_measure(0.0, 0.0, 1.15), 0.0);
        assert_eq!(convergence_measure(0.5, 0.575, 1.15), 0.5);
    }

    #[test]
    fn rec_losses_match_direct_summation() {
        let x = Tensor::new(vec![2, 2], vec![1.0, 0.25, 0.5, 0.0]).unwrap();
        let y = Tensor::new(vec![2, 2], vec![0.5, 0.25, 0.75, 0.5]).unwrap();
        let direct = (0.5 + 0.0 + 0.25 + 0.5) / 4.0;
        assert_eq!(rec_loss_2d(&x, &y).unwrap(), direct);
        assert_eq!(rec_loss_2d(&x, &x).unwrap(), 0.0);
        let ones = Tensor::filled(&[2, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 2]);
        assert_eq!(rec_loss_2d(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(rec_loss_3d(&zeros, &ones).unwrap(), 1.0);
        assert!(rec_loss_2d(&x, &Tensor::zeros(&[3])).is_err());
    }

    proptest! {
        #[test]
        fn balance_scalars_never_leave_unit_interval(
            scores in proptest::collection::vec((0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64), 1..200)
        ) {
            let mut eq = EquilibriumState::default();
            for (a, b, c) in scores {
                let (_, k) = d2_losses(a, b, &eq).unwrap();
                let (_, s) = d3_losses(b, a, c, &eq).unwrap();
                eq.k = k;
                eq.s = s;
                prop_assert!((0.0..=1.0).contains(&eq.k));
                prop_assert!((0.0..=1.0).contains(&eq.s));
            }
        }

        #[test]
        fn convergence_measure_dominates_real_score(
            real in 0.0..5.0f64, fake in 0.0..5.0f64
        ) {
            prop_assert!(convergence_measure(real, fake, 1.15) >= real);
        }
    }
}
