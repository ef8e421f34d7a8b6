//! Objective terms: the mirror-pair pretraining loss, the L1 reconstruction
//! losses, the adversarial objectives of the three discriminators, the latent
//! reconstruction loss, and the two generator totals.
//!
//! Conventions: every L1 term is mean-reduced (per pixel / per dimension) so
//! the default weights are scale-comparable across resolutions. Adversarial
//! functions return the log objective the discriminator *ascends*;
//! generators minimize the non-saturating `-log D(fake)` for each fake they
//! produce. Probabilities are clamped to `[1e-7, 1 - 1e-7]` before any log.
//!
//! Each formula is written once, against the tape; the plain `f64` entry
//! points evaluate a throwaway tape so the two paths cannot drift.

use ndarray::{Array1, ArrayD};

use crate::profiles::LossWeights;
use crate::tensor::{Tape, VarId};

pub const PROB_EPS: f64 = 1e-7;

// ---- tape-side building blocks ------------------------------------------

/// `mean |a - b|`
pub fn l1_t(tape: &mut Tape, a: VarId, b: VarId) -> VarId {
    let d = tape.sub(a, b);
    tape.l1_mean(d)
}

/// `mean log p` with clamping.
fn mean_log_t(tape: &mut Tape, p: VarId) -> VarId {
    let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.log(c);
    tape.mean_all(l)
}

/// `mean log (1 - p)` with clamping.
fn mean_log_one_minus_t(tape: &mut Tape, p: VarId) -> VarId {
    let neg = tape.scale(p, -1.0);
    let shape = tape.shape(neg).to_vec();
    let ones = tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&shape), 1.0));
    let omp = tape.add(ones, neg);
    let c = tape.clamp(omp, PROB_EPS, 1.0 - PROB_EPS);
    let l = tape.log(c);
    tape.mean_all(l)
}

/// Discriminator objective (ascended): `sum mean log D(real) + sum mean log(1 - D(fake))`.
pub fn adv_d_t(tape: &mut Tape, reals: &[VarId], fakes: &[VarId]) -> VarId {
    let mut terms = Vec::new();
    for &r in reals {
        terms.push((mean_log_t(tape, r), 1.0));
    }
    for &f in fakes {
        terms.push((mean_log_one_minus_t(tape, f), 1.0));
    }
    tape.weighted_sum(&terms)
}

/// Non-saturating generator objective for one fake family: `-mean log D(fake)`.
pub fn adv_g_t(tape: &mut Tape, fake: VarId) -> VarId {
    let m = mean_log_t(tape, fake);
    tape.scale(m, -1.0)
}

/// Mirror-pair pretraining objective: four mean-reduced L1 terms comparing
/// each eye with the autoencoded self and the autoencoded mirrored other eye.
/// The four generator outputs correspond to inputs
/// `(y_l, F(y_r), y_r, F(y_l))`.
pub fn pre_loss_t(
    tape: &mut Tape,
    y_l: VarId,
    y_r: VarId,
    g_of_yl: VarId,
    g_of_f_yr: VarId,
    g_of_yr: VarId,
    g_of_f_yl: VarId,
) -> VarId {
    let t1 = l1_t(tape, y_l, g_of_yl);
    let t2 = l1_t(tape, y_l, g_of_f_yr);
    let t3 = l1_t(tape, y_r, g_of_yr);
    let t4 = l1_t(tape, y_r, g_of_f_yl);
    tape.weighted_sum(&[(t1, 1.0), (t2, 1.0), (t3, 1.0), (t4, 1.0)])
}

/// Reconstruction loss: full low-res image term plus high-res eye-crop term.
pub fn rec_loss_t(
    tape: &mut Tape,
    target: VarId,
    output: VarId,
    target_eyes: VarId,
    output_eyes: VarId,
) -> VarId {
    let a = l1_t(tape, target, output);
    let b = l1_t(tape, target_eyes, output_eyes);
    tape.add(a, b)
}

/// Latent reconstruction loss over content codes (two mean-reduced L1 terms).
pub fn fp_loss_t(
    tape: &mut Tape,
    c_y: VarId,
    c_of_recon_y: VarId,
    c_yx: VarId,
    c_of_recon_yx: VarId,
) -> VarId {
    let a = l1_t(tape, c_y, c_of_recon_y);
    let b = l1_t(tape, c_yx, c_of_recon_yx);
    tape.add(a, b)
}

// ---- plain f64 entry points ----------------------------------------------

fn leaf_probs(tape: &mut Tape, p: &Array1<f64>) -> VarId {
    tape.leaf(p.clone().into_dyn())
}

/// Eq.-style pretraining loss with an arbitrary autoencoder closure. `F` of
/// the mirror pairing is the horizontal flip of the crop batch.
pub fn loss_pre<G>(y_l: &ArrayD<f64>, y_r: &ArrayD<f64>, g: G) -> f64
where
    G: Fn(&ArrayD<f64>) -> ArrayD<f64>,
{
    let flip = |a: &ArrayD<f64>| {
        a.view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("crops are 4-d")
            .slice(ndarray::s![.., .., .., ..;-1])
            .as_standard_layout()
            .to_owned()
            .into_dyn()
    };
    let mut t = Tape::new();
    let yl = t.leaf(y_l.clone());
    let yr = t.leaf(y_r.clone());
    let g1 = t.leaf(g(y_l));
    let g2 = t.leaf(g(&flip(y_r)));
    let g3 = t.leaf(g(y_r));
    let g4 = t.leaf(g(&flip(y_l)));
    let loss = pre_loss_t(&mut t, yl, yr, g1, g2, g3, g4);
    t.scalar(loss)
}

fn rec_loss(target: &ArrayD<f64>, output: &ArrayD<f64>, te: &ArrayD<f64>, oe: &ArrayD<f64>) -> f64 {
    let mut t = Tape::new();
    let a = t.leaf(target.clone());
    let b = t.leaf(output.clone());
    let c = t.leaf(te.clone());
    let d = t.leaf(oe.clone());
    let loss = rec_loss_t(&mut t, a, b, c, d);
    t.scalar(loss)
}

/// Correction reconstruction: low-res image pair plus high-res eye pair.
pub fn loss_rec_x(
    x: &ArrayD<f64>,
    x_tilde: &ArrayD<f64>,
    x_h_eye: &ArrayD<f64>,
    x_hat_eye: &ArrayD<f64>,
) -> f64 {
    rec_loss(x, x_tilde, x_h_eye, x_hat_eye)
}

/// Animation reconstruction on real samples.
pub fn loss_rec_y(
    y: &ArrayD<f64>,
    y_tilde: &ArrayD<f64>,
    y_h_eye: &ArrayD<f64>,
    y_hat_eye: &ArrayD<f64>,
) -> f64 {
    rec_loss(y, y_tilde, y_h_eye, y_hat_eye)
}

/// Animation reconstruction on synthesized corrected samples.
pub fn loss_rec_yx(
    yx: &ArrayD<f64>,
    yx_tilde: &ArrayD<f64>,
    yx_h_eye: &ArrayD<f64>,
    yx_hat_eye: &ArrayD<f64>,
) -> f64 {
    rec_loss(yx, yx_tilde, yx_h_eye, yx_hat_eye)
}

/// Correction discriminator objective over real `x`, inpainted `x~` and the
/// corrected-from-`y` fakes.
pub fn loss_adv_x_d(p_real: &Array1<f64>, p_fake_x: &Array1<f64>, p_fake_yx: &Array1<f64>) -> f64 {
    let mut t = Tape::new();
    let r = leaf_probs(&mut t, p_real);
    let f1 = leaf_probs(&mut t, p_fake_x);
    let f2 = leaf_probs(&mut t, p_fake_yx);
    let loss = adv_d_t(&mut t, &[r], &[f1, f2]);
    t.scalar(loss)
}

/// Animation discriminator objective over real `y` and inpainted `y~`.
pub fn loss_adv_y_d(p_real: &Array1<f64>, p_fake: &Array1<f64>) -> f64 {
    let mut t = Tape::new();
    let r = leaf_probs(&mut t, p_real);
    let f = leaf_probs(&mut t, p_fake);
    let loss = adv_d_t(&mut t, &[r], &[f]);
    t.scalar(loss)
}

/// Crop discriminator objective over both domains' real and refined crops.
pub fn loss_adv_h_d(
    p_real_x: &Array1<f64>,
    p_fake_x: &Array1<f64>,
    p_real_y: &Array1<f64>,
    p_fake_y: &Array1<f64>,
) -> f64 {
    let mut t = Tape::new();
    let rx = leaf_probs(&mut t, p_real_x);
    let fx = leaf_probs(&mut t, p_fake_x);
    let ry = leaf_probs(&mut t, p_real_y);
    let fy = leaf_probs(&mut t, p_fake_y);
    let loss = adv_d_t(&mut t, &[rx, ry], &[fx, fy]);
    t.scalar(loss)
}

/// Non-saturating generator term for one family of fakes.
pub fn loss_adv_g(p_fake: &Array1<f64>) -> f64 {
    let mut t = Tape::new();
    let f = leaf_probs(&mut t, p_fake);
    let loss = adv_g_t(&mut t, f);
    t.scalar(loss)
}

/// Latent reconstruction loss; exactly zero when component C is ablated.
pub fn loss_fp(
    c_y: &ArrayD<f64>,
    c_of_recon_y: &ArrayD<f64>,
    c_yx: &ArrayD<f64>,
    c_of_recon_yx: &ArrayD<f64>,
    use_latent_recon: bool,
) -> f64 {
    if !use_latent_recon {
        return 0.0;
    }
    let mut t = Tape::new();
    let a = t.leaf(c_y.clone());
    let b = t.leaf(c_of_recon_y.clone());
    let c = t.leaf(c_yx.clone());
    let d = t.leaf(c_of_recon_yx.clone());
    let loss = fp_loss_t(&mut t, a, b, c, d);
    t.scalar(loss)
}

/// Correction generator total: adversarial terms plus weighted reconstruction.
pub fn total_g_x(adv_x: f64, adv_h: f64, rec_x: f64, w: &LossWeights) -> f64 {
    adv_x + adv_h + w.l1 * rec_x
}

/// Animation generator total: its own adversarial terms, the weighted
/// correction-adversarial term on the synthesized path, both reconstructions
/// and the latent term.
pub fn total_g_y(
    adv_y: f64,
    adv_h: f64,
    adv_x_syn: f64,
    rec_y: f64,
    rec_yx: f64,
    fp: f64,
    w: &LossWeights,
) -> f64 {
    adv_y + adv_h + w.l2 * adv_x_syn + w.l3 * rec_y + w.l4 * rec_yx + w.l5 * fp
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randd(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_probs(n: usize, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array1::from_shape_fn(n, |_| rng.random_range(0.05..0.95))
    }

    fn flip4(a: &ArrayD<f64>) -> ArrayD<f64> {
        a.view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .slice(ndarray::s![.., .., .., ..;-1])
            .as_standard_layout()
            .to_owned()
            .into_dyn()
    }

    #[test]
    fn pre_loss_mirrored_pair_is_zero() {
        let y_r = randd(&[2, 3, 4, 6], 1);
        let y_l = flip4(&y_r);
        let loss = loss_pre(&y_l, &y_r, |x| x.clone());
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn pre_loss_identity_general_case() {
        let y_l = randd(&[2, 3, 4, 6], 2);
        let y_r = randd(&[2, 3, 4, 6], 3);
        let loss = loss_pre(&y_l, &y_r, |x| x.clone());
        let expect = 2.0 * (&y_l - &flip4(&y_r)).mapv(f64::abs).mean().unwrap();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn pre_loss_zero_autoencoder_constant_crops() {
        let y = ArrayD::from_elem(IxDyn(&[1, 3, 4, 6]), 0.5);
        let loss = loss_pre(&y, &y, |x| ArrayD::zeros(x.raw_dim()));
        assert!((loss - 2.0).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn rec_losses_match_oracle() {
        let x = randd(&[2, 3, 8, 8], 4);
        let xt = randd(&[2, 3, 8, 8], 5);
        let e = randd(&[4, 3, 4, 4], 6);
        let et = randd(&[4, 3, 4, 4], 7);
        let loss = loss_rec_x(&x, &xt, &e, &et);
        let mut oracle = 0.0;
        oracle += (&x - &xt).mapv(f64::abs).mean().unwrap();
        oracle += (&e - &et).mapv(f64::abs).mean().unwrap();
        assert!((loss - oracle).abs() < 1e-12);
        // perfect reconstruction -> 0
        assert_eq!(loss_rec_y(&x, &x, &e, &e), 0.0);
        // constant offset, perfect eyes -> the offset
        let shifted = &x + 0.1;
        let l = loss_rec_yx(&x, &shifted.into_dyn(), &e, &e);
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn adv_d_constant_half() {
        let half = Array1::from_elem(4, 0.5);
        let l3 = loss_adv_x_d(&half, &half, &half);
        assert!((l3 - 3.0 * 0.5f64.ln()).abs() < 1e-12, "{l3}");
        let l2 = loss_adv_y_d(&half, &half);
        assert!((l2 - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        let l4 = loss_adv_h_d(&half, &half, &half, &half);
        assert!((l4 - 4.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn adv_d_optimal_limit() {
        let eps = 1e-6;
        let real = Array1::from_elem(4, 1.0 - eps);
        let fake = Array1::from_elem(4, eps);
        let l = loss_adv_x_d(&real, &fake, &fake);
        assert!(l < 0.0 && l > -1e-4, "objective {l} should approach 0-");
        let l = loss_adv_h_d(&real, &fake, &real, &fake);
        assert!(l < 0.0 && l > -1e-4);
    }

    #[test]
    fn adv_matches_scalar_oracle() {
        let pr = rand_probs(5, 10);
        let pf1 = rand_probs(5, 11);
        let pf2 = rand_probs(5, 12);
        let got = loss_adv_x_d(&pr, &pf1, &pf2);
        let mean = |v: &Array1<f64>, f: &dyn Fn(f64) -> f64| {
            v.iter().map(|p| f(*p)).sum::<f64>() / v.len() as f64
        };
        let oracle = mean(&pr, &|p| p.ln())
            + mean(&pf1, &|p| (1.0 - p).ln())
            + mean(&pf2, &|p| (1.0 - p).ln());
        assert!((got - oracle).abs() < 1e-12);
        let g = loss_adv_g(&pf1);
        let oracle_g = -mean(&pf1, &|p| p.ln());
        assert!((g - oracle_g).abs() < 1e-12);
    }

    #[test]
    fn fp_loss_cases() {
        let a = randd(&[2, 8], 20);
        assert_eq!(loss_fp(&a, &a, &a, &a, true), 0.0);
        let b = &a + 0.2;
        let l = loss_fp(&a, &b.clone().into_dyn(), &a, &b.into_dyn(), true);
        assert!((l - 0.4).abs() < 1e-12, "loss {l}");
        let c = randd(&[2, 8], 21);
        assert_eq!(loss_fp(&a, &c, &a, &c, false), 0.0);
        let l = loss_fp(&a, &c, &a, &c, true);
        let oracle = 2.0 * (&a - &c).mapv(f64::abs).mean().unwrap();
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn totals_match_weighted_sums() {
        let w = LossWeights::default();
        assert_eq!(total_g_x(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_g_x(1.0, 1.0, 1.0, &w) - 3.0).abs() < 1e-12);
        assert_eq!(total_g_y(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_g_y(1.0, 1.0, 1.0, 1.0, 1.0, 1.0, &w) - 5.1).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let t: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = total_g_y(t[0], t[1], t[2], t[3], t[4], t[5], &w);
        let oracle = t[0] + t[1] + w.l2 * t[2] + w.l3 * t[3] + w.l4 * t[4] + w.l5 * t[5];
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn weight_linearity() {
        let mut w = LossWeights::default();
        let base = total_g_y(0.3, 0.2, 0.5, 0.7, 0.9, 0.4, &w);
        w.l3 *= 2.0;
        let scaled = total_g_y(0.3, 0.2, 0.5, 0.7, 0.9, 0.4, &w);
        assert!((scaled - base - 0.7).abs() < 1e-12);
        let mut w = LossWeights::default();
        w.l5 *= 3.0;
        let scaled = total_g_y(0.3, 0.2, 0.5, 0.7, 0.9, 0.4, &w);
        assert!((scaled - base - 2.0 * 0.1 * 0.4).abs() < 1e-12);
    }

    #[test]
    fn adversarial_terms_bounded_under_clamping() {
        // degenerate probabilities stay finite
        let zero = Array1::from_elem(3, 0.0);
        let one = Array1::from_elem(3, 1.0);
        for l in [
            loss_adv_x_d(&one, &zero, &zero),
            loss_adv_y_d(&zero, &one),
            loss_adv_g(&zero),
        ] {
            assert!(l.is_finite());
        }
    }
}
