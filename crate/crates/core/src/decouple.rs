//! Orthogonal decoupling of motion and emotion features.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;

/// Added to norms before dividing.
pub const NORM_EPS: f64 = 1e-8;

/// Which branch receives the orthogonality gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthGradient {
    #[default]
    Both,
    MotionOnly,
    EmotionOnly,
}

/// Normalized features, their cosine and mutual orthogonal components.
#[derive(Clone, Copy)]
pub struct Decoupled<'g> {
    pub motion_unit: Var<'g>,
    pub emotion_unit: Var<'g>,
    /// `[B]`
    pub alpha: Var<'g>,
    pub motion_perp: Var<'g>,
    pub emotion_perp: Var<'g>,
}

/// Rows of `f` divided by their L2 norm plus [`NORM_EPS`].
pub fn normalize<'g>(f: Var<'g>) -> Var<'g> {
    let norm = f.square().sum_last().sqrt().add_scalar(NORM_EPS);
    f.mul_rows(norm.recip())
}

/// Both inputs are `[B, D]`.
pub fn orthogonalize<'g>(motion: Var<'g>, emotion: Var<'g>) -> Decoupled<'g> {
    assert_eq!(motion.shape(), emotion.shape(), "feature shapes differ");
    let m = normalize(motion);
    let e = normalize(emotion);
    let alpha = m.mul(e).sum_last();
    Decoupled {
        motion_unit: m,
        emotion_unit: e,
        alpha,
        motion_perp: m.sub(e.mul_rows(alpha)),
        emotion_perp: e.sub(m.mul_rows(alpha)),
    }
}

/// Batch mean of `D · <motion_perp, emotion_perp>²`.
pub fn orth_loss<'g>(pair: &Decoupled<'g>) -> Var<'g> {
    let d = *pair.motion_perp.shape().last().unwrap() as f64;
    pair.motion_perp
        .mul(pair.emotion_perp)
        .sum_last()
        .square()
        .mean_all()
        .scale(d)
}

/// Orthogonality loss with the gradient routed per `mode`.
pub fn orth_loss_routed<'g>(motion: Var<'g>, emotion: Var<'g>, mode: OrthGradient) -> Var<'g> {
    let pair = match mode {
        OrthGradient::Both => orthogonalize(motion, emotion),
        OrthGradient::MotionOnly => orthogonalize(motion, emotion.detach()),
        OrthGradient::EmotionOnly => orthogonalize(motion.detach(), emotion),
    };
    orth_loss(&pair)
}

/// Per-sample loss as a function of the cosine alone: `D · (α³ − α)²`.
pub fn orth_loss_closed_form(alpha: f64, d: usize) -> f64 {
    let v = alpha * alpha * alpha - alpha;
    d as f64 * v * v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn pair_of(m: &[f64], e: &[f64]) -> (Tensor, Tensor) {
        (
            Tensor::from_vec(&[1, m.len()], m.to_vec()).unwrap(),
            Tensor::from_vec(&[1, e.len()], e.to_vec()).unwrap(),
        )
    }

    #[test]
    fn worked_examples() {
        let g = Graph::new();
        let (m, e) = pair_of(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]);
        let d = orthogonalize(g.constant(m), g.constant(e));
        assert_eq!(d.alpha.value().item(), 0.0);
        assert_eq!(orth_loss(&d).value().item(), 0.0);

        let (m, e) = pair_of(&[0.5, -2.0, 1.0], &[0.5, -2.0, 1.0]);
        let d = orthogonalize(g.constant(m), g.constant(e));
        assert!((d.alpha.value().item() - 1.0).abs() < 1e-8);
        assert!(d.motion_perp.value().data().iter().all(|v| v.abs() < 1e-8));

        let r = 1.0 / 2f64.sqrt();
        let (m, e) = pair_of(&[r, r, 0.0], &[1.0, 0.0, 0.0]);
        let d = orthogonalize(g.constant(m), g.constant(e));
        assert!((d.alpha.value().item() - r).abs() < 1e-7);
        let mp = d.motion_perp.value();
        assert!(
            mp.data()[0].abs() < 1e-7 && (mp.data()[1] - r).abs() < 1e-7 && mp.data()[2] == 0.0
        );
    }

    #[test]
    fn zero_vector_maps_to_zero() {
        let g = Graph::new();
        let m = g.variable(Tensor::zeros(&[1, 4]));
        let e = g.variable(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 0.0, 0.0]).unwrap());
        let d = orthogonalize(m, e);
        assert!(d.motion_unit.value().data().iter().all(|&v| v == 0.0));
        let grads = g.backward(orth_loss(&d));
        assert!(grads.get_or_zeros(m).all_finite());
    }

    #[test]
    fn one_sided_variant_blocks_gradient() {
        let g = Graph::new();
        let (mt, et) = pair_of(&[1.0, 0.3, -0.2], &[0.4, 1.0, 0.1]);
        let m = g.variable(mt);
        let e = g.variable(et);
        let grads = g.backward(orth_loss_routed(m, e, OrthGradient::MotionOnly));
        assert!(grads.get_or_zeros(m).data().iter().any(|&v| v != 0.0));
        assert!(grads.get_or_zeros(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let other = Tensor::from_vec(&[2, 3], vec![0.2, -0.7, 0.4, 1.0, 0.5, -0.3]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![0.9, 0.1, -0.5, 0.3, 0.8, 0.2]).unwrap();
        let err = max_rel_error(
            &x,
            |v| {
                let e = v.graph().constant(other.clone());
                orth_loss(&orthogonalize(v, e))
            },
            1e-6,
        );
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn matches_closed_form(d in 2usize..20, seed in any::<u64>(), cos in -1.0f64..1.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Orthonormal pair u, w; e = u, m = cos·u + sin·w.
            let mut u: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= nu);
            let mut w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let proj: f64 = w.iter().zip(&u).map(|(a, b)| a * b).sum();
            w.iter_mut().zip(&u).for_each(|(a, b)| *a -= proj * b);
            let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            w.iter_mut().for_each(|x| *x /= nw);
            let sin = (1.0 - cos * cos).sqrt();
            let m: Vec<f64> = u.iter().zip(&w).map(|(a, b)| cos * a + sin * b).collect();
            let g = Graph::new();
            let (mt, et) = pair_of(&m, &u);
            let dec = orthogonalize(g.constant(mt), g.constant(et));
            let got = orth_loss(&dec).value().item();
            let alpha = dec.alpha.value().item();
            // Unit inputs normalize to length n = 1/(1+eps), so the inner
            // product of the orthogonal parts is alpha³ + alpha·(1 - 2n²).
            let n2 = (1.0 / (1.0 + NORM_EPS)).powi(2);
            let inner = alpha * alpha * alpha + alpha * (1.0 - 2.0 * n2);
            let want = d as f64 * inner * inner;
            prop_assert!((got - want).abs() <= 1e-12 + 1e-9 * want.abs());
            let plain = orth_loss_closed_form(alpha, d);
            if 1.0 - alpha * alpha > 0.05 {
                prop_assert!((got - plain).abs() <= 1e-12 + 1e-5 * plain.abs());
            }
            prop_assert!(got >= 0.0);
        }

        #[test]
        fn rotation_leaves_alpha_and_loss_unchanged(d in 2usize..12, seed in any::<u64>(), angle in 0.0f64..6.3) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Givens rotation in a random coordinate plane.
            let i = rng.random_range(0..d);
            let j = (i + 1 + rng.random_range(0..d - 1)) % d;
            let rotate = |v: &[f64]| {
                let mut out = v.to_vec();
                out[i] = angle.cos() * v[i] - angle.sin() * v[j];
                out[j] = angle.sin() * v[i] + angle.cos() * v[j];
                out
            };
            let eval = |m: &[f64], e: &[f64]| {
                let g = Graph::new();
                let (mt, et) = pair_of(m, e);
                let dec = orthogonalize(g.constant(mt), g.constant(et));
                (dec.alpha.value().item(), orth_loss(&dec).value().item())
            };
            let (a0, l0) = eval(&m, &e);
            let (a1, l1) = eval(&rotate(&m), &rotate(&e));
            prop_assert!((a0 - a1).abs() < 1e-6);
            prop_assert!((l0 - l1).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_form_peak() {
        let target = 1.0 / 3f64.sqrt();
        for d in [2, 8, 128] {
            let peak = orth_loss_closed_form(target, d);
            assert!((peak - 4.0 * d as f64 / 27.0).abs() < 1e-12);
            for a in [0.0, 0.3, 0.5, 0.6, 0.8, 1.0] {
                assert!(orth_loss_closed_form(a, d) <= peak);
            }
        }
    }
}
