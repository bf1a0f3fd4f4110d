use super::anchors::ClassTarget;
use crate::error::{Error, Result};
use crate::nn::kernels::{log_sigmoid, sigmoid};
use crate::nn::{Graph, Var};

/// Number of positive anchors.
pub fn positive_count(targets: &[ClassTarget]) -> usize {
    targets.iter().filter(|t| matches!(t, ClassTarget::Positive(_))).count()
}

/// Sigmoid focal loss summed over non-ignored anchors and all classes,
/// divided by `normalizer`. `logits` is `N x classes`.
pub fn focal_loss_normalized(
    g: &mut Graph,
    logits: Var,
    targets: &[ClassTarget],
    gamma: f64,
    alpha: f64,
    normalizer: f64,
) -> Result<Var> {
    let &[n, classes] = g.shape(logits) else {
        return Err(Error::Shape(format!("focal loss expects N x classes logits, got {:?}", g.shape(logits))));
    };
    if targets.len() != n {
        return Err(Error::Shape(format!("{} targets for {n} anchors", targets.len())));
    }
    let x = g.value(logits).data();
    let mut total = 0.0;
    let mut grad = vec![0.0; n * classes];
    for (a, t) in targets.iter().enumerate() {
        let label = match *t {
            ClassTarget::Ignore => continue,
            ClassTarget::Negative => None,
            ClassTarget::Positive(c) => {
                if usize::from(c) >= classes {
                    return Err(Error::Value(format!("target class {c} outside {classes} classes")));
                }
                Some(usize::from(c))
            }
        };
        for k in 0..classes {
            let z = x[a * classes + k];
            let (s, alpha_t) = if label == Some(k) { (1.0, alpha) } else { (-1.0, 1.0 - alpha) };
            // p_t = sigmoid(s z), 1 - p_t = sigmoid(-s z)
            let log_pt = log_sigmoid(s * z);
            let pt = sigmoid(s * z);
            let q = sigmoid(-s * z);
            let qg = q.powf(gamma);
            total += -alpha_t * qg * log_pt;
            grad[a * classes + k] = alpha_t * s * (gamma * qg * pt * log_pt - qg * q) / normalizer;
        }
    }
    Ok(g.scalar_fn(total / normalizer, vec![(logits, grad)]))
}

/// [`focal_loss_normalized`] divided by the positive count (at least 1).
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[ClassTarget], gamma: f64, alpha: f64) -> Result<Var> {
    let norm = positive_count(targets).max(1) as f64;
    focal_loss_normalized(g, logits, targets, gamma, alpha, norm)
}

/// Weighted smooth-L1 (`0.5 x^2` inside `|x| < 1`, `|x| - 0.5` outside)
/// over `N x 4` predictions, divided by `normalizer`.
pub fn smooth_l1_normalized(
    g: &mut Graph,
    pred: Var,
    targets: &[[f64; 4]],
    weights: &[f64],
    normalizer: f64,
) -> Result<Var> {
    let &[n, 4] = g.shape(pred) else {
        return Err(Error::Shape(format!("smooth L1 expects N x 4 predictions, got {:?}", g.shape(pred))));
    };
    if targets.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "{} targets and {} weights for {n} predictions",
            targets.len(),
            weights.len()
        )));
    }
    let p = g.value(pred).data();
    let mut total = 0.0;
    let mut grad = vec![0.0; n * 4];
    for i in 0..n {
        if weights[i] == 0.0 {
            continue;
        }
        for j in 0..4 {
            let d = p[i * 4 + j] - targets[i][j];
            let (v, dv) = if d.abs() < 1.0 { (0.5 * d * d, d) } else { (d.abs() - 0.5, d.signum()) };
            total += weights[i] * v;
            grad[i * 4 + j] = weights[i] * dv / normalizer;
        }
    }
    Ok(g.scalar_fn(total / normalizer, vec![(pred, grad)]))
}

/// [`smooth_l1_normalized`] divided by the number of positive weights (at least 1).
pub fn smooth_l1(g: &mut Graph, pred: Var, targets: &[[f64; 4]], weights: &[f64]) -> Result<Var> {
    let norm = weights.iter().filter(|&&w| w > 0.0).count().max(1) as f64;
    smooth_l1_normalized(g, pred, targets, weights, norm)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{gradcheck, Tensor};

    fn focal_value(logits: &[f64], classes: usize, targets: &[ClassTarget], gamma: f64, alpha: f64) -> f64 {
        let mut g = Graph::new();
        let n = logits.len() / classes;
        let x = g.input(Tensor::new(&[n, classes], logits.to_vec()).unwrap());
        let l = focal_loss(&mut g, x, targets, gamma, alpha).unwrap();
        g.value(l).data()[0]
    }

    #[test]
    fn closed_form_single_anchor() {
        let v = focal_value(&[0.0], 1, &[ClassTarget::Positive(0)], 2.0, 0.25);
        let expected = -0.25 * 0.25 * 0.5f64.ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.043322).abs() < 5e-7);
    }

    #[test]
    fn confident_correct_is_negligible() {
        // p_t = 1 - 1e-12
        let z = ((1.0 - 1e-12) / 1e-12f64).ln();
        assert!(focal_value(&[z], 1, &[ClassTarget::Positive(0)], 2.0, 0.25) < 1e-9);
        assert!(focal_value(&[-z], 1, &[ClassTarget::Negative], 2.0, 0.25) < 1e-9);
    }

    #[test]
    fn gamma_zero_is_balanced_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits: Vec<f64> = (0..30).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let targets: Vec<ClassTarget> = (0..10)
            .map(|i| match i % 3 {
                0 => ClassTarget::Positive((i % 2) as u16),
                1 => ClassTarget::Negative,
                _ => ClassTarget::Ignore,
            })
            .collect();
        let v = focal_value(&logits, 3, &targets, 0.0, 0.5);
        let mut ce = 0.0;
        for (a, t) in targets.iter().enumerate() {
            for k in 0..3 {
                let p = 1.0 / (1.0 + (-logits[a * 3 + k]).exp());
                match t {
                    ClassTarget::Ignore => {}
                    ClassTarget::Positive(c) if usize::from(*c) == k => ce -= 0.5 * p.ln(),
                    _ => ce -= 0.5 * (1.0 - p).ln(),
                }
            }
        }
        ce /= positive_count(&targets) as f64;
        assert!((v - ce).abs() < 1e-10);
    }

    #[test]
    fn ignored_anchors_contribute_nothing() {
        assert_eq!(focal_value(&[3.0, -2.0], 2, &[ClassTarget::Ignore], 2.0, 0.25), 0.0);
    }

    #[test]
    fn focal_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let targets = [
            ClassTarget::Positive(1),
            ClassTarget::Negative,
            ClassTarget::Ignore,
            ClassTarget::Positive(0),
            ClassTarget::Negative,
        ];
        for gamma in [0.0, 2.0] {
            let x = Tensor::uniform(&[5, 2], 3.0, &mut rng);
            let report = gradcheck(|g, v| focal_loss(g, v[0], &targets, gamma, 0.25), &[x], 1e-5).unwrap();
            assert!(report.max_rel_err < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn smooth_l1_values() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(&[2, 4], vec![0.0, 2.0, -2.0, 0.5, 9.0, 9.0, 9.0, 9.0]).unwrap());
        let l = smooth_l1(&mut g, p, &[[0.0; 4], [0.0; 4]], &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0 + 1.5 + 1.5 + 0.125);
        let l = smooth_l1(&mut g, p, &[[0.0, 2.0, -2.0, 0.5], [0.0; 4]], &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
    }

    #[test]
    fn smooth_l1_gradcheck_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let targets: Vec<[f64; 4]> = (0..6).map(|_| [0.0; 4]).collect();
        let weights = [1.0, 0.0, 1.0, 1.0, 0.5, 1.0];
        let mut x = Tensor::uniform(&[6, 4], 3.0, &mut rng);
        for v in x.data_mut() {
            if (v.abs() - 1.0).abs() < 0.05 {
                *v += 0.2;
            }
        }
        let report = gradcheck(|g, v| smooth_l1(g, v[0], &targets, &weights), &[x], 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }
}
