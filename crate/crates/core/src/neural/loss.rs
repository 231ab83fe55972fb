//! Loss functions and their analytic gradients: mean squared error,
//! cross-entropy for classification and for pixel-wise segmentation, the
//! class-weighted cross-entropy variant, soft-Dice overlap, and the combined
//! task-plus-domain objective.
//!
//! Probabilities inside the cross-entropy logs are floored at [`PROB_FLOOR`]
//! to avoid -inf; the gradients are consistent with the floored function
//! (zero below the floor), so finite-difference checks see one single,
//! coherent function.

use super::NeuralError;
use crate::tensor::Tensor;

/// Floor applied to probabilities inside logarithms. Oracle tests must apply
/// the same floor.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), NeuralError> {
    if a.shape() != b.shape() {
        return Err(NeuralError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error (1/n) * sum((y_i - yhat_i)^2) over all elements.
pub fn loss_mse(y: &Tensor, y_hat: &Tensor) -> Result<f64, NeuralError> {
    check_same_shape(y, y_hat, "mse operands")?;
    let n = y.len() as f64;
    Ok(y.data()
        .iter()
        .zip(y_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Gradient of [`loss_mse`] with respect to the prediction: 2(yhat - y)/n.
pub fn mse_grad(y: &Tensor, y_hat: &Tensor) -> Result<Tensor, NeuralError> {
    check_same_shape(y, y_hat, "mse operands")?;
    let n = y.len() as f64;
    Ok(y_hat.zip_map(y, |p, t| 2.0 * (p - t) / n)?)
}

fn check_one_hot(y: &Tensor) -> Result<(), NeuralError> {
    let mut ones = 0usize;
    for &v in y.data() {
        if v == 1.0 {
            ones += 1;
        } else if v != 0.0 {
            return Err(NeuralError::Config(format!(
                "target is not one-hot: contains {v}"
            )));
        }
    }
    if ones != 1 {
        return Err(NeuralError::Config(format!(
            "target is not one-hot: {ones} entries set"
        )));
    }
    Ok(())
}

fn ln_floored(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Classification cross-entropy over one probability vector:
/// -sum_c y_c * log(p_c).
pub fn loss_ce_classification(p: &Tensor, y: &Tensor) -> Result<f64, NeuralError> {
    check_same_shape(p, y, "classification ce operands")?;
    check_one_hot(y)?;
    Ok(-p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pc, &yc)| yc * ln_floored(pc))
        .sum::<f64>())
}

/// Gradient of [`loss_ce_classification`] with respect to p. Zero where the
/// probability sits below the log floor, matching the clamped loss.
pub fn ce_classification_grad(p: &Tensor, y: &Tensor) -> Result<Tensor, NeuralError> {
    check_same_shape(p, y, "classification ce operands")?;
    check_one_hot(y)?;
    Ok(p.zip_map(y, |pc, yc| if pc > PROB_FLOOR { -yc / pc } else { 0.0 })?)
}

fn check_seg_shapes(p: &Tensor, y: &Tensor) -> Result<(usize, usize), NeuralError> {
    check_same_shape(p, y, "segmentation operands")?;
    if p.rank() != 2 {
        return Err(NeuralError::Shape(format!(
            "segmentation maps must be [classes, pixels], got {:?}",
            p.shape()
        )));
    }
    Ok((p.shape()[0], p.shape()[1]))
}

/// Pixel-wise segmentation cross-entropy:
/// -(1/n) * sum_i sum_c y_i^c * log(p_i^c) over `[C, n]` maps.
pub fn loss_ce_segmentation(p: &Tensor, y: &Tensor) -> Result<f64, NeuralError> {
    let (_, n) = check_seg_shapes(p, y)?;
    let total: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pc, &yc)| yc * ln_floored(pc))
        .sum();
    Ok(-total / n as f64)
}

pub fn ce_segmentation_grad(p: &Tensor, y: &Tensor) -> Result<Tensor, NeuralError> {
    let (_, n) = check_seg_shapes(p, y)?;
    let inv_n = 1.0 / n as f64;
    Ok(p.zip_map(y, |pc, yc| {
        if pc > PROB_FLOOR {
            -yc * inv_n / pc
        } else {
            0.0
        }
    })?)
}

/// Class-weighted segmentation cross-entropy:
/// -(1/n) * sum_i sum_c w_c * y_i^c * log(p_i^c). With unit weights this is
/// exactly [`loss_ce_segmentation`].
pub fn loss_weighted_ce(p: &Tensor, y: &Tensor, weights: &[f64]) -> Result<f64, NeuralError> {
    let (classes, n) = check_seg_shapes(p, y)?;
    if weights.len() != classes {
        return Err(NeuralError::Config(format!(
            "{} class weights supplied for {classes} classes",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(NeuralError::Config(
            "class weights must be non-negative".into(),
        ));
    }
    let mut total = 0.0;
    for (c, &w) in weights.iter().enumerate() {
        let base = c * n;
        for i in 0..n {
            total += w * y.data()[base + i] * ln_floored(p.data()[base + i]);
        }
    }
    Ok(-total / n as f64)
}

pub fn weighted_ce_grad(p: &Tensor, y: &Tensor, weights: &[f64]) -> Result<Tensor, NeuralError> {
    let (classes, n) = check_seg_shapes(p, y)?;
    if weights.len() != classes {
        return Err(NeuralError::Config(format!(
            "{} class weights supplied for {classes} classes",
            weights.len()
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mut grad = vec![0.0; p.len()];
    for (c, &w) in weights.iter().enumerate() {
        let base = c * n;
        for i in 0..n {
            let pc = p.data()[base + i];
            if pc > PROB_FLOOR {
                grad[base + i] = -w * y.data()[base + i] * inv_n / pc;
            }
        }
    }
    Ok(Tensor::new(p.shape(), grad)?)
}

/// Soft-Dice loss over `[C, n]` maps: 1 - 2*sum(y*p) / sum(y + p), with the
/// sums running over all classes and pixels. No smoothing constant is added;
/// a zero denominator (both maps empty) is a degeneracy error rather than a
/// silent 0.
pub fn loss_soft_dice(p: &Tensor, y: &Tensor) -> Result<f64, NeuralError> {
    check_seg_shapes(p, y)?;
    for (&pv, &yv) in p.data().iter().zip(y.data()) {
        if !(0.0..=1.0).contains(&pv) || !(0.0..=1.0).contains(&yv) {
            return Err(NeuralError::Config(
                "soft-dice operands must lie in [0, 1]".into(),
            ));
        }
    }
    let numerator: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| yv * pv)
        .sum::<f64>()
        * 2.0;
    let denominator: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| yv + pv)
        .sum();
    if denominator == 0.0 {
        return Err(NeuralError::Numeric {
            location: "soft-dice".into(),
            detail: "both maps are all-zero; the overlap ratio is undefined".into(),
        });
    }
    Ok(1.0 - numerator / denominator)
}

/// Gradient of [`loss_soft_dice`] with respect to p:
/// (num - 2*y_i*den) / den^2.
pub fn soft_dice_grad(p: &Tensor, y: &Tensor) -> Result<Tensor, NeuralError> {
    check_seg_shapes(p, y)?;
    let num: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| yv * pv)
        .sum::<f64>()
        * 2.0;
    let den: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| yv + pv)
        .sum();
    if den == 0.0 {
        return Err(NeuralError::Numeric {
            location: "soft-dice".into(),
            detail: "both maps are all-zero; the overlap ratio is undefined".into(),
        });
    }
    let den_sq = den * den;
    Ok(y.map(|yv| (num - 2.0 * yv * den) / den_sq))
}

/// Combined training objective for one step: task loss plus lambda times the
/// domain loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub task: f64,
    pub domain: f64,
    pub lambda: f64,
    pub combined: f64,
}

pub fn loss_combined(task: f64, domain: f64, lambda: f64) -> LossReport {
    LossReport {
        task,
        domain,
        lambda,
        combined: task + lambda * domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn central_diff(mut eval: impl FnMut(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; at.len()];
        let mut probe = at.to_vec();
        for i in 0..at.len() {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = eval(&probe);
            probe[i] = orig - h;
            let minus = eval(&probe);
            probe[i] = orig;
            grad[i] = (plus - minus) / (2.0 * h);
        }
        grad
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let err = if (x - y).abs() < 1e-8 {
                0.0
            } else {
                (x - y).abs() / x.abs().max(y.abs())
            };
            assert!(err <= tol, "{what}[{i}]: analytic {x} vs numeric {y}");
        }
    }

    /// Random soft probability map [C, n] with entries bounded away from the
    /// log floor and from 1.
    fn soft_map(classes: usize, n: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(
            &[classes, n],
            (0..classes * n)
                .map(|_| rng.range_f64(0.05, 0.95))
                .collect(),
        )
        .unwrap()
    }

    fn one_hot_map(classes: usize, n: usize, rng: &mut Rng) -> Tensor {
        let mut data = vec![0.0; classes * n];
        for i in 0..n {
            let c = rng.below(classes as u64) as usize;
            data[c * n + i] = 1.0;
        }
        Tensor::new(&[classes, n], data).unwrap()
    }

    #[test]
    fn mse_cases() {
        let y = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(loss_mse(&y, &y).unwrap(), 0.0);

        let zeros = Tensor::zeros(&[2]);
        let ones = Tensor::ones(&[2]);
        assert_eq!(loss_mse(&zeros, &ones).unwrap(), 1.0);

        let mut rng = Rng::new(1);
        let a = Tensor::new(&[9], (0..9).map(|_| rng.range_f64(-2.0, 2.0)).collect()).unwrap();
        let b = Tensor::new(&[9], (0..9).map(|_| rng.range_f64(-2.0, 2.0)).collect()).unwrap();
        let mut want = 0.0;
        for i in 0..9 {
            let d = a.data()[i] - b.data()[i];
            want += d * d;
        }
        want /= 9.0;
        assert!((loss_mse(&a, &b).unwrap() - want).abs() < 1e-12);

        assert!(loss_mse(&zeros, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn mse_grad_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let y = Tensor::new(&[6], (0..6).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
        let p = Tensor::new(&[6], (0..6).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();
        let g = mse_grad(&y, &p).unwrap();
        let n = central_diff(
            |pv| loss_mse(&y, &Tensor::new(&[6], pv.to_vec()).unwrap()).unwrap(),
            p.data(),
            1e-6,
        );
        assert_close(g.data(), &n, 1e-6, "mse grad");
    }

    #[test]
    fn classification_ce_cases() {
        let y = Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        let perfect = Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(loss_ce_classification(&perfect, &y).unwrap(), 0.0);

        let uniform = Tensor::new(&[4], vec![0.25; 4]).unwrap();
        let y4 = Tensor::new(&[4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((loss_ce_classification(&uniform, &y4).unwrap() - 4.0f64.ln()).abs() < 1e-12);

        let not_one_hot = Tensor::new(&[3], vec![0.5, 0.5, 0.0]).unwrap();
        assert!(loss_ce_classification(&perfect, &not_one_hot).is_err());

        let mut rng = Rng::new(3);
        let p = soft_map(1, 5, &mut rng).reshape(&[5]).unwrap();
        let mut yv = vec![0.0; 5];
        yv[2] = 1.0;
        let y = Tensor::new(&[5], yv).unwrap();
        let direct = -p.data()[2].max(PROB_FLOOR).ln();
        assert!((loss_ce_classification(&p, &y).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn segmentation_ce_cases() {
        let y = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(loss_ce_segmentation(&y, &y).unwrap(), 0.0);

        let uniform = Tensor::new(&[3, 4], vec![1.0 / 3.0; 12]).unwrap();
        let mut rng = Rng::new(4);
        let y = one_hot_map(3, 4, &mut rng);
        assert!((loss_ce_segmentation(&uniform, &y).unwrap() - 3.0f64.ln()).abs() < 1e-12);

        // Double-loop oracle on a random map.
        let p = soft_map(3, 7, &mut rng);
        let y = one_hot_map(3, 7, &mut rng);
        let mut want = 0.0;
        for c in 0..3 {
            for i in 0..7 {
                want -= y.get(&[c, i]) * p.get(&[c, i]).max(PROB_FLOOR).ln();
            }
        }
        want /= 7.0;
        assert!((loss_ce_segmentation(&p, &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn weighted_ce_reduces_to_plain_ce_with_unit_weights() {
        let mut rng = Rng::new(5);
        let p = soft_map(3, 11, &mut rng);
        let y = one_hot_map(3, 11, &mut rng);
        let weighted = loss_weighted_ce(&p, &y, &[1.0, 1.0, 1.0]).unwrap();
        let plain = loss_ce_segmentation(&p, &y).unwrap();
        assert_eq!(weighted, plain);

        assert_eq!(loss_weighted_ce(&p, &y, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(loss_weighted_ce(&p, &y, &[1.0, 1.0]).is_err());

        // Direct-summation oracle with random weights.
        let w = [0.3, 2.0, 0.7];
        let mut want = 0.0;
        for (c, &wc) in w.iter().enumerate() {
            for i in 0..11 {
                want -= wc * y.get(&[c, i]) * p.get(&[c, i]).max(PROB_FLOOR).ln();
            }
        }
        want /= 11.0;
        assert!((loss_weighted_ce(&p, &y, &w).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn soft_dice_cases() {
        let mut rng = Rng::new(6);
        // Perfect one-hot prediction: ratio is 1, loss 0.
        let y = one_hot_map(2, 6, &mut rng);
        assert!((loss_soft_dice(&y, &y).unwrap()).abs() < 1e-15);

        // Disjoint supports: numerator 0, loss 1.
        let a = Tensor::new(&[2, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(loss_soft_dice(&a, &b).unwrap(), 1.0);

        // All-zero denominator is an error, not 0/0 -> 0.
        let z = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            loss_soft_dice(&z, &z),
            Err(NeuralError::Numeric { .. })
        ));

        // Direct-summation oracle on random soft maps.
        let p = soft_map(2, 9, &mut rng);
        let y = soft_map(2, 9, &mut rng);
        let mut num = 0.0;
        let mut den = 0.0;
        for c in 0..2 {
            for i in 0..9 {
                num += 2.0 * y.get(&[c, i]) * p.get(&[c, i]);
                den += y.get(&[c, i]) + p.get(&[c, i]);
            }
        }
        assert!((loss_soft_dice(&p, &y).unwrap() - (1.0 - num / den)).abs() < 1e-12);
        let loss = loss_soft_dice(&p, &y).unwrap();
        assert!((0.0..=1.0).contains(&loss));
    }

    #[test]
    fn loss_grads_match_finite_differences() {
        let mut rng = Rng::new(7);
        let p = soft_map(3, 5, &mut rng);
        let y = one_hot_map(3, 5, &mut rng);
        let h = 1e-6;

        let g = ce_segmentation_grad(&p, &y).unwrap();
        let num = central_diff(
            |pv| loss_ce_segmentation(&Tensor::new(&[3, 5], pv.to_vec()).unwrap(), &y).unwrap(),
            p.data(),
            h,
        );
        assert_close(g.data(), &num, 1e-5, "seg ce grad");

        let w = [0.5, 1.5, 2.0];
        let g = weighted_ce_grad(&p, &y, &w).unwrap();
        let num = central_diff(
            |pv| loss_weighted_ce(&Tensor::new(&[3, 5], pv.to_vec()).unwrap(), &y, &w).unwrap(),
            p.data(),
            h,
        );
        assert_close(g.data(), &num, 1e-5, "weighted ce grad");

        let ys = soft_map(3, 5, &mut rng);
        let g = soft_dice_grad(&p, &ys).unwrap();
        let num = central_diff(
            |pv| loss_soft_dice(&Tensor::new(&[3, 5], pv.to_vec()).unwrap(), &ys).unwrap(),
            p.data(),
            h,
        );
        assert_close(g.data(), &num, 1e-5, "soft dice grad");
    }

    #[test]
    fn combined_loss_cases() {
        assert_eq!(loss_combined(1.0, 2.0, 0.0).combined, 1.0);
        assert_eq!(loss_combined(1.0, 2.0, 1.0).combined, 3.0);
        assert_eq!(loss_combined(2.0, 4.0, 0.5).combined, 4.0);
        let r = loss_combined(0.25, 0.5, 2.0);
        assert_eq!(r.combined, r.task + r.lambda * r.domain);
    }
}
