//! Composite training loss: weighted cross-entropy + squared-denominator
//! Dice over softmax probabilities.

use std::sync::Arc;

use ndarray::{Array3, ArrayD, Ix4, IxDyn};

use crate::autodiff::{Graph, VarId};
use crate::config::{LossWeights, NUM_CLASSES};
use crate::error::ShapeError;

/// Probability clamp for the log in cross-entropy.
pub const CE_EPS: f64 = 1e-12;
/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

fn check_pair(g: &Graph, probs: VarId, labels: &Array3<u8>) -> Result<[usize; 4], ShapeError> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 4 || shape[1] != NUM_CLASSES {
        return Err(ShapeError(format!(
            "probabilities must be (B,{NUM_CLASSES},H,W), got {shape:?}"
        )));
    }
    let (b, h, w) = labels.dim();
    if [shape[0], shape[2], shape[3]] != [b, h, w] {
        return Err(ShapeError(format!(
            "labels {:?} do not match probabilities {shape:?}",
            labels.dim()
        )));
    }
    if let Some(bad) = labels.iter().find(|v| **v as usize >= NUM_CLASSES) {
        return Err(ShapeError(format!("label value {bad} out of range")));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// Class probabilities from logits: softmax over the class axis.
pub fn softmax_probs(g: &mut Graph, logits: VarId) -> VarId {
    g.softmax(logits, 1)
}

/// Mean over pixels of -log p at the true class, with probabilities clamped
/// at [`CE_EPS`].
pub fn cross_entropy_loss(
    g: &mut Graph,
    probs: VarId,
    labels: &Array3<u8>,
) -> Result<VarId, ShapeError> {
    let [b, _, h, w] = check_pair(g, probs, labels)?;
    let n = (b * h * w) as f64;
    let labels = Arc::new(labels.clone());

    let pv = g.value(probs).view().into_dimensionality::<Ix4>().unwrap();
    let mut total = 0.0;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let c = labels[[bi, y, x]] as usize;
                total -= pv[[bi, c, y, x]].max(CE_EPS).ln();
            }
        }
    }
    let value = ArrayD::from_elem(IxDyn(&[]), total / n);

    let labels_b = Arc::clone(&labels);
    Ok(g.push_op(
        value,
        vec![probs],
        Box::new(move |gout, ctx| {
            let gv = *gout.iter().next().expect("scalar");
            let pv = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap();
            let mut gp = ndarray::Array4::<f64>::zeros(pv.raw_dim());
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let c = labels_b[[bi, y, x]] as usize;
                        let p = pv[[bi, c, y, x]];
                        if p > CE_EPS {
                            gp[[bi, c, y, x]] = -gv / (n * p);
                        }
                    }
                }
            }
            vec![Some(gp.into_dyn())]
        }),
    ))
}

/// Per-class smoothed Dice sums (numerator, denominator) over the batch.
pub fn dice_sums(
    probs: &ndarray::ArrayView4<f64>,
    labels: &Array3<u8>,
) -> [(f64, f64); NUM_CLASSES] {
    let (b, _, h, w) = probs.dim();
    let mut inter = [0.0f64; NUM_CLASSES];
    let mut p_sq = [0.0f64; NUM_CLASSES];
    let mut y_sum = [0.0f64; NUM_CLASSES];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let truth = labels[[bi, y, x]] as usize;
                y_sum[truth] += 1.0;
                for c in 0..NUM_CLASSES {
                    let p = probs[[bi, c, y, x]];
                    p_sq[c] += p * p;
                    if c == truth {
                        inter[c] += p;
                    }
                }
            }
        }
    }
    std::array::from_fn(|c| (2.0 * inter[c] + DICE_EPS, p_sq[c] + y_sum[c] + DICE_EPS))
}

/// Dice loss: mean over the nine classes of 1 - (2*sum(p*y) + eps) /
/// (sum(p^2) + sum(y^2) + eps).
pub fn dice_loss(g: &mut Graph, probs: VarId, labels: &Array3<u8>) -> Result<VarId, ShapeError> {
    check_pair(g, probs, labels)?;
    let labels = Arc::new(labels.clone());

    let pv = g.value(probs).view().into_dimensionality::<Ix4>().unwrap();
    let sums = dice_sums(&pv, &labels);
    let loss = sums
        .iter()
        .map(|(num, den)| 1.0 - num / den)
        .sum::<f64>()
        / NUM_CLASSES as f64;
    let value = ArrayD::from_elem(IxDyn(&[]), loss);

    Ok(g.push_op(
        value,
        vec![probs],
        Box::new(move |gout, ctx| {
            let gv = *gout.iter().next().expect("scalar");
            let pv = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix4>()
                .unwrap();
            let sums = dice_sums(&pv, &labels);
            let (b, _, h, w) = pv.dim();
            let mut gp = ndarray::Array4::<f64>::zeros(pv.raw_dim());
            // d/dp of -num/den per class: -(2*y*den - num*2*p) / den^2,
            // averaged over classes.
            let scale = gv / NUM_CLASSES as f64;
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let truth = labels[[bi, y, x]] as usize;
                        for c in 0..NUM_CLASSES {
                            let (num, den) = sums[c];
                            let p = pv[[bi, c, y, x]];
                            let yv = if c == truth { 1.0 } else { 0.0 };
                            gp[[bi, c, y, x]] =
                                -scale * (2.0 * yv * den - num * 2.0 * p) / (den * den);
                        }
                    }
                }
            }
            vec![Some(gp.into_dyn())]
        }),
    ))
}

/// Exactly w_c * cross_entropy + w_d * dice. Returns (composite, ce, dice).
pub fn composite_loss(
    g: &mut Graph,
    probs: VarId,
    labels: &Array3<u8>,
    w: LossWeights,
) -> Result<(VarId, VarId, VarId), ShapeError> {
    let ce = cross_entropy_loss(g, probs, labels)?;
    let dl = dice_loss(g, probs, labels)?;
    let ce_w = g.scale(ce, w.w_c);
    let dl_w = g.scale(dl, w.w_d);
    Ok((g.add(ce_w, dl_w), ce, dl))
}

/// Argmax over the class axis of one slice's logits or probabilities.
pub fn argmax_classes(logits: &ndarray::ArrayView3<f64>) -> ndarray::Array2<u8> {
    let (c, h, w) = logits.dim();
    debug_assert_eq!(c, NUM_CLASSES);
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[[0, y, x]];
        for ci in 1..c {
            let v = logits[[ci, y, x]];
            if v > best_v {
                best_v = v;
                best = ci;
            }
        }
        best as u8
    })
}

pub fn labels_to_array3(labels: &crate::types::LabelMask) -> Array3<u8> {
    labels.0.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Array3};

    fn one_hot_probs(labels: &Array3<u8>) -> Array4<f64> {
        let (b, h, w) = labels.dim();
        let mut p = Array4::<f64>::zeros((b, NUM_CLASSES, h, w));
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    p[[bi, labels[[bi, y, x]] as usize, y, x]] = 1.0;
                }
            }
        }
        p
    }

    fn labels_3x3() -> Array3<u8> {
        Array3::from_shape_fn((1, 3, 3), |(_, y, x)| ((y * 3 + x) % NUM_CLASSES) as u8)
    }

    #[test]
    fn cross_entropy_zero_for_correct_one_hot() {
        let labels = labels_3x3();
        let probs = one_hot_probs(&labels);
        let mut g = Graph::new();
        let p = g.leaf(probs.into_dyn(), false);
        let ce = cross_entropy_loss(&mut g, p, &labels).unwrap();
        assert!(g.scalar_value(ce).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_nine() {
        let labels = labels_3x3();
        let probs = Array4::<f64>::from_elem((1, NUM_CLASSES, 3, 3), 1.0 / 9.0);
        let mut g = Graph::new();
        let p = g.leaf(probs.into_dyn(), false);
        let ce = cross_entropy_loss(&mut g, p, &labels).unwrap();
        assert!((g.scalar_value(ce) - 9.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_near_zero_for_exact_one_hot() {
        let labels = labels_3x3();
        let probs = one_hot_probs(&labels);
        let mut g = Graph::new();
        let p = g.leaf(probs.into_dyn(), false);
        let dl = dice_loss(&mut g, p, &labels).unwrap();
        assert!(g.scalar_value(dl).abs() <= 1e-4);
    }

    #[test]
    fn dice_per_class_is_one_for_disjoint_masks() {
        // Prediction puts all mass on class 1, truth is all class 2.
        let labels = Array3::<u8>::from_elem((1, 4, 4), 2);
        let mut probs = Array4::<f64>::zeros((1, NUM_CLASSES, 4, 4));
        probs.slice_mut(ndarray::s![0, 1, .., ..]).fill(1.0);
        let sums = dice_sums(&probs.view(), &labels);
        let term_pred = 1.0 - sums[1].0 / sums[1].1;
        let term_truth = 1.0 - sums[2].0 / sums[2].1;
        assert!((term_pred - 1.0).abs() < 1e-4, "{term_pred}");
        assert!((term_truth - 1.0).abs() < 1e-4, "{term_truth}");
    }

    #[test]
    fn composite_with_unit_ce_weight_is_bitwise_ce() {
        let labels = labels_3x3();
        let mut probs = one_hot_probs(&labels);
        probs.mapv_inplace(|v| 0.8 * v + 0.02); // soften
        let mut g = Graph::new();
        let p = g.leaf(probs.into_dyn(), false);
        let (total, ce, _) =
            composite_loss(&mut g, p, &labels, LossWeights::new(1.0, 0.0)).unwrap();
        assert_eq!(
            g.scalar_value(total).to_bits(),
            g.scalar_value(ce).to_bits()
        );
    }

    #[test]
    fn composite_is_affine_in_weights() {
        let labels = labels_3x3();
        let mut probs = one_hot_probs(&labels);
        probs.mapv_inplace(|v| 0.7 * v + 0.03);
        let mut g = Graph::new();
        let p = g.leaf(probs.into_dyn(), false);
        let mut values = Vec::new();
        let mut parts = None;
        for wc in [0.5, 0.6, 0.7, 0.8] {
            let (total, ce, dl) =
                composite_loss(&mut g, p, &labels, LossWeights::new(wc, 1.0 - wc)).unwrap();
            values.push((wc, g.scalar_value(total)));
            parts = Some((g.scalar_value(ce), g.scalar_value(dl)));
        }
        let (ce, dl) = parts.unwrap();
        for (wc, total) in values {
            assert!((total - (wc * ce + (1.0 - wc) * dl)).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_difference() {
        use rand::{Rng, SeedableRng};
        let labels = labels_3x3();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(77);
        let base = Array4::<f64>::from_shape_fn((1, NUM_CLASSES, 3, 3), |_| {
            rng.gen_range(0.05..0.95)
        });

        for loss_kind in 0..2usize {
            let eval = |arr: &Array4<f64>| -> f64 {
                let mut g = Graph::new();
                let p = g.leaf(arr.clone().into_dyn(), false);
                let l = if loss_kind == 0 {
                    cross_entropy_loss(&mut g, p, &labels).unwrap()
                } else {
                    dice_loss(&mut g, p, &labels).unwrap()
                };
                g.scalar_value(l)
            };
            let mut g = Graph::new();
            let p = g.leaf(base.clone().into_dyn(), true);
            let l = if loss_kind == 0 {
                cross_entropy_loss(&mut g, p, &labels).unwrap()
            } else {
                dice_loss(&mut g, p, &labels).unwrap()
            };
            g.backward(l);
            let analytic = g.grad(p).unwrap().clone();

            let step = 1e-6;
            let mut num = Array4::<f64>::zeros(base.raw_dim());
            let mut pert = base.clone();
            for idx in ndarray::indices(base.raw_dim()) {
                let orig = pert[idx];
                pert[idx] = orig + step;
                let up = eval(&pert);
                pert[idx] = orig - step;
                let down = eval(&pert);
                pert[idx] = orig;
                num[idx] = (up - down) / (2.0 * step);
            }
            let diff = (&analytic - &num.clone().into_dyn())
                .mapv(|v| v * v)
                .sum()
                .sqrt();
            let scale = analytic.mapv(|v| v * v).sum().sqrt()
                + num.mapv(|v| v * v).sum().sqrt()
                + 1e-12;
            assert!(diff / scale < 1e-5, "loss {loss_kind}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let labels = Array3::<u8>::zeros((1, 4, 4));
        let mut g = Graph::new();
        let p = g.leaf(Array4::<f64>::zeros((1, NUM_CLASSES, 3, 3)).into_dyn(), false);
        assert!(cross_entropy_loss(&mut g, p, &labels).is_err());
        let p2 = g.leaf(Array4::<f64>::zeros((1, 4, 4, 4)).into_dyn(), false);
        assert!(dice_loss(&mut g, p2, &labels).is_err());
    }

    #[test]
    fn argmax_picks_max_class() {
        let mut logits = ndarray::Array3::<f64>::zeros((NUM_CLASSES, 2, 2));
        logits[[3, 0, 0]] = 5.0;
        logits[[8, 1, 1]] = 2.0;
        let m = argmax_classes(&logits.view());
        assert_eq!(m[[0, 0]], 3);
        assert_eq!(m[[1, 1]], 8);
        assert_eq!(m[[0, 1]], 0);
    }
}
