//! Loss terms and the teacher's moving-average update.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{NtlError, Result};
use crate::netcore::{ParamSet, Real};

/// `teacher ← α·teacher + (1-α)·student` for every parameter and running
/// statistic.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NtlError::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    teacher.check_compatible(student)?;
    let (a, b) = (T::lit(alpha), T::lit(1.0 - alpha));
    for (dst, src) in [(&mut teacher.params, &student.params), (&mut teacher.buffers, &student.buffers)] {
        for (t, s) in dst.values_mut().zip(src.values()) {
            for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
                *tv = a * *tv + b * sv;
            }
        }
    }
    teacher.step = student.step;
    Ok(())
}

/// Mean over samples of the squared Euclidean distance between the
/// student's and teacher's class-probability vectors (rows of `classes`).
pub fn consistency_loss(student: &[f64], teacher: &[f64], classes: usize) -> f64 {
    let n = student.len() / classes;
    if n == 0 {
        return 0.0;
    }
    student.iter().zip(teacher).map(|(s, t)| (s - t) * (s - t)).sum::<f64>() / n as f64
}

/// Gradient of [`consistency_loss`] with respect to the student probabilities.
pub fn consistency_grad(student: &[f64], teacher: &[f64], classes: usize) -> Vec<f64> {
    let n = (student.len() / classes).max(1) as f64;
    student.iter().zip(teacher).map(|(s, t)| 2.0 * (s - t) / n).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Squared distance for same-class pairs; squared hinge on the distance
/// below `margin` for different-class pairs.
pub fn pair_loss(hi: &[f64], hj: &[f64], same_class: bool, margin: f64) -> f64 {
    let d = distance(hi, hj);
    if same_class {
        d * d
    } else {
        (margin - d).max(0.0).powi(2)
    }
}

/// Gradient of [`pair_loss`] with respect to `hi`; the gradient for `hj` is
/// its negation.
pub fn pair_loss_grad(hi: &[f64], hj: &[f64], same_class: bool, margin: f64) -> Vec<f64> {
    let diff: Vec<f64> = hi.iter().zip(hj).map(|(a, b)| a - b).collect();
    if same_class {
        return diff.iter().map(|v| 2.0 * v).collect();
    }
    let d = distance(hi, hj);
    if d >= margin || d == 0.0 {
        return vec![0.0; diff.len()];
    }
    let k = -2.0 * (margin - d) / d;
    diff.iter().map(|v| k * v).collect()
}

/// For each anchor, up to `per_anchor` triplets `(i, j, k)` with
/// `labels[j] == labels[i] != labels[k]`, drawn uniformly without
/// replacement from all valid `(j, k)` pairs.
pub fn form_triplets<R: Rng>(labels: &[usize], per_anchor: usize, rng: &mut R) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, &yi) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != i && labels[j] == yi).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] != yi).collect();
        let total = pos.len() * neg.len();
        if total == 0 || per_anchor == 0 {
            continue;
        }
        for idx in sample(rng, total, per_anchor.min(total)).into_vec() {
            out.push((i, pos[idx / neg.len()], neg[idx % neg.len()]));
        }
    }
    out
}

/// L2-normalize rows of length `dim`; returns the normalized rows and norms.
pub fn normalize_rows(x: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / dim);
    for row in out.chunks_exact_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Mean of `l(i,j) + l(i,k)` over the triplets and its gradient with respect
/// to the raw (unnormalized) embedding rows.
pub fn triplet_term(embedding: &[f64], dim: usize, triplets: &[(usize, usize, usize)], margin: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; embedding.len()];
    if triplets.is_empty() {
        return (0.0, grad);
    }
    let (h, norms) = normalize_rows(embedding, dim);
    let row = |i: usize| &h[i * dim..(i + 1) * dim];
    let mut dh = vec![0.0; h.len()];
    let mut loss = 0.0;
    let scale = 1.0 / triplets.len() as f64;
    for &(i, j, k) in triplets {
        for (other, same) in [(j, true), (k, false)] {
            loss += pair_loss(row(i), row(other), same, margin);
            let g = pair_loss_grad(row(i), row(other), same, margin);
            for (t, gv) in g.iter().enumerate() {
                dh[i * dim + t] += scale * gv;
                dh[other * dim + t] -= scale * gv;
            }
        }
    }
    // back through the normalization: (I - h hᵀ) dh / ‖e‖
    for (r, norm) in norms.iter().enumerate() {
        let hr = &h[r * dim..(r + 1) * dim];
        let dr = &dh[r * dim..(r + 1) * dim];
        let dot: f64 = hr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for t in 0..dim {
            grad[r * dim + t] = (dr[t] - hr[t] * dot) / norm;
        }
    }
    (loss * scale, grad)
}
