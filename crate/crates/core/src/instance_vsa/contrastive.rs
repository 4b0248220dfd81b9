//! Max-margin contrastive pairing of source embeddings with their nearest
//! target embedding.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::feature::squared_euclidean;
use crate::tensor::Tensor;

/// Index of the Euclidean-nearest target; ties go to the lowest index.
pub fn nearest_neighbor(query: &[f32], targets: &[Vec<f32>]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (j, t) in targets.iter().enumerate() {
        let d = squared_euclidean(query, t);
        if best.map_or(true, |(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("contrastive margin must be positive, got {margin}")))
    }
}

/// Loss and gradients with respect to every source and target row.
/// Returns `None` when either side is empty.
fn loss_and_grads(
    src: &[Vec<f32>],
    tgt: &[Vec<f32>],
    margin: f64,
) -> Option<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if src.is_empty() || tgt.is_empty() {
        return None;
    }
    let dim = src[0].len();
    let mut gs = vec![vec![0.0; dim]; src.len()];
    let mut gt = vec![vec![0.0; dim]; tgt.len()];
    let mut total = 0.0;
    for (i, s) in src.iter().enumerate() {
        let nn = nearest_neighbor(s, tgt).expect("targets non-empty");
        for (j, t) in tgt.iter().enumerate() {
            let d = squared_euclidean(s, t);
            // ∂d/∂s = 2(s − t), ∂d/∂t = −2(s − t)
            let coef = if j == nn {
                total += d;
                1.0
            } else if margin - d > 0.0 {
                total += margin - d;
                -1.0
            } else {
                continue;
            };
            for k in 0..dim {
                let diff = 2.0 * (s[k] as f64 - t[k] as f64) * coef;
                gs[i][k] += diff;
                gt[j][k] -= diff;
            }
        }
    }
    Some((total, gs, gt))
}

/// `Σ_i [ ‖s_i − t_nn(i)‖² + Σ_{j≠nn(i)} max(0, m − ‖s_i − t_j‖²) ]`.
/// Empty inputs give 0.
pub fn contrastive_loss(src: &[Vec<f32>], tgt: &[Vec<f32>], margin: f64) -> Result<f64> {
    check_margin(margin)?;
    if let (Some(a), Some(b)) = (src.first(), tgt.first()) {
        if src.iter().chain(tgt).any(|v| v.len() != a.len()) || a.len() != b.len() {
            return Err(Error::Shape("contrastive embeddings differ in length".into()));
        }
    }
    Ok(loss_and_grads(src, tgt, margin).map_or(0.0, |r| r.0))
}

/// Tape form over `Ns × m` and `Nt × m` nodes.
pub fn contrastive_tape(tape: &mut Tape, src: Var, tgt: Var, margin: f64) -> Result<Var> {
    check_margin(margin)?;
    let rows = |t: &Tensor| -> Vec<Vec<f32>> {
        let s = t.shape();
        t.data().chunks(s[1].max(1)).map(<[f32]>::to_vec).collect()
    };
    let (ss, st) = (tape.shape(src).to_vec(), tape.shape(tgt).to_vec());
    if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
        return Err(Error::Shape(format!("contrastive inputs {ss:?} and {st:?}")));
    }
    let (s_rows, t_rows) = (rows(tape.value(src)), rows(tape.value(tgt)));
    let (total, gs, gt) = loss_and_grads(&s_rows, &t_rows, margin)
        .ok_or_else(|| Error::InvalidArgument("contrastive loss needs both domains".into()))?;
    let flat = |g: Vec<Vec<f64>>| -> Vec<f32> { g.into_iter().flatten().map(|v| v as f32).collect() };
    let (gs, gt) = (Tensor::from_vec(&ss, flat(gs)), Tensor::from_vec(&st, flat(gt)));
    Ok(tape.op(
        Tensor::scalar(total as f32),
        &[src, tgt],
        Box::new(move |ctx| {
            let s = ctx.grad.item();
            vec![Some(gs.scale(s)), Some(gt.scale(s))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_neighbor_examples() {
        let t = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        assert_eq!(nearest_neighbor(&[0.0, 0.0], &t), Some(0));
        assert_eq!(nearest_neighbor(&[0.0, 2.0], &t), Some(1));
        let tie = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(nearest_neighbor(&[0.0, 0.0], &tie), Some(0));
        assert_eq!(nearest_neighbor(&[0.0], &[]), None);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(contrastive_loss(&[vec![0.4, 0.2]], &[vec![0.4, 0.2]], 1.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&[vec![0.0]], &[vec![0.0], vec![3.0]], 1.0).unwrap(), 0.0);
        let l = contrastive_loss(&[vec![0.0]], &[vec![0.1], vec![0.5]], 1.0).unwrap();
        assert!((l - 0.76).abs() < 1e-6);
        assert_eq!(contrastive_loss(&[], &[vec![1.0]], 1.0).unwrap(), 0.0);
        assert!(contrastive_loss(&[vec![0.0]], &[vec![1.0]], 0.0).is_err());
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let src = vec![vec![0.1f32, -0.3], vec![0.7, 0.2]];
        let tgt = vec![vec![0.0f32, 0.1], vec![0.5, 0.5], vec![-0.6, 0.3]];
        let margin = 1.0;
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::from_vec(&[2, 2], src.concat()));
        let t = tape.leaf(Tensor::from_vec(&[3, 2], tgt.concat()));
        let l = contrastive_tape(&mut tape, s, t, margin).unwrap();
        let got = contrastive_loss(&src, &tgt, margin).unwrap();
        assert!((tape.value(l).item() as f64 - got).abs() < 1e-5);
        let g = tape.backward(l);
        let gs = g.wrt(s).unwrap();
        let h = 1e-3f32;
        for i in 0..2 {
            for k in 0..2 {
                let mut up = src.clone();
                up[i][k] += h;
                let mut dn = src.clone();
                dn[i][k] -= h;
                let fd = (contrastive_loss(&up, &tgt, margin).unwrap()
                    - contrastive_loss(&dn, &tgt, margin).unwrap())
                    / (2.0 * h as f64);
                let an = gs.data()[i * 2 + k] as f64;
                assert!((fd - an).abs() <= 1e-2 * an.abs().max(1e-2), "{fd} vs {an}");
            }
        }
    }
}
