use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Real;

const NORM_TOLERANCE: f64 = 1e-3;

fn check_normalized<R: Real>(v: &Var<'_, R>, what: &str) -> Result<()> {
    let x = v.value();
    for (i, row) in x.data().chunks(x.last_dim()).enumerate() {
        let n = row.iter().map(|&a| a.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Invalid(format!(
                "{what} row {i} has norm {n:.6}; contrastive inputs must be L2-normalized"
            )));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over the `B x B` matrix `logit_scale * I T^T`, with
/// matching pairs on the diagonal. `logit_scale` is `1 / temperature`.
pub fn contrastive_loss<'t, R: Real>(
    image: &Var<'t, R>,
    text: &Var<'t, R>,
    logit_scale: &Var<'t, R>,
) -> Result<Var<'t, R>> {
    let (si, st) = (image.shape(), text.shape());
    if si.len() != 2 || si != st || si[0] == 0 {
        return Err(Error::Shape(format!(
            "contrastive loss needs two [B, D] batches with B >= 1, got {si:?} and {st:?}"
        )));
    }
    check_normalized(image, "image embedding")?;
    check_normalized(text, "text embedding")?;
    let b = si[0];
    let logits = image.matmul_t(text, false, true).mul_scalar(logit_scale);
    let targets: Vec<usize> = (0..b).collect();
    let ones = vec![R::one(); b];
    let norm = R::from_usize(b).unwrap();
    let i2t = logits.weighted_cross_entropy(&targets, &ones, norm);
    let t2i = logits.transpose().weighted_cross_entropy(&targets, &ones, norm);
    Ok(i2t.add(&t2i).scale(R::from_f64_lossy(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    fn loss_of(img: Tensor<f64>, txt: Tensor<f64>, scale: f64) -> Result<f64> {
        let tape = Tape::new();
        let l = contrastive_loss(&tape.constant(img), &tape.constant(txt), &tape.constant(Tensor::scalar(scale)))?;
        Ok(l.item())
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let v = Tensor::new(&[1, 2], vec![0.6, 0.8]);
        assert_eq!(loss_of(v.clone(), v, 14.0).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_pairs_closed_form() {
        let e = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        // Scalar oracle: each row is softmax over logits (1, 0), the
        // matching entry has probability e / (e + 1).
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((oracle - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((loss_of(e.clone(), e, 1.0).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn joint_permutation_invariance() {
        let a = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0]);
        let b = Tensor::new(&[3, 2], vec![0.8, 0.6, 0.0, 1.0, 1.0, 0.0]);
        let perm = [2, 0, 1];
        let pa = Tensor::new(&[3, 2], perm.iter().flat_map(|&i| a.row(i).to_vec()).collect());
        let pb = Tensor::new(&[3, 2], perm.iter().flat_map(|&i| b.row(i).to_vec()).collect());
        let l1 = loss_of(a, b, 5.0).unwrap();
        let l2 = loss_of(pa, pb, 5.0).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let a = Tensor::new(&[1, 2], vec![1.0, 1.0]);
        assert!(loss_of(a.clone(), a, 1.0).is_err());
    }
}
