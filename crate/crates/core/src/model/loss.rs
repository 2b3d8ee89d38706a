use super::scalar::Real;
use crate::error::{Error, Result};

/// Log-softmax of one row, computed in f64.
fn log_softmax_row<T: Real>(row: &[T], out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.widen()));
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x.widen() - max;
        sum += o.exp();
    }
    let lse = sum.ln();
    out.iter_mut().for_each(|o| *o -= lse);
}

/// Mean next-token cross-entropy over `n` rows of width `vocab`. When `grad`
/// is given it receives `weight * (softmax - onehot) / n` (accumulated).
pub(crate) fn ce_rows<T: Real>(
    logits: &[T],
    targets: &[u32],
    vocab: usize,
    mut grad: Option<&mut [T]>,
    weight: f64,
) -> f64 {
    let n = targets.len();
    let inv_n = 1.0 / n as f64;
    let mut lsm = vec![0.0f64; vocab];
    let mut total = 0.0;
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        log_softmax_row(row, &mut lsm);
        total -= lsm[tgt as usize];
        if let Some(g) = grad.as_deref_mut() {
            let grow = &mut g[r * vocab..(r + 1) * vocab];
            for (v, gv) in grow.iter_mut().enumerate() {
                let mut d = lsm[v].exp();
                if v == tgt as usize {
                    d -= 1.0;
                }
                *gv += T::from_f64(weight * d * inv_n);
            }
        }
    }
    total * inv_n
}

/// Mean forward KL(teacher || student) over rows, temperature 1. When `grad`
/// is given it receives `(p_student - p_teacher) / n` (accumulated).
pub(crate) fn kl_rows<T: Real>(
    teacher: &[T],
    student: &[T],
    vocab: usize,
    mut grad: Option<&mut [T]>,
) -> f64 {
    let n = student.len() / vocab;
    let inv_n = 1.0 / n as f64;
    let mut lt = vec![0.0f64; vocab];
    let mut ls = vec![0.0f64; vocab];
    let mut total = 0.0;
    for r in 0..n {
        log_softmax_row(&teacher[r * vocab..(r + 1) * vocab], &mut lt);
        log_softmax_row(&student[r * vocab..(r + 1) * vocab], &mut ls);
        let mut row_kl = 0.0;
        for v in 0..vocab {
            let pt = lt[v].exp();
            if pt > 0.0 {
                row_kl += pt * (lt[v] - ls[v]);
            }
        }
        total += row_kl.max(0.0);
        if let Some(g) = grad.as_deref_mut() {
            let grow = &mut g[r * vocab..(r + 1) * vocab];
            for (v, gv) in grow.iter_mut().enumerate() {
                *gv += T::from_f64((ls[v].exp() - lt[v].exp()) * inv_n);
            }
        }
    }
    total * inv_n
}

/// Mean cross-entropy in nats/token of `logits` (rows x vocab) against `targets`.
pub fn lm_loss(logits: &[f32], targets: &[u32], vocab: usize) -> Result<f64> {
    if targets.is_empty() || logits.len() != targets.len() * vocab {
        return Err(Error::Shape(format!(
            "logits of length {} do not match {} targets x vocab {}",
            logits.len(),
            targets.len(),
            vocab
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, vocab });
    }
    Ok(ce_rows(logits, targets, vocab, None, 1.0))
}

/// Mean per-token forward KL between teacher and student logits (nats).
pub fn forward_kl(teacher_logits: &[f32], student_logits: &[f32], vocab: usize) -> Result<f64> {
    if teacher_logits.len() != student_logits.len() || student_logits.is_empty() || !student_logits.len().is_multiple_of(vocab) {
        return Err(Error::Shape(format!(
            "teacher logits {} vs student logits {} (vocab {})",
            teacher_logits.len(),
            student_logits.len(),
            vocab
        )));
    }
    Ok(kl_rows(teacher_logits, student_logits, vocab, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = vec![0.0f32; 3 * 258];
        let l = lm_loss(&logits, &[1, 5, 257], 258).unwrap();
        assert!((l - (258f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_gives_nearly_zero() {
        let logits = vec![0.0f32, 80.0, 0.0];
        assert!(lm_loss(&logits, &[1], 3).unwrap() < 1e-30);
    }

    #[test]
    fn two_token_example() {
        let logits = vec![0.0f32, 3f32.ln()];
        let l = lm_loss(&logits, &[1], 2).unwrap();
        // softmax = (1/4, 3/4)
        assert!((l - 0.287_682_072_451_780_9).abs() < 1e-7, "{l}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(lm_loss(&[0.0; 5], &[0, 1], 3).is_err());
        assert!(forward_kl(&[0.0; 4], &[0.0; 6], 2).is_err());
    }

    #[test]
    fn kl_reference_value() {
        // p_T = (0.75, 0.25), p_S = (0.5, 0.5)
        let t = vec![3f32.ln(), 0.0];
        let s = vec![0.0f32, 0.0];
        let kl = forward_kl(&t, &s, 2).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((kl - want).abs() < 1e-7, "{kl} vs {want}");
        assert!((want - 0.130_812).abs() < 1e-5);
    }

    #[test]
    fn kl_of_equal_logits_is_zero() {
        let t: Vec<f32> = (0..40).map(|i| (i as f32 * 0.37).sin() * 4.0).collect();
        assert!(forward_kl(&t, &t, 10).unwrap().abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(t in proptest::collection::vec(-20f32..20.0, 12),
                             s in proptest::collection::vec(-20f32..20.0, 12)) {
            prop_assert!(forward_kl(&t, &s, 4).unwrap() >= 0.0);
        }

        #[test]
        fn kl_invariant_to_student_shift(t in proptest::collection::vec(-5f32..5.0, 8),
                                         s in proptest::collection::vec(-5f32..5.0, 8),
                                         c in -3f32..3.0) {
            let shifted: Vec<f32> = s.iter().map(|x| x + c).collect();
            let a = forward_kl(&t, &s, 4).unwrap();
            let b = forward_kl(&t, &shifted, 4).unwrap();
            prop_assert!((a - b).abs() < 1e-5);
        }
    }
}
