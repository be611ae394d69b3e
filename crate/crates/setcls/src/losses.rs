//! Training objectives: soft-label set loss, per-token instance loss, and
//! the clustering loss that pulls same-identity token distributions toward
//! their centroid.

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Probabilities are clamped at this floor inside log/KL so degenerate
/// distributions cannot produce -inf.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_sc: f64,
    pub w_ins: f64,
    pub w_cluster: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_sc: 0.05, w_ins: 0.02, w_cluster: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_sc < 0.0 || self.w_ins < 0.0 || self.w_cluster < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sc: f64,
    pub l_ins: f64,
    pub l_cluster: f64,
    pub total: f64,
}

/// Soft-label cross entropy of the set logits: `-sum_c y_c log softmax(logits)_c`,
/// computed via logsumexp.
pub fn set_loss(tape: &mut Tape, set_logits: Var, soft_label: &[f64]) -> Result<Var> {
    let (rows, c) = tape.value(set_logits).dims2()?;
    if rows != 1 || c != soft_label.len() {
        return Err(Error::Shape(format!(
            "set_loss expects [1, {}] logits, got {:?}",
            soft_label.len(),
            tape.value(set_logits).shape()
        )));
    }
    let sum: f64 = soft_label.iter().sum();
    if soft_label.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("soft label is not a distribution (sum {sum})")));
    }
    let logp = tape.log_softmax_rows(set_logits)?;
    tape.neg_dot_const(logp, Tensor::matrix(1, c, soft_label.to_vec())?)
}

/// Mean over tokens of one-hot cross entropy against each token's
/// originating-RoI category.
pub fn instance_loss(tape: &mut Tape, categories: &[usize], instance_logits: Var) -> Result<Var> {
    let (l, c) = tape.value(instance_logits).dims2()?;
    if categories.len() != l {
        return Err(Error::Shape(format!("{} categories for {l} logit rows", categories.len())));
    }
    let logp = tape.log_softmax_rows(instance_logits)?;
    tape.neg_dot_const(logp, one_hot_rows(categories, c, 1.0 / l as f64)?)
}

/// Per token: one-hot cross entropy plus `KL(p_l || Q_l)` where `Q_l` is the
/// mean predicted distribution over all tokens sharing token `l`'s identity
/// (including `l` itself). Mean over tokens; gradients flow through both
/// sides of the KL.
pub fn cluster_loss(
    tape: &mut Tape,
    categories: &[usize],
    identities: &[u64],
    cluster_logits: Var,
) -> Result<Var> {
    let (l, c) = tape.value(cluster_logits).dims2()?;
    if categories.len() != l || identities.len() != l {
        return Err(Error::Shape(format!(
            "cluster_loss got {} categories / {} identities for {l} rows",
            categories.len(),
            identities.len()
        )));
    }
    let ce = {
        let logp = tape.log_softmax_rows(cluster_logits)?;
        tape.neg_dot_const(logp, one_hot_rows(categories, c, 1.0 / l as f64)?)?
    };

    // Q = M @ P with M the constant within-identity averaging matrix.
    let probs = tape.softmax_rows(cluster_logits)?;
    let mut averaging = Tensor::zeros(vec![l, l]);
    for row in 0..l {
        let peers: Vec<usize> =
            (0..l).filter(|&k| identities[k] == identities[row]).collect();
        let w = 1.0 / peers.len() as f64;
        for k in peers {
            averaging.set2(row, k, w);
        }
    }
    let m = tape.leaf(averaging)?;
    let centroids = tape.matmul(m, probs)?;
    let log_p = tape.ln_clamped(probs, PROB_FLOOR)?;
    let log_q = tape.ln_clamped(centroids, PROB_FLOOR)?;
    let diff = tape.sub(log_p, log_q)?;
    let weighted = tape.mul(probs, diff)?;
    let kl_sum = tape.sum_all(weighted)?;
    let kl = tape.scale(kl_sum, 1.0 / l as f64)?;

    tape.add(ce, kl)
}

/// Weighted combination recorded on the tape; returns the total loss var
/// plus the scalar report.
pub fn total_loss(
    tape: &mut Tape,
    l_sc: Var,
    l_ins: Var,
    l_cluster: Var,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let a = tape.scale(l_sc, weights.w_sc)?;
    let b = tape.scale(l_ins, weights.w_ins)?;
    let c = tape.scale(l_cluster, weights.w_cluster)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let report = LossReport {
        l_sc: tape.value(l_sc).item()?,
        l_ins: tape.value(l_ins).item()?,
        l_cluster: tape.value(l_cluster).item()?,
        total: tape.value(total).item()?,
    };
    Ok((total, report))
}

fn one_hot_rows(categories: &[usize], num_classes: usize, row_weight: f64) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![categories.len(), num_classes]);
    for (r, &cat) in categories.iter().enumerate() {
        if cat >= num_classes {
            return Err(Error::Data(format!("category {cat} out of range 0..{num_classes}")));
        }
        t.set2(r, cat, row_weight);
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{finite_diff_vec, relative_error, DEFAULT_FD_STEP};
    use crate::model::softmax_vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn logits_var(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::matrix(rows, cols, data).unwrap()).unwrap()
    }

    #[test]
    fn set_loss_uniform_logits_is_ln_c() {
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, 1, 4, vec![0.0; 4]);
        let loss = set_loss(&mut tape, logits, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn set_loss_confident_correct_is_near_zero() {
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, 1, 3, vec![50.0, 0.0, 0.0]);
        let loss = set_loss(&mut tape, logits, &[1.0, 0.0, 0.0]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-12);
    }

    #[test]
    fn set_loss_soft_label_matches_recomputation() {
        // y = [0.5, 0.5, 0], logits [1,2,3]: loss = -0.5 (log s1 + log s2)
        let mut tape = Tape::new();
        let raw = vec![1.0, 2.0, 3.0];
        let logits = logits_var(&mut tape, 1, 3, raw.clone());
        let loss = set_loss(&mut tape, logits, &[0.5, 0.5, 0.0]).unwrap();
        let probs = softmax_vec(&raw);
        let expected = -0.5 * (probs[0].ln() + probs[1].ln());
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn set_loss_rejects_non_distribution() {
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, 1, 2, vec![0.0, 0.0]);
        assert!(set_loss(&mut tape, logits, &[0.9, 0.3]).is_err());
        let logits2 = logits_var(&mut tape, 1, 2, vec![0.0, 0.0]);
        assert!(set_loss(&mut tape, logits2, &[-0.5, 1.5]).is_err());
    }

    #[test]
    fn set_loss_shift_invariance() {
        let mut tape = Tape::new();
        let y = [0.25, 0.25, 0.5];
        let a = logits_var(&mut tape, 1, 3, vec![0.4, -1.0, 2.0]);
        let la = set_loss(&mut tape, a, &y).unwrap();
        let b = logits_var(&mut tape, 1, 3, vec![0.4 + 7.0, -1.0 + 7.0, 2.0 + 7.0]);
        let lb = set_loss(&mut tape, b, &y).unwrap();
        let (va, vb) = (tape.value(la).item().unwrap(), tape.value(lb).item().unwrap());
        assert!((va - vb).abs() < 1e-10);
        assert!(va >= 0.0);
    }

    #[test]
    fn instance_loss_examples() {
        let mut tape = Tape::new();
        // uniform logits on every row -> ln C
        let logits = logits_var(&mut tape, 3, 5, vec![0.0; 15]);
        let loss = instance_loss(&mut tape, &[0, 2, 4], logits).unwrap();
        assert!((tape.value(loss).item().unwrap() - 5.0_f64.ln()).abs() < 1e-12);

        // perfect logits -> near zero
        let sharp = logits_var(&mut tape, 2, 3, vec![60.0, 0.0, 0.0, 0.0, 60.0, 0.0]);
        let l2 = instance_loss(&mut tape, &[0, 1], sharp).unwrap();
        assert!(tape.value(l2).item().unwrap() < 1e-12);

        // out-of-range category
        let bad = logits_var(&mut tape, 1, 3, vec![0.0; 3]);
        assert!(instance_loss(&mut tape, &[5], bad).is_err());
    }

    #[test]
    fn instance_loss_is_mean_of_per_row_ce() {
        let mut tape = Tape::new();
        let rows = [vec![0.2, -1.0, 0.5], vec![2.0, 0.1, -0.4]];
        let cats = [2usize, 0];
        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        let logits = logits_var(&mut tape, 2, 3, flat);
        let loss = instance_loss(&mut tape, &cats, logits).unwrap();
        let expected: f64 = rows
            .iter()
            .zip(&cats)
            .map(|(r, &c)| -softmax_vec(r)[c].ln())
            .sum::<f64>()
            / 2.0;
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn cluster_loss_kl_vanishes_for_identical_distributions() {
        // All tokens share one identity and identical logits: Q equals every
        // p, so the loss reduces to the CE part exactly.
        let mut tape = Tape::new();
        let row = vec![0.3, -0.8, 1.1];
        let flat: Vec<f64> = row.iter().cloned().cycle().take(9).collect();
        let logits = logits_var(&mut tape, 3, 3, flat);
        let loss = cluster_loss(&mut tape, &[0, 0, 0], &[7, 7, 7], logits).unwrap();
        let expected_ce = -softmax_vec(&row)[0].ln();
        assert!((tape.value(loss).item().unwrap() - expected_ce).abs() < 1e-10);
    }

    #[test]
    fn cluster_loss_singleton_identities_have_zero_kl() {
        let mut tape = Tape::new();
        let data = vec![0.1, 0.9, -0.3, 0.0, 2.0, -1.0];
        let logits = logits_var(&mut tape, 2, 3, data.clone());
        let loss = cluster_loss(&mut tape, &[1, 2], &[10, 11], logits).unwrap();
        let ce = (-softmax_vec(&data[0..3])[1].ln() - softmax_vec(&data[3..6])[2].ln()) / 2.0;
        assert!((tape.value(loss).item().unwrap() - ce).abs() < 1e-10);
    }

    #[test]
    fn cluster_loss_two_token_kl_matches_scalar_recomputation() {
        let mut tape = Tape::new();
        let data = vec![0.5, -0.2, 0.8, -1.0, 0.3, 0.1];
        let logits = logits_var(&mut tape, 2, 3, data.clone());
        let loss = cluster_loss(&mut tape, &[0, 0], &[5, 5], logits).unwrap();

        let p = softmax_vec(&data[0..3]);
        let q = softmax_vec(&data[3..6]);
        let mid: Vec<f64> = p.iter().zip(&q).map(|(a, b)| (a + b) / 2.0).collect();
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| x * (x.ln() - y.ln())).sum()
        };
        let expected_kl = (kl(&p, &mid) + kl(&q, &mid)) / 2.0;
        let expected_ce = (-p[0].ln() - q[0].ln()) / 2.0;
        let got = tape.value(loss).item().unwrap();
        assert!((got - (expected_ce + expected_kl)).abs() < 1e-10, "got {got}");
    }

    #[test]
    fn cluster_loss_rejects_mismatched_lists() {
        let mut tape = Tape::new();
        let logits = logits_var(&mut tape, 2, 3, vec![0.0; 6]);
        assert!(cluster_loss(&mut tape, &[0], &[1, 2], logits).is_err());
    }

    #[test]
    fn total_loss_weighting() {
        let mk = |tape: &mut Tape, v: f64| tape.leaf(Tensor::scalar(v)).unwrap();

        let mut tape = Tape::new();
        let (a, b, c) = (mk(&mut tape, 1.0), mk(&mut tape, 1.0), mk(&mut tape, 1.0));
        let zero = LossWeights { w_sc: 0.0, w_ins: 0.0, w_cluster: 0.0 };
        let (_, r) = total_loss(&mut tape, a, b, c, &zero).unwrap();
        assert_eq!(r.total, 0.0);

        let only_sc = LossWeights { w_sc: 1.0, w_ins: 0.0, w_cluster: 0.0 };
        let (a2, b2, c2) = (mk(&mut tape, 2.5), mk(&mut tape, 9.0), mk(&mut tape, -3.0));
        let (_, r2) = total_loss(&mut tape, a2, b2, c2, &only_sc).unwrap();
        assert_eq!(r2.total, 2.5);

        // defaults on (1,1,1) -> 0.17
        let (a3, b3, c3) = (mk(&mut tape, 1.0), mk(&mut tape, 1.0), mk(&mut tape, 1.0));
        let (_, r3) = total_loss(&mut tape, a3, b3, c3, &LossWeights::default()).unwrap();
        assert!((r3.total - 0.17).abs() < 1e-12);
        assert!(
            (r3.total - (0.05 * r3.l_sc + 0.02 * r3.l_ins + 0.1 * r3.l_cluster)).abs() < 1e-12
        );
    }

    fn fd_check_loss(build: &dyn Fn(&mut Tape, Var) -> Var, rows: usize, cols: usize, seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();

        let eval = |xs: &[f64]| -> crate::Result<(f64, Option<Tensor>)> {
            let mut tape = Tape::new();
            let logits = tape.leaf(Tensor::matrix(rows, cols, xs.to_vec())?)?;
            let loss = build(&mut tape, logits);
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).item()?, grads[logits.index()].clone()))
        };

        let (_, analytic) = eval(&data).unwrap();
        let analytic = analytic.unwrap();
        let mut f = |xs: &[f64]| eval(xs).map(|r| r.0);
        let fd = finite_diff_vec(&mut f, &data, DEFAULT_FD_STEP).unwrap();
        for (a, n) in analytic.data().iter().zip(&fd) {
            assert!(relative_error(*a, *n) < 1e-5, "analytic {a} vs fd {n}");
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        fd_check_loss(
            &|tape, logits| set_loss(tape, logits, &[0.25, 0.5, 0.25, 0.0]).unwrap(),
            1,
            4,
            21,
        );
        fd_check_loss(&|tape, logits| instance_loss(tape, &[0, 3, 1], logits).unwrap(), 3, 4, 22);
        fd_check_loss(
            &|tape, logits| cluster_loss(tape, &[0, 1, 0], &[4, 9, 4], logits).unwrap(),
            3,
            4,
            23,
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]

        // KL term is nonnegative for arbitrary logits/identity layouts.
        #[test]
        fn cluster_kl_term_is_nonnegative(
            data in proptest::collection::vec(-3.0f64..3.0, 12),
            idents in proptest::collection::vec(0u64..3, 4),
        ) {
            let cats = [0usize, 1, 2, 0];
            let mut with_kl = Tape::new();
            let logits = with_kl.leaf(Tensor::matrix(4, 3, data.clone()).unwrap()).unwrap();
            let loss = cluster_loss(&mut with_kl, &cats, &idents, logits).unwrap();

            let mut ce_only = Tape::new();
            let logits2 = ce_only.leaf(Tensor::matrix(4, 3, data).unwrap()).unwrap();
            // unique identities zero out the KL term, leaving pure CE
            let ce = cluster_loss(&mut ce_only, &cats, &[0, 1, 2, 3], logits2).unwrap();

            let kl = with_kl.value(loss).item().unwrap() - ce_only.value(ce).item().unwrap();
            proptest::prop_assert!(kl >= -1e-12, "negative KL term {}", kl);
        }
    }
}
