use crate::autograd::{Graph, ParamStore, Var};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::tensor::{norm, Matrix};

/// Row index of a label among the unified classes (live first).
pub fn class_index(label: Label) -> usize {
    if label.is_live() {
        0
    } else {
        1
    }
}

/// `cos(f_v[b], class_features[c]) / temperature`.
pub fn cosine_logits(g: &mut Graph, features: Var, class_features: Var, temperature: f64) -> Var {
    let f = g.normalize_rows(features);
    let c = g.normalize_rows(class_features);
    let cos = g.matmul_t(f, c);
    g.scale(cos, 1.0 / temperature)
}

pub fn check_norms(m: &Matrix, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Numeric(format!("{what} row {r} has norm {n}")));
        }
    }
    Ok(())
}

/// Mean cross-entropy of cosine logits.
pub fn cls_loss(features: &Matrix, class_features: &Matrix, labels: &[usize], temperature: f64) -> Result<f64> {
    if features.rows() != labels.len() || features.cols() != class_features.cols() {
        return Err(Error::Contract(format!(
            "features {:?}, class features {:?}, {} labels",
            features.shape(),
            class_features.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= class_features.rows()) {
        return Err(Error::Contract(format!("label {bad} out of range")));
    }
    check_norms(features, "image feature")?;
    check_norms(class_features, "class feature")?;
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let f = g.constant(features.clone());
    let c = g.constant(class_features.clone());
    let logits = cosine_logits(&mut g, f, c, temperature);
    let loss = g.cross_entropy(logits, labels);
    Ok(g.value(loss).get(0, 0))
}

pub fn total_loss(cls: f64, ufm: f64, lambda: f64) -> f64 {
    cls + lambda * ufm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(features: &Matrix, classes: &Matrix, labels: &[usize], t: f64) -> f64 {
        let mut total = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let fb = features.row(b);
            let nf = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let logits: Vec<f64> = (0..classes.rows())
                .map(|c| {
                    let cc = classes.row(c);
                    let nc = cc.iter().map(|x| x * x).sum::<f64>().sqrt();
                    fb.iter().zip(cc).map(|(a, b)| a * b).sum::<f64>() / (nf * nc) / t
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            total += -(logits[y].exp() / z).ln();
        }
        total / labels.len() as f64
    }

    #[test]
    fn equal_logits_give_ln2() {
        // f_v orthogonal to both class features
        let f = Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let l = cls_loss(&f, &c, &[0], 0.07).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn sharp_temperature_limit() {
        let f = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = Matrix::from_rows(&[vec![2.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let right = cls_loss(&f, &c, &[0], 0.01).unwrap();
        let wrong = cls_loss(&f, &c, &[1], 0.01).unwrap();
        assert!(right < 1e-80, "{right}");
        assert!((wrong - 200.0).abs() < 1e-9);
    }

    #[test]
    fn random_batch_matches_naive_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = Matrix::randn(4, 16, 1.0, &mut rng);
        let c = Matrix::randn(2, 16, 1.0, &mut rng);
        let labels = [0, 1, 1, 0];
        let got = cls_loss(&f, &c, &labels, 0.07).unwrap();
        assert!((got - naive(&f, &c, &labels, 0.07)).abs() < 1e-10);
    }

    #[test]
    fn zero_norm_is_numeric_error() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(cls_loss(&Matrix::zeros(1, 2), &c, &[0], 0.1).unwrap_err().kind(), "numeric");
        assert_eq!(cls_loss(&c, &Matrix::zeros(2, 2), &[0, 1], 0.1).unwrap_err().kind(), "numeric");
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.7, 123.0, 0.0), 0.7);
        assert!((total_loss(0.7, 0.2, 0.5) - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn argmax_invariant_to_feature_scale(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Matrix::randn(1, 8, 1.0, &mut rng);
            let c = Matrix::randn(2, 8, 1.0, &mut rng);
            let logits = |m: &Matrix| {
                let store = ParamStore::new();
                let mut g = Graph::new(&store);
                let (a, b) = (g.constant(m.clone()), g.constant(c.clone()));
                let l = cosine_logits(&mut g, a, b, 0.07);
                g.value(l).clone()
            };
            let (a, b) = (logits(&f), logits(&f.scaled(3.0)));
            prop_assert_eq!(a.get(0, 0) > a.get(0, 1), b.get(0, 0) > b.get(0, 1));
        }

        #[test]
        fn total_is_strictly_monotone_in_ufm(cls in 0.0f64..5.0, u in 0.0f64..2.0, du in 1e-6f64..1.0, lambda in 1e-3f64..2.0) {
            prop_assert!(total_loss(cls, u + du, lambda) > total_loss(cls, u, lambda));
        }
    }
}
