//! Max-margin triplet ranking loss over embedding values.

use super::mining::Triplet;

/// `max(0, d_ap − d_an + margin)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    /// Mean hinge loss over all triplets.
    pub loss: f64,
    pub active: usize,
    pub total: usize,
    /// `∂loss/∂embedding` for every batch item.
    pub grads: Vec<Vec<f64>>,
}

/// Mean triplet loss and its gradient with respect to each embedding.
pub fn batch_triplet_loss(embeddings: &[Vec<f32>], triplets: &[Triplet], margin: f64) -> BatchLoss {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut grads = vec![vec![0.0; dim]; embeddings.len()];
    let mut sum = 0.0;
    let mut active = 0;
    let scale = 1.0 / triplets.len().max(1) as f64;
    for t in triplets {
        let (a, p, n) = (&embeddings[t.anchor], &embeddings[t.positive], &embeddings[t.negative]);
        let d_ap = euclidean(a, p);
        let d_an = euclidean(a, n);
        let l = triplet_loss(d_ap, d_an, margin);
        sum += l;
        if l <= 0.0 {
            continue;
        }
        active += 1;
        for k in 0..dim {
            // ∂d(x,y)/∂x = (x − y)/d(x,y); zero at coincident points
            let u_ap = if d_ap > 0.0 { (a[k] as f64 - p[k] as f64) / d_ap } else { 0.0 };
            let u_an = if d_an > 0.0 { (a[k] as f64 - n[k] as f64) / d_an } else { 0.0 };
            grads[t.anchor][k] += scale * (u_ap - u_an);
            grads[t.positive][k] -= scale * u_ap;
            grads[t.negative][k] += scale * u_an;
        }
    }
    BatchLoss {
        loss: sum * scale,
        active,
        total: triplets.len(),
        grads,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hinge_examples() {
        assert_eq!(triplet_loss(0.3, 1.0, 0.5), 0.0);
        assert_eq!(triplet_loss(0.7, 0.7, 0.5), 0.5);
        assert!((triplet_loss(1.2, 0.4, 0.5) - 1.3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn hinge_is_nonnegative_and_zero_past_margin(d_ap in 0.0f64..30.0, d_an in 0.0f64..30.0) {
            let l = triplet_loss(d_ap, d_an, 0.5);
            prop_assert!(l >= 0.0);
            if d_an >= d_ap + 0.5 {
                prop_assert_eq!(l, 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let emb: Vec<Vec<f32>> = vec![
            vec![1.0, 0.5, -0.25],
            vec![0.0, 1.5, 0.75],
            vec![0.75, 0.25, -0.5],
            vec![-1.0, 0.0, 2.0],
        ];
        let triplets = [
            Triplet { anchor: 0, positive: 1, negative: 2 },
            Triplet { anchor: 1, positive: 0, negative: 3 },
            Triplet { anchor: 0, positive: 1, negative: 3 },
        ];
        let margin = 3.0;
        let base = batch_triplet_loss(&emb, &triplets, margin);
        assert!(base.active > 0);
        let loss_at = |e: &Vec<Vec<f64>>| {
            let mut s = 0.0;
            for t in &triplets {
                let d = |x: &Vec<f64>, y: &Vec<f64>| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                s += (d(&e[t.anchor], &e[t.positive]) - d(&e[t.anchor], &e[t.negative]) + margin).max(0.0);
            }
            s / triplets.len() as f64
        };
        let e64: Vec<Vec<f64>> = emb.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let h = 1e-6;
        for i in 0..emb.len() {
            for k in 0..3 {
                let mut plus = e64.clone();
                plus[i][k] += h;
                let mut minus = e64.clone();
                minus[i][k] -= h;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                assert!((numeric - base.grads[i][k]).abs() < 1e-6, "item {i} dim {k}");
            }
        }
    }
}
