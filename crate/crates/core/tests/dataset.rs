//! Dataset properties checked against independent witnesses.

use std::collections::HashSet;

use dbtnet::data::{generate_dataset, split, DatasetSpec, Sample};

fn pinned_spec() -> DatasetSpec {
    DatasetSpec {
        classes: 8,
        samples_per_class: 100,
        image_size: 64,
        seed: 2024,
        ..DatasetSpec::default()
    }
}

/// Disc centres and radii, scaled to [0, 1], plus their squares.
fn layout_features(s: &Sample) -> Vec<f64> {
    let mut f = vec![1.0];
    for p in &s.parts {
        for v in [p.center.0 / 64.0, p.center.1 / 64.0, p.radius / 64.0] {
            f.push(v);
            f.push(v * v);
        }
    }
    f
}

/// Multinomial logistic regression by full-batch gradient descent.
fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let dim = xs[0].len();
    let mut w = vec![vec![0.0; dim]; classes];
    for _ in 0..2000 {
        let mut grad = vec![vec![0.0; dim]; classes];
        for (x, &y) in xs.iter().zip(ys) {
            let logits: Vec<f64> = w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for c in 0..classes {
                let p = exp[c] / z - if c == y { 1.0 } else { 0.0 };
                for d in 0..dim {
                    grad[c][d] += p * x[d];
                }
            }
        }
        for c in 0..classes {
            for d in 0..dim {
                w[c][d] -= 0.5 * grad[c][d] / xs.len() as f64;
            }
        }
    }
    w
}

fn predict(w: &[Vec<f64>], x: &[f64]) -> usize {
    let scores: Vec<f64> = w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    (0..scores.len()).fold(0, |best, i| if scores[i] > scores[best] { i } else { best })
}

#[test]
fn layout_alone_does_not_predict_the_class() {
    let spec = pinned_spec();
    let data = generate_dataset(&spec).unwrap();
    let (train, test) = split(&data, 0.75, 7).unwrap();
    let xs: Vec<Vec<f64>> = train.iter().map(layout_features).collect();
    let ys: Vec<usize> = train.iter().map(|s| s.label).collect();
    let w = fit(&xs, &ys, spec.classes);
    let correct = test.iter().filter(|s| predict(&w, &layout_features(s)) == s.label).count();
    let acc = correct as f64 / test.len() as f64;
    println!("position-only test accuracy {acc:.3}");
    assert!(acc <= 1.0 / spec.classes as f64 + 0.10, "{acc}");
}

#[test]
fn no_test_image_appears_in_train() {
    let data = generate_dataset(&pinned_spec()).unwrap();
    let (train, test) = split(&data, 0.75, 7).unwrap();
    let key = |s: &Sample| s.image.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    let seen: HashSet<Vec<u32>> = train.iter().map(key).collect();
    assert!(test.iter().all(|s| !seen.contains(&key(s))));
    assert_eq!(train.len() + test.len(), data.len());
}
