use wideformer::data::{generate_planted_partition, Graph, PlantedPartition};
use wideformer::model::{accuracy, evaluate, train, AttentionKind, ModelConfig};
use wideformer::{Matrix, Rng};

fn graph(n: usize, classes: usize, noise: f64, seed: u64) -> Graph {
    generate_planted_partition(&PlantedPartition {
        n,
        n_classes: classes,
        p_in: 0.05,
        p_out: 0.01,
        feat_dim: 4,
        noise,
        seed,
    })
    .unwrap()
}

/// Solves the normal equations of `[X 1] w ≈ y` by Gaussian elimination.
fn least_squares(x: &Matrix, y: &[f64]) -> Vec<f64> {
    let d = x.cols() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for r in 0..x.rows() {
        let mut row = x.row(r).to_vec();
        row.push(1.0);
        for i in 0..d {
            for j in 0..d {
                a[i][j] += row[i] * row[j];
            }
            a[i][d] += row[i] * y[r];
        }
    }
    for c in 0..d {
        let p = (c..d).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..d {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..=d {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..d).map(|i| a[i][d] / a[i][i]).collect()
}

#[test]
fn separable_two_class_toy_is_fit_exactly() {
    let g = graph(40, 2, 0.15, 11);
    let rows = Graph::indices(&g.train);
    let sub = g.features.select_rows(&rows);
    let y: Vec<f64> = rows.iter().map(|&i| if g.labels[i] == 1 { 1.0 } else { -1.0 }).collect();
    let w = least_squares(&sub, &y);
    for (r, &yi) in y.iter().enumerate() {
        let s: f64 = sub.row(r).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1];
        assert!(s * yi > 0.0, "toy is not linearly separable");
    }

    let cfg = ModelConfig {
        hidden_dim: 8,
        lr: 1e-2,
        epochs: 200,
        seed: 3,
        ..ModelConfig::default()
    };
    let report = train(&g, &cfg).unwrap().report;
    let first = report.epochs.iter().position(|e| e.train_acc == 1.0);
    assert!(first.is_some(), "train accuracy peaked at {}", report.epochs.iter().map(|e| e.train_acc).fold(0.0, f64::max));
}

#[test]
fn untrained_accuracy_near_chance() {
    let mut total = 0.0;
    let seeds = 20;
    for s in 0..seeds {
        let g = graph(200, 4, 0.5, 100 + s);
        let cfg = ModelConfig {
            hidden_dim: 8,
            epochs: 0,
            seed: s,
            ..ModelConfig::default()
        };
        let r = train(&g, &cfg).unwrap().report;
        assert!(r.epochs.is_empty());
        total += r.initial.test_acc;
    }
    let mean = total / seeds as f64;
    assert!((mean - 0.25).abs() < 0.08, "mean initial accuracy {mean}");
}

#[test]
fn uniform_random_predictor_scores_one_over_c() {
    let mut rng = Rng::new(5);
    for c in [2usize, 3, 7] {
        let n = 20_000;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let acc = accuracy(&pred, &labels, &rows).unwrap();
        // four standard errors
        let se = ((1.0 / c as f64) * (1.0 - 1.0 / c as f64) / n as f64).sqrt();
        assert!((acc - 1.0 / c as f64).abs() < 4.0 * se, "c={c} acc={acc}");
    }
    assert_eq!(accuracy(&[1, 0, 2], &[1, 0, 2], &[0, 1, 2]).unwrap(), 1.0);
}

#[test]
fn wideformer_training_reports_cluster_entropy_per_layer() {
    let g = graph(60, 3, 0.4, 8);
    let cfg = ModelConfig {
        hidden_dim: 8,
        layers: 2,
        heads: 2,
        attention: AttentionKind::wideformer(3),
        lr: 1e-2,
        epochs: 4,
        ..ModelConfig::default()
    };
    let trained = train(&g, &cfg).unwrap();
    for e in &trained.report.epochs {
        assert_eq!(e.attn_entropy.len(), 2);
        let ce = e.cluster_entropy.as_ref().unwrap();
        assert_eq!(ce.len(), 2);
        assert!(ce.iter().chain(&e.attn_entropy).all(|&h| (0.0..=1.0 + 1e-12).contains(&h)));
    }
    let ev = evaluate(&trained.model, &g, &g.test).unwrap();
    assert!((ev.accuracy - trained.report.test_acc).abs() < 1e-12);
}

#[test]
fn too_many_clusters_is_rejected() {
    let g = graph(12, 2, 0.4, 1);
    let cfg = ModelConfig {
        hidden_dim: 4,
        attention: AttentionKind::wideformer(13),
        epochs: 1,
        ..ModelConfig::default()
    };
    assert!(train(&g, &cfg).is_err());
}
