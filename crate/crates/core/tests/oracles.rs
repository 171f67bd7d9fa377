use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use toporel::geometry::{batch_stats, robust_relative_transform, AnchorSet, LatentBatch};
use toporel::linalg::Matrix;
use toporel::topology::{
    connected_components_at, death_times, densification_loss, generalized_loss, pairwise_distances, LifespanWeight,
};
use toporel::verify::{prim_total_length, sweep_death_times};

fn straight_line_robust(z: &[f64], anchors: &[Vec<f64>], batch: &[Vec<f64>]) -> Vec<f64> {
    let m = z.len();
    let n = batch.len() as f64;
    let mut mean = vec![0.0; m];
    let mut std = vec![0.0; m];
    for j in 0..m {
        for row in batch {
            mean[j] += row[j];
        }
        mean[j] /= n;
        for row in batch {
            std[j] += (row[j] - mean[j]).powi(2);
        }
        std[j] = (std[j] / n).sqrt();
    }
    let norm = |v: &[f64]| -> Vec<f64> { (0..m).map(|j| (v[j] - mean[j]) / std[j]).collect() };
    let u = norm(z);
    anchors
        .iter()
        .map(|a| {
            let a = norm(a);
            let dot: f64 = u.iter().zip(&a).map(|(x, y)| x * y).sum();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (nu * na)
        })
        .collect()
}

#[test]
fn robust_transform_matches_straight_line_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (m, k) = (8, 4);
    let batch = Matrix::random_normal(32, m, &mut rng);
    let anchors = Matrix::random_normal(k, m, &mut rng);
    let z = Matrix::random_normal(1, m, &mut rng);
    let stats = batch_stats(&LatentBatch::new(batch.clone()).unwrap()).unwrap();
    let ours = robust_relative_transform(z.row(0), &AnchorSet::with_sequential_ids(anchors.clone()).unwrap(), &stats).unwrap();
    let rows = |x: &Matrix| (0..x.rows()).map(|r| x.row(r).to_vec()).collect::<Vec<_>>();
    let reference = straight_line_robust(z.row(0), &rows(&anchors), &rows(&batch));
    assert_eq!(ours.len(), k);
    for (a, b) in ours.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
}

#[test]
fn distances_match_an_independent_routine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = Matrix::random_normal(10, 3, &mut rng);
    let d = pairwise_distances(&LatentBatch::new(p.clone()).unwrap());
    for i in 0..10 {
        for j in 0..10 {
            let mut s = 0.0;
            for c in 0..3 {
                s += (p[(i, c)] - p[(j, c)]).powi(2);
            }
            assert!((d[(i, j)] - s.sqrt()).abs() <= 1e-14);
        }
    }
}

#[test]
fn two_class_loss_from_sweep_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let classes = [Matrix::random_normal(7, 3, &mut rng), Matrix::random_normal(5, 3, &mut rng)];
    let beta = 0.8;
    let by_hand: f64 = classes
        .iter()
        .flat_map(sweep_death_times)
        .map(|d| (d - beta).abs())
        .sum();
    let batches: Vec<LatentBatch> = classes.iter().map(|c| LatentBatch::new(c.clone()).unwrap()).collect();
    assert!((densification_loss(&batches, beta).unwrap() - by_hand).abs() <= 1e-12);
}

#[test]
fn length_weight_reduces_to_plain_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let batches = vec![
            LatentBatch::new(Matrix::random_normal(6, 2, &mut rng)).unwrap(),
            LatentBatch::new(Matrix::random_normal(4, 2, &mut rng)).unwrap(),
        ];
        let a = densification_loss(&batches, 1.1).unwrap();
        let b = generalized_loss(&batches, 1.1, &LifespanWeight::Length).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

fn points(max_n: usize, max_m: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_n, 1..=max_m).prop_flat_map(|(n, m)| {
        prop::collection::vec(-5.0f64..5.0, n * m).prop_map(move |v| Matrix::from_vec(n, m, v).unwrap())
    })
}

proptest! {
    #[test]
    fn death_times_equal_sweep_oracle(p in points(30, 8)) {
        let mut ours = death_times(&LatentBatch::new(p.clone()).unwrap()).unwrap().deaths().to_vec();
        ours.sort_by(f64::total_cmp);
        let oracle = sweep_death_times(&p);
        prop_assert_eq!(ours.len(), oracle.len());
        for (a, b) in ours.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        let total: f64 = oracle.iter().sum();
        prop_assert!((total - prim_total_length(&p)).abs() <= 1e-9);
    }

    #[test]
    fn components_count_matches_deaths_below_epsilon(p in points(20, 4), eps in 0.01f64..8.0) {
        let batch = LatentBatch::new(p.clone()).unwrap();
        let comps = connected_components_at(&batch, eps).unwrap();
        let merged = sweep_death_times(&p).iter().filter(|&&d| d < eps).count();
        prop_assert_eq!(comps.len(), p.rows() - merged);
    }
}
