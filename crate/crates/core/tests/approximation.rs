//! Finite stand-in for the universal-approximation property of the KAN head:
//! a `d → u → 1` head over a fixed linear lift of `(a, b)` fits
//! `sin(3a) + 0.5·b²` on a 512-point grid.

use curvecast::dense::{BlockKind, FeedForward};
use curvecast::kan::SplineGrid;
use curvecast::linalg::Mat;
use curvecast::params::{seeded_rng, zeros_like, Adam, Parameterized};
use rand::Rng;

const D: usize = 64;
const U: usize = 64;

fn target(a: f64, b: f64) -> f64 {
    (3.0 * a).sin() + 0.5 * b * b
}

#[test]
fn kan_head_fits_smooth_surface() {
    let mut rng = seeded_rng(42);
    let (na, nb) = (32, 16);
    let mut points = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            let a = -1.0 + 2.0 * i as f64 / (na - 1) as f64;
            let b = -1.0 + 2.0 * j as f64 / (nb - 1) as f64;
            points.push((a, b));
        }
    }
    assert_eq!(points.len(), 512);

    // fixed lift (a, b) ↦ W·(a, b) with unit-norm rows
    let lift: Vec<(f64, f64)> = (0..D)
        .map(|_| {
            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (th.cos(), th.sin())
        })
        .collect();
    let mut x = Mat::zeros(points.len(), D);
    for (r, &(a, b)) in points.iter().enumerate() {
        for (c, &(wa, wb)) in lift.iter().enumerate() {
            x.set(r, c, wa * a + wb * b);
        }
    }
    let y: Vec<f64> = points.iter().map(|&(a, b)| target(a, b)).collect();

    let grid = SplineGrid::clamped_uniform(3, 8, -1.5, 1.5).unwrap();
    let mut head = FeedForward::init(BlockKind::Kan, &[D, U, 1], &grid, &mut rng);
    let n_params = head.tensors().iter().map(|t| t.data.len()).sum();
    let mut adam = Adam::new(3e-3, n_params);
    let max_err = |h: &FeedForward| {
        let (p, _) = h.forward_batch(&x);
        p.as_slice()
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let mut err = f64::INFINITY;
    for it in 0..4000 {
        let (p, cache) = head.forward_batch(&x);
        let n = y.len() as f64;
        let gy = Mat::from_vec(
            y.len(),
            1,
            p.as_slice()
                .iter()
                .zip(&y)
                .map(|(a, b)| 2.0 * (a - b) / n)
                .collect(),
        );
        let mut g = zeros_like(&head);
        head.backward_batch(&cache, &gy, &mut g);
        adam.step(&mut head, &g, None);
        if it % 250 == 249 {
            err = max_err(&head);
            if err < 0.05 {
                break;
            }
        }
    }
    eprintln!("max abs error {err:.4}");
    assert!(err < 0.05, "max abs error {err}");
}
