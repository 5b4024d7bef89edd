//! Numerical self-checks: finite-difference gradients for every trainable
//! block, the spectral features against a direct DFT, B-spline partition of
//! unity and attention normalization.

use rand::Rng;
use serde::Serialize;

use crate::dam::{Dam, DamConfig};
use crate::dense::{BlockKind, FeedForward};
use crate::error::Result;
use crate::hla::{Hla, HlaConfig, Lstm, MultiHeadAttention, ResidualConv};
use crate::kan::{KanStack, SplineGrid};
use crate::linalg::Mat;
use crate::mdfe::SpectralPlan;
use crate::params::{derived_rng, grad_check_model, zeros_like, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst_tensor: Option<String>,
}

const STEP: f64 = 1e-5;

fn rand_mat(rng: &mut SeededRng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_vec(
        r,
        c,
        (0..r * c)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
}

fn doubled(y: &Mat) -> Mat {
    Mat::from_vec(
        y.rows(),
        y.cols(),
        y.as_slice().iter().map(|v| 2.0 * v).collect(),
    )
}

fn small_grid() -> Result<SplineGrid> {
    SplineGrid::clamped_uniform(3, 8, -3.0, 3.0)
}

/// Gradient checks for every trainable block on small random instances.
pub fn gradient_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = derived_rng(seed, "gradcheck");
    let grid = small_grid()?;
    let mut out = Vec::new();
    let mut push = |name: &str, rep: crate::params::GradCheckReport| {
        out.push(LayerCheck {
            name: name.to_string(),
            max_rel_error: rep.max_rel_error,
            checked: rep.checked,
            worst_tensor: rep.worst_name,
        })
    };

    let conv = ResidualConv::init(3, 2, 3, &mut rng);
    let x = rand_mat(&mut rng, 6, 2, 1.0);
    push(
        "residual_conv",
        grad_check_model(&conv, STEP, None, |m: &ResidualConv| {
            let (y, c) = m.forward(&x);
            let mut g = zeros_like(m);
            m.backward(&c, &doubled(&y), &mut g);
            (y.frobenius_sq(), g)
        })?,
    );

    let lstm = Lstm::init(3, 4, &mut rng);
    let x = rand_mat(&mut rng, 5, 3, 1.0);
    push(
        "lstm",
        grad_check_model(&lstm, STEP, None, |m: &Lstm| {
            let (y, c) = m.forward(&x);
            let mut g = zeros_like(m);
            m.backward(&c, &doubled(&y), &mut g);
            (y.frobenius_sq(), g)
        })?,
    );

    let att = MultiHeadAttention::init(4, 2, 0.3, &mut rng)?;
    let x = rand_mat(&mut rng, 4, 4, 1.0);
    push(
        "attention",
        grad_check_model(&att, STEP, None, |m: &MultiHeadAttention| {
            let mut drng = derived_rng(seed, "gradcheck-dropout");
            let (y, c) = m.forward(&x, Some(&mut drng));
            let mut g = zeros_like(m);
            m.backward(&c, &doubled(&y), &mut g);
            (y.frobenius_sq(), g)
        })?,
    );

    let kan = KanStack::init(&[3, 4, 2], &grid, &mut rng);
    let x = rand_mat(&mut rng, 3, 3, 2.5);
    push(
        "kan",
        grad_check_model(&kan, STEP, None, |s: &KanStack| {
            let (y, caches) = s.forward_batch(&x);
            let mut g = zeros_like(s);
            s.backward_batch(&caches, &doubled(&y), &mut g);
            (y.frobenius_sq(), g)
        })?,
    );

    let mlp = FeedForward::init(BlockKind::Mlp, &[3, 5, 2], &grid, &mut rng);
    push(
        "mlp",
        grad_check_model(&mlp, STEP, None, |m: &FeedForward| {
            let (y, c) = m.forward_batch(&x);
            let mut g = zeros_like(m);
            m.backward_batch(&c, &doubled(&y), &mut g);
            (y.frobenius_sq(), g)
        })?,
    );

    for kind in [BlockKind::Kan, BlockKind::Mlp] {
        let cfg = HlaConfig {
            feature_dim: 3,
            channels: 4,
            kernel: 3,
            hidden: 4,
            heads: 2,
            dropout: 0.1,
            head_units: 3,
            head_kind: kind,
            micro: true,
            medium: true,
            macro_attention: true,
        };
        let hla = Hla::init(&cfg, &grid, &mut rng)?;
        let xs = [rand_mat(&mut rng, 5, 3, 1.5), rand_mat(&mut rng, 5, 3, 1.5)];
        let batch: Vec<(&Mat, f64)> = vec![(&xs[0], 0.4), (&xs[1], -0.7)];
        let name = format!(
            "predictor_{}",
            if kind == BlockKind::Kan { "kan" } else { "mlp" }
        );
        push(
            &name,
            grad_check_model(&hla, STEP, None, |p: &Hla| {
                let mut g = zeros_like(p);
                let mut drng = derived_rng(seed, "gradcheck-dropout");
                let l = p.batch_loss_grad(&batch, 1e-2, Some(&mut drng), &mut g);
                (l, g)
            })?,
        );
    }

    for kind in [BlockKind::Kan, BlockKind::Mlp] {
        for memory in [true, false] {
            let cfg = DamConfig {
                input_dim: 6,
                shared: vec![5, 4],
                embed: 3,
                slots: 4,
                combine: 4,
                private: vec![4, 3],
                decoder: vec![5],
                block_kind: kind,
                decoder_kind: BlockKind::Mlp,
                memory,
            };
            let mut dam = Dam::init(&cfg, &grid, &mut rng)?;
            if let Some(m) = &mut dam.memory {
                *m = rand_mat(&mut rng, 4, 3, 1.0);
            }
            let x = rand_mat(&mut rng, 3, 6, 1.5);
            let name = format!(
                "adaptation_{}{}",
                if kind == BlockKind::Kan { "kan" } else { "mlp" },
                if memory { "_memory" } else { "" }
            );
            let mut failure = None;
            let rep = grad_check_model(&dam, STEP, None, |p: &Dam| {
                let mut g = zeros_like(p);
                let l = match p.loss_grad(&x, &mut g) {
                    Ok(l) => l,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                };
                (l, g)
            });
            if let Some(e) = failure {
                return Err(e);
            }
            push(&name, rep?);
        }
    }
    Ok(out)
}

/// `Re{(i·2πn/N)^k · Σ_t x_t e^{−2πi·nt/N}}` computed directly.
pub fn direct_frequency_features(values: &[f64], orders: usize) -> Mat {
    let n = values.len();
    let mut out = Mat::zeros(n, orders);
    for bin in 0..n {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in values.iter().enumerate() {
            let ang = -std::f64::consts::TAU * ((bin * t) % n) as f64 / n as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        let c = std::f64::consts::TAU * bin as f64 / n as f64;
        // multiply by (i·c)^k one order at a time
        let (mut zr, mut zi) = (re, im);
        for k in 0..orders {
            out.set(bin, k, zr);
            let (nr, ni) = (-c * zi, c * zr);
            zr = nr;
            zi = ni;
        }
    }
    out
}

/// Largest error of the FFT features against [`direct_frequency_features`],
/// relative to each window's largest feature magnitude.
pub fn spectral_fidelity(windows: usize, len: usize, orders: usize, seed: u64) -> f64 {
    let mut rng = derived_rng(seed, "spectral");
    let plan = SpectralPlan::new(len);
    let mut worst: f64 = 0.0;
    for _ in 0..windows {
        let vs: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let fast = plan.features(&vs, orders);
        let slow = direct_frequency_features(&vs, orders);
        let scale = slow
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    worst
}

/// Largest `|Σ_k B_k(x) − 1|` over uniformly sampled points of the domain.
pub fn partition_of_unity_error(grid: &SplineGrid, points: usize, seed: u64) -> f64 {
    let mut rng = derived_rng(seed, "partition");
    let (lo, hi) = grid.domain();
    (0..points)
        .map(|_| {
            let x = rng.random_range(lo..hi);
            (grid.eval(x).iter().sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest `|Σ_j A_ij − 1|` over random attention instances.
pub fn attention_row_error(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = derived_rng(seed, "attention-rows");
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let att = MultiHeadAttention::init(8, 4, 0.1, &mut rng)?;
        let steps = rng.random_range(1..20);
        let x = rand_mat(&mut rng, steps, 8, 3.0);
        for p in att.weights(&x) {
            for i in 0..p.rows() {
                worst = worst.max((p.row(i).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(worst)
}
