//! Reconstruction autoencoder over flattened feature windows:
//! shared stack → projection → memory read → combine → private stack → decoder.

use serde::{Deserialize, Serialize};

use crate::dense::{Affine, BlockKind, FeedForward, FeedForwardCache};
use crate::error::{ensure_finite, Error, Result};
use crate::kan::SplineGrid;
use crate::linalg::{
    gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_backward_in_place, softmax_in_place, Mat,
};
use crate::params::{prefixed, Parameterized, SeededRng, TensorView};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamConfig {
    pub input_dim: usize,
    /// Widths of the shared stack's layer outputs.
    pub shared: Vec<usize>,
    pub embed: usize,
    pub slots: usize,
    pub combine: usize,
    pub private: Vec<usize>,
    /// Hidden widths of the decoder; its output is `input_dim`.
    pub decoder: Vec<usize>,
    pub block_kind: BlockKind,
    pub decoder_kind: BlockKind,
    pub memory: bool,
}

impl DamConfig {
    fn validate(&self) -> Result<()> {
        if self.shared.is_empty() || self.private.is_empty() {
            return Err(Error::Config(
                "shared and private stacks need at least one layer".into(),
            ));
        }
        if [self.input_dim, self.embed, self.slots, self.combine].contains(&0) {
            return Err(Error::Config(
                "reconstruction module widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dam {
    pub shared: FeedForward,
    pub proj: Affine,
    /// `slots × embed`; `None` when the memory is switched off.
    pub memory: Option<Mat>,
    pub combine: Affine,
    pub private: FeedForward,
    pub decoder: FeedForward,
}

#[derive(Debug, Clone)]
pub struct DamCache {
    shared: FeedForwardCache,
    shared_out: Mat,
    query: Mat,
    probs: Option<Mat>,
    combine_in: Mat,
    private: FeedForwardCache,
    decoder: FeedForwardCache,
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct DamOutput {
    pub recon: Mat,
    /// `‖x − x̂‖²` per row divided by the row width.
    pub row_losses: Vec<f64>,
    /// Mean of `row_losses`, i.e. the Frobenius residual over rows × width.
    pub loss: f64,
    pub query: Mat,
}

fn chain(first: usize, rest: &[usize]) -> Vec<usize> {
    let mut v = vec![first];
    v.extend_from_slice(rest);
    v
}

impl Dam {
    /// Seeded initialization. The memory starts at zero.
    pub fn init(cfg: &DamConfig, grid: &SplineGrid, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let shared = FeedForward::init(
            cfg.block_kind,
            &chain(cfg.input_dim, &cfg.shared),
            grid,
            rng,
        );
        let shared_w = *cfg.shared.last().unwrap();
        let proj = Affine::init(shared_w, cfg.embed, rng);
        let memory = cfg.memory.then(|| Mat::zeros(cfg.slots, cfg.embed));
        let combine_in = if cfg.memory { 2 * cfg.embed } else { cfg.embed };
        let combine = Affine::init(combine_in, cfg.combine, rng);
        let private =
            FeedForward::init(cfg.block_kind, &chain(cfg.combine, &cfg.private), grid, rng);
        let mut dec = chain(*cfg.private.last().unwrap(), &cfg.decoder);
        dec.push(cfg.input_dim);
        let decoder = FeedForward::init(cfg.decoder_kind, &dec, grid, rng);
        Ok(Dam {
            shared,
            proj,
            memory,
            combine,
            private,
            decoder,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.out_dim()
    }

    /// Projected shared features `Q` only (no memory, no decoding).
    pub fn embed(&self, x: &Mat) -> Mat {
        let (s, _) = self.shared.forward_batch(x);
        self.proj.forward_batch(&s)
    }

    /// Row-wise `softmax(Q·Mᵀ)·M`, with the weights.
    pub fn memory_read(memory: &Mat, query: &Mat) -> (Mat, Mat) {
        let (n, e) = query.shape();
        let s = memory.rows();
        let mut probs = Mat::zeros(n, s);
        gemm_nt_acc(
            query.as_slice(),
            n,
            e,
            memory.as_slice(),
            s,
            probs.as_mut_slice(),
        );
        for r in 0..n {
            softmax_in_place(probs.row_mut(r));
        }
        let read = probs.matmul(memory);
        (read, probs)
    }

    pub fn forward(&self, x: &Mat) -> Result<(DamOutput, DamCache)> {
        let (shared_out, shared_c) = self.shared.forward_batch(x);
        ensure_finite(shared_out.as_slice(), "shared stack")?;
        let query = self.proj.forward_batch(&shared_out);
        let (combine_in, probs) = match &self.memory {
            Some(m) => {
                let (read, p) = Dam::memory_read(m, &query);
                (query.hcat(&read), Some(p))
            }
            None => (query.clone(), None),
        };
        let mixed = self.combine.forward_batch(&combine_in);
        let (priv_out, private_c) = self.private.forward_batch(&mixed);
        ensure_finite(priv_out.as_slice(), "private stack")?;
        let (recon, decoder_c) = self.decoder.forward_batch(&priv_out);
        ensure_finite(recon.as_slice(), "decoder")?;
        if recon.shape() != x.shape() {
            return Err(Error::contract("decoder width differs from input width"));
        }
        let width = x.cols() as f64;
        let row_losses: Vec<f64> = (0..x.rows())
            .map(|r| {
                x.row(r)
                    .iter()
                    .zip(recon.row(r))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / width
            })
            .collect();
        let loss = row_losses.iter().sum::<f64>() / row_losses.len().max(1) as f64;
        Ok((
            DamOutput {
                recon,
                row_losses,
                loss,
                query: query.clone(),
            },
            DamCache {
                shared: shared_c,
                shared_out,
                query,
                probs,
                combine_in,
                private: private_c,
                decoder: decoder_c,
            },
        ))
    }

    /// Gradient of the mean reconstruction loss; accumulates into `grads`.
    pub fn backward(&self, x: &Mat, out: &DamOutput, cache: &DamCache, grads: &mut Dam) {
        let denom = (x.rows() * x.cols()) as f64;
        let mut g = Mat::zeros(x.rows(), x.cols());
        for ((gv, a), b) in g
            .as_mut_slice()
            .iter_mut()
            .zip(x.as_slice())
            .zip(out.recon.as_slice())
        {
            *gv = 2.0 * (b - a) / denom;
        }
        let g = self
            .decoder
            .backward_batch(&cache.decoder, &g, &mut grads.decoder);
        let g = self
            .private
            .backward_batch(&cache.private, &g, &mut grads.private);
        let dcomb = self
            .combine
            .backward_batch(&cache.combine_in, &g, &mut grads.combine);
        let e = self.embed_dim();
        let n = x.rows();
        let mut dq = Mat::zeros(n, e);
        for r in 0..n {
            dq.row_mut(r).copy_from_slice(&dcomb.row(r)[..e]);
        }
        if let (Some(m), Some(p), Some(gm)) = (&self.memory, &cache.probs, grads.memory.as_mut()) {
            let s = m.rows();
            let mut dread = Mat::zeros(n, e);
            for r in 0..n {
                dread.row_mut(r).copy_from_slice(&dcomb.row(r)[e..]);
            }
            // read = P·M
            gemm_tn_acc(p.as_slice(), n, s, dread.as_slice(), e, gm.as_mut_slice());
            let mut dp = Mat::zeros(n, s);
            gemm_nt_acc(dread.as_slice(), n, e, m.as_slice(), s, dp.as_mut_slice());
            for r in 0..n {
                softmax_backward_in_place(p.row(r), dp.row_mut(r));
            }
            // logits = Q·Mᵀ
            gemm_acc(dp.as_slice(), n, s, m.as_slice(), e, dq.as_mut_slice());
            gemm_tn_acc(
                dp.as_slice(),
                n,
                s,
                cache.query.as_slice(),
                e,
                gm.as_mut_slice(),
            );
        }
        let ds = self
            .proj
            .backward_batch(&cache.shared_out, &dq, &mut grads.proj);
        self.shared
            .backward_batch(&cache.shared, &ds, &mut grads.shared);
    }

    /// Forward then backward; returns the loss.
    pub fn loss_grad(&self, x: &Mat, grads: &mut Dam) -> Result<f64> {
        let (out, cache) = self.forward(x)?;
        self.backward(x, &out, &cache, grads);
        Ok(out.loss)
    }
}

impl Parameterized for Dam {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = prefixed("shared", self.shared.tensors());
        v.extend(prefixed("proj", self.proj.tensors()));
        if let Some(m) = &self.memory {
            v.push(TensorView::new(
                "memory",
                vec![m.rows(), m.cols()],
                m.as_slice(),
            ));
        }
        v.extend(prefixed("combine", self.combine.tensors()));
        v.extend(prefixed("private", self.private.tensors()));
        v.extend(prefixed("decoder", self.decoder.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.shared.tensors_mut();
        v.extend(self.proj.tensors_mut());
        if let Some(m) = &mut self.memory {
            v.push(m.as_mut_slice());
        }
        v.extend(self.combine.tensors_mut());
        v.extend(self.private.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v
    }
}
