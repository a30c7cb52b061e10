//! Momentum-contrast encoder pair: a four-stage residual conv backbone with
//! per-stage feature exposure, a projection head producing unit vectors, a
//! FIFO negative-key queue, and the InfoNCE objective.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

use crate::autograd::{NodeId, Tape};
use crate::error::{FairdclError, Result};
use crate::nn::{he_normal, Real};
use crate::rng::derive_rng;

pub const PROJ_DIM: usize = 128;

/// Backbone size profile. Stage widths are what the per-stage
/// discriminators see; total stride is 32 in both profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    pub fn widths(self) -> [usize; 4] {
        match self {
            Profile::Desk => [32, 64, 128, 256],
            Profile::Full => [256, 512, 1024, 2048],
        }
    }

    pub fn stem_width(self) -> usize {
        match self {
            Profile::Desk => 16,
            Profile::Full => 64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(FairdclError::Config(format!(
                "unknown profile '{other}' (expected desk|full)"
            ))),
        }
    }
}

/// Parameter layout, in storage order:
/// stem (w, b); per stage: main 3x3 (w, b) + shortcut 1x1 (w, b);
/// projection: two affine layers (w, b each).
#[derive(Debug, Clone)]
pub struct Encoder<F: Real> {
    pub profile: Profile,
    pub params: Vec<ArrayD<F>>,
}

const TAG_ENCODER: u64 = 0x454e43;

impl<F: Real> Encoder<F> {
    pub fn new(profile: Profile, seed: u64) -> Self {
        let w = profile.widths();
        let stem = profile.stem_width();
        // (shape, fan_in) per tensor; biases start at zero
        let mut specs: Vec<(Vec<usize>, usize)> = vec![
            (vec![stem, 3, 3, 3], 3 * 9),
            (vec![stem], 0),
        ];
        let mut prev = stem;
        for &c in &w {
            specs.push((vec![c, prev, 3, 3], prev * 9));
            specs.push((vec![c], 0));
            specs.push((vec![c, prev, 1, 1], prev));
            specs.push((vec![c], 0));
            prev = c;
        }
        // affine weights are stored (in, out)
        let hidden = w[3];
        specs.push((vec![w[3], hidden], w[3]));
        specs.push((vec![hidden], 0));
        specs.push((vec![hidden, PROJ_DIM], hidden));
        specs.push((vec![PROJ_DIM], 0));

        let params = specs
            .iter()
            .enumerate()
            .map(|(i, (shape, fan_in))| {
                if *fan_in == 0 {
                    ArrayD::zeros(IxDyn(shape))
                } else {
                    let mut rng = derive_rng(seed, &[TAG_ENCODER, i as u64]);
                    he_normal(shape, *fan_in, &mut rng)
                }
            })
            .collect();
        Encoder { profile, params }
    }

    pub fn total_stride(&self) -> usize {
        32
    }

    /// FNV-1a over the raw bit patterns; used for frozen-weight contracts.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in &self.params {
            for v in p.iter() {
                h ^= Real::to_f64(*v).to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    fn check_input(&self, batch: &ArrayD<F>) -> Result<()> {
        if batch.ndim() != 4 || batch.shape()[1] != 3 {
            return Err(FairdclError::Shape(format!(
                "expected batch (N,3,H,W), got {:?}",
                batch.shape()
            )));
        }
        let (h, w) = (batch.shape()[2], batch.shape()[3]);
        let s = self.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(FairdclError::Shape(format!(
                "input {h}x{w} not divisible by total stride {s}"
            )));
        }
        Ok(())
    }

    /// Register all parameters on a tape. `requires_grad` controls whether
    /// the backward pass will produce gradients for them.
    pub fn params_on_tape(&self, tape: &mut Tape<F>, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Forward pass on a tape with already-registered parameter nodes.
    /// Returns the four stage maps (pre-projection) and the unit-norm
    /// projection q.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<F>,
        param_ids: &[NodeId],
        batch: &ArrayD<F>,
    ) -> Result<TapeFeatures> {
        self.check_input(batch)?;
        let x = tape.constant(batch.clone());
        let c = tape.conv2d(x, param_ids[0], param_ids[1], 2, 1);
        let mut cur = tape.relu(c);
        let mut stages = [0usize; 4];
        for i in 0..4 {
            let base = 2 + 4 * i;
            let main = tape.conv2d(cur, param_ids[base], param_ids[base + 1], 2, 1);
            let skip = tape.conv2d(cur, param_ids[base + 2], param_ids[base + 3], 2, 0);
            let sum = tape.add(main, skip);
            cur = tape.relu(sum);
            stages[i] = cur;
        }
        let pooled = tape.global_avg_pool(cur);
        let h1 = tape.linear(pooled, param_ids[18], param_ids[19]);
        let h1 = tape.relu(h1);
        let h2 = tape.linear(h1, param_ids[20], param_ids[21]);
        let q = tape.l2_normalize_rows(h2);
        Ok(TapeFeatures { stages, q })
    }

    /// Evaluation forward: no gradients, concrete arrays out.
    pub fn forward_features(&self, batch: &ArrayD<F>) -> Result<FeatureMapSet<F>> {
        let mut tape = Tape::new();
        let ids = self.params_on_tape(&mut tape, false);
        let feats = self.forward_on_tape(&mut tape, &ids, batch)?;
        let stages = feats.stages.map(|id| tape.value(id).clone());
        let qv = tape.value(feats.q);
        let n = qv.shape()[0];
        let q = Array2::from_shape_vec((n, PROJ_DIM), qv.iter().cloned().collect())
            .expect("projection output is (N, D)");
        Ok(FeatureMapSet { stages, q })
    }
}

/// Node handles for one forward pass.
pub struct TapeFeatures {
    pub stages: [NodeId; 4],
    pub q: NodeId,
}

/// Concrete per-stage maps (N × C_i × H_i × W_i) plus projection rows.
pub struct FeatureMapSet<F: Real> {
    pub stages: [ArrayD<F>; 4],
    pub q: Array2<F>,
}

/// key ← m·key + (1−m)·query, elementwise over the whole parameter list.
pub fn momentum_update<F: Real>(query: &Encoder<F>, key: &mut Encoder<F>, m: f64) -> Result<()> {
    if query.params.len() != key.params.len() {
        return Err(FairdclError::Shape("parameter count mismatch".into()));
    }
    let (mf, qf) = (F::of(m), F::of(1.0 - m));
    for (kq, kk) in query.params.iter().zip(key.params.iter_mut()) {
        if kq.shape() != kk.shape() {
            return Err(FairdclError::Shape(format!(
                "parameter shape mismatch: {:?} vs {:?}",
                kq.shape(),
                kk.shape()
            )));
        }
        azip_update(kk, kq, mf, qf);
    }
    Ok(())
}

fn azip_update<F: Real>(key: &mut ArrayD<F>, query: &ArrayD<F>, m: F, one_minus_m: F) {
    ndarray::Zip::from(key).and(query).for_each(|k, &q| {
        *k = m * *k + one_minus_m * q;
    });
}

/// FIFO buffer of negative keys (unit vectors), cold-started with random
/// unit vectors so the contrastive loss is well-defined from iteration 1.
#[derive(Debug, Clone)]
pub struct NegativeQueue<F: Real> {
    pub capacity: usize,
    pub dim: usize,
    keys: VecDeque<Array1<F>>,
}

impl<F: Real> NegativeQueue<F> {
    pub fn new_random<R: Rng>(capacity: usize, dim: usize, rng: &mut R) -> Self {
        let mut keys = VecDeque::with_capacity(capacity);
        for _ in 0..capacity {
            let mut v = Array1::<F>::zeros(dim);
            loop {
                for x in v.iter_mut() {
                    // Box-Muller; uniform-on-sphere after normalization
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    *x = F::of(g);
                }
                let norm = v.iter().map(|x| *x * *x).sum::<F>().to_f64().sqrt();
                if norm > 1e-6 {
                    v.mapv_inplace(|x| x / F::of(norm));
                    break;
                }
            }
            keys.push_back(v);
        }
        NegativeQueue { capacity, dim, keys }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Append rows of `batch`, evicting the oldest entries past capacity.
    pub fn enqueue(&mut self, batch: &Array2<F>) -> Result<()> {
        if batch.nrows() > 0 && batch.ncols() != self.dim {
            return Err(FairdclError::Shape(format!(
                "key dim {} does not match queue dim {}",
                batch.ncols(),
                self.dim
            )));
        }
        for row in batch.rows() {
            self.keys.push_back(row.to_owned());
            if self.keys.len() > self.capacity {
                self.keys.pop_front();
            }
        }
        Ok(())
    }

    /// Snapshot as a (len × dim) matrix, oldest first.
    pub fn as_matrix(&self) -> Array2<F> {
        let mut m = Array2::<F>::zeros((self.keys.len(), self.dim));
        for (i, k) in self.keys.iter().enumerate() {
            m.row_mut(i).assign(k);
        }
        m
    }
}

/// InfoNCE on a tape: −log[exp(q·k/τ) / (exp(q·k/τ) + Σ_j exp(q·k̂_j/τ))],
/// averaged over the batch. Gradients flow to q only (keys and queue are
/// momentum-encoder outputs, detached by contract).
pub fn info_nce_loss<F: Real>(
    tape: &mut Tape<F>,
    q: NodeId,
    keys: Array2<F>,
    queue: &NegativeQueue<F>,
    tau: f64,
) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(FairdclError::Config(format!("tau must be > 0, got {tau}")));
    }
    if queue.is_empty() {
        return Err(FairdclError::Config("negative queue is empty".into()));
    }
    Ok(tape.info_nce(q, keys, queue.as_matrix(), F::of(tau)))
}

/// Convert (H, W, 3) tiles into an (N, 3, H, W) batch.
pub fn tiles_to_batch<F: Real>(views: &[Array3<f32>]) -> ArrayD<F> {
    assert!(!views.is_empty(), "empty batch");
    let (h, w, _) = views[0].dim();
    let mut out = ArrayD::<F>::zeros(IxDyn(&[views.len(), 3, h, w]));
    for (n, v) in views.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[n, c, y, x]] = F::of(v[[y, x, c]] as f64);
                }
            }
        }
    }
    out
}
