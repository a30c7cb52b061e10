//! Linear probing: freeze the pre-trained encoder, pool features from one
//! of its stages (or take the projection output), and train a single
//! affine classifier to predict the sensitive group. Probe accuracy
//! measures how much group information the representation retains.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::autograd::Tape;
use crate::data::ImageTile;
use crate::encoder::{tiles_to_batch, Encoder};
use crate::error::{FairdclError, Result};
use crate::nn::Adam;

/// Which representation the probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeStage {
    L1,
    L2,
    L3,
    L4,
    /// Projection head output (the contrastive embedding).
    Fc,
}

impl ProbeStage {
    pub const ALL: [ProbeStage; 5] = [
        ProbeStage::L1,
        ProbeStage::L2,
        ProbeStage::L3,
        ProbeStage::L4,
        ProbeStage::Fc,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeStage::L1 => "l1",
            ProbeStage::L2 => "l2",
            ProbeStage::L3 => "l3",
            ProbeStage::L4 => "l4",
            ProbeStage::Fc => "fc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(ProbeStage::L1),
            "l2" => Ok(ProbeStage::L2),
            "l3" => Ok(ProbeStage::L3),
            "l4" => Ok(ProbeStage::L4),
            "fc" => Ok(ProbeStage::Fc),
            other => Err(FairdclError::Config(format!(
                "unknown probe stage '{other}' (expected l1, l2, l3, l4, or fc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub stage: ProbeStage,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub k: usize,
}

/// Pooled feature vectors (N, dim) for the chosen stage. Stage maps are
/// global-average-pooled; `fc` takes the projection output directly.
pub fn extract_features(
    encoder: &Encoder<f32>,
    tiles: &[ImageTile],
    stage: ProbeStage,
) -> Result<Array2<f32>> {
    if tiles.is_empty() {
        return Err(FairdclError::Config("no tiles to extract features from".into()));
    }
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(16) {
        let views: Vec<_> = chunk.iter().map(|t| t.pixels.clone()).collect();
        let feats = encoder.forward_features(&tiles_to_batch::<f32>(&views))?;
        match stage {
            ProbeStage::Fc => {
                for row in feats.q.rows() {
                    rows.push(row.to_vec());
                }
            }
            _ => {
                let idx = match stage {
                    ProbeStage::L1 => 0,
                    ProbeStage::L2 => 1,
                    ProbeStage::L3 => 2,
                    ProbeStage::L4 => 3,
                    ProbeStage::Fc => unreachable!(),
                };
                let map = &feats.stages[idx];
                let (n, c, h, w) = (
                    map.shape()[0],
                    map.shape()[1],
                    map.shape()[2],
                    map.shape()[3],
                );
                for s in 0..n {
                    let mut row = vec![0f32; c];
                    for (ch, slot) in row.iter_mut().enumerate() {
                        let mut sum = 0f32;
                        for y in 0..h {
                            for x in 0..w {
                                sum += map[[s, ch, y, x]];
                            }
                        }
                        *slot = sum / (h * w) as f32;
                    }
                    rows.push(row);
                }
            }
        }
    }
    let dim = rows[0].len();
    Ok(Array2::from_shape_vec(
        (rows.len(), dim),
        rows.into_iter().flatten().collect(),
    )
    .expect("feature rows have equal width"))
}

fn accuracy(logits: &Array2<f32>, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (row, &t) in logits.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        let mut best_v = row[0];
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Train one affine layer (zero-initialised, so epoch 0 sits exactly at
/// chance) with full-batch Adam and report train/test accuracy.
pub fn probe_features(
    train: &Array2<f32>,
    train_labels: &[usize],
    test: &Array2<f32>,
    test_labels: &[usize],
    k: usize,
    stage: ProbeStage,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if k < 2 {
        return Err(FairdclError::Config("probe needs k >= 2 groups".into()));
    }
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() {
        return Err(FairdclError::Shape("feature/label count mismatch".into()));
    }
    if train_labels.iter().chain(test_labels).any(|&g| g >= k) {
        return Err(FairdclError::Config("group label out of range".into()));
    }
    let dim = train.ncols();
    let mut w = ArrayD::<f32>::zeros(IxDyn(&[dim, k]));
    let mut b = ArrayD::<f32>::zeros(IxDyn(&[k]));
    let mut opt = Adam::<f32>::new(cfg.lr, 0.0, &[&[dim, k], &[k]]);
    let train_dyn = train.clone().into_dyn();
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.constant(train_dyn.clone());
        let wid = tape.leaf(w.clone(), true);
        let bid = tape.leaf(b.clone(), true);
        let logits = tape.linear(x, wid, bid);
        let loss = tape.cross_entropy_rows(logits, train_labels.to_vec());
        let mut grads = tape.backward(loss);
        let gw = grads.take(wid);
        let gb = grads.take(bid);
        opt.step(&mut [&mut w, &mut b], &[gw, gb]);
    }
    let w2 = w
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("weight is 2d")
        .to_owned();
    let b1 = b
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("bias is 1d")
        .to_owned();
    let score = |x: &Array2<f32>| x.dot(&w2) + &b1;
    Ok(ProbeResult {
        stage,
        train_accuracy: accuracy(&score(train), train_labels),
        test_accuracy: accuracy(&score(test), test_labels),
        k,
    })
}

/// End-to-end probe: extract features for the given tiles and fit the
/// affine classifier against their group labels.
pub fn linear_probe(
    encoder: &Encoder<f32>,
    train_tiles: &[ImageTile],
    test_tiles: &[ImageTile],
    k: usize,
    stage: ProbeStage,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_tiles.is_empty() || test_tiles.is_empty() {
        return Err(FairdclError::Config("probe splits must be non-empty".into()));
    }
    let ft = extract_features(encoder, train_tiles, stage)?;
    let fe = extract_features(encoder, test_tiles, stage)?;
    let lt: Vec<usize> = train_tiles.iter().map(|t| t.group).collect();
    let le: Vec<usize> = test_tiles.iter().map(|t| t.group).collect();
    probe_features(&ft, &lt, &fe, &le, k, stage, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::encoder::Profile;
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn stage_parse_round_trip() {
        for s in ProbeStage::ALL {
            assert_eq!(ProbeStage::parse(s.as_str()).unwrap(), s);
        }
        assert!(ProbeStage::parse("l5").is_err());
    }

    #[test]
    fn feature_widths_match_desk_profile() {
        let enc = Encoder::<f32>::new(Profile::Desk, 0);
        let tiles = generate_synthetic(&SyntheticSpec {
            num_tiles: 4,
            ..Default::default()
        })
        .unwrap()
        .tiles;
        for (stage, want) in [
            (ProbeStage::L1, 32),
            (ProbeStage::L2, 64),
            (ProbeStage::L3, 128),
            (ProbeStage::L4, 256),
            (ProbeStage::Fc, 128),
        ] {
            let f = extract_features(&enc, &tiles, stage).unwrap();
            assert_eq!(f.dim(), (4, want));
        }
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        // one-hot-ish features: class c has a 5.0 in coordinate c
        let k = 3;
        let n = 60;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut x = Array2::<f32>::zeros((n, 8));
        let mut rng = derive_rng(0, &[1]);
        for (i, &g) in labels.iter().enumerate() {
            x[[i, g]] = 5.0;
            for j in 3..8 {
                x[[i, j]] = rng.gen_range(-0.1..0.1);
            }
        }
        let cfg = ProbeConfig {
            epochs: 300,
            lr: 1e-1,
        };
        let r = probe_features(&x, &labels, &x, &labels, k, ProbeStage::L1, &cfg).unwrap();
        assert_eq!(r.test_accuracy, 1.0);
        assert_eq!(r.train_accuracy, 1.0);
    }

    #[test]
    fn label_independent_features_stay_near_chance() {
        let k = 2;
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut rng = derive_rng(3, &[7]);
        let train =
            Array2::<f32>::from_shape_fn((n, 16), |_| rng.gen_range(-1.0f32..1.0));
        let test =
            Array2::<f32>::from_shape_fn((n, 16), |_| rng.gen_range(-1.0f32..1.0));
        let r = probe_features(
            &train,
            &labels,
            &test,
            &labels,
            k,
            ProbeStage::L4,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert!(
            (r.test_accuracy - 0.5).abs() < 0.15,
            "test accuracy {} far from chance",
            r.test_accuracy
        );
    }

    #[test]
    fn probe_is_deterministic() {
        let enc = Encoder::<f32>::new(Profile::Desk, 2);
        let tiles = generate_synthetic(&SyntheticSpec {
            num_tiles: 16,
            ..Default::default()
        })
        .unwrap()
        .tiles;
        let cfg = ProbeConfig {
            epochs: 10,
            ..Default::default()
        };
        let run = || {
            linear_probe(&enc, &tiles[..12], &tiles[12..], 2, ProbeStage::L2, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.test_accuracy, b.test_accuracy);
        assert_eq!(a.train_accuracy, b.train_accuracy);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Array2::<f32>::zeros((4, 2));
        let labels = vec![0, 1, 0, 1];
        assert!(probe_features(&x, &labels, &x, &labels, 1, ProbeStage::L1, &ProbeConfig::default()).is_err());
        assert!(probe_features(&x, &labels[..3], &x, &labels, 2, ProbeStage::L1, &ProbeConfig::default()).is_err());
        assert!(probe_features(&x, &[0, 1, 2, 1], &x, &labels, 2, ProbeStage::L1, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn biased_pixels_are_linearly_decodable_from_a_random_encoder() {
        // style-group correlation at rho=1 shows up even through random
        // convolutions, which is exactly what the probe is meant to detect
        let out = generate_synthetic(&SyntheticSpec {
            num_tiles: 96,
            rho: 1.0,
            ..Default::default()
        })
        .unwrap();
        let enc = Encoder::<f32>::new(Profile::Desk, 4);
        let cfg = ProbeConfig {
            epochs: 200,
            lr: 1e-2,
        };
        let r = linear_probe(&enc, &out.tiles[..72], &out.tiles[72..], 2, ProbeStage::L1, &cfg)
            .unwrap();
        assert!(
            r.test_accuracy > 0.8,
            "expected strong decodability, got {}",
            r.test_accuracy
        );
    }
}
