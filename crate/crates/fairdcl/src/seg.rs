//! Downstream semantic segmentation: a UNet-style decoder with skip
//! connections over the frozen pre-trained encoder, trained with plain
//! SGD+momentum, evaluated on the test split at fixed iteration
//! checkpoints.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::autograd::{NodeId, Tape};
use crate::data::{augment_finetune, ImageTile};
use crate::encoder::{tiles_to_batch, Encoder};
use crate::error::{FairdclError, Result};
use crate::metrics::FairnessReport;
use crate::nn::{he_normal, SgdMomentum};
use crate::rng::derive_rng;
use crate::train::load_encoder;

#[derive(Debug, Clone, Copy)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            iterations: 5000,
            batch_size: 16,
            eval_every: 1000,
            lr: 1e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Frozen encoder + trainable decoder. Decoder widths mirror the encoder
/// stages halved on the way up; logits come out at input resolution.
pub struct SegNet {
    pub encoder: Encoder<f32>,
    pub decoder_params: Vec<ArrayD<f32>>,
    pub num_classes: usize,
    /// Per-stage (scale, shift) standardizing the frozen skip features;
    /// fitted on the fine-tune split so decoder training is insensitive to
    /// the encoder's feature scale.
    pub feat_norm: Option<[(Vec<f32>, Vec<f32>); 4]>,
}

const TAG_DEC: u64 = 0x444543;

/// Decoder parameter layout: blocks of conv3x3 (w, b). Block i consumes
/// up2(previous) concatenated with the matching encoder skip.
fn decoder_specs(widths: [usize; 4], stem: usize, num_classes: usize) -> Vec<(Vec<usize>, usize)> {
    let [c1, c2, c3, c4] = widths;
    let mut specs = Vec::new();
    let mut push = |co: usize, ci: usize, k: usize| {
        specs.push((vec![co, ci, k, k], ci * k * k));
        specs.push((vec![co], 0));
    };
    push(c3, c4 + c3, 3); // up(e4) ‖ e3
    push(c2, c3 + c2, 3); // ‖ e2
    push(c1, c2 + c1, 3); // ‖ e1
    push(stem, c1, 3); // up to stem resolution
    push(stem, stem, 3); // up to input resolution
    push(num_classes, stem, 1); // logits head
    specs
}

impl SegNet {
    pub fn new(encoder: Encoder<f32>, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(FairdclError::Config("num_classes must be >= 2".into()));
        }
        let specs = decoder_specs(
            encoder.profile.widths(),
            encoder.profile.stem_width(),
            num_classes,
        );
        let decoder_params = specs
            .iter()
            .enumerate()
            .map(|(i, (shape, fan_in))| {
                if *fan_in == 0 {
                    ArrayD::zeros(IxDyn(shape))
                } else {
                    let mut rng = derive_rng(seed, &[TAG_DEC, i as u64]);
                    he_normal::<f32, _>(shape, *fan_in, &mut rng)
                }
            })
            .collect();
        Ok(SegNet {
            encoder,
            decoder_params,
            num_classes,
            feat_norm: None,
        })
    }

    /// Fit per-channel standardization of the frozen encoder's stage
    /// features over `tiles` (deterministic; no augmentation).
    pub fn fit_feature_norm(&mut self, tiles: &[ImageTile]) -> Result<()> {
        if tiles.is_empty() {
            return Err(FairdclError::Config("feature-norm split is empty".into()));
        }
        let widths = self.encoder.profile.widths();
        let mut sum: Vec<Vec<f64>> = widths.iter().map(|&c| vec![0.0; c]).collect();
        let mut sumsq = sum.clone();
        let mut count = [0usize; 4];
        for chunk in tiles.chunks(16) {
            let views: Vec<_> = chunk.iter().map(|t| t.pixels.clone()).collect();
            let feats = self.encoder.forward_features(&tiles_to_batch::<f32>(&views))?;
            for (si, f) in feats.stages.iter().enumerate() {
                let (n, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
                count[si] += n * h * w;
                for cc in 0..c {
                    let lane = f.index_axis(ndarray::Axis(1), cc);
                    let mut s = 0.0f64;
                    let mut s2 = 0.0f64;
                    for &v in lane.iter() {
                        s += v as f64;
                        s2 += (v as f64) * (v as f64);
                    }
                    sum[si][cc] += s;
                    sumsq[si][cc] += s2;
                }
            }
        }
        let norm = std::array::from_fn(|si| {
            let n = count[si] as f64;
            let stds: Vec<f64> = (0..widths[si])
                .map(|cc| {
                    let mean = sum[si][cc] / n;
                    (sumsq[si][cc] / n - mean * mean).max(0.0).sqrt()
                })
                .collect();
            // floor per-channel stds so low-variance channels cannot blow up
            // on inputs outside the fit set
            let floor = (stds.iter().sum::<f64>() / stds.len() as f64) * 0.1 + 1e-5;
            let (mut scale, mut shift) = (Vec::new(), Vec::new());
            for cc in 0..widths[si] {
                let mean = sum[si][cc] / n;
                let inv = 1.0 / stds[cc].max(floor);
                scale.push(inv as f32);
                shift.push((-mean * inv) as f32);
            }
            (scale, shift)
        });
        self.feat_norm = Some(norm);
        Ok(())
    }

    /// Dense class logits (N, num_classes, H, W). Encoder parameters are
    /// registered without gradients: frozen by construction.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape<f32>,
        batch: &ArrayD<f32>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let enc_ids = self.encoder.params_on_tape(tape, false);
        let feats = self.encoder.forward_on_tape(tape, &enc_ids, batch)?;
        let dec_ids: Vec<NodeId> = self
            .decoder_params
            .iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect();
        let [mut e1, mut e2, mut e3, mut e4] = feats.stages;
        if let Some(norm) = &self.feat_norm {
            for (e, (scale, shift)) in [&mut e1, &mut e2, &mut e3, &mut e4]
                .into_iter()
                .zip(norm.iter())
            {
                *e = tape.channel_affine(*e, scale.clone(), shift.clone());
            }
        }
        let block = |tape: &mut Tape<f32>, x: NodeId, skip: Option<NodeId>, i: usize| {
            let up = tape.upsample_nearest2(x);
            let inp = match skip {
                Some(s) => tape.concat_channels(&[up, s]),
                None => up,
            };
            let pad = if self.decoder_params[2 * i].shape()[2] == 3 { 1 } else { 0 };
            let c = tape.conv2d(inp, dec_ids[2 * i], dec_ids[2 * i + 1], 1, pad);
            tape.relu(c)
        };
        let d3 = block(tape, e4, Some(e3), 0);
        let d2 = block(tape, d3, Some(e2), 1);
        let d1 = block(tape, d2, Some(e1), 2);
        let d0 = block(tape, d1, None, 3);
        let dd = block(tape, d0, None, 4);
        let logits = tape.conv2d(dd, dec_ids[10], dec_ids[11], 1, 0);
        Ok((logits, dec_ids))
    }

    /// Evaluation logits without gradient bookkeeping.
    pub fn logits(&self, batch: &ArrayD<f32>) -> Result<ArrayD<f32>> {
        let mut tape = Tape::new();
        let (node, _) = self.logits_on_tape(&mut tape, batch)?;
        Ok(tape.value(node).clone())
    }
}

/// Load the pre-trained encoder from a checkpoint and attach a fresh
/// decoder.
pub fn build_segmentation_network(
    checkpoint: &std::path::Path,
    num_classes: usize,
    seed: u64,
) -> Result<SegNet> {
    let (encoder, _, _) = load_encoder(checkpoint)?;
    SegNet::new(encoder, num_classes, seed)
}

/// Per-pixel argmax over class logits, ties broken toward the lowest class
/// index. Input (N, C, H, W), output one mask per sample.
pub fn argmax_masks(logits: &ArrayD<f32>) -> Vec<Array2<u8>> {
    let (n, c, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut mask = Array2::<u8>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = logits[[s, 0, y, x]];
                for cls in 1..c {
                    let v = logits[[s, cls, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = cls;
                    }
                }
                mask[[y, x]] = best as u8;
            }
        }
        out.push(mask);
    }
    out
}

/// Predicted class mask for a single tile.
pub fn predict_mask(net: &SegNet, tile: &ImageTile) -> Result<Array2<u8>> {
    let batch = tiles_to_batch::<f32>(std::slice::from_ref(&tile.pixels));
    let logits = net.logits(&batch)?;
    Ok(argmax_masks(&logits).pop().expect("one mask"))
}

/// Fairness report over the full test split.
pub fn evaluate(net: &SegNet, test_tiles: &[ImageTile], k: usize) -> Result<FairnessReport> {
    let mut pairs = Vec::with_capacity(test_tiles.len());
    for chunk in test_tiles.chunks(16) {
        let views: Vec<_> = chunk.iter().map(|t| t.pixels.clone()).collect();
        let logits = net.logits(&tiles_to_batch::<f32>(&views))?;
        for (pred, tile) in argmax_masks(&logits).into_iter().zip(chunk) {
            let gt = tile
                .mask
                .as_ref()
                .ok_or_else(|| FairdclError::Metric(format!("tile {} has no mask", tile.id)))?;
            pairs.push((pred, gt.clone(), tile.group));
        }
    }
    FairnessReport::from_mask_pairs(&pairs, k, net.num_classes)
}

const TAG_FT_BATCH: u64 = 0x4654;
const TAG_FT_AUG: u64 = 0x4641;

/// Train the decoder with pixel cross-entropy; evaluate on the test split
/// every `eval_every` iterations. Returns the evaluation schedule as
/// (iteration, report) pairs.
pub fn finetune(
    net: &mut SegNet,
    train_tiles: &[ImageTile],
    test_tiles: &[ImageTile],
    k: usize,
    cfg: &FinetuneConfig,
) -> Result<Vec<(usize, FairnessReport)>> {
    if train_tiles.is_empty() {
        return Err(FairdclError::Config("finetune split is empty".into()));
    }
    if train_tiles.iter().any(|t| t.mask.is_none()) {
        return Err(FairdclError::Config("finetune split has tiles without masks".into()));
    }
    if cfg.iterations == 0 || cfg.eval_every == 0 {
        return Err(FairdclError::Config("iterations and eval_every must be >= 1".into()));
    }
    if net.feat_norm.is_none() {
        net.fit_feature_norm(train_tiles)?;
    }
    let shapes: Vec<&[usize]> = net.decoder_params.iter().map(|p| p.shape()).collect();
    let mut opt = SgdMomentum::<f32>::new(cfg.lr, cfg.momentum, &shapes);
    let mut reports = Vec::new();
    for it in 0..cfg.iterations {
        let mut rng = derive_rng(cfg.seed, &[TAG_FT_BATCH, it as u64]);
        let mut views = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for slot in 0..cfg.batch_size {
            let idx = rand::Rng::gen_range(&mut rng, 0..train_tiles.len());
            let mut arng = derive_rng(cfg.seed, &[TAG_FT_AUG, it as u64, slot as u64]);
            let aug = augment_finetune(&train_tiles[idx], &mut arng)?;
            views.push(aug.pixels);
            targets.push(aug.mask.expect("augmented tile keeps mask"));
        }
        let batch = tiles_to_batch::<f32>(&views);
        let (h, w) = targets[0].dim();
        let mut target = ndarray::Array3::<usize>::zeros((targets.len(), h, w));
        for (s, m) in targets.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    target[[s, y, x]] = m[[y, x]] as usize;
                }
            }
        }
        let mut tape = Tape::new();
        let (logits, dec_ids) = net.logits_on_tape(&mut tape, &batch)?;
        let loss = tape.cross_entropy_spatial(logits, target);
        let mut grads = tape.backward(loss);
        let gvec: Vec<ArrayD<f32>> = dec_ids.iter().map(|&id| grads.take(id)).collect();
        let mut refs: Vec<&mut ArrayD<f32>> = net.decoder_params.iter_mut().collect();
        opt.step(&mut refs, &gvec);
        drop(refs);

        if (it + 1) % cfg.eval_every == 0 {
            reports.push((it + 1, evaluate(net, test_tiles, k)?));
        }
    }
    Ok(reports)
}

/// One training iteration's loss without updating anything; used by
/// overfit sanity checks.
pub fn loss_on(net: &SegNet, tiles: &[ImageTile]) -> Result<f64> {
    let views: Vec<_> = tiles.iter().map(|t| t.pixels.clone()).collect();
    let batch = tiles_to_batch::<f32>(&views);
    let (h, w) = tiles[0].mask.as_ref().unwrap().dim();
    let mut target = ndarray::Array3::<usize>::zeros((tiles.len(), h, w));
    for (s, t) in tiles.iter().enumerate() {
        let m = t.mask.as_ref().unwrap();
        for y in 0..h {
            for x in 0..w {
                target[[s, y, x]] = m[[y, x]] as usize;
            }
        }
    }
    let mut tape = Tape::new();
    let (logits, _) = net.logits_on_tape(&mut tape, &batch)?;
    let loss = tape.cross_entropy_spatial(logits, target);
    Ok(tape.scalar(loss) as f64)
}

/// `iter,group,class,iou` rows (blank iou for undefined entries).
pub fn write_eval_csv(reports: &[(usize, FairnessReport)], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| FairdclError::Io(std::io::Error::other(e)))?;
    w.write_record(["iter", "group", "class", "iou"])
        .map_err(|e| FairdclError::Io(std::io::Error::other(e)))?;
    for (iter, rep) in reports {
        for (g, row) in rep.per_group_class_iou.iter().enumerate() {
            for (c, e) in row.iter().enumerate() {
                w.write_record([
                    iter.to_string(),
                    g.to_string(),
                    c.to_string(),
                    e.iou.map(|v| format!("{v:.9}")).unwrap_or_default(),
                ])
                .map_err(|e| FairdclError::Io(std::io::Error::other(e)))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `iter,diff,wst,acc` aggregate rows.
pub fn write_agg_csv(reports: &[(usize, FairnessReport)], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| FairdclError::Io(std::io::Error::other(e)))?;
    w.write_record(["iter", "diff", "wst", "acc"])
        .map_err(|e| FairdclError::Io(std::io::Error::other(e)))?;
    for (iter, rep) in reports {
        w.write_record([
            iter.to_string(),
            format!("{:.9}", rep.diff),
            format!("{:.9}", rep.wst),
            format!("{:.9}", rep.acc),
        ])
        .map_err(|e| FairdclError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
