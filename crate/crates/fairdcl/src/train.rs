//! Pre-training orchestration: per iteration the query encoder runs
//! forward, the per-stage measurement discriminators take B optimization
//! rounds on detached features, the encoder minimizes its variant
//! objective, and the momentum encoder + negative queue are updated.
//! All variants (including the baseline) train the measurement
//! discriminators so bias traces stay comparable.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{augment_pretrain, ColorJitterConfig, DatasetManifest, ImageTile, Split};
use crate::encoder::{
    info_nce_loss, momentum_update, tiles_to_batch, Encoder, NegativeQueue, Profile, PROJ_DIM,
};
use crate::error::{FairdclError, Result};
use crate::mi::{
    build_attribute_maps, mi_jsd_on_tape, train_discriminators, DiscBundle, MiEstimate, PairMode,
};
use crate::nn::{he_normal, Adam};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Fairdcl,
    GlobalOnly,
    Gr,
    Di,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fairdcl => "fairdcl",
            Variant::GlobalOnly => "global_only",
            Variant::Gr => "gr",
            Variant::Di => "di",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "fairdcl" => Ok(Variant::Fairdcl),
            "global_only" => Ok(Variant::GlobalOnly),
            "gr" => Ok(Variant::Gr),
            "di" => Ok(Variant::Di),
            other => Err(FairdclError::Config(format!(
                "unknown variant '{other}' (expected one of baseline,fairdcl,global_only,gr,di)"
            ))),
        }
    }
}

fn d_iterations() -> usize {
    7000
}
fn d_batch() -> usize {
    32
}
fn d_b() -> usize {
    20
}
fn d_alpha() -> f64 {
    0.5
}
fn d_lr() -> f64 {
    1e-3
}
fn d_wd() -> f64 {
    1e-4
}
fn d_tau() -> f64 {
    0.2
}
fn d_m() -> f64 {
    0.999
}
fn d_jitter() -> f64 {
    1.0
}

fn d_lambda() -> f64 {
    1.0
}
fn d_profile() -> Profile {
    Profile::Desk
}
fn d_variant() -> Variant {
    Variant::Baseline
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_variant")]
    pub variant: Variant,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// discriminator rounds per iteration
    #[serde(default = "d_b")]
    pub b_rounds: usize,
    /// fairness strength on the MI terms in the encoder objective
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    /// learning rate for the measurement discriminators (defaults to `lr`)
    #[serde(default)]
    pub disc_lr: Option<f64>,
    /// scale on the color-jitter augmentation strength in [0, 1]
    #[serde(default = "d_jitter")]
    pub color_jitter: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// contrastive temperature
    #[serde(default = "d_tau")]
    pub tau: f64,
    /// momentum-encoder coefficient
    #[serde(default = "d_m")]
    pub momentum: f64,
    /// gradient-reversal strength (gr variant only)
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_profile")]
    pub profile: Profile,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(FairdclError::Config("alpha must be >= 0".into()));
        }
        if self.b_rounds == 0 {
            return Err(FairdclError::Config("B must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(FairdclError::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(FairdclError::Config("batch_size must be >= 2".into()));
        }
        if self.tau <= 0.0 {
            return Err(FairdclError::Config("tau must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(FairdclError::Config("momentum must be in [0, 1]".into()));
        }
        if let Some(dlr) = self.disc_lr {
            if dlr <= 0.0 {
                return Err(FairdclError::Config("disc_lr must be > 0".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return Err(FairdclError::Config("color_jitter must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One recorded iteration.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub iter: usize,
    pub epoch: usize,
    pub mi: MiEstimate,
    pub l_con: f64,
}

/// Bias-accumulation trace: per-iteration MI estimates and contrastive
/// loss, grouped into epochs of `iters_per_epoch`.
#[derive(Debug, Clone)]
pub struct BiasTrace {
    pub rows: Vec<TraceRow>,
    pub iters_per_epoch: usize,
}

impl BiasTrace {
    pub fn new(iters_per_epoch: usize) -> Self {
        BiasTrace {
            rows: Vec::new(),
            iters_per_epoch: iters_per_epoch.max(1),
        }
    }

    pub fn push(&mut self, iter: usize, mi: MiEstimate, l_con: f64) {
        let epoch = iter / self.iters_per_epoch;
        self.rows.push(TraceRow {
            iter,
            epoch,
            mi,
            l_con,
        });
    }

    pub fn num_epochs(&self) -> usize {
        self.rows.last().map(|r| r.epoch + 1).unwrap_or(0)
    }

    /// Per-epoch mean of mi_total.
    pub fn epoch_mi_means(&self) -> Vec<f64> {
        self.epoch_means(|r| r.mi.total)
    }

    /// Per-epoch mean of the contrastive loss.
    pub fn epoch_loss_means(&self) -> Vec<f64> {
        self.epoch_means(|r| r.l_con)
    }

    fn epoch_means(&self, f: impl Fn(&TraceRow) -> f64) -> Vec<f64> {
        let n = self.num_epochs();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for r in &self.rows {
            sums[r.epoch] += f(r);
            counts[r.epoch] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| s / c.max(1) as f64)
            .collect()
    }

    /// `iter,epoch,mi_l1,mi_l2,mi_l3,mi_l4,mi_total`
    pub fn write_mi_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["iter", "epoch", "mi_l1", "mi_l2", "mi_l3", "mi_l4", "mi_total"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.iter.to_string(),
                r.epoch.to_string(),
                format!("{:.9}", r.mi.per_stage[0]),
                format!("{:.9}", r.mi.per_stage[1]),
                format!("{:.9}", r.mi.per_stage[2]),
                format!("{:.9}", r.mi.per_stage[3]),
                format!("{:.9}", r.mi.total),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `iter,epoch,loss`
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["iter", "epoch", "loss"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.iter.to_string(),
                r.epoch.to_string(),
                format!("{:.9}", r.l_con),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> FairdclError {
    FairdclError::Io(std::io::Error::other(e))
}

const TAG_BATCH: u64 = 0x4241;
const TAG_AUG: u64 = 0x4155;
const TAG_QUEUE: u64 = 0x5155;
const TAG_GR: u64 = 0x4752;
const TAG_ENC_SHUF: u64 = 0x4553;
const TAG_DISC_STAGE: u64 = 0x100;
const TAG_DISC_GLOBAL: u64 = 0x200;

/// All mutable training state for one run; checkpointable.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub k: usize,
    pub query: Encoder<f32>,
    pub key: Encoder<f32>,
    pub enc_opt: Adam<f32>,
    /// measurement discriminators, one per stage
    pub discs: Vec<DiscBundle<f32>>,
    /// fifth discriminator on the projection vector (global_only)
    pub global_disc: Option<DiscBundle<f32>>,
    /// affine attribute classifier weights + bias + optimizer (gr)
    pub gr_head: Option<(ArrayD<f32>, ArrayD<f32>, Adam<f32>)>,
    pub queue: NegativeQueue<f32>,
    pub iteration: usize,
    pending_gr_ids: Option<(usize, usize)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, k: usize, queue_capacity: usize) -> Result<Self> {
        cfg.validate()?;
        if k < 2 {
            return Err(FairdclError::Config("need K >= 2 groups".into()));
        }
        let query = Encoder::<f32>::new(cfg.profile, cfg.seed);
        let key = query.clone();
        let shapes: Vec<&[usize]> = query.params.iter().map(|p| p.shape()).collect();
        let enc_opt = Adam::new(cfg.lr, cfg.weight_decay, &shapes);
        let widths = cfg.profile.widths();
        let disc_lr = cfg.disc_lr.unwrap_or(cfg.lr);
        let discs = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                DiscBundle::new(c, k, cfg.seed, TAG_DISC_STAGE + i as u64, disc_lr, cfg.weight_decay)
            })
            .collect();
        let global_disc = (cfg.variant == Variant::GlobalOnly).then(|| {
            DiscBundle::new(PROJ_DIM, k, cfg.seed, TAG_DISC_GLOBAL, disc_lr, cfg.weight_decay)
        });
        let gr_head = (cfg.variant == Variant::Gr).then(|| {
            let mut rng = derive_rng(cfg.seed, &[TAG_GR]);
            let w = he_normal::<f32, _>(&[PROJ_DIM, k], PROJ_DIM, &mut rng);
            let b = ArrayD::<f32>::zeros(IxDyn(&[k]));
            let opt = Adam::new(cfg.lr, cfg.weight_decay, &[&[PROJ_DIM, k], &[k]]);
            (w, b, opt)
        });
        let mut qrng = derive_rng(cfg.seed, &[TAG_QUEUE]);
        let queue = NegativeQueue::new_random(queue_capacity.max(1), PROJ_DIM, &mut qrng);
        Ok(Trainer {
            cfg,
            k,
            query,
            key,
            enc_opt,
            discs,
            global_disc,
            gr_head,
            queue,
            iteration: 0,
            pending_gr_ids: None,
        })
    }

    /// Pick this iteration's batch indices. DI draws the whole batch from
    /// one group, round-robin over iterations; other variants sample
    /// uniformly without replacement.
    pub fn sample_batch(&self, tiles: &[ImageTile], iteration: usize) -> Result<Vec<usize>> {
        let bs = self.cfg.batch_size;
        let mut rng = derive_rng(self.cfg.seed, &[TAG_BATCH, iteration as u64]);
        let pool: Vec<usize> = if self.cfg.variant == Variant::Di {
            let g = iteration % self.k;
            let p: Vec<usize> = (0..tiles.len()).filter(|&i| tiles[i].group == g).collect();
            if p.len() < bs {
                return Err(FairdclError::Config(format!(
                    "group {g} has only {} pretrain tiles, need batch_size {bs}",
                    p.len()
                )));
            }
            p
        } else {
            (0..tiles.len()).collect()
        };
        if pool.len() < bs {
            return Err(FairdclError::Config(format!(
                "pretrain split has {} tiles, need batch_size {bs}",
                pool.len()
            )));
        }
        let mut pool = pool;
        pool.shuffle(&mut rng);
        pool.truncate(bs);
        Ok(pool)
    }

    /// One full iteration of the training algorithm. Returns the
    /// post-rounds MI estimate and the contrastive loss value.
    pub fn step(&mut self, tiles: &[ImageTile]) -> Result<(MiEstimate, f64)> {
        let it = self.iteration;
        let idxs = self.sample_batch(tiles, it)?;
        let groups: Vec<usize> = idxs.iter().map(|&i| tiles[i].group).collect();

        // two color-jittered views per tile
        let s = self.cfg.color_jitter as f32;
        let d = ColorJitterConfig::default();
        let jitter = ColorJitterConfig {
            brightness: d.brightness * s,
            contrast: d.contrast * s,
            saturation: d.saturation * s,
            hue: d.hue * s,
            jitter_prob: d.jitter_prob * s as f64,
            grayscale_prob: d.grayscale_prob * s as f64,
        };
        let mut v1 = Vec::with_capacity(idxs.len());
        let mut v2 = Vec::with_capacity(idxs.len());
        for (slot, &i) in idxs.iter().enumerate() {
            let mut rng = derive_rng(self.cfg.seed, &[TAG_AUG, it as u64, slot as u64]);
            let (a, b) = augment_pretrain(&tiles[i], &jitter, &mut rng);
            v1.push(a);
            v2.push(b);
        }
        let batch_q = tiles_to_batch::<f32>(&v1);
        let batch_k = tiles_to_batch::<f32>(&v2);

        // momentum-encoder keys (detached by construction)
        let keys = self.key.forward_features(&batch_k)?.q;

        // query forward on a gradient tape
        let mut tape = Tape::<f32>::new();
        let qids = self.query.params_on_tape(&mut tape, true);
        let feats = self.query.forward_on_tape(&mut tape, &qids, &batch_q)?;

        // (2) B measurement-discriminator rounds on detached stage features
        let stage_arrays: Vec<ArrayD<f32>> =
            feats.stages.iter().map(|&s| tape.value(s).clone()).collect();
        let mi = train_discriminators(
            &mut self.discs,
            &stage_arrays,
            &groups,
            self.k,
            self.cfg.b_rounds,
            self.cfg.seed,
            it as u64,
        )?;
        // global_only trains its own fifth discriminator the same way
        if let Some(gd) = &mut self.global_disc {
            let qv = tape.value(feats.q).clone();
            let n = qv.shape()[0];
            let qmap = qv
                .into_shape_with_order(IxDyn(&[n, PROJ_DIM, 1, 1]))
                .expect("q to 1x1 map");
            let mut slice = std::slice::from_mut(gd);
            let _ = train_discriminators(
                &mut slice,
                &[qmap],
                &groups,
                self.k,
                self.cfg.b_rounds,
                self.cfg.seed,
                (1 << 32) | it as u64,
            )?;
        }

        // (3) encoder objective
        let l_con = info_nce_loss(&mut tape, feats.q, keys.clone(), &self.queue, self.cfg.tau)?;
        let l_con_val = tape.scalar(l_con) as f64;
        let alpha = self.cfg.alpha as f32;
        let objective = match self.cfg.variant {
            Variant::Baseline | Variant::Di => l_con,
            Variant::Fairdcl => {
                let mut obj = l_con;
                for (si, bundle) in self.discs.iter().enumerate() {
                    let ids = bundle.disc.params_on_tape(&mut tape, false);
                    let (h, w) = {
                        let s = tape.value(feats.stages[si]).shape();
                        (s[2], s[3])
                    };
                    let mut rng =
                        derive_rng(self.cfg.seed, &[TAG_ENC_SHUF, it as u64, si as u64]);
                    let aligned = build_attribute_maps::<f32, _>(
                        &groups,
                        self.k,
                        (h, w),
                        PairMode::Aligned,
                        &mut rng,
                    )?;
                    let shuffled = build_attribute_maps::<f32, _>(
                        &groups,
                        self.k,
                        (h, w),
                        PairMode::Shuffled,
                        &mut rng,
                    )?;
                    let al = tape.constant(aligned);
                    let sh = tape.constant(shuffled);
                    let mi_node =
                        mi_jsd_on_tape(&mut tape, &bundle.disc, &ids, feats.stages[si], al, sh);
                    obj = tape.add_scaled(obj, mi_node, alpha);
                }
                obj
            }
            Variant::GlobalOnly => {
                let bundle = self.global_disc.as_ref().expect("global disc");
                let ids = bundle.disc.params_on_tape(&mut tape, false);
                let n = groups.len();
                let qmap = tape.reshape(feats.q, &[n, PROJ_DIM, 1, 1]);
                let mut rng = derive_rng(self.cfg.seed, &[TAG_ENC_SHUF, it as u64, 4]);
                let aligned = build_attribute_maps::<f32, _>(
                    &groups,
                    self.k,
                    (1, 1),
                    PairMode::Aligned,
                    &mut rng,
                )?;
                let shuffled = build_attribute_maps::<f32, _>(
                    &groups,
                    self.k,
                    (1, 1),
                    PairMode::Shuffled,
                    &mut rng,
                )?;
                let al = tape.constant(aligned);
                let sh = tape.constant(shuffled);
                let mi_node = mi_jsd_on_tape(&mut tape, &bundle.disc, &ids, qmap, al, sh);
                tape.add_scaled(l_con, mi_node, alpha)
            }
            Variant::Gr => {
                let (w, b, _) = self.gr_head.as_ref().expect("gr head");
                let wid = tape.leaf(w.clone(), true);
                let bid = tape.leaf(b.clone(), true);
                let rev = tape.grad_reverse(feats.q, self.cfg.lambda as f32);
                let logits = tape.linear(rev, wid, bid);
                let ce = tape.cross_entropy_rows(logits, groups.clone());
                // remember head node ids via a second pass below
                let obj = tape.add(l_con, ce);
                // stash ids for the optimizer step
                self.pending_gr_ids = Some((wid, bid));
                obj
            }
        };

        let mut grads = tape.backward(objective);
        let gvec: Vec<ArrayD<f32>> = qids
            .iter()
            .map(|&id| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| ArrayD::zeros(IxDyn(&[0])))
            })
            .collect();
        // replace empty placeholders with zero tensors of the right shape
        let gvec: Vec<ArrayD<f32>> = gvec
            .into_iter()
            .zip(&self.query.params)
            .map(|(g, p)| {
                if g.shape() == p.shape() {
                    g
                } else {
                    ArrayD::zeros(p.raw_dim())
                }
            })
            .collect();
        {
            let mut refs: Vec<&mut ArrayD<f32>> = self.query.params.iter_mut().collect();
            self.enc_opt.step(&mut refs, &gvec);
        }
        // gr head trains on the same pass (its gradients are not reversed)
        if let Some((wid, bid)) = self.pending_gr_ids.take() {
            let gw = grads.take(wid);
            let gb = grads.take(bid);
            let (w, b, opt) = self.gr_head.as_mut().expect("gr head");
            let mut refs: Vec<&mut ArrayD<f32>> = vec![w, b];
            opt.step(&mut refs, &[gw, gb]);
        }

        // (4) momentum update + enqueue
        momentum_update(&self.query, &mut self.key, self.cfg.momentum)?;
        self.queue.enqueue(&keys)?;

        self.iteration += 1;
        Ok((mi, l_con_val))
    }
}

/// Train on in-memory tiles (the pretrain split). The queue capacity is
/// the split size; an epoch is one full pass (⌈split/batch⌉ iterations).
pub fn pretrain_on_tiles(
    cfg: &TrainConfig,
    tiles: &[ImageTile],
    k: usize,
) -> Result<(Trainer, BiasTrace)> {
    cfg.validate()?;
    if tiles.is_empty() {
        return Err(FairdclError::Config("pretrain split is empty".into()));
    }
    if tiles.len() < cfg.batch_size {
        return Err(FairdclError::Config(format!(
            "pretrain split has {} tiles, need batch_size {}",
            tiles.len(),
            cfg.batch_size
        )));
    }
    let mut trainer = Trainer::new(cfg.clone(), k, tiles.len())?;
    let iters_per_epoch = tiles.len().div_ceil(cfg.batch_size);
    let mut trace = BiasTrace::new(iters_per_epoch);
    for _ in 0..cfg.iterations {
        let it = trainer.iteration;
        let (mi, l_con) = trainer.step(tiles)?;
        trace.push(it, mi, l_con);
    }
    Ok((trainer, trace))
}

/// Load the pretrain split from a manifest and train.
pub fn pretrain(cfg: &TrainConfig, manifest: &DatasetManifest) -> Result<(Trainer, BiasTrace)> {
    let tiles = manifest.load_split(Split::Pretrain)?;
    pretrain_on_tiles(cfg, &tiles, manifest.num_groups())
}

// ---- checkpointing ----

const CKPT_MAGIC: &[u8] = b"fairdcl-ckpt-v1\n";

fn write_tensor<W: Write>(w: &mut W, t: &ArrayD<f32>) -> Result<()> {
    w.write_u32::<LittleEndian>(t.ndim() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<ArrayD<f32>> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    if ndim > 8 {
        return Err(FairdclError::Checkpoint("implausible tensor rank".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    if len > 1 << 28 {
        return Err(FairdclError::Checkpoint("implausible tensor size".into()));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f32::<LittleEndian>()?);
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| FairdclError::Checkpoint(e.to_string()))
}

fn write_tensors<W: Write>(w: &mut W, ts: &[ArrayD<f32>]) -> Result<()> {
    w.write_u32::<LittleEndian>(ts.len() as u32)?;
    for t in ts {
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<ArrayD<f32>>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    if n > 4096 {
        return Err(FairdclError::Checkpoint("implausible tensor count".into()));
    }
    (0..n).map(|_| read_tensor(r)).collect()
}

fn write_adam<W: Write>(w: &mut W, opt: &Adam<f32>) -> Result<()> {
    let (t, m, v) = opt.state();
    w.write_i32::<LittleEndian>(t)?;
    write_tensors(w, m)?;
    write_tensors(w, v)?;
    Ok(())
}

fn read_adam_into<R: Read>(r: &mut R, opt: &mut Adam<f32>) -> Result<()> {
    let t = r.read_i32::<LittleEndian>()?;
    let m = read_tensors(r)?;
    let v = read_tensors(r)?;
    opt.restore(t, m, v);
    Ok(())
}

impl Trainer {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        let cfg = serde_json::to_vec(&self.cfg)
            .map_err(|e| FairdclError::Checkpoint(e.to_string()))?;
        w.write_u32::<LittleEndian>(cfg.len() as u32)?;
        w.write_all(&cfg)?;
        w.write_u64::<LittleEndian>(self.k as u64)?;
        w.write_u64::<LittleEndian>(self.iteration as u64)?;
        write_tensors(&mut w, &self.query.params)?;
        write_tensors(&mut w, &self.key.params)?;
        write_adam(&mut w, &self.enc_opt)?;
        w.write_u32::<LittleEndian>(self.discs.len() as u32)?;
        for d in &self.discs {
            write_tensors(&mut w, &d.disc.params)?;
            write_adam(&mut w, &d.opt)?;
        }
        w.write_u8(self.global_disc.is_some() as u8)?;
        if let Some(gd) = &self.global_disc {
            write_tensors(&mut w, &gd.disc.params)?;
            write_adam(&mut w, &gd.opt)?;
        }
        w.write_u8(self.gr_head.is_some() as u8)?;
        if let Some((hw, hb, opt)) = &self.gr_head {
            write_tensors(&mut w, std::slice::from_ref(hw))?;
            write_tensors(&mut w, std::slice::from_ref(hb))?;
            write_adam(&mut w, opt)?;
        }
        w.write_u64::<LittleEndian>(self.queue.capacity as u64)?;
        let qm = self.queue.as_matrix().into_dyn();
        write_tensor(&mut w, &qm)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Trainer> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
            FairdclError::Checkpoint(format!("cannot open {}: {e}", path.display()))
        })?);
        let mut magic = [0u8; 16];
        r.read_exact(&mut magic)
            .map_err(|_| FairdclError::Checkpoint("truncated header".into()))?;
        if magic != CKPT_MAGIC {
            return Err(FairdclError::Checkpoint("bad magic header".into()));
        }
        let clen = r.read_u32::<LittleEndian>()? as usize;
        if clen > 1 << 20 {
            return Err(FairdclError::Checkpoint("implausible config size".into()));
        }
        let mut cbuf = vec![0u8; clen];
        r.read_exact(&mut cbuf)?;
        let cfg: TrainConfig = serde_json::from_slice(&cbuf)
            .map_err(|e| FairdclError::Checkpoint(format!("bad config: {e}")))?;
        let k = r.read_u64::<LittleEndian>()? as usize;
        let iteration = r.read_u64::<LittleEndian>()? as usize;

        let mut t = Trainer::new(cfg, k, 1)?;
        let qp = read_tensors(&mut r)?;
        let kp = read_tensors(&mut r)?;
        assign_params(&mut t.query.params, qp)?;
        assign_params(&mut t.key.params, kp)?;
        read_adam_into(&mut r, &mut t.enc_opt)?;
        let nd = r.read_u32::<LittleEndian>()? as usize;
        if nd != t.discs.len() {
            return Err(FairdclError::Checkpoint("discriminator count mismatch".into()));
        }
        for d in &mut t.discs {
            let p = read_tensors(&mut r)?;
            assign_params(&mut d.disc.params, p)?;
            read_adam_into(&mut r, &mut d.opt)?;
        }
        if r.read_u8()? == 1 {
            let gd = t
                .global_disc
                .as_mut()
                .ok_or_else(|| FairdclError::Checkpoint("unexpected global disc".into()))?;
            let p = read_tensors(&mut r)?;
            assign_params(&mut gd.disc.params, p)?;
            read_adam_into(&mut r, &mut gd.opt)?;
        }
        if r.read_u8()? == 1 {
            let (hw, hb, opt) = t
                .gr_head
                .as_mut()
                .ok_or_else(|| FairdclError::Checkpoint("unexpected gr head".into()))?;
            let mut wv = read_tensors(&mut r)?;
            let mut bv = read_tensors(&mut r)?;
            if wv.len() != 1 || bv.len() != 1 {
                return Err(FairdclError::Checkpoint("bad gr head layout".into()));
            }
            *hw = wv.pop().unwrap();
            *hb = bv.pop().unwrap();
            read_adam_into(&mut r, opt)?;
        }
        let capacity = r.read_u64::<LittleEndian>()? as usize;
        let qm = read_tensor(&mut r)?;
        let qm2 = qm
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| FairdclError::Checkpoint(e.to_string()))?;
        let mut queue = NegativeQueue::new_random(0, PROJ_DIM, &mut derive_rng(0, &[0]));
        queue.capacity = capacity;
        queue.dim = qm2.ncols();
        queue.enqueue(&qm2)?;
        t.queue = queue;
        t.iteration = iteration;
        Ok(t)
    }
}

fn assign_params(dst: &mut [ArrayD<f32>], src: Vec<ArrayD<f32>>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(FairdclError::Checkpoint("parameter count mismatch".into()));
    }
    for (d, s) in dst.iter_mut().zip(src) {
        if d.shape() != s.shape() {
            return Err(FairdclError::Checkpoint(format!(
                "stage widths differ: {:?} vs {:?}",
                d.shape(),
                s.shape()
            )));
        }
        *d = s;
    }
    Ok(())
}

/// Load only the (frozen) query encoder and its config from a checkpoint.
pub fn load_encoder(path: &Path) -> Result<(Encoder<f32>, TrainConfig, usize)> {
    let t = Trainer::load(path)?;
    Ok((t.query, t.cfg, t.k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small_tiles(n: usize, seed: u64) -> Vec<ImageTile> {
        let spec = SyntheticSpec {
            num_tiles: n,
            rho: 0.9,
            seed,
            ..Default::default()
        };
        generate_synthetic(&spec).unwrap().tiles
    }

    fn quick_cfg(variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            iterations: 2,
            batch_size: 8,
            b_rounds: 1,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_match_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.iterations, 7000);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.b_rounds, 20);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.lr, 1e-3);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.tau, 0.2);
        assert_eq!(c.momentum, 0.999);
        assert_eq!(c.profile, Profile::Desk);
    }

    #[test]
    fn partial_json_layers_over_defaults() {
        let c: TrainConfig =
            serde_json::from_str(r#"{"variant":"fairdcl","alpha":0.25}"#).unwrap();
        assert_eq!(c.variant, Variant::Fairdcl);
        assert_eq!(c.alpha, 0.25);
        assert_eq!(c.b_rounds, 20);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        for bad in [
            TrainConfig { alpha: -0.1, ..Default::default() },
            TrainConfig { b_rounds: 0, ..Default::default() },
            TrainConfig { iterations: 0, ..Default::default() },
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.5, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn variant_parse_error_lists_options() {
        let err = Variant::parse("bogus").unwrap_err().to_string();
        for v in ["baseline", "fairdcl", "global_only", "gr", "di"] {
            assert!(err.contains(v), "{err}");
        }
    }

    #[test]
    fn trace_epoch_means_and_grouping() {
        let mut t = BiasTrace::new(2);
        t.push(0, MiEstimate::from_stages([-0.25, -0.25, -0.25, -0.25]), 2.0);
        t.push(1, MiEstimate::from_stages([-0.15, -0.15, -0.15, -0.15]), 1.0);
        let means = t.epoch_mi_means();
        assert_eq!(means.len(), 1);
        assert!((means[0] - (-0.8)).abs() < 1e-12);
        assert!((t.epoch_loss_means()[0] - 1.5).abs() < 1e-12);

        let mut big = BiasTrace::new(350);
        for i in 0..7000 {
            big.push(i, MiEstimate::from_stages([0.0; 4]), 0.0);
        }
        assert_eq!(big.num_epochs(), 20);
    }

    #[test]
    fn empty_trace_emits_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bias_trace.csv");
        BiasTrace::new(10).write_mi_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.trim(), "iter,epoch,mi_l1,mi_l2,mi_l3,mi_l4,mi_total");
    }

    #[test]
    fn di_batches_alternate_groups_and_are_pure() {
        let tiles = small_tiles(64, 1);
        let cfg = TrainConfig {
            variant: Variant::Di,
            batch_size: 8,
            ..Default::default()
        };
        let tr = Trainer::new(cfg, 2, 64).unwrap();
        for it in 0..4 {
            let idxs = tr.sample_batch(&tiles, it).unwrap();
            let gs: Vec<usize> = idxs.iter().map(|&i| tiles[i].group).collect();
            assert!(gs.iter().all(|&g| g == it % 2), "iter {it}: {gs:?}");
        }
    }

    #[test]
    fn di_rejects_undersized_group() {
        let tiles = small_tiles(8, 2);
        let cfg = TrainConfig {
            variant: Variant::Di,
            batch_size: 8, // only 4 tiles per group
            ..Default::default()
        };
        let tr = Trainer::new(cfg, 2, 8).unwrap();
        assert!(tr.sample_batch(&tiles, 0).is_err());
    }

    #[test]
    fn alpha_zero_fairdcl_matches_baseline_exactly() {
        let tiles = small_tiles(32, 3);
        let run = |variant: Variant, alpha: f64| {
            let cfg = TrainConfig {
                alpha,
                ..quick_cfg(variant, 42)
            };
            let (t, trace) = pretrain_on_tiles(&cfg, &tiles, 2).unwrap();
            (t.query.checksum(), trace)
        };
        let (cs_base, tr_base) = run(Variant::Baseline, 0.5);
        let (cs_fair, tr_fair) = run(Variant::Fairdcl, 0.0);
        assert_eq!(cs_base, cs_fair);
        for (a, b) in tr_base.rows.iter().zip(&tr_fair.rows) {
            assert_eq!(a.mi.total, b.mi.total);
            assert_eq!(a.l_con, b.l_con);
        }
    }

    #[test]
    fn gr_lambda_zero_encoder_matches_baseline() {
        let tiles = small_tiles(32, 4);
        let base = pretrain_on_tiles(&quick_cfg(Variant::Baseline, 7), &tiles, 2)
            .unwrap()
            .0
            .query
            .checksum();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..quick_cfg(Variant::Gr, 7)
        };
        let gr = pretrain_on_tiles(&cfg, &tiles, 2).unwrap().0.query.checksum();
        assert_eq!(base, gr);
    }

    #[test]
    fn all_variants_run_one_iteration() {
        let tiles = small_tiles(32, 5);
        for v in [
            Variant::Baseline,
            Variant::Fairdcl,
            Variant::GlobalOnly,
            Variant::Gr,
            Variant::Di,
        ] {
            let cfg = TrainConfig {
                iterations: 1,
                ..quick_cfg(v, 9)
            };
            let (t, trace) = pretrain_on_tiles(&cfg, &tiles, 2).unwrap();
            assert_eq!(t.iteration, 1);
            assert_eq!(trace.rows.len(), 1);
            assert!(trace.rows[0].l_con.is_finite());
        }
    }

    #[test]
    fn empty_or_undersized_split_rejected() {
        let cfg = quick_cfg(Variant::Baseline, 0);
        assert!(pretrain_on_tiles(&cfg, &[], 2).is_err());
        let tiles = small_tiles(4, 6);
        assert!(pretrain_on_tiles(&cfg, &tiles, 2).is_err());
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let tiles = small_tiles(32, 8);
        let cfg = TrainConfig {
            iterations: 3,
            ..quick_cfg(Variant::Fairdcl, 21)
        };
        // uninterrupted: 3 + 1 iterations
        let (mut full, _) = pretrain_on_tiles(&cfg, &tiles, 2).unwrap();
        full.step(&tiles).unwrap();

        // interrupted: 3 iterations, save, load, 1 more
        let (resumed, _) = pretrain_on_tiles(&cfg, &tiles, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.ckpt");
        resumed.save(&ckpt).unwrap();
        let mut resumed = Trainer::load(&ckpt).unwrap();
        assert_eq!(resumed.iteration, 3);
        resumed.step(&tiles).unwrap();

        assert_eq!(full.query.checksum(), resumed.query.checksum());
        assert_eq!(full.key.checksum(), resumed.key.checksum());
        for (a, b) in full.discs.iter().zip(&resumed.discs) {
            for (x, y) in a.disc.params.iter().zip(&b.disc.params) {
                assert_eq!(x, y);
            }
        }
        assert_eq!(full.queue.as_matrix(), resumed.queue.as_matrix());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(Trainer::load(&p).is_err());
        assert!(Trainer::load(&dir.path().join("missing.ckpt")).is_err());
    }

    #[test]
    fn disc_training_never_touches_encoder() {
        let tiles = small_tiles(32, 10);
        let cfg = quick_cfg(Variant::Baseline, 11);
        let mut tr = Trainer::new(cfg, 2, 32).unwrap();
        let before = tr.query.checksum();
        let batch = tiles_to_batch::<f32>(
            &tiles[..8].iter().map(|t| t.pixels.clone()).collect::<Vec<_>>(),
        );
        let feats = tr.query.forward_features(&batch).unwrap();
        let groups: Vec<usize> = tiles[..8].iter().map(|t| t.group).collect();
        train_discriminators(
            &mut tr.discs,
            &feats.stages,
            &groups,
            2,
            3,
            0,
            0,
        )
        .unwrap();
        assert_eq!(tr.query.checksum(), before);
    }
}
