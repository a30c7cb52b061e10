//! Sensitive-attribute mutual information machinery: one-hot attribute maps
//! (aligned vs. shuffled pairs), pointwise concat-and-convolve
//! discriminators, the Jensen-Shannon MI lower bound
//! E_aligned[−sp(−D)] − E_shuffled[sp(D)], and the inner training rounds
//! that keep the discriminators near-optimal while the encoder learns.

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{NodeId, Tape};
use crate::error::{FairdclError, Result};
use crate::nn::{he_normal, Adam, Real};
use crate::rng::derive_rng;

/// The estimate's floor: a zero discriminator scores exactly −2 log 2, and
/// no pointwise score does worse, since sp(d) + sp(−d) ≥ 2 log 2.
pub const TWO_LOG_2: f64 = 2.0 * std::f64::consts::LN_2;

/// How attribute maps pair with features: aligned samples the joint
/// distribution (each tile's own group), shuffled the product of marginals
/// (labels permuted within the batch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairMode {
    Aligned,
    Shuffled,
}

/// One-hot group maps broadcast over the stage's spatial grid:
/// output is (N, K, H, W) with exactly one 1 per pixel column.
pub fn build_attribute_maps<F: Real, R: Rng>(
    groups: &[usize],
    k: usize,
    shape: (usize, usize),
    mode: PairMode,
    rng: &mut R,
) -> Result<ArrayD<F>> {
    if k < 2 {
        return Err(FairdclError::Config("need K >= 2 attribute channels".into()));
    }
    if let Some(&g) = groups.iter().find(|&&g| g >= k) {
        return Err(FairdclError::Config(format!(
            "group index {g} out of range for K={k}"
        )));
    }
    let labels: Vec<usize> = match mode {
        PairMode::Aligned => groups.to_vec(),
        PairMode::Shuffled => {
            if groups.len() < 2 {
                return Err(FairdclError::Config(
                    "shuffled mode needs batch size >= 2".into(),
                ));
            }
            let mut l = groups.to_vec();
            l.shuffle(rng);
            l
        }
    };
    let (h, w) = shape;
    let mut maps = ArrayD::<F>::zeros(IxDyn(&[groups.len(), k, h, w]));
    for (n, &g) in labels.iter().enumerate() {
        maps.index_axis_mut(ndarray::Axis(0), n)
            .index_axis_mut(ndarray::Axis(0), g)
            .fill(F::one());
    }
    Ok(maps)
}

/// Hidden width of the discriminator's third layer. Full-scale stage widths
/// use the published sizes; other widths fall back to C/10 rounded to the
/// nearest multiple of 10, floored at 10.
pub fn hidden_width(stage_channels: usize) -> usize {
    match stage_channels {
        256 => 20,
        512 => 50,
        1024 => 100,
        2048 => 200,
        c => {
            let rounded = ((c as f64 / 10.0 / 10.0).round() as usize) * 10;
            rounded.max(10)
        }
    }
}

/// Pointwise (1×1) three-layer conv discriminator over features
/// concatenated with attribute channels: (C+K) → (C+K) → h → 1.
#[derive(Debug, Clone)]
pub struct Discriminator<F: Real> {
    pub in_channels: usize,
    pub dims: [usize; 4],
    /// [w1, b1, w2, b2, w3, b3]; conv weights are (out, in, 1, 1)
    pub params: Vec<ArrayD<F>>,
}

const TAG_DISC: u64 = 0x44495343;

impl<F: Real> Discriminator<F> {
    pub fn new(stage_channels: usize, k: usize, seed: u64, tag: u64) -> Self {
        let cin = stage_channels + k;
        let h = hidden_width(stage_channels);
        let dims = [cin, cin, h, 1];
        let mut params = Vec::with_capacity(6);
        for (i, win) in dims.windows(2).enumerate() {
            let (ci, co) = (win[0], win[1]);
            let mut rng = derive_rng(seed, &[TAG_DISC, tag, i as u64]);
            params.push(he_normal(&[co, ci, 1, 1], ci, &mut rng));
            params.push(ArrayD::zeros(IxDyn(&[co])));
        }
        Discriminator {
            in_channels: cin,
            dims,
            params,
        }
    }

    pub fn params_on_tape(&self, tape: &mut Tape<F>, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Score map (N, 1, H, W) for features ‖ attribute maps.
    pub fn score_on_tape(
        &self,
        tape: &mut Tape<F>,
        param_ids: &[NodeId],
        features: NodeId,
        attrs: NodeId,
    ) -> NodeId {
        let x = tape.concat_channels(&[features, attrs]);
        let c1 = tape.conv2d(x, param_ids[0], param_ids[1], 1, 0);
        let r1 = tape.relu(c1);
        let c2 = tape.conv2d(r1, param_ids[2], param_ids[3], 1, 0);
        let r2 = tape.relu(c2);
        tape.conv2d(r2, param_ids[4], param_ids[5], 1, 0)
    }
}

fn check_pair_shapes<F: Real>(
    features: &ArrayD<F>,
    aligned: &ArrayD<F>,
    shuffled: &ArrayD<F>,
) -> Result<()> {
    if aligned.shape() != shuffled.shape() {
        return Err(FairdclError::Shape(
            "aligned/shuffled attribute maps differ in shape".into(),
        ));
    }
    if features.ndim() != 4
        || aligned.ndim() != 4
        || features.shape()[0] != aligned.shape()[0]
        || features.shape()[2..] != aligned.shape()[2..]
    {
        return Err(FairdclError::Shape(format!(
            "features {:?} incompatible with attribute maps {:?}",
            features.shape(),
            aligned.shape()
        )));
    }
    Ok(())
}

/// MI estimate as a tape node (so it can enter the encoder objective):
/// mean over batch and positions of −sp(−D(x‖c_aligned)) minus mean of
/// sp(D(x‖c_shuffled)).
pub fn mi_jsd_on_tape<F: Real>(
    tape: &mut Tape<F>,
    disc: &Discriminator<F>,
    disc_param_ids: &[NodeId],
    features: NodeId,
    aligned: NodeId,
    shuffled: NodeId,
) -> NodeId {
    let loss = disc_loss_on_tape(tape, disc, disc_param_ids, features, aligned, shuffled);
    tape.neg(loss)
}

/// −mi_jsd = E_aligned[sp(−D)] + E_shuffled[sp(D)]; minimized over
/// discriminator weights to tighten the MI bound. Floor 2·log 2 at D ≡ 0.
pub fn disc_loss_on_tape<F: Real>(
    tape: &mut Tape<F>,
    disc: &Discriminator<F>,
    disc_param_ids: &[NodeId],
    features: NodeId,
    aligned: NodeId,
    shuffled: NodeId,
) -> NodeId {
    let d_al = disc.score_on_tape(tape, disc_param_ids, features, aligned);
    let d_sh = disc.score_on_tape(tape, disc_param_ids, features, shuffled);
    let neg_al = tape.neg(d_al);
    let sp_al = tape.softplus(neg_al);
    let m_al = tape.mean_all(sp_al);
    let sp_sh = tape.softplus(d_sh);
    let m_sh = tape.mean_all(sp_sh);
    tape.add(m_al, m_sh)
}

/// Concrete (no-grad) MI estimate.
pub fn mi_jsd<F: Real>(
    disc: &Discriminator<F>,
    features: &ArrayD<F>,
    aligned: &ArrayD<F>,
    shuffled: &ArrayD<F>,
) -> Result<f64> {
    check_pair_shapes(features, aligned, shuffled)?;
    let mut tape = Tape::new();
    let ids = disc.params_on_tape(&mut tape, false);
    let f = tape.constant(features.clone());
    let al = tape.constant(aligned.clone());
    let sh = tape.constant(shuffled.clone());
    let mi = mi_jsd_on_tape(&mut tape, disc, &ids, f, al, sh);
    Ok(Real::to_f64(tape.scalar(mi)))
}

pub fn discriminator_loss<F: Real>(
    disc: &Discriminator<F>,
    features: &ArrayD<F>,
    aligned: &ArrayD<F>,
    shuffled: &ArrayD<F>,
) -> Result<f64> {
    Ok(-mi_jsd(disc, features, aligned, shuffled)?)
}

/// Per-stage MI estimates in nats; `total` is their sum.
#[derive(Debug, Clone, Copy)]
pub struct MiEstimate {
    pub per_stage: [f64; 4],
    pub total: f64,
}

impl MiEstimate {
    pub fn from_stages(per_stage: [f64; 4]) -> Self {
        MiEstimate {
            per_stage,
            total: per_stage.iter().sum(),
        }
    }
}

/// One stage's discriminator + its optimizer state, bundled so training
/// rounds and checkpointing handle them as a unit.
#[derive(Debug, Clone)]
pub struct DiscBundle<F: Real> {
    pub disc: Discriminator<F>,
    pub opt: Adam<F>,
}

impl<F: Real> DiscBundle<F> {
    pub fn new(stage_channels: usize, k: usize, seed: u64, tag: u64, lr: f64, wd: f64) -> Self {
        let disc = Discriminator::new(stage_channels, k, seed, tag);
        let shapes: Vec<&[usize]> = disc.params.iter().map(|p| p.shape()).collect();
        let opt = Adam::new(lr, wd, &shapes);
        DiscBundle { disc, opt }
    }

    /// One gradient step on −mi_jsd for fixed features and a given
    /// aligned/shuffled pair.
    pub fn train_round(
        &mut self,
        features: &ArrayD<F>,
        aligned: &ArrayD<F>,
        shuffled: &ArrayD<F>,
    ) -> Result<f64> {
        check_pair_shapes(features, aligned, shuffled)?;
        let mut tape = Tape::new();
        let ids = self.disc.params_on_tape(&mut tape, true);
        let f = tape.constant(features.clone());
        let al = tape.constant(aligned.clone());
        let sh = tape.constant(shuffled.clone());
        let loss = disc_loss_on_tape(&mut tape, &self.disc, &ids, f, al, sh);
        let loss_val = Real::to_f64(tape.scalar(loss));
        let mut grads = tape.backward(loss);
        let gvec: Vec<ArrayD<F>> = ids.iter().map(|&id| grads.take(id)).collect();
        let mut refs: Vec<&mut ArrayD<F>> = self.disc.params.iter_mut().collect();
        self.opt.step(&mut refs, &gvec);
        Ok(loss_val)
    }
}

const TAG_SHUFFLE: u64 = 0x5348;

/// Algorithm inner loop: each stage's discriminator is optimized `b` rounds
/// on that stage's detached features, with a fresh shuffled permutation per
/// round; returns the post-rounds MI estimate per stage. Encoder weights
/// are never touched (features arrive as plain arrays).
pub fn train_discriminators<F: Real>(
    bundles: &mut [DiscBundle<F>],
    stage_features: &[ArrayD<F>],
    groups: &[usize],
    k: usize,
    b: usize,
    seed: u64,
    iteration: u64,
) -> Result<MiEstimate> {
    if b == 0 {
        return Err(FairdclError::Config("B must be >= 1".into()));
    }
    if bundles.len() != stage_features.len() {
        return Err(FairdclError::Shape(
            "discriminator count does not match stage count".into(),
        ));
    }
    let mut per_stage = [0.0f64; 4];
    for (si, (bundle, feats)) in bundles.iter_mut().zip(stage_features).enumerate() {
        let (h, w) = (feats.shape()[2], feats.shape()[3]);
        let mut align_rng = derive_rng(seed, &[TAG_SHUFFLE, iteration, si as u64, u64::MAX]);
        let aligned =
            build_attribute_maps::<F, _>(groups, k, (h, w), PairMode::Aligned, &mut align_rng)?;
        for round in 0..b {
            let mut rng = derive_rng(seed, &[TAG_SHUFFLE, iteration, si as u64, round as u64]);
            let shuffled =
                build_attribute_maps::<F, _>(groups, k, (h, w), PairMode::Shuffled, &mut rng)?;
            bundle.train_round(feats, &aligned, &shuffled)?;
        }
        // post-rounds estimate on a fresh shuffled draw
        let mut rng = derive_rng(seed, &[TAG_SHUFFLE, iteration, si as u64, b as u64]);
        let shuffled =
            build_attribute_maps::<F, _>(groups, k, (h, w), PairMode::Shuffled, &mut rng)?;
        let mi = mi_jsd(&bundle.disc, feats, &aligned, &shuffled)?;
        if si < 4 {
            per_stage[si] = mi;
        }
    }
    Ok(MiEstimate::from_stages(per_stage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{max_rel_error, numeric_gradient};
    use ndarray::{Array4, Axis};


    #[test]
    fn published_discriminator_dims() {
        for (c, expect) in [
            (256, [258, 258, 20, 1]),
            (512, [514, 514, 50, 1]),
            (1024, [1026, 1026, 100, 1]),
            (2048, [2050, 2050, 200, 1]),
        ] {
            let d = Discriminator::<f32>::new(c, 2, 0, 0);
            assert_eq!(d.dims, expect);
        }
    }

    #[test]
    fn fallback_hidden_widths_for_desk_profile() {
        assert_eq!(hidden_width(32), 10);
        assert_eq!(hidden_width(64), 10);
        assert_eq!(hidden_width(128), 10);
        let d = Discriminator::<f32>::new(64, 2, 0, 0);
        assert_eq!(d.dims, [66, 66, 10, 1]);
    }

    #[test]
    fn aligned_map_is_one_hot_broadcast() {
        let mut rng = derive_rng(0, &[0]);
        let m = build_attribute_maps::<f64, _>(&[1], 2, (2, 2), PairMode::Aligned, &mut rng)
            .unwrap();
        assert_eq!(m.shape(), &[1, 2, 2, 2]);
        assert!(m.index_axis(Axis(0), 0).index_axis(Axis(0), 1).iter().all(|&v| v == 1.0));
        assert!(m.index_axis(Axis(0), 0).index_axis(Axis(0), 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shuffled_preserves_label_multiset() {
        let groups = [0usize, 0, 1, 1];
        let mut rng = derive_rng(3, &[1]);
        for _ in 0..20 {
            let m = build_attribute_maps::<f64, _>(&groups, 2, (1, 1), PairMode::Shuffled, &mut rng)
                .unwrap();
            let ones: f64 = m.index_axis(Axis(1), 1).sum();
            assert_eq!(ones, 2.0); // two tiles of group 1, regardless of order
        }
    }

    #[test]
    fn shuffled_match_rate_near_half_for_balanced_batch() {
        let groups: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let mut rng = derive_rng(5, &[2]);
        let mut matches = 0usize;
        let draws = 100;
        for _ in 0..draws {
            let m = build_attribute_maps::<f64, _>(&groups, 2, (1, 1), PairMode::Shuffled, &mut rng)
                .unwrap();
            for (n, &g) in groups.iter().enumerate() {
                if m[[n, g, 0, 0]] == 1.0 {
                    matches += 1;
                }
            }
        }
        let rate = matches as f64 / (draws * 32) as f64;
        assert!((rate - 0.5).abs() < 0.1, "rate = {rate}");
    }

    #[test]
    fn rejects_out_of_range_group_and_tiny_shuffle_batch() {
        let mut rng = derive_rng(0, &[3]);
        assert!(
            build_attribute_maps::<f64, _>(&[2], 2, (1, 1), PairMode::Aligned, &mut rng).is_err()
        );
        assert!(
            build_attribute_maps::<f64, _>(&[0], 2, (1, 1), PairMode::Shuffled, &mut rng).is_err()
        );
    }

    fn random_setup(seed: u64) -> (Discriminator<f64>, ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let disc = Discriminator::<f64>::new(6, 2, seed, 0);
        let mut rng = derive_rng(seed, &[10]);
        let feats = Array4::from_shape_fn((4, 6, 3, 3), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let groups = [0usize, 1, 0, 1];
        let aligned =
            build_attribute_maps::<f64, _>(&groups, 2, (3, 3), PairMode::Aligned, &mut rng)
                .unwrap();
        let shuffled =
            build_attribute_maps::<f64, _>(&groups, 2, (3, 3), PairMode::Shuffled, &mut rng)
                .unwrap();
        (disc, feats, aligned, shuffled)
    }

    #[test]
    fn zero_discriminator_hits_the_floor() {
        let (mut disc, feats, aligned, shuffled) = random_setup(1);
        for p in &mut disc.params {
            p.fill(0.0);
        }
        let mi = mi_jsd(&disc, &feats, &aligned, &shuffled).unwrap();
        assert!((mi + TWO_LOG_2).abs() < 1e-9, "mi = {mi}");
        let loss = discriminator_loss(&disc, &feats, &aligned, &shuffled).unwrap();
        assert!((loss - TWO_LOG_2).abs() < 1e-9);
    }

    #[test]
    fn loss_plus_mi_is_zero() {
        let (disc, feats, aligned, shuffled) = random_setup(2);
        let mi = mi_jsd(&disc, &feats, &aligned, &shuffled).unwrap();
        let loss = discriminator_loss(&disc, &feats, &aligned, &shuffled).unwrap();
        assert!((mi + loss).abs() < 1e-12);
    }

    #[test]
    fn identical_pairs_stay_below_floor() {
        // aligned == shuffled sample sets: −sp(−d) − sp(d) ≤ −2 log 2 pointwise
        let (disc, feats, aligned, _) = random_setup(3);
        let mi = mi_jsd(&disc, &feats, &aligned, &aligned).unwrap();
        assert!(mi <= -TWO_LOG_2 + 1e-12, "mi = {mi}");
    }

    #[test]
    fn separating_scores_closed_form() {
        // force D = +10 on aligned and −10 on shuffled via a hand-built
        // discriminator reading only the attribute channels
        let mut disc = Discriminator::<f64>::new(1, 2, 0, 0); // dims 3,3,10,1
        for p in &mut disc.params {
            p.fill(0.0);
        }
        // layer1: pass channels through (identity on the 3 inputs)
        for i in 0..3 {
            disc.params[0][[i, i, 0, 0]] = 1.0;
        }
        // layer2: h0 = attr0 (channel 1), h1 = attr1 (channel 2)
        disc.params[2][[0, 1, 0, 0]] = 1.0;
        disc.params[2][[1, 2, 0, 0]] = 1.0;
        // layer3: 10*(h0 − h1): +10 when label 0, −10 when label 1
        disc.params[4][[0, 0, 0, 0]] = 10.0;
        disc.params[4][[0, 1, 0, 0]] = -10.0;
        // single sample, group 0 aligned; "shuffled" forced to label 1
        let feats = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 2, 2]));
        let mut rng = derive_rng(0, &[4]);
        let aligned =
            build_attribute_maps::<f64, _>(&[0], 2, (2, 2), PairMode::Aligned, &mut rng).unwrap();
        let flipped =
            build_attribute_maps::<f64, _>(&[1], 2, (2, 2), PairMode::Aligned, &mut rng).unwrap();
        let mi = mi_jsd(&disc, &feats, &aligned, &flipped).unwrap();
        let expect = -2.0 * (1.0 + (-10.0f64).exp()).ln();
        assert!((mi - expect).abs() < 1e-12, "mi = {mi}");
        assert!((mi + 9.08e-5).abs() < 1e-6);
    }

    #[test]
    fn disc_loss_gradients_match_finite_differences() {
        let (disc, feats, aligned, shuffled) = random_setup(7);
        let mut tape = Tape::<f64>::new();
        let ids = disc.params_on_tape(&mut tape, true);
        let f = tape.constant(feats.clone());
        let al = tape.constant(aligned.clone());
        let sh = tape.constant(shuffled.clone());
        let loss = disc_loss_on_tape(&mut tape, &disc, &ids, f, al, sh);
        let grads = tape.backward(loss);
        for pi in 0..disc.params.len() {
            let analytic = grads.get(ids[pi]).expect("grad").clone();
            let mut probe = disc.clone();
            let numeric = numeric_gradient(
                |p: &ArrayD<f64>| {
                    probe.params[pi] = p.clone();
                    -mi_jsd(&probe, &feats, &aligned, &shuffled).unwrap()
                },
                &disc.params[pi],
                1e-5,
            );
            let err = max_rel_error(&analytic, &numeric);
            assert!(err <= 1e-3, "param {pi}: rel err {err}");
        }
    }

    #[test]
    fn mi_invariant_to_joint_batch_permutation() {
        let (disc, feats, aligned, shuffled) = random_setup(9);
        let perm = [2usize, 0, 3, 1];
        let permute = |a: &ArrayD<f64>| {
            let mut out = a.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.index_axis_mut(Axis(0), dst)
                    .assign(&a.index_axis(Axis(0), src));
            }
            out
        };
        let a = mi_jsd(&disc, &feats, &aligned, &shuffled).unwrap();
        let b = mi_jsd(&disc, &permute(&feats), &permute(&aligned), &permute(&shuffled)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn b_zero_is_rejected() {
        let mut bundles = vec![DiscBundle::<f64>::new(4, 2, 0, 0, 1e-3, 1e-4)];
        let feats = vec![ArrayD::<f64>::zeros(IxDyn(&[2, 4, 2, 2]))];
        let err = train_discriminators(&mut bundles, &feats, &[0, 1], 2, 0, 0, 0).unwrap_err();
        assert!(err.to_string().contains("B must be >= 1"));
    }

    #[test]
    fn detects_group_colored_features() {
        // Feature channels one-hot the group: MI should rise well above the
        // floor after enough rounds. Within-batch shuffles self-match at
        // rate 1/K, which caps the estimate at ≈ −sp(−ln K) − sp(ln K)/K;
        // K=16 keeps that ceiling above the −0.3 detection bar (K=2 would
        // cap it near −0.95 no matter how good the discriminator gets).
        let k = 16usize;
        let groups: Vec<usize> = (0..64).map(|i| i % k).collect();
        let mut rng = derive_rng(11, &[5]);
        let feats = Array4::from_shape_fn((64, k, 2, 2), |(n, c, _, _)| {
            (if c == groups[n] { 3.0 } else { 0.0 }) + rng.gen_range(-0.1..0.1)
        })
        .into_dyn();
        let mut bundles = vec![DiscBundle::<f64>::new(k, k, 0, 0, 3e-3, 1e-4)];
        for it in 0..12 {
            train_discriminators(&mut bundles, &[feats.clone()], &groups, k, 100, 3, it).unwrap();
        }
        // average the estimate over fresh shuffle draws to tame the
        // single-permutation variance
        let aligned =
            build_attribute_maps::<f64, _>(&groups, k, (2, 2), PairMode::Aligned, &mut rng)
                .unwrap();
        let mut acc = 0.0;
        for _ in 0..20 {
            let sh =
                build_attribute_maps::<f64, _>(&groups, k, (2, 2), PairMode::Shuffled, &mut rng)
                    .unwrap();
            acc += mi_jsd(&bundles[0].disc, &feats, &aligned, &sh).unwrap();
        }
        let mi = acc / 20.0;
        assert!(mi > -0.3, "mi = {mi}");
    }

    #[test]
    fn randomized_labels_stay_near_floor() {
        // labels carry no signal: held-out MI ≤ −2 log 2 + 0.15
        let mut rng = derive_rng(13, &[6]);
        let feats = Array4::from_shape_fn((16, 4, 2, 2), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let groups: Vec<usize> = (0..16).map(|_| rng.gen_range(0..2)).collect();
        let mut bundles = vec![DiscBundle::<f64>::new(4, 2, 2, 0, 1e-3, 1e-4)];
        for it in 0..4 {
            train_discriminators(&mut bundles, &[feats.clone()], &groups, 2, 50, 5, it).unwrap();
        }
        // held-out estimate: fresh features from the same (signal-free) law
        let held = Array4::from_shape_fn((16, 4, 2, 2), |_| rng.gen_range(-1.0..1.0)).into_dyn();
        let aligned =
            build_attribute_maps::<f64, _>(&groups, 2, (2, 2), PairMode::Aligned, &mut rng)
                .unwrap();
        let shuffled =
            build_attribute_maps::<f64, _>(&groups, 2, (2, 2), PairMode::Shuffled, &mut rng)
                .unwrap();
        let mi = mi_jsd(&bundles[0].disc, &held, &aligned, &shuffled).unwrap();
        assert!(mi <= -TWO_LOG_2 + 0.15, "mi = {mi}");
    }
}
