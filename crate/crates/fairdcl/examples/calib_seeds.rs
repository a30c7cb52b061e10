use fairdcl::data::{generate_synthetic, Split, SyntheticSpec};
use fairdcl::probe::{linear_probe, ProbeConfig, ProbeStage};
use fairdcl::train::{pretrain_on_tiles, TrainConfig, Variant};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let alpha: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let mom: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.999);
    let seeds: Vec<u64> = args.get(4).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![2, 3]);
    let bs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(32);
    let b: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(4);
    let spec = SyntheticSpec { num_tiles: 512, k, rho: 0.9, ..Default::default() };
    let out = generate_synthetic(&spec).unwrap();
    let pre: Vec<_> = out.tiles.iter().filter(|t| t.split == Split::Pretrain).cloned().collect();
    let test: Vec<_> = out.tiles.iter().filter(|t| t.split == Split::Test).cloned().collect();
    let iters = pre.len().div_ceil(bs) * 20;
    let t0 = Instant::now();
    let mut all_windows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
    for &seed in &seeds {
        let mut mi20 = Vec::new();
        let mut encs = Vec::new();
        for variant in [Variant::Baseline, Variant::GlobalOnly, Variant::Fairdcl] {
            let cfg = TrainConfig { variant, iterations: iters, batch_size: bs, b_rounds: b, alpha, momentum: mom,
                disc_lr: Some(0.003), color_jitter: 0.2, seed, ..Default::default() };
            let (tr, trace) = pretrain_on_tiles(&cfg, &pre, k).unwrap();
            let mi = trace.epoch_mi_means();
            let loss = trace.epoch_loss_means();
            let w: Vec<f64> = (0..4).map(|i| loss[i*5..(i+1)*5].iter().sum::<f64>()/5.0).collect();
            let mono = w.windows(2).all(|p| p[1] < p[0]);
            let vi = match variant { Variant::Baseline => 0, Variant::GlobalOnly => 1, Variant::Fairdcl => 2, _ => unreachable!() };
            all_windows[vi].push(w.clone());
            mi20.push(mi[mi.len()-1]);
            eprintln!("seed {seed} {:?}: mi20={:.3} loss20={:.4} mono={} windows={:?}",
                variant, mi[mi.len()-1], loss[loss.len()-1], mono,
                w.iter().map(|v|(v*10000.0).round()/10000.0).collect::<Vec<_>>());
            encs.push((variant, tr.query, loss[loss.len()-1]));
        }
        let gap = mi20[0] - mi20[2];
        let ordered = mi20[0] > mi20[1] && mi20[1] > mi20[2];
        let ratio = encs[2].2 / encs[0].2;
        eprintln!("seed {seed}: ordered={ordered} gap={:.3} loss_ratio={:.3}", gap, ratio);
        for (variant, enc, _) in [&encs[0], &encs[2]] {
            let accs: Vec<f64> = ProbeStage::ALL.iter().map(|&st|
                linear_probe(enc, &pre, &test, k, st, &ProbeConfig::default()).unwrap().test_accuracy).collect();
            eprintln!("seed {seed} {:?} probe: {:?}", variant,
                accs.iter().map(|v|(v*1000.0).round()/1000.0).collect::<Vec<_>>());
        }
    }
    for (vi, name) in ["Baseline", "GlobalOnly", "Fairdcl"].iter().enumerate() {
        let n = all_windows[vi].len() as f64;
        let mean: Vec<f64> = (0..4).map(|i| all_windows[vi].iter().map(|w| w[i]).sum::<f64>() / n).collect();
        let mono = mean.windows(2).all(|p| p[1] < p[0]);
        eprintln!("MEAN {name}: mono={mono} windows={:?}", mean.iter().map(|v|(v*1000.0).round()/1000.0).collect::<Vec<_>>());
    }
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f64());
}
