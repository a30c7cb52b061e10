use fairdcl::data::{generate_synthetic, Split, SyntheticSpec};
use fairdcl::probe::{linear_probe, ProbeConfig, ProbeStage};
use fairdcl::train::{pretrain_on_tiles, TrainConfig, Variant};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let alpha: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.5);
    let b: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let seeds: Vec<u64> = args.get(4).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![2]);
    let spec = SyntheticSpec { num_tiles: 512, k, rho: 0.9, ..Default::default() };
    let out = generate_synthetic(&spec).unwrap();
    let pre: Vec<_> = out.tiles.iter().filter(|t| t.split == Split::Pretrain).cloned().collect();
    let test: Vec<_> = out.tiles.iter().filter(|t| t.split == Split::Test).cloned().collect();
    let iters = pre.len().div_ceil(32) * 20;
    let t0 = Instant::now();
    let chance = 1.0 / k as f64;
    for &seed in &seeds {
        let mut probes: Vec<Vec<f64>> = Vec::new();
        for variant in [Variant::Baseline, Variant::Fairdcl] {
            let cfg = TrainConfig { variant, iterations: iters, batch_size: 32, b_rounds: b, alpha,
                disc_lr: Some(0.003), color_jitter: 0.2, seed, ..Default::default() };
            let (tr, _) = pretrain_on_tiles(&cfg, &pre, k).unwrap();
            let accs: Vec<f64> = ProbeStage::ALL.iter().map(|&st|
                linear_probe(&tr.query, &pre, &test, k, st, &ProbeConfig::default()).unwrap().test_accuracy).collect();
            eprintln!("seed {seed} {variant:?} probe: {:?}",
                accs.iter().map(|v|(v*1000.0).round()/1000.0).collect::<Vec<_>>());
            probes.push(accs);
        }
        let leq = probes[1].iter().zip(&probes[0]).all(|(f, b)| f <= b);
        let l4 = *probes[1].last().unwrap();
        eprintln!("seed {seed}: fair_leq_base={leq} l4={l4:.3} l4_ok={}", l4 <= chance + 0.1);
    }
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f64());
}
