use fairdcl::data::{generate_synthetic, Split, SyntheticSpec};
use fairdcl::seg::{finetune, FinetuneConfig, SegNet};
use fairdcl::train::{pretrain_on_tiles, Trainer, TrainConfig, Variant};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: Vec<u64> = args
        .get(1)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or(vec![0, 1, 2, 3, 4]);
    let ft_iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let ft_lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let k: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);
    let spec = SyntheticSpec { num_tiles: 512, k, rho: 0.9, ..Default::default() };
    let out = generate_synthetic(&spec).unwrap();
    let pre: Vec<_> = out.tiles.iter().filter(|t| t.split == Split::Pretrain).cloned().collect();
    let ft: Vec<_> = out.tiles.iter().filter(|t| t.split == Split::Finetune).cloned().collect();
    let test: Vec<_> = out.tiles.iter().filter(|t| t.split == Split::Test).cloned().collect();
    let iters = pre.len().div_ceil(32) * 20;
    let cache = std::path::Path::new("/tmp/calib_ckpt");
    std::fs::create_dir_all(cache).unwrap();
    let t0 = Instant::now();
    let mut wins = 0usize;
    for &seed in &seeds {
        let mut rows = Vec::new();
        for variant in [Variant::Baseline, Variant::Fairdcl] {
            let ckpt = cache.join(format!("k{k}_{seed}_{}.bin", variant.as_str()));
            let query = if ckpt.exists() {
                Trainer::load(&ckpt).unwrap().query
            } else {
                let cfg = TrainConfig {
                    variant,
                    iterations: iters,
                    batch_size: 32,
                    b_rounds: 4,
                    alpha: 0.5,
                    disc_lr: Some(0.003),
                    color_jitter: 0.2,
                    seed,
                    ..Default::default()
                };
                let (tr, _) = pretrain_on_tiles(&cfg, &pre, k).unwrap();
                tr.save(&ckpt).unwrap();
                tr.query
            };
            let mut net = SegNet::new(query, spec.num_classes, seed).unwrap();
            let fcfg = FinetuneConfig {
                iterations: ft_iters,
                eval_every: args.get(4).map(|s| s.parse().unwrap()).unwrap_or(ft_iters),
                lr: ft_lr,
                seed,
                ..Default::default()
            };
            let reports = finetune(&mut net, &ft, &test, k, &fcfg).unwrap();
            for (it, r) in &reports {
                eprintln!(
                    "seed {seed} {variant:?} it{it}: diff={:.4} wst={:.4} acc={:.4}",
                    r.diff, r.wst, r.acc
                );
            }
            let r = &reports.last().unwrap().1;
            rows.push((r.diff, r.wst, r.acc));
        }
        let (bd, bw, ba) = rows[0];
        let (fd, fw, fa) = rows[1];
        let ok = fd < bd && fw >= bw;
        let acc_ok = (fa - ba).abs() <= 0.05 * ba;
        if ok {
            wins += 1;
        }
        eprintln!("seed {seed}: diff_better={} wst_geq={} acc_within5%={}", fd < bd, fw >= bw, acc_ok);
    }
    eprintln!("wins {wins}/{}", seeds.len());
    eprintln!("total {:.0}s", t0.elapsed().as_secs_f64());
}
