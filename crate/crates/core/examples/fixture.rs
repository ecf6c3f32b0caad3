//! Scratch sizing harness (not shipped): rebuilds the acceptance fixture,
//! saves it under /tmp/fix, and sweeps adaptation hyperparameters on it.

use std::path::Path;
use std::time::Instant;

use dptta_core::dict::{learn_dictionary, load_dictionary, save_dictionary, DictLearnConfig};
use dptta_core::net::{load_checkpoint, save_checkpoint, train, NetConfig, TrainConfig};
use dptta_core::sim::store::{load_dataset, save_dataset};
use dptta_core::sim::{make_dataset, Dataset, DomainKind, DomainSpec};
use dptta_core::tta::{adapt_dataset, TTAConfig};

const SHIFTED: [DomainKind; 5] = [
    DomainKind::Agn,
    DomainKind::Lfi,
    DomainKind::Hfi,
    DomainKind::Imp,
    DomainKind::Cmp,
];

fn normalized_clean(ds: &Dataset) -> Vec<f32> {
    ds.clean.as_ref().unwrap().iter().map(|&v| v * 1e-3f32).collect()
}

fn prep(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let t0 = Instant::now();
    let data = make_dataset(&DomainSpec::default_for(DomainKind::Source), 5500, 42).unwrap();
    let (train_set, test_set) = data.split_train_test();
    save_dataset(&train_set, &dir.join("train")).unwrap();
    save_dataset(&test_set, &dir.join("test")).unwrap();

    let y = normalized_clean(&train_set);
    let dcfg = DictLearnConfig {
        k: 64,
        lambda: 1.0,
        epochs: 3,
        max_iters: 300,
        tol: 1e-6,
        seed: 7,
        enforce_capacity: false,
    };
    let (dict, codes, rep) = learn_dictionary(&y, train_set.n, 900, &dcfg).unwrap();
    save_dictionary(&dict, &dir.join("dict.bin")).unwrap();
    println!(
        "dict done at {:.0}s: mse {:.3e} sparsity {:.3}",
        t0.elapsed().as_secs_f64(),
        rep.final_mse,
        rep.final_sparsity
    );

    let net_cfg = NetConfig { k: 64, ..NetConfig::desk() };
    let ckpt = train(&train_set, &dict, &codes, &net_cfg, &TrainConfig::desk()).unwrap();
    save_checkpoint(&ckpt, &dir.join("model.ckpt")).unwrap();
    println!("train done at {:.0}s", t0.elapsed().as_secs_f64());

    for (i, &kind) in SHIFTED.iter().enumerate() {
        let ds = make_dataset(&DomainSpec::default_for(kind), 1000, 4242 + i as u64).unwrap();
        save_dataset(&ds, &dir.join(kind.as_str())).unwrap();
    }
    println!("prep done at {:.0}s", t0.elapsed().as_secs_f64());
}

fn ksweep(lambda: f64, ks: &[usize], max_iters: usize) {
    let data = make_dataset(&DomainSpec::default_for(DomainKind::Source), 2000, 77).unwrap();
    let y = normalized_clean(&data);
    for &k in ks {
        let t0 = Instant::now();
        let dcfg = DictLearnConfig {
            k,
            lambda,
            epochs: 3,
            max_iters,
            tol: 1e-6,
            seed: 7,
            enforce_capacity: false,
        };
        let (_, _, rep) = learn_dictionary(&y, data.n, 900, &dcfg).unwrap();
        println!(
            "lambda={lambda} iters={max_iters} k={k}: mse {:.4e} sparsity {:.4} ({:.0}s)",
            rep.final_mse,
            rep.final_sparsity,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn sweep(dir: &Path, lr: f64, std: f64) {
    let dict = load_dictionary(&dir.join("dict.bin")).unwrap();
    let ckpt = load_checkpoint(&dir.join("model.ckpt")).unwrap();
    let cfg = TTAConfig { lr, aug_noise_std: std, ..TTAConfig::default() };
    let t0 = Instant::now();
    let mut min_gain = f64::INFINITY;
    let mut parts = Vec::new();
    for (i, &kind) in SHIFTED.iter().enumerate() {
        let ds = load_dataset(&dir.join(kind.as_str())).unwrap();
        let out = adapt_dataset(&ckpt, &ds, &dict, &cfg, 900 + i as u64).unwrap();
        let gain = out.report.gain_db().unwrap();
        min_gain = min_gain.min(gain);
        parts.push(format!("{} {gain:+.3}", kind.as_str()));
        let falls = out.report.rows.iter().filter(|r| r.fallback).count();
        if falls > 0 {
            parts.push(format!("({falls} fallbacks)"));
        }
    }
    println!(
        "lr={lr:.0e} std={std}: {} | min {min_gain:+.3} dB ({:.0}s)",
        parts.join(", "),
        t0.elapsed().as_secs_f64()
    );
}

fn rows(dir: &Path, lr: f64, std: f64) {
    let dict = load_dictionary(&dir.join("dict.bin")).unwrap();
    let ckpt = load_checkpoint(&dir.join("model.ckpt")).unwrap();
    let ds = load_dataset(&dir.join("agn")).unwrap();
    let cfg = TTAConfig { lr, aug_noise_std: std, ..TTAConfig::default() };
    let out = adapt_dataset(&ckpt, &ds, &dict, &cfg, 900).unwrap();
    for r in &out.report.rows {
        println!(
            "batch {}: L_den {:.4e} L_sparse {:.4e} L_oov {:.4e} total {:.4e} snr {:+.3} -> {:+.3} delta {:.3e}",
            r.batch_idx,
            r.l_den,
            r.l_sparse,
            r.l_oov,
            r.total,
            r.snr_pre.unwrap(),
            r.snr_post.unwrap(),
            r.param_delta_l2
        );
    }
}

fn ablate(dir: &Path, domain: &str) {
    let dict = load_dictionary(&dir.join("dict.bin")).unwrap();
    let ckpt = load_checkpoint(&dir.join("model.ckpt")).unwrap();
    let ds = load_dataset(&dir.join(domain)).unwrap();
    let idx = SHIFTED.iter().position(|k| k.as_str() == domain).unwrap() as u64;
    let rows =
        dptta_core::report::runners::ablate_losses(&ckpt, &dict, &ds, &TTAConfig::default(), 900 + idx)
            .unwrap();
    for r in &rows {
        println!("{domain} {}: {:+.3} dB ({:.2} -> {:.2})", r.subset, r.gain_db, r.snr_pre, r.snr_post);
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let dir = Path::new("/tmp/fix");
    match args[1].as_str() {
        "prep" => prep(dir),
        "ksweep" => {
            let lambda: f64 = args[2].parse().unwrap();
            let ks: Vec<usize> = args[3].split(',').map(|s| s.parse().unwrap()).collect();
            let iters: usize = args.get(4).map_or(300, |s| s.parse().unwrap());
            ksweep(lambda, &ks, iters)
        }
        "sweep" => sweep(dir, args[2].parse().unwrap(), args[3].parse().unwrap()),
        "rows" => rows(dir, args[2].parse().unwrap(), args[3].parse().unwrap()),
        "ablate" => ablate(dir, &args[2]),
        other => panic!("unknown stage {other}"),
    }
}
