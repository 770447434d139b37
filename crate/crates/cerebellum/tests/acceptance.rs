//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Criteria 4, 5, 8 and 9 need MNIST in `$CEREBELLUM_DATA_DIR` or
//! `<workspace>/data/mnist`; without it they fail rather than skip.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cerebellum::data::{encode_idx, load_idx, load_mnist, parse_idx_images, Split, DATA_DIR_ENV};
use cerebellum::error::Error;
use cerebellum::experiments::SweepPlan;
use cerebellum::protocol::{run_protocol, ProtocolOptions};
use cerebellum_core::attacks::{
    evaluate_robustness, input_gradient, transfer_matrix, AttackObjective, AttackSpec, EvalOptions,
};
use cerebellum_core::learning::{error_vector, ltd_update, purkinje_gradient};
use cerebellum_core::{
    mse_loss, one_hot, train, GranuleLayer, Hyperparams, LabeledDataset, Network, NetworkConfig,
    PurkinjeLayer, SynapseBudget,
};

type Outcome = Result<String, String>;

const SEEDS: [u64; 2] = [0, 123];
const DESK_M: usize = 5_000;
const DESK_EPOCHS: usize = 3;
const ACCURACY_FLOOR: f64 = 0.90;
const ATTACK_SUBSAMPLE: usize = 1_000;

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_net(rng: &mut ChaCha8Rng, seed: u64) -> Network {
    let d = rng.random_range(2..=30);
    let m = rng.random_range(2..=60);
    let k = rng.random_range(1..=d);
    let c = 10;
    let granule = GranuleLayer::random(d, m, k, seed).unwrap();
    let w = (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mu = (0..m).map(|_| rng.random_range(0.0..0.5)).collect();
    let purkinje = PurkinjeLayer::from_parts(m, c, w, mu, 0.99, true).unwrap();
    let cfg = NetworkConfig::new(d, m, k, c)
        .with_seed(seed)
        .with_ltd(true);
    Network::from_parts(cfg, granule, purkinje).unwrap()
}

fn rel_err(fd: &[f64], g: &[f64]) -> f64 {
    let diff: f64 = fd
        .iter()
        .zip(g)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(f64::MIN_POSITIVE)
}

/// Central differences with `h = 1e-6`; an input coordinate is excluded when
/// any granule cell reading it has a pre-activation within `1e-4` of the kink.
fn gradient_oracle() -> Outcome {
    let t = Instant::now();
    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut nets, mut excluded, mut worst_in, mut worst_w) = (0, 0usize, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let net = random_net(&mut rng, seed);
        let (d, m, c) = (net.input_dim(), net.config().m, net.classes());
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let y = one_hot(rng.random_range(0..c), c).unwrap();

        let mut near_kink = vec![false; d];
        for j in 0..m {
            let (idx, w) = net.granule().cell(j);
            let pre: f64 = idx.iter().zip(w).map(|(&i, &wt)| wt * x[i as usize]).sum();
            if pre.abs() < 1e-4 {
                idx.iter().for_each(|&i| near_kink[i as usize] = true);
            }
        }
        let g = input_gradient(&net, &x, &y).unwrap();
        let (mut fd_kept, mut g_kept) = (Vec::new(), Vec::new());
        for i in 0..d {
            if near_kink[i] {
                excluded += 1;
                continue;
            }
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            fd_kept.push((net.loss(&up, &y).unwrap() - net.loss(&down, &y).unwrap()) / (2.0 * h));
            g_kept.push(g[i]);
        }
        if !g_kept.is_empty() {
            worst_in = worst_in.max(rel_err(&fd_kept, &g_kept));
        }

        let trace = net.forward(&x).unwrap();
        let p = net.purkinje();
        let readout_loss = |w: Vec<f64>| {
            let layer =
                PurkinjeLayer::from_parts(m, c, w, p.mu().to_vec(), p.beta(), true).unwrap();
            mse_loss(&layer.forward(&trace.h).unwrap().1, &y).unwrap()
        };
        let gw = purkinje_gradient(&error_vector(&trace.yhat, &y).unwrap(), &trace.z);
        let fd: Vec<f64> = (0..m * c)
            .map(|t| {
                let (mut up, mut down) = (p.weights().to_vec(), p.weights().to_vec());
                up[t] += h;
                down[t] -= h;
                (readout_loss(up) - readout_loss(down)) / (2.0 * h)
            })
            .collect();
        worst_w = worst_w.max(rel_err(&fd, &gw));
        nets += 1;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        nets >= 100 && worst_in < 1e-6 && worst_w < 1e-6 && secs < 10.0,
        format!(
            "{nets} networks, worst relative error input {worst_in:.2e}, readout {worst_w:.2e}, \
             {excluded} kink coordinates excluded, {secs:.2}s"
        ),
    )
}

fn dense_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let instances = 1_000;
    for seed in 0..instances as u64 {
        let d = rng.random_range(1..=100);
        let m = rng.random_range(1..=80);
        let k = rng.random_range(1..=d);
        let layer = GranuleLayer::random(d, m, k, seed).unwrap();
        let mut dense = vec![0.0; d * m];
        for j in 0..m {
            let (idx, w) = layer.cell(j);
            for (&i, &wt) in idx.iter().zip(w) {
                dense[i as usize * m + j] = wt;
            }
        }
        // A third of the inputs are exactly zero, as dark MNIST pixels are.
        let x: Vec<f64> = (0..d)
            .map(|_| {
                if rng.random_bool(1.0 / 3.0) {
                    0.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let expected: Vec<u64> = (0..m)
            .map(|j| {
                let pre = (0..d).fold(0.0, |acc, i| acc + dense[i * m + j] * x[i]);
                (if pre > 0.0 { pre } else { 0.0 }).to_bits()
            })
            .collect();
        let single: Vec<u64> = layer
            .forward(&x)
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let mut batch = vec![0.0; m];
        layer.forward_batch(&x, &mut batch).unwrap();
        let batch: Vec<u64> = batch.iter().map(|v| v.to_bits()).collect();
        if single != expected || batch != expected {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(
        mismatches == 0 && secs < 5.0,
        format!("{instances} instances, {mismatches} bitwise mismatches, {secs:.2}s"),
    )
}

fn budget_arithmetic() -> Outcome {
    let plan = SweepPlan::from_json(
        r#"{"kind": "sparsity", "data": {"kind": "mnist"}, "full_scale": true, "seeds": [0]}"#,
    )
    .map_err(|e| e.to_string())?;
    let jobs = plan.expand(784, 10).map_err(|e| e.to_string())?;
    let budget = SynapseBudget::default();
    let points: Vec<(usize, usize)> = jobs.iter().map(|j| (j.config.k, j.config.m)).collect();
    let ks: Vec<usize> = points.iter().map(|p| p.0).collect();
    let floor_rule = points.iter().all(|&(k, m)| {
        m as u64 == budget.total / (k as u64 + 20) && budget.satisfied_by(m as u64, k as u64)
    });
    let at = |k: usize| points.iter().find(|p| p.0 == k).map(|p| p.1);
    let cifar = budget.granule_cells(4096).map_err(|e| e.to_string())?;
    ensure(
        ks == [1, 2, 4, 10, 50, 200, 784]
            && floor_rule
            && at(4) == Some(200_000)
            && at(784) == Some(5_970)
            && cifar == 1_166,
        format!("sweep points {points:?}; k=4096 -> m={cifar}"),
    )
}

fn ltd_recurrence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h_mean: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..3.0)).collect();
    let mut worst = 0.0f64;
    for beta in [0.0, 0.5, 0.99] {
        let mut mu = vec![0.0; h_mean.len()];
        for t in 1..=10_000i32 {
            mu = ltd_update(&mu, &h_mean, beta).map_err(|e| e.to_string())?;
            let decay = 1.0 - f64::powi(beta, t);
            for (a, h) in mu.iter().zip(&h_mean) {
                worst = worst.max((a - decay * h).abs());
            }
        }
    }
    ensure(
        worst <= 1e-12,
        format!("max |iterative - closed form| = {worst:.2e} over t <= 1e4"),
    )
}

struct Desk {
    train: LabeledDataset,
    test: LabeledDataset,
    nets: Vec<Network>,
    accuracy: Vec<f64>,
}

fn desk_models() -> Result<Desk, String> {
    let dir = data_dir();
    let train_set = load_mnist(&dir, Split::Train).map_err(|e| e.to_string())?;
    let test = load_mnist(&dir, Split::Test).map_err(|e| e.to_string())?;
    let hp = Hyperparams {
        epochs: DESK_EPOCHS,
        ..Hyperparams::default()
    };
    let (mut nets, mut accuracy) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let t = Instant::now();
        let cfg = NetworkConfig::new(784, DESK_M, 784, 10).with_seed(seed);
        let (net, report) =
            train(&cfg, &hp, &train_set, Some(&test), &mut || 0.0).map_err(|e| e.to_string())?;
        let acc = report
            .test_accuracy
            .last()
            .copied()
            .flatten()
            .unwrap_or(0.0);
        eprintln!(
            "  trained seed {seed}: test accuracy {acc:.4} ({:.0}s)",
            t.elapsed().as_secs_f64()
        );
        nets.push(net);
        accuracy.push(acc);
    }
    Ok(Desk {
        train: train_set,
        test,
        nets,
        accuracy,
    })
}

fn clean_accuracy(desk: &Result<Desk, String>) -> Outcome {
    let desk = desk.as_ref().map_err(|e| format!("no desk models: {e}"))?;
    let detail = SEEDS
        .iter()
        .zip(&desk.accuracy)
        .map(|(s, a)| format!("seed {s}: {a:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        desk.accuracy.iter().all(|&a| a >= ACCURACY_FLOOR),
        format!(
            "{detail} (floor {ACCURACY_FLOOR}, {} training instances)",
            desk.train.len()
        ),
    )
}

fn attack_gates(desk: &Result<Desk, String>) -> (Outcome, Outcome) {
    let desk = match desk {
        Ok(d) => d,
        Err(e) => {
            return (
                Err(format!("no desk model: {e}")),
                Err(format!("no desk model: {e}")),
            )
        }
    };
    let t = Instant::now();
    let opts = ProtocolOptions {
        eval: EvalOptions::default().with_subsample(ATTACK_SUBSAMPLE, 0),
        ..ProtocolOptions::default()
    };
    let mut log = std::io::stderr();
    let report = match run_protocol(&desk.nets[0], &desk.test, &opts, &mut log) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let secs = t.elapsed().as_secs_f64();

    let ascend = opts
        .unbounded(&desk.test)
        .with_objective(AttackObjective::Ascend);
    let info_opts = EvalOptions {
        histogram_samples: 0,
        ..opts.eval.clone()
    };
    match evaluate_robustness(&desk.nets[0], &desk.test, &ascend, &info_opts) {
        Ok(r) => println!(
            "info: unbounded attack ascending the true-label loss fools {:.4}",
            r.fooling_rate
        ),
        Err(e) => println!("info: unbounded ascent failed: {e}"),
    }

    let sanity: Vec<_> = report
        .gates
        .iter()
        .filter(|g| !g.name.starts_with("budget"))
        .collect();
    let summary = sanity
        .iter()
        .map(|g| {
            format!(
                "{} [{}] {}",
                g.name,
                if g.passed { "ok" } else { "FAILED" },
                g.detail
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    // Two epsilon comparisons, the unbounded floor and the doubling curve.
    let gates_ok = sanity.len() == 4 && sanity.iter().all(|g| g.passed);
    let c4 = ensure(
        gates_ok && secs < 15.0 * 60.0,
        format!("{summary}; {ATTACK_SUBSAMPLE}-point subsample, {secs:.0}s"),
    );
    let v = report.violations();
    let emitted: usize = report.reports.iter().map(|r| r.n).sum::<usize>()
        + report
            .doubling
            .as_ref()
            .map_or(0, |d| d.curve.levels.len() * ATTACK_SUBSAMPLE);
    let c7 = ensure(
        v == 0,
        format!("{v} budget or domain violations across {emitted} adversarial inputs"),
    );
    (c4, c7)
}

fn transfer_identity(desk: &Result<Desk, String>) -> Outcome {
    let desk = desk.as_ref().map_err(|e| format!("no desk models: {e}"))?;
    let spec = AttackSpec::pgd(0.1).with_seed(0);
    let opts = EvalOptions {
        histogram_samples: 0,
        ..EvalOptions::default().with_subsample(ATTACK_SUBSAMPLE, 0)
    };
    let nets: Vec<&Network> = desk.nets.iter().collect();
    let matrix = transfer_matrix(&nets, &desk.test, &spec, &opts).map_err(|e| e.to_string())?;
    let mut detail = Vec::new();
    let mut exact = true;
    for (i, net) in desk.nets.iter().enumerate() {
        let wb = evaluate_robustness(net, &desk.test, &spec, &opts).map_err(|e| e.to_string())?;
        exact &= matrix.rates[i][i].to_bits() == wb.fooling_rate.to_bits();
        detail.push(format!(
            "seed {}: diagonal {} white-box {}",
            SEEDS[i], matrix.rates[i][i], wb.fooling_rate
        ));
    }
    detail.push(format!(
        "off-diagonal {:.4} / {:.4}",
        matrix.rates[0][1], matrix.rates[1][0]
    ));
    ensure(exact, detail.join("; "))
}

fn cli(args: &[&str]) -> Result<i32, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cerebellum"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let code = out.status.code().unwrap_or(-1);
    if !matches!(code, 0 | 1) {
        return Err(format!(
            "{args:?} exited {code}: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(code)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = data_dir();
    let data = data.to_str().ok_or("non-UTF-8 data path")?;
    let mut runs = Vec::new();
    for r in ["first", "second"] {
        let t = tmp.path().join(r).join("train");
        let a = tmp.path().join(r).join("attack");
        let (t_s, a_s) = (t.to_str().unwrap(), a.to_str().unwrap());
        let ckpt = t.join("checkpoint");
        let code = cli(&[
            "train",
            "--data-dir",
            data,
            "--m",
            "1000",
            "--k",
            "16",
            "--ltd",
            "true",
            "--seed",
            "7",
            "--epochs",
            "1",
            "--train-limit",
            "10000",
            "--out",
            t_s,
        ])?;
        if code != 0 {
            return Err(format!("train exited {code}"));
        }
        cli(&[
            "attack",
            "--data-dir",
            data,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--subsample",
            "200",
            "--attack-seed",
            "3",
            "--unbounded-steps",
            "200",
            "--doubling-start",
            "10",
            "--doublings",
            "2",
            "--out",
            a_s,
        ])?;
        runs.push((t, a));
    }
    let files = [
        "train/checkpoint/indices.u64",
        "train/checkpoint/weights.f64",
        "train/checkpoint/readout.f64",
        "train/checkpoint/mu.f64",
        "train/checkpoint/metadata.json",
        "train/metrics.csv",
        "attack/report.json",
        "attack/histogram.csv",
        "attack/convergence.csv",
    ];
    let mut differing = Vec::new();
    let mut bytes = 0;
    for f in files {
        let a = fs::read(tmp.path().join("first").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(tmp.path().join("second").join(f)).map_err(|e| format!("{f}: {e}"))?;
        bytes += a.len();
        if a != b {
            differing.push(f);
        }
    }
    ensure(
        differing.is_empty(),
        format!(
            "{} files ({bytes} bytes) compared, differing: {differing:?}",
            files.len()
        ),
    )
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn parse_offset(r: cerebellum::error::Result<LabeledDataset>) -> Option<u64> {
    match r {
        Err(Error::Parse { offset, .. }) => Some(offset),
        _ => None,
    }
}

fn idx_golden() -> Outcome {
    let labels = fixture("two-labels-idx1-ubyte");
    let set = load_idx(&fixture("two-images-idx3-ubyte"), &labels, "fixture")
        .map_err(|e| e.to_string())?;
    let pixels_exact = set.labels() == [3, 7]
        && (0..2).all(|i| {
            set.input(i)
                .iter()
                .enumerate()
                .all(|(p, v)| v.to_bits() == ((((i * 101 + p * 7) % 256) as f64) / 255.0).to_bits())
        });
    let image_bytes = fs::read(fixture("two-images-idx3-ubyte")).map_err(|e| e.to_string())?;
    let label_bytes = fs::read(&labels).map_err(|e| e.to_string())?;
    let (n, d, px) = parse_idx_images(&fixture("two-images-idx3-ubyte"), &image_bytes)
        .map_err(|e| e.to_string())?;
    let round_trip = encode_idx(n, 28, d / 28, &px, &[3, 7]) == (image_bytes, label_bytes);
    let magic = parse_offset(load_idx(
        &fixture("bad-magic-idx3-ubyte"),
        &labels,
        "fixture",
    ));
    let truncated = parse_offset(load_idx(
        &fixture("truncated-images-idx3-ubyte"),
        &labels,
        "fixture",
    ));
    let mismatch = parse_offset(load_idx(
        &fixture("two-images-idx3-ubyte"),
        &fixture("three-labels-idx1-ubyte"),
        "fixture",
    ));
    ensure(
        pixels_exact
            && round_trip
            && magic == Some(0)
            && truncated == Some(16 + 2 * 784 - 5)
            && mismatch == Some(4),
        format!(
            "exact pixels {pixels_exact}, round trip {round_trip}, bad magic at {magic:?}, \
             truncation at {truncated:?}, count mismatch at {mismatch:?}"
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n, name, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let outcome = f();
        results.push((n, name, outcome, t.elapsed().as_secs_f64()));
        let (n, name, outcome, secs) = results.last().unwrap();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag}: {name} — {detail} [{secs:.1}s]");
    };

    record(1, "gradient oracle", &mut gradient_oracle);
    record(2, "dense equivalence", &mut dense_equivalence);
    record(3, "budget arithmetic", &mut budget_arithmetic);
    record(6, "LTD recurrence", &mut ltd_recurrence);
    record(10, "IDX golden fixtures", &mut idx_golden);
    record(8, "train + attack reproducibility", &mut reproducibility);

    let t = Instant::now();
    let desk = desk_models();
    let train_secs = t.elapsed().as_secs_f64();
    record(5, "clean accuracy floor", &mut || {
        clean_accuracy(&desk).map(|d| format!("{d}, {train_secs:.0}s"))
    });
    let (c4, c7) = attack_gates(&desk);
    let mut c4 = Some(c4);
    let mut c7 = Some(c7);
    record(4, "attack sanity gates", &mut || c4.take().unwrap());
    record(7, "budget-respect audit", &mut || c7.take().unwrap());
    record(9, "transfer diagonal identity", &mut || {
        transfer_identity(&desk)
    });

    let failed: Vec<usize> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| r.0)
        .collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed {failed:?}")
        }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
