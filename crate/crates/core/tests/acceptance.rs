//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any numbered criterion fails. Property lines are reported
//! the same way but do not affect the exit status.
//!
//! Environment:
//! - `CFP_MNIST_DIR`: MNIST IDX directory (default `<workspace>/data/mnist`).
//!   Without it the MNIST criteria are reported as SKIP.
//! - `CFP_ACCEPTANCE_QUICK=1`: skip the full-MNIST runs (criteria 1 full and 2).
//! - `CFP_ACCEPTANCE_CACHE=1`: reuse trained baselines from an earlier run of
//!   this suite (stored under the cargo target tmp dir, with their original
//!   training times).

use std::path::{Path, PathBuf};
use std::time::Instant;

use cfp_core::corr::{corr_matrix, select_episode, select_lowest, Episode, FilterMatrix, LayerPairs};
use cfp_core::cost::{compression_report, cost_report, flops_total, memory_layer};
use cfp_core::nn::gradcheck::{central_difference, relative_error};
use cfp_core::nn::{Layer, ParamCoord, ParamKind};
use cfp_core::pipeline::run::{FINAL_FILE, LOG_FILE};
use cfp_core::pipeline::{run_full_pipeline, save_network, train_baseline, Checkpoint, DatasetKind, PruneConfig};
use cfp_core::regularizer::{optimize_episode, pair_rho, reg_grad, reg_value, RegConfig};
use cfp_core::rng::{seeded, Rng};
use cfp_core::surgery::{choose_victims, prune_filters, PrunePlan};
use cfp_core::train::error_rate;
use cfp_core::{Network, Tensor};
use rand::Rng as _;

/// Published FLOPs reduction for the (3,5) network, counted by its authors.
const REFERENCE_FLOPS_PCT_3_5: f64 = 96.41;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Suite {
    lines: Vec<(String, Verdict)>,
}

impl Suite {
    fn record(&mut self, name: &str, v: Verdict) {
        let (tag, msg) = match &v {
            Verdict::Pass(m) => ("PASS", m),
            Verdict::Fail(m) => ("FAIL", m),
            Verdict::Skip(m) => ("SKIP", m),
        };
        println!("{tag} {name}: {msg}");
        self.lines.push((name.to_string(), v));
    }

    fn check(&mut self, name: &str, ok: bool, msg: String) {
        self.record(name, if ok { Verdict::Pass(msg) } else { Verdict::Fail(msg) });
    }
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CFP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let present = ["t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte.gz"]
        .iter()
        .any(|f| dir.join(f).exists());
    present.then_some(dir)
}

fn mnist_config(dir: &Path) -> PruneConfig {
    PruneConfig {
        dataset: DatasetKind::Mnist,
        data_dir: dir.to_path_buf(),
        ..PruneConfig::default()
    }
}

/// Trains (or, with caching on, reloads) a baseline. Returns the network and
/// the wall time its training took.
fn baseline(tag: &str, cfg: &PruneConfig) -> (Network, f64) {
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let key = format!("{tag}-{:016x}", fnv(cfg.to_toml().as_bytes()));
    let (ckpt, secs) = (cache.join(format!("{key}.ckpt")), cache.join(format!("{key}.secs")));
    if flag("CFP_ACCEPTANCE_CACHE") && ckpt.exists() && secs.exists() {
        let net = Checkpoint::load(&ckpt).unwrap().network;
        let t = std::fs::read_to_string(&secs).unwrap().trim().parse().unwrap();
        return (net, t);
    }
    let data = cfg.load_splits().unwrap();
    let start = Instant::now();
    let net = train_baseline(cfg, &data).unwrap();
    let t = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&cache).unwrap();
    save_network(&net, &ckpt).unwrap();
    std::fs::write(&secs, format!("{t}\n")).unwrap();
    (net, t)
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

fn criterion_1(s: &mut Suite, dir: Option<&Path>, quick: bool) -> Option<Network> {
    let Some(dir) = dir else {
        s.record("1 baseline (fast, 10k subset)", Verdict::Skip("MNIST not found".into()));
        s.record("1 baseline (full MNIST)", Verdict::Skip("MNIST not found".into()));
        return None;
    };
    let fast = PruneConfig {
        train_limit: Some(10_000),
        train_epochs: 20.0,
        ..mnist_config(dir)
    };
    let (net, secs) = baseline("fast", &fast);
    let test = fast.load_splits().unwrap().test;
    let err = error_rate(&net, &test).unwrap();
    s.check(
        "1 baseline (fast, 10k subset)",
        err <= 2.5 && secs <= 600.0,
        format!(
            "test error {err:.2}% (<= 2.5%), {} epochs in {secs:.0} s (<= 600 s)",
            fast.train_epochs
        ),
    );
    if quick {
        s.record(
            "1 baseline (full MNIST)",
            Verdict::Skip("CFP_ACCEPTANCE_QUICK=1".into()),
        );
        return None;
    }
    let full = mnist_config(dir);
    let (net, secs) = baseline("full", &full);
    let err = error_rate(&net, &test).unwrap();
    s.check(
        "1 baseline (full MNIST)",
        err <= 1.3 && full.train_epochs <= 20.0 && secs <= 7200.0,
        format!(
            "test error {err:.2}% (<= 1.3%, reference 0.83%), {} epochs in {secs:.0} s (<= 7200 s)",
            full.train_epochs
        ),
    );
    Some(net)
}

fn criterion_2(s: &mut Suite, dir: Option<&Path>, base: Option<Network>) {
    let name = "2 end-to-end (3,5)";
    let (Some(dir), Some(base)) = (dir, base) else {
        s.record(name, Verdict::Skip("needs MNIST and the full baseline".into()));
        return;
    };
    let cfg = PruneConfig {
        seed: 2,
        epsilon: 1.0,
        min_filters: Some(vec![3, 5]),
        ..mnist_config(dir)
    };
    let run_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-run-3-5");
    let _ = std::fs::remove_dir_all(&run_dir);
    let start = Instant::now();
    let r = run_full_pipeline(cfg.clone(), &run_dir, Some(base)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let filters = r.network.filter_counts();
    let c = &r.summary.compression;
    let pct = c.flops_reduction_pct;
    s.check(
        name,
        filters == [3, 5] && r.summary.test_err <= 2.0 && pct >= 95.0 && (pct - REFERENCE_FLOPS_PCT_3_5).abs() <= 2.0,
        format!(
            "filters {filters:?}, test error {:.2}% (<= 2.0%, reference 0.95%), FLOPs {} -> {} = -{pct:.2}% (>= 95.0%, |{pct:.2} - {REFERENCE_FLOPS_PCT_3_5}| <= 2.0), {} episodes ({} accepted) in {secs:.0} s",
            r.summary.test_err,
            c.base.flops,
            c.pruned.flops,
            r.summary.episodes,
            r.summary.accepted
        ),
    );

    // Properties from the same run.
    let accepted: Vec<_> = r.logs.iter().filter(|l| l.accepted).collect();
    let monotone = accepted.iter().all(|l| l.flops_after < l.flops_before)
        && accepted.windows(2).all(|w| w[1].flops_after < w[0].flops_after)
        && accepted
            .iter()
            .all(|l| l.err_after.unwrap() <= l.base_err + cfg.epsilon);
    s.check(
        "property: accepted-path monotonicity",
        monotone,
        format!(
            "{} accepted episodes, FLOPs strictly falling, validation error within baseline + epsilon",
            accepted.len()
        ),
    );
    let (before, after) = (&r.summary.max_abs_rho_before, &r.summary.max_abs_rho_after);
    let lower = before
        .iter()
        .zip(after)
        .all(|(b, a)| matches!((b, a), (Some(b), Some(a)) if a < b));
    s.check(
        "property: residual correlation",
        lower,
        format!("max |rho| per conv layer {before:.3?} -> {after:.3?}"),
    );
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn criterion_3(s: &mut Suite) {
    let mut rng = seeded(3);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut largest = (0, 0);
    for i in 0..50 {
        let (rows, cols) = if i == 0 {
            (64, 512)
        } else {
            (rng.random_range(2..=64), rng.random_range(2..=512))
        };
        largest = largest.max((rows, cols));
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fm = FilterMatrix {
            layer_index: 0,
            rows,
            cols,
            data,
        };
        let m = corr_matrix(&fm).unwrap();
        for a in 0..rows {
            for b in 0..rows {
                let want = if a == b {
                    1.0
                } else {
                    naive_pearson(fm.row(a), fm.row(b))
                };
                worst = worst.max((m.get(a, b) - want).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    s.check(
        "3 correlation oracle",
        worst <= 1e-12,
        format!("max |diff| {worst:.2e} (<= 1e-12) over 50 matrices up to {largest:?}, {secs:.2} s"),
    );
}

fn randomize(net: &mut Network, rng: &mut Rng) {
    for c in net.param_coords() {
        *net.param_mut(c).unwrap() = rng.random_range(-0.5..0.5);
    }
}

fn criterion_4(s: &mut Suite) {
    let mut rng = seeded(4);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    let mut episodes = 0;
    for e in 0..12 {
        let mut net = Network::lenet(4 + e % 5, 6 + e % 4, 8, &mut rng);
        randomize(&mut net, &mut rng);
        let quotas = vec![rng.random_range(0..=2), rng.random_range(1..=3)];
        let ep = select_episode(&net, &quotas, e).unwrap();
        let grads = reg_grad(&net, &ep).unwrap();
        // Probe coordinates inside the selected filters, where the gradient lives.
        let mut picks = Vec::new();
        for p in ep.pairs() {
            let volume = net.conv(p.layer).unwrap().kernel_volume();
            for f in [p.a, p.b] {
                for _ in 0..3 {
                    picks.push(ParamCoord {
                        layer: p.layer,
                        kind: ParamKind::Weight,
                        index: f * volume + rng.random_range(0..volume),
                    });
                }
            }
        }
        for c in picks {
            let numeric = central_difference(&mut net, c, 1e-6, |n| reg_value(n, &ep)).unwrap();
            worst = worst.max(relative_error(grads.get(c).unwrap(), numeric));
            coords += 1;
        }
        episodes += 1;
    }
    s.check(
        "4 regularizer gradient",
        worst <= 1e-5 && coords >= 100 && episodes >= 10,
        format!(
            "max relative error {worst:.2e} (<= 1e-5) on {coords} coordinates across {episodes} episodes, h = 1e-6"
        ),
    );
}

fn criterion_5(s: &mut Suite) {
    let cfg = RegConfig {
        opt_lr: 0.05,
        momentum: 0.0,
        max_steps: Some(500),
        target_rho: 0.99,
        ..RegConfig::default()
    };
    let mut results = Vec::new();
    let mut ok = true;
    for seed in 0..6u64 {
        let net = Network::lenet5(&mut seeded(500 + seed));
        let quotas = if seed % 2 == 0 { vec![1, 0] } else { vec![0, 1] };
        let ep = select_episode(&net, &quotas, 0).unwrap();
        let pair = *ep.pairs().next().unwrap();
        let (opt, trace) = optimize_episode(&net, &ep, &cfg, None, seed).unwrap();
        let after = pair_rho(&opt, &pair).unwrap();
        let steps = trace.last().unwrap().step;
        ok &= pair.rho < 0.7 && after >= 0.99 && steps <= 500;
        results.push(format!("{:.3}->{:.4}@{steps}", pair.rho, after));
    }
    s.check(
        "5 optimization effect",
        ok,
        format!(
            "rho < 0.7 -> >= 0.99 within 500 steps (lr 0.05), 6 seeds: {}",
            results.join(" ")
        ),
    );
}

fn lowest_episode(net: &Network, layer: usize, count: usize) -> Episode {
    let pairs = select_lowest(net, layer, count).unwrap();
    Episode {
        index: 0,
        layers: vec![LayerPairs {
            layer,
            requested: count,
            shortfall: pairs.len() < count,
            pairs,
            degenerate: vec![],
        }],
    }
}

fn criterion_6(s: &mut Suite, dir: Option<&Path>) {
    let name = "6 ablation (highest vs lowest rho)";
    let Some(dir) = dir else {
        s.record(name, Verdict::Skip("MNIST not found".into()));
        return;
    };
    let mut high = Vec::new();
    let mut low = Vec::new();
    for seed in 0..5u64 {
        let cfg = PruneConfig {
            seed: 60 + seed,
            train_limit: Some(10_000),
            train_epochs: 3.0,
            ..mnist_config(dir)
        };
        let (net, _) = baseline("ablation", &cfg);
        let test = cfg.load_splits().unwrap().test;
        let err = error_rate(&net, &test).unwrap();
        let drop = |ep: &Episode| {
            let plan = choose_victims(ep, &net).unwrap();
            assert_eq!(plan.num_victims(), 5);
            error_rate(&prune_filters(&net, &plan).unwrap(), &test).unwrap() - err
        };
        high.push(drop(&select_episode(&net, &[5, 0], 0).unwrap()));
        low.push(drop(&lowest_episode(&net, 0, 5)));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mh, ml) = (mean(&high), mean(&low));
    s.check(
        name,
        mh <= ml,
        format!(
            "mean immediate error increase {mh:.2} pp (highest) <= {ml:.2} pp (lowest), 5 conv1 victims, 5 seeds; per seed {high:.2?} vs {low:.2?}"
        ),
    );
}

fn criterion_7(s: &mut Suite) {
    let mut rng = seeded(7);
    let mut identical = 0;
    let mut total = 0;
    for trial in 0..4 {
        let mut net = Network::lenet5(&mut rng);
        let (layer, victims): (usize, Vec<usize>) = match trial {
            0 => (0, vec![3]),
            1 => (2, vec![0, 17, 49]),
            2 => (0, vec![0, 5, 19]),
            _ => (2, vec![21]),
        };
        // Zero everything downstream that reads the victims' channels.
        match layer {
            0 => {
                if let Layer::Conv2d(c) = &mut net.layers[2] {
                    let (c_in, plane) = (c.c_in, c.k_h * c.k_w);
                    let w = c.weights.data_mut();
                    for f in 0..c.c_out {
                        for &v in &victims {
                            let start = (f * c_in + v) * plane;
                            w[start..start + plane].iter_mut().for_each(|x| *x = 0.0);
                        }
                    }
                }
            }
            _ => {
                if let Layer::Dense(d) = &mut net.layers[5] {
                    let n_in = d.n_in;
                    let w = d.weights.data_mut();
                    for o in 0..d.n_out {
                        for &v in &victims {
                            w[o * n_in + v * 16..o * n_in + v * 16 + 16]
                                .iter_mut()
                                .for_each(|x| *x = 0.0);
                        }
                    }
                }
            }
        }
        let pruned = prune_filters(&net, &PrunePlan::single(layer, victims)).unwrap();
        for _ in 0..25 {
            let x = Tensor::new(vec![1, 1, 28, 28], (0..784).map(|_| rng.random()).collect()).unwrap();
            let (a, b) = (net.forward(&x).unwrap(), pruned.forward(&x).unwrap());
            total += 1;
            if a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
                identical += 1;
            }
        }
    }
    s.check(
        "7 surgery exactness",
        identical == total && total >= 100,
        format!("{identical}/{total} random inputs give bit-identical logits"),
    );
}

fn prune_to(net: &Network, c1: usize, c2: usize) -> Network {
    let mut plan = PrunePlan::default();
    plan.layers.insert(0, (c1..20).collect());
    plan.layers.insert(2, (c2..50).collect());
    prune_filters(net, &plan).unwrap()
}

fn criterion_8(s: &mut Suite) {
    let net = Network::lenet5(&mut seeded(8));
    let r = cost_report(&net, 1).unwrap();
    let shapes = net.input_shapes().unwrap();
    let outs = net.shapes().unwrap();
    let (_, conv1_w) = memory_layer(&net.layers[0], &shapes[0], &outs[0], 1).unwrap();
    let small = flops_total(&prune_to(&net, 3, 5), 1).unwrap();
    let got = [r.layers[0].flops, conv1_w, r.layers[5].flops, r.flops, small];
    let want = [288_000, 2_000, 400_000, 2_293_000, 112_200];
    let pct = compression_report(&net, &prune_to(&net, 3, 5), 1)
        .unwrap()
        .flops_reduction_pct;
    s.check(
        "8 cost-model goldens",
        got == want,
        format!(
            "conv1 FLOPs {}, conv1 M_w {} B, fc1 FLOPs {}, total {}, (3,5) total {} ({pct:.2}% reduction)",
            got[0], got[1], got[2], got[3], got[4]
        ),
    );
}

fn criterion_9(s: &mut Suite) {
    let cfg = PruneConfig {
        seed: 9,
        dataset: DatasetKind::Synthetic,
        synth_train: 1200,
        val_size: 300,
        synth_test: 300,
        train_epochs: 2.0,
        epsilon: 2.0,
        opt_epochs: 0.25,
        finetune_epochs: 0.5,
        final_finetune_epochs: 0.5,
        max_episodes: 4,
        ..PruneConfig::default()
    };
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-determinism");
    let _ = std::fs::remove_dir_all(&root);
    let (a, b) = (root.join("a"), root.join("b"));
    let ra = run_full_pipeline(cfg.clone(), &a, None).unwrap();
    run_full_pipeline(cfg, &b, None).unwrap();
    let same = |f: &str| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap();
    s.check(
        "9 determinism",
        same(LOG_FILE) && same(FINAL_FILE),
        format!(
            "two LeNet-5 runs on synthetic digits, {} episodes, final filters {:?}: episode logs and final checkpoint byte-identical",
            ra.logs.len(),
            ra.network.filter_counts()
        ),
    );
}

fn main() {
    // `cargo test -- <filter>` and friends pass arguments; listing must not run anything.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut suite = Suite { lines: vec![] };
    let dir = mnist_dir();
    let quick = flag("CFP_ACCEPTANCE_QUICK");
    println!(
        "acceptance suite (MNIST: {})",
        dir.as_deref().map_or("not found".into(), |d| d.display().to_string())
    );

    criterion_3(&mut suite);
    criterion_4(&mut suite);
    criterion_5(&mut suite);
    criterion_7(&mut suite);
    criterion_8(&mut suite);
    criterion_9(&mut suite);
    let full = criterion_1(&mut suite, dir.as_deref(), quick);
    criterion_6(&mut suite, dir.as_deref());
    criterion_2(&mut suite, dir.as_deref(), full);

    let failed: Vec<&str> = suite
        .lines
        .iter()
        .filter(|(n, v)| matches!(v, Verdict::Fail(_)) && !n.starts_with("property"))
        .map(|(n, _)| n.as_str())
        .collect();
    let count = |property: bool, f: fn(&Verdict) -> bool| {
        suite
            .lines
            .iter()
            .filter(|(n, v)| n.starts_with("property") == property && f(v))
            .count()
    };
    let pass = |v: &Verdict| matches!(v, Verdict::Pass(_));
    let fail = |v: &Verdict| matches!(v, Verdict::Fail(_));
    let skip = |v: &Verdict| matches!(v, Verdict::Skip(_));
    println!(
        "acceptance: {} passed, {} failed, {} skipped; properties: {} held, {} did not",
        count(false, pass),
        count(false, fail),
        count(false, skip),
        count(true, pass),
        count(true, fail)
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
