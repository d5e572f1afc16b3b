//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Failures are reported but do not fail the process unless
//! `MDMIL_ACCEPTANCE_STRICT=1` is set. `MDMIL_ACCEPTANCE_SKIP` takes a
//! comma-separated list of criterion numbers to skip.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mdmil_core::bagstore::{gen_synthetic, FeatureBag, Split, SplitRatios, SyntheticSpec};
use mdmil_core::iqgm::{confidence_factor, generate_iq, IqgmConfig, InstanceProbs};
use mdmil_core::mdm::{self, MdmConfig};
use mdmil_core::memloss::{check_loss_gradients, contrastive_loss, LossCheck, MemoryBank};
use mdmil_core::nnprims::{Binder, Tape, Tensor};
use mdmil_core::trainer::{auc, cosine_lr, fit, LossConfig, Method, MetricsReport, TrainConfig};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const IQ_CASES: usize = 1000;
const IQ_TOL: f64 = 1e-12;
const IQ_BUDGET: Duration = Duration::from_secs(30);
const ATTN_BAGS: usize = 200;
const ROW_SUM_TOL: f64 = 1e-6;
const PERM_TOL: f64 = 1e-6;
const BANK_UPDATES: usize = 10_000;
const NORM_TOL: f64 = 1e-9;
const LOW_RATE_MIN_AUC: f64 = 0.90;
const LOW_RATE_MARGIN: f64 = 0.05;
const LOW_RATE_EPOCHS: usize = 200;
const HIGH_RATE_MIN_ACC: f64 = 0.95;
const HIGH_RATE_MIN_AUC: f64 = 0.97;
const HIGH_RATE_EPOCHS: usize = 100;
const BENCH_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const ABLATION_SLACK: f64 = 0.02;
const UNIT_TOL: f64 = 1e-6;

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String) {
        println!("{} criterion {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id);
        }
    }
}

fn low_rate_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        bags_per_class: vec![165, 165],
        n_min: 30,
        n_max: 80,
        feature_dim: 32,
        witness_rate: 0.05,
        separation: 2.0,
        noise: 0.5,
        split: SplitRatios {
            train: 100.0 / 165.0,
            val: 25.0 / 165.0,
            test: 40.0 / 165.0,
        },
        seed,
    }
}

fn high_rate_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        bags_per_class: vec![40, 160, 100],
        witness_rate: 0.8,
        split: SplitRatios::default(),
        ..low_rate_spec(seed)
    }
}

fn bench_model(input_dim: usize, num_classes: usize) -> MdmConfig {
    MdmConfig {
        input_dim,
        model_dim: 16,
        num_heads: 4,
        num_classes,
        ffn_expansion: 2,
        ..MdmConfig::default()
    }
}

fn bench_train(method: Method, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: 1e-3,
        seed,
        method,
        ..TrainConfig::default()
    }
}

struct Data {
    train: Vec<FeatureBag>,
    val: Vec<FeatureBag>,
    test: Vec<FeatureBag>,
    classes: usize,
}

fn make_data(spec: &SyntheticSpec, dir: &Path) -> Data {
    let ds = gen_synthetic(spec, dir).expect("synthetic data");
    Data {
        train: ds.manifest.load_split(Split::Train).unwrap(),
        val: ds.manifest.load_split(Split::Val).unwrap(),
        test: ds.manifest.load_split(Split::Test).unwrap(),
        classes: spec.num_classes(),
    }
}

struct RunResult {
    test: MetricsReport,
    elapsed: Duration,
}

fn run(data: &Data, method: Method, iq: IqgmConfig, loss: LossConfig, epochs: usize, seed: u64) -> RunResult {
    let t = Instant::now();
    let mdm_cfg = bench_model(data.train[0].feature_dim(), data.classes);
    let out = fit(&mdm_cfg, &iq, &loss, &bench_train(method, epochs, seed), &data.train, &data.val)
        .expect("training");
    let test = out.best.evaluate(&data.test).expect("evaluation");
    RunResult {
        test,
        elapsed: t.elapsed(),
    }
}

fn metrics_bytes(r: &MetricsReport, dir: &Path, name: &str) -> Vec<u8> {
    let path = dir.join(name);
    r.write_metrics_csv(&path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    let ppath = dir.join(format!("pred_{name}"));
    r.write_predictions_csv(&ppath).unwrap();
    bytes.extend(fs::read(&ppath).unwrap());
    bytes
}

fn criterion_1(rep: &mut Report) {
    let t = Instant::now();
    let blocks = check_loss_gradients(&LossCheck::default()).expect("gradient check");
    let elapsed = t.elapsed();
    let worst = blocks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let setup = LossCheck::default();
    let expected = mdm::init_params(&setup.mdm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let covered = expected.names().all(|w| blocks.iter().any(|b| b.name == w));
    rep.line(
        1,
        "gradient fidelity",
        worst.max_rel_error < GRAD_TOL && elapsed < GRAD_BUDGET && covered,
        format!(
            "{} blocks, worst {} at {:.2e} (< {GRAD_TOL:e}), {:.1}s (< {}s)",
            blocks.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    );
}

struct OracleIq {
    iq: Vec<Vec<f64>>,
    confident: Option<usize>,
}

fn oracle_iq(p: &[Vec<f64>], f: &[Vec<f64>], r1: f64, r2: f64, beta: f64) -> OracleIq {
    let n = p.len();
    let classes = p[0].len();
    let k_of = |r: f64| {
        let k = (r * n as f64).floor() as usize;
        k.max(1).min(n)
    };
    let (k1, k2) = (k_of(r1), k_of(r2));
    let mut orders = Vec::new();
    let mut cf = Vec::new();
    for c in 0..classes {
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                if p[remaining[j]][c] > p[remaining[best]][c] {
                    best = j;
                }
            }
            order.push(remaining.remove(best));
        }
        let top: Vec<f64> = order[..k1].iter().map(|&i| p[i][c]).collect();
        let mean = top.iter().sum::<f64>() / k1 as f64;
        let var = top.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k1 as f64;
        cf.push(mean - var.sqrt());
        orders.push(order);
    }
    let mut star = 0;
    for c in 1..classes {
        if cf[c] > cf[star] {
            star = c;
        }
    }
    let confident = (0..classes).all(|j| j == star || cf[star] - beta > cf[j]).then_some(star);
    let d = f[0].len();
    let iq = (0..classes)
        .map(|c| {
            let k = if confident == Some(c) { k1 } else { k2 };
            let mut row = vec![0.0; d];
            for &i in &orders[c][..k] {
                for (r, x) in row.iter_mut().zip(&f[i]) {
                    *r += x / k as f64;
                }
            }
            row
        })
        .collect();
    OracleIq { iq, confident }
}

fn criterion_2(rep: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut mismatched, mut confident_cases) = (0.0f64, 0usize, 0usize);
    for _ in 0..IQ_CASES {
        let n = rng.gen_range(1..=60);
        let classes = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=8);
        let logits = Tensor::from_fn(n, classes, |_, _| rng.gen_range(-4.0..4.0));
        let probs = InstanceProbs::from_logits(logits);
        let distinct = (0..classes).all(|c| {
            let mut col: Vec<f64> = (0..n).map(|r| probs.probs.get(r, c)).collect();
            col.sort_by(f64::total_cmp);
            col.windows(2).all(|w| w[0] != w[1])
        });
        assert!(distinct, "random logits produced tied probabilities");
        let f = Tensor::from_fn(n, d, |_, _| rng.gen_range(-3.0..3.0));
        let r1 = rng.gen_range(0.02..=1.0);
        let r2 = rng.gen_range(0.01..=r1);
        let beta = rng.gen_range(-0.1..=0.1);
        let got = generate_iq(&probs, &f, &IqgmConfig { r1, r2, beta }).unwrap();
        let prow: Vec<Vec<f64>> = (0..n).map(|r| probs.probs.row(r).to_vec()).collect();
        let frow: Vec<Vec<f64>> = (0..n).map(|r| f.row(r).to_vec()).collect();
        let want = oracle_iq(&prow, &frow, r1, r2, beta);
        if got.confident_subtype != want.confident {
            mismatched += 1;
        }
        confident_cases += want.confident.is_some() as usize;
        for (c, row) in want.iq.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                worst = worst.max((got.iq.get(c, j) - v).abs());
            }
        }
    }
    let elapsed = t.elapsed();
    rep.line(
        2,
        "internal query oracle",
        worst <= IQ_TOL && mismatched == 0 && elapsed < IQ_BUDGET,
        format!(
            "{IQ_CASES} cases ({confident_cases} confident), max diff {worst:.1e} (<= {IQ_TOL:e}), branch mismatches {mismatched}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_3(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_sum, mut worst_perm) = (0.0f64, 0.0f64);
    let mut bitwise_ok = true;
    for _ in 0..ATTN_BAGS {
        let classes = rng.gen_range(2..=4);
        let cfg = MdmConfig {
            input_dim: 8,
            model_dim: 8,
            num_heads: 2,
            num_classes: classes,
            ffn_expansion: 2,
            ..MdmConfig::default()
        };
        let params = mdm::init_params(&cfg, &mut rng).unwrap();
        let n = rng.gen_range(1..=40);
        let f = Tensor::from_fn(n, 8, |_, _| rng.gen_range(-2.0..2.0));
        let iq = IqgmConfig::default();
        let forward = |cfg: &MdmConfig, f: &Tensor| {
            let mut tape = Tape::new();
            let mut b = Binder::new(&params);
            let x = tape.constant(f.clone());
            let fw = mdm::forward(&mut tape, &mut b, cfg, &iq, x).unwrap();
            (fw.record, tape.value(fw.bag_repr).clone())
        };
        let (rec, repr) = forward(&cfg, &f);
        for m in rec.mt1.iter().chain(&rec.mt2).chain(&rec.combined).chain(&rec.self_attention) {
            for r in 0..m.rows() {
                worst_sum = worst_sum.max((m.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        for (alpha, pick_mt1) in [(1.0, true), (0.0, false)] {
            let (rec, _) = forward(&MdmConfig { alpha, ..cfg.clone() }, &f);
            let target = if pick_mt1 { &rec.mt1 } else { &rec.mt2 };
            for (a, b) in rec.combined.iter().zip(target) {
                let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                bitwise_ok &= same;
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (_, repr_p) = forward(&cfg, &f.select_rows(&perm));
        for (a, b) in repr.data().iter().zip(repr_p.data()) {
            worst_perm = worst_perm.max((a - b).abs());
        }
    }
    rep.line(
        3,
        "attention invariants",
        worst_sum < ROW_SUM_TOL && worst_perm < PERM_TOL && bitwise_ok,
        format!(
            "{ATTN_BAGS} bags, row-sum error {worst_sum:.1e} (< {ROW_SUM_TOL:e}), permutation diff {worst_perm:.1e} (< {PERM_TOL:e}), alpha endpoints bitwise {bitwise_ok}"
        ),
    );
}

fn criterion_4(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (classes, dim) = (4, 16);
    let c = Tensor::from_fn(classes, dim, |_, _| rng.gen_range(-1.0..1.0));
    let mut bank = MemoryBank::new(c, 0.9, 0.5).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..BANK_UPDATES {
        bank.momentum = rng.gen_range(0.0..0.999);
        let k = rng.gen_range(0..classes);
        let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
        bank.update(k, &f).unwrap();
        for r in 0..classes {
            let norm = bank.centers().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max((norm - 1.0).abs());
        }
    }
    let mut monotone = true;
    for m in [0.5, 0.9, 0.99] {
        let c = Tensor::from_fn(1, dim, |_, _| rng.gen_range(-1.0..1.0));
        let mut b = MemoryBank::new(c, m, 0.5).unwrap();
        let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = |b: &MemoryBank| {
            b.centers().row(0).iter().zip(&f).map(|(c, x)| (c - x / norm).powi(2)).sum::<f64>().sqrt()
        };
        let mut prev = dist(&b);
        for _ in 0..500 {
            b.update(0, &f).unwrap();
            let d = dist(&b);
            monotone &= d <= prev;
            prev = d;
        }
    }
    rep.line(
        4,
        "memory bank invariants",
        worst < NORM_TOL && monotone,
        format!("{BANK_UPDATES} updates, worst norm error {worst:.1e} (< {NORM_TOL:e}), monotone shrink for m in 0.5/0.9/0.99: {monotone}"),
    );
}

struct LowRate {
    full_seed1: RunResult,
}

fn criterion_5(rep: &mut Report, scratch: &Path) -> LowRate {
    let data = make_data(&low_rate_spec(1), &scratch.join("c5"));
    let counts = (data.train.len(), data.val.len(), data.test.len());
    let full = run(&data, Method::Mdmil, IqgmConfig::default(), LossConfig::default(), LOW_RATE_EPOCHS, 1);
    let mean = run(&data, Method::MeanPool, IqgmConfig::default(), LossConfig::default(), LOW_RATE_EPOCHS, 1);
    let (a, b) = (full.test.auc, mean.test.auc);
    rep.line(
        5,
        "low witness rate benchmark",
        counts == (200, 50, 80) && a >= LOW_RATE_MIN_AUC && a >= b + LOW_RATE_MARGIN && full.elapsed < BENCH_BUDGET,
        format!(
            "split {counts:?}, mdmil test auc {a:.4} (>= {LOW_RATE_MIN_AUC}), mean-pool auc {b:.4} (needs <= {:.4}), {:.1}s",
            a - LOW_RATE_MARGIN,
            full.elapsed.as_secs_f64() + mean.elapsed.as_secs_f64()
        ),
    );
    LowRate { full_seed1: full }
}

fn criterion_6(rep: &mut Report, scratch: &Path) -> RunResult {
    let data = make_data(&high_rate_spec(1), &scratch.join("c6"));
    let r = run(&data, Method::Mdmil, IqgmConfig::default(), LossConfig::default(), HIGH_RATE_EPOCHS, 1);
    rep.line(
        6,
        "high witness rate benchmark",
        r.test.accuracy >= HIGH_RATE_MIN_ACC && r.test.auc >= HIGH_RATE_MIN_AUC && r.elapsed < BENCH_BUDGET,
        format!(
            "{} test bags, accuracy {:.4} (>= {HIGH_RATE_MIN_ACC}), macro auc {:.4} (>= {HIGH_RATE_MIN_AUC}), {:.1}s",
            data.test.len(),
            r.test.accuracy,
            r.test.auc,
            r.elapsed.as_secs_f64()
        ),
    );
    r
}

fn criterion_7(rep: &mut Report, scratch: &Path, seed1: Option<&RunResult>) {
    let base = IqgmConfig::default();
    let uniform = IqgmConfig {
        r1: base.r2,
        r2: base.r2,
        beta: 1.0,
    };
    let no_cl = LossConfig {
        alpha_cl: 0.0,
        ..LossConfig::default()
    };
    let mut sums = [0.0f64; 3];
    let mut rows = Vec::new();
    for seed in ABLATION_SEEDS {
        let data = make_data(&low_rate_spec(seed), &scratch.join(format!("c7_{seed}")));
        let full = match (seed, seed1) {
            (1, Some(r)) => r.test.auc,
            _ => run(&data, Method::Mdmil, base, LossConfig::default(), LOW_RATE_EPOCHS, seed).test.auc,
        };
        let a = run(&data, Method::Mdmil, base, no_cl, LOW_RATE_EPOCHS, seed).test.auc;
        let b = run(&data, Method::Mdmil, uniform, LossConfig::default(), LOW_RATE_EPOCHS, seed).test.auc;
        sums[0] += full;
        sums[1] += a;
        sums[2] += b;
        rows.push(format!("s{seed} {full:.3}/{a:.3}/{b:.3}"));
    }
    let k = ABLATION_SEEDS.len() as f64;
    let [full, no_cl, uni] = sums.map(|s| s / k);
    rep.line(
        7,
        "ablation direction",
        full >= no_cl - ABLATION_SLACK && full >= uni - ABLATION_SLACK,
        format!(
            "mean test auc full {full:.4}, no contrastive {no_cl:.4}, uniform top-K2 {uni:.4} (slack {ABLATION_SLACK}); full/no-cl/uniform per seed: {}",
            rows.join(", ")
        ),
    );
}

fn criterion_8(rep: &mut Report, scratch: &Path, low: Option<&RunResult>, high: Option<&RunResult>) {
    let dir = scratch.join("c8");
    fs::create_dir_all(&dir).unwrap();
    let first_low = match low {
        Some(r) => metrics_bytes(&r.test, &dir, "low_a.csv"),
        None => {
            let data = make_data(&low_rate_spec(1), &scratch.join("c8_low_a"));
            let r = run(&data, Method::Mdmil, IqgmConfig::default(), LossConfig::default(), LOW_RATE_EPOCHS, 1);
            metrics_bytes(&r.test, &dir, "low_a.csv")
        }
    };
    let first_high = match high {
        Some(r) => metrics_bytes(&r.test, &dir, "high_a.csv"),
        None => {
            let data = make_data(&high_rate_spec(1), &scratch.join("c8_high_a"));
            let r = run(&data, Method::Mdmil, IqgmConfig::default(), LossConfig::default(), HIGH_RATE_EPOCHS, 1);
            metrics_bytes(&r.test, &dir, "high_a.csv")
        }
    };
    let data = make_data(&low_rate_spec(1), &scratch.join("c8_low_b"));
    let r = run(&data, Method::Mdmil, IqgmConfig::default(), LossConfig::default(), LOW_RATE_EPOCHS, 1);
    let second_low = metrics_bytes(&r.test, &dir, "low_b.csv");
    let data = make_data(&high_rate_spec(1), &scratch.join("c8_high_b"));
    let r = run(&data, Method::Mdmil, IqgmConfig::default(), LossConfig::default(), HIGH_RATE_EPOCHS, 1);
    let second_high = metrics_bytes(&r.test, &dir, "high_b.csv");
    let (same_low, same_high) = (first_low == second_low, first_high == second_high);
    rep.line(
        8,
        "determinism",
        same_low && same_high,
        format!(
            "low-rate metrics identical {same_low} ({} bytes), high-rate metrics identical {same_high} ({} bytes)",
            first_low.len(),
            first_high.len()
        ),
    );
}

fn criterion_9(rep: &mut Report) {
    let lr = cosine_lr(0, 200, 2e-4);
    let cf = confidence_factor(&[0.9, 0.8, 0.7]).unwrap().cf;
    let bank = MemoryBank::new(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]), 0.9, 1.0).unwrap();
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::row_vector(&[1.0, 0.0]));
    let l = contrastive_loss(&mut tape, f, &bank, 0).unwrap();
    let cl = tape.scalar(l);
    let a = auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    let pass = lr == 2e-4 && (cf - 0.718350).abs() <= UNIT_TOL && (cl - 0.313262).abs() <= UNIT_TOL && a == 0.75;
    rep.line(
        9,
        "unit values",
        pass,
        format!("cosine_lr(0) {lr:e}, confidence factor {cf:.6}, contrastive {cl:.6}, auc {a}"),
    );
}

fn main() {
    let skip: HashSet<u32> = std::env::var("MDMIL_ACCEPTANCE_SKIP")
        .unwrap_or_default()
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();
    let strict = std::env::var("MDMIL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let scratch = tempfile::tempdir().expect("scratch dir");
    let mut rep = Report { failed: Vec::new() };
    let on = |id: u32| {
        let run = !skip.contains(&id);
        if !run {
            println!("SKIP criterion {id}");
        }
        run
    };

    if on(1) {
        criterion_1(&mut rep);
    }
    if on(2) {
        criterion_2(&mut rep);
    }
    if on(3) {
        criterion_3(&mut rep);
    }
    if on(4) {
        criterion_4(&mut rep);
    }
    let low = on(5).then(|| criterion_5(&mut rep, scratch.path()));
    let high = on(6).then(|| criterion_6(&mut rep, scratch.path()));
    let low_run = low.as_ref().map(|l| &l.full_seed1);
    if on(7) {
        criterion_7(&mut rep, scratch.path(), low_run);
    }
    if on(8) {
        criterion_8(&mut rep, scratch.path(), low_run, high.as_ref());
    }
    if on(9) {
        criterion_9(&mut rep);
    }

    if rep.failed.is_empty() {
        println!("acceptance: all criteria run passed");
    } else {
        println!("acceptance: failed criteria {:?}", rep.failed);
        if strict {
            std::process::exit(1);
        }
    }
}
