//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use fedcal_core::engine::{client_seed, init_seed};
use fedcal_core::harness::{self, DatasetConfig, ExperimentConfig, PartitionConfig, RunOptions};
use fedcal_core::losses::{self, AuxKind, LossKind};
use fedcal_core::metrics;
use fedcal_core::model::{self, Batch, ModelSpec, ParameterSet};
use fedcal_core::partition::{self, Dataset, PartitionPlan, PartitionScheme};
use fedcal_core::similarity::{self, DeltaSimilarity, SimKind};
use fedcal_core::{
    BetaRule, CalibrationPolicy, FlAlgorithm, LocalTraining, ParameterDelta, SgdConfig, SimulationConfig, Simulator,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn max_abs_diff(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let h = 1e-5;
    let cases: Vec<(&str, LossKind, AuxKind, f64)> = vec![
        ("ce", LossKind::CrossEntropy, AuxKind::None, 0.0),
        ("focal2", LossKind::Focal { gamma: 2.0 }, AuxKind::None, 0.0),
        ("ls0.1", LossKind::LabelSmoothing { alpha: 0.1 }, AuxKind::None, 0.0),
        ("brier", LossKind::Brier, AuxKind::None, 0.0),
        ("ce+0.5dca", LossKind::CrossEntropy, AuxKind::Dca, 0.5),
        ("ce+1dca", LossKind::CrossEntropy, AuxKind::Dca, 1.0),
        ("ce+0.5mdca", LossKind::CrossEntropy, AuxKind::Mdca, 0.5),
        ("ce+1mdca", LossKind::CrossEntropy, AuxKind::Mdca, 1.0),
    ];
    let spec = ModelSpec::new(vec![6, 10, 4]).unwrap();
    let mut worst = (0.0, String::new());
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut params = model::init_model(&spec, seed);
        // Nonzero biases so every parameter group is exercised away from init.
        let mut flat = params.flatten();
        for v in flat.iter_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        params = ParameterSet::unflatten(&spec, &flat).unwrap();
        let n = 12;
        let features = gaussian(&mut rng, n, 6);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let batch = Batch::new(features, labels.clone()).unwrap();
        for (name, task, aux, beta) in &cases {
            let loss_at = |p: &ParameterSet| {
                let (logits, _) = model::forward(p, &batch).unwrap();
                losses::combined(*task, *aux, *beta, &model::softmax(&logits), &labels).loss
            };
            let (logits, cache) = model::forward(&params, &batch).unwrap();
            let value = losses::combined(*task, *aux, *beta, &model::softmax(&logits), &labels);
            let analytic = model::backward(&params, &cache, &value.grad_logits).unwrap().flatten();
            let numeric: Vec<f64> = (0..flat.len())
                .map(|i| {
                    let mut plus = flat.clone();
                    let mut minus = flat.clone();
                    plus[i] += h;
                    minus[i] -= h;
                    let fp = loss_at(&ParameterSet::unflatten(&spec, &plus).unwrap());
                    let fm = loss_at(&ParameterSet::unflatten(&spec, &minus).unwrap());
                    (fp - fm) / (2.0 * h)
                })
                .collect();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-300);
            if rel > worst.0 {
                worst = (rel, format!("{name} seed {seed}"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst.0 < 1e-4 && secs < 10.0,
        format!("gradient suite: max relative error {:.2e} ({}), {secs:.2} s", worst.0, worst.1),
    )
}

// ---------------------------------------------------------------- 2

/// Per-sample, per-bin membership with explicit interval tests.
fn in_bin(s: f64, i: usize, bins: usize) -> bool {
    let lower = (i - 1) as f64 / bins as f64;
    let upper = i as f64 / bins as f64;
    (s > lower || (i == 1 && s >= 0.0)) && s <= upper
}

fn brute_ece(probs: &Array2<f64>, labels: &[usize], bins: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 1..=bins {
        let (mut count, mut correct, mut conf) = (0usize, 0usize, 0.0);
        for (row, &label) in probs.rows().into_iter().zip(labels) {
            let mut pred = 0;
            for j in 1..row.len() {
                if row[j] > row[pred] {
                    pred = j;
                }
            }
            let s = row[pred];
            if in_bin(s, i, bins) {
                count += 1;
                conf += s;
                if pred == label {
                    correct += 1;
                }
            }
        }
        if count > 0 {
            let c = count as f64;
            total += c / n as f64 * (correct as f64 / c - conf / c).abs();
        }
    }
    total
}

fn brute_sce(probs: &Array2<f64>, labels: &[usize], bins: usize) -> f64 {
    let (n, k) = probs.dim();
    let mut total = 0.0;
    for j in 0..k {
        for i in 1..=bins {
            let (mut count, mut hits, mut conf) = (0usize, 0usize, 0.0);
            for r in 0..n {
                let p = probs[[r, j]];
                if in_bin(p, i, bins) {
                    count += 1;
                    conf += p;
                    if labels[r] == j {
                        hits += 1;
                    }
                }
            }
            if count > 0 {
                let c = count as f64;
                total += c / n as f64 * (hits as f64 / c - conf / c).abs();
            }
        }
    }
    total / k as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for inst in 0..50 {
        let n = rng.random_range(1..=50);
        let k = rng.random_range(2..=5);
        let scale = rng.random_range(0.1..4.0);
        let mut probs = model::softmax(&gaussian(&mut rng, n, k).mapv(|z| z * scale));
        // Put some confidences exactly on bin edges.
        if inst % 5 == 0 {
            for r in 0..n.min(3) {
                probs.row_mut(r).fill(0.25 / (k - 1) as f64);
                probs[[r, r % k]] = 0.75;
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (e, _) = metrics::ece(&probs, &labels, 20);
        let s = metrics::sce(&probs, &labels, 20);
        worst = worst
            .max((e - brute_ece(&probs, &labels, 20)).abs())
            .max((s - brute_sce(&probs, &labels, 20)).abs());
    }
    let hand = Array2::from_shape_vec((4, 2), vec![0.8, 0.2, 0.8, 0.2, 0.8, 0.2, 0.8, 0.2]).unwrap();
    let (hand_ece, _) = metrics::ece(&hand, &[0, 0, 1, 1], 20);
    outcome(
        worst <= 1e-12 && (hand_ece - 0.3).abs() <= 1e-12,
        format!("metric oracles: max diff {worst:.2e} over 50 instances, hand ECE {hand_ece}"),
    )
}

// ---------------------------------------------------------------- 3

struct SmallSetup {
    train: Dataset,
    test: Dataset,
    plan: PartitionPlan,
}

fn small_setup(clients: usize, scheme: PartitionScheme) -> SmallSetup {
    let train = partition::synth_gaussian(3, 5, 20, 0.8, 11).unwrap();
    let test = partition::synth_gaussian(3, 5, 10, 0.8, 12).unwrap();
    let plan = partition::partition(&train, clients, scheme, 13).unwrap();
    SmallSetup { train, test, plan }
}

fn small_config(algorithm: FlAlgorithm, policy: CalibrationPolicy, rounds: usize) -> SimulationConfig {
    SimulationConfig {
        spec: ModelSpec::new(vec![5, 8, 3]).unwrap(),
        algorithm,
        policy,
        sgd: SgdConfig {
            lr: 0.05,
            ..SgdConfig::default()
        },
        local: LocalTraining {
            epochs: 2,
            batch_size: 8,
        },
        rounds,
        participation: 1.0,
        bins: 20,
        seed: 5,
        threads: 1,
        measure_wall_clock: false,
    }
}

fn final_params(setup: &SmallSetup, config: SimulationConfig) -> ParameterSet {
    Simulator::new(config, &setup.train, &setup.test, &setup.plan)
        .run()
        .unwrap()
        .final_state
        .global
}

/// Plain minibatch SGD with coupled weight decay and momentum, following the
/// same visiting order the single client uses.
fn centralized_sgd(data: &Dataset, indices: &[usize], config: &SimulationConfig) -> ParameterSet {
    let spec = &config.spec;
    let mut w = model::init_model(spec, init_seed(config.seed)).flatten();
    let mut v = vec![0.0; w.len()];
    let sgd = config.sgd;
    for round in 1..=config.rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(client_seed(config.seed, round, 0));
        let mut order = indices.to_vec();
        for _ in 0..config.local.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.local.batch_size) {
                let params = ParameterSet::unflatten(spec, &w).unwrap();
                let batch = data.batch(chunk).unwrap();
                let (logits, cache) = model::forward(&params, &batch).unwrap();
                let n = chunk.len() as f64;
                let mut g = model::softmax(&logits);
                for (r, &y) in batch.labels.iter().enumerate() {
                    g[[r, y]] -= 1.0;
                }
                g.mapv_inplace(|x| x / n);
                let grad = model::backward(&params, &cache, &g).unwrap().flatten();
                for i in 0..w.len() {
                    v[i] = sgd.momentum * v[i] + grad[i] + sgd.weight_decay * w[i];
                    w[i] -= sgd.lr * v[i];
                }
            }
        }
    }
    ParameterSet::unflatten(spec, &w).unwrap()
}

fn algorithm_reductions() -> Outcome {
    let plain = CalibrationPolicy::uncalibrated();
    let iid = small_setup(4, PartitionScheme::Iid);
    assert!(iid.plan.sizes().iter().all(|&s| s == 15));
    let fedavg = final_params(&iid, small_config(FlAlgorithm::FedAvg, plain, 3));
    let prox = max_abs_diff(&fedavg, &final_params(&iid, small_config(FlAlgorithm::FedProx { mu: 0.0 }, plain, 3)));
    let nova = max_abs_diff(&fedavg, &final_params(&iid, small_config(FlAlgorithm::FedNova, plain, 3)));

    let fedavg_one = final_params(&iid, small_config(FlAlgorithm::FedAvg, plain, 1));
    let dyn_one = final_params(&iid, small_config(FlAlgorithm::FedDyn { alpha: 1e-12 }, plain, 1));
    let dynamic = max_abs_diff(&fedavg_one, &dyn_one);

    let single = small_setup(1, PartitionScheme::Iid);
    let config = small_config(FlAlgorithm::FedAvg, plain, 4);
    let oracle = centralized_sgd(&single.train, &single.plan.clients[0], &config);
    let central = max_abs_diff(&oracle, &final_params(&single, config));

    let worst = prox.max(nova).max(dynamic).max(central);
    outcome(
        worst <= 1e-9,
        format!(
            "algorithm reductions: fedprox(0) {prox:.1e}, fednova {nova:.1e}, feddyn(1e-12) {dynamic:.1e}, centralized {central:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

struct One;

impl DeltaSimilarity for One {
    fn similarity(&self, _: Option<&ParameterDelta>, _: &ParameterDelta) -> fedcal_core::Result<f64> {
        Ok(1.0)
    }
}

fn nucfl_reduction() -> Outcome {
    let setup = small_setup(4, PartitionScheme::Dirichlet { alpha: 0.5 });
    let policy = |beta_rule| CalibrationPolicy {
        task: LossKind::CrossEntropy,
        aux: AuxKind::Dca,
        beta_rule,
    };
    let stubbed = Simulator::new(
        small_config(FlAlgorithm::FedAvg, policy(BetaRule::Nucfl { sim: SimKind::Cosine }), 4),
        &setup.train,
        &setup.test,
        &setup.plan,
    )
    .with_similarity(Arc::new(One))
    .run()
    .unwrap();
    let fixed = Simulator::new(
        small_config(FlAlgorithm::FedAvg, policy(BetaRule::Fixed { beta: 1.0 }), 4),
        &setup.train,
        &setup.test,
        &setup.plan,
    )
    .run()
    .unwrap();
    let same_history = stubbed.history == fixed.history;
    let same_csv = harness::results_csv(&stubbed.history).unwrap() == harness::results_csv(&fixed.history).unwrap();
    let same_params = stubbed.final_state.global == fixed.final_state.global;
    outcome(
        same_history && same_csv && same_params,
        format!("nucfl with unit similarity: history identical {same_history}, csv {same_csv}, params {same_params}"),
    )
}

// ---------------------------------------------------------------- 5

fn random_orthogonal(rng: &mut ChaCha8Rng, p: usize) -> Array2<f64> {
    let mut q = gaussian(rng, p, p);
    for j in 0..p {
        for k in 0..j {
            let dot = q.column(j).dot(&q.column(k));
            let prev = q.column(k).to_owned();
            q.column_mut(j).scaled_add(-dot, &prev);
        }
        let n = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|x| x / n);
    }
    q
}

fn random_delta(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ParameterDelta {
    let flat: Vec<f64> = (0..spec.num_params()).map(|_| rng.sample(StandardNormal)).collect();
    ParameterDelta::unflatten(spec, &flat).unwrap()
}

fn similarity_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bounded = true;
    let mut symmetric = true;
    let mut invariance: f64 = 0.0;
    let in_unit = |v: f64| (0.0..=1.0).contains(&v);
    for _ in 0..100 {
        let d = rng.random_range(1..40);
        let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let a = similarity::cosine(&u, &v).unwrap().value();
        let b = similarity::cosine(&v, &u).unwrap().value();
        bounded &= in_unit(a);
        symmetric &= a.to_bits() == b.to_bits();
    }
    for _ in 0..100 {
        let n = rng.random_range(3..25);
        let p = rng.random_range(1..8);
        let q = rng.random_range(1..8);
        let x = gaussian(&mut rng, n, p);
        let y = gaussian(&mut rng, n, q);
        for f in [similarity::linear_cka, similarity::rbf_cka] {
            let a = f(x.view(), y.view()).unwrap();
            let b = f(y.view(), x.view()).unwrap();
            bounded &= in_unit(a);
            symmetric &= a.to_bits() == b.to_bits();
        }
        let rotated = x.dot(&random_orthogonal(&mut rng, p));
        let a = similarity::linear_cka(x.view(), y.view()).unwrap();
        let r = similarity::linear_cka(rotated.view(), y.view()).unwrap();
        invariance = invariance.max((a - r).abs());
    }
    let spec = ModelSpec::new(vec![4, 6, 3]).unwrap();
    for kind in [SimKind::Cosine, SimKind::LinearCka, SimKind::RbfCka] {
        for _ in 0..100 {
            let g = random_delta(&mut rng, &spec);
            let l = random_delta(&mut rng, &spec);
            let a = similarity::delta_similarity(&g, &l, kind).unwrap().value();
            let b = similarity::delta_similarity(&l, &g, kind).unwrap().value();
            bounded &= in_unit(a);
            symmetric &= a.to_bits() == b.to_bits();
        }
    }
    let u: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
    let neg: Vec<f64> = u.iter().map(|x| -x).collect();
    let antipodal = similarity::cosine(&u, &neg).unwrap().value();
    outcome(
        bounded && symmetric && invariance < 1e-8 && antipodal == 0.0,
        format!(
            "similarity properties: bounded {bounded}, symmetric {symmetric}, orthogonal invariance {invariance:.1e}, antipodal cosine {antipodal}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn mean_max_share(data: &Dataset, plan: &PartitionPlan) -> f64 {
    plan.clients
        .iter()
        .map(|idx| *data.class_counts(idx).iter().max().unwrap() as f64 / idx.len() as f64)
        .sum::<f64>()
        / plan.num_clients() as f64
}

fn dirichlet_partition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut covers = 0;
    for cfg in 0..20u64 {
        let k = rng.random_range(2..=6);
        let per_class = rng.random_range(5..=40);
        let m = rng.random_range(2..=10);
        let alpha = 10f64.powf(rng.random_range(-1.5..1.0));
        let data = partition::synth_gaussian(k, 4, per_class, 1.0, cfg).unwrap();
        let plan = partition::dirichlet_partition(&data, m, alpha, 100 + cfg).unwrap();
        if plan.is_exact_cover(data.len()) && plan.clients.iter().all(|c| !c.is_empty()) {
            covers += 1;
        }
    }
    let mut skewed = 0;
    for seed in 0..10u64 {
        let data = partition::synth_gaussian(5, 4, 100, 1.0, seed).unwrap();
        let sharp = partition::dirichlet_partition(&data, 10, 0.05, seed).unwrap();
        let flat = partition::dirichlet_partition(&data, 10, 5.0, seed).unwrap();
        if mean_max_share(&data, &sharp) > mean_max_share(&data, &flat) {
            skewed += 1;
        }
    }
    outcome(
        covers == 20 && skewed >= 9,
        format!("dirichlet partition: exact cover {covers}/20, skew ordering {skewed}/10 seeds"),
    )
}

// ---------------------------------------------------------------- 7-10

fn desk_config(seed: u64, aux: AuxKind, beta_rule: BetaRule) -> ExperimentConfig {
    let config = ExperimentConfig {
        name: "desk".into(),
        seed,
        dataset: DatasetConfig::Synthetic {
            classes: 3,
            dim: 20,
            train_per_class: 200,
            test_per_class: 200,
            spread: 0.6,
        },
        clients: 10,
        partition: PartitionConfig::Dirichlet { alpha: 0.5 },
        algorithm: FlAlgorithm::FedAvg,
        calibration: CalibrationPolicy {
            task: LossKind::CrossEntropy,
            aux,
            beta_rule,
        },
        hidden: vec![32],
        rounds: 30,
        epochs: 5,
        batch_size: 32,
        lr: SgdConfig::default().lr,
        momentum: SgdConfig::default().momentum,
        weight_decay: SgdConfig::default().weight_decay,
        participation: 1.0,
        bins: 20,
        ts_holdout: None,
    };
    config.validate().unwrap();
    config
}

fn uncalibrated(seed: u64) -> ExperimentConfig {
    desk_config(seed, AuxKind::None, BetaRule::Fixed { beta: 0.0 })
}

fn nucfl(seed: u64) -> ExperimentConfig {
    desk_config(seed, AuxKind::Dca, BetaRule::Nucfl { sim: SimKind::Cosine })
}

fn reversed(seed: u64) -> ExperimentConfig {
    desk_config(
        seed,
        AuxKind::Dca,
        BetaRule::Reversed {
            sim: SimKind::Cosine,
            cap: 10.0,
        },
    )
}

fn single_thread() -> RunOptions {
    RunOptions {
        threads: 1,
        wall_clock: false,
    }
}

struct DeskRun {
    accuracy: f64,
    ece: f64,
}

fn desk_run(config: &ExperimentConfig) -> DeskRun {
    let bundle = harness::run_experiment(config, single_thread()).unwrap();
    DeskRun {
        accuracy: bundle.final_report.accuracy,
        ece: bundle.final_report.ece,
    }
}

const SEEDS: [u64; 4] = [0, 1, 2, 3];

fn desk_experiment(nucfl_runs: &[DeskRun], nucfl_secs: f64) -> Outcome {
    let started = Instant::now();
    let baseline: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&uncalibrated(s))).collect();
    let secs = started.elapsed().as_secs_f64() + nucfl_secs;
    let wins = nucfl_runs.iter().zip(&baseline).filter(|(n, u)| n.ece <= u.ece).count();
    let worst_gap = nucfl_runs
        .iter()
        .zip(&baseline)
        .map(|(n, u)| (n.accuracy - u.accuracy).abs())
        .fold(0.0, f64::max);
    let pairs: Vec<String> = nucfl_runs
        .iter()
        .zip(&baseline)
        .map(|(n, u)| format!("{:.4}<={:.4}", n.ece, u.ece))
        .collect();
    outcome(
        wins >= 3 && worst_gap <= 0.015 && secs < 120.0,
        format!(
            "desk experiment: nucfl ECE <= uncalibrated in {wins}/4 seeds [{}], max accuracy gap {:.2} pts, {secs:.1} s",
            pairs.join(" "),
            worst_gap * 100.0
        ),
    )
}

fn reversed_check(nucfl_runs: &[DeskRun]) -> Outcome {
    let rev: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&reversed(s))).collect();
    let wins = rev.iter().zip(nucfl_runs).filter(|(r, n)| r.ece >= n.ece).count();
    let pairs: Vec<String> = rev
        .iter()
        .zip(nucfl_runs)
        .map(|(r, n)| format!("{:.4}>={:.4}", r.ece, n.ece))
        .collect();
    outcome(
        wins >= 3,
        format!("reversed check: reversed ECE >= nucfl in {wins}/4 seeds [{}]", pairs.join(" ")),
    )
}

fn temperature_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 2000;
    let k = 4;
    let truth = gaussian(&mut rng, n, k).mapv(|z| 1.5 * z);
    let probs = model::softmax(&truth);
    let labels: Vec<usize> = (0..n)
        .map(|r| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for j in 0..k {
                acc += probs[[r, j]];
                if u < acc {
                    return j;
                }
            }
            k - 1
        })
        .collect();
    let logits = truth.mapv(|z| 2.0 * z);
    let t = metrics::temperature_scale(&logits, &labels);
    let before = metrics::accuracy(&model::softmax(&logits), &labels);
    let after = metrics::accuracy(&model::softmax(&logits.mapv(|z| z / t)), &labels);

    let mut nll_ok = 0;
    let mut worst_change = f64::NEG_INFINITY;
    for &seed in &SEEDS {
        let mut config = nucfl(seed);
        config.ts_holdout = Some(0.5);
        let ts = harness::run_experiment(&config, single_thread()).unwrap().temperature.unwrap();
        worst_change = worst_change.max(ts.holdout_nll_after - ts.holdout_nll_before);
        if ts.holdout_nll_after <= ts.holdout_nll_before {
            nll_ok += 1;
        }
    }
    outcome(
        (1.9..=2.1).contains(&t) && before == after && nll_ok == SEEDS.len(),
        format!(
            "temperature scaling: T = {t:.4}, accuracy {before} -> {after}, holdout NLL not increased in {nll_ok}/4 runs (max change {worst_change:.2e})"
        ),
    )
}

fn determinism() -> Outcome {
    let config = nucfl(0);
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for threads in [1usize, 4] {
        let options = RunOptions {
            threads,
            wall_clock: false,
        };
        let out = dir.path().join(format!("t{threads}"));
        let (path, _) = harness::cmd_run(&config, &out, options, false).unwrap();
        files.push(std::fs::read(path.join(harness::RESULTS_FILE)).unwrap());
    }
    outcome(
        files[0] == files[1] && !files[0].is_empty(),
        format!("determinism: results.csv identical for 1 and 4 threads ({} bytes)", files[0].len()),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |id: usize, o: Outcome| {
        println!("{} criterion {id:>2}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, o));
    };
    report(1, gradient_suite());
    report(2, metric_oracles());
    report(3, algorithm_reductions());
    report(4, nucfl_reduction());
    report(5, similarity_properties());
    report(6, dirichlet_partition());
    let started = Instant::now();
    let nucfl_runs: Vec<DeskRun> = SEEDS.iter().map(|&s| desk_run(&nucfl(s))).collect();
    let nucfl_secs = started.elapsed().as_secs_f64();
    report(7, desk_experiment(&nucfl_runs, nucfl_secs));
    report(8, reversed_check(&nucfl_runs));
    report(9, temperature_scaling());
    report(10, determinism());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.passed).map(|(id, _)| *id).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}

