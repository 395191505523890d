//! Acceptance criteria. Each test prints one `criterion N ... PASS|FAIL` line.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use traceng::baselines::{self, DampedHessian, HessianScope, RepresenterSettings, SketchSettings};
use traceng::data::{generate, Generator};
use traceng::eval::{
    self, checkpoint_correlation_study, first_order_reference, fix_and_retrain, inject_mislabels,
    recovery_curve, RecoveryCurve, SelfScoring, StudySubset,
};
use traceng::influence::{
    self, approximation_quality, rank_examples, CheckpointSelection, GradientView, Method, TracInCp,
};
use traceng::model::{
    self, Activation, Example, GradientVector, LayerId, LossKind, ModelSpec, ModelState,
};
use traceng::retrieval::{build_index, query, Direction};
use traceng::sketch::{self, SketchSpec};
use traceng::stats;
use traceng::training::{train, TrainConfig, TrainOutcome};

/// Writes to the stderr handle directly so the line survives test output capture.
fn report(n: u32, name: &str, pass: bool, start: Instant, detail: String) {
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} {name}: {} ({detail}; {:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

fn blobs(n: usize, classes: usize, separation: f64, seed: u64) -> Vec<Example> {
    generate(
        &Generator::Blobs {
            n,
            classes,
            dim: 2,
            separation,
            std: 1.0,
        },
        seed,
    )
    .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Batch-size-1 run on a 2-class blobs set of 200 points for 3 epochs.
fn lemma_setup(step_size: f64) -> (Vec<Example>, Vec<Example>, TrainOutcome) {
    let data = blobs(200, 2, 3.0, 11);
    let probes = blobs(20, 2, 3.0, 12);
    let spec = ModelSpec::new(
        vec![2, 8, 2],
        Activation::Tanh,
        LossKind::SoftmaxCrossEntropy,
    )
    .with_seed(5);
    let out = train(
        &TrainConfig::constant(step_size, 1, 3).with_shuffle_seed(7),
        &data,
        &spec,
    )
    .unwrap();
    (data, probes, out)
}

#[test]
fn criterion_01_budget_identity() {
    let start = Instant::now();
    let (data, probes, out) = lemma_setup(0.05);
    let w0 = out.trace.spec.init_state().unwrap();
    let mut worst: f64 = 0.0;
    for probe in &probes {
        let scores = influence::idealized_influence_all(&out.trace, &data, probe).unwrap();
        let total: f64 = scores.values().sum();
        let expected =
            model::loss(&w0, probe).unwrap() - model::loss(&out.final_state, probe).unwrap();
        worst = worst.max(rel(total, expected));
    }
    let pass = worst < 1e-9 && start.elapsed().as_secs() < 30;
    report(
        1,
        "budget identity",
        pass,
        start,
        format!("worst relative gap {worst:.2e} over 20 probes"),
    );
}

#[test]
fn criterion_02_first_order_fidelity() {
    let start = Instant::now();
    let (data, probes, out) = lemma_setup(1e-3);
    let q = approximation_quality(&out.trace, &data, &probes).unwrap();
    let r = q.pearson.unwrap_or(f64::NAN);
    let pass = q.pairs.len() >= 5000 && r >= 0.95 && start.elapsed().as_secs() < 120;
    report(
        2,
        "first-order fidelity",
        pass,
        start,
        format!("pearson {r:.5} over {} pairs", q.pairs.len()),
    );
}

/// Mislabel suite for one seed: 4-class blobs, 1000 training points, 10% flipped.
struct DeskRun {
    dirty: Vec<Example>,
    test: Vec<Example>,
    config: TrainConfig,
    spec: ModelSpec,
    clean_accuracy: f64,
    corrupted_accuracy: f64,
    tracin: Vec<(u32, f64)>,
    tracin_curve: RecoveryCurve,
    if_curve: RecoveryCurve,
    representer_curve: RecoveryCurve,
    random_curve: RecoveryCurve,
}

const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn desk_run(seed: u64) -> DeskRun {
    let clean = blobs(1000, 4, 4.0, 100 + seed);
    let test = blobs(2000, 4, 4.0, 200 + seed);
    let spec = ModelSpec::new(
        vec![2, 16, 4],
        Activation::Tanh,
        LossKind::SoftmaxCrossEntropy,
    )
    .with_seed(seed);
    let mut config = TrainConfig::constant(0.1, 10, 30).with_shuffle_seed(seed);
    config.checkpoint_every = 3;
    let reference = train(&config, &clean, &spec).unwrap().final_state;
    let dirty = inject_mislabels(&clean, 0.1, &reference, seed).unwrap();
    let out = train(&config, &dirty, &spec).unwrap();
    let selection = CheckpointSelection::all(&out.checkpoints).unwrap();
    let ctx = SelfScoring::new(&out.final_state, &out.checkpoints, &selection, &dirty);
    let tracin = ctx.scores(Method::TracinCp).unwrap();
    let curve = |s: &[(u32, f64)]| recovery_curve(s, &dirty).unwrap();
    DeskRun {
        clean_accuracy: model::accuracy(&reference, &test).unwrap(),
        corrupted_accuracy: model::accuracy(&out.final_state, &test).unwrap(),
        tracin_curve: curve(&tracin),
        if_curve: curve(&ctx.scores(Method::InfluenceFunction).unwrap()),
        representer_curve: curve(&ctx.scores(Method::Representer).unwrap()),
        random_curve: curve(&eval::random_scores(&dirty, seed)),
        tracin,
        dirty,
        test,
        config,
        spec,
    }
}

fn desk_suite() -> &'static Vec<DeskRun> {
    static SUITE: OnceLock<Vec<DeskRun>> = OnceLock::new();
    SUITE.get_or_init(|| DESK_SEEDS.iter().map(|&s| desk_run(s)).collect())
}

/// Per-seed `(recovered at 0.2, AUC)` from the committed oracle run.
const FROZEN_RECOVERY: [(f64, f64); 5] = [
    (0.99, 0.9435),
    (0.97, 0.9367),
    (1.00, 0.9430),
    (0.99, 0.9418),
    (0.98, 0.9378),
];

#[test]
fn criterion_03_mislabel_recovery() {
    let start = Instant::now();
    let suite = desk_suite();
    let mut pass = true;
    let mut rows = Vec::new();
    for ((seed, run), (r20, auc)) in DESK_SEEDS.iter().zip(suite).zip(FROZEN_RECOVERY) {
        let c = &run.tracin_curve;
        let ok = c.at(0.2) >= 0.6 && c.auc >= 0.75 && [0.1, 0.2, 0.3].iter().all(|&f| c.at(f) > f);
        let frozen = (c.at(0.2) - r20).abs() < 1e-9 && (c.auc - auc).abs() < 1e-9;
        pass &= ok && frozen;
        rows.push(format!(
            "seed {seed}: r@0.2={:.3} auc={:.4}{}",
            c.at(0.2),
            c.auc,
            if frozen { "" } else { " (drifted)" }
        ));
    }
    pass &= start.elapsed().as_secs() < 180;
    report(3, "mislabel recovery", pass, start, rows.join(", "));
}

#[test]
fn criterion_04_method_ordering() {
    let start = Instant::now();
    let suite = desk_suite();
    let mut wins = 0;
    let mut rows = Vec::new();
    for (seed, run) in DESK_SEEDS.iter().zip(suite) {
        let t = run.tracin_curve.auc;
        let f = run.if_curve.auc;
        let r = run.representer_curve.auc;
        if t >= f && t >= r {
            wins += 1;
        }
        rows.push(format!(
            "seed {seed}: tracin {t:.4} if {f:.4} rep {r:.4} rand {:.4}",
            run.random_curve.auc
        ));
    }
    report(
        4,
        "method ordering",
        wins >= 4,
        start,
        format!("{wins}/5 seeds; {}", rows.join(", ")),
    );
}

fn random_model(rng: &mut ChaCha8Rng) -> (ModelState, usize, usize) {
    let input = rng.random_range(1..6);
    let hidden = rng.random_range(1..8);
    let classes = rng.random_range(2..5);
    let act = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Relu
    };
    let spec = ModelSpec::new(
        vec![input, hidden, classes],
        act,
        LossKind::SoftmaxCrossEntropy,
    )
    .with_seed(rng.random())
    .with_scale(2.0);
    (spec.init_state().unwrap(), input, classes)
}

fn random_example(rng: &mut ChaCha8Rng, id: u32, input: usize, classes: usize) -> Example {
    Example::classified(
        id,
        (0..input).map(|_| rng.random_range(-2.0..2.0)).collect(),
        rng.random_range(0..classes),
    )
}

#[test]
fn criterion_05_rank_one_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (state, input, classes) = random_model(&mut rng);
        let a = random_example(&mut rng, 0, input, classes);
        let b = random_example(&mut rng, 1, input, classes);
        for layer in [LayerId::Index(0), LayerId::Last] {
            let ra = sketch::rank1_components(&state, &a, layer).unwrap();
            let rb = sketch::rank1_components(&state, &b, layer).unwrap();
            let fast = sketch::rank1_dot(&ra, &rb).unwrap();
            let ga = model::per_example_gradient(&state, &a).unwrap();
            let gb = model::per_example_gradient(&state, &b).unwrap();
            let wa = ga.weights_of(layer).unwrap();
            let wb = gb.weights_of(layer).unwrap();
            let slow: f64 = wa.iter().zip(wb).map(|(x, y)| x * y).sum();
            if slow != 0.0 {
                worst = worst.max(rel(fast, slow));
            } else {
                worst = worst.max(fast.abs());
            }
        }
    }
    let pass = worst <= 1e-12 && start.elapsed().as_secs() < 5;
    report(
        5,
        "rank-1 exactness",
        pass,
        start,
        format!("worst relative error {worst:.2e}"),
    );
}

#[test]
fn criterion_06_sketch_unbiasedness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let (state, input, classes) = random_model(&mut rng);
    let a =
        model::per_example_gradient(&state, &random_example(&mut rng, 0, input, classes)).unwrap();
    let b =
        model::per_example_gradient(&state, &random_example(&mut rng, 1, input, classes)).unwrap();
    let truth = a.dot(&b).unwrap();
    let draws = |d: usize| -> Vec<f64> {
        (0..2000u64)
            .map(|seed| {
                let spec = SketchSpec::dense(d, seed);
                let sa = sketch::project(&a, &spec).unwrap();
                let sb = sketch::project(&b, &spec).unwrap();
                sketch::sketched_dot(&sa, &sb).unwrap()
            })
            .collect()
    };
    let d64 = draws(64);
    let se = (stats::variance(&d64) / d64.len() as f64).sqrt();
    let z = (stats::mean(&d64) - truth).abs() / se;
    let v16 = stats::variance(&draws(16));
    let v256 = stats::variance(&draws(256));
    let pass = z < 4.0 && v256 < v16 && start.elapsed().as_secs() < 30;
    report(
        6,
        "sketch unbiasedness",
        pass,
        start,
        format!("|bias| = {z:.2} standard errors; var d=16 {v16:.3e}, d=256 {v256:.3e}"),
    );
}

fn small_classifier() -> (Vec<Example>, ModelState) {
    let data = blobs(500, 3, 3.0, 77);
    let spec = ModelSpec::new(
        vec![2, 5, 3],
        Activation::Tanh,
        LossKind::SoftmaxCrossEntropy,
    )
    .with_seed(7);
    let out = train(
        &TrainConfig::constant(0.1, 10, 20).with_shuffle_seed(7),
        &data,
        &spec,
    )
    .unwrap();
    (data, out.final_state)
}

#[test]
fn criterion_07_sketched_inverse_hessian() {
    let start = Instant::now();
    let (data, state) = small_classifier();
    assert!(state.len() <= 50);
    let damping = 0.05;
    let settings = SketchSettings {
        damping,
        step_size: 0.5,
        iterations: 3000,
        batch_size: 64,
        average_from: 0.5,
        eval_every: 100,
        patience: 30,
        tolerance: 1e-4,
        ..SketchSettings::default()
    };
    let p = HessianScope::LastLayer.range(&state).unwrap().len();
    let hessian = DampedHessian::build(&state, &data, HessianScope::LastLayer, damping).unwrap();
    let eig = hessian.matrix.clone().symmetric_eigenvalues();
    let sk =
        baselines::inverse_hessian_sketch(&state, &data, SketchSpec::dense(8 * p, 3), settings)
            .unwrap();
    let dense = hessian.damped().try_inverse().unwrap() * sk.projection_matrix().transpose();
    let frob = (sk.matrix() - &dense).norm() / dense.norm();

    let direct = hessian.factor().unwrap();
    let probe = &blobs(1, 3, 3.0, 78)[0];
    let tv = direct.test_vector(&state, probe).unwrap();
    let test_side = sk.test_side(&state, probe).unwrap();
    let mut exact = Vec::new();
    let mut approx = Vec::new();
    for z in &data {
        exact.push(direct.score_with(&state, z, &tv).unwrap());
        approx.push(sk.score_with(&state, z, &test_side).unwrap());
    }
    let rho = stats::spearman(&exact, &approx).unwrap_or(f64::NAN);
    let pass = frob < 0.05 && rho >= 0.9 && start.elapsed().as_secs() < 120;
    report(
        7,
        "sketched inverse Hessian",
        pass,
        start,
        format!(
            "p={p}, eig [{:.2e}, {:.2e}], residual {:.2e}, S error {frob:.4}, spearman {rho:.4}",
            eig.min(),
            eig.max(),
            sk.final_residual
        ),
    );
}

#[test]
fn criterion_08_representer_reconstruction() {
    let start = Instant::now();
    let (data, state) = small_classifier();
    let rep =
        baselines::representer_finetune(&state, &data, RepresenterSettings::default()).unwrap();
    let mut worst: f64 = 0.0;
    for z in blobs(100, 3, 3.0, 88) {
        let direct = model::predict(&rep.state, &z.features).unwrap();
        let rebuilt = rep.reconstruct_logits(&z.features).unwrap();
        let err = direct
            .iter()
            .zip(&rebuilt)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = direct.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    let pass = worst <= 1e-4 && start.elapsed().as_secs() < 60;
    report(
        8,
        "representer reconstruction",
        pass,
        start,
        format!(
            "worst relative error {worst:.2e} after {} iterations",
            rep.iterations
        ),
    );
}

#[test]
fn criterion_09_retrieval_equivalence() {
    let start = Instant::now();
    let data = blobs(300, 3, 3.0, 91);
    let spec = ModelSpec::new(
        vec![2, 8, 3],
        Activation::Tanh,
        LossKind::SoftmaxCrossEntropy,
    )
    .with_seed(9);
    let mut config = TrainConfig::constant(0.1, 10, 12).with_shuffle_seed(9);
    config.checkpoint_every = 3;
    let out = train(&config, &data, &spec).unwrap();
    let selection = CheckpointSelection::all(&out.checkpoints).unwrap();
    let sketch_spec = SketchSpec::dense(32, 4);
    let index = build_index(&data, &out.checkpoints, &selection, sketch_spec, None).unwrap();
    let scorer = TracInCp::new(
        &selection,
        &out.checkpoints,
        GradientView::default().with_sketch(sketch_spec),
    )
    .unwrap();
    let mut mismatches = 0;
    for probe in blobs(200, 3, 3.0, 92) {
        let scores: Vec<(u32, f64)> = scorer
            .score_all(&data, &probe)
            .unwrap()
            .iter()
            .map(|r| (r.train_id, r.score))
            .collect();
        for dir in [Direction::Proponents, Direction::Opponents] {
            let expected = rank_examples(&scores, dir == Direction::Proponents, None).unwrap();
            let got: Vec<u32> = query(&index, &out.checkpoints, &probe, data.len(), dir)
                .unwrap()
                .into_iter()
                .map(|(id, _)| id)
                .collect();
            if got != expected {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0 && start.elapsed().as_secs() < 60;
    report(
        9,
        "retrieval equivalence",
        pass,
        start,
        format!("{mismatches} of 400 rankings differ"),
    );
}

#[test]
fn criterion_10_checkpoint_studies() {
    let start = Instant::now();
    let mut pass = true;
    let mut rows = Vec::new();
    for seed in [1u64, 2, 3] {
        let data = blobs(200, 3, 3.0, 300 + seed);
        let probes = blobs(10, 3, 3.0, 400 + seed);
        let spec = ModelSpec::new(
            vec![2, 8, 3],
            Activation::Tanh,
            LossKind::SoftmaxCrossEntropy,
        )
        .with_seed(seed);
        let mut config = TrainConfig::constant(0.05, 4, 20).with_shuffle_seed(seed);
        config.checkpoint_every = 2;
        let out = train(&config, &data, &spec).unwrap();
        let k = out.checkpoints.len();
        let reference = first_order_reference(&out.trace, &data, &probes).unwrap();
        let mut subsets: Vec<StudySubset> = (0..k).map(StudySubset::single).collect();
        for size in [2, 3] {
            subsets.push(StudySubset::evenly_spaced(k, size).unwrap());
            subsets.push(StudySubset::loss_selected(&out.trace, &out.checkpoints, size).unwrap());
        }
        let table =
            checkpoint_correlation_study(&reference, &data, &out.checkpoints, &probes, &subsets)
                .unwrap();
        let singles: Vec<f64> = table[..k].iter().map(|r| r.pearson).collect();
        let last = singles[k - 1];
        let best_mid = singles[1..k - 1]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let even2 = table[k].pearson;
        let loss2 = table[k + 1].pearson;
        let even3 = table[k + 2].pearson;
        let loss3 = table[k + 3].pearson;
        let ok = best_mid > last && loss2 >= even2 - 0.02 && loss3 >= even3 - 0.02;
        pass &= ok;
        rows.push(format!(
            "seed {seed}: singles {:?} mid {best_mid:.3} > last {last:.3}; loss/even k=2 {loss2:.3}/{even2:.3}, k=3 {loss3:.3}/{even3:.3}",
            singles.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ));
    }
    pass &= start.elapsed().as_secs() < 300;
    report(10, "checkpoint studies", pass, start, rows.join("; "));
}

#[test]
fn criterion_11_gradient_and_hvp_numerics() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut worst_grad: f64 = 0.0;
    let mut worst_hvp: f64 = 0.0;
    for _ in 0..50 {
        let input = rng.random_range(1..5);
        let classes = rng.random_range(2..4);
        let spec = ModelSpec::new(
            vec![input, 5, classes],
            Activation::Tanh,
            LossKind::SoftmaxCrossEntropy,
        )
        .with_seed(rng.random());
        let state = spec.init_state().unwrap();
        let z = random_example(&mut rng, 0, input, classes);
        let g = model::per_example_gradient(&state, &z).unwrap();
        let h = 1e-6;
        let fd: Vec<f64> = (0..state.len())
            .map(|i| {
                let mut e = vec![0.0; state.len()];
                e[i] = 1.0;
                let dir = GradientVector::aligned_with(&state, e).unwrap();
                let up = model::loss(&state.perturbed(&dir, h).unwrap(), &z).unwrap();
                let down = model::loss(&state.perturbed(&dir, -h).unwrap(), &z).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let num: f64 = g
            .values()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
        worst_grad = worst_grad.max(num / den);

        let v: Vec<f64> = (0..state.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let v = GradientVector::aligned_with(&state, v).unwrap();
        let hv = model::hessian_vector_product(&state, [&z], &v).unwrap();
        let eps = 1e-5;
        let gp = model::per_example_gradient(&state.perturbed(&v, eps).unwrap(), &z).unwrap();
        let gm = model::per_example_gradient(&state.perturbed(&v, -eps).unwrap(), &z).unwrap();
        let fd_hv: Vec<f64> = gp
            .values()
            .iter()
            .zip(gm.values())
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        let num: f64 = hv
            .values()
            .iter()
            .zip(&fd_hv)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let den: f64 = fd_hv.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
        worst_hvp = worst_hvp.max(num / den);
    }
    let pass = worst_grad <= 1e-4 && worst_hvp <= 1e-3 && start.elapsed().as_secs() < 30;
    report(
        11,
        "gradient and HVP numerics",
        pass,
        start,
        format!("worst gradient error {worst_grad:.2e}, worst HVP error {worst_hvp:.2e}"),
    );
}

#[test]
fn criterion_12_fix_and_retrain() {
    let start = Instant::now();
    let run = &desk_suite()[0];
    let fractions = [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0];
    let accs: Vec<f64> = fractions
        .iter()
        .map(|&f| {
            fix_and_retrain(
                &run.dirty,
                &run.tracin,
                f,
                &run.config,
                &run.spec,
                &run.test,
            )
            .unwrap()
            .test_accuracy
        })
        .collect();
    let anchors =
        accs[0] == run.corrupted_accuracy && accs[fractions.len() - 1] == run.clean_accuracy;
    let monotone = accs.windows(2).all(|w| w[1] >= w[0]);
    let pass = anchors && monotone && start.elapsed().as_secs() < 180;
    report(
        12,
        "fix-and-retrain anchors",
        pass,
        start,
        format!(
            "corrupted {:.4}, clean {:.4}, curve {:?}",
            run.corrupted_accuracy,
            run.clean_accuracy,
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>()
        ),
    );
}
