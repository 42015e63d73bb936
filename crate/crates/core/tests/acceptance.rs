//! Acceptance suite. Runs every criterion in sequence and prints one
//! PASS/FAIL line each; exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{new_classes, rand_vec, random_spec, random_state, StateSpec};
use proof_core::dataset::{make_task_stream, synth_split, Sample, SynthConfig};
use proof_core::eval::{self, harmonic_mean, round2, RunReport, StageReport};
use proof_core::model::{argmax, Heads, ModelConfig, ModelState, ProjectionMode};
use proof_core::rng::{self, uniform_sym};
use proof_core::tensor::{self, grad_check, AttentionWeights, Mat};
use proof_core::trainer::{
    herding_select, retrieval_recall, run_incremental, train_retrieval, ExemplarPolicy, RunOptions, TrainConfig,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn rand_mat(r: &mut impl Rng, n: usize, m: usize) -> Mat {
    Mat::from_fn(n, m, |_, _| uniform_sym(r, 1.0))
}

const KERNEL_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const GRAD_SCALE: f64 = 5.0;

fn kernel_errors(r: &mut impl Rng) -> [f64; 4] {
    let d = r.random_range(2..=8);
    let n = r.random_range(1..=6);

    let w = rand_mat(r, d, d);
    let x = rand_vec(r, d);
    let g = rand_vec(r, d);
    let (dw, dx) = tensor::linear_bwd(&w, &x, &g).unwrap();
    let lin = |w: &Mat, x: &[f64]| tensor::dot(&g, &tensor::linear_fwd(w, x).unwrap());
    let e_lin = grad_check(|p| lin(&Mat::from_vec(d, d, p.to_vec()).unwrap(), &x), w.data(), dw.data(), FD_STEP)
        .max(grad_check(|p| lin(&w, p), &x, &dx, FD_STEP));

    let logits: Vec<f64> = (0..n.max(2)).map(|_| uniform_sym(r, 3.0)).collect();
    let t = r.random_range(0..logits.len());
    let (_, dl) = tensor::softmax_ce(&logits, t).unwrap();
    let e_ce = grad_check(|p| tensor::softmax_ce(p, t).unwrap().0, &logits, &dl, FD_STEP);

    let u = rand_vec(r, d);
    let v = rand_vec(r, d);
    let up = uniform_sym(r, 2.0);
    let (du, dv) = tensor::cosine_bwd(&u, &v, up).unwrap();
    let e_cos = grad_check(|p| up * tensor::cosine(p, &v).unwrap(), &u, &du, FD_STEP)
        .max(grad_check(|p| up * tensor::cosine(&u, p).unwrap(), &v, &dv, FD_STEP));

    let set: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(r, d)).collect();
    let aw = AttentionWeights {
        wq: rand_mat(r, d, d),
        wk: rand_mat(r, d, d),
        wv: rand_mat(r, d, d),
    };
    let ups: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(r, d)).collect();
    let grads = tensor::attention_bwd(&set, &aw, &ups).unwrap();
    let objective = |set: &[Vec<f64>], w: &AttentionWeights| -> f64 {
        tensor::attention_fwd(set, w)
            .unwrap()
            .iter()
            .zip(&ups)
            .map(|(o, g)| tensor::dot(o, g))
            .sum()
    };
    let mut e_att = 0.0f64;
    for (which, analytic) in [(0, &grads.dwq), (1, &grads.dwk), (2, &grads.dwv)] {
        let base = [&aw.wq, &aw.wk, &aw.wv][which].clone();
        e_att = e_att.max(grad_check(
            |p| {
                let mut w2 = aw.clone();
                *[&mut w2.wq, &mut w2.wk, &mut w2.wv][which] = Mat::from_vec(d, d, p.to_vec()).unwrap();
                objective(&set, &w2)
            },
            base.data(),
            analytic.data(),
            FD_STEP,
        ));
    }
    let flat: Vec<f64> = set.concat();
    e_att = e_att.max(grad_check(
        |p| {
            let s: Vec<Vec<f64>> = p.chunks(d).map(<[f64]>::to_vec).collect();
            objective(&s, &aw)
        },
        &flat,
        &grads.dset.concat(),
        FD_STEP,
    ));
    [e_lin, e_ce, e_cos, e_att]
}

fn gradient_exactness() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng::seeded(2024);
    let mut kernels = [0.0f64; 4];
    let instances = 40;
    for _ in 0..instances {
        for (k, e) in kernels.iter_mut().zip(kernel_errors(&mut r)) {
            *k = k.max(e);
        }
    }
    let mut model = 0.0f64;
    for i in 0..instances {
        let spec = random_spec(&mut r, GRAD_SCALE);
        let st = random_state(&spec, 100 + i as u64);
        let classes: usize = spec.tasks.iter().sum();
        let bsz = r.random_range(1..=4);
        let zs: Vec<Vec<f64>> = (0..bsz).map(|_| rand_vec(&mut r, spec.dim)).collect();
        let labels: Vec<u32> = (0..bsz).map(|_| r.random_range(0..classes as u32)).collect();
        let batch: Vec<(&[f64], u32)> = zs.iter().map(Vec::as_slice).zip(labels).collect();
        let (_, grads) = st.loss_and_grads(&batch).unwrap();
        let mut probe = st.clone();
        let err = grad_check(
            |p| {
                probe.set_flat_params(p);
                probe.loss(&batch).unwrap()
            },
            &st.flat_params(),
            &grads.flatten(),
            FD_STEP,
        );
        model = model.max(err);
    }
    let elapsed = t0.elapsed();
    let names = ["linear", "softmax_ce", "cosine", "attention"];
    for (name, e) in names.iter().zip(kernels) {
        ensure(e <= KERNEL_TOL, || format!("{name} rel err {e:.2e} > {KERNEL_TOL:e}"))?;
    }
    ensure(model <= MODEL_TOL, || format!("loss_and_grads rel err {model:.2e} > {MODEL_TOL:e}"))?;
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "{instances}+{instances} instances, kernels max {:.1e}, model max {model:.1e}, {elapsed:.2?}",
        kernels.iter().copied().fold(0.0, f64::max)
    ))
}

fn zero_shot_reduction() -> Outcome {
    let t0 = Instant::now();
    let d = 16;
    let mut r = rng::seeded(7);
    let mut cfg = ModelConfig::new(d);
    cfg.mode = ProjectionMode::Residual;
    let mut st = ModelState::new(cfg, &mut r).unwrap();
    for b in 0..3u32 {
        st.expand_task(new_classes(&mut r, b * 4..b * 4 + 4, d), &mut r).unwrap();
    }
    let anchors: Vec<(u32, Vec<f64>)> = st.seen().iter().map(|c| c.id).zip(st.anchors().iter().cloned()).collect();
    let mut mismatches = 0;
    let inputs = 1000;
    for _ in 0..inputs {
        let z = rand_vec(&mut r, d);
        let pred = anchors[argmax(&st.pm_logits(&z).unwrap())].0;
        let sample = Sample {
            embedding: z,
            label: pred,
        };
        if eval::baseline_zs(&anchors, &[sample]).unwrap() != 100.0 {
            mismatches += 1;
        }
    }
    let elapsed = t0.elapsed();
    ensure(mismatches == 0, || format!("{mismatches}/{inputs} predictions differ"))?;
    within(elapsed, Duration::from_secs(1))?;
    Ok(format!("{inputs} inputs, 0 mismatches, {elapsed:.2?}"))
}

fn small_stream(seed: u64) -> (proof_core::dataset::EmbeddingDataset, proof_core::dataset::EmbeddingDataset) {
    synth_split(&SynthConfig::new(12, 20, 8, seed, 4.0).with_test(10)).unwrap()
}

fn freezing_invariant() -> Outcome {
    let (train, test) = small_stream(1993);
    let stream = make_task_stream(12, 0, 3, 1993).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        lr0: 0.01,
        ..TrainConfig::default()
    };
    let run = run_incremental(&train, &test, &stream, &cfg, &RunOptions::default()).unwrap();
    let bytes = |ms: &[Mat]| ms.iter().map(Mat::to_le_bytes).collect::<Vec<_>>();
    let mut checked = 0;
    for b in 2..=run.states.len() {
        let (pre, post) = (&run.states[b - 2], &run.states[b - 1]);
        let old = b - 1;
        for (name, a, z) in [
            ("image layer", pre.img.layers(), &post.img.layers()[..old]),
            ("text layer", pre.txt.layers(), &post.txt.layers()[..old]),
            ("prompt", pre.prompts.blocks(), &post.prompts.blocks()[..old]),
        ] {
            ensure(bytes(a) == bytes(z), || format!("{name} of an earlier task changed during task {b}"))?;
            checked += a.len();
        }
        ensure(post.img.frozen_flags()[..old].iter().all(|&f| f), || format!("stage {b}: old layers not frozen"))?;
        let trained = pre.img.layers().len() < post.img.layers().len()
            && post.img.layers()[old].to_le_bytes() != Mat::zeros(8, 8).to_le_bytes();
        ensure(trained, || format!("stage {b}: no new layer"))?;
    }
    Ok(format!("{} stages, {checked} frozen blocks byte-identical", run.states.len()))
}

fn exhaustive_greedy(xs: &[Vec<f64>], m: usize) -> Vec<usize> {
    let unit: Vec<Vec<f64>> = xs.iter().map(|x| tensor::normalized(x).unwrap()).collect();
    let d = unit[0].len();
    let mut mu = vec![0.0; d];
    for u in &unit {
        for (a, b) in mu.iter_mut().zip(u) {
            *a += b;
        }
    }
    mu.iter_mut().for_each(|v| *v /= unit.len() as f64);
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m {
        let mut scored: Vec<(f64, usize)> = (0..unit.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let mut sum = vec![0.0; d];
                for &j in chosen.iter().chain(std::iter::once(&i)) {
                    for (s, v) in sum.iter_mut().zip(&unit[j]) {
                        *s += v;
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / (chosen.len() + 1) as f64).collect();
                let c = tensor::dot(&mu, &mean) / (tensor::norm(&mu) * tensor::norm(&mean));
                (c, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        chosen.push(scored[0].1);
    }
    chosen
}

fn herding_oracle() -> Outcome {
    let mut r = rng::seeded(99);
    let trials = 100;
    for t in 0..trials {
        let n = r.random_range(1..=12);
        let m = r.random_range(0..=n);
        let d = r.random_range(2..=6);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut r, d)).collect();
        let got = herding_select(&xs, m).unwrap();
        let want = exhaustive_greedy(&xs, m);
        ensure(got == want, || format!("trial {t} (n={n}, m={m}): {got:?} vs oracle {want:?}"))?;
    }
    Ok(format!("{trials} trials, n ≤ 12, all equal"))
}

fn permutation_invariance() -> Outcome {
    let mut r = rng::seeded(5);
    let mut worst_prompt = 0.0f64;
    let mut worst_class = 0.0f64;
    for i in 0..20 {
        let spec = StateSpec {
            dim: 6,
            mode: ProjectionMode::Plain,
            heads: Heads::Full,
            prompt_length: 2,
            logit_scale: 100.0,
            tasks: vec![2, 2, 1],
        };
        let st = random_state(&spec, 500 + i);
        let z = rand_vec(&mut r, 6);
        let base = st.forward(&z).unwrap();

        let mut swapped = st.clone();
        swapped.prompts.blocks_mut().reverse();
        let other = swapped.forward(&z).unwrap();
        for (a, b) in base.combined().iter().zip(other.combined()) {
            worst_prompt = worst_prompt.max((a - b).abs());
        }

        let k = st.seen().len();
        let mut perm: Vec<usize> = (0..k).collect();
        rng::shuffle(&mut perm, &mut r);
        let mut moved = st.clone();
        moved.reorder_classes(&perm);
        let f0 = st.fuse(&z).unwrap();
        let f1 = moved.fuse(&z).unwrap();
        let l1 = moved.forward(&z).unwrap().combined();
        let l0 = base.combined();
        for (j, &p) in perm.iter().enumerate() {
            for (a, b) in f1.protos[j].iter().zip(&f0.protos[p]) {
                worst_class = worst_class.max((a - b).abs());
            }
            for (a, b) in f1.texts[j].iter().zip(&f0.texts[p]) {
                worst_class = worst_class.max((a - b).abs());
            }
            worst_class = worst_class.max((l1[j] - l0[p]).abs());
        }
        for (a, b) in f0.query.iter().zip(&f1.query) {
            worst_class = worst_class.max((a - b).abs());
        }
    }
    ensure(worst_prompt <= 1e-9, || format!("prompt permutation moved logits by {worst_prompt:.2e}"))?;
    ensure(worst_class <= 1e-9, || format!("class reordering mismatch {worst_class:.2e}"))?;
    Ok(format!("prompt-block max |Δlogit| {worst_prompt:.1e}, class reorder max |Δ| {worst_class:.1e}"))
}

const SEEDS: [u64; 5] = [1993, 1994, 1995, 1996, 1997];

fn end_to_end_ordering() -> Outcome {
    let t0 = Instant::now();
    let mut full = 0.0;
    let mut proj = 0.0;
    let mut zs = 0.0;
    for seed in SEEDS {
        let (train, test) = synth_split(&SynthConfig::new(20, 50, 16, seed, 4.0).with_test(50)).unwrap();
        let stream = make_task_stream(20, 0, 4, seed).unwrap();
        for heads in [Heads::Full, Heads::Projection] {
            let cfg = TrainConfig {
                epochs: 10,
                lr0: 0.003,
                seed,
                heads,
                ..TrainConfig::default()
            };
            let run = run_incremental(&train, &test, &stream, &cfg, &RunOptions::default()).unwrap();
            let last = run.report.stages.last().unwrap();
            match heads {
                Heads::Full => {
                    full += last.accuracy / 5.0;
                    zs += last.zs_accuracy / 5.0;
                }
                Heads::Projection => proj += last.accuracy / 5.0,
            }
        }
    }
    let elapsed = t0.elapsed();
    let summary = format!("A_B full {full:.2}, projection-only {proj:.2}, ZS {zs:.2}, {elapsed:.1?}");
    ensure(full >= proj && proj >= zs, || format!("ordering violated: {summary}"))?;
    ensure(full >= zs + 10.0, || format!("full < ZS + 10: {summary}"))?;
    within(elapsed, Duration::from_secs(120))?;
    Ok(summary)
}

fn exemplar_budgets() -> Outcome {
    let (train, test) = synth_split(&SynthConfig::new(100, 30, 8, 3, 4.0).with_test(2)).unwrap();
    let stream = make_task_stream(100, 0, 10, 3).unwrap();
    let mut notes = Vec::new();
    for policy in [ExemplarPolicy::FixedBudget(2000), ExemplarPolicy::PerClass(20)] {
        let cfg = TrainConfig {
            epochs: 1,
            heads: Heads::Projection,
            policy,
            ..TrainConfig::default()
        };
        let run = run_incremental(&train, &test, &stream, &cfg, &RunOptions::default()).unwrap();
        let sizes: Vec<usize> = run.report.stages.iter().map(|s| s.exemplars).collect();
        let counts = run.store.class_counts();
        ensure(counts.len() == 100, || format!("{policy}: {} classes stored", counts.len()))?;
        match policy {
            ExemplarPolicy::FixedBudget(k) => {
                ensure(sizes.iter().all(|&s| s <= k), || format!("{policy}: sizes {sizes:?}"))?;
                ensure(counts.iter().all(|&(_, c)| c == 20), || format!("{policy}: final counts {counts:?}"))?;
            }
            ExemplarPolicy::PerClass(k) => {
                ensure(run.store.len() == k * 100, || format!("{policy}: {} stored", run.store.len()))?;
                let grows = sizes.iter().enumerate().all(|(i, &s)| s == k * 10 * (i + 1));
                ensure(grows, || format!("{policy}: sizes {sizes:?}"))?;
            }
        }
        notes.push(format!("{policy} peak {} final {}", sizes.iter().max().unwrap(), run.store.len()));
    }
    Ok(notes.join(", "))
}

fn retrieval_pairs(seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    synth_split(&SynthConfig::new(150, 1, 32, seed, 20.0)).unwrap().0.pairs()
}

fn retrieval_mode() -> Outcome {
    let tasks: Vec<Vec<usize>> = (0..5).map(|t| (t * 30..(t + 1) * 30).collect()).collect();
    let mut worst_r1 = f64::INFINITY;
    for seed in SEEDS {
        let pairs = retrieval_pairs(seed);
        let cfg = TrainConfig {
            epochs: 50,
            lr0: 0.01,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        };
        let run = train_retrieval(&pairs, &tasks, &cfg).unwrap();
        for s in &run.stages {
            for (dir, r) in [("i2t", s.recall.image_to_text), ("t2i", s.recall.text_to_image)] {
                ensure(r[0] >= 90.0, || format!("seed {seed} stage {} {dir} R@1 {:.2} < 90", s.stage, r[0]))?;
                ensure(r[1] >= r[0] && r[2] >= r[1], || format!("seed {seed} stage {} {dir} not monotone: {r:?}", s.stage))?;
                worst_r1 = worst_r1.min(r[0]);
            }
        }
    }

    let pairs = retrieval_pairs(1993);
    let refs: Vec<_> = pairs.iter().collect();
    let draws = 20;
    let mut mean_r1 = 0.0;
    for i in 0..draws {
        let mut cfg = ModelConfig::new(32);
        cfg.heads = Heads::Projection;
        let mut st = ModelState::new(cfg, &mut rng::seeded(40 + i)).unwrap();
        st.expand_task(Vec::new(), &mut rng::seeded(80 + i)).unwrap();
        let rec = retrieval_recall(&st, &refs).unwrap();
        mean_r1 += (rec.image_to_text[0] + rec.text_to_image[0]) / (2 * draws) as f64;
    }
    let chance = 100.0 / pairs.len() as f64;
    ensure(mean_r1 <= 3.0 * chance && mean_r1 >= chance / 3.0, || {
        format!("untrained R@1 {mean_r1:.3} not within 3x of chance {chance:.3}")
    })?;
    Ok(format!(
        "5 seeds x 5 stages, min trained R@1 {worst_r1:.2}; untrained R@1 {mean_r1:.3} vs chance {chance:.3}"
    ))
}

fn stage(stage: usize, accuracy: f64) -> StageReport {
    StageReport {
        stage,
        classes_seen: 10 * stage,
        accuracy,
        pm_accuracy: accuracy,
        zs_accuracy: 0.0,
        simplecil_accuracy: 0.0,
        unseen_accuracy: None,
        harmonic_mean: None,
        probe_score: None,
        exemplars: 0,
    }
}

fn metrics_arithmetic() -> Outcome {
    let report = RunReport {
        stages: vec![stage(1, 80.0), stage(2, 70.0), stage(3, 60.0)],
        retrieval: Vec::new(),
    };
    let avg = format!("{:.2}", round2(report.average_accuracy().unwrap()));
    let last = format!("{:.2}", round2(report.last_accuracy().unwrap()));
    let hm = format!("{:.2}", round2(harmonic_mean(80.0, 20.0)));
    ensure(avg == "70.00", || format!("average {avg}"))?;
    ensure(last == "60.00", || format!("last {last}"))?;
    ensure(hm == "32.00", || format!("harmonic mean {hm}"))?;
    Ok(format!("average {avg}, last {last}, harmonic {hm}"))
}

fn determinism() -> Outcome {
    let once = || {
        let (train, test) = small_stream(11);
        let stream = make_task_stream(12, 0, 4, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let run = run_incremental(&train, &test, &stream, &cfg, &RunOptions::default()).unwrap();
        let ckpts: Vec<Vec<u8>> = run.states.iter().map(ModelState::to_bytes).collect();
        (ckpts, run.report.to_csv())
    };
    let (a, csv_a) = once();
    let (b, csv_b) = once();
    ensure(a == b, || "checkpoints differ between identical runs".into())?;
    ensure(csv_a == csv_b, || "CSV reports differ between identical runs".into())?;
    Ok(format!("{} checkpoints and CSV byte-identical", a.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient exactness", gradient_exactness),
        ("zero-shot reduction", zero_shot_reduction),
        ("freezing invariant", freezing_invariant),
        ("herding oracle", herding_oracle),
        ("permutation invariance", permutation_invariance),
        ("end-to-end ordering", end_to_end_ordering),
        ("exemplar budgets", exemplar_budgets),
        ("retrieval mode", retrieval_mode),
        ("metrics arithmetic", metrics_arithmetic),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
