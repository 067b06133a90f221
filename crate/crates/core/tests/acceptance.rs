//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any fails.
//!
//! Run alone with `cargo test --release -p crformer-core --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use crformer::attention::{attention_weights, build_region_bias, region_cross_attention_values, Projections};
use crformer::checkpoint;
use crformer::data::{lab_to_rgb, otsu_threshold, psnr, region_mae, rgb_to_lab, save_image, Triplet};
use crformer::eval::{evaluate_model, Stage};
use crformer::gradcheck::{self, GradcheckConfig};
use crformer::loss::{evaluate, local_area_means, spatial_term_on_grids, LossWeights, SpatialLossConfig};
use crformer::model::{composite, ModelConfig};
use crformer::optim::AdamConfig;
use crformer::oracle::{compare, MaskCase};
use crformer::synth::{generate, SyntheticShadowSpec};
use crformer::train::{AugmentConfig, RunConfig, ScheduleConfig, Trainer};
use crformer::{AttentionKind, Graph, KeyRegion, ShadowMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

type Check = fn() -> Outcome;

fn main() -> ExitCode {
    let checks: [(&str, Check); 9] = [
        ("rca-oracle-equivalence", rca_oracle),
        ("attention-invariants", attention_invariants),
        ("gradient-suite", gradient_suite),
        ("overfit", overfit),
        ("ablation-rca-vs-vanilla", ablation),
        ("composite-exactness", composite_exactness),
        ("metrics", metrics),
        ("loss-identities", loss_identities),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        if !result.passed {
            failed += 1;
        }
        println!(
            "[{}] {} {:<24} {} ({secs:.1} s)",
            if result.passed { "PASS" } else { "FAIL" },
            i + 1,
            name,
            result.detail
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn rca_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..100 {
        let case = match i {
            0 => MaskCase::AllShadow,
            1 => MaskCase::NoShadow,
            _ => MaskCase::Random,
        };
        let tokens = if i < 4 { 256 } else { rng.random_range(1..=256) };
        let channels = rng.random_range(1..=16);
        let r = compare(&mut rng, tokens, channels, case).expect("oracle comparison");
        worst = worst.max(r.max_abs_diff);
        failures += usize::from(!r.passed);
    }
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && worst < 1e-10 && within(elapsed, 30),
        format!("100 instances, max |Δ| {worst:.2e} (< 1e-10), {failures} failures, {elapsed:.1?} (< 30 s)"),
    )
}

struct AttnInstance {
    fq: Tensor,
    fkv: Tensor,
    w: [Tensor; 3],
    ms: Vec<f64>,
}

fn attn_instance(rng: &mut ChaCha8Rng, tokens: usize, channels: usize, p: f64) -> AttnInstance {
    let mut normal = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-2.0..2.0));
    let fq = normal(&[tokens, channels]);
    let fkv = normal(&[tokens, channels]);
    let w = [
        normal(&[channels, channels]),
        normal(&[channels, channels]),
        normal(&[channels, channels]),
    ];
    let ms = (0..tokens).map(|_| rng.random_bool(p) as u8 as f64).collect();
    AttnInstance { fq, fkv, w, ms }
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut row_err, mut nonzero_rows, mut leaks, mut instances) = (0.0f64, 0usize, 0usize, 0usize);
    for i in 0..40 {
        let tokens = rng.random_range(2..=128);
        let channels = rng.random_range(1..=16);
        let p = [0.3, 0.5, 0.8][i % 3];
        let inst = attn_instance(&mut rng, tokens, channels, p);
        if !inst.ms.contains(&1.0) || !inst.ms.contains(&0.0) {
            continue;
        }
        instances += 1;
        let bias = build_region_bias(&inst.ms).unwrap();
        let mut g = Graph::new();
        let (fq, fkv) = (g.constant(inst.fq.clone()), g.constant(inst.fkv.clone()));
        let proj = Projections {
            query: g.constant(inst.w[0].clone()),
            key: g.constant(inst.w[1].clone()),
            value: g.constant(inst.w[2].clone()),
        };
        let (weights, v) = attention_weights(&mut g, fq, fkv, &proj, Some(&bias)).unwrap();
        let out = g.matmul(weights, v).unwrap();
        let n = tokens;
        for q in 0..n {
            if inst.ms[q] == 1.0 {
                let s: f64 = g.value(weights)[q * n..(q + 1) * n].iter().sum();
                row_err = row_err.max((s - 1.0).abs());
            } else if g.value(out)[q * channels..(q + 1) * channels].iter().any(|&x| x != 0.0) {
                nonzero_rows += 1;
            }
        }

        // Perturb V directly at shadow-key rows.
        let mut v2 = g.tensor(v);
        for (k, &m) in inst.ms.iter().enumerate() {
            if m == 1.0 {
                for c in 0..channels {
                    v2.data_mut()[k * channels + c] += rng.random_range(-5.0..5.0);
                }
            }
        }
        let v2 = g.constant(v2);
        let out2 = g.matmul(weights, v2).unwrap();
        if g.value(out2) != g.value(out) {
            leaks += 1;
        }

        // Perturb the key/value features at shadow positions end to end.
        let mut fkv2 = inst.fkv.clone();
        for (k, &m) in inst.ms.iter().enumerate() {
            if m == 1.0 {
                for c in 0..channels {
                    fkv2.data_mut()[k * channels + c] += rng.random_range(-5.0..5.0);
                }
            }
        }
        let [wq, wk, wv] = &inst.w;
        let a = region_cross_attention_values(&inst.fq, &inst.fkv, &inst.ms, wq, wk, wv).unwrap();
        let b = region_cross_attention_values(&inst.fq, &fkv2, &inst.ms, wq, wk, wv).unwrap();
        if a.data() != b.data() || g.value(out) != a.data() {
            leaks += 1;
        }
    }
    outcome(
        row_err < 1e-12 && nonzero_rows == 0 && leaks == 0 && instances >= 30,
        format!(
            "{instances} instances: max |row sum − 1| {row_err:.1e} (< 1e-12), {nonzero_rows} nonzero non-shadow rows, {leaks} shadow-key leaks"
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let ops = gradcheck::op_suite(0).expect("op suite");
    let worst_op = ops
        .groups
        .iter()
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
        .unwrap();
    let cfg = GradcheckConfig::default();
    let model = gradcheck::run(&cfg).expect("model gradcheck");
    let elapsed = start.elapsed();
    for g in ops.groups.iter().chain(&model.groups).filter(|g| !g.passed) {
        println!("    failing group {}: {:.3e}", g.name, g.relative_error);
    }
    outcome(
        ops.passed() && model.passed() && within(elapsed, 300),
        format!(
            "{} ops max {:.1e} ({}) < 1e-5; C={} {}×{} model, {} groups max {:.1e} < 1e-3; {elapsed:.1?} (< 5 min)",
            ops.groups.len(),
            worst_op.relative_error,
            worst_op.name,
            cfg.model.base_channels,
            cfg.size,
            cfg.size,
            model.groups.len(),
            model.max_error()
        ),
    )
}

/// Training recipe shared by the overfit and ablation checks.
fn recipe(attention: AttentionKind, seed: u64, steps: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            base_channels: 16,
            num_blocks: 2,
            attention,
            init_std: 0.1,
            refine_channel_scale: 1.0,
            ..ModelConfig::default()
        },
        optimizer: AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        },
        schedule: ScheduleConfig {
            epochs: 1000,
            halve_every: 50,
        },
        augment: AugmentConfig { crop: 64, flip: false },
        seed,
        max_steps: Some(steps),
        ..RunConfig::default()
    }
}

fn train(cfg: RunConfig, data: &[Triplet]) -> Trainer {
    let mut trainer = Trainer::new(cfg).expect("trainer");
    trainer.fit(data, |_| Ok(())).expect("training");
    trainer
}

const OVERFIT_STEPS: usize = 500;

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = generate(&SyntheticShadowSpec {
        samples: 4,
        ..SyntheticShadowSpec::default()
    })
    .expect("synthetic data");
    let trainer = train(
        recipe(AttentionKind::RegionAware(KeyRegion::NonShadow), 0, OVERFIT_STEPS),
        &data,
    );
    let report = evaluate_model(trainer.model(), &data).expect("evaluation");
    let elapsed = start.elapsed();
    let input = report.aggregate[&Stage::Input];
    let refined = report.aggregate[&Stage::Refined];
    let comp = report.aggregate[&Stage::Composite];
    let (s_in, s_out) = (input.shadow_mae.unwrap(), refined.shadow_mae.unwrap());
    let reduction = 1.0 - s_out / s_in;
    let ns_exact = comp.nonshadow_mae == input.nonshadow_mae;
    outcome(
        trainer.steps_taken() <= OVERFIT_STEPS && reduction >= 0.8 && ns_exact && within(elapsed, 600),
        format!(
            "{} steps, shadow MAE {s_in:.3} → {s_out:.3} ({:.1}% reduction, need ≥ 80%), composite non-shadow MAE {} input ({:?}), {elapsed:.1?} (< 10 min)",
            trainer.steps_taken(),
            100.0 * reduction,
            if ns_exact { "==" } else { "!=" },
            input.nonshadow_mae
        ),
    )
}

const ABLATION_STEPS: usize = 1000;

fn ablation() -> Outcome {
    let all = generate(&SyntheticShadowSpec {
        samples: 24,
        seed: 11,
        ..SyntheticShadowSpec::default()
    })
    .expect("synthetic data");
    let (train_set, val) = all.split_at(16);
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let score = |kind| {
            let t = train(recipe(kind, seed, ABLATION_STEPS), train_set);
            evaluate_model(t.model(), val).expect("evaluation").aggregate[&Stage::Refined]
                .shadow_mae
                .unwrap()
        };
        let rca = score(AttentionKind::RegionAware(KeyRegion::NonShadow));
        let vanilla = score(AttentionKind::Vanilla);
        wins += usize::from(rca <= vanilla);
        parts.push(format!("seed {seed}: {rca:.3} vs {vanilla:.3}"));
    }
    outcome(
        wins >= 2,
        format!("RCA ≤ vanilla on {wins}/3 seeds (val shadow MAE, {})", parts.join("; ")),
    )
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(vec![3, h, w], |_| rng.random_range(0.0..1.0))
}

fn composite_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (24, 20);
    let mut mismatches = 0;
    for _ in 0..20 {
        let pred = random_image(&mut rng, h, w);
        let input = random_image(&mut rng, h, w);
        let bits: Vec<f64> = (0..h * w).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let mask = ShadowMask::from_f64(h, w, &bits).unwrap();
        let out = composite(&pred, &input, &mask).unwrap();
        for c in 0..3 {
            for px in 0..h * w {
                let i = c * h * w + px;
                let m = bits[px];
                let expect = m * pred.data()[i] + (1.0 - m) * input.data()[i];
                mismatches += usize::from(out.data()[i].to_bits() != expect.to_bits());
            }
        }
    }
    let pred = random_image(&mut rng, h, w);
    let input = random_image(&mut rng, h, w);
    let zeros = composite(&pred, &input, &ShadowMask::filled(h, w, false)).unwrap();
    let ones = composite(&pred, &input, &ShadowMask::filled(h, w, true)).unwrap();
    let (z, o) = (zeros.data() == input.data(), ones.data() == pred.data());
    outcome(
        mismatches == 0 && z && o,
        format!("{mismatches} bitwise mismatches over 20 random masks; all-0 mask → I^s: {z}; all-1 mask → Î: {o}"),
    )
}

fn otsu_exhaustive(values: &[f64]) -> f64 {
    let levels: Vec<i128> = values.iter().map(|v| (v * 255.0).round() as i128).collect();
    let mut best = (0usize, 0u128, 1u128);
    for t in 0..255usize {
        let lo: Vec<i128> = levels.iter().copied().filter(|&l| l <= t as i128).collect();
        let hi: Vec<i128> = levels.iter().copied().filter(|&l| l > t as i128).collect();
        if lo.is_empty() || hi.is_empty() {
            continue;
        }
        let (n0, n1) = (lo.len() as i128, hi.len() as i128);
        let d = (n1 * lo.iter().sum::<i128>() - n0 * hi.iter().sum::<i128>()).unsigned_abs();
        let (num, den) = (d * d, (n0 * n1) as u128);
        if num * best.2 > best.1 * den {
            best = (t, num, den);
        }
    }
    (best.0 as f64 + 0.5) / 255.0
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (16, 16);
    let mut notes = Vec::new();
    let mut ok = true;

    let gt = Tensor::from_fn(vec![3, h, w], |_| rng.random_range(0.25..0.75));
    let bits: Vec<f64> = (0..h * w).map(|i| ((i / w + i % w) % 3 == 0) as u8 as f64).collect();
    let mask = ShadowMask::from_f64(h, w, &bits).unwrap();
    let same = region_mae(&gt, &gt, &mask).unwrap();
    let zero = same.shadow_mae == Some(0.0) && same.nonshadow_mae == Some(0.0) && same.all_mae == 0.0;
    ok &= zero;
    notes.push(format!("identical → 0: {zero}"));

    let delta = 2.5;
    let mut lab = rgb_to_lab(&gt).unwrap();
    for px in 0..h * w {
        if bits[px] == 1.0 {
            lab.data_mut()[px] += delta;
        }
    }
    let shifted = lab_to_rgb(&lab).unwrap();
    let r = region_mae(&shifted, &gt, &mask).unwrap();
    let err = (r.shadow_mae.unwrap() - delta / 3.0).abs();
    ok &= err < 1e-9;
    notes.push(format!("L+{delta} shift → shadow MAE err {err:.1e} (< 1e-9)"));

    let mut otsu_ok = 0;
    let cases = 12;
    for i in 0..cases {
        let n = rng.random_range(10..400);
        let (a, b) = (rng.random_range(0.0..0.5), rng.random_range(0.5..1.0));
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let centre = if rng.random_bool(0.4) { a } else { b };
                let v: f64 = centre + rng.random_range(-0.15..0.15) * (i % 4) as f64;
                (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
            })
            .collect();
        let t = Tensor::new(vec![1, 1, n], values.clone()).unwrap();
        otsu_ok += usize::from(otsu_threshold(&t).unwrap() == otsu_exhaustive(&values));
    }
    ok &= otsu_ok == cases;
    notes.push(format!("Otsu = exhaustive {otsu_ok}/{cases}"));

    let base = Tensor::from_fn(vec![3, h, w], |_| rng.random_range(0.0..0.9));
    let up = Tensor::new(base.shape().to_vec(), base.data().iter().map(|v| v + 0.1).collect()).unwrap();
    let p = psnr(&up, &base).unwrap().0;
    ok &= (p - 20.0).abs() < 1e-6;
    notes.push(format!("PSNR(+0.1) = {p:.9} dB"));

    outcome(ok, notes.join("; "))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (cfg, w) = (SpatialLossConfig::default(), LossWeights::default());
    let gt = random_image(&mut rng, 16, 16);
    let perfect = evaluate(&gt, &gt, &gt, &w, &cfg).unwrap();
    let zero = perfect.reconstruction == 0.0 && perfect.spatial == 0.0;

    let mut shift_err: f64 = 0.0;
    let mut exact = 0;
    let trials = 20;
    for _ in 0..trials {
        let d = random_image(&mut rng, 16, 16);
        let r = random_image(&mut rng, 16, 16);
        let (a, b) = (local_area_means(&d, 4).unwrap(), local_area_means(&gt, 4).unwrap());
        let k: f64 = rng.random_range(-1.0..1.0);
        let moved = Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| v + k).collect()).unwrap();
        shift_err = shift_err.max((spatial_term_on_grids(&a, &b).unwrap() - spatial_term_on_grids(&moved, &b).unwrap()).abs());
        let v = evaluate(&d, &r, &gt, &w, &cfg).unwrap();
        exact += usize::from(v.total.to_bits() == (v.reconstruction + 10.0 * v.spatial).to_bits());
    }
    outcome(
        zero && shift_err < 1e-12 && exact == trials && w == (LossWeights { reconstruction: 1.0, spatial: 10.0 }),
        format!(
            "perfect prediction → L_rec = L_spa = 0: {zero}; shift invariance max err {shift_err:.1e} (< 1e-12); total = L_rec + 10·L_spa bitwise {exact}/{trials}"
        ),
    )
}

/// Every file a train → infer → eval run would write, as bytes.
fn pipeline_artifacts(data: &[Triplet], dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut cfg = RunConfig::default();
    cfg.model.base_channels = 8;
    cfg.augment.crop = 32;
    cfg.seed = 42;
    cfg.max_steps = Some(6);
    let mut trainer = Trainer::new(cfg).unwrap();
    let mut log = String::new();
    trainer
        .fit(data, |r| {
            log.push_str(&r.log_line());
            log.push('\n');
            Ok(())
        })
        .unwrap();
    let ckpt = checkpoint::to_bytes(trainer.model());
    let model = checkpoint::from_bytes(&ckpt).unwrap();
    let pred = model.predict(&data[0].shadow, &data[0].mask).unwrap();
    let mut out = vec![("loss.log".to_string(), log.into_bytes()), ("model.ckpt".to_string(), ckpt)];
    for (name, img) in [
        ("deshadowed.png", &pred.deshadowed),
        ("composite.png", &pred.composite),
        ("refined.png", &pred.refined),
    ] {
        let path = dir.join(name);
        save_image(&path, img).unwrap();
        out.push((name.to_string(), std::fs::read(&path).unwrap()));
    }
    let report = evaluate_model(&model, data).unwrap();
    out.push(("report.json".to_string(), report.to_json().into_bytes()));
    out
}

fn determinism() -> Outcome {
    let data = generate(&SyntheticShadowSpec {
        height: 48,
        width: 40,
        samples: 3,
        seed: 4,
        ..SyntheticShadowSpec::default()
    })
    .unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_artifacts(&data, a.path());
    let second = pipeline_artifacts(&data, b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} artifacts compared (log, checkpoint, images, report); differing: {:?}",
            first.len(),
            differing
        ),
    )
}
