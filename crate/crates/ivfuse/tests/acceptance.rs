//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p ivfuse --test acceptance`; pass criterion numbers
//! after `--` to run a subset.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ivfuse::checkpoint::save_denoiser;
use ivfuse::cli::run_cli;
use ivfuse::synthetic::{generate_pair, SyntheticPair};
use ivfuse_core::color::{ciede2000, srgb_to_lab, Lab};
use ivfuse_core::denoiser::{train_diffusion, Denoiser, DenoiserConfig, DiffusionTrainConfig};
use ivfuse_core::diffusion::{diffusion_loss, forward_step, q_sample, MultiChannelImage, NoiseLoss, NoiseSchedule};
use ivfuse_core::fusion::{
    collect_features, evaluate_fusion_loss, fuse, loss_fusion_on_tape, train_fusion, FusionConfig, FusionHead,
    FusionTrainConfig, GradientLoss,
};
use ivfuse_core::metrics::*;
use ivfuse_core::params::ParamStore;
use ivfuse_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(200, 1e-4, 0.02).unwrap()
}

fn random_image(seed: u64) -> MultiChannelImage {
    let mut r = rng(seed);
    MultiChannelImage::new(Tensor::from_fn(&[8, 8, 4], |_| r.random_range(-1.0..1.0))).unwrap()
}

/// Worst per-pixel mean error in standard errors and the pooled relative
/// variance error of `draws` against `sqrt(abar) * i0` and `1 - abar`.
fn moment_errors(i0: &Tensor, draws: &[Tensor], abar: f64) -> (f64, f64) {
    let n = draws.len() as f64;
    let var = 1.0 - abar;
    let se = (var / n).sqrt();
    let (mut worst_se, mut sq_total) = (0.0f64, 0.0);
    for (j, x0) in i0.data().iter().enumerate() {
        let mean = draws.iter().map(|d| d.data()[j]).sum::<f64>() / n;
        worst_se = worst_se.max((mean - abar.sqrt() * x0).abs() / se);
        sq_total += draws.iter().map(|d| (d.data()[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    }
    let pooled = sq_total / i0.len() as f64;
    (worst_se, (pooled - var).abs() / var)
}

const DRAWS: usize = 5000;
const MC_STEPS: [usize; 3] = [50, 100, 200];

fn moments_line(t: usize, se: f64, rel: f64) -> String {
    format!("t={t}: worst mean error {se:.2} SE (< 4), variance error {:.2}% (< 5%)", rel * 100.0)
}

fn criterion_1() -> Outcome {
    let s = schedule();
    let i0 = random_image(1);
    let mut r = rng(11);
    let mut lines = Vec::new();
    let mut ok = true;
    for t in MC_STEPS {
        let draws: Vec<Tensor> = (0..DRAWS)
            .map(|_| q_sample(&i0, t, &Tensor::randn(&[8, 8, 4], &mut r), &s).unwrap().image.into_tensor())
            .collect();
        let (se, rel) = moment_errors(i0.tensor(), &draws, s.alpha_bar(t));
        ok &= se < 4.0 && rel < 0.05;
        lines.push(moments_line(t, se, rel));
    }
    check(ok, lines.join("; "))
}

fn criterion_2() -> Outcome {
    let s = schedule();
    let i0 = random_image(2);
    let mut r = rng(12);
    let mut chains: Vec<MultiChannelImage> = vec![i0.clone(); DRAWS];
    let mut lines = Vec::new();
    let mut ok = true;
    for t in 1..=200 {
        for c in chains.iter_mut() {
            *c = forward_step(c, t, &s, &mut r).unwrap();
        }
        if MC_STEPS.contains(&t) {
            let draws: Vec<Tensor> = chains.iter().map(|c| c.tensor().clone()).collect();
            let (se, rel) = moment_errors(i0.tensor(), &draws, s.alpha_bar(t));
            ok &= se < 4.0 && rel < 0.05;
            lines.push(moments_line(t, se, rel));
        }
    }
    check(ok, lines.join("; "))
}

const GRAD_TOL: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
const GRAD_FLOOR: f64 = 1e-6;
/// Difference stencils tried in order until one agrees: a central step
/// that keeps roundoff small, fourth-order steps for tiny gradients whose
/// central truncation error dominates, then short central steps that do not
/// straddle a kink.
const FD_STENCILS: [(Stencil, f64); 5] =
    [(Stencil::Central, 1e-4), (Stencil::FivePoint, 1e-3), (Stencil::FivePoint, 1e-4), (Stencil::Central, 1e-6), (Stencil::Central, 1e-7)];

#[derive(Clone, Copy)]
enum Stencil {
    Central,
    FivePoint,
}

/// Worst relative error between `analytic` and finite differences of
/// `loss`, where `loss(k, j, x)` evaluates with scalar `j` of tensor `k` set
/// to `x`. The best agreement over [`FD_STENCILS`] counts.
fn gradient_error(params: &ParamStore, analytic: &[Tensor], mut loss: impl FnMut(usize, usize, f64) -> f64) -> GradientReport {
    let mut report = GradientReport { worst: 0.0, count: 0, at: String::new() };
    for (k, t) in params.tensors().iter().enumerate() {
        for (j, &x) in t.data().iter().enumerate() {
            let a = analytic[k].data()[j];
            let (mut err, mut numeric) = (f64::INFINITY, 0.0);
            for (stencil, h) in FD_STENCILS {
                let mut f = |d: f64| loss(k, j, x + d * h);
                let n = match stencil {
                    Stencil::Central => (f(1.0) - f(-1.0)) / (2.0 * h),
                    Stencil::FivePoint => (f(-2.0) - 8.0 * f(-1.0) + 8.0 * f(1.0) - f(2.0)) / (12.0 * h),
                };
                let e = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR);
                if e < err {
                    (err, numeric) = (e, n);
                }
                if err < GRAD_TOL {
                    break;
                }
            }
            loss(k, j, x);
            if err > report.worst {
                report.worst = err;
                report.at = format!("{}[{j}] analytic {a:.6e} numeric {numeric:.6e}", params.names()[k]);
            }
            report.count += 1;
        }
    }
    report
}

struct GradientReport {
    worst: f64,
    count: usize,
    at: String,
}

fn randomize(t: &mut Tensor, std: f64, r: &mut ChaCha8Rng) {
    *t = Tensor::randn(t.dims(), r).scale(std);
}

fn small_batch(n: usize) -> Vec<MultiChannelImage> {
    (0..n)
        .map(|i| {
            let p = generate_pair(i, 16, 16, 7).unwrap();
            MultiChannelImage::from_sources(&p.visible, &p.infrared).unwrap()
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = DenoiserConfig { base_width: 4, embed_dim: 8 };
    let mut r = rng(3);
    let mut d = Denoiser::new(cfg, schedule(), &mut r).unwrap();
    // The zero-initialized head would hide every upstream gradient.
    randomize(d.params_mut().get_mut("head.kernel").unwrap(), 0.3, &mut r);
    randomize(d.params_mut().get_mut("head.bias").unwrap(), 0.3, &mut r);
    let batch = small_batch(1);

    let diff_loss = |d: &Denoiser, grads: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let p = d.params().bind(&mut tape, grads);
        let l = diffusion_loss(&mut tape, &batch, d, &p, d.schedule(), &mut rng(30), NoiseLoss::Norm).unwrap().loss;
        let value = tape.value(l).item();
        if !grads {
            return (value, Vec::new());
        }
        let g = tape.backward(l).unwrap();
        (value, p.gradients(&g, d.params()))
    };
    let (_, analytic) = diff_loss(&d, true);
    let reference = d.params().clone();
    let diff = gradient_error(&reference, &analytic, |k, j, x| {
        d.params_mut().tensors_mut()[k].data_mut()[j] = x;
        diff_loss(&d, false).0
    });

    let fcfg = FusionConfig { feature_width: 8, hidden_width: 8, ..FusionConfig::default() };
    let mut head = FusionHead::new(fcfg.clone(), &cfg, &mut r).unwrap();
    randomize(head.params_mut().get_mut("fuse2.kernel").unwrap(), 0.3, &mut r);
    randomize(head.params_mut().get_mut("fuse2.bias").unwrap(), 0.3, &mut r);
    let items: Vec<_> = batch
        .iter()
        .map(|img| {
            let stacks = collect_features(&d, img, &fcfg, &mut r).unwrap();
            let (vis, ir) = img.to_sources();
            (stacks, vis, ir)
        })
        .collect();
    let fusion_loss = |head: &FusionHead, grads: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let p = head.params().bind(&mut tape, grads);
        let mut total = None;
        for (stacks, vis, ir) in &items {
            let vars: Vec<Vec<_>> = stacks.iter().map(|s| s.maps().iter().map(|m| tape.constant(m.clone())).collect()).collect();
            let features = head.aggregate_on_tape(&mut tape, &p, &vars).unwrap();
            let fused = head.head_on_tape(&mut tape, &p, features).unwrap();
            let l = loss_fusion_on_tape(&mut tape, fused, ir, vis, GradientLoss::Magnitude).unwrap();
            total = Some(match total {
                Some(acc) => tape.add(acc, l).unwrap(),
                None => l,
            });
        }
        let l = total.unwrap();
        let value = tape.value(l).item();
        if !grads {
            return (value, Vec::new());
        }
        let g = tape.backward(l).unwrap();
        (value, p.gradients(&g, head.params()))
    };
    let (_, analytic) = fusion_loss(&head, true);
    let reference = head.params().clone();
    let fus = gradient_error(&reference, &analytic, |k, j, x| {
        head.params_mut().tensors_mut()[k].data_mut()[j] = x;
        fusion_loss(&head, false).0
    });

    let elapsed = start.elapsed();
    check(
        diff.worst < GRAD_TOL && fus.worst < GRAD_TOL && elapsed < Duration::from_secs(300),
        format!(
            "L_diff worst relative error {:.2e} over {} parameters ({}), L_f {:.2e} over {} ({}), bound 1e-4; {:.0}s (< 300s)",
            diff.worst,
            diff.count,
            diff.at,
            fus.worst,
            fus.count,
            fus.at,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut worst = 0.0f64;
    for p in CIEDE2000_PAIRS {
        let (x, y) = (Lab::new(p[0], p[1], p[2]), Lab::new(p[3], p[4], p[5]));
        worst = worst.max((ciede2000(x, y) - p[6]).abs()).max((ciede2000(y, x) - p[6]).abs());
    }
    check(worst <= 1e-4, format!("34 pairs, worst deviation {worst:.2e} (<= 1e-4)"))
}

fn rgb(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(&[h, w, 3], |_| r.random::<f64>())
}

fn delta_e_oracle(v: &Tensor, f: &Tensor) -> f64 {
    let px = |t: &Tensor, i: usize| srgb_to_lab([t.data()[3 * i], t.data()[3 * i + 1], t.data()[3 * i + 2]]);
    let n = v.len() / 3;
    (0..n).map(|i| ciede2000(px(v, i), px(f, i))).sum::<f64>() / n as f64
}

fn criterion_5() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let flat = gray_from(8, 8, vec![0.37; 64]);
    for seed in 0..8u64 {
        let (h, w) = (5 + seed as usize % 4, 8 - seed as usize % 3);
        let (a, b, f) = (random_gray(h, w, seed), random_gray(h, w, seed + 100), random_gray(h, w, seed + 200));
        let (v, fc) = (rgb(h, w, seed + 300), rgb(h, w, seed + 400));
        expect(metric_delta_e(&v, &v).unwrap() == 0.0, "DeltaE(x, x) = 0");
        let q = metric_qabf(&a, &b, &f).unwrap();
        expect((0.0..=1.0).contains(&q), "Qabf in [0, 1]");
        expect((q - metric_qabf(&b, &a, &f).unwrap()).abs() < 1e-12, "Qabf swap symmetry");
        expect((metric_mi(&a, &b, &f).unwrap() - metric_mi(&b, &a, &f).unwrap()).abs() < 1e-12, "MI swap symmetry");
        expect((metric_mi(&a, &b, &f).unwrap() - mi_oracle(&a, &b, &f)).abs() < 1e-10, "MI oracle");
        expect((metric_sf(&f).unwrap() - sf_oracle(&f)).abs() < 1e-12, "SF oracle");
        expect((metric_sd(&f) - sd_oracle(&f)).abs() < 1e-10, "SD oracle");
        expect((q - qabf_oracle(&a, &b, &f)).abs() < 1e-12, "Qabf oracle");
        expect((metric_delta_e(&v, &fc).unwrap() - delta_e_oracle(&v, &fc)).abs() < 1e-10, "DeltaE oracle");
        let n = if h.min(w) >= 5 { 5 } else { 3 };
        expect((viff_single_scale(&a, &b, &f, n).unwrap() - vif_single_scale_oracle(&a, &b, &f, n)).abs() < 1e-10, "VIFF scale oracle");
    }
    expect(metric_sf(&flat).unwrap() == 0.0, "SF(const) = 0");
    expect(metric_sd(&flat) == 0.0, "SD(const) = 0");
    let big = random_gray(32, 32, 9);
    expect((metric_vif(&big, &big, &big).unwrap() - 1.0).abs() <= 1e-6, "VIFF(A, A, A) = 1");
    let (a, b, f) = (random_gray(32, 32, 10), random_gray(32, 32, 11), random_gray(32, 32, 12));
    expect((metric_vif(&a, &b, &f).unwrap() - vif_oracle(&a, &b, &f)).abs() < 1e-9, "VIFF four-scale oracle");
    failures.dedup();
    check(failures.is_empty(), if failures.is_empty() { "all invariants and loop oracles hold".into() } else { failures.join(", ") })
}

const TRAIN_PAIRS: usize = 64;
const TRAIN_SEED: u64 = 1;
const HELD_OUT_PAIRS: usize = 16;
const HELD_OUT_SEED: u64 = 2;

fn joint(p: &SyntheticPair) -> MultiChannelImage {
    MultiChannelImage::from_sources(&p.visible, &p.infrared).unwrap()
}

fn training_set() -> Vec<MultiChannelImage> {
    (0..TRAIN_PAIRS).map(|i| joint(&generate_pair(i, 32, 32, TRAIN_SEED).unwrap())).collect()
}

fn held_out() -> Vec<SyntheticPair> {
    (0..HELD_OUT_PAIRS).map(|i| generate_pair(i, 32, 32, HELD_OUT_SEED).unwrap()).collect()
}

fn train_desk_denoiser() -> (Denoiser, Vec<f64>) {
    let data = training_set();
    let mut r = rng(6);
    let mut d = Denoiser::new(DenoiserConfig::default(), schedule(), &mut r).unwrap();
    let history = train_diffusion(&mut d, &data, &DiffusionTrainConfig::default(), &mut r).unwrap();
    (d, history)
}

/// The trained desk-scale denoiser, shared by criteria 6 to 8.
fn desk_denoiser() -> &'static (Denoiser, Vec<f64>, Duration) {
    static CELL: OnceLock<(Denoiser, Vec<f64>, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let (d, h) = train_desk_denoiser();
        (d, h, start.elapsed())
    })
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_6() -> Outcome {
    let (_, history, elapsed) = desk_denoiser();
    let first = window_mean(&history[..100]);
    let last = window_mean(&history[history.len() - 100..]);
    let (_, rerun) = train_desk_denoiser();
    let identical = rerun.iter().map(|v| v.to_bits()).eq(history.iter().map(|v| v.to_bits()));
    check(
        history.len() == 2000 && last <= 0.5 * first && identical && *elapsed < Duration::from_secs(1800),
        format!(
            "L_diff first-100 mean {first:.3}, last-100 mean {last:.3}, ratio {:.3} (<= 0.5); rerun identical: {identical}; {:.0}s per run (<= 1800s)",
            last / first,
            elapsed.as_secs_f64()
        ),
    )
}

/// Fusion learning rate for the desk-scale run; see the README.
const DESK_FUSION_LR: f64 = 1e-3;

fn criterion_7() -> Outcome {
    let (d, _, _) = desk_denoiser();
    let data = training_set();
    let test = held_out();
    let test_joint: Vec<_> = test.iter().map(joint).collect();
    let mut r = rng(7);
    let mut head = FusionHead::new(FusionConfig::default(), d.config(), &mut r).unwrap();
    let initial = evaluate_fusion_loss(&head, d, &test_joint, &mut rng(70)).unwrap();
    let cfg = FusionTrainConfig { crop: 32, batch_size: 8, epochs: 25, learning_rate: DESK_FUSION_LR };
    let history = train_fusion(&mut head, d, &data, &cfg, &mut r).unwrap();
    let last = evaluate_fusion_loss(&head, d, &test_joint, &mut rng(70)).unwrap();

    let (mut de_fused, mut de_ir, mut hits, mut thermal) = (0.0, 0.0, 0usize, 0usize);
    for (i, (p, img)) in test.iter().zip(&test_joint).enumerate() {
        let fused = fuse(img, d, &head, 700 + i as u64).unwrap();
        de_fused += metric_delta_e(&p.visible, fused.tensor()).unwrap();
        let ir3 = Tensor::from_fn(p.visible.dims(), |j| p.infrared.data()[j / 3]);
        de_ir += metric_delta_e(&p.visible, &ir3).unwrap();
        let (gf, gv) = (GrayImage::new(fused.tensor()).unwrap(), GrayImage::new(&p.visible).unwrap());
        for (j, m) in p.mask.data().iter().enumerate() {
            if *m > 0.5 {
                thermal += 1;
                hits += usize::from(gf.data()[j] >= gv.data()[j] - 0.05);
            }
        }
    }
    let n = test.len() as f64;
    let (de_fused, de_ir) = (de_fused / n, de_ir / n);
    let ratio = last / initial;
    let covered = hits as f64 / thermal as f64;
    check(
        history.steps.len() == 200 && ratio <= 0.4 && de_fused < de_ir && covered >= 0.9,
        format!(
            "(a) held-out L_f {initial:.3} -> {last:.3}, ratio {ratio:.3} (<= 0.4); (b) mean DeltaE fused {de_fused:.2} vs infrared {de_ir:.2}; (c) {:.1}% of {thermal} thermal pixels keep luminance (>= 90%)",
            covered * 100.0
        ),
    )
}

fn run(args: &[&str]) -> i32 {
    run_cli(std::iter::once("ivfuse").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const ABLATION_CONFIG: &str = "\
[fusion_training]
crop = 32
batch_size = 8
epochs = 4
learning_rate = 0.001
";

fn criterion_8() -> Outcome {
    let (d, _, _) = desk_denoiser();
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-ablation");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let denoiser = root.join("denoiser.difz");
    save_denoiser(d, &denoiser).unwrap();
    let cfg = root.join("ablation.toml");
    std::fs::write(&cfg, ABLATION_CONFIG).unwrap();
    let (train, test) = (root.join("train"), root.join("test"));
    let mut codes = vec![
        run(&["gen-synthetic", "--out", s(&train), "--count", "32", "--seed", "1"]),
        run(&["gen-synthetic", "--out", s(&test), "--count", "8", "--seed", "2", "--split", "test"]),
    ];
    let mut means = Vec::new();
    for (name, extra) in [("default", None), ("no-diffusion", Some("--no-diffusion"))] {
        let out = root.join(name);
        let common = ["--config", s(&cfg), "--out", s(&out)];
        let model = ["--denoiser", s(&denoiser)];
        let mut train_args = vec!["train-fusion", "--data", s(&train)];
        train_args.extend(common.iter().chain(&model).chain(&extra));
        codes.push(run(&train_args));
        let mut fuse_args = vec!["fuse", "--data", s(&test)];
        fuse_args.extend(common.iter().chain(&model));
        codes.push(run(&fuse_args));
        let mut eval_args = vec!["eval", "--data", s(&test)];
        eval_args.extend(common);
        codes.push(run(&eval_args));
        let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap_or_default();
        means.push((name, csv.lines().next().unwrap_or("").to_string(), csv.lines().last().unwrap_or("").to_string()));
    }
    let ok = codes.iter().all(|c| *c == 0)
        && means[0].1 == means[1].1
        && means.iter().all(|m| m.2.starts_with("mean,") && m.2.split(',').count() == 7);
    let detail = means.iter().map(|(n, _, m)| format!("{n}: {m}")).collect::<Vec<_>>().join("; ");
    check(ok, format!("{}; reports under {}", detail, root.display()))
}

fn criterion_9() -> Outcome {
    let readme = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = std::fs::read_to_string(&readme).map_err(|e| format!("{}: {e}", readme.display()))?;
    let ok = text.contains("are not acceptance targets");
    check(ok, "README states that full-scale benchmark values are not acceptance targets".into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "closed-form forward diffusion moments", criterion_1),
        (2, "Markov composition matches the closed form", criterion_2),
        (3, "gradient fidelity", criterion_3),
        (4, "CIEDE2000 verification pairs", criterion_4),
        (5, "metric invariants and loop oracles", criterion_5),
        (6, "desk-scale diffusion training", criterion_6),
        (7, "desk-scale fusion training and color fidelity", criterion_7),
        (8, "ablation runs end to end", criterion_8),
        (9, "full-scale numbers are out of scope", criterion_9),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
