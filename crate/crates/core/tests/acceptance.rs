//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p t2l-core --test acceptance -- --nocapture`.
//! Criterion 7 needs the pretrained ViT-B/32 weights; when they cannot be
//! fetched or found in the cache it reports FAIL with the reason and is
//! excluded from the final assertion.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use t2l_core::backend::pretrained::{self, PretrainedSpec};
use t2l_core::backend::{self, ClipBackend, RelevancyMap};
use t2l_core::config::{self, RunConfig};
use t2l_core::dataset::{AugmentationConfig, DEFAULT_TEMPLATES};
use t2l_core::generator::GeneratorConfig;
use t2l_core::image::{self, EditLayer, Image, OpacityMap, TextBundle};
use t2l_core::losses::{self, LossToggles, LossWeights};
use t2l_core::trainer::{self, BootstrapSchedule, TrainConfig};
use t2l_core::video::{
    self, crop_from_segment, synthetic_package, AtlasEdit, Layer, SyntheticSpec, TexelMap, TexelRect, UvGrid, UvRect,
    VideoSegmentSample, VideoTrainConfig,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

// ---- 1 ----

fn hyperparameters() -> Verdict {
    let mut bad = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            bad.push(name.to_string());
        }
    };
    let wi = LossWeights::image();
    let wv = LossWeights::video();
    check("lambda_g", wi.lambda_g == 1.0 && wv.lambda_g == 1.0);
    check("lambda_s", wi.lambda_s == 2.0 && wv.lambda_s == 3.0);
    check("lambda_r", wi.lambda_r == 5e-2 && wv.lambda_r == 5e-4);
    check("gamma", wi.gamma == 2.0 && wv.gamma == 2.0);
    check("bootstrap weight", wi.bootstrap_w0 == 10.0 && wv.bootstrap_w0 == 10.0);
    let ti = TrainConfig::image();
    let tv = TrainConfig::video();
    check("lr0", ti.lr0 == 2.5e-3 && tv.lr0 == 2.5e-3);
    check("decay", ti.lr_decay_gamma == 0.99 && tv.lr_decay_gamma == 0.999);
    check("floor", ti.lr_floor == 1e-5 && tv.lr_floor == 1e-5);
    check("steps", ti.total_steps == 1000 && tv.total_steps == 3000);
    check("schedules", ti.bootstrap_schedule == BootstrapSchedule::Linear && tv.bootstrap_schedule == BootstrapSchedule::Constant);
    check(
        "unaugmented period",
        AugmentationConfig::image().unaugmented_period == 75 && AugmentationConfig::video().unaugmented_period == 75,
    );
    check("madgrad", ti.momentum == 0.9 && ti.weight_decay == 0.01);
    let golden = [
        "photo of {}.",
        "high quality photo of {}.",
        "a photo of {}.",
        "the photo of {}.",
        "image of {}.",
        "an image of {}.",
        "high quality image of {}.",
        "a high quality image of {}.",
        "the {}.",
        "a {}.",
        "{}.",
        "{}",
        "{}!",
        "{}...",
    ];
    check("templates", DEFAULT_TEMPLATES == golden);
    // a zero-config run resolves to the same values
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    image::save_image(&input, &Image::filled(4, 4, [0.5; 3]).unwrap(), image::BitDepth::Eight).unwrap();
    let text = format!("input = {:?}\nout = \"o\"\n[prompts]\ntarget = \"t\"\n", input.to_str().unwrap());
    let cfg: RunConfig = config::parse_config(&text).unwrap();
    check("resolved image config", cfg.train == ti);
    if bad.is_empty() {
        verdict(true, "all defaults match the reference values")
    } else {
        verdict(false, format!("mismatched: {}", bad.join(", ")))
    }
}

// ---- 2 ----

fn compositing_and_loss_oracles() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (16, 24);
    let base = Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
    let color = Image::from_fn(h, w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
    let clear = EditLayer::new(color.clone(), OpacityMap::filled(h, w, 0.0).unwrap()).unwrap();
    let opaque = EditLayer::new(color.clone(), OpacityMap::filled(h, w, 1.0).unwrap()).unwrap();
    let identities = image::composite(&clear, &base).unwrap().planar() == base.planar()
        && image::composite(&opaque, &base).unwrap().planar() == color.planar();

    let b = ClipBackend::synthetic(5).unwrap();
    let img = Image::from_fn(224, 224, |y, x| [y as f32 / 224.0, x as f32 / 224.0, ((x + y) % 7) as f32 / 7.0]).unwrap();
    let ss = losses::self_similarity(&backend::spatial_tokens(&b, &img).unwrap()).unwrap();
    let n = ss.size;
    let mut diag_err = 0.0f64;
    let mut asym = 0.0f64;
    for i in 0..n {
        diag_err = diag_err.max((ss.values[i * n + i] - 1.0).abs());
        for j in 0..n {
            asym = asym.max((ss.values[i * n + j] - ss.values[j * n + i]).abs());
        }
    }
    let structure_same = losses::structure_loss(&img, &img, &b).unwrap();

    let zero = losses::sparsity_loss(&OpacityMap::filled(8, 8, 0.0).unwrap(), 2.0).unwrap().combined;
    let one = losses::sparsity_loss(&OpacityMap::filled(8, 8, 1.0).unwrap(), 2.0).unwrap().combined;
    let expected_one = 2.0 + (2.0 / (1.0 + (-5.0f64).exp()) - 1.0);

    let elapsed = started.elapsed();
    let pass = identities
        && diag_err <= 1e-5
        && asym <= 1e-5
        && structure_same == 0.0
        && zero == 0.0
        && (one - expected_one).abs() < 1e-6
        && within(elapsed, Duration::from_secs(10));
    verdict(
        pass,
        format!(
            "composite identities exact: {identities}; diag err {diag_err:.1e}; asymmetry {asym:.1e}; \
             structure(I,I) = {structure_same}; sparsity(0) = {zero}; sparsity(1) = {one:.9} vs {expected_one:.9}; {elapsed:.1?}"
        ),
    )
}

// ---- 3 ----

/// Relative L2 error between the autodiff gradient of `f` at `x0` and a
/// central finite difference.
fn gradient_error(x0: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let x = Var::from_tensor(x0).unwrap();
    let g = f(x.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
    let eps = 1e-4;
    let eval = |v: Vec<f64>| -> f64 {
        let t = Tensor::from_vec(v, x0.dims(), &Device::Cpu).unwrap();
        f(&t).to_scalar::<f64>().unwrap()
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += eps;
        let mut m = base.clone();
        m[i] -= eps;
        let fd = (eval(p) - eval(m)) / (2.0 * eps);
        num += (analytic[i] - fd).powi(2);
        den += fd.powi(2);
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

fn gradient_checks() -> Verdict {
    let started = Instant::now();
    let dev = Device::Cpu;
    let alpha = Tensor::rand(0.05f64, 0.95, (1, 1, 8, 8), &dev).unwrap();
    let color = Tensor::rand(0.0f64, 1.0, (1, 3, 8, 8), &dev).unwrap();
    let base = Tensor::rand(0.0f64, 1.0, (1, 3, 8, 8), &dev).unwrap();
    let target = Tensor::rand(0.0f64, 1.0, (1, 3, 8, 8), &dev).unwrap();
    let relevancy = Tensor::rand(0.0f64, 1.0, (1, 1, 224, 224), &dev).unwrap();

    let sparsity = gradient_error(&alpha, |a| {
        let (l1, l0) = losses::sparsity_terms(a).unwrap();
        (l1.affine(2.0, 0.0).unwrap() + l0).unwrap()
    });
    let bootstrap = gradient_error(&alpha, |a| losses::bootstrap_term(a, &relevancy).unwrap());
    let composite_loss = |c: &Tensor, a: &Tensor| {
        let out = image::composite_tensor(c, a, &base).unwrap();
        (out - &target).unwrap().sqr().unwrap().mean_all().unwrap()
    };
    let via_alpha = gradient_error(&alpha, |a| composite_loss(&color, a));
    let via_color = gradient_error(&color, |c| composite_loss(c, &alpha));
    let worst = sparsity.max(bootstrap).max(via_alpha).max(via_color);
    let elapsed = started.elapsed();
    verdict(
        worst < 1e-3 && within(elapsed, Duration::from_secs(60)),
        format!(
            "relative errors: sparsity {sparsity:.1e}, bootstrap {bootstrap:.1e}, composite wrt alpha {via_alpha:.1e}, \
             wrt color {via_color:.1e}; {elapsed:.1?}"
        ),
    )
}

// ---- 4 ----

fn bootstrap_convergence() -> Verdict {
    let started = Instant::now();
    let b = ClipBackend::synthetic(1).unwrap();
    let src = Image::from_fn(224, 224, |y, x| {
        [y as f32 / 224.0, x as f32 / 224.0, ((x * y) % 17) as f32 / 17.0]
    })
    .unwrap();
    let target = RelevancyMap::from_fn(|y, x| {
        let d = ((y as f32 - 100.0).powi(2) + (x as f32 - 120.0).powi(2)).sqrt();
        1.0 / (1.0 + ((d - 50.0) / 8.0).exp())
    })
    .unwrap();
    let cfg = TrainConfig {
        total_steps: 300,
        toggles: LossToggles::only_bootstrap(),
        augmentation: AugmentationConfig::image().without_input_augmentation(),
        generator: GeneratorConfig {
            base_channels: 16,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::image()
    };
    let bundle = TextBundle::new("anything").unwrap();
    let out = trainer::train_image(&src, &bundle, &cfg, &b, Some(&target)).unwrap();
    let mse = losses::bootstrap_loss(&target, out.layer.alpha()).unwrap();
    let elapsed = started.elapsed();
    verdict(
        mse < 1e-3 && within(elapsed, Duration::from_secs(600)),
        format!("alpha vs relevancy MSE {mse:.2e} after 300 steps (16 base channels, no input augmentation); {elapsed:.1?}"),
    )
}

// ---- 5 ----

fn bilinear_reference(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |r: usize, c: usize| plane[r * w + c] as f64;
    (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
}

fn uv_oracles() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let res = 64;
    let rect = TexelRect { y: 10, x: 20, h: 30, w: 40 };
    let color = Image::from_fn(rect.h, rect.w, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
    let alpha = OpacityMap::new(rect.h, rect.w, (0..rect.h * rect.w).map(|_| rng.random()).collect()).unwrap();
    let edit = AtlasEdit {
        layer: Layer::Foreground,
        rect,
        edit: EditLayer::new(color.clone(), alpha.clone()).unwrap(),
    };
    let map = TexelMap {
        bounds: UvRect::FULL,
        resolution: res,
    };
    let (fh, fw) = (100, 100);
    let mut values = Vec::with_capacity(fh * fw * 2);
    for _ in 0..fh * fw {
        let tx = rng.random_range(rect.x as f64..(rect.x + rect.w - 1) as f64);
        let ty = rng.random_range(rect.y as f64..(rect.y + rect.h - 1) as f64);
        values.push((2.0 * tx / (res - 1) as f64 - 1.0) as f32);
        values.push((2.0 * ty / (res - 1) as f64 - 1.0) as f32);
    }
    let grid = UvGrid {
        height: fh,
        width: fw,
        values,
    };
    let frame = video::render_layer_to_frame(&edit, &map, &grid).unwrap();
    let mut worst = 0.0f64;
    for i in 0..fh * fw {
        let (u, v) = (grid.values[2 * i] as f64, grid.values[2 * i + 1] as f64);
        let x = (u + 1.0) / 2.0 * (res - 1) as f64 - rect.x as f64;
        let y = (v + 1.0) / 2.0 * (res - 1) as f64 - rect.y as f64;
        for c in 0..3 {
            let want = bilinear_reference(color.channel(c), rect.h, rect.w, y, x);
            worst = worst.max((frame.color().channel(c)[i] as f64 - want).abs());
        }
        let want = bilinear_reference(alpha.values(), rect.h, rect.w, y, x);
        worst = worst.max((frame.alpha().values()[i] as f64 - want).abs());
    }

    // exhaustive bounds: synthetic UVs are integer texels by construction
    let spec = SyntheticSpec {
        frame_count: 10,
        height: 24,
        width: 32,
        fg_shift: 2,
        bg_shift: 1,
        ..SyntheticSpec::default()
    };
    let pkg = synthetic_package(&spec).unwrap();
    let mut mismatches = 0;
    let mut cases = 0;
    let seg_cfg = video::SegmentConfig::default();
    for _ in 0..200 {
        let s = video::sample_segment(spec.frame_count, (spec.height, spec.width), &seg_cfg, &mut rng);
        for (layer, shift) in [(Layer::Foreground, spec.fg_shift), (Layer::Background, spec.bg_shift)] {
            let frames = s.frames(spec.frame_count);
            let (t0, t1) = (*frames.iter().min().unwrap(), *frames.iter().max().unwrap());
            let (y, x, h, w) = s.region;
            let want = TexelRect {
                y,
                x: x + shift * t0,
                h,
                w: w + shift * (t1 - t0),
            };
            let got = crop_from_segment(&pkg, layer, &s).unwrap();
            cases += 1;
            if got.rect != want || got.degenerate {
                mismatches += 1;
            }
        }
    }
    let ident = synthetic_package(&SyntheticSpec::identity(5, 16)).unwrap();
    let point = VideoSegmentSample {
        t: 2,
        k: 2,
        region: (3, 7, 1, 1),
    };
    let single = crop_from_segment(&ident, Layer::Background, &point).unwrap();
    let degenerate_ok = single.degenerate && single.rect == TexelRect { y: 3, x: 7, h: 1, w: 1 };
    let elapsed = started.elapsed();
    verdict(
        worst <= 1e-6 && mismatches == 0 && degenerate_ok && within(elapsed, Duration::from_secs(60)),
        format!(
            "max sample error {worst:.1e} over {} samples; crop bounds {mismatches}/{cases} mismatches; \
             single-texel crop flagged: {degenerate_ok}; {elapsed:.1?}",
            fh * fw
        ),
    )
}

// ---- 6 ----

fn temporal_consistency() -> Verdict {
    let started = Instant::now();
    let spec = SyntheticSpec {
        frame_count: 10,
        height: 24,
        width: 24,
        fg_shift: 1,
        ..SyntheticSpec::default()
    };
    let pkg = synthetic_package(&spec).unwrap();
    let mut cfg = VideoTrainConfig::default();
    cfg.train.total_steps = 3;
    cfg.train.generator = GeneratorConfig {
        encoder_depth: 3,
        base_channels: 8,
        ..GeneratorConfig::default()
    };
    let b = ClipBackend::synthetic(6).unwrap();
    let bundle = TextBundle::new("a red ball").unwrap();
    let trained = video::train_video(&pkg, Layer::Foreground, &bundle, &cfg, &b).unwrap();
    let map = pkg.texel_map(Layer::Foreground);
    // texel bucket -> (frame, exact texel, rgba)
    type Sample = (usize, (f64, f64), [f32; 4]);
    let mut groups: HashMap<(i64, i64), Vec<Sample>> = HashMap::new();
    for t in 0..pkg.frame_count() {
        let grid = pkg.uv(Layer::Foreground, t);
        let layer = video::render_layer_to_frame(&trained.edit, &map, grid).unwrap();
        for y in 0..grid.height {
            for x in 0..grid.width {
                let (u, v) = grid.uv(y, x);
                let texel = map.texel(u, v);
                let c = layer.color().pixel(y, x);
                let rgba = [c[0], c[1], c[2], layer.alpha().get(y, x)];
                groups
                    .entry((texel.0.round() as i64, texel.1.round() as i64))
                    .or_default()
                    .push((t, texel, rgba));
            }
        }
    }
    let mut pairs = 0usize;
    let mut worst = 0.0f32;
    for members in groups.values() {
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                let close = (a.1 .0 - b.1 .0).abs() < 0.5 && (a.1 .1 - b.1 .1).abs() < 0.5;
                if a.0 != b.0 && close {
                    pairs += 1;
                    for k in 0..4 {
                        worst = worst.max((a.2[k] - b.2[k]).abs());
                    }
                }
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        pairs > 0 && worst < 1e-3 && within(elapsed, Duration::from_secs(60)),
        format!("{pairs} cross-frame pixel pairs sharing a texel, max RGBA difference {worst:.1e}; {elapsed:.1?}"),
    )
}

// ---- 7 ----

fn real_backend_smoke() -> (Verdict, bool) {
    let started = Instant::now();
    let b = match pretrained::load(&PretrainedSpec::vit_b32(), &pretrained::cache_dir(), DType::F32) {
        Ok(b) => b,
        Err(e) => {
            return (
                verdict(false, format!("not run: pretrained ViT-B/32 unavailable ({e})")),
                false,
            )
        }
    };
    let src = Image::from_fn(224, 224, |y, x| {
        let d = ((y as f32 - 112.0).powi(2) + (x as f32 - 112.0).powi(2)).sqrt();
        if d < 60.0 {
            [0.9, 0.85, 0.2]
        } else {
            [0.3, 0.5 + 0.2 * (y as f32 / 224.0), 0.8]
        }
    })
    .unwrap();
    let prompt = "an orange made of ice";
    let bundle = TextBundle::new(prompt).unwrap();
    let cfg = TrainConfig {
        total_steps: 300,
        ..TrainConfig::image()
    };
    let out = trainer::train_image(&src, &bundle, &cfg, &b, None).unwrap();
    let comp: Vec<f64> = out.record.history.iter().map(|s| s.losses.composition()).collect();
    let first = comp[..50].iter().sum::<f64>() / 50.0;
    let last = comp[comp.len() - 50..].iter().sum::<f64>() / 50.0;
    let text = backend::encode_text(&b, prompt).unwrap();
    let sim = |img: &Image| {
        let e = backend::encode_image(&b, img).unwrap();
        1.0 - backend::cosine_distance(e.as_slice(), text.as_slice()).value
    };
    let composite = image::composite(&out.layer, &src).unwrap();
    let (s_out, s_src) = (sim(&composite), sim(&src));
    let elapsed = started.elapsed();
    let pass = last <= 0.8 * first && s_out > s_src && within(elapsed, Duration::from_secs(3600));
    (
        verdict(
            pass,
            format!(
                "composition loss {first:.4} -> {last:.4}; similarity composite {s_out:.4} vs source {s_src:.4}; {elapsed:.1?}"
            ),
        ),
        true,
    )
}

// ---- 8 ----

fn ablations() -> Verdict {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input.png");
    let src = Image::from_fn(48, 64, |y, x| [y as f32 / 48.0, 0.4, x as f32 / 64.0]).unwrap();
    image::save_image(&input, &src, image::BitDepth::Eight).unwrap();
    let base_text = |out: &Path| {
        format!(
            "input = {:?}\nout = {:?}\n[prompts]\ntarget = \"a glowing lamp\"\nroi = \"lamp\"\n\
             [backend]\nkind = \"synthetic\"\nseed = 8\n[train]\ntotal_steps = 6\n\
             [train.generator]\nencoder_depth = 4\nbase_channels = 16\n",
            input.to_str().unwrap(),
            out.to_str().unwrap()
        )
    };
    let mut trajectories: Vec<(String, Vec<f64>)> = Vec::new();
    let mut failures = Vec::new();
    for term in ["none", "sparsity", "structure", "screen", "augmentation"] {
        let out = dir.path().join(format!("out-{term}"));
        let mut cfg = config::parse_config(&base_text(&out)).unwrap();
        if term != "none" {
            cfg.disable(term).unwrap();
        }
        let backend = t2l_core::run::build_backend(&cfg).unwrap();
        match t2l_core::run::run_edit_image(&cfg, backend.as_ref()) {
            Ok(bundle) => {
                let record: trainer::TrainRunRecord =
                    serde_json::from_str(&std::fs::read_to_string(&bundle.record).unwrap()).unwrap();
                let totals = record.totals();
                if totals.len() != 6 || totals.iter().any(|v| !v.is_finite()) {
                    failures.push(format!("{term}: incomplete history"));
                }
                trajectories.push((term.to_string(), totals));
            }
            Err(e) => failures.push(format!("{term}: {e}")),
        }
    }
    let mut identical = Vec::new();
    for i in 0..trajectories.len() {
        for j in i + 1..trajectories.len() {
            if trajectories[i].1 == trajectories[j].1 {
                identical.push(format!("{}={}", trajectories[i].0, trajectories[j].0));
            }
        }
    }
    let elapsed = started.elapsed();
    verdict(
        failures.is_empty() && identical.is_empty(),
        format!(
            "{} runs completed; failures: {:?}; identical trajectories: {:?}; {elapsed:.1?}",
            trajectories.len(),
            failures,
            identical
        ),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Verdict, bool)> = vec![
        (1, "hyperparameter fidelity", hyperparameters(), true),
        (2, "compositing and loss oracles", compositing_and_loss_oracles(), true),
        (3, "gradient checks", gradient_checks(), true),
        (4, "bootstrap convergence", bootstrap_convergence(), true),
        (5, "bilinear and UV oracles", uv_oracles(), true),
        (6, "temporal consistency", temporal_consistency(), true),
    ];
    let (v7, ran) = real_backend_smoke();
    results.push((7, "end-to-end smoke with the pretrained backend", v7, ran));
    results.push((8, "ablation toggles", ablations(), true));
    // written to the raw stream so the lines show without --nocapture
    let mut err = std::io::stderr().lock();
    for (id, name, v, _) in &results {
        let status = if v.pass { "PASS" } else { "FAIL" };
        writeln!(err, "criterion {id} [{status}] {name}: {}", v.detail).unwrap();
    }
    drop(err);
    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, v, gated)| *gated && !v.pass)
        .map(|(id, ..)| *id)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// Criterion 7 alone, failing hard when the weights are missing. Needs
/// network access or a primed `TEXT2LIVE_CACHE`.
#[test]
#[ignore]
fn pretrained_smoke() {
    let (v, ran) = real_backend_smoke();
    println!("{}", v.detail);
    assert!(ran && v.pass, "{}", v.detail);
}
