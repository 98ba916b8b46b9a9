//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. Criterion numbers given as arguments
//! restrict the run, e.g. `cargo test --test acceptance -- 3 8`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use colorfuse_core::colorspace::{lab_to_rgb_pixel, rgb_to_lab_pixel, RgbImage};
use colorfuse_core::config::TrainConfig;
use colorfuse_core::dataset::{batches_per_epoch, save_rgb, Dataset};
use colorfuse_core::discriminator::{Discriminator, VitConfig};
use colorfuse_core::extractor::{embed_lightness, make_stub_extractor, EmbeddingExtractor, EMBED_DIM};
use colorfuse_core::fid::{accumulate_stats, fid, image_stats, sqrtm_psd, FidStats};
use colorfuse_core::generator::{Generator, GeneratorConfig, Variant};
use colorfuse_core::gradcheck::{grad_check, Coords};
use colorfuse_core::losses::{self, bce_with_logit, discriminator_loss, generator_loss};
use colorfuse_core::trainer::{self, Trainer};
use colorfuse_core::{Graph, Tensor};
use nalgebra::{DMatrix, DVector};

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn main() {
    let checks: [(&str, Check, Duration); 8] = [
        ("colorimetry", colorimetry, Duration::from_secs(10)),
        ("shape contracts", shape_contracts, Duration::from_secs(60)),
        ("gradient fidelity", gradient_fidelity, Duration::from_secs(300)),
        ("fid oracle", fid_oracle, Duration::from_secs(120)),
        ("loss formulas", loss_formulas, Duration::from_secs(10)),
        ("overfit smoke test", overfit, Duration::from_secs(900)),
        ("ablation wiring", ablation_wiring, Duration::from_secs(120)),
        ("determinism", determinism, Duration::from_secs(120)),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (i, (name, check, budget)) in checks.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > *budget => Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {} {name} ({elapsed:.1?}): {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {} {name} ({elapsed:.1?}): {why}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}

fn colorimetry() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0i32;
    let triples = (0..100_000).map(|_| [rng.gen(), rng.gen(), rng.gen()]).chain((0..=255u8).map(|v| [v, v, v]));
    for rgb in triples {
        let (back, _) = lab_to_rgb_pixel(rgb_to_lab_pixel(rgb));
        for c in 0..3 {
            worst = worst.max((back[c] as i32 - rgb[c] as i32).abs());
        }
    }
    ensure!(worst <= 1, "round-trip error {worst} levels");
    let mut chroma = 0.0f64;
    for v in 0..=255u8 {
        let lab = rgb_to_lab_pixel([v, v, v]);
        chroma = chroma.max(lab[1].abs()).max(lab[2].abs());
    }
    ensure!(chroma < 0.01, "grey chroma {chroma}");
    Ok(format!("max round-trip error {worst} level(s), max grey |a|,|b| {chroma:.2e}"))
}

fn shape_contracts() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut gen = ok(Generator::<f32>::new(GeneratorConfig::default(), Variant::VitIGan, &mut rng))?;
    ensure!(gen.encoder_conv_count() == 10 && gen.decoder_convt_count() == 5, "layer counts");
    let l = Tensor::new(&[1, 1, 256, 256], (0..256 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let ex = make_stub_extractor(0);
    let emb = ok(embed_lightness(&ex, &l))?;
    ensure!(emb.shape() == [1, EMBED_DIM], "embedding {:?}", emb.shape());
    let mut g = Graph::new();
    let lv = g.constant(l);
    let enc = ok(gen.encode(&mut g, lv, false))?;
    ensure!(g.value(enc).shape() == [1, 512, 8, 8], "encoding {:?}", g.value(enc).shape());
    let fusion_w = gen.params.get("fusion.conv.weight").ok_or("no fusion conv")?.value.shape().to_vec();
    ensure!(fusion_w == [512, 1512, 1, 1], "fusion conv reads {:?}", fusion_w);
    let e = g.constant(emb);
    let fused = ok(gen.fuse(&mut g, enc, Some(e), false))?;
    let out = ok(gen.decode(&mut g, fused, false))?;
    ensure!(g.value(out).shape() == [1, 2, 256, 256], "decoder {:?}", g.value(out).shape());
    ensure!(g.value(out).data().iter().all(|v| v.abs() <= 1.0), "output outside [-1, 1]");

    let cfg = VitConfig::default();
    ensure!(cfg.num_patches() == 64 && cfg.num_tokens() == 65, "tokens");
    ensure!((cfg.patch_size, cfg.depth, cfg.heads, cfg.mlp_dim, cfg.token_dim) == (32, 6, 16, 2048, 1024), "table config {cfg:?}");
    let disc = ok(Discriminator::<f32>::new(cfg.clone(), &mut rng))?;
    let count: usize = disc.params.params().iter().map(|p| p.value.len()).sum();
    ensure!(count == cfg.param_count(), "parameter count {count} vs {}", cfg.param_count());
    let mut g = Graph::new();
    let img = g.constant(Tensor::zeros(&[1, 3, 256, 256]));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
    let trace = ok(disc.vit_forward_traced(&mut g, img, false, &mut drop_rng))?;
    ensure!(g.value(trace.logits).shape() == [1, 1], "logits {:?}", g.value(trace.logits).shape());
    let seq = g.value(trace.attention[0]).shape().to_vec();
    ensure!(seq == [1, 65, 1024], "token sequence {:?}", seq);
    let probs = g.attention_probs(trace.attention[0]).ok_or("no attention probabilities")?;
    ensure!(probs.len() == 16 * 65 * 65, "attention map has {} entries, expected 16x65x65", probs.len());
    Ok(format!("1x1x256x256 -> enc 512x8x8 -> concat 1512 -> 2x256x256; ViT 64 patches + class, {count} params"))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, range: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-range..range)).collect()).unwrap()
}

fn gradient_fidelity() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gen = ok(Generator::<f64>::new(GeneratorConfig::scaled_down(8), Variant::VitIGan, &mut rng))?;
    let disc = ok(Discriminator::<f64>::new(VitConfig::reduced(), &mut rng))?;
    let l = random_tensor(&[2, 1, 64, 64], &mut rng, 1.0);
    let ab = random_tensor(&[2, 2, 64, 64], &mut rng, 0.9);
    let emb = ok(embed_lightness(&make_stub_extractor(3), &l))?;
    let mut model = (gen, disc);
    let report = ok(grad_check(
        &mut model,
        |(gen, disc), g| {
            let mut drop_rng = ChaCha8Rng::seed_from_u64(5);
            let lv = g.constant(l.clone());
            let real = g.constant(ab.clone());
            let e = g.constant(emb.clone());
            let fake = gen.forward(g, lv, Some(e), true)?;
            let d_fake = disc.discriminate(g, lv, fake, true, &mut drop_rng)?;
            let d_real = disc.discriminate(g, lv, real, true, &mut drop_rng)?;
            let (_, _, total_g) = generator_loss(g, d_fake, fake, real, losses::DEFAULT_LAMBDA_L1)?;
            let (_, _, total_d) = discriminator_loss(g, d_real, d_fake)?;
            g.add(total_g, total_d)
        },
        1e-6,
        Coords::Sample { count: 240, seed: 6 },
    ))?;
    ensure!(report.max_relative_error < 1e-3, "{report:?}");
    Ok(format!("{} coordinates, max relative error {:.2e}", report.coords_checked, report.max_relative_error))
}

/// Trace of the square root of `Σa·Σb` from its general eigenvalues.
fn dense_fid(a: &FidStats, b: &FidStats) -> f64 {
    let tr: f64 = (&a.sigma * &b.sigma).complex_eigenvalues().iter().map(|z| z.sqrt().re).sum();
    (&a.mu - &b.mu).norm_squared() + a.sigma.trace() + b.sigma.trace() - 2.0 * tr
}

fn gaussian_stats(rng: &mut ChaCha8Rng, d: usize) -> FidStats {
    let mix = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let shift = DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
    let normal = Normal::new(0.0, 1.0).unwrap();
    let rows: Vec<Vec<f64>> = (0..64)
        .map(|_| {
            let z = DVector::from_fn(d, |_, _| rng.sample(normal));
            (&mix * z + &shift).as_slice().to_vec()
        })
        .collect();
    accumulate_stats(rows).unwrap()
}

fn synthetic_image(i: usize, size: usize) -> RgbImage {
    let k = i as f32;
    let (fa, fb) = (1.0 + (i % 7) as f32, 1.0 + (i % 5) as f32);
    RgbImage::from_fn(size, size, |y, x| {
        let (u, v) = (x as f32 / size as f32, y as f32 / size as f32);
        let r = 0.5 + 0.45 * (fa * 6.28 * u + k).sin();
        let g = 0.5 + 0.45 * (fb * 6.28 * v - 0.3 * k).cos();
        let b = 0.5 + 0.45 * ((u + v) * 4.0 + 0.7 * k).sin();
        [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
    })
}

fn fid_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = gaussian_stats(&mut rng, 6);
    let self_fid = ok(fid(&s, &s))?;
    ensure!(self_fid.abs() < 1e-6, "fid(s, s) = {self_fid}");

    let sigma = s.sigma.clone();
    let moved = FidStats { n: s.n, mu: &s.mu + DVector::from_fn(6, |i, _| i as f64 * 0.5), sigma };
    let expected = (&moved.mu - &s.mu).norm_squared();
    let analytic = ok(fid(&s, &moved))?;
    ensure!((analytic - expected).abs() < 1e-8, "equal covariance: {analytic} vs {expected}");

    let mut worst_dense = 0.0f64;
    for _ in 0..20 {
        let (a, b) = (gaussian_stats(&mut rng, 4), gaussian_stats(&mut rng, 4));
        worst_dense = worst_dense.max((ok(fid(&a, &b))? - dense_fid(&a, &b)).abs());
    }
    ensure!(worst_dense < 1e-6, "dense oracle mismatch {worst_dense}");

    let mut worst_sqrt = 0.0f64;
    for _ in 0..20 {
        let m = gaussian_stats(&mut rng, 5).sigma;
        let r = ok(sqrtm_psd(&m))?;
        worst_sqrt = worst_sqrt.max((&r * &r - &m).amax() / m.amax().max(1.0));
    }
    ensure!(worst_sqrt < 1e-8, "sqrtm multiply-back {worst_sqrt}");

    let n = 200;
    let real: Vec<RgbImage> = (0..n).map(|i| synthetic_image(i, 64)).collect();
    let sigma_levels = 0.1 * 255.0;
    let normal = Normal::new(0.0f32, sigma_levels).unwrap();
    let corrupted: Vec<RgbImage> = real
        .iter()
        .map(|img| {
            let data = img.data().iter().map(|&v| (v as f32 + rng.sample(normal)).round().clamp(0.0, 255.0) as u8).collect();
            RgbImage::new(img.height, img.width, data).unwrap()
        })
        .collect();
    let noise: Vec<RgbImage> = (0..n).map(|_| RgbImage::from_fn(64, 64, |_, _| [rng.gen(), rng.gen(), rng.gen()])).collect();
    let ex = make_stub_extractor(0);
    let (sr, sc, sn) = (ok(image_stats(&ex, &real))?, ok(image_stats(&ex, &corrupted))?, ok(image_stats(&ex, &noise))?);
    let (near, far) = (ok(fid(&sr, &sc))?, ok(fid(&sr, &sn))?);
    ensure!(near < far, "fid(real, corrupted) {near} >= fid(real, noise) {far}");
    Ok(format!(
        "self {self_fid:.1e}, dense-oracle gap {worst_dense:.1e}, sqrtm gap {worst_sqrt:.1e}; {n} images: corrupted {near:.4} < noise {far:.4}"
    ))
}

fn loss_formulas() -> Result<String, String> {
    let mut worst = 0.0f64;
    for i in 0..=2000 {
        let x = -10.0 + i as f64 * 0.01;
        for y in [0.0, 1.0] {
            let p = 1.0 / (1.0 + (-x).exp());
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            worst = worst.max((bce_with_logit(x, y) - direct).abs());
        }
    }
    ensure!(worst < 1e-6, "bce deviates by {worst}");
    ensure!((bce_with_logit(0.0, 1.0) - 2f64.ln()).abs() < 1e-12, "bce(0, 1)");
    ensure!((bce_with_logit(-3.0, 0.0) - 0.048_587_351_573_7).abs() < 1e-9, "bce(-3, 0)");

    let t = |v: &[f64]| Tensor::<f64>::from_f64_slice(&[v.len()], v).unwrap();
    ensure!(ok(losses::l1_loss(&t(&[0.0, 0.0]), &t(&[1.0, 2.0])))? == 1.5, "l1 example");
    ensure!(ok(losses::l1_loss(&t(&[0.3, -0.2]), &t(&[0.3, -0.2])))? == 0.0, "l1 identity");
    let (a, b) = (t(&[0.1, -0.7, 0.4]), t(&[0.5, 0.2, -0.9]));
    let scaled = ok(losses::l1_loss(&a.map(|v| -2.5 * v), &b.map(|v| -2.5 * v)))?;
    ensure!((scaled - 2.5 * ok(losses::l1_loss(&a, &b))?).abs() < 1e-12, "l1 homogeneity");

    let total = batches_per_epoch(10_000, 16) as u64 * 50;
    ensure!(total == 31_250, "step arithmetic {total}");
    Ok(format!("bce vs direct formula within {worst:.1e}; 10,000/16 x 50 = {total} steps"))
}

fn write_dataset(dir: &Path, images: &[RgbImage]) {
    std::fs::create_dir_all(dir).unwrap();
    for (i, img) in images.iter().enumerate() {
        save_rgb(img, &dir.join(format!("{i:02}.png"))).unwrap();
    }
}

fn desk_config(data: &Path, out: &Path, batch: usize, max_steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::from_toml(colorfuse_core::config::preset_source("desk-64").unwrap()).unwrap();
    cfg.dataset = data.to_path_buf();
    cfg.output_dir = out.to_path_buf();
    cfg.batch_size = batch;
    cfg.max_steps = Some(max_steps);
    cfg
}

/// Smooth sinusoid patterns, one frequency set per index.
fn overfit_image(i: usize) -> RgbImage {
    let k = i as f32;
    RgbImage::from_fn(64, 64, |y, x| {
        let (fx, fy) = (x as f32 / 63.0, y as f32 / 63.0);
        let r = 127.0 + 120.0 * (fx * (2.0 + k) + k).sin();
        let g = 127.0 + 120.0 * (fy * (1.5 + 0.5 * k) - k).cos();
        let b = 127.0 + 120.0 * ((fx + fy) * 3.0 + 0.7 * k).sin();
        [r as u8, g as u8, b as u8]
    })
}

fn overfit() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    write_dataset(&data, &(0..8).map(overfit_image).collect::<Vec<_>>());
    let (steps, window, every) = (800u64, 200u64, 10u64);
    let cfg = TrainConfig {
        dataset: data.clone(),
        output_dir: tmp.path().join("run"),
        image_size: 64,
        batch_size: 8,
        epochs: steps,
        checkpoint_interval: 0,
        generator: GeneratorConfig::scaled_down(8),
        discriminator: VitConfig::reduced(),
        ..TrainConfig::default()
    };
    let dataset = ok(Dataset::open(&data, 64))?;
    let batch = ok(dataset.load_batch(dataset.usable()))?;
    let mut t = ok(Trainer::new(cfg))?;

    // Fresh uniform ab noise paired with each image's L; never seen in training.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let noise: Vec<Tensor> = (0..8)
        .map(|_| Tensor::new(batch.ab.shape(), (0..batch.ab.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap())
        .collect();
    let mut real_sum = vec![0.0f64; 8];
    let mut noise_sum = vec![0.0f64; 8 * noise.len()];
    let mut snapshots = 0;
    for step in 1..=steps {
        ok(t.train_step(&batch))?;
        if step + window > steps && step % every == 0 {
            for (acc, v) in real_sum.iter_mut().zip(ok(t.disc.score(&batch.l, &batch.ab))?.data()) {
                *acc += *v as f64;
            }
            for (k, n) in noise.iter().enumerate() {
                for (acc, v) in noise_sum[8 * k..8 * (k + 1)].iter_mut().zip(ok(t.disc.score(&batch.l, n))?.data()) {
                    *acc += *v as f64;
                }
            }
            snapshots += 1;
        }
    }
    let ex = t.extractor.clone();
    let pred = ok(t.gen.predict(&batch.l, Some(ex.as_ref())))?;
    let err = ok(losses::l1_loss(&pred, &batch.ab))?;

    // Share of (real, noise) pairs ranked correctly by the time-averaged
    // logits. Adversarial training leaves the logit offset arbitrary, so a
    // threshold-free measure is used.
    let correct: usize = real_sum.iter().map(|r| noise_sum.iter().filter(|&f| r > f).count()).sum();
    let acc = correct as f64 / (real_sum.len() * noise_sum.len()) as f64;
    ensure!(err < 0.05, "mean |ab error| {err:.4} after {steps} steps");
    ensure!(acc > 0.9, "discriminator accuracy {acc:.3}");
    Ok(format!(
        "{steps} steps: mean |ab error| {err:.4}; real-vs-noise accuracy {acc:.3} (logits averaged over {snapshots} snapshots)"
    ))
}

fn counted_run(cfg: &TrainConfig) -> Result<(usize, Vec<usize>), String> {
    let ex = Arc::new(make_stub_extractor(cfg.extractor.seed));
    let shared: Arc<dyn EmbeddingExtractor> = ex.clone();
    let summary = ok(trainer::run(cfg, shared, None))?;
    let calls = ex.invocations();
    let (mut gen, _) = ok(trainer::load_generator(&summary.final_checkpoint))?;
    let l = Tensor::zeros(&[2, 1, 64, 64]);
    let out = ok(gen.predict(&l, if cfg.variant.uses_extractor() { Some(ex.as_ref() as &dyn EmbeddingExtractor) } else { None }))?;
    Ok((calls, out.shape().to_vec()))
}

fn ablation_wiring() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    write_dataset(&data, &(0..4).map(|i| synthetic_image(i, 64)).collect::<Vec<_>>());
    let mut plain = desk_config(&data, &tmp.path().join("vit-gan"), 2, 3);
    plain.variant = Variant::VitGan;
    let fused = TrainConfig { variant: Variant::VitIGan, output_dir: tmp.path().join("vit-i-gan"), ..plain.clone() };
    let (calls_plain, shape_plain) = counted_run(&plain)?;
    let (calls_fused, shape_fused) = counted_run(&fused)?;
    ensure!(calls_plain == 0, "vit-gan invoked the extractor {calls_plain} times");
    ensure!(calls_fused > 0, "vit-i-gan never invoked the extractor");
    ensure!(shape_plain == shape_fused, "shapes differ: {shape_plain:?} vs {shape_fused:?}");
    Ok(format!("extractor calls vit-gan {calls_plain}, vit-i-gan {calls_fused}; outputs {shape_plain:?}"))
}

fn read(path: PathBuf) -> Result<Vec<u8>, String> {
    std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn determinism() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    write_dataset(&data, &(0..5).map(|i| synthetic_image(i, 64)).collect::<Vec<_>>());
    let total = 6;
    let run = |name: &str, steps: u64, resume: bool| -> Result<trainer::TrainSummary, String> {
        let mut cfg = desk_config(&data, &tmp.path().join(name), 2, steps);
        cfg.checkpoint_interval = 2;
        let ex = ok(trainer::build_extractor(&cfg.extractor))?;
        let from = resume.then(|| tmp.path().join(name));
        ok(trainer::run(&cfg, ex, from.as_deref()))
    };
    let a = run("a", total, false)?;
    let b = run("b", total, false)?;
    let csv_a = read(a.metrics.clone())?;
    ensure!(csv_a == read(b.metrics)?, "seeded runs wrote different metrics");
    // Interrupt after 3 steps (mid-epoch), then continue to the end.
    run("c", 3, false)?;
    let c = run("c", total, true)?;
    ensure!(csv_a == read(c.metrics)?, "resumed run diverged from the uninterrupted one");
    let (dir_a, dir_c) = (a.final_checkpoint.parent().unwrap(), c.final_checkpoint.parent().unwrap());
    for f in ["generator.cfpc", "discriminator.cfpc", "optimizer_g.cfpc", "optimizer_d.cfpc"] {
        ensure!(read(dir_a.join(f))? == read(dir_c.join(f))?, "{f} differs after resume");
    }
    let rows = String::from_utf8_lossy(&csv_a).lines().count() - 1;
    Ok(format!("{rows} metric rows identical across two runs and a resume at step 3; final checkpoints bitwise equal"))
}
