//! Alternating adversarial training with checkpointing and exact resume.
//!
//! One step: generator forward on the batch lightness, a discriminator
//! update on real and detached fake chroma, then a generator update against
//! a fresh (frozen) discriminator forward.

use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Backend, ExtractorConfig, TrainConfig};
use crate::dataset::{batch_ids, batches_per_epoch, Batch, Dataset};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::extractor::{load_pretrained, make_stub_extractor, EmbeddingExtractor};
use crate::generator::Generator;
use crate::graph::Graph;
use crate::losses::{self, LossBreakdown};
use crate::optim::{adam_step, scheduled_lr, AdamState};
use crate::params::{read_container, write_container};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Instantiate the extractor a configuration asks for.
pub fn build_extractor(cfg: &ExtractorConfig) -> Result<Arc<dyn EmbeddingExtractor>> {
    Ok(match cfg.backend {
        Backend::Stub => Arc::new(make_stub_extractor(cfg.seed)),
        Backend::Pretrained => {
            let path = cfg
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("extractor.weights is required for the pretrained backend".into()))?;
            Arc::new(load_pretrained(path)?)
        }
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// 1-based global step that produced the row.
    pub step: u64,
    pub epoch: u64,
    pub l1: f64,
    pub adv_g: f64,
    pub adv_d_real: f64,
    pub adv_d_fake: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

/// Serializable ChaCha position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position as a decimal string (JSON numbers are f64).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad RNG word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Sidecar of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Completed global steps.
    pub step: u64,
    pub steps_per_epoch: u64,
    pub variant: crate::generator::Variant,
    pub image_size: usize,
    pub seed: u64,
    pub rng: RngState,
    pub adam_g_t: u64,
    pub adam_d_t: u64,
    pub generator: PathBuf,
    pub discriminator: PathBuf,
    pub optimizer_g: PathBuf,
    pub optimizer_d: PathBuf,
    pub config: TrainConfig,
}

impl CheckpointManifest {
    /// Accepts the manifest file or the checkpoint directory holding it.
    pub fn read(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let raw = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let m: Self = serde_json::from_slice(&raw)?;
        if m.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                m.format_version
            )));
        }
        let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((m, dir))
    }
}

/// Resolve a checkpoint reference: a checkpoint directory, its manifest, a
/// `latest` pointer file, or a run directory whose pointer is followed.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    let pointer = if path.is_dir() {
        if path.join(MANIFEST_FILE).is_file() {
            return Ok(path.to_path_buf());
        }
        path.join(CHECKPOINT_DIR).join("latest")
    } else if path.file_name().is_some_and(|n| n == "latest") {
        path.to_path_buf()
    } else {
        return if path.is_file() { Ok(path.to_path_buf()) } else { Err(Error::io(path, std::io::ErrorKind::NotFound.into())) };
    };
    let target = fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
    Ok(PathBuf::from(target.trim()))
}

/// Rebuild a trained generator from a checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, CheckpointManifest)> {
    let (m, dir) = CheckpointManifest::read(&resolve_checkpoint(path)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    let mut gen = Generator::new(m.config.generator.clone(), m.variant, &mut rng)?;
    gen.params.load(&dir.join(&m.generator))?;
    Ok((gen, m))
}

/// Networks, optimizer state and the training RNG.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub gen: Generator,
    pub disc: Discriminator,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub extractor: Arc<dyn EmbeddingExtractor>,
    rng: ChaCha8Rng,
    /// Completed global steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        let extractor = build_extractor(&cfg.extractor)?;
        Self::with_extractor(cfg, extractor)
    }

    /// Fresh networks initialised from `cfg.seed`.
    pub fn with_extractor(cfg: TrainConfig, extractor: Arc<dyn EmbeddingExtractor>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let gen = Generator::new(cfg.generator.clone(), cfg.variant, &mut rng)?;
        let disc = Discriminator::new(cfg.discriminator.clone(), &mut rng)?;
        let adam_g = AdamState::new(&gen.params);
        let adam_d = AdamState::new(&disc.params);
        Ok(Self {
            cfg,
            gen,
            disc,
            adam_g,
            adam_d,
            extractor,
            rng,
            step: 0,
        })
    }

    /// Learning rates `(generator, discriminator)` for the next step.
    pub fn learning_rates(&self) -> (f64, f64) {
        let g = scheduled_lr(&self.cfg.schedule, self.step);
        (
            g.unwrap_or(self.cfg.optimizer.lr),
            g.unwrap_or(self.cfg.optimizer_d().lr),
        )
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let (lr_g, lr_d) = self.learning_rates();
        let lambda = self.cfg.lambda_l1;
        let extractor = self.extractor.as_ref();

        let mut g = Graph::new();
        let l = g.constant(batch.l.clone());
        let ab_fake = self.gen.forward_with_extractor(&mut g, l, Some(extractor), true)?;

        let [adv_d_real, adv_d_fake, total_d] = self.update_discriminator(batch, g.value(ab_fake), lr_d)?;

        let real = g.constant(batch.ab.clone());
        let d_fake_g = self.disc.discriminate_frozen(&mut g, l, ab_fake, true, &mut self.rng)?;
        let (adv_g, l1, total_g) = losses::generator_loss(&mut g, d_fake_g, ab_fake, real, lambda)?;
        let grads = g.backward(total_g)?;
        self.gen.params.zero_grad();
        self.gen.params.accumulate_grads(&g, &grads);
        adam_step(&mut self.gen.params, &mut self.adam_g, &self.cfg.optimizer, lr_g)?;

        self.step += 1;
        let item = |graph: &Graph, v| graph.value(v).item() as f64;
        let out = LossBreakdown {
            l1: item(&g, l1),
            adv_g: item(&g, adv_g),
            adv_d_real,
            adv_d_fake,
            total_g: item(&g, total_g),
            total_d,
            lambda_l1: lambda,
        };
        if !out.all_finite() {
            return Err(Error::NonFinite(format!("losses at step {}", self.step)));
        }
        Ok(out)
    }

    /// Discriminator step on real chroma and a detached fake; returns the
    /// real, fake and averaged losses.
    pub fn update_discriminator(&mut self, batch: &Batch, ab_fake: &crate::tensor::Tensor, lr: f64) -> Result<[f64; 3]> {
        let mut gd = Graph::new();
        let l = gd.constant(batch.l.clone());
        let real = gd.constant(batch.ab.clone());
        let fake = gd.constant(ab_fake.clone());
        let d_real = self.disc.discriminate(&mut gd, l, real, true, &mut self.rng)?;
        let d_fake = self.disc.discriminate(&mut gd, l, fake, true, &mut self.rng)?;
        let (loss_real, loss_fake, total) = losses::discriminator_loss(&mut gd, d_real, d_fake)?;
        let grads = gd.backward(total)?;
        self.disc.params.zero_grad();
        self.disc.params.accumulate_grads(&gd, &grads);
        adam_step(&mut self.disc.params, &mut self.adam_d, &self.cfg.optimizer_d(), lr)?;
        let item = |v| gd.value(v).item() as f64;
        Ok([item(loss_real), item(loss_fake), item(total)])
    }

    /// Write every network and optimizer tensor plus the manifest into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, steps_per_epoch: u64) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = ["generator.cfpc", "discriminator.cfpc", "optimizer_g.cfpc", "optimizer_d.cfpc"];
        self.gen.params.save(&dir.join(files[0]))?;
        self.disc.params.save(&dir.join(files[1]))?;
        write_container(&dir.join(files[2]), &self.adam_g.to_named_tensors(&self.gen.params))?;
        write_container(&dir.join(files[3]), &self.adam_d.to_named_tensors(&self.disc.params))?;
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            steps_per_epoch,
            variant: self.cfg.variant,
            image_size: self.cfg.image_size,
            seed: self.cfg.seed,
            rng: RngState::capture(&self.rng),
            adam_g_t: self.adam_g.t,
            adam_d_t: self.adam_d.t,
            generator: files[0].into(),
            discriminator: files[1].into(),
            optimizer_g: files[2].into(),
            optimizer_d: files[3].into(),
            config: self.cfg.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Restore a checkpoint into a trainer built for `cfg`. Settings that
    /// shape the model or the data order must match the checkpoint's.
    pub fn resume(cfg: TrainConfig, extractor: Arc<dyn EmbeddingExtractor>, checkpoint: &Path) -> Result<(Self, CheckpointManifest)> {
        let (m, dir) = CheckpointManifest::read(&resolve_checkpoint(checkpoint)?)?;
        let c = &m.config;
        let mismatched = [
            ("variant", c.variant != cfg.variant),
            ("image_size", c.image_size != cfg.image_size),
            ("batch_size", c.batch_size != cfg.batch_size),
            ("seed", c.seed != cfg.seed),
            ("generator", c.generator != cfg.generator),
            ("discriminator", c.discriminator != cfg.discriminator),
            ("extractor", c.extractor != cfg.extractor),
        ];
        if let Some((field, _)) = mismatched.iter().find(|(_, differs)| *differs) {
            return Err(Error::Config(format!("`{field}` differs from the checkpoint's configuration")));
        }
        let mut t = Self::with_extractor(cfg, extractor)?;
        t.gen.params.load(&dir.join(&m.generator))?;
        t.disc.params.load(&dir.join(&m.discriminator))?;
        t.adam_g = AdamState::from_named_tensors(&t.gen.params, &read_container(&dir.join(&m.optimizer_g))?, m.adam_g_t)?;
        t.adam_d = AdamState::from_named_tensors(&t.disc.params, &read_container(&dir.join(&m.optimizer_d))?, m.adam_d_t)?;
        t.rng = m.rng.restore()?;
        t.step = m.step;
        Ok((t, m))
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: u64,
    pub steps_per_epoch: u64,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<LossBreakdown>,
    pub skipped_images: usize,
}

/// Keep the header and the first `rows` data rows of a metrics log.
fn truncate_metrics(path: &Path, rows: u64) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .take(rows as usize + 1)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    if (lines.len() as u64) < rows + 1 {
        return Err(Error::Data(format!(
            "{} has {} rows but the checkpoint is at step {rows}",
            path.display(),
            lines.len().saturating_sub(1)
        )));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step-{step:08}"))
}

/// Run training from scratch.
pub fn train(cfg: &TrainConfig) -> Result<TrainSummary> {
    let extractor = build_extractor(&cfg.extractor)?;
    run(cfg, extractor, None)
}

/// Run training, optionally continuing from a checkpoint, with an explicit
/// extractor instance.
pub fn run(cfg: &TrainConfig, extractor: Arc<dyn EmbeddingExtractor>, resume_from: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset, cfg.image_size)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("no decodable images under {}", cfg.dataset.display())));
    }
    let spe = batches_per_epoch(dataset.len(), cfg.batch_size) as u64;
    if spe == 0 {
        return Err(Error::Data(format!(
            "batch_size {} exceeds the {} usable images",
            cfg.batch_size,
            dataset.len()
        )));
    }
    let total = (cfg.epochs * spe).min(cfg.max_steps.unwrap_or(u64::MAX));

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&echo, cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;

    let metrics_path = out.join(METRICS_FILE);
    let mut trainer = match resume_from {
        Some(ckpt) => {
            let (t, m) = Trainer::resume(cfg.clone(), extractor, ckpt)?;
            if m.steps_per_epoch != spe {
                return Err(Error::Data(format!(
                    "dataset yields {spe} steps per epoch, checkpoint was taken at {}",
                    m.steps_per_epoch
                )));
            }
            truncate_metrics(&metrics_path, t.step)?;
            t
        }
        None => {
            let mut w = csv::Writer::from_path(&metrics_path)?;
            w.write_record([
                "step", "epoch", "l1", "adv_g", "adv_d_real", "adv_d_fake", "total_g", "total_d", "lr_g", "lr_d",
            ])?;
            w.flush().map_err(|e| Error::io(&metrics_path, e))?;
            Trainer::with_extractor(cfg.clone(), extractor)?
        }
    };
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = csv::WriterBuilder::new().has_headers(false).from_writer(file);

    let mut order: Option<(u64, Vec<Vec<usize>>)> = None;
    let mut last = None;
    let mut last_saved = None;
    while trainer.step < total {
        let epoch = trainer.step / spe;
        let index = (trainer.step % spe) as usize;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, batch_ids(dataset.usable(), cfg.batch_size, cfg.seed, epoch)?));
        }
        let ids = &order.as_ref().expect("set above").1[index];
        let batch = dataset.load_batch(ids)?;
        let (lr_g, lr_d) = trainer.learning_rates();
        let losses = trainer.train_step(&batch)?;
        metrics.serialize(MetricsRow {
            step: trainer.step,
            epoch,
            l1: losses.l1,
            adv_g: losses.adv_g,
            adv_d_real: losses.adv_d_real,
            adv_d_fake: losses.adv_d_fake,
            total_g: losses.total_g,
            total_d: losses.total_d,
            lr_g,
            lr_d,
        })?;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        last = Some(losses);
        if trainer.step % 50 == 0 || trainer.step == total {
            log::info!(
                "step {}/{total} epoch {epoch}: l1 {:.4} adv_g {:.4} total_d {:.4}",
                trainer.step,
                losses.l1,
                losses.adv_g,
                losses.total_d
            );
        }
        if cfg.checkpoint_interval > 0 && trainer.step % cfg.checkpoint_interval == 0 {
            last_saved = Some(trainer.save_checkpoint(&checkpoint_dir(out, trainer.step), spe)?);
        }
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    drop(metrics);
    let final_checkpoint = match last_saved {
        Some(p) if trainer.step % cfg.checkpoint_interval.max(1) == 0 => p,
        _ => trainer.save_checkpoint(&checkpoint_dir(out, trainer.step), spe)?,
    };
    let latest = out.join(CHECKPOINT_DIR).join("latest");
    fs::write(&latest, format!("{}\n", final_checkpoint.display())).map_err(|e| Error::io(&latest, e))?;
    Ok(TrainSummary {
        steps: trainer.step,
        steps_per_epoch: spe,
        final_checkpoint,
        metrics: metrics_path,
        last,
        skipped_images: dataset.skipped.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::VitConfig;
    use crate::generator::GeneratorConfig;
    use crate::tensor::Tensor;
    use rand::Rng;

    pub(crate) fn tiny_config(dir: &Path) -> TrainConfig {
        TrainConfig {
            dataset: dir.join("data"),
            output_dir: dir.join("run"),
            image_size: 64,
            batch_size: 2,
            epochs: 1,
            checkpoint_interval: 0,
            generator: GeneratorConfig::scaled_down(8),
            discriminator: VitConfig::reduced(),
            ..TrainConfig::default()
        }
    }

    fn random_batch(seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |c: usize| Tensor::new(&[2, c, 64, 64], (0..2 * c * 64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        Batch { l: t(1), ab: t(2), ids: vec![0, 1] }
    }

    #[test]
    fn step_is_finite_and_updates_are_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_config(dir.path())).unwrap();
        let g0 = t.gen.params.to_named_tensors();
        let d0 = t.disc.params.to_named_tensors();
        let losses = t.train_step(&random_batch(1)).unwrap();
        assert!(losses.all_finite());
        assert!((losses.total_g - (losses.adv_g + 100.0 * losses.l1)).abs() < 1e-3);
        assert_ne!(t.gen.params.to_named_tensors(), g0);
        assert_ne!(t.disc.params.to_named_tensors(), d0);
    }

    fn weights(store: &crate::params::ParamStore) -> Vec<Tensor> {
        store.params().iter().map(|p| p.value.clone()).collect()
    }

    #[test]
    fn updates_touch_only_their_own_network() {
        let dir = tempfile::tempdir().unwrap();
        let batch = random_batch(2);
        let mut full = Trainer::new(tiny_config(dir.path())).unwrap();
        let mut d_only = Trainer::new(tiny_config(dir.path())).unwrap();
        let g0 = weights(&d_only.gen.params);

        full.train_step(&batch).unwrap();

        let mut g = Graph::new();
        let l = g.constant(batch.l.clone());
        let ex = d_only.extractor.clone();
        let fake = d_only.gen.forward_with_extractor(&mut g, l, Some(ex.as_ref()), true).unwrap();
        let lr = d_only.learning_rates().1;
        d_only.update_discriminator(&batch, g.value(fake), lr).unwrap();

        // The discriminator update leaves generator weights alone ...
        assert_eq!(weights(&d_only.gen.params), g0);
        // ... and the generator update leaves the discriminator where its
        // own update put it.
        assert_eq!(weights(&d_only.disc.params), weights(&full.disc.params));
    }

    #[test]
    fn zero_lr_keeps_all_parameters_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.schedule = vec![crate::optim::SchedulePhase { steps: 1, lr: 0.0 }];
        let mut t = Trainer::new(cfg).unwrap();
        let trainable = |t: &Trainer| {
            (
                t.gen.params.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
                t.disc.params.params().iter().map(|p| p.value.clone()).collect::<Vec<_>>(),
            )
        };
        let before = trainable(&t);
        for s in 0..3 {
            t.train_step(&random_batch(s)).unwrap();
        }
        assert_eq!(before, trainable(&t));
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.gen();
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        assert_eq!(rng.gen::<u64>(), back.gen::<u64>());
    }
}
