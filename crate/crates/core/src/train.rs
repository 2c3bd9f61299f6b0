//! Training loop: AdamW under a cosine schedule, CSV loss log, checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, resize_longest_side, AugmentParams, Augmented, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, ImageTarget, LossBreakdown};
use crate::mask::BinaryMask;
use crate::model::{Iaunet, MASK_STRIDE};
use crate::tensor::optim::{cosine_lr, AdamW};
use crate::tensor::BnMode;

pub const LOG_HEADER: &str = "step,lr,cls,dice,bce,total";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Brings a sample to the training size (longest-side resize with padding
/// unless it already matches), optionally augments it, and builds the
/// logit-resolution target.
pub fn prepare_sample(sample: &Sample, size: usize, rng: Option<&mut ChaCha8Rng>) -> Result<(RgbImage, ImageTarget)> {
    let fitted = if (sample.image.height, sample.image.width) == (size, size) {
        Augmented { sample: sample.clone(), valid: BinaryMask::from_fn(size, size, |_, _| true) }
    } else {
        resize_longest_side(sample, size)
    };
    let Augmented { sample: s, valid } = match rng {
        Some(rng) => {
            let params = AugmentParams::sample(rng, size, size, size, size);
            let a = augment(&fitted.sample, params);
            // padding of the fitted image stays invalid after augmenting
            let carried = augment(&valid_as_sample(&fitted), params);
            let valid = BinaryMask::from_fn(size, size, |y, x| a.valid.get(y, x) && carried.sample.image.get(0, y, x) > 0.5);
            Augmented { sample: a.sample, valid }
        }
        None => fitted,
    };
    let classes = s.record.instances.iter().map(|i| i.class_id).collect();
    let masks: Vec<BinaryMask> = s.record.instances.iter().map(|i| i.mask.clone()).collect();
    let target = ImageTarget::from_full_res(classes, &masks, &valid, MASK_STRIDE)?;
    Ok((s.image, target))
}

fn valid_as_sample(a: &Augmented) -> Sample {
    let (h, w) = (a.valid.height, a.valid.width);
    let data = (0..3).flat_map(|_| a.valid.data.iter().map(|&v| f64::from(u8::from(v)))).collect();
    Sample {
        image: RgbImage { height: h, width: w, data },
        record: crate::data::AnnotationRecord { image_id: String::new(), height: h, width: w, instances: vec![] },
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{},{},{},{}", self.step, self.lr, l.cls, l.dice, l.bce, l.total)
    }
}

pub struct Trainer {
    pub model: Iaunet,
    pub cfg: RunConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
    last_finite: Option<LossBreakdown>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Iaunet::new(cfg.model.clone(), cfg.seed)?;
        Ok(Self::with_model(model, cfg))
    }

    pub fn with_model(model: Iaunet, cfg: RunConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a06u64);
        Trainer { model, cfg, opt: AdamW::new(), rng, step: 0, last_finite: None }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Samples of the next batch: consecutive indices, wrapping around.
    fn batch_indices(&self, n: usize) -> Vec<usize> {
        let bs = self.cfg.optim.batch_size.min(n);
        (0..bs).map(|j| (self.step * bs + j) % n).collect()
    }

    /// Runs one forward/backward/update on the next batch.
    pub fn step(&mut self, samples: &[Sample]) -> Result<StepRecord> {
        if samples.is_empty() {
            return Err(Error::Contract("training needs at least one sample".into()));
        }
        let o = self.cfg.optim.clone();
        let step = self.step + 1;
        let lr = cosine_lr(o.lr, o.lr_floor, self.step, o.steps);
        let mut images = Vec::new();
        let mut targets = Vec::new();
        for i in self.batch_indices(samples.len()) {
            let rng = o.augment.then_some(&mut self.rng);
            let (img, t) = prepare_sample(&samples[i], self.cfg.model.image_size, rng)?;
            images.push(img);
            targets.push(t);
        }
        let refs: Vec<&RgbImage> = images.iter().collect();
        let out = self.model.forward(&RgbImage::batch(&refs)?, BnMode::Train).map_err(|e| self.numeric(step, e))?;
        let (loss, breakdown) = total_loss(&out.points, &targets, &self.cfg.loss).map_err(|e| self.numeric(step, e))?;
        loss.backward()?;

        let store = &self.model.store;
        let mut values = Vec::with_capacity(store.params().len());
        let mut grads = Vec::with_capacity(store.params().len());
        for p in store.params() {
            let t = p.tensor();
            let g = t.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; t.numel()]);
            if g.iter().any(|v| !v.is_finite()) {
                let e = Error::Numeric(format!("non-finite gradient in {}", p.name));
                return Err(self.numeric(step, e));
            }
            values.push(t.data().to_vec());
            grads.push(g);
        }
        let mut slices: Vec<&mut [f64]> = values.iter_mut().map(Vec::as_mut_slice).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.opt.step(&mut slices, &grad_refs, lr, o.weight_decay);
        for (id, v) in store.ids().collect::<Vec<_>>().into_iter().zip(values) {
            store.set(id, v)?;
        }
        self.step = step;
        self.last_finite = Some(breakdown.clone());
        Ok(StepRecord { step, lr, loss: breakdown })
    }

    fn numeric(&self, step: usize, e: Error) -> Error {
        match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "training aborted at step {step}: {msg}; last finite breakdown: {}",
                match &self.last_finite {
                    Some(b) => format!("cls={} dice={} bce={} total={}", b.cls, b.dice, b.bce, b.total),
                    None => "none (first step)".into(),
                }
            )),
            e => e,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, self.step)
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Trains for `cfg.optim.steps` steps, appending every step to
/// `<out>/train_log.csv` and writing `<out>/checkpoint.bin` at the end (plus
/// `checkpoint_step<N>.bin` every `checkpoint_interval` steps). The log keeps
/// every completed step when a numeric failure aborts the run.
pub fn train(cfg: &RunConfig, samples: &[Sample], mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let log = out.join(LOG_FILE);
    let mut w = create(&log)?;
    let io = |e| Error::io(&log, e);
    writeln!(w, "{LOG_HEADER}").map_err(io)?;
    let mut records = Vec::with_capacity(cfg.optim.steps);
    for _ in 0..cfg.optim.steps {
        let rec = match trainer.step(samples) {
            Ok(r) => r,
            Err(e) => {
                w.flush().map_err(io)?;
                return Err(e);
            }
        };
        writeln!(w, "{}", rec.csv_line()).map_err(io)?;
        on_step(&rec);
        let k = cfg.optim.checkpoint_interval;
        if k > 0 && rec.step % k == 0 && rec.step < cfg.optim.steps {
            trainer.checkpoint().save(&out.join(format!("checkpoint_step{}.bin", rec.step)))?;
        }
        records.push(rec);
    }
    w.flush().map_err(io)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint)?;
    Ok(TrainOutcome { records, log, checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneSpec};
    use crate::model::ModelConfig;

    fn tiny_cfg(out: &Path, steps: usize) -> RunConfig {
        let mut cfg = RunConfig { model: ModelConfig::tiny(), seed: 2, out: out.to_path_buf(), ..Default::default() };
        cfg.optim.steps = steps;
        cfg.optim.batch_size = 2;
        cfg.data.scene =
            SceneSpec { height: 32, width: 32, min_axis: 4.0, max_axis: 7.0, min_instances: 2, max_instances: 4, ..Default::default() };
        cfg
    }

    #[test]
    fn zero_steps_writes_header_and_initial_weights() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path(), 0);
        let samples = generate_dataset(&cfg.data.scene, 2).unwrap();
        let out = train(&cfg, &samples, |_| {}).unwrap();
        assert_eq!(fs::read_to_string(&out.log).unwrap(), format!("{LOG_HEADER}\n"));
        let ck = Checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(ck, Checkpoint::capture(&Iaunet::new(cfg.model.clone(), cfg.seed).unwrap(), 0));
    }

    #[test]
    fn steps_are_logged_and_checkpointed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), 3);
        cfg.optim.checkpoint_interval = 2;
        cfg.optim.augment = true;
        let samples = generate_dataset(&cfg.data.scene, 3).unwrap();
        let out = train(&cfg, &samples, |_| {}).unwrap();
        let log = fs::read_to_string(&out.log).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.lines().nth(1).unwrap().starts_with("1,0.001,"));
        assert!(dir.path().join("checkpoint_step2.bin").exists());
        assert_eq!(Checkpoint::load(&out.checkpoint).unwrap().header.step, 3);
    }

    #[test]
    fn resized_and_augmented_targets_mark_padding_invalid() {
        let s = generate_dataset(&SceneSpec { height: 64, width: 32, ..Default::default() }, 1).unwrap().remove(0);
        let (img, t) = prepare_sample(&s, 32, None).unwrap();
        assert_eq!((img.height, img.width), (32, 32));
        // 16 of 32 columns are real image, i.e. 4 of 8 logit columns
        assert_eq!(t.valid.iter().sum::<f64>(), 8.0 * 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let (_, t) = prepare_sample(&s, 32, Some(&mut rng)).unwrap();
            assert!(t.valid.iter().sum::<f64>() <= 8.0 * 8.0);
            assert!(t.masks.iter().all(|m| m.data.len() == 64));
        }
    }

    #[test]
    fn nan_aborts_with_step_and_last_breakdown() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path(), 5);
        cfg.optim.lr = 1e300;
        cfg.optim.lr_floor = 0.0;
        let samples = generate_dataset(&cfg.data.scene, 2).unwrap();
        let r = train(&cfg, &samples, |_| {});
        let Err(Error::Numeric(msg)) = r else { panic!("expected numeric failure, got {:?}", r.map(|o| o.records)) };
        assert!(msg.contains("training aborted at step 2"), "{msg}");
        assert!(msg.contains("last finite breakdown: cls="), "{msg}");
        assert_eq!(fs::read_to_string(dir.path().join(LOG_FILE)).unwrap().lines().count(), 2);
    }
}
