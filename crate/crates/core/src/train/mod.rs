//! Photometric training, evaluation protocols and checkpoints.
//!
//! Each step picks a training subject, a frame and one of the input
//! cameras as the query; the field is conditioned on the remaining input
//! cameras and supervised on rays of the query image.

pub mod ablate;
pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod rays;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{FrameInputs, Model};
use crate::geometry::{body_bbox, ray_box_bounds};
use crate::render::{render_batch, RayBatch};
use crate::synth::CaptureSet;
use crate::tensor::{ParamStore, Real, Tape, Var};

pub use ablate::{run_ablation, write_ablation_csv, AblationRow};
pub use adam::Adam;
pub use checkpoint::Checkpoint;
pub use config::{Precision, SplitConfig, TrainConfig, TrainSettings};
pub use eval::{
    clamped_memory, evaluate, gray_baseline, mean_color_baseline, protocol_cases, render_case,
    render_frame,
    EvalReport, EvalRow, Protocol,
};
pub use rays::{sample_training_rays, TrainingRays};

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub subject: String,
    pub frame: usize,
    pub query_view: usize,
}

/// What one training step is built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pub subject: usize,
    pub frame: usize,
    pub query_view: usize,
    pub inputs: Vec<usize>,
    pub memory: Vec<usize>,
}

pub struct Trainer<'a, T: Real> {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    data: &'a CaptureSet,
    subjects: Vec<usize>,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    /// Fresh weights from `cfg.train.seed`.
    pub fn new(cfg: TrainConfig, data: &'a CaptureSet) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, cfg.model.clone(), cfg.train.seed)?;
        Self::with_weights(cfg, data, model, store, 0)
    }

    pub fn resume(checkpoint: Checkpoint<T>, data: &'a CaptureSet) -> Result<Self> {
        let model = checkpoint.model()?;
        Self::with_weights(checkpoint.config, data, model, checkpoint.store, checkpoint.step)
    }

    fn with_weights(
        cfg: TrainConfig,
        data: &'a CaptureSet,
        model: Model,
        store: ParamStore<T>,
        step: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let split = &cfg.split;
        let subjects = split
            .train_subjects
            .iter()
            .map(|name| {
                data.subjects
                    .iter()
                    .position(|s| &s.name == name)
                    .ok_or_else(|| Error::invalid(format!("training subject {name} not in dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        if split.train_frames[1] > data.frames {
            return Err(Error::invalid(format!(
                "training frames {:?} exceed the {} captured frames",
                split.train_frames, data.frames
            )));
        }
        if let Some(v) = split
            .input_views
            .iter()
            .chain(&split.eval_views)
            .find(|&&v| v >= data.cameras.len())
        {
            return Err(Error::invalid(format!("camera {v} not in dataset")));
        }
        let adam = Adam::new(&store, cfg.train.lr);
        // Stream 0 keeps the step sampler apart from the weight streams.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        rng.set_stream(0);
        // A resumed run continues a different (but reproducible) sequence.
        rng.set_word_pos((step as u128) << 20);
        Ok(Trainer {
            cfg,
            model,
            store,
            adam,
            data,
            subjects,
            rng,
            step,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            store: self.store.clone(),
        }
    }

    fn plan(&mut self) -> StepPlan {
        let split = &self.cfg.split;
        let subject = self.subjects[self.rng.gen_range(0..self.subjects.len())];
        let range = split.train_frames[0]..split.train_frames[1];
        let frame = self.rng.gen_range(range.clone());
        let pool = if split.query_views.is_empty() {
            &split.input_views
        } else {
            &split.query_views
        };
        let query_view = pool[self.rng.gen_range(0..pool.len())];
        let inputs = split.input_views.iter().copied().filter(|&v| v != query_view).collect();
        let memory = clamped_memory(frame, &self.cfg.memory_offsets(), &range);
        StepPlan {
            subject,
            frame,
            query_view,
            inputs,
            memory,
        }
    }

    /// One Adam step on the mean squared color error of a fresh ray batch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let plan = self.plan();
        let subject = &self.data.subjects[plan.subject];
        let (t, q) = (plan.frame, plan.query_view);
        let inputs = FrameInputs::from_subject(subject, &self.data.cameras, &plan.inputs, t, &plan.memory)?;
        let bounds = body_bbox(&subject.frames[t].vertices, self.cfg.model.bbox_margin)?;
        let ts = &self.cfg.train;
        let mut batch_rays = sample_training_rays(
            &subject.images[q][t],
            &subject.masks[q][t],
            &self.data.cameras[q],
            ts.rays,
            ts.foreground_fraction,
            ts.mask_dilation,
            &mut self.rng,
        )?;
        for r in &mut batch_rays.rays {
            r.bounds = ray_box_bounds(r, &bounds);
        }
        let batch = RayBatch::new(&batch_rays.rays, ts.samples, Some(&mut self.rng))?;

        let mut tape = Tape::new();
        let focus = (!batch.points.is_empty()).then_some(batch.points.as_slice());
        let state = self.model.prepare_frame(&mut tape, &self.store, &inputs, focus)?;
        let pred = render_batch(&self.model, &mut tape, &self.store, &state, &batch)?;
        let loss = photometric_loss(&mut tape, pred, &batch_rays.targets)?;
        let value = tape.value(loss)[0].as_f64();
        if !value.is_finite() {
            let colors = tape.value(pred);
            let bad = (0..ts.rays).find(|&i| colors[3 * i..3 * i + 3].iter().any(|v| !v.is_finite()));
            let detail = match bad {
                Some(i) => format!(
                    "ray {i} at pixel {:?} predicted {:?}",
                    batch_rays.pixels[i],
                    &colors[3 * i..3 * i + 3]
                ),
                None => "all predictions finite".to_string(),
            };
            return Err(Error::NonFinite(format!(
                "loss {value} at step {} ({} frame {t} view {q}): {detail}",
                self.step, subject.name
            )));
        }
        tape.backward_into(loss, &mut self.store)?;
        self.adam.step(&mut self.store);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss: value,
            subject: subject.name.clone(),
            frame: t,
            query_view: q,
        })
    }

    /// Runs until `cfg.train.steps` steps have been taken, calling `on_step`
    /// after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        let every = self.cfg.train.log_every;
        let mut window = 0.0;
        while self.step < self.cfg.train.steps {
            let r = self.train_step()?;
            window += r.loss;
            if every > 0 && r.step % every == 0 {
                log::info!("step {} loss {:.5}", r.step, window / every as f64);
                window = 0.0;
            }
            on_step(&r);
        }
        Ok(())
    }
}

/// Trains fresh weights for `cfg.train.steps` steps.
pub fn fit<T: Real>(
    cfg: TrainConfig,
    data: &CaptureSet,
    on_step: impl FnMut(&StepReport),
) -> Result<Checkpoint<T>> {
    let mut trainer = Trainer::<T>::new(cfg, data)?;
    trainer.run(on_step)?;
    Ok(trainer.checkpoint())
}

/// [`fit`] in the precision the config asks for, returned as evaluation
/// weights.
pub fn fit_for_eval(
    cfg: TrainConfig,
    data: &CaptureSet,
    on_step: impl FnMut(&StepReport),
) -> Result<Checkpoint<f32>> {
    match cfg.train.precision {
        Precision::F32 => fit::<f32>(cfg, data, on_step),
        Precision::F64 => Ok(fit::<f64>(cfg, data, on_step)?.cast()),
    }
}

/// Mean squared error between predicted `[rays×3]` colors and targets.
pub fn photometric_loss<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &[f32]) -> Result<Var> {
    let target: Vec<T> = targets.iter().map(|&v| T::lit(v as f64)).collect();
    let target = tape.constant(&[targets.len() / 3, 3], target)?;
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Weights for evaluation and rendering, whatever precision they were
/// trained in.
pub fn eval_store<T: Real>(store: &ParamStore<T>) -> ParamStore<f32> {
    store.cast()
}
