use std::io::Write;
use std::ops::Range;
use std::str::FromStr;

use super::{SplitConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::field::{memory_frames, FrameInputs, Model};
use crate::geometry::Camera;
use crate::imaging::Image;
use crate::metrics::{psnr, score, Scores};
use crate::render::{render_image, Rendering};
use crate::synth::{CaptureSet, SubjectCapture};
use crate::tensor::ParamStore;

/// Rays per parallel work item when rendering for evaluation.
pub const EVAL_CHUNK: usize = 256;

/// Generalization settings: seen subjects at unseen poses, unseen subjects
/// at unseen poses, and seen subjects at seen poses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Pose,
    Identity,
    Seen,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Pose, Protocol::Identity, Protocol::Seen];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Pose => "pose",
            Protocol::Identity => "identity",
            Protocol::Seen => "seen",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown protocol {s:?} (pose, identity, seen)")))
    }
}

/// Subjects and frame range a protocol evaluates, after checking the split
/// keeps them apart from training where the protocol requires it.
pub fn protocol_cases(split: &SplitConfig, protocol: Protocol) -> Result<(&[String], Range<usize>)> {
    let train = split.train_frames[0]..split.train_frames[1];
    let test = split.test_frames[0]..split.test_frames[1];
    let frames_overlap = train.start < test.end && test.start < train.end;
    match protocol {
        Protocol::Pose | Protocol::Identity if frames_overlap => {
            Err(Error::invalid(format!(
                "{} protocol needs disjoint frame ranges, got {train:?} and {test:?}",
                protocol.name()
            )))
        }
        Protocol::Identity => {
            if let Some(s) = split.test_subjects.iter().find(|s| split.train_subjects.contains(s)) {
                return Err(Error::invalid(format!(
                    "identity protocol needs disjoint subjects, {s} is in both sets"
                )));
            }
            if split.test_subjects.is_empty() {
                return Err(Error::invalid("identity protocol has no test subjects"));
            }
            Ok((&split.test_subjects, test))
        }
        Protocol::Pose => Ok((&split.train_subjects, test)),
        Protocol::Seen => Ok((&split.train_subjects, train)),
    }
}

/// Memory frames `t ± Δ` clamped to `range`.
pub fn clamped_memory(t: usize, offsets: &[isize], range: &Range<usize>) -> Vec<usize> {
    offsets
        .iter()
        .map(|&o| (t as isize + o).clamp(range.start as isize, range.end as isize - 1) as usize)
        .collect()
}

/// PSNR of the best constant image (the ground truth's mean color).
pub fn mean_color_baseline(truth: &Image) -> Result<f64> {
    psnr(&Image::filled(truth.width, truth.height, truth.mean_color()), truth)
}

/// PSNR of a uniform mid-gray image.
pub fn gray_baseline(truth: &Image) -> Result<f64> {
    psnr(&Image::filled(truth.width, truth.height, [0.5; 3]), truth)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub subject: String,
    pub frame: usize,
    pub view: usize,
    pub scores: Scores,
    pub mean_color_psnr: f64,
    pub gray_psnr: f64,
    pub finite: bool,
}

/// Renders `subject` at frame `t` from any camera `cam`, conditioned on the
/// configured input views with memory frames clamped to the whole clip.
#[allow(clippy::too_many_arguments)]
pub fn render_frame(
    model: &Model,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    data: &CaptureSet,
    subject: &SubjectCapture,
    t: usize,
    cam: &Camera,
    samples: usize,
) -> Result<Rendering> {
    let memory = memory_frames(t, &cfg.memory_offsets(), subject.frames.len(), true)?;
    let inp = FrameInputs::from_subject(subject, &data.cameras, &cfg.split.input_views, t, &memory)?;
    render_image(model, store, &inp, cam, samples, EVAL_CHUNK)
}

/// Renders `subject` at frame `t` from camera `view`, conditioned on
/// `inputs` with memory frames clamped to the whole clip, and scores it.
#[allow(clippy::too_many_arguments)]
pub fn render_case(
    model: &Model,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    data: &CaptureSet,
    subject: &SubjectCapture,
    t: usize,
    view: usize,
    inputs: &[usize],
) -> Result<(Rendering, EvalRow)> {
    let memory = memory_frames(t, &cfg.memory_offsets(), subject.frames.len(), true)?;
    let inp = FrameInputs::from_subject(subject, &data.cameras, inputs, t, &memory)?;
    let out = render_image(model, store, &inp, &data.cameras[view], cfg.train.samples, EVAL_CHUNK)?;
    let truth = &subject.images[view][t];
    let row = EvalRow {
        subject: subject.name.clone(),
        frame: t,
        view,
        scores: score(&out.image, truth, &subject.masks[view][t])?,
        mean_color_psnr: mean_color_baseline(truth)?,
        gray_psnr: gray_baseline(truth)?,
        finite: out.image.data.iter().all(|v| v.is_finite()),
    };
    Ok((out, row))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    fn mean(&self, f: impl Fn(&EvalRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_psnr(&self) -> f64 {
        self.mean(|r| r.scores.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        self.mean(|r| r.scores.ssim)
    }

    pub fn mean_crop_psnr(&self) -> f64 {
        self.mean(|r| r.scores.crop_psnr)
    }

    pub fn mean_color_baseline(&self) -> f64 {
        self.mean(|r| r.mean_color_psnr)
    }

    pub fn mean_gray_baseline(&self) -> f64 {
        self.mean(|r| r.gray_psnr)
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.finite)
    }

    /// `subject,frame,view,psnr,ssim` lines with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("writing metrics", e);
        writeln!(w, "subject,frame,view,psnr,ssim").map_err(io)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.4},{:.5}",
                r.subject, r.frame, r.view, r.scores.psnr, r.scores.ssim
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

/// Renders every (subject, frame, evaluation view) of a protocol.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
    data: &CaptureSet,
    protocol: Protocol,
) -> Result<EvalReport> {
    let (subjects, frames) = protocol_cases(&cfg.split, protocol)?;
    let mut report = EvalReport::default();
    for name in subjects {
        let subject = data.subject(name)?;
        if frames.end > subject.frames.len() {
            return Err(Error::invalid(format!(
                "{} has {} frames, protocol needs {frames:?}",
                name,
                subject.frames.len()
            )));
        }
        for t in frames.clone().step_by(cfg.split.eval_frame_stride) {
            for &view in &cfg.split.eval_views {
                let (_, row) =
                    render_case(model, store, cfg, data, subject, t, view, &cfg.split.input_views)?;
                log::debug!("{} t={} view={} psnr={:.2}", row.subject, t, view, row.scores.psnr);
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}
