use std::io::Write;

use super::{evaluate, fit_for_eval, Protocol, StepReport, TrainConfig};
use crate::error::{Error, Result};
use crate::field::Ablation;
use crate::synth::CaptureSet;

/// Mean scores of one trained variant under one protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Ablation,
    pub protocol: Protocol,
    pub psnr: f64,
    pub ssim: f64,
    pub crop_psnr: f64,
    pub mean_color_psnr: f64,
    pub gray_psnr: f64,
    /// Mean training loss over the last tenth of the run.
    pub final_loss: f64,
    pub finite: bool,
}

/// Trains every variant from the same seed on the same data and scores it
/// under each protocol.
pub fn run_ablation(
    base: &TrainConfig,
    data: &CaptureSet,
    variants: &[Ablation],
    protocols: &[Protocol],
    mut on_step: impl FnMut(Ablation, &StepReport),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.model.ablation = variant;
        cfg.validate()?;
        let tail = (cfg.train.steps / 10).max(1);
        let mut losses = Vec::with_capacity(cfg.train.steps);
        let ckpt = fit_for_eval(cfg.clone(), data, |r| {
            losses.push(r.loss);
            on_step(variant, r);
        })?;
        let final_loss = losses[losses.len().saturating_sub(tail)..].iter().sum::<f64>() / tail as f64;
        let model = ckpt.model()?;
        for &protocol in protocols {
            let report = evaluate(&model, &ckpt.store, &cfg, data, protocol)?;
            rows.push(AblationRow {
                variant,
                protocol,
                psnr: report.mean_psnr(),
                ssim: report.mean_ssim(),
                crop_psnr: report.mean_crop_psnr(),
                mean_color_psnr: report.mean_color_baseline(),
                gray_psnr: report.mean_gray_baseline(),
                final_loss,
                finite: report.all_finite(),
            });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    let io = |e| Error::io("writing ablation table", e);
    writeln!(
        w,
        "variant,protocol,psnr,ssim,crop_psnr,mean_color_psnr,gray_psnr,final_loss"
    )
    .map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.4},{:.5},{:.4},{:.4},{:.4},{:.6}",
            r.variant.label(),
            r.protocol.name(),
            r.psnr,
            r.ssim,
            r.crop_psnr,
            r.mean_color_psnr,
            r.gray_psnr,
            r.final_loss
        )
        .map_err(io)?;
    }
    Ok(())
}
