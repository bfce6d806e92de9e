//! The curriculum core: Local Gradient Sign smoothing, FGSM perturbation,
//! style-fusion blending, and the finetuning loops (LSCL, its SCL and
//! random-style ablations, and the mixup baseline).

use crate::error::{LsclError, Result};
use crate::losses::{combined_loss, combined_loss_soft};
use crate::metrics::LabelMap;
use crate::optim::OptState;
use crate::stylegen::{image_to_bytes, moment_style_transfer, write_pgm, Dataset, Sample};
use crate::tape::Tape;
use crate::tensor::{Rng, Tensor};
use crate::unet::{forward, Model};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumParams {
    /// Max learning iteration; the stage loop runs i = 0..=n.
    pub n: usize,
    /// Learning step added to the weight matrix where the smoothed gradient
    /// is positive.
    pub epsilon: f64,
    /// Side length of the average-pooling blocks.
    pub pool_size: usize,
    pub clamp_gamma: bool,
}

impl Default for CurriculumParams {
    fn default() -> Self {
        CurriculumParams {
            n: 3,
            epsilon: 0.25,
            pool_size: 4,
            clamp_gamma: true,
        }
    }
}

impl CurriculumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(LsclError::InvalidConfig(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.pool_size == 0 {
            return Err(LsclError::InvalidConfig("pool_size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample curriculum state: learning weight matrix, stage index, the
/// stylised base image and the content image.
#[derive(Debug, Clone)]
pub struct CurriculumState {
    pub gamma: Tensor,
    pub stage: usize,
    pub z: Tensor,
    pub x_c: Tensor,
}

/// Local Gradient Sign: average-pool the h x w gradient into blocks, take
/// the sign (sign(0) = 0), scale by epsilon, truncate negatives, and
/// nearest-upsample back. Output entries are 0 or epsilon, constant per
/// block.
pub fn lgs(grad: &Tensor, epsilon: f64, pool_size: usize) -> Result<Tensor> {
    let (h, w) = match grad.shape.as_slice() {
        [h, w] => (*h, *w),
        other => {
            return Err(LsclError::shape(
                "lgs",
                format!("expected h x w gradient, got {other:?}"),
            ))
        }
    };
    if h % pool_size != 0 || w % pool_size != 0 {
        return Err(LsclError::shape(
            "lgs",
            format!("{h}x{w} not divisible by pool size {pool_size}"),
        ));
    }
    let (bh, bw) = (h / pool_size, w / pool_size);
    let mut pooled = vec![0.0f64; bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            let mut acc = 0.0;
            for dy in 0..pool_size {
                for dx in 0..pool_size {
                    acc += grad.data[(by * pool_size + dy) * w + bx * pool_size + dx];
                }
            }
            pooled[by * bw + bx] = acc / (pool_size * pool_size) as f64;
        }
    }
    // sign -> scale -> ReLU, then upsample to the original size.
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let p = pooled[(y / pool_size) * bw + x / pool_size];
            let v = epsilon * p.signum() * ((p != 0.0) as u8 as f64);
            out.data[y * w + x] = v.max(0.0);
        }
    }
    Ok(out)
}

/// SCL ablation increment: per-pixel sign step, i.e. LGS with a 1x1 pool.
pub fn scl_increment(grad: &Tensor, epsilon: f64) -> Tensor {
    grad.map(|g| {
        let s = if g > 0.0 {
            epsilon
        } else if g < 0.0 {
            -epsilon
        } else {
            0.0
        };
        s.max(0.0)
    })
}

/// Style fusion: pixelwise convex blend gamma * z + (1 - gamma) * x_c.
/// `gamma` is h x w; `z` and `x_c` are 1 x h x w images.
pub fn blend(gamma: &Tensor, z: &Tensor, x_c: &Tensor, clamp_gamma: bool) -> Result<Tensor> {
    if z.shape != x_c.shape || gamma.len() * z.shape[0] != z.len() {
        return Err(LsclError::shape(
            "blend",
            format!(
                "gamma {:?}, z {:?}, x_c {:?}",
                gamma.shape, z.shape, x_c.shape
            ),
        ));
    }
    let plane = gamma.len();
    let mut out = Tensor::zeros(&z.shape);
    for c in 0..z.shape[0] {
        for i in 0..plane {
            let mut g = gamma.data[i];
            if clamp_gamma {
                g = g.clamp(0.0, 1.0);
            } else if !(0.0..=1.0).contains(&g) {
                return Err(LsclError::GammaOutOfRange(g));
            }
            out.data[c * plane + i] = g * z.data[c * plane + i] + (1.0 - g) * x_c.data[c * plane + i];
        }
    }
    Ok(out)
}

/// Fast gradient sign perturbation x + epsilon * sign(grad). Clamps the
/// result to [0, 1] unless `raw` is set.
pub fn fgsm_perturb(x: &Tensor, grad: &Tensor, epsilon: f64, raw: bool) -> Result<Tensor> {
    let stepped = x.zip(grad, "fgsm", |xv, gv| xv + epsilon * gv.signum())?;
    Ok(if raw {
        stepped
    } else {
        stepped.map(|v| v.clamp(0.0, 1.0))
    })
}

/// Mixup of two samples: convex blend of images and of one-hot labels.
pub fn mixup(s1: &Sample, s2: &Sample, lambda: f64, num_classes: usize) -> Result<(Tensor, Tensor)> {
    if s1.image.shape != s2.image.shape {
        return Err(LsclError::shape(
            "mixup",
            format!("{:?} vs {:?}", s1.image.shape, s2.image.shape),
        ));
    }
    let image = s1
        .image
        .zip(&s2.image, "mixup", |a, b| lambda * a + (1.0 - lambda) * b)?;
    let (h, w) = (s1.label.h, s1.label.w);
    let plane = h * w;
    let mut soft = Tensor::zeros(&[1, num_classes, h, w]);
    for px in 0..plane {
        soft.data[s1.label.data[px] as usize * plane + px] += lambda;
        soft.data[s2.label.data[px] as usize * plane + px] += 1.0 - lambda;
    }
    Ok((image, soft))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub sample_idx: usize,
    pub stage: usize,
    pub loss: f64,
    pub mean_abs_delta_z: f64,
    pub gamma_mean: f64,
}

/// Optional per-stage state capture for invariant checks and debugging.
#[derive(Debug, Clone)]
pub struct StageSnapshot {
    pub sample_idx: usize,
    pub stage: usize,
    pub gamma: Tensor,
    pub z_i: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub snapshots: Vec<StageSnapshot>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,sample_idx,stage,loss,mean_abs_delta_z,gamma_mean\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{:.9},{:.9},{:.9}\n",
                e.epoch, e.sample_idx, e.stage, e.loss, e.mean_abs_delta_z, e.gamma_mean
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub record_snapshots: bool,
    /// When set, every curriculum sample is dumped as PGM under this
    /// directory for visual inspection.
    pub dump_dir: Option<PathBuf>,
}

/// One forward/backward pass: loss value, gradient w.r.t. the input image
/// (averaged over channels to h x w), and named parameter gradients.
fn loss_and_grads(
    model: &Model,
    image: &Tensor,
    label: &LabelMap,
    want_input_grad: bool,
) -> Result<(f64, Option<Tensor>, Vec<(String, Tensor)>)> {
    let mut tape = Tape::new();
    let batch_shape = vec![1, image.shape[0], image.shape[1], image.shape[2]];
    let batch = tape.input(Tensor::new(batch_shape, image.data.clone()))?;
    let nodes = forward(model, batch, &mut tape)?;
    let loss = combined_loss(nodes.logits, std::slice::from_ref(label), &mut tape)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(LsclError::NonFinite("combined_loss".into()));
    }
    let mut grads = tape.backward(loss)?;
    let input_grad = if want_input_grad {
        let g = grads[batch]
            .take()
            .ok_or_else(|| LsclError::MissingGradient("input".into()))?;
        Some(channel_mean(&g, label.h, label.w))
    } else {
        None
    };
    let param_grads = nodes
        .param_nodes
        .iter()
        .map(|(name, id)| {
            grads[*id]
                .take()
                .map(|t| (name.clone(), t))
                .ok_or_else(|| LsclError::MissingGradient(name.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, input_grad, param_grads))
}

/// Average a [1, c, h, w] gradient over channels into h x w.
fn channel_mean(grad: &Tensor, h: usize, w: usize) -> Tensor {
    let c = grad.len() / (h * w);
    let plane = h * w;
    let mut out = Tensor::zeros(&[h, w]);
    for ch in 0..c {
        for i in 0..plane {
            out.data[i] += grad.data[ch * plane + i];
        }
    }
    out.map(|v| v / c as f64)
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// The full curriculum finetuning loop: per content sample, draw a style
/// image, build the stylised base, then run n + 1 stages that blend ever
/// more style in along the positive loss gradient while updating the model
/// at every stage.
#[allow(clippy::too_many_arguments)]
pub fn lscl_finetune(
    model: &mut Model,
    train: &Dataset,
    style_pool: &Dataset,
    params: &CurriculumParams,
    opt: &mut OptState,
    epochs: usize,
    rng: &mut Rng,
    opts: &FinetuneOptions,
) -> Result<TrainLog> {
    params.validate()?;
    if style_pool.samples.is_empty() {
        return Err(LsclError::EmptyDataset);
    }
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        for (sample_idx, sample) in train.samples.iter().enumerate() {
            let pick = rng.uniform_int(0, style_pool.samples.len() as i64) as usize;
            let x_s = &style_pool.samples[pick].image;
            let x_c = &sample.image;
            let z = moment_style_transfer(x_c, x_s)?;
            let (h, w) = (sample.label.h, sample.label.w);
            let mut gamma = Tensor::zeros(&[h, w]);
            for stage in 0..=params.n {
                let z_i = blend(&gamma, &z, x_c, params.clamp_gamma)?;
                let (loss, input_grad, param_grads) =
                    loss_and_grads(model, &z_i, &sample.label, true)?;
                let grad = input_grad.unwrap();
                let increment = lgs(&grad, params.epsilon, params.pool_size)?;
                let next_gamma = clamp01(&gamma.zip(&increment, "gamma-update", |a, b| a + b)?);
                let z_next = blend(&next_gamma, &z, x_c, params.clamp_gamma)?;
                let delta = z_next
                    .zip(&z_i, "delta-z", |a, b| (a - b).abs())
                    .unwrap()
                    .mean();
                opt.apply(model, &param_grads)?;
                log.entries.push(TrainLogEntry {
                    epoch,
                    sample_idx,
                    stage,
                    loss,
                    mean_abs_delta_z: delta,
                    gamma_mean: gamma.mean(),
                });
                if opts.record_snapshots {
                    log.snapshots.push(StageSnapshot {
                        sample_idx,
                        stage,
                        gamma: gamma.clone(),
                        z_i: z_i.clone(),
                    });
                }
                if let Some(dir) = &opts.dump_dir {
                    let path =
                        dir.join(format!("e{epoch}_s{sample_idx:04}_i{stage}.pgm"));
                    write_pgm(&path, h, w, &image_to_bytes(&z_i))?;
                }
                gamma = next_gamma;
            }
        }
    }
    Ok(log)
}

/// Ablation: train directly on fully stylised samples (gamma forced to all
/// ones, a single stage per sample).
pub fn random_style_finetune(
    model: &mut Model,
    train: &Dataset,
    style_pool: &Dataset,
    opt: &mut OptState,
    epochs: usize,
    rng: &mut Rng,
) -> Result<TrainLog> {
    if style_pool.samples.is_empty() {
        return Err(LsclError::EmptyDataset);
    }
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        for (sample_idx, sample) in train.samples.iter().enumerate() {
            let pick = rng.uniform_int(0, style_pool.samples.len() as i64) as usize;
            let x_s = &style_pool.samples[pick].image;
            let z = moment_style_transfer(&sample.image, x_s)?;
            let (loss, _, param_grads) = loss_and_grads(model, &z, &sample.label, false)?;
            opt.apply(model, &param_grads)?;
            log.entries.push(TrainLogEntry {
                epoch,
                sample_idx,
                stage: 0,
                loss,
                mean_abs_delta_z: 0.0,
                gamma_mean: 1.0,
            });
        }
    }
    Ok(log)
}

/// SCL ablation: the LSCL loop with the per-pixel increment instead of the
/// block-pooled one.
#[allow(clippy::too_many_arguments)]
pub fn scl_finetune(
    model: &mut Model,
    train: &Dataset,
    style_pool: &Dataset,
    params: &CurriculumParams,
    opt: &mut OptState,
    epochs: usize,
    rng: &mut Rng,
) -> Result<TrainLog> {
    let per_pixel = CurriculumParams {
        pool_size: 1,
        ..params.clone()
    };
    lscl_finetune(
        model,
        train,
        style_pool,
        &per_pixel,
        opt,
        epochs,
        rng,
        &FinetuneOptions::default(),
    )
}

/// Mixup baseline: each step trains on a convex blend of the sample with a
/// random partner, against soft labels.
pub fn mixup_finetune(
    model: &mut Model,
    train: &Dataset,
    opt: &mut OptState,
    epochs: usize,
    rng: &mut Rng,
) -> Result<TrainLog> {
    if train.samples.is_empty() {
        return Err(LsclError::EmptyDataset);
    }
    let num_classes = model.config.num_classes;
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        for (sample_idx, sample) in train.samples.iter().enumerate() {
            let partner = rng.uniform_int(0, train.samples.len() as i64) as usize;
            let lambda = rng.beta_symmetric(0.2);
            let (image, soft) = mixup(sample, &train.samples[partner], lambda, num_classes)?;
            let mut tape = Tape::new();
            let batch_shape = vec![1, image.shape[0], image.shape[1], image.shape[2]];
            let batch = tape.input(Tensor::new(batch_shape, image.data.clone()))?;
            let nodes = forward(model, batch, &mut tape)?;
            let loss = combined_loss_soft(nodes.logits, &soft, &mut tape)?;
            let loss_value = tape.value(loss).item();
            let mut grads = tape.backward(loss)?;
            let param_grads = nodes
                .param_nodes
                .iter()
                .map(|(name, id)| {
                    grads[*id]
                        .take()
                        .map(|t| (name.clone(), t))
                        .ok_or_else(|| LsclError::MissingGradient(name.clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            opt.apply(model, &param_grads)?;
            log.entries.push(TrainLogEntry {
                epoch,
                sample_idx,
                stage: 0,
                loss: loss_value,
                mean_abs_delta_z: 0.0,
                gamma_mean: 0.0,
            });
        }
    }
    Ok(log)
}

/// Frozen-model hardness diagnostic: run the curriculum stages without any
/// parameter update and return the loss of every (sample, stage) pair,
/// indexed `[stage][sample]`.
pub fn curriculum_hardness(
    model: &Model,
    samples: &[Sample],
    style_pool: &Dataset,
    params: &CurriculumParams,
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    if style_pool.samples.is_empty() {
        return Err(LsclError::EmptyDataset);
    }
    let mut losses = vec![Vec::with_capacity(samples.len()); params.n + 1];
    for sample in samples {
        let pick = rng.uniform_int(0, style_pool.samples.len() as i64) as usize;
        let x_s = &style_pool.samples[pick].image;
        let x_c = &sample.image;
        let z = moment_style_transfer(x_c, x_s)?;
        let (h, w) = (sample.label.h, sample.label.w);
        let mut gamma = Tensor::zeros(&[h, w]);
        for stage in 0..=params.n {
            let z_i = blend(&gamma, &z, x_c, params.clamp_gamma)?;
            let (loss, input_grad, _) = loss_and_grads(model, &z_i, &sample.label, true)?;
            losses[stage].push(loss);
            let increment = lgs(&input_grad.unwrap(), params.epsilon, params.pool_size)?;
            gamma = clamp01(&gamma.zip(&increment, "gamma-update", |a, b| a + b)?);
        }
    }
    Ok(losses)
}
