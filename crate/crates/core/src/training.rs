//! Seeded training loops: contrastive pretraining of the object (and hand)
//! encoders, and context-prediction training.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::rc::Rc;
use std::str::FromStr;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acp::{acp_loss, gt_boxes, make_context, sample_training_patches, AcpConfig, PatchSpec};
use crate::detections::FrameDetections;
use crate::error::{Error, Result};
use crate::frames::FrameSource;
use crate::image_ops::{augmented_crop, AugmentConfig, Image, Normalization};
use crate::losses::{
    loss_joint_grad, loss_tcn_grad, loss_temporal_extra_negatives_grad, matrix_to_tensor, tensor_to_matrix, HandOutputs,
    JointOutputs, LossConfig,
};
use crate::models::{AcpModel, AcpModelSpec, EncoderSpec, HandModel, HeadSpec, ObjectModel};
use crate::motion::positional_encode;
use crate::nn::{Adam, AdamConfig};
use crate::sampling::{sample_hand, sample_simclr, sample_simclr_tcn, sample_tcn, sample_temporal, CropRef, SamplingParams};
use crate::tensor::Tensor;
use crate::tracker::Track;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    Tsc,
    TscOhc,
    Tcn,
    Simclr,
    SimclrTcn,
}

impl PretrainMode {
    pub const ALL: [PretrainMode; 5] = [
        PretrainMode::Tsc,
        PretrainMode::TscOhc,
        PretrainMode::Tcn,
        PretrainMode::Simclr,
        PretrainMode::SimclrTcn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PretrainMode::Tsc => "tsc",
            PretrainMode::TscOhc => "tsc_ohc",
            PretrainMode::Tcn => "tcn",
            PretrainMode::Simclr => "simclr",
            PretrainMode::SimclrTcn => "simclr_tcn",
        }
    }
}

impl fmt::Display for PretrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PretrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pretraining mode {s:?} (tsc, tsc_ohc, tcn, simclr, simclr_tcn)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub sampling: SamplingParams,
    pub normalization: Normalization,
    /// Crops are cached at this multiple of the input size.
    pub cache_scale: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mode: PretrainMode::TscOhc,
            steps: 500,
            batch_size: 32,
            encoder: EncoderSpec::default(),
            head: HeadSpec::default(),
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            sampling: SamplingParams::default(),
            normalization: Normalization::default(),
            cache_scale: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub loss_a: Option<f64>,
    pub loss_b: Option<f64>,
}

/// Writes metrics as CSV with the given names for the two component columns.
pub fn write_metrics_csv<W: Write>(mut out: W, metrics: &[StepMetrics], names: [&str; 2]) -> Result<()> {
    let io = |e| Error::IoBare(e);
    writeln!(out, "step,loss,{},{}", names[0], names[1]).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for m in metrics {
        writeln!(out, "{},{:.6},{},{}", m.step, m.loss, opt(m.loss_a), opt(m.loss_b)).map_err(io)?;
    }
    Ok(())
}

/// Box crops resampled once at a fixed resolution, keyed by source box.
pub struct CropCache<'a> {
    frames: &'a dyn FrameSource,
    resolution: usize,
    crops: RefCell<HashMap<(String, u64, [u32; 4]), Rc<Image>>>,
}

impl<'a> CropCache<'a> {
    pub fn new(frames: &'a dyn FrameSource, resolution: usize) -> Self {
        CropCache {
            frames,
            resolution,
            crops: RefCell::new(HashMap::new()),
        }
    }

    pub fn get(&self, c: &CropRef) -> Result<Rc<Image>> {
        let key = (c.video_id.clone(), c.frame_idx, c.bbox.to_array().map(f32::to_bits));
        if let Some(img) = self.crops.borrow().get(&key) {
            return Ok(img.clone());
        }
        let frame = self.frames.frame(&c.video_id, c.frame_idx)?;
        let img = Rc::new(frame.resample(c.bbox.to_array(), self.resolution, self.resolution)?);
        self.crops.borrow_mut().insert(key, img.clone());
        Ok(img)
    }

    pub fn len(&self) -> usize {
        self.crops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn aug_batch(
    cache: &CropCache,
    crops: &[&CropRef],
    size: usize,
    aug: &AugmentConfig,
    allow_flip: bool,
    norm: &Normalization,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    crops
        .iter()
        .map(|c| {
            let src = cache.get(c)?;
            let r = cache.resolution as f32;
            Ok(augmented_crop(&src, [0.0, 0.0, r, r], size, aug, allow_flip, rng)?.to_tensor(norm))
        })
        .collect()
}

fn rows(t: &Tensor, from: usize, to: usize) -> Tensor {
    t.slice_rows(from, to)
}

/// Trained encoders and the per-step loss log.
pub struct PretrainOutput {
    pub object: ObjectModel,
    pub hand: Option<HandModel>,
    pub metrics: Vec<StepMetrics>,
}

/// Hand model seed derived from the run seed.
pub fn hand_model_seed(seed: u64) -> u64 {
    seed ^ 0x6A09_E667_F3BC_C908
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn check_tensor(t: &Tensor, step: usize) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activations at step {step}; lower the learning rate or check inputs")))
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at step {step}; lower the learning rate or check inputs")))
    }
}

/// Contrastive pretraining; returns the final-step models.
pub fn pretrain(tracks: &[Track], frames: &dyn FrameSource, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutput> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mode = cfg.mode;
    let mut loss_cfg = cfg.loss.clone();
    if mode != PretrainMode::TscOhc {
        loss_cfg.lambda_h = 0.0;
    }
    let use_hand = mode == PretrainMode::TscOhc && loss_cfg.lambda_h > 0.0;
    let mut object = ObjectModel::new(&cfg.encoder, &cfg.head, mode == PretrainMode::TscOhc, seed);
    let mut hand = (mode == PretrainMode::TscOhc).then(|| HandModel::new(&cfg.encoder, &cfg.head, hand_model_seed(seed)));
    let mut opt_o = Adam::new(cfg.adam.clone());
    let mut opt_h = Adam::new(cfg.adam.clone());

    let mut rng_batch = stream(seed, 1);
    let mut rng_aug = stream(seed, 2);
    let mut rng_hand = stream(seed, 3);
    let mut rng_hand_aug = stream(seed, 4);

    let size = cfg.encoder.input_size;
    let cache = CropCache::new(frames, ((size as f32) * cfg.cache_scale).round().max(size as f32) as usize);
    let n = cfg.batch_size;
    let norm = &cfg.normalization;
    let aug = &cfg.augment;
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let m = match mode {
            PretrainMode::Tsc | PretrainMode::TscOhc => {
                let pairs = sample_temporal(tracks, n, &cfg.sampling, &mut rng_batch)?;
                let refs: Vec<&CropRef> = pairs.iter().map(|p| &p.o).chain(pairs.iter().map(|p| &p.o_prime)).collect();
                let mut views = aug_batch(&cache, &refs, size, aug, true, norm, &mut rng_aug)?;
                let hand_batch = if use_hand {
                    let hp = sample_hand(tracks, n, &cfg.sampling, &mut rng_hand)?;
                    let orefs: Vec<&CropRef> = hp.iter().map(|p| &p.o).collect();
                    views.extend(aug_batch(&cache, &orefs, size, aug, false, norm, &mut rng_hand_aug)?);
                    let hrefs: Vec<&CropRef> = hp.iter().map(|p| &p.hand.crop).collect();
                    let hcrops = aug_batch(&cache, &hrefs, size, aug, false, norm, &mut rng_hand_aug)?;
                    let pe: Vec<f32> = hp.iter().flat_map(|p| positional_encode(&p.hand.motion).0).collect();
                    let pe = Tensor::from_vec(&[n, cfg.head.pe_dim], pe)?;
                    Some((Tensor::stack(&hcrops)?, pe))
                } else {
                    None
                };
                let x = Tensor::stack(&views)?;
                let emb = object.encode(&x, true)?;
                let z = object.project_f_o(&emb, true)?;
                check_tensor(&z, step)?;
                let z_o = tensor_to_matrix(&rows(&z, 0, n));
                let z_op = tensor_to_matrix(&rows(&z, n, 2 * n));
                let hand_out = match (&hand_batch, hand.as_mut()) {
                    (Some((hx, pe)), Some(hm)) => {
                        let z_oh = object.project_f_h(&rows(&emb, 2 * n, 3 * n), true)?;
                        let z_h = hm.forward(hx, pe, true)?;
                        Some(HandOutputs {
                            z_oh: tensor_to_matrix(&z_oh),
                            z_h: tensor_to_matrix(&z_h),
                            z_oo: tensor_to_matrix(&rows(&z, 2 * n, 3 * n)),
                        })
                    }
                    _ => None,
                };
                let g = loss_joint_grad(
                    &JointOutputs {
                        z_o,
                        z_op,
                        hand: hand_out,
                    },
                    &loss_cfg,
                )?;
                check_finite(g.loss, step)?;
                let mut d_z = vec![matrix_to_tensor(&g.temporal.d_o), matrix_to_tensor(&g.temporal.d_op)];
                if let Some(hg) = &g.hand {
                    d_z.push(matrix_to_tensor(&hg.d_oo));
                }
                let d_z: Vec<&Tensor> = d_z.iter().collect();
                let mut d_emb = object.backward_f_o(&Tensor::concat(&d_z)?)?;
                if let Some(hg) = &g.hand {
                    let d_fh = object.backward_f_h(&matrix_to_tensor(&hg.d_oh))?;
                    let data = d_emb.data_mut();
                    let width = d_fh.item_len();
                    for (dst, src) in data[2 * n * width..].iter_mut().zip(d_fh.data()) {
                        *dst += src;
                    }
                    hand.as_mut()
                        .expect("hand model")
                        .backward(&matrix_to_tensor(&hg.d_h))?;
                }
                object.backward_trunk(&d_emb)?;
                StepMetrics {
                    step,
                    loss: g.loss,
                    loss_a: Some(g.loss_temporal),
                    loss_b: g.loss_hand,
                }
            }
            PretrainMode::Simclr => {
                let crops = sample_simclr(tracks, n, &mut rng_batch)?;
                let refs: Vec<&CropRef> = crops.iter().chain(crops.iter()).collect();
                let x = Tensor::stack(&aug_batch(&cache, &refs, size, aug, true, norm, &mut rng_aug)?)?;
                let emb = object.encode(&x, true)?;
                let z = object.project_f_o(&emb, true)?;
                check_tensor(&z, step)?;
                let g = loss_joint_grad(
                    &JointOutputs {
                        z_o: tensor_to_matrix(&rows(&z, 0, n)),
                        z_op: tensor_to_matrix(&rows(&z, n, 2 * n)),
                        hand: None,
                    },
                    &loss_cfg,
                )?;
                check_finite(g.loss, step)?;
                let d = Tensor::concat(&[&matrix_to_tensor(&g.temporal.d_o), &matrix_to_tensor(&g.temporal.d_op)])?;
                let d_emb = object.backward_f_o(&d)?;
                object.backward_trunk(&d_emb)?;
                StepMetrics {
                    step,
                    loss: g.loss,
                    loss_a: Some(g.loss_temporal),
                    loss_b: None,
                }
            }
            PretrainMode::Tcn => {
                let trip = sample_tcn(tracks, n, &mut rng_batch)?;
                let refs: Vec<&CropRef> = (0..3).flat_map(|k| trip.iter().map(move |t| &t.crops[k])).collect();
                let x = Tensor::stack(&aug_batch(&cache, &refs, size, aug, true, norm, &mut rng_aug)?)?;
                let emb = object.encode(&x, true)?;
                let z = object.project_f_o(&emb, true)?;
                check_tensor(&z, step)?;
                let (loss, [ga, gp, gn]) = loss_tcn_grad(
                    &tensor_to_matrix(&rows(&z, 0, n)),
                    &tensor_to_matrix(&rows(&z, n, 2 * n)),
                    &tensor_to_matrix(&rows(&z, 2 * n, 3 * n)),
                    loss_cfg.tcn_margin,
                )?;
                check_finite(loss, step)?;
                let d = Tensor::concat(&[&matrix_to_tensor(&ga), &matrix_to_tensor(&gp), &matrix_to_tensor(&gn)])?;
                let d_emb = object.backward_f_o(&d)?;
                object.backward_trunk(&d_emb)?;
                StepMetrics {
                    step,
                    loss,
                    loss_a: None,
                    loss_b: None,
                }
            }
            PretrainMode::SimclrTcn => {
                let an = sample_simclr_tcn(tracks, n, &mut rng_batch)?;
                let refs: Vec<&CropRef> = an
                    .iter()
                    .map(|a| &a.crops[0])
                    .chain(an.iter().map(|a| &a.crops[0]))
                    .chain(an.iter().map(|a| &a.crops[1]))
                    .collect();
                let x = Tensor::stack(&aug_batch(&cache, &refs, size, aug, true, norm, &mut rng_aug)?)?;
                let emb = object.encode(&x, true)?;
                let z = object.project_f_o(&emb, true)?;
                check_tensor(&z, step)?;
                let (mut loss, [mut d1, mut d2, mut d3]) = loss_temporal_extra_negatives_grad(
                    &tensor_to_matrix(&rows(&z, 0, n)),
                    &tensor_to_matrix(&rows(&z, n, 2 * n)),
                    &tensor_to_matrix(&rows(&z, 2 * n, 3 * n)),
                    loss_cfg.tau,
                )?;
                if loss_cfg.mean_reduction {
                    let s = 1.0 / n as f64;
                    loss *= s;
                    d1 *= s;
                    d2 *= s;
                    d3 *= s;
                }
                check_finite(loss, step)?;
                let d = Tensor::concat(&[&matrix_to_tensor(&d1), &matrix_to_tensor(&d2), &matrix_to_tensor(&d3)])?;
                let d_emb = object.backward_f_o(&d)?;
                object.backward_trunk(&d_emb)?;
                StepMetrics {
                    step,
                    loss,
                    loss_a: Some(loss),
                    loss_b: None,
                }
            }
        };
        use crate::models::Checkpointable;
        opt_o.step(object.params_mut());
        if let Some(h) = hand.as_mut() {
            opt_h.step(h.params_mut());
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("pretrain {mode} step {step}: loss {:.4}", m.loss);
        }
        metrics.push(m);
    }
    Ok(PretrainOutput { object, hand, metrics })
}

/// Trunk embeddings of un-augmented crops, one row per crop.
pub fn extract_features(
    model: &mut ObjectModel,
    frames: &dyn FrameSource,
    crops: &[CropRef],
    norm: &Normalization,
    batch_size: usize,
) -> Result<nalgebra::DMatrix<f64>> {
    let size = model.spec.input_size;
    let d = model.spec.embed_dim;
    let mut out = nalgebra::DMatrix::zeros(crops.len(), d);
    for (b, chunk) in crops.chunks(batch_size.max(1)).enumerate() {
        let mut items = Vec::with_capacity(chunk.len());
        for c in chunk {
            let frame = frames.frame(&c.video_id, c.frame_idx)?;
            items.push(frame.resample(c.bbox.to_array(), size, size)?.to_tensor(norm));
        }
        let emb = model.encode(&Tensor::stack(&items)?, false)?;
        for (i, row) in (0..chunk.len()).enumerate() {
            let r = b * batch_size.max(1) + i;
            for (j, &v) in emb.item(row).iter().enumerate() {
                out[(r, j)] = v as f64;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcpTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub model: AcpModelSpec,
    pub acp: AcpConfig,
    pub adam: AdamConfig,
    pub normalization: Normalization,
}

impl Default for AcpTrainConfig {
    fn default() -> Self {
        AcpTrainConfig {
            steps: 500,
            batch_size: 32,
            model: AcpModelSpec::default(),
            acp: AcpConfig::default(),
            adam: AdamConfig::default(),
            normalization: Normalization::default(),
        }
    }
}

pub struct AcpTrainOutput {
    pub model: AcpModel,
    pub metrics: Vec<StepMetrics>,
    pub patches: usize,
}

/// All training patches drawn from `detections`, as `(frame index, patch)`.
pub fn acp_patch_pool(detections: &[FrameDetections], cfg: &AcpConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, PatchSpec)> {
    detections
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| sample_training_patches(f, cfg, rng).into_iter().map(move |p| (fi, p)))
        .collect()
}

/// Trains the context-prediction model on patches sampled from
/// `detections`, rendering frames from `frames`.
pub fn train_acp(frames: &dyn FrameSource, detections: &[FrameDetections], cfg: &AcpTrainConfig, seed: u64) -> Result<AcpTrainOutput> {
    cfg.acp.validate()?;
    if cfg.model.grasp_classes < 2 {
        return Err(Error::Config("grasp_classes must be >= 2".into()));
    }
    let mut model = AcpModel::new(&cfg.model, seed)?;
    let mut pool_rng = stream(seed, 11);
    let pool = acp_patch_pool(detections, &cfg.acp, &mut pool_rng);
    if pool.is_empty() {
        return Err(Error::Degenerate("no ACP training patches could be sampled".into()));
    }
    let mut rng = stream(seed, 12);
    let mut opt = Adam::new(cfg.adam.clone());
    let mut metrics = Vec::with_capacity(cfg.steps);
    let s_in = cfg.model.input_size;
    let train_grasp = !cfg.acp.no_hand_prediction;
    for step in 0..cfg.steps {
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        let mut seg_t = Vec::with_capacity(cfg.batch_size);
        let mut grasp_t = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (fi, patch) = &pool[rng.random_range(0..pool.len())];
            let fd = &detections[*fi];
            let image = frames.frame(&fd.video_id, fd.frame_idx)?;
            let sample = make_context(&image, patch, &gt_boxes(fd, &cfg.acp), s_in, &cfg.normalization, &cfg.acp)?;
            inputs.push(sample.input);
            seg_t.push(sample.seg_target);
            grasp_t.push(sample.grasp_target.filter(|t| t.len() == cfg.model.grasp_classes));
        }
        let out = model.forward(&Tensor::stack(&inputs)?, true)?;
        check_tensor(&out.seg_logits, step)?;
        let l = acp_loss(&out.seg_logits, &seg_t, &out.grasp_logits, &grasp_t, &cfg.acp)?;
        check_finite(l.total, step)?;
        let d_grasp = if train_grasp { l.d_grasp.as_ref() } else { None };
        model.backward(&l.d_seg, d_grasp)?;
        if train_grasp {
            use crate::models::Checkpointable;
            opt.step(model.params_mut());
        } else {
            opt.step(model.non_grasp_params_mut());
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            info!("acp step {step}: loss {:.4} (seg {:.4}, grasp {:.4})", l.total, l.seg, l.grasp);
        }
        metrics.push(StepMetrics {
            step,
            loss: l.total,
            loss_a: Some(l.seg),
            loss_b: Some(l.grasp),
        });
    }
    Ok(AcpTrainOutput {
        model,
        metrics,
        patches: pool.len(),
    })
}
