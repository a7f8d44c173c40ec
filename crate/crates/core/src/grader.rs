//! Training machinery for one patch-local grading model: grading targets,
//! Mixup augmentation, MAE loss and the early-stopped Adam loop.
//!
//! Targets follow the sign convention grade +1 = diseased, -1 = healthy,
//! 0 = outside the intracranial cavity; training draws one AD/CN pair per
//! step, jitters the crop position by one voxel and mixes the pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ClassLabel;
use crate::metrics::bacc;
use crate::optim::{AdamParams, AdamState};
use crate::patch::{extract_mask_patch, extract_patch, jitter_origin};
use crate::rng::{derive_seed, Rng};
use crate::unet::{GradingModel, UnetArch, UnetGrads};
use crate::volume::Volume3D;

/// One training example for a grading model.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub intensity: Vec<f32>,
    pub target: Vec<f32>,
    /// Mixing coefficient if this sample came out of [`mixup`].
    pub mix_alpha: Option<f64>,
}

/// Optimization settings for grading-model training.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: 20,
            batch_size: 1,
            max_epochs: 12,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::config("learning rate and epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.patience == 0 || self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("patience, max_epochs and batch_size must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Grading target: +1 inside ICC for an AD subject, -1 inside ICC for a CN
/// subject, 0 outside ICC. Only AD/CN are trainable classes.
pub fn make_target(class: ClassLabel, icc_patch: &[bool]) -> Result<Vec<f32>> {
    let grade = match class {
        ClassLabel::Ad => 1.0f32,
        ClassLabel::Cn => -1.0f32,
        other => {
            return Err(Error::config(format!(
                "grading targets are defined for AD/CN training only, got {other}"
            )))
        }
    };
    Ok(icc_patch.iter().map(|&m| if m { grade } else { 0.0 }).collect())
}

/// Mixup with alpha ~ Beta(0.3, 0.3): convex combination of an AD and a CN
/// sample (inputs and targets alike).
pub fn mixup(s1: &TrainSample, s2: &TrainSample, rng: &mut Rng) -> Result<TrainSample> {
    let alpha = rng.beta(0.3, 0.3);
    mixup_with_alpha(s1, s2, alpha)
}

pub fn mixup_with_alpha(s1: &TrainSample, s2: &TrainSample, alpha: f64) -> Result<TrainSample> {
    if s1.intensity.len() != s2.intensity.len() || s1.target.len() != s2.target.len() {
        return Err(Error::data("mixup requires samples of identical dims"));
    }
    let a = alpha as f32;
    let intensity = s1
        .intensity
        .iter()
        .zip(&s2.intensity)
        .map(|(&x1, &x2)| a * x1 + (1.0 - a) * x2)
        .collect();
    let target = s1
        .target
        .iter()
        .zip(&s2.target)
        .map(|(&y1, &y2)| a * y1 + (1.0 - a) * y2)
        .collect();
    Ok(TrainSample {
        intensity,
        target,
        mix_alpha: Some(alpha),
    })
}

/// Mean absolute error over all voxels.
pub fn mae_loss(pred: &[f32], target: &[f32]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::data("MAE operands differ in length"));
    }
    if pred.is_empty() {
        return Err(Error::data("MAE of empty tensors"));
    }
    let mut acc = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        acc += (p as f64 - t as f64).abs();
    }
    Ok(acc / pred.len() as f64)
}

/// MAE and its gradient w.r.t. the prediction (subgradient 0 at ties).
pub fn mae_loss_grad(pred: &[f32], target: &[f32]) -> Result<(f64, Vec<f32>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::data("MAE operands differ in length or are empty"));
    }
    let n = pred.len() as f64;
    let mut acc = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    let g = (1.0 / n) as f32;
    for (&p, &t) in pred.iter().zip(target) {
        let e = p as f64 - t as f64;
        acc += e.abs();
        grad.push(if e > 0.0 {
            g
        } else if e < 0.0 {
            -g
        } else {
            0.0
        });
    }
    Ok((acc / n, grad))
}

/// Early stopping on strict validation-loss improvement.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    pub best_loss: f64,
    pub best_epoch: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best_loss: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Record the epoch's validation loss. Returns (improved, stop).
    pub fn update(&mut self, epoch: usize, loss: f64) -> (bool, bool) {
        let improved = loss < self.best_loss;
        if improved {
            self.best_loss = loss;
            self.best_epoch = epoch;
        }
        let stop = epoch - self.best_epoch >= self.patience;
        (improved, stop)
    }
}

/// One subject prepared for grading-model training: intensities and ICC mask
/// at grading resolution.
#[derive(Clone, Debug)]
pub struct GraderSubject {
    pub id: String,
    pub class: ClassLabel,
    pub volume: Volume3D,
    pub icc: Vec<bool>,
}

/// Class-balanced 80/20 split over arbitrary binary labels. Both classes
/// are truncated to the smaller count so train and validation stay balanced.
pub fn balanced_split_indices(
    is_positive: &[bool],
    rng: &mut Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pos: Vec<usize> = (0..is_positive.len()).filter(|&i| is_positive[i]).collect();
    let mut neg: Vec<usize> = (0..is_positive.len()).filter(|&i| !is_positive[i]).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::data(format!(
            "degenerate cohort: {} positive / {} negative subjects (need >= 2 of each)",
            pos.len(),
            neg.len()
        )));
    }
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);
    let n = pos.len().min(neg.len());
    let n_train = ((0.8 * n as f64).floor() as usize).clamp(1, n - 1);
    let mut train = Vec::with_capacity(2 * n_train);
    let mut val = Vec::with_capacity(2 * (n - n_train));
    train.extend_from_slice(&pos[..n_train]);
    train.extend_from_slice(&neg[..n_train]);
    val.extend_from_slice(&pos[n_train..n]);
    val.extend_from_slice(&neg[n_train..n]);
    Ok((train, val))
}

/// [`balanced_split_indices`] keyed on the AD/CN class of grader subjects.
pub fn balanced_split(cohort: &[GraderSubject], rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let flags: Vec<bool> = cohort.iter().map(|s| s.class == ClassLabel::Ad).collect();
    balanced_split_indices(&flags, rng)
}

/// Outcome bookkeeping for one trained patch model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub alpha: f64,
}

fn subject_sample(
    subj: &GraderSubject,
    origin: (usize, usize, usize),
    patch_dims: (usize, usize, usize),
) -> Result<TrainSample> {
    let patch = extract_patch(&subj.volume, origin, patch_dims)?;
    let mask = extract_mask_patch(subj.volume.dims(), &subj.icc, origin, patch_dims)?;
    Ok(TrainSample {
        intensity: patch.data().to_vec(),
        target: make_target(subj.class, &mask)?,
        mix_alpha: None,
    })
}

fn validation_loss(
    model: &GradingModel,
    cohort: &[GraderSubject],
    val: &[usize],
    origin: (usize, usize, usize),
) -> Result<f64> {
    let mut acc = 0.0f64;
    for &i in val {
        let s = subject_sample(&cohort[i], origin, model.patch_dims)?;
        let pred = model.forward(&s.intensity)?;
        acc += mae_loss(&pred, &s.target)?;
    }
    Ok(acc / val.len() as f64)
}

/// Mean grade over ICC voxels of the patch; 0 if the patch holds no ICC.
pub fn patch_mean_grade(pred: &[f32], icc_patch: &[bool]) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (&p, &m) in pred.iter().zip(icc_patch) {
        if m {
            acc += p as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Validation weight: balanced accuracy of "predict AD iff the mean ICC
/// grade inside the patch is positive".
fn validation_alpha(
    model: &GradingModel,
    cohort: &[GraderSubject],
    val: &[usize],
    origin: (usize, usize, usize),
) -> Result<f64> {
    let mut labels = Vec::with_capacity(val.len());
    let mut preds = Vec::with_capacity(val.len());
    for &i in val {
        let subj = &cohort[i];
        let s = subject_sample(subj, origin, model.patch_dims)?;
        let mask = extract_mask_patch(subj.volume.dims(), &subj.icc, origin, model.patch_dims)?;
        let pred = model.forward(&s.intensity)?;
        labels.push(subj.class == ClassLabel::Ad);
        preds.push(patch_mean_grade(&pred, &mask) > 0.0);
    }
    bacc(&labels, &preds)
}

/// Train the grading model for one patch location.
///
/// A fresh class-balanced 80/20 split is drawn from a seed derived from
/// (config seed, location); each step samples one AD and one CN subject,
/// jitters both crop origins, mixes the pair and applies one single-sample
/// Adam update. Training stops after `patience` epochs without validation
/// improvement and the best-validation weights are returned together with
/// the fusion weight alpha.
pub fn train_patch_model(
    location: usize,
    origin: (usize, usize, usize),
    patch_dims: (usize, usize, usize),
    cohort: &[GraderSubject],
    init: Option<&GradingModel>,
    arch: UnetArch,
    cfg: &TrainConfig,
) -> Result<(GradingModel, TrainStats)> {
    cfg.validate()?;
    let vol_dims = cohort
        .first()
        .ok_or_else(|| Error::data("empty cohort"))?
        .volume
        .dims();
    let model_seed = derive_seed(cfg.seed, "patch-model", location as u64);
    let mut split_rng = Rng::seed_from_u64(derive_seed(cfg.seed, "patch-split", location as u64));
    let (train_idx, val_idx) = balanced_split(cohort, &mut split_rng)?;
    let train_ad: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| cohort[i].class == ClassLabel::Ad)
        .collect();
    let train_cn: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| cohort[i].class == ClassLabel::Cn)
        .collect();

    let mut model = match init {
        Some(parent) => {
            let mut m = parent.clone();
            m.seed = model_seed;
            m
        }
        None => GradingModel::init(arch, patch_dims, model_seed)?,
    };
    if model.patch_dims != patch_dims {
        return Err(Error::config("transfer init has mismatched patch dims"));
    }

    let adam = cfg.adam();
    let mut states: Vec<(AdamState, AdamState)> = model
        .layers
        .iter()
        .map(|l| (AdamState::new(l.w.len()), AdamState::new(l.b.len())))
        .collect();
    let mut sample_rng = Rng::seed_from_u64(derive_seed(cfg.seed, "patch-sample", location as u64));

    let steps_per_epoch = train_idx.len();
    let mut stopper = EarlyStop::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut step = 0usize;
        while step < steps_per_epoch {
            let batch = cfg.batch_size.min(steps_per_epoch - step);
            let mut grads: Option<UnetGrads> = None;
            for _ in 0..batch {
                let ad = &cohort[train_ad[sample_rng.below(train_ad.len())]];
                let cn = &cohort[train_cn[sample_rng.below(train_cn.len())]];
                let o1 = jitter_origin(origin, patch_dims, vol_dims, &mut sample_rng);
                let o2 = jitter_origin(origin, patch_dims, vol_dims, &mut sample_rng);
                let s1 = subject_sample(ad, o1, patch_dims)?;
                let s2 = subject_sample(cn, o2, patch_dims)?;
                let mixed = mixup(&s1, &s2, &mut sample_rng)?;
                let cache = model.forward_cached(&mixed.intensity)?;
                let (loss, d_out) = mae_loss_grad(&cache.output, &mixed.target)?;
                if !loss.is_finite() {
                    return Err(Error::numeric(format!("non-finite training loss at patch {location}")));
                }
                let (g, _) = model.backward(&mixed.intensity, &cache, &d_out);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.w.iter_mut().zip(&b.w) {
                                *x += y;
                            }
                            for (x, y) in a.b.iter_mut().zip(&b.b) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grads.expect("batch is nonempty");
            if batch > 1 {
                let inv = 1.0 / batch as f32;
                for g in &mut grads {
                    for x in &mut g.w {
                        *x *= inv;
                    }
                    for x in &mut g.b {
                        *x *= inv;
                    }
                }
            }
            for (layer, (g, (sw, sb))) in model
                .layers
                .iter_mut()
                .zip(grads.iter().zip(states.iter_mut()))
            {
                sw.step(&adam, &mut layer.w, &g.w);
                sb.step(&adam, &mut layer.b, &g.b);
            }
            step += batch;
        }

        let val_loss = validation_loss(&model, cohort, &val_idx, origin)?;
        let (improved, stop) = stopper.update(epoch, val_loss);
        if improved {
            best = model.clone();
        }
        if stop {
            break;
        }
    }

    let alpha = validation_alpha(&best, cohort, &val_idx, origin)?;
    let stats = TrainStats {
        epochs_run,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        alpha,
    };
    Ok((best, stats))
}

/// Train one shared model on samples pooled from every patch location.
///
/// Each step draws a location uniformly, then proceeds exactly like the
/// per-location loop. Validation (loss and the weight alpha) averages over
/// all locations so the budget per epoch matches a collective member.
pub fn train_pooled_model(
    origins: &[(usize, usize, usize)],
    patch_dims: (usize, usize, usize),
    cohort: &[GraderSubject],
    arch: UnetArch,
    cfg: &TrainConfig,
) -> Result<(GradingModel, TrainStats)> {
    cfg.validate()?;
    if origins.is_empty() {
        return Err(Error::config("pooled training needs at least one origin"));
    }
    let vol_dims = cohort
        .first()
        .ok_or_else(|| Error::data("empty cohort"))?
        .volume
        .dims();
    let mut split_rng = Rng::seed_from_u64(derive_seed(cfg.seed, "pooled-split", 0));
    let (train_idx, val_idx) = balanced_split(cohort, &mut split_rng)?;
    let train_ad: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| cohort[i].class == ClassLabel::Ad)
        .collect();
    let train_cn: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| cohort[i].class == ClassLabel::Cn)
        .collect();

    let mut model = GradingModel::init(arch, patch_dims, derive_seed(cfg.seed, "pooled-model", 0))?;
    let adam = cfg.adam();
    let mut states: Vec<(AdamState, AdamState)> = model
        .layers
        .iter()
        .map(|l| (AdamState::new(l.w.len()), AdamState::new(l.b.len())))
        .collect();
    let mut sample_rng = Rng::seed_from_u64(derive_seed(cfg.seed, "pooled-sample", 0));

    let mut stopper = EarlyStop::new(cfg.patience);
    let mut best = model.clone();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        for _ in 0..train_idx.len() {
            let origin = origins[sample_rng.below(origins.len())];
            let ad = &cohort[train_ad[sample_rng.below(train_ad.len())]];
            let cn = &cohort[train_cn[sample_rng.below(train_cn.len())]];
            let o1 = jitter_origin(origin, patch_dims, vol_dims, &mut sample_rng);
            let o2 = jitter_origin(origin, patch_dims, vol_dims, &mut sample_rng);
            let s1 = subject_sample(ad, o1, patch_dims)?;
            let s2 = subject_sample(cn, o2, patch_dims)?;
            let mixed = mixup(&s1, &s2, &mut sample_rng)?;
            let cache = model.forward_cached(&mixed.intensity)?;
            let (loss, d_out) = mae_loss_grad(&cache.output, &mixed.target)?;
            if !loss.is_finite() {
                return Err(Error::numeric("non-finite pooled training loss"));
            }
            let (grads, _) = model.backward(&mixed.intensity, &cache, &d_out);
            for (layer, (g, (sw, sb))) in model
                .layers
                .iter_mut()
                .zip(grads.iter().zip(states.iter_mut()))
            {
                sw.step(&adam, &mut layer.w, &g.w);
                sb.step(&adam, &mut layer.b, &g.b);
            }
        }
        let mut val_loss = 0.0f64;
        for &o in origins {
            val_loss += validation_loss(&model, cohort, &val_idx, o)?;
        }
        val_loss /= origins.len() as f64;
        let (improved, stop) = stopper.update(epoch, val_loss);
        if improved {
            best = model.clone();
        }
        if stop {
            break;
        }
    }

    // alpha pools the patch-rule decisions over (subject, location) pairs
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for &o in origins {
        for &i in &val_idx {
            let subj = &cohort[i];
            let s = subject_sample(subj, o, patch_dims)?;
            let mask = extract_mask_patch(subj.volume.dims(), &subj.icc, o, patch_dims)?;
            let pred = best.forward(&s.intensity)?;
            labels.push(subj.class == ClassLabel::Ad);
            preds.push(patch_mean_grade(&pred, &mask) > 0.0);
        }
    }
    let alpha = bacc(&labels, &preds)?;
    let stats = TrainStats {
        epochs_run,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        alpha,
    };
    Ok((best, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_rules() {
        let all = vec![true; 8];
        let t = make_target(ClassLabel::Ad, &all).unwrap();
        assert!(t.iter().all(|&v| v == 1.0));

        let none = vec![false; 8];
        let t = make_target(ClassLabel::Cn, &none).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));

        let half: Vec<bool> = (0..8).map(|i| i < 4).collect();
        let t = make_target(ClassLabel::Ad, &half).unwrap();
        assert_eq!(&t[..4], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(&t[4..], &[0.0, 0.0, 0.0, 0.0]);

        assert!(make_target(ClassLabel::Smci, &all).is_err());
        assert!(make_target(ClassLabel::Pmci, &all).is_err());
    }

    fn sample(vals: &[f32], tgt: &[f32]) -> TrainSample {
        TrainSample {
            intensity: vals.to_vec(),
            target: tgt.to_vec(),
            mix_alpha: None,
        }
    }

    #[test]
    fn mixup_identity_and_midpoint() {
        let s1 = sample(&[1.0, 2.0], &[1.0, 1.0]);
        let s2 = sample(&[-1.0, 0.0], &[-1.0, -1.0]);
        let m = mixup_with_alpha(&s1, &s2, 1.0).unwrap();
        assert_eq!(m.intensity, s1.intensity);
        assert_eq!(m.target, s1.target);

        let m = mixup_with_alpha(&s1, &s2, 0.5).unwrap();
        assert_eq!(m.target, vec![0.0, 0.0]);
    }

    #[test]
    fn mixup_dim_mismatch_errors() {
        let s1 = sample(&[1.0, 2.0], &[1.0, 1.0]);
        let s2 = sample(&[1.0], &[1.0]);
        assert!(mixup_with_alpha(&s1, &s2, 0.5).is_err());
    }

    #[test]
    fn mixup_stays_convex() {
        let mut rng = Rng::seed_from_u64(8);
        let s1 = sample(&[0.3, -0.4, 0.9], &[1.0, 1.0, 0.0]);
        let s2 = sample(&[-0.1, 0.2, 0.4], &[-1.0, 0.0, 0.0]);
        for _ in 0..200 {
            let m = mixup(&s1, &s2, &mut rng).unwrap();
            let a = m.mix_alpha.unwrap();
            assert!((0.0..=1.0).contains(&a));
            for i in 0..3 {
                let lo = s1.target[i].min(s2.target[i]);
                let hi = s1.target[i].max(s2.target[i]);
                assert!(m.target[i] >= lo - 1e-6 && m.target[i] <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn mae_cases() {
        assert_eq!(mae_loss(&[0.5, -0.5], &[0.5, -0.5]).unwrap(), 0.0);
        assert_eq!(mae_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae_loss(&[0.5, -0.5], &[1.0, -1.0]).unwrap(), 0.5);
        assert!(mae_loss(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn mae_grad_signs_and_kink() {
        let (loss, g) = mae_loss_grad(&[2.0, -1.0, 0.5], &[1.0, 1.0, 0.5]).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
        assert_eq!(g, vec![1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn early_stop_patience_semantics() {
        let mut es = EarlyStop::new(3);
        // strictly improving: never stops
        for (epoch, loss) in (1..=10).map(|e| (e, 1.0 / e as f64)) {
            let (improved, stop) = es.update(epoch, loss);
            assert!(improved);
            assert!(!stop);
        }
        // stagnation for `patience` epochs stops
        let mut es = EarlyStop::new(3);
        es.update(1, 1.0);
        assert!(!es.update(2, 1.0).1);
        assert!(!es.update(3, 1.5).1);
        assert!(es.update(4, 1.2).1);
        assert_eq!(es.best_epoch, 1);
    }

    fn toy_cohort(n_per_class: usize, contrast: f32) -> Vec<GraderSubject> {
        // AD subjects carry a dark corner blob; CN subjects are flat
        let dims = (6, 6, 6);
        let mut out = Vec::new();
        let mut rng = Rng::seed_from_u64(1234);
        for class in [ClassLabel::Ad, ClassLabel::Cn] {
            for i in 0..n_per_class {
                let mut data = vec![0.5f32; 216];
                if class == ClassLabel::Ad {
                    for z in 0..3 {
                        for y in 0..3 {
                            for x in 0..3 {
                                data[x + 6 * (y + 6 * z)] -= contrast;
                            }
                        }
                    }
                }
                for v in &mut data {
                    *v += rng.normal() as f32 * 0.02;
                }
                out.push(GraderSubject {
                    id: format!("{class}-{i}"),
                    class,
                    volume: Volume3D::new(dims, (1.0, 1.0, 1.0), data).unwrap(),
                    icc: vec![true; 216],
                });
            }
        }
        out
    }

    #[test]
    fn training_is_deterministic() {
        let cohort = toy_cohort(3, 0.4);
        let arch = UnetArch {
            base_channels: 2,
            ..UnetArch::default()
        };
        let cfg = TrainConfig {
            max_epochs: 2,
            seed: 7,
            ..TrainConfig::default()
        };
        let (m1, s1) = train_patch_model(0, (1, 1, 1), (4, 4, 4), &cohort, None, arch, &cfg).unwrap();
        let (m2, s2) = train_patch_model(0, (1, 1, 1), (4, 4, 4), &cohort, None, arch, &cfg).unwrap();
        assert_eq!(m1.weight_hash(), m2.weight_hash());
        assert_eq!(s1.alpha, s2.alpha);
        // a different location re-splits and re-samples
        let (m3, _) = train_patch_model(1, (1, 1, 1), (4, 4, 4), &cohort, None, arch, &cfg).unwrap();
        assert_ne!(m1.weight_hash(), m3.weight_hash());
    }

    #[test]
    fn training_learns_strong_signal() {
        let cohort = toy_cohort(5, 0.6);
        let arch = UnetArch {
            base_channels: 4,
            ..UnetArch::default()
        };
        let cfg = TrainConfig {
            max_epochs: 30,
            seed: 3,
            ..TrainConfig::default()
        };
        let (model, stats) =
            train_patch_model(0, (0, 0, 0), (6, 6, 6), &cohort, None, arch, &cfg).unwrap();
        assert!(stats.alpha > 0.5, "alpha = {}", stats.alpha);
        // the AD pattern grades positive on average
        let ad = &cohort[0];
        let pred = model.forward(ad.volume.data()).unwrap();
        let mean = patch_mean_grade(&pred, &ad.icc);
        assert!(mean > 0.0, "mean grade {mean}");
    }

    #[test]
    fn degenerate_cohort_is_error() {
        let cohort = toy_cohort(1, 0.4);
        let cfg = TrainConfig::default();
        let err = train_patch_model(
            0,
            (0, 0, 0),
            (4, 4, 4),
            &cohort,
            None,
            UnetArch::default(),
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        let model = GradingModel::init(UnetArch::default(), (4, 4, 4), 5).unwrap();
        let input: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let cache = model.forward_cached(&input).unwrap();
        let target = cache.output.clone();
        let (loss, d_out) = mae_loss_grad(&cache.output, &target).unwrap();
        assert_eq!(loss, 0.0);
        let (grads, _) = model.backward(&input, &cache, &d_out);
        for g in &grads {
            assert!(g.w.iter().all(|&x| x == 0.0));
            assert!(g.b.iter().all(|&x| x == 0.0));
        }
    }
}
