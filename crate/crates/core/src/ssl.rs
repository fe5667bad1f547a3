//! Semi-supervised losses: weak-view supervised cross-entropy,
//! confidence-thresholded pseudo-labeling, strong-view consistency loss
//! over the kept examples, and the mixup-blended supervised variant.
//!
//! Loss builders append to a caller-owned tape and return the loss node,
//! so a training step can sum several terms and run one backward sweep.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::augment::{mixup_with_lambda, AugmentPipeline};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, softmax_rows, Model};
use crate::tape::{NodeId, Tape, Targets};
use crate::tensor::{Batch, Tensor};

/// Pseudo-labeling outcome for one unlabeled batch. `features_strong`
/// holds the raw features the strong pipeline is applied to at loss time;
/// labels come from the weak view's softmax argmax.
#[derive(Debug, Clone)]
pub struct PseudoBatch {
    pub features_strong: Tensor,
    pub pseudo_labels: Vec<usize>,
    pub keep_mask: Vec<bool>,
    pub confidences: Vec<f64>,
}

impl PseudoBatch {
    pub fn n_total(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn n_kept(&self) -> usize {
        self.keep_mask.iter().filter(|&&k| k).count()
    }

    pub fn label_ratio(&self) -> f64 {
        if self.n_total() == 0 {
            0.0
        } else {
            self.n_kept() as f64 / self.n_total() as f64
        }
    }

    fn kept_indices(&self) -> Vec<usize> {
        (0..self.n_total()).filter(|&i| self.keep_mask[i]).collect()
    }
}

/// Per-step loss summary used by round logs.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub n_kept: usize,
    pub n_total: usize,
}

/// Gathers a batch whose every example must carry a visible label.
pub fn gather_labeled(data: &Dataset, indices: &[usize]) -> Result<Batch> {
    let features = data.features_of(indices)?;
    let labels = indices
        .iter()
        .map(|&i| {
            data.example(i)
                .visible_label()
                .ok_or_else(|| Error::domain(format!("unlabeled example {i} in a labeled batch")))
        })
        .collect::<Result<Vec<usize>>>()?;
    Batch::new(features, Some(labels))
}

/// Gathers features only; any visible labels are deliberately dropped.
pub fn gather_unlabeled(data: &Dataset, indices: &[usize]) -> Result<Batch> {
    Batch::new(data.features_of(indices)?, None)
}

/// Cross-entropy of the weakly augmented labeled batch, appended to `tape`.
pub fn supervised_loss(
    model: &mut Model,
    tape: &mut Tape,
    batch: &Batch,
    weak: &AugmentPipeline,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let labels = batch
        .labels
        .clone()
        .ok_or_else(|| Error::domain("supervised loss needs a labeled batch".to_string()))?;
    let views = weak.apply_batch(&batch.features, rng)?;
    let logits = model.forward_train(tape, &views)?;
    tape.cross_entropy(logits, Targets::Hard(labels))
}

/// Hard labels, confidences and the `conf >= tau` keep decision for each
/// row of a softmax matrix.
pub fn threshold_probs(probs: &Tensor, tau: f64) -> Result<(Vec<usize>, Vec<bool>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("tau={tau} outside [0, 1]")));
    }
    let s = probs.shape();
    if s.len() != 2 {
        return Err(Error::shape(format!("probabilities must be rank 2, got {s:?}")));
    }
    let (batch, classes) = (s[0], s[1]);
    let mut labels = Vec::with_capacity(batch);
    let mut keep = Vec::with_capacity(batch);
    let mut conf = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &probs.data()[b * classes..(b + 1) * classes];
        let best = argmax(row);
        labels.push(best);
        conf.push(row[best]);
        keep.push(row[best] >= tau);
    }
    Ok((labels, keep, conf))
}

/// Classifies the weak view in eval mode (frozen normalization statistics)
/// and keeps rows whose top softmax probability reaches `tau`.
pub fn pseudo_label(
    model: &Model,
    batch: &Batch,
    weak: &AugmentPipeline,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> Result<PseudoBatch> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("tau={tau} outside [0, 1]")));
    }
    let views = weak.apply_batch(&batch.features, rng)?;
    let probs = softmax_rows(&model.forward_eval(&views)?);
    let (pseudo_labels, keep_mask, confidences) = threshold_probs(&probs, tau)?;
    Ok(PseudoBatch {
        features_strong: batch.features.clone(),
        pseudo_labels,
        keep_mask,
        confidences,
    })
}

/// Cross-entropy of strongly augmented kept examples against their pseudo
/// labels. Returns None when nothing was kept: the loss is zero and
/// contributes no gradient, so there is no node to backpropagate.
pub fn unsupervised_loss(
    model: &mut Model,
    tape: &mut Tape,
    pseudo: &PseudoBatch,
    strong: &AugmentPipeline,
    rng: &mut ChaCha8Rng,
) -> Result<Option<NodeId>> {
    let kept = pseudo.kept_indices();
    if kept.is_empty() {
        return Ok(None);
    }
    let s = pseudo.features_strong.shape();
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(kept.len() * per);
    let mut labels = Vec::with_capacity(kept.len());
    for &i in &kept {
        data.extend_from_slice(&pseudo.features_strong.data()[i * per..(i + 1) * per]);
        labels.push(pseudo.pseudo_labels[i]);
    }
    let features = Tensor::from_vec(&[kept.len(), s[1], s[2]], data)?;
    let views = strong.apply_batch(&features, rng)?;
    let logits = model.forward_train(tape, &views)?;
    Ok(Some(tape.cross_entropy(logits, Targets::Hard(labels))?))
}

fn one_hot(label: usize, n_classes: usize) -> Result<Vec<f64>> {
    if label >= n_classes {
        return Err(Error::domain(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }
    let mut row = vec![0.0; n_classes];
    row[label] = 1.0;
    Ok(row)
}

/// Mixup-blended supervised loss with a fixed coefficient: labeled rows are
/// paired with distinct shuffled kept pseudo examples while they last, and
/// rows beyond the kept count stay unmixed. Pairing without replacement
/// bounds the reach of any one pseudo example (and its possibly wrong
/// label) to a single row per step. Features and one-hot targets blend
/// with the same lambda; the loss is soft-target cross-entropy. Falls back
/// to the plain supervised loss when nothing was kept.
pub fn mix_supervised_loss_with_lambda(
    model: &mut Model,
    tape: &mut Tape,
    batch: &Batch,
    pseudo: &PseudoBatch,
    weak: &AugmentPipeline,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let mut kept = pseudo.kept_indices();
    if kept.is_empty() {
        return supervised_loss(model, tape, batch, weak, rng);
    }
    let labels = batch
        .labels
        .clone()
        .ok_or_else(|| Error::domain("mixup loss needs a labeled batch".to_string()))?;
    let n_classes = model.spec().n_classes;
    let views = weak.apply_batch(&batch.features, rng)?;
    kept.shuffle(rng);

    let s = views.shape();
    let (b, n_mels, n_frames) = (s[0], s[1], s[2]);
    let per = n_mels * n_frames;
    let ps = pseudo.features_strong.shape();
    if ps[1] != n_mels || ps[2] != n_frames {
        return Err(Error::shape(format!(
            "labeled features {:?} vs pseudo features {:?}",
            s, ps
        )));
    }
    let mut mixed = Vec::with_capacity(b * per);
    let mut targets = Vec::with_capacity(b * n_classes);
    for i in 0..b {
        let xl = Tensor::from_vec(&[n_mels, n_frames], views.data()[i * per..(i + 1) * per].to_vec())?;
        let yl = one_hot(labels[i], n_classes)?;
        let (xm, ym) = match kept.get(i) {
            Some(&j) => {
                let xu = Tensor::from_vec(
                    &[n_mels, n_frames],
                    pseudo.features_strong.data()[j * per..(j + 1) * per].to_vec(),
                )?;
                let yu = one_hot(pseudo.pseudo_labels[j], n_classes)?;
                mixup_with_lambda(&xl, &xu, &yl, &yu, lambda)?
            }
            None => (xl, yl),
        };
        mixed.extend_from_slice(xm.data());
        targets.extend_from_slice(&ym);
    }
    let features = Tensor::from_vec(&[b, n_mels, n_frames], mixed)?;
    let q = Tensor::from_vec(&[b, n_classes], targets)?;
    let logits = model.forward_train(tape, &features)?;
    tape.cross_entropy(logits, Targets::Soft(q))
}

/// Draws lambda from Beta(beta_param, beta_param) folded to [0.5, 1] and
/// builds the blended loss.
pub fn mix_supervised_loss(
    model: &mut Model,
    tape: &mut Tape,
    batch: &Batch,
    pseudo: &PseudoBatch,
    weak: &AugmentPipeline,
    beta_param: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    let beta = Beta::new(beta_param, beta_param)
        .map_err(|e| Error::domain(format!("bad beta parameter {beta_param}: {e}")))?;
    let raw: f64 = beta.sample(rng);
    let lambda = raw.max(1.0 - raw);
    mix_supervised_loss_with_lambda(model, tape, batch, pseudo, weak, lambda, rng)
}
