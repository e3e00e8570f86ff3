//! Training loop and evaluation on synthetic clips.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DnmError, Mode, Model, ModelConfig};
use crate::annotation::DatasetIndex;
use crate::metrics::{evaluate, Heatmap, HeatmapSet, MetricsReport};
use crate::synth::{augment_video, make_negative_pair, ClipSample};
use crate::tensor::{Adam, Gradients, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Pairs per Adam step; gradients are averaged over the batch.
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Random flip and resized crop on training video.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            lr: 3e-3,
            seed: 0,
            augment: true,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss over the epoch's pairs.
    pub loss: f64,
    /// Fraction of pairs with `z_avc > 0.5` exactly when the pair corresponds.
    pub avc_accuracy: f64,
    /// Fraction of positive pairs whose top logit is one of the clip's labels.
    pub cls_accuracy: f64,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f64>,
    pub log: Vec<EpochLog>,
}

struct Pair<'a> {
    clip: &'a ClipSample,
    logmel: Tensor<f64>,
    positive: bool,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub(crate) fn top_logit_hits(logits: &[f64], labels: u32) -> bool {
    let mut best = 0;
    for (k, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = k;
        }
    }
    labels >> best & 1 == 1
}

/// Trains a fresh model on `clips`.
///
/// Each epoch pairs every event clip with its own audio and with the audio of
/// another clip drawn from the whole set, shuffles the pairs and takes one
/// Adam step per batch. Classification-only training skips the negatives,
/// whose loss would be identically zero.
pub fn train(clips: &[ClipSample], config: ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome, DnmError> {
    let model = Model::new(config, tc.seed)?;
    train_model(model, clips, tc)
}

/// Continues training `model` on `clips`.
pub fn train_model(mut model: Model<f64>, clips: &[ClipSample], tc: &TrainConfig) -> Result<TrainOutcome, DnmError> {
    if clips.len() < 2 {
        return Err(DnmError::DatasetTooSmall(clips.len()));
    }
    let positives: Vec<&ClipSample> = clips.iter().filter(|c| c.avc_positive).collect();
    if positives.is_empty() {
        return Err(DnmError::NoPositives);
    }
    if tc.batch_size == 0 {
        return Err(DnmError::Config("batch_size must be at least 1".into()));
    }
    let mode = model.config().mode;
    let classes = model.config().num_classes;
    let adam = Adam::new(tc.lr);
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let mut rng = epoch_rng(tc.seed, epoch);
        let mut pairs = Vec::with_capacity(2 * positives.len());
        for &clip in &positives {
            pairs.push(Pair {
                clip,
                logmel: clip.logmel.cast(),
                positive: true,
            });
            if mode != Mode::Cls {
                let neg = make_negative_pair(clip, clips, &mut rng).map_err(|_| DnmError::DatasetTooSmall(clips.len()))?;
                pairs.push(Pair {
                    clip,
                    logmel: neg.logmel.cast(),
                    positive: false,
                });
            }
        }
        pairs.shuffle(&mut rng);

        let (mut loss_sum, mut avc_hits, mut cls_hits) = (0.0, 0usize, 0usize);
        for batch in pairs.chunks(tc.batch_size) {
            let mut grads = Gradients::new();
            for pair in batch {
                let video = if tc.augment {
                    augment_video(&pair.clip.video, &mut rng).cast()
                } else {
                    pair.clip.video.cast()
                };
                let labels = pair.clip.label_vector(classes);
                let (loss, g, out) = model.loss_and_grads(&video, &pair.logmel, pair.positive, Some(&labels), mode)?;
                loss_sum += loss;
                grads.merge(&g);
                if (out.z_avc > 0.5) == pair.positive {
                    avc_hits += 1;
                }
                if pair.positive && top_logit_hits(&out.class_logits, pair.clip.labels) {
                    cls_hits += 1;
                }
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model.params_mut(), &grads)?;
        }

        let n = pairs.len();
        let entry = EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / n as f64,
            avc_accuracy: avc_hits as f64 / n as f64,
            cls_accuracy: cls_hits as f64 / positives.len() as f64,
            positives: positives.len(),
            negatives: n - positives.len(),
        };
        log::info!(
            "epoch {}: loss {:.4} avc {:.3} cls {:.3}",
            entry.epoch,
            entry.loss,
            entry.avc_accuracy,
            entry.cls_accuracy
        );
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Scores of a trained model on held-out clips.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// Over every event clip paired with its own audio and with one other
    /// clip's audio.
    pub avc_accuracy: f64,
    /// Over event clips only; `None` without any.
    pub cls_accuracy: Option<f64>,
    /// The localization map of each clip, repeated for each of its frames.
    pub heatmaps: HeatmapSet,
    pub report: MetricsReport,
}

/// Runs `model` over `clips`. Negatives for the correspondence accuracy come
/// from a stream seeded by `seed`. Heatmaps are stored as `f32` before the
/// metrics see them, so the report matches one computed from a heatmap file.
pub fn evaluate_model(model: &Model<f64>, clips: &[ClipSample], seed: u64) -> Result<EvalSummary, DnmError> {
    let c = model.config();
    let mode = c.mode;
    let mut rng = epoch_rng(seed, usize::MAX - 1);
    let mut heatmaps = HeatmapSet::new();
    let mut frames = Vec::new();
    let (mut avc_hits, mut avc_total, mut cls_hits, mut events) = (0usize, 0usize, 0usize, 0usize);
    for clip in clips {
        let video: Tensor<f64> = clip.video.cast();
        let out = model.forward(&video, &clip.logmel.cast())?;
        let values: Vec<f32> = out.localization(mode).iter().map(|&v| v as f32).collect();
        let map = Heatmap::new(c.grid_w, c.grid_h, values)?;
        for ann in &clip.annotations {
            heatmaps.insert(ann.video_id.clone(), ann.frame_index, map.clone());
            frames.push(ann.clone());
        }
        if clip.avc_positive {
            events += 1;
            avc_total += 2;
            avc_hits += (out.z_avc > 0.5) as usize;
            if top_logit_hits(&out.class_logits, clip.labels) {
                cls_hits += 1;
            }
            if clips.len() >= 2 {
                let neg = make_negative_pair(clip, clips, &mut rng).map_err(|_| DnmError::DatasetTooSmall(clips.len()))?;
                let neg_out = model.forward(&video, &neg.logmel.cast())?;
                avc_hits += (neg_out.z_avc <= 0.5) as usize;
            } else {
                avc_total -= 1;
            }
        }
    }
    let index = DatasetIndex::from_frames(frames);
    let report = evaluate(&index, &heatmaps, c.grid_w, c.grid_h)?;
    Ok(EvalSummary {
        avc_accuracy: if avc_total == 0 {
            0.0
        } else {
            avc_hits as f64 / avc_total as f64
        },
        cls_accuracy: (events > 0).then(|| cls_hits as f64 / events as f64),
        heatmaps,
        report,
    })
}
