#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stam/data_io.hpp"
#include "stam/errors.hpp"
#include "stam/model.hpp"
#include "stam/rng.hpp"
#include "stam/tensor.hpp"

namespace stam {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  int batch_size = 4;
  int epochs = 10;

  void validate() const;
};

/// One supervised example: tracklets built from T consecutive frames and the
/// detections of the following frame. Rows and columns of gt_assignment are
/// one-hot or all-zero; loss_mask selects the entries the loss averages over.
struct TrainingSample {
  std::vector<TrackletInput<float>> tracklets;  // ascending id order
  std::vector<int64_t> tracklet_ids;
  DetectionsInput<float> detections;
  std::vector<int64_t> detection_ids;  // 0 marks a distractor
  TensorF gt_assignment;               // N x M in {0, 1}
  Tensor<uint8_t> loss_mask;           // N x M, 1 = scored

  bool usable() const {
    return !tracklets.empty() && detections.geoms.rows() > 0;
  }
};

/// Transfers gt identities onto detector boxes: per frame, optimal matching on
/// 1 - IoU restricted to pairs with IoU >= iou_min. Matched boxes inherit the
/// gt id, leftover detector boxes become distractors (id 0), leftover gt boxes
/// are dropped.
std::vector<MotRecord> replace_gt_with_detections(const std::vector<MotRecord>& gt,
                                                  const std::vector<MotRecord>& det,
                                                  double iou_min = 0.5);

/// Builds the sample for the window [start_frame, start_frame + window_T - 1]
/// with detections taken from start_frame + window_T. Tracklets come from ids
/// observed inside the window; detections whose id is unseen there (or 0) get
/// all-zero target columns. loss_mask starts all-ones.
TrainingSample sample_window(const std::vector<MotRecord>& labeled,
                             const AppearanceProvider& appearance, const SequenceMeta& meta,
                             int window_T, int start_frame, bool include_distractors = true);

/// Independently removes tracklet observations with probability drop_prob,
/// never emptying a tracklet. Targets are unchanged.
TrainingSample augment_drop(TrainingSample sample, double drop_prob, Rng& rng);

/// Keeps every positive and a uniform subsample of min(#neg, ceil(r * #pos))
/// negatives (one negative when there are no positives).
Tensor<uint8_t> downsample_negatives(const TensorF& gt_assignment, double ratio, Rng& rng);

/// Mean binary cross-entropy over unmasked entries, probabilities clamped to
/// [1e-7, 1 - 1e-7]. Plain mirror of the differentiable tape op.
double bce_loss(const TensorF& probs, const TensorF& gt, const Tensor<uint8_t>& mask);

struct SgdState {
  std::vector<TensorF> velocity;  // aligned with ModelParams.values
};

/// v <- momentum * v + g + weight_decay * p; p <- p - lr * v. A non-finite
/// gradient aborts the step naming the offending block.
void sgd_step(ModelParams& params, const std::vector<TensorF>& grads, SgdState& state,
              const OptimizerConfig& cfg);

/// Loss and parameter gradients of one sample under the masked BCE.
double sample_gradients(const ModelParams& params, const TrainingSample& sample,
                        std::vector<TensorF>& grads);

/// One labeled sequence: detector boxes carrying gt ids (0 = distractor).
struct TrainSequence {
  SequenceMeta meta;
  std::vector<MotRecord> labeled;
  AppearanceProvider appearance;
};

struct LossPoint {
  int epoch = 0;
  int step = 0;
  double loss = 0.0;
};

struct TrainOptions {
  OptimizerConfig optimizer;
  double drop_prob = 0.1;
  double negative_ratio = 1.0;
  double distractor_keep = 0.5;  // chance a sample keeps its distractor columns
  int windows_per_epoch = 48;    // sampled with replacement across sequences
  std::string checkpoint_dir;    // per-epoch checkpoints when non-empty
  std::string loss_csv;          // epoch,step,loss rows when non-empty

  void validate() const;
};

struct TrainResult {
  ModelParams params;
  std::vector<LossPoint> curve;
};

/// Full deterministic run: fresh parameters, shuffled window samples in
/// batches with averaged gradients, one optimizer step per batch.
TrainResult train(const std::vector<TrainSequence>& dataset, const ModelConfig& model_cfg,
                  const TrainOptions& opt, uint64_t seed);

void write_loss_csv(const std::vector<LossPoint>& curve, const std::string& path);

}  // namespace stam
