#include "stam/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <utility>

#include "stam/association.hpp"
#include "stam/checkpoint.hpp"
#include "stam/geometry.hpp"
#include "stam/tape.hpp"

namespace stam {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ContractError("optimizer: learning_rate must be positive");
  if (weight_decay < 0.0) throw ContractError("optimizer: weight_decay must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ContractError("optimizer: momentum must lie in [0, 1)");
  if (batch_size < 1) throw ContractError("optimizer: batch_size must be >= 1");
  if (epochs < 1) throw ContractError("optimizer: epochs must be >= 1");
}

void TrainOptions::validate() const {
  optimizer.validate();
  if (drop_prob < 0.0 || drop_prob >= 1.0) throw ContractError("train: drop_prob must lie in [0, 1)");
  if (!(negative_ratio > 0.0)) throw ContractError("train: negative_ratio must be positive");
  if (distractor_keep < 0.0 || distractor_keep > 1.0) {
    throw ContractError("train: distractor_keep must lie in [0, 1]");
  }
  if (windows_per_epoch < 1) throw ContractError("train: windows_per_epoch must be >= 1");
}

std::vector<MotRecord> replace_gt_with_detections(const std::vector<MotRecord>& gt,
                                                  const std::vector<MotRecord>& det,
                                                  double iou_min) {
  if (!(iou_min > 0.0 && iou_min < 1.0)) {
    throw ContractError("replace_gt_with_detections: iou_min must lie in (0, 1)");
  }
  std::map<int, std::vector<const MotRecord*>> gt_by_frame, det_by_frame;
  for (const auto& r : gt) gt_by_frame[r.frame].push_back(&r);
  for (const auto& r : det) det_by_frame[r.frame].push_back(&r);

  std::vector<MotRecord> out;
  out.reserve(det.size());
  for (const auto& [frame, dets] : det_by_frame) {
    std::vector<int64_t> label(dets.size(), 0);
    auto git = gt_by_frame.find(frame);
    if (git != gt_by_frame.end()) {
      const auto& gts = git->second;
      TensorD cost({static_cast<int64_t>(gts.size()), static_cast<int64_t>(dets.size())});
      for (size_t g = 0; g < gts.size(); ++g) {
        for (size_t d = 0; d < dets.size(); ++d) {
          double overlap = iou(gts[g]->box, dets[d]->box);
          cost(static_cast<int64_t>(g), static_cast<int64_t>(d)) =
              overlap >= iou_min ? 1.0 - overlap : association_sentinel();
        }
      }
      for (const auto& [g, d] : hungarian(cost).pairs) {
        label[static_cast<size_t>(d)] = gts[static_cast<size_t>(g)]->id;
      }
    }
    for (size_t d = 0; d < dets.size(); ++d) {
      MotRecord r = *dets[d];
      r.id = label[d];
      out.push_back(r);
    }
  }
  return out;
}

TrainingSample sample_window(const std::vector<MotRecord>& labeled,
                             const AppearanceProvider& appearance, const SequenceMeta& meta,
                             int window_T, int start_frame, bool include_distractors) {
  meta.validate();
  if (window_T < 1) throw ContractError("sample_window: window_T must be >= 1");
  if (start_frame < 1 || start_frame + window_T > meta.frames) {
    throw ContractError("sample_window: window [" + std::to_string(start_frame) + ", " +
                        std::to_string(start_frame + window_T) + "] does not fit " +
                        std::to_string(meta.frames) + " frames");
  }
  int target_frame = start_frame + window_T;

  std::map<int64_t, std::vector<const MotRecord*>> by_id;
  std::vector<const MotRecord*> target;
  for (const auto& r : labeled) {
    if (r.id >= 1 && r.frame >= start_frame && r.frame < target_frame) {
      by_id[r.id].push_back(&r);
    }
    if (r.frame == target_frame && (r.id >= 1 || include_distractors)) {
      target.push_back(&r);
    }
  }

  TrainingSample s;
  int64_t n = static_cast<int64_t>(by_id.size());
  int64_t m = static_cast<int64_t>(target.size());
  int64_t width = appearance.width();
  for (auto& [id, obs] : by_id) {
    std::sort(obs.begin(), obs.end(),
              [](const MotRecord* a, const MotRecord* b) { return a->frame < b->frame; });
    TrackletInput<float> t;
    int64_t k = static_cast<int64_t>(obs.size());
    t.appearances = TensorF({k, width});
    t.geoms = TensorF({k, 4});
    for (int64_t r = 0; r < k; ++r) {
      const MotRecord* rec = obs[static_cast<size_t>(r)];
      if (r > 0 && rec->frame == obs[static_cast<size_t>(r - 1)]->frame) {
        throw ContractError("sample_window: id " + std::to_string(id) +
                            " appears twice at frame " + std::to_string(rec->frame));
      }
      TensorF a = appearance.get(rec->frame, rec->box);
      for (int64_t c = 0; c < width; ++c) t.appearances(r, c) = a[c];
      auto g = normalize_box(rec->box, meta);
      for (int64_t c = 0; c < 4; ++c) t.geoms(r, c) = static_cast<float>(g[static_cast<size_t>(c)]);
      t.frames.push_back(rec->frame);
    }
    s.tracklets.push_back(std::move(t));
    s.tracklet_ids.push_back(id);
  }

  s.detections.frame = target_frame;
  s.detections.appearances = TensorF({m, width});
  s.detections.geoms = TensorF({m, 4});
  s.gt_assignment = TensorF({n, m});
  s.loss_mask = Tensor<uint8_t>({n, m}, 1);
  std::map<int64_t, int64_t> seen_ids;
  for (int64_t j = 0; j < m; ++j) {
    const MotRecord* rec = target[static_cast<size_t>(j)];
    if (rec->id >= 1 && !seen_ids.emplace(rec->id, j).second) {
      throw ContractError("sample_window: id " + std::to_string(rec->id) +
                          " appears twice at the target frame");
    }
    TensorF a = appearance.get(rec->frame, rec->box);
    for (int64_t c = 0; c < width; ++c) s.detections.appearances(j, c) = a[c];
    auto g = normalize_box(rec->box, meta);
    for (int64_t c = 0; c < 4; ++c) {
      s.detections.geoms(j, c) = static_cast<float>(g[static_cast<size_t>(c)]);
    }
    s.detection_ids.push_back(rec->id);
  }
  for (int64_t i = 0; i < n; ++i) {
    auto hit = seen_ids.find(s.tracklet_ids[static_cast<size_t>(i)]);
    if (hit != seen_ids.end()) s.gt_assignment(i, hit->second) = 1.0f;
  }
  return s;
}

TrainingSample augment_drop(TrainingSample sample, double drop_prob, Rng& rng) {
  if (drop_prob < 0.0 || drop_prob >= 1.0) {
    throw ContractError("augment_drop: drop_prob must lie in [0, 1)");
  }
  for (auto& t : sample.tracklets) {
    int64_t k = t.geoms.rows();
    std::vector<char> drop(static_cast<size_t>(k));
    bool all = true;
    for (int64_t r = 0; r < k; ++r) {
      drop[static_cast<size_t>(r)] = rng.bernoulli(drop_prob) ? 1 : 0;
      all = all && drop[static_cast<size_t>(r)];
    }
    if (all) drop[static_cast<size_t>(k - 1)] = 0;  // newest observation survives
    int64_t kept = 0;
    for (char d : drop) kept += d ? 0 : 1;
    if (kept == k) continue;
    TrackletInput<float> slim;
    slim.appearances = TensorF({kept, t.appearances.cols()});
    slim.geoms = TensorF({kept, 4});
    int64_t w = 0;
    for (int64_t r = 0; r < k; ++r) {
      if (drop[static_cast<size_t>(r)]) continue;
      for (int64_t c = 0; c < t.appearances.cols(); ++c) {
        slim.appearances(w, c) = t.appearances(r, c);
      }
      for (int64_t c = 0; c < 4; ++c) slim.geoms(w, c) = t.geoms(r, c);
      slim.frames.push_back(t.frames[static_cast<size_t>(r)]);
      ++w;
    }
    t = std::move(slim);
  }
  return sample;
}

Tensor<uint8_t> downsample_negatives(const TensorF& gt_assignment, double ratio, Rng& rng) {
  if (!(ratio > 0.0)) throw ContractError("downsample_negatives: ratio must be positive");
  Tensor<uint8_t> mask(gt_assignment.shape());
  std::vector<int64_t> negatives;
  int64_t positives = 0;
  for (int64_t i = 0; i < gt_assignment.numel(); ++i) {
    if (gt_assignment[i] > 0.5f) {
      mask[i] = 1;
      ++positives;
    } else {
      negatives.push_back(i);
    }
  }
  int64_t keep =
      positives == 0
          ? std::min<int64_t>(static_cast<int64_t>(negatives.size()), 1)
          : std::min<int64_t>(static_cast<int64_t>(negatives.size()),
                              static_cast<int64_t>(std::ceil(ratio * static_cast<double>(positives))));
  for (int64_t k = 0; k < keep; ++k) {
    int64_t pick = k + rng.uniform_int(static_cast<int64_t>(negatives.size()) - k);
    std::swap(negatives[static_cast<size_t>(k)], negatives[static_cast<size_t>(pick)]);
    mask[negatives[static_cast<size_t>(k)]] = 1;
  }
  return mask;
}

double bce_loss(const TensorF& probs, const TensorF& gt, const Tensor<uint8_t>& mask) {
  if (!probs.same_shape(gt) || probs.shape() != mask.shape()) {
    throw ShapeError("bce_loss: probs " + probs.shape_str() + ", gt " + gt.shape_str() +
                     " and mask must share one shape");
  }
  const double eps = 1e-7;
  double acc = 0.0;
  int64_t count = 0;
  for (int64_t i = 0; i < probs.numel(); ++i) {
    if (!mask[i]) continue;
    ++count;
    double a = std::min(std::max(static_cast<double>(probs[i]), eps), 1.0 - eps);
    double g = gt[i];
    acc += -(g * std::log(a) + (1.0 - g) * std::log(1.0 - a));
  }
  if (count == 0) throw ContractError("bce_loss: empty mask");
  return acc / static_cast<double>(count);
}

void sgd_step(ModelParams& params, const std::vector<TensorF>& grads, SgdState& state,
              const OptimizerConfig& cfg) {
  cfg.validate();
  if (grads.size() != params.values.size()) {
    throw ShapeError("sgd_step: " + std::to_string(grads.size()) + " gradient blocks for " +
                     std::to_string(params.values.size()) + " parameter blocks");
  }
  if (state.velocity.empty()) {
    for (const auto& v : params.values) state.velocity.emplace_back(v.shape());
  }
  if (state.velocity.size() != params.values.size()) {
    throw ShapeError("sgd_step: momentum state does not match parameter blocks");
  }
  for (size_t b = 0; b < params.values.size(); ++b) {
    if (!grads[b].all_finite()) {
      throw ContractError("sgd_step aborted: non-finite gradient in block " + params.names[b]);
    }
  }
  float lr = static_cast<float>(cfg.learning_rate);
  float wd = static_cast<float>(cfg.weight_decay);
  float mu = static_cast<float>(cfg.momentum);
  for (size_t b = 0; b < params.values.size(); ++b) {
    TensorF& p = params.values[b];
    TensorF& v = state.velocity[b];
    const TensorF& g = grads[b];
    if (!p.same_shape(g) || !p.same_shape(v)) {
      throw ShapeError("sgd_step: block " + params.names[b] + " shape mismatch");
    }
    for (int64_t i = 0; i < p.numel(); ++i) {
      v[i] = mu * v[i] + g[i] + wd * p[i];
      p[i] -= lr * v[i];
    }
  }
}

double sample_gradients(const ModelParams& params, const TrainingSample& sample,
                        std::vector<TensorF>& grads) {
  if (!sample.usable()) throw ContractError("sample_gradients: sample has no tracklets or detections");
  Tape<float> tape;
  BoundModel<float> model(tape, params, /*trainable=*/true);
  Var<float> probs = model.forward_assignment(sample.tracklets, sample.detections);
  Var<float> loss = bce_masked(probs, sample.gt_assignment, sample.loss_mask);
  tape.backward(loss);
  grads.clear();
  grads.reserve(model.param_vars().size());
  for (const Var<float>& v : model.param_vars()) grads.push_back(v.grad());
  return static_cast<double>(loss.value()[0]);
}

namespace {

struct WindowDraw {
  size_t sequence = 0;
  int start = 0;
};

}  // namespace

TrainResult train(const std::vector<TrainSequence>& dataset, const ModelConfig& model_cfg,
                  const TrainOptions& opt, uint64_t seed) {
  opt.validate();
  model_cfg.validate();
  if (dataset.empty()) throw ContractError("train: dataset is empty");
  std::vector<size_t> eligible;
  for (size_t s = 0; s < dataset.size(); ++s) {
    dataset[s].meta.validate();
    if (dataset[s].meta.frames >= model_cfg.window_T + 1) eligible.push_back(s);
  }
  if (eligible.empty()) {
    throw ContractError("train: no sequence is at least window_T + 1 frames long");
  }

  TrainResult result;
  result.params = init_params<float>(model_cfg, seed);
  SgdState state;
  Rng rng(hash_combine(seed, 0x5EEDBA5Eull));

  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

  int steps = std::max(1, opt.windows_per_epoch / opt.optimizer.batch_size);
  std::vector<TensorF> batch_grads, grads;
  for (int epoch = 1; epoch <= opt.optimizer.epochs; ++epoch) {
    for (int step = 1; step <= steps; ++step) {
      batch_grads.clear();
      double loss_sum = 0.0;
      int drawn = 0;
      int attempts = 0;
      while (drawn < opt.optimizer.batch_size) {
        if (++attempts > 100 * opt.optimizer.batch_size) {
          throw ContractError("train: could not draw a usable window in 100 tries");
        }
        size_t s = eligible[static_cast<size_t>(rng.uniform_int(
            static_cast<int64_t>(eligible.size())))];
        const TrainSequence& seq = dataset[s];
        int start = 1 + static_cast<int>(rng.uniform_int(seq.meta.frames - model_cfg.window_T));
        bool keep_distractors = rng.bernoulli(opt.distractor_keep);
        TrainingSample sample = sample_window(seq.labeled, seq.appearance, seq.meta,
                                              static_cast<int>(model_cfg.window_T), start,
                                              keep_distractors);
        if (!sample.usable()) continue;
        sample = augment_drop(std::move(sample), opt.drop_prob, rng);
        sample.loss_mask = downsample_negatives(sample.gt_assignment, opt.negative_ratio, rng);
        loss_sum += sample_gradients(result.params, sample, grads);
        if (batch_grads.empty()) {
          batch_grads = std::move(grads);
          grads.clear();
        } else {
          for (size_t b = 0; b < batch_grads.size(); ++b) {
            TensorF& acc = batch_grads[b];
            const TensorF& add = grads[b];
            for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += add[i];
          }
        }
        ++drawn;
      }
      float inv = 1.0f / static_cast<float>(drawn);
      for (auto& g : batch_grads) {
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= inv;
      }
      sgd_step(result.params, batch_grads, state, opt.optimizer);
      result.curve.push_back(LossPoint{epoch, step, loss_sum / static_cast<double>(drawn)});
    }
    if (!opt.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
      save_checkpoint(opt.checkpoint_dir + "/" + name, result.params);
    }
  }
  if (!opt.loss_csv.empty()) write_loss_csv(result.curve, opt.loss_csv);
  return result;
}

void write_loss_csv(const std::vector<LossPoint>& curve, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw IoError("cannot open for writing: " + path);
  std::fprintf(f, "epoch,step,loss\n");
  for (const auto& p : curve) std::fprintf(f, "%d,%d,%.9g\n", p.epoch, p.step, p.loss);
  std::fclose(f);
}

}  // namespace stam
