#include "stam/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "stam/errors.hpp"

namespace stam {

TensorF random_orthogonal(int64_t dim, Rng& rng) {
  if (dim < 1) throw ContractError("random_orthogonal: dim must be >= 1");
  TensorF q({dim, dim});
  for (int64_t i = 0; i < q.numel(); ++i) {
    q.data()[i] = static_cast<float>(rng.normal(0.0, 1.0));
  }
  for (int64_t i = 0; i < dim; ++i) {
    for (int64_t j = 0; j < i; ++j) {
      double dot = 0.0;
      for (int64_t k = 0; k < dim; ++k) dot += static_cast<double>(q(i, k)) * q(j, k);
      for (int64_t k = 0; k < dim; ++k) {
        q(i, k) -= static_cast<float>(dot * q(j, k));
      }
    }
    double norm = 0.0;
    for (int64_t k = 0; k < dim; ++k) norm += static_cast<double>(q(i, k)) * q(i, k);
    norm = std::sqrt(norm);
    if (norm < 1e-6) throw ContractError("random_orthogonal: degenerate draw");
    for (int64_t k = 0; k < dim; ++k) {
      q(i, k) = static_cast<float>(q(i, k) / norm);
    }
  }
  return q;
}

AppearanceProvider rotate_appearance(const AppearanceProvider& src, uint64_t seed) {
  Rng rng(seed);
  TensorF q = random_orthogonal(src.width(), rng);
  auto table = src.materialize();
  for (auto& [key, vec] : table) {
    TensorF out({1, src.width()});
    for (int64_t j = 0; j < src.width(); ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < src.width(); ++k) {
        acc += static_cast<double>(vec(0, k)) * q(j, k);
      }
      out(0, j) = static_cast<float>(acc);
    }
    vec = std::move(out);
  }
  return AppearanceProvider::precomputed(std::move(table), src.width());
}

std::vector<MotRecord> gate_detections(const std::vector<MotRecord>& records, double min_conf) {
  std::vector<MotRecord> kept;
  kept.reserve(records.size());
  for (const auto& r : records) {
    if (r.conf >= min_conf) kept.push_back(r);
  }
  return kept;
}

void ExperimentSpec::validate() const {
  model.validate();
  training.validate();
  tracker.validate();
  if (sequences < 2) throw ContractError("experiment: need at least 2 sequences");
  if (holdout < 0 || holdout >= sequences) throw ContractError("experiment: holdout out of range");
  if (rotations < 0) throw ContractError("experiment: rotations must be >= 0");
  if (det_min_conf < 0.0 || det_min_conf > 1.0) {
    throw ContractError("experiment: det_min_conf must be in [0,1]");
  }
}

ExperimentSpec default_experiment() {
  ExperimentSpec spec;
  spec.scenario.name = "suite";
  spec.scenario.objects = 20;
  spec.scenario.frames = 300;
  spec.scenario.drop_rate = 0.1;
  spec.scenario.fp_rate = 0.05;
  spec.scenario.occlusion_rate = 0.01;
  spec.scenario.occlusion_max = 20;
  spec.scenario.appearance_dim = 8;
  spec.scenario.appearance_noise = 0.1;
  spec.scenario.seed = 11;

  spec.model.d = 64;
  spec.model.heads = 4;
  spec.model.layers = 1;
  spec.model.ffn_dim = 256;
  spec.model.appearance_dim = 8;
  spec.model.window_T = 24;

  spec.training.optimizer.epochs = 10;
  spec.training.windows_per_epoch = 96;
  spec.training.negative_ratio = 0.5;
  spec.training.drop_prob = 0.1;

  spec.tracker.window_T = 24;
  spec.tracker.tau_th = 0.5;
  spec.tracker.max_speed = 0.02;
  return spec;
}

std::vector<SynthResult> make_suite(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<SynthResult> suite;
  suite.reserve(static_cast<size_t>(spec.sequences));
  for (int i = 0; i < spec.sequences; ++i) {
    SynthSpec s = spec.scenario;
    s.name = spec.scenario.name + std::to_string(i);
    s.seed = spec.scenario.seed + static_cast<uint64_t>(i);
    suite.push_back(synth_generate(s));
  }
  return suite;
}

std::vector<TrainSequence> build_training_set(const std::vector<SynthResult>& suite,
                                              const ExperimentSpec& spec) {
  spec.validate();
  if (suite.size() != static_cast<size_t>(spec.sequences)) {
    throw ContractError("experiment: suite size does not match spec");
  }
  std::vector<TrainSequence> out;
  for (int i = 0; i < spec.sequences; ++i) {
    if (i == spec.holdout) continue;
    TrainSequence base;
    base.meta = suite[static_cast<size_t>(i)].meta;
    base.labeled = replace_gt_with_detections(
        suite[static_cast<size_t>(i)].gt,
        gate_detections(suite[static_cast<size_t>(i)].det, spec.det_min_conf));
    base.appearance = suite[static_cast<size_t>(i)].appearance;
    if (spec.rotations == 0) {
      out.push_back(std::move(base));
      continue;
    }
    for (int r = 0; r < spec.rotations; ++r) {
      TrainSequence copy = base;
      copy.appearance = rotate_appearance(
          base.appearance,
          hash_combine(spec.rotation_seed, static_cast<uint64_t>(i) * 100 + r));
      out.push_back(std::move(copy));
    }
  }
  return out;
}

EvalReport track_and_score(const ModelParams& params, const SynthResult& sequence,
                           const ExperimentSpec& spec) {
  ModelAffinity affinity(params);
  std::vector<Trajectory> trajectories =
      run_sequence(gate_detections(sequence.det, spec.det_min_conf), sequence.appearance,
                   sequence.meta, affinity, spec.tracker);
  return evaluate(sequence.meta.name, sequence.gt, records_from_trajectories(trajectories));
}

FoldResult run_fold(const std::vector<SynthResult>& suite, const ExperimentSpec& spec,
                    const ModelConfig& model) {
  TrainResult trained = train(build_training_set(suite, spec), model, spec.training,
                              spec.train_seed);
  FoldResult fold;
  fold.report = track_and_score(trained.params, suite[static_cast<size_t>(spec.holdout)], spec);
  fold.params = std::move(trained.params);
  return fold;
}

std::vector<ExperimentArm> encoding_arms(const ModelConfig& base) {
  std::vector<ExperimentArm> arms;
  ModelConfig none = base;
  none.use_aspe = false;
  none.use_rstpe = false;
  arms.push_back({"none", none});
  ModelConfig spatial = base;
  spatial.use_aspe = true;
  spatial.use_rstpe = false;
  arms.push_back({"spatial", spatial});
  ModelConfig relative = base;
  relative.use_aspe = false;
  relative.use_rstpe = true;
  arms.push_back({"relative", relative});
  ModelConfig both = base;
  both.use_aspe = true;
  both.use_rstpe = true;
  arms.push_back({"both", both});
  return arms;
}

std::vector<ExperimentArm> fusion_arms(const ModelConfig& base) {
  std::vector<ExperimentArm> arms;
  ModelConfig sub = base;
  sub.fusion = QueryFusion::kSubtract;
  arms.push_back({"subtract", sub});
  ModelConfig add = base;
  add.fusion = QueryFusion::kAdd;
  arms.push_back({"add", add});
  ModelConfig cat = base;
  cat.fusion = QueryFusion::kConcat;
  arms.push_back({"concat", cat});
  return arms;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median: empty input");
  std::sort(values.begin(), values.end());
  size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

ArmResult run_arm(const std::vector<SynthResult>& suite, const ExperimentSpec& spec,
                  const ExperimentArm& arm) {
  ArmResult result;
  result.name = arm.name;
  std::vector<double> idf1s;
  std::vector<double> motas;
  for (int fold = 0; fold < spec.sequences; ++fold) {
    ExperimentSpec fold_spec = spec;
    fold_spec.holdout = fold;
    FoldResult fr = run_fold(suite, fold_spec, arm.model);
    idf1s.push_back(fr.report.identity.idf1);
    motas.push_back(fr.report.clear.mota);
    result.folds.push_back(std::move(fr.report));
  }
  result.median_idf1 = median(idf1s);
  result.median_mota = median(motas);
  return result;
}

}  // namespace stam
