#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stam/data_io.hpp"
#include "stam/metrics.hpp"
#include "stam/model.hpp"
#include "stam/tracker.hpp"
#include "stam/training.hpp"

namespace stam {

/// Random orthogonal matrix (Gram-Schmidt on a Gaussian draw); rows form an
/// orthonormal basis, so right-multiplying feature rows preserves pairwise
/// inner products.
TensorF random_orthogonal(int64_t dim, Rng& rng);

/// New provider whose every vector is rotated by one seeded orthogonal map.
/// Cosine structure between any two observations is unchanged; the coordinate
/// frame is fresh, which stops a model from memorizing identity axes.
AppearanceProvider rotate_appearance(const AppearanceProvider& src, uint64_t seed);

/// Detector preprocessing: keep only records with conf >= min_conf.
std::vector<MotRecord> gate_detections(const std::vector<MotRecord>& records, double min_conf);

/// One train-two/hold-out-one benchmark: k seeded variants of one scenario,
/// a reduced-width model, and the tracker settings that go with it.
struct ExperimentSpec {
  SynthSpec scenario;       // per-sequence shape; seed field is the base seed
  int sequences = 3;        // suite size; sequence i uses seed scenario.seed + i
  int holdout = 0;          // index of the sequence reserved for evaluation
  ModelConfig model;        // reduced-width configuration shared by all arms
  TrainOptions training;    // optimizer and sampling knobs
  TrackerConfig tracker;    // association/lifecycle knobs
  double det_min_conf = 0.85;  // detector preprocessing threshold
  int rotations = 8;           // appearance-rotated copies per training sequence
  uint64_t train_seed = 99;    // seed for init + window sampling
  uint64_t rotation_seed = 1234;

  void validate() const;
};

/// The calibrated small-scale recipe every built-in experiment runs on.
ExperimentSpec default_experiment();

std::vector<SynthResult> make_suite(const ExperimentSpec& spec);

/// Gated, labeled, rotation-multiplied training set from every sequence
/// except the held-out one.
std::vector<TrainSequence> build_training_set(const std::vector<SynthResult>& suite,
                                              const ExperimentSpec& spec);

/// Gate, track, and score one sequence with a trained model.
EvalReport track_and_score(const ModelParams& params, const SynthResult& sequence,
                           const ExperimentSpec& spec);

/// Train on the non-held-out sequences, then track and score the held-out one.
struct FoldResult {
  ModelParams params;
  EvalReport report;
};
FoldResult run_fold(const std::vector<SynthResult>& suite, const ExperimentSpec& spec,
                    const ModelConfig& model);

/// One model variant in a comparison table.
struct ExperimentArm {
  std::string name;
  ModelConfig model;
};

/// Positional-encoding arms: none, spatial-only, relative-only, both.
std::vector<ExperimentArm> encoding_arms(const ModelConfig& base);

/// Query-fusion arms: subtract, add, concat.
std::vector<ExperimentArm> fusion_arms(const ModelConfig& base);

/// Rotating-holdout results for one arm: fold k holds out sequence k.
struct ArmResult {
  std::string name;
  std::vector<EvalReport> folds;
  double median_idf1 = 0.0;
  double median_mota = 0.0;
};

double median(std::vector<double> values);

/// Runs every fold for one arm. All folds reuse the spec except for the
/// holdout index and the model.
ArmResult run_arm(const std::vector<SynthResult>& suite, const ExperimentSpec& spec,
                  const ExperimentArm& arm);

}  // namespace stam
