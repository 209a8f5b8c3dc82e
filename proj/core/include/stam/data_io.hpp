#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "stam/errors.hpp"
#include "stam/geometry.hpp"
#include "stam/tensor.hpp"

namespace stam {

/// One CSV row: pixel units, top-left corner, 1-based frames.
struct MotRecord {
  int frame = 0;
  int64_t id = -1;
  Box box;
  double conf = 1.0;
};

struct SequenceMeta {
  std::string name;
  int width = 0;
  int height = 0;
  int frames = 0;
  double frame_rate = 30.0;

  void validate() const {
    if (width <= 0 || height <= 0 || frames <= 0) {
      throw ContractError("sequence meta: width, height and frame count must be positive");
    }
  }
};

struct TrajectoryBox {
  int frame = 0;
  Box box;
  double conf = 1.0;
};

/// One identity's output track; at most one box per frame.
struct Trajectory {
  int64_t id = 0;
  std::vector<TrajectoryBox> boxes;  // sorted by frame
};

enum class MotKind { kDet, kGt };

/// Normalized geometry is (cx, cy, w, h) divided by image width/height.
std::array<double, 4> normalize_box(const Box& b, const SequenceMeta& meta);
Box denormalize_box(const std::array<double, 4>& g, const SequenceMeta& meta);

std::vector<MotRecord> parse_mot_csv(const std::string& path, MotKind kind);
void write_results(const std::vector<Trajectory>& trajectories, const std::string& path);

std::vector<Trajectory> trajectories_from_records(const std::vector<MotRecord>& records);
std::vector<MotRecord> records_from_trajectories(const std::vector<Trajectory>& trajectories);

void save_meta(const SequenceMeta& meta, const std::string& path);
SequenceMeta load_meta(const std::string& path);

/// Lookup key: frame plus box quantized to 0.1 px, so float round trips
/// through the result format still hit the stored entry.
struct AppearanceKey {
  int frame = 0;
  int32_t qx = 0, qy = 0, qw = 0, qh = 0;

  static AppearanceKey make(int frame, const Box& b);
  bool operator==(const AppearanceKey&) const = default;
};

struct AppearanceKeyHash {
  size_t operator()(const AppearanceKey& k) const;
};

/// Supplies the appearance vector for a detection, either from a precomputed
/// table or synthesized from per-identity base vectors plus Gaussian noise.
class AppearanceProvider {
 public:
  AppearanceProvider() = default;  // empty; get() rejects until configured

  static AppearanceProvider precomputed(
      std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> table, int64_t width);
  static AppearanceProvider synthetic(
      std::unordered_map<int64_t, TensorF> bases,
      std::unordered_map<AppearanceKey, int64_t, AppearanceKeyHash> identity_of, int64_t width,
      double noise_scale, uint64_t seed);

  int64_t width() const { return width_; }

  /// Precomputed: table lookup, missing key is an error. Synthetic: identity
  /// base plus Gaussian noise, pure noise for boxes with no identity (false
  /// positives). Deterministic in (seed, frame, box), not call order.
  TensorF get(int frame, const Box& box) const;

  /// Flattens either mode into a plain table (used for sidecar writing).
  std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> materialize() const;

 private:
  bool synthetic_ = false;
  int64_t width_ = 0;
  std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> table_;
  std::unordered_map<AppearanceKey, int64_t, AppearanceKeyHash> identity_of_;
  std::unordered_map<int64_t, TensorF> bases_;
  double noise_scale_ = 0.0;
  uint64_t seed_ = 0;
};

void save_appearance_sidecar(const AppearanceProvider& provider, const std::string& path);
AppearanceProvider load_appearance_sidecar(const std::string& path);

/// Scenario for the synthetic generator: constant-velocity objects with
/// Gaussian path perturbation reflecting at image borders, plus detector-style
/// corruption (jitter, drops, false positives, occlusion bursts).
struct SynthSpec {
  std::string name = "synth";
  int objects = 20;
  int frames = 300;
  int width = 1920;
  int height = 1080;
  double speed = 6.0;             // base px per frame
  double motion_sigma = 2.0;      // px path perturbation
  double jitter_sigma = 1.0;      // px detection jitter
  double drop_rate = 0.1;
  double fp_rate = 0.05;          // per object per frame
  double occlusion_rate = 0.0;    // chance per object per frame to start a burst
  int occlusion_max = 20;         // longest burst, frames
  double appearance_noise = 0.1;
  int64_t appearance_dim = 32;
  double min_size = 40.0;
  double max_size = 120.0;
  uint64_t seed = 1;

  void validate() const;
};

struct SynthResult {
  SequenceMeta meta;
  std::vector<MotRecord> gt;
  std::vector<MotRecord> det;
  AppearanceProvider appearance;
};

SynthResult synth_generate(const SynthSpec& spec);

}  // namespace stam
