#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <vector>

#include "stam/data_io.hpp"
#include "stam/errors.hpp"
#include "stam/model.hpp"
#include "stam/tensor.hpp"

namespace stam {

struct TrackerConfig {
  int window_T = 150;      // history depth and termination horizon, frames
  double tau_th = 0.5;     // minimum affinity for an accepted match
  double max_speed = 0.1;  // normalized units per frame
  // Longest gap interpolate_gaps may fill; 0 disables, default unbounded.
  int max_interp_gap = std::numeric_limits<int>::max();

  void validate() const;
};

/// One detection handed to the tracker: normalized geometry plus appearance.
struct TrackerDetection {
  std::array<double, 4> geom{};  // (cx, cy, w, h) in image-relative units
  TensorF appearance;            // 1 x appearance_dim
  double conf = 1.0;
};

/// Produces the N x M tracklet-detection match probabilities. Row order
/// follows the tracklet list as given.
class AffinitySource {
 public:
  virtual ~AffinitySource() = default;
  virtual TensorD affinity(const std::vector<TrackletInput<float>>& tracklets,
                           const DetectionsInput<float>& dets) = 0;
};

/// Affinity from model parameters; builds a fresh inference graph per call.
class ModelAffinity final : public AffinitySource {
 public:
  explicit ModelAffinity(ModelParams params);

  const ModelConfig& config() const { return params_.config; }

  TensorD affinity(const std::vector<TrackletInput<float>>& tracklets,
                   const DetectionsInput<float>& dets) override;

 private:
  ModelParams params_;
};

/// Read-only snapshot of one live tracklet, for inspection.
struct TrackletView {
  int64_t id = 0;
  int last_matched_frame = 0;
  std::vector<int> window_frames;
};

/// Online tracking state over one sequence. Ids start at 1 and are never
/// reused; frames must advance strictly.
class Tracker {
 public:
  Tracker(const TrackerConfig& cfg, AffinitySource& affinity);

  /// Advances to `frame` and labels every detection with a track id: matched
  /// detections keep their tracklet's id, the rest spawn fresh ids. Tracklets
  /// unmatched for more than window_T frames are retired afterwards and
  /// window entries older than window_T frames are dropped.
  std::vector<int64_t> step(int frame, const std::vector<TrackerDetection>& detections);

  int current_frame() const { return current_frame_; }
  std::vector<TrackletView> active() const;

  /// Every accepted detection grouped by id (live and retired tracklets),
  /// denormalized to pixel boxes, sorted by id.
  std::vector<Trajectory> finalize(const SequenceMeta& meta) const;

 private:
  struct Obs {
    int frame = 0;
    std::array<float, 4> geom{};
    TensorF appearance;
  };
  struct HistoryBox {
    int frame = 0;
    std::array<double, 4> geom{};
    double conf = 1.0;
  };
  struct Track {
    int64_t id = 0;
    int last_matched = 0;
    std::vector<Obs> window;        // trimmed to the last window_T frames
    std::vector<HistoryBox> boxes;  // full accepted history, frame-sorted
  };

  void accept(Track& t, int frame, const TrackerDetection& d);
  void spawn(int frame, const TrackerDetection& d);
  TrackletInput<float> window_input(const Track& t) const;

  TrackerConfig cfg_;
  AffinitySource* affinity_;
  std::vector<Track> active_;
  std::vector<Track> retired_;
  int64_t next_id_ = 1;
  int current_frame_ = 0;
};

/// Fills every missing frame between consecutive observed boxes by linear
/// interpolation of each coordinate (and confidence). Observed boxes are
/// copied bit-exactly; gaps longer than max_gap stay open.
Trajectory interpolate_gaps(const Trajectory& t, int max_gap = std::numeric_limits<int>::max());

/// Full online pass: steps frames 1..meta.frames in order (empty frames
/// included, so retirements happen on schedule), then finalizes, converts to
/// pixels and fills gaps.
std::vector<Trajectory> run_sequence(const std::vector<MotRecord>& detections,
                                     const AppearanceProvider& appearance,
                                     const SequenceMeta& meta, AffinitySource& affinity,
                                     const TrackerConfig& cfg);

}  // namespace stam
