#include "stam/tracker.hpp"

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>

#include "stam/association.hpp"
#include "stam/tape.hpp"

namespace stam {

void TrackerConfig::validate() const {
  if (window_T < 1) throw ContractError("tracker config: window_T must be >= 1");
  if (!(tau_th > 0.0 && tau_th < 1.0)) {
    throw ContractError("tracker config: tau_th must lie in (0, 1)");
  }
  if (!(max_speed > 0.0)) throw ContractError("tracker config: max_speed must be positive");
  if (max_interp_gap < 0) throw ContractError("tracker config: max_interp_gap must be >= 0");
}

ModelAffinity::ModelAffinity(ModelParams params) : params_(std::move(params)) {
  params_.config.validate();
}

TensorD ModelAffinity::affinity(const std::vector<TrackletInput<float>>& tracklets,
                                const DetectionsInput<float>& dets) {
  Tape<float> tape;
  BoundModel<float> model(tape, params_, /*trainable=*/false);
  return model.forward_assignment(tracklets, dets).value().cast<double>();
}

Tracker::Tracker(const TrackerConfig& cfg, AffinitySource& affinity)
    : cfg_(cfg), affinity_(&affinity) {
  cfg_.validate();
}

void Tracker::accept(Track& t, int frame, const TrackerDetection& d) {
  Obs o;
  o.frame = frame;
  for (int c = 0; c < 4; ++c) o.geom[static_cast<size_t>(c)] = static_cast<float>(d.geom[static_cast<size_t>(c)]);
  o.appearance = d.appearance;
  t.window.push_back(std::move(o));
  t.boxes.push_back(HistoryBox{frame, d.geom, d.conf});
  t.last_matched = frame;
}

void Tracker::spawn(int frame, const TrackerDetection& d) {
  Track t;
  t.id = next_id_++;
  accept(t, frame, d);
  active_.push_back(std::move(t));
}

TrackletInput<float> Tracker::window_input(const Track& t) const {
  int64_t k = static_cast<int64_t>(t.window.size());
  int64_t width = t.window.front().appearance.numel();
  TrackletInput<float> in;
  in.appearances = TensorF({k, width});
  in.geoms = TensorF({k, 4});
  for (int64_t r = 0; r < k; ++r) {
    const Obs& o = t.window[static_cast<size_t>(r)];
    if (o.appearance.numel() != width) {
      throw ShapeError("tracker: appearance width changed within a tracklet");
    }
    for (int64_t c = 0; c < width; ++c) in.appearances(r, c) = o.appearance[c];
    for (int64_t c = 0; c < 4; ++c) in.geoms(r, c) = o.geom[static_cast<size_t>(c)];
    in.frames.push_back(o.frame);
  }
  return in;
}

std::vector<int64_t> Tracker::step(int frame, const std::vector<TrackerDetection>& detections) {
  if (frame <= current_frame_) {
    throw ContractError("tracker step: frame " + std::to_string(frame) +
                        " does not advance past " + std::to_string(current_frame_));
  }
  int64_t m = static_cast<int64_t>(detections.size());
  std::vector<int64_t> labels(detections.size(), -1);

  if (!active_.empty() && m > 0) {
    std::vector<TrackletInput<float>> tracklet_inputs;
    std::vector<MotionStamp> track_stamps, det_stamps;
    AssignmentMatrix a;
    tracklet_inputs.reserve(active_.size());
    for (const Track& t : active_) {
      tracklet_inputs.push_back(window_input(t));
      const Obs& head = t.window.back();
      track_stamps.push_back(MotionStamp{head.geom[0], head.geom[1], head.frame});
      a.row_ids.push_back(t.id);
    }
    DetectionsInput<float> det_input;
    det_input.frame = frame;
    int64_t width = detections.front().appearance.numel();
    det_input.appearances = TensorF({m, width});
    det_input.geoms = TensorF({m, 4});
    for (int64_t j = 0; j < m; ++j) {
      const TrackerDetection& d = detections[static_cast<size_t>(j)];
      if (d.appearance.numel() != width) {
        throw ShapeError("tracker step: detections disagree on appearance width");
      }
      for (int64_t c = 0; c < width; ++c) det_input.appearances(j, c) = d.appearance[c];
      for (int64_t c = 0; c < 4; ++c) {
        det_input.geoms(j, c) = static_cast<float>(d.geom[static_cast<size_t>(c)]);
      }
      det_stamps.push_back(MotionStamp{d.geom[0], d.geom[1], frame});
      a.col_ids.push_back(static_cast<int>(j));
    }

    a.values = affinity_->affinity(tracklet_inputs, det_input);
    if (a.values.rows() != static_cast<int64_t>(active_.size()) || a.values.cols() != m) {
      throw ShapeError("tracker step: affinity shape " + a.values.shape_str() +
                       " does not match tracklets x detections");
    }
    a.mask = speed_filter(track_stamps, det_stamps, cfg_.max_speed);

    Matching matching = associate(a, cfg_.tau_th);
    std::unordered_map<int64_t, size_t> by_id;
    for (size_t i = 0; i < active_.size(); ++i) by_id[active_[i].id] = i;
    for (const auto& [tid, j] : matching.pairs) {
      Track& t = active_[by_id.at(tid)];
      accept(t, frame, detections[static_cast<size_t>(j)]);
      labels[static_cast<size_t>(j)] = tid;
    }
    std::vector<int> fresh = matching.unmatched_detections;
    std::sort(fresh.begin(), fresh.end());
    for (int j : fresh) {
      labels[static_cast<size_t>(j)] = next_id_;
      spawn(frame, detections[static_cast<size_t>(j)]);
    }
  } else {
    for (int64_t j = 0; j < m; ++j) {
      labels[static_cast<size_t>(j)] = next_id_;
      spawn(frame, detections[static_cast<size_t>(j)]);
    }
  }

  // Retire tracklets whose last match fell out of the horizon, then trim
  // window entries to the last window_T frames.
  for (auto it = active_.begin(); it != active_.end();) {
    if (frame - it->last_matched > cfg_.window_T) {
      it->window.clear();
      retired_.push_back(std::move(*it));
      it = active_.erase(it);
    } else {
      ++it;
    }
  }
  for (Track& t : active_) {
    auto keep = std::remove_if(t.window.begin(), t.window.end(),
                               [&](const Obs& o) { return frame - o.frame > cfg_.window_T; });
    t.window.erase(keep, t.window.end());
  }

  current_frame_ = frame;
  return labels;
}

std::vector<TrackletView> Tracker::active() const {
  std::vector<TrackletView> out;
  out.reserve(active_.size());
  for (const Track& t : active_) {
    TrackletView v;
    v.id = t.id;
    v.last_matched_frame = t.last_matched;
    for (const Obs& o : t.window) v.window_frames.push_back(o.frame);
    out.push_back(std::move(v));
  }
  return out;
}

std::vector<Trajectory> Tracker::finalize(const SequenceMeta& meta) const {
  meta.validate();
  std::vector<const Track*> all;
  for (const Track& t : retired_) all.push_back(&t);
  for (const Track& t : active_) all.push_back(&t);
  std::sort(all.begin(), all.end(), [](const Track* a, const Track* b) { return a->id < b->id; });
  std::vector<Trajectory> out;
  out.reserve(all.size());
  for (const Track* t : all) {
    Trajectory tr;
    tr.id = t->id;
    for (const HistoryBox& h : t->boxes) {
      tr.boxes.push_back(TrajectoryBox{h.frame, denormalize_box(h.geom, meta), h.conf});
    }
    out.push_back(std::move(tr));
  }
  return out;
}

Trajectory interpolate_gaps(const Trajectory& t, int max_gap) {
  if (max_gap < 0) throw ContractError("interpolate_gaps: max_gap must be >= 0");
  for (size_t i = 1; i < t.boxes.size(); ++i) {
    if (t.boxes[i].frame <= t.boxes[i - 1].frame) {
      throw ContractError("interpolate_gaps: frames must be strictly increasing");
    }
  }
  if (t.boxes.size() < 2) return t;
  Trajectory out;
  out.id = t.id;
  out.boxes.push_back(t.boxes.front());
  for (size_t i = 1; i < t.boxes.size(); ++i) {
    const TrajectoryBox& a = t.boxes[i - 1];
    const TrajectoryBox& b = t.boxes[i];
    int gap = b.frame - a.frame - 1;
    if (gap > 0 && gap <= max_gap) {
      for (int f = a.frame + 1; f < b.frame; ++f) {
        double al = static_cast<double>(f - a.frame) / static_cast<double>(b.frame - a.frame);
        TrajectoryBox ib;
        ib.frame = f;
        ib.box.x = a.box.x + al * (b.box.x - a.box.x);
        ib.box.y = a.box.y + al * (b.box.y - a.box.y);
        ib.box.w = a.box.w + al * (b.box.w - a.box.w);
        ib.box.h = a.box.h + al * (b.box.h - a.box.h);
        ib.conf = a.conf + al * (b.conf - a.conf);
        out.boxes.push_back(ib);
      }
    }
    out.boxes.push_back(b);
  }
  return out;
}

std::vector<Trajectory> run_sequence(const std::vector<MotRecord>& detections,
                                     const AppearanceProvider& appearance,
                                     const SequenceMeta& meta, AffinitySource& affinity,
                                     const TrackerConfig& cfg) {
  meta.validate();
  cfg.validate();
  std::map<int, std::vector<const MotRecord*>> by_frame;
  for (const MotRecord& r : detections) {
    if (r.frame < 1 || r.frame > meta.frames) {
      throw ContractError("run_sequence: record frame " + std::to_string(r.frame) +
                          " outside 1.." + std::to_string(meta.frames));
    }
    by_frame[r.frame].push_back(&r);
  }
  Tracker tracker(cfg, affinity);
  std::vector<TrackerDetection> frame_dets;
  for (int f = 1; f <= meta.frames; ++f) {
    frame_dets.clear();
    auto it = by_frame.find(f);
    if (it != by_frame.end()) {
      for (const MotRecord* r : it->second) {
        TrackerDetection d;
        d.geom = normalize_box(r->box, meta);
        d.appearance = appearance.get(f, r->box);
        d.conf = r->conf;
        frame_dets.push_back(std::move(d));
      }
    }
    tracker.step(f, frame_dets);
  }
  std::vector<Trajectory> out = tracker.finalize(meta);
  for (Trajectory& t : out) t = interpolate_gaps(t, cfg.max_interp_gap);
  return out;
}

}  // namespace stam
