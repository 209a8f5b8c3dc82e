#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stam/data_io.hpp"

namespace stam {

struct ClearMotResult {
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t id_switches = 0;
  int64_t gt_count = 0;
  int mt = 0;
  int ml = 0;
  int gt_tracks = 0;
  double mota = 0.0;  // always 1 - (fp+fn+id_switches)/gt_count
};

struct Idf1Result {
  int64_t idtp = 0;
  int64_t idfp = 0;
  int64_t idfn = 0;
  double idf1 = 0.0;
};

struct EvalReport {
  std::string name;
  ClearMotResult clear;
  Idf1Result identity;
};

/// Frame-by-frame CLEAR-MOT accounting. Matches carry over from a ground
/// truth id's last matched prediction id when still valid at the IoU gate;
/// the rest are matched per frame by Hungarian on (1 - IoU). A ground truth
/// id whose newly matched prediction id differs from its last one counts one
/// id switch, including across unmatched gaps.
ClearMotResult clear_mot(const std::vector<MotRecord>& gt, const std::vector<MotRecord>& preds,
                         double iou_min = 0.5);

/// Trajectory-level identity measure: a single global bipartite matching
/// between ground truth and predicted trajectories (with unmatched dummies so
/// the objective reduces to maximizing gated frame overlap), then
/// IDF1 = 2*IDTP / (2*IDTP + IDFP + IDFN).
Idf1Result idf1(const std::vector<MotRecord>& gt, const std::vector<MotRecord>& preds,
                double iou_min = 0.5);

EvalReport evaluate(const std::string& name, const std::vector<MotRecord>& gt,
                    const std::vector<MotRecord>& preds, double iou_min = 0.5);

/// Sums counters across sequences and recomputes the ratios.
EvalReport aggregate(const std::vector<EvalReport>& reports);

std::string report_table(const std::vector<EvalReport>& reports);
void write_report_csv(const std::vector<EvalReport>& reports, const std::string& path);

}  // namespace stam
