#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "stam/tensor.hpp"

namespace stam {

/// Pairwise match probabilities between N tracklets (rows) and M detections
/// (columns), with an inadmissibility mask (1 = pair filtered out).
struct AssignmentMatrix {
  TensorD values;
  std::vector<int64_t> row_ids;
  std::vector<int> col_ids;
  Tensor<uint8_t> mask;

  static AssignmentMatrix make(TensorD values);
};

struct Matching {
  std::vector<std::pair<int64_t, int>> pairs;
  std::vector<int64_t> unmatched_tracklets;
  std::vector<int> unmatched_detections;
};

/// Matching expressed in raw row/column indices with the summed input cost of
/// the selected pairs.
struct IndexAssignment {
  std::vector<std::pair<int, int>> pairs;  // sorted by row
  double total_cost = 0.0;
};

/// Cost value treated as "pair forbidden" by the solvers; forbidden pairs are
/// stripped from results.
double association_sentinel();

/// Minimum-cost maximal matching of a rectangular cost matrix. Among equal
/// total costs the lexicographically smallest (row, col) pair list wins; this
/// tie-break is exact, not perturbation-based, and matches brute_force_match.
IndexAssignment hungarian(const TensorD& cost);

/// Exhaustive oracle for matrices with min(n, m) <= 8. Same tie-break as
/// hungarian.
IndexAssignment brute_force_match(const TensorD& cost);

/// Latest observed center of a tracklet head or a detection, in normalized
/// image units, with its frame stamp.
struct MotionStamp {
  double cx = 0.0;
  double cy = 0.0;
  int frame = 0;
};

/// mask(i,j) = 1 when tracklet i cannot plausibly reach detection j: center
/// distance divided by frame gap exceeds max_speed. Non-positive frame gaps
/// are masked and reported once per call on stderr.
Tensor<uint8_t> speed_filter(const std::vector<MotionStamp>& tracklets,
                             const std::vector<MotionStamp>& detections, double max_speed);

/// One-to-one binarization of an assignment matrix. Default is match-then-
/// filter: optimal matching over admissible pairs, then pairs with
/// values <= tau_th dropped. filter_before_match additionally masks
/// sub-threshold pairs before the matching, for experiments.
Matching associate(const AssignmentMatrix& a, double tau_th, bool filter_before_match = false);

}  // namespace stam
