#include <algorithm>
#include <set>
#include <vector>

#include "doctest.h"
#include "stam/association.hpp"
#include "stam/rng.hpp"

using stam::AssignmentMatrix;
using stam::associate;
using stam::association_sentinel;
using stam::brute_force_match;
using stam::hungarian;
using stam::IndexAssignment;
using stam::Matching;
using stam::MotionStamp;
using stam::Rng;
using stam::TensorD;

namespace {

TensorD random_cost(Rng& rng, int64_t n, int64_t m) {
  TensorD c({n, m});
  for (int64_t i = 0; i < c.numel(); ++i) c[i] = rng.uniform01();
  return c;
}

}  // namespace

TEST_CASE("hungarian basic cases") {
  auto diag = hungarian(TensorD::matrix({{1, 2}, {2, 1}}));
  CHECK(diag.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
  CHECK(diag.total_cost == doctest::Approx(2.0));

  auto single = hungarian(TensorD::matrix({{5}}));
  CHECK(single.pairs == std::vector<std::pair<int, int>>{{0, 0}});

  auto empty = hungarian(TensorD({0, 3}));
  CHECK(empty.pairs.empty());
}

TEST_CASE("hungarian handles rectangles and negatives") {
  auto wide = hungarian(TensorD::matrix({{1, 9, 9}, {9, 1, 9}}));
  CHECK(wide.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});

  auto tall = hungarian(TensorD::matrix({{5}, {1}, {3}}));
  CHECK(tall.pairs == std::vector<std::pair<int, int>>{{1, 0}});
  CHECK(tall.total_cost == doctest::Approx(1.0));

  auto neg = hungarian(TensorD::matrix({{-5, 0}, {0, -5}}));
  CHECK(neg.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
  CHECK(neg.total_cost == doctest::Approx(-10.0));
}

TEST_CASE("hungarian ties break to the lexicographically smallest pairs") {
  auto flat = hungarian(TensorD({3, 3}, 1.0));
  CHECK(flat.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}});

  // Two optimal assignments; (0,0)+(1,1) wins over (0,1)+(1,0).
  auto sym = hungarian(TensorD::matrix({{1, 2}, {2, 3}}));
  CHECK(sym.pairs == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});
  auto bf = brute_force_match(TensorD::matrix({{1, 2}, {2, 3}}));
  CHECK(bf.pairs == sym.pairs);
}

TEST_CASE("sentinel cells are never matched") {
  double s = association_sentinel();
  auto cross = hungarian(TensorD::matrix({{s, 1}, {2, s}}));
  CHECK(cross.pairs == std::vector<std::pair<int, int>>{{0, 1}, {1, 0}});
  CHECK(cross.total_cost == doctest::Approx(3.0));

  auto none = hungarian(TensorD({2, 2}, s));
  CHECK(none.pairs.empty());

  // A blocked column forces a smaller maximal matching.
  auto partial = hungarian(TensorD::matrix({{1, s}, {2, s}}));
  CHECK(partial.pairs == std::vector<std::pair<int, int>>{{0, 0}});
}

TEST_CASE("hungarian equals the exhaustive oracle on random matrices") {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(7));
    int64_t m = 1 + static_cast<int64_t>(rng.uniform_int(7));
    TensorD c = random_cost(rng, n, m);
    IndexAssignment h = hungarian(c);
    IndexAssignment b = brute_force_match(c);
    REQUIRE(h.pairs == b.pairs);
    CHECK(h.total_cost == doctest::Approx(b.total_cost).epsilon(1e-9));
  }
}

TEST_CASE("hungarian equals the oracle on tie-heavy matrices") {
  Rng rng(103);
  const double levels[3] = {0.0, 0.5, 1.0};
  for (int trial = 0; trial < 150; ++trial) {
    int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(5));
    int64_t m = 1 + static_cast<int64_t>(rng.uniform_int(5));
    TensorD c({n, m});
    for (int64_t i = 0; i < c.numel(); ++i) c[i] = levels[rng.uniform_int(3)];
    IndexAssignment h = hungarian(c);
    IndexAssignment b = brute_force_match(c);
    REQUIRE(h.pairs == b.pairs);
    CHECK(h.total_cost == doctest::Approx(b.total_cost).epsilon(1e-9));
  }
}

TEST_CASE("hungarian is deterministic") {
  Rng rng(107);
  TensorD c = random_cost(rng, 6, 6);
  auto a = hungarian(c);
  auto b = hungarian(c);
  CHECK(a.pairs == b.pairs);
  CHECK(a.total_cost == b.total_cost);
}

TEST_CASE("oracle refuses oversized inputs and non-finite costs") {
  CHECK_THROWS_AS(brute_force_match(TensorD({9, 2}, 1.0)), stam::ContractError);
  TensorD bad({2, 2}, 1.0);
  bad[3] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(hungarian(bad), stam::ContractError);
}

TEST_CASE("speed filter masks implausible jumps") {
  std::vector<MotionStamp> tracks = {{0.2, 0.2, 10}};
  SUBCASE("coincident centers admissible") {
    std::vector<MotionStamp> dets = {{0.2, 0.2, 11}};
    auto mask = stam::speed_filter(tracks, dets, 0.1);
    CHECK(mask(0, 0) == 0);
  }
  SUBCASE("fast jump masked") {
    std::vector<MotionStamp> dets = {{0.7, 0.2, 11}};
    auto mask = stam::speed_filter(tracks, dets, 0.1);
    CHECK(mask(0, 0) == 1);
  }
  SUBCASE("same displacement over ten frames admissible") {
    std::vector<MotionStamp> dets = {{0.7, 0.2, 20}};
    auto mask = stam::speed_filter(tracks, dets, 0.1);
    CHECK(mask(0, 0) == 0);
  }
  SUBCASE("zero frame gap masked") {
    std::vector<MotionStamp> dets = {{0.2, 0.2, 10}};
    auto mask = stam::speed_filter(tracks, dets, 0.1);
    CHECK(mask(0, 0) == 1);
  }
  SUBCASE("max_speed must be positive") {
    CHECK_THROWS_AS(stam::speed_filter(tracks, tracks, 0.0), stam::ContractError);
  }
}

TEST_CASE("associate binarizes an assignment matrix") {
  SUBCASE("confident single pair matches") {
    auto m = associate(AssignmentMatrix::make(TensorD::matrix({{0.9}})), 0.5);
    CHECK(m.pairs == std::vector<std::pair<int64_t, int>>{{0, 0}});
    CHECK(m.unmatched_tracklets.empty());
    CHECK(m.unmatched_detections.empty());
  }
  SUBCASE("everything below threshold stays unmatched") {
    auto m = associate(AssignmentMatrix::make(TensorD({2, 3}, 0.2)), 0.5);
    CHECK(m.pairs.empty());
    CHECK(m.unmatched_tracklets.size() == 2);
    CHECK(m.unmatched_detections.size() == 3);
  }
  SUBCASE("optimal total beats the greedy best cell") {
    auto m = associate(AssignmentMatrix::make(TensorD::matrix({{0.9, 0.8}, {0.85, 0.1}})), 0.5);
    std::vector<std::pair<int64_t, int>> want = {{0, 1}, {1, 0}};
    CHECK(m.pairs == want);
  }
  SUBCASE("empty matrix leaves ids unmatched") {
    AssignmentMatrix a;
    a.row_ids = {7, 9};
    auto m = associate(a, 0.5);
    CHECK(m.pairs.empty());
    CHECK(m.unmatched_tracklets == std::vector<int64_t>{7, 9});
  }
  SUBCASE("threshold outside (0,1) rejected") {
    CHECK_THROWS_AS(associate(AssignmentMatrix::make(TensorD({1, 1}, 0.9)), 1.0),
                    stam::ContractError);
  }
}

TEST_CASE("associate respects the mask") {
  auto a = AssignmentMatrix::make(TensorD::matrix({{0.9, 0.8}, {0.85, 0.7}}));
  a.mask(0, 0) = 1;
  a.mask(1, 1) = 1;
  auto m = associate(a, 0.5);
  std::vector<std::pair<int64_t, int>> want = {{0, 1}, {1, 0}};
  CHECK(m.pairs == want);

  for (int64_t i = 0; i < 4; ++i) a.mask[i] = 1;
  auto all_masked = associate(a, 0.5);
  CHECK(all_masked.pairs.empty());
  CHECK(all_masked.unmatched_tracklets.size() == 2);
  CHECK(all_masked.unmatched_detections.size() == 2);
}

TEST_CASE("match-then-filter versus filter-then-match") {
  // The sub-threshold cell (0,1) participates in the optimal matching, which
  // strands row 0 after filtering; pre-filtering lets row 0 keep its strong
  // pair instead.
  auto a = AssignmentMatrix::make(TensorD::matrix({{0.9, 0.45}, {0.85, 0.05}}));
  auto after = associate(a, 0.5, false);
  CHECK(after.pairs == std::vector<std::pair<int64_t, int>>{{1, 0}});
  auto before = associate(a, 0.5, true);
  CHECK(before.pairs == std::vector<std::pair<int64_t, int>>{{0, 0}});
}

TEST_CASE("associate invariants on random matrices") {
  Rng rng(211);
  for (int trial = 0; trial < 60; ++trial) {
    int64_t n = 1 + static_cast<int64_t>(rng.uniform_int(6));
    int64_t m = 1 + static_cast<int64_t>(rng.uniform_int(6));
    TensorD values({n, m});
    for (int64_t i = 0; i < values.numel(); ++i) values[i] = rng.uniform(0.01, 0.99);
    auto a = AssignmentMatrix::make(values);
    for (int64_t i = 0; i < a.mask.numel(); ++i) a.mask[i] = rng.bernoulli(0.2) ? 1 : 0;

    auto lo = associate(a, 0.3);
    auto hi = associate(a, 0.6);

    std::set<int64_t> rows_seen;
    std::set<int> cols_seen;
    for (auto& [tid, det] : lo.pairs) {
      CHECK(rows_seen.insert(tid).second);
      CHECK(cols_seen.insert(det).second);
      CHECK(a.values(tid, det) > 0.3);
      CHECK(a.mask(tid, det) == 0);
    }
    // Raising the threshold never adds pairs.
    for (auto& p : hi.pairs) {
      CHECK(std::find(lo.pairs.begin(), lo.pairs.end(), p) != lo.pairs.end());
    }
    CHECK(lo.pairs.size() + lo.unmatched_tracklets.size() == static_cast<size_t>(n));
    CHECK(lo.pairs.size() + lo.unmatched_detections.size() == static_cast<size_t>(m));
  }
}
