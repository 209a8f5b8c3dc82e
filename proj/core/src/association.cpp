#include "stam/association.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <limits>

#include "stam/errors.hpp"

namespace stam {

namespace {

constexpr double kInf = std::numeric_limits<double>::max() / 4;

struct JvResult {
  std::vector<int> col_of_row;
  std::vector<int> row_of_col;
  std::vector<double> u, v;
};

// Shortest-augmenting-path assignment on a square matrix (minimization).
// Also returns the dual potentials, used for detecting alternative optima.
JvResult jv_solve(const std::vector<double>& a, int s) {
  std::vector<double> u(static_cast<size_t>(s) + 1, 0.0), v(static_cast<size_t>(s) + 1, 0.0);
  std::vector<int> p(static_cast<size_t>(s) + 1, 0), way(static_cast<size_t>(s) + 1, 0);
  for (int i = 1; i <= s; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(s) + 1, kInf);
    std::vector<char> used(static_cast<size_t>(s) + 1, 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      int i0 = p[static_cast<size_t>(j0)], j1 = 0;
      double delta = kInf;
      for (int j = 1; j <= s; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = a[static_cast<size_t>((i0 - 1) * s + (j - 1))] - u[static_cast<size_t>(i0)] -
                     v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= s; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  JvResult r;
  r.col_of_row.assign(static_cast<size_t>(s), -1);
  r.row_of_col.assign(static_cast<size_t>(s), -1);
  r.u.assign(static_cast<size_t>(s), 0.0);
  r.v.assign(static_cast<size_t>(s), 0.0);
  for (int j = 1; j <= s; ++j) {
    r.row_of_col[static_cast<size_t>(j - 1)] = p[static_cast<size_t>(j)] - 1;
    r.col_of_row[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  }
  for (int i = 1; i <= s; ++i) r.u[static_cast<size_t>(i - 1)] = u[static_cast<size_t>(i)];
  for (int j = 1; j <= s; ++j) r.v[static_cast<size_t>(j - 1)] = v[static_cast<size_t>(j)];
  return r;
}

// Solution of the admissible-pairs problem restricted to row subset R and
// column subset C. Inadmissible and padded cells share one sentinel value, so
// the square total depends only on the admissible pairs chosen; minimizing it
// maximizes cardinality first, then cost.
struct MaskedSolve {
  std::vector<std::pair<int, int>> pairs;
  double total = 0.0;
  int count = 0;
  int s = 0;
  int nr = 0, nc = 0;
  double shift = 0.0;
  double max_admissible = 0.0;
  std::vector<double> sq;
  JvResult jv;
};

MaskedSolve solve_masked(const TensorD& cost, const std::vector<int>& rows,
                         const std::vector<int>& cols) {
  MaskedSolve out;
  out.nr = static_cast<int>(rows.size());
  out.nc = static_cast<int>(cols.size());
  out.s = std::max(out.nr, out.nc);
  if (out.s == 0) return out;
  double lo = kInf, hi = -kInf;
  for (int r = 0; r < out.nr; ++r) {
    for (int c = 0; c < out.nc; ++c) {
      double val = cost(rows[static_cast<size_t>(r)], cols[static_cast<size_t>(c)]);
      if (val >= association_sentinel()) continue;
      lo = std::min(lo, val);
      hi = std::max(hi, val);
    }
  }
  bool any = lo <= hi;
  out.shift = (any && lo < 0.0) ? -lo : 0.0;
  double max_shifted = any ? hi + out.shift : 0.0;
  out.max_admissible = any ? std::max(std::fabs(lo), std::fabs(hi)) : 0.0;
  double big = static_cast<double>(out.s) * max_shifted + 1.0;
  out.sq.assign(static_cast<size_t>(out.s) * static_cast<size_t>(out.s), big);
  for (int r = 0; r < out.nr; ++r) {
    for (int c = 0; c < out.nc; ++c) {
      double val = cost(rows[static_cast<size_t>(r)], cols[static_cast<size_t>(c)]);
      if (val < association_sentinel()) {
        out.sq[static_cast<size_t>(r * out.s + c)] = val + out.shift;
      }
    }
  }
  out.jv = jv_solve(out.sq, out.s);
  for (int r = 0; r < out.nr; ++r) {
    int c = out.jv.col_of_row[static_cast<size_t>(r)];
    if (c < out.nc &&
        cost(rows[static_cast<size_t>(r)], cols[static_cast<size_t>(c)]) < association_sentinel()) {
      out.pairs.emplace_back(rows[static_cast<size_t>(r)], cols[static_cast<size_t>(c)]);
      out.total += cost(rows[static_cast<size_t>(r)], cols[static_cast<size_t>(c)]);
    }
  }
  out.count = static_cast<int>(out.pairs.size());
  return out;
}

// True when some zero-reduced-cost alternating cycle passes through a real
// row in a way that can change which admissible pairs are selected. Cheap
// screen: false means the optimum's admissible pair set is unique.
bool has_alternative_optimum(const MaskedSolve& ms, const TensorD& cost, int n, int m) {
  if (ms.s == 0) return false;
  int s = ms.s;
  double ztol = 1e-9 * std::max(1.0, ms.max_admissible);
  auto admissible = [&](int r, int c) {
    return r < n && c < m && cost(r, c) < association_sentinel();
  };
  std::vector<char> visited(static_cast<size_t>(s));
  for (int start = 0; start < std::min(n, s); ++start) {
    int mc = ms.jv.col_of_row[static_cast<size_t>(start)];
    std::fill(visited.begin(), visited.end(), 0);
    std::vector<int> stack;
    for (int j = 0; j < s; ++j) {
      if (j == mc) continue;
      double red = ms.sq[static_cast<size_t>(start * s + j)] - ms.jv.u[static_cast<size_t>(start)] -
                   ms.jv.v[static_cast<size_t>(j)];
      if (red > ztol) continue;
      if (!admissible(start, j) && !admissible(start, mc)) continue;
      int next = ms.jv.row_of_col[static_cast<size_t>(j)];
      if (next == start) continue;
      if (!visited[static_cast<size_t>(next)]) {
        visited[static_cast<size_t>(next)] = 1;
        stack.push_back(next);
      }
    }
    while (!stack.empty()) {
      int r = stack.back();
      stack.pop_back();
      if (r == start) return true;
      for (int j = 0; j < s; ++j) {
        if (j == ms.jv.col_of_row[static_cast<size_t>(r)]) continue;
        double red = ms.sq[static_cast<size_t>(r * s + j)] - ms.jv.u[static_cast<size_t>(r)] -
                     ms.jv.v[static_cast<size_t>(j)];
        if (red > ztol) continue;
        int next = ms.jv.row_of_col[static_cast<size_t>(j)];
        if (next == start) return true;
        if (!visited[static_cast<size_t>(next)]) {
          visited[static_cast<size_t>(next)] = 1;
          stack.push_back(next);
        }
      }
    }
  }
  return false;
}

// Exact lexicographic tie-break: re-derive the matching row by row, keeping
// the smallest column that still reaches the optimal (cardinality, cost).
IndexAssignment canonicalize(const TensorD& cost, int n, int m, const MaskedSolve& full) {
  double tol = 1e-9 * std::max(1.0, full.max_admissible);
  IndexAssignment out;
  std::vector<int> rows_left, cols_left;
  for (int i = 0; i < n; ++i) rows_left.push_back(i);
  for (int j = 0; j < m; ++j) cols_left.push_back(j);
  int accepted = 0;
  double acc_total = 0.0;
  for (int i = 0; i < n; ++i) {
    rows_left.erase(rows_left.begin());
    bool placed = false;
    for (size_t cidx = 0; cidx < cols_left.size(); ++cidx) {
      int j = cols_left[cidx];
      if (cost(i, j) >= association_sentinel()) continue;
      std::vector<int> rest_cols = cols_left;
      rest_cols.erase(rest_cols.begin() + static_cast<int64_t>(cidx));
      MaskedSolve sub = solve_masked(cost, rows_left, rest_cols);
      if (accepted + 1 + sub.count == full.count &&
          acc_total + cost(i, j) + sub.total <= full.total + tol) {
        out.pairs.emplace_back(i, j);
        acc_total += cost(i, j);
        ++accepted;
        cols_left = std::move(rest_cols);
        placed = true;
        break;
      }
    }
    (void)placed;
  }
  out.total_cost = acc_total;
  return out;
}

}  // namespace

double association_sentinel() { return 1e6; }

IndexAssignment hungarian(const TensorD& cost) {
  if (cost.rank() > 2) throw ShapeError("hungarian: expected a matrix, got " + cost.shape_str());
  int n = static_cast<int>(cost.rows()), m = static_cast<int>(cost.cols());
  if (cost.numel() == 0) return {};
  if (!cost.all_finite()) throw ContractError("hungarian: costs must be finite");
  std::vector<int> rows, cols;
  for (int i = 0; i < n; ++i) rows.push_back(i);
  for (int j = 0; j < m; ++j) cols.push_back(j);
  MaskedSolve full = solve_masked(cost, rows, cols);
  if (static_cast<int64_t>(n) * m <= 10000 && has_alternative_optimum(full, cost, n, m)) {
    return canonicalize(cost, n, m, full);
  }
  IndexAssignment out;
  out.pairs = std::move(full.pairs);
  out.total_cost = full.total;
  return out;
}

IndexAssignment brute_force_match(const TensorD& cost) {
  if (cost.rank() > 2) {
    throw ShapeError("brute_force_match: expected a matrix, got " + cost.shape_str());
  }
  int n = static_cast<int>(cost.rows()), m = static_cast<int>(cost.cols());
  if (cost.numel() == 0) return {};
  if (n > 8 || m > 8) {
    throw ContractError("brute_force_match: refuses matrices beyond 8x8, got " +
                        cost.shape_str());
  }
  if (!cost.all_finite()) throw ContractError("brute_force_match: costs must be finite");

  double max_adm = 0.0;
  for (int64_t i = 0; i < cost.numel(); ++i) {
    if (cost[i] < association_sentinel()) max_adm = std::max(max_adm, std::fabs(cost[i]));
  }
  double tol = 1e-9 * std::max(1.0, max_adm);

  int best_count = -1;
  double best_total = kInf;
  std::vector<std::pair<int, int>> best_pairs;
  bool lex_phase = false;
  std::vector<std::pair<int, int>> cur;
  std::vector<char> used(static_cast<size_t>(m), 0);

  auto consider = [&](double total) {
    int count = static_cast<int>(cur.size());
    if (!lex_phase) {
      if (count > best_count || (count == best_count && total < best_total)) {
        best_count = count;
        best_total = total;
      }
    } else if (count == best_count && total <= best_total + tol) {
      if (best_pairs.empty() || cur < best_pairs) best_pairs = cur;
    }
  };

  std::function<void(int, double)> dfs = [&](int row, double total) {
    if (row == n) {
      consider(total);
      return;
    }
    // Upper bound on achievable cardinality from here.
    if (static_cast<int>(cur.size()) + (n - row) < best_count) return;
    for (int j = 0; j < m; ++j) {
      if (used[static_cast<size_t>(j)] || cost(row, j) >= association_sentinel()) continue;
      used[static_cast<size_t>(j)] = 1;
      cur.emplace_back(row, j);
      dfs(row + 1, total + cost(row, j));
      cur.pop_back();
      used[static_cast<size_t>(j)] = 0;
    }
    dfs(row + 1, total);  // leave this row unmatched
  };

  dfs(0, 0.0);
  lex_phase = true;
  // Seed with an impossible sentinel so the first qualifying matching wins.
  best_pairs.clear();
  dfs(0, 0.0);

  IndexAssignment out;
  out.pairs = std::move(best_pairs);
  out.total_cost = 0.0;
  for (auto& [i, j] : out.pairs) out.total_cost += cost(i, j);
  return out;
}

Tensor<uint8_t> speed_filter(const std::vector<MotionStamp>& tracklets,
                             const std::vector<MotionStamp>& detections, double max_speed) {
  if (!(max_speed > 0.0)) throw ContractError("speed_filter: max_speed must be positive");
  int64_t n = static_cast<int64_t>(tracklets.size());
  int64_t m = static_cast<int64_t>(detections.size());
  Tensor<uint8_t> mask({n, m});
  bool zero_gap = false;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      const MotionStamp& t = tracklets[static_cast<size_t>(i)];
      const MotionStamp& d = detections[static_cast<size_t>(j)];
      int gap = d.frame - t.frame;
      if (gap <= 0) {
        mask(i, j) = 1;
        zero_gap = true;
        continue;
      }
      double dist = std::hypot(d.cx - t.cx, d.cy - t.cy);
      if (dist / gap > max_speed) mask(i, j) = 1;
    }
  }
  if (zero_gap) {
    std::cerr << "speed_filter: masked pairs with non-positive frame gap\n";
  }
  return mask;
}

AssignmentMatrix AssignmentMatrix::make(TensorD values) {
  AssignmentMatrix a;
  int64_t n = values.rows(), m = values.cols();
  a.values = std::move(values);
  a.mask = Tensor<uint8_t>({n, m});
  for (int64_t i = 0; i < n; ++i) a.row_ids.push_back(i);
  for (int j = 0; j < static_cast<int>(m); ++j) a.col_ids.push_back(j);
  return a;
}

Matching associate(const AssignmentMatrix& a, double tau_th, bool filter_before_match) {
  if (!(tau_th > 0.0 && tau_th < 1.0)) {
    throw ContractError("associate: tau_th must lie in (0,1)");
  }
  Matching out;
  if (a.values.numel() == 0) {
    out.unmatched_tracklets = a.row_ids;
    out.unmatched_detections = a.col_ids;
    return out;
  }
  int64_t n = a.values.rows(), m = a.values.cols();
  if (static_cast<int64_t>(a.row_ids.size()) != n ||
      static_cast<int64_t>(a.col_ids.size()) != m) {
    throw ShapeError("associate: id lists do not match matrix " + a.values.shape_str());
  }
  if (!a.values.all_finite()) throw ContractError("associate: affinities must be finite");
  if (a.mask.numel() != 0 && a.mask.shape() != a.values.shape()) {
    throw ShapeError("associate: mask shape differs from values " + a.values.shape_str());
  }

  TensorD cost({n, m});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < m; ++j) {
      bool masked = a.mask.numel() != 0 && a.mask(i, j) != 0;
      if (masked || (filter_before_match && a.values(i, j) <= tau_th)) {
        cost(i, j) = association_sentinel();
      } else {
        cost(i, j) = 1.0 - a.values(i, j);
      }
    }
  }
  IndexAssignment match = hungarian(cost);
  std::vector<char> row_used(static_cast<size_t>(n), 0), col_used(static_cast<size_t>(m), 0);
  for (auto& [i, j] : match.pairs) {
    if (a.values(i, j) <= tau_th) continue;
    out.pairs.emplace_back(a.row_ids[static_cast<size_t>(i)], a.col_ids[static_cast<size_t>(j)]);
    row_used[static_cast<size_t>(i)] = 1;
    col_used[static_cast<size_t>(j)] = 1;
  }
  for (int64_t i = 0; i < n; ++i) {
    if (!row_used[static_cast<size_t>(i)]) {
      out.unmatched_tracklets.push_back(a.row_ids[static_cast<size_t>(i)]);
    }
  }
  for (int64_t j = 0; j < m; ++j) {
    if (!col_used[static_cast<size_t>(j)]) {
      out.unmatched_detections.push_back(a.col_ids[static_cast<size_t>(j)]);
    }
  }
  return out;
}

}  // namespace stam
