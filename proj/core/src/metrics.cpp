#include "stam/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "stam/association.hpp"
#include "stam/geometry.hpp"

namespace stam {

namespace {

struct FrameBox {
  int64_t id;
  Box box;
};

std::map<int, std::vector<FrameBox>> by_frame(const std::vector<MotRecord>& records) {
  std::map<int, std::vector<FrameBox>> out;
  for (const auto& r : records) out[r.frame].push_back(FrameBox{r.id, r.box});
  return out;
}

}  // namespace

ClearMotResult clear_mot(const std::vector<MotRecord>& gt, const std::vector<MotRecord>& preds,
                         double iou_min) {
  if (gt.empty()) throw ContractError("clear_mot: no ground truth boxes");
  if (iou_min <= 0.0 || iou_min >= 1.0) throw ContractError("clear_mot: iou_min outside (0,1)");

  auto gt_frames = by_frame(gt);
  auto pred_frames = by_frame(preds);

  ClearMotResult res;
  res.gt_count = static_cast<int64_t>(gt.size());

  std::unordered_map<int64_t, int64_t> last_pred;  // gt id -> last matched pred id
  std::unordered_map<int64_t, int64_t> lifespan, tracked;

  std::set<int> frames;
  for (const auto& [f, v] : gt_frames) frames.insert(f);
  for (const auto& [f, v] : pred_frames) frames.insert(f);

  for (int f : frames) {
    auto git = gt_frames.find(f);
    auto pit = pred_frames.find(f);
    const std::vector<FrameBox> empty;
    const std::vector<FrameBox>& g = git != gt_frames.end() ? git->second : empty;
    const std::vector<FrameBox>& p = pit != pred_frames.end() ? pit->second : empty;
    for (const auto& fb : g) ++lifespan[fb.id];

    std::vector<bool> g_used(g.size(), false), p_used(p.size(), false);

    // Keep last frame's correspondence when both ends persist and still align.
    for (size_t i = 0; i < g.size(); ++i) {
      auto it = last_pred.find(g[i].id);
      if (it == last_pred.end()) continue;
      for (size_t j = 0; j < p.size(); ++j) {
        if (p_used[j] || p[j].id != it->second) continue;
        if (iou(g[i].box, p[j].box) >= iou_min) {
          g_used[i] = true;
          p_used[j] = true;
          ++tracked[g[i].id];
        }
        break;
      }
    }

    // Hungarian over what remains, gated at the IoU threshold.
    std::vector<size_t> g_rest, p_rest;
    for (size_t i = 0; i < g.size(); ++i) {
      if (!g_used[i]) g_rest.push_back(i);
    }
    for (size_t j = 0; j < p.size(); ++j) {
      if (!p_used[j]) p_rest.push_back(j);
    }
    if (!g_rest.empty() && !p_rest.empty()) {
      TensorD cost({static_cast<int64_t>(g_rest.size()), static_cast<int64_t>(p_rest.size())});
      for (size_t a = 0; a < g_rest.size(); ++a) {
        for (size_t b = 0; b < p_rest.size(); ++b) {
          double ov = iou(g[g_rest[a]].box, p[p_rest[b]].box);
          cost(static_cast<int64_t>(a), static_cast<int64_t>(b)) =
              ov >= iou_min ? 1.0 - ov : association_sentinel();
        }
      }
      for (const auto& [a, b] : hungarian(cost).pairs) {
        const FrameBox& gb = g[g_rest[static_cast<size_t>(a)]];
        const FrameBox& pb = p[p_rest[static_cast<size_t>(b)]];
        g_used[g_rest[static_cast<size_t>(a)]] = true;
        p_used[p_rest[static_cast<size_t>(b)]] = true;
        ++tracked[gb.id];
        auto it = last_pred.find(gb.id);
        if (it != last_pred.end() && it->second != pb.id) ++res.id_switches;
        last_pred[gb.id] = pb.id;
      }
    }

    for (size_t i = 0; i < g.size(); ++i) {
      if (!g_used[i]) ++res.fn;
    }
    for (size_t j = 0; j < p.size(); ++j) {
      if (!p_used[j]) ++res.fp;
    }
  }

  res.gt_tracks = static_cast<int>(lifespan.size());
  for (const auto& [id, life] : lifespan) {
    double ratio = static_cast<double>(tracked[id]) / static_cast<double>(life);
    if (ratio >= 0.8) ++res.mt;
    if (ratio <= 0.2) ++res.ml;
  }
  res.mota = 1.0 - static_cast<double>(res.fp + res.fn + res.id_switches) /
                       static_cast<double>(res.gt_count);
  return res;
}

Idf1Result idf1(const std::vector<MotRecord>& gt, const std::vector<MotRecord>& preds,
                double iou_min) {
  if (gt.empty()) throw ContractError("idf1: no ground truth boxes");
  if (iou_min <= 0.0 || iou_min >= 1.0) throw ContractError("idf1: iou_min outside (0,1)");

  // id -> frame -> box
  auto group = [](const std::vector<MotRecord>& records) {
    std::map<int64_t, std::map<int, Box>> out;
    for (const auto& r : records) out[r.id][r.frame] = r.box;
    return out;
  };
  auto gt_traj = group(gt);
  auto pr_traj = group(preds);

  std::vector<const std::map<int, Box>*> gs, ps;
  std::vector<int64_t> glen, plen;
  for (const auto& [id, t] : gt_traj) {
    gs.push_back(&t);
    glen.push_back(static_cast<int64_t>(t.size()));
  }
  for (const auto& [id, t] : pr_traj) {
    ps.push_back(&t);
    plen.push_back(static_cast<int64_t>(t.size()));
  }

  Idf1Result res;
  int64_t total_gt = static_cast<int64_t>(gt.size());
  int64_t total_pr = static_cast<int64_t>(preds.size());
  if (ps.empty()) {
    res.idtp = 0;
    res.idfp = 0;
    res.idfn = total_gt;
    res.idf1 = 0.0;
    return res;
  }

  int64_t ng = static_cast<int64_t>(gs.size());
  int64_t np = static_cast<int64_t>(ps.size());

  // Gated frame overlap per trajectory pair.
  auto overlap = [&](int64_t a, int64_t b) {
    int64_t o = 0;
    const auto& ta = *gs[static_cast<size_t>(a)];
    const auto& tb = *ps[static_cast<size_t>(b)];
    const auto& small = ta.size() <= tb.size() ? ta : tb;
    const auto& large = ta.size() <= tb.size() ? tb : ta;
    for (const auto& [f, box] : small) {
      auto it = large.find(f);
      if (it != large.end() && iou(box, it->second) >= iou_min) ++o;
    }
    return o;
  };

  // Square assignment with per-trajectory dummies: unmatched lengths are paid
  // either way, so the minimum cost maximizes total overlap exactly.
  const double forbid = association_sentinel();
  TensorD cost({ng + np, np + ng}, 0.0);
  for (int64_t i = 0; i < ng; ++i) {
    for (int64_t j = 0; j < np; ++j) {
      cost(i, j) = static_cast<double>(glen[static_cast<size_t>(i)] +
                                       plen[static_cast<size_t>(j)] - 2 * overlap(i, j));
    }
    for (int64_t j = 0; j < ng; ++j) {
      cost(i, np + j) = i == j ? static_cast<double>(glen[static_cast<size_t>(i)]) : forbid;
    }
  }
  for (int64_t i = 0; i < np; ++i) {
    for (int64_t j = 0; j < np; ++j) {
      cost(ng + i, j) = i == j ? static_cast<double>(plen[static_cast<size_t>(i)]) : forbid;
    }
    // dummy-dummy pairs stay at zero cost
  }

  for (const auto& [r, c] : hungarian(cost).pairs) {
    if (r < ng && c < np) res.idtp += overlap(r, c);
  }
  res.idfp = total_pr - res.idtp;
  res.idfn = total_gt - res.idtp;
  res.idf1 = 2.0 * static_cast<double>(res.idtp) /
             static_cast<double>(2 * res.idtp + res.idfp + res.idfn);
  return res;
}

EvalReport evaluate(const std::string& name, const std::vector<MotRecord>& gt,
                    const std::vector<MotRecord>& preds, double iou_min) {
  EvalReport r;
  r.name = name;
  r.clear = clear_mot(gt, preds, iou_min);
  r.identity = idf1(gt, preds, iou_min);
  return r;
}

EvalReport aggregate(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ContractError("aggregate: no reports");
  EvalReport out;
  out.name = "OVERALL";
  for (const auto& r : reports) {
    out.clear.fp += r.clear.fp;
    out.clear.fn += r.clear.fn;
    out.clear.id_switches += r.clear.id_switches;
    out.clear.gt_count += r.clear.gt_count;
    out.clear.mt += r.clear.mt;
    out.clear.ml += r.clear.ml;
    out.clear.gt_tracks += r.clear.gt_tracks;
    out.identity.idtp += r.identity.idtp;
    out.identity.idfp += r.identity.idfp;
    out.identity.idfn += r.identity.idfn;
  }
  out.clear.mota = 1.0 - static_cast<double>(out.clear.fp + out.clear.fn +
                                             out.clear.id_switches) /
                             static_cast<double>(out.clear.gt_count);
  out.identity.idf1 =
      2.0 * static_cast<double>(out.identity.idtp) /
      static_cast<double>(2 * out.identity.idtp + out.identity.idfp + out.identity.idfn);
  return out;
}

std::string report_table(const std::vector<EvalReport>& reports) {
  char line[256];
  std::string out;
  std::snprintf(line, sizeof(line), "%-16s %8s %8s %6s %6s %5s %5s %5s %8s %8s\n", "sequence",
                "MOTA", "IDF1", "FP", "FN", "IDs", "MT", "ML", "IDTP", "GT");
  out += line;
  for (const auto& r : reports) {
    std::snprintf(line, sizeof(line), "%-16s %8.4f %8.4f %6lld %6lld %5lld %5d %5d %8lld %8lld\n",
                  r.name.c_str(), r.clear.mota, r.identity.idf1,
                  static_cast<long long>(r.clear.fp), static_cast<long long>(r.clear.fn),
                  static_cast<long long>(r.clear.id_switches), r.clear.mt, r.clear.ml,
                  static_cast<long long>(r.identity.idtp),
                  static_cast<long long>(r.clear.gt_count));
    out += line;
  }
  return out;
}

void write_report_csv(const std::vector<EvalReport>& reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "sequence,mota,idf1,fp,fn,id_switches,mt,ml,gt_tracks,idtp,idfp,idfn,gt_count\n";
  for (const auto& r : reports) {
    char line[256];
    std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%lld,%lld,%lld,%d,%d,%d,%lld,%lld,%lld,%lld\n",
                  r.name.c_str(), r.clear.mota, r.identity.idf1,
                  static_cast<long long>(r.clear.fp), static_cast<long long>(r.clear.fn),
                  static_cast<long long>(r.clear.id_switches), r.clear.mt, r.clear.ml,
                  r.clear.gt_tracks, static_cast<long long>(r.identity.idtp),
                  static_cast<long long>(r.identity.idfp),
                  static_cast<long long>(r.identity.idfn),
                  static_cast<long long>(r.clear.gt_count));
    out << line;
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace stam
