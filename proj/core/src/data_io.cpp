#include "stam/data_io.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <utility>

#include "json.hpp"
#include "stam/rng.hpp"

namespace stam {

std::array<double, 4> normalize_box(const Box& b, const SequenceMeta& meta) {
  meta.validate();
  return {b.cx() / meta.width, b.cy() / meta.height, b.w / meta.width, b.h / meta.height};
}

Box denormalize_box(const std::array<double, 4>& g, const SequenceMeta& meta) {
  meta.validate();
  double w = g[2] * meta.width;
  double h = g[3] * meta.height;
  return Box{g[0] * meta.width - w / 2.0, g[1] * meta.height - h / 2.0, w, h};
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_field(const std::string& s, int line_no, const char* what) {
  const char* begin = s.c_str();
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(begin, &end);
  while (end != nullptr && (*end == ' ' || *end == '\t' || *end == '\r')) ++end;
  if (end == begin || end == nullptr || *end != '\0' || errno == ERANGE) {
    throw ParseError("bad " + std::string(what) + " field '" + s + "'", line_no);
  }
  return v;
}

int64_t parse_int_field(const std::string& s, int line_no, const char* what) {
  double v = parse_field(s, line_no, what);
  double r = std::nearbyint(v);
  if (std::fabs(v - r) > 1e-9) {
    throw ParseError(std::string(what) + " is not an integer: '" + s + "'", line_no);
  }
  return static_cast<int64_t>(r);
}

}  // namespace

std::vector<MotRecord> parse_mot_csv(const std::string& path, MotKind kind) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<MotRecord> out;
  std::string line;
  int line_no = 0;
  int skipped = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool blank = line.find_first_not_of(" \t") == std::string::npos;
    if (blank) continue;
    std::vector<std::string> f = split_commas(line);
    if (f.size() < 7) {
      throw ParseError("expected at least 7 comma-separated fields, got " +
                           std::to_string(f.size()),
                       line_no);
    }
    MotRecord r;
    r.frame = static_cast<int>(parse_int_field(f[0], line_no, "frame"));
    r.id = parse_int_field(f[1], line_no, "id");
    r.box.x = parse_field(f[2], line_no, "x");
    r.box.y = parse_field(f[3], line_no, "y");
    r.box.w = parse_field(f[4], line_no, "w");
    r.box.h = parse_field(f[5], line_no, "h");
    r.conf = parse_field(f[6], line_no, "conf");
    if (r.frame < 1) throw ParseError("frame numbers are 1-based", line_no);
    if (r.box.w <= 0.0 || r.box.h <= 0.0) {
      ++skipped;
      continue;
    }
    if (kind == MotKind::kDet) r.id = -1;
    out.push_back(r);
  }
  if (skipped > 0) {
    std::fprintf(stderr, "parse_mot_csv: skipped %d record(s) with non-positive size in %s\n",
                 skipped, path.c_str());
  }
  return out;
}

void write_results(const std::vector<Trajectory>& trajectories, const std::string& path) {
  std::vector<MotRecord> rows;
  for (const auto& t : trajectories) {
    for (const auto& b : t.boxes) {
      rows.push_back(MotRecord{b.frame, t.id, b.box, b.conf});
    }
  }
  std::sort(rows.begin(), rows.end(), [](const MotRecord& a, const MotRecord& b) {
    return a.frame != b.frame ? a.frame < b.frame : a.id < b.id;
  });
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.2f,%.2f,%.2f,%.2f,%.2f,-1,-1,-1\n", r.frame,
                  static_cast<long long>(r.id), r.box.x, r.box.y, r.box.w, r.box.h, r.conf);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path);
}

std::vector<Trajectory> trajectories_from_records(const std::vector<MotRecord>& records) {
  std::map<int64_t, Trajectory> by_id;
  for (const auto& r : records) {
    Trajectory& t = by_id[r.id];
    t.id = r.id;
    t.boxes.push_back(TrajectoryBox{r.frame, r.box, r.conf});
  }
  std::vector<Trajectory> out;
  for (auto& [id, t] : by_id) {
    std::sort(t.boxes.begin(), t.boxes.end(),
              [](const TrajectoryBox& a, const TrajectoryBox& b) { return a.frame < b.frame; });
    for (size_t i = 1; i < t.boxes.size(); ++i) {
      if (t.boxes[i].frame == t.boxes[i - 1].frame) {
        throw ContractError("trajectory " + std::to_string(id) + " has two boxes at frame " +
                            std::to_string(t.boxes[i].frame));
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<MotRecord> records_from_trajectories(const std::vector<Trajectory>& trajectories) {
  std::vector<MotRecord> out;
  for (const auto& t : trajectories) {
    for (const auto& b : t.boxes) out.push_back(MotRecord{b.frame, t.id, b.box, b.conf});
  }
  std::sort(out.begin(), out.end(), [](const MotRecord& a, const MotRecord& b) {
    return a.frame != b.frame ? a.frame < b.frame : a.id < b.id;
  });
  return out;
}

void save_meta(const SequenceMeta& meta, const std::string& path) {
  meta.validate();
  nlohmann::json j;
  j["name"] = meta.name;
  j["width"] = meta.width;
  j["height"] = meta.height;
  j["frames"] = meta.frames;
  j["frame_rate"] = meta.frame_rate;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
}

SequenceMeta load_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad meta file ") + path + ": " + e.what());
  }
  SequenceMeta m;
  m.name = j.at("name").get<std::string>();
  m.width = j.at("width").get<int>();
  m.height = j.at("height").get<int>();
  m.frames = j.at("frames").get<int>();
  m.frame_rate = j.at("frame_rate").get<double>();
  m.validate();
  return m;
}

AppearanceKey AppearanceKey::make(int frame, const Box& b) {
  auto q = [](double v) { return static_cast<int32_t>(std::llround(v * 10.0)); };
  return AppearanceKey{frame, q(b.x), q(b.y), q(b.w), q(b.h)};
}

size_t AppearanceKeyHash::operator()(const AppearanceKey& k) const {
  uint64_t h = static_cast<uint32_t>(k.frame);
  h = hash_combine(h, static_cast<uint32_t>(k.qx));
  h = hash_combine(h, static_cast<uint32_t>(k.qy));
  h = hash_combine(h, static_cast<uint32_t>(k.qw));
  h = hash_combine(h, static_cast<uint32_t>(k.qh));
  return static_cast<size_t>(h);
}

AppearanceProvider AppearanceProvider::precomputed(
    std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> table, int64_t width) {
  if (width < 1) throw ContractError("appearance width must be >= 1");
  for (const auto& [k, v] : table) {
    if (v.numel() != width) {
      throw ContractError("appearance table entry has width " + std::to_string(v.numel()) +
                          ", declared " + std::to_string(width));
    }
  }
  AppearanceProvider p;
  p.synthetic_ = false;
  p.width_ = width;
  p.table_ = std::move(table);
  return p;
}

AppearanceProvider AppearanceProvider::synthetic(
    std::unordered_map<int64_t, TensorF> bases,
    std::unordered_map<AppearanceKey, int64_t, AppearanceKeyHash> identity_of, int64_t width,
    double noise_scale, uint64_t seed) {
  if (width < 1) throw ContractError("appearance width must be >= 1");
  for (auto& [id, base] : bases) {
    if (base.numel() != width) {
      throw ContractError("identity base vector has wrong width for id " + std::to_string(id));
    }
    // Unit-normalize the base before any noise is applied.
    double n2 = 0.0;
    for (int64_t i = 0; i < base.numel(); ++i) n2 += double(base[i]) * double(base[i]);
    double n = std::sqrt(n2);
    if (n <= 0.0) throw ContractError("identity base vector is zero for id " + std::to_string(id));
    for (int64_t i = 0; i < base.numel(); ++i) base[i] = static_cast<float>(base[i] / n);
  }
  AppearanceProvider p;
  p.synthetic_ = true;
  p.width_ = width;
  p.bases_ = std::move(bases);
  p.identity_of_ = std::move(identity_of);
  p.noise_scale_ = noise_scale;
  p.seed_ = seed;
  return p;
}

TensorF AppearanceProvider::get(int frame, const Box& box) const {
  if (width_ == 0) throw ContractError("appearance provider is empty");
  AppearanceKey key = AppearanceKey::make(frame, box);
  if (!synthetic_) {
    auto it = table_.find(key);
    if (it == table_.end()) {
      throw IoError("no appearance vector for frame " + std::to_string(frame) + " box (" +
                    std::to_string(box.x) + "," + std::to_string(box.y) + "," +
                    std::to_string(box.w) + "," + std::to_string(box.h) + ")");
    }
    return it->second;
  }
  uint64_t h = seed_;
  h = hash_combine(h, static_cast<uint32_t>(key.frame));
  h = hash_combine(h, static_cast<uint32_t>(key.qx));
  h = hash_combine(h, static_cast<uint32_t>(key.qy));
  h = hash_combine(h, static_cast<uint32_t>(key.qw));
  h = hash_combine(h, static_cast<uint32_t>(key.qh));
  Rng rng(h);
  TensorF v({1, width_});
  auto it = identity_of_.find(key);
  if (it != identity_of_.end() && it->second >= 1) {
    const TensorF& base = bases_.at(it->second);
    for (int64_t i = 0; i < width_; ++i) {
      v[i] = static_cast<float>(base[i] + noise_scale_ * rng.normal());
    }
  } else {
    for (int64_t i = 0; i < width_; ++i) {
      v[i] = static_cast<float>(noise_scale_ * rng.normal());
    }
  }
  return v;
}

std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> AppearanceProvider::materialize()
    const {
  if (!synthetic_) return table_;
  std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> out;
  for (const auto& [key, id] : identity_of_) {
    Box b{key.qx / 10.0, key.qy / 10.0, key.qw / 10.0, key.qh / 10.0};
    out.emplace(key, get(key.frame, b));
  }
  return out;
}

namespace {

constexpr char kSidecarMagic[8] = {'S', 'T', 'A', 'M', 'A', 'P', 'P', 'R'};
constexpr uint8_t kSidecarVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("appearance sidecar: truncated file");
  return v;
}

}  // namespace

void save_appearance_sidecar(const AppearanceProvider& provider, const std::string& path) {
  auto table = provider.materialize();
  std::vector<std::pair<AppearanceKey, TensorF>> entries(table.begin(), table.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    const AppearanceKey &x = a.first, &y = b.first;
    return std::tie(x.frame, x.qx, x.qy, x.qw, x.qh) < std::tie(y.frame, y.qx, y.qy, y.qw, y.qh);
  });
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kSidecarMagic, 8);
  put<uint8_t>(os, kSidecarVersion);
  put<int64_t>(os, provider.width());
  put<uint64_t>(os, entries.size());
  for (const auto& [k, v] : entries) {
    put<int32_t>(os, k.frame);
    put<int32_t>(os, k.qx);
    put<int32_t>(os, k.qy);
    put<int32_t>(os, k.qw);
    put<int32_t>(os, k.qh);
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.numel() * sizeof(float)));
  }
  if (!os) throw IoError("write failed: " + path);
}

AppearanceProvider load_appearance_sidecar(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kSidecarMagic, 8) != 0) {
    throw IoError("appearance sidecar: bad magic in " + path);
  }
  uint8_t version = take<uint8_t>(is);
  if (version != kSidecarVersion) {
    throw IoError("appearance sidecar: unsupported version " + std::to_string(int(version)));
  }
  int64_t width = take<int64_t>(is);
  uint64_t count = take<uint64_t>(is);
  if (width < 1) throw IoError("appearance sidecar: bad width");
  std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> table;
  table.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    AppearanceKey k;
    k.frame = take<int32_t>(is);
    k.qx = take<int32_t>(is);
    k.qy = take<int32_t>(is);
    k.qw = take<int32_t>(is);
    k.qh = take<int32_t>(is);
    TensorF v({1, width});
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(width * sizeof(float)));
    if (!is) throw IoError("appearance sidecar: truncated entry");
    table.emplace(k, std::move(v));
  }
  return AppearanceProvider::precomputed(std::move(table), width);
}

void SynthSpec::validate() const {
  auto rate_ok = [](double r) { return r >= 0.0 && r < 1.0; };
  if (objects < 1) throw ContractError("synth: need at least one object");
  if (frames < 2) throw ContractError("synth: need at least two frames");
  if (width < 8 || height < 8) throw ContractError("synth: image too small");
  if (!rate_ok(drop_rate) || !rate_ok(fp_rate) || !rate_ok(occlusion_rate)) {
    throw ContractError("synth: rates must lie in [0, 1)");
  }
  if (occlusion_max < 1) throw ContractError("synth: occlusion_max must be >= 1");
  if (min_size <= 0.0 || max_size < min_size) throw ContractError("synth: bad size range");
  if (max_size * 2.0 >= std::min(width, height)) {
    throw ContractError("synth: objects too large for the image");
  }
  if (appearance_dim < 1) throw ContractError("synth: appearance_dim must be >= 1");
  if (speed < 0.0 || motion_sigma < 0.0 || jitter_sigma < 0.0 || appearance_noise < 0.0) {
    throw ContractError("synth: negative noise scale");
  }
}

SynthResult synth_generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  SynthResult out;
  out.meta.name = spec.name;
  out.meta.width = spec.width;
  out.meta.height = spec.height;
  out.meta.frames = spec.frames;

  std::unordered_map<int64_t, TensorF> bases;
  for (int i = 0; i < spec.objects; ++i) {
    TensorF base({1, spec.appearance_dim});
    for (int64_t c = 0; c < spec.appearance_dim; ++c) {
      base[c] = static_cast<float>(rng.normal());
    }
    bases.emplace(i + 1, std::move(base));  // ids are 1-based; 0 marks distractors
  }

  struct ObjState {
    double cx, cy, vx, vy, w, h;
    int occluded_left = 0;
  };
  std::vector<ObjState> objs;
  for (int i = 0; i < spec.objects; ++i) {
    ObjState o;
    o.w = rng.uniform(spec.min_size, spec.max_size);
    o.h = rng.uniform(spec.min_size, spec.max_size);
    o.cx = rng.uniform(o.w / 2, spec.width - o.w / 2);
    o.cy = rng.uniform(o.h / 2, spec.height - o.h / 2);
    double ang = rng.uniform(0.0, 2.0 * M_PI);
    double mag = spec.speed * rng.uniform(0.5, 1.5);
    o.vx = mag * std::cos(ang);
    o.vy = mag * std::sin(ang);
    objs.push_back(o);
  }

  std::unordered_map<AppearanceKey, int64_t, AppearanceKeyHash> identity_of;

  auto reflect = [](double& pos, double& vel, double lo, double hi) {
    for (int guard = 0; guard < 64 && (pos < lo || pos > hi); ++guard) {
      if (pos < lo) {
        pos = 2 * lo - pos;
        vel = -vel;
      } else if (pos > hi) {
        pos = 2 * hi - pos;
        vel = -vel;
      }
    }
  };

  for (int f = 1; f <= spec.frames; ++f) {
    for (int i = 0; i < spec.objects; ++i) {
      ObjState& o = objs[static_cast<size_t>(i)];
      if (f > 1) {
        o.cx += o.vx + rng.normal(0.0, spec.motion_sigma);
        o.cy += o.vy + rng.normal(0.0, spec.motion_sigma);
        reflect(o.cx, o.vx, o.w / 2, spec.width - o.w / 2);
        reflect(o.cy, o.vy, o.h / 2, spec.height - o.h / 2);
      }
      Box gt_box{o.cx - o.w / 2, o.cy - o.h / 2, o.w, o.h};
      out.gt.push_back(MotRecord{f, i + 1, gt_box, 1.0});

      bool occluded = false;
      if (o.occluded_left > 0) {
        occluded = true;
        --o.occluded_left;
      } else if (spec.occlusion_rate > 0.0 && rng.bernoulli(spec.occlusion_rate)) {
        occluded = true;
        o.occluded_left = static_cast<int>(rng.uniform_int(spec.occlusion_max));
      }
      bool dropped = rng.bernoulli(spec.drop_rate);
      double jx = rng.normal(0.0, spec.jitter_sigma);
      double jy = rng.normal(0.0, spec.jitter_sigma);
      double jw = rng.normal(0.0, spec.jitter_sigma);
      double jh = rng.normal(0.0, spec.jitter_sigma);
      double conf = rng.uniform(0.85, 1.0);
      if (occluded || dropped) continue;
      Box det_box{gt_box.x + jx, gt_box.y + jy, std::max(1.0, gt_box.w + jw),
                  std::max(1.0, gt_box.h + jh)};
      out.det.push_back(MotRecord{f, -1, det_box, conf});
      identity_of[AppearanceKey::make(f, det_box)] = i + 1;
    }
    for (int i = 0; i < spec.objects; ++i) {
      if (!rng.bernoulli(spec.fp_rate)) continue;
      double w = rng.uniform(spec.min_size, spec.max_size);
      double h = rng.uniform(spec.min_size, spec.max_size);
      double cx = rng.uniform(w / 2, spec.width - w / 2);
      double cy = rng.uniform(h / 2, spec.height - h / 2);
      Box fp{cx - w / 2, cy - h / 2, w, h};
      out.det.push_back(MotRecord{f, -1, fp, rng.uniform(0.5, 0.9)});
      identity_of[AppearanceKey::make(f, fp)] = 0;  // distractor: pure noise
    }
  }

  out.appearance =
      AppearanceProvider::synthetic(std::move(bases), std::move(identity_of),
                                    spec.appearance_dim, spec.appearance_noise,
                                    hash_combine(spec.seed, 0xA99EEDull));
  return out;
}

}  // namespace stam
