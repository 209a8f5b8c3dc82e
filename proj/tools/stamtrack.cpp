#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stam/checkpoint.hpp"
#include "stam/data_io.hpp"
#include "stam/errors.hpp"
#include "stam/experiment.hpp"
#include "stam/metrics.hpp"
#include "stam/model.hpp"
#include "stam/rng.hpp"
#include "stam/tracker.hpp"
#include "stam/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace stam;

/// Everything one run needs. Defaults mirror the calibrated reference
/// experiment, so an absent config file reproduces the standard recipe.
struct RunConfig {
  uint64_t seed = 0;
  int threads = 1;
  ModelConfig model;
  TrainOptions training;
  int rotations = 0;
  uint64_t rotation_seed = 0;
  TrackerConfig tracker;
  bool tracker_window_pinned = false;  // config file set tracker.window_T itself
  std::string data_root;               // empty: $STAMTRACK_DATA_ROOT, then "."
  double det_min_conf = 0.85;
  SynthSpec synth;
  int suite_sequences = 3;
  int suite_holdout = 0;

  RunConfig() {
    ExperimentSpec base = default_experiment();
    seed = base.train_seed;
    model = base.model;
    training = base.training;
    rotations = base.rotations;
    rotation_seed = base.rotation_seed;
    tracker = base.tracker;
    det_min_conf = base.det_min_conf;
    synth = base.scenario;
    suite_sequences = base.sequences;
    suite_holdout = base.holdout;
  }

  ExperimentSpec experiment() const {
    ExperimentSpec spec;
    spec.scenario = synth;
    spec.sequences = suite_sequences;
    spec.holdout = suite_holdout;
    spec.model = model;
    spec.training = training;
    spec.tracker = tracker;
    spec.det_min_conf = det_min_conf;
    spec.rotations = rotations;
    spec.train_seed = seed;
    spec.rotation_seed = rotation_seed;
    return spec;
  }
};

void reject_unknown(const json& obj, const std::string& where,
                    std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    const std::string& key = item.key();
    bool known = std::any_of(allowed.begin(), allowed.end(),
                             [&](const char* a) { return key == a; });
    if (!known) throw ContractError("config: unknown key \"" + key + "\" in " + where);
  }
}

const json* section(const json& root, const char* name) {
  if (!root.contains(name)) return nullptr;
  const json& s = root.at(name);
  if (!s.is_object()) {
    throw ContractError(std::string("config: section \"") + name + "\" must be an object");
  }
  return &s;
}

template <typename T>
void read_key(const json& obj, const char* key, T& into) {
  if (obj.contains(key)) obj.at(key).get_to(into);
}

QueryFusion fusion_from_name(const std::string& name) {
  if (name == "subtract") return QueryFusion::kSubtract;
  if (name == "add") return QueryFusion::kAdd;
  if (name == "concat") return QueryFusion::kConcat;
  throw ContractError("config: fusion must be subtract, add or concat, not \"" + name + "\"");
}

void apply_config(RunConfig& cfg, const json& root) {
  if (!root.is_object()) throw ContractError("config: top level must be a JSON object");
  reject_unknown(root, "the top level",
                 {"seed", "threads", "model", "optimizer", "training", "tracker", "data", "synth"});
  read_key(root, "seed", cfg.seed);
  read_key(root, "threads", cfg.threads);
  if (const json* m = section(root, "model")) {
    reject_unknown(*m, "model",
                   {"d", "heads", "layers", "ffn_dim", "appearance_dim", "window_T", "fusion",
                    "use_aspe", "use_rstpe"});
    read_key(*m, "d", cfg.model.d);
    read_key(*m, "heads", cfg.model.heads);
    read_key(*m, "layers", cfg.model.layers);
    read_key(*m, "ffn_dim", cfg.model.ffn_dim);
    read_key(*m, "appearance_dim", cfg.model.appearance_dim);
    read_key(*m, "window_T", cfg.model.window_T);
    if (m->contains("fusion")) {
      cfg.model.fusion = fusion_from_name(m->at("fusion").get<std::string>());
    }
    read_key(*m, "use_aspe", cfg.model.use_aspe);
    read_key(*m, "use_rstpe", cfg.model.use_rstpe);
  }
  if (const json* o = section(root, "optimizer")) {
    reject_unknown(*o, "optimizer",
                   {"learning_rate", "weight_decay", "momentum", "batch_size", "epochs"});
    read_key(*o, "learning_rate", cfg.training.optimizer.learning_rate);
    read_key(*o, "weight_decay", cfg.training.optimizer.weight_decay);
    read_key(*o, "momentum", cfg.training.optimizer.momentum);
    read_key(*o, "batch_size", cfg.training.optimizer.batch_size);
    read_key(*o, "epochs", cfg.training.optimizer.epochs);
  }
  if (const json* t = section(root, "training")) {
    reject_unknown(*t, "training",
                   {"drop_prob", "negative_ratio", "distractor_keep", "windows_per_epoch",
                    "rotations", "rotation_seed"});
    read_key(*t, "drop_prob", cfg.training.drop_prob);
    read_key(*t, "negative_ratio", cfg.training.negative_ratio);
    read_key(*t, "distractor_keep", cfg.training.distractor_keep);
    read_key(*t, "windows_per_epoch", cfg.training.windows_per_epoch);
    read_key(*t, "rotations", cfg.rotations);
    read_key(*t, "rotation_seed", cfg.rotation_seed);
  }
  if (const json* t = section(root, "tracker")) {
    reject_unknown(*t, "tracker", {"window_T", "tau_th", "max_speed", "max_interp_gap"});
    if (t->contains("window_T")) {
      t->at("window_T").get_to(cfg.tracker.window_T);
      cfg.tracker_window_pinned = true;
    }
    read_key(*t, "tau_th", cfg.tracker.tau_th);
    read_key(*t, "max_speed", cfg.tracker.max_speed);
    if (t->contains("max_interp_gap")) {
      int gap = t->at("max_interp_gap").get<int>();
      cfg.tracker.max_interp_gap = gap < 0 ? std::numeric_limits<int>::max() : gap;
    }
  }
  if (const json* d = section(root, "data")) {
    reject_unknown(*d, "data", {"root", "det_min_conf"});
    read_key(*d, "root", cfg.data_root);
    read_key(*d, "det_min_conf", cfg.det_min_conf);
  }
  if (const json* s = section(root, "synth")) {
    reject_unknown(*s, "synth",
                   {"name", "objects", "frames", "width", "height", "speed", "motion_sigma",
                    "jitter_sigma", "drop_rate", "fp_rate", "occlusion_rate", "occlusion_max",
                    "appearance_noise", "appearance_dim", "min_size", "max_size", "seed",
                    "sequences", "holdout"});
    read_key(*s, "name", cfg.synth.name);
    read_key(*s, "objects", cfg.synth.objects);
    read_key(*s, "frames", cfg.synth.frames);
    read_key(*s, "width", cfg.synth.width);
    read_key(*s, "height", cfg.synth.height);
    read_key(*s, "speed", cfg.synth.speed);
    read_key(*s, "motion_sigma", cfg.synth.motion_sigma);
    read_key(*s, "jitter_sigma", cfg.synth.jitter_sigma);
    read_key(*s, "drop_rate", cfg.synth.drop_rate);
    read_key(*s, "fp_rate", cfg.synth.fp_rate);
    read_key(*s, "occlusion_rate", cfg.synth.occlusion_rate);
    read_key(*s, "occlusion_max", cfg.synth.occlusion_max);
    read_key(*s, "appearance_noise", cfg.synth.appearance_noise);
    read_key(*s, "appearance_dim", cfg.synth.appearance_dim);
    read_key(*s, "min_size", cfg.synth.min_size);
    read_key(*s, "max_size", cfg.synth.max_size);
    read_key(*s, "seed", cfg.synth.seed);
    read_key(*s, "sequences", cfg.suite_sequences);
    read_key(*s, "holdout", cfg.suite_holdout);
  }
}

RunConfig load_run_config(const std::string& path) {
  RunConfig cfg;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    json root;
    try {
      root = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ParseError("config " + path + ": " + e.what());
    }
    apply_config(cfg, root);
  }
  // The tracker window follows the model window unless the file pinned it.
  if (!cfg.tracker_window_pinned) cfg.tracker.window_T = static_cast<int>(cfg.model.window_T);
  return cfg;
}

void validate_config(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.training.validate();
  cfg.tracker.validate();
  cfg.synth.validate();
  if (cfg.threads < 1) throw ContractError("config: threads must be >= 1");
  if (cfg.rotations < 0) throw ContractError("config: rotations must be >= 0");
  if (cfg.det_min_conf < 0.0 || cfg.det_min_conf > 1.0) {
    throw ContractError("config: det_min_conf must be in [0, 1]");
  }
}

std::string effective_root(const RunConfig& cfg) {
  if (!cfg.data_root.empty()) return cfg.data_root;
  if (const char* env = std::getenv("STAMTRACK_DATA_ROOT"); env != nullptr && *env != '\0') {
    return env;
  }
  return ".";
}

std::string resolve(const std::string& path, const std::string& root) {
  fs::path p(path);
  if (p.is_absolute()) return path;
  return (fs::path(root) / p).string();
}

json effective_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["threads"] = cfg.threads;
  j["model"] = {{"d", cfg.model.d},
                {"heads", cfg.model.heads},
                {"layers", cfg.model.layers},
                {"ffn_dim", cfg.model.ffn_dim},
                {"appearance_dim", cfg.model.appearance_dim},
                {"window_T", cfg.model.window_T},
                {"fusion", fusion_name(cfg.model.fusion)},
                {"use_aspe", cfg.model.use_aspe},
                {"use_rstpe", cfg.model.use_rstpe}};
  j["optimizer"] = {{"learning_rate", cfg.training.optimizer.learning_rate},
                    {"weight_decay", cfg.training.optimizer.weight_decay},
                    {"momentum", cfg.training.optimizer.momentum},
                    {"batch_size", cfg.training.optimizer.batch_size},
                    {"epochs", cfg.training.optimizer.epochs}};
  j["training"] = {{"drop_prob", cfg.training.drop_prob},
                   {"negative_ratio", cfg.training.negative_ratio},
                   {"distractor_keep", cfg.training.distractor_keep},
                   {"windows_per_epoch", cfg.training.windows_per_epoch},
                   {"rotations", cfg.rotations},
                   {"rotation_seed", cfg.rotation_seed}};
  int gap = cfg.tracker.max_interp_gap;
  j["tracker"] = {{"window_T", cfg.tracker.window_T},
                  {"tau_th", cfg.tracker.tau_th},
                  {"max_speed", cfg.tracker.max_speed},
                  {"max_interp_gap", gap == std::numeric_limits<int>::max() ? -1 : gap}};
  j["data"] = {{"root", effective_root(cfg)}, {"det_min_conf", cfg.det_min_conf}};
  j["synth"] = {{"name", cfg.synth.name},
                {"objects", cfg.synth.objects},
                {"frames", cfg.synth.frames},
                {"width", cfg.synth.width},
                {"height", cfg.synth.height},
                {"speed", cfg.synth.speed},
                {"motion_sigma", cfg.synth.motion_sigma},
                {"jitter_sigma", cfg.synth.jitter_sigma},
                {"drop_rate", cfg.synth.drop_rate},
                {"fp_rate", cfg.synth.fp_rate},
                {"occlusion_rate", cfg.synth.occlusion_rate},
                {"occlusion_max", cfg.synth.occlusion_max},
                {"appearance_noise", cfg.synth.appearance_noise},
                {"appearance_dim", cfg.synth.appearance_dim},
                {"min_size", cfg.synth.min_size},
                {"max_size", cfg.synth.max_size},
                {"seed", cfg.synth.seed},
                {"sequences", cfg.suite_sequences},
                {"holdout", cfg.suite_holdout}};
  return j;
}

fs::path prepare_run_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

/// Mirrors human-readable output to stdout and to log.txt in the run dir.
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const fs::path& dir) : file_((dir / "log.txt").string()) {
    if (!file_) throw IoError("cannot open log in " + dir.string());
  }
  void line(std::string s) {
    while (!s.empty() && s.back() == '\n') s.pop_back();
    std::cout << s << "\n";
    if (file_.is_open()) {
      file_ << s << "\n";
      file_.flush();
    }
  }

 private:
  std::ofstream file_;
};

std::string fmt4(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

/// Plain MOT rows. Box coordinates are quantized to the appearance sidecar's
/// 0.1 px grid before writing so a parsed row rebuilds the exact lookup key.
void write_mot_rows(std::vector<MotRecord> rows, const std::string& path) {
  std::stable_sort(rows.begin(), rows.end(), [](const MotRecord& a, const MotRecord& b) {
    return a.frame != b.frame ? a.frame < b.frame : a.id < b.id;
  });
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  auto q = [](double v) { return static_cast<double>(std::llround(v * 10.0)) / 10.0; };
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%.1f,%.1f,%.1f,%.1f,%.6f,-1,-1,-1\n", r.frame,
                  static_cast<long long>(r.id), q(r.box.x), q(r.box.y), q(r.box.w), q(r.box.h),
                  r.conf);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path);
}

struct SequenceDir {
  SequenceMeta meta;
  std::vector<MotRecord> gt;
  std::vector<MotRecord> det;
  AppearanceProvider appearance;
};

SequenceDir load_sequence_dir(const std::string& dir) {
  fs::path p(dir);
  SequenceDir s;
  s.meta = load_meta((p / "meta.json").string());
  s.gt = parse_mot_csv((p / "gt.txt").string(), MotKind::kGt);
  s.det = parse_mot_csv((p / "det.txt").string(), MotKind::kDet);
  s.appearance = load_appearance_sidecar((p / "appearance.bin").string());
  return s;
}

json report_json(const EvalReport& r) {
  return {{"sequence", r.name},
          {"mota", r.clear.mota},
          {"idf1", r.identity.idf1},
          {"fp", r.clear.fp},
          {"fn", r.clear.fn},
          {"id_switches", r.clear.id_switches},
          {"gt_count", r.clear.gt_count},
          {"mt", r.clear.mt},
          {"ml", r.clear.ml},
          {"gt_tracks", r.clear.gt_tracks},
          {"idtp", r.identity.idtp},
          {"idfp", r.identity.idfp},
          {"idfn", r.identity.idfn}};
}

void cmd_synth(RunConfig cfg, std::optional<uint64_t> seed, const std::string& out) {
  if (seed) cfg.synth.seed = *seed;
  validate_config(cfg);
  fs::path dir = prepare_run_dir(out);
  RunLog log(dir);
  write_json_file(dir / "config.json", effective_json(cfg));
  SynthResult seq = synth_generate(cfg.synth);
  write_mot_rows(seq.gt, (dir / "gt.txt").string());
  write_mot_rows(seq.det, (dir / "det.txt").string());
  save_appearance_sidecar(seq.appearance, (dir / "appearance.bin").string());
  save_meta(seq.meta, (dir / "meta.json").string());
  log.line("synth: " + seq.meta.name + ": " + std::to_string(cfg.synth.objects) + " objects, " +
           std::to_string(seq.meta.frames) + " frames, " + std::to_string(seq.gt.size()) +
           " gt rows, " + std::to_string(seq.det.size()) + " det rows -> " + dir.string());
  write_json_file(dir / "summary.json",
                  {{"command", "synth"},
                   {"name", seq.meta.name},
                   {"frames", seq.meta.frames},
                   {"objects", cfg.synth.objects},
                   {"gt_rows", seq.gt.size()},
                   {"det_rows", seq.det.size()},
                   {"files", {"gt.txt", "det.txt", "appearance.bin", "meta.json"}}});
}

void cmd_train(RunConfig cfg, std::optional<uint64_t> seed,
               const std::vector<std::string>& data_dirs, const std::string& out) {
  if (seed) cfg.seed = *seed;
  validate_config(cfg);
  if (data_dirs.empty()) throw ContractError("train: at least one --data directory is required");
  fs::path dir = prepare_run_dir(out);
  RunLog log(dir);
  write_json_file(dir / "config.json", effective_json(cfg));
  const std::string root = effective_root(cfg);

  std::vector<TrainSequence> dataset;
  for (size_t i = 0; i < data_dirs.size(); ++i) {
    SequenceDir src = load_sequence_dir(resolve(data_dirs[i], root));
    TrainSequence base;
    base.meta = src.meta;
    base.labeled = replace_gt_with_detections(src.gt, gate_detections(src.det, cfg.det_min_conf));
    base.appearance = src.appearance;
    log.line("train: loaded " + base.meta.name + ": " + std::to_string(base.labeled.size()) +
             " labeled detections");
    if (cfg.rotations == 0) {
      dataset.push_back(std::move(base));
      continue;
    }
    for (int r = 0; r < cfg.rotations; ++r) {
      TrainSequence copy = base;
      copy.appearance = rotate_appearance(
          base.appearance, hash_combine(cfg.rotation_seed, i * 100 + static_cast<uint64_t>(r)));
      dataset.push_back(std::move(copy));
    }
  }

  TrainOptions opt = cfg.training;
  opt.checkpoint_dir = (dir / "checkpoints").string();
  opt.loss_csv = (dir / "loss.csv").string();
  log.line("train: " + std::to_string(dataset.size()) + " training copies, " +
           std::to_string(opt.optimizer.epochs) + " epochs x " +
           std::to_string(opt.windows_per_epoch) + " windows, seed " + std::to_string(cfg.seed));

  TrainResult result = train(dataset, cfg.model, opt, cfg.seed);

  for (int epoch = 1; epoch <= opt.optimizer.epochs; ++epoch) {
    double sum = 0.0;
    int n = 0;
    for (const auto& p : result.curve) {
      if (p.epoch == epoch) {
        sum += p.loss;
        ++n;
      }
    }
    if (n > 0) {
      log.line("train: epoch " + std::to_string(epoch) + " mean loss " + fmt4(sum / n));
    }
  }

  std::string model_path = (dir / "model.ckpt").string();
  save_checkpoint(model_path, result.params);
  double final_loss = result.curve.empty() ? 0.0 : result.curve.back().loss;
  log.line("train: wrote " + model_path);
  write_json_file(dir / "summary.json", {{"command", "train"},
                                         {"sequences", data_dirs.size()},
                                         {"training_copies", dataset.size()},
                                         {"steps", result.curve.size()},
                                         {"final_loss", final_loss},
                                         {"checkpoint", "model.ckpt"},
                                         {"loss_csv", "loss.csv"}});
}

void cmd_track(RunConfig cfg, const std::string& checkpoint, const std::string& det_file,
               const std::string& appearance_file, const std::string& meta_file,
               const std::string& out) {
  fs::path dir = prepare_run_dir(out);
  RunLog log(dir);
  const std::string root = effective_root(cfg);

  ModelParams params = load_checkpoint(resolve(checkpoint, root));
  // The checkpoint owns the model shape; the tracker window follows it unless
  // the config pinned one.
  if (!cfg.tracker_window_pinned) {
    cfg.tracker.window_T = static_cast<int>(params.config.window_T);
  }
  cfg.tracker.validate();
  write_json_file(dir / "config.json", effective_json(cfg));

  SequenceMeta meta = load_meta(resolve(meta_file, root));
  std::vector<MotRecord> det =
      gate_detections(parse_mot_csv(resolve(det_file, root), MotKind::kDet), cfg.det_min_conf);
  AppearanceProvider appearance = load_appearance_sidecar(resolve(appearance_file, root));

  ModelAffinity affinity(std::move(params));
  std::vector<Trajectory> tracks = run_sequence(det, appearance, meta, affinity, cfg.tracker);
  std::string results_path = (dir / "results.txt").string();
  write_results(tracks, results_path);

  int64_t boxes = 0;
  for (const auto& t : tracks) boxes += static_cast<int64_t>(t.boxes.size());
  log.line("track: " + meta.name + ": " + std::to_string(det.size()) + " detections kept -> " +
           std::to_string(tracks.size()) + " tracks, " + std::to_string(boxes) + " boxes");
  write_json_file(dir / "summary.json", {{"command", "track"},
                                         {"sequence", meta.name},
                                         {"detections", det.size()},
                                         {"tracks", tracks.size()},
                                         {"boxes", boxes},
                                         {"results", "results.txt"}});
}

void cmd_eval(const RunConfig& cfg, const std::string& gt_file, const std::string& results_file,
              std::string name, const std::string& out) {
  const std::string root = effective_root(cfg);
  if (name.empty()) name = fs::path(results_file).stem().string();
  std::vector<MotRecord> gt = parse_mot_csv(resolve(gt_file, root), MotKind::kGt);
  std::vector<MotRecord> preds = parse_mot_csv(resolve(results_file, root), MotKind::kGt);
  EvalReport report = evaluate(name, gt, preds);

  json summary = report_json(report);
  summary["command"] = "eval";
  if (out.empty()) {
    std::cout << report_table({report});
    std::cout << summary.dump() << "\n";
    return;
  }
  fs::path dir = prepare_run_dir(out);
  RunLog log(dir);
  write_json_file(dir / "config.json", effective_json(cfg));
  log.line(report_table({report}));
  write_json_file(dir / "summary.json", summary);
}

std::string arm_table(const std::string& title, const std::vector<ArmResult>& arms) {
  char buf[200];
  std::string out = title + "\n";
  std::snprintf(buf, sizeof(buf), "  %-10s %9s %9s  %s\n", "arm", "med IDF1", "med MOTA",
                "fold IDF1");
  out += buf;
  for (const auto& a : arms) {
    std::string folds;
    for (const auto& f : a.folds) {
      if (!folds.empty()) folds += " ";
      folds += fmt4(f.identity.idf1);
    }
    std::snprintf(buf, sizeof(buf), "  %-10s %9.4f %9.4f  %s\n", a.name.c_str(), a.median_idf1,
                  a.median_mota, folds.c_str());
    out += buf;
  }
  return out;
}

json arm_json(const ArmResult& a) {
  json folds = json::array();
  for (const auto& f : a.folds) folds.push_back(report_json(f));
  return {{"name", a.name},
          {"median_idf1", a.median_idf1},
          {"median_mota", a.median_mota},
          {"folds", folds}};
}

void cmd_ablate(RunConfig cfg, std::optional<uint64_t> seed, bool quick, const std::string& out) {
  if (seed) cfg.seed = *seed;
  validate_config(cfg);
  ExperimentSpec spec = cfg.experiment();
  spec.validate();
  fs::path dir = prepare_run_dir(out);
  RunLog log(dir);
  write_json_file(dir / "config.json", effective_json(cfg));

  log.line("ablate: generating " + std::to_string(spec.sequences) + " sequences of " +
           std::to_string(spec.scenario.frames) + " frames");
  std::vector<SynthResult> suite = make_suite(spec);

  auto run_one = [&](const ExperimentArm& arm) {
    ArmResult res;
    if (quick) {
      res.name = arm.name;
      FoldResult fr = run_fold(suite, spec, arm.model);
      res.median_idf1 = fr.report.identity.idf1;
      res.median_mota = fr.report.clear.mota;
      res.folds.push_back(std::move(fr.report));
    } else {
      res = run_arm(suite, spec, arm);
    }
    log.line("ablate: arm " + res.name + ": median IDF1 " + fmt4(res.median_idf1) +
             ", median MOTA " + fmt4(res.median_mota));
    return res;
  };

  std::vector<ExperimentArm> enc = encoding_arms(spec.model);
  std::vector<ExperimentArm> fus = fusion_arms(spec.model);
  std::vector<ArmResult> enc_results;
  for (const auto& arm : enc) enc_results.push_back(run_one(arm));
  std::vector<ArmResult> fus_results;
  for (const auto& arm : fus) {
    // A fusion arm whose config matches an encoding arm reruns nothing.
    auto same = std::find_if(enc.begin(), enc.end(),
                             [&](const ExperimentArm& e) { return e.model == arm.model; });
    if (same != enc.end()) {
      ArmResult reused = enc_results[static_cast<size_t>(same - enc.begin())];
      reused.name = arm.name;
      log.line("ablate: arm " + arm.name + " shares the " + same->name + " configuration");
      fus_results.push_back(std::move(reused));
    } else {
      fus_results.push_back(run_one(arm));
    }
  }

  log.line(arm_table("positional encoding:", enc_results));
  log.line(arm_table("query fusion:", fus_results));

  std::ofstream csv(dir / "ablation.csv");
  if (!csv) throw IoError("cannot open for writing: " + (dir / "ablation.csv").string());
  csv << "table,arm,fold,sequence,idf1,mota,fp,fn,id_switches\n";
  auto emit = [&csv](const std::string& table, const std::vector<ArmResult>& arms) {
    for (const auto& a : arms) {
      for (size_t f = 0; f < a.folds.size(); ++f) {
        const EvalReport& r = a.folds[f];
        char buf[200];
        std::snprintf(buf, sizeof(buf), "%s,%s,%zu,%s,%.6f,%.6f,%lld,%lld,%lld\n", table.c_str(),
                      a.name.c_str(), f, r.name.c_str(), r.identity.idf1, r.clear.mota,
                      static_cast<long long>(r.clear.fp), static_cast<long long>(r.clear.fn),
                      static_cast<long long>(r.clear.id_switches));
        csv << buf;
      }
    }
  };
  emit("encoding", enc_results);
  emit("fusion", fus_results);
  if (!csv) throw IoError("write failed: " + (dir / "ablation.csv").string());

  json encoding = json::array();
  for (const auto& a : enc_results) encoding.push_back(arm_json(a));
  json fusion = json::array();
  for (const auto& a : fus_results) fusion.push_back(arm_json(a));
  write_json_file(dir / "summary.json", {{"command", "ablate"},
                                         {"quick", quick},
                                         {"encoding", encoding},
                                         {"fusion", fusion}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stamtrack: train, run and evaluate the attention-based tracker"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<int> threads;
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "override the run seed");
    cmd->add_option("--threads", threads, "worker cap (runs are currently single-threaded)");
  };

  CLI::App* synth = app.add_subcommand("synth", "generate one synthetic sequence directory");
  std::string synth_out;
  add_common(synth);
  synth->add_option("--out", synth_out, "run directory")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "train a model on sequence directories");
  std::vector<std::string> train_data;
  std::string train_out;
  add_common(train_cmd);
  train_cmd
      ->add_option("--data", train_data,
                   "sequence directories holding meta.json, gt.txt, det.txt, appearance.bin")
      ->required();
  train_cmd->add_option("--out", train_out, "run directory")->required();

  CLI::App* track_cmd = app.add_subcommand("track", "run the online tracker over one sequence");
  std::string track_ckpt, track_det, track_app, track_meta, track_out;
  add_common(track_cmd);
  track_cmd->add_option("--checkpoint", track_ckpt, "model checkpoint")->required();
  track_cmd->add_option("--det", track_det, "MOT detection file")->required();
  track_cmd->add_option("--appearance", track_app, "appearance sidecar")->required();
  track_cmd->add_option("--meta", track_meta, "sequence meta file")->required();
  track_cmd->add_option("--out", track_out, "run directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "score a result file against ground truth");
  std::string eval_gt, eval_res, eval_name, eval_out;
  add_common(eval_cmd);
  eval_cmd->add_option("--gt", eval_gt, "ground-truth MOT file")->required();
  eval_cmd->add_option("--results", eval_res, "tracker output MOT file")->required();
  eval_cmd->add_option("--name", eval_name, "sequence label in the report");
  eval_cmd->add_option("--out", eval_out, "optional run directory");

  CLI::App* ablate_cmd =
      app.add_subcommand("ablate", "run the positional-encoding and fusion comparison tables");
  std::string ablate_out;
  bool quick = false;
  add_common(ablate_cmd);
  ablate_cmd->add_option("--out", ablate_out, "run directory")->required();
  ablate_cmd->add_flag("--quick", quick, "score only the configured holdout fold");

  CLI11_PARSE(app, argc, argv);

  try {
    RunConfig cfg = load_run_config(config_path);
    if (threads) cfg.threads = *threads;
    if (synth->parsed()) {
      cmd_synth(std::move(cfg), seed, synth_out);
    } else if (train_cmd->parsed()) {
      cmd_train(std::move(cfg), seed, train_data, train_out);
    } else if (track_cmd->parsed()) {
      cmd_track(std::move(cfg), track_ckpt, track_det, track_app, track_meta, track_out);
    } else if (eval_cmd->parsed()) {
      cmd_eval(cfg, eval_gt, eval_res, eval_name, eval_out);
    } else if (ablate_cmd->parsed()) {
      cmd_ablate(std::move(cfg), seed, quick, ablate_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "stamtrack: error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
