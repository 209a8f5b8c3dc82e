#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "doctest.h"
#include "stam/checkpoint.hpp"
#include "stam/data_io.hpp"
#include "stam/errors.hpp"
#include "stam/geometry.hpp"
#include "stam/model.hpp"
#include "stam/rng.hpp"
#include "stam/training.hpp"

using stam::AppearanceKey;
using stam::AppearanceKeyHash;
using stam::AppearanceProvider;
using stam::Box;
using stam::ContractError;
using stam::ModelConfig;
using stam::ModelParams;
using stam::MotRecord;
using stam::OptimizerConfig;
using stam::Rng;
using stam::SequenceMeta;
using stam::Tensor;
using stam::TensorF;
using stam::TrainingSample;

namespace {

MotRecord rec(int frame, int64_t id, double x, double y = 0, double w = 10, double h = 10) {
  return MotRecord{frame, id, Box{x, y, w, h}, 1.0};
}

/// Provider with one basis-vector appearance per record, keyed by identity.
AppearanceProvider provider_for(const std::vector<MotRecord>& records, int64_t dim) {
  std::unordered_map<AppearanceKey, TensorF, AppearanceKeyHash> table;
  for (const auto& r : records) {
    TensorF v({1, dim});
    if (r.id >= 1) v[(r.id - 1) % dim] = 1.0f;
    table[AppearanceKey::make(r.frame, r.box)] = v;
  }
  return AppearanceProvider::precomputed(std::move(table), dim);
}

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.d = 8;
  mc.heads = 2;
  mc.layers = 1;
  mc.ffn_dim = 16;
  mc.appearance_dim = 4;
  mc.window_T = 3;
  return mc;
}

/// Labeled three-identity sequence plus a provider, for window sampling.
struct Fixture {
  SequenceMeta meta{"fix", 100, 100, 6, 30.0};
  std::vector<MotRecord> labeled;
  AppearanceProvider appearance;

  Fixture() {
    for (int f = 1; f <= 6; ++f) {
      labeled.push_back(rec(f, 1, 5.0 + f));
      labeled.push_back(rec(f, 2, 50.0 - f, 30));
      if (f >= 2) labeled.push_back(rec(f, 3, 80.0, 60));
    }
    appearance = provider_for(labeled, 4);
  }
};

TrainingSample fixture_sample(const Fixture& fx, int start, bool distractors = true) {
  return stam::sample_window(fx.labeled, fx.appearance, fx.meta, 3, start, distractors);
}

}  // namespace

TEST_CASE("iou matches the closed-form cases") {
  CHECK(stam::iou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == 1.0);
  CHECK(stam::iou(Box{0, 0, 2, 2}, Box{5, 5, 2, 2}) == 0.0);
  CHECK(stam::iou(Box{0, 0, 2, 2}, Box{1, 0, 2, 2}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("gt ids transfer onto detector boxes by overlap") {
  std::vector<MotRecord> gt = {rec(1, 7, 0), rec(2, 7, 0)};
  std::vector<MotRecord> det;
  det.push_back(MotRecord{1, -1, Box{0, 0, 10, 9}, 0.9});   // IoU 0.9
  det.push_back(MotRecord{1, -1, Box{0, 0, 10, 6}, 0.8});   // IoU 0.6
  det.push_back(MotRecord{1, -1, Box{40, 40, 10, 10}, 0.7});

  auto labeled = stam::replace_gt_with_detections(gt, det);
  REQUIRE(labeled.size() == 3);
  CHECK(labeled[0].id == 7);  // best overlap wins the identity
  CHECK(labeled[1].id == 0);
  CHECK(labeled[2].id == 0);
  CHECK(labeled[0].conf == 0.9);

  SUBCASE("identical boxes keep their ids") {
    std::vector<MotRecord> mirror = {rec(1, 4, 0), rec(1, 9, 30)};
    std::vector<MotRecord> same = mirror;
    for (auto& r : same) r.id = -1;
    auto out = stam::replace_gt_with_detections(mirror, same);
    REQUIRE(out.size() == 2);
    CHECK(out[0].id == 4);
    CHECK(out[1].id == 9);
  }
  SUBCASE("no detector boxes yield an empty labeling") {
    CHECK(stam::replace_gt_with_detections(gt, {}).empty());
  }
  SUBCASE("below-gate overlap stays a distractor") {
    std::vector<MotRecord> weak = {MotRecord{1, -1, Box{6, 0, 10, 10}, 1.0}};  // IoU 4/16
    auto out = stam::replace_gt_with_detections(gt, weak);
    REQUIRE(out.size() == 1);
    CHECK(out[0].id == 0);
  }
  SUBCASE("iou_min outside (0,1) is rejected") {
    CHECK_THROWS_AS(stam::replace_gt_with_detections(gt, det, 1.0), ContractError);
  }
}

TEST_CASE("window sampling builds one-hot assignments") {
  Fixture fx;
  TrainingSample s = fixture_sample(fx, 1);
  // Ids 1 and 2 span frames 1-3; id 3 starts at frame 2. Target frame is 4.
  REQUIRE(s.tracklet_ids == std::vector<int64_t>{1, 2, 3});
  REQUIRE(s.detection_ids == std::vector<int64_t>{1, 2, 3});
  CHECK(s.tracklets[0].frames == std::vector<int>{1, 2, 3});
  CHECK(s.tracklets[2].frames == std::vector<int>{2, 3});
  CHECK(s.detections.frame == 4);
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 3; ++j) CHECK(s.gt_assignment(i, j) == (i == j ? 1.0f : 0.0f));
  }
  CHECK(s.loss_mask.numel() == 9);
  // Appearance and geometry rows follow the provider and normalization.
  CHECK(s.tracklets[0].appearances(0, 0) == 1.0f);
  CHECK(s.detections.geoms(0, 2) == doctest::Approx(0.1));  // w=10 in a 100px image
}

TEST_CASE("swapped detection order flips the one-hot columns") {
  SequenceMeta meta{"m", 100, 100, 4, 30.0};
  std::vector<MotRecord> labeled;
  for (int f = 1; f <= 3; ++f) {
    labeled.push_back(rec(f, 1, 10));
    labeled.push_back(rec(f, 2, 60, 40));
  }
  labeled.push_back(rec(4, 2, 60, 40));  // id 2 listed before id 1 at the target
  labeled.push_back(rec(4, 1, 10));
  auto appearance = provider_for(labeled, 4);
  TrainingSample s = stam::sample_window(labeled, appearance, meta, 3, 1);
  REQUIRE(s.detection_ids == std::vector<int64_t>{2, 1});
  CHECK(s.gt_assignment(0, 0) == 0.0f);
  CHECK(s.gt_assignment(0, 1) == 1.0f);
  CHECK(s.gt_assignment(1, 0) == 1.0f);
  CHECK(s.gt_assignment(1, 1) == 0.0f);
}

TEST_CASE("unseen and distractor detections get all-zero columns") {
  Fixture fx;
  std::vector<MotRecord> labeled = fx.labeled;
  labeled.push_back(rec(4, 9, 20, 80));  // id 9 first appears at the target frame
  labeled.push_back(rec(4, 0, 90, 90));  // distractor
  auto appearance = provider_for(labeled, 4);
  TrainingSample s = stam::sample_window(labeled, appearance, fx.meta, 3, 1);
  REQUIRE(s.detection_ids == std::vector<int64_t>{1, 2, 3, 9, 0});
  for (int64_t i = 0; i < s.gt_assignment.rows(); ++i) {
    CHECK(s.gt_assignment(i, 3) == 0.0f);
    CHECK(s.gt_assignment(i, 4) == 0.0f);
  }
  // Row and column structure: one-hot or all-zero everywhere.
  for (int64_t i = 0; i < s.gt_assignment.rows(); ++i) {
    float row = 0.0f;
    for (int64_t j = 0; j < s.gt_assignment.cols(); ++j) row += s.gt_assignment(i, j);
    CHECK((row == 0.0f || row == 1.0f));
  }
  for (int64_t j = 0; j < s.gt_assignment.cols(); ++j) {
    float col = 0.0f;
    for (int64_t i = 0; i < s.gt_assignment.rows(); ++i) col += s.gt_assignment(i, j);
    CHECK((col == 0.0f || col == 1.0f));
  }

  TrainingSample no_extras = stam::sample_window(labeled, appearance, fx.meta, 3, 1, false);
  CHECK(no_extras.detection_ids == std::vector<int64_t>{1, 2, 3, 9});

  CHECK_THROWS_AS(stam::sample_window(labeled, appearance, fx.meta, 3, 4), ContractError);
  CHECK_THROWS_AS(stam::sample_window(labeled, appearance, fx.meta, 3, 0), ContractError);
}

TEST_CASE("observation dropping never empties a tracklet") {
  Fixture fx;
  TrainingSample base = fixture_sample(fx, 1);
  Rng rng(9);

  TrainingSample same = stam::augment_drop(base, 0.0, rng);
  for (size_t t = 0; t < base.tracklets.size(); ++t) {
    CHECK(same.tracklets[t].frames == base.tracklets[t].frames);
  }

  int shrunk = 0;
  for (uint64_t seed = 0; seed < 40; ++seed) {
    Rng r2(seed);
    TrainingSample dropped = stam::augment_drop(base, 0.9, r2);
    for (size_t t = 0; t < dropped.tracklets.size(); ++t) {
      const auto& frames = dropped.tracklets[t].frames;
      REQUIRE(!frames.empty());
      for (size_t i = 1; i < frames.size(); ++i) CHECK(frames[i] > frames[i - 1]);
      CHECK(dropped.tracklets[t].appearances.rows() ==
            static_cast<int64_t>(frames.size()));
      if (frames.size() < base.tracklets[t].frames.size()) ++shrunk;
    }
    CHECK(dropped.gt_assignment.numel() == base.gt_assignment.numel());
  }
  CHECK(shrunk > 0);

  // Statistical sanity: at p = 0.5 about half of 100 observations survive.
  TrainingSample wide = base;
  wide.tracklets.resize(1);
  wide.tracklet_ids.resize(1);
  auto& t0 = wide.tracklets[0];
  t0.appearances = TensorF({100, 4});
  t0.geoms = TensorF({100, 4}, 0.4f);
  t0.frames.clear();
  for (int f = 1; f <= 100; ++f) t0.frames.push_back(f);
  Rng r3(123);
  TrainingSample thinned = stam::augment_drop(wide, 0.5, r3);
  auto survivors = static_cast<int>(thinned.tracklets[0].frames.size());
  CHECK(survivors > 33);
  CHECK(survivors < 67);

  CHECK_THROWS_AS(stam::augment_drop(base, 1.0, rng), ContractError);
}

TEST_CASE("negative downsampling keeps positives and the requested ratio") {
  TensorF gt({3, 4});
  gt(0, 1) = 1.0f;
  gt(2, 0) = 1.0f;  // 2 positives, 10 negatives
  Rng rng(5);
  auto mask = stam::downsample_negatives(gt, 1.0, rng);
  int64_t kept_pos = 0, kept_neg = 0;
  for (int64_t i = 0; i < gt.numel(); ++i) {
    if (gt[i] > 0.5f) {
      CHECK(mask[i] == 1);
      ++kept_pos;
    } else if (mask[i]) {
      ++kept_neg;
    }
  }
  CHECK(kept_pos == 2);
  CHECK(kept_neg == 2);

  SUBCASE("no negatives") {
    TensorF ones({1, 2}, 1.0f);
    auto m = stam::downsample_negatives(ones, 1.0, rng);
    CHECK(m[0] == 1);
    CHECK(m[1] == 1);
  }
  SUBCASE("fewer negatives than the ratio asks for") {
    TensorF g({1, 3});
    g(0, 0) = 1.0f;
    g(0, 1) = 1.0f;
    auto m = stam::downsample_negatives(g, 5.0, rng);
    CHECK(m[2] == 1);
  }
  SUBCASE("no positives keeps exactly one negative") {
    TensorF g({2, 2});
    auto m = stam::downsample_negatives(g, 1.0, rng);
    int64_t kept = 0;
    for (int64_t i = 0; i < 4; ++i) kept += m[i];
    CHECK(kept == 1);
  }
  SUBCASE("ratio must be positive") {
    CHECK_THROWS_AS(stam::downsample_negatives(gt, 0.0, rng), ContractError);
  }
}

TEST_CASE("bce loss closed-form values") {
  Tensor<uint8_t> all({2, 2}, 1);
  TensorF gt({2, 2});
  gt(0, 0) = 1.0f;
  gt(1, 1) = 1.0f;

  TensorF perfect = gt;
  for (int64_t i = 0; i < 4; ++i) perfect[i] = gt[i] > 0.5f ? 1.0f : 0.0f;
  CHECK(stam::bce_loss(perfect, gt, all) <= 1.3e-7);  // clamp floor

  TensorF half({2, 2}, 0.5f);
  CHECK(stam::bce_loss(half, gt, all) == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  TensorF quarter({1, 1}, 0.25f);
  TensorF one({1, 1}, 1.0f);
  Tensor<uint8_t> m1({1, 1}, 1);
  CHECK(stam::bce_loss(quarter, one, m1) == doctest::Approx(std::log(4.0)).epsilon(1e-9));

  SUBCASE("masked mean equals the direct re-evaluation") {
    Rng rng(31);
    TensorF probs({3, 5});
    TensorF g({3, 5});
    Tensor<uint8_t> mask({3, 5});
    for (int64_t i = 0; i < probs.numel(); ++i) {
      probs[i] = static_cast<float>(rng.uniform(0.05, 0.95));
      g[i] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
      mask[i] = rng.bernoulli(0.7) ? 1 : 0;
    }
    mask[0] = 1;
    double manual = 0.0;
    int64_t count = 0;
    for (int64_t i = 0; i < probs.numel(); ++i) {
      if (!mask[i]) continue;
      ++count;
      double a = probs[i];
      manual += -(double(g[i]) * std::log(a) + (1.0 - double(g[i])) * std::log(1.0 - a));
    }
    manual /= static_cast<double>(count);
    CHECK(stam::bce_loss(probs, g, mask) == doctest::Approx(manual).epsilon(1e-12));
  }
  SUBCASE("empty mask is rejected") {
    Tensor<uint8_t> none({2, 2});
    CHECK_THROWS_AS(stam::bce_loss(half, gt, none), ContractError);
  }
}

TEST_CASE("sgd step follows the momentum update") {
  ModelConfig mc = tiny_model();
  ModelParams params = stam::init_params<float>(mc, 1);
  std::vector<TensorF> grads;
  for (const auto& v : params.values) grads.emplace_back(v.shape());
  stam::SgdState state;
  OptimizerConfig cfg;

  SUBCASE("zero gradient, zero decay: parameters unchanged") {
    cfg.weight_decay = 0.0;
    ModelParams before = params;
    stam::sgd_step(params, grads, state, cfg);
    for (size_t b = 0; b < params.values.size(); ++b) {
      for (int64_t i = 0; i < params.values[b].numel(); ++i) {
        CHECK(params.values[b][i] == before.values[b][i]);
      }
    }
  }
  SUBCASE("first step moves by lr * (g + wd * p)") {
    size_t block = static_cast<size_t>(params.find("head.2.w"));
    for (int64_t i = 0; i < grads[block].numel(); ++i) grads[block][i] = 0.25f;
    ModelParams before = params;
    stam::sgd_step(params, grads, state, cfg);
    for (int64_t i = 0; i < params.values[block].numel(); ++i) {
      float expect = before.values[block][i] -
                     static_cast<float>(cfg.learning_rate) *
                         (0.25f + static_cast<float>(cfg.weight_decay) * before.values[block][i]);
      CHECK(params.values[block][i] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
  SUBCASE("weight decay alone shrinks parameters") {
    cfg.learning_rate = 0.1;
    cfg.weight_decay = 0.5;
    ModelParams before = params;
    stam::sgd_step(params, grads, state, cfg);
    size_t block = static_cast<size_t>(params.find("app_proj.w"));
    for (int64_t i = 0; i < params.values[block].numel(); ++i) {
      CHECK(params.values[block][i] ==
            doctest::Approx(before.values[block][i] * 0.95f).epsilon(1e-6));
    }
  }
  SUBCASE("non-finite gradient aborts naming the block") {
    size_t block = static_cast<size_t>(params.find("aspe.1.w"));
    grads[block][0] = std::numeric_limits<float>::quiet_NaN();
    try {
      stam::sgd_step(params, grads, state, cfg);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("aspe.1.w") != std::string::npos);
    }
  }
}

TEST_CASE("loss is invariant to permuting tracklets with their target rows") {
  Fixture fx;
  TrainingSample s = fixture_sample(fx, 1);
  ModelParams params = stam::init_params<float>(tiny_model(), 21);

  std::vector<TensorF> grads;
  double base = stam::sample_gradients(params, s, grads);

  TrainingSample p = s;
  std::vector<size_t> perm = {2, 0, 1};
  for (size_t i = 0; i < perm.size(); ++i) {
    p.tracklets[i] = s.tracklets[perm[i]];
    p.tracklet_ids[i] = s.tracklet_ids[perm[i]];
    for (int64_t j = 0; j < s.gt_assignment.cols(); ++j) {
      p.gt_assignment(static_cast<int64_t>(i), j) =
          s.gt_assignment(static_cast<int64_t>(perm[i]), j);
      p.loss_mask(static_cast<int64_t>(i), j) =
          s.loss_mask(static_cast<int64_t>(perm[i]), j);
    }
  }
  double permuted = stam::sample_gradients(params, p, grads);
  CHECK(permuted == doctest::Approx(base).epsilon(1e-5));
}

TEST_CASE("one small step decreases the loss on a fixed sample") {
  Fixture fx;
  TrainingSample s = fixture_sample(fx, 2);
  ModelParams params = stam::init_params<float>(tiny_model(), 3);

  std::vector<TensorF> grads;
  double before = stam::sample_gradients(params, s, grads);

  bool improved = false;
  for (double lr : {1e-2, 1e-3, 1e-4}) {
    ModelParams trial = params;
    stam::SgdState state;
    OptimizerConfig cfg;
    cfg.learning_rate = lr;
    cfg.weight_decay = 0.0;
    stam::sgd_step(trial, grads, state, cfg);
    std::vector<TensorF> scratch;
    double after = stam::sample_gradients(trial, s, scratch);
    if (after < before) improved = true;
  }
  CHECK(improved);
}

TEST_CASE("training runs are bit-reproducible per seed") {
  stam::SynthSpec spec;
  spec.objects = 3;
  spec.frames = 12;
  spec.width = 320;
  spec.height = 240;
  spec.speed = 3.0;
  spec.jitter_sigma = 0.5;
  spec.drop_rate = 0.05;
  spec.fp_rate = 0.05;
  spec.appearance_noise = 0.1;
  spec.appearance_dim = 4;
  spec.min_size = 20.0;
  spec.max_size = 40.0;
  spec.seed = 8;
  stam::SynthResult synth = stam::synth_generate(spec);

  stam::TrainSequence seq;
  seq.meta = synth.meta;
  seq.labeled = stam::replace_gt_with_detections(synth.gt, synth.det);
  seq.appearance = synth.appearance;

  ModelConfig mc = tiny_model();
  stam::TrainOptions opt;
  opt.optimizer.epochs = 2;
  opt.optimizer.batch_size = 2;
  opt.windows_per_epoch = 8;

  auto run = [&](uint64_t seed) { return stam::train({seq}, mc, opt, seed); };
  stam::TrainResult a = run(42);
  stam::TrainResult b = run(42);
  stam::TrainResult c = run(43);

  REQUIRE(a.curve.size() == 8);  // 2 epochs x 4 steps
  CHECK(a.curve.front().epoch == 1);
  CHECK(a.curve.back().epoch == 2);
  for (const auto& p : a.curve) CHECK(std::isfinite(p.loss));

  REQUIRE(a.params.values.size() == b.params.values.size());
  bool same = true, differs = false;
  for (size_t blk = 0; blk < a.params.values.size(); ++blk) {
    for (int64_t i = 0; i < a.params.values[blk].numel(); ++i) {
      if (a.params.values[blk][i] != b.params.values[blk][i]) same = false;
      if (a.params.values[blk][i] != c.params.values[blk][i]) differs = true;
    }
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("training writes checkpoints and a loss curve") {
  Fixture fx;
  stam::TrainSequence seq{fx.meta, fx.labeled, fx.appearance};

  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "stam_train_test";
  fs::remove_all(dir);

  ModelConfig mc = tiny_model();
  stam::TrainOptions opt;
  opt.optimizer.epochs = 2;
  opt.optimizer.batch_size = 2;
  opt.windows_per_epoch = 4;
  opt.checkpoint_dir = (dir / "ckpt").string();
  opt.loss_csv = (dir / "loss.csv").string();

  stam::TrainResult result = stam::train({seq}, mc, opt, 7);
  CHECK(fs::exists(dir / "ckpt" / "epoch_001.ckpt"));
  CHECK(fs::exists(dir / "ckpt" / "epoch_002.ckpt"));

  ModelParams last = stam::load_checkpoint((dir / "ckpt" / "epoch_002.ckpt").string());
  REQUIRE(last.values.size() == result.params.values.size());
  for (size_t blk = 0; blk < last.values.size(); ++blk) {
    for (int64_t i = 0; i < last.values[blk].numel(); ++i) {
      CHECK(last.values[blk][i] == result.params.values[blk][i]);
    }
  }

  std::ifstream csv(dir / "loss.csv");
  REQUIRE(csv.good());
  std::string header;
  std::getline(csv, header);
  CHECK(header == "epoch,step,loss");
  int rows = 0;
  for (std::string line; std::getline(csv, line);) {
    if (!line.empty()) ++rows;
  }
  CHECK(rows == static_cast<int>(result.curve.size()));
  fs::remove_all(dir);
}
