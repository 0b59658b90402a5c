#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "v2m/train.hpp"

namespace v2m {
namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("v2m_train_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& p) {
  auto b = read_bytes(p);
  return {b.begin(), b.end()};
}

// ---------------------------------------------------------------------------
// Locality data
// ---------------------------------------------------------------------------

TEST(Locality, NoiselessImagesHoldExactlyOneBlobInTheLabelledQuadrant) {
  LocalityTaskSpec spec;
  spec.noise_std = 0;
  spec.seed = 3;
  auto d = generate_locality_dataset<double>(spec, 64, 0);
  const std::size_t s = spec.side;
  for (std::size_t n = 0; n < d.size(); ++n) {
    std::size_t ones = 0, in_quadrant = 0;
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) {
        const double v = d.images[(n * s + r) * s + c];
        ASSERT_TRUE(v == 0.0 || v == 1.0);
        if (v == 1.0) {
          ++ones;
          const int q = static_cast<int>((r >= s / 2 ? 2 : 0) + (c >= s / 2 ? 1 : 0));
          in_quadrant += q == d.labels[n] ? 1 : 0;
        }
      }
    }
    EXPECT_EQ(ones, spec.blob * spec.blob);
    EXPECT_EQ(in_quadrant, ones);
  }
}

TEST(Locality, SameSeedIsBitwiseIdentical) {
  LocalityTaskSpec spec;
  spec.seed = 11;
  auto a = generate_locality_dataset<float>(spec, 50, 1);
  auto b = generate_locality_dataset<float>(spec, 50, 1);
  auto other = generate_locality_dataset<float>(spec, 50, 2);
  EXPECT_TRUE(a.images.bitwise_equal(b.images));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.images.bitwise_equal(other.images));
  for (float v : a.images.data()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Locality, ClassHistogramIsBalanced) {
  LocalityTaskSpec spec;
  spec.side = 4;
  spec.blob = 1;
  for (std::size_t count : {10000u, 10003u}) {
    auto d = generate_locality_dataset<float>(spec, count, 0);
    std::vector<std::size_t> hist(4, 0);
    for (int y : d.labels) ++hist[static_cast<std::size_t>(y)];
    for (auto h : hist) EXPECT_LE(std::abs(static_cast<double>(h) - count / 4.0), 1.0);
  }
}

TEST(Locality, OversizedBlobIsConfigError) {
  LocalityTaskSpec spec;
  spec.blob = 9;
  EXPECT_THROW(generate_locality_dataset<float>(spec, 4, 0), ConfigError);
  spec.blob = 8;
  EXPECT_NO_THROW(generate_locality_dataset<float>(spec, 4, 0));
}

TEST(Locality, HorizontalFlipMirrorsQuadrantLabel) {
  LocalityTaskSpec spec;
  spec.noise_std = 0;
  auto d = generate_locality_dataset<double>(spec, 8, 0);
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  auto flipped = d.gather(idx, std::vector<bool>(8, true));
  const std::size_t s = spec.side;
  for (std::size_t n = 0; n < 8; ++n) {
    for (std::size_t r = 0; r < s; ++r) {
      for (std::size_t c = 0; c < s; ++c) {
        ASSERT_EQ(flipped.images[(n * s + r) * s + c], d.images[(n * s + r) * s + (s - 1 - c)]);
      }
    }
    const int y = d.labels[n];
    EXPECT_EQ(flipped.labels[n], (y / 2) * 2 + (1 - y % 2));
  }
}

// ---------------------------------------------------------------------------
// IDX files
// ---------------------------------------------------------------------------

void write_raw(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

TEST(Idx, HandWrittenFixture) {
  const auto dir = temp_dir("idx");
  // Two 2x2 images and their labels, byte for byte.
  write_raw(dir / "img", {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 51, 102, 255, 255, 0, 0, 153});
  write_raw(dir / "lab", {0, 0, 8, 1, 0, 0, 0, 2, 1, 3});
  auto d = load_idx<double>((dir / "img").string(), (dir / "lab").string());
  EXPECT_EQ(d.images.shape(), (Shape{2, 2, 2, 1}));
  EXPECT_EQ(d.images.values(), (std::vector<double>{0, 0.2, 0.4, 1, 1, 0, 0, 0.6}));
  EXPECT_EQ(d.labels, (std::vector<int>{1, 3}));
  EXPECT_EQ(d.classes, 4u);
}

TEST(Idx, WriterRoundTrip) {
  const auto dir = temp_dir("idx_rt");
  std::vector<unsigned char> px(3 * 4 * 5);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<unsigned char>(i * 7);
  write_idx((dir / "i").string(), (dir / "l").string(), 4, 5, px, {2, 0, 1});
  auto d = load_idx<float>((dir / "i").string(), (dir / "l").string());
  EXPECT_EQ(d.images.shape(), (Shape{3, 4, 5, 1}));
  for (std::size_t i = 0; i < px.size(); ++i) EXPECT_EQ(d.images[i], static_cast<float>(px[i] / 255.0));
}

TEST(Idx, ErrorsAreDistinct) {
  const auto dir = temp_dir("idx_err");
  const std::vector<unsigned char> img{0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 7};
  write_raw(dir / "img", img);
  write_raw(dir / "lab2", {0, 0, 8, 1, 0, 0, 0, 2, 1, 0});
  EXPECT_THROW(load_idx<float>((dir / "img").string(), (dir / "lab2").string()), CountMismatchError);

  write_raw(dir / "bad", {0, 0, 8, 2, 0, 0, 0, 1, 1});
  try {
    load_idx<float>((dir / "img").string(), (dir / "bad").string());
    FAIL();
  } catch (const BadMagicError& e) {
    EXPECT_NE(std::string(e.what()).find("bad"), std::string::npos);
  }

  auto cut = img;
  cut.pop_back();
  write_raw(dir / "cut", cut);
  write_raw(dir / "lab1", {0, 0, 8, 1, 0, 0, 0, 1, 1});
  EXPECT_THROW(load_idx<float>((dir / "cut").string(), (dir / "lab1").string()), TruncatedError);
  EXPECT_THROW(load_idx<float>((dir / "missing").string(), (dir / "lab1").string()), IoError);
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Tensor<double>({1, 2}, {0.3, 0.3}), {1}), std::log(2.0), 1e-15);
  EXPECT_LT(cross_entropy(Tensor<double>({1, 3}, {800, 0, -5}), {0}), 1e-300);
  EXPECT_THROW(cross_entropy(Tensor<double>({1, 3}), {3}), ContractError);
  EXPECT_THROW(cross_entropy(Tensor<double>({1, 3}), {-1}), ContractError);
  EXPECT_THROW(cross_entropy(Tensor<double>({2, 3}), {0}), DimensionError);
}

TEST(CrossEntropy, MatchesNaiveSoftmax) {
  Rng rng(5);
  auto z = rng_normal<double>(rng, {6, 4}, 0, 2);
  std::vector<int> y{0, 3, 1, 2, 2, 0};
  double expect = 0;
  for (std::size_t i = 0; i < 6; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += std::exp(z[i * 4 + k]);
    expect -= std::log(std::exp(z[i * 4 + static_cast<std::size_t>(y[i])]) / s);
  }
  EXPECT_NEAR(cross_entropy(z, y), expect / 6, 1e-10);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  ParamMap<double> p;
  p["z"] = rng_normal<double>(rng, {5, 3}, 0, 1.5);
  const std::vector<int> y{2, 0, 1, 1, 0};
  auto report = finite_diff_check(
      [&](Tape<double>&, const VarMap<double>& v) { return ops::cross_entropy(lookup(v, "z"), y); }, p, 1e-4);
  EXPECT_LE(report.max_rel_error(), 1e-8);
}

// ---------------------------------------------------------------------------
// AdamW and schedule
// ---------------------------------------------------------------------------

TEST(AdamW, ZeroGradientIsPureDecay) {
  ParamMap<double> p{{"w", Tensor<double>({2, 2}, {1.5, -2, 0.25, 3})}, {"b", Tensor<double>({2}, {1, 2})}};
  const auto before = p;
  ParamMap<double> g{{"w", Tensor<double>::zeros({2, 2})}, {"b", Tensor<double>::zeros({2})}};
  AdamW<double> opt;
  opt.step(p, g, 0.01);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p["w"][i], before.at("w")[i] * (1 - 0.01 * 0.05));
  EXPECT_TRUE(p["b"].bitwise_equal(before.at("b")));  // vectors are not decayed
}

TEST(AdamW, ConstantGradientStepApproachesLearningRate) {
  ParamMap<double> p{{"w", Tensor<double>({1, 2}, {0, 0})}};
  ParamMap<double> g{{"w", Tensor<double>({1, 2}, {0.3, -7})}};
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  Tensor<double> prev = p["w"];
  for (int i = 0; i < 200; ++i) {
    prev = p["w"];
    opt.step(p, g, 0.01);
  }
  EXPECT_NEAR(p["w"][0] - prev[0], -0.01, 1e-9);
  EXPECT_NEAR(p["w"][1] - prev[1], 0.01, 1e-9);
}

TEST(AdamW, ThreeStepHandUnroll) {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.05;
  const double grads[3] = {0.5, -1.0, 2.0};
  double p = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    p *= 1 - lr * wd;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    p -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  ParamMap<double> params{{"w", Tensor<double>({1, 1}, {1.0})}};
  AdamW<double> opt({b1, b2, eps, wd});
  for (double g : grads) opt.step(params, {{"w", Tensor<double>({1, 1}, {g})}}, lr);
  EXPECT_NEAR(params["w"][0], p, 1e-12);
  EXPECT_EQ(opt.steps(), 3u);
}

TEST(AdamW, OneStepDecreasesConvexQuadratic) {
  // f(w) = sum (w - t)^2
  Rng rng(7);
  ParamMap<double> p{{"w", rng_normal<double>(rng, {3, 3}, 0, 1)}};
  const auto target = rng_normal<double>(rng, {3, 3}, 0, 1);
  auto loss = [&] {
    double s = 0;
    for (std::size_t i = 0; i < 9; ++i) s += (p["w"][i] - target[i]) * (p["w"][i] - target[i]);
    return s;
  };
  const double before = loss();
  ParamMap<double> g{{"w", Tensor<double>({3, 3})}};
  for (std::size_t i = 0; i < 9; ++i) g["w"][i] = 2 * (p["w"][i] - target[i]);
  AdamW<double> opt;
  opt.step(p, g, 1e-3);
  EXPECT_LT(loss(), before);
}

TEST(AdamW, MismatchedGradientIsRejected) {
  ParamMap<double> p{{"w", Tensor<double>({2})}};
  AdamW<double> opt;
  EXPECT_THROW(opt.step(p, {{"w", Tensor<double>({3})}}, 0.1), DimensionError);
  EXPECT_THROW(opt.step(p, {}, 0.1), ContractError);
}

TEST(Schedule, WarmupThenCosineToZero) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 10, 1.0), 0.1);
  EXPECT_DOUBLE_EQ(cosine_lr(9, 100, 10, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(cosine_lr(10, 100, 10, 1.0), 1.0);
  EXPECT_NEAR(cosine_lr(55, 100, 10, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(cosine_lr(100, 100, 10, 1.0), 0.0, 1e-15);
  for (std::size_t s = 11; s < 100; ++s) EXPECT_LT(cosine_lr(s, 100, 10, 1.0), cosine_lr(s - 1, 100, 10, 1.0));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

ModelConfig tiny_config() {
  ModelConfig c;
  c.image = 8;
  c.patch = 2;
  c.dim = 8;
  c.state = 4;
  c.depth = 1;
  return c;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = temp_dir("ckpt");
  const ModelConfig c = tiny_config();
  for (int precision = 0; precision < 2; ++precision) {
    const auto a = dir / "a.v2m", b = dir / "b.v2m";
    if (precision == 0) {
      save_checkpoint(a.string(), make_checkpoint(c, init_model<float>(c, 1)));
    } else {
      save_checkpoint(a.string(), make_checkpoint(c, init_model<double>(c, 1)));
    }
    save_checkpoint(b.string(), load_checkpoint(a.string()));
    EXPECT_EQ(read_bytes(a), read_bytes(b));
  }
}

TEST(Checkpoint, ValuesAndConfigRoundTripBitwise) {
  const auto dir = temp_dir("ckpt_values");
  ModelConfig c = tiny_config();
  c.scheme = ClassTokenScheme::edge_cross;
  c.rotations = {0, 2};
  c.pipelines = {false, true};
  auto params = init_model<float>(c, 4);
  params["embed.b"][0] = -0.0f;
  params["embed.b"][1] = std::numeric_limits<float>::denorm_min();
  save_checkpoint((dir / "m.v2m").string(), make_checkpoint(c, params));
  const auto ck = load_checkpoint((dir / "m.v2m").string());
  const ModelConfig back = checkpoint_model_config(ck);
  EXPECT_EQ(back.scheme, c.scheme);
  EXPECT_EQ(back.rotations, c.rotations);
  EXPECT_EQ(back.pipelines.horizontal, false);
  EXPECT_EQ(back.dim, c.dim);
  EXPECT_EQ(back.norm_eps, c.norm_eps);
  const auto loaded = checkpoint_params<float>(ck, back);
  for (const auto& [name, t] : params) EXPECT_TRUE(t.bitwise_equal(loaded.at(name))) << name;
}

TEST(Checkpoint, LayoutMatchesFormat) {
  Checkpoint ck;
  ck.records.push_back(CheckpointRecord::from_tensor("ab", Tensor<float>({1, 2}, {1.0f, -2.0f})));
  const auto bytes = encode_checkpoint(ck);
  const std::vector<unsigned char> expect{'V', '2', 'M', '1', 1, 0, 0, 0, 1, 0, 0, 0,  // header
                                          2, 0, 'a', 'b', 0, 2, 1, 0, 0, 0, 2, 0, 0, 0,  // name, dtype, dims
                                          0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0xC0};
  EXPECT_EQ(bytes, expect);
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  const auto dir = temp_dir("ckpt_bad");
  const ModelConfig c = tiny_config();
  save_checkpoint((dir / "good.v2m").string(), make_checkpoint(c, init_model<float>(c, 1)));
  auto bytes = read_bytes(dir / "good.v2m");
  auto bad = bytes;
  bad[0] = 'X';
  write_raw(dir / "magic.v2m", bad);
  try {
    load_checkpoint((dir / "magic.v2m").string());
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
  bytes.resize(bytes.size() - 3);
  write_raw(dir / "cut.v2m", bytes);
  EXPECT_THROW(load_checkpoint((dir / "cut.v2m").string()), FormatError);
  EXPECT_THROW(load_checkpoint((dir / "none.v2m").string()), IoError);
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
  const ModelConfig c = tiny_config();
  auto params = init_model<float>(c, 1);
  params["head.w"] = Tensor<float>({8, 5});
  const auto ck = make_checkpoint(c, params);
  try {
    checkpoint_params<float>(ck, c);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("head.w"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TinyTask {
  ModelConfig model = tiny_config();
  Dataset<float> train, test;
  TinyTask() {
    LocalityTaskSpec spec;
    spec.side = 8;
    spec.blob = 2;
    spec.seed = 21;
    train = generate_locality_dataset<float>(spec, 48, 0);
    test = generate_locality_dataset<float>(spec, 40, 1);
  }
};

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch = 16;
  tc.lr = 3e-3;
  tc.seed = 5;
  return tc;
}

TEST(TrainLoop, ZeroEpochsKeepsInitialization) {
  TinyTask task;
  const auto dir = temp_dir("zero_epochs");
  const auto init = init_model<float>(task.model, 3);
  auto r = train_loop(task.model, tiny_train(0), init, task.train, task.test, dir);
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(read_text(dir / "metrics.csv"), "epoch,split,loss,accuracy\n");
  const auto back = checkpoint_params<float>(load_checkpoint((dir / "checkpoint.v2m").string()), task.model);
  for (const auto& [name, t] : init) EXPECT_TRUE(t.bitwise_equal(back.at(name))) << name;
}

TEST(TrainLoop, ZeroLearningRateKeepsLossConstant) {
  TinyTask task;
  TrainConfig tc = tiny_train(3);
  tc.lr = 0;
  const auto train = task.train.images.cast<double>(), test = task.test.images.cast<double>();
  const Dataset<double> tr{train, task.train.labels, 4, task.train.hflip_label};
  const Dataset<double> te{test, task.test.labels, 4, task.test.hflip_label};
  auto r = train_loop(task.model, tc, init_model<double>(task.model, 3), tr, te);
  ASSERT_EQ(r.history.size(), 3u);
  for (const auto& m : r.history) {
    EXPECT_NEAR(m.train_loss, r.history[0].train_loss, 1e-12);
    EXPECT_EQ(m.test_loss, r.history[0].test_loss);
  }
}

TEST(TrainLoop, LossDecreasesAndArtifactsMatchEvaluation) {
  TinyTask task;
  const auto dir = temp_dir("artifacts");
  TrainConfig tc = tiny_train(4);
  tc.hflip = true;
  auto r = train_loop(task.model, tc, init_model<float>(task.model, 3), task.train, task.test, dir);
  ASSERT_EQ(r.history.size(), 4u);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  const auto csv = read_text(dir / "metrics.csv");
  EXPECT_EQ(csv, metrics_csv(r.history));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 4);

  const auto ck = load_checkpoint((dir / "checkpoint.v2m").string());
  const auto cfg = checkpoint_model_config(ck);
  const auto eval = evaluate(cfg, checkpoint_params<float>(ck, cfg), task.test);
  EXPECT_EQ(eval.accuracy, r.best_accuracy);
  EXPECT_EQ(eval.accuracy, r.history[r.best_epoch - 1].test_accuracy);
  std::size_t total = 0;
  for (auto n : eval.confusion) total += n;
  EXPECT_EQ(total, task.test.size());
}

TEST(TrainLoop, DeterministicAcrossRunsAndWorkerCounts) {
  TinyTask task;
  TrainConfig tc = tiny_train(2);
  tc.hflip = true;
  const auto init = init_model<float>(task.model, 8);
  const auto a = metrics_csv(train_loop(task.model, tc, init, task.train, task.test).history);
  const auto b = metrics_csv(train_loop(task.model, tc, init, task.train, task.test).history);
  tc.policy.workers = 3;
  const auto c = metrics_csv(train_loop(task.model, tc, init, task.train, task.test).history);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
}

TEST(TrainLoop, TargetAccuracyStopsEarly) {
  TinyTask task;
  TrainConfig tc = tiny_train(5);
  tc.target_accuracy = 0.0;
  auto r = train_loop(task.model, tc, init_model<float>(task.model, 3), task.train, task.test);
  EXPECT_EQ(r.history.size(), 1u);
}

TEST(Evaluate, RandomWeightsAreNearChance) {
  ModelConfig c = tiny_config();
  c.classes = 4;
  LocalityTaskSpec spec;
  spec.side = 8;
  spec.blob = 2;
  auto data = generate_locality_dataset<float>(spec, 400, 9);
  // Averaged over several random models, accuracy stays within 3 sigma of 1/4.
  double acc = 0;
  const int models = 8;
  for (int s = 0; s < models; ++s) acc += evaluate(c, init_model<float>(c, 100 + s), data).accuracy;
  acc /= models;
  const double sigma = std::sqrt(0.25 * 0.75 / (400.0 * models));
  EXPECT_NEAR(acc, 0.25, 3 * sigma + 0.05);
}

}  // namespace
}  // namespace v2m
