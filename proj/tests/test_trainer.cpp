#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maskgit/checkpoint.hpp"
#include "maskgit/trainer.hpp"

namespace maskgit {
namespace {

namespace fs = std::filesystem;

fs::path tmp_dir(const std::string& name) {
  const fs::path p = fs::path(MASKGIT_TEST_TMP) / "trainer" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig tiny_config(int vocab = 4) {
  ModelConfig c;
  c.layers = 1;
  c.heads = 2;
  c.embed_dim = 16;
  c.hidden_dim = 32;
  c.grid_h = 4;
  c.grid_w = 4;
  c.vocab = vocab;
  c.dropout = 0.1;
  return c;
}

TrainConfig quick_train(int steps) {
  TrainConfig t;
  t.batch_size = 8;
  t.steps = steps;
  t.lr = 1e-3;
  t.warmup = 5;
  t.seed = 42;
  t.eval_interval = 5;
  t.eval_size = 16;
  return t;
}

TEST(TrainingExample, RatioZeroMasksEverything) {
  EXPECT_EQ(train_mask_count_at(ScheduleKind::cosine, 0.0, 16), 16u);
  Rng rng(1);
  const TokenGrid g(4, 4, 2);
  const auto ex = mask_uniformly(g, 16, rng);
  EXPECT_EQ(ex.masked.masked_count(), 16u);
  EXPECT_EQ(ex.targets, g.tokens);
}

TEST(TrainingExample, CountFollowsScheduleSampler) {
  Rng a(3), b(3);
  const TokenGrid g(4, 4, 1);
  for (int i = 0; i < 100000; ++i) {
    const auto ex = make_training_example(g, ScheduleKind::square, a);
    const std::size_t n = sample_train_mask_count(ScheduleKind::square, 16, b);
    mask_uniformly(g, n, b);
    ASSERT_EQ(ex.masked.masked_count(), n);
  }
}

TEST(TrainingExample, PositionsAreUniformWithoutReplacement) {
  Rng rng(4);
  const TokenGrid g(4, 4, 1);
  constexpr int kDraws = 100000;
  constexpr std::size_t kCount = 5;
  std::vector<int> hits(16, 0);
  for (int i = 0; i < kDraws; ++i) {
    const auto ex = mask_uniformly(g, kCount, rng);
    ASSERT_EQ(ex.masked.masked_count(), kCount);
    for (std::size_t j = 0; j < 16; ++j) hits[j] += ex.mask[j];
  }
  const double p = kCount / 16.0;
  const double se = std::sqrt(p * (1 - p) / kDraws);
  for (int h : hits) EXPECT_NEAR(h / static_cast<double>(kDraws), p, 3 * se);
}

TEST(TrainingExample, RejectsMaskedInput) {
  Rng rng(5);
  EXPECT_THROW(mask_uniformly(TokenGrid::all_masked(2, 2), 1, rng), InvalidArgument);
}

TEST(TrainConfig, Validation) {
  TrainConfig t;
  t.beta1 = 1.0;
  EXPECT_THROW(t.validate(), InvalidArgument);
  t = TrainConfig{};
  t.lr = 0.0;
  EXPECT_THROW(t.validate(), InvalidArgument);
  EXPECT_NO_THROW(t.validate(true));
}

TEST(TrainStep, ZeroLearningRateLeavesParamsBitIdentical) {
  auto state = TrainState::fresh(tiny_config(), 7);
  const auto before = state.model.params.tensors;
  TrainConfig cfg = quick_train(1);
  cfg.lr = 0.0;
  const auto data = TrainingData::synthetic(SyntheticSource::iid({0.4, 0.3, 0.2, 0.1}));
  for (int i = 0; i < 3; ++i) {
    const Batch b = sample_batch(data, state.model.config, 8, state.rng);
    train_step(state, b, cfg);
  }
  EXPECT_EQ(state.model.params.tensors, before);
  EXPECT_EQ(state.step, 3u);
}

TEST(TrainStep, NonFiniteLossAborts) {
  auto state = TrainState::fresh(tiny_config(), 8);
  state.model.params.tensors[state.model.params.index("head.b")][0] =
      std::numeric_limits<float>::infinity();
  const auto data = TrainingData::synthetic(SyntheticSource::iid({0.4, 0.3, 0.2, 0.1}));
  const Batch b = sample_batch(data, state.model.config, 2, state.rng);
  EXPECT_THROW(train_step(state, b, quick_train(1)), NumericError);
}

// One fixed batch, masks redrawn every step: the loss settles at the
// per-token entropy of an i.i.d. source.
TEST(TrainStep, RepeatedBatchConvergesToSourceEntropy) {
  ModelConfig c = tiny_config(2);
  c.dropout = 0.0;
  auto state = TrainState::fresh(c, 9);
  const auto src = SyntheticSource::iid({0.7, 0.3});
  Rng data_rng(10);
  const Batch batch = sample_batch(TrainingData::synthetic(src), c, 64, data_rng);
  TrainConfig cfg = quick_train(500);
  cfg.label_smoothing = 0.0;
  double tail = 0.0;
  for (int s = 0; s < 500; ++s) {
    const double loss = train_step(state, batch, cfg);
    if (s >= 450) tail += loss / 50;
  }
  EXPECT_NEAR(tail, entropy(src.weights), 0.05);
}

TEST(Train, DeterministicReplayIsBitIdentical) {
  const auto data = TrainingData::synthetic(SyntheticSource::sticky_markov(4, 0.8));
  auto run = [&] {
    auto state = TrainState::fresh(tiny_config(), 11);
    train(state, data, quick_train(100));
    return serialize_checkpoint(to_checkpoint(state));
  };
  EXPECT_EQ(run(), run());
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const fs::path dir = tmp_dir("resume");
  const auto data = TrainingData::synthetic(SyntheticSource::sticky_markov(4, 0.8));
  auto straight = TrainState::fresh(tiny_config(), 12);
  train(straight, data, quick_train(15));

  auto first = TrainState::fresh(tiny_config(), 12);
  train(first, data, quick_train(5));
  save_checkpoint(dir / "ck.mgit", to_checkpoint(first));
  auto resumed = from_checkpoint(load_checkpoint(dir / "ck.mgit"));
  train(resumed, data, quick_train(15));

  EXPECT_EQ(resumed.step, 15u);
  EXPECT_EQ(resumed.model.params.tensors, straight.model.params.tensors);
  EXPECT_EQ(serialize_checkpoint(to_checkpoint(resumed)), serialize_checkpoint(to_checkpoint(straight)));
}

TEST(Train, MetricsAreRecordedEveryStep) {
  const fs::path dir = tmp_dir("metrics");
  const auto data = TrainingData::synthetic(SyntheticSource::iid({0.4, 0.3, 0.2, 0.1}));
  auto state = TrainState::fresh(tiny_config(), 13);
  MetricsWriter writer(dir / "metrics.csv");
  const auto rows = train(state, data, quick_train(12), [&](const MetricsRow& r) { writer.write(r); });
  ASSERT_EQ(rows.size(), 12u);
  std::ifstream in(dir / "metrics.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,loss,val_nll,seconds");
  std::uint64_t expected = 1;
  int evals = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string step, loss, val, secs;
    std::getline(ss, step, ',');
    std::getline(ss, loss, ',');
    std::getline(ss, val, ',');
    std::getline(ss, secs, ',');
    EXPECT_EQ(std::stoull(step), expected++);
    EXPECT_TRUE(std::isfinite(std::stod(loss)));
    if (!val.empty()) ++evals;
  }
  EXPECT_EQ(expected, 13u);
  EXPECT_EQ(evals, 3);  // steps 5, 10 and the final step
}

TEST(Train, ClassCountMustMatchData) {
  ModelConfig c = tiny_config();
  c.num_classes = 2;
  auto state = TrainState::fresh(c, 14);
  const auto one = TrainingData::synthetic(SyntheticSource::iid({0.4, 0.3, 0.2, 0.1}));
  EXPECT_THROW(train(state, one, quick_train(1)), InvalidArgument);
  const auto two = TrainingData::synthetic_classes(
      {SyntheticSource::iid({0.7, 0.1, 0.1, 0.1}), SyntheticSource::iid({0.1, 0.1, 0.1, 0.7})});
  EXPECT_NO_THROW(train(state, two, quick_train(1)));
}

TEST(Train, TokenGridDataIsCropped) {
  ModelConfig c = tiny_config();
  Rng rng(15);
  std::vector<TokenGrid> grids;
  for (int i = 0; i < 3; ++i) {
    TokenGrid g(6, 7);
    for (auto& t : g.tokens) t = static_cast<TokenId>(uniform_index(rng, 4));
    grids.push_back(g);
  }
  const auto data = TrainingData::tokens(grids);
  const Batch b = sample_batch(data, c, 10, rng);
  for (const auto& g : b.grids) {
    EXPECT_EQ(g.height, 4);
    EXPECT_EQ(g.width, 4);
  }
  auto state = TrainState::fresh(c, 16);
  EXPECT_NO_THROW(train(state, data, quick_train(2)));
}

Checkpoint sample_checkpoint() {
  auto state = TrainState::fresh(tiny_config(), 17);
  train(state, TrainingData::synthetic(SyntheticSource::iid({0.4, 0.3, 0.2, 0.1})), quick_train(3));
  Codebook cb;
  cb.size = 2;
  cb.patch = 2;
  cb.codes = {0.f, 0.25f, 0.5f, 0.75f, 1.f, 0.125f, 0.375f, 0.625f};
  return to_checkpoint(state, cb, {{"note", "unit test"}, {"lr", 3e-4}});
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path dir = tmp_dir("roundtrip");
  const Checkpoint ck = sample_checkpoint();
  save_checkpoint(dir / "a.mgit", ck);
  const Checkpoint loaded = load_checkpoint(dir / "a.mgit");
  EXPECT_EQ(loaded.params.names, ck.params.names);
  EXPECT_EQ(loaded.params.tensors, ck.params.tensors);
  EXPECT_EQ(loaded.adam_m, ck.adam_m);
  EXPECT_EQ(loaded.adam_v, ck.adam_v);
  EXPECT_EQ(loaded.codebook, ck.codebook);
  EXPECT_EQ(loaded.config, ck.config);
  EXPECT_EQ(loaded.step, ck.step);
  EXPECT_EQ(loaded.rng_state, ck.rng_state);
  EXPECT_EQ(loaded.metadata, ck.metadata);
  save_checkpoint(dir / "b.mgit", loaded);
  std::ifstream a(dir / "a.mgit", std::ios::binary), b(dir / "b.mgit", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Checkpoint, CodebookOnlyFile) {
  Checkpoint ck;
  ck.codebook = sample_checkpoint().codebook;
  const Checkpoint back = parse_checkpoint(serialize_checkpoint(ck));
  EXPECT_FALSE(back.config.has_value());
  EXPECT_EQ(back.codebook, ck.codebook);
  EXPECT_THROW(checkpoint_model(back), CheckpointError);
}

TEST(Checkpoint, TruncatedFileIsCorrupt) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  for (std::size_t keep : {std::size_t{0}, std::size_t{7}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    try {
      parse_checkpoint(bytes.substr(0, keep));
      ADD_FAILURE() << "accepted " << keep << " bytes";
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.code(), "corrupt_checkpoint");
    }
  }
}

TEST(Checkpoint, FlippedDataByteFailsChecksum) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  bytes[bytes.size() - 3] ^= 0x40;
  EXPECT_THROW(parse_checkpoint(bytes), CheckpointError);
}

TEST(Checkpoint, VersionMismatchIsRejected) {
  std::string bytes = serialize_checkpoint(sample_checkpoint());
  const auto pos = bytes.find("\"version\":1");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos + 10] = '9';
  try {
    parse_checkpoint(bytes);
    ADD_FAILURE() << "accepted a future version";
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), "checkpoint_version");
  }
}

TEST(Checkpoint, MissingFile) {
  try {
    load_checkpoint(fs::path(MASKGIT_TEST_TMP) / "does-not-exist.mgit");
    ADD_FAILURE();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.code(), "missing_checkpoint");
  }
}

}  // namespace
}  // namespace maskgit
