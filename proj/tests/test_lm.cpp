#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "valler/codec.hpp"
#include "valler/corpus.hpp"
#include "valler/lm.hpp"

namespace {

using namespace valler;
using namespace valler::lm;
using valler::testing::TempDir;

ARSequence random_ar_sequence(const LMConfig& c, Rng& rng, int prompt_len, int steps) {
  std::uniform_int_distribution<int> code(0, c.acoustic_vocab - 1);
  std::uniform_int_distribution<int> phone(0, c.phoneme_vocab - 1);
  ARSequence s;
  for (int i = 0; i < prompt_len; ++i) s.prompt.push_back(phone(rng));
  for (int i = 0; i < steps; ++i) {
    s.acoustic.push_back(code(rng));
    s.phonemes.push_back(phone(rng));
  }
  return s;
}

NARExample random_nar_example(const LMConfig& c, Rng& rng, int frames, int layer) {
  std::uniform_int_distribution<int> code(0, c.acoustic_vocab - 1);
  std::uniform_int_distribution<int> phone(0, c.phoneme_vocab - 1);
  NARExample ex;
  ex.target_layer = layer;
  for (int t = 0; t < frames; ++t) ex.phonemes.push_back(phone(rng));
  for (int l = 1; l < layer; ++l) {
    std::vector<int> row;
    for (int t = 0; t < frames; ++t) row.push_back(code(rng));
    ex.lower.push_back(row);
  }
  for (int t = 0; t < frames; ++t) ex.targets.push_back(code(rng));
  return ex;
}

double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Central-difference check of accumulated gradients on randomly drawn entries.
template <typename LossFn, typename BackpropFn>
void check_gradients(LMWeights& w, LossFn loss, BackpropFn backprop, int samples, std::uint64_t seed) {
  constexpr double kStep = 1e-5;
  w.zero_grad();
  backprop(w);
  std::vector<Matrix> analytic;
  for (const auto& p : w.params()) analytic.push_back(p.grad);

  Rng rng(seed);
  std::uniform_int_distribution<int> pick_param(0, static_cast<int>(w.params().size()) - 1);
  int checked = 0;
  double worst = 0.0;
  while (checked < samples) {
    const int pi = pick_param(rng);
    auto& value = w.param(pi).value;
    std::uniform_int_distribution<Eigen::Index> pick(0, value.size() - 1);
    const Eigen::Index k = pick(rng);
    const double saved = value.data()[k];
    value.data()[k] = saved + kStep;
    const double up = loss(w);
    value.data()[k] = saved - kStep;
    const double down = loss(w);
    value.data()[k] = saved;
    const double numeric = (up - down) / (2.0 * kStep);
    const double exact = analytic[static_cast<std::size_t>(pi)].data()[k];
    const double scale = std::max(std::abs(numeric), std::abs(exact));
    if (scale < 1e-7) {
      // Entry barely touches the loss; only absolute agreement is meaningful.
      EXPECT_LT(std::abs(numeric - exact), 1e-9) << w.param(pi).name << "[" << k << "]";
    } else {
      const double rel = std::abs(numeric - exact) / scale;
      worst = std::max(worst, rel);
      EXPECT_LT(rel, 1e-4) << w.param(pi).name << "[" << k << "] analytic " << exact
                           << " numeric " << numeric;
    }
    ++checked;
  }
  ::testing::Test::RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(LMConfig, Validation) {
  LMConfig c = LMConfig::tiny();
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = LMConfig::tiny();
  c.acoustic_vocab = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_NE(LMConfig::tiny().hash(ModelKind::AR), LMConfig::tiny().hash(ModelKind::NAR));
}

TEST(ArForward, ZeroWeightsGiveUniformHeads) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 1);
  w.fill(0.0);
  Rng rng(1);
  const auto logits = ar_forward(w, random_ar_sequence(w.config(), rng, 3, 5));
  const Matrix pa = softmax_rows(logits.acoustic);
  const Matrix pp = softmax_rows(logits.phoneme);
  EXPECT_NEAR(pa.maxCoeff(), 1.0 / pa.cols(), 1e-12);
  EXPECT_NEAR(pa.minCoeff(), 1.0 / pa.cols(), 1e-12);
  EXPECT_NEAR(pp.maxCoeff(), 1.0 / pp.cols(), 1e-12);
  EXPECT_NEAR(pp.minCoeff(), 1.0 / pp.cols(), 1e-12);
}

TEST(ArForward, ShapesAndSoftmaxNormalisation) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 2);
  Rng rng(2);
  const auto seq = random_ar_sequence(w.config(), rng, 4, 6);
  const auto logits = ar_forward(w, seq);
  EXPECT_EQ(logits.acoustic.rows(), 7);
  EXPECT_EQ(logits.acoustic.cols(), w.config().acoustic_vocab + 1);
  EXPECT_EQ(logits.phoneme.cols(), w.config().phoneme_vocab + 1);
  for (const Matrix& p : {softmax_rows(logits.acoustic), softmax_rows(logits.phoneme)}) {
    for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
  }
}

TEST(ArForward, Causality) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 3);
  Rng rng(3);
  const auto& c = w.config();
  std::uniform_int_distribution<int> code(0, c.acoustic_vocab - 1);
  std::uniform_int_distribution<int> phone(0, c.phoneme_vocab - 1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto seq = random_ar_sequence(c, rng, 3, 8);
    const auto base = ar_forward(w, seq);
    // Step s reads (a_{s-1}, p̂_s): acoustic[t] enters at step t + 1, phonemes[t] at step t.
    const int t = std::uniform_int_distribution<int>(0, 7)(rng);
    auto changed = seq;
    changed.acoustic[static_cast<std::size_t>(t)] = code(rng);
    changed.phonemes[static_cast<std::size_t>(t)] = phone(rng);
    const auto after = ar_forward(w, changed);
    for (int s = 0; s < t; ++s) {
      EXPECT_EQ(base.acoustic.row(s), after.acoustic.row(s));
      EXPECT_EQ(base.phoneme.row(s), after.phoneme.row(s));
    }
  }
}

TEST(ArForward, EveryPromptPhonemeIsVisibleAtStepOne) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 4);
  Rng rng(4);
  const auto seq = random_ar_sequence(w.config(), rng, 5, 3);
  const auto base = ar_forward(w, seq);
  for (std::size_t i = 0; i < seq.prompt.size(); ++i) {
    auto changed = seq;
    changed.prompt[i] = (seq.prompt[i] + 1) % w.config().phoneme_vocab;
    const auto after = ar_forward(w, changed);
    EXPECT_GT((base.acoustic.row(0) - after.acoustic.row(0)).cwiseAbs().maxCoeff(), 0.0) << i;
  }
}

TEST(ArForward, IncrementalDecodeMatchesFullForward) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 5);
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto seq = random_ar_sequence(w.config(), rng, 1 + trial % 4, 2 + trial);
    const auto full = ar_forward(w, seq);
    ARDecoder dec(w, seq.prompt);
    int prev = w.config().acoustic_bos();
    for (std::size_t s = 0; s < seq.steps(); ++s) {
      const int phoneme = s < seq.phonemes.size() ? seq.phonemes[s] : w.config().phoneme_eos();
      const auto step = dec.step(prev, phoneme);
      const auto r = static_cast<Eigen::Index>(s);
      EXPECT_LT((step.acoustic - full.acoustic.row(r)).cwiseAbs().maxCoeff(), 1e-5);
      EXPECT_LT((step.phoneme - full.phoneme.row(r)).cwiseAbs().maxCoeff(), 1e-5);
      if (s < seq.acoustic.size()) prev = seq.acoustic[s];
    }
  }
}

TEST(ArForward, AttentionProbeIsADistribution) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 6);
  const std::vector<int> prompt{1, 2, 3};
  ARDecoder dec(w, prompt);
  AttentionProbe probe;
  dec.step(w.config().acoustic_bos(), 1, &probe);
  dec.step(0, 2, &probe);
  ASSERT_EQ(probe.weights.size(), prompt.size() + 1 + 2);
  double sum = 0.0;
  for (double v : probe.weights) sum += v;
  EXPECT_NEAR(sum, 1.0, 1e-9);
}

TEST(ArForward, CapacityError) {
  LMConfig c = LMConfig::tiny();
  c.max_seq_len = 4;
  LMWeights w(ModelKind::AR, c, 7);
  Rng rng(7);
  try {
    ar_forward(w, random_ar_sequence(c, rng, 2, 4));
    FAIL() << "expected a capacity error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Capacity);
  }
  ARDecoder dec(w, std::vector<int>{1});
  for (int i = 0; i < 4; ++i) dec.step(c.acoustic_bos(), 0);
  EXPECT_THROW(dec.step(0, 0), Error);
}

TEST(ArLoss, PerfectAndUniformLogits) {
  const int k = 8;
  const std::vector<int> at{1, 3, 8};
  const std::vector<int> pt{2, 6, kPad};
  ARLogits perfect{Matrix::Zero(3, k + 1), Matrix::Zero(3, 7)};
  for (int s = 0; s < 3; ++s) {
    perfect.acoustic(s, at[static_cast<std::size_t>(s)]) = 100.0;
    if (pt[static_cast<std::size_t>(s)] != kPad) perfect.phoneme(s, pt[static_cast<std::size_t>(s)]) = 100.0;
  }
  EXPECT_NEAR(ar_loss(perfect, at, pt).total, 0.0, 1e-12);

  const ARLogits uniform{Matrix::Zero(3, k + 1), Matrix::Zero(3, 7)};
  const auto v = ar_loss(uniform, at, pt, 0.5);
  EXPECT_NEAR(v.acoustic, std::log(k + 1.0), 1e-12);
  EXPECT_NEAR(v.phoneme, std::log(7.0), 1e-12);
  EXPECT_NEAR(v.total, v.acoustic + 0.5 * v.phoneme, 1e-12);
  EXPECT_EQ(v.phoneme_count, 2u);
}

TEST(ArLoss, AllPadIsEmptyBatch) {
  const std::vector<int> pad{kPad, kPad};
  const ARLogits logits{Matrix::Zero(2, 5), Matrix::Zero(2, 4)};
  try {
    ar_loss(logits, pad, pad);
    FAIL() << "expected an empty-batch error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyBatch);
  }
}

TEST(Gradients, ArMatchesFiniteDifferences) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 11);
  Rng rng(11);
  const auto seq = random_ar_sequence(w.config(), rng, 3, 5);
  const auto at = seq.acoustic_targets(w.config());
  const auto pt = seq.phoneme_targets(w.config());
  check_gradients(
      w, [&](const LMWeights& m) { return ar_loss(ar_forward(m, seq), at, pt, 1.0).total; },
      [&](LMWeights& m) { ar_backprop(m, seq, 1.0, nullptr); }, 96, 12);
}

TEST(Gradients, NarMatchesFiniteDifferences) {
  LMWeights w(ModelKind::NAR, LMConfig::tiny(), 13);
  Rng rng(13);
  for (int layer : {2, 5}) {
    const auto ex = random_nar_example(w.config(), rng, 6, layer);
    check_gradients(
        w, [&](const LMWeights& m) { return nar_loss(nar_forward(m, ex), ex.targets); },
        [&](LMWeights& m) { nar_backprop(m, ex, nullptr); }, 64, 14 + static_cast<std::uint64_t>(layer));
  }
}

TEST(Gradients, BackpropLossEqualsForwardLoss) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 15);
  Rng rng(15);
  const auto seq = random_ar_sequence(w.config(), rng, 2, 4);
  const double forward = ar_loss(ar_forward(w, seq), seq.acoustic_targets(w.config()),
                                 seq.phoneme_targets(w.config()), 0.7)
                             .total;
  EXPECT_NEAR(ar_backprop(w, seq, 0.7, nullptr).total, forward, 1e-12);
}

TEST(NarForward, FramePermutationEquivariance) {
  LMWeights w(ModelKind::NAR, LMConfig::tiny(), 16);
  Rng rng(16);
  const auto ex = random_nar_example(w.config(), rng, 7, 4);
  const Matrix base = nar_forward(w, ex);
  const Eigen::Index i = 1;
  const Eigen::Index j = 5;

  auto swapped = ex;
  std::swap(swapped.phonemes[1], swapped.phonemes[5]);
  for (auto& row : swapped.lower) std::swap(row[1], row[5]);
  std::swap(swapped.targets[1], swapped.targets[5]);
  LMWeights moved = w;
  auto& pos = moved.param(moved.step_pos).value;
  pos.row(i).swap(pos.row(j));

  Matrix expect = base;
  expect.row(i).swap(expect.row(j));
  EXPECT_LT(max_abs_diff(nar_forward(moved, swapped), expect), 1e-12);
}

TEST(NarForward, ZeroLowerEmbeddingRemovesConditioning) {
  LMWeights w(ModelKind::NAR, LMConfig::tiny(), 17);
  w.acoustic_embedding(1).setZero();
  Rng rng(17);
  auto ex = random_nar_example(w.config(), rng, 5, 2);
  const Matrix base = nar_forward(w, ex);
  for (auto& c : ex.lower[0]) c = (c + 3) % w.config().acoustic_vocab;
  EXPECT_EQ(nar_forward(w, ex), base);
}

TEST(NarForward, PredictionMatrixAliasesNextEmbedding) {
  LMWeights w(ModelKind::NAR, LMConfig::tiny(), 18);
  for (int j = 1; j < w.config().code_layers; ++j) {
    w.prediction_matrix(j)(2, 3) = 0.125 * j;
    EXPECT_EQ(w.acoustic_embedding(j + 1)(2, 3), 0.125 * j);
    EXPECT_EQ(&w.prediction_matrix(j), &w.acoustic_embedding(j + 1));
  }
}

TEST(NarForward, OptimizerStepMovesBothTiedViews) {
  LMWeights w(ModelKind::NAR, LMConfig::tiny(), 19);
  Rng rng(19);
  const auto ex = random_nar_example(w.config(), rng, 6, 3);
  const Matrix before = w.prediction_matrix(2);
  w.zero_grad();
  nar_backprop(w, ex, nullptr);
  OptimizerConfig oc;
  oc.warmup_steps = 0;
  oc.total_steps = 10;
  AdamW opt(w, oc);
  opt.step(w);
  EXPECT_GT(max_abs_diff(w.prediction_matrix(2), before), 0.0);
  EXPECT_EQ(w.prediction_matrix(2), w.acoustic_embedding(3));
}

TEST(NarForward, RejectsBadLayer) {
  LMWeights w(ModelKind::NAR, LMConfig::tiny(), 20);
  Rng rng(20);
  auto ex = random_nar_example(w.config(), rng, 4, 2);
  ex.target_layer = 1;
  EXPECT_THROW(nar_forward(w, ex), std::invalid_argument);
  EXPECT_THROW(w.prediction_matrix(8), std::out_of_range);
}

TEST(AdamW, WarmupThenLinearDecay) {
  LMWeights w(ModelKind::AR, LMConfig::tiny(), 21);
  OptimizerConfig oc;
  oc.peak_lr = 1.0;
  oc.warmup_steps = 10;
  oc.total_steps = 110;
  AdamW opt(w, oc);
  EXPECT_DOUBLE_EQ(opt.learning_rate(5), 0.5);
  EXPECT_DOUBLE_EQ(opt.learning_rate(10), 1.0);
  EXPECT_DOUBLE_EQ(opt.learning_rate(60), 0.5);
  EXPECT_DOUBLE_EQ(opt.learning_rate(110), 0.0);
}

TEST(Weights, SerializationRoundTrip) {
  TempDir dir("lm");
  for (auto kind : {ModelKind::AR, ModelKind::NAR}) {
    LMWeights w(kind, LMConfig::tiny(), 22);
    w.codec_hash = 0xabcdef;
    save_weights(w, dir / "w.vrlm");
    const auto back = load_weights(dir / "w.vrlm");
    EXPECT_EQ(back.kind(), kind);
    EXPECT_EQ(back.codec_hash, w.codec_hash);
    EXPECT_EQ(back.config().hash(kind), w.config().hash(kind));
    ASSERT_EQ(back.params().size(), w.params().size());
    for (std::size_t i = 0; i < w.params().size(); ++i) {
      EXPECT_EQ(back.params()[i].name, w.params()[i].name);
      EXPECT_EQ(back.params()[i].value, w.params()[i].value.cast<float>().cast<double>());
    }
    // Reloading the reloaded weights is exact.
    EXPECT_EQ(serialize_weights(deserialize_weights(serialize_weights(back))), serialize_weights(back));
  }
}

TEST(Weights, LoadErrors) {
  TempDir dir("lm");
  try {
    load_weights(dir / "missing.vrlm");
    FAIL() << "expected an io error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Io);
    EXPECT_NE(std::string(e.what()).find("missing.vrlm"), std::string::npos);
  }
  auto bytes = serialize_weights(LMWeights(ModelKind::AR, LMConfig::tiny(), 23));
  auto truncated = bytes;
  truncated.resize(bytes.size() / 3);
  EXPECT_THROW(deserialize_weights(truncated), Error);
  bytes[1] = 'Z';
  EXPECT_THROW(deserialize_weights(bytes), Error);
}

TEST(Weights, TiedViewsSurviveReload) {
  LMWeights w(ModelKind::NAR, LMConfig::tiny(), 24);
  auto back = deserialize_weights(serialize_weights(w));
  back.prediction_matrix(3)(0, 0) = 7.0;
  EXPECT_EQ(back.acoustic_embedding(4)(0, 0), 7.0);
}

// Tiny noiseless corpus where each phoneme owns one code.
struct ToyData {
  TrainingSet set;
  codec::CodebookSet books;
};

ToyData toy_training_set(int count) {
  corpus::CorpusConfig cc;
  cc.vocab = 6;
  cc.dim = 4;
  cc.count = count;
  cc.min_phonemes = 2;
  cc.max_phonemes = 4;
  cc.min_duration = 1;
  cc.max_duration = 3;
  cc.duration_quantum = 2;
  cc.distinct_phonemes = true;
  cc.noise_std = 0.0;
  cc.seed = 31;
  const auto corpus = corpus::make_corpus(cc);
  std::vector<LatentSeq> latents;
  for (std::size_t i = 0; i < corpus.utterances.size(); ++i) latents.push_back(corpus.materialize(i).frames);
  codec::CodecTrainConfig ct;
  ct.entries = 8;
  ct.epochs = 3;
  ct.seed = 1;
  ToyData d;
  d.books = codec::train_codebooks(latents, ct, codec::MergeConfig::layers(1, 1, 2));
  d.set = build_training_set(corpus, d.books);
  return d;
}

LMConfig toy_config() {
  LMConfig c;
  c.layers = 1;
  c.heads = 2;
  c.dim = 24;
  c.ffn = 48;
  c.dropout = 0.0;
  c.max_seq_len = 32;
  c.acoustic_vocab = 8;
  c.phoneme_vocab = 6;
  return c;
}

TEST(Train, LossDecreasesAndAcousticAccuracyConverges) {
  const auto data = toy_training_set(120);
  LMWeights w(ModelKind::AR, toy_config(), 1);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.seed = 2;
  tc.eval_window = 20;
  tc.optimizer.total_steps = 400;
  tc.optimizer.warmup_steps = 20;
  tc.optimizer.peak_lr = 5e-3;
  const auto report = train(w, data.set, tc);
  ASSERT_GE(report.window_means.size(), 2u);
  EXPECT_LT(report.window_means[1], report.window_means[0]);
  EXPECT_LT(report.window_means.back(), report.window_means.front());
  EXPECT_GE(report.acoustic_accuracy, 0.99);
  EXPECT_EQ(w.codec_hash, data.books.config_hash());
  EXPECT_TRUE(w.all_finite());
}

TEST(Train, SameSeedSameWeights) {
  const auto data = toy_training_set(20);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.seed = 5;
  tc.optimizer.total_steps = 15;
  tc.optimizer.warmup_steps = 3;
  for (auto kind : {ModelKind::AR, ModelKind::NAR}) {
    LMWeights a(kind, toy_config(), 3);
    LMWeights b(kind, toy_config(), 3);
    train(a, data.set, tc);
    train(b, data.set, tc);
    EXPECT_EQ(serialize_weights(a), serialize_weights(b));
  }
}

TEST(Train, DivergenceRaisesTrainingFailure) {
  const auto data = toy_training_set(10);
  LMWeights w(ModelKind::AR, toy_config(), 4);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.optimizer.total_steps = 5;
  tc.optimizer.warmup_steps = 0;
  tc.optimizer.peak_lr = std::numeric_limits<double>::quiet_NaN();
  try {
    train(w, data.set, tc);
    FAIL() << "expected a training failure";
  } catch (const TrainingFailure& e) {
    EXPECT_EQ(e.step(), 1);
  }
}

TEST(Train, MakeArSequenceRunsAtBlockRate) {
  const corpus::AlignedPhonemeSeq a({{0, 4}, {1, 2}, {2, 2}});
  codec::CodeMatrix c(8, 8, codec::MergeConfig::layers(1, 1, 2));
  const std::vector<std::uint16_t> row{5, 5, 5, 5, 6, 6, 7, 7};
  c.codes[0] = row;
  const auto seq = make_ar_sequence(a, c);
  EXPECT_EQ(seq.prompt, (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(seq.acoustic, (std::vector<int>{5, 5, 6, 7}));
  EXPECT_EQ(seq.phonemes, (std::vector<int>{0, 0, 1, 2}));
  const auto cfg = toy_config();
  EXPECT_EQ(seq.acoustic_targets(cfg), (std::vector<int>{5, 5, 6, 7, cfg.acoustic_eos()}));
  EXPECT_EQ(seq.phoneme_targets(cfg), (std::vector<int>{0, 1, 2, cfg.phoneme_eos(), kPad}));
}

}  // namespace
