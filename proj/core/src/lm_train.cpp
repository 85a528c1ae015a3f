#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "valler/lm.hpp"

namespace valler::lm {

AdamW::AdamW(const LMWeights& w, OptimizerConfig cfg) : cfg_(cfg) {
  if (cfg_.total_steps < 1 || cfg_.warmup_steps < 0) {
    throw std::invalid_argument("optimizer needs total_steps >= 1 and warmup_steps >= 0");
  }
  for (const auto& p : w.params()) {
    m_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
  }
}

double AdamW::learning_rate(int step) const {
  if (cfg_.warmup_steps > 0 && step <= cfg_.warmup_steps) {
    return cfg_.peak_lr * static_cast<double>(step) / cfg_.warmup_steps;
  }
  const int span = std::max(1, cfg_.total_steps - cfg_.warmup_steps);
  const double remaining = static_cast<double>(cfg_.total_steps - step) / span;
  return cfg_.peak_lr * std::clamp(remaining, 0.0, 1.0);
}

void AdamW::step(LMWeights& w, double grad_scale) {
  ++t_;
  double norm2 = 0.0;
  for (const auto& p : w.params()) norm2 += p.grad.squaredNorm();
  double scale = grad_scale;
  const double norm = std::sqrt(norm2) * grad_scale;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) scale *= cfg_.clip_norm / norm;

  const double lr = learning_rate(t_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  auto& params = w.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    const Matrix g = p.grad * scale;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const Matrix update =
        (m_[i] / bc1).array() / ((v_[i] / bc2).array().sqrt() + cfg_.eps);
    if (p.decay && cfg_.weight_decay > 0.0) p.value *= 1.0 - lr * cfg_.weight_decay;
    p.value -= lr * update;
  }
}

ARSequence make_ar_sequence(const corpus::AlignedPhonemeSeq& alignment,
                            const codec::CodeMatrix& codes) {
  if (codes.length() != alignment.total_frames()) {
    throw std::invalid_argument("code matrix length differs from alignment length");
  }
  const int m = codes.merge.rate(0);
  const auto blocks = corpus::expand_alignment(corpus::downsample_alignment(alignment, m));
  ARSequence seq;
  seq.prompt = alignment.phonemes().symbols;
  seq.phonemes = blocks;
  seq.acoustic.reserve(blocks.size());
  const std::size_t last = codes.length() - 1;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    seq.acoustic.push_back(codes.at(0, std::min(b * static_cast<std::size_t>(m), last)));
  }
  return seq;
}

TrainingSet build_training_set(const corpus::Corpus& corpus, const codec::CodebookSet& books) {
  if (corpus.utterances.empty()) throw std::invalid_argument("training corpus is empty");
  if (books.layers() != codec::kNumLayers) {
    throw std::invalid_argument("LM training needs an 8-layer codebook set");
  }
  TrainingSet set;
  set.merge_rate = books.merge.rate(0);
  set.codec_hash = books.config_hash();
  const auto protos = corpus.prototypes();
  for (const auto& rec : corpus.utterances) {
    const auto utt = corpus.materialize(rec, protos);
    const auto codes = codec::encode(utt.frames, books);
    set.ar.push_back(make_ar_sequence(utt.alignment, codes));
    NARExample ex;
    ex.phonemes = corpus::expand_alignment(utt.alignment);
    for (const auto& row : codes.codes) ex.lower.emplace_back(row.begin(), row.end());
    set.nar.push_back(std::move(ex));
  }
  return set;
}

namespace {

int argmax(const RowVector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

}  // namespace

double ar_acoustic_accuracy(const LMWeights& w, std::span<const ARSequence> data,
                            double* phoneme_accuracy) {
  std::size_t total = 0;
  std::size_t hit_a = 0;
  std::size_t hit_p = 0;
  std::size_t phoneme_total = 0;
  for (const auto& seq : data) {
    const auto logits = ar_forward(w, seq);
    const auto at = seq.acoustic_targets(w.config());
    const auto pt = seq.phoneme_targets(w.config());
    for (Eigen::Index s = 0; s < logits.acoustic.rows(); ++s) {
      hit_a += argmax(logits.acoustic.row(s)) == at[static_cast<std::size_t>(s)];
      ++total;
      if (pt[static_cast<std::size_t>(s)] == kPad) continue;
      hit_p += argmax(logits.phoneme.row(s)) == pt[static_cast<std::size_t>(s)];
      ++phoneme_total;
    }
  }
  if (total == 0) return 0.0;
  if (phoneme_accuracy && phoneme_total > 0) {
    *phoneme_accuracy = static_cast<double>(hit_p) / phoneme_total;
  }
  return static_cast<double>(hit_a) / total;
}

double nar_accuracy(const LMWeights& w, std::span<const NARExample> data) {
  std::size_t total = 0;
  std::size_t hit = 0;
  for (const auto& base : data) {
    for (int n = 2; n <= w.config().code_layers; ++n) {
      NARExample ex = base;
      ex.target_layer = n;
      ex.targets = ex.lower[static_cast<std::size_t>(n - 1)];
      const Matrix logits = nar_forward(w, ex);
      for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        hit += argmax(logits.row(t)) == ex.targets[static_cast<std::size_t>(t)];
        ++total;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / total;
}

TrainReport train(LMWeights& w, const TrainingSet& data, const TrainConfig& cfg,
                  const StepCallback& on_step) {
  const bool is_ar = w.kind() == ModelKind::AR;
  const std::size_t n = is_ar ? data.ar.size() : data.nar.size();
  if (n == 0) throw std::invalid_argument("training set is empty");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");

  const auto start = std::chrono::steady_clock::now();
  TrainReport report;
  report.kind = w.kind();
  report.seed = cfg.seed;
  report.config_hash = w.config().hash(w.kind());
  w.codec_hash = data.codec_hash;

  Rng rng(derive_seed(cfg.seed, 0x747261696eULL));
  Rng dropout_rng(derive_seed(cfg.seed, 0x64726f70ULL));
  Rng* drop = w.config().dropout > 0.0 ? &dropout_rng : nullptr;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::uniform_int_distribution<int> pick_layer(2, w.config().code_layers);
  AdamW opt(w, cfg.optimizer);

  double window_sum = 0.0;
  int window_count = 0;
  for (int step = 1; step <= cfg.optimizer.total_steps; ++step) {
    w.zero_grad();
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto idx = pick(rng);
      if (is_ar) {
        loss += ar_backprop(w, data.ar[idx], cfg.phoneme_weight, drop).total;
      } else {
        NARExample ex = data.nar[idx];
        ex.target_layer = pick_layer(rng);
        ex.targets = ex.lower[static_cast<std::size_t>(ex.target_layer - 1)];
        loss += nar_backprop(w, ex, drop);
      }
    }
    loss /= cfg.batch_size;
    if (!std::isfinite(loss)) {
      throw TrainingFailure(step, "training diverged at step " + std::to_string(step) +
                                      " (non-finite loss)");
    }
    opt.step(w, 1.0 / cfg.batch_size);
    if (!w.all_finite()) {
      throw TrainingFailure(step, "non-finite weights after step " + std::to_string(step));
    }
    report.loss_curve.push_back(loss);
    window_sum += loss;
    if (++window_count == cfg.eval_window || step == cfg.optimizer.total_steps) {
      report.window_means.push_back(window_sum / window_count);
      window_sum = 0.0;
      window_count = 0;
    }
    if (on_step) on_step(step, loss);
  }

  constexpr std::size_t kEvalLimit = 256;
  if (is_ar) {
    const auto count = std::min(kEvalLimit, data.ar.size());
    report.acoustic_accuracy = ar_acoustic_accuracy(
        w, std::span<const ARSequence>(data.ar.data(), count), &report.phoneme_accuracy);
  } else {
    const auto count = std::min<std::size_t>(64, data.nar.size());
    report.acoustic_accuracy = nar_accuracy(w, std::span<const NARExample>(data.nar.data(), count));
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

std::string TrainReport::to_json() const {
  nlohmann::json j = {{"kind", to_string(kind)},
                      {"seed", seed},
                      {"config_hash", config_hash},
                      {"loss_curve", loss_curve},
                      {"window_means", window_means},
                      {"acoustic_accuracy", acoustic_accuracy},
                      {"seconds", seconds}};
  if (kind == ModelKind::AR) j["phoneme_accuracy"] = phoneme_accuracy;
  return j.dump(2);
}

}  // namespace valler::lm
