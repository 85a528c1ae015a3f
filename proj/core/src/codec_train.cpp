#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "valler/codec.hpp"
#include "valler/common.hpp"

namespace valler::codec {

namespace {

struct Assignment {
  int index;
  double distance;
};

Assignment nearest(const float* x, const FrameMatrix& entries) {
  Assignment best{0, std::numeric_limits<double>::infinity()};
  for (Eigen::Index k = 0; k < entries.rows(); ++k) {
    const float* e = entries.row(k).data();
    double acc = 0.0;
    for (Eigen::Index f = 0; f < entries.cols(); ++f) {
      const double d = static_cast<double>(x[f]) - static_cast<double>(e[f]);
      acc += d * d;
    }
    if (acc < best.distance) best = {static_cast<int>(k), acc};
  }
  return best;
}

std::size_t count_distinct(const FrameMatrix& data, std::size_t cap) {
  std::set<std::vector<float>> seen;
  for (Eigen::Index i = 0; i < data.rows() && seen.size() <= cap; ++i) {
    seen.emplace(data.row(i).data(), data.row(i).data() + data.cols());
  }
  return seen.size();
}

/// k-means++ seeding. With a pinned origin the first centre is the zero vector.
FrameMatrix kmeans_pp(const FrameMatrix& data, int k, bool pin_zero, Rng& rng) {
  const auto n = data.rows();
  FrameMatrix centres = FrameMatrix::Zero(k, data.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  auto absorb = [&](int c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d = (data.row(i).cast<double>() - centres.row(c).cast<double>()).squaredNorm();
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], d);
    }
  };

  int next = 0;
  if (pin_zero) {
    absorb(0);
    next = 1;
  } else {
    const auto first = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    centres.row(0) = data.row(first);
    absorb(0);
    next = 1;
  }
  for (int c = next; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2[static_cast<std::size_t>(pick)];
        if (u < 0.0) break;
      }
    } else {
      // Fewer distinct points than entries; duplicate a data point.
      pick = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    }
    centres.row(c) = data.row(pick);
    absorb(c);
  }
  return centres;
}

struct LayerStats {
  double mean_error = 0.0;
  int reseeded = 0;
};

FrameMatrix train_layer(const FrameMatrix& data, const CodecTrainConfig& cfg, Rng& rng,
                        LayerStats& stats) {
  const int k = cfg.entries;
  const auto n = data.rows();
  const auto dim = data.cols();
  FrameMatrix entries = kmeans_pp(data, k, cfg.pin_zero_entry, rng);

  Eigen::VectorXd ema_count = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd ema_sum = Eigen::MatrixXd::Zero(k, dim);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int first_free = cfg.pin_zero_entry ? 1 : 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (Eigen::Index i = n - 1; i > 0; --i) {
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(std::uniform_int_distribution<Eigen::Index>(0, i)(rng))]);
    }
    std::vector<std::uint64_t> usage(static_cast<std::size_t>(k), 0);
    for (Eigen::Index start = 0; start < n; start += cfg.batch) {
      const auto stop = std::min<Eigen::Index>(start + cfg.batch, n);
      Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
      Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, dim);
      for (auto s = start; s < stop; ++s) {
        const auto i = order[static_cast<std::size_t>(s)];
        const auto a = nearest(data.row(i).data(), entries);
        counts(a.index) += 1.0;
        sums.row(a.index) += data.row(i).cast<double>();
        ++usage[static_cast<std::size_t>(a.index)];
      }
      ema_count = cfg.decay * ema_count + (1.0 - cfg.decay) * counts;
      ema_sum = cfg.decay * ema_sum + (1.0 - cfg.decay) * sums;
      for (int c = first_free; c < k; ++c) {
        if (ema_count(c) > 1e-12) entries.row(c) = (ema_sum.row(c) / ema_count(c)).cast<float>();
      }
    }

    // Re-seed entries nobody used this epoch from high-error points.
    std::vector<double> err(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      err[static_cast<std::size_t>(i)] = nearest(data.row(i).data(), entries).distance;
    }
    const double total = std::accumulate(err.begin(), err.end(), 0.0);
    if (total <= 0.0) continue;
    for (int c = first_free; c < k; ++c) {
      if (usage[static_cast<std::size_t>(c)] != 0) continue;
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      Eigen::Index pick = 0;
      for (; pick < n - 1; ++pick) {
        u -= err[static_cast<std::size_t>(pick)];
        if (u < 0.0) break;
      }
      entries.row(c) = data.row(pick);
      ema_count(c) = 0.0;
      ema_sum.row(c).setZero();
      ++stats.reseeded;
    }
  }
  return entries;
}

}  // namespace

CodebookSet train_codebooks(std::span<const LatentSeq> corpus, const CodecTrainConfig& config,
                            const MergeConfig& merge, CodecTrainReport* report) {
  if (corpus.empty()) throw std::invalid_argument("codec training needs a non-empty corpus");
  if (config.entries < 2 || config.entries > 65535) {
    throw std::invalid_argument("codebook size must lie in [2, 65535]");
  }
  if (config.layers < 1 || config.layers > kNumLayers) {
    throw std::invalid_argument("codec layer count must lie in [1, 8]");
  }
  if (config.epochs < 1 || config.batch < 1) throw std::invalid_argument("epochs and batch must be >= 1");
  merge.validate();

  const int period = merge.period();
  std::vector<LatentSeq> residuals;
  residuals.reserve(corpus.size());
  std::size_t total_frames = 0;
  for (const auto& z : corpus) {
    if (z.length() == 0) throw std::invalid_argument("codec training utterance is empty");
    residuals.push_back(pad_to_multiple(z, period));
    total_frames += residuals.back().length();
  }
  const auto dim = static_cast<Eigen::Index>(residuals.front().dim());

  CodecTrainReport local;
  CodebookSet set;
  set.merge = merge;
  for (int d = 0; d < config.layers; ++d) {
    const int m = merge.rate(d);
    FrameMatrix data(static_cast<Eigen::Index>(total_frames), dim);
    std::vector<LatentSeq> merged;
    merged.reserve(residuals.size());
    Eigen::Index row = 0;
    for (const auto& r : residuals) {
      merged.push_back(merge_residual(r, m));
      data.middleRows(row, merged.back().frames.rows()) = merged.back().frames;
      row += merged.back().frames.rows();
    }

    if (count_distinct(data, static_cast<std::size_t>(config.entries)) <
        static_cast<std::size_t>(config.entries)) {
      local.warnings.push_back("layer " + std::to_string(d + 1) +
                               ": fewer distinct residual vectors than codebook entries "
                               "(degenerate codebook)");
    }

    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(d)));
    LayerStats stats;
    Codebook book(d, train_layer(data, config, rng, stats));

    double err = 0.0;
    for (std::size_t u = 0; u < residuals.size(); ++u) {
      const auto q = quantize_layer(merged[u], book);
      for (int idx : q.indices) ++book.usage[static_cast<std::size_t>(idx)];
      residuals[u].frames -= q.quantized.frames;
      err += residuals[u].frames.cast<double>().squaredNorm();
    }
    local.layer_mean_error.push_back(err / static_cast<double>(total_frames));
    local.reseeded.push_back(stats.reseeded);
    set.books.push_back(std::move(book));
  }
  if (report) *report = std::move(local);
  return set;
}

}  // namespace valler::codec
