#include "valler/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include "json.hpp"
#include "valler/common.hpp"

namespace valler::corpus {

namespace {

constexpr std::uint64_t kPrototypeStream = 0x70726f746fULL;  // "proto"
constexpr std::uint64_t kStructureStream = 0;
constexpr std::uint64_t kNoiseStream = 1;

}  // namespace

void PhonemeSeq::validate(int vocab) const {
  if (symbols.empty()) throw std::invalid_argument("phoneme sequence is empty");
  for (auto p : symbols) {
    if (p < 0 || p >= vocab) {
      throw std::invalid_argument("phoneme id " + std::to_string(p) + " outside vocabulary of " +
                                  std::to_string(vocab));
    }
  }
}

AlignedPhonemeSeq::AlignedPhonemeSeq(std::vector<PhonemeRun> runs) : runs_(std::move(runs)) {
  if (runs_.empty()) throw std::invalid_argument("alignment has no runs");
  for (const auto& r : runs_) {
    if (r.frames < 1) throw std::invalid_argument("alignment run with zero duration");
    total_ += static_cast<std::size_t>(r.frames);
  }
}

AlignedPhonemeSeq::AlignedPhonemeSeq(std::span<const PhonemeId> phonemes,
                                     std::span<const int> durations) {
  if (phonemes.size() != durations.size()) {
    throw std::invalid_argument("durations length " + std::to_string(durations.size()) +
                                " does not match phoneme count " +
                                std::to_string(phonemes.size()));
  }
  std::vector<PhonemeRun> runs;
  runs.reserve(phonemes.size());
  for (std::size_t i = 0; i < phonemes.size(); ++i) runs.push_back({phonemes[i], durations[i]});
  *this = AlignedPhonemeSeq(std::move(runs));
}

PhonemeSeq AlignedPhonemeSeq::phonemes() const {
  PhonemeSeq s;
  s.symbols.reserve(runs_.size());
  for (const auto& r : runs_) s.symbols.push_back(r.phoneme);
  return s;
}

std::vector<int> AlignedPhonemeSeq::durations() const {
  std::vector<int> d;
  d.reserve(runs_.size());
  for (const auto& r : runs_) d.push_back(r.frames);
  return d;
}

PrototypeTable::PrototypeTable(int vocab, int dim, std::uint64_t seed) {
  if (vocab < 1 || dim < 1) throw std::invalid_argument("prototype table needs vocab, dim >= 1");
  Rng rng(derive_seed(seed, kPrototypeStream));
  std::normal_distribution<double> normal(0.0, 1.0);
  table_.resize(vocab, dim);
  for (int v = 0; v < vocab; ++v) {
    // Redraw until the row is clearly separated from every earlier prototype.
    for (;;) {
      for (int f = 0; f < dim; ++f) table_(v, f) = static_cast<float>(normal(rng));
      bool distinct = true;
      for (int u = 0; u < v && distinct; ++u) {
        distinct = (table_.row(u) - table_.row(v)).squaredNorm() > 1e-2f;
      }
      if (distinct) break;
    }
  }
}

std::vector<PhonemeId> expand_alignment(const AlignedPhonemeSeq& a) {
  std::vector<PhonemeId> out;
  out.reserve(a.total_frames());
  for (const auto& r : a.runs()) out.insert(out.end(), static_cast<std::size_t>(r.frames), r.phoneme);
  return out;
}

AlignedPhonemeSeq downsample_alignment(const AlignedPhonemeSeq& a, int m) {
  if (m < 1) throw std::invalid_argument("merge rate must be >= 1");
  const auto& runs = a.runs();
  const int num_phonemes = static_cast<int>(runs.size());
  const int total = static_cast<int>(a.total_frames());
  int blocks = (total + m - 1) / m;

  // Run index covering the first frame of each block.
  std::vector<int> first_of_block(static_cast<std::size_t>(blocks));
  {
    int run = 0;
    int run_end = runs[0].frames;
    for (int b = 0; b < blocks; ++b) {
      const int frame = b * m;
      while (frame >= run_end) run_end += runs[static_cast<std::size_t>(++run)].frames;
      first_of_block[static_cast<std::size_t>(b)] = run;
    }
  }

  std::vector<int> assigned;
  if (blocks < num_phonemes) {
    blocks = num_phonemes;
    assigned.resize(static_cast<std::size_t>(blocks));
    std::iota(assigned.begin(), assigned.end(), 0);
  } else {
    // Stay as close to first-of-block as unit steps and full coverage allow.
    assigned.resize(static_cast<std::size_t>(blocks));
    int prev = -1;
    for (int b = 0; b < blocks; ++b) {
      const int lo = std::max(std::max(prev, 0), num_phonemes - blocks + b);
      const int hi = std::min(prev + 1, num_phonemes - 1);
      const int j = std::clamp(first_of_block[static_cast<std::size_t>(b)], lo, hi);
      assigned[static_cast<std::size_t>(b)] = j;
      prev = j;
    }
  }

  std::vector<PhonemeRun> out;
  out.reserve(runs.size());
  for (int j : assigned) {
    if (!out.empty() && static_cast<int>(out.size()) - 1 == j) {
      ++out.back().frames;
    } else {
      out.push_back({runs[static_cast<std::size_t>(j)].phoneme, 1});
    }
  }
  return AlignedPhonemeSeq(std::move(out));
}

AlignedPhonemeSeq pad_alignment(const AlignedPhonemeSeq& a, int m) {
  if (m < 1) throw std::invalid_argument("merge rate must be >= 1");
  auto runs = a.runs();
  const auto rem = static_cast<int>(a.total_frames() % static_cast<std::size_t>(m));
  if (rem != 0) runs.back().frames += m - rem;
  return AlignedPhonemeSeq(std::move(runs));
}

SyntheticUtterance gen_utterance(const PrototypeTable& prototypes, const PhonemeSeq& phonemes,
                                 std::span<const int> durations, std::uint64_t seed,
                                 double noise_std) {
  if (noise_std < 0.0) throw std::invalid_argument("noise_std must be non-negative");
  phonemes.validate(prototypes.vocab());
  SyntheticUtterance u;
  u.alignment = AlignedPhonemeSeq(phonemes.symbols, durations);
  u.phonemes = phonemes;
  u.seed = seed;

  const auto expanded = expand_alignment(u.alignment);
  u.frames = LatentSeq(expanded.size(), static_cast<std::size_t>(prototypes.dim()));
  Rng rng(derive_seed(seed, kNoiseStream));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t t = 0; t < expanded.size(); ++t) {
    auto row = u.frames.frames.row(static_cast<Eigen::Index>(t));
    row = prototypes.row(expanded[t]);
    if (noise_std > 0.0) {
      for (Eigen::Index f = 0; f < row.size(); ++f) {
        row(f) += static_cast<float>(noise_std * normal(rng));
      }
    }
  }
  return u;
}

void CorpusConfig::validate() const {
  if (vocab < 2) throw std::invalid_argument("corpus vocab must be >= 2");
  if (dim < 1) throw std::invalid_argument("corpus dim must be >= 1");
  if (count < 0) throw std::invalid_argument("corpus count must be >= 0");
  if (min_phonemes < 1 || max_phonemes < min_phonemes) {
    throw std::invalid_argument("invalid phoneme count bounds");
  }
  if (distinct_phonemes && max_phonemes > vocab) {
    throw std::invalid_argument("distinct phonemes need max_phonemes <= vocab");
  }
  if (min_duration < 1 || max_duration < min_duration) {
    throw std::invalid_argument("invalid duration bounds");
  }
  if (duration_quantum < 1) throw std::invalid_argument("duration quantum must be >= 1");
  if (geometric_stay < 0.0 || geometric_stay >= 1.0) {
    throw std::invalid_argument("geometric_stay must be in [0, 1)");
  }
  if (noise_std < 0.0) throw std::invalid_argument("noise_std must be non-negative");
}

std::string to_string(DurationKind k) {
  switch (k) {
    case DurationKind::Uniform: return "uniform";
    case DurationKind::Geometric: return "geometric";
    case DurationKind::Fixed: return "fixed";
  }
  return "uniform";
}

DurationKind duration_kind_from_string(const std::string& s) {
  if (s == "uniform") return DurationKind::Uniform;
  if (s == "geometric") return DurationKind::Geometric;
  if (s == "fixed") return DurationKind::Fixed;
  throw std::invalid_argument("unknown duration kind '" + s + "'");
}

std::size_t Corpus::total_frames() const {
  std::size_t total = 0;
  for (const auto& u : utterances) {
    total += static_cast<std::size_t>(std::accumulate(u.durations.begin(), u.durations.end(), 0));
  }
  return total;
}

SyntheticUtterance Corpus::materialize(const UtteranceRecord& rec,
                                       const PrototypeTable& protos) const {
  return gen_utterance(protos, PhonemeSeq{rec.phonemes}, rec.durations, rec.seed, rec.noise_std);
}

SyntheticUtterance Corpus::materialize(std::size_t index) const {
  return materialize(utterances.at(index), prototypes());
}

Corpus make_corpus(const CorpusConfig& config) {
  config.validate();
  Corpus c;
  c.vocab = config.vocab;
  c.dim = config.dim;
  c.seed = config.seed;
  c.utterances.reserve(static_cast<std::size_t>(config.count));

  for (int i = 0; i < config.count; ++i) {
    UtteranceRecord rec;
    rec.id = i;
    rec.seed = derive_seed(config.seed, static_cast<std::uint64_t>(i) + 1);
    rec.noise_std = config.noise_std;
    Rng rng(derive_seed(rec.seed, kStructureStream));

    const int length =
        std::uniform_int_distribution<int>(config.min_phonemes, config.max_phonemes)(rng);
    if (config.distinct_phonemes) {
      std::vector<PhonemeId> pool(static_cast<std::size_t>(config.vocab));
      std::iota(pool.begin(), pool.end(), 0);
      // Partial Fisher-Yates; std::shuffle's draw pattern is implementation-defined.
      for (int k = 0; k < length; ++k) {
        const int pick = std::uniform_int_distribution<int>(k, config.vocab - 1)(rng);
        std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(pick)]);
      }
      rec.phonemes.assign(pool.begin(), pool.begin() + length);
    } else {
      // No two adjacent phonemes are equal, so runs are recoverable from frame labels.
      rec.phonemes.push_back(std::uniform_int_distribution<int>(0, config.vocab - 1)(rng));
      std::uniform_int_distribution<int> draw(0, config.vocab - 2);
      for (int k = 1; k < length; ++k) {
        int p = draw(rng);
        if (p >= rec.phonemes.back()) ++p;
        rec.phonemes.push_back(p);
      }
    }

    rec.durations.reserve(static_cast<std::size_t>(length));
    for (int k = 0; k < length; ++k) {
      int units = config.min_duration;
      switch (config.duration_kind) {
        case DurationKind::Uniform:
          units = std::uniform_int_distribution<int>(config.min_duration, config.max_duration)(rng);
          break;
        case DurationKind::Geometric: {
          std::bernoulli_distribution stay(config.geometric_stay);
          while (units < config.max_duration && stay(rng)) ++units;
          break;
        }
        case DurationKind::Fixed:
          break;
      }
      rec.durations.push_back(units * config.duration_quantum);
    }
    c.utterances.push_back(std::move(rec));
  }
  return c;
}

std::size_t write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open corpus file '" + path.string() + "' for writing");

  const auto total = corpus.total_frames();
  nlohmann::json header = {{"version", corpus.version},
                           {"V_p", corpus.vocab},
                           {"F", corpus.dim},
                           {"count", corpus.utterances.size()},
                           {"seed", corpus.seed},
                           {"total_frames", total}};
  out << header.dump() << '\n';
  for (const auto& u : corpus.utterances) {
    nlohmann::json line = {{"id", u.id},
                           {"seed", u.seed},
                           {"phonemes", u.phonemes},
                           {"durations", u.durations},
                           {"noise_std", u.noise_std}};
    out << line.dump() << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for corpus file '" + path.string() + "'");
  return total;
}

Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open corpus file '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::Load, "corpus file has no header line");

  Corpus c;
  try {
    const auto header = nlohmann::json::parse(line);
    c.version = header.at("version").get<int>();
    if (c.version != 1) {
      throw Error(ErrorKind::Load, "unsupported corpus version " + std::to_string(c.version));
    }
    c.vocab = header.at("V_p").get<int>();
    c.dim = header.at("F").get<int>();
    c.seed = header.value("seed", std::uint64_t{0});
    const auto count = header.at("count").get<std::size_t>();
    c.utterances.reserve(count);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      UtteranceRecord rec;
      rec.id = j.at("id").get<int>();
      rec.seed = j.at("seed").get<std::uint64_t>();
      rec.phonemes = j.at("phonemes").get<std::vector<PhonemeId>>();
      rec.durations = j.at("durations").get<std::vector<int>>();
      rec.noise_std = j.at("noise_std").get<double>();
      c.utterances.push_back(std::move(rec));
    }
    if (c.utterances.size() != count) {
      throw Error(ErrorKind::Load, "corpus header count " + std::to_string(count) +
                                       " does not match " + std::to_string(c.utterances.size()) +
                                       " utterance lines");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Load, std::string("malformed corpus file: ") + e.what());
  }
  return c;
}

std::size_t gen_corpus(const CorpusConfig& config, const std::filesystem::path& path) {
  return write_corpus(make_corpus(config), path);
}

}  // namespace valler::corpus
