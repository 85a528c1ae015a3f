#include "valler/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace valler::bench {

namespace {

constexpr Pattern kPatterns[] = {Pattern::Flatten,   Pattern::CoarseToFine,
                                 Pattern::PhonemeInterleave, Pattern::CotPrefix,
                                 Pattern::Delay,     Pattern::MergedCoarseToFine};

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

std::string to_string(Pattern p) {
  switch (p) {
    case Pattern::Flatten: return "flatten";
    case Pattern::CoarseToFine: return "coarse-to-fine";
    case Pattern::PhonemeInterleave: return "phoneme-interleave";
    case Pattern::CotPrefix: return "cot-prefix";
    case Pattern::Delay: return "delay";
    case Pattern::MergedCoarseToFine: return "merged-coarse-to-fine";
  }
  return "?";
}

Pattern pattern_from_string(const std::string& s) {
  for (auto p : kPatterns) {
    if (to_string(p) == s) return p;
  }
  throw std::invalid_argument("unknown pattern '" + s + "'");
}

std::string system_name(Pattern p) {
  switch (p) {
    case Pattern::Flatten: return "AudioLM";
    case Pattern::CoarseToFine: return "VALL-E";
    case Pattern::PhonemeInterleave: return "ELLA-V";
    case Pattern::CotPrefix: return "RALL-E";
    case Pattern::Delay: return "MusicGen";
    case Pattern::MergedCoarseToFine: return "VALL-E R";
  }
  return "?";
}

void PatternSpec::validate() const {
  if (codec_layers < 1 || !(hz > 0.0) || phonemes < 1 || merge_rate < 1 || delay_offset < 1) {
    throw std::invalid_argument("pattern parameters must all be positive");
  }
}

std::int64_t count_ar_steps(const PatternSpec& p, double duration_s) {
  p.validate();
  if (!(duration_s > 0.0)) throw std::invalid_argument("duration must be > 0");
  const std::int64_t t = std::llround(duration_s * p.hz);
  const std::int64_t q = p.codec_layers;
  const std::int64_t n = p.phonemes;
  const std::int64_t m = p.merge_rate;
  switch (p.pattern) {
    case Pattern::Flatten: return t * q;
    case Pattern::CoarseToFine: return t;
    case Pattern::PhonemeInterleave: return 2 * n + t;
    case Pattern::CotPrefix: return n + t;
    case Pattern::Delay: return (q - 1) * p.delay_offset + t;
    case Pattern::MergedCoarseToFine: return (t + m - 1) / m;
  }
  throw std::invalid_argument("unknown pattern");
}

std::vector<PatternSpec> all_patterns(double hz, int phonemes, int merge_rate, int codec_layers) {
  std::vector<PatternSpec> out;
  for (auto p : kPatterns) {
    PatternSpec s;
    s.pattern = p;
    s.hz = hz;
    s.phonemes = phonemes;
    s.merge_rate = merge_rate;
    s.codec_layers = codec_layers;
    out.push_back(s);
  }
  return out;
}

StepTable step_table(std::span<const PatternSpec> patterns, double duration_s) {
  StepTable t;
  t.duration_s = duration_s;
  for (const auto& p : patterns) t.rows.push_back({p, count_ar_steps(p, duration_s)});
  return t;
}

std::string StepTable::to_json() const {
  nlohmann::json rows_j = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_j.push_back({{"pattern", to_string(r.spec.pattern)},
                      {"system", system_name(r.spec.pattern)},
                      {"codec_layers", r.spec.codec_layers},
                      {"hz", r.spec.hz},
                      {"phonemes", r.spec.phonemes},
                      {"merge_rate", r.spec.merge_rate},
                      {"ar_steps", r.ar_steps}});
  }
  return nlohmann::json{{"duration_s", duration_s}, {"rows", rows_j}}.dump(2);
}

std::string StepTable::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(16) << "system" << std::setw(24) << "pattern" << std::right
     << std::setw(10) << "ar_steps" << '\n';
  for (const auto& r : rows) {
    std::string name = system_name(r.spec.pattern);
    if (r.spec.pattern == Pattern::MergedCoarseToFine) {
      name += " (m=" + std::to_string(r.spec.merge_rate) + ")";
    }
    os << std::left << std::setw(16) << name << std::setw(24) << to_string(r.spec.pattern)
       << std::right << std::setw(10) << r.ar_steps << '\n';
  }
  return os.str();
}

std::string StepTable::to_csv() const {
  std::ostringstream os;
  os << "system,pattern,ar_steps\n";
  for (const auto& r : rows) {
    os << system_name(r.spec.pattern) << ',' << to_string(r.spec.pattern) << ',' << r.ar_steps
       << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------

double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

TimingStats time_ar_loop(const lm::LMWeights& model, std::size_t steps, int reps) {
  if (steps == 0) throw std::invalid_argument("time_ar_loop needs steps > 0");
  if (reps < 1) throw std::invalid_argument("time_ar_loop needs reps >= 1");
  const auto& cfg = model.config();
  if (model.kind() != lm::ModelKind::AR) throw std::invalid_argument("timing needs an AR model");
  if (steps > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw Error(ErrorKind::Capacity, std::to_string(steps) + " steps exceed max_seq_len " +
                                         std::to_string(cfg.max_seq_len));
  }
  std::vector<int> prompt(8);
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    prompt[i] = static_cast<int>(i) % cfg.phoneme_vocab;
  }

  TimingStats stats;
  stats.steps = steps;
  stats.reps = reps;
  for (int r = 0; r < reps; ++r) {
    lm::ARDecoder dec(model, prompt);
    int a = cfg.acoustic_bos();
    int p = cfg.phoneme_bos();
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t s = 0; s < steps; ++s) {
      const auto out = dec.step(a, p);
      Eigen::Index best = 0;
      out.acoustic.head(cfg.acoustic_vocab).maxCoeff(&best);
      a = static_cast<int>(best);
      p = prompt[s % prompt.size()];
    }
    stats.samples.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  stats.median = quantile(stats.samples, 0.5);
  stats.q1 = quantile(stats.samples, 0.25);
  stats.q3 = quantile(stats.samples, 0.75);
  return stats;
}

std::string TimingStats::to_json() const {
  return nlohmann::json{{"steps", steps},
                        {"reps", reps},
                        {"median_s", median},
                        {"q1_s", q1},
                        {"q3_s", q3},
                        {"iqr_s", iqr()},
                        {"steps_per_second", steps_per_second()},
                        {"samples_s", samples}}
      .dump(2);
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, codec::MergeConfig>> standard_merge_configs() {
  using codec::MergeConfig;
  return {{"none", MergeConfig::none()},
          {"L1-m2", MergeConfig::layers(1, 1, 2)},
          {"L1-4-m2", MergeConfig::layers(1, 4, 2)},
          {"L1-8-m2", MergeConfig::layers(1, 8, 2)},
          {"L1-m3", MergeConfig::layers(1, 1, 3)},
          {"L1-m4", MergeConfig::layers(1, 1, 4)}};
}

const MergeRow* MergeQualityReport::find(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return &r;
  }
  return nullptr;
}

bool MergeQualityReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
}

MergeQualityReport merge_quality_sweep(std::span<const LatentSeq> held_out,
                                       std::span<const MergeCase> cases) {
  if (held_out.empty()) throw std::invalid_argument("merge sweep needs held-out utterances");
  if (cases.empty()) throw std::invalid_argument("merge sweep needs at least one codebook set");
  MergeQualityReport report;
  for (const auto& c : cases) {
    if (c.books.books.empty()) {
      throw std::invalid_argument("missing codebooks for merge config '" + c.label + "'");
    }
    double sum = 0.0;
    for (const auto& z : held_out) {
      const auto codes = codec::encode(z, c.books);
      sum += codec::reconstruction_snr(z, codec::decode(codes, c.books));
    }
    report.rows.push_back({c.label, c.books.merge, sum / static_cast<double>(held_out.size())});
  }

  auto ge = [&](const std::string& a, const std::string& b) {
    const auto* ra = report.find(a);
    const auto* rb = report.find(b);
    if (!ra || !rb) return;
    report.checks.push_back({a + " >= " + b, ra->mean_snr_db >= rb->mean_snr_db,
                             fixed(ra->mean_snr_db, 3) + " vs " + fixed(rb->mean_snr_db, 3)});
  };
  ge("none", "L1-m2");
  ge("L1-m2", "L1-4-m2");
  ge("L1-4-m2", "L1-8-m2");
  ge("L1-m2", "L1-m3");
  ge("L1-m3", "L1-m4");
  const auto* none = report.find("none");
  const auto* l1 = report.find("L1-m2");
  if (none && l1) {
    const double rel = std::abs(none->mean_snr_db - l1->mean_snr_db) / std::abs(none->mean_snr_db);
    report.checks.push_back({"L1-m2 within 10% of none", rel <= 0.10,
                             "relative gap " + fixed(100.0 * rel, 2) + "%"});
  }
  return report;
}

std::string MergeQualityReport::to_json() const {
  nlohmann::json r = nlohmann::json::array();
  for (const auto& row : rows) {
    r.push_back({{"label", row.label}, {"merge", row.merge.label()}, {"mean_snr_db", row.mean_snr_db}});
  }
  nlohmann::json c = nlohmann::json::array();
  for (const auto& ch : checks) {
    c.push_back({{"name", ch.name}, {"passed", ch.passed}, {"detail", ch.detail}});
  }
  return nlohmann::json{{"rows", r}, {"checks", c}, {"all_passed", all_passed()}}.dump(2);
}

std::string MergeQualityReport::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(10) << "config" << std::setw(18) << "rates" << std::right
     << std::setw(12) << "snr_db" << '\n';
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << r.label << std::setw(18) << r.merge.label() << std::right
       << std::setw(12) << fixed(r.mean_snr_db, 3) << '\n';
  }
  for (const auto& c : checks) {
    os << (c.passed ? "[ok]   " : "[FAIL] ") << c.name << " (" << c.detail << ")\n";
  }
  return os.str();
}

std::string MergeQualityReport::to_csv() const {
  std::ostringstream os;
  os << "label,rates,mean_snr_db\n";
  for (const auto& r : rows) os << r.label << ",\"" << r.merge.label() << "\"," << r.mean_snr_db << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

std::string to_string(DecoderKind d) { return d == DecoderKind::MA ? "ma" : "baseline"; }

std::size_t edit_distance(std::span<const int> a, std::span<const int> b) {
  std::vector<std::size_t> prev(b.size() + 1);
  std::vector<std::size_t> cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<int> collapse_runs(std::span<const int> s) {
  std::vector<int> out;
  for (int v : s) {
    if (out.empty() || out.back() != v) out.push_back(v);
  }
  return out;
}

double phoneme_error(std::span<const int> emitted, std::span<const int> targets) {
  if (targets.empty()) throw std::invalid_argument("phoneme error needs a non-empty target");
  return static_cast<double>(edit_distance(collapse_runs(emitted), targets)) /
         static_cast<double>(targets.size());
}

namespace {

bool path_skips(const decode::AlignmentPath& path) {
  int furthest = -1;
  std::vector<bool> seen;
  for (int p : path.positions) {
    if (p < 0) continue;
    if (static_cast<std::size_t>(p) >= seen.size()) seen.resize(static_cast<std::size_t>(p) + 1);
    seen[static_cast<std::size_t>(p)] = true;
    furthest = std::max(furthest, p);
  }
  for (int i = 0; i < furthest; ++i) {
    if (!seen[static_cast<std::size_t>(i)]) return true;
  }
  return false;
}

}  // namespace

RobustnessReport robustness_sweep(const lm::LMWeights& ar,
                                  std::span<const std::vector<int>> targets,
                                  const RobustnessOptions& options) {
  if (targets.empty()) throw std::invalid_argument("robustness sweep needs target sequences");
  RobustnessReport report;
  report.seed = options.seed;
  std::uint64_t cell_index = 0;
  for (auto decoder : options.decoders) {
    for (double top_p : options.top_p_grid) {
      RobustnessCell cell;
      cell.decoder = decoder;
      cell.top_p = top_p;
      std::size_t steps = 0;
      for (std::size_t u = 0; u < targets.size(); ++u) {
        // Both decoders see the same random stream for a given (top_p, utterance).
        const auto seed = derive_seed(derive_seed(options.seed, cell_index % options.top_p_grid.size()), u);
        decode::DecodeSession s(targets[u], seed);
        s.top_p = top_p;
        s.mode = options.mode;
        s.expected_steps_per_phoneme = options.expected_steps_per_phoneme;
        const auto r = decoder == DecoderKind::MA ? decode::ma_decode(ar, s)
                                                  : decode::baseline_decode(ar, s);
        const auto props = decode::check_ma_properties(r.path, static_cast<int>(targets[u].size()));
        cell.error_proxy += phoneme_error(r.phonemes, targets[u]);
        cell.repetition_rate += props.monotonicity ? 0.0 : 1.0;
        cell.skip_rate += path_skips(r.path) ? 1.0 : 0.0;
        cell.truncation_rate += r.status == decode::DecodeStatus::Truncated ? 1.0 : 0.0;
        steps += r.acoustic.size();
      }
      const double n = static_cast<double>(targets.size());
      cell.utterances = targets.size();
      cell.error_proxy /= n;
      cell.repetition_rate /= n;
      cell.skip_rate /= n;
      cell.truncation_rate /= n;
      cell.mean_steps = static_cast<double>(steps) / n;
      report.cells.push_back(cell);
      ++cell_index;
    }
  }
  return report;
}

const RobustnessCell* RobustnessReport::find(DecoderKind d, double top_p) const {
  for (const auto& c : cells) {
    if (c.decoder == d && std::abs(c.top_p - top_p) < 1e-12) return &c;
  }
  return nullptr;
}

std::string RobustnessReport::to_json() const {
  nlohmann::json c = nlohmann::json::array();
  for (const auto& cell : cells) {
    c.push_back({{"decoder", to_string(cell.decoder)},
                 {"top_p", cell.top_p},
                 {"utterances", cell.utterances},
                 {"error_proxy", cell.error_proxy},
                 {"repetition_rate", cell.repetition_rate},
                 {"skip_rate", cell.skip_rate},
                 {"truncation_rate", cell.truncation_rate},
                 {"mean_steps", cell.mean_steps}});
  }
  return nlohmann::json{{"seed", seed}, {"cells", c}}.dump(2);
}

std::string RobustnessReport::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(10) << "decoder" << std::right << std::setw(7) << "top_p"
     << std::setw(10) << "error" << std::setw(10) << "repeat" << std::setw(10) << "skip"
     << std::setw(10) << "trunc" << std::setw(10) << "steps" << '\n';
  for (const auto& c : cells) {
    os << std::left << std::setw(10) << to_string(c.decoder) << std::right << std::setw(7)
       << fixed(c.top_p, 2) << std::setw(10) << fixed(c.error_proxy, 4) << std::setw(10)
       << fixed(c.repetition_rate, 3) << std::setw(10) << fixed(c.skip_rate, 3) << std::setw(10)
       << fixed(c.truncation_rate, 3) << std::setw(10) << fixed(c.mean_steps, 1) << '\n';
  }
  return os.str();
}

std::string RobustnessReport::to_csv() const {
  std::ostringstream os;
  os << "decoder,top_p,error_proxy,repetition_rate,skip_rate,truncation_rate,mean_steps\n";
  for (const auto& c : cells) {
    os << to_string(c.decoder) << ',' << c.top_p << ',' << c.error_proxy << ','
       << c.repetition_rate << ',' << c.skip_rate << ',' << c.truncation_rate << ','
       << c.mean_steps << '\n';
  }
  return os.str();
}

}  // namespace valler::bench
