#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "valler/codec.hpp"
#include "valler/corpus.hpp"
#include "valler/decode.hpp"
#include "valler/lm.hpp"

namespace valler::bench {

// ---------------------------------------------------------------------------
// Step counts

enum class Pattern { Flatten, CoarseToFine, PhonemeInterleave, CotPrefix, Delay, MergedCoarseToFine };

std::string to_string(Pattern p);
Pattern pattern_from_string(const std::string& s);
/// Representative system for the arrangement ("VALL-E" for coarse-to-fine, ...).
std::string system_name(Pattern p);

struct PatternSpec {
  Pattern pattern = Pattern::CoarseToFine;
  int codec_layers = 8;  // Q
  double hz = 75.0;
  int phonemes = 105;    // P
  int merge_rate = 2;    // m
  int delay_offset = 1;  // per-layer delay of the delay pattern

  void validate() const;
};

/// Exact integer step count for `duration_s` seconds; T = round(duration * hz).
std::int64_t count_ar_steps(const PatternSpec& p, double duration_s);

/// The six arrangements in table order with shared parameters.
std::vector<PatternSpec> all_patterns(double hz, int phonemes, int merge_rate, int codec_layers = 8);

struct StepRow {
  PatternSpec spec;
  std::int64_t ar_steps = 0;
};

struct StepTable {
  double duration_s = 0.0;
  std::vector<StepRow> rows;

  std::string to_json() const;
  std::string to_table() const;
  std::string to_csv() const;
};

StepTable step_table(std::span<const PatternSpec> patterns, double duration_s);

// ---------------------------------------------------------------------------
// Wall-clock

struct TimingStats {
  std::size_t steps = 0;
  int reps = 0;
  std::vector<double> samples;  // seconds per repetition
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr() const { return q3 - q1; }
  double steps_per_second() const { return median > 0.0 ? static_cast<double>(steps) / median : 0.0; }

  std::string to_json() const;
};

/// Times `steps` sequential cached decoder steps, `reps` times. The prompt
/// prefill is outside the timed region. Throws std::invalid_argument for
/// steps == 0 or reps < 1 and Error(Capacity) when steps exceed max_seq_len.
TimingStats time_ar_loop(const lm::LMWeights& model, std::size_t steps, int reps);

/// Linear-interpolated quantile of `v` (copied and sorted), q in [0, 1].
double quantile(std::vector<double> v, double q);

// ---------------------------------------------------------------------------
// Merge quality

struct MergeCase {
  std::string label;
  codec::CodebookSet books;
};

struct MergeRow {
  std::string label;
  codec::MergeConfig merge;
  double mean_snr_db = 0.0;
};

struct OrderingCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct MergeQualityReport {
  std::vector<MergeRow> rows;
  std::vector<OrderingCheck> checks;

  const MergeRow* find(const std::string& label) const;
  bool all_passed() const;
  std::string to_json() const;
  std::string to_table() const;
  std::string to_csv() const;
};

/// Labelled configurations: none, L1-m2, L1-4-m2, L1-8-m2, L1-m3, L1-m4.
std::vector<std::pair<std::string, codec::MergeConfig>> standard_merge_configs();

/// Mean reconstruction SNR per case over `held_out`; runs the ordering checks
/// for whichever standard labels are present.
MergeQualityReport merge_quality_sweep(std::span<const LatentSeq> held_out,
                                       std::span<const MergeCase> cases);

// ---------------------------------------------------------------------------
// Robustness

enum class DecoderKind { MA, Baseline };
std::string to_string(DecoderKind d);

struct RobustnessCell {
  DecoderKind decoder = DecoderKind::MA;
  double top_p = 1.0;
  std::size_t utterances = 0;
  double error_proxy = 0.0;       // mean edit distance / L
  double repetition_rate = 0.0;   // path moves backwards
  double skip_rate = 0.0;         // path jumps over a phoneme
  double truncation_rate = 0.0;   // budget exhausted
  double mean_steps = 0.0;
};

struct RobustnessReport {
  std::uint64_t seed = 0;
  std::vector<RobustnessCell> cells;

  const RobustnessCell* find(DecoderKind d, double top_p) const;
  std::string to_json() const;
  std::string to_table() const;
  std::string to_csv() const;
};

struct RobustnessOptions {
  std::vector<double> top_p_grid{0.3, 0.5, 0.8, 1.0};
  std::vector<DecoderKind> decoders{DecoderKind::MA, DecoderKind::Baseline};
  decode::AdvanceMode mode = decode::AdvanceMode::RestrictedSoftmax;
  double expected_steps_per_phoneme = 4.0;
  std::uint64_t seed = 0;
};

/// Decodes every target sequence (text prompt only) with each decoder and top_p.
RobustnessReport robustness_sweep(const lm::LMWeights& ar,
                                  std::span<const std::vector<int>> targets,
                                  const RobustnessOptions& options);

/// Levenshtein distance.
std::size_t edit_distance(std::span<const int> a, std::span<const int> b);
/// Collapses consecutive repeats: [3,3,5,5,3] -> [3,5,3].
std::vector<int> collapse_runs(std::span<const int> s);

/// Edit distance between the run sequence of `emitted` and `targets`, over targets.size().
double phoneme_error(std::span<const int> emitted, std::span<const int> targets);

}  // namespace valler::bench
