#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "valler/codec.hpp"
#include "valler/common.hpp"
#include "valler/corpus.hpp"
#include "valler/lm.hpp"

namespace valler::decode {

/// How the phoneme pointer turns phoneme-head logits into an advance probability.
///
/// RestrictedSoftmax renormalises the head over {p_j, p_{j+1}} (or {p_j, EOS}
/// on the last phoneme) and advances with the mass of p_{j+1}.
/// LiteralSigmoid takes e = restricted probability of p_j and advances with
/// 1 / (1 + exp(e)), which can only produce values in [0.27, 0.5].
enum class AdvanceMode { RestrictedSoftmax, LiteralSigmoid };

std::string to_string(AdvanceMode mode);
AdvanceMode advance_mode_from_string(const std::string& s);

struct AdvanceDecision {
  bool advance = false;
  double probability = 0.0;  // of advancing
};

/// Probability of moving the pointer from j to j + 1. Throws Error(Pointer)
/// unless 0 <= j < targets.size().
double advance_probability(const lm::RowVector& phoneme_logits, std::span<const int> targets,
                           int j, int eos_id, AdvanceMode mode);

/// Draws exactly one uniform from `rng`.
AdvanceDecision advance_decision(const lm::RowVector& phoneme_logits, std::span<const int> targets,
                                 int j, int eos_id, AdvanceMode mode, Rng& rng);

struct TopPSample {
  int token = 0;
  std::size_t support = 0;  // nucleus size
  double kept_mass = 0.0;   // probability mass of the nucleus before renormalising
  double probability = 0.0; // renormalised probability of the drawn token
};

/// Nucleus sampling: keep the smallest most-probable prefix with mass >= top_p
/// (at least one token), renormalise, draw. Draws exactly one uniform.
/// Throws Error(Numeric) on NaN/inf logits.
TopPSample sample_top_p(const lm::RowVector& logits, double top_p, Rng& rng);

/// Nucleus (sorted indices and renormalised probabilities) without sampling.
std::vector<std::pair<int, double>> top_p_support(const lm::RowVector& logits, double top_p);

/// Phoneme pointer positions j_1..j_S, one per generated step.
struct AlignmentPath {
  std::vector<int> positions;
  friend bool operator==(const AlignmentPath&, const AlignmentPath&) = default;
};

struct MAProperties {
  bool locality = false;
  bool monotonicity = false;
  bool completeness = false;
  bool all() const noexcept { return locality && monotonicity && completeness; }
};

MAProperties check_ma_properties(const AlignmentPath& path, int num_phonemes);

/// Maps a free-running phoneme stream onto target indices: stay, step, jump
/// forward (skip) or back (repeat) to the nearest matching index; a phoneme
/// absent from the target maps to -1.
AlignmentPath infer_path(std::span<const int> emitted, std::span<const int> targets);

enum class DecodeStatus { Complete, Truncated };

std::string to_string(DecodeStatus s);

struct StepAudit {
  std::size_t step = 0;
  int pointer = 0;
  double advance_prob = 0.0;  // NaN when the pointer is not sampled (prosody transfer)
  int acoustic_token = 0;
  std::size_t kept_support_size = 0;
};

struct DecodeResult {
  std::vector<int> acoustic;  // generated layer-1 codes at block rate
  std::vector<int> phonemes;  // emitted phoneme per generated step
  AlignmentPath path;
  DecodeStatus status = DecodeStatus::Truncated;
  std::vector<StepAudit> audit;
  std::vector<std::vector<double>> attention;  // per step, over text prompt phonemes
  std::optional<codec::CodeMatrix> codes;      // all layers, full rate (after NAR)
};

/// Inputs and running state of one decode. The session owns its RNG.
struct DecodeSession {
  // Acoustic prompt (may be empty): its transcription p^p plus block-rate
  // layer-1 codes and aligned phonemes.
  std::vector<int> prompt_phonemes;
  std::vector<int> prompt_codes;
  std::vector<int> prompt_aligned;
  std::vector<int> target_phonemes;  // p^t

  double top_p = 0.8;
  AdvanceMode mode = AdvanceMode::RestrictedSoftmax;
  std::size_t step_budget = 0;  // 0 -> default_budget()
  double expected_steps_per_phoneme = 4.0;
  bool capture_attention = false;
  Rng rng;

  // Running state.
  int pointer = 0;
  std::vector<int> emitted_acoustic;
  std::vector<int> emitted_phonemes;

  DecodeSession(std::vector<int> targets, std::uint64_t seed) : target_phonemes(std::move(targets)), rng(seed) {}

  /// 4 x (prompt steps + expected generated steps).
  std::size_t default_budget() const;
  std::size_t budget() const { return step_budget ? step_budget : default_budget(); }
  std::vector<int> text_prompt() const;  // p^p ++ p^t
  void validate(const lm::LMConfig& config) const;
};

/// Source of per-step logits for the decode loops; lets tests script a model.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual lm::ARDecoder::StepLogits step(int acoustic_in, int phoneme_in,
                                         lm::AttentionProbe* probe) = 0;
  virtual const lm::LMConfig& config() const = 0;
  virtual std::size_t capacity() const = 0;  // maximum number of step() calls
};

/// StepModel backed by a KV-cached transformer.
class CachedStepModel : public StepModel {
 public:
  CachedStepModel(const lm::LMWeights& w, std::span<const int> text_prompt)
      : weights_(w), decoder_(w, text_prompt) {}
  lm::ARDecoder::StepLogits step(int a, int p, lm::AttentionProbe* probe) override {
    return decoder_.step(a, p, probe);
  }
  const lm::LMConfig& config() const override { return weights_.config(); }
  std::size_t capacity() const override { return decoder_.capacity(); }

 private:
  const lm::LMWeights& weights_;
  lm::ARDecoder decoder_;
};

/// Monotonic-alignment decoding: emitted phonemes are always the pointer's.
DecodeResult ma_decode(StepModel& model, DecodeSession& session);
DecodeResult ma_decode(const lm::LMWeights& ar, DecodeSession& session);

/// Free-running decoding: phonemes sampled from the full head (same top_p),
/// stops on an EOS in either stream or when the budget runs out.
DecodeResult baseline_decode(StepModel& model, DecodeSession& session);
DecodeResult baseline_decode(const lm::LMWeights& ar, DecodeSession& session);

/// Greedy layer 2..8 prediction, in that order.
codec::CodeMatrix nar_complete(const lm::LMWeights& nar, std::span<const int> layer1_full_rate,
                               std::span<const int> aligned_full_rate,
                               const codec::MergeConfig& merge);

/// Full-rate layer-1 codes and aligned phonemes from a block-rate decode.
struct FullRateStreams {
  std::vector<int> layer1;
  std::vector<int> aligned;
};
FullRateStreams expand_to_full_rate(const DecodeResult& r, std::span<const int> targets, int m);

/// MA decode followed by NAR completion.
DecodeResult synthesize(const lm::LMWeights& ar, const lm::LMWeights& nar, DecodeSession& session,
                        const codec::MergeConfig& merge);

/// Decoding with the pointer schedule forced to `preset` (downsampled to the
/// AR block rate). The output spans exactly preset.total_frames() frames.
DecodeResult prosody_transfer(StepModel& model, DecodeSession& session,
                              const corpus::AlignedPhonemeSeq& preset, int merge_rate);
DecodeResult prosody_transfer(const lm::LMWeights& ar, const lm::LMWeights* nar,
                              DecodeSession& session, const corpus::AlignedPhonemeSeq& preset,
                              const codec::MergeConfig& merge);

/// JSONL audit: one {"step","pointer","advance_prob","acoustic_token","kept_support_size"} per line.
std::string audit_jsonl(const DecodeResult& r);

}  // namespace valler::decode
