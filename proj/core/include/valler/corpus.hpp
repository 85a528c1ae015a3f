#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "valler/latent.hpp"

namespace valler::corpus {

using PhonemeId = int;

/// Phoneme transcription p_1..p_L over a vocabulary of `vocab` symbols.
struct PhonemeSeq {
  std::vector<PhonemeId> symbols;

  std::size_t size() const noexcept { return symbols.size(); }
  /// Throws std::invalid_argument if empty or any id is outside [0, vocab).
  void validate(int vocab) const;
};

struct PhonemeRun {
  PhonemeId phoneme;
  int frames;
  friend bool operator==(const PhonemeRun&, const PhonemeRun&) = default;
};

/// Run-length alignment (p_i, N_i); every N_i >= 1 and the total is T.
class AlignedPhonemeSeq {
 public:
  AlignedPhonemeSeq() = default;
  explicit AlignedPhonemeSeq(std::vector<PhonemeRun> runs);
  AlignedPhonemeSeq(std::span<const PhonemeId> phonemes, std::span<const int> durations);

  const std::vector<PhonemeRun>& runs() const noexcept { return runs_; }
  std::size_t num_runs() const noexcept { return runs_.size(); }
  std::size_t total_frames() const noexcept { return total_; }
  PhonemeSeq phonemes() const;
  std::vector<int> durations() const;

  friend bool operator==(const AlignedPhonemeSeq&, const AlignedPhonemeSeq&) = default;

 private:
  std::vector<PhonemeRun> runs_;
  std::size_t total_ = 0;
};

/// Per-phoneme latent prototypes; frame t of an utterance is prototype(p̂_t) + noise.
class PrototypeTable {
 public:
  PrototypeTable(int vocab, int dim, std::uint64_t seed);

  int vocab() const noexcept { return static_cast<int>(table_.rows()); }
  int dim() const noexcept { return static_cast<int>(table_.cols()); }
  auto row(PhonemeId p) const { return table_.row(p); }
  const FrameMatrix& table() const noexcept { return table_; }

 private:
  FrameMatrix table_;
};

struct SyntheticUtterance {
  LatentSeq frames;
  PhonemeSeq phonemes;
  AlignedPhonemeSeq alignment;
  std::uint64_t seed = 0;
};

/// Position t of the result holds the phoneme whose run covers frame t.
std::vector<PhonemeId> expand_alignment(const AlignedPhonemeSeq& a);

/// Block-rate view of an alignment: each m-frame block takes the phoneme of its
/// first frame. A repair pass then reassigns blocks so that the result stays
/// monotone with unit steps and every phoneme owns at least one block; if the
/// utterance has fewer blocks than phonemes the result is extended to one block
/// per phoneme. The output length is therefore max(ceil(T/m), L).
AlignedPhonemeSeq downsample_alignment(const AlignedPhonemeSeq& a, int m);

/// Extends the final run so that T becomes a multiple of m.
AlignedPhonemeSeq pad_alignment(const AlignedPhonemeSeq& a, int m);

SyntheticUtterance gen_utterance(const PrototypeTable& prototypes, const PhonemeSeq& phonemes,
                                 std::span<const int> durations, std::uint64_t seed,
                                 double noise_std);

enum class DurationKind { Uniform, Geometric, Fixed };

struct CorpusConfig {
  int vocab = 40;       // V_p
  int dim = 16;         // F
  int count = 100;
  int min_phonemes = 4;
  int max_phonemes = 12;
  DurationKind duration_kind = DurationKind::Uniform;
  int min_duration = 2;  // frames, before quantum scaling
  int max_duration = 12;
  double geometric_stay = 0.6;  // per-unit continuation probability
  int duration_quantum = 1;     // every duration is a multiple of this
  bool distinct_phonemes = false;
  double noise_std = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

std::string to_string(DurationKind k);
DurationKind duration_kind_from_string(const std::string& s);

struct UtteranceRecord {
  int id = 0;
  std::uint64_t seed = 0;
  std::vector<PhonemeId> phonemes;
  std::vector<int> durations;
  double noise_std = 0.0;
};

struct Corpus {
  int version = 1;
  int vocab = 0;
  int dim = 0;
  std::uint64_t seed = 0;  // prototype seed
  std::vector<UtteranceRecord> utterances;

  std::size_t total_frames() const;
  PrototypeTable prototypes() const { return PrototypeTable(vocab, dim, seed); }
  SyntheticUtterance materialize(const UtteranceRecord& rec, const PrototypeTable& protos) const;
  SyntheticUtterance materialize(std::size_t index) const;
};

/// Pure function of the config.
Corpus make_corpus(const CorpusConfig& config);

/// Writes the JSONL corpus and returns the total frame count.
std::size_t write_corpus(const Corpus& corpus, const std::filesystem::path& path);
Corpus read_corpus(const std::filesystem::path& path);

/// gen_corpus: make + write.
std::size_t gen_corpus(const CorpusConfig& config, const std::filesystem::path& path);

}  // namespace valler::corpus
