#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "valler/latent.hpp"

namespace valler::codec {

inline constexpr int kNumLayers = 8;

/// Merge rate m_d per quantizer layer; m_d == 1 leaves layer d unmerged.
struct MergeConfig {
  std::array<int, kNumLayers> rates{1, 1, 1, 1, 1, 1, 1, 1};

  static MergeConfig none() { return {}; }
  /// Layers [first, last] (1-based, inclusive) merged at rate m.
  static MergeConfig layers(int first, int last, int m);

  int rate(int layer) const { return rates.at(static_cast<std::size_t>(layer)); }
  /// Least common multiple of all rates; encode pads T to a multiple of it.
  int period() const;
  void validate() const;
  std::string label() const;

  friend bool operator==(const MergeConfig&, const MergeConfig&) = default;
};

MergeConfig parse_merge_config(const std::string& text);  // "2,1,1,1,1,1,1,1"

/// One quantizer layer: K entries of dimension F.
struct Codebook {
  int layer = 0;  // 0-based
  FrameMatrix entries;
  std::vector<std::uint64_t> usage;

  Codebook() = default;
  Codebook(int layer_index, FrameMatrix e);

  int size() const noexcept { return static_cast<int>(entries.rows()); }
  int dim() const noexcept { return static_cast<int>(entries.cols()); }
};

/// codes[d][t]: index into layer d's codebook for frame t.
struct CodeMatrix {
  std::vector<std::vector<std::uint16_t>> codes;
  MergeConfig merge;

  CodeMatrix() = default;
  CodeMatrix(int layers, std::size_t length, MergeConfig m);

  int layers() const noexcept { return static_cast<int>(codes.size()); }
  std::size_t length() const noexcept { return codes.empty() ? 0 : codes.front().size(); }
  std::uint16_t at(int layer, std::size_t t) const {
    return codes[static_cast<std::size_t>(layer)][t];
  }

  /// True when every merged layer is constant inside each aligned m_d block.
  bool block_constant() const;

  friend bool operator==(const CodeMatrix&, const CodeMatrix&) = default;
};

/// A trained set of codebooks together with the merge configuration they serve.
struct CodebookSet {
  std::vector<Codebook> books;
  MergeConfig merge;

  int layers() const noexcept { return static_cast<int>(books.size()); }
  int size() const { return books.at(0).size(); }
  int dim() const { return books.at(0).dim(); }
  std::uint64_t config_hash() const;
};

/// Average-pools each m-frame block and repeats the mean back to full length.
/// Requires length % m == 0.
LatentSeq merge_residual(const LatentSeq& r, int m);

/// Right-pads by repeating the final frame up to a multiple of m.
LatentSeq pad_to_multiple(const LatentSeq& z, int m);

struct LayerQuantization {
  std::vector<int> indices;
  LatentSeq quantized;
};

/// Nearest entry by squared Euclidean distance; ties go to the lowest index.
LayerQuantization quantize_layer(const LatentSeq& r, const Codebook& book);

/// Residual energies recorded during encode: energy[0] is ||z||^2 per frame,
/// energy[d + 1] the residual after layer d. Block-level sums are what shrink
/// monotonically for merged layers.
struct EncodeTrace {
  std::vector<std::vector<double>> frame_energy;
  double total(std::size_t stage) const;
};

/// Residual quantization with per-layer merging before each quantizer.
CodeMatrix encode(const LatentSeq& z, const CodebookSet& books, EncodeTrace* trace = nullptr);

/// z_hat[t] = sum_d book_d[codes(d, t)]. Throws Error(CorruptCode) on a bad index.
LatentSeq decode(const CodeMatrix& c, const CodebookSet& books);

/// 10 log10(||z||^2 / ||z - zhat||^2); +infinity for an exact reconstruction.
double reconstruction_snr(const LatentSeq& z, const LatentSeq& zhat);

struct CodecTrainConfig {
  int entries = 64;  // K
  int layers = kNumLayers;
  int epochs = 20;
  int batch = 256;
  double decay = 0.99;
  bool pin_zero_entry = true;  // entry 0 fixed at the origin
  std::uint64_t seed = 0;
};

struct CodecTrainReport {
  std::vector<double> layer_mean_error;  // mean ||residual||^2 per frame after each layer
  std::vector<int> reseeded;             // dead entries re-seeded per layer
  std::vector<std::string> warnings;
};

/// Layer-by-layer k-means++ initialised EMA k-means on merged residuals.
CodebookSet train_codebooks(std::span<const LatentSeq> corpus, const CodecTrainConfig& config,
                            const MergeConfig& merge, CodecTrainReport* report = nullptr);

void save_codebooks(const CodebookSet& set, const std::filesystem::path& path);
CodebookSet load_codebooks(const std::filesystem::path& path);

/// Optional trailing sections of a code file.
struct CodeFileExtras {
  std::optional<std::vector<std::uint32_t>> path;
  std::optional<std::uint64_t> config_hash;
};

std::vector<std::uint8_t> serialize_codes(const CodeMatrix& c, const CodeFileExtras& extras = {});
CodeMatrix deserialize_codes(std::span<const std::uint8_t> bytes, CodeFileExtras* extras = nullptr);
void save_codes(const CodeMatrix& c, const std::filesystem::path& path,
                const CodeFileExtras& extras = {});
CodeMatrix load_codes(const std::filesystem::path& path, CodeFileExtras* extras = nullptr);

}  // namespace valler::codec
