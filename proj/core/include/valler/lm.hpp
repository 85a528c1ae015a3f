#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "valler/codec.hpp"
#include "valler/common.hpp"
#include "valler/corpus.hpp"

namespace valler::lm {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

enum class ModelKind : std::uint8_t { AR = 1, NAR = 2 };

std::string to_string(ModelKind kind);

/// Target id excluded from every loss.
inline constexpr int kPad = -1;

/// Transformer hyper-parameters plus vocabulary layout.
///
/// Acoustic ids: [0, K) codes, K = EOS, K + 1 = BOS (input only).
/// Phoneme ids:  [0, V_p) phonemes, V_p = EOS (also terminates the text prompt),
///               V_p + 1 = BOS (reserved; the step layout starts from p̂_1).
///
/// The reference scale this design follows is 12 layers, 16 heads, width 1024,
/// feed-forward 4096, dropout 0.1; the defaults here are desk scale.
struct LMConfig {
  int layers = 4;
  int heads = 4;
  int dim = 128;
  int ffn = 512;
  double dropout = 0.1;
  int max_seq_len = 512;  // per position table (prompt and steps have separate tables)
  int acoustic_vocab = 64;
  int phoneme_vocab = 40;
  int code_layers = codec::kNumLayers;

  int acoustic_eos() const noexcept { return acoustic_vocab; }
  int acoustic_bos() const noexcept { return acoustic_vocab + 1; }
  int phoneme_eos() const noexcept { return phoneme_vocab; }
  int phoneme_bos() const noexcept { return phoneme_vocab + 1; }
  int head_dim() const noexcept { return dim / heads; }

  void validate() const;
  std::uint64_t hash(ModelKind kind) const;

  /// 2 layers, width 16: the configuration used for gradient checks.
  static LMConfig tiny(int acoustic_vocab = 8, int phoneme_vocab = 6);
};

/// Named parameter with its gradient accumulator.
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
  bool decay = true;  // weight decay applies (matrices), not for gains/biases
};

struct BlockParams {
  int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Parameters of one AR or NAR model.
///
/// Weight tying: the NAR head predicting layer n reads the same Param as the
/// acoustic embedding of layer n, and the AR acoustic head reads the first
/// K + 1 rows of the AR acoustic embedding. A gradient step on either view
/// moves both.
class LMWeights {
 public:
  LMWeights(ModelKind kind, LMConfig config, std::uint64_t seed);

  ModelKind kind() const noexcept { return kind_; }
  const LMConfig& config() const noexcept { return config_; }

  std::vector<Param>& params() noexcept { return params_; }
  const std::vector<Param>& params() const noexcept { return params_; }
  Param& param(int i) { return params_[static_cast<std::size_t>(i)]; }
  const Param& param(int i) const { return params_[static_cast<std::size_t>(i)]; }
  int find(const std::string& name) const;  // -1 when absent

  void zero_grad();
  void fill(double v);  // every parameter, including gains
  std::size_t parameter_count() const;
  bool all_finite() const;

  /// NAR only. Embedding table of code layer `layer` (1-based).
  Matrix& acoustic_embedding(int layer);
  /// NAR only. Prediction matrix of head j (1-based, predicts layer j + 1).
  Matrix& prediction_matrix(int j);

  // Indices into params(); -1 where a model kind does not use the slot.
  int phoneme_emb = -1;
  int acoustic_emb = -1;  // AR
  int prompt_pos = -1;    // AR
  int step_pos = -1;      // AR: step positions; NAR: frame positions
  int acoustic_bias = -1; // AR
  int phoneme_head = -1;  // AR
  int phoneme_bias = -1;  // AR
  std::vector<int> code_emb;   // NAR, one per code layer
  std::vector<int> code_bias;  // NAR, per predicted layer (index n - 1)
  int layer_emb = -1;          // NAR
  std::vector<BlockParams> blocks;
  int lnf_g = -1;
  int lnf_b = -1;

  std::uint64_t codec_hash = 0;  // hash of the codebooks the model was trained against

 private:
  int add(std::string name, int rows, int cols, bool decay);
  ModelKind kind_;
  LMConfig config_;
  std::vector<Param> params_;
};

/// One AR training/teacher-forcing sequence at block rate.
///
/// Step s feeds (a_{s-1}, p̂_s), with BOS before a_1 and EOS after p̂_S, and
/// predicts a_s together with the phoneme of the following step p̂_{s+1}.
/// The acoustic head therefore sees the phoneme its token is aligned to.
struct ARSequence {
  std::vector<int> prompt;     // p_1..p_L (the terminator is appended internally)
  std::vector<int> acoustic;   // a_1..a_S  merged layer-1 codes
  std::vector<int> phonemes;   // p̂_1..p̂_S aligned phonemes

  std::size_t steps() const noexcept { return acoustic.size() + 1; }  // + EOS step
  std::vector<int> acoustic_targets(const LMConfig& c) const;
  std::vector<int> phoneme_targets(const LMConfig& c) const;
  void validate(const LMConfig& c) const;
};

struct ARLogits {
  Matrix acoustic;  // steps x (K + 1)
  Matrix phoneme;   // steps x (V_p + 1)
};

/// One NAR example: predict code layer `target_layer` (2..8) for all T frames.
struct NARExample {
  std::vector<int> phonemes;             // p̂_1..p̂_T at full rate
  std::vector<std::vector<int>> lower;   // layers 1..n-1, each length T
  int target_layer = 2;
  std::vector<int> targets;              // layer n codes (may be empty for inference)

  void validate(const LMConfig& c) const;
};

ARLogits ar_forward(const LMWeights& w, const ARSequence& seq);
Matrix nar_forward(const LMWeights& w, const NARExample& ex);

struct LossValue {
  double total = 0.0;
  double acoustic = 0.0;
  double phoneme = 0.0;
  std::size_t acoustic_count = 0;
  std::size_t phoneme_count = 0;
};

/// Mean CE over acoustic targets + lambda * mean CE over phoneme targets.
/// kPad targets are skipped; a batch with no targets throws Error(EmptyBatch).
LossValue ar_loss(const ARLogits& logits, std::span<const int> acoustic_targets,
                  std::span<const int> phoneme_targets, double phoneme_weight = 1.0);
double nar_loss(const Matrix& logits, std::span<const int> targets);

/// Row softmax (numerically stabilised).
Matrix softmax_rows(const Matrix& logits);

/// Loss + gradient accumulation into params()[i].grad (grads are added, not reset).
/// `rng` enables dropout when the config's rate is > 0; pass nullptr for eval mode.
LossValue ar_backprop(LMWeights& w, const ARSequence& seq, double phoneme_weight, Rng* rng);
double nar_backprop(LMWeights& w, const NARExample& ex, Rng* rng);

/// Head-averaged attention row of the first block for the most recent step.
struct AttentionProbe {
  std::vector<double> weights;  // over all cached positions, sums to 1
};

/// Incremental AR decoding with a key/value cache. Prompt tokens are prefilled
/// with bidirectional attention; each step attends to the prompt and all
/// earlier steps, matching ar_forward exactly.
class ARDecoder {
 public:
  ARDecoder(const LMWeights& w, std::span<const int> prompt);

  struct StepLogits {
    RowVector acoustic;
    RowVector phoneme;
  };

  /// Feeds the pair (acoustic_in, phoneme_in) and returns the logits it produces.
  /// The first call feeds (BOS, p̂_1).
  StepLogits step(int acoustic_in, int phoneme_in, AttentionProbe* probe = nullptr);

  std::size_t prompt_length() const noexcept { return prompt_len_; }
  std::size_t steps() const noexcept { return steps_; }
  std::size_t capacity() const noexcept { return static_cast<std::size_t>(cfg_.max_seq_len); }

 private:
  const LMWeights& w_;
  LMConfig cfg_;
  std::size_t prompt_len_ = 0;
  std::size_t steps_ = 0;
  std::size_t cached_ = 0;
  std::vector<Matrix> keys_;    // per block, (prompt + max steps) x dim
  std::vector<Matrix> values_;
};

// ---------------------------------------------------------------------------
// Training

struct OptimizerConfig {
  double peak_lr = 2e-3;
  int warmup_steps = 100;
  int total_steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
};

/// Adam with decoupled weight decay, linear warm-up then linear decay.
class AdamW {
 public:
  AdamW(const LMWeights& w, OptimizerConfig cfg);
  double learning_rate(int step) const;
  /// Applies one update from the accumulated grads (scaled by `grad_scale`).
  void step(LMWeights& w, double grad_scale = 1.0);
  int steps_taken() const noexcept { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  int t_ = 0;
};

struct TrainConfig {
  int batch_size = 16;
  double phoneme_weight = 1.0;  // lambda
  int eval_window = 25;         // steps per loss-curve window
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
};

struct TrainReport {
  ModelKind kind = ModelKind::AR;
  std::vector<double> loss_curve;     // per optimizer step
  std::vector<double> window_means;   // mean loss per eval window
  double acoustic_accuracy = 0.0;     // teacher forced
  double phoneme_accuracy = 0.0;      // AR only
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  double seconds = 0.0;

  std::string to_json() const;
};

/// Training material derived from a corpus and trained codebooks.
struct TrainingSet {
  std::vector<ARSequence> ar;
  std::vector<NARExample> nar;  // target_layer/targets filled per draw; lower holds all 8 layers
  int merge_rate = 1;
  std::uint64_t codec_hash = 0;
};

/// AR streams run at layer-1 block rate (first-of-block alignment with repair);
/// NAR examples hold all code layers at full rate.
TrainingSet build_training_set(const corpus::Corpus& corpus, const codec::CodebookSet& books);
ARSequence make_ar_sequence(const corpus::AlignedPhonemeSeq& alignment,
                            const codec::CodeMatrix& codes);

/// Teacher-forced accuracies over a set of sequences.
double ar_acoustic_accuracy(const LMWeights& w, std::span<const ARSequence> data,
                            double* phoneme_accuracy = nullptr);
double nar_accuracy(const LMWeights& w, std::span<const NARExample> data);

using StepCallback = std::function<void(int step, double loss)>;

TrainReport train(LMWeights& w, const TrainingSet& data, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

// ---------------------------------------------------------------------------
// Persistence

void save_weights(const LMWeights& w, const std::filesystem::path& path);
LMWeights load_weights(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_weights(const LMWeights& w);
LMWeights deserialize_weights(std::span<const std::uint8_t> bytes);

}  // namespace valler::lm
