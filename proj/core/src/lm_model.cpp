#include <cmath>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include "valler/lm.hpp"

namespace valler::lm {

std::string to_string(ModelKind kind) { return kind == ModelKind::AR ? "ar" : "nar"; }

void LMConfig::validate() const {
  if (layers < 1 || heads < 1 || dim < 1 || ffn < 1) {
    throw std::invalid_argument("LM layers, heads, dim and ffn must be >= 1");
  }
  if (dim % heads != 0) throw std::invalid_argument("LM dim must be divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
  if (acoustic_vocab < 2 || phoneme_vocab < 2) {
    throw std::invalid_argument("vocabulary sizes must be >= 2");
  }
  if (max_seq_len < 2) throw std::invalid_argument("max_seq_len must be >= 2");
  if (code_layers < 2 || code_layers > codec::kNumLayers) {
    throw std::invalid_argument("code_layers must lie in [2, 8]");
  }
}

std::uint64_t LMConfig::hash(ModelKind kind) const {
  std::ostringstream os;
  os << to_string(kind) << ':' << layers << ':' << heads << ':' << dim << ':' << ffn << ':'
     << dropout << ':' << max_seq_len << ':' << acoustic_vocab << ':' << phoneme_vocab << ':'
     << code_layers;
  return fnv1a(os.str());
}

LMConfig LMConfig::tiny(int acoustic_vocab, int phoneme_vocab) {
  LMConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 16;
  c.ffn = 32;
  c.dropout = 0.0;
  c.max_seq_len = 64;
  c.acoustic_vocab = acoustic_vocab;
  c.phoneme_vocab = phoneme_vocab;
  return c;
}

// ---------------------------------------------------------------------------
// Parameters

int LMWeights::add(std::string name, int rows, int cols, bool decay) {
  Param p;
  p.name = std::move(name);
  p.value = Matrix::Zero(rows, cols);
  p.grad = Matrix::Zero(rows, cols);
  p.decay = decay;
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

LMWeights::LMWeights(ModelKind kind, LMConfig config, std::uint64_t seed)
    : kind_(kind), config_(config) {
  config_.validate();
  const int d = config_.dim;
  const int k = config_.acoustic_vocab;
  const int v = config_.phoneme_vocab;

  phoneme_emb = add("phoneme_emb", v + 2, d, true);
  step_pos = add("step_pos", config_.max_seq_len, d, true);
  if (kind_ == ModelKind::AR) {
    acoustic_emb = add("acoustic_emb", k + 2, d, true);
    prompt_pos = add("prompt_pos", config_.max_seq_len, d, true);
  } else {
    for (int l = 1; l <= config_.code_layers; ++l) {
      code_emb.push_back(add("code_emb." + std::to_string(l), k, d, true));
    }
    layer_emb = add("layer_emb", config_.code_layers, d, true);
  }
  for (int b = 0; b < config_.layers; ++b) {
    const std::string p = "block." + std::to_string(b) + ".";
    BlockParams bp{};
    bp.ln1_g = add(p + "ln1.g", 1, d, false);
    bp.ln1_b = add(p + "ln1.b", 1, d, false);
    bp.wq = add(p + "attn.wq", d, d, true);
    bp.bq = add(p + "attn.bq", 1, d, false);
    bp.wk = add(p + "attn.wk", d, d, true);
    bp.bk = add(p + "attn.bk", 1, d, false);
    bp.wv = add(p + "attn.wv", d, d, true);
    bp.bv = add(p + "attn.bv", 1, d, false);
    bp.wo = add(p + "attn.wo", d, d, true);
    bp.bo = add(p + "attn.bo", 1, d, false);
    bp.ln2_g = add(p + "ln2.g", 1, d, false);
    bp.ln2_b = add(p + "ln2.b", 1, d, false);
    bp.w1 = add(p + "ffn.w1", d, config_.ffn, true);
    bp.b1 = add(p + "ffn.b1", 1, config_.ffn, false);
    bp.w2 = add(p + "ffn.w2", config_.ffn, d, true);
    bp.b2 = add(p + "ffn.b2", 1, d, false);
    blocks.push_back(bp);
  }
  lnf_g = add("lnf.g", 1, d, false);
  lnf_b = add("lnf.b", 1, d, false);
  if (kind_ == ModelKind::AR) {
    acoustic_bias = add("acoustic_head.b", 1, k + 1, false);
    phoneme_head = add("phoneme_head.w", d, v + 1, true);
    phoneme_bias = add("phoneme_head.b", 1, v + 1, false);
  } else {
    for (int n = 2; n <= config_.code_layers; ++n) {
      code_bias.push_back(add("code_head.b." + std::to_string(n), 1, k, false));
    }
  }

  Rng rng(derive_seed(seed, 0x77656967ULL));
  std::normal_distribution<double> normal(0.0, 1.0);
  const double residual_scale = 1.0 / std::sqrt(2.0 * config_.layers);
  for (auto& p : params_) {
    const bool is_gain = p.name.ends_with(".g");
    const bool is_bias = !p.decay && !is_gain;
    if (is_gain) {
      p.value.setOnes();
    } else if (!is_bias) {
      double sd = 0.02;
      if (p.name.ends_with("_emb") || p.name.find("code_emb") != std::string::npos) sd = 0.1;
      if (p.name.ends_with("_pos")) sd = 0.05;
      if (p.name.ends_with("attn.wo") || p.name.ends_with("ffn.w2")) sd *= residual_scale;
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = sd * normal(rng);
    }
  }
}

int LMWeights::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

void LMWeights::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

void LMWeights::fill(double v) {
  for (auto& p : params_) p.value.setConstant(v);
}

std::size_t LMWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

bool LMWeights::all_finite() const {
  for (const auto& p : params_) {
    if (!p.value.allFinite()) return false;
  }
  return true;
}

Matrix& LMWeights::acoustic_embedding(int layer) {
  if (kind_ != ModelKind::NAR) throw std::logic_error("per-layer acoustic embeddings are NAR-only");
  if (layer < 1 || layer > config_.code_layers) throw std::out_of_range("code layer out of range");
  return param(code_emb[static_cast<std::size_t>(layer - 1)]).value;
}

Matrix& LMWeights::prediction_matrix(int j) {
  if (j < 1 || j >= config_.code_layers) throw std::out_of_range("prediction head out of range");
  return acoustic_embedding(j + 1);
}

// ---------------------------------------------------------------------------
// Sequences

std::vector<int> ARSequence::acoustic_targets(const LMConfig& c) const {
  std::vector<int> t(acoustic);
  t.push_back(c.acoustic_eos());
  return t;
}

std::vector<int> ARSequence::phoneme_targets(const LMConfig& c) const {
  std::vector<int> t(phonemes.begin() + (phonemes.empty() ? 0 : 1), phonemes.end());
  t.push_back(c.phoneme_eos());
  t.push_back(kPad);
  return t;
}

void ARSequence::validate(const LMConfig& c) const {
  if (acoustic.size() != phonemes.size()) {
    throw std::invalid_argument("AR acoustic and aligned-phoneme streams differ in length");
  }
  if (prompt.empty()) throw std::invalid_argument("AR prompt is empty");
  if (prompt.size() + 1 > static_cast<std::size_t>(c.max_seq_len)) {
    throw Error(ErrorKind::Capacity, "AR prompt of " + std::to_string(prompt.size()) +
                                         " phonemes exceeds max_seq_len");
  }
  if (steps() > static_cast<std::size_t>(c.max_seq_len)) {
    throw Error(ErrorKind::Capacity,
                "AR sequence of " + std::to_string(steps()) + " steps exceeds max_seq_len " +
                    std::to_string(c.max_seq_len));
  }
  for (int p : prompt) {
    if (p < 0 || p >= c.phoneme_vocab) throw std::invalid_argument("AR prompt phoneme out of range");
  }
  for (std::size_t i = 0; i < acoustic.size(); ++i) {
    if (acoustic[i] < 0 || acoustic[i] >= c.acoustic_vocab) {
      throw std::invalid_argument("AR acoustic token out of range");
    }
    if (phonemes[i] < 0 || phonemes[i] >= c.phoneme_vocab) {
      throw std::invalid_argument("AR aligned phoneme out of range");
    }
  }
}

void NARExample::validate(const LMConfig& c) const {
  if (target_layer < 2 || target_layer > c.code_layers) {
    throw std::invalid_argument("NAR target layer must lie in [2, code_layers]");
  }
  const auto t = phonemes.size();
  if (t == 0) throw std::invalid_argument("NAR example is empty");
  if (t > static_cast<std::size_t>(c.max_seq_len)) {
    throw Error(ErrorKind::Capacity, "NAR example of " + std::to_string(t) +
                                         " frames exceeds max_seq_len");
  }
  if (lower.size() < static_cast<std::size_t>(target_layer - 1)) {
    throw std::invalid_argument("NAR example lacks lower code layers");
  }
  for (int l = 0; l < target_layer - 1; ++l) {
    const auto& row = lower[static_cast<std::size_t>(l)];
    if (row.size() != t) throw std::invalid_argument("NAR streams differ in length");
    for (int code : row) {
      if (code < 0 || code >= c.acoustic_vocab) throw std::invalid_argument("NAR code out of range");
    }
  }
  for (int p : phonemes) {
    if (p < 0 || p >= c.phoneme_vocab) throw std::invalid_argument("NAR phoneme out of range");
  }
  if (!targets.empty() && targets.size() != t) {
    throw std::invalid_argument("NAR targets differ in length from inputs");
  }
}

// ---------------------------------------------------------------------------
// Transformer stack

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

struct LNCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, LNCache* cache) {
  const auto n = x.rows();
  const auto d = x.cols();
  Matrix xhat(n, d);
  Eigen::VectorXd inv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    inv(i) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(i) = (x.row(i).array() - mu) * inv(i);
  }
  Matrix y = (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const LNCache& c, const Matrix& g, Matrix& dg,
                           Matrix& db) {
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * g.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * c.xhat.row(i).array()).mean();
    dx.row(i) = c.inv_std(i) * (dxhat.row(i).array() - m1 - c.xhat.row(i).array() * m2);
  }
  return dx;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

/// Tokens below `prefix` see each other freely; later tokens are causal but
/// always see the whole prefix. causal == false is full attention.
struct AttentionMask {
  Eigen::Index prefix = 0;
  bool causal = false;
  bool allowed(Eigen::Index i, Eigen::Index j) const {
    if (!causal) return true;
    if (i < prefix) return j < prefix;
    return j < prefix || j <= i;
  }
};

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
  if (!rng || rate <= 0.0) return {};
  Matrix m(rows, cols);
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(*rng) ? scale : 0.0;
  return m;
}

void apply_mask(Matrix& x, const Matrix& mask) {
  if (mask.size() != 0) x.array() *= mask.array();
}

struct BlockCache {
  LNCache ln1;
  Matrix h1, q, k, v, concat, drop1;
  std::vector<Matrix> probs;
  LNCache ln2;
  Matrix h2, ff_pre, ff_act, drop2;
};

struct StackCache {
  Matrix drop0;
  std::vector<BlockCache> blocks;
  LNCache lnf;
};

Matrix forward_stack(const LMWeights& w, Matrix x, const AttentionMask& mask, Rng* rng,
                     StackCache* cache) {
  const auto& cfg = w.config();
  const auto n = x.rows();
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto P = [&](int i) -> const Matrix& { return w.param(i).value; };

  Matrix drop0 = dropout_mask(n, cfg.dim, cfg.dropout, rng);
  apply_mask(x, drop0);
  if (cache) {
    cache->drop0 = std::move(drop0);
    cache->blocks.resize(w.blocks.size());
  }

  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const auto& bp = w.blocks[b];
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[b] : local;

    bc.h1 = layer_norm(x, P(bp.ln1_g), P(bp.ln1_b), &bc.ln1);
    bc.q = (bc.h1 * P(bp.wq)).rowwise() + P(bp.bq).row(0);
    bc.k = (bc.h1 * P(bp.wk)).rowwise() + P(bp.bk).row(0);
    bc.v = (bc.h1 * P(bp.wv)).rowwise() + P(bp.bv).row(0);
    bc.concat.resize(n, cfg.dim);
    bc.probs.resize(static_cast<std::size_t>(cfg.heads));
    for (int h = 0; h < cfg.heads; ++h) {
      Matrix s = bc.q.middleCols(h * dh, dh) * bc.k.middleCols(h * dh, dh).transpose() * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
          if (mask.allowed(i, j)) mx = std::max(mx, s(i, j));
        }
        double sum = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
          const double e = mask.allowed(i, j) ? std::exp(s(i, j) - mx) : 0.0;
          s(i, j) = e;
          sum += e;
        }
        s.row(i) /= sum;
      }
      bc.concat.middleCols(h * dh, dh) = s * bc.v.middleCols(h * dh, dh);
      bc.probs[static_cast<std::size_t>(h)] = std::move(s);
    }
    Matrix attn = (bc.concat * P(bp.wo)).rowwise() + P(bp.bo).row(0);
    bc.drop1 = dropout_mask(n, cfg.dim, cfg.dropout, rng);
    apply_mask(attn, bc.drop1);
    x += attn;

    bc.h2 = layer_norm(x, P(bp.ln2_g), P(bp.ln2_b), &bc.ln2);
    bc.ff_pre = (bc.h2 * P(bp.w1)).rowwise() + P(bp.b1).row(0);
    bc.ff_act = bc.ff_pre.unaryExpr([](double v) { return gelu(v); });
    Matrix ff = (bc.ff_act * P(bp.w2)).rowwise() + P(bp.b2).row(0);
    bc.drop2 = dropout_mask(n, cfg.dim, cfg.dropout, rng);
    apply_mask(ff, bc.drop2);
    x += ff;
  }
  LNCache lnf_local;
  return layer_norm(x, P(w.lnf_g), P(w.lnf_b), cache ? &cache->lnf : &lnf_local);
}

/// Returns the gradient with respect to the (pre-dropout) stack input.
Matrix backward_stack(LMWeights& w, const StackCache& cache, const Matrix& d_out) {
  const auto& cfg = w.config();
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto V = [&](int i) -> const Matrix& { return w.param(i).value; };
  auto G = [&](int i) -> Matrix& { return w.param(i).grad; };

  Matrix dx = layer_norm_backward(d_out, cache.lnf, V(w.lnf_g), G(w.lnf_g), G(w.lnf_b));

  for (std::size_t bi = w.blocks.size(); bi-- > 0;) {
    const auto& bp = w.blocks[bi];
    const auto& bc = cache.blocks[bi];

    // Feed-forward branch.
    Matrix dy2 = dx;
    apply_mask(dy2, bc.drop2);
    G(bp.w2) += bc.ff_act.transpose() * dy2;
    G(bp.b2).row(0) += dy2.colwise().sum();
    Matrix d_act = dy2 * V(bp.w2).transpose();
    Matrix d_pre = d_act.array() * bc.ff_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    G(bp.w1) += bc.h2.transpose() * d_pre;
    G(bp.b1).row(0) += d_pre.colwise().sum();
    Matrix dh2 = d_pre * V(bp.w1).transpose();
    dx += layer_norm_backward(dh2, bc.ln2, V(bp.ln2_g), G(bp.ln2_g), G(bp.ln2_b));

    // Attention branch.
    Matrix dy1 = dx;
    apply_mask(dy1, bc.drop1);
    G(bp.wo) += bc.concat.transpose() * dy1;
    G(bp.bo).row(0) += dy1.colwise().sum();
    Matrix dconcat = dy1 * V(bp.wo).transpose();
    Matrix dq(bc.q.rows(), bc.q.cols());
    Matrix dk(bc.k.rows(), bc.k.cols());
    Matrix dv(bc.v.rows(), bc.v.cols());
    for (int h = 0; h < cfg.heads; ++h) {
      const Matrix& p = bc.probs[static_cast<std::size_t>(h)];
      const Matrix d_o = dconcat.middleCols(h * dh, dh);
      const Matrix dp = d_o * bc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = p.transpose() * d_o;
      const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
      const Matrix ds = (p.array() * (dp.colwise() - row_dot).array()) * scale;
      dq.middleCols(h * dh, dh) = ds * bc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * bc.q.middleCols(h * dh, dh);
    }
    G(bp.wq) += bc.h1.transpose() * dq;
    G(bp.bq).row(0) += dq.colwise().sum();
    G(bp.wk) += bc.h1.transpose() * dk;
    G(bp.bk).row(0) += dk.colwise().sum();
    G(bp.wv) += bc.h1.transpose() * dv;
    G(bp.bv).row(0) += dv.colwise().sum();
    Matrix dh1 = dq * V(bp.wq).transpose() + dk * V(bp.wk).transpose() + dv * V(bp.wv).transpose();
    dx += layer_norm_backward(dh1, bc.ln1, V(bp.ln1_g), G(bp.ln1_g), G(bp.ln1_b));
  }
  apply_mask(dx, cache.drop0);
  return dx;
}

// ---------------------------------------------------------------------------
// AR / NAR embeddings and heads

struct ARInputs {
  std::vector<int> prompt_tokens;  // prompt + terminator
  std::vector<int> step_acoustic;  // BOS, a_1..a_S
  std::vector<int> step_phoneme;   // p̂_1..p̂_S, EOS
};

ARInputs ar_inputs(const LMConfig& c, const ARSequence& seq) {
  ARInputs in;
  in.prompt_tokens = seq.prompt;
  in.prompt_tokens.push_back(c.phoneme_eos());
  in.step_acoustic.push_back(c.acoustic_bos());
  in.step_acoustic.insert(in.step_acoustic.end(), seq.acoustic.begin(), seq.acoustic.end());
  in.step_phoneme.assign(seq.phonemes.begin(), seq.phonemes.end());
  in.step_phoneme.push_back(c.phoneme_eos());
  return in;
}

Matrix ar_embed(const LMWeights& w, const ARInputs& in) {
  const auto np = static_cast<Eigen::Index>(in.prompt_tokens.size());
  const auto ns = static_cast<Eigen::Index>(in.step_acoustic.size());
  const auto& phon = w.param(w.phoneme_emb).value;
  const auto& ac = w.param(w.acoustic_emb).value;
  const auto& ppos = w.param(w.prompt_pos).value;
  const auto& spos = w.param(w.step_pos).value;
  Matrix x(np + ns, w.config().dim);
  for (Eigen::Index i = 0; i < np; ++i) {
    x.row(i) = phon.row(in.prompt_tokens[static_cast<std::size_t>(i)]) + ppos.row(i);
  }
  for (Eigen::Index s = 0; s < ns; ++s) {
    const auto u = static_cast<std::size_t>(s);
    x.row(np + s) = ac.row(in.step_acoustic[u]) + phon.row(in.step_phoneme[u]) + spos.row(s);
  }
  return x;
}

void ar_embed_backward(LMWeights& w, const ARInputs& in, const Matrix& dx) {
  const auto np = static_cast<Eigen::Index>(in.prompt_tokens.size());
  const auto ns = static_cast<Eigen::Index>(in.step_acoustic.size());
  auto& phon = w.param(w.phoneme_emb).grad;
  auto& ac = w.param(w.acoustic_emb).grad;
  auto& ppos = w.param(w.prompt_pos).grad;
  auto& spos = w.param(w.step_pos).grad;
  for (Eigen::Index i = 0; i < np; ++i) {
    phon.row(in.prompt_tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    ppos.row(i) += dx.row(i);
  }
  for (Eigen::Index s = 0; s < ns; ++s) {
    const auto u = static_cast<std::size_t>(s);
    ac.row(in.step_acoustic[u]) += dx.row(np + s);
    phon.row(in.step_phoneme[u]) += dx.row(np + s);
    spos.row(s) += dx.row(np + s);
  }
}

ARLogits ar_heads(const LMWeights& w, const Matrix& hidden_steps) {
  const int k1 = w.config().acoustic_vocab + 1;
  ARLogits out;
  out.acoustic = (hidden_steps * w.param(w.acoustic_emb).value.topRows(k1).transpose()).rowwise() +
                 w.param(w.acoustic_bias).value.row(0);
  out.phoneme = (hidden_steps * w.param(w.phoneme_head).value).rowwise() +
                w.param(w.phoneme_bias).value.row(0);
  return out;
}

Matrix nar_embed(const LMWeights& w, const NARExample& ex) {
  const auto t = static_cast<Eigen::Index>(ex.phonemes.size());
  const auto& phon = w.param(w.phoneme_emb).value;
  const auto& pos = w.param(w.step_pos).value;
  Matrix x(t, w.config().dim);
  for (Eigen::Index i = 0; i < t; ++i) {
    x.row(i) = phon.row(ex.phonemes[static_cast<std::size_t>(i)]) + pos.row(i) +
               w.param(w.layer_emb).value.row(ex.target_layer - 1);
  }
  for (int l = 1; l < ex.target_layer; ++l) {
    const auto& emb = w.param(w.code_emb[static_cast<std::size_t>(l - 1)]).value;
    const auto& row = ex.lower[static_cast<std::size_t>(l - 1)];
    for (Eigen::Index i = 0; i < t; ++i) x.row(i) += emb.row(row[static_cast<std::size_t>(i)]);
  }
  return x;
}

void nar_embed_backward(LMWeights& w, const NARExample& ex, const Matrix& dx) {
  const auto t = static_cast<Eigen::Index>(ex.phonemes.size());
  auto& phon = w.param(w.phoneme_emb).grad;
  auto& pos = w.param(w.step_pos).grad;
  auto& lay = w.param(w.layer_emb).grad;
  for (Eigen::Index i = 0; i < t; ++i) {
    phon.row(ex.phonemes[static_cast<std::size_t>(i)]) += dx.row(i);
    pos.row(i) += dx.row(i);
    lay.row(ex.target_layer - 1) += dx.row(i);
  }
  for (int l = 1; l < ex.target_layer; ++l) {
    auto& emb = w.param(w.code_emb[static_cast<std::size_t>(l - 1)]).grad;
    const auto& row = ex.lower[static_cast<std::size_t>(l - 1)];
    for (Eigen::Index i = 0; i < t; ++i) emb.row(row[static_cast<std::size_t>(i)]) += dx.row(i);
  }
}

Matrix nar_head(const LMWeights& w, const Matrix& hidden, int target_layer) {
  const auto& table = w.param(w.code_emb[static_cast<std::size_t>(target_layer - 1)]).value;
  const auto& bias = w.param(w.code_bias[static_cast<std::size_t>(target_layer - 2)]).value;
  return (hidden * table.transpose()).rowwise() + bias.row(0);
}

void require_kind(const LMWeights& w, ModelKind kind) {
  if (w.kind() != kind) {
    throw Error(ErrorKind::Load, "expected " + to_string(kind) + " weights, got " +
                                     to_string(w.kind()));
  }
}

/// Mean cross-entropy over non-pad rows; writes d(loss)/d(logits) scaled by `weight`.
double cross_entropy(const Matrix& logits, std::span<const int> targets, double weight,
                     Matrix* dlogits, std::size_t* count) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw std::invalid_argument("targets do not align with logits");
  }
  std::size_t n = 0;
  for (int t : targets) n += (t != kPad);
  if (count) *count = n;
  if (dlogits) *dlogits = Matrix::Zero(logits.rows(), logits.cols());
  if (n == 0) return 0.0;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t == kPad) continue;
    if (t < 0 || t >= logits.cols()) throw std::invalid_argument("target id out of range");
    const double mx = logits.row(i).maxCoeff();
    const RowVector e = (logits.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    loss += -(logits(i, t) - mx - std::log(z));
    if (dlogits) {
      dlogits->row(i) = e / z;
      (*dlogits)(i, t) -= 1.0;
      dlogits->row(i) *= weight / static_cast<double>(n);
    }
  }
  return loss / static_cast<double>(n);
}

}  // namespace

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - mx).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

ARLogits ar_forward(const LMWeights& w, const ARSequence& seq) {
  require_kind(w, ModelKind::AR);
  seq.validate(w.config());
  const auto in = ar_inputs(w.config(), seq);
  const auto np = static_cast<Eigen::Index>(in.prompt_tokens.size());
  const Matrix hidden = forward_stack(w, ar_embed(w, in), {np, true}, nullptr, nullptr);
  return ar_heads(w, hidden.bottomRows(hidden.rows() - np));
}

Matrix nar_forward(const LMWeights& w, const NARExample& ex) {
  require_kind(w, ModelKind::NAR);
  ex.validate(w.config());
  const Matrix hidden = forward_stack(w, nar_embed(w, ex), {0, false}, nullptr, nullptr);
  return nar_head(w, hidden, ex.target_layer);
}

LossValue ar_loss(const ARLogits& logits, std::span<const int> acoustic_targets,
                  std::span<const int> phoneme_targets, double phoneme_weight) {
  LossValue v;
  v.acoustic = cross_entropy(logits.acoustic, acoustic_targets, 1.0, nullptr, &v.acoustic_count);
  v.phoneme = cross_entropy(logits.phoneme, phoneme_targets, 1.0, nullptr, &v.phoneme_count);
  if (v.acoustic_count == 0 && v.phoneme_count == 0) {
    throw Error(ErrorKind::EmptyBatch, "AR batch has no non-pad targets");
  }
  v.total = v.acoustic + phoneme_weight * v.phoneme;
  return v;
}

double nar_loss(const Matrix& logits, std::span<const int> targets) {
  std::size_t n = 0;
  const double loss = cross_entropy(logits, targets, 1.0, nullptr, &n);
  if (n == 0) throw Error(ErrorKind::EmptyBatch, "NAR batch has no non-pad targets");
  return loss;
}

LossValue ar_backprop(LMWeights& w, const ARSequence& seq, double phoneme_weight, Rng* rng) {
  require_kind(w, ModelKind::AR);
  const auto& cfg = w.config();
  seq.validate(cfg);
  const auto in = ar_inputs(cfg, seq);
  const auto np = static_cast<Eigen::Index>(in.prompt_tokens.size());
  StackCache cache;
  const Matrix hidden = forward_stack(w, ar_embed(w, in), {np, true}, rng, &cache);
  const Matrix hs = hidden.bottomRows(hidden.rows() - np);
  const ARLogits logits = ar_heads(w, hs);

  const auto at = seq.acoustic_targets(cfg);
  const auto pt = seq.phoneme_targets(cfg);
  LossValue v;
  Matrix da;
  Matrix dp;
  v.acoustic = cross_entropy(logits.acoustic, at, 1.0, &da, &v.acoustic_count);
  v.phoneme = cross_entropy(logits.phoneme, pt, phoneme_weight, &dp, &v.phoneme_count);
  if (v.acoustic_count == 0 && v.phoneme_count == 0) {
    throw Error(ErrorKind::EmptyBatch, "AR batch has no non-pad targets");
  }
  v.total = v.acoustic + phoneme_weight * v.phoneme;

  const int k1 = cfg.acoustic_vocab + 1;
  auto& ac_emb = w.param(w.acoustic_emb);
  ac_emb.grad.topRows(k1) += da.transpose() * hs;
  w.param(w.acoustic_bias).grad.row(0) += da.colwise().sum();
  w.param(w.phoneme_head).grad += hs.transpose() * dp;
  w.param(w.phoneme_bias).grad.row(0) += dp.colwise().sum();

  Matrix dhidden = Matrix::Zero(hidden.rows(), hidden.cols());
  dhidden.bottomRows(hs.rows()) =
      da * ac_emb.value.topRows(k1) + dp * w.param(w.phoneme_head).value.transpose();
  const Matrix dx = backward_stack(w, cache, dhidden);
  ar_embed_backward(w, in, dx);
  return v;
}

double nar_backprop(LMWeights& w, const NARExample& ex, Rng* rng) {
  require_kind(w, ModelKind::NAR);
  ex.validate(w.config());
  StackCache cache;
  const Matrix hidden = forward_stack(w, nar_embed(w, ex), {0, false}, rng, &cache);
  const Matrix logits = nar_head(w, hidden, ex.target_layer);
  Matrix dl;
  std::size_t n = 0;
  const double loss = cross_entropy(logits, ex.targets, 1.0, &dl, &n);
  if (n == 0) throw Error(ErrorKind::EmptyBatch, "NAR batch has no non-pad targets");

  auto& table = w.param(w.code_emb[static_cast<std::size_t>(ex.target_layer - 1)]);
  table.grad += dl.transpose() * hidden;
  w.param(w.code_bias[static_cast<std::size_t>(ex.target_layer - 2)]).grad.row(0) +=
      dl.colwise().sum();
  const Matrix dx = backward_stack(w, cache, dl * table.value);
  nar_embed_backward(w, ex, dx);
  return loss;
}

// ---------------------------------------------------------------------------
// Incremental decoding

ARDecoder::ARDecoder(const LMWeights& w, std::span<const int> prompt) : w_(w), cfg_(w.config()) {
  require_kind(w, ModelKind::AR);
  ARSequence probe;
  probe.prompt.assign(prompt.begin(), prompt.end());
  probe.validate(cfg_);

  ARInputs in;
  in.prompt_tokens = probe.prompt;
  in.prompt_tokens.push_back(cfg_.phoneme_eos());
  prompt_len_ = in.prompt_tokens.size();

  const auto np = static_cast<Eigen::Index>(prompt_len_);
  const auto& phon = w.param(w.phoneme_emb).value;
  const auto& ppos = w.param(w.prompt_pos).value;
  Matrix x(np, cfg_.dim);
  for (Eigen::Index i = 0; i < np; ++i) {
    x.row(i) = phon.row(in.prompt_tokens[static_cast<std::size_t>(i)]) + ppos.row(i);
  }
  StackCache cache;
  forward_stack(w, std::move(x), {np, true}, nullptr, &cache);

  const auto rows = np + cfg_.max_seq_len;
  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    keys_.emplace_back(rows, cfg_.dim);
    values_.emplace_back(rows, cfg_.dim);
    keys_.back().topRows(np) = cache.blocks[b].k;
    values_.back().topRows(np) = cache.blocks[b].v;
  }
  cached_ = prompt_len_;
}

ARDecoder::StepLogits ARDecoder::step(int acoustic_in, int phoneme_in, AttentionProbe* probe) {
  if (steps_ >= static_cast<std::size_t>(cfg_.max_seq_len)) {
    throw Error(ErrorKind::Capacity, "decoder exceeded max_seq_len steps");
  }
  if (acoustic_in < 0 || acoustic_in > cfg_.acoustic_bos() || phoneme_in < 0 ||
      phoneme_in > cfg_.phoneme_bos()) {
    throw std::invalid_argument("decoder input token out of range");
  }
  const auto& w = w_;
  auto P = [&](int i) -> const Matrix& { return w.param(i).value; };
  const int dh = cfg_.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto row = static_cast<Eigen::Index>(cached_);

  Matrix x = P(w.acoustic_emb).row(acoustic_in) + P(w.phoneme_emb).row(phoneme_in) +
             P(w.step_pos).row(static_cast<Eigen::Index>(steps_));
  if (probe) probe->weights.assign(cached_ + 1, 0.0);

  for (std::size_t b = 0; b < w.blocks.size(); ++b) {
    const auto& bp = w.blocks[b];
    const Matrix h1 = layer_norm(x, P(bp.ln1_g), P(bp.ln1_b), nullptr);
    const Matrix q = (h1 * P(bp.wq)) + P(bp.bq);
    keys_[b].row(row) = (h1 * P(bp.wk)) + P(bp.bk);
    values_[b].row(row) = (h1 * P(bp.wv)) + P(bp.bv);
    Matrix concat(1, cfg_.dim);
    for (int h = 0; h < cfg_.heads; ++h) {
      const auto keys = keys_[b].block(0, h * dh, row + 1, dh);
      RowVector s = (q.middleCols(h * dh, dh) * keys.transpose()) * scale;
      s = (s.array() - s.maxCoeff()).exp().matrix();
      s /= s.sum();
      concat.middleCols(h * dh, dh) = s * values_[b].block(0, h * dh, row + 1, dh);
      if (probe && b == 0) {
        for (Eigen::Index j = 0; j <= row; ++j) {
          probe->weights[static_cast<std::size_t>(j)] += s(j) / cfg_.heads;
        }
      }
    }
    x += concat * P(bp.wo) + P(bp.bo);
    const Matrix h2 = layer_norm(x, P(bp.ln2_g), P(bp.ln2_b), nullptr);
    const Matrix act = ((h2 * P(bp.w1)) + P(bp.b1)).unaryExpr([](double v) { return gelu(v); });
    x += act * P(bp.w2) + P(bp.b2);
  }
  const Matrix hidden = layer_norm(x, P(w.lnf_g), P(w.lnf_b), nullptr);
  const ARLogits logits = ar_heads(w, hidden);
  ++cached_;
  ++steps_;
  return {logits.acoustic.row(0), logits.phoneme.row(0)};
}

}  // namespace valler::lm
