#include "valler/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace valler::decode {

std::string to_string(AdvanceMode mode) {
  return mode == AdvanceMode::RestrictedSoftmax ? "restricted" : "literal";
}

AdvanceMode advance_mode_from_string(const std::string& s) {
  if (s == "restricted" || s == "restricted-softmax") return AdvanceMode::RestrictedSoftmax;
  if (s == "literal" || s == "literal-sigmoid") return AdvanceMode::LiteralSigmoid;
  throw std::invalid_argument("unknown advance mode '" + s + "' (expected restricted|literal)");
}

std::string to_string(DecodeStatus s) {
  return s == DecodeStatus::Complete ? "complete" : "truncated";
}

double advance_probability(const lm::RowVector& phoneme_logits, std::span<const int> targets,
                           int j, int eos_id, AdvanceMode mode) {
  const int length = static_cast<int>(targets.size());
  if (j < 0 || j >= length) {
    throw Error(ErrorKind::Pointer, "pointer " + std::to_string(j) + " outside [0, " +
                                        std::to_string(length) + ")");
  }
  const int stay_id = targets[static_cast<std::size_t>(j)];
  const int next_id = j + 1 < length ? targets[static_cast<std::size_t>(j + 1)] : eos_id;
  if (stay_id < 0 || stay_id >= phoneme_logits.size() || next_id < 0 ||
      next_id >= phoneme_logits.size()) {
    throw std::invalid_argument("phoneme logits do not cover the target vocabulary");
  }
  const double stay = phoneme_logits(stay_id);
  const double next = phoneme_logits(next_id);
  if (!std::isfinite(stay) || !std::isfinite(next)) {
    throw Error(ErrorKind::Numeric, "non-finite phoneme logits at the pointer");
  }
  // Restricted softmax over the pair {stay, next}.
  const double p_next = 1.0 / (1.0 + std::exp(stay - next));
  if (mode == AdvanceMode::RestrictedSoftmax) return p_next;
  const double p_stay = 1.0 - p_next;
  return 1.0 / (1.0 + std::exp(p_stay));
}

AdvanceDecision advance_decision(const lm::RowVector& phoneme_logits, std::span<const int> targets,
                                 int j, int eos_id, AdvanceMode mode, Rng& rng) {
  AdvanceDecision d;
  d.probability = advance_probability(phoneme_logits, targets, j, eos_id, mode);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  d.advance = u < d.probability;
  return d;
}

std::vector<std::pair<int, double>> top_p_support(const lm::RowVector& logits, double top_p) {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
  if (logits.size() == 0) throw std::invalid_argument("empty logits");
  if (!logits.allFinite()) throw Error(ErrorKind::Numeric, "non-finite logits in top-p sampling");
  const double mx = logits.maxCoeff();
  std::vector<std::pair<int, double>> probs(static_cast<std::size_t>(logits.size()));
  double z = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double e = std::exp(logits(i) - mx);
    probs[static_cast<std::size_t>(i)] = {static_cast<int>(i), e};
    z += e;
  }
  for (auto& p : probs) p.second /= z;
  std::stable_sort(probs.begin(), probs.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < probs.size()) {
    cum += probs[keep++].second;
    if (cum >= top_p) break;
  }
  probs.resize(keep);
  return probs;
}

TopPSample sample_top_p(const lm::RowVector& logits, double top_p, Rng& rng) {
  const auto support = top_p_support(logits, top_p);
  double kept = 0.0;
  for (const auto& p : support) kept += p.second;
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * kept;
  TopPSample s;
  s.support = support.size();
  s.kept_mass = kept;
  double acc = 0.0;
  s.token = support.back().first;
  s.probability = support.back().second / kept;
  for (const auto& p : support) {
    acc += p.second;
    if (u < acc) {
      s.token = p.first;
      s.probability = p.second / kept;
      break;
    }
  }
  return s;
}

MAProperties check_ma_properties(const AlignmentPath& path, int num_phonemes) {
  MAProperties m;
  const auto& pos = path.positions;
  m.locality = true;
  m.monotonicity = true;
  for (std::size_t s = 0; s < pos.size(); ++s) {
    if (pos[s] < 0 || pos[s] >= num_phonemes) m.locality = false;
    if (s > 0) {
      const int step = pos[s] - pos[s - 1];
      if (step != 0 && step != 1) m.locality = false;
      if (step < 0) m.monotonicity = false;
    }
  }
  if (pos.empty() || num_phonemes < 1) {
    m.completeness = false;
    return m;
  }
  std::vector<bool> seen(static_cast<std::size_t>(num_phonemes), false);
  for (int p : pos) {
    if (p >= 0 && p < num_phonemes) seen[static_cast<std::size_t>(p)] = true;
  }
  m.completeness = pos.front() == 0 && pos.back() == num_phonemes - 1 &&
                   std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
  return m;
}

AlignmentPath infer_path(std::span<const int> emitted, std::span<const int> targets) {
  AlignmentPath path;
  const int length = static_cast<int>(targets.size());
  int j = -1;
  for (int e : emitted) {
    int next = -1;
    if (j >= 0 && targets[static_cast<std::size_t>(j)] == e) {
      next = j;
    } else {
      for (int k = j + 1; k < length && next < 0; ++k) {
        if (targets[static_cast<std::size_t>(k)] == e) next = k;
      }
      for (int k = j - 1; k >= 0 && next < 0; --k) {
        if (targets[static_cast<std::size_t>(k)] == e) next = k;
      }
    }
    path.positions.push_back(next);
    if (next >= 0) j = next;
  }
  return path;
}

// ---------------------------------------------------------------------------
// Sessions

std::size_t DecodeSession::default_budget() const {
  const double expected =
      static_cast<double>(target_phonemes.size()) * expected_steps_per_phoneme;
  return static_cast<std::size_t>(4.0 * (static_cast<double>(prompt_codes.size()) + expected));
}

std::vector<int> DecodeSession::text_prompt() const {
  std::vector<int> p(prompt_phonemes);
  p.insert(p.end(), target_phonemes.begin(), target_phonemes.end());
  return p;
}

void DecodeSession::validate(const lm::LMConfig& config) const {
  if (target_phonemes.empty()) throw std::invalid_argument("decode session has no target phonemes");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must lie in (0, 1]");
  if (prompt_codes.size() != prompt_aligned.size()) {
    throw std::invalid_argument("prompt codes and aligned prompt phonemes differ in length");
  }
  if (pointer < 0 || pointer > static_cast<int>(target_phonemes.size())) {
    throw Error(ErrorKind::Pointer, "session pointer out of range");
  }
  for (int p : text_prompt()) {
    if (p < 0 || p >= config.phoneme_vocab) throw std::invalid_argument("phoneme id out of range");
  }
  for (int c : prompt_codes) {
    if (c < 0 || c >= config.acoustic_vocab) throw std::invalid_argument("prompt code out of range");
  }
  if (budget() == 0) throw std::invalid_argument("step budget must be > 0");
}

namespace {

/// Feeds the acoustic prompt and the first target phoneme; returns the logits
/// of the first generated step.
lm::ARDecoder::StepLogits feed_prefix(StepModel& model, const DecodeSession& s, int first_phoneme,
                                      lm::AttentionProbe* probe) {
  int prev = model.config().acoustic_bos();
  for (std::size_t i = 0; i < s.prompt_codes.size(); ++i) {
    model.step(prev, s.prompt_aligned[i], probe);
    prev = s.prompt_codes[i];
  }
  return model.step(prev, first_phoneme, probe);
}

/// Generated steps whose logits fit in the model's capacity.
std::size_t effective_budget(const StepModel& model, const DecodeSession& s) {
  const std::size_t used = s.prompt_codes.size();
  const std::size_t room = model.capacity() > used ? model.capacity() - used : 0;
  return std::min(s.budget(), room);
}

std::vector<double> prompt_columns(const lm::AttentionProbe& probe, std::size_t text_len) {
  return {probe.weights.begin(),
          probe.weights.begin() + static_cast<std::ptrdiff_t>(std::min(text_len, probe.weights.size()))};
}

lm::RowVector code_logits(const lm::RowVector& acoustic, int k) { return acoustic.head(k); }

}  // namespace

DecodeResult ma_decode(StepModel& model, DecodeSession& session) {
  const auto& cfg = model.config();
  session.validate(cfg);
  const auto& targets = session.target_phonemes;
  const int length = static_cast<int>(targets.size());
  const auto text_len = session.prompt_phonemes.size() + targets.size();
  const std::size_t budget = effective_budget(model, session);

  DecodeResult r;
  if (budget == 0) return r;
  lm::AttentionProbe probe;
  lm::AttentionProbe* probe_ptr = session.capture_attention ? &probe : nullptr;
  session.pointer = 0;
  auto logits = feed_prefix(model, session, targets.front(), probe_ptr);

  for (std::size_t step = 0;; ++step) {
    const auto sample =
        sample_top_p(code_logits(logits.acoustic, cfg.acoustic_vocab), session.top_p, session.rng);
    const int phoneme = targets[static_cast<std::size_t>(session.pointer)];
    const int pointer = session.pointer;
    r.acoustic.push_back(sample.token);
    r.phonemes.push_back(phoneme);
    r.path.positions.push_back(pointer);
    if (probe_ptr) r.attention.push_back(prompt_columns(probe, text_len));
    session.emitted_acoustic.push_back(sample.token);
    session.emitted_phonemes.push_back(phoneme);

    const auto d = advance_decision(logits.phoneme, targets, pointer, cfg.phoneme_eos(),
                                    session.mode, session.rng);
    r.audit.push_back({step, pointer, d.probability, sample.token, sample.support});
    if (d.advance && ++session.pointer == length) {
      r.status = DecodeStatus::Complete;
      break;
    }
    if (step + 1 == budget) {
      r.status = DecodeStatus::Truncated;
      break;
    }
    logits = model.step(sample.token, targets[static_cast<std::size_t>(session.pointer)], probe_ptr);
  }
  return r;
}

DecodeResult ma_decode(const lm::LMWeights& ar, DecodeSession& session) {
  session.validate(ar.config());
  CachedStepModel model(ar, session.text_prompt());
  return ma_decode(model, session);
}

DecodeResult baseline_decode(StepModel& model, DecodeSession& session) {
  const auto& cfg = model.config();
  session.validate(cfg);
  const auto text_len = session.prompt_phonemes.size() + session.target_phonemes.size();
  const std::size_t budget = effective_budget(model, session);

  DecodeResult r;
  r.status = DecodeStatus::Truncated;
  if (budget == 0) return r;
  lm::AttentionProbe probe;
  lm::AttentionProbe* probe_ptr = session.capture_attention ? &probe : nullptr;
  int phoneme = session.target_phonemes.front();
  auto logits = feed_prefix(model, session, phoneme, probe_ptr);

  for (std::size_t step = 0;; ++step) {
    const auto ac = sample_top_p(logits.acoustic, session.top_p, session.rng);
    if (ac.token == cfg.acoustic_eos()) {
      r.status = DecodeStatus::Complete;
      break;
    }
    r.acoustic.push_back(ac.token);
    r.phonemes.push_back(phoneme);
    r.audit.push_back({step, -1, std::numeric_limits<double>::quiet_NaN(), ac.token, ac.support});
    if (probe_ptr) r.attention.push_back(prompt_columns(probe, text_len));
    session.emitted_acoustic.push_back(ac.token);
    session.emitted_phonemes.push_back(phoneme);

    const auto next = sample_top_p(logits.phoneme, session.top_p, session.rng);
    if (next.token == cfg.phoneme_eos()) {
      r.status = DecodeStatus::Complete;
      break;
    }
    if (step + 1 == budget) break;
    phoneme = next.token;
    logits = model.step(ac.token, phoneme, probe_ptr);
  }
  r.path = infer_path(r.phonemes, session.target_phonemes);
  for (std::size_t s = 0; s < r.audit.size(); ++s) r.audit[s].pointer = r.path.positions[s];
  if (!r.path.positions.empty()) session.pointer = std::max(0, r.path.positions.back());
  return r;
}

DecodeResult baseline_decode(const lm::LMWeights& ar, DecodeSession& session) {
  session.validate(ar.config());
  CachedStepModel model(ar, session.text_prompt());
  return baseline_decode(model, session);
}

codec::CodeMatrix nar_complete(const lm::LMWeights& nar, std::span<const int> layer1_full_rate,
                               std::span<const int> aligned_full_rate,
                               const codec::MergeConfig& merge) {
  if (layer1_full_rate.size() != aligned_full_rate.size()) {
    throw std::invalid_argument("layer-1 codes and aligned phonemes differ in length");
  }
  if (layer1_full_rate.empty()) throw std::invalid_argument("nothing to complete");
  const int layers = nar.config().code_layers;
  lm::NARExample ex;
  ex.phonemes.assign(aligned_full_rate.begin(), aligned_full_rate.end());
  ex.lower.emplace_back(layer1_full_rate.begin(), layer1_full_rate.end());

  codec::CodeMatrix out(layers, layer1_full_rate.size(), merge);
  for (std::size_t t = 0; t < layer1_full_rate.size(); ++t) {
    out.codes[0][t] = static_cast<std::uint16_t>(layer1_full_rate[t]);
  }
  for (int n = 2; n <= layers; ++n) {
    ex.target_layer = n;
    const lm::Matrix logits = lm::nar_forward(nar, ex);
    std::vector<int> row(layer1_full_rate.size());
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      Eigen::Index best = 0;
      logits.row(t).maxCoeff(&best);
      row[static_cast<std::size_t>(t)] = static_cast<int>(best);
      out.codes[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(t)] =
          static_cast<std::uint16_t>(best);
    }
    ex.lower.push_back(std::move(row));
  }
  return out;
}

FullRateStreams expand_to_full_rate(const DecodeResult& r, std::span<const int> targets, int m) {
  if (m < 1) throw std::invalid_argument("merge rate must be >= 1");
  FullRateStreams out;
  for (std::size_t s = 0; s < r.acoustic.size(); ++s) {
    const int pos = r.path.positions.at(s);
    const int phoneme = pos >= 0 ? targets[static_cast<std::size_t>(pos)] : r.phonemes[s];
    out.layer1.insert(out.layer1.end(), static_cast<std::size_t>(m), r.acoustic[s]);
    out.aligned.insert(out.aligned.end(), static_cast<std::size_t>(m), phoneme);
  }
  return out;
}

DecodeResult synthesize(const lm::LMWeights& ar, const lm::LMWeights& nar, DecodeSession& session,
                        const codec::MergeConfig& merge) {
  auto r = ma_decode(ar, session);
  if (!r.acoustic.empty()) {
    const auto full = expand_to_full_rate(r, session.target_phonemes, merge.rate(0));
    r.codes = nar_complete(nar, full.layer1, full.aligned, merge);
  }
  return r;
}

DecodeResult prosody_transfer(StepModel& model, DecodeSession& session,
                              const corpus::AlignedPhonemeSeq& preset, int merge_rate) {
  const auto& cfg = model.config();
  const auto phonemes = preset.phonemes().symbols;
  if (!session.target_phonemes.empty() && session.target_phonemes != phonemes) {
    throw std::invalid_argument("session targets differ from the preset alignment's phonemes");
  }
  session.target_phonemes = phonemes;
  session.validate(cfg);

  const auto blocks = corpus::downsample_alignment(preset, merge_rate);
  std::vector<int> schedule;
  for (std::size_t run = 0; run < blocks.num_runs(); ++run) {
    schedule.insert(schedule.end(), static_cast<std::size_t>(blocks.runs()[run].frames),
                    static_cast<int>(run));
  }
  if (schedule.size() > session.budget() || schedule.size() > effective_budget(model, session)) {
    throw Error(ErrorKind::Capacity, "preset needs " + std::to_string(schedule.size()) +
                                         " steps, more than the step budget");
  }

  const auto text_len = session.prompt_phonemes.size() + phonemes.size();
  lm::AttentionProbe probe;
  lm::AttentionProbe* probe_ptr = session.capture_attention ? &probe : nullptr;
  auto logits = feed_prefix(model, session, phonemes.front(), probe_ptr);

  DecodeResult r;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t step = 0; step < schedule.size(); ++step) {
    session.pointer = schedule[step];
    const auto sample =
        sample_top_p(code_logits(logits.acoustic, cfg.acoustic_vocab), session.top_p, session.rng);
    unit(session.rng);  // the schedule replaces the pointer draw
    const int phoneme = phonemes[static_cast<std::size_t>(session.pointer)];
    r.acoustic.push_back(sample.token);
    r.phonemes.push_back(phoneme);
    r.path.positions.push_back(session.pointer);
    r.audit.push_back({step, session.pointer, std::numeric_limits<double>::quiet_NaN(), sample.token,
                       sample.support});
    if (probe_ptr) r.attention.push_back(prompt_columns(probe, text_len));
    session.emitted_acoustic.push_back(sample.token);
    session.emitted_phonemes.push_back(phoneme);
    if (step + 1 < schedule.size()) {
      const int next = phonemes[static_cast<std::size_t>(schedule[step + 1])];
      logits = model.step(sample.token, next, probe_ptr);
    }
  }
  r.status = DecodeStatus::Complete;
  return r;
}

DecodeResult prosody_transfer(const lm::LMWeights& ar, const lm::LMWeights* nar,
                              DecodeSession& session, const corpus::AlignedPhonemeSeq& preset,
                              const codec::MergeConfig& merge) {
  if (session.target_phonemes.empty()) session.target_phonemes = preset.phonemes().symbols;
  session.validate(ar.config());
  CachedStepModel model(ar, session.text_prompt());
  auto r = prosody_transfer(model, session, preset, merge.rate(0));

  // Full-rate output spans exactly the preset's frames.
  const int m = merge.rate(0);
  const auto frames = preset.total_frames();
  const auto aligned = corpus::expand_alignment(preset);
  std::vector<int> layer1(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    layer1[t] = r.acoustic[std::min(t / static_cast<std::size_t>(m), r.acoustic.size() - 1)];
  }
  if (nar) {
    r.codes = nar_complete(*nar, layer1, aligned, merge);
  } else {
    codec::CodeMatrix c(1, frames, merge);
    for (std::size_t t = 0; t < frames; ++t) c.codes[0][t] = static_cast<std::uint16_t>(layer1[t]);
    r.codes = std::move(c);
  }
  return r;
}

std::string audit_jsonl(const DecodeResult& r) {
  std::ostringstream os;
  for (const auto& a : r.audit) {
    nlohmann::json j = {{"step", a.step},
                        {"pointer", a.pointer},
                        {"advance_prob", nullptr},
                        {"acoustic_token", a.acoustic_token},
                        {"kept_support_size", a.kept_support_size}};
    if (std::isfinite(a.advance_prob)) j["advance_prob"] = a.advance_prob;
    os << j.dump() << '\n';
  }
  return os.str();
}

}  // namespace valler::decode
