// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
// Usage: valler_acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "test_support.hpp"
#include "valler/bench.hpp"
#include "valler/codec.hpp"
#include "valler/corpus.hpp"
#include "valler/decode.hpp"
#include "valler/lm.hpp"

#ifdef VALLER_ACCEPTANCE_CLI
#include "cli.hpp"
#include "json.hpp"
#endif

namespace {

using namespace valler;
using valler::testing::random_books;
using valler::testing::random_latent;

struct Outcome {
  bool passed = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_s;
  std::function<Outcome()> run;
};

std::vector<int> random_targets(Rng& rng, int vocab, int length) {
  std::uniform_int_distribution<int> phone(0, vocab - 1);
  std::vector<int> t;
  while (static_cast<int>(t.size()) < length) {
    const int p = phone(rng);
    if (t.empty() || t.back() != p) t.push_back(p);
  }
  return t;
}

int brute_nearest(const float* x, const codec::Codebook& book) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < book.size(); ++k) {
    double d = 0.0;
    for (int f = 0; f < book.dim(); ++f) {
      const double diff = static_cast<double>(x[f]) - static_cast<double>(book.entries(k, f));
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

// 1 -----------------------------------------------------------------------

Outcome step_counts() {
  const std::vector<std::pair<std::string, std::int64_t>> expected{
      {"flatten", 6000}, {"coarse-to-fine", 750}, {"phoneme-interleave", 960},
      {"cot-prefix", 855}, {"delay", 757},       {"merged-coarse-to-fine", 375}};
  std::vector<std::pair<std::string, std::int64_t>> got;
#ifdef VALLER_ACCEPTANCE_CLI
  valler::testing::TempDir dir("accept-steps");
  std::ostringstream out;
  std::ostringstream err;
  const int code = cli::cmd_dispatch({"valler", "bench-steps", "--duration", "10", "--hz", "75",
                                      "--phonemes", "105", "--out", dir.path().string()},
                                     out, err);
  if (code != cli::kExitOk) return {false, "bench-steps exited " + std::to_string(code) + ": " + err.str()};
  std::ifstream in(dir / "bench_steps.json");
  const auto j = nlohmann::json::parse(in);
  for (const auto& row : j.at("rows")) {
    got.emplace_back(row.at("pattern").get<std::string>(), row.at("ar_steps").get<std::int64_t>());
  }
#else
  const auto patterns = bench::all_patterns(75.0, 105, 2);
  for (const auto& row : bench::step_table(patterns, 10.0).rows) {
    got.emplace_back(bench::to_string(row.spec.pattern), row.ar_steps);
  }
#endif
  std::string detail;
  for (const auto& [name, steps] : got) detail += fmt::format("{}={} ", name, steps);
  return {got == expected, detail};
}

// 2 -----------------------------------------------------------------------

Outcome block_constancy() {
  Rng rng(2);
  std::uniform_int_distribution<int> len(1, 48);
  const auto merge = codec::MergeConfig::layers(1, 1, 2);
  constexpr int kEncodes = 10000;
  int pair_failures = 0;
  int flag_failures = 0;
  std::size_t pairs = 0;
  codec::CodebookSet books;
  for (int i = 0; i < kEncodes; ++i) {
    if (i % 100 == 0) books = random_books(16, 4, merge, rng);
    const auto z = random_latent(static_cast<std::size_t>(len(rng)), 4, rng);
    const auto c = codec::encode(z, books);
    for (std::size_t t = 0; t + 1 < c.length(); t += 2) {
      ++pairs;
      if (c.at(0, t) != c.at(0, t + 1)) ++pair_failures;
    }
    if (!c.block_constant()) ++flag_failures;
  }
  return {pair_failures == 0 && flag_failures == 0,
          fmt::format("{} encodes, {} layer-1 pairs, {} pair mismatches, {} block_constant() failures",
                      kEncodes, pairs, pair_failures, flag_failures)};
}

// 3 -----------------------------------------------------------------------

Outcome rvq_oracle() {
  Rng rng(3);
  std::uniform_int_distribution<int> len(1, 64);
  int mismatches = 0;
  std::size_t compared = 0;
  for (int u = 0; u < 100; ++u) {
    const auto books = random_books(64, 8, codec::MergeConfig::none(), rng);
    const auto z = random_latent(static_cast<std::size_t>(len(rng)), 8, rng);
    const auto c = codec::encode(z, books);
    FrameMatrix r = z.frames;
    for (int d = 0; d < codec::kNumLayers; ++d) {
      const auto& book = books.books[static_cast<std::size_t>(d)];
      for (Eigen::Index t = 0; t < r.rows(); ++t) {
        const int k = brute_nearest(r.row(t).data(), book);
        r.row(t) -= book.entries.row(k);
        ++compared;
        if (c.at(d, static_cast<std::size_t>(t)) != k) ++mismatches;
      }
    }
  }
  return {mismatches == 0, fmt::format("100 utterances, {} indices compared, {} mismatches", compared, mismatches)};
}

// 4 -----------------------------------------------------------------------

std::vector<LatentSeq> materialize_all(const corpus::Corpus& c, const corpus::PrototypeTable& protos) {
  std::vector<LatentSeq> out;
  for (const auto& rec : c.utterances) out.push_back(c.materialize(rec, protos).frames);
  return out;
}

Outcome residual_monotonicity() {
  corpus::CorpusConfig cc;
  cc.count = 120;
  cc.seed = 41;
  const auto train = corpus::make_corpus(cc);
  cc.count = 50;
  cc.seed = 42;
  const auto held = corpus::make_corpus(cc);
  const auto protos = train.prototypes();
  const auto train_z = materialize_all(train, protos);
  const auto held_z = materialize_all(held, protos);

  std::string detail;
  bool ok = true;
  for (const auto& merge : {codec::MergeConfig::none(), codec::MergeConfig::layers(1, 1, 2)}) {
    codec::CodecTrainConfig tc;
    tc.entries = 64;
    tc.epochs = 5;
    tc.seed = 43;
    const auto books = codec::train_codebooks(train_z, tc, merge);
    const bool merged = merge != codec::MergeConfig::none();
    int violations = 0;
    for (const auto& z : held_z) {
      codec::EncodeTrace trace;
      codec::encode(z, books, &trace);
      for (std::size_t s = 1; s < trace.frame_energy.size(); ++s) {
        if (merged) {
          // Merged layers only shrink the energy of whole blocks; float32
          // residuals leave relative noise of about 1e-7 on the sum.
          const double before = trace.total(s - 1);
          if (trace.total(s) > before * (1.0 + 1e-6)) ++violations;
        } else {
          for (std::size_t t = 0; t < trace.frame_energy[s].size(); ++t) {
            if (trace.frame_energy[s][t] > trace.frame_energy[s - 1][t]) ++violations;
          }
        }
      }
    }
    ok = ok && violations == 0;
    detail += fmt::format("{}: {} utterances, {} violations; ", merge.label(), held_z.size(), violations);
  }
  return {ok, detail};
}

// 5 -----------------------------------------------------------------------

Outcome merge_quality() {
  corpus::CorpusConfig cc;
  cc.vocab = 16;
  cc.dim = 16;
  cc.min_duration = 4;
  cc.max_duration = 20;
  cc.noise_std = 0.2;
  cc.count = 400;
  cc.seed = 1;
  const auto train = corpus::make_corpus(cc);
  cc.count = 30;
  cc.seed = 2;
  const auto held = corpus::make_corpus(cc);
  const auto protos = train.prototypes();
  const auto train_z = materialize_all(train, protos);
  const auto held_z = materialize_all(held, protos);

  std::vector<bench::MergeCase> cases;
  for (const auto& [label, merge] : bench::standard_merge_configs()) {
    codec::CodecTrainConfig tc;
    tc.entries = 64;
    tc.epochs = 10;
    tc.seed = 3;
    cases.push_back({label, codec::train_codebooks(train_z, tc, merge)});
  }
  const auto report = bench::merge_quality_sweep(held_z, cases);
  std::string detail;
  for (const auto& row : report.rows) detail += fmt::format("{}={:.2f}dB ", row.label, row.mean_snr_db);
  for (const auto& c : report.checks) {
    if (!c.passed) detail += "| failed: " + c.name + " (" + c.detail + ") ";
  }
  return {report.all_passed() && report.checks.size() == 6, detail};
}

// 6 -----------------------------------------------------------------------

struct GradStats {
  int relative_checked = 0;
  int failures = 0;
  double worst = 0.0;
};

template <typename LossFn, typename BackpropFn>
GradStats gradient_check(lm::LMWeights& w, LossFn loss, BackpropFn backprop, int wanted, std::uint64_t seed) {
  constexpr double kStep = 1e-5;
  w.zero_grad();
  backprop(w);
  std::vector<lm::Matrix> analytic;
  for (const auto& p : w.params()) analytic.push_back(p.grad);

  Rng rng(seed);
  std::uniform_int_distribution<int> pick_param(0, static_cast<int>(w.params().size()) - 1);
  GradStats stats;
  for (int attempts = 0; stats.relative_checked < wanted && attempts < 100 * wanted; ++attempts) {
    const int pi = pick_param(rng);
    auto& value = w.param(pi).value;
    std::uniform_int_distribution<Eigen::Index> pick(0, value.size() - 1);
    const Eigen::Index k = pick(rng);
    const double saved = value.data()[k];
    value.data()[k] = saved + kStep;
    const double up = loss(w);
    value.data()[k] = saved - kStep;
    const double down = loss(w);
    value.data()[k] = saved;
    const double numeric = (up - down) / (2.0 * kStep);
    const double exact = analytic[static_cast<std::size_t>(pi)].data()[k];
    const double scale = std::max(std::abs(numeric), std::abs(exact));
    if (scale < 1e-7) {
      // Relative error is meaningless here; still demand absolute agreement.
      if (std::abs(numeric - exact) > 1e-9) ++stats.failures;
      continue;
    }
    const double rel = std::abs(numeric - exact) / scale;
    stats.worst = std::max(stats.worst, rel);
    if (rel >= 1e-4) ++stats.failures;
    ++stats.relative_checked;
  }
  return stats;
}

Outcome gradients() {
  const auto cfg = lm::LMConfig::tiny();
  Rng rng(6);
  std::uniform_int_distribution<int> code(0, cfg.acoustic_vocab - 1);
  std::uniform_int_distribution<int> phone(0, cfg.phoneme_vocab - 1);

  lm::LMWeights ar(lm::ModelKind::AR, cfg, 61);
  lm::ARSequence seq;
  for (int i = 0; i < 4; ++i) seq.prompt.push_back(phone(rng));
  for (int i = 0; i < 6; ++i) {
    seq.acoustic.push_back(code(rng));
    seq.phonemes.push_back(phone(rng));
  }
  const auto at = seq.acoustic_targets(cfg);
  const auto pt = seq.phoneme_targets(cfg);
  const auto ar_stats = gradient_check(
      ar, [&](const lm::LMWeights& m) { return lm::ar_loss(lm::ar_forward(m, seq), at, pt, 1.0).total; },
      [&](lm::LMWeights& m) { lm::ar_backprop(m, seq, 1.0, nullptr); }, 64, 62);

  lm::LMWeights nar(lm::ModelKind::NAR, cfg, 63);
  lm::NARExample ex;
  ex.target_layer = 4;
  for (int t = 0; t < 7; ++t) ex.phonemes.push_back(phone(rng));
  for (int l = 1; l < ex.target_layer; ++l) {
    std::vector<int> row;
    for (int t = 0; t < 7; ++t) row.push_back(code(rng));
    ex.lower.push_back(row);
  }
  for (int t = 0; t < 7; ++t) ex.targets.push_back(code(rng));
  const auto nar_stats = gradient_check(
      nar, [&](const lm::LMWeights& m) { return lm::nar_loss(lm::nar_forward(m, ex), ex.targets); },
      [&](lm::LMWeights& m) { lm::nar_backprop(m, ex, nullptr); }, 64, 64);

  const bool ok = ar_stats.relative_checked >= 64 && nar_stats.relative_checked >= 64 &&
                  ar_stats.failures == 0 && nar_stats.failures == 0;
  return {ok, fmt::format("AR {} params worst rel {:.2e} failures {}; NAR {} params worst rel {:.2e} failures {}",
                          ar_stats.relative_checked, ar_stats.worst, ar_stats.failures,
                          nar_stats.relative_checked, nar_stats.worst, nar_stats.failures)};
}

// 7 -----------------------------------------------------------------------

Outcome ma_guarantees() {
  Rng rng(7);
  std::uniform_int_distribution<int> vocab(2, 12);
  std::uniform_int_distribution<int> len(1, 10);
  std::uniform_int_distribution<int> prompt_len(0, 6);
  std::uniform_real_distribution<double> top_p(0.05, 1.0);
  std::uniform_int_distribution<int> budget(1, 60);
  int complete = 0;
  int property_failures = 0;
  int range_violations = 0;
  int mismatched_phonemes = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    lm::LMConfig cfg = lm::LMConfig::tiny(8, vocab(rng));
    cfg.max_seq_len = 256;
    lm::LMWeights w(lm::ModelKind::AR, cfg, derive_seed(7, static_cast<std::uint64_t>(trial)));
    decode::DecodeSession s(random_targets(rng, cfg.phoneme_vocab, len(rng)),
                            derive_seed(70, static_cast<std::uint64_t>(trial)));
    const int np = prompt_len(rng);
    if (np > 0) {
      s.prompt_phonemes = random_targets(rng, cfg.phoneme_vocab, np);
      for (int i = 0; i < np; ++i) {
        s.prompt_codes.push_back(i % cfg.acoustic_vocab);
        s.prompt_aligned.push_back(s.prompt_phonemes[static_cast<std::size_t>(i)]);
      }
    }
    s.top_p = top_p(rng);
    s.mode = trial % 4 == 0 ? decode::AdvanceMode::LiteralSigmoid : decode::AdvanceMode::RestrictedSoftmax;
    if (trial % 2) s.step_budget = static_cast<std::size_t>(budget(rng));
    const auto r = decode::ma_decode(w, s);
    const int length = static_cast<int>(s.target_phonemes.size());
    for (std::size_t k = 0; k < r.path.positions.size(); ++k) {
      const int j = r.path.positions[k];
      if (j < 0 || j >= length) {
        ++range_violations;
      } else if (r.phonemes[k] != s.target_phonemes[static_cast<std::size_t>(j)]) {
        ++mismatched_phonemes;
      }
    }
    if (s.pointer < 0 || s.pointer > length) ++range_violations;
    if (r.status == decode::DecodeStatus::Complete) {
      ++complete;
      if (!decode::check_ma_properties(r.path, length).all()) ++property_failures;
    }
  }
  const bool ok = complete > 0 && property_failures == 0 && range_violations == 0 && mismatched_phonemes == 0;
  return {ok, fmt::format("1000 decodes, {} complete, {} property failures, {} pointer-range violations, "
                          "{} emitted/pointer mismatches",
                          complete, property_failures, range_violations, mismatched_phonemes)};
}

// 8 -----------------------------------------------------------------------

Outcome robustness() {
  constexpr std::uint64_t kSeed = 8;
  corpus::CorpusConfig cc;
  cc.vocab = 16;
  cc.dim = 8;
  cc.min_phonemes = 4;
  cc.max_phonemes = 10;
  cc.duration_kind = corpus::DurationKind::Geometric;
  cc.min_duration = 1;
  cc.max_duration = 24;
  cc.geometric_stay = 0.75;
  cc.duration_quantum = 2;
  cc.distinct_phonemes = true;
  cc.noise_std = 0.0;
  cc.count = 4000;
  cc.seed = 11;
  const auto train = corpus::make_corpus(cc);
  cc.count = 100;
  cc.seed = 99;
  const auto test = corpus::make_corpus(cc);

  const auto protos = train.prototypes();
  const auto train_z = materialize_all(train, protos);
  codec::CodecTrainConfig tc;
  tc.entries = 32;
  tc.epochs = 3;
  tc.seed = derive_seed(kSeed, 0);
  const auto books = codec::train_codebooks(train_z, tc, codec::MergeConfig::layers(1, 1, 2));
  const auto data = lm::build_training_set(train, books);

  // The decode budget scales with the corpus' own pacing, 4x its mean block count per phoneme.
  std::size_t longest = 0;
  std::size_t blocks = 0;
  std::size_t phonemes = 0;
  for (const auto& s : data.ar) {
    longest = std::max(longest, s.steps());
    blocks += s.acoustic.size();
    phonemes += s.prompt.size();
  }
  const double steps_per_phoneme = static_cast<double>(blocks) / static_cast<double>(phonemes);
  const auto budget = static_cast<std::size_t>(std::ceil(4.0 * steps_per_phoneme * cc.max_phonemes));
  lm::LMConfig mc;
  mc.layers = 2;
  mc.dim = 64;
  mc.heads = 4;
  mc.ffn = 128;
  mc.dropout = 0.0;
  mc.max_seq_len = static_cast<int>(std::max(2 * longest, budget + 1));
  mc.acoustic_vocab = books.size();
  mc.phoneme_vocab = train.vocab;
  lm::LMWeights ar(lm::ModelKind::AR, mc, derive_seed(kSeed, 1));

  lm::TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.seed = derive_seed(kSeed, 2);
  cfg.optimizer.peak_lr = 2e-3;
  cfg.optimizer.warmup_steps = 200;
  cfg.optimizer.total_steps = 6000;
  const auto report = lm::train(ar, data, cfg);

  std::vector<std::vector<int>> targets;
  for (const auto& rec : test.utterances) targets.push_back(rec.phonemes);
  bench::RobustnessOptions opt;
  opt.seed = derive_seed(kSeed, 3);
  opt.expected_steps_per_phoneme = steps_per_phoneme;
  const auto sweep = bench::robustness_sweep(ar, targets, opt);

  bool ok = true;
  std::string detail = fmt::format("train acc {:.3f}, {:.1f} steps/phoneme; ", report.acoustic_accuracy,
                                   steps_per_phoneme);
  for (double p : opt.top_p_grid) {
    const auto* ma = sweep.find(bench::DecoderKind::MA, p);
    const auto* base = sweep.find(bench::DecoderKind::Baseline, p);
    if (!ma || !base) return {false, "missing sweep cell"};
    ok = ok && ma->error_proxy <= 0.01;
    detail += fmt::format("p={}: MA {:.3f} (trunc {:.2f}) base {:.3f} (trunc {:.2f}); ", p, ma->error_proxy,
                          ma->truncation_rate, base->error_proxy, base->truncation_rate);
  }
  const auto* lo = sweep.find(bench::DecoderKind::Baseline, 0.3);
  const auto* hi = sweep.find(bench::DecoderKind::Baseline, 1.0);
  ok = ok && lo->error_proxy > hi->error_proxy;
  return {ok, detail};
}

// 9 -----------------------------------------------------------------------

Outcome prosody() {
  Rng rng(9);
  lm::LMConfig cfg = lm::LMConfig::tiny(8, 10);
  cfg.max_seq_len = 256;
  lm::LMWeights ar(lm::ModelKind::AR, cfg, 91);
  std::uniform_int_distribution<int> len(1, 10);
  std::uniform_int_distribution<int> dur(1, 9);
  int length_failures = 0;
  int path_failures = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto phonemes = random_targets(rng, cfg.phoneme_vocab, len(rng));
    std::vector<int> durations;
    for (std::size_t i = 0; i < phonemes.size(); ++i) durations.push_back(dur(rng));
    const corpus::AlignedPhonemeSeq preset(phonemes, durations);
    const int m = 1 + trial % 3;
    const auto merge = codec::MergeConfig::layers(1, 1, m);

    // Forced schedule: run i of the block-rate alignment holds the pointer at i.
    std::vector<int> schedule;
    const auto blocks = corpus::downsample_alignment(preset, m);
    for (std::size_t i = 0; i < blocks.num_runs(); ++i) {
      schedule.insert(schedule.end(), static_cast<std::size_t>(blocks.runs()[i].frames), static_cast<int>(i));
    }

    decode::DecodeSession s({}, derive_seed(90, static_cast<std::uint64_t>(trial)));
    s.top_p = 0.05 + 0.0095 * trial;
    const auto r = decode::prosody_transfer(ar, nullptr, s, preset, merge);
    if (!r.codes || r.codes->length() != preset.total_frames()) ++length_failures;
    if (r.path.positions != schedule) ++path_failures;
  }
  return {length_failures == 0 && path_failures == 0,
          fmt::format("100 presets, {} frame-count mismatches, {} schedule mismatches", length_failures,
                      path_failures)};
}

// 10 ----------------------------------------------------------------------

Outcome timing() {
  lm::LMConfig cfg;
  cfg.layers = 4;
  cfg.heads = 4;
  cfg.dim = 128;
  cfg.ffn = 512;
  cfg.max_seq_len = 800;
  lm::LMWeights ar(lm::ModelKind::AR, cfg, 10);
  const auto merged = bench::time_ar_loop(ar, 375, 7);
  const auto full = bench::time_ar_loop(ar, 750, 7);
  const double ratio = full.median / merged.median;
  return {ratio >= 1.8, fmt::format("median 750 steps {:.3f}s, 375 steps {:.3f}s, ratio {:.2f}", full.median,
                                    merged.median, ratio)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "step-count table", 1.0, step_counts},
      {2, "merged block constancy", 60.0, block_constancy},
      {3, "RVQ oracle equivalence", 60.0, rvq_oracle},
      {4, "residual monotonicity", 60.0, residual_monotonicity},
      {5, "merge-quality ordering", 600.0, merge_quality},
      {6, "gradient correctness", 120.0, gradients},
      {7, "MA structural guarantees", 120.0, ma_guarantees},
      {8, "robustness A/B", 1800.0, robustness},
      {9, "prosody-transfer determinism", 60.0, prosody},
      {10, "timing direction", 300.0, timing},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > c.budget_s) {
      o.passed = false;
      o.detail += fmt::format(" | over runtime budget of {:.0f}s", c.budget_s);
    }
    if (!o.passed) ++failures;
    std::printf("%s [%2d] %s (%.2fs): %s\n", o.passed ? "PASS" : "FAIL", c.id, c.name.c_str(), secs,
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
