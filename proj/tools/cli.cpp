#include "cli.hpp"

#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "valler/bench.hpp"
#include "valler/codec.hpp"
#include "valler/corpus.hpp"
#include "valler/decode.hpp"
#include "valler/lm.hpp"
#include "valler/svg.hpp"

namespace valler::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flattens a JSON object into option name/value pairs. Nested objects are
/// flattened, so {"lm": {"dim": 64}} sets --dim; underscores in keys map to dashes.
using ConfigItems = std::vector<std::pair<std::string, std::vector<std::string>>>;

std::string config_scalar(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return v.dump();
}

void flatten_config(const json& obj, ConfigItems& items) {
  for (const auto& [key, value] : obj.items()) {
    if (value.is_object()) {
      flatten_config(value, items);
      continue;
    }
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    std::vector<std::string> inputs;
    if (value.is_array()) {
      for (const auto& v : value) inputs.push_back(config_scalar(v));
    } else {
      inputs.push_back(config_scalar(value));
    }
    items.emplace_back(std::move(name), std::move(inputs));
  }
}

// CLI11 only reads config files for the root app, so subcommands apply theirs
// here. Options already given on the command line keep their values; unknown
// keys are ignored.
void apply_config_file(CLI::App* app, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
  ConfigItems items;
  flatten_config(j, items);
  for (const auto& [name, inputs] : items) {
    if (name == "config") continue;
    auto* opt = app->get_option_no_throw("--" + name);
    if (opt == nullptr || opt->count() > 0) continue;
    try {
      for (const auto& v : inputs) opt->add_result(v);
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw UsageError("config key '" + name + "': " + e.what());
    }
  }
}

std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::string cleaned = text;
  for (char& c : cleaned) {
    if (c == ',' || c == '[' || c == ']' || c == '\n' || c == '\t') c = ' ';
  }
  std::istringstream is(cleaned);
  std::string tok;
  while (is >> tok) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size()) throw UsageError("'" + tok + "' is not an integer");
    out.push_back(v);
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::string cleaned = text;
  std::replace(cleaned.begin(), cleaned.end(), ',', ' ');
  std::istringstream is(cleaned);
  std::string tok;
  while (is >> tok) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      throw UsageError("'" + tok + "' is not a number");
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw Error(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Everything a subcommand handler needs.
struct Context {
  std::ostream& out;
  std::shared_ptr<spdlog::logger> log;
  fs::path out_dir;
  std::uint64_t seed = 0;
};

struct Command {
  CLI::App* app = nullptr;
  bool needs_seed = false;
  std::function<void(Context&)> run;
  CLI::Option* seed_opt = nullptr;
};

json resolved_config(const CLI::App* app) {
  json j = json::object();
  for (const auto* opt : app->get_options()) {
    if (opt->get_lnames().empty()) continue;
    const auto& name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    if (opt->count() > 0) {
      const auto& res = opt->results();
      if (opt->get_type_size() == 0 && opt->get_expected_max() == 0) {
        j[name] = true;
      } else if (res.size() == 1) {
        j[name] = res.front();
      } else {
        j[name] = res;
      }
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

void warn_codec_mismatch(const Context& ctx, const lm::LMWeights& w, const codec::CodebookSet& books,
                         const std::string& what) {
  if (w.codec_hash != 0 && w.codec_hash != books.config_hash()) {
    ctx.log->warn("{} was trained against codebooks {} but the loaded codebooks hash to {}", what,
                  hex(w.codec_hash), hex(books.config_hash()));
  }
}

struct PromptParts {
  std::vector<int> phonemes;
  std::vector<int> codes;
  std::vector<int> aligned;
};

PromptParts acoustic_prompt(const corpus::Corpus& c, std::size_t index,
                            const codec::CodebookSet& books) {
  if (index >= c.utterances.size()) {
    throw std::invalid_argument("prompt utterance " + std::to_string(index) + " is out of range");
  }
  const auto utt = c.materialize(index);
  const auto seq = lm::make_ar_sequence(utt.alignment, codec::encode(utt.frames, books));
  return {seq.prompt, seq.acoustic, seq.phonemes};
}

void write_latent_csv(const fs::path& path, const LatentSeq& z) {
  std::ostringstream os;
  for (Eigen::Index t = 0; t < z.frames.rows(); ++t) {
    for (Eigen::Index f = 0; f < z.frames.cols(); ++f) os << (f ? "," : "") << z.frames(t, f);
    os << '\n';
  }
  write_text(path, os.str());
}

codec::CodeFileExtras decode_extras(const decode::DecodeResult& r, const codec::CodebookSet& books) {
  codec::CodeFileExtras extras;
  extras.path = std::vector<std::uint32_t>(r.path.positions.begin(), r.path.positions.end());
  extras.config_hash = books.config_hash();
  return extras;
}

std::string join(const std::vector<int>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands

Command add_gen_corpus(CLI::App& root) {
  auto cfg = std::make_shared<corpus::CorpusConfig>();
  auto name = std::make_shared<std::string>("corpus.jsonl");
  auto kind = std::make_shared<std::string>("uniform");
  Command c;
  c.app = root.add_subcommand("gen-corpus", "Generate a synthetic aligned-phoneme corpus (JSONL)");
  c.app->add_option("--vocab", cfg->vocab, "Phoneme vocabulary size");
  c.app->add_option("--dim", cfg->dim, "Latent frame dimension");
  c.app->add_option("--count", cfg->count, "Number of utterances");
  c.app->add_option("--min-phonemes", cfg->min_phonemes);
  c.app->add_option("--max-phonemes", cfg->max_phonemes);
  c.app->add_option("--durations", *kind, "uniform | geometric | fixed");
  c.app->add_option("--min-duration", cfg->min_duration, "Frames (in quantum units)");
  c.app->add_option("--max-duration", cfg->max_duration, "Frames (in quantum units)");
  c.app->add_option("--geometric-stay", cfg->geometric_stay);
  c.app->add_option("--duration-quantum", cfg->duration_quantum, "Durations are multiples of this");
  c.app->add_flag("--distinct", cfg->distinct_phonemes, "No phoneme repeats within an utterance");
  c.app->add_option("--noise", cfg->noise_std, "Gaussian noise std per frame");
  c.app->add_option("--name", *name, "Output file name inside --out");
  c.needs_seed = true;
  c.run = [cfg, name, kind](Context& ctx) {
    cfg->duration_kind = corpus::duration_kind_from_string(*kind);
    cfg->seed = ctx.seed;
    const auto path = ctx.out_dir / *name;
    const auto frames = corpus::gen_corpus(*cfg, path);
    ctx.out << "wrote " << cfg->count << " utterances (" << frames << " frames) to "
            << path.string() << '\n';
  };
  return c;
}

Command add_train_codec(CLI::App& root) {
  struct Opts {
    std::string corpus;
    std::string merge = "1,1,1,1,1,1,1,1";
    std::string name = "codebooks.mrvq";
    codec::CodecTrainConfig train;
    bool no_pin = false;
  };
  auto o = std::make_shared<Opts>();
  Command c;
  c.app = root.add_subcommand("train-codec", "Train merged residual VQ codebooks");
  c.app->add_option("--corpus", o->corpus, "Corpus JSONL")->required();
  c.app->add_option("--merge", o->merge, "Per-layer merge rates, e.g. 2,1,1,1,1,1,1,1");
  c.app->add_option("--entries", o->train.entries, "Codebook size K");
  c.app->add_option("--epochs", o->train.epochs);
  c.app->add_option("--batch", o->train.batch);
  c.app->add_option("--decay", o->train.decay, "EMA decay");
  c.app->add_flag("--no-pin-zero", o->no_pin, "Do not pin entry 0 at the origin");
  c.app->add_option("--name", o->name, "Output file name inside --out");
  c.needs_seed = true;
  c.run = [o](Context& ctx) {
    const auto merge = codec::parse_merge_config(o->merge);
    const auto corpus = corpus::read_corpus(o->corpus);
    const auto protos = corpus.prototypes();
    std::vector<LatentSeq> latents;
    for (const auto& rec : corpus.utterances) latents.push_back(corpus.materialize(rec, protos).frames);
    auto cfg = o->train;
    cfg.seed = ctx.seed;
    cfg.pin_zero_entry = !o->no_pin;
    codec::CodecTrainReport report;
    const auto books = codec::train_codebooks(latents, cfg, merge, &report);
    for (const auto& w : report.warnings) ctx.log->warn("{}", w);
    const auto path = ctx.out_dir / o->name;
    codec::save_codebooks(books, path);

    double snr = 0.0;
    for (const auto& z : latents) snr += codec::reconstruction_snr(z, codec::decode(codec::encode(z, books), books));
    snr /= static_cast<double>(latents.size());
    json j = {{"version", 1},
              {"config_hash", hex(books.config_hash())},
              {"merge", merge.label()},
              {"layer_mean_error", report.layer_mean_error},
              {"reseeded", report.reseeded},
              {"warnings", report.warnings},
              {"train_snr_db", snr}};
    write_text(ctx.out_dir / "codec_report.json", j.dump(2) + "\n");
    ctx.out << "codebooks " << hex(books.config_hash()) << " (merge " << merge.label()
            << ") written to " << path.string() << "; training SNR " << snr << " dB\n";
  };
  return c;
}

Command add_train_lm(CLI::App& root, lm::ModelKind kind) {
  struct Opts {
    std::string corpus;
    std::string codebooks;
    std::string name;
    lm::LMConfig model;
    lm::TrainConfig train;
    int log_every = 100;
  };
  auto o = std::make_shared<Opts>();
  o->name = kind == lm::ModelKind::AR ? "ar.vrlm" : "nar.vrlm";
  o->model.max_seq_len = 0;
  Command c;
  const bool ar = kind == lm::ModelKind::AR;
  c.app = root.add_subcommand(ar ? "train-ar" : "train-nar",
                              ar ? "Train the autoregressive layer-1 model"
                                 : "Train the non-autoregressive layer 2-8 model");
  c.app->add_option("--corpus", o->corpus, "Corpus JSONL")->required();
  c.app->add_option("--codebooks", o->codebooks, "Trained codebooks")->required();
  c.app->add_option("--layers", o->model.layers);
  c.app->add_option("--heads", o->model.heads);
  c.app->add_option("--dim", o->model.dim);
  c.app->add_option("--ffn", o->model.ffn);
  c.app->add_option("--dropout", o->model.dropout);
  c.app->add_option("--max-seq-len", o->model.max_seq_len, "0 = twice the longest training sequence");
  c.app->add_option("--steps", o->train.optimizer.total_steps);
  c.app->add_option("--warmup", o->train.optimizer.warmup_steps);
  c.app->add_option("--lr", o->train.optimizer.peak_lr);
  c.app->add_option("--weight-decay", o->train.optimizer.weight_decay);
  c.app->add_option("--clip", o->train.optimizer.clip_norm);
  c.app->add_option("--batch", o->train.batch_size);
  if (ar) c.app->add_option("--phoneme-weight", o->train.phoneme_weight, "Weight of the phoneme loss");
  c.app->add_option("--log-every", o->log_every);
  c.app->add_option("--name", o->name, "Output file name inside --out");
  c.needs_seed = true;
  c.run = [o, kind](Context& ctx) {
    const auto corpus = corpus::read_corpus(o->corpus);
    const auto books = codec::load_codebooks(o->codebooks);
    const auto data = lm::build_training_set(corpus, books);
    auto model = o->model;
    model.acoustic_vocab = books.size();
    model.phoneme_vocab = corpus.vocab;
    model.code_layers = books.layers();
    if (model.max_seq_len == 0) {
      std::size_t longest = 1;
      for (const auto& s : data.ar) longest = std::max({longest, s.steps(), s.prompt.size() + 1});
      if (kind == lm::ModelKind::NAR) {
        longest = 1;
        for (const auto& e : data.nar) longest = std::max(longest, e.phonemes.size());
      }
      model.max_seq_len = static_cast<int>(2 * longest);
    }
    ctx.log->info("model config: layers={} heads={} dim={} ffn={} max_seq_len={} K={} V={}",
                  model.layers, model.heads, model.dim, model.ffn, model.max_seq_len,
                  model.acoustic_vocab, model.phoneme_vocab);
    lm::LMWeights w(kind, model, derive_seed(ctx.seed, 1));
    auto train = o->train;
    train.seed = derive_seed(ctx.seed, 2);
    const int every = std::max(1, o->log_every);
    const auto report = lm::train(w, data, train, [&](int step, double loss) {
      if (step % every == 0) ctx.log->info("step {} loss {:.4f}", step, loss);
    });
    const auto path = ctx.out_dir / o->name;
    lm::save_weights(w, path);
    write_text(ctx.out_dir / (fs::path(o->name).stem().string() + "_train.json"),
               report.to_json() + "\n");
    ctx.out << lm::to_string(kind) << " model (" << w.parameter_count() << " parameters) written to "
            << path.string() << "; teacher-forced accuracy " << report.acoustic_accuracy;
    if (kind == lm::ModelKind::AR) ctx.out << ", phoneme accuracy " << report.phoneme_accuracy;
    ctx.out << " in " << report.seconds << " s\n";
  };
  return c;
}

struct DecodeOpts {
  std::string ar;
  std::string nar;
  std::string codebooks;
  std::string corpus;
  std::string phonemes;
  int target_utt = -1;
  int prompt_utt = -1;
  double top_p = 0.8;
  std::string mode = "restricted";
  std::size_t budget = 0;
};

void add_decode_options(CLI::App* app, DecodeOpts& o, bool targets) {
  app->add_option("--ar", o.ar, "AR weights");
  app->add_option("--codebooks", o.codebooks, "Codebooks (needed for acoustic prompts and latents)");
  app->add_option("--corpus", o.corpus, "Corpus JSONL for --target-utt / --prompt-utt");
  if (targets) {
    app->add_option("--phonemes", o.phonemes, "Target phoneme ids, e.g. 3,7,1");
    app->add_option("--target-utt", o.target_utt, "Take target phonemes from this corpus utterance");
  }
  app->add_option("--prompt-utt", o.prompt_utt, "Acoustic prompt from this corpus utterance");
  app->add_option("--top-p", o.top_p);
  app->add_option("--mode", o.mode, "restricted | literal");
  app->add_option("--budget", o.budget, "Step budget (0 = default)");
}

/// Loads the pieces shared by the decoding commands and fills the session.
struct DecodeSetup {
  std::optional<corpus::Corpus> corpus;
  std::optional<codec::CodebookSet> books;
};

DecodeSetup load_decode_inputs(const DecodeOpts& o, bool need_books) {
  DecodeSetup s;
  if (!o.corpus.empty()) s.corpus = corpus::read_corpus(o.corpus);
  if (!o.codebooks.empty()) {
    s.books = codec::load_codebooks(o.codebooks);
  } else if (need_books || o.prompt_utt >= 0) {
    throw UsageError("--codebooks is required here");
  }
  if ((o.prompt_utt >= 0 || o.target_utt >= 0) && !s.corpus) {
    throw UsageError("--corpus is required with --prompt-utt/--target-utt");
  }
  return s;
}

std::vector<int> decode_targets(const DecodeOpts& o, const DecodeSetup& s) {
  if (!o.phonemes.empty()) return parse_int_list(o.phonemes);
  if (o.target_utt >= 0) {
    if (static_cast<std::size_t>(o.target_utt) >= s.corpus->utterances.size()) {
      throw std::invalid_argument("target utterance out of range");
    }
    return s.corpus->utterances[static_cast<std::size_t>(o.target_utt)].phonemes;
  }
  throw UsageError("give target phonemes with --phonemes or --target-utt");
}

void configure_session(decode::DecodeSession& session, const DecodeOpts& o, const DecodeSetup& s) {
  session.top_p = o.top_p;
  session.mode = decode::advance_mode_from_string(o.mode);
  session.step_budget = o.budget;
  if (o.prompt_utt >= 0) {
    const auto p = acoustic_prompt(*s.corpus, static_cast<std::size_t>(o.prompt_utt), *s.books);
    session.prompt_phonemes = p.phonemes;
    session.prompt_codes = p.codes;
    session.prompt_aligned = p.aligned;
  }
}

lm::LMWeights load_model(const std::string& path, const char* flag) {
  if (path.empty()) throw UsageError(std::string(flag) + " is required");
  return lm::load_weights(path);
}

Command add_synth(CLI::App& root) {
  auto o = std::make_shared<DecodeOpts>();
  Command c;
  c.app = root.add_subcommand("synth", "Monotonic-alignment decoding followed by NAR completion");
  add_decode_options(c.app, *o, true);
  c.app->add_option("--nar", o->nar, "NAR weights");
  c.needs_seed = true;
  c.run = [o](Context& ctx) {
    const auto ar = load_model(o->ar, "--ar");
    const auto nar = load_model(o->nar, "--nar");
    const auto setup = load_decode_inputs(*o, true);
    warn_codec_mismatch(ctx, ar, *setup.books, "AR model");
    warn_codec_mismatch(ctx, nar, *setup.books, "NAR model");
    decode::DecodeSession session(decode_targets(*o, setup), ctx.seed);
    configure_session(session, *o, setup);
    const auto r = decode::synthesize(ar, nar, session, setup.books->merge);
    write_text(ctx.out_dir / "synth_audit.jsonl", decode::audit_jsonl(r));
    if (r.codes) {
      codec::save_codes(*r.codes, ctx.out_dir / "synth.codes", decode_extras(r, *setup.books));
      write_latent_csv(ctx.out_dir / "synth_latent.csv", codec::decode(*r.codes, *setup.books));
    }
    const auto props = decode::check_ma_properties(
        r.path, static_cast<int>(session.target_phonemes.size()));
    ctx.out << "status " << decode::to_string(r.status) << ", " << r.acoustic.size()
            << " AR steps, " << (r.codes ? r.codes->length() : 0) << " frames, path ["
            << join(r.path.positions) << "], MA properties " << (props.all() ? "hold" : "violated")
            << '\n';
  };
  return c;
}

Command add_prosody(CLI::App& root) {
  auto o = std::make_shared<DecodeOpts>();
  auto preset = std::make_shared<int>(0);
  Command c;
  c.app = root.add_subcommand("prosody", "Decode with the phoneme durations of a preset utterance");
  add_decode_options(c.app, *o, false);
  c.app->add_option("--nar", o->nar, "NAR weights (optional; layer 1 only without it)");
  c.app->add_option("--preset", *preset, "Corpus utterance whose alignment is forced")->required();
  c.needs_seed = true;
  c.run = [o, preset](Context& ctx) {
    const auto ar = load_model(o->ar, "--ar");
    std::optional<lm::LMWeights> nar;
    if (!o->nar.empty()) nar = lm::load_weights(o->nar);
    if (o->corpus.empty()) throw UsageError("--corpus is required for --preset");
    const auto setup = load_decode_inputs(*o, true);
    warn_codec_mismatch(ctx, ar, *setup.books, "AR model");
    if (*preset < 0 || static_cast<std::size_t>(*preset) >= setup.corpus->utterances.size()) {
      throw std::invalid_argument("preset utterance out of range");
    }
    const auto& rec = setup.corpus->utterances[static_cast<std::size_t>(*preset)];
    const corpus::AlignedPhonemeSeq alignment(rec.phonemes, rec.durations);
    decode::DecodeSession session(rec.phonemes, ctx.seed);
    configure_session(session, *o, setup);
    const auto r = decode::prosody_transfer(ar, nar ? &*nar : nullptr, session, alignment,
                                            setup.books->merge);
    write_text(ctx.out_dir / "prosody_audit.jsonl", decode::audit_jsonl(r));
    codec::save_codes(*r.codes, ctx.out_dir / "prosody.codes", decode_extras(r, *setup.books));
    if (r.codes->layers() == setup.books->layers()) {
      write_latent_csv(ctx.out_dir / "prosody_latent.csv", codec::decode(*r.codes, *setup.books));
    }
    ctx.out << "preset frames " << alignment.total_frames() << ", output frames "
            << r.codes->length() << ", " << r.acoustic.size() << " AR steps\n";
  };
  return c;
}

Command add_bench_steps(CLI::App& root) {
  struct Opts {
    double duration = 10.0;
    double hz = 75.0;
    int phonemes = 105;
    int merge_rate = 2;
    int layers = 8;
    std::string format = "table";
  };
  auto o = std::make_shared<Opts>();
  Command c;
  c.app = root.add_subcommand("bench-steps", "AR step counts of six token arrangements");
  c.app->add_option("--duration", o->duration, "Seconds of audio");
  c.app->add_option("--hz", o->hz, "Codec frame rate");
  c.app->add_option("--phonemes", o->phonemes, "Phonemes in the utterance");
  c.app->add_option("--merge-rate", o->merge_rate);
  c.app->add_option("--layers", o->layers, "Codec layers");
  c.app->add_option("--format", o->format, "table | json | csv")
      ->check(CLI::IsMember({"table", "json", "csv"}));
  c.run = [o](Context& ctx) {
    const auto patterns = bench::all_patterns(o->hz, o->phonemes, o->merge_rate, o->layers);
    const auto table = bench::step_table(patterns, o->duration);
    write_text(ctx.out_dir / "bench_steps.json", table.to_json() + "\n");
    write_text(ctx.out_dir / "bench_steps.csv", table.to_csv());
    if (o->format == "json") {
      ctx.out << table.to_json() << '\n';
    } else if (o->format == "csv") {
      ctx.out << table.to_csv();
    } else {
      ctx.out << table.to_table();
    }
  };
  return c;
}

Command add_bench_time(CLI::App& root) {
  struct Opts {
    std::string ar;
    std::string steps = "375,750";
    int reps = 5;
    lm::LMConfig model;
  };
  auto o = std::make_shared<Opts>();
  o->model.dropout = 0.0;
  o->model.max_seq_len = 0;
  Command c;
  c.app = root.add_subcommand("bench-time", "Wall-clock of the cached AR decoding loop");
  c.app->add_option("--ar", o->ar, "AR weights (random weights when omitted)");
  c.app->add_option("--steps", o->steps, "Comma-separated step counts");
  c.app->add_option("--reps", o->reps);
  c.app->add_option("--layers", o->model.layers, "Random-model layers");
  c.app->add_option("--heads", o->model.heads);
  c.app->add_option("--dim", o->model.dim);
  c.app->add_option("--ffn", o->model.ffn);
  c.run = [o](Context& ctx) {
    const auto steps = parse_int_list(o->steps);
    if (steps.empty()) throw UsageError("--steps needs at least one count");
    std::optional<lm::LMWeights> w;
    if (!o->ar.empty()) {
      w = lm::load_weights(o->ar);
    } else {
      auto cfg = o->model;
      cfg.max_seq_len = std::max(2, *std::max_element(steps.begin(), steps.end()));
      w.emplace(lm::ModelKind::AR, cfg, ctx.seed);
    }
    json rows = json::array();
    std::vector<bench::TimingStats> all;
    for (int s : steps) {
      if (s <= 0) throw UsageError("step counts must be positive");
      all.push_back(bench::time_ar_loop(*w, static_cast<std::size_t>(s), o->reps));
      rows.push_back(json::parse(all.back().to_json()));
      ctx.out << std::setw(6) << s << " steps: median " << all.back().median << " s, IQR "
              << all.back().iqr() << " s, " << all.back().steps_per_second() << " steps/s\n";
    }
    json j = {{"version", 1}, {"config_hash", hex(w->config().hash(w->kind()))}, {"runs", rows}};
    if (all.size() >= 2 && all.front().median > 0.0) {
      const double ratio = all.back().median / all.front().median;
      j["ratio_last_first"] = ratio;
      ctx.out << "time ratio " << steps.back() << "/" << steps.front() << " = " << ratio << '\n';
    }
    write_text(ctx.out_dir / "bench_time.json", j.dump(2) + "\n");
  };
  return c;
}

Command add_bench_merge(CLI::App& root) {
  struct Opts {
    std::string corpus;
    int holdout = 20;
    codec::CodecTrainConfig train;
    bool plot = false;
  };
  auto o = std::make_shared<Opts>();
  Command c;
  c.app = root.add_subcommand("bench-merge", "Reconstruction SNR across codec merge configurations");
  c.app->add_option("--corpus", o->corpus, "Corpus JSONL")->required();
  c.app->add_option("--holdout", o->holdout, "Trailing utterances held out for evaluation");
  c.app->add_option("--entries", o->train.entries);
  c.app->add_option("--epochs", o->train.epochs);
  c.app->add_option("--batch", o->train.batch);
  c.app->add_flag("--plot", o->plot, "Also write an SVG chart");
  c.needs_seed = true;
  c.run = [o](Context& ctx) {
    const auto corpus = corpus::read_corpus(o->corpus);
    const auto protos = corpus.prototypes();
    std::vector<LatentSeq> latents;
    for (const auto& rec : corpus.utterances) latents.push_back(corpus.materialize(rec, protos).frames);
    const auto held = static_cast<std::size_t>(std::clamp(o->holdout, 1, static_cast<int>(latents.size()) - 1));
    const std::span<const LatentSeq> train_set(latents.data(), latents.size() - held);
    const std::span<const LatentSeq> test_set(latents.data() + (latents.size() - held), held);
    std::vector<bench::MergeCase> cases;
    for (const auto& [label, merge] : bench::standard_merge_configs()) {
      auto cfg = o->train;
      cfg.seed = ctx.seed;
      ctx.log->info("training codebooks for {} ({})", label, merge.label());
      cases.push_back({label, codec::train_codebooks(train_set, cfg, merge)});
    }
    const auto report = bench::merge_quality_sweep(test_set, cases);
    write_text(ctx.out_dir / "bench_merge.json", report.to_json() + "\n");
    write_text(ctx.out_dir / "bench_merge.csv", report.to_csv());
    if (o->plot) {
      svg::Series s{"mean SNR (dB)", {}, {}};
      for (std::size_t i = 0; i < report.rows.size(); ++i) {
        s.x.push_back(static_cast<double>(i));
        s.y.push_back(report.rows[i].mean_snr_db);
      }
      write_text(ctx.out_dir / "bench_merge.svg",
                 svg::line_chart("SNR by merge config (none, L1-m2, L1-4-m2, L1-8-m2, L1-m3, L1-m4)",
                                 "config index", "SNR (dB)", {s}));
    }
    ctx.out << report.to_table();
  };
  return c;
}

Command add_bench_robust(CLI::App& root) {
  struct Opts {
    std::string ar;
    std::string corpus;
    int count = 0;
    std::string top_p = "0.3,0.5,0.8,1.0";
    std::string mode = "restricted";
    double steps_per_phoneme = 4.0;
    bool plot = false;
  };
  auto o = std::make_shared<Opts>();
  Command c;
  c.app = root.add_subcommand("bench-robust", "MA vs free-running decoding across top_p");
  c.app->add_option("--ar", o->ar, "AR weights");
  c.app->add_option("--corpus", o->corpus, "Test corpus JSONL (targets)")->required();
  c.app->add_option("--count", o->count, "Utterances to decode (0 = all)");
  c.app->add_option("--top-p", o->top_p, "Comma-separated top_p grid");
  c.app->add_option("--mode", o->mode, "restricted | literal");
  c.app->add_option("--steps-per-phoneme", o->steps_per_phoneme, "Expected steps per phoneme for the budget");
  c.app->add_flag("--plot", o->plot, "Also write an SVG chart");
  c.needs_seed = true;
  c.run = [o](Context& ctx) {
    const auto ar = load_model(o->ar, "--ar");
    const auto corpus = corpus::read_corpus(o->corpus);
    std::vector<std::vector<int>> targets;
    for (const auto& rec : corpus.utterances) {
      if (o->count > 0 && static_cast<int>(targets.size()) >= o->count) break;
      targets.push_back(rec.phonemes);
    }
    bench::RobustnessOptions opts;
    opts.top_p_grid = parse_double_list(o->top_p);
    opts.mode = decode::advance_mode_from_string(o->mode);
    opts.expected_steps_per_phoneme = o->steps_per_phoneme;
    opts.seed = ctx.seed;
    const auto report = bench::robustness_sweep(ar, targets, opts);
    write_text(ctx.out_dir / "bench_robust.json", report.to_json() + "\n");
    write_text(ctx.out_dir / "bench_robust.csv", report.to_csv());
    if (o->plot) {
      std::vector<svg::Series> series;
      for (auto d : opts.decoders) {
        svg::Series s{bench::to_string(d), {}, {}};
        for (double p : opts.top_p_grid) {
          s.x.push_back(p);
          s.y.push_back(report.find(d, p)->error_proxy);
        }
        series.push_back(std::move(s));
      }
      write_text(ctx.out_dir / "bench_robust.svg",
                 svg::line_chart("phoneme error vs top_p", "top_p", "error proxy", series));
    }
    ctx.out << report.to_table();
  };
  return c;
}

Command add_check_path(CLI::App& root) {
  auto file = std::make_shared<std::string>();
  auto length = std::make_shared<int>(0);
  Command c;
  c.app = root.add_subcommand("check-path", "Check locality, monotonicity and completeness of a path");
  c.app->add_option("path", *file, "File holding phoneme positions (JSON array or whitespace list)")
      ->required();
  c.app->add_option("--length", *length, "Number of target phonemes L")->required();
  c.run = [file, length](Context& ctx) {
    std::ifstream f(*file);
    if (!f) throw Error(ErrorKind::Io, "cannot read path file '" + *file + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    decode::AlignmentPath path{parse_int_list(ss.str())};
    const auto p = decode::check_ma_properties(path, *length);
    ctx.out << std::boolalpha << "locality: " << p.locality << "\nmonotonicity: " << p.monotonicity
            << "\ncompleteness: " << p.completeness << '\n';
  };
  return c;
}

Command add_dump_attn(CLI::App& root) {
  auto o = std::make_shared<DecodeOpts>();
  auto svg_flag = std::make_shared<bool>(false);
  Command c;
  c.app = root.add_subcommand("dump-attn", "Dump first-block attention over the text prompt");
  add_decode_options(c.app, *o, true);
  c.app->add_flag("--svg", *svg_flag, "Also write an SVG heatmap");
  c.needs_seed = true;
  c.run = [o, svg_flag](Context& ctx) {
    const auto ar = load_model(o->ar, "--ar");
    const auto setup = load_decode_inputs(*o, false);
    decode::DecodeSession session(decode_targets(*o, setup), ctx.seed);
    configure_session(session, *o, setup);
    session.capture_attention = true;
    const auto r = decode::ma_decode(ar, session);
    std::ostringstream csv;
    for (const auto& row : r.attention) {
      for (std::size_t i = 0; i < row.size(); ++i) csv << (i ? "," : "") << row[i];
      csv << '\n';
    }
    write_text(ctx.out_dir / "attention.csv", csv.str());
    std::ostringstream path_csv;
    path_csv << "step,pointer\n";
    for (std::size_t s = 0; s < r.path.positions.size(); ++s) {
      path_csv << s << ',' << r.path.positions[s] << '\n';
    }
    write_text(ctx.out_dir / "attention_path.csv", path_csv.str());
    write_text(ctx.out_dir / "attention_audit.jsonl", decode::audit_jsonl(r));
    const auto cols = session.text_prompt().size();
    json meta = {{"version", 1},
                 {"rows", r.attention.size()},
                 {"cols", cols},
                 {"truncated", r.status == decode::DecodeStatus::Truncated},
                 {"prompt_phonemes", session.prompt_phonemes.size()},
                 {"target_phonemes", session.target_phonemes.size()}};
    write_text(ctx.out_dir / "attention.json", meta.dump(2) + "\n");
    if (*svg_flag) {
      // Pointer column within the text prompt for the overlay.
      std::vector<int> overlay;
      for (int p : r.path.positions) {
        overlay.push_back(static_cast<int>(session.prompt_phonemes.size()) + p);
      }
      write_text(ctx.out_dir / "attention.svg",
                 svg::heatmap("first-block attention (rows: steps, cols: text prompt)", r.attention,
                              overlay));
    }
    ctx.out << "attention " << r.attention.size() << " x " << cols << ", status "
            << decode::to_string(r.status) << '\n';
  };
  return c;
}

std::uint64_t resolve_seed(const Command& cmd, std::uint64_t flag_value) {
  if (cmd.seed_opt->count() > 0) return flag_value;
  if (const char* env = std::getenv("VALLER_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("VALLER_SEED='") + env + "' is not an unsigned integer");
  }
  if (cmd.needs_seed) throw UsageError("a seed is required: pass --seed or set VALLER_SEED");
  return 0;
}

std::vector<std::string> option_names(const CLI::App* app) {
  std::vector<std::string> names;
  for (const auto* opt : app->get_options()) {
    for (const auto& l : opt->get_lnames()) names.push_back("--" + l);
  }
  return names;
}

}  // namespace

std::string suggest(const std::string& word, const std::vector<std::string>& candidates) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (const auto& c : candidates) {
    const auto d = levenshtein(word, c);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  const std::size_t limit = std::max<std::size_t>(2, word.size() / 3);
  return best_d <= limit ? best : std::string();
}

int cmd_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app("valler: merged-codec language model toolkit", "valler");
  app.require_subcommand(1);
  app.allow_extras();
  app.set_version_flag("--version", "valler 0.1.0");
  app.option_defaults()->always_capture_default();

  std::string out_dir = ".";
  std::uint64_t seed = 0;
  std::string config_path;
  std::vector<Command> commands;
  commands.push_back(add_gen_corpus(app));
  commands.push_back(add_train_codec(app));
  commands.push_back(add_train_lm(app, lm::ModelKind::AR));
  commands.push_back(add_train_lm(app, lm::ModelKind::NAR));
  commands.push_back(add_synth(app));
  commands.push_back(add_prosody(app));
  commands.push_back(add_bench_steps(app));
  commands.push_back(add_bench_time(app));
  commands.push_back(add_bench_merge(app));
  commands.push_back(add_bench_robust(app));
  commands.push_back(add_check_path(app));
  commands.push_back(add_dump_attn(app));
  for (auto& c : commands) {
    c.app->allow_extras();
    c.app->add_option("--out", out_dir, "Output directory")->capture_default_str();
    c.seed_opt = c.app->add_option("--seed", seed, "Seed (falls back to VALLER_SEED)");
    c.app->add_option("--config", config_path, "JSON config file (flags take precedence)");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();  // program name
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForVersion& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (!app.remaining().empty()) {
      std::vector<std::string> names;
      for (const auto& c : commands) names.push_back(c.app->get_name());
      const auto word = app.remaining().front();
      err << "error: unknown command '" << word << "'";
      if (const auto s = suggest(word, names); !s.empty()) err << "; did you mean '" << s << "'?";
      err << "\nrun 'valler --help' for the list of commands\n";
      return kExitUsage;
    }
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  const Command* cmd = nullptr;
  for (const auto& c : commands) {
    if (c.app->parsed()) cmd = &c;
  }
  if (!app.remaining().empty() && (!cmd || cmd->app->remaining().empty())) {
    err << "error: unexpected argument '" << app.remaining().front() << "'\n";
    return kExitUsage;
  }
  if (!cmd->app->remaining().empty()) {
    const auto word = cmd->app->remaining().front();
    err << "error: unknown option '" << word << "' for " << cmd->app->get_name();
    if (const auto s = suggest(word, option_names(cmd->app)); !s.empty()) {
      err << "; did you mean '" << s << "'?";
    }
    err << '\n';
    return kExitUsage;
  }

  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto log = std::make_shared<spdlog::logger>("valler", sink);
  log->set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");

  try {
    if (!config_path.empty()) apply_config_file(cmd->app, config_path);
    Context ctx{out, log, fs::path(out_dir), 0};
    ctx.seed = resolve_seed(*cmd, seed);
    auto resolved = resolved_config(cmd->app);
    resolved["seed"] = ctx.seed;
    json record = {{"version", 1},
                   {"command", cmd->app->get_name()},
                   {"config", resolved},
                   {"config_hash", hex(fnv1a(resolved.dump()))}};
    log->info("{} config: {}", cmd->app->get_name(), resolved.dump());
    fs::create_directories(ctx.out_dir);
    write_text(ctx.out_dir / (cmd->app->get_name() + ".config.json"), record.dump(2) + "\n");
    cmd->run(ctx);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    log->error("{}", e.what());
    log->flush();
    return kExitRuntime;
  }
  log->flush();
  return kExitOk;
}

int cmd_dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return cmd_dispatch(args, std::cout, std::cerr);
}

}  // namespace valler::cli
