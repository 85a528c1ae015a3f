#include "valler/codec.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "valler/binary_io.hpp"
#include "valler/common.hpp"

namespace valler::codec {

namespace {

constexpr std::uint16_t kCodebookVersion = 1;
constexpr std::uint16_t kCodeVersion = 1;

double squared_distance(const float* a, const float* b, Eigen::Index n) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

}  // namespace

MergeConfig MergeConfig::layers(int first, int last, int m) {
  if (first < 1 || last > kNumLayers || first > last) {
    throw std::invalid_argument("merge layer range must lie within [1, 8]");
  }
  MergeConfig c;
  for (int d = first; d <= last; ++d) c.rates[static_cast<std::size_t>(d - 1)] = m;
  c.validate();
  return c;
}

int MergeConfig::period() const {
  int p = 1;
  for (int r : rates) p = std::lcm(p, r);
  return p;
}

void MergeConfig::validate() const {
  for (int r : rates) {
    if (r < 1 || r > 255) throw std::invalid_argument("merge rates must lie in [1, 255]");
  }
}

std::string MergeConfig::label() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < rates.size(); ++i) os << (i ? "," : "") << rates[i];
  return os.str();
}

MergeConfig parse_merge_config(const std::string& text) {
  MergeConfig c;
  std::istringstream is(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(is, item, ',')) {
    if (i >= c.rates.size()) throw std::invalid_argument("merge config has more than 8 rates");
    try {
      c.rates[i++] = std::stoi(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad merge rate '" + item + "'");
    }
  }
  if (i != c.rates.size()) throw std::invalid_argument("merge config needs exactly 8 rates");
  c.validate();
  return c;
}

Codebook::Codebook(int layer_index, FrameMatrix e)
    : layer(layer_index), entries(std::move(e)), usage(static_cast<std::size_t>(entries.rows()), 0) {
  if (entries.rows() < 2) throw std::invalid_argument("codebook needs K >= 2 entries");
  if (!entries.allFinite()) throw std::invalid_argument("codebook entries must be finite");
}

CodeMatrix::CodeMatrix(int layers, std::size_t length, MergeConfig m)
    : codes(static_cast<std::size_t>(layers), std::vector<std::uint16_t>(length, 0)), merge(m) {}

bool CodeMatrix::block_constant() const {
  for (int d = 0; d < layers(); ++d) {
    const auto m = static_cast<std::size_t>(merge.rate(d));
    if (m == 1) continue;
    const auto& row = codes[static_cast<std::size_t>(d)];
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (row[t] != row[t - t % m]) return false;
    }
  }
  return true;
}

std::uint64_t CodebookSet::config_hash() const {
  io::ByteWriter w;
  w.u8(static_cast<std::uint8_t>(books.size()));
  for (const auto& b : books) {
    w.f32s(std::span<const float>(b.entries.data(), static_cast<std::size_t>(b.entries.size())));
  }
  for (int r : merge.rates) w.u8(static_cast<std::uint8_t>(r));
  const auto& bytes = w.bytes();
  return fnv1a(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

LatentSeq merge_residual(const LatentSeq& r, int m) {
  if (m < 1) throw std::invalid_argument("merge rate must be >= 1");
  if (m == 1) return r;
  const auto length = static_cast<Eigen::Index>(r.length());
  if (length % m != 0) {
    throw std::invalid_argument("sequence length " + std::to_string(length) +
                                " is not a multiple of merge rate " + std::to_string(m));
  }
  LatentSeq out(r.length(), r.dim());
  for (Eigen::Index b = 0; b < length; b += m) {
    const Eigen::RowVectorXf mean = r.frames.middleRows(b, m).colwise().mean();
    out.frames.middleRows(b, m).rowwise() = mean;
  }
  return out;
}

LatentSeq pad_to_multiple(const LatentSeq& z, int m) {
  if (m < 1) throw std::invalid_argument("pad multiple must be >= 1");
  if (z.length() == 0) throw std::invalid_argument("cannot pad an empty sequence");
  const auto rem = z.length() % static_cast<std::size_t>(m);
  if (rem == 0) return z;
  const auto padded = z.length() + static_cast<std::size_t>(m) - rem;
  LatentSeq out(padded, z.dim());
  out.frames.topRows(z.frames.rows()) = z.frames;
  for (auto t = static_cast<Eigen::Index>(z.length()); t < static_cast<Eigen::Index>(padded); ++t) {
    out.frames.row(t) = z.frames.row(z.frames.rows() - 1);
  }
  return out;
}

LayerQuantization quantize_layer(const LatentSeq& r, const Codebook& book) {
  if (static_cast<int>(r.dim()) != book.dim()) {
    throw std::invalid_argument("residual dim " + std::to_string(r.dim()) +
                                " does not match codebook dim " + std::to_string(book.dim()));
  }
  LayerQuantization out;
  out.indices.resize(r.length());
  out.quantized = LatentSeq(r.length(), r.dim());
  const auto dim = static_cast<Eigen::Index>(r.dim());
  for (std::size_t t = 0; t < r.length(); ++t) {
    const float* x = r.frames.row(static_cast<Eigen::Index>(t)).data();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < book.size(); ++k) {
      const double d = squared_distance(x, book.entries.row(k).data(), dim);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out.indices[t] = best;
    out.quantized.frames.row(static_cast<Eigen::Index>(t)) = book.entries.row(best);
  }
  return out;
}

double EncodeTrace::total(std::size_t stage) const {
  const auto& e = frame_energy.at(stage);
  return std::accumulate(e.begin(), e.end(), 0.0);
}

namespace {

std::vector<double> frame_energies(const LatentSeq& r) {
  std::vector<double> e(r.length());
  for (std::size_t t = 0; t < r.length(); ++t) {
    e[t] = r.frames.row(static_cast<Eigen::Index>(t)).cast<double>().squaredNorm();
  }
  return e;
}

}  // namespace

CodeMatrix encode(const LatentSeq& z, const CodebookSet& books, EncodeTrace* trace) {
  if (z.length() == 0) throw std::invalid_argument("cannot encode an empty sequence");
  if (!z.all_finite()) throw std::invalid_argument("latent sequence contains non-finite values");
  if (books.layers() < 1 || books.layers() > kNumLayers) {
    throw std::invalid_argument("codebook set must have 1..8 layers");
  }
  books.merge.validate();

  LatentSeq r = pad_to_multiple(z, books.merge.period());
  CodeMatrix out(books.layers(), z.length(), books.merge);
  if (trace) {
    trace->frame_energy.clear();
    trace->frame_energy.push_back(frame_energies(r));
  }
  for (int d = 0; d < books.layers(); ++d) {
    const auto merged = merge_residual(r, books.merge.rate(d));
    const auto q = quantize_layer(merged, books.books[static_cast<std::size_t>(d)]);
    auto& row = out.codes[static_cast<std::size_t>(d)];
    for (std::size_t t = 0; t < z.length(); ++t) row[t] = static_cast<std::uint16_t>(q.indices[t]);
    r.frames -= q.quantized.frames;
    if (trace) trace->frame_energy.push_back(frame_energies(r));
  }
  return out;
}

LatentSeq decode(const CodeMatrix& c, const CodebookSet& books) {
  if (c.layers() != books.layers()) {
    throw Error(ErrorKind::CorruptCode, "code matrix has " + std::to_string(c.layers()) +
                                            " layers but codebook set has " +
                                            std::to_string(books.layers()));
  }
  LatentSeq out(c.length(), static_cast<std::size_t>(books.dim()));
  for (int d = 0; d < c.layers(); ++d) {
    const auto& book = books.books[static_cast<std::size_t>(d)];
    for (std::size_t t = 0; t < c.length(); ++t) {
      const int idx = c.at(d, t);
      if (idx >= book.size()) {
        throw Error(ErrorKind::CorruptCode, "code " + std::to_string(idx) + " at layer " +
                                                std::to_string(d + 1) + ", frame " +
                                                std::to_string(t) + " exceeds codebook size " +
                                                std::to_string(book.size()));
      }
      out.frames.row(static_cast<Eigen::Index>(t)) += book.entries.row(idx);
    }
  }
  return out;
}

double reconstruction_snr(const LatentSeq& z, const LatentSeq& zhat) {
  if (z.length() != zhat.length() || z.dim() != zhat.dim()) {
    throw std::invalid_argument("SNR needs sequences of equal shape");
  }
  const double signal = z.frames.cast<double>().squaredNorm();
  if (signal == 0.0) throw Error(ErrorKind::UndefinedMetric, "SNR undefined for zero-energy signal");
  const double noise = (z.frames.cast<double>() - zhat.frames.cast<double>()).squaredNorm();
  if (noise == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / noise);
}

void save_codebooks(const CodebookSet& set, const std::filesystem::path& path) {
  if (set.books.empty()) throw std::invalid_argument("no codebooks to save");
  io::ByteWriter w;
  w.magic("MRVQ");
  w.u16(kCodebookVersion);
  w.u8(static_cast<std::uint8_t>(set.layers()));
  w.u16(static_cast<std::uint16_t>(set.size()));
  w.u16(static_cast<std::uint16_t>(set.dim()));
  for (const auto& b : set.books) {
    w.f32s(std::span<const float>(b.entries.data(), static_cast<std::size_t>(b.entries.size())));
  }
  for (int r : set.merge.rates) w.u8(static_cast<std::uint8_t>(r));
  w.magic("HASH");
  w.u64(set.config_hash());
  io::write_file(path, w.bytes());
}

CodebookSet load_codebooks(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  r.expect_magic("MRVQ");
  if (const auto v = r.u16(); v != kCodebookVersion) {
    r.fail("unsupported codebook version " + std::to_string(v));
  }
  const int layers = r.u8();
  const int k = r.u16();
  const int dim = r.u16();
  if (layers < 1 || layers > kNumLayers || k < 2 || dim < 1) r.fail("invalid codebook header");
  CodebookSet set;
  for (int d = 0; d < layers; ++d) {
    FrameMatrix e(k, dim);
    r.f32s(std::span<float>(e.data(), static_cast<std::size_t>(e.size())));
    set.books.emplace_back(d, std::move(e));
  }
  for (auto& rate : set.merge.rates) rate = r.u8();
  set.merge.validate();
  if (r.peek_magic("HASH")) {
    r.expect_magic("HASH");
    if (r.u64() != set.config_hash()) r.fail("codebook file hash mismatch (corrupted file)");
  }
  return set;
}

std::vector<std::uint8_t> serialize_codes(const CodeMatrix& c, const CodeFileExtras& extras) {
  if (c.layers() != kNumLayers) {
    throw std::invalid_argument("code files hold exactly 8 layers");
  }
  io::ByteWriter w;
  w.magic("CODE");
  w.u16(kCodeVersion);
  w.u32(static_cast<std::uint32_t>(c.length()));
  for (const auto& row : c.codes) {
    for (auto v : row) w.u16(v);
  }
  w.magic("MERG");
  for (int r : c.merge.rates) w.u8(static_cast<std::uint8_t>(r));
  if (extras.path) {
    w.magic("PATH");
    w.u32(static_cast<std::uint32_t>(extras.path->size()));
    for (auto p : *extras.path) w.u32(p);
  }
  if (extras.config_hash) {
    w.magic("HASH");
    w.u64(*extras.config_hash);
  }
  return w.bytes();
}

CodeMatrix deserialize_codes(std::span<const std::uint8_t> bytes, CodeFileExtras* extras) {
  io::ByteReader r(bytes, ErrorKind::CorruptCode);
  r.expect_magic("CODE");
  if (const auto v = r.u16(); v != kCodeVersion) r.fail("unsupported code file version");
  const auto length = r.u32();
  CodeMatrix c(kNumLayers, length, MergeConfig::none());
  for (auto& row : c.codes) {
    for (auto& v : row) v = r.u16();
  }
  CodeFileExtras local;
  while (!r.at_end()) {
    if (r.peek_magic("MERG")) {
      r.expect_magic("MERG");
      for (auto& rate : c.merge.rates) rate = r.u8();
    } else if (r.peek_magic("PATH")) {
      r.expect_magic("PATH");
      std::vector<std::uint32_t> path(r.u32());
      for (auto& p : path) p = r.u32();
      local.path = std::move(path);
    } else if (r.peek_magic("HASH")) {
      r.expect_magic("HASH");
      local.config_hash = r.u64();
    } else {
      r.fail("unknown section in code file at offset " + std::to_string(r.position()));
    }
  }
  if (extras) *extras = std::move(local);
  return c;
}

void save_codes(const CodeMatrix& c, const std::filesystem::path& path,
                const CodeFileExtras& extras) {
  io::write_file(path, serialize_codes(c, extras));
}

CodeMatrix load_codes(const std::filesystem::path& path, CodeFileExtras* extras) {
  return deserialize_codes(io::read_file(path), extras);
}

}  // namespace valler::codec
