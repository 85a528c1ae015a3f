#include <vector>

#include "valler/binary_io.hpp"
#include "valler/lm.hpp"

namespace valler::lm {

namespace {

constexpr std::uint16_t kWeightsVersion = 1;

}  // namespace

std::vector<std::uint8_t> serialize_weights(const LMWeights& w) {
  const auto& c = w.config();
  io::ByteWriter out;
  out.magic("VRLM");
  out.u16(kWeightsVersion);
  out.u8(static_cast<std::uint8_t>(w.kind()));
  out.u32(static_cast<std::uint32_t>(c.layers));
  out.u32(static_cast<std::uint32_t>(c.heads));
  out.u32(static_cast<std::uint32_t>(c.dim));
  out.u32(static_cast<std::uint32_t>(c.ffn));
  out.u32(static_cast<std::uint32_t>(c.max_seq_len));
  out.u32(static_cast<std::uint32_t>(c.acoustic_vocab));
  out.u32(static_cast<std::uint32_t>(c.phoneme_vocab));
  out.u32(static_cast<std::uint32_t>(c.code_layers));
  out.f32(static_cast<float>(c.dropout));
  out.u64(c.hash(w.kind()));
  out.u64(w.codec_hash);

  out.u32(static_cast<std::uint32_t>(w.params().size()));
  std::uint64_t offset = 0;
  for (const auto& p : w.params()) {
    out.str(p.name);
    out.u32(static_cast<std::uint32_t>(p.value.rows()));
    out.u32(static_cast<std::uint32_t>(p.value.cols()));
    out.u64(offset);
    offset += static_cast<std::uint64_t>(p.value.size()) * sizeof(float);
  }
  for (const auto& p : w.params()) {
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f =
        p.value.cast<float>();
    out.f32s(std::span<const float>(f.data(), static_cast<std::size_t>(f.size())));
  }
  return out.bytes();
}

LMWeights deserialize_weights(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes, ErrorKind::Load);
  in.expect_magic("VRLM");
  if (const auto v = in.u16(); v != kWeightsVersion) {
    in.fail("unsupported weights version " + std::to_string(v));
  }
  const auto kind_byte = in.u8();
  if (kind_byte != static_cast<std::uint8_t>(ModelKind::AR) &&
      kind_byte != static_cast<std::uint8_t>(ModelKind::NAR)) {
    in.fail("unknown model kind byte " + std::to_string(kind_byte));
  }
  const auto kind = static_cast<ModelKind>(kind_byte);
  LMConfig c;
  c.layers = static_cast<int>(in.u32());
  c.heads = static_cast<int>(in.u32());
  c.dim = static_cast<int>(in.u32());
  c.ffn = static_cast<int>(in.u32());
  c.max_seq_len = static_cast<int>(in.u32());
  c.acoustic_vocab = static_cast<int>(in.u32());
  c.phoneme_vocab = static_cast<int>(in.u32());
  c.code_layers = static_cast<int>(in.u32());
  c.dropout = in.f32();
  const auto config_hash = in.u64();
  const auto codec_hash = in.u64();
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    in.fail(std::string("invalid LM config in weights file: ") + e.what());
  }
  if (config_hash != c.hash(kind)) in.fail("weights config hash mismatch (corrupted header)");

  LMWeights w(kind, c, 0);
  w.codec_hash = codec_hash;

  struct Entry {
    int index;
    std::uint64_t offset;
    std::size_t count;
  };
  const auto count = in.u32();
  if (count != w.params().size()) {
    in.fail("weights manifest lists " + std::to_string(count) + " tensors, expected " +
            std::to_string(w.params().size()));
  }
  std::vector<Entry> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = in.str();
    const auto rows = in.u32();
    const auto cols = in.u32();
    const auto offset = in.u64();
    const int idx = w.find(name);
    if (idx < 0) in.fail("unknown tensor '" + name + "' in weights manifest");
    const auto& p = w.param(idx);
    if (p.value.rows() != static_cast<Eigen::Index>(rows) ||
        p.value.cols() != static_cast<Eigen::Index>(cols)) {
      in.fail("tensor '" + name + "' has unexpected shape");
    }
    manifest.push_back({idx, offset, static_cast<std::size_t>(rows) * cols});
  }
  const auto blob_start = in.position();
  const auto blob = bytes.subspan(blob_start);
  for (const auto& e : manifest) {
    if (e.offset + e.count * sizeof(float) > blob.size()) in.fail("tensor blob out of bounds");
    io::ByteReader sub(blob.subspan(static_cast<std::size_t>(e.offset)), ErrorKind::Load);
    std::vector<float> values(e.count);
    sub.f32s(values);
    auto& p = w.param(e.index);
    for (std::size_t i = 0; i < e.count; ++i) p.value.data()[i] = values[i];
  }
  if (!w.all_finite()) in.fail("weights contain non-finite values");
  return w;
}

void save_weights(const LMWeights& w, const std::filesystem::path& path) {
  io::write_file(path, serialize_weights(w));
}

LMWeights load_weights(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorKind::Io, "weights file '" + path.string() + "' does not exist");
  }
  return deserialize_weights(io::read_file(path));
}

}  // namespace valler::lm
