#include "w2e/checkpoint.hpp"

#include <cstring>
#include <zlib.h>

#include "w2e/error.hpp"
#include "w2e/io_util.hpp"
#include "w2e/tensor.hpp"

namespace w2e {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t at = 0;

  void need(std::size_t n) const {
    if (at + n > bytes.size()) fail(Errc::bad_checkpoint, "truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = static_cast<std::uint32_t>(bytes[at]) |
                      static_cast<std::uint32_t>(bytes[at + 1]) << 8 |
                      static_cast<std::uint32_t>(bytes[at + 2]) << 16 |
                      static_cast<std::uint32_t>(bytes[at + 3]) << 24;
    at += 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + at), n);
    at += n;
    return s;
  }
};

}  // namespace

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::acoustic: return "acoustic";
    case ModelKind::acoustic_ctc: return "acoustic+ctc";
    case ModelKind::ner: return "ner";
  }
  return "unknown";
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), {'W', '2', 'E', 'C'});
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(kind));
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (int d : t.dims) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.data) put_f32(out, f);
  }
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size())));
  put_u32(out, crc);
  return out;
}

Checkpoint Checkpoint::parse(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 20) fail(Errc::bad_checkpoint, "file too small");
  if (std::memcmp(bytes.data(), "W2EC", 4) != 0) fail(Errc::bad_checkpoint, "bad magic");

  const std::size_t payload_len = bytes.size() - 4;
  const auto expect_crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(payload_len)));
  std::uint32_t stored_crc = static_cast<std::uint32_t>(bytes[payload_len]) |
                             static_cast<std::uint32_t>(bytes[payload_len + 1]) << 8 |
                             static_cast<std::uint32_t>(bytes[payload_len + 2]) << 16 |
                             static_cast<std::uint32_t>(bytes[payload_len + 3]) << 24;
  if (expect_crc != stored_crc) fail(Errc::bad_checkpoint, "CRC mismatch");

  Reader r{bytes, 4};
  Checkpoint ck;
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    fail(Errc::bad_checkpoint, "unsupported version " + std::to_string(version));
  }
  const std::uint32_t kind = r.u32();
  if (kind < 1 || kind > 3) fail(Errc::bad_checkpoint, "unknown model kind tag");
  ck.kind = static_cast<ModelKind>(kind);

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096) fail(Errc::bad_checkpoint, "implausible tensor name length");
    t.name = r.str(name_len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) fail(Errc::bad_checkpoint, "implausible tensor rank");
    std::int64_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim > (1u << 28)) fail(Errc::bad_checkpoint, "implausible dimension");
      t.dims.push_back(static_cast<int>(dim));
      numel *= dim;
    }
    r.need(static_cast<std::size_t>(numel) * 4);
    t.data.reserve(static_cast<std::size_t>(numel));
    for (std::int64_t j = 0; j < numel; ++j) t.data.push_back(r.f32());
    ck.tensors.push_back(std::move(t));
  }
  if (r.at != payload_len) fail(Errc::bad_checkpoint, "trailing bytes in payload");
  return ck;
}

void Checkpoint::save(const std::string& path) const {
  write_file_bytes(path, serialize());
}

Checkpoint Checkpoint::load(const std::string& path) {
  return parse(read_file_bytes(path));
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

const NamedTensor& Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  fail(Errc::incompatible_checkpoint, "missing tensor '" + name + "'");
}

void Checkpoint::add(const std::string& name, std::vector<int> dims,
                     std::vector<float> data) {
  std::int64_t numel = 1;
  for (int d : dims) numel *= d;
  if (numel != static_cast<std::int64_t>(data.size())) {
    fail(Errc::shape_mismatch, "checkpoint tensor '" + name + "' dims/data mismatch");
  }
  tensors.push_back({name, std::move(dims), std::move(data)});
}

}  // namespace w2e
