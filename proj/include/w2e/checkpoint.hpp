#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace w2e {

enum class ModelKind : std::uint32_t { acoustic = 1, acoustic_ctc = 2, ner = 3 };

const char* model_kind_name(ModelKind kind);

struct NamedTensor {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;
};

// Container format, little-endian throughout:
//   magic "W2EC" | u32 version | u32 kind | u32 count |
//   per tensor: u32 name_len, name, u32 rank, u32 dims[rank], f32 data |
//   trailing u32 CRC-32 of everything before it.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelKind kind = ModelKind::acoustic;
  std::vector<NamedTensor> tensors;

  std::vector<std::uint8_t> serialize() const;
  // Errors: BadCheckpoint on magic/version/CRC/truncation problems.
  static Checkpoint parse(const std::vector<std::uint8_t>& bytes);

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  // Errors: IncompatibleCheckpoint when the name is missing.
  const NamedTensor& find(const std::string& name) const;
  bool has(const std::string& name) const;
  void add(const std::string& name, std::vector<int> dims, std::vector<float> data);
};

}  // namespace w2e
