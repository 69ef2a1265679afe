#pragma once

#include <cstdint>
#include <string>

#include "w2e/encoder.hpp"
#include "w2e/ner.hpp"

namespace w2e {

struct TrainBudget {
  int steps = 0;
  int batch = 1;
  float lr = 1e-3f;
  int log_every = 20;
};

// Whole-pipeline configuration, mirrored by a JSON document. Unknown keys
// are rejected; defaults are printable via `w2e config --dump-defaults`.
struct PipelineConfig {
  std::uint64_t seed = 1234;
  EncoderConfig acoustic;
  NerConfig ner;
  TrainBudget pretrain_asr{200, 2, 3e-3f, 10};
  TrainBudget finetune_asr{1500, 1, 1e-3f, 50};
  TrainBudget pretrain_ner{200, 8, 1e-3f, 20};
  TrainBudget train_ner{600, 8, 3e-3f, 20};
  double synth_noise_std = 0.01;
  int sample_rate = 16000;
  std::string templates_path;  // empty = builtin inventory

  // Errors: BadConfig on unknown keys, wrong types, or bad values.
  static PipelineConfig from_json_text(const std::string& text);
  static PipelineConfig load(const std::string& path);
  std::string dump() const;  // pretty JSON with every field
};

}  // namespace w2e
