#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "w2e/audio.hpp"
#include "w2e/ner.hpp"
#include "w2e/rng.hpp"

namespace w2e {

// One synthetic utterance: transcript, token-aligned gold entities, and the
// relative path of its rendered audio (set once emitted).
struct Utterance {
  std::string id;
  std::string text;
  std::vector<Entity> entities;
  std::string audio_path;
};

// Sentence templates with typed slots and fixed slot inventories, shipped as
// data/templates.json.
struct TemplateSet {
  std::vector<std::string> templates;
  std::map<std::string, std::vector<std::string>> slots;

  static TemplateSet parse(const std::string& json_text);     // BadConfig
  static TemplateSet load(const std::string& path);           // IoError
  static const TemplateSet& builtin();                        // compiled-in copy

  void validate() const;  // EmptyTemplateSet, BadConfig
};

// Deterministic template expansion: uniform template and slot choices from a
// per-utterance derived seed; gold entities computed from slot token spans.
// Errors: EmptyTemplateSet.
std::vector<Utterance> gen_text_corpus(const TemplateSet& templates, int n,
                                       std::uint64_t seed);

// Tone speech: 60 ms sine at 220 * 2^(idx(c)/12) Hz (amplitude 0.5) plus
// 10 ms silence per character; space is 70 ms of silence; optional seeded
// Gaussian noise. Errors: VocabViolation.
Waveform synth_speech(const std::string& text, int rate = 16000,
                      double noise_std = 0.0, Rng* noise_rng = nullptr);

// Frequency assigned to a vocabulary character.
double synth_char_freq(char c);

struct EmitOptions {
  int sample_rate = 16000;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
};

// Writes WAV files under <out_dir>/wavs plus <out_dir>/manifest.jsonl with
// one record {"id","audio","text","entities":[{"type","start","end"}]} per
// line. Returns the manifest path. Errors: IoError.
std::string emit_manifest(std::vector<Utterance>& utterances, const std::string& out_dir,
                          const EmitOptions& opts);

// Reads a manifest back; entity surface text is reconstructed from the
// transcript tokens. Errors: IoError, EmptyManifest on parse problems.
std::vector<Utterance> read_manifest(const std::string& manifest_path);

// Token/BIO-tag view of labeled utterances, one JSONL record
// {"tokens": [...], "tags": [...]} per line.
void write_ner_jsonl(const std::vector<Utterance>& utterances, const std::string& path);
std::vector<LabeledTokens> read_labeled_jsonl(const std::string& path);

// Gold label view of one utterance (shape-mapped tokens + BIO tags).
LabeledTokens utterance_labels(const Utterance& utt);

}  // namespace w2e
