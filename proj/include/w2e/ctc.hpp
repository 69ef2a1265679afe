#pragma once

#include <string>
#include <vector>

#include "w2e/encoder.hpp"
#include "w2e/tensor.hpp"

namespace w2e {

// Character inventory for CTC: lowercase a-z, digits, space; blank at id 0.
struct CtcVocab {
  static const CtcVocab& default_vocab();

  std::string chars = "abcdefghijklmnopqrstuvwxyz0123456789 ";
  static constexpr int blank_id = 0;

  int size() const { return static_cast<int>(chars.size()) + 1; }  // +blank
  int id_of(char c) const;   // -1 when absent
  char char_of(int id) const;

  // Errors: VocabViolation on characters outside the inventory.
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;
};

// Linear projection of context frames to per-frame log-probabilities
// [T, |V|+1]; each row log-sums to zero.
TensorPtr project_logits(const TensorPtr& context, const LinearParams& head);

// Negative log marginal over all alignments collapsing to `target`, by the
// forward algorithm over the blank-interleaved sequence, in the log domain.
// Gradients flow to log_probs via alpha-beta occupancies.
// Errors: TargetTooLong when no alignment fits in T frames.
TensorPtr ctc_nll(const TensorPtr& log_probs, const std::vector<int>& target);

// Per-frame argmax -> collapse adjacent repeats -> drop blanks. Ties break
// toward the lower id.
std::string greedy_decode(const Tensor& log_probs, const CtcVocab& vocab);

// Prefix beam search tracking blank/non-blank ending probabilities per
// prefix. width=1 need not equal greedy. Returns the most probable prefix.
std::string beam_decode(const Tensor& log_probs, const CtcVocab& vocab, int width = 8);

struct FinetuneOptions {
  int steps = 1500;
  int batch_size = 1;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  int log_every = 50;
  bool cache_features = true;  // conv stack is frozen, so Z can be reused
};

// Supervised fine-tuning: freezes the feature-encoder convolutions, attaches
// a CTC head when absent, and trains the context network plus head with
// ctc_nll under Adam. Returns the per-step loss history.
// Errors: VocabViolation for transcripts outside CtcVocab; EmptyManifest.
std::vector<double> finetune(AcousticModel& model, const std::vector<Waveform>& audio,
                             const std::vector<std::string>& transcripts,
                             const FinetuneOptions& opts);

// Levenshtein distance with unit costs.
int edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b);
int edit_distance(const std::string& a, const std::string& b);

struct ErrorRates {
  double wer = 0.0;
  double cer = 0.0;
};

// Corpus-level rates: summed distances over summed reference lengths.
// Errors: LengthMismatch when the lists are not aligned.
ErrorRates edit_distance_rates(const std::vector<std::string>& refs,
                               const std::vector<std::string>& hyps);

}  // namespace w2e
