#pragma once

#include <string>
#include <vector>

#include "w2e/checkpoint.hpp"
#include "w2e/config.hpp"
#include "w2e/corpus.hpp"
#include "w2e/ctc.hpp"
#include "w2e/encoder.hpp"
#include "w2e/ner.hpp"

namespace w2e {

// ---- checkpoint glue ----

Checkpoint acoustic_to_checkpoint(const AcousticModel& model);
// Errors: IncompatibleCheckpoint on kind or dimension mismatch.
AcousticModel acoustic_from_checkpoint(const Checkpoint& ck);

Checkpoint ner_to_checkpoint(const NerModel& model);
NerModel ner_from_checkpoint(const Checkpoint& ck);

// ---- corpus loading ----

struct LoadedCorpus {
  std::vector<Utterance> utterances;
  std::vector<Waveform> audio;  // aligned with utterances, resampled to 16 kHz
};

// Reads a manifest and its WAV files (paths relative to the manifest).
LoadedCorpus load_corpus(const std::string& manifest_path);

// Labeled token/tag view for NER training; accepts either the manifest
// schema or {"tokens","tags"} JSONL, sniffed per file.
std::vector<LabeledTokens> load_labeled_corpus(const std::string& path);

// ---- end-to-end extraction ----

struct ResultEntity {
  std::string type;
  std::string text;
  int start_token = 0;
  int end_token = 0;
};

struct ExtractionResult {
  std::string transcript;
  std::vector<ResultEntity> entities;
};

// parse -> resample -> standardize -> encoder -> context -> logits ->
// decode -> tokenize -> viterbi -> entities. beam_width <= 1 decodes greedily.
ExtractionResult run_extraction(const Waveform& audio, const AcousticModel& acoustic,
                                const NerModel& ner, int beam_width = 0);

std::string extraction_to_json(const ExtractionResult& result);

// ---- evaluation ----

struct EvalRow {
  std::string id;
  std::string ref;
  std::string hyp;
  double cer = 0.0;
};

struct EvalMetrics {
  double wer = 0.0;
  double cer = 0.0;
  double entity_precision = 0.0;
  double entity_recall = 0.0;
  double entity_f1 = 0.0;
  int n_utterances = 0;
};

struct EvalReport {
  EvalMetrics metrics;
  std::vector<EvalRow> rows;
};

// Transcribes and tags every utterance. Entity scores compare predicted
// (type, surface text) pairs against gold, since ASR output and reference
// tokenizations need not align. jobs > 1 parallelizes per utterance with
// input-order assembly.
EvalReport run_eval(const LoadedCorpus& corpus, const AcousticModel& acoustic,
                    const NerModel& ner, int beam_width = 0, int jobs = 1);

std::string metrics_to_json(const EvalMetrics& metrics);
std::string rows_to_csv(const std::vector<EvalRow>& rows);

}  // namespace w2e
