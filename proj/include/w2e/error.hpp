#pragma once

#include <stdexcept>
#include <string>

namespace w2e {

// Typed error conditions raised by the library. CLI maps these to exit codes.
enum class Errc {
  malformed_header,
  unsupported_format,
  empty_input,
  shape_mismatch,
  input_too_short,
  not_scalar,
  index_out_of_range,
  insufficient_masked_frames,
  empty_manifest,
  target_too_long,
  vocab_violation,
  length_mismatch,
  sequence_too_long,
  empty_corpus,
  invalid_tag,
  tag_vocab_mismatch,
  empty_template_set,
  io_error,
  bad_checkpoint,
  incompatible_checkpoint,
  bad_config,
};

const char* errc_name(Errc code);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(std::string(errc_name(code)) + ": " + message),
        code_(code) {}

  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
  throw Error(code, message);
}

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::malformed_header: return "MalformedHeader";
    case Errc::unsupported_format: return "UnsupportedFormat";
    case Errc::empty_input: return "EmptyInput";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::input_too_short: return "InputTooShort";
    case Errc::not_scalar: return "NotScalar";
    case Errc::index_out_of_range: return "IndexOutOfRange";
    case Errc::insufficient_masked_frames: return "InsufficientMaskedFrames";
    case Errc::empty_manifest: return "EmptyManifest";
    case Errc::target_too_long: return "TargetTooLong";
    case Errc::vocab_violation: return "VocabViolation";
    case Errc::length_mismatch: return "LengthMismatch";
    case Errc::sequence_too_long: return "SequenceTooLong";
    case Errc::empty_corpus: return "EmptyCorpus";
    case Errc::invalid_tag: return "InvalidTag";
    case Errc::tag_vocab_mismatch: return "TagVocabMismatch";
    case Errc::empty_template_set: return "EmptyTemplateSet";
    case Errc::io_error: return "IoError";
    case Errc::bad_checkpoint: return "BadCheckpoint";
    case Errc::incompatible_checkpoint: return "IncompatibleCheckpoint";
    case Errc::bad_config: return "BadConfig";
  }
  return "UnknownError";
}

}  // namespace w2e
