// Deterministic synthetic corpus: templated customer-service utterances with
// gold entity spans, rendered as tone speech.

#include "w2e/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "w2e/ctc.hpp"
#include "w2e/error.hpp"
#include "w2e/io_util.hpp"

namespace w2e {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr double kTwoPi = 6.283185307179586476925286766559;

struct Segment {
  bool is_slot = false;
  std::string text;  // literal text or slot name
};

std::vector<Segment> parse_template(const std::string& tpl) {
  std::vector<Segment> segments;
  std::string cur;
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl[i] == '{') {
      auto close = tpl.find('}', i);
      if (close == std::string::npos) fail(Errc::bad_config, "unterminated slot in template: " + tpl);
      if (!cur.empty()) segments.push_back({false, cur});
      cur.clear();
      segments.push_back({true, tpl.substr(i + 1, close - i - 1)});
      i = close + 1;
    } else {
      cur.push_back(tpl[i]);
      ++i;
    }
  }
  if (!cur.empty()) segments.push_back({false, cur});
  return segments;
}

void check_ctc_text(const std::string& text, const std::string& what) {
  const auto& vocab = CtcVocab::default_vocab();
  for (char c : text) {
    if (vocab.id_of(c) < 0) {
      fail(Errc::bad_config, what + " contains character outside the CTC vocabulary: '" +
                                 std::string(1, c) + "'");
    }
  }
}

}  // namespace

TemplateSet TemplateSet::parse(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_config, std::string("template JSON: ") + e.what());
  }
  TemplateSet ts;
  if (!doc.is_object() || !doc.contains("templates") || !doc.contains("slots")) {
    fail(Errc::bad_config, "template file needs 'templates' and 'slots'");
  }
  for (const auto& t : doc["templates"]) ts.templates.push_back(t.get<std::string>());
  for (const auto& [key, values] : doc["slots"].items()) {
    for (const auto& v : values) ts.slots[key].push_back(v.get<std::string>());
  }
  ts.validate();
  return ts;
}

TemplateSet TemplateSet::load(const std::string& path) {
  return parse(read_file_text(path));
}

const TemplateSet& TemplateSet::builtin() {
  static const TemplateSet ts = parse(
#include "w2e/templates_builtin.inc"
  );
  return ts;
}

void TemplateSet::validate() const {
  if (templates.empty()) fail(Errc::empty_template_set, "no templates");
  for (const auto& [name, values] : slots) {
    entity_type_from(name);  // known type names only
    if (values.empty()) fail(Errc::empty_template_set, "slot " + name + " has no values");
    for (const auto& v : values) check_ctc_text(v, "slot value '" + v + "'");
  }
  for (const auto& tpl : templates) {
    auto segments = parse_template(tpl);
    for (std::size_t i = 0; i < segments.size(); ++i) {
      const auto& seg = segments[i];
      if (seg.is_slot) {
        if (slots.find(seg.text) == slots.end()) {
          fail(Errc::bad_config, "template references unknown slot {" + seg.text + "}");
        }
        // slots must sit on token boundaries so spans stay recoverable
        if (i > 0 && !segments[i - 1].is_slot && !segments[i - 1].text.ends_with(' ')) {
          fail(Errc::bad_config, "slot {" + seg.text + "} must follow a space: " + tpl);
        }
        if (i + 1 < segments.size() && !segments[i + 1].is_slot &&
            !segments[i + 1].text.starts_with(' ')) {
          fail(Errc::bad_config, "slot {" + seg.text + "} must precede a space: " + tpl);
        }
        if (i + 1 < segments.size() && segments[i + 1].is_slot) {
          fail(Errc::bad_config, "adjacent slots need a literal separator: " + tpl);
        }
      } else {
        check_ctc_text(seg.text, "template '" + tpl + "'");
      }
    }
  }
}

std::vector<Utterance> gen_text_corpus(const TemplateSet& templates, int n,
                                       std::uint64_t seed) {
  templates.validate();
  std::vector<Utterance> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) {
    Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(i)));
    const auto& tpl = templates.templates[static_cast<std::size_t>(
        rng.uniform_int(static_cast<int>(templates.templates.size())))];
    auto segments = parse_template(tpl);

    Utterance utt;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "utt_%05d", i);
    utt.id = buf;

    int token_at = 0;
    for (const auto& seg : segments) {
      if (seg.is_slot) {
        const auto& inventory = templates.slots.at(seg.text);
        const auto& value = inventory[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(inventory.size())))];
        Entity e;
        e.type = entity_type_from(seg.text);
        e.start = token_at;
        e.end = token_at + static_cast<int>(tokenize(value).size());
        e.text = value;
        utt.entities.push_back(std::move(e));
        utt.text += value;
        token_at = utt.entities.back().end;
      } else {
        utt.text += seg.text;
        token_at += static_cast<int>(tokenize(seg.text).size());
      }
    }
    out.push_back(std::move(utt));
  }
  return out;
}

double synth_char_freq(char c) {
  const auto& vocab = CtcVocab::default_vocab();
  int id = vocab.id_of(c);
  if (id < 0) fail(Errc::vocab_violation, "no tone for character");
  return 220.0 * std::pow(2.0, static_cast<double>(id - 1) / 12.0);
}

Waveform synth_speech(const std::string& text, int rate, double noise_std, Rng* noise_rng) {
  const auto& vocab = CtcVocab::default_vocab();
  const int tone_n = 60 * rate / 1000;
  const int gap_n = 10 * rate / 1000;
  const int space_n = 70 * rate / 1000;

  Waveform w;
  w.sample_rate = rate;
  for (char c : text) {
    if (vocab.id_of(c) < 0) {
      fail(Errc::vocab_violation, std::string("cannot synthesize character '") + c + "'");
    }
    if (c == ' ') {
      w.samples.insert(w.samples.end(), static_cast<std::size_t>(space_n), 0.0f);
      continue;
    }
    const double freq = synth_char_freq(c);
    for (int t = 0; t < tone_n; ++t) {
      w.samples.push_back(static_cast<float>(0.5 * std::sin(kTwoPi * freq * t / rate)));
    }
    w.samples.insert(w.samples.end(), static_cast<std::size_t>(gap_n), 0.0f);
  }
  if (noise_std > 0.0 && noise_rng != nullptr) {
    for (auto& s : w.samples) s += static_cast<float>(noise_rng->normal() * noise_std);
  }
  return w;
}

std::string emit_manifest(std::vector<Utterance>& utterances, const std::string& out_dir,
                          const EmitOptions& opts) {
  namespace fs = std::filesystem;
  std::error_code ec;
  const fs::path root(out_dir);
  if (!fs::exists(root.parent_path().empty() ? fs::path(".") : root.parent_path())) {
    fail(Errc::io_error, "parent directory does not exist: " + out_dir);
  }
  fs::create_directory(root, ec);
  if (ec || !fs::is_directory(root)) fail(Errc::io_error, "cannot create " + out_dir);
  fs::create_directory(root / "wavs", ec);
  if (ec && !fs::is_directory(root / "wavs")) fail(Errc::io_error, "cannot create wavs dir");

  std::ostringstream manifest;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    auto& utt = utterances[i];
    Rng wav_rng(Rng::derive(opts.seed ^ 0xa0d10u, i));
    Waveform w = synth_speech(utt.text, opts.sample_rate, opts.noise_std, &wav_rng);
    utt.audio_path = "wavs/" + utt.id + ".wav";
    write_file_bytes((root / utt.audio_path).string(), write_wav(w));

    ordered_json rec;
    rec["id"] = utt.id;
    rec["audio"] = utt.audio_path;
    rec["text"] = utt.text;
    rec["entities"] = ordered_json::array();
    for (const auto& e : utt.entities) {
      ordered_json je;
      je["type"] = entity_type_name(e.type);
      je["start"] = e.start;
      je["end"] = e.end;
      rec["entities"].push_back(je);
    }
    manifest << rec.dump() << '\n';
  }
  const std::string manifest_path = (root / "manifest.jsonl").string();
  write_file_text(manifest_path, manifest.str());
  return manifest_path;
}

std::vector<Utterance> read_manifest(const std::string& manifest_path) {
  const std::string text = read_file_text(manifest_path);
  std::vector<Utterance> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::empty_manifest,
           "manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    Utterance utt;
    utt.id = rec.value("id", "");
    utt.text = rec.value("text", "");
    utt.audio_path = rec.value("audio", "");
    auto raw_tokens = split_tokens(utt.text);
    if (rec.contains("entities")) {
      for (const auto& je : rec["entities"]) {
        Entity e;
        e.type = entity_type_from(je.at("type").get<std::string>());
        e.start = je.at("start").get<int>();
        e.end = je.at("end").get<int>();
        if (e.start < 0 || e.end > static_cast<int>(raw_tokens.size()) || e.start >= e.end) {
          fail(Errc::empty_manifest, "manifest line " + std::to_string(line_no) +
                                         ": entity span outside the token range");
        }
        for (int t = e.start; t < e.end; ++t) {
          if (t > e.start) e.text.push_back(' ');
          e.text += raw_tokens[static_cast<std::size_t>(t)];
        }
        utt.entities.push_back(std::move(e));
      }
    }
    out.push_back(std::move(utt));
  }
  return out;
}

LabeledTokens utterance_labels(const Utterance& utt) {
  LabeledTokens lt;
  lt.tokens = tokenize(utt.text);
  lt.tags = entities_to_bio(utt.entities, static_cast<int>(lt.tokens.size()));
  return lt;
}

void write_ner_jsonl(const std::vector<Utterance>& utterances, const std::string& path) {
  std::ostringstream out;
  for (const auto& utt : utterances) {
    auto labels = utterance_labels(utt);
    ordered_json rec;
    rec["tokens"] = labels.tokens;
    rec["tags"] = ordered_json::array();
    for (int tag : labels.tags) rec["tags"].push_back(TagSet::name(tag));
    out << rec.dump() << '\n';
  }
  write_file_text(path, out.str());
}

std::vector<LabeledTokens> read_labeled_jsonl(const std::string& path) {
  const std::string text = read_file_text(path);
  std::vector<LabeledTokens> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::empty_manifest, std::string("labeled JSONL: ") + e.what());
    }
    LabeledTokens lt;
    for (const auto& t : rec.at("tokens")) lt.tokens.push_back(t.get<std::string>());
    for (const auto& t : rec.at("tags")) lt.tags.push_back(TagSet::from_name(t.get<std::string>()));
    if (lt.tokens.size() != lt.tags.size()) {
      fail(Errc::length_mismatch, "labeled record tokens/tags differ");
    }
    out.push_back(std::move(lt));
  }
  return out;
}

}  // namespace w2e
