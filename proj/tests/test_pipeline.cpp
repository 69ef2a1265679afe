#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "w2e/error.hpp"
#include "w2e/pipeline.hpp"

using namespace w2e;

namespace {

// small desk models with a CTC head attached, unaligned with any data
AcousticModel tiny_acoustic(std::uint64_t seed) {
  EncoderConfig cfg;
  AcousticModel model = AcousticModel::init(cfg, seed);
  Rng rng(seed + 1);
  model.ctc_head = make_linear(cfg.d_model, CtcVocab::default_vocab().size(), rng);
  model.has_ctc_head = true;
  return model;
}

NerModel tiny_ner(std::uint64_t seed) {
  NerConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.lstm_hidden = 8;
  std::vector<std::string> tokens = {"<num>", "a", "boston", "is", "john", "my",
                                     "name",  "order", "the"};
  return NerModel::init(cfg, TokenVocab::from_tokens(tokens), seed);
}

int independent_edit_distance(const std::vector<std::string>& a,
                              const std::vector<std::string>& b) {
  std::vector<std::vector<int>> dp(a.size() + 1, std::vector<int>(b.size() + 1, 0));
  for (std::size_t i = 0; i <= a.size(); ++i) dp[i][0] = static_cast<int>(i);
  for (std::size_t j = 0; j <= b.size(); ++j) dp[0][j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      int sub = dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      dp[i][j] = std::min({sub, dp[i - 1][j] + 1, dp[i][j - 1] + 1});
    }
  }
  return dp[a.size()][b.size()];
}

std::vector<std::string> chars_of(const std::string& s) {
  std::vector<std::string> out;
  for (char c : s) out.emplace_back(1, c);
  return out;
}

std::vector<std::string> words_of(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("silent audio produces an empty transcript and no entities") {
  AcousticModel acoustic = tiny_acoustic(3);
  // bias the head hard toward blank so the decode path running on silence
  // exercises the empty branch
  for (int j = 0; j < acoustic.ctc_head.b->dim(0); ++j) {
    acoustic.ctc_head.b->data[static_cast<std::size_t>(j)] = j == 0 ? 25.0f : 0.0f;
  }
  NerModel ner = tiny_ner(4);

  Waveform silence;
  silence.sample_rate = 16000;
  silence.samples.assign(16000, 0.0f);
  auto result = run_extraction(silence, acoustic, ner);
  CHECK(result.transcript.empty());
  CHECK(result.entities.empty());
  CHECK(extraction_to_json(result) == R"({"transcript":"","entities":[]})");
}

TEST_CASE("audio shorter than the receptive field degrades to empty output") {
  AcousticModel acoustic = tiny_acoustic(5);
  NerModel ner = tiny_ner(6);
  Waveform blip;
  blip.sample_rate = 16000;
  blip.samples.assign(10, 0.1f);
  auto result = run_extraction(blip, acoustic, ner);
  CHECK(result.transcript.empty());
  CHECK(result.entities.empty());
}

TEST_CASE("extraction JSON is schema-valid for 100 random inputs") {
  AcousticModel acoustic = tiny_acoustic(7);
  NerModel ner = tiny_ner(8);
  Rng rng(9);

  for (int trial = 0; trial < 100; ++trial) {
    Waveform w;
    w.sample_rate = 16000;
    const int n = 200 + rng.uniform_int(3000);
    for (int i = 0; i < n; ++i) w.samples.push_back(static_cast<float>(rng.normal() * 0.3));
    auto result = run_extraction(w, acoustic, ner);

    auto doc = nlohmann::json::parse(extraction_to_json(result));
    REQUIRE(doc.is_object());
    REQUIRE(doc.size() == 2);
    REQUIRE(doc.at("transcript").is_string());
    REQUIRE(doc.at("entities").is_array());
    const auto transcript = doc.at("transcript").get<std::string>();
    const auto n_tokens = static_cast<int>(tokenize(transcript).size());
    for (const auto& e : doc.at("entities")) {
      REQUIRE(e.is_object());
      REQUIRE(e.size() == 4);
      CHECK(e.at("type").is_string());
      CHECK(e.at("text").is_string());
      REQUIRE(e.at("start_token").is_number_integer());
      REQUIRE(e.at("end_token").is_number_integer());
      int start = e.at("start_token").get<int>();
      int end = e.at("end_token").get<int>();
      CHECK(start >= 0);
      CHECK(start < end);
      CHECK(end <= n_tokens);
      entity_type_from(e.at("type").get<std::string>());  // known type names
    }
  }
}

TEST_CASE("digit spans keep their digits in the reported surface text") {
  std::vector<std::string> raw = {"refund", "order", "58213"};
  std::vector<int> tags = {TagSet::kO, TagSet::kO, TagSet::b_tag(EntityType::ORDER_ID)};
  auto entities = decode_entities(raw, tags);
  REQUIRE(entities.size() == 1);
  CHECK(entities[0].text == "58213");
  CHECK(shape_token(raw[2]) == "<num>");
}

TEST_CASE("run_eval metrics match an independent recomputation from its rows") {
  const auto& ts = TemplateSet::builtin();
  auto utterances = gen_text_corpus(ts, 6, 55);
  LoadedCorpus corpus;
  corpus.utterances = utterances;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    Rng noise(Rng::derive(55, i));
    corpus.audio.push_back(synth_speech(utterances[i].text, 16000, 0.01, &noise));
  }
  AcousticModel acoustic = tiny_acoustic(10);
  NerModel ner = tiny_ner(11);

  auto report = run_eval(corpus, acoustic, ner);
  REQUIRE(report.rows.size() == 6);
  CHECK(report.metrics.n_utterances == 6);

  long char_dist = 0, char_total = 0, word_dist = 0, word_total = 0;
  for (const auto& row : report.rows) {
    char_dist += independent_edit_distance(chars_of(row.ref), chars_of(row.hyp));
    char_total += static_cast<long>(row.ref.size());
    word_dist += independent_edit_distance(words_of(row.ref), words_of(row.hyp));
    word_total += static_cast<long>(words_of(row.ref).size());
    double row_cer = static_cast<double>(independent_edit_distance(chars_of(row.ref),
                                                                   chars_of(row.hyp))) /
                     static_cast<double>(row.ref.size());
    CHECK(std::abs(row.cer - row_cer) < 1e-9);
  }
  CHECK(std::abs(report.metrics.cer -
                 static_cast<double>(char_dist) / static_cast<double>(char_total)) < 1e-9);
  CHECK(std::abs(report.metrics.wer -
                 static_cast<double>(word_dist) / static_cast<double>(word_total)) < 1e-9);

  auto doc = nlohmann::json::parse(metrics_to_json(report.metrics));
  for (const char* key : {"wer", "cer", "entity_precision", "entity_recall", "entity_f1",
                          "n_utterances"}) {
    CHECK(doc.contains(key));
  }

  auto csv = rows_to_csv(report.rows);
  CHECK(csv.rfind("utt_id,ref,hyp,cer\n", 0) == 0);
}

TEST_CASE("parallel eval matches single-threaded eval exactly") {
  const auto& ts = TemplateSet::builtin();
  auto utterances = gen_text_corpus(ts, 8, 77);
  LoadedCorpus corpus;
  corpus.utterances = utterances;
  for (std::size_t i = 0; i < utterances.size(); ++i) {
    Rng noise(Rng::derive(77, i));
    corpus.audio.push_back(synth_speech(utterances[i].text, 16000, 0.01, &noise));
  }
  AcousticModel acoustic = tiny_acoustic(12);
  NerModel ner = tiny_ner(13);

  auto serial = run_eval(corpus, acoustic, ner, 0, 1);
  auto parallel = run_eval(corpus, acoustic, ner, 0, 4);
  CHECK(metrics_to_json(serial.metrics) == metrics_to_json(parallel.metrics));
  REQUIRE(serial.rows.size() == parallel.rows.size());
  for (std::size_t i = 0; i < serial.rows.size(); ++i) {
    CHECK(serial.rows[i].hyp == parallel.rows[i].hyp);
  }
}

TEST_CASE("load_corpus resolves audio relative to the manifest") {
  namespace fs = std::filesystem;
  const auto& ts = TemplateSet::builtin();
  auto utterances = gen_text_corpus(ts, 3, 91);
  fs::path dir = fs::temp_directory_path() / "w2e_pipeline_corpus";
  fs::remove_all(dir);
  fs::create_directories(dir);
  EmitOptions opts;
  opts.seed = 91;
  std::string manifest = emit_manifest(utterances, dir.string(), opts);

  LoadedCorpus corpus = load_corpus(manifest);
  REQUIRE(corpus.utterances.size() == 3);
  REQUIRE(corpus.audio.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(corpus.audio[i].sample_rate == 16000);
    CHECK(corpus.audio[i].samples.size() ==
          static_cast<std::size_t>(utterances[i].text.size()) * 1120);
  }
}

TEST_CASE("extraction requires a fine-tuned head") {
  EncoderConfig cfg;
  AcousticModel bare = AcousticModel::init(cfg, 19);
  NerModel ner = tiny_ner(20);
  Waveform w;
  w.sample_rate = 16000;
  w.samples.assign(4000, 0.01f);
  try {
    run_extraction(w, bare, ner);
    FAIL("expected IncompatibleCheckpoint");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::incompatible_checkpoint);
  }
}
