// Orchestration: model persistence, corpus loading, audio-to-entities
// extraction, corpus evaluation.

#include "w2e/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "w2e/error.hpp"
#include "w2e/io_util.hpp"
#include "w2e/log.hpp"
#include "w2e/ops.hpp"

namespace w2e {

namespace {

using ordered_json = nlohmann::ordered_json;

void save_tensor(Checkpoint& ck, const std::string& name, const TensorPtr& t) {
  ck.add(name, t->shape, t->data);
}

void load_tensor(const Checkpoint& ck, const std::string& name, const TensorPtr& t) {
  const auto& stored = ck.find(name);
  if (stored.dims != t->shape) {
    fail(Errc::incompatible_checkpoint, "tensor '" + name + "' has mismatched dimensions");
  }
  t->data = stored.data;
}

template <class Fn>
void for_each_block_tensor(const std::vector<TransformerBlockParams>& blocks, Fn&& fn) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    fn(p + "ln1.gamma", b.ln1.gamma);
    fn(p + "ln1.beta", b.ln1.beta);
    fn(p + "ln2.gamma", b.ln2.gamma);
    fn(p + "ln2.beta", b.ln2.beta);
    fn(p + "q.w", b.q.w);
    fn(p + "q.b", b.q.b);
    fn(p + "k.w", b.k.w);
    fn(p + "k.b", b.k.b);
    fn(p + "v.w", b.v.w);
    fn(p + "v.b", b.v.b);
    fn(p + "o.w", b.o.w);
    fn(p + "o.b", b.o.b);
    fn(p + "ff1.w", b.ff1.w);
    fn(p + "ff1.b", b.ff1.b);
    fn(p + "ff2.w", b.ff2.w);
    fn(p + "ff2.b", b.ff2.b);
  }
}

int meta_int(const NamedTensor& t, std::size_t i) {
  return static_cast<int>(t.data.at(i));
}

}  // namespace

Checkpoint acoustic_to_checkpoint(const AcousticModel& model) {
  const auto& cfg = model.cfg;
  Checkpoint ck;
  ck.kind = model.has_ctc_head ? ModelKind::acoustic_ctc : ModelKind::acoustic;

  std::vector<float> geometry = {
      static_cast<float>(cfg.d_model),      static_cast<float>(cfg.n_layers),
      static_cast<float>(cfg.n_heads),      static_cast<float>(cfg.groups),
      static_cast<float>(cfg.entries),      static_cast<float>(cfg.mask_span),
      static_cast<float>(cfg.distractors),  static_cast<float>(cfg.conv_spec.size())};
  ck.add("cfg.geometry", {static_cast<int>(geometry.size())}, geometry);
  ck.add("cfg.scalars", {4},
         {cfg.mask_prob, cfg.kappa, cfg.tau, cfg.diversity_weight});
  std::vector<float> conv_spec;
  for (const auto& l : cfg.conv_spec) {
    conv_spec.push_back(static_cast<float>(l[0]));
    conv_spec.push_back(static_cast<float>(l[1]));
    conv_spec.push_back(static_cast<float>(l[2]));
  }
  ck.add("cfg.conv_spec", {static_cast<int>(cfg.conv_spec.size()), 3}, conv_spec);

  for (std::size_t i = 0; i < model.convs.size(); ++i) {
    const std::string p = "conv" + std::to_string(i) + ".";
    save_tensor(ck, p + "w", model.convs[i].w);
    save_tensor(ck, p + "b", model.convs[i].b);
    save_tensor(ck, p + "ln.gamma", model.convs[i].ln.gamma);
    save_tensor(ck, p + "ln.beta", model.convs[i].ln.beta);
  }
  save_tensor(ck, "mask_vector", model.mask_vector);
  save_tensor(ck, "quant.w", model.quant_proj.w);
  save_tensor(ck, "quant.b", model.quant_proj.b);
  save_tensor(ck, "codebook", model.codebook);
  for_each_block_tensor(model.blocks, [&](const std::string& name, const TensorPtr& t) {
    save_tensor(ck, name, t);
  });
  save_tensor(ck, "final_ln.gamma", model.final_ln.gamma);
  save_tensor(ck, "final_ln.beta", model.final_ln.beta);
  if (model.has_ctc_head) {
    save_tensor(ck, "head.w", model.ctc_head.w);
    save_tensor(ck, "head.b", model.ctc_head.b);
  }
  return ck;
}

AcousticModel acoustic_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != ModelKind::acoustic && ck.kind != ModelKind::acoustic_ctc) {
    fail(Errc::incompatible_checkpoint,
         std::string("expected an acoustic checkpoint, found kind '") +
             model_kind_name(ck.kind) + "'");
  }
  const auto& geometry = ck.find("cfg.geometry");
  if (geometry.data.size() != 8) fail(Errc::incompatible_checkpoint, "bad cfg.geometry");
  const auto& scalars = ck.find("cfg.scalars");
  if (scalars.data.size() != 4) fail(Errc::incompatible_checkpoint, "bad cfg.scalars");

  EncoderConfig cfg;
  cfg.d_model = meta_int(geometry, 0);
  cfg.n_layers = meta_int(geometry, 1);
  cfg.n_heads = meta_int(geometry, 2);
  cfg.groups = meta_int(geometry, 3);
  cfg.entries = meta_int(geometry, 4);
  cfg.mask_span = meta_int(geometry, 5);
  cfg.distractors = meta_int(geometry, 6);
  const int n_convs = meta_int(geometry, 7);
  cfg.mask_prob = scalars.data[0];
  cfg.kappa = scalars.data[1];
  cfg.tau = scalars.data[2];
  cfg.diversity_weight = scalars.data[3];

  const auto& conv_spec = ck.find("cfg.conv_spec");
  if (conv_spec.dims != std::vector<int>{n_convs, 3}) {
    fail(Errc::incompatible_checkpoint, "bad cfg.conv_spec");
  }
  cfg.conv_spec.clear();
  for (int i = 0; i < n_convs; ++i) {
    cfg.conv_spec.push_back({meta_int(conv_spec, static_cast<std::size_t>(i) * 3),
                             meta_int(conv_spec, static_cast<std::size_t>(i) * 3 + 1),
                             meta_int(conv_spec, static_cast<std::size_t>(i) * 3 + 2)});
  }

  AcousticModel model = AcousticModel::init(cfg, 0);
  for (std::size_t i = 0; i < model.convs.size(); ++i) {
    const std::string p = "conv" + std::to_string(i) + ".";
    load_tensor(ck, p + "w", model.convs[i].w);
    load_tensor(ck, p + "b", model.convs[i].b);
    load_tensor(ck, p + "ln.gamma", model.convs[i].ln.gamma);
    load_tensor(ck, p + "ln.beta", model.convs[i].ln.beta);
  }
  load_tensor(ck, "mask_vector", model.mask_vector);
  load_tensor(ck, "quant.w", model.quant_proj.w);
  load_tensor(ck, "quant.b", model.quant_proj.b);
  load_tensor(ck, "codebook", model.codebook);
  for_each_block_tensor(model.blocks, [&](const std::string& name, const TensorPtr& t) {
    load_tensor(ck, name, t);
  });
  load_tensor(ck, "final_ln.gamma", model.final_ln.gamma);
  load_tensor(ck, "final_ln.beta", model.final_ln.beta);
  if (ck.kind == ModelKind::acoustic_ctc) {
    Rng rng(0);
    model.ctc_head = make_linear(cfg.d_model, CtcVocab::default_vocab().size(), rng);
    load_tensor(ck, "head.w", model.ctc_head.w);
    load_tensor(ck, "head.b", model.ctc_head.b);
    model.has_ctc_head = true;
  }
  return model;
}

Checkpoint ner_to_checkpoint(const NerModel& model) {
  const auto& cfg = model.cfg;
  Checkpoint ck;
  ck.kind = ModelKind::ner;

  std::vector<float> geometry = {static_cast<float>(cfg.d_model),
                                 static_cast<float>(cfg.n_layers),
                                 static_cast<float>(cfg.n_heads),
                                 static_cast<float>(cfg.lstm_hidden),
                                 cfg.use_bilstm ? 1.0f : 0.0f,
                                 cfg.use_idcnn ? 1.0f : 0.0f,
                                 static_cast<float>(cfg.max_len)};
  ck.add("cfg.geometry", {static_cast<int>(geometry.size())}, geometry);

  // vocabulary: non-special tokens joined by '\n', one byte per float
  std::string joined;
  for (int i = TokenVocab::kNumSpecials; i < model.vocab.size(); ++i) {
    if (!joined.empty()) joined.push_back('\n');
    joined += model.vocab.token(i);
  }
  std::vector<float> vocab_bytes;
  vocab_bytes.reserve(joined.size());
  for (unsigned char c : joined) vocab_bytes.push_back(static_cast<float>(c));
  ck.add("vocab.bytes", {static_cast<int>(vocab_bytes.size())}, vocab_bytes);

  save_tensor(ck, "tok_table", model.tok_table);
  save_tensor(ck, "pos_table", model.pos_table);
  save_tensor(ck, "seg_table", model.seg_table);
  save_tensor(ck, "emb_ln.gamma", model.emb_ln.gamma);
  save_tensor(ck, "emb_ln.beta", model.emb_ln.beta);
  for_each_block_tensor(model.blocks, [&](const std::string& name, const TensorPtr& t) {
    save_tensor(ck, name, t);
  });
  save_tensor(ck, "mlm.w", model.mlm_head.w);
  save_tensor(ck, "mlm.b", model.mlm_head.b);
  save_tensor(ck, "lstm_fwd.w", model.lstm_fwd.w);
  save_tensor(ck, "lstm_fwd.u", model.lstm_fwd.u);
  save_tensor(ck, "lstm_fwd.b", model.lstm_fwd.b);
  save_tensor(ck, "lstm_bwd.w", model.lstm_bwd.w);
  save_tensor(ck, "lstm_bwd.u", model.lstm_bwd.u);
  save_tensor(ck, "lstm_bwd.b", model.lstm_bwd.b);
  for (std::size_t i = 0; i < model.idcnn.size(); ++i) {
    const std::string p = "idcnn" + std::to_string(i) + ".";
    save_tensor(ck, p + "w", model.idcnn[i].w);
    save_tensor(ck, p + "b", model.idcnn[i].b);
  }
  save_tensor(ck, "emission.w", model.emission_proj);
  save_tensor(ck, "transitions", model.transitions);
  return ck;
}

NerModel ner_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != ModelKind::ner) {
    fail(Errc::incompatible_checkpoint,
         std::string("expected a ner checkpoint, found kind '") + model_kind_name(ck.kind) +
             "'");
  }
  const auto& geometry = ck.find("cfg.geometry");
  if (geometry.data.size() != 7) fail(Errc::incompatible_checkpoint, "bad cfg.geometry");
  NerConfig cfg;
  cfg.d_model = meta_int(geometry, 0);
  cfg.n_layers = meta_int(geometry, 1);
  cfg.n_heads = meta_int(geometry, 2);
  cfg.lstm_hidden = meta_int(geometry, 3);
  cfg.use_bilstm = meta_int(geometry, 4) != 0;
  cfg.use_idcnn = meta_int(geometry, 5) != 0;
  cfg.max_len = meta_int(geometry, 6);

  const auto& vocab_bytes = ck.find("vocab.bytes");
  std::string joined;
  joined.reserve(vocab_bytes.data.size());
  for (float f : vocab_bytes.data) joined.push_back(static_cast<char>(static_cast<int>(f)));
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : joined) {
    if (c == '\n') {
      tokens.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) tokens.push_back(cur);

  NerModel model = NerModel::init(cfg, TokenVocab::from_tokens(tokens), 0);
  load_tensor(ck, "tok_table", model.tok_table);
  load_tensor(ck, "pos_table", model.pos_table);
  load_tensor(ck, "seg_table", model.seg_table);
  load_tensor(ck, "emb_ln.gamma", model.emb_ln.gamma);
  load_tensor(ck, "emb_ln.beta", model.emb_ln.beta);
  for_each_block_tensor(model.blocks, [&](const std::string& name, const TensorPtr& t) {
    load_tensor(ck, name, t);
  });
  load_tensor(ck, "mlm.w", model.mlm_head.w);
  load_tensor(ck, "mlm.b", model.mlm_head.b);
  load_tensor(ck, "lstm_fwd.w", model.lstm_fwd.w);
  load_tensor(ck, "lstm_fwd.u", model.lstm_fwd.u);
  load_tensor(ck, "lstm_fwd.b", model.lstm_fwd.b);
  load_tensor(ck, "lstm_bwd.w", model.lstm_bwd.w);
  load_tensor(ck, "lstm_bwd.u", model.lstm_bwd.u);
  load_tensor(ck, "lstm_bwd.b", model.lstm_bwd.b);
  for (std::size_t i = 0; i < model.idcnn.size(); ++i) {
    const std::string p = "idcnn" + std::to_string(i) + ".";
    load_tensor(ck, p + "w", model.idcnn[i].w);
    load_tensor(ck, p + "b", model.idcnn[i].b);
  }
  load_tensor(ck, "emission.w", model.emission_proj);
  load_tensor(ck, "transitions", model.transitions);
  return model;
}

LoadedCorpus load_corpus(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  LoadedCorpus corpus;
  corpus.utterances = read_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  corpus.audio.reserve(corpus.utterances.size());
  for (const auto& utt : corpus.utterances) {
    auto bytes = read_file_bytes((base / utt.audio_path).string());
    Waveform w = parse_wav(bytes);
    if (w.sample_rate != 16000) w = resample_linear(w, 16000);
    corpus.audio.push_back(std::move(w));
  }
  return corpus;
}

std::vector<LabeledTokens> load_labeled_corpus(const std::string& path) {
  const std::string text = read_file_text(path);
  std::istringstream in(text);
  std::string first_line;
  while (std::getline(in, first_line)) {
    if (!first_line.empty()) break;
  }
  if (first_line.empty()) fail(Errc::empty_manifest, "no records in " + path);
  nlohmann::json first;
  try {
    first = nlohmann::json::parse(first_line);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::empty_manifest, std::string("labeled corpus: ") + e.what());
  }
  if (first.contains("tokens")) return read_labeled_jsonl(path);

  auto utterances = read_manifest(path);
  std::vector<LabeledTokens> out;
  out.reserve(utterances.size());
  for (const auto& utt : utterances) out.push_back(utterance_labels(utt));
  return out;
}

ExtractionResult run_extraction(const Waveform& audio, const AcousticModel& acoustic,
                                const NerModel& ner, int beam_width) {
  if (!acoustic.has_ctc_head) {
    fail(Errc::incompatible_checkpoint, "acoustic model has no CTC head; fine-tune first");
  }
  Tape off(/*precise=*/false, /*record=*/false);

  Waveform wave = audio;
  if (wave.sample_rate != 16000) wave = resample_linear(wave, 16000);

  ExtractionResult result;
  if (static_cast<int>(wave.samples.size()) >= acoustic.cfg.receptive_field()) {
    auto z = feature_encoder(acoustic, standardize(wave));
    auto ctx = context_network(acoustic, z);
    auto lp = project_logits(ctx, acoustic.ctc_head);
    const auto& vocab = CtcVocab::default_vocab();
    result.transcript =
        beam_width > 1 ? beam_decode(*lp, vocab, beam_width) : greedy_decode(*lp, vocab);
  }

  auto raw_tokens = split_tokens(result.transcript);
  const std::size_t max_tokens = static_cast<std::size_t>(ner.cfg.max_len - 2);
  if (raw_tokens.size() > max_tokens) {
    W2E_DEBUG("truncating %zu tokens to the tagger maximum %zu", raw_tokens.size(), max_tokens);
    raw_tokens.resize(max_tokens);
  }
  std::vector<std::string> shaped;
  shaped.reserve(raw_tokens.size());
  for (const auto& t : raw_tokens) shaped.push_back(shape_token(t));

  auto tags = tag_tokens(ner, shaped);
  // report surface text from the raw tokens so digit spans keep their digits
  for (const auto& e : decode_entities(raw_tokens, tags)) {
    result.entities.push_back(
        {entity_type_name(e.type), e.text, e.start, e.end});
  }
  return result;
}

std::string extraction_to_json(const ExtractionResult& result) {
  ordered_json j;
  j["transcript"] = result.transcript;
  j["entities"] = ordered_json::array();
  for (const auto& e : result.entities) {
    ordered_json je;
    je["type"] = e.type;
    je["text"] = e.text;
    je["start_token"] = e.start_token;
    je["end_token"] = e.end_token;
    j["entities"].push_back(je);
  }
  return j.dump();
}

EvalReport run_eval(const LoadedCorpus& corpus, const AcousticModel& acoustic,
                    const NerModel& ner, int beam_width, int jobs) {
  const auto n = corpus.utterances.size();
  std::vector<ExtractionResult> results(n);

  jobs = std::max(1, jobs);
  if (jobs == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      results[i] = run_extraction(corpus.audio[i], acoustic, ner, beam_width);
    }
  } else {
    // frozen models are shared read-only; results land at their input index
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(jobs)) {
          results[i] = run_extraction(corpus.audio[i], acoustic, ner, beam_width);
        }
      });
    }
    for (auto& t : workers) t.join();
  }

  EvalReport report;
  std::vector<std::string> refs, hyps;
  long tp = 0, n_pred = 0, n_gold = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& utt = corpus.utterances[i];
    const auto& res = results[i];
    refs.push_back(utt.text);
    hyps.push_back(res.transcript);

    EvalRow row;
    row.id = utt.id;
    row.ref = utt.text;
    row.hyp = res.transcript;
    row.cer = utt.text.empty()
                  ? (res.transcript.empty() ? 0.0 : 1.0)
                  : static_cast<double>(edit_distance(utt.text, res.transcript)) /
                        static_cast<double>(utt.text.size());
    report.rows.push_back(std::move(row));

    // gold and predicted entities compared as (type, surface text) multisets
    std::multiset<std::pair<std::string, std::string>> gold_set;
    for (const auto& e : utt.entities) {
      gold_set.insert({entity_type_name(e.type), e.text});
    }
    for (const auto& e : res.entities) {
      auto it = gold_set.find({e.type, e.text});
      if (it != gold_set.end()) {
        ++tp;
        gold_set.erase(it);
      }
    }
    n_pred += static_cast<long>(res.entities.size());
    n_gold += static_cast<long>(utt.entities.size());
  }

  auto rates = edit_distance_rates(refs, hyps);
  report.metrics.wer = rates.wer;
  report.metrics.cer = rates.cer;
  report.metrics.entity_precision =
      n_pred > 0 ? static_cast<double>(tp) / static_cast<double>(n_pred) : 0.0;
  report.metrics.entity_recall =
      n_gold > 0 ? static_cast<double>(tp) / static_cast<double>(n_gold) : 0.0;
  const double pr = report.metrics.entity_precision + report.metrics.entity_recall;
  report.metrics.entity_f1 =
      pr > 0.0 ? 2.0 * report.metrics.entity_precision * report.metrics.entity_recall / pr : 0.0;
  report.metrics.n_utterances = static_cast<int>(n);
  return report;
}

std::string metrics_to_json(const EvalMetrics& metrics) {
  ordered_json j;
  j["wer"] = metrics.wer;
  j["cer"] = metrics.cer;
  j["entity_precision"] = metrics.entity_precision;
  j["entity_recall"] = metrics.entity_recall;
  j["entity_f1"] = metrics.entity_f1;
  j["n_utterances"] = metrics.n_utterances;
  return j.dump();
}

std::string rows_to_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream out;
  out << "utt_id,ref,hyp,cer\n";
  for (const auto& r : rows) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", r.cer);
    out << r.id << ',' << r.ref << ',' << r.hyp << ',' << buf << '\n';
  }
  return out.str();
}

}  // namespace w2e
