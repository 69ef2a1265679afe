#include "w2e/config.hpp"

#include <set>

#include <json.hpp>

#include "w2e/error.hpp"
#include "w2e/io_util.hpp"

namespace w2e {

namespace {

using ordered_json = nlohmann::ordered_json;

void reject_unknown(const nlohmann::json& obj, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (known.find(key) == known.end()) {
      fail(Errc::bad_config, "unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
void take(const nlohmann::json& obj, const char* key, T& into, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    into = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(Errc::bad_config, std::string("bad value for '") + key + "' in " + where);
  }
}

void parse_budget(const nlohmann::json& obj, TrainBudget& b, const std::string& where) {
  reject_unknown(obj, {"steps", "batch", "lr", "log_every"}, where);
  take(obj, "steps", b.steps, where);
  take(obj, "batch", b.batch, where);
  take(obj, "lr", b.lr, where);
  take(obj, "log_every", b.log_every, where);
  if (b.steps < 0 || b.batch < 1 || b.lr <= 0.0f) {
    fail(Errc::bad_config, "bad training budget in " + where);
  }
}

ordered_json budget_json(const TrainBudget& b) {
  ordered_json j;
  j["steps"] = b.steps;
  j["batch"] = b.batch;
  j["lr"] = b.lr;
  j["log_every"] = b.log_every;
  return j;
}

}  // namespace

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::bad_config, std::string("config JSON: ") + e.what());
  }
  if (!doc.is_object()) fail(Errc::bad_config, "config root must be an object");

  PipelineConfig cfg;
  reject_unknown(doc,
                 {"seed", "acoustic", "ner", "train", "synth_noise_std", "sample_rate",
                  "templates_path"},
                 "config root");
  take(doc, "seed", cfg.seed, "config root");
  take(doc, "synth_noise_std", cfg.synth_noise_std, "config root");
  take(doc, "sample_rate", cfg.sample_rate, "config root");
  take(doc, "templates_path", cfg.templates_path, "config root");
  if (cfg.sample_rate <= 0) fail(Errc::bad_config, "sample_rate must be positive");
  if (cfg.synth_noise_std < 0.0) fail(Errc::bad_config, "synth_noise_std must be >= 0");

  if (doc.contains("acoustic")) {
    const auto& a = doc["acoustic"];
    reject_unknown(a,
                   {"conv_spec", "d_model", "n_layers", "n_heads", "mask_prob", "mask_span",
                    "groups", "entries", "kappa", "tau", "distractors", "diversity_weight"},
                   "acoustic");
    if (a.contains("conv_spec")) {
      cfg.acoustic.conv_spec.clear();
      for (const auto& layer : a.at("conv_spec")) {
        if (!layer.is_array() || layer.size() != 3) {
          fail(Errc::bad_config, "conv_spec entries must be [channels, kernel, stride]");
        }
        cfg.acoustic.conv_spec.push_back(
            {layer[0].get<int>(), layer[1].get<int>(), layer[2].get<int>()});
      }
    }
    take(a, "d_model", cfg.acoustic.d_model, "acoustic");
    take(a, "n_layers", cfg.acoustic.n_layers, "acoustic");
    take(a, "n_heads", cfg.acoustic.n_heads, "acoustic");
    take(a, "mask_prob", cfg.acoustic.mask_prob, "acoustic");
    take(a, "mask_span", cfg.acoustic.mask_span, "acoustic");
    take(a, "groups", cfg.acoustic.groups, "acoustic");
    take(a, "entries", cfg.acoustic.entries, "acoustic");
    take(a, "kappa", cfg.acoustic.kappa, "acoustic");
    take(a, "tau", cfg.acoustic.tau, "acoustic");
    take(a, "distractors", cfg.acoustic.distractors, "acoustic");
    take(a, "diversity_weight", cfg.acoustic.diversity_weight, "acoustic");
    cfg.acoustic.validate();
  }

  if (doc.contains("ner")) {
    const auto& n = doc["ner"];
    reject_unknown(n,
                   {"d_model", "n_layers", "n_heads", "lstm_hidden", "use_bilstm",
                    "use_idcnn", "max_len"},
                   "ner");
    take(n, "d_model", cfg.ner.d_model, "ner");
    take(n, "n_layers", cfg.ner.n_layers, "ner");
    take(n, "n_heads", cfg.ner.n_heads, "ner");
    take(n, "lstm_hidden", cfg.ner.lstm_hidden, "ner");
    take(n, "use_bilstm", cfg.ner.use_bilstm, "ner");
    take(n, "use_idcnn", cfg.ner.use_idcnn, "ner");
    take(n, "max_len", cfg.ner.max_len, "ner");
    cfg.ner.validate();
  }

  if (doc.contains("train")) {
    const auto& t = doc["train"];
    reject_unknown(t, {"pretrain_asr", "finetune_asr", "pretrain_ner", "train_ner"}, "train");
    if (t.contains("pretrain_asr")) parse_budget(t["pretrain_asr"], cfg.pretrain_asr, "train.pretrain_asr");
    if (t.contains("finetune_asr")) parse_budget(t["finetune_asr"], cfg.finetune_asr, "train.finetune_asr");
    if (t.contains("pretrain_ner")) parse_budget(t["pretrain_ner"], cfg.pretrain_ner, "train.pretrain_ner");
    if (t.contains("train_ner")) parse_budget(t["train_ner"], cfg.train_ner, "train.train_ner");
  }
  return cfg;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  return from_json_text(read_file_text(path));
}

std::string PipelineConfig::dump() const {
  ordered_json j;
  j["seed"] = seed;
  ordered_json a;
  a["conv_spec"] = ordered_json::array();
  for (const auto& l : acoustic.conv_spec) a["conv_spec"].push_back({l[0], l[1], l[2]});
  a["d_model"] = acoustic.d_model;
  a["n_layers"] = acoustic.n_layers;
  a["n_heads"] = acoustic.n_heads;
  a["mask_prob"] = acoustic.mask_prob;
  a["mask_span"] = acoustic.mask_span;
  a["groups"] = acoustic.groups;
  a["entries"] = acoustic.entries;
  a["kappa"] = acoustic.kappa;
  a["tau"] = acoustic.tau;
  a["distractors"] = acoustic.distractors;
  a["diversity_weight"] = acoustic.diversity_weight;
  j["acoustic"] = a;

  ordered_json n;
  n["d_model"] = ner.d_model;
  n["n_layers"] = ner.n_layers;
  n["n_heads"] = ner.n_heads;
  n["lstm_hidden"] = ner.lstm_hidden;
  n["use_bilstm"] = ner.use_bilstm;
  n["use_idcnn"] = ner.use_idcnn;
  n["max_len"] = ner.max_len;
  j["ner"] = n;

  ordered_json t;
  t["pretrain_asr"] = budget_json(pretrain_asr);
  t["finetune_asr"] = budget_json(finetune_asr);
  t["pretrain_ner"] = budget_json(pretrain_ner);
  t["train_ner"] = budget_json(train_ner);
  j["train"] = t;

  j["synth_noise_std"] = synth_noise_std;
  j["sample_rate"] = sample_rate;
  j["templates_path"] = templates_path;
  return j.dump(2) + "\n";
}

}  // namespace w2e
