// w2e: turn a recorded call into a transcript and a structured entity list.
// Subcommands cover corpus generation, both training phases for both models,
// single-file extraction, and corpus evaluation.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "w2e/config.hpp"
#include "w2e/corpus.hpp"
#include "w2e/error.hpp"
#include "w2e/io_util.hpp"
#include "w2e/log.hpp"
#include "w2e/pipeline.hpp"

namespace {

using namespace w2e;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheckpoint = 3;

int exit_code_for(const Error& e) {
  switch (e.code()) {
    case Errc::bad_checkpoint:
    case Errc::incompatible_checkpoint:
      return kExitCheckpoint;
    default:
      return kExitData;
  }
}

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  int jobs = 1;
  int beam = 0;
};

PipelineConfig effective_config(const CommonOpts& opts) {
  PipelineConfig cfg;
  if (!opts.config_path.empty()) cfg = PipelineConfig::load(opts.config_path);
  if (opts.seed) cfg.seed = *opts.seed;
  return cfg;
}

int budget_steps(const TrainBudget& budget, const CommonOpts& opts) {
  return opts.steps ? *opts.steps : budget.steps;
}

void write_loss_csv(const std::string& ckpt_path, const std::vector<double>& history) {
  std::string csv = "step,loss\n";
  char buf[48];
  for (std::size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i + 1, history[i]);
    csv += buf;
  }
  write_file_text(ckpt_path + ".loss.csv", csv);
}

TemplateSet resolve_templates(const PipelineConfig& cfg, const std::string& cli_path) {
  if (!cli_path.empty()) return TemplateSet::load(cli_path);
  if (!cfg.templates_path.empty()) return TemplateSet::load(cfg.templates_path);
  return TemplateSet::builtin();
}

int cmd_gen_corpus(const CommonOpts& common, const std::string& out_dir, int n,
                   const std::string& templates_path) {
  PipelineConfig cfg = effective_config(common);
  TemplateSet templates = resolve_templates(cfg, templates_path);
  auto utterances = n > 0 ? gen_text_corpus(templates, n, cfg.seed) : std::vector<Utterance>{};
  EmitOptions emit;
  emit.sample_rate = cfg.sample_rate;
  emit.noise_std = cfg.synth_noise_std;
  emit.seed = cfg.seed;
  std::string manifest = emit_manifest(utterances, out_dir, emit);
  write_ner_jsonl(utterances, (std::filesystem::path(out_dir) / "ner.jsonl").string());
  std::printf("%s\n", manifest.c_str());
  return kExitOk;
}

int cmd_pretrain_asr(const CommonOpts& common, const std::string& manifest,
                     const std::string& out_ckpt) {
  PipelineConfig cfg = effective_config(common);
  LoadedCorpus corpus = load_corpus(manifest);
  AcousticModel model = AcousticModel::init(cfg.acoustic, cfg.seed);
  PretrainOptions opts;
  opts.steps = budget_steps(cfg.pretrain_asr, common);
  opts.batch_size = cfg.pretrain_asr.batch;
  opts.lr = cfg.pretrain_asr.lr;
  opts.seed = cfg.seed;
  opts.log_every = cfg.pretrain_asr.log_every;
  auto stats = pretrain(model, corpus.audio, opts);
  acoustic_to_checkpoint(model).save(out_ckpt);
  write_loss_csv(out_ckpt, stats.total);
  return kExitOk;
}

int cmd_finetune_asr(const CommonOpts& common, const std::string& manifest,
                     const std::string& in_ckpt, const std::string& out_ckpt) {
  PipelineConfig cfg = effective_config(common);
  LoadedCorpus corpus = load_corpus(manifest);
  AcousticModel model = acoustic_from_checkpoint(Checkpoint::load(in_ckpt));
  std::vector<std::string> texts;
  texts.reserve(corpus.utterances.size());
  for (const auto& u : corpus.utterances) texts.push_back(u.text);
  FinetuneOptions opts;
  opts.steps = budget_steps(cfg.finetune_asr, common);
  opts.batch_size = cfg.finetune_asr.batch;
  opts.lr = cfg.finetune_asr.lr;
  opts.seed = cfg.seed;
  opts.log_every = cfg.finetune_asr.log_every;
  auto history = finetune(model, corpus.audio, texts, opts);
  acoustic_to_checkpoint(model).save(out_ckpt);
  write_loss_csv(out_ckpt, history);
  return kExitOk;
}

int cmd_pretrain_ner(const CommonOpts& common, const std::string& corpus_path,
                     const std::string& out_ckpt) {
  PipelineConfig cfg = effective_config(common);
  auto labeled = load_labeled_corpus(corpus_path);
  if (labeled.empty()) fail(Errc::empty_corpus, "no utterances in " + corpus_path);
  std::vector<std::vector<std::string>> token_corpus;
  token_corpus.reserve(labeled.size());
  for (const auto& ex : labeled) token_corpus.push_back(ex.tokens);

  NerModel model = NerModel::init(cfg.ner, TokenVocab::build(token_corpus), cfg.seed);
  MlmOptions opts;
  opts.steps = budget_steps(cfg.pretrain_ner, common);
  opts.batch_size = cfg.pretrain_ner.batch;
  opts.lr = cfg.pretrain_ner.lr;
  opts.seed = cfg.seed;
  opts.log_every = cfg.pretrain_ner.log_every;
  auto history = mlm_pretrain(model, token_corpus, opts);
  ner_to_checkpoint(model).save(out_ckpt);
  write_loss_csv(out_ckpt, history);
  return kExitOk;
}

int cmd_train_ner(const CommonOpts& common, const std::string& corpus_path,
                  const std::string& in_ckpt, const std::string& out_ckpt) {
  PipelineConfig cfg = effective_config(common);
  auto labeled = load_labeled_corpus(corpus_path);
  if (labeled.empty()) fail(Errc::empty_corpus, "no utterances in " + corpus_path);
  NerModel model = ner_from_checkpoint(Checkpoint::load(in_ckpt));
  NerTrainOptions opts;
  opts.steps = budget_steps(cfg.train_ner, common);
  opts.batch_size = cfg.train_ner.batch;
  opts.lr = cfg.train_ner.lr;
  opts.seed = cfg.seed;
  opts.log_every = cfg.train_ner.log_every;
  auto history = train_ner(model, labeled, opts);
  ner_to_checkpoint(model).save(out_ckpt);
  write_loss_csv(out_ckpt, history);
  return kExitOk;
}

int cmd_run(const CommonOpts& common, const std::string& audio_path,
            const std::string& asr_ckpt, const std::string& ner_ckpt) {
  AcousticModel acoustic = acoustic_from_checkpoint(Checkpoint::load(asr_ckpt));
  NerModel ner = ner_from_checkpoint(Checkpoint::load(ner_ckpt));
  Waveform audio = parse_wav(read_file_bytes(audio_path));
  auto result = run_extraction(audio, acoustic, ner, common.beam);
  std::printf("%s\n", extraction_to_json(result).c_str());
  return kExitOk;
}

int cmd_eval(const CommonOpts& common, const std::string& manifest,
             const std::string& asr_ckpt, const std::string& ner_ckpt,
             const std::string& per_utt_csv) {
  AcousticModel acoustic = acoustic_from_checkpoint(Checkpoint::load(asr_ckpt));
  NerModel ner = ner_from_checkpoint(Checkpoint::load(ner_ckpt));
  LoadedCorpus corpus = load_corpus(manifest);
  if (corpus.utterances.empty()) fail(Errc::empty_manifest, "manifest has no utterances");
  auto report = run_eval(corpus, acoustic, ner, common.beam, common.jobs);
  if (!per_utt_csv.empty()) write_file_text(per_utt_csv, rows_to_csv(report.rows));
  std::printf("%s\n", metrics_to_json(report.metrics).c_str());
  return kExitOk;
}

int cmd_config(const CommonOpts& common, bool dump_defaults) {
  if (dump_defaults) {
    std::printf("%s", PipelineConfig().dump().c_str());
    return kExitOk;
  }
  if (!common.config_path.empty()) {
    std::printf("%s", effective_config(common).dump().c_str());
    return kExitOk;
  }
  std::fprintf(stderr, "config: pass --dump-defaults or --config FILE\n");
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"w2e: speech-to-entities pipeline (tone-speech ASR + CRF NER)"};
  app.require_subcommand(1);
  app.fallthrough(true);  // accept --seed etc. after the subcommand

  CommonOpts common;
  app.add_option("--config", common.config_path, "JSON config file")->configurable(false);
  app.add_option("--seed", common.seed, "override the config seed");
  app.add_option("--steps", common.steps, "override the training step budget");
  app.add_option("--jobs", common.jobs, "worker threads for per-utterance inference");
  app.add_option("--beam", common.beam, "prefix beam width (0/1 = greedy)");

  std::string out_dir, manifest, in_ckpt, out_ckpt, audio_path, asr_ckpt, ner_ckpt;
  std::string templates_path, per_utt_csv;
  int n_utterances = 0;
  bool dump_defaults = false;

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic labeled corpus");
  gen->add_option("-o,--out", out_dir, "output directory")->required();
  gen->add_option("-n,--count", n_utterances, "number of utterances")->required();
  gen->add_option("--templates", templates_path, "template JSON (default: builtin)");

  auto* pre_asr = app.add_subcommand("pretrain-asr", "self-supervised acoustic pretraining");
  pre_asr->add_option("--manifest", manifest, "corpus manifest")->required();
  pre_asr->add_option("-o,--out", out_ckpt, "output checkpoint")->required();

  auto* fin_asr = app.add_subcommand("finetune-asr", "CTC fine-tuning on labeled audio");
  fin_asr->add_option("--manifest", manifest, "corpus manifest")->required();
  fin_asr->add_option("--ckpt", in_ckpt, "acoustic checkpoint to start from")->required();
  fin_asr->add_option("-o,--out", out_ckpt, "output checkpoint")->required();

  auto* pre_ner = app.add_subcommand("pretrain-ner", "masked-token pretraining for the tagger");
  pre_ner->add_option("--manifest", manifest, "manifest or tokens/tags JSONL")->required();
  pre_ner->add_option("-o,--out", out_ckpt, "output checkpoint")->required();

  auto* tr_ner = app.add_subcommand("train-ner", "CRF tagger training");
  tr_ner->add_option("--manifest", manifest, "manifest or tokens/tags JSONL")->required();
  tr_ner->add_option("--ckpt", in_ckpt, "ner checkpoint to start from")->required();
  tr_ner->add_option("-o,--out", out_ckpt, "output checkpoint")->required();

  auto* run = app.add_subcommand("run", "extract entities from one WAV file");
  run->add_option("audio", audio_path, "input WAV")->required();
  run->add_option("--asr", asr_ckpt, "fine-tuned acoustic checkpoint")->required();
  run->add_option("--ner", ner_ckpt, "trained ner checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "transcribe and tag a labeled corpus");
  ev->add_option("--manifest", manifest, "corpus manifest")->required();
  ev->add_option("--asr", asr_ckpt, "fine-tuned acoustic checkpoint")->required();
  ev->add_option("--ner", ner_ckpt, "trained ner checkpoint")->required();
  ev->add_option("--per-utt", per_utt_csv, "write per-utterance CSV here");

  auto* conf = app.add_subcommand("config", "print configuration");
  conf->add_flag("--dump-defaults", dump_defaults, "print the default config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(common, out_dir, n_utterances, templates_path);
    if (pre_asr->parsed()) return cmd_pretrain_asr(common, manifest, out_ckpt);
    if (fin_asr->parsed()) return cmd_finetune_asr(common, manifest, in_ckpt, out_ckpt);
    if (pre_ner->parsed()) return cmd_pretrain_ner(common, manifest, out_ckpt);
    if (tr_ner->parsed()) return cmd_train_ner(common, manifest, in_ckpt, out_ckpt);
    if (run->parsed()) return cmd_run(common, audio_path, asr_ckpt, ner_ckpt);
    if (ev->parsed()) return cmd_eval(common, manifest, asr_ckpt, ner_ckpt, per_utt_csv);
    if (conf->parsed()) return cmd_config(common, dump_defaults);
  } catch (const Error& e) {
    std::fprintf(stderr, "w2e: %s\n", e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "w2e: unexpected error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
