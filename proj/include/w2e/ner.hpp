#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "w2e/nn.hpp"
#include "w2e/rng.hpp"
#include "w2e/tensor.hpp"

namespace w2e {

// ---- tag inventory ----

enum class EntityType { PER, LOC, ORG, MISC, PRODUCT, ORDER_ID };
constexpr int kNumEntityTypes = 6;

const char* entity_type_name(EntityType t);
EntityType entity_type_from(const std::string& name);  // InvalidTag

// BIO labels: O plus B-/I- per entity type (K = 13). START/END are virtual
// CRF endpoints and are never emitted.
struct TagSet {
  static constexpr int kO = 0;
  static constexpr int kNumTags = 1 + 2 * kNumEntityTypes;
  static constexpr int kStart = kNumTags;      // virtual
  static constexpr int kEnd = kNumTags + 1;    // virtual

  static int b_tag(EntityType t) { return 1 + 2 * static_cast<int>(t); }
  static int i_tag(EntityType t) { return 2 + 2 * static_cast<int>(t); }
  static bool is_b(int tag) { return tag >= 1 && tag < kNumTags && (tag % 2) == 1; }
  static bool is_i(int tag) { return tag >= 2 && tag < kNumTags && (tag % 2) == 0; }
  static EntityType type_of(int tag);          // InvalidTag for O/virtual
  static std::string name(int tag);            // "O", "B-PER", ...
  static int from_name(const std::string& name);  // InvalidTag
};

// Typed token span; start < end <= token count, type is never O.
struct Entity {
  EntityType type;
  int start = 0;
  int end = 0;
  std::string text;

  bool operator==(const Entity& other) const {
    return type == other.type && start == other.start && end == other.end;
  }
};

// ---- tokenization ----

// Lowercase, split on whitespace, punctuation into separate tokens. The
// literal chunk "<num>" survives unchanged so tokenize is idempotent on its
// own space-joined output.
std::vector<std::string> split_tokens(const std::string& text);

// Pure-digit tokens of length >= 4 become the shape token "<num>".
std::string shape_token(const std::string& token);

// shape_token applied to every split token.
std::vector<std::string> tokenize(const std::string& text);

// ---- vocabulary ----

struct TokenVocab {
  static constexpr int kPad = 0, kUnk = 1, kCls = 2, kSep = 3, kMask = 4;
  static constexpr int kNumSpecials = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  // Specials plus the sorted unique tokens of the corpus (min frequency 1).
  static TokenVocab build(const std::vector<std::vector<std::string>>& corpus);
  static TokenVocab from_tokens(const std::vector<std::string>& non_special_tokens);

  int size() const { return static_cast<int>(id_to_token.size()); }
  int id_of(const std::string& token) const;  // kUnk when absent
  const std::string& token(int id) const { return id_to_token.at(static_cast<std::size_t>(id)); }
  std::vector<int> encode(const std::vector<std::string>& tokens) const;
};

// ---- model ----

struct NerConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int lstm_hidden = 32;
  bool use_bilstm = true;
  bool use_idcnn = true;
  int max_len = 64;

  int feature_dim() const { return use_bilstm ? 2 * lstm_hidden : d_model; }
  void validate() const;
};

struct LstmParams {
  TensorPtr w;  // [input, 4h], gate order i, f, o, g
  TensorPtr u;  // [h, 4h]
  TensorPtr b;  // [4h]; forget-gate section initialized to 1
};

struct IdcnnLayer {
  TensorPtr w;  // [f, f, 3]
  TensorPtr b;  // [f]
  int dilation = 1;
};

struct NerModel {
  NerConfig cfg;
  TokenVocab vocab;
  TensorPtr tok_table;  // [V, d]
  TensorPtr pos_table;  // [max_len, d]
  TensorPtr seg_table;  // [2, d]
  LayerNormParams emb_ln;
  std::vector<TransformerBlockParams> blocks;
  LinearParams mlm_head;  // [d, V]
  LstmParams lstm_fwd, lstm_bwd;
  std::vector<IdcnnLayer> idcnn;  // dilations 1, 2, 4
  TensorPtr emission_proj;        // [feature_dim, K], no bias
  TensorPtr transitions;          // [K+2, K+2]

  static NerModel init(const NerConfig& cfg, TokenVocab vocab, std::uint64_t seed);

  std::vector<TensorPtr> encoder_params() const;  // tables + LN + blocks
  std::vector<TensorPtr> mlm_params() const;
  std::vector<TensorPtr> tagger_params() const;   // everything but the MLM head
};

// ---- forward pieces ----

// Sum of token/position/segment lookups, then layer norm. Optionally exposes
// the pre-norm sum. Errors: SequenceTooLong, IndexOutOfRange.
TensorPtr embed_tokens(const NerModel& model, const std::vector<int>& ids,
                       const std::vector<int>& segment_ids,
                       TensorPtr* pre_norm = nullptr);

// Transformer stack with full (unmasked) self-attention.
TensorPtr encode_bidirectional(const NerModel& model, const TensorPtr& emb);

// Bidirectional LSTM; both directions start from zero states and outputs are
// concatenated per step. h: [T, f] -> [T, 2*hidden].
TensorPtr bilstm_layer(const TensorPtr& h, const LstmParams& fwd, const LstmParams& bwd,
                       int hidden);

// Three dilated convolutions (k=3, d=1,2,4, same length), ELU after each,
// plus the block input.
TensorPtr idcnn_elu(const TensorPtr& h, const std::vector<IdcnnLayer>& layers);

// Raw tag scores: features[T, f] x projection[f, K].
TensorPtr emissions(const TensorPtr& features, const TensorPtr& projection);

// Full tagger features for token ids: CLS + ids + SEP through the encoder,
// real-token rows through BiLSTM/IDCNN per config, then emissions.
TensorPtr tagger_emissions(const NerModel& model, const std::vector<int>& ids);

// ---- CRF ----

// nll = logZ - score(tags) with the forward algorithm in the log domain.
// transitions is [K+2, K+2] with virtual START/END rows/columns.
// Errors: InvalidTag.
TensorPtr crf_nll(const TensorPtr& emissions, const std::vector<int>& tags,
                  const TensorPtr& transitions);

struct ViterbiResult {
  std::vector<int> tags;
  double score = 0.0;
};

// Max-product decode including START/END transitions; ties break toward the
// lower label index.
ViterbiResult viterbi(const Tensor& emissions, const Tensor& transitions);

// ---- entities ----

// BIO segmentation with lenient repair: I-X after O or a different type
// starts a new X entity. Surface text joins tokens with single spaces.
// Errors: LengthMismatch.
std::vector<Entity> decode_entities(const std::vector<std::string>& tokens,
                                    const std::vector<int>& tags);

// Gold BIO tags for token-aligned entities.
std::vector<int> entities_to_bio(const std::vector<Entity>& entities, int n_tokens);

struct F1Scores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Micro-averaged exact (type, span) match over per-utterance lists.
F1Scores f1_eval(const std::vector<std::vector<Entity>>& pred,
                 const std::vector<std::vector<Entity>>& gold);

// ---- training ----

struct MlmOptions {
  int steps = 200;
  int batch_size = 8;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  int log_every = 20;
  float select_prob = 0.15f;
};

// Masked-token objective: 15% of non-special positions selected; of those
// 80% -> MASK, 10% -> random token, 10% unchanged; cross-entropy on the
// selected positions only. Errors: EmptyCorpus.
std::vector<double> mlm_pretrain(NerModel& model,
                                 const std::vector<std::vector<std::string>>& corpus,
                                 const MlmOptions& opts);

// One MLM forward pass: returns mean cross-entropy on selected positions and
// optionally the number of correct argmax predictions (for eval).
TensorPtr mlm_batch_loss(const NerModel& model,
                         const std::vector<std::vector<int>>& id_batch, Rng& rng,
                         float select_prob, int* correct = nullptr, int* selected = nullptr);

struct NerTrainOptions {
  int steps = 600;
  int batch_size = 8;
  float lr = 3e-3f;
  std::uint64_t seed = 0;
  int log_every = 20;
};

struct LabeledTokens {
  std::vector<std::string> tokens;
  std::vector<int> tags;
};

// Minimizes mean crf_nll with Adam over the tagger parameters.
// Errors: EmptyCorpus, TagVocabMismatch.
std::vector<double> train_ner(NerModel& model, const std::vector<LabeledTokens>& corpus,
                              const NerTrainOptions& opts);

// Viterbi tags for a tokenized utterance (inference only).
std::vector<int> tag_tokens(const NerModel& model, const std::vector<std::string>& tokens);

}  // namespace w2e
