// BERT-style token encoder with MLM pretraining, BiLSTM + iterated dilated
// CNN feature layers, CRF inference, and BIO entity extraction.

#include "w2e/ner.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "w2e/error.hpp"
#include "w2e/log.hpp"
#include "w2e/ops.hpp"

namespace w2e {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse_row(const std::vector<double>& v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

const char* const kTypeNames[kNumEntityTypes] = {"PER",  "LOC",     "ORG",
                                                 "MISC", "PRODUCT", "ORDER_ID"};

}  // namespace

const char* entity_type_name(EntityType t) { return kTypeNames[static_cast<int>(t)]; }

EntityType entity_type_from(const std::string& name) {
  for (int i = 0; i < kNumEntityTypes; ++i) {
    if (name == kTypeNames[i]) return static_cast<EntityType>(i);
  }
  fail(Errc::invalid_tag, "unknown entity type '" + name + "'");
}

EntityType TagSet::type_of(int tag) {
  if (tag < 1 || tag >= kNumTags) fail(Errc::invalid_tag, "tag has no entity type");
  return static_cast<EntityType>((tag - 1) / 2);
}

std::string TagSet::name(int tag) {
  if (tag == kO) return "O";
  if (is_b(tag)) return std::string("B-") + entity_type_name(type_of(tag));
  if (is_i(tag)) return std::string("I-") + entity_type_name(type_of(tag));
  fail(Errc::invalid_tag, "tag id " + std::to_string(tag) + " out of range");
}

int TagSet::from_name(const std::string& name) {
  if (name == "O") return kO;
  if (name.size() > 2 && name[1] == '-') {
    EntityType t = entity_type_from(name.substr(2));
    if (name[0] == 'B') return b_tag(t);
    if (name[0] == 'I') return i_tag(t);
  }
  fail(Errc::invalid_tag, "unknown tag '" + name + "'");
}

// ---- tokenization ----

std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::vector<std::string> chunks;
  std::string cur;
  for (char raw : text) {
    auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c) != 0) {
      if (!cur.empty()) chunks.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) chunks.push_back(std::move(cur));

  for (const auto& chunk : chunks) {
    if (chunk == "<num>") {  // shape token stays atomic
      out.push_back(chunk);
      continue;
    }
    std::string word;
    for (char c : chunk) {
      if (std::isalnum(static_cast<unsigned char>(c)) != 0) {
        word.push_back(c);
      } else {
        if (!word.empty()) out.push_back(std::move(word));
        word.clear();
        out.push_back(std::string(1, c));  // punctuation as its own token
      }
    }
    if (!word.empty()) out.push_back(std::move(word));
  }
  return out;
}

std::string shape_token(const std::string& token) {
  if (token.size() >= 4 &&
      std::all_of(token.begin(), token.end(),
                  [](char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; })) {
    return "<num>";
  }
  return token;
}

std::vector<std::string> tokenize(const std::string& text) {
  auto tokens = split_tokens(text);
  for (auto& t : tokens) t = shape_token(t);
  return tokens;
}

// ---- vocabulary ----

TokenVocab TokenVocab::build(const std::vector<std::vector<std::string>>& corpus) {
  std::set<std::string> unique;
  for (const auto& utt : corpus) {
    for (const auto& tok : utt) unique.insert(tok);
  }
  return from_tokens(std::vector<std::string>(unique.begin(), unique.end()));
}

TokenVocab TokenVocab::from_tokens(const std::vector<std::string>& non_special_tokens) {
  TokenVocab v;
  v.id_to_token = {"<pad>", "<unk>", "<cls>", "<sep>", "<mask>"};
  for (const auto& tok : non_special_tokens) v.id_to_token.push_back(tok);
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i) {
    v.token_to_id[v.id_to_token[i]] = static_cast<int>(i);
  }
  return v;
}

int TokenVocab::id_of(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? kUnk : it->second;
}

std::vector<int> TokenVocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id_of(t));
  return ids;
}

// ---- model ----

void NerConfig::validate() const {
  if (d_model <= 0 || n_layers < 0 || n_heads <= 0 || max_len <= 2) {
    fail(Errc::bad_config, "bad NER geometry");
  }
  if (d_model % n_heads != 0) fail(Errc::bad_config, "d_model must divide by n_heads");
  if (use_bilstm && lstm_hidden <= 0) fail(Errc::bad_config, "lstm_hidden must be positive");
}

NerModel NerModel::init(const NerConfig& cfg, TokenVocab vocab, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  NerModel m;
  m.cfg = cfg;
  m.vocab = std::move(vocab);
  const int v = m.vocab.size();
  const int d = cfg.d_model;
  m.tok_table = make_param({v, d}, rng);
  m.pos_table = make_param({cfg.max_len, d}, rng);
  m.seg_table = make_param({2, d}, rng);
  m.emb_ln = make_layer_norm(d);
  for (int i = 0; i < cfg.n_layers; ++i) m.blocks.push_back(make_transformer_block(d, rng));
  m.mlm_head = make_linear(d, v, rng);

  const int h = cfg.lstm_hidden;
  auto make_lstm = [&](int input) {
    LstmParams p;
    p.w = make_param({input, 4 * h}, rng);
    p.u = make_param({h, 4 * h}, rng);
    p.b = Tensor::zeros({4 * h});
    for (int j = h; j < 2 * h; ++j) p.b->data[static_cast<std::size_t>(j)] = 1.0f;  // forget gate
    p.b->requires_grad = true;
    p.b->ensure_grad();
    return p;
  };
  m.lstm_fwd = make_lstm(d);
  m.lstm_bwd = make_lstm(d);

  const int f = cfg.feature_dim();
  for (int dil : {1, 2, 4}) {
    IdcnnLayer layer;
    layer.w = make_param({f, f, 3}, rng);
    layer.b = Tensor::zeros({f});
    layer.b->requires_grad = true;
    layer.b->ensure_grad();
    layer.dilation = dil;
    m.idcnn.push_back(std::move(layer));
  }
  m.emission_proj = make_param({f, TagSet::kNumTags}, rng);
  m.transitions = make_param({TagSet::kNumTags + 2, TagSet::kNumTags + 2}, rng);
  return m;
}

std::vector<TensorPtr> NerModel::encoder_params() const {
  std::vector<TensorPtr> out = {tok_table, pos_table, seg_table};
  collect(emb_ln, out);
  for (const auto& b : blocks) collect(b, out);
  return out;
}

std::vector<TensorPtr> NerModel::mlm_params() const {
  auto out = encoder_params();
  collect(mlm_head, out);
  return out;
}

std::vector<TensorPtr> NerModel::tagger_params() const {
  auto out = encoder_params();
  if (cfg.use_bilstm) {
    for (const auto& p : {lstm_fwd, lstm_bwd}) {
      out.push_back(p.w);
      out.push_back(p.u);
      out.push_back(p.b);
    }
  }
  if (cfg.use_idcnn) {
    for (const auto& l : idcnn) {
      out.push_back(l.w);
      out.push_back(l.b);
    }
  }
  out.push_back(emission_proj);
  out.push_back(transitions);
  return out;
}

// ---- forward pieces ----

TensorPtr embed_tokens(const NerModel& model, const std::vector<int>& ids,
                       const std::vector<int>& segment_ids, TensorPtr* pre_norm) {
  const auto t_len = static_cast<int>(ids.size());
  if (t_len > model.cfg.max_len) {
    fail(Errc::sequence_too_long, "sequence of " + std::to_string(t_len) +
                                      " tokens exceeds max length " +
                                      std::to_string(model.cfg.max_len));
  }
  if (segment_ids.size() != ids.size()) {
    fail(Errc::length_mismatch, "segment ids must align with token ids");
  }
  for (int s : segment_ids) {
    if (s != 0 && s != 1) fail(Errc::index_out_of_range, "segment id must be 0 or 1");
  }
  std::vector<int> positions(static_cast<std::size_t>(t_len));
  std::iota(positions.begin(), positions.end(), 0);

  auto summed = add(add(embedding_lookup(model.tok_table, ids),
                        embedding_lookup(model.pos_table, positions)),
                    embedding_lookup(model.seg_table, segment_ids));
  if (pre_norm != nullptr) *pre_norm = summed;
  return layer_norm(summed, model.emb_ln.gamma, model.emb_ln.beta);
}

TensorPtr encode_bidirectional(const NerModel& model, const TensorPtr& emb) {
  auto h = emb;
  for (const auto& block : model.blocks) {
    h = transformer_block(h, block, model.cfg.n_heads);
  }
  return h;
}

namespace {

std::vector<TensorPtr> lstm_direction(const TensorPtr& x, const LstmParams& p, int hidden,
                                      bool reverse) {
  const int t_len = x->dim(0);
  std::vector<TensorPtr> outs(static_cast<std::size_t>(t_len));
  auto h_prev = Tensor::zeros({1, hidden});
  auto c_prev = Tensor::zeros({1, hidden});
  TensorPtr h_state = h_prev;
  TensorPtr c_state = c_prev;
  for (int step = 0; step < t_len; ++step) {
    const int t = reverse ? t_len - 1 - step : step;
    auto x_t = slice_rows(x, t, 1);
    auto z = add_rows(add(matmul(x_t, p.w), matmul(h_state, p.u)), p.b);  // [1, 4h]
    auto i_gate = sigmoid(slice_cols(z, 0, hidden));
    auto f_gate = sigmoid(slice_cols(z, hidden, hidden));
    auto o_gate = sigmoid(slice_cols(z, 2 * hidden, hidden));
    auto g_cand = tanh_op(slice_cols(z, 3 * hidden, hidden));
    c_state = add(mul(f_gate, c_state), mul(i_gate, g_cand));
    h_state = mul(o_gate, tanh_op(c_state));
    outs[static_cast<std::size_t>(t)] = h_state;
  }
  return outs;
}

}  // namespace

TensorPtr bilstm_layer(const TensorPtr& h, const LstmParams& fwd, const LstmParams& bwd,
                       int hidden) {
  const int t_len = h->dim(0);
  auto f_outs = lstm_direction(h, fwd, hidden, false);
  auto b_outs = lstm_direction(h, bwd, hidden, true);
  std::vector<TensorPtr> rows(static_cast<std::size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    std::vector<TensorPtr> parts = {f_outs[static_cast<std::size_t>(t)],
                                    b_outs[static_cast<std::size_t>(t)]};
    rows[static_cast<std::size_t>(t)] = concat_cols(parts);
  }
  return concat_rows(rows);
}

TensorPtr idcnn_elu(const TensorPtr& h, const std::vector<IdcnnLayer>& layers) {
  auto x = transpose(h);  // [f, T]
  for (const auto& layer : layers) {
    x = elu(dilated_conv1d(x, layer.w, layer.b, layer.dilation));
  }
  return add(h, transpose(x));
}

TensorPtr emissions(const TensorPtr& features, const TensorPtr& projection) {
  return matmul(features, projection);
}

TensorPtr tagger_emissions(const NerModel& model, const std::vector<int>& ids) {
  const auto t_len = static_cast<int>(ids.size());
  if (t_len == 0) return Tensor::zeros({0, TagSet::kNumTags});

  std::vector<int> full;
  full.reserve(ids.size() + 2);
  full.push_back(TokenVocab::kCls);
  full.insert(full.end(), ids.begin(), ids.end());
  full.push_back(TokenVocab::kSep);
  std::vector<int> segments(full.size(), 0);

  auto enc = encode_bidirectional(model, embed_tokens(model, full, segments));
  auto feats = slice_rows(enc, 1, t_len);  // drop CLS/SEP rows
  if (model.cfg.use_bilstm) {
    feats = bilstm_layer(feats, model.lstm_fwd, model.lstm_bwd, model.cfg.lstm_hidden);
  }
  if (model.cfg.use_idcnn) {
    feats = idcnn_elu(feats, model.idcnn);
  }
  return emissions(feats, model.emission_proj);
}

// ---- CRF ----

TensorPtr crf_nll(const TensorPtr& em, const std::vector<int>& tags,
                  const TensorPtr& transitions) {
  if (em->rank() != 2) fail(Errc::shape_mismatch, "crf_nll: emissions must be [T, K]");
  const int t_len = em->dim(0);
  const int k = em->dim(1);
  if (t_len < 1) fail(Errc::shape_mismatch, "crf_nll: need at least one frame");
  if (transitions->rank() != 2 || transitions->dim(0) != k + 2 || transitions->dim(1) != k + 2) {
    fail(Errc::shape_mismatch, "crf_nll: transitions must be [K+2, K+2]");
  }
  if (static_cast<int>(tags.size()) != t_len) {
    fail(Errc::length_mismatch, "crf_nll: tag sequence length mismatch");
  }
  for (int y : tags) {
    if (y < 0 || y >= k) fail(Errc::invalid_tag, "tag id " + std::to_string(y) + " outside [0, K)");
  }
  const int start = k;
  const int end = k + 1;

  std::vector<double> emv(em->data.size());
  if (!em->shadow.empty()) {
    emv = em->shadow;
  } else {
    for (std::size_t i = 0; i < emv.size(); ++i) emv[i] = em->data[i];
  }
  std::vector<double> trv(transitions->data.size());
  if (!transitions->shadow.empty()) {
    trv = transitions->shadow;
  } else {
    for (std::size_t i = 0; i < trv.size(); ++i) trv[i] = transitions->data[i];
  }
  auto em_at = [&](int t, int j) { return emv[static_cast<std::size_t>(t) * k + j]; };
  auto tr_at = [&](int i, int j) { return trv[static_cast<std::size_t>(i) * (k + 2) + j]; };

  // gold path score
  double score = tr_at(start, tags[0]) + em_at(0, tags[0]);
  for (int t = 1; t < t_len; ++t) {
    score += tr_at(tags[static_cast<std::size_t>(t - 1)], tags[static_cast<std::size_t>(t)]) +
             em_at(t, tags[static_cast<std::size_t>(t)]);
  }
  score += tr_at(tags[static_cast<std::size_t>(t_len - 1)], end);

  // forward recursion for logZ
  auto alpha = std::make_shared<std::vector<double>>(static_cast<std::size_t>(t_len) * k);
  auto a_at = [&](int t, int j) -> double& {
    return (*alpha)[static_cast<std::size_t>(t) * k + j];
  };
  for (int j = 0; j < k; ++j) a_at(0, j) = tr_at(start, j) + em_at(0, j);
  std::vector<double> lane(static_cast<std::size_t>(k));
  for (int t = 1; t < t_len; ++t) {
    for (int j = 0; j < k; ++j) {
      for (int i = 0; i < k; ++i) lane[static_cast<std::size_t>(i)] = a_at(t - 1, i) + tr_at(i, j);
      a_at(t, j) = em_at(t, j) + lse_row(lane);
    }
  }
  for (int j = 0; j < k; ++j) lane[static_cast<std::size_t>(j)] = a_at(t_len - 1, j) + tr_at(j, end);
  const double log_z = lse_row(lane);
  const double nll = log_z - score;

  auto out = Tensor::zeros({1});
  out->data[0] = static_cast<float>(nll);
  Tape* tape = Tape::current();
  if (tape != nullptr && tape->precise()) {
    out->shadow = {nll};
    out->data[0] = static_cast<float>(out->shadow[0]);
  }

  if (tape != nullptr && tape->recording() &&
      (em->requires_grad || transitions->requires_grad)) {
    out->requires_grad = true;
    out->ensure_grad();
    if (em->requires_grad) em->ensure_grad();
    if (transitions->requires_grad) transitions->ensure_grad();
    auto emv_s = std::make_shared<std::vector<double>>(std::move(emv));
    auto trv_s = std::make_shared<std::vector<double>>(std::move(trv));
    tape->record([em, transitions, out, alpha, emv_s, trv_s, tags, t_len, k, start, end,
                  log_z] {
      auto em_at = [&](int t, int j) { return (*emv_s)[static_cast<std::size_t>(t) * k + j]; };
      auto tr_at = [&](int i, int j) {
        return (*trv_s)[static_cast<std::size_t>(i) * (k + 2) + j];
      };
      auto a_at = [&](int t, int j) { return (*alpha)[static_cast<std::size_t>(t) * k + j]; };

      // backward vectors: beta[t][j] = log mass of suffixes given tag j at t,
      // excluding em[t][j]
      std::vector<double> beta(static_cast<std::size_t>(t_len) * k);
      auto b_at = [&](int t, int j) -> double& {
        return beta[static_cast<std::size_t>(t) * k + j];
      };
      for (int j = 0; j < k; ++j) b_at(t_len - 1, j) = tr_at(j, end);
      std::vector<double> lane(static_cast<std::size_t>(k));
      for (int t = t_len - 2; t >= 0; --t) {
        for (int j = 0; j < k; ++j) {
          for (int n = 0; n < k; ++n) {
            lane[static_cast<std::size_t>(n)] = tr_at(j, n) + em_at(t + 1, n) + b_at(t + 1, n);
          }
          b_at(t, j) = lse_row(lane);
        }
      }

      const float g = out->grad[0];
      // d nll / d em[t][j] = P(y_t = j) - [tags[t] == j]
      if (em->requires_grad) {
        for (int t = 0; t < t_len; ++t) {
          for (int j = 0; j < k; ++j) {
            double marginal = std::exp(a_at(t, j) + b_at(t, j) - log_z);
            double obs = tags[static_cast<std::size_t>(t)] == j ? 1.0 : 0.0;
            em->grad[static_cast<std::size_t>(t) * k + j] +=
                static_cast<float>(g * (marginal - obs));
          }
        }
      }
      if (transitions->requires_grad) {
        auto tgrad = [&](int i, int j) -> float& {
          return transitions->grad[static_cast<std::size_t>(i) * (k + 2) + j];
        };
        for (int j = 0; j < k; ++j) {
          double marginal = std::exp(a_at(0, j) + b_at(0, j) - log_z);
          tgrad(start, j) += static_cast<float>(g * (marginal - (tags[0] == j ? 1.0 : 0.0)));
          double end_marginal = std::exp(a_at(t_len - 1, j) + tr_at(j, end) - log_z);
          tgrad(j, end) += static_cast<float>(
              g * (end_marginal - (tags[static_cast<std::size_t>(t_len - 1)] == j ? 1.0 : 0.0)));
        }
        for (int t = 0; t + 1 < t_len; ++t) {
          for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
              double pair = std::exp(a_at(t, i) + tr_at(i, j) + em_at(t + 1, j) +
                                     b_at(t + 1, j) - log_z);
              double obs = (tags[static_cast<std::size_t>(t)] == i &&
                            tags[static_cast<std::size_t>(t + 1)] == j)
                               ? 1.0
                               : 0.0;
              tgrad(i, j) += static_cast<float>(g * (pair - obs));
            }
          }
        }
      }
    });
  }
  return out;
}

ViterbiResult viterbi(const Tensor& em, const Tensor& transitions) {
  const int t_len = em.shape[0];
  const int k = em.shape[1];
  ViterbiResult res;
  if (t_len == 0) return res;
  const int start = k;
  const int end = k + 1;
  auto em_at = [&](int t, int j) {
    return static_cast<double>(em.data[static_cast<std::size_t>(t) * k + j]);
  };
  auto tr_at = [&](int i, int j) {
    return static_cast<double>(transitions.data[static_cast<std::size_t>(i) * (k + 2) + j]);
  };

  std::vector<double> delta(static_cast<std::size_t>(t_len) * k, kNegInf);
  std::vector<int> back(static_cast<std::size_t>(t_len) * k, -1);
  for (int j = 0; j < k; ++j) delta[static_cast<std::size_t>(j)] = tr_at(start, j) + em_at(0, j);
  for (int t = 1; t < t_len; ++t) {
    for (int j = 0; j < k; ++j) {
      double best = kNegInf;
      int best_i = 0;
      for (int i = 0; i < k; ++i) {  // ascending scan keeps the lower index on ties
        double cand = delta[static_cast<std::size_t>(t - 1) * k + i] + tr_at(i, j);
        if (cand > best) {
          best = cand;
          best_i = i;
        }
      }
      delta[static_cast<std::size_t>(t) * k + j] = best + em_at(t, j);
      back[static_cast<std::size_t>(t) * k + j] = best_i;
    }
  }
  double best = kNegInf;
  int best_j = 0;
  for (int j = 0; j < k; ++j) {
    double cand = delta[static_cast<std::size_t>(t_len - 1) * k + j] + tr_at(j, end);
    if (cand > best) {
      best = cand;
      best_j = j;
    }
  }
  res.score = best;
  res.tags.assign(static_cast<std::size_t>(t_len), 0);
  res.tags[static_cast<std::size_t>(t_len - 1)] = best_j;
  for (int t = t_len - 1; t > 0; --t) {
    best_j = back[static_cast<std::size_t>(t) * k + best_j];
    res.tags[static_cast<std::size_t>(t - 1)] = best_j;
  }
  return res;
}

// ---- entities ----

std::vector<Entity> decode_entities(const std::vector<std::string>& tokens,
                                    const std::vector<int>& tags) {
  if (tokens.size() != tags.size()) {
    fail(Errc::length_mismatch, "decode_entities: tokens/tags not aligned");
  }
  std::vector<Entity> out;
  int open_start = -1;
  EntityType open_type = EntityType::PER;
  auto close = [&](int end_at) {
    if (open_start >= 0) {
      Entity e;
      e.type = open_type;
      e.start = open_start;
      e.end = end_at;
      for (int i = open_start; i < end_at; ++i) {
        if (i > open_start) e.text.push_back(' ');
        e.text += tokens[static_cast<std::size_t>(i)];
      }
      out.push_back(std::move(e));
      open_start = -1;
    }
  };
  for (int t = 0; t < static_cast<int>(tags.size()); ++t) {
    const int tag = tags[static_cast<std::size_t>(t)];
    if (tag == TagSet::kO) {
      close(t);
    } else if (TagSet::is_b(tag)) {
      close(t);
      open_start = t;
      open_type = TagSet::type_of(tag);
    } else if (TagSet::is_i(tag)) {
      EntityType ty = TagSet::type_of(tag);
      if (open_start < 0 || ty != open_type) {
        // lenient repair: stray I-X opens a new X entity
        close(t);
        open_start = t;
        open_type = ty;
      }
    } else {
      fail(Errc::invalid_tag, "tag id " + std::to_string(tag) + " out of range");
    }
  }
  close(static_cast<int>(tags.size()));
  return out;
}

std::vector<int> entities_to_bio(const std::vector<Entity>& entities, int n_tokens) {
  std::vector<int> tags(static_cast<std::size_t>(n_tokens), TagSet::kO);
  for (const auto& e : entities) {
    if (e.start < 0 || e.end > n_tokens || e.start >= e.end) {
      fail(Errc::index_out_of_range, "entity span outside the token range");
    }
    tags[static_cast<std::size_t>(e.start)] = TagSet::b_tag(e.type);
    for (int t = e.start + 1; t < e.end; ++t) {
      tags[static_cast<std::size_t>(t)] = TagSet::i_tag(e.type);
    }
  }
  return tags;
}

F1Scores f1_eval(const std::vector<std::vector<Entity>>& pred,
                 const std::vector<std::vector<Entity>>& gold) {
  if (pred.size() != gold.size()) fail(Errc::length_mismatch, "f1_eval: list sizes differ");
  long tp = 0, n_pred = 0, n_gold = 0;
  for (std::size_t u = 0; u < pred.size(); ++u) {
    std::set<std::tuple<int, int, int>> gold_set;
    for (const auto& e : gold[u]) {
      gold_set.insert({static_cast<int>(e.type), e.start, e.end});
    }
    for (const auto& e : pred[u]) {
      if (gold_set.count({static_cast<int>(e.type), e.start, e.end}) > 0) ++tp;
    }
    n_pred += static_cast<long>(pred[u].size());
    n_gold += static_cast<long>(gold[u].size());
  }
  F1Scores s;
  s.precision = n_pred > 0 ? static_cast<double>(tp) / static_cast<double>(n_pred) : 0.0;
  s.recall = n_gold > 0 ? static_cast<double>(tp) / static_cast<double>(n_gold) : 0.0;
  s.f1 = (s.precision + s.recall) > 0.0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  return s;
}

// ---- training ----

TensorPtr mlm_batch_loss(const NerModel& model, const std::vector<std::vector<int>>& id_batch,
                         Rng& rng, float select_prob, int* correct, int* selected) {
  const int v = model.vocab.size();
  TensorPtr loss_sum;
  int n_selected = 0;
  int n_correct = 0;

  for (const auto& ids : id_batch) {
    const auto t_len = static_cast<int>(ids.size());
    if (t_len == 0) continue;

    std::vector<int> full;
    full.reserve(ids.size() + 2);
    full.push_back(TokenVocab::kCls);
    full.insert(full.end(), ids.begin(), ids.end());
    full.push_back(TokenVocab::kSep);

    // select positions among the real tokens (indices 1..T in `full`)
    std::vector<int> chosen;
    for (int t = 1; t <= t_len; ++t) {
      if (rng.uniform() < static_cast<double>(select_prob)) chosen.push_back(t);
    }
    if (chosen.empty()) chosen.push_back(1 + rng.uniform_int(t_len));

    std::vector<int> corrupted = full;
    std::vector<int> targets;
    for (int t : chosen) {
      targets.push_back(full[static_cast<std::size_t>(t)]);
      double r = rng.uniform();
      if (r < 0.8) {
        corrupted[static_cast<std::size_t>(t)] = TokenVocab::kMask;
      } else if (r < 0.9) {
        corrupted[static_cast<std::size_t>(t)] =
            TokenVocab::kNumSpecials + rng.uniform_int(v - TokenVocab::kNumSpecials);
      }  // else unchanged
    }

    std::vector<int> segments(corrupted.size(), 0);
    auto enc = encode_bidirectional(model, embed_tokens(model, corrupted, segments));
    std::vector<TensorPtr> rows;
    rows.reserve(chosen.size());
    for (int t : chosen) rows.push_back(slice_rows(enc, t, 1));
    auto logits = affine(concat_rows(rows), model.mlm_head);  // [n_sel, V]
    auto log_probs = log_softmax(logits, -1);
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      auto nll = neg(pick(log_probs, static_cast<std::int64_t>(i) * v + targets[i]));
      loss_sum = loss_sum ? add(loss_sum, nll) : nll;
      ++n_selected;
      const float* row = logits->data.data() + i * static_cast<std::size_t>(v);
      int arg = 0;
      for (int j = 1; j < v; ++j) {
        if (row[j] > row[arg]) arg = j;
      }
      if (arg == targets[i]) ++n_correct;
    }
  }
  if (loss_sum == nullptr) fail(Errc::empty_corpus, "no tokens to mask");
  if (correct != nullptr) *correct = n_correct;
  if (selected != nullptr) *selected = n_selected;
  return scale(loss_sum, 1.0 / n_selected);
}

std::vector<double> mlm_pretrain(NerModel& model,
                                 const std::vector<std::vector<std::string>>& corpus,
                                 const MlmOptions& opts) {
  if (corpus.empty()) fail(Errc::empty_corpus, "MLM corpus is empty");
  std::vector<std::vector<int>> encoded;
  encoded.reserve(corpus.size());
  for (const auto& utt : corpus) encoded.push_back(model.vocab.encode(utt));

  auto params = model.mlm_params();
  AdamState adam;
  adam.init(params);
  Rng rng(opts.seed);

  std::vector<int> order(encoded.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> schedule;
  std::vector<double> history;

  for (int step = 0; step < opts.steps; ++step) {
    std::vector<std::vector<int>> batch;
    for (int b = 0; b < std::max(1, opts.batch_size); ++b) {
      if (schedule.empty()) {
        schedule = order;
        rng.shuffle(schedule);
      }
      batch.push_back(encoded[static_cast<std::size_t>(schedule.back())]);
      schedule.pop_back();
    }
    zero_grads(params);
    Tape tape;
    auto loss = mlm_batch_loss(model, batch, rng, opts.select_prob);
    tape.backward(loss);
    adam_step(params, adam, opts.lr);
    history.push_back(static_cast<double>(loss->data[0]));
    if (opts.log_every > 0 && (step + 1) % opts.log_every == 0) {
      W2E_INFO("step=%d loss=%.6f", step + 1, history.back());
    }
  }
  return history;
}

std::vector<double> train_ner(NerModel& model, const std::vector<LabeledTokens>& corpus,
                              const NerTrainOptions& opts) {
  if (corpus.empty()) fail(Errc::empty_corpus, "NER training corpus is empty");
  for (const auto& ex : corpus) {
    if (ex.tokens.size() != ex.tags.size()) {
      fail(Errc::length_mismatch, "tokens/tags not aligned");
    }
    for (int tag : ex.tags) {
      if (tag < 0 || tag >= TagSet::kNumTags) {
        fail(Errc::tag_vocab_mismatch, "tag id " + std::to_string(tag) + " outside the tag set");
      }
    }
  }

  std::vector<std::vector<int>> encoded;
  encoded.reserve(corpus.size());
  for (const auto& ex : corpus) encoded.push_back(model.vocab.encode(ex.tokens));

  auto params = model.tagger_params();
  AdamState adam;
  adam.init(params);
  Rng rng(opts.seed);

  std::vector<int> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> schedule;
  std::vector<double> history;

  for (int step = 0; step < opts.steps; ++step) {
    zero_grads(params);
    Tape tape;
    TensorPtr loss_sum;
    int used = 0;
    for (int b = 0; b < std::max(1, opts.batch_size); ++b) {
      if (schedule.empty()) {
        schedule = order;
        rng.shuffle(schedule);
      }
      const int id = schedule.back();
      schedule.pop_back();
      const auto& ex = corpus[static_cast<std::size_t>(id)];
      if (ex.tokens.empty()) continue;
      auto em = tagger_emissions(model, encoded[static_cast<std::size_t>(id)]);
      auto nll = crf_nll(em, ex.tags, model.transitions);
      loss_sum = loss_sum ? add(loss_sum, nll) : nll;
      ++used;
    }
    if (loss_sum == nullptr) continue;
    auto loss = scale(loss_sum, 1.0 / used);
    tape.backward(loss);
    adam_step(params, adam, opts.lr);
    history.push_back(static_cast<double>(loss->data[0]));
    if (opts.log_every > 0 && (step + 1) % opts.log_every == 0) {
      W2E_INFO("step=%d loss=%.6f", step + 1, history.back());
    }
  }
  return history;
}

std::vector<int> tag_tokens(const NerModel& model, const std::vector<std::string>& tokens) {
  if (tokens.empty()) return {};
  Tape off(/*precise=*/false, /*record=*/false);
  auto em = tagger_emissions(model, model.vocab.encode(tokens));
  return viterbi(*em, *model.transitions).tags;
}

}  // namespace w2e
