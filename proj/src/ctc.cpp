// CTC: forward-algorithm loss with alpha/beta gradients, greedy and prefix
// beam decoding, supervised fine-tuning, edit-distance metrics.

#include "w2e/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "w2e/error.hpp"
#include "w2e/log.hpp"
#include "w2e/ops.hpp"

namespace w2e {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse2(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

double lse3(double a, double b, double c) { return lse2(lse2(a, b), c); }

}  // namespace

const CtcVocab& CtcVocab::default_vocab() {
  static const CtcVocab v;
  return v;
}

int CtcVocab::id_of(char c) const {
  auto pos = chars.find(c);
  return pos == std::string::npos ? -1 : static_cast<int>(pos) + 1;
}

char CtcVocab::char_of(int id) const {
  return chars.at(static_cast<std::size_t>(id - 1));
}

std::vector<int> CtcVocab::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) {
    int id = id_of(c);
    if (id < 0) {
      fail(Errc::vocab_violation, std::string("character '") + c + "' not in the CTC vocabulary");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string CtcVocab::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(char_of(id));
  return out;
}

TensorPtr project_logits(const TensorPtr& context, const LinearParams& head) {
  return log_softmax(affine(context, head), -1);
}

TensorPtr ctc_nll(const TensorPtr& log_probs, const std::vector<int>& target) {
  if (log_probs->rank() != 2) fail(Errc::shape_mismatch, "ctc_nll: log_probs must be [T, C]");
  const int t_len = log_probs->dim(0);
  const int n_classes = log_probs->dim(1);
  const auto l_len = static_cast<int>(target.size());

  int dup_pairs = 0;
  for (int i = 0; i < l_len; ++i) {
    if (target[static_cast<std::size_t>(i)] <= 0 ||
        target[static_cast<std::size_t>(i)] >= n_classes) {
      fail(Errc::invalid_tag, "ctc target id outside [1, C)");
    }
    if (i > 0 && target[static_cast<std::size_t>(i)] == target[static_cast<std::size_t>(i - 1)]) {
      ++dup_pairs;
    }
  }
  if (l_len + dup_pairs > t_len) {
    fail(Errc::target_too_long, "no alignment: need " + std::to_string(l_len + dup_pairs) +
                                    " frames, have " + std::to_string(t_len));
  }

  // extended sequence l': blanks interleaved, length 2L+1
  const int s_len = 2 * l_len + 1;
  std::vector<int> ext(static_cast<std::size_t>(s_len), 0);
  for (int i = 0; i < l_len; ++i) ext[static_cast<std::size_t>(2 * i + 1)] = target[static_cast<std::size_t>(i)];

  // log-probabilities in double (shadow when present)
  std::vector<double> lp(log_probs->data.size());
  if (!log_probs->shadow.empty()) {
    lp = log_probs->shadow;
  } else {
    for (std::size_t i = 0; i < lp.size(); ++i) lp[i] = log_probs->data[i];
  }
  auto lpat = [&](int t, int k) { return lp[static_cast<std::size_t>(t) * n_classes + k]; };

  auto alpha = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(t_len) * s_len, kNegInf);
  auto a_at = [&](int t, int s) -> double& {
    return (*alpha)[static_cast<std::size_t>(t) * s_len + s];
  };

  a_at(0, 0) = lpat(0, ext[0]);
  if (s_len > 1) a_at(0, 1) = lpat(0, ext[1]);
  for (int t = 1; t < t_len; ++t) {
    for (int s = 0; s < s_len; ++s) {
      double best = a_at(t - 1, s);
      if (s >= 1) best = lse2(best, a_at(t - 1, s - 1));
      if (s >= 2 && ext[static_cast<std::size_t>(s)] != 0 &&
          ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)]) {
        best = lse2(best, a_at(t - 1, s - 2));
      }
      if (best != kNegInf) a_at(t, s) = best + lpat(t, ext[static_cast<std::size_t>(s)]);
    }
  }
  double log_p = a_at(t_len - 1, s_len - 1);
  if (s_len > 1) log_p = lse2(log_p, a_at(t_len - 1, s_len - 2));
  if (log_p == kNegInf) fail(Errc::target_too_long, "alignment probability underflowed to zero");

  auto out = Tensor::zeros({1});
  out->data[0] = static_cast<float>(-log_p);
  Tape* tape = Tape::current();
  if (tape != nullptr && tape->precise()) {
    out->shadow = {-log_p};
    out->data[0] = static_cast<float>(out->shadow[0]);
  }

  if (tape != nullptr && tape->recording() && log_probs->requires_grad) {
    out->requires_grad = true;
    out->ensure_grad();
    log_probs->ensure_grad();
    auto lp_shared = std::make_shared<std::vector<double>>(std::move(lp));
    tape->record([log_probs, out, alpha, lp_shared, ext, t_len, s_len, n_classes, log_p] {
      // beta recursion, then occupancy gamma = alpha + beta - emission
      std::vector<double> beta(static_cast<std::size_t>(t_len) * s_len, kNegInf);
      auto b_at = [&](int t, int s) -> double& {
        return beta[static_cast<std::size_t>(t) * s_len + s];
      };
      auto lpat = [&](int t, int k) {
        return (*lp_shared)[static_cast<std::size_t>(t) * n_classes + k];
      };
      b_at(t_len - 1, s_len - 1) = lpat(t_len - 1, ext[static_cast<std::size_t>(s_len - 1)]);
      if (s_len > 1) b_at(t_len - 1, s_len - 2) = lpat(t_len - 1, ext[static_cast<std::size_t>(s_len - 2)]);
      for (int t = t_len - 2; t >= 0; --t) {
        for (int s = 0; s < s_len; ++s) {
          double best = b_at(t + 1, s);
          if (s + 1 < s_len) best = lse2(best, b_at(t + 1, s + 1));
          if (s + 2 < s_len && ext[static_cast<std::size_t>(s + 2)] != 0 &&
              ext[static_cast<std::size_t>(s + 2)] != ext[static_cast<std::size_t>(s)]) {
            best = lse2(best, b_at(t + 1, s + 2));
          }
          if (best != kNegInf) b_at(t, s) = best + lpat(t, ext[static_cast<std::size_t>(s)]);
        }
      }
      const float g = out->grad[0];
      for (int t = 0; t < t_len; ++t) {
        for (int s = 0; s < s_len; ++s) {
          const double a = (*alpha)[static_cast<std::size_t>(t) * s_len + s];
          const double b = beta[static_cast<std::size_t>(t) * s_len + s];
          if (a == kNegInf || b == kNegInf) continue;
          const int k = ext[static_cast<std::size_t>(s)];
          // d(-logP)/d lp[t][k] -= exp(alpha + beta - lp - logP)
          const double occ = std::exp(a + b - lpat(t, k) - log_p);
          log_probs->grad[static_cast<std::size_t>(t) * n_classes + k] -=
              static_cast<float>(g * occ);
        }
      }
    });
  }
  return out;
}

std::string greedy_decode(const Tensor& log_probs, const CtcVocab& vocab) {
  const int t_len = log_probs.shape[0];
  const int n_classes = log_probs.shape[1];
  std::string out;
  int prev = -1;
  for (int t = 0; t < t_len; ++t) {
    const float* row = log_probs.data.data() + static_cast<std::size_t>(t) * n_classes;
    int best = 0;
    for (int k = 1; k < n_classes; ++k) {
      if (row[k] > row[best]) best = k;  // ties keep the lower id
    }
    if (best != prev && best != CtcVocab::blank_id) out.push_back(vocab.char_of(best));
    prev = best;
  }
  return out;
}

std::string beam_decode(const Tensor& log_probs, const CtcVocab& vocab, int width) {
  if (width < 1) width = 1;
  const int t_len = log_probs.shape[0];
  const int n_classes = log_probs.shape[1];

  struct Mass {
    double blank = kNegInf;     // paths ending in blank
    double non_blank = kNegInf; // paths ending in the last prefix symbol
    double total() const { return lse2(blank, non_blank); }
  };

  std::map<std::vector<int>, Mass> beam;
  beam[{}] = Mass{0.0, kNegInf};

  for (int t = 0; t < t_len; ++t) {
    const float* row = log_probs.data.data() + static_cast<std::size_t>(t) * n_classes;
    std::map<std::vector<int>, Mass> next;
    for (const auto& [prefix, mass] : beam) {
      // blank keeps the prefix
      {
        Mass& m = next[prefix];
        m.blank = lse2(m.blank, row[CtcVocab::blank_id] + mass.total());
      }
      for (int c = 1; c < n_classes; ++c) {
        const double p = row[c];
        if (!prefix.empty() && prefix.back() == c) {
          // same symbol: without a separating blank it extends the run
          Mass& same = next[prefix];
          same.non_blank = lse2(same.non_blank, p + mass.non_blank);
          auto grown = prefix;
          grown.push_back(c);
          Mass& g = next[grown];
          g.non_blank = lse2(g.non_blank, p + mass.blank);
        } else {
          auto grown = prefix;
          grown.push_back(c);
          Mass& g = next[grown];
          g.non_blank = lse2(g.non_blank, p + mass.total());
        }
      }
    }
    if (static_cast<int>(next.size()) > width) {
      std::vector<std::pair<double, const std::vector<int>*>> ranked;
      ranked.reserve(next.size());
      for (const auto& [prefix, mass] : next) ranked.emplace_back(mass.total(), &prefix);
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });
      std::map<std::vector<int>, Mass> pruned;
      for (int i = 0; i < width; ++i) pruned[*ranked[static_cast<std::size_t>(i)].second] =
          next[*ranked[static_cast<std::size_t>(i)].second];
      next = std::move(pruned);
    }
    beam = std::move(next);
  }

  const std::vector<int>* best = nullptr;
  double best_p = kNegInf;
  for (const auto& [prefix, mass] : beam) {
    double p = mass.total();
    if (best == nullptr || p > best_p) {
      best = &prefix;
      best_p = p;
    }
  }
  return best != nullptr ? vocab.decode(*best) : std::string();
}

std::vector<double> finetune(AcousticModel& model, const std::vector<Waveform>& audio,
                             const std::vector<std::string>& transcripts,
                             const FinetuneOptions& opts) {
  if (audio.size() != transcripts.size()) {
    fail(Errc::length_mismatch, "audio/transcript list sizes differ");
  }
  if (audio.empty()) fail(Errc::empty_manifest, "fine-tuning corpus is empty");

  const auto& vocab = CtcVocab::default_vocab();
  std::vector<std::vector<int>> targets;
  targets.reserve(transcripts.size());
  for (const auto& text : transcripts) targets.push_back(vocab.encode(text));

  if (!model.has_ctc_head) {
    Rng head_rng(Rng::derive(opts.seed, 0x4ead));
    model.ctc_head = make_linear(model.cfg.d_model, vocab.size(), head_rng);
    model.has_ctc_head = true;
  }

  // the conv feature extractor stays frozen during fine-tuning
  auto frozen = model.conv_params();
  std::vector<bool> was_trainable;
  for (const auto& p : frozen) {
    was_trainable.push_back(p->requires_grad);
    p->requires_grad = false;
  }

  std::vector<TensorPtr> params = model.context_params();
  params.push_back(model.ctc_head.w);
  params.push_back(model.ctc_head.b);

  // with frozen convs, Z per utterance is constant; compute it once
  std::vector<TensorPtr> features(audio.size());
  auto feature_of = [&](std::size_t i) -> TensorPtr {
    if (!opts.cache_features) return feature_encoder(model, standardize(audio[i]));
    if (!features[i]) {
      Tape off(/*precise=*/false, /*record=*/false);
      features[i] = feature_encoder(model, standardize(audio[i]));
    }
    return features[i];
  };

  Rng rng(opts.seed);
  AdamState adam;
  adam.init(params);
  std::vector<double> history;

  const int batch = std::max(1, opts.batch_size);
  std::vector<int> order(audio.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> schedule;

  for (int step = 0; step < opts.steps; ++step) {
    zero_grads(params);
    Tape tape;
    TensorPtr batch_loss;
    for (int bi = 0; bi < batch; ++bi) {
      if (schedule.empty()) {
        schedule = order;
        rng.shuffle(schedule);
      }
      const int id = schedule.back();
      schedule.pop_back();
      auto z = feature_of(static_cast<std::size_t>(id));
      auto ctx = context_network(model, z);
      auto lp = project_logits(ctx, model.ctc_head);
      auto loss = ctc_nll(lp, targets[static_cast<std::size_t>(id)]);
      batch_loss = batch_loss ? add(batch_loss, loss) : loss;
    }
    auto mean_loss = scale(batch_loss, 1.0 / batch);
    tape.backward(mean_loss);
    adam_step(params, adam, opts.lr);
    history.push_back(static_cast<double>(mean_loss->data[0]));
    if (opts.log_every > 0 && (step + 1) % opts.log_every == 0) {
      W2E_INFO("step=%d loss=%.6f", step + 1, history.back());
    }
  }

  for (std::size_t i = 0; i < frozen.size(); ++i) frozen[i]->requires_grad = was_trainable[i];
  return history;
}

namespace {

template <class Seq>
int levenshtein(const Seq& a, const Seq& b) {
  const auto n = static_cast<int>(a.size());
  const auto m = static_cast<int>(b.size());
  std::vector<int> prev(static_cast<std::size_t>(m) + 1);
  std::vector<int> cur(static_cast<std::size_t>(m) + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (int i = 1; i <= n; ++i) {
    cur[0] = i;
    for (int j = 1; j <= m; ++j) {
      int sub = prev[static_cast<std::size_t>(j - 1)] +
                (a[static_cast<std::size_t>(i - 1)] == b[static_cast<std::size_t>(j - 1)] ? 0 : 1);
      cur[static_cast<std::size_t>(j)] =
          std::min({sub, prev[static_cast<std::size_t>(j)] + 1, cur[static_cast<std::size_t>(j - 1)] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[static_cast<std::size_t>(m)];
}

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> words;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

}  // namespace

int edit_distance(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  return levenshtein(a, b);
}

int edit_distance(const std::string& a, const std::string& b) { return levenshtein(a, b); }

ErrorRates edit_distance_rates(const std::vector<std::string>& refs,
                               const std::vector<std::string>& hyps) {
  if (refs.size() != hyps.size()) fail(Errc::length_mismatch, "refs/hyps not aligned");
  long word_dist = 0, word_total = 0;
  long char_dist = 0, char_total = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    auto ref_words = split_words(refs[i]);
    auto hyp_words = split_words(hyps[i]);
    word_dist += edit_distance(ref_words, hyp_words);
    word_total += static_cast<long>(ref_words.size());
    char_dist += edit_distance(refs[i], hyps[i]);
    char_total += static_cast<long>(refs[i].size());
  }
  ErrorRates rates;
  rates.wer = word_total > 0 ? static_cast<double>(word_dist) / static_cast<double>(word_total)
                             : (word_dist > 0 ? 1.0 : 0.0);
  rates.cer = char_total > 0 ? static_cast<double>(char_dist) / static_cast<double>(char_total)
                             : (char_dist > 0 ? 1.0 : 0.0);
  return rates;
}

}  // namespace w2e
