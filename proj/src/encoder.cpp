// Wav2vec-style acoustic encoder: conv feature extractor, span masking,
// gumbel quantization, transformer context network, contrastive objective.

#include "w2e/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "w2e/error.hpp"
#include "w2e/log.hpp"
#include "w2e/ops.hpp"

namespace w2e {

namespace {

int argmax_span(const float* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// cos(a, b) for [1, d] rows with the 1e-8 denominator guard
TensorPtr cosine_rows(const TensorPtr& a, const TensorPtr& b) {
  auto dot = sum(mul(a, b));
  auto na = sqrt_op(sum(mul(a, a)));
  auto nb = sqrt_op(sum(mul(b, b)));
  return div(dot, add_scalar(mul(na, nb), 1e-8));
}

}  // namespace

void EncoderConfig::validate() const {
  if (conv_spec.empty()) fail(Errc::bad_config, "conv_spec must not be empty");
  for (const auto& l : conv_spec) {
    if (l[0] <= 0 || l[1] <= 0 || l[2] <= 0) fail(Errc::bad_config, "conv_spec entries must be positive");
  }
  if (conv_spec.back()[0] != d_model) fail(Errc::bad_config, "last conv layer must emit d_model channels");
  if (d_model <= 0 || n_layers < 0 || n_heads <= 0) fail(Errc::bad_config, "bad geometry");
  if (d_model % n_heads != 0) fail(Errc::bad_config, "d_model must divide by n_heads");
  if (d_model % groups != 0) fail(Errc::bad_config, "d_model must divide by groups");
  if (!(mask_prob > 0.0f && mask_prob <= 1.0f)) fail(Errc::bad_config, "mask_prob outside (0, 1]");
  if (mask_span <= 0 || groups <= 0 || entries <= 0 || distractors <= 0) {
    fail(Errc::bad_config, "mask_span, groups, entries, distractors must be positive");
  }
  if (kappa <= 0.0f || tau <= 0.0f) fail(Errc::bad_config, "temperatures must be positive");
}

int EncoderConfig::receptive_field() const {
  int rf = 1;
  int jump = 1;
  for (const auto& l : conv_spec) {
    rf += (l[1] - 1) * jump;
    jump *= l[2];
  }
  return rf;
}

int EncoderConfig::output_length(int n_samples) const {
  int t = n_samples;
  for (const auto& l : conv_spec) {
    if (t < l[1]) fail(Errc::input_too_short, "input shorter than the conv receptive field");
    t = (t - l[1]) / l[2] + 1;
  }
  return t;
}

AcousticModel AcousticModel::init(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  AcousticModel m;
  m.cfg = cfg;
  int c_in = 1;
  for (const auto& l : cfg.conv_spec) {
    ConvLayer layer;
    layer.w = make_param({l[0], c_in, l[1]}, rng);
    layer.b = Tensor::zeros({l[0]});
    layer.b->requires_grad = true;
    layer.b->ensure_grad();
    layer.ln = make_layer_norm(l[0]);
    layer.stride = l[2];
    m.convs.push_back(std::move(layer));
    c_in = l[0];
  }
  m.mask_vector = make_param({cfg.d_model}, rng);
  m.quant_proj = make_linear(cfg.d_model, cfg.groups * cfg.entries, rng);
  m.codebook = make_param({cfg.groups * cfg.entries, cfg.d_model / cfg.groups}, rng);
  for (int i = 0; i < cfg.n_layers; ++i) {
    m.blocks.push_back(make_transformer_block(cfg.d_model, rng));
  }
  m.final_ln = make_layer_norm(cfg.d_model);
  return m;
}

std::vector<TensorPtr> AcousticModel::conv_params() const {
  std::vector<TensorPtr> out;
  for (const auto& l : convs) {
    out.push_back(l.w);
    out.push_back(l.b);
    collect(l.ln, out);
  }
  return out;
}

std::vector<TensorPtr> AcousticModel::context_params() const {
  std::vector<TensorPtr> out;
  for (const auto& b : blocks) collect(b, out);
  collect(final_ln, out);
  return out;
}

std::vector<TensorPtr> AcousticModel::quantizer_params() const {
  std::vector<TensorPtr> out;
  out.push_back(mask_vector);
  collect(quant_proj, out);
  out.push_back(codebook);
  return out;
}

std::vector<TensorPtr> AcousticModel::pretrain_params() const {
  auto out = conv_params();
  auto q = quantizer_params();
  auto c = context_params();
  out.insert(out.end(), q.begin(), q.end());
  out.insert(out.end(), c.begin(), c.end());
  return out;
}

std::vector<TensorPtr> AcousticModel::all_params() const {
  auto out = pretrain_params();
  if (has_ctc_head) {
    out.push_back(ctc_head.w);
    out.push_back(ctc_head.b);
  }
  return out;
}

TensorPtr feature_encoder(const AcousticModel& model, const Waveform& standardized) {
  const auto n = static_cast<int>(standardized.samples.size());
  if (n < model.cfg.receptive_field()) {
    fail(Errc::input_too_short, "waveform shorter than the encoder receptive field");
  }
  auto x = Tensor::from({1, n}, standardized.samples);
  for (const auto& layer : model.convs) {
    auto y = conv1d(x, layer.w, layer.b, layer.stride);  // [c, T]
    auto yt = transpose(y);                              // [T, c]
    auto normed = gelu(layer_norm(yt, layer.ln.gamma, layer.ln.beta));
    x = transpose(normed);
  }
  return transpose(x);  // [T_z, d_model]
}

TensorPtr apply_time_mask(const TensorPtr& z, const AcousticModel& model, Rng& rng,
                          MaskInfo* info) {
  const int t_z = z->dim(0);
  const auto& cfg = model.cfg;
  if (t_z < cfg.mask_span) fail(Errc::input_too_short, "sequence shorter than one mask span");

  std::vector<bool> masked(static_cast<std::size_t>(t_z), false);
  bool any = false;
  for (int t = 0; t < t_z; ++t) {
    if (rng.uniform() < static_cast<double>(cfg.mask_prob)) {
      for (int s = t; s < std::min(t + cfg.mask_span, t_z); ++s) masked[static_cast<std::size_t>(s)] = true;
      any = true;
    }
  }
  if (!any) {
    int start = rng.uniform_int(t_z);
    for (int s = start; s < std::min(start + cfg.mask_span, t_z); ++s) {
      masked[static_cast<std::size_t>(s)] = true;
    }
  }
  std::vector<int> rows;
  for (int t = 0; t < t_z; ++t) {
    if (masked[static_cast<std::size_t>(t)]) rows.push_back(t);
  }
  if (info != nullptr) info->masked = rows;
  return mask_rows(z, rows, model.mask_vector);
}

QuantizeResult quantize_gumbel(const TensorPtr& z_frame, const AcousticModel& model,
                               double tau, bool training, Rng& rng) {
  const auto& cfg = model.cfg;
  const int v = cfg.entries;
  const int entry_dim = cfg.d_model / cfg.groups;

  QuantizeResult out;
  auto logits = affine(z_frame, model.quant_proj);  // [1, G*V]

  std::vector<TensorPtr> group_q;
  std::vector<TensorPtr> group_soft;
  std::vector<TensorPtr> group_usage;
  for (int g = 0; g < cfg.groups; ++g) {
    auto lg = slice_cols(logits, g * v, v);  // [1, V]
    auto entries = slice_rows(model.codebook, g * v, v);  // [V, entry_dim]
    if (training) {
      auto noise = Tensor::zeros({1, v});
      for (auto& x : noise->data) x = static_cast<float>(rng.gumbel());
      auto soft = softmax(scale(add(lg, noise), 1.0 / tau), -1);
      int k_star = argmax_span(soft->data.data(), v);
      out.indices.push_back(k_star);
      // straight-through selector: one-hot value, soft gradient path
      auto correction = Tensor::zeros({1, v});
      for (int j = 0; j < v; ++j) {
        correction->data[static_cast<std::size_t>(j)] =
            (j == k_star ? 1.0f : 0.0f) - soft->data[static_cast<std::size_t>(j)];
      }
      auto selector = add(soft, correction);
      group_q.push_back(matmul(selector, entries));
      group_soft.push_back(soft);
      // usage is the noise-free assignment propensity; the tempered gumbel
      // distribution stays near uniform and would hide argmax collapse
      group_usage.push_back(softmax(lg, -1));
    } else {
      int k_star = argmax_span(lg->data.data(), v);
      out.indices.push_back(k_star);
      group_q.push_back(slice_rows(entries, k_star, 1));
    }
  }
  out.q = concat_cols(group_q);
  if (training) {
    out.soft = concat_rows(group_soft);    // [G, V]
    out.usage = concat_rows(group_usage);  // [G, V]
  }
  (void)entry_dim;
  return out;
}

TensorPtr context_network(const AcousticModel& model, const TensorPtr& z_masked) {
  auto pe = sinusoidal_positions(z_masked->dim(0), z_masked->dim(1));
  auto h = add(z_masked, pe);
  for (const auto& block : model.blocks) {
    h = transformer_block(h, block, model.cfg.n_heads);
  }
  return layer_norm(h, model.final_ln.gamma, model.final_ln.beta);
}

TensorPtr contrastive_loss(const TensorPtr& c, const std::vector<TensorPtr>& q_masked,
                           const MaskInfo& info, double kappa, int k_distractors,
                           Rng& rng) {
  const auto n = static_cast<int>(info.masked.size());
  if (n < 2) fail(Errc::insufficient_masked_frames, "need at least 2 masked frames");
  if (q_masked.size() != info.masked.size()) {
    fail(Errc::length_mismatch, "one quantized target per masked frame required");
  }

  TensorPtr acc;
  std::vector<int> pool(static_cast<std::size_t>(n - 1));
  for (int i = 0; i < n; ++i) {
    const int t = info.masked[static_cast<std::size_t>(i)];
    auto c_t = slice_rows(c, t, 1);

    // distractors: other masked frames of the same utterance
    int at = 0;
    for (int j = 0; j < n; ++j) {
      if (j != i) pool[static_cast<std::size_t>(at++)] = j;
    }
    std::vector<int> chosen;
    if (static_cast<int>(pool.size()) >= k_distractors) {
      // partial Fisher-Yates: first K of a seeded shuffle
      for (int d = 0; d < k_distractors; ++d) {
        int swap_at = d + rng.uniform_int(static_cast<int>(pool.size()) - d);
        std::swap(pool[static_cast<std::size_t>(d)], pool[static_cast<std::size_t>(swap_at)]);
        chosen.push_back(pool[static_cast<std::size_t>(d)]);
      }
    } else {
      for (int d = 0; d < k_distractors; ++d) {
        chosen.push_back(pool[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())))]);
      }
    }

    std::vector<TensorPtr> logits;
    logits.push_back(scale(cosine_rows(c_t, q_masked[static_cast<std::size_t>(i)]), 1.0 / kappa));
    for (int j : chosen) {
      logits.push_back(scale(cosine_rows(c_t, q_masked[static_cast<std::size_t>(j)]), 1.0 / kappa));
    }
    auto frame_loss = neg(pick(log_softmax(concat_rows(logits), 0), 0));
    acc = acc ? add(acc, frame_loss) : frame_loss;
  }
  return scale(acc, 1.0 / n);
}

TensorPtr diversity_loss(const TensorPtr& mean_soft_probs) {
  const int g = mean_soft_probs->dim(0);
  const int v = mean_soft_probs->dim(1);
  TensorPtr acc;
  for (int gi = 0; gi < g; ++gi) {
    auto p = slice_rows(mean_soft_probs, gi, 1);
    auto entropy = neg(sum(xlogx(p)));
    auto term = scale(add_scalar(neg(exp_op(entropy)), static_cast<double>(v)), 1.0 / v);
    acc = acc ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / g);
}

PretrainStats pretrain(AcousticModel& model, const std::vector<Waveform>& corpus,
                       const PretrainOptions& opts) {
  if (corpus.empty()) fail(Errc::empty_manifest, "pretraining corpus is empty");
  const auto& cfg = model.cfg;
  Rng rng(opts.seed);

  // bucket by length so batch-min truncation wastes little audio
  std::vector<int> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return corpus[static_cast<std::size_t>(a)].samples.size() <
           corpus[static_cast<std::size_t>(b)].samples.size();
  });
  const int batch = std::max(1, opts.batch_size);
  std::vector<std::vector<int>> batches;
  for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch)) {
    std::vector<int> b(order.begin() + static_cast<std::ptrdiff_t>(at),
                       order.begin() + static_cast<std::ptrdiff_t>(
                                           std::min(at + static_cast<std::size_t>(batch), order.size())));
    batches.push_back(std::move(b));
  }

  auto params = model.pretrain_params();
  AdamState adam;
  adam.init(params);
  PretrainStats stats;

  std::vector<std::vector<int>> schedule;
  for (int step = 0; step < opts.steps; ++step) {
    if (schedule.empty()) {
      schedule = batches;
      rng.shuffle(schedule);
    }
    std::vector<int> batch_ids = schedule.back();
    schedule.pop_back();

    std::size_t min_len = corpus[static_cast<std::size_t>(batch_ids[0])].samples.size();
    for (int id : batch_ids) {
      min_len = std::min(min_len, corpus[static_cast<std::size_t>(id)].samples.size());
    }

    zero_grads(params);
    Tape tape;
    TensorPtr batch_con;
    TensorPtr soft_sum;
    int soft_count = 0;
    for (int id : batch_ids) {
      Waveform cut;
      cut.sample_rate = corpus[static_cast<std::size_t>(id)].sample_rate;
      cut.samples.assign(corpus[static_cast<std::size_t>(id)].samples.begin(),
                         corpus[static_cast<std::size_t>(id)].samples.begin() +
                             static_cast<std::ptrdiff_t>(min_len));
      auto z = feature_encoder(model, standardize(cut));

      MaskInfo info;
      auto z_masked = apply_time_mask(z, model, rng, &info);

      std::vector<TensorPtr> q_targets;
      q_targets.reserve(info.masked.size());
      for (int t : info.masked) {
        auto qr = quantize_gumbel(slice_rows(z, t, 1), model, cfg.tau, /*training=*/true, rng);
        q_targets.push_back(qr.q);
        soft_sum = soft_sum ? add(soft_sum, qr.usage) : qr.usage;
        ++soft_count;
      }

      auto ctx = context_network(model, z_masked);
      auto con = contrastive_loss(ctx, q_targets, info, cfg.kappa, cfg.distractors, rng);
      batch_con = batch_con ? add(batch_con, con) : con;
    }
    auto mean_con = scale(batch_con, 1.0 / static_cast<double>(batch_ids.size()));
    auto mean_soft = scale(soft_sum, 1.0 / static_cast<double>(soft_count));
    auto div = diversity_loss(mean_soft);
    auto loss = add(mean_con, scale(div, static_cast<double>(cfg.diversity_weight)));

    tape.backward(loss);
    adam_step(params, adam, opts.lr);

    stats.total.push_back(static_cast<double>(loss->data[0]));
    stats.contrastive.push_back(static_cast<double>(mean_con->data[0]));
    stats.diversity.push_back(static_cast<double>(div->data[0]));
    if (opts.log_every > 0 && (step + 1) % opts.log_every == 0) {
      W2E_INFO("step=%d loss=%.6f", step + 1, stats.total.back());
      W2E_DEBUG("step=%d contrastive=%.6f diversity=%.6f", step + 1,
                stats.contrastive.back(), stats.diversity.back());
    }
  }
  return stats;
}

}  // namespace w2e
