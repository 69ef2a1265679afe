#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "w2e/encoder.hpp"
#include "w2e/error.hpp"
#include "w2e/ops.hpp"

using namespace w2e;

namespace {

Waveform random_wave(int n, Rng& rng) {
  Waveform w;
  w.sample_rate = 16000;
  for (int i = 0; i < n; ++i) w.samples.push_back(static_cast<float>(rng.normal() * 0.3));
  return w;
}

// independent evaluation of the composed conv length formula
int composed_length(const EncoderConfig& cfg, int n) {
  long t = n;
  for (const auto& l : cfg.conv_spec) {
    if (t < l[1]) return -1;
    t = (t - l[1]) / l[2] + 1;
  }
  return static_cast<int>(t);
}

}  // namespace

TEST_CASE("feature_encoder length arithmetic") {
  EncoderConfig cfg;
  AcousticModel model = AcousticModel::init(cfg, 7);

  SUBCASE("input of exactly the receptive field gives one frame") {
    CHECK(cfg.receptive_field() == 55);
    Rng rng(1);
    auto z = feature_encoder(model, standardize(random_wave(55, rng)));
    CHECK(z->dim(0) == 1);
    CHECK(z->dim(1) == cfg.d_model);
  }
  SUBCASE("16000 samples give 798 frames") {
    CHECK(cfg.output_length(16000) == 798);
    CHECK(composed_length(cfg, 16000) == 798);
    Rng rng(2);
    auto z = feature_encoder(model, standardize(random_wave(16000, rng)));
    CHECK(z->dim(0) == 798);
  }
  SUBCASE("output_length matches the composed formula on 1000 random lengths") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
      int n = 55 + rng.uniform_int(8000);
      CHECK(cfg.output_length(n) == composed_length(cfg, n));
    }
  }
  SUBCASE("realized frame count matches output_length on sampled lengths") {
    Rng rng(4);
    for (int i = 0; i < 5; ++i) {
      int n = 55 + rng.uniform_int(2000);
      auto z = feature_encoder(model, standardize(random_wave(n, rng)));
      CHECK(z->dim(0) == cfg.output_length(n));
    }
  }
  SUBCASE("too-short input raises InputTooShort") {
    Rng rng(5);
    try {
      feature_encoder(model, standardize(random_wave(54, rng)));
      FAIL("expected InputTooShort");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::input_too_short);
    }
  }
  SUBCASE("zero waveform gives frames constant across time") {
    Waveform w;
    w.sample_rate = 16000;
    w.samples.assign(400, 0.0f);
    auto z = feature_encoder(model, standardize(w));
    const int d = z->dim(1);
    for (int t = 1; t < z->dim(0); ++t) {
      for (int j = 0; j < d; ++j) {
        CHECK(z->data[static_cast<std::size_t>(t * d + j)] ==
              doctest::Approx(z->data[static_cast<std::size_t>(j)]).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("apply_time_mask") {
  EncoderConfig cfg;
  AcousticModel model = AcousticModel::init(cfg, 11);

  SUBCASE("mask probability one masks every frame") {
    AcousticModel full = AcousticModel::init(cfg, 11);
    full.cfg.mask_prob = 1.0f;
    Rng rng(1);
    auto z = Tensor::zeros({20, cfg.d_model});
    MaskInfo info;
    apply_time_mask(z, full, rng, &info);
    CHECK(info.masked.size() == 20);
  }
  SUBCASE("masked fraction over 10000 trials matches 1-(1-p)^M within 0.02") {
    Rng rng(2);
    const int t_len = 50;
    auto z = Tensor::zeros({t_len, cfg.d_model});
    long masked_total = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
      MaskInfo info;
      apply_time_mask(z, model, rng, &info);
      masked_total += static_cast<long>(info.masked.size());
    }
    double fraction = static_cast<double>(masked_total) / (static_cast<double>(trials) * t_len);
    double expected = 1.0 - std::pow(1.0 - cfg.mask_prob, cfg.mask_span);
    CHECK(std::abs(fraction - expected) < 0.02);
  }
  SUBCASE("masked rows hold the mask vector exactly, others are untouched") {
    Rng data_rng(3);
    auto z = Tensor::zeros({12, cfg.d_model});
    for (auto& v : z->data) v = static_cast<float>(data_rng.normal());
    Rng rng(4);
    MaskInfo info;
    auto masked = apply_time_mask(z, model, rng, &info);
    std::vector<bool> is_masked(12, false);
    for (int t : info.masked) is_masked[static_cast<std::size_t>(t)] = true;
    for (int t = 0; t < 12; ++t) {
      for (int j = 0; j < cfg.d_model; ++j) {
        float got = masked->data[static_cast<std::size_t>(t * cfg.d_model + j)];
        if (is_masked[static_cast<std::size_t>(t)]) {
          CHECK(got == model.mask_vector->data[static_cast<std::size_t>(j)]);
        } else {
          CHECK(got == z->data[static_cast<std::size_t>(t * cfg.d_model + j)]);
        }
      }
    }
    CHECK(!info.masked.empty());  // a span is forced when sampling yields none
  }
}

TEST_CASE("quantize_gumbel") {
  EncoderConfig cfg;
  AcousticModel model = AcousticModel::init(cfg, 13);
  Rng data_rng(1);
  auto frame = Tensor::zeros({1, cfg.d_model});
  for (auto& v : frame->data) v = static_cast<float>(data_rng.normal());

  SUBCASE("huge temperature flattens the soft distribution") {
    Rng rng(2);
    auto res = quantize_gumbel(frame, model, 1e9, true, rng);
    REQUIRE(res.soft != nullptr);
    for (float p : res.soft->data) {
      CHECK(p == doctest::Approx(1.0 / cfg.entries).epsilon(1e-4));
    }
  }
  SUBCASE("inference mode is deterministic and noise free") {
    Rng rng1(3), rng2(4);
    auto a = quantize_gumbel(frame, model, cfg.tau, false, rng1);
    auto b = quantize_gumbel(frame, model, cfg.tau, false, rng2);
    CHECK(a.indices == b.indices);
    CHECK(a.q->data == b.q->data);
    // output is the concatenation of one codebook entry per group
    const int entry_dim = cfg.d_model / cfg.groups;
    for (int g = 0; g < cfg.groups; ++g) {
      for (int j = 0; j < entry_dim; ++j) {
        CHECK(a.q->data[static_cast<std::size_t>(g * entry_dim + j)] ==
              model.codebook->data[static_cast<std::size_t>(
                  (g * cfg.entries + a.indices[static_cast<std::size_t>(g)]) * entry_dim + j)]);
      }
    }
  }
  SUBCASE("straight-through gradient equals the soft-softmax Jacobian path") {
    // analytic gradients of sum(q) under the straight-through estimator
    zero_grads(model.quantizer_params());
    std::vector<int> st_indices;
    {
      Tape tape;
      Rng rng(77);
      auto res = quantize_gumbel(frame, model, cfg.tau, true, rng);
      st_indices = res.indices;
      tape.backward(sum(res.q));
    }
    auto st_w_grad = model.quant_proj.w->grad;
    auto st_codebook_grad = model.codebook->grad;

    // soft surrogate built from the same primitives, same frozen noise
    auto soft_path = [&]() -> TensorPtr {
      Rng rng(77);
      auto logits = affine(frame, model.quant_proj);
      TensorPtr acc;
      for (int g = 0; g < cfg.groups; ++g) {
        auto lg = slice_cols(logits, g * cfg.entries, cfg.entries);
        auto noise = Tensor::zeros({1, cfg.entries});
        for (auto& x : noise->data) x = static_cast<float>(rng.gumbel());
        auto soft = softmax(scale(add(lg, noise), 1.0 / cfg.tau), -1);
        auto entries = slice_rows(model.codebook, g * cfg.entries, cfg.entries);
        auto q = sum(matmul(soft, entries));
        acc = acc ? add(acc, q) : q;
      }
      return acc;
    };

    zero_grads(model.quantizer_params());
    {
      Tape tape;
      tape.backward(soft_path());
    }
    // the logits path is exactly the soft Jacobian
    CHECK(model.quant_proj.w->grad == st_w_grad);

    // the hard selection concentrates codebook gradient on the chosen rows
    const int entry_dim = cfg.d_model / cfg.groups;
    for (int g = 0; g < cfg.groups; ++g) {
      for (int e = 0; e < cfg.entries; ++e) {
        double row_mag = 0.0;
        for (int j = 0; j < entry_dim; ++j) {
          row_mag += std::abs(
              st_codebook_grad[static_cast<std::size_t>((g * cfg.entries + e) * entry_dim + j)]);
        }
        if (e == st_indices[static_cast<std::size_t>(g)]) {
          CHECK(row_mag > 0.0);
        } else {
          CHECK(row_mag == 0.0);
        }
      }
    }

    // and the soft path itself passes finite differences
    std::vector<TensorPtr> params = {model.quant_proj.w, model.quant_proj.b, model.codebook};
    double err = grad_check(soft_path, params, 1e-3, 60);
    CHECK(err < 1e-2);
  }
}

TEST_CASE("context_network") {
  EncoderConfig cfg;

  SUBCASE("output length equals input length") {
    AcousticModel model = AcousticModel::init(cfg, 17);
    Rng rng(1);
    auto z = Tensor::zeros({9, cfg.d_model});
    for (auto& v : z->data) v = static_cast<float>(rng.normal());
    auto c = context_network(model, z);
    CHECK(c->shape == z->shape);
  }
  SUBCASE("zero-depth stack reduces to layer_norm(input + positions)") {
    EncoderConfig shallow = cfg;
    shallow.n_layers = 0;
    AcousticModel model = AcousticModel::init(shallow, 17);
    Rng rng(2);
    auto z = Tensor::zeros({5, cfg.d_model});
    for (auto& v : z->data) v = static_cast<float>(rng.normal());
    auto c = context_network(model, z);
    auto expect = layer_norm(add(z, sinusoidal_positions(5, cfg.d_model)),
                             model.final_ln.gamma, model.final_ln.beta);
    for (std::size_t i = 0; i < c->data.size(); ++i) {
      CHECK(c->data[i] == doctest::Approx(expect->data[i]));
    }
  }
  SUBCASE("perturbing one input frame reaches every output frame") {
    AcousticModel model = AcousticModel::init(cfg, 17);
    Rng rng(3);
    auto z = Tensor::zeros({7, cfg.d_model});
    for (auto& v : z->data) v = static_cast<float>(rng.normal());
    auto base = context_network(model, z);

    auto z2 = Tensor::zeros({7, cfg.d_model});
    z2->data = z->data;
    z2->data[3 * static_cast<std::size_t>(cfg.d_model)] += 0.75f;
    auto bumped = context_network(model, z2);

    for (int t = 0; t < 7; ++t) {
      double delta = 0.0;
      for (int j = 0; j < cfg.d_model; ++j) {
        delta += std::abs(static_cast<double>(bumped->data[static_cast<std::size_t>(t * cfg.d_model + j)]) -
                          base->data[static_cast<std::size_t>(t * cfg.d_model + j)]);
      }
      CHECK(delta > 0.0);
    }
  }
}

TEST_CASE("contrastive_loss") {
  const int d = 8;
  const int k_distractors = 10;

  SUBCASE("all candidates identical gives ln(K+1)") {
    Rng rng(1);
    auto c = Tensor::zeros({4, d});
    for (auto& v : c->data) v = static_cast<float>(rng.normal());
    auto q_row = Tensor::zeros({1, d});
    for (auto& v : q_row->data) v = static_cast<float>(rng.normal());
    MaskInfo info;
    info.masked = {0, 1, 2, 3};
    std::vector<TensorPtr> q(4, q_row);
    Rng loss_rng(2);
    auto loss = contrastive_loss(c, q, info, 0.1, k_distractors, loss_rng);
    CHECK(loss->data[0] == doctest::Approx(std::log(k_distractors + 1.0)).epsilon(1e-6));
  }
  SUBCASE("orthogonal distractors anchor: -log(e^10 / (e^10 + 10))") {
    auto c = Tensor::zeros({2, d});
    c->data[0] = 1.0f;      // c_0 = e0
    c->data[d + 1] = 1.0f;  // c_1 = e1
    auto q0 = Tensor::zeros({1, d});
    q0->data[0] = 1.0f;
    auto q1 = Tensor::zeros({1, d});
    q1->data[1] = 1.0f;
    MaskInfo info;
    info.masked = {0, 1};
    std::vector<TensorPtr> q = {q0, q1};
    Rng rng(3);
    auto loss = contrastive_loss(c, q, info, 0.1, k_distractors, rng);
    const double expected = -std::log(std::exp(10.0) / (std::exp(10.0) + k_distractors));
    CHECK(std::abs(loss->data[0] - expected) < 1e-5);
    CHECK(expected == doctest::Approx(4.5388e-4).epsilon(1e-2));
  }
  SUBCASE("loss matches a straight-line double-precision reimplementation") {
    Rng data_rng(4);
    const int t_len = 6;
    auto c = Tensor::zeros({t_len, d});
    for (auto& v : c->data) v = static_cast<float>(data_rng.normal());
    std::vector<TensorPtr> q;
    for (int i = 0; i < 4; ++i) {
      auto row = Tensor::zeros({1, d});
      for (auto& v : row->data) v = static_cast<float>(data_rng.normal());
      q.push_back(row);
    }
    MaskInfo info;
    info.masked = {0, 2, 3, 5};
    const double kappa = 0.1;
    const int k_dis = 2;
    const std::uint64_t seed = 99;

    Rng rng(seed);
    auto loss = contrastive_loss(c, q, info, kappa, k_dis, rng);

    // oracle: same documented sampling procedure, plain double loops
    Rng oracle_rng(seed);
    auto cosine = [&](const float* a, const float* b) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int j = 0; j < d; ++j) {
        dot += static_cast<double>(a[j]) * b[j];
        na += static_cast<double>(a[j]) * a[j];
        nb += static_cast<double>(b[j]) * b[j];
      }
      return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-8);
    };
    double total = 0.0;
    const int n = static_cast<int>(info.masked.size());
    for (int i = 0; i < n; ++i) {
      std::vector<int> pool;
      for (int j = 0; j < n; ++j) {
        if (j != i) pool.push_back(j);
      }
      std::vector<int> chosen;
      if (static_cast<int>(pool.size()) >= k_dis) {
        for (int s = 0; s < k_dis; ++s) {
          int swap_at = s + oracle_rng.uniform_int(static_cast<int>(pool.size()) - s);
          std::swap(pool[static_cast<std::size_t>(s)], pool[static_cast<std::size_t>(swap_at)]);
          chosen.push_back(pool[static_cast<std::size_t>(s)]);
        }
      } else {
        for (int s = 0; s < k_dis; ++s) {
          chosen.push_back(pool[static_cast<std::size_t>(oracle_rng.uniform_int(
              static_cast<int>(pool.size())))]);
        }
      }
      const float* c_t = c->data.data() + info.masked[static_cast<std::size_t>(i)] * d;
      std::vector<double> logits;
      logits.push_back(cosine(c_t, q[static_cast<std::size_t>(i)]->data.data()) / kappa);
      for (int j : chosen) {
        logits.push_back(cosine(c_t, q[static_cast<std::size_t>(j)]->data.data()) / kappa);
      }
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double denom = 0.0;
      for (double v : logits) denom += std::exp(v - mx);
      total += -(logits[0] - mx - std::log(denom));
    }
    CHECK(std::abs(loss->data[0] - total / n) < 1e-5);
  }
  SUBCASE("fewer than two masked frames is an error") {
    auto c = Tensor::zeros({3, d});
    MaskInfo info;
    info.masked = {1};
    std::vector<TensorPtr> q = {Tensor::zeros({1, d})};
    Rng rng(5);
    try {
      contrastive_loss(c, q, info, 0.1, 4, rng);
      FAIL("expected InsufficientMaskedFrames");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::insufficient_masked_frames);
    }
  }
  SUBCASE("gradient w.r.t. unmasked context rows is exactly zero") {
    Rng data_rng(6);
    auto c = Tensor::zeros({6, d});
    for (auto& v : c->data) v = static_cast<float>(data_rng.normal());
    c->requires_grad = true;
    c->ensure_grad();
    std::vector<TensorPtr> q;
    for (int i = 0; i < 3; ++i) {
      auto row = Tensor::zeros({1, d});
      for (auto& v : row->data) v = static_cast<float>(data_rng.normal());
      q.push_back(row);
    }
    MaskInfo info;
    info.masked = {1, 3, 4};
    Tape tape;
    Rng rng(7);
    auto loss = contrastive_loss(c, q, info, 0.1, 2, rng);
    tape.backward(loss);
    for (int t : {0, 2, 5}) {
      for (int j = 0; j < d; ++j) {
        CHECK(c->grad[static_cast<std::size_t>(t * d + j)] == 0.0f);
      }
    }
    double masked_mag = 0.0;
    for (int t : {1, 3, 4}) {
      for (int j = 0; j < d; ++j) {
        masked_mag += std::abs(c->grad[static_cast<std::size_t>(t * d + j)]);
      }
    }
    CHECK(masked_mag > 0.0);
  }
}

TEST_CASE("diversity_loss anchors and oracle") {
  const int g = 2, v = 8;

  SUBCASE("uniform usage costs nothing") {
    auto p = Tensor::full({g, v}, 1.0f / v);
    auto loss = diversity_loss(p);
    CHECK(loss->data[0] == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("one-hot usage costs (V-1)/V") {
    auto p = Tensor::zeros({g, v});
    p->data[0] = 1.0f;
    p->data[static_cast<std::size_t>(v) + 3] = 1.0f;
    auto loss = diversity_loss(p);
    CHECK(loss->data[0] == doctest::Approx((v - 1.0) / v).epsilon(1e-6));
  }
  SUBCASE("random usage matches the entropy formula") {
    Rng rng(1);
    auto p = Tensor::zeros({g, v});
    for (int gi = 0; gi < g; ++gi) {
      double total = 0.0;
      std::vector<double> raw(v);
      for (int j = 0; j < v; ++j) {
        raw[static_cast<std::size_t>(j)] = rng.uniform() + 0.05;
        total += raw[static_cast<std::size_t>(j)];
      }
      for (int j = 0; j < v; ++j) {
        p->data[static_cast<std::size_t>(gi * v + j)] =
            static_cast<float>(raw[static_cast<std::size_t>(j)] / total);
      }
    }
    auto loss = diversity_loss(p);
    double expect = 0.0;
    for (int gi = 0; gi < g; ++gi) {
      double h = 0.0;
      for (int j = 0; j < v; ++j) {
        double pj = p->data[static_cast<std::size_t>(gi * v + j)];
        h -= pj * std::log(pj);
      }
      expect += (v - std::exp(h)) / v;
    }
    expect /= g;
    CHECK(std::abs(loss->data[0] - expect) < 1e-6);
  }
}

TEST_CASE("full contrastive graph passes grad_check below 1e-2") {
  // The straight-through value path (hard argmax) is a step function, so the
  // quantized targets are held constant here; every differentiable path
  // (convs, masking, context network, loss, and the soft probabilities
  // feeding the diversity term) goes through finite differences. The
  // quantizer's own gradient path is checked in the quantize_gumbel case.
  EncoderConfig cfg;
  AcousticModel model = AcousticModel::init(cfg, 23);
  Rng wave_rng(1);
  Waveform wave = random_wave(220, wave_rng);  // 8 latent frames

  std::vector<TensorPtr> q_const;
  {
    Tape off(false, false);
    Rng rng(4242);
    auto z = feature_encoder(model, standardize(wave));
    MaskInfo info;
    apply_time_mask(z, model, rng, &info);
    for (int t : info.masked) {
      auto qr = quantize_gumbel(slice_rows(z, t, 1), model, cfg.tau, true, rng);
      q_const.push_back(qr.q);
    }
  }

  auto f = [&]() -> TensorPtr {
    Rng rng(4242);  // frozen masking, gumbel noise, and distractor draws
    auto z = feature_encoder(model, standardize(wave));
    MaskInfo info;
    auto z_masked = apply_time_mask(z, model, rng, &info);
    TensorPtr soft_sum;
    for (int t : info.masked) {
      auto qr = quantize_gumbel(slice_rows(z, t, 1), model, cfg.tau, true, rng);
      soft_sum = soft_sum ? add(soft_sum, qr.usage) : qr.usage;
    }
    auto ctx = context_network(model, z_masked);
    auto con = contrastive_loss(ctx, q_const, info, cfg.kappa, cfg.distractors, rng);
    auto div = diversity_loss(scale(soft_sum, 1.0 / static_cast<double>(info.masked.size())));
    return add(con, scale(div, cfg.diversity_weight));
  };

  std::vector<TensorPtr> params = model.conv_params();
  params.push_back(model.mask_vector);
  collect(model.quant_proj, params);
  auto ctx_params = model.context_params();
  params.insert(params.end(), ctx_params.begin(), ctx_params.end());

  double err = grad_check(f, params, 1e-3, 60, 17);
  CHECK(err < 1e-2);
}

TEST_CASE("pretrain basics on a tiny corpus") {
  EncoderConfig cfg;
  std::vector<Waveform> corpus;
  Rng rng(9);
  corpus.push_back(random_wave(900, rng));
  corpus.push_back(random_wave(1100, rng));
  corpus.push_back(random_wave(1000, rng));

  SUBCASE("zero steps leave the checkpoint at initialization") {
    AcousticModel model = AcousticModel::init(cfg, 31);
    AcousticModel reference = AcousticModel::init(cfg, 31);
    PretrainOptions opts;
    opts.steps = 0;
    auto stats = pretrain(model, corpus, opts);
    CHECK(stats.total.empty());
    auto got = model.pretrain_params();
    auto want = reference.pretrain_params();
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i]->data == want[i]->data);
  }
  SUBCASE("loss history length equals the step count") {
    AcousticModel model = AcousticModel::init(cfg, 31);
    PretrainOptions opts;
    opts.steps = 3;
    opts.batch_size = 2;
    opts.seed = 5;
    auto stats = pretrain(model, corpus, opts);
    CHECK(stats.total.size() == 3);
    CHECK(stats.contrastive.size() == 3);
    for (double v : stats.contrastive) CHECK(v >= 0.0);
  }
  SUBCASE("empty corpus is rejected") {
    AcousticModel model = AcousticModel::init(cfg, 31);
    PretrainOptions opts;
    try {
      pretrain(model, {}, opts);
      FAIL("expected EmptyManifest");
    } catch (const Error& e) {
      CHECK(e.code() == Errc::empty_manifest);
    }
  }
}
