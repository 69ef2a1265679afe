#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "w2e/audio.hpp"
#include "w2e/nn.hpp"
#include "w2e/rng.hpp"
#include "w2e/tensor.hpp"

namespace w2e {

// Geometry and objective constants for the self-supervised acoustic model.
// Desk-scale defaults; full-scale systems use p=0.065, M=10, V=320.
struct EncoderConfig {
  // (channels, kernel, stride) per layer; 20x total downsampling
  std::vector<std::array<int, 3>> conv_spec{{64, 10, 5}, {64, 4, 2}, {64, 4, 2}};
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  float mask_prob = 0.15f;  // per-frame span-start probability
  int mask_span = 2;        // frames per span
  int groups = 2;           // codebook groups G
  int entries = 32;         // entries per group V
  float kappa = 0.1f;       // contrastive temperature
  float tau = 2.0f;         // gumbel temperature (fixed, no annealing)
  int distractors = 10;     // K
  float diversity_weight = 0.1f;

  // Samples needed to produce one latent frame.
  int receptive_field() const;
  // Latent length for a given sample count; the composed conv formula.
  // Errors: InputTooShort when the input cannot fill the receptive field.
  int output_length(int n_samples) const;

  void validate() const;
};

struct ConvLayer {
  TensorPtr w;  // [c_out, c_in, k]
  TensorPtr b;  // [c_out]
  LayerNormParams ln;
  int stride = 1;
};

// Feature-encoder convolutions, codebooks, context transformer, and the
// (optional) CTC projection head.
struct AcousticModel {
  EncoderConfig cfg;
  std::vector<ConvLayer> convs;
  TensorPtr mask_vector;  // [d_model], learned mask embedding
  LinearParams quant_proj;  // d_model -> G*V logits
  TensorPtr codebook;       // [G*V, d_model/G]
  std::vector<TransformerBlockParams> blocks;
  LayerNormParams final_ln;
  LinearParams ctc_head;  // empty until fine-tuning attaches it
  bool has_ctc_head = false;

  static AcousticModel init(const EncoderConfig& cfg, std::uint64_t seed);

  std::vector<TensorPtr> conv_params() const;
  std::vector<TensorPtr> context_params() const;   // blocks + final layer norm
  std::vector<TensorPtr> quantizer_params() const; // projection + codebook + mask
  std::vector<TensorPtr> pretrain_params() const;
  std::vector<TensorPtr> all_params() const;
};

// Latent sequence Z: conv -> layer_norm -> gelu per layer, frames as rows.
// Input must be a standardized waveform. Returns [T_z, d_model].
TensorPtr feature_encoder(const AcousticModel& model, const Waveform& standardized);

struct MaskInfo {
  std::vector<int> masked;  // sorted frame positions
};

// Replaces sampled spans with the learned mask vector. Every frame starts a
// span with probability mask_prob; spans are mask_span long, clipped at the
// end and merged on overlap. If no span is sampled, one is forced at a
// uniform random start.
TensorPtr apply_time_mask(const TensorPtr& z, const AcousticModel& model, Rng& rng,
                          MaskInfo* info);

struct QuantizeResult {
  TensorPtr q;               // [1, d_model], straight-through in training mode
  std::vector<int> indices;  // chosen entry per group
  TensorPtr soft;            // [G, V] tempered gumbel assignment (training only)
  TensorPtr usage;           // [G, V] softmax(logits), the diversity input
};

// Gumbel-softmax vector quantization of one latent frame [1, d_model].
// Training: per group, sample Gumbel noise, soft = softmax((logits+g)/tau),
// output the argmax entry with the soft path carrying the gradient.
// Inference: plain argmax, deterministic, no noise.
QuantizeResult quantize_gumbel(const TensorPtr& z_frame, const AcousticModel& model,
                               double tau, bool training, Rng& rng);

// Adds sinusoidal positions, runs the transformer stack, final layer norm.
TensorPtr context_network(const AcousticModel& model, const TensorPtr& z_masked);

// Mean over masked frames t of
//   -log exp(cos(c_t, q_t)/kappa) / sum over {q_t} + K distractors.
// Distractors are other masked frames' quantizations of the same utterance,
// drawn uniformly without replacement (with replacement when the pool is
// smaller than K). Errors: InsufficientMaskedFrames when |masked| < 2.
TensorPtr contrastive_loss(const TensorPtr& c, const std::vector<TensorPtr>& q_masked,
                           const MaskInfo& info, double kappa, int k_distractors,
                           Rng& rng);

// (1/G) * sum_g (V - exp(H(p_g))) / V with H in nats; zero at uniform usage.
TensorPtr diversity_loss(const TensorPtr& mean_soft_probs);

struct PretrainOptions {
  int steps = 200;
  int batch_size = 2;
  float lr = 1e-3f;
  std::uint64_t seed = 0;
  int log_every = 10;
};

struct PretrainStats {
  std::vector<double> total;
  std::vector<double> contrastive;
  std::vector<double> diversity;
};

// Self-supervised loop: batch -> feature_encoder -> quantize unmasked Z ->
// mask -> context -> contrastive + alpha * diversity -> backward -> adam.
// Batches are bucketed by length and truncated to the batch minimum.
// Errors: EmptyManifest.
PretrainStats pretrain(AcousticModel& model, const std::vector<Waveform>& corpus,
                       const PretrainOptions& opts);

}  // namespace w2e
