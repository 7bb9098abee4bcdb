#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pianolm/codec.hpp"
#include "pianolm/rng.hpp"

namespace pianolm {

/// Encoder output fed to the decoder as an audio prefix.
struct HiddenSeq {
  Eigen::MatrixXd vectors;  // T' x D
  double frame_rate_hz = 100.0;
};

struct DecoderConfig {
  int n_layers = 2;
  int n_heads = 4;
  int embed_dim = 64;
  int encoder_dim = 64;  // width of the incoming HiddenSeq
  int vocab_size = 1265;
  int max_seq_len = 2048;  // audio prefix + tokens
  double dropout = 0.1;    // attention probs and FFN output, training only

  int head_dim() const { return embed_dim / n_heads; }
  void validate() const;  // embed_dim % n_heads == 0, head_dim even

  /// Published size presets (layers/heads/embed): tiny 4/8/512,
  /// small 6/12/768, base 6/16/1024, large 12/32/1024.
  static DecoderConfig preset(const std::string& name);
};

/// Absolute positional encoding: PE(pos,2i)=sin(pos/10000^(2i/d)),
/// PE(pos,2i+1)=cos(pos/10000^(2i/d)). Added to the projected audio rows.
Eigen::VectorXd sinusoidal_pe(int pos, int dim);

/// Rotary embedding: consecutive pairs (x_{2i}, x_{2i+1}) rotated by
/// pos * theta_i with theta_i = 10000^(-2i/d). Norm preserving.
Eigen::VectorXd rope_rotate(const Eigen::VectorXd& vec, int pos);

struct LayerParams {
  Eigen::MatrixXd ln1_gamma, ln1_beta;  // 1 x d
  Eigen::MatrixXd wq, wk, wv, wo;       // d x d
  Eigen::MatrixXd ln2_gamma, ln2_beta;  // 1 x d
  Eigen::MatrixXd ffn_w1, ffn_b1;       // d x 4d, 1 x 4d
  Eigen::MatrixXd ffn_w2, ffn_b2;       // 4d x d, 1 x d
};

/// Full weight set of one decoder-only LM. The three hierarchy stages are
/// three independent instances of this.
struct DecoderParams {
  DecoderConfig config;
  Eigen::MatrixXd token_embedding;           // vocab x d
  Eigen::MatrixXd input_proj_w, input_proj_b;  // enc_dim x d, 1 x d
  std::vector<LayerParams> layers;
  Eigen::MatrixXd lnf_gamma, lnf_beta;  // 1 x d
  Eigen::MatrixXd readout;              // d x vocab

  static DecoderParams init(const DecoderConfig& config, Rng& rng);
  DecoderParams zeros_like() const;
};

/// Named reference to one parameter tensor; `decay` marks tensors subject
/// to decoupled weight decay (matrices yes, norms and biases no).
struct TensorRef {
  std::string name;
  Eigen::MatrixXd* tensor;
  bool decay;
};

std::vector<TensorRef> tensor_refs(DecoderParams& params, const std::string& prefix = "dec.");

struct ForwardCache;  // defined in decoder.cpp; opaque activation store

ForwardCache* new_forward_cache();
void free_forward_cache(ForwardCache*);

/// Owning handle so call sites don't manage the opaque cache manually.
class CachePtr {
 public:
  CachePtr() : cache_(new_forward_cache()) {}
  ~CachePtr() { free_forward_cache(cache_); }
  CachePtr(const CachePtr&) = delete;
  CachePtr& operator=(const CachePtr&) = delete;
  ForwardCache* get() const { return cache_; }

 private:
  ForwardCache* cache_;
};

/// Runs the decoder over [projected audio prefix ; token embeddings] and
/// returns one logits row per token position. Audio rows see the whole
/// prefix, token rows see the prefix plus earlier tokens (causal).
/// Pass `dropout_rng` to enable dropout (training); inference is exact.
Eigen::MatrixXd decoder_forward(const DecoderParams& params, const HiddenSeq& hidden,
                                const std::vector<int>& tokens,
                                ForwardCache* cache = nullptr,
                                Rng* dropout_rng = nullptr);

/// Mean negative log-likelihood over masked-in positions: row t-1 of the
/// logits scores token t.
double nll_loss(const Eigen::MatrixXd& logits, const std::vector<int>& tokens,
                const std::vector<std::uint8_t>& loss_mask);

/// Sum of -log p over masked positions (and the count), for pooled batch
/// losses and the factorization identity.
std::pair<double, long> nll_loss_sum(const Eigen::MatrixXd& logits,
                                     const std::vector<int>& tokens,
                                     const std::vector<std::uint8_t>& loss_mask);

/// d(nll)/d(logits), scaled by `scale` (use 1/total_masked for pooled means).
Eigen::MatrixXd nll_loss_grad(const Eigen::MatrixXd& logits,
                              const std::vector<int>& tokens,
                              const std::vector<std::uint8_t>& loss_mask,
                              double scale = -1.0);

struct DecoderBackwardResult {
  DecoderParams grads;       // same shapes as the params
  Eigen::MatrixXd d_hidden;  // T' x enc_dim, for joint encoder fine-tuning
};

DecoderBackwardResult decoder_backward(const DecoderParams& params,
                                       const ForwardCache& cache,
                                       const Eigen::MatrixXd& d_logits);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; 0 disables
};

class AdamW {
 public:
  /// One decoupled-weight-decay adaptive-moment update. `params` and
  /// `grads` must line up; moment buffers are allocated on first use.
  void step(const std::vector<TensorRef>& params,
            const std::vector<TensorRef>& grads, const AdamConfig& cfg);

  long step_count() const { return step_; }

 private:
  std::vector<Eigen::MatrixXd> m_, v_;
  long step_ = 0;
};

/// One training example: audio features already encoded, plus the token
/// sequence and its stage loss mask.
struct DecoderBatchItem {
  const HiddenSeq* hidden;
  const TokenSequence* tokens;
};

/// Single optimizer step over a batch (sequences processed one by one,
/// gradients pooled over masked tokens). Returns the pooled mean NLL.
double decoder_train_step(DecoderParams& params, const std::vector<DecoderBatchItem>& batch,
                          AdamW& opt, const AdamConfig& cfg, Rng* dropout_rng = nullptr);

/// Incremental decoding with per-layer key/value caches. Copyable, so beam
/// search can branch mid-sequence.
class DecoderSession {
 public:
  DecoderSession(const DecoderParams& params, const HiddenSeq& hidden);

  /// Appends one token and returns the logits row that scores the next one.
  Eigen::VectorXd append(int token);

  int token_count() const { return token_len_; }
  int total_len() const { return audio_len_ + token_len_; }

 private:
  const DecoderParams* params_;
  struct LayerKv {
    Eigen::MatrixXd k, v;  // grows one row per appended position
  };
  std::vector<LayerKv> kv_;
  int audio_len_ = 0;
  int token_len_ = 0;
};

}  // namespace pianolm
