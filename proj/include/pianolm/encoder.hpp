#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pianolm/decoder.hpp"
#include "pianolm/note.hpp"
#include "pianolm/rng.hpp"

namespace pianolm {

struct EncoderConfig {
  enum class Mode { OracleRoll, ConvRecurrent };
  Mode mode = Mode::ConvRecurrent;
  int input_dim = 88;      // feature bins per frame
  int hidden_dim = 128;    // output width fed to the decoder
  int conv_channels = 48;
  int conv_kernel = 3;     // odd, zero-padded at the edges
  int recurrent_dim = 48;  // per direction
  int roll_dim = 88;       // key-activity readout width
  double frame_rate_hz = 100.0;

  void validate() const;
};

EncoderConfig::Mode parse_encoder_mode(const std::string& name);
std::string encoder_mode_name(EncoderConfig::Mode mode);

/// Weights for both modes. OracleRoll keeps only the affine passthrough
/// (plus the readout); ConvRecurrent owns the conv/recurrent stack.
struct EncoderParams {
  EncoderConfig config;
  Eigen::MatrixXd oracle_w, oracle_b;  // input_dim x hidden, 1 x hidden
  Eigen::MatrixXd conv1_w, conv1_b;    // (kernel*input_dim) x C, 1 x C
  Eigen::MatrixXd conv2_w, conv2_b;    // (kernel*C) x C, 1 x C
  Eigen::MatrixXd rnn_fw_wx, rnn_fw_wh, rnn_fw_b;
  Eigen::MatrixXd rnn_bw_wx, rnn_bw_wh, rnn_bw_b;
  Eigen::MatrixXd proj_w, proj_b;        // 2R x hidden, 1 x hidden
  Eigen::MatrixXd readout_w, readout_b;  // hidden x roll_dim, 1 x roll_dim

  static EncoderParams init(const EncoderConfig& config, Rng& rng);
  EncoderParams zeros_like() const;
};

std::vector<TensorRef> tensor_refs(EncoderParams& params, const std::string& prefix = "enc.");

struct EncoderCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd un1, conv1_pre, conv1_act;
  Eigen::MatrixXd un2, conv2_pre, conv2_act;
  Eigen::MatrixXd fw_states, bw_states;  // post-tanh, T x R each
  Eigen::MatrixXd concat;                // T x 2R
};

/// Frame features (T x input_dim) to hidden vectors (T x hidden_dim).
/// Deterministic; pass a cache to enable the backward pass.
HiddenSeq encoder_encode(const EncoderParams& params, const Eigen::MatrixXd& features,
                         EncoderCache* cache = nullptr);

/// Per-frame key activity probabilities (sigmoid readout, T x roll_dim).
Eigen::MatrixXd encoder_frame_probs(const EncoderParams& params, const HiddenSeq& hidden);

/// Gradients of all encoder tensors given d(loss)/d(hidden). Readout
/// gradients stay zero; they only participate via encoder_roll_loss.
EncoderParams encoder_backward(const EncoderParams& params, const EncoderCache& cache,
                               const Eigen::MatrixXd& d_hidden);

/// Binary cross-entropy of the frame readout against a target roll.
/// When `grads` is non-null it receives gradients for every tensor.
double encoder_roll_loss(const EncoderParams& params, const Eigen::MatrixXd& features,
                         const Eigen::MatrixXd& target_roll, EncoderParams* grads = nullptr);

struct PretrainConfig {
  int steps = 200;
  int batch_size = 2;
  AdamConfig adam;
  std::uint64_t seed = 0;
};

/// Trains the frame readout on (features, roll(notes)) pairs and returns
/// the per-step batch losses.
std::vector<double> encoder_pretrain(EncoderParams& params, const std::vector<Segment>& segments,
                                     const PretrainConfig& cfg);

}  // namespace pianolm
