#include "pianolm/encoder.hpp"

#include <cmath>

#include "pianolm/error.hpp"
#include "pianolm/roll.hpp"

namespace pianolm {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

Eigen::MatrixXd unfold(const Eigen::MatrixXd& x, int kernel) {
  const Eigen::Index t_len = x.rows();
  const Eigen::Index f = x.cols();
  const int pad = (kernel - 1) / 2;
  Eigen::MatrixXd un = Eigen::MatrixXd::Zero(t_len, kernel * f);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = t + j - pad;
      if (src < 0 || src >= t_len) continue;
      un.block(t, j * f, 1, f) = x.row(src);
    }
  }
  return un;
}

Eigen::MatrixXd fold_add(const Eigen::MatrixXd& d_un, Eigen::Index t_len, Eigen::Index f,
                         int kernel) {
  const int pad = (kernel - 1) / 2;
  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(t_len, f);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = t + j - pad;
      if (src < 0 || src >= t_len) continue;
      dx.row(src) += d_un.block(t, j * f, 1, f);
    }
  }
  return dx;
}

void fill_scaled_normal(Eigen::MatrixXd& m, Rng& rng) {
  const double stddev = 1.0 / std::sqrt(static_cast<double>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal() * stddev;
}

EncoderParams build_params(const EncoderConfig& cfg) {
  cfg.validate();
  EncoderParams p;
  p.config = cfg;
  if (cfg.mode == EncoderConfig::Mode::OracleRoll) {
    p.oracle_w = Eigen::MatrixXd::Zero(cfg.input_dim, cfg.hidden_dim);
    p.oracle_b = Eigen::MatrixXd::Zero(1, cfg.hidden_dim);
  } else {
    const int k = cfg.conv_kernel;
    const int c = cfg.conv_channels;
    const int r = cfg.recurrent_dim;
    p.conv1_w = Eigen::MatrixXd::Zero(k * cfg.input_dim, c);
    p.conv1_b = Eigen::MatrixXd::Zero(1, c);
    p.conv2_w = Eigen::MatrixXd::Zero(k * c, c);
    p.conv2_b = Eigen::MatrixXd::Zero(1, c);
    p.rnn_fw_wx = Eigen::MatrixXd::Zero(c, r);
    p.rnn_fw_wh = Eigen::MatrixXd::Zero(r, r);
    p.rnn_fw_b = Eigen::MatrixXd::Zero(1, r);
    p.rnn_bw_wx = Eigen::MatrixXd::Zero(c, r);
    p.rnn_bw_wh = Eigen::MatrixXd::Zero(r, r);
    p.rnn_bw_b = Eigen::MatrixXd::Zero(1, r);
    p.proj_w = Eigen::MatrixXd::Zero(2 * r, cfg.hidden_dim);
    p.proj_b = Eigen::MatrixXd::Zero(1, cfg.hidden_dim);
  }
  p.readout_w = Eigen::MatrixXd::Zero(cfg.hidden_dim, cfg.roll_dim);
  p.readout_b = Eigen::MatrixXd::Zero(1, cfg.roll_dim);
  return p;
}

}  // namespace

void EncoderConfig::validate() const {
  if (input_dim < 1 || hidden_dim < 1 || roll_dim < 1)
    raise(ErrorCode::Config, "encoder dimensions must be positive");
  if (mode == Mode::ConvRecurrent) {
    if (conv_channels < 1 || recurrent_dim < 1)
      raise(ErrorCode::Config, "encoder dimensions must be positive");
    if (conv_kernel < 1 || conv_kernel % 2 == 0)
      raise(ErrorCode::Config, "conv kernel must be odd");
  }
  if (!(frame_rate_hz > 0.0)) raise(ErrorCode::Config, "frame rate must be positive");
}

EncoderConfig::Mode parse_encoder_mode(const std::string& name) {
  if (name == "oracle_roll") return EncoderConfig::Mode::OracleRoll;
  if (name == "conv_recurrent") return EncoderConfig::Mode::ConvRecurrent;
  raise(ErrorCode::Config, "unknown encoder mode: " + name);
}

std::string encoder_mode_name(EncoderConfig::Mode mode) {
  return mode == EncoderConfig::Mode::OracleRoll ? "oracle_roll" : "conv_recurrent";
}

EncoderParams EncoderParams::init(const EncoderConfig& config, Rng& rng) {
  EncoderParams p = build_params(config);
  if (config.mode == EncoderConfig::Mode::OracleRoll) {
    fill_scaled_normal(p.oracle_w, rng);
  } else {
    fill_scaled_normal(p.conv1_w, rng);
    fill_scaled_normal(p.conv2_w, rng);
    fill_scaled_normal(p.rnn_fw_wx, rng);
    fill_scaled_normal(p.rnn_fw_wh, rng);
    fill_scaled_normal(p.rnn_bw_wx, rng);
    fill_scaled_normal(p.rnn_bw_wh, rng);
    fill_scaled_normal(p.proj_w, rng);
  }
  fill_scaled_normal(p.readout_w, rng);
  return p;
}

EncoderParams EncoderParams::zeros_like() const { return build_params(config); }

std::vector<TensorRef> tensor_refs(EncoderParams& params, const std::string& prefix) {
  std::vector<TensorRef> refs;
  if (params.config.mode == EncoderConfig::Mode::OracleRoll) {
    refs.push_back({prefix + "oracle.w", &params.oracle_w, true});
    refs.push_back({prefix + "oracle.b", &params.oracle_b, false});
  } else {
    refs.push_back({prefix + "conv1.w", &params.conv1_w, true});
    refs.push_back({prefix + "conv1.b", &params.conv1_b, false});
    refs.push_back({prefix + "conv2.w", &params.conv2_w, true});
    refs.push_back({prefix + "conv2.b", &params.conv2_b, false});
    refs.push_back({prefix + "rnn.fw.wx", &params.rnn_fw_wx, true});
    refs.push_back({prefix + "rnn.fw.wh", &params.rnn_fw_wh, true});
    refs.push_back({prefix + "rnn.fw.b", &params.rnn_fw_b, false});
    refs.push_back({prefix + "rnn.bw.wx", &params.rnn_bw_wx, true});
    refs.push_back({prefix + "rnn.bw.wh", &params.rnn_bw_wh, true});
    refs.push_back({prefix + "rnn.bw.b", &params.rnn_bw_b, false});
    refs.push_back({prefix + "proj.w", &params.proj_w, true});
    refs.push_back({prefix + "proj.b", &params.proj_b, false});
  }
  refs.push_back({prefix + "readout.w", &params.readout_w, true});
  refs.push_back({prefix + "readout.b", &params.readout_b, false});
  return refs;
}

HiddenSeq encoder_encode(const EncoderParams& params, const Eigen::MatrixXd& features,
                         EncoderCache* cache) {
  const EncoderConfig& cfg = params.config;
  cfg.validate();
  if (features.cols() != cfg.input_dim)
    raise(ErrorCode::Shape, "feature width " + std::to_string(features.cols()) +
                                " does not match input_dim " + std::to_string(cfg.input_dim));
  HiddenSeq out;
  out.frame_rate_hz = cfg.frame_rate_hz;
  if (cache != nullptr) cache->input = features;

  if (cfg.mode == EncoderConfig::Mode::OracleRoll) {
    out.vectors = (features * params.oracle_w).rowwise() + params.oracle_b.row(0);
    return out;
  }

  const Eigen::Index t_len = features.rows();
  const int r = cfg.recurrent_dim;
  Eigen::MatrixXd un1 = unfold(features, cfg.conv_kernel);
  Eigen::MatrixXd pre1 = (un1 * params.conv1_w).rowwise() + params.conv1_b.row(0);
  Eigen::MatrixXd act1 = pre1.unaryExpr([](double t) { return gelu(t); });
  Eigen::MatrixXd un2 = unfold(act1, cfg.conv_kernel);
  Eigen::MatrixXd pre2 = (un2 * params.conv2_w).rowwise() + params.conv2_b.row(0);
  Eigen::MatrixXd act2 = pre2.unaryExpr([](double t) { return gelu(t); });

  Eigen::MatrixXd fw = Eigen::MatrixXd::Zero(t_len, r);
  for (Eigen::Index t = 0; t < t_len; ++t) {
    Eigen::RowVectorXd z = act2.row(t) * params.rnn_fw_wx + params.rnn_fw_b.row(0);
    if (t > 0) z += fw.row(t - 1) * params.rnn_fw_wh;
    fw.row(t) = z.unaryExpr([](double v) { return std::tanh(v); });
  }
  Eigen::MatrixXd bw = Eigen::MatrixXd::Zero(t_len, r);
  for (Eigen::Index t = t_len - 1; t >= 0; --t) {
    Eigen::RowVectorXd z = act2.row(t) * params.rnn_bw_wx + params.rnn_bw_b.row(0);
    if (t < t_len - 1) z += bw.row(t + 1) * params.rnn_bw_wh;
    bw.row(t) = z.unaryExpr([](double v) { return std::tanh(v); });
  }
  Eigen::MatrixXd concat(t_len, 2 * r);
  concat << fw, bw;
  out.vectors = (concat * params.proj_w).rowwise() + params.proj_b.row(0);

  if (cache != nullptr) {
    cache->un1 = std::move(un1);
    cache->conv1_pre = std::move(pre1);
    cache->conv1_act = std::move(act1);
    cache->un2 = std::move(un2);
    cache->conv2_pre = std::move(pre2);
    cache->conv2_act = std::move(act2);
    cache->fw_states = std::move(fw);
    cache->bw_states = std::move(bw);
    cache->concat = std::move(concat);
  }
  return out;
}

Eigen::MatrixXd encoder_frame_probs(const EncoderParams& params, const HiddenSeq& hidden) {
  if (hidden.vectors.cols() != params.config.hidden_dim)
    raise(ErrorCode::Shape, "hidden width does not match encoder hidden_dim");
  Eigen::MatrixXd z = (hidden.vectors * params.readout_w).rowwise() + params.readout_b.row(0);
  return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

EncoderParams encoder_backward(const EncoderParams& params, const EncoderCache& cache,
                               const Eigen::MatrixXd& d_hidden) {
  const EncoderConfig& cfg = params.config;
  EncoderParams g = params.zeros_like();
  if (d_hidden.rows() != cache.input.rows() || d_hidden.cols() != cfg.hidden_dim)
    raise(ErrorCode::Shape, "hidden gradient has wrong shape");

  if (cfg.mode == EncoderConfig::Mode::OracleRoll) {
    g.oracle_w = cache.input.transpose() * d_hidden;
    g.oracle_b = d_hidden.colwise().sum();
    return g;
  }

  const Eigen::Index t_len = cache.input.rows();
  const int r = cfg.recurrent_dim;
  g.proj_w = cache.concat.transpose() * d_hidden;
  g.proj_b = d_hidden.colwise().sum();
  Eigen::MatrixXd d_concat = d_hidden * params.proj_w.transpose();

  Eigen::MatrixXd d_act2 = Eigen::MatrixXd::Zero(t_len, cfg.conv_channels);
  {  // forward direction, walked backwards in time
    Eigen::RowVectorXd carry = Eigen::RowVectorXd::Zero(r);
    for (Eigen::Index t = t_len - 1; t >= 0; --t) {
      Eigen::RowVectorXd dh = d_concat.row(t).head(r) + carry;
      Eigen::RowVectorXd dz =
          dh.cwiseProduct((1.0 - cache.fw_states.row(t).array().square()).matrix());
      g.rnn_fw_wx += cache.conv2_act.row(t).transpose() * dz;
      if (t > 0) g.rnn_fw_wh += cache.fw_states.row(t - 1).transpose() * dz;
      g.rnn_fw_b += dz;
      d_act2.row(t) += dz * params.rnn_fw_wx.transpose();
      carry = dz * params.rnn_fw_wh.transpose();
    }
  }
  {  // backward direction, walked forwards in time
    Eigen::RowVectorXd carry = Eigen::RowVectorXd::Zero(r);
    for (Eigen::Index t = 0; t < t_len; ++t) {
      Eigen::RowVectorXd dh = d_concat.row(t).tail(r) + carry;
      Eigen::RowVectorXd dz =
          dh.cwiseProduct((1.0 - cache.bw_states.row(t).array().square()).matrix());
      g.rnn_bw_wx += cache.conv2_act.row(t).transpose() * dz;
      if (t < t_len - 1) g.rnn_bw_wh += cache.bw_states.row(t + 1).transpose() * dz;
      g.rnn_bw_b += dz;
      d_act2.row(t) += dz * params.rnn_bw_wx.transpose();
      carry = dz * params.rnn_bw_wh.transpose();
    }
  }

  Eigen::MatrixXd d_pre2 =
      d_act2.cwiseProduct(cache.conv2_pre.unaryExpr([](double t) { return gelu_grad(t); }));
  g.conv2_w = cache.un2.transpose() * d_pre2;
  g.conv2_b = d_pre2.colwise().sum();
  Eigen::MatrixXd d_un2 = d_pre2 * params.conv2_w.transpose();
  Eigen::MatrixXd d_act1 = fold_add(d_un2, t_len, cfg.conv_channels, cfg.conv_kernel);

  Eigen::MatrixXd d_pre1 =
      d_act1.cwiseProduct(cache.conv1_pre.unaryExpr([](double t) { return gelu_grad(t); }));
  g.conv1_w = cache.un1.transpose() * d_pre1;
  g.conv1_b = d_pre1.colwise().sum();
  return g;
}

double encoder_roll_loss(const EncoderParams& params, const Eigen::MatrixXd& features,
                         const Eigen::MatrixXd& target_roll, EncoderParams* grads) {
  EncoderCache cache;
  HiddenSeq hidden = encoder_encode(params, features, grads != nullptr ? &cache : nullptr);
  Eigen::MatrixXd probs = encoder_frame_probs(params, hidden);
  PianoRoll pred;
  pred.frames = probs;
  PianoRoll target;
  target.frames = target_roll;
  const double loss = bce_loss(target, pred);
  if (grads == nullptr) return loss;

  Eigen::MatrixXd d_probs = bce_loss_grad(target, pred);
  Eigen::MatrixXd dz =
      d_probs.cwiseProduct((probs.array() * (1.0 - probs.array())).matrix());
  Eigen::MatrixXd d_hidden = dz * params.readout_w.transpose();
  *grads = encoder_backward(params, cache, d_hidden);
  grads->readout_w = hidden.vectors.transpose() * dz;
  grads->readout_b = dz.colwise().sum();
  return loss;
}

std::vector<double> encoder_pretrain(EncoderParams& params, const std::vector<Segment>& segments,
                                     const PretrainConfig& cfg) {
  if (segments.empty()) raise(ErrorCode::Shape, "no segments to pretrain on");
  if (cfg.steps < 1 || cfg.batch_size < 1)
    raise(ErrorCode::Config, "steps and batch_size must be positive");
  const EncoderConfig& ecfg = params.config;

  std::vector<Eigen::MatrixXd> targets;
  targets.reserve(segments.size());
  for (const Segment& seg : segments) {
    PianoRoll roll = notes_to_roll(seg, ecfg.frame_rate_hz);
    if (seg.features.rows() != roll.frames.rows() || seg.features.cols() != ecfg.input_dim)
      raise(ErrorCode::Shape, "segment features do not match the encoder input grid");
    if (roll.frames.cols() != ecfg.roll_dim)
      raise(ErrorCode::Shape, "roll width does not match encoder roll_dim");
    targets.push_back(std::move(roll.frames));
  }

  Rng rng(cfg.seed);
  AdamW opt;
  std::vector<double> losses;
  losses.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    EncoderParams total = params.zeros_like();
    auto total_refs = tensor_refs(total);
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t pick = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(segments.size()) - 1));
      EncoderParams item = params.zeros_like();
      batch_loss += encoder_roll_loss(params, segments[pick].features, targets[pick], &item);
      auto item_refs = tensor_refs(item);
      for (size_t i = 0; i < total_refs.size(); ++i) *total_refs[i].tensor += *item_refs[i].tensor;
    }
    const double inv = 1.0 / cfg.batch_size;
    for (auto& ref : total_refs) *ref.tensor *= inv;
    batch_loss *= inv;
    if (!std::isfinite(batch_loss)) raise(ErrorCode::Diverged, "non-finite pretraining loss");
    opt.step(tensor_refs(params), total_refs, cfg.adam);
    losses.push_back(batch_loss);
  }
  return losses;
}

}  // namespace pianolm
