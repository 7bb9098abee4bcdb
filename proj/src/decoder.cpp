#include "pianolm/decoder.hpp"

#include <cmath>
#include <utility>

#include "pianolm/error.hpp"

namespace pianolm {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

struct LnCache {
  Eigen::MatrixXd xhat;
  Eigen::ArrayXd inv_std;
};

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::MatrixXd& gamma,
                           const Eigen::MatrixXd& beta, LnCache* cache) {
  Eigen::VectorXd mean = x.rowwise().mean();
  Eigen::MatrixXd centered = x;
  centered.colwise() -= mean;
  Eigen::ArrayXd var = centered.array().square().rowwise().mean();
  Eigen::ArrayXd inv_std = (var + kLnEps).sqrt().inverse();
  Eigen::MatrixXd xhat = (centered.array().colwise() * inv_std).matrix();
  Eigen::MatrixXd out =
      ((xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array()).matrix();
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Eigen::MatrixXd ln_output_from_cache(const LnCache& c, const Eigen::MatrixXd& gamma,
                                     const Eigen::MatrixXd& beta) {
  return ((c.xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array())
      .matrix();
}

Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const LnCache& c,
                                    const Eigen::MatrixXd& gamma, Eigen::MatrixXd& dgamma,
                                    Eigen::MatrixXd& dbeta) {
  dgamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  Eigen::MatrixXd dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
  Eigen::VectorXd mean_dxhat = dxhat.rowwise().mean();
  Eigen::ArrayXd mean_dxhat_xhat = (dxhat.array() * c.xhat.array()).rowwise().mean();
  Eigen::MatrixXd dx =
      ((dxhat.colwise() - mean_dxhat).array() - c.xhat.array().colwise() * mean_dxhat_xhat)
          .colwise() *
      c.inv_std;
  return dx;
}

/// Rotates consecutive pairs of every token row (rows >= audio_len) by
/// sign * pos * theta_i, independently per head block.
void apply_rope(Eigen::MatrixXd& m, int audio_len, int head_dim, double sign) {
  const int rows = static_cast<int>(m.rows());
  const int heads = static_cast<int>(m.cols()) / head_dim;
  const int pairs = head_dim / 2;
  for (int r = audio_len; r < rows; ++r) {
    const double pos = static_cast<double>(r - audio_len);
    for (int i = 0; i < pairs; ++i) {
      const double theta = std::pow(10000.0, -2.0 * i / head_dim);
      const double angle = pos * theta;
      const double c = std::cos(angle);
      const double s = sign * std::sin(angle);
      for (int h = 0; h < heads; ++h) {
        const int col = h * head_dim + 2 * i;
        const double a = m(r, col);
        const double b = m(r, col + 1);
        m(r, col) = a * c - b * s;
        m(r, col + 1) = a * s + b * c;
      }
    }
  }
}

/// Row-wise softmax restricted to the visible prefix: rows below
/// `audio_len` see exactly the audio block, later rows see everything up
/// to and including themselves. Hidden entries are set to exact zero.
void masked_softmax_inplace(Eigen::MatrixXd& sc, int audio_len) {
  const int s = static_cast<int>(sc.rows());
  if (audio_len > 0) {
    auto blk = sc.topLeftCorner(audio_len, audio_len);
    Eigen::VectorXd mx = blk.rowwise().maxCoeff();
    blk = (blk.colwise() - mx).array().exp().matrix();
    Eigen::ArrayXd sums = blk.rowwise().sum();
    blk.array().colwise() /= sums;
    if (s > audio_len) sc.topRightCorner(audio_len, s - audio_len).setZero();
  }
  for (int r = audio_len; r < s; ++r) {
    auto seg = sc.row(r).head(r + 1);
    const double mx = seg.maxCoeff();
    seg = (seg.array() - mx).exp();
    seg /= seg.sum();
    if (r + 1 < s) sc.row(r).tail(s - r - 1).setZero();
  }
}

Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  const double keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform() < p ? 0.0 : keep_scale;
  return m;
}

DecoderParams build_params(const DecoderConfig& cfg) {
  cfg.validate();
  DecoderParams p;
  p.config = cfg;
  const int d = cfg.embed_dim;
  p.token_embedding = Eigen::MatrixXd::Zero(cfg.vocab_size, d);
  p.input_proj_w = Eigen::MatrixXd::Zero(cfg.encoder_dim, d);
  p.input_proj_b = Eigen::MatrixXd::Zero(1, d);
  p.layers.resize(cfg.n_layers);
  for (LayerParams& lp : p.layers) {
    lp.ln1_gamma = Eigen::MatrixXd::Zero(1, d);
    lp.ln1_beta = Eigen::MatrixXd::Zero(1, d);
    lp.wq = Eigen::MatrixXd::Zero(d, d);
    lp.wk = Eigen::MatrixXd::Zero(d, d);
    lp.wv = Eigen::MatrixXd::Zero(d, d);
    lp.wo = Eigen::MatrixXd::Zero(d, d);
    lp.ln2_gamma = Eigen::MatrixXd::Zero(1, d);
    lp.ln2_beta = Eigen::MatrixXd::Zero(1, d);
    lp.ffn_w1 = Eigen::MatrixXd::Zero(d, 4 * d);
    lp.ffn_b1 = Eigen::MatrixXd::Zero(1, 4 * d);
    lp.ffn_w2 = Eigen::MatrixXd::Zero(4 * d, d);
    lp.ffn_b2 = Eigen::MatrixXd::Zero(1, d);
  }
  p.lnf_gamma = Eigen::MatrixXd::Zero(1, d);
  p.lnf_beta = Eigen::MatrixXd::Zero(1, d);
  p.readout = Eigen::MatrixXd::Zero(d, cfg.vocab_size);
  return p;
}

void fill_normal(Eigen::MatrixXd& m, Rng& rng, double stddev) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.normal() * stddev;
}

}  // namespace

void DecoderConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || embed_dim < 1 || encoder_dim < 1 || vocab_size < 1 ||
      max_seq_len < 1)
    raise(ErrorCode::Config, "decoder dimensions must be positive");
  if (embed_dim % n_heads != 0)
    raise(ErrorCode::Config, "embed_dim must be divisible by n_heads");
  if (head_dim() % 2 != 0) raise(ErrorCode::Config, "head_dim must be even for rotary pairs");
  if (!(dropout >= 0.0 && dropout < 1.0)) raise(ErrorCode::Config, "dropout must be in [0,1)");
}

DecoderConfig DecoderConfig::preset(const std::string& name) {
  DecoderConfig cfg;
  if (name == "tiny") {
    cfg.n_layers = 4;
    cfg.n_heads = 8;
    cfg.embed_dim = 512;
  } else if (name == "small") {
    cfg.n_layers = 6;
    cfg.n_heads = 12;
    cfg.embed_dim = 768;
  } else if (name == "base") {
    cfg.n_layers = 6;
    cfg.n_heads = 16;
    cfg.embed_dim = 1024;
  } else if (name == "large") {
    cfg.n_layers = 12;
    cfg.n_heads = 32;
    cfg.embed_dim = 1024;
  } else {
    raise(ErrorCode::Config, "unknown decoder preset: " + name);
  }
  cfg.encoder_dim = cfg.embed_dim;
  return cfg;
}

Eigen::VectorXd sinusoidal_pe(int pos, int dim) {
  if (dim < 2 || dim % 2 != 0) raise(ErrorCode::Shape, "positional encoding dim must be even");
  Eigen::VectorXd pe(dim);
  for (int i = 0; 2 * i < dim; ++i) {
    const double angle = pos / std::pow(10000.0, 2.0 * i / dim);
    pe(2 * i) = std::sin(angle);
    pe(2 * i + 1) = std::cos(angle);
  }
  return pe;
}

Eigen::VectorXd rope_rotate(const Eigen::VectorXd& vec, int pos) {
  const int dim = static_cast<int>(vec.size());
  if (dim < 2 || dim % 2 != 0) raise(ErrorCode::Shape, "rotary dim must be even");
  Eigen::VectorXd out(dim);
  for (int i = 0; 2 * i < dim; ++i) {
    const double theta = std::pow(10000.0, -2.0 * i / dim);
    const double angle = pos * theta;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double a = vec(2 * i);
    const double b = vec(2 * i + 1);
    out(2 * i) = a * c - b * s;
    out(2 * i + 1) = a * s + b * c;
  }
  return out;
}

DecoderParams DecoderParams::init(const DecoderConfig& config, Rng& rng) {
  DecoderParams p = build_params(config);
  const double stddev = 0.02;
  fill_normal(p.token_embedding, rng, stddev);
  fill_normal(p.input_proj_w, rng, stddev);
  for (LayerParams& lp : p.layers) {
    lp.ln1_gamma.setOnes();
    lp.ln2_gamma.setOnes();
    fill_normal(lp.wq, rng, stddev);
    fill_normal(lp.wk, rng, stddev);
    fill_normal(lp.wv, rng, stddev);
    fill_normal(lp.wo, rng, stddev);
    fill_normal(lp.ffn_w1, rng, stddev);
    fill_normal(lp.ffn_w2, rng, stddev);
  }
  p.lnf_gamma.setOnes();
  fill_normal(p.readout, rng, stddev);
  return p;
}

DecoderParams DecoderParams::zeros_like() const { return build_params(config); }

std::vector<TensorRef> tensor_refs(DecoderParams& params, const std::string& prefix) {
  std::vector<TensorRef> refs;
  refs.push_back({prefix + "token_embedding", &params.token_embedding, true});
  refs.push_back({prefix + "input_proj.w", &params.input_proj_w, true});
  refs.push_back({prefix + "input_proj.b", &params.input_proj_b, false});
  for (size_t l = 0; l < params.layers.size(); ++l) {
    LayerParams& lp = params.layers[l];
    const std::string base = prefix + "layers." + std::to_string(l) + ".";
    refs.push_back({base + "ln1.gamma", &lp.ln1_gamma, false});
    refs.push_back({base + "ln1.beta", &lp.ln1_beta, false});
    refs.push_back({base + "attn.wq", &lp.wq, true});
    refs.push_back({base + "attn.wk", &lp.wk, true});
    refs.push_back({base + "attn.wv", &lp.wv, true});
    refs.push_back({base + "attn.wo", &lp.wo, true});
    refs.push_back({base + "ln2.gamma", &lp.ln2_gamma, false});
    refs.push_back({base + "ln2.beta", &lp.ln2_beta, false});
    refs.push_back({base + "ffn.w1", &lp.ffn_w1, true});
    refs.push_back({base + "ffn.b1", &lp.ffn_b1, false});
    refs.push_back({base + "ffn.w2", &lp.ffn_w2, true});
    refs.push_back({base + "ffn.b2", &lp.ffn_b2, false});
  }
  refs.push_back({prefix + "final_norm.gamma", &params.lnf_gamma, false});
  refs.push_back({prefix + "final_norm.beta", &params.lnf_beta, false});
  refs.push_back({prefix + "readout", &params.readout, true});
  return refs;
}

struct LayerActivations {
  LnCache ln1;
  Eigen::MatrixXd q, k, v;  // q and k stored with rotation applied
  std::vector<Eigen::MatrixXd> probs;
  std::vector<Eigen::MatrixXd> probs_dropped;  // present only when dropout is active
  std::vector<Eigen::MatrixXd> prob_masks;
  Eigen::MatrixXd ctx;
  Eigen::MatrixXd attn_out_mask;
  LnCache ln2;
  Eigen::MatrixXd ffn_pre, ffn_act;
  Eigen::MatrixXd ffn_out_mask;
};

struct ForwardCache {
  int audio_len = 0;
  std::vector<int> token_ids;
  Eigen::MatrixXd h_input;
  std::vector<LayerActivations> layers;
  LnCache lnf;  // over token rows only
};

ForwardCache* new_forward_cache() { return new ForwardCache(); }
void free_forward_cache(ForwardCache* cache) { delete cache; }

Eigen::MatrixXd decoder_forward(const DecoderParams& params, const HiddenSeq& hidden,
                                const std::vector<int>& tokens, ForwardCache* cache,
                                Rng* dropout_rng) {
  const DecoderConfig& cfg = params.config;
  cfg.validate();
  const int audio_len = static_cast<int>(hidden.vectors.rows());
  const int n_tok = static_cast<int>(tokens.size());
  const int s = audio_len + n_tok;
  const int d = cfg.embed_dim;
  const int dh = cfg.head_dim();
  if (audio_len > 0 && hidden.vectors.cols() != cfg.encoder_dim)
    raise(ErrorCode::Shape, "hidden width " + std::to_string(hidden.vectors.cols()) +
                                " does not match encoder_dim " +
                                std::to_string(cfg.encoder_dim));
  if (s > cfg.max_seq_len)
    raise(ErrorCode::Length, "sequence of " + std::to_string(s) + " rows exceeds max_seq_len " +
                                 std::to_string(cfg.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      raise(ErrorCode::Shape, "token id " + std::to_string(t) + " outside vocabulary");
  const double p_drop = dropout_rng != nullptr ? cfg.dropout : 0.0;

  Eigen::MatrixXd x(s, d);
  if (audio_len > 0) {
    x.topRows(audio_len) =
        (hidden.vectors * params.input_proj_w).rowwise() + params.input_proj_b.row(0);
    for (int r = 0; r < audio_len; ++r) x.row(r) += sinusoidal_pe(r, d).transpose();
  }
  for (int t = 0; t < n_tok; ++t) x.row(audio_len + t) = params.token_embedding.row(tokens[t]);

  if (cache != nullptr) {
    cache->audio_len = audio_len;
    cache->token_ids = tokens;
    cache->h_input = hidden.vectors;
    cache->layers.assign(cfg.n_layers, LayerActivations{});
  }

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params.layers[l];
    LayerActivations* act = cache != nullptr ? &cache->layers[l] : nullptr;
    LnCache ln1_local;
    LnCache& ln1 = act != nullptr ? act->ln1 : ln1_local;
    Eigen::MatrixXd h = layer_norm(x, lp.ln1_gamma, lp.ln1_beta, &ln1);
    Eigen::MatrixXd q = h * lp.wq;
    Eigen::MatrixXd k = h * lp.wk;
    Eigen::MatrixXd v = h * lp.wv;
    apply_rope(q, audio_len, dh, 1.0);
    apply_rope(k, audio_len, dh, 1.0);

    Eigen::MatrixXd ctx(s, d);
    std::vector<Eigen::MatrixXd> probs(cfg.n_heads);
    std::vector<Eigen::MatrixXd> probs_dropped;
    std::vector<Eigen::MatrixXd> prob_masks;
    for (int head = 0; head < cfg.n_heads; ++head) {
      Eigen::MatrixXd sc =
          q.middleCols(head * dh, dh) * k.middleCols(head * dh, dh).transpose() * inv_sqrt_dh;
      masked_softmax_inplace(sc, audio_len);
      probs[head] = std::move(sc);
      const Eigen::MatrixXd* attend = &probs[head];
      if (p_drop > 0.0) {
        prob_masks.push_back(dropout_mask(s, s, p_drop, *dropout_rng));
        probs_dropped.push_back(probs[head].cwiseProduct(prob_masks.back()));
        attend = &probs_dropped.back();
      }
      ctx.middleCols(head * dh, dh) = *attend * v.middleCols(head * dh, dh);
    }

    Eigen::MatrixXd attn_out = ctx * lp.wo;
    Eigen::MatrixXd attn_out_mask;
    if (p_drop > 0.0) {
      attn_out_mask = dropout_mask(s, d, p_drop, *dropout_rng);
      attn_out = attn_out.cwiseProduct(attn_out_mask);
    }
    Eigen::MatrixXd x_mid = x + attn_out;

    LnCache ln2_local;
    LnCache& ln2 = act != nullptr ? act->ln2 : ln2_local;
    Eigen::MatrixXd h2 = layer_norm(x_mid, lp.ln2_gamma, lp.ln2_beta, &ln2);
    Eigen::MatrixXd pre = (h2 * lp.ffn_w1).rowwise() + lp.ffn_b1.row(0);
    Eigen::MatrixXd activated = pre.unaryExpr([](double t) { return gelu(t); });
    Eigen::MatrixXd ffn_out = (activated * lp.ffn_w2).rowwise() + lp.ffn_b2.row(0);
    Eigen::MatrixXd ffn_out_mask;
    if (p_drop > 0.0) {
      ffn_out_mask = dropout_mask(s, d, p_drop, *dropout_rng);
      ffn_out = ffn_out.cwiseProduct(ffn_out_mask);
    }

    if (act != nullptr) {
      act->q = std::move(q);
      act->k = std::move(k);
      act->v = std::move(v);
      act->probs = std::move(probs);
      act->probs_dropped = std::move(probs_dropped);
      act->prob_masks = std::move(prob_masks);
      act->ctx = std::move(ctx);
      act->attn_out_mask = std::move(attn_out_mask);
      act->ffn_pre = std::move(pre);
      act->ffn_act = std::move(activated);
      act->ffn_out_mask = std::move(ffn_out_mask);
    }
    x = x_mid + ffn_out;
  }

  Eigen::MatrixXd token_rows = x.bottomRows(n_tok);
  LnCache lnf_local;
  LnCache& lnf = cache != nullptr ? cache->lnf : lnf_local;
  Eigen::MatrixXd y = layer_norm(token_rows, params.lnf_gamma, params.lnf_beta, &lnf);
  return y * params.readout;
}

std::pair<double, long> nll_loss_sum(const Eigen::MatrixXd& logits,
                                     const std::vector<int>& tokens,
                                     const std::vector<std::uint8_t>& loss_mask) {
  const int n = static_cast<int>(tokens.size());
  if (static_cast<int>(loss_mask.size()) != n)
    raise(ErrorCode::Shape, "loss mask length does not match token length");
  if (logits.rows() != n) raise(ErrorCode::Shape, "logits rows do not match token length");
  if (n > 0 && loss_mask[0] != 0)
    raise(ErrorCode::Malformed, "first token has no predecessor to predict it");
  double total = 0.0;
  long count = 0;
  for (int t = 1; t < n; ++t) {
    if (loss_mask[t] == 0) continue;
    if (tokens[t] < 0 || tokens[t] >= logits.cols())
      raise(ErrorCode::Shape, "token id outside logits width");
    const auto row = logits.row(t - 1);
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row.array() - mx).exp().sum());
    total += lse - row(tokens[t]);
    ++count;
  }
  return {total, count};
}

double nll_loss(const Eigen::MatrixXd& logits, const std::vector<int>& tokens,
                const std::vector<std::uint8_t>& loss_mask) {
  auto [total, count] = nll_loss_sum(logits, tokens, loss_mask);
  if (count == 0) raise(ErrorCode::EmptyMask, "no positions contribute to the loss");
  return total / static_cast<double>(count);
}

Eigen::MatrixXd nll_loss_grad(const Eigen::MatrixXd& logits, const std::vector<int>& tokens,
                              const std::vector<std::uint8_t>& loss_mask, double scale) {
  const int n = static_cast<int>(tokens.size());
  if (static_cast<int>(loss_mask.size()) != n)
    raise(ErrorCode::Shape, "loss mask length does not match token length");
  if (logits.rows() != n) raise(ErrorCode::Shape, "logits rows do not match token length");
  long count = 0;
  for (int t = 1; t < n; ++t)
    if (loss_mask[t] != 0) ++count;
  if (count == 0) raise(ErrorCode::EmptyMask, "no positions contribute to the loss");
  if (scale < 0.0) scale = 1.0 / static_cast<double>(count);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(logits.rows(), logits.cols());
  for (int t = 1; t < n; ++t) {
    if (loss_mask[t] == 0) continue;
    const auto row = logits.row(t - 1);
    const double mx = row.maxCoeff();
    Eigen::ArrayXd p = (row.array() - mx).exp().transpose();
    p /= p.sum();
    d.row(t - 1) += p.matrix().transpose() * scale;
    d(t - 1, tokens[t]) -= scale;
  }
  return d;
}

DecoderBackwardResult decoder_backward(const DecoderParams& params, const ForwardCache& cache,
                                       const Eigen::MatrixXd& d_logits) {
  const DecoderConfig& cfg = params.config;
  const int audio_len = cache.audio_len;
  const int n_tok = static_cast<int>(cache.token_ids.size());
  const int s = audio_len + n_tok;
  const int d = cfg.embed_dim;
  const int dh = cfg.head_dim();
  if (d_logits.rows() != n_tok || d_logits.cols() != cfg.vocab_size)
    raise(ErrorCode::Shape, "logits gradient has wrong shape");

  DecoderBackwardResult out;
  out.grads = params.zeros_like();
  DecoderParams& g = out.grads;

  Eigen::MatrixXd lnf_out = ln_output_from_cache(cache.lnf, params.lnf_gamma, params.lnf_beta);
  g.readout = lnf_out.transpose() * d_logits;
  Eigen::MatrixXd d_lnf_out = d_logits * params.readout.transpose();
  Eigen::MatrixXd d_token_rows =
      layer_norm_backward(d_lnf_out, cache.lnf, params.lnf_gamma, g.lnf_gamma, g.lnf_beta);

  Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(s, d);
  dx.bottomRows(n_tok) = d_token_rows;

  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerParams& lp = params.layers[l];
    LayerParams& gl = g.layers[l];
    const LayerActivations& act = cache.layers[l];
    const bool prob_drop = !act.prob_masks.empty();

    // FFN branch
    Eigen::MatrixXd d_ffn_out = dx;
    if (act.ffn_out_mask.size() > 0) d_ffn_out = d_ffn_out.cwiseProduct(act.ffn_out_mask);
    gl.ffn_b2 = d_ffn_out.colwise().sum();
    gl.ffn_w2 = act.ffn_act.transpose() * d_ffn_out;
    Eigen::MatrixXd d_act = d_ffn_out * lp.ffn_w2.transpose();
    Eigen::MatrixXd d_pre =
        d_act.cwiseProduct(act.ffn_pre.unaryExpr([](double t) { return gelu_grad(t); }));
    gl.ffn_b1 = d_pre.colwise().sum();
    Eigen::MatrixXd ln2_out = ln_output_from_cache(act.ln2, lp.ln2_gamma, lp.ln2_beta);
    gl.ffn_w1 = ln2_out.transpose() * d_pre;
    Eigen::MatrixXd d_ln2_out = d_pre * lp.ffn_w1.transpose();
    Eigen::MatrixXd d_x_mid =
        dx + layer_norm_backward(d_ln2_out, act.ln2, lp.ln2_gamma, gl.ln2_gamma, gl.ln2_beta);

    // Attention branch
    Eigen::MatrixXd d_attn_out = d_x_mid;
    if (act.attn_out_mask.size() > 0) d_attn_out = d_attn_out.cwiseProduct(act.attn_out_mask);
    gl.wo = act.ctx.transpose() * d_attn_out;
    Eigen::MatrixXd d_ctx = d_attn_out * lp.wo.transpose();

    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(s, d);
    Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(s, d);
    Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(s, d);
    for (int head = 0; head < cfg.n_heads; ++head) {
      const Eigen::MatrixXd& probs = act.probs[head];
      const Eigen::MatrixXd& attended = prob_drop ? act.probs_dropped[head] : probs;
      auto d_ctx_h = d_ctx.middleCols(head * dh, dh);
      Eigen::MatrixXd d_probs = d_ctx_h * act.v.middleCols(head * dh, dh).transpose();
      dv.middleCols(head * dh, dh) = attended.transpose() * d_ctx_h;
      if (prob_drop) d_probs = d_probs.cwiseProduct(act.prob_masks[head]);
      Eigen::ArrayXd row_dot = (d_probs.array() * probs.array()).rowwise().sum();
      Eigen::MatrixXd d_scores =
          ((d_probs.array().colwise() - row_dot) * probs.array()).matrix();
      dq.middleCols(head * dh, dh) =
          d_scores * act.k.middleCols(head * dh, dh) * inv_sqrt_dh;
      dk.middleCols(head * dh, dh) =
          d_scores.transpose() * act.q.middleCols(head * dh, dh) * inv_sqrt_dh;
    }
    apply_rope(dq, audio_len, dh, -1.0);
    apply_rope(dk, audio_len, dh, -1.0);

    Eigen::MatrixXd ln1_out = ln_output_from_cache(act.ln1, lp.ln1_gamma, lp.ln1_beta);
    gl.wq = ln1_out.transpose() * dq;
    gl.wk = ln1_out.transpose() * dk;
    gl.wv = ln1_out.transpose() * dv;
    Eigen::MatrixXd d_ln1_out =
        dq * lp.wq.transpose() + dk * lp.wk.transpose() + dv * lp.wv.transpose();
    dx = d_x_mid +
         layer_norm_backward(d_ln1_out, act.ln1, lp.ln1_gamma, gl.ln1_gamma, gl.ln1_beta);
  }

  if (audio_len > 0) {
    Eigen::MatrixXd d_audio = dx.topRows(audio_len);
    g.input_proj_w = cache.h_input.transpose() * d_audio;
    g.input_proj_b = d_audio.colwise().sum();
    out.d_hidden = d_audio * params.input_proj_w.transpose();
  } else {
    out.d_hidden = Eigen::MatrixXd::Zero(0, cfg.encoder_dim);
  }
  for (int t = 0; t < n_tok; ++t)
    g.token_embedding.row(cache.token_ids[t]) += dx.row(audio_len + t);
  return out;
}

void AdamW::step(const std::vector<TensorRef>& params, const std::vector<TensorRef>& grads,
                 const AdamConfig& cfg) {
  if (params.size() != grads.size())
    raise(ErrorCode::Shape, "parameter and gradient lists differ in length");
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m_[i] = Eigen::MatrixXd::Zero(params[i].tensor->rows(), params[i].tensor->cols());
      v_[i] = m_[i];
    }
  }
  if (m_.size() != params.size()) raise(ErrorCode::Shape, "optimizer state list size mismatch");

  double norm_sq = 0.0;
  for (size_t i = 0; i < params.size(); ++i) {
    if (grads[i].tensor->rows() != params[i].tensor->rows() ||
        grads[i].tensor->cols() != params[i].tensor->cols())
      raise(ErrorCode::Shape, "gradient shape mismatch for " + params[i].name);
    norm_sq += grads[i].tensor->squaredNorm();
  }
  if (!std::isfinite(norm_sq)) raise(ErrorCode::Diverged, "non-finite gradient norm");
  double scale = 1.0;
  if (cfg.grad_clip > 0.0) {
    const double norm = std::sqrt(norm_sq);
    if (norm > cfg.grad_clip) scale = cfg.grad_clip / norm;
  }

  ++step_;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params.size(); ++i) {
    Eigen::MatrixXd& p = *params[i].tensor;
    const Eigen::MatrixXd grad = *grads[i].tensor * scale;
    m_[i] = cfg.beta1 * m_[i] + (1.0 - cfg.beta1) * grad;
    v_[i] = cfg.beta2 * v_[i] + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
    const Eigen::MatrixXd update =
        (m_[i] / bc1).cwiseQuotient(((v_[i] / bc2).cwiseSqrt().array() + cfg.eps).matrix());
    if (params[i].decay && cfg.weight_decay > 0.0) p -= cfg.lr * cfg.weight_decay * p;
    p -= cfg.lr * update;
  }
}

double decoder_train_step(DecoderParams& params, const std::vector<DecoderBatchItem>& batch,
                          AdamW& opt, const AdamConfig& cfg, Rng* dropout_rng) {
  if (batch.empty()) raise(ErrorCode::Shape, "empty batch");
  long total_count = 0;
  for (const DecoderBatchItem& item : batch)
    for (std::uint8_t m : item.tokens->loss_mask) total_count += m != 0 ? 1 : 0;
  if (total_count == 0) raise(ErrorCode::EmptyMask, "no positions contribute to the loss");
  const double scale = 1.0 / static_cast<double>(total_count);

  DecoderParams grads = params.zeros_like();
  auto grad_refs = tensor_refs(grads);
  double total_nll = 0.0;
  for (const DecoderBatchItem& item : batch) {
    CachePtr cache;
    Eigen::MatrixXd logits =
        decoder_forward(params, *item.hidden, item.tokens->ids, cache.get(), dropout_rng);
    auto [nll, count] = nll_loss_sum(logits, item.tokens->ids, item.tokens->loss_mask);
    if (count == 0) continue;
    total_nll += nll;
    Eigen::MatrixXd d_logits =
        nll_loss_grad(logits, item.tokens->ids, item.tokens->loss_mask, scale);
    DecoderBackwardResult back = decoder_backward(params, *cache.get(), d_logits);
    auto item_refs = tensor_refs(back.grads);
    for (size_t i = 0; i < grad_refs.size(); ++i) *grad_refs[i].tensor += *item_refs[i].tensor;
  }
  const double loss = total_nll * scale;
  if (!std::isfinite(loss)) raise(ErrorCode::Diverged, "non-finite training loss");
  opt.step(tensor_refs(params), grad_refs, cfg);
  return loss;
}

DecoderSession::DecoderSession(const DecoderParams& params, const HiddenSeq& hidden)
    : params_(&params) {
  const DecoderConfig& cfg = params.config;
  cfg.validate();
  audio_len_ = static_cast<int>(hidden.vectors.rows());
  kv_.resize(cfg.n_layers);
  for (LayerKv& kv : kv_) {
    kv.k = Eigen::MatrixXd::Zero(cfg.max_seq_len, cfg.embed_dim);
    kv.v = Eigen::MatrixXd::Zero(cfg.max_seq_len, cfg.embed_dim);
  }
  if (audio_len_ == 0) return;
  CachePtr cache;
  decoder_forward(params, hidden, {}, cache.get());
  for (int l = 0; l < cfg.n_layers; ++l) {
    kv_[l].k.topRows(audio_len_) = cache.get()->layers[l].k;
    kv_[l].v.topRows(audio_len_) = cache.get()->layers[l].v;
  }
}

Eigen::VectorXd DecoderSession::append(int token) {
  const DecoderConfig& cfg = params_->config;
  if (token < 0 || token >= cfg.vocab_size)
    raise(ErrorCode::Shape, "token id " + std::to_string(token) + " outside vocabulary");
  if (total_len() + 1 > cfg.max_seq_len)
    raise(ErrorCode::Length, "session exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  const int d = cfg.embed_dim;
  const int dh = cfg.head_dim();
  const int pos = token_len_;
  const int row = total_len();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Eigen::RowVectorXd x = params_->token_embedding.row(token);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerParams& lp = params_->layers[l];
    Eigen::MatrixXd h1 = layer_norm(x, lp.ln1_gamma, lp.ln1_beta, nullptr);
    Eigen::MatrixXd q = h1 * lp.wq;
    Eigen::MatrixXd k = h1 * lp.wk;
    Eigen::MatrixXd v = h1 * lp.wv;
    for (int i = 0; 2 * i < dh; ++i) {
      const double theta = std::pow(10000.0, -2.0 * i / dh);
      const double c = std::cos(pos * theta);
      const double s = std::sin(pos * theta);
      for (int head = 0; head < cfg.n_heads; ++head) {
        const int col = head * dh + 2 * i;
        double a = q(0, col), b = q(0, col + 1);
        q(0, col) = a * c - b * s;
        q(0, col + 1) = a * s + b * c;
        a = k(0, col);
        b = k(0, col + 1);
        k(0, col) = a * c - b * s;
        k(0, col + 1) = a * s + b * c;
      }
    }
    kv_[l].k.row(row) = k.row(0);
    kv_[l].v.row(row) = v.row(0);

    Eigen::RowVectorXd ctx(d);
    const auto keys = kv_[l].k.topRows(row + 1);
    const auto vals = kv_[l].v.topRows(row + 1);
    for (int head = 0; head < cfg.n_heads; ++head) {
      Eigen::VectorXd sc =
          keys.middleCols(head * dh, dh) * q.row(0).segment(head * dh, dh).transpose() *
          inv_sqrt_dh;
      const double mx = sc.maxCoeff();
      Eigen::ArrayXd e = (sc.array() - mx).exp();
      e /= e.sum();
      ctx.segment(head * dh, dh) = e.matrix().transpose() * vals.middleCols(head * dh, dh);
    }
    x += ctx * lp.wo;

    Eigen::MatrixXd h2 = layer_norm(x, lp.ln2_gamma, lp.ln2_beta, nullptr);
    Eigen::MatrixXd pre = (h2 * lp.ffn_w1).rowwise() + lp.ffn_b1.row(0);
    Eigen::MatrixXd activated = pre.unaryExpr([](double t) { return gelu(t); });
    Eigen::MatrixXd ffn_out = (activated * lp.ffn_w2).rowwise() + lp.ffn_b2.row(0);
    x += ffn_out.row(0);
  }
  Eigen::MatrixXd y = layer_norm(x, params_->lnf_gamma, params_->lnf_beta, nullptr);
  ++token_len_;
  return (y * params_->readout).row(0).transpose();
}

}  // namespace pianolm
