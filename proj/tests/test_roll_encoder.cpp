#include <cmath>
#include <vector>

#include "doctest.h"
#include "pianolm/encoder.hpp"
#include "pianolm/error.hpp"
#include "pianolm/roll.hpp"

using namespace pianolm;

namespace {

EncoderConfig micro_conv_config() {
  EncoderConfig cfg;
  cfg.mode = EncoderConfig::Mode::ConvRecurrent;
  cfg.input_dim = 3;
  cfg.hidden_dim = 3;
  cfg.conv_channels = 2;
  cfg.conv_kernel = 3;
  cfg.recurrent_dim = 2;
  cfg.roll_dim = 2;
  return cfg;
}

Eigen::MatrixXd random_matrix(int rows, int cols, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

Segment roll_segment(std::vector<NoteEvent> notes, double duration_s) {
  Segment seg;
  seg.notes = canonical_sort(std::move(notes));
  seg.duration_s = duration_s;
  seg.features = notes_to_roll(seg, 100.0).frames;
  return seg;
}

void check_encoder_fd(const EncoderConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  EncoderParams params = EncoderParams::init(cfg, rng);
  Eigen::MatrixXd features = random_matrix(5, cfg.input_dim, rng);
  Eigen::MatrixXd target(5, cfg.roll_dim);
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < cfg.roll_dim; ++c) target(r, c) = rng.uniform() < 0.3 ? 1.0 : 0.0;

  EncoderParams grads = params.zeros_like();
  encoder_roll_loss(params, features, target, &grads);

  const double h = 1e-5;
  auto param_refs = tensor_refs(params);
  auto grad_refs = tensor_refs(grads);
  REQUIRE(param_refs.size() == grad_refs.size());
  for (size_t i = 0; i < param_refs.size(); ++i) {
    Eigen::MatrixXd& tensor = *param_refs[i].tensor;
    const Eigen::MatrixXd& grad = *grad_refs[i].tensor;
    for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
      for (Eigen::Index c = 0; c < tensor.cols(); ++c) {
        const double saved = tensor(r, c);
        tensor(r, c) = saved + h;
        const double up = encoder_roll_loss(params, features, target);
        tensor(r, c) = saved - h;
        const double down = encoder_roll_loss(params, features, target);
        tensor(r, c) = saved;
        const double fd = (up - down) / (2 * h);
        INFO(param_refs[i].name, "(", r, ",", c, ")");
        CHECK(std::abs(grad(r, c) - fd) < 1e-6 + 1e-4 * std::abs(fd));
      }
    }
  }
}

}  // namespace

TEST_CASE("oracle mode is exactly the affine map of the features") {
  EncoderConfig cfg;
  cfg.mode = EncoderConfig::Mode::OracleRoll;
  cfg.input_dim = 4;
  cfg.hidden_dim = 6;
  Rng rng(2);
  EncoderParams params = EncoderParams::init(cfg, rng);
  Eigen::MatrixXd x = random_matrix(7, 4, rng);

  HiddenSeq h = encoder_encode(params, x);
  Eigen::MatrixXd expect = (x * params.oracle_w).rowwise() + params.oracle_b.row(0);
  CHECK((h.vectors - expect).cwiseAbs().maxCoeff() == 0.0);

  HiddenSeq silent = encoder_encode(params, Eigen::MatrixXd::Zero(3, 4));
  for (int r = 0; r < 3; ++r)
    CHECK((silent.vectors.row(r) - params.oracle_b.row(0)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv-recurrent encoding has the right shape and is deterministic") {
  EncoderConfig cfg = micro_conv_config();
  Rng rng(3);
  EncoderParams params = EncoderParams::init(cfg, rng);
  Eigen::MatrixXd x = random_matrix(9, cfg.input_dim, rng);

  HiddenSeq a = encoder_encode(params, x);
  HiddenSeq b = encoder_encode(params, x);
  CHECK(a.vectors.rows() == 9);
  CHECK(a.vectors.cols() == cfg.hidden_dim);
  CHECK(a.vectors.allFinite());
  CHECK((a.vectors.array() == b.vectors.array()).all());

  CHECK_THROWS_WITH_AS(encoder_encode(params, random_matrix(9, cfg.input_dim + 1, rng)),
                       doctest::Contains("E_SHAPE"), Error);
}

TEST_CASE("roll-loss gradients match finite differences in both modes") {
  check_encoder_fd(micro_conv_config(), 17);

  EncoderConfig oracle;
  oracle.mode = EncoderConfig::Mode::OracleRoll;
  oracle.input_dim = 3;
  oracle.hidden_dim = 4;
  oracle.roll_dim = 2;
  check_encoder_fd(oracle, 19);
}

TEST_CASE("hidden-gradient backward matches finite differences") {
  EncoderConfig cfg = micro_conv_config();
  Rng rng(23);
  EncoderParams params = EncoderParams::init(cfg, rng);
  Eigen::MatrixXd features = random_matrix(6, cfg.input_dim, rng);
  Eigen::MatrixXd probe = random_matrix(6, cfg.hidden_dim, rng);

  auto loss_of = [&](const EncoderParams& p) {
    return encoder_encode(p, features).vectors.cwiseProduct(probe).sum();
  };

  EncoderCache cache;
  encoder_encode(params, features, &cache);
  EncoderParams grads = encoder_backward(params, cache, probe);

  const double h = 1e-5;
  auto param_refs = tensor_refs(params);
  auto grad_refs = tensor_refs(grads);
  for (size_t i = 0; i < param_refs.size(); ++i) {
    Eigen::MatrixXd& tensor = *param_refs[i].tensor;
    const Eigen::MatrixXd& grad = *grad_refs[i].tensor;
    for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
      for (Eigen::Index c = 0; c < tensor.cols(); ++c) {
        const double saved = tensor(r, c);
        tensor(r, c) = saved + h;
        const double up = loss_of(params);
        tensor(r, c) = saved - h;
        const double down = loss_of(params);
        tensor(r, c) = saved;
        const double fd = (up - down) / (2 * h);
        INFO(param_refs[i].name, "(", r, ",", c, ")");
        CHECK(std::abs(grad(r, c) - fd) < 1e-6 + 1e-4 * std::abs(fd));
      }
    }
  }
}

TEST_CASE("pretraining reduces the frame loss and replays bit-identically") {
  std::vector<Segment> segs;
  segs.push_back(roll_segment({{0.10, 60, 80, 0.44}, {0.52, 64, 70, 0.90}}, 1.0));
  segs.push_back(roll_segment({{0.05, 72, 90, 0.31}, {0.40, 45, 60, 0.77}}, 1.0));

  auto run = [&segs] {
    EncoderConfig cfg;
    cfg.input_dim = 88;
    cfg.hidden_dim = 16;
    cfg.conv_channels = 8;
    cfg.recurrent_dim = 8;
    Rng rng(7);
    EncoderParams params = EncoderParams::init(cfg, rng);
    PretrainConfig pcfg;
    pcfg.steps = 150;
    pcfg.batch_size = 2;
    pcfg.adam.lr = 1e-2;
    pcfg.seed = 11;
    return encoder_pretrain(params, segs, pcfg);
  };

  std::vector<double> losses = run();
  REQUIRE(losses.size() == 150);
  for (double l : losses) CHECK(std::isfinite(l));
  CHECK(losses.back() < 0.5 * losses.front());
  CHECK(losses.back() < 0.35);
  CHECK(run() == losses);
}

TEST_CASE("zero learning rate keeps the weights frozen") {
  std::vector<Segment> segs{roll_segment({{0.10, 60, 80, 0.44}}, 0.5)};
  EncoderConfig cfg;
  cfg.input_dim = 88;
  cfg.hidden_dim = 8;
  cfg.conv_channels = 4;
  cfg.recurrent_dim = 4;
  Rng rng(9);
  EncoderParams params = EncoderParams::init(cfg, rng);
  Eigen::MatrixXd before = params.conv1_w;

  PretrainConfig pcfg;
  pcfg.steps = 5;
  pcfg.batch_size = 1;
  pcfg.adam.lr = 0.0;
  std::vector<double> losses = encoder_pretrain(params, segs, pcfg);
  CHECK((params.conv1_w.array() == before.array()).all());
  for (double l : losses) CHECK(l == losses.front());
}

TEST_CASE("mode names round-trip and bad configs are rejected") {
  CHECK(parse_encoder_mode("oracle_roll") == EncoderConfig::Mode::OracleRoll);
  CHECK(parse_encoder_mode("conv_recurrent") == EncoderConfig::Mode::ConvRecurrent);
  CHECK(encoder_mode_name(EncoderConfig::Mode::OracleRoll) == "oracle_roll");
  CHECK_THROWS_WITH_AS(parse_encoder_mode("mel"), doctest::Contains("E_CONFIG"), Error);

  EncoderConfig even_kernel;
  even_kernel.conv_kernel = 4;
  CHECK_THROWS_WITH_AS(even_kernel.validate(), doctest::Contains("E_CONFIG"), Error);
}
