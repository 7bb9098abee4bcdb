#include "pianolm/config.hpp"

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>

#include <json.hpp>

#include "config_json.hpp"
#include "pianolm/error.hpp"

namespace pianolm {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

[[noreturn]] void fail(ErrorCode code, const std::string& where,
                       const std::string& why) {
  raise(code, where + ": " + why);
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                ErrorCode code, const std::string& where) {
  if (!obj.is_object()) fail(code, where, "expected an object");
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* key : allowed) known = known || item.key() == key;
    if (!known) fail(code, where, "unknown key \"" + item.key() + "\"");
  }
}

int get_int(const json& obj, const char* key, int dflt, ErrorCode code,
            const std::string& where) {
  if (!obj.contains(key)) return dflt;
  if (!obj.at(key).is_number_integer())
    fail(code, where, std::string(key) + " must be an integer");
  return obj.at(key).get<int>();
}

std::uint64_t get_u64(const json& obj, const char* key, std::uint64_t dflt,
                      ErrorCode code, const std::string& where) {
  if (!obj.contains(key)) return dflt;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() &&
                                 v.get<std::int64_t>() < 0))
    fail(code, where, std::string(key) + " must be a nonnegative integer");
  return v.get<std::uint64_t>();
}

double get_double(const json& obj, const char* key, double dflt,
                  ErrorCode code, const std::string& where) {
  if (!obj.contains(key)) return dflt;
  if (!obj.at(key).is_number())
    fail(code, where, std::string(key) + " must be a number");
  return obj.at(key).get<double>();
}

bool get_bool(const json& obj, const char* key, bool dflt, ErrorCode code,
              const std::string& where) {
  if (!obj.contains(key)) return dflt;
  if (!obj.at(key).is_boolean())
    fail(code, where, std::string(key) + " must be true or false");
  return obj.at(key).get<bool>();
}

std::string get_string(const json& obj, const char* key,
                       const std::string& dflt, ErrorCode code,
                       const std::string& where) {
  if (!obj.contains(key)) return dflt;
  if (!obj.at(key).is_string())
    fail(code, where, std::string(key) + " must be a string");
  return obj.at(key).get<std::string>();
}

constexpr ErrorCode kCfg = ErrorCode::Config;

ordered_json adam_json(const AdamConfig& cfg) {
  return {{"lr", cfg.lr},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"eps", cfg.eps},
          {"weight_decay", cfg.weight_decay},
          {"grad_clip", cfg.grad_clip}};
}

AdamConfig adam_from_json(const json& obj, const std::string& where) {
  check_keys(obj, {"lr", "beta1", "beta2", "eps", "weight_decay", "grad_clip"},
             kCfg, where);
  AdamConfig cfg;
  cfg.lr = get_double(obj, "lr", cfg.lr, kCfg, where);
  cfg.beta1 = get_double(obj, "beta1", cfg.beta1, kCfg, where);
  cfg.beta2 = get_double(obj, "beta2", cfg.beta2, kCfg, where);
  cfg.eps = get_double(obj, "eps", cfg.eps, kCfg, where);
  cfg.weight_decay = get_double(obj, "weight_decay", cfg.weight_decay, kCfg, where);
  cfg.grad_clip = get_double(obj, "grad_clip", cfg.grad_clip, kCfg, where);
  return cfg;
}

ordered_json codec_json(const CodecConfig& cfg) {
  return {{"time_step_s", cfg.time_step_s},
          {"segment_duration_s", cfg.segment_duration_s},
          {"max_time_index", cfg.max_time_index},
          {"offset_stage_includes_velocity", cfg.offset_stage_includes_velocity}};
}

CodecConfig codec_from_json(const json& obj, const std::string& where) {
  check_keys(obj,
             {"time_step_s", "segment_duration_s", "max_time_index",
              "offset_stage_includes_velocity"},
             kCfg, where);
  CodecConfig cfg;
  cfg.time_step_s = get_double(obj, "time_step_s", cfg.time_step_s, kCfg, where);
  cfg.segment_duration_s =
      get_double(obj, "segment_duration_s", cfg.segment_duration_s, kCfg, where);
  // The index range follows the duration unless pinned explicitly.
  const int derived = static_cast<int>(
      std::lround(cfg.segment_duration_s / cfg.time_step_s));
  cfg.max_time_index = get_int(obj, "max_time_index", derived, kCfg, where);
  cfg.offset_stage_includes_velocity =
      get_bool(obj, "offset_stage_includes_velocity",
               cfg.offset_stage_includes_velocity, kCfg, where);
  return cfg;
}

}  // namespace

namespace detail {

ordered_json encoder_config_json(const EncoderConfig& cfg) {
  return {{"mode", encoder_mode_name(cfg.mode)},
          {"input_dim", cfg.input_dim},
          {"hidden_dim", cfg.hidden_dim},
          {"conv_channels", cfg.conv_channels},
          {"conv_kernel", cfg.conv_kernel},
          {"recurrent_dim", cfg.recurrent_dim},
          {"roll_dim", cfg.roll_dim},
          {"frame_rate_hz", cfg.frame_rate_hz}};
}

EncoderConfig encoder_config_from_json(const json& obj, ErrorCode code,
                                       const std::string& where) {
  check_keys(obj,
             {"mode", "input_dim", "hidden_dim", "conv_channels", "conv_kernel",
              "recurrent_dim", "roll_dim", "frame_rate_hz"},
             code, where);
  EncoderConfig cfg;
  cfg.mode = parse_encoder_mode(
      get_string(obj, "mode", encoder_mode_name(cfg.mode), code, where));
  cfg.input_dim = get_int(obj, "input_dim", cfg.input_dim, code, where);
  cfg.hidden_dim = get_int(obj, "hidden_dim", cfg.hidden_dim, code, where);
  cfg.conv_channels = get_int(obj, "conv_channels", cfg.conv_channels, code, where);
  cfg.conv_kernel = get_int(obj, "conv_kernel", cfg.conv_kernel, code, where);
  cfg.recurrent_dim = get_int(obj, "recurrent_dim", cfg.recurrent_dim, code, where);
  cfg.roll_dim = get_int(obj, "roll_dim", cfg.roll_dim, code, where);
  cfg.frame_rate_hz = get_double(obj, "frame_rate_hz", cfg.frame_rate_hz, code, where);
  return cfg;
}

ordered_json decoder_config_json(const DecoderConfig& cfg) {
  return {{"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},
          {"embed_dim", cfg.embed_dim},
          {"encoder_dim", cfg.encoder_dim},
          {"vocab_size", cfg.vocab_size},
          {"max_seq_len", cfg.max_seq_len},
          {"dropout", cfg.dropout}};
}

DecoderConfig decoder_config_from_json(const json& obj, ErrorCode code,
                                       const std::string& where) {
  check_keys(obj,
             {"preset", "n_layers", "n_heads", "embed_dim", "encoder_dim",
              "vocab_size", "max_seq_len", "dropout"},
             code, where);
  DecoderConfig cfg;
  if (obj.contains("preset"))
    cfg = DecoderConfig::preset(get_string(obj, "preset", "", code, where));
  cfg.n_layers = get_int(obj, "n_layers", cfg.n_layers, code, where);
  cfg.n_heads = get_int(obj, "n_heads", cfg.n_heads, code, where);
  cfg.embed_dim = get_int(obj, "embed_dim", cfg.embed_dim, code, where);
  cfg.encoder_dim = get_int(obj, "encoder_dim", cfg.encoder_dim, code, where);
  cfg.vocab_size = get_int(obj, "vocab_size", cfg.vocab_size, code, where);
  cfg.max_seq_len = get_int(obj, "max_seq_len", cfg.max_seq_len, code, where);
  cfg.dropout = get_double(obj, "dropout", cfg.dropout, code, where);
  return cfg;
}

}  // namespace detail

RunConfig parse_run_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::Config, std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(root, {"encoder", "decoder", "pretrain", "train", "decode", "match"},
             kCfg, "config");

  RunConfig cfg;
  if (root.contains("encoder"))
    cfg.encoder = detail::encoder_config_from_json(root["encoder"], kCfg, "encoder");
  if (root.contains("decoder"))
    cfg.decoder = detail::decoder_config_from_json(root["decoder"], kCfg, "decoder");

  if (root.contains("pretrain")) {
    const json& obj = root["pretrain"];
    check_keys(obj, {"steps", "batch_size", "seed", "adam"}, kCfg, "pretrain");
    cfg.pretrain.steps = get_int(obj, "steps", cfg.pretrain.steps, kCfg, "pretrain");
    cfg.pretrain.batch_size =
        get_int(obj, "batch_size", cfg.pretrain.batch_size, kCfg, "pretrain");
    cfg.pretrain.seed = get_u64(obj, "seed", cfg.pretrain.seed, kCfg, "pretrain");
    if (obj.contains("adam"))
      cfg.pretrain.adam = adam_from_json(obj["adam"], "pretrain.adam");
  }

  if (root.contains("train")) {
    const json& obj = root["train"];
    check_keys(obj,
               {"steps", "batch_size", "eval_interval", "val_fraction",
                "freeze_encoder", "seed", "adam", "codec"},
               kCfg, "train");
    cfg.train.steps = get_int(obj, "steps", cfg.train.steps, kCfg, "train");
    cfg.train.batch_size =
        get_int(obj, "batch_size", cfg.train.batch_size, kCfg, "train");
    cfg.train.eval_interval =
        get_int(obj, "eval_interval", cfg.train.eval_interval, kCfg, "train");
    cfg.train.val_fraction =
        get_double(obj, "val_fraction", cfg.train.val_fraction, kCfg, "train");
    cfg.train.freeze_encoder =
        get_bool(obj, "freeze_encoder", cfg.train.freeze_encoder, kCfg, "train");
    cfg.train.seed = get_u64(obj, "seed", cfg.train.seed, kCfg, "train");
    if (obj.contains("adam"))
      cfg.train.adam = adam_from_json(obj["adam"], "train.adam");
    if (obj.contains("codec"))
      cfg.train.codec = codec_from_json(obj["codec"], "train.codec");
  }

  if (root.contains("decode")) {
    const json& obj = root["decode"];
    check_keys(obj,
               {"grammar_constrained", "monotonic_onsets", "beam_width",
                "max_notes", "codec"},
               kCfg, "decode");
    cfg.decode.grammar_constrained = get_bool(
        obj, "grammar_constrained", cfg.decode.grammar_constrained, kCfg, "decode");
    cfg.decode.monotonic_onsets = get_bool(
        obj, "monotonic_onsets", cfg.decode.monotonic_onsets, kCfg, "decode");
    cfg.decode.beam_width =
        get_int(obj, "beam_width", cfg.decode.beam_width, kCfg, "decode");
    cfg.decode.max_notes =
        get_int(obj, "max_notes", cfg.decode.max_notes, kCfg, "decode");
    if (obj.contains("codec"))
      cfg.decode.codec = codec_from_json(obj["codec"], "decode.codec");
  }

  if (root.contains("match")) {
    const json& obj = root["match"];
    check_keys(obj,
               {"onset_tol_s", "offset_tol_s", "offset_ratio", "pitch_tol_cents",
                "velocity_tol", "velocity_mode"},
               kCfg, "match");
    cfg.match.onset_tol_s =
        get_double(obj, "onset_tol_s", cfg.match.onset_tol_s, kCfg, "match");
    cfg.match.offset_tol_s =
        get_double(obj, "offset_tol_s", cfg.match.offset_tol_s, kCfg, "match");
    cfg.match.offset_ratio =
        get_double(obj, "offset_ratio", cfg.match.offset_ratio, kCfg, "match");
    cfg.match.pitch_tol_cents =
        get_double(obj, "pitch_tol_cents", cfg.match.pitch_tol_cents, kCfg, "match");
    cfg.match.velocity_tol =
        get_double(obj, "velocity_tol", cfg.match.velocity_tol, kCfg, "match");
    const std::string mode = get_string(
        obj, "velocity_mode", cfg.match.rescale_velocities ? "rescaled" : "absolute",
        kCfg, "match");
    if (mode != "rescaled" && mode != "absolute")
      fail(kCfg, "match", "velocity_mode must be \"rescaled\" or \"absolute\"");
    cfg.match.rescale_velocities = mode == "rescaled";
  }

  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string format_run_config(const RunConfig& cfg) {
  ordered_json root;
  root["encoder"] = detail::encoder_config_json(cfg.encoder);
  root["decoder"] = detail::decoder_config_json(cfg.decoder);
  root["pretrain"] = {{"steps", cfg.pretrain.steps},
                      {"batch_size", cfg.pretrain.batch_size},
                      {"seed", cfg.pretrain.seed},
                      {"adam", adam_json(cfg.pretrain.adam)}};
  root["train"] = {{"steps", cfg.train.steps},
                   {"batch_size", cfg.train.batch_size},
                   {"eval_interval", cfg.train.eval_interval},
                   {"val_fraction", cfg.train.val_fraction},
                   {"freeze_encoder", cfg.train.freeze_encoder},
                   {"seed", cfg.train.seed},
                   {"adam", adam_json(cfg.train.adam)},
                   {"codec", codec_json(cfg.train.codec)}};
  root["decode"] = {{"grammar_constrained", cfg.decode.grammar_constrained},
                    {"monotonic_onsets", cfg.decode.monotonic_onsets},
                    {"beam_width", cfg.decode.beam_width},
                    {"max_notes", cfg.decode.max_notes},
                    {"codec", codec_json(cfg.decode.codec)}};
  root["match"] = {{"onset_tol_s", cfg.match.onset_tol_s},
                   {"offset_tol_s", cfg.match.offset_tol_s},
                   {"offset_ratio", cfg.match.offset_ratio},
                   {"pitch_tol_cents", cfg.match.pitch_tol_cents},
                   {"velocity_tol", cfg.match.velocity_tol},
                   {"velocity_mode",
                    cfg.match.rescale_velocities ? "rescaled" : "absolute"}};
  return root.dump(2) + "\n";
}

}  // namespace pianolm
