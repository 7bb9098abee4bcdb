#pragma once

#include <string>

#include "pianolm/encoder.hpp"
#include "pianolm/eval.hpp"
#include "pianolm/pipeline.hpp"

namespace pianolm {

/// Everything a CLI run can configure, grouped into JSON sections
/// ("encoder", "decoder", "pretrain", "train", "decode", "match") whose keys
/// mirror the config structs one to one. Every section and key is optional;
/// unknown keys are errors so typos fail fast instead of silently using a
/// default.
struct RunConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  PretrainConfig pretrain;
  TrainConfig train;
  DecodeConfig decode;
  MatchConfig match;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Full echo of every key, suitable as a starting template; parsing it back
/// reproduces the config exactly.
std::string format_run_config(const RunConfig& cfg);

}  // namespace pianolm
