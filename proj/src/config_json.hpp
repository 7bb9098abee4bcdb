#pragma once

// Internal JSON <-> config-struct converters shared by the config-file
// parser and the checkpoint metadata. Strict: unknown keys raise `code`.

#include <json.hpp>

#include "pianolm/decoder.hpp"
#include "pianolm/encoder.hpp"
#include "pianolm/error.hpp"

namespace pianolm::detail {

nlohmann::ordered_json encoder_config_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const nlohmann::json& obj,
                                       ErrorCode code,
                                       const std::string& where);

nlohmann::ordered_json decoder_config_json(const DecoderConfig& cfg);
DecoderConfig decoder_config_from_json(const nlohmann::json& obj,
                                       ErrorCode code,
                                       const std::string& where);

}  // namespace pianolm::detail
