#pragma once

#include <string>

#include "pianolm/encoder.hpp"
#include "pianolm/pipeline.hpp"

namespace pianolm {

/// Weight container shared by encoders and stage models: a "PLMC" magic and
/// format version, a JSON metadata blob echoing the configs, then each named
/// tensor as little-endian float64 (row-major). A stage checkpoint embeds
/// its encoder; loading restores every weight bit for bit.

void save_encoder_checkpoint(const std::string& path,
                             const EncoderParams& params);
EncoderParams load_encoder_checkpoint(const std::string& path);

void save_stage_checkpoint(const std::string& path, const StageModel& model);
StageModel load_stage_checkpoint(const std::string& path);

/// "encoder" or "stage", without loading the weights.
std::string checkpoint_kind(const std::string& path);

}  // namespace pianolm
