#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pianolm/note.hpp"

namespace pianolm {

enum class SequenceKind { Flattened, OnsetPitch, Velocity, Offset };

const char* sequence_kind_name(SequenceKind kind);
std::optional<SequenceKind> parse_sequence_kind(const std::string& name);

/// A tokenized segment. loss_mask[i] is true only at positions the stage is
/// trained to predict (the onset-pitch stage masks in every o/p token and
/// <eos>; velocity and offset stages mask in just their own slot and <eos>).
struct TokenSequence {
  std::vector<int> ids;
  SequenceKind kind = SequenceKind::Flattened;
  std::vector<std::uint8_t> loss_mask;

  size_t size() const { return ids.size(); }
};

struct CodecConfig {
  double time_step_s = 0.01;
  double segment_duration_s = 10.0;
  int max_time_index = 1000;  // segment_duration_s / time_step_s
  // The offset stage interleaves (o, p, v, d) so offsets condition on
  // velocity; set false to drop the v slot and use (o, p, d).
  bool offset_stage_includes_velocity = true;

  static CodecConfig for_duration(double duration_s);
};

/// Nearest time-token index for t seconds, round-half-away-from-zero,
/// clamped to [0, max_time_index].
int quantize_time(double t, const CodecConfig& cfg = {});

/// One token slot within a note group.
enum class TokenField { Onset, Pitch, Velocity, Offset };

/// Slot layout of one note group, in emission order. OnsetPitch carries
/// (o,p), Velocity (o,p,v), Offset (o,p,v,d) or (o,p,d), Flattened (o,p,v,d).
std::vector<TokenField> sequence_fields(SequenceKind kind, const CodecConfig& cfg = {});

/// Whether a stage is trained to predict the given slot.
bool field_in_loss(SequenceKind kind, TokenField field);

TokenSequence encode_flattened(const Segment& seg, const CodecConfig& cfg = {});

TokenSequence encode_stage(const Segment& seg, SequenceKind stage,
                           const CodecConfig& cfg = {});

/// A note recovered from tokens. Stages that do not carry velocity or offset
/// leave those fields empty.
struct DecodedNote {
  double onset_s = 0.0;
  int pitch = 0;
  std::optional<int> velocity;
  std::optional<double> offset_s;
};

std::vector<DecodedNote> decode(const TokenSequence& seq,
                                const CodecConfig& cfg = {});

/// Fills the fields a partial stage leaves empty: velocity 64, offset one
/// time step after the onset.
std::vector<NoteEvent> decoded_to_notes(const std::vector<DecodedNote>& decoded,
                                        const CodecConfig& cfg = {});

/// Attention cost of the three-stage hierarchy vs one flattened model,
/// for T feature frames, N notes and hidden width D:
///   hierarchical = 3(T+N)^2 D,  single = (T+3N)^2 D,  ratio = single/hier.
/// The ratio tends to 3 as N/T grows.
struct SequenceCost {
  double hierarchical_cost = 0.0;
  double single_model_cost = 0.0;
  double ratio = 0.0;
};

SequenceCost sequence_cost(double t_frames, double n_notes, double dim);

}  // namespace pianolm
