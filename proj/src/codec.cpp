#include "pianolm/codec.hpp"

#include <algorithm>
#include <cmath>

#include "pianolm/error.hpp"
#include "pianolm/vocab.hpp"

namespace pianolm {

namespace {

namespace vb = vocab;

int query_token_for(SequenceKind kind) {
  switch (kind) {
    case SequenceKind::OnsetPitch: return vb::kQueryPitch;
    case SequenceKind::Velocity: return vb::kQueryVelocity;
    case SequenceKind::Offset: return vb::kQueryOffset;
    case SequenceKind::Flattened: break;
  }
  return -1;
}

int onset_token(const NoteEvent& note, const CodecConfig& cfg) {
  if (note.onset_s < 0.0) return vb::kSustain;
  return vb::time_token(quantize_time(note.onset_s, cfg));
}

int offset_token(const NoteEvent& note, const CodecConfig& cfg) {
  if (note.offset_s > cfg.segment_duration_s) return vb::kSustain;
  return vb::time_token(quantize_time(note.offset_s, cfg));
}

TokenSequence encode_impl(const Segment& seg, SequenceKind kind,
                          const CodecConfig& cfg) {
  TokenSequence seq;
  seq.kind = kind;
  seq.ids.push_back(vb::kSos);
  seq.loss_mask.push_back(0);
  if (kind != SequenceKind::Flattened) {
    seq.ids.push_back(query_token_for(kind));
    seq.loss_mask.push_back(0);
  }

  const auto slots = sequence_fields(kind, cfg);
  for (const NoteEvent& note : seg.notes) {
    if (note.onset_s > cfg.segment_duration_s)
      raise(ErrorCode::OutOfSegment,
            "note onset " + std::to_string(note.onset_s) +
                "s past segment end " + std::to_string(cfg.segment_duration_s) + "s");
    if (note.pitch < 0 || note.pitch > 127 || note.velocity < 0 ||
        note.velocity > 127)
      raise(ErrorCode::OutOfSegment, "note pitch/velocity outside MIDI range");
    for (TokenField slot : slots) {
      int id = 0;
      switch (slot) {
        case TokenField::Onset: id = onset_token(note, cfg); break;
        case TokenField::Pitch: id = vb::pitch_token(note.pitch); break;
        case TokenField::Velocity: id = vb::velocity_token(note.velocity); break;
        case TokenField::Offset: id = offset_token(note, cfg); break;
      }
      seq.ids.push_back(id);
      seq.loss_mask.push_back(field_in_loss(kind, slot) ? 1 : 0);
    }
  }

  seq.ids.push_back(vb::kEos);
  seq.loss_mask.push_back(1);  // <eos> is a predicted token
  return seq;
}

}  // namespace

const char* sequence_kind_name(SequenceKind kind) {
  switch (kind) {
    case SequenceKind::Flattened: return "flattened";
    case SequenceKind::OnsetPitch: return "onset_pitch";
    case SequenceKind::Velocity: return "velocity";
    case SequenceKind::Offset: return "offset";
  }
  return "?";
}

std::optional<SequenceKind> parse_sequence_kind(const std::string& name) {
  if (name == "flattened") return SequenceKind::Flattened;
  if (name == "onset_pitch") return SequenceKind::OnsetPitch;
  if (name == "velocity") return SequenceKind::Velocity;
  if (name == "offset") return SequenceKind::Offset;
  return std::nullopt;
}

CodecConfig CodecConfig::for_duration(double duration_s) {
  CodecConfig cfg;
  cfg.segment_duration_s = duration_s;
  cfg.max_time_index = static_cast<int>(std::lround(duration_s / cfg.time_step_s));
  return cfg;
}

int quantize_time(double t, const CodecConfig& cfg) {
  long idx = std::lround(t / cfg.time_step_s);
  return static_cast<int>(std::clamp(idx, 0L, static_cast<long>(cfg.max_time_index)));
}

std::vector<TokenField> sequence_fields(SequenceKind kind, const CodecConfig& cfg) {
  switch (kind) {
    case SequenceKind::OnsetPitch:
      return {TokenField::Onset, TokenField::Pitch};
    case SequenceKind::Velocity:
      return {TokenField::Onset, TokenField::Pitch, TokenField::Velocity};
    case SequenceKind::Offset:
      if (cfg.offset_stage_includes_velocity)
        return {TokenField::Onset, TokenField::Pitch, TokenField::Velocity, TokenField::Offset};
      return {TokenField::Onset, TokenField::Pitch, TokenField::Offset};
    case SequenceKind::Flattened:
      return {TokenField::Onset, TokenField::Pitch, TokenField::Velocity, TokenField::Offset};
  }
  return {};
}

bool field_in_loss(SequenceKind kind, TokenField field) {
  switch (kind) {
    case SequenceKind::Flattened: return true;
    case SequenceKind::OnsetPitch:
      return field == TokenField::Onset || field == TokenField::Pitch;
    case SequenceKind::Velocity: return field == TokenField::Velocity;
    case SequenceKind::Offset: return field == TokenField::Offset;
  }
  return false;
}

TokenSequence encode_flattened(const Segment& seg, const CodecConfig& cfg) {
  return encode_impl(seg, SequenceKind::Flattened, cfg);
}

TokenSequence encode_stage(const Segment& seg, SequenceKind stage,
                           const CodecConfig& cfg) {
  return encode_impl(seg, stage, cfg);
}

std::vector<DecodedNote> decode(const TokenSequence& seq, const CodecConfig& cfg) {
  namespace vb = vocab;
  const auto& ids = seq.ids;

  // Trailing <pad> is allowed after <eos>.
  size_t end = ids.size();
  while (end > 0 && ids[end - 1] == vb::kPad) --end;

  if (end == 0 || ids[0] != vb::kSos)
    raise(ErrorCode::Malformed, "sequence must start with <sos>");
  size_t pos = 1;
  if (seq.kind != SequenceKind::Flattened) {
    if (pos >= end || ids[pos] != query_token_for(seq.kind))
      raise(ErrorCode::Malformed,
            std::string("expected query token for stage ") +
                sequence_kind_name(seq.kind));
    ++pos;
  }

  const auto slots = sequence_fields(seq.kind, cfg);
  std::vector<DecodedNote> notes;
  while (true) {
    if (pos >= end) raise(ErrorCode::Truncated, "sequence has no <eos>");
    if (ids[pos] == vb::kEos) {
      ++pos;
      break;
    }
    DecodedNote note;
    for (TokenField slot : slots) {
      if (pos >= end) raise(ErrorCode::Truncated, "sequence has no <eos>");
      const int id = ids[pos];
      const auto cls = vb::classify(id);
      switch (slot) {
        case TokenField::Onset:
          if (cls == vb::TokenClass::Time)
            note.onset_s = vb::time_index(id) * cfg.time_step_s;
          else if (cls == vb::TokenClass::Sustain)
            note.onset_s = 0.0;  // onset before the segment start
          else
            raise(ErrorCode::Malformed,
                  "expected time token in onset slot, got " + vb::token_name(id));
          break;
        case TokenField::Pitch:
          if (cls != vb::TokenClass::Pitch)
            raise(ErrorCode::Malformed,
                  "expected pitch token, got " + vb::token_name(id));
          note.pitch = vb::pitch_value(id);
          break;
        case TokenField::Velocity:
          if (cls != vb::TokenClass::Velocity)
            raise(ErrorCode::Malformed,
                  "expected velocity token, got " + vb::token_name(id));
          note.velocity = vb::velocity_value(id);
          break;
        case TokenField::Offset:
          if (cls == vb::TokenClass::Time)
            note.offset_s = vb::time_index(id) * cfg.time_step_s;
          else if (cls == vb::TokenClass::Sustain)
            note.offset_s = cfg.segment_duration_s;  // extends past the segment
          else
            raise(ErrorCode::Malformed,
                  "expected time token in offset slot, got " + vb::token_name(id));
          break;
      }
      ++pos;
    }
    notes.push_back(note);
  }
  if (pos != end)
    raise(ErrorCode::Malformed, "tokens after <eos> that are not <pad>");
  return notes;
}

std::vector<NoteEvent> decoded_to_notes(const std::vector<DecodedNote>& decoded,
                                        const CodecConfig& cfg) {
  std::vector<NoteEvent> notes;
  notes.reserve(decoded.size());
  for (const DecodedNote& d : decoded) {
    NoteEvent n;
    n.onset_s = d.onset_s;
    n.pitch = d.pitch;
    n.velocity = d.velocity.value_or(64);
    n.offset_s = d.offset_s.value_or(d.onset_s + cfg.time_step_s);
    if (n.offset_s <= n.onset_s) n.offset_s = n.onset_s + cfg.time_step_s;
    notes.push_back(n);
  }
  return canonical_sort(std::move(notes));
}

SequenceCost sequence_cost(double t_frames, double n_notes, double dim) {
  SequenceCost cost;
  const double hier_len = t_frames + n_notes;
  const double single_len = t_frames + 3.0 * n_notes;
  cost.hierarchical_cost = 3.0 * hier_len * hier_len * dim;
  cost.single_model_cost = single_len * single_len * dim;
  cost.ratio = cost.single_model_cost / cost.hierarchical_cost;
  return cost;
}

}  // namespace pianolm
