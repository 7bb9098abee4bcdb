#include "pianolm/error.hpp"

namespace pianolm {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::OutOfSegment: return "E_OUT_OF_SEGMENT";
    case ErrorCode::Malformed: return "E_MALFORMED";
    case ErrorCode::Truncated: return "E_TRUNCATED";
    case ErrorCode::Shape: return "E_SHAPE";
    case ErrorCode::Length: return "E_LENGTH";
    case ErrorCode::PitchRange: return "E_PITCH_RANGE";
    case ErrorCode::EmptyMask: return "E_EMPTY_MASK";
    case ErrorCode::Diverged: return "E_DIVERGED";
    case ErrorCode::StageMismatch: return "E_STAGE_MISMATCH";
    case ErrorCode::DecodeOverflow: return "E_DECODE_OVERFLOW";
    case ErrorCode::MidiParse: return "E_MIDI_PARSE";
    case ErrorCode::MidiUnsupported: return "E_MIDI_UNSUPPORTED";
    case ErrorCode::Config: return "E_CONFIG";
    case ErrorCode::Io: return "E_IO";
  }
  return "E_UNKNOWN";
}

}  // namespace pianolm
