#include "pianolm/vocab.hpp"

namespace pianolm::vocab {

std::string token_name(int id) {
  switch (classify(id)) {
    case TokenClass::Pad: return "<pad>";
    case TokenClass::Sos: return "<sos>";
    case TokenClass::Eos: return "<eos>";
    case TokenClass::Unk: return "<unk>";
    case TokenClass::Sustain: return "<note-sustain>";
    case TokenClass::Query:
      if (id == kQueryPitch) return "q_p";
      if (id == kQueryVelocity) return "q_v";
      return "q_f";
    case TokenClass::Time: return "time(" + std::to_string(time_index(id)) + ")";
    case TokenClass::Pitch: return "pitch(" + std::to_string(pitch_value(id)) + ")";
    case TokenClass::Velocity:
      return "vel(" + std::to_string(velocity_value(id)) + ")";
    case TokenClass::Invalid: break;
  }
  return "<invalid:" + std::to_string(id) + ">";
}

}  // namespace pianolm::vocab
