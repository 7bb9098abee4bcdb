#pragma once

#include <string>

namespace pianolm::vocab {

// Normative token-id layout. Total 1265 ids:
//   0 <pad>, 1 <sos>, 2 <eos>, 3 <unk>, 4 <note-sustain>,
//   5 q_p, 6 q_v, 7 q_f,
//   8..1008    time(0..1000)
//   1009..1136 pitch(0..127)
//   1137..1264 velocity(0..127)
inline constexpr int kPad = 0;
inline constexpr int kSos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kSustain = 4;
inline constexpr int kQueryPitch = 5;     // q_p, onset-pitch stage
inline constexpr int kQueryVelocity = 6;  // q_v
inline constexpr int kQueryOffset = 7;    // q_f

inline constexpr int kTimeBase = 8;
inline constexpr int kNumTimeTokens = 1001;
inline constexpr int kPitchBase = kTimeBase + kNumTimeTokens;  // 1009
inline constexpr int kNumPitchTokens = 128;
inline constexpr int kVelocityBase = kPitchBase + kNumPitchTokens;  // 1137
inline constexpr int kNumVelocityTokens = 128;
inline constexpr int kSize = kVelocityBase + kNumVelocityTokens;  // 1265

enum class TokenClass {
  Pad,
  Sos,
  Eos,
  Unk,
  Sustain,
  Query,
  Time,
  Pitch,
  Velocity,
  Invalid,
};

constexpr TokenClass classify(int id) {
  if (id == kPad) return TokenClass::Pad;
  if (id == kSos) return TokenClass::Sos;
  if (id == kEos) return TokenClass::Eos;
  if (id == kUnk) return TokenClass::Unk;
  if (id == kSustain) return TokenClass::Sustain;
  if (id >= kQueryPitch && id <= kQueryOffset) return TokenClass::Query;
  if (id >= kTimeBase && id < kTimeBase + kNumTimeTokens) return TokenClass::Time;
  if (id >= kPitchBase && id < kPitchBase + kNumPitchTokens) return TokenClass::Pitch;
  if (id >= kVelocityBase && id < kVelocityBase + kNumVelocityTokens)
    return TokenClass::Velocity;
  return TokenClass::Invalid;
}

constexpr int time_token(int index) { return kTimeBase + index; }
constexpr int pitch_token(int pitch) { return kPitchBase + pitch; }
constexpr int velocity_token(int velocity) { return kVelocityBase + velocity; }

constexpr int time_index(int id) { return id - kTimeBase; }
constexpr int pitch_value(int id) { return id - kPitchBase; }
constexpr int velocity_value(int id) { return id - kVelocityBase; }

std::string token_name(int id);

}  // namespace pianolm::vocab
