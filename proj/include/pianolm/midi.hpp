#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pianolm/note.hpp"

namespace pianolm {

struct MidiPiece {
  std::vector<NoteEvent> notes;  // canonical order
  double duration_s = 0.0;       // end of the last track, in seconds
};

/// Parses a Standard MIDI File (format 0 or 1, pulses-per-quarter timing).
/// Note-on with velocity 0 counts as note-off; notes still sounding at the
/// end of their track are closed there. Tick times are converted to seconds
/// through the merged tempo map (default 120 bpm before the first change).
MidiPiece parse_midi(const std::uint8_t* data, std::size_t size);

MidiPiece load_midi(const std::string& path);

}  // namespace pianolm
