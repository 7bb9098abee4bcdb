#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

namespace pianolm {

/// One played note. Times are in seconds relative to the containing segment
/// (or piece); boundary-crossing notes may carry a negative onset or an
/// offset past the segment end.
struct NoteEvent {
  double onset_s = 0.0;
  int pitch = 0;     // MIDI pitch 0..127
  int velocity = 0;  // MIDI velocity 0..127
  double offset_s = 0.0;

  bool valid() const {
    return offset_s > onset_s && pitch >= 0 && pitch <= 127 && velocity >= 0 &&
           velocity <= 127;
  }

  friend bool operator==(const NoteEvent& a, const NoteEvent& b) = default;
};

/// Canonical ordering: onset time first-to-last, then pitch low-to-high.
/// Stable, so ties on both keys keep their input order.
std::vector<NoteEvent> canonical_sort(std::vector<NoteEvent> notes);

bool is_canonically_sorted(const std::vector<NoteEvent>& notes);

/// A fixed-length training window: notes (canonical order) plus the feature
/// matrix the encoder consumes. Notes that cross the window boundary are
/// kept with out-of-range times; the codec turns those into sustain tokens.
struct Segment {
  std::vector<NoteEvent> notes;
  double duration_s = 10.0;
  Eigen::MatrixXd features;  // T x F
  std::string source_id;
};

}  // namespace pianolm
