#pragma once

#include <vector>

#include <Eigen/Dense>

#include "pianolm/note.hpp"

namespace pianolm {

/// T x 88 frame/pitch grid; {0,1} for targets, [0,1] for predictions.
/// Column k is MIDI pitch k + 21 (the 88 piano keys, A0..C8).
struct PianoRoll {
  Eigen::MatrixXd frames;
  double frame_rate_hz = 100.0;

  static constexpr int kKeys = 88;
  static constexpr int kLowestPitch = 21;
};

struct RollThresholds {
  double frame_threshold = 0.5;
  int min_note_frames = 2;
};

/// Binary targets: frames(t, k) = 1 iff some note at key k sounds through
/// frame t, i.e. onset <= t / rate < offset.
PianoRoll notes_to_roll(const Segment& seg, double frame_rate_hz = 100.0);

inline constexpr double kBceEpsilon = 1e-7;

/// Mean binary cross-entropy over all T*K cells. Predictions are clipped to
/// [eps, 1-eps] before the logs.
double bce_loss(const PianoRoll& target, const PianoRoll& pred);

/// d(bce_loss)/d(pred), zero where the clip is active.
Eigen::MatrixXd bce_loss_grad(const PianoRoll& target, const PianoRoll& pred);

/// Threshold + run-length extraction. Per key, maximal runs of frames at or
/// above the threshold with at least min_note_frames frames become notes.
/// Rolls carry no velocity, so extracted notes get velocity 64.
std::vector<NoteEvent> roll_to_notes(const PianoRoll& pred,
                                     const RollThresholds& th = {});

}  // namespace pianolm
