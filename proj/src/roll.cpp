#include "pianolm/roll.hpp"

#include <algorithm>
#include <cmath>

#include "pianolm/error.hpp"

namespace pianolm {

PianoRoll notes_to_roll(const Segment& seg, double frame_rate_hz) {
  PianoRoll roll;
  roll.frame_rate_hz = frame_rate_hz;
  const int frames = static_cast<int>(std::lround(seg.duration_s * frame_rate_hz));
  roll.frames = Eigen::MatrixXd::Zero(frames, PianoRoll::kKeys);

  for (const NoteEvent& note : seg.notes) {
    const int key = note.pitch - PianoRoll::kLowestPitch;
    if (key < 0 || key >= PianoRoll::kKeys)
      raise(ErrorCode::PitchRange,
            "pitch " + std::to_string(note.pitch) + " outside 21..108");
    // frame t sounds iff onset <= t/rate < offset; start the scan one frame
    // early and let the membership test decide, so rounding cannot skip one
    const int t0 = std::max(
        0, static_cast<int>(std::floor(note.onset_s * frame_rate_hz)) - 1);
    for (int t = t0; t < frames; ++t) {
      const double time = static_cast<double>(t) / frame_rate_hz;
      if (time >= note.offset_s) break;
      if (time >= note.onset_s) roll.frames(t, key) = 1.0;
    }
  }
  return roll;
}

double bce_loss(const PianoRoll& target, const PianoRoll& pred) {
  if (target.frames.rows() != pred.frames.rows() ||
      target.frames.cols() != pred.frames.cols())
    raise(ErrorCode::Shape, "target and prediction rolls differ in shape");
  const auto clipped =
      pred.frames.array().max(kBceEpsilon).min(1.0 - kBceEpsilon);
  const auto y = target.frames.array();
  const double total =
      -(y * clipped.log() + (1.0 - y) * (1.0 - clipped).log()).sum();
  return total / static_cast<double>(target.frames.size());
}

Eigen::MatrixXd bce_loss_grad(const PianoRoll& target, const PianoRoll& pred) {
  if (target.frames.rows() != pred.frames.rows() ||
      target.frames.cols() != pred.frames.cols())
    raise(ErrorCode::Shape, "target and prediction rolls differ in shape");
  const double n = static_cast<double>(target.frames.size());
  Eigen::MatrixXd grad(pred.frames.rows(), pred.frames.cols());
  for (Eigen::Index i = 0; i < pred.frames.rows(); ++i) {
    for (Eigen::Index j = 0; j < pred.frames.cols(); ++j) {
      const double p = pred.frames(i, j);
      if (p < kBceEpsilon || p > 1.0 - kBceEpsilon) {
        grad(i, j) = 0.0;  // clip active
        continue;
      }
      const double y = target.frames(i, j);
      grad(i, j) = (-y / p + (1.0 - y) / (1.0 - p)) / n;
    }
  }
  return grad;
}

std::vector<NoteEvent> roll_to_notes(const PianoRoll& pred,
                                     const RollThresholds& th) {
  std::vector<NoteEvent> notes;
  const int frames = static_cast<int>(pred.frames.rows());
  for (int key = 0; key < static_cast<int>(pred.frames.cols()); ++key) {
    int run_start = -1;
    for (int t = 0; t <= frames; ++t) {
      const bool on = t < frames && pred.frames(t, key) >= th.frame_threshold;
      if (on && run_start < 0) run_start = t;
      if (!on && run_start >= 0) {
        if (t - run_start >= th.min_note_frames) {
          NoteEvent note;
          note.onset_s = run_start / pred.frame_rate_hz;
          note.offset_s = t / pred.frame_rate_hz;
          note.pitch = key + PianoRoll::kLowestPitch;
          note.velocity = 64;
          notes.push_back(note);
        }
        run_start = -1;
      }
    }
  }
  return canonical_sort(std::move(notes));
}

}  // namespace pianolm
