#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pianolm/note.hpp"

namespace pianolm {

enum class MatchLevel { Onset, OnsetOffset, OnsetOffsetVelocity };

std::string match_level_name(MatchLevel level);  // "on", "on_off", "on_off_vel"

struct MatchConfig {
  double onset_tol_s = 0.05;  // inclusive window around the reference onset
  double offset_tol_s = 0.05;
  double offset_ratio = 0.2;  // offset window: max(tol, ratio * ref duration)
  double pitch_tol_cents = 50.0;  // below a semitone this reduces to equality on MIDI pitches
  double velocity_tol = 0.1;      // on velocities normalized to [0,1]
  bool rescale_velocities = true;
};

struct VelocityFit {
  double scale = 1.0;
  double offset = 0.0;
};

/// Least-squares affine fit mapping estimated velocities onto reference
/// velocities, both already normalized to [0,1]. With no pairs or a
/// degenerate spread the scale stays 1 and the offset is the mean residual.
VelocityFit fit_velocity_rescale(const std::vector<std::pair<double, double>>& est_ref_pairs);

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (ref index, est index)
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Maximum-cardinality matching between reference and estimated notes.
/// A pair is admissible when pitches agree, onsets fall within the onset
/// window, and the stricter levels also satisfy the offset and velocity
/// windows. Velocity rescaling is fitted per call on onset-level matches.
/// Two empty lists count as a perfect score.
MatchResult match_notes(const std::vector<NoteEvent>& ref, const std::vector<NoteEvent>& est,
                        MatchLevel level, const MatchConfig& cfg = {});

struct LevelScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  long matched = 0;
  long ref_count = 0;
  long est_count = 0;
};

LevelScores score_notes(const std::vector<NoteEvent>& ref, const std::vector<NoteEvent>& est,
                        MatchLevel level, const MatchConfig& cfg = {});

struct PieceEval {
  std::string piece_id;
  LevelScores levels[3];  // indexed by MatchLevel
};

PieceEval evaluate_piece(const std::string& piece_id, const std::vector<NoteEvent>& ref,
                         const std::vector<NoteEvent>& est, const MatchConfig& cfg = {});

/// Pooled counts across pieces (micro) and unweighted metric means (macro).
PieceEval micro_average(const std::vector<PieceEval>& pieces);
PieceEval macro_average(const std::vector<PieceEval>& pieces);

/// Tab-separated report: piece_id, level, precision, recall, f1; one row
/// per piece and level, then micro and macro rows.
std::string format_report(const std::vector<PieceEval>& pieces, bool include_averages = true);

}  // namespace pianolm
