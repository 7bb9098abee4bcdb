#include <algorithm>
#include <vector>

#include "doctest.h"
#include "pianolm/eval.hpp"
#include "pianolm/rng.hpp"

using namespace pianolm;

namespace {

NoteEvent note(double on, int pitch, int vel, double off) { return {on, pitch, vel, off}; }

/// Exhaustive maximum matching over subsets of estimated notes; the slow
/// but obviously correct reference for the augmenting-path routine.
int oracle_max_matching(const std::vector<std::vector<int>>& adj, int n_est) {
  const int n_ref = static_cast<int>(adj.size());
  std::vector<int> best(1u << n_est, -1);
  // dp over ref index with memo on used-est bitmask
  struct Solver {
    const std::vector<std::vector<int>>& adj;
    std::vector<std::vector<int>> memo;
    Solver(const std::vector<std::vector<int>>& a, int n_ref, int n_est)
        : adj(a), memo(n_ref + 1, std::vector<int>(1u << n_est, -1)) {}
    int run(int i, unsigned used) {
      if (i == static_cast<int>(adj.size())) return 0;
      int& m = memo[i][used];
      if (m >= 0) return m;
      int best = run(i + 1, used);  // leave ref i unmatched
      for (int j : adj[i])
        if (!(used >> j & 1u)) best = std::max(best, 1 + run(i + 1, used | (1u << j)));
      return m = best;
    }
  } solver(adj, n_ref, n_est);
  return solver.run(0, 0);
}

std::vector<std::vector<int>> admissible_onset(const std::vector<NoteEvent>& ref,
                                               const std::vector<NoteEvent>& est,
                                               const MatchConfig& cfg) {
  std::vector<std::vector<int>> adj(ref.size());
  for (size_t i = 0; i < ref.size(); ++i)
    for (size_t j = 0; j < est.size(); ++j)
      if (ref[i].pitch == est[j].pitch &&
          std::abs(ref[i].onset_s - est[j].onset_s) <= cfg.onset_tol_s)
        adj[i].push_back(static_cast<int>(j));
  return adj;
}

}  // namespace

TEST_CASE("onset window is inclusive and pitch must agree") {
  std::vector<NoteEvent> ref{note(1.0, 60, 80, 2.0)};

  MatchResult hit = match_notes(ref, {note(1.05, 60, 80, 2.0)}, MatchLevel::Onset);
  CHECK(hit.pairs.size() == 1);
  CHECK(hit.f1 == 1.0);

  MatchResult miss = match_notes(ref, {note(1.0501, 60, 80, 2.0)}, MatchLevel::Onset);
  CHECK(miss.pairs.empty());
  CHECK(miss.f1 == 0.0);

  MatchResult wrong_pitch = match_notes(ref, {note(1.0, 61, 80, 2.0)}, MatchLevel::Onset);
  CHECK(wrong_pitch.pairs.empty());
}

TEST_CASE("offset window widens with the reference duration") {
  // Duration 1.0 s: window max(0.05, 0.2 * 1.0) = 0.2.
  std::vector<NoteEvent> ref{note(1.0, 60, 80, 2.0)};
  CHECK(match_notes(ref, {note(1.0, 60, 80, 2.2)}, MatchLevel::OnsetOffset).pairs.size() == 1);
  CHECK(match_notes(ref, {note(1.0, 60, 80, 2.21)}, MatchLevel::OnsetOffset).pairs.empty());

  // Duration 0.1 s: the 0.05 floor dominates 0.2 * 0.1 = 0.02.
  std::vector<NoteEvent> short_ref{note(1.0, 60, 80, 1.1)};
  CHECK(match_notes(short_ref, {note(1.0, 60, 80, 1.15)}, MatchLevel::OnsetOffset).pairs.size() ==
        1);
  CHECK(
      match_notes(short_ref, {note(1.0, 60, 80, 1.151)}, MatchLevel::OnsetOffset).pairs.empty());
}

TEST_CASE("velocity window uses normalized values") {
  MatchConfig cfg;
  cfg.rescale_velocities = false;
  std::vector<NoteEvent> ref{note(1.0, 60, 100, 2.0)};
  // |100 - 88| / 127 = 0.0945 <= 0.1, |100 - 87| / 127 = 0.1024 > 0.1.
  CHECK(match_notes(ref, {note(1.0, 60, 88, 2.0)}, MatchLevel::OnsetOffsetVelocity, cfg)
            .pairs.size() == 1);
  CHECK(match_notes(ref, {note(1.0, 60, 87, 2.0)}, MatchLevel::OnsetOffsetVelocity, cfg)
            .pairs.empty());
}

TEST_CASE("velocity rescaling absorbs a global affine distortion") {
  std::vector<NoteEvent> ref, est;
  const int vels[] = {30, 50, 70, 90, 110};
  for (int i = 0; i < 5; ++i) {
    ref.push_back(note(i * 1.0, 60 + i, vels[i], i * 1.0 + 0.5));
    est.push_back(note(i * 1.0, 60 + i, vels[i] / 2, i * 1.0 + 0.5));
  }
  MatchResult scaled = match_notes(ref, est, MatchLevel::OnsetOffsetVelocity);
  CHECK(scaled.pairs.size() == 5);

  MatchConfig raw;
  raw.rescale_velocities = false;
  MatchResult unscaled = match_notes(ref, est, MatchLevel::OnsetOffsetVelocity, raw);
  CHECK(unscaled.pairs.size() < 5);
}

TEST_CASE("affine fit recovers exact parameters and degenerates gracefully") {
  VelocityFit fit = fit_velocity_rescale({{0.2, 0.5}, {0.4, 0.9}});
  CHECK(fit.scale == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fit.offset == doctest::Approx(0.1).epsilon(1e-12));

  VelocityFit flat = fit_velocity_rescale({{0.3, 0.4}, {0.3, 0.8}});
  CHECK(flat.scale == 1.0);
  CHECK(flat.offset == doctest::Approx(0.3).epsilon(1e-12));

  VelocityFit empty = fit_velocity_rescale({});
  CHECK(empty.scale == 1.0);
  CHECK(empty.offset == 0.0);
}

TEST_CASE("matching is maximum cardinality, not greedy") {
  // ref0 reaches both estimates, ref1 reaches only est0; a greedy pass that
  // hands est0 to ref0 would strand ref1.
  std::vector<NoteEvent> ref{note(1.00, 60, 80, 2.0), note(1.08, 60, 80, 2.0)};
  std::vector<NoteEvent> est{note(1.04, 60, 80, 2.0), note(0.96, 60, 80, 2.0)};
  MatchResult res = match_notes(ref, est, MatchLevel::Onset);
  CHECK(res.pairs.size() == 2);
  CHECK(res.f1 == 1.0);
}

TEST_CASE("random instances agree with the exhaustive oracle") {
  Rng rng(99);
  MatchConfig cfg;
  for (int trial = 0; trial < 40; ++trial) {
    const int n_ref = static_cast<int>(rng.uniform_int(0, 8));
    const int n_est = static_cast<int>(rng.uniform_int(0, 8));
    auto draw = [&rng](int n) {
      std::vector<NoteEvent> notes;
      for (int i = 0; i < n; ++i) {
        const double onset = 0.02 * static_cast<double>(rng.uniform_int(0, 12));
        notes.push_back(note(onset, 60 + static_cast<int>(rng.uniform_int(0, 1)), 80,
                             onset + 0.1 + 0.02 * static_cast<double>(rng.uniform_int(0, 5))));
      }
      return notes;
    };
    std::vector<NoteEvent> ref = draw(n_ref);
    std::vector<NoteEvent> est = draw(n_est);
    MatchResult res = match_notes(ref, est, MatchLevel::Onset, cfg);
    const int oracle = oracle_max_matching(admissible_onset(ref, est, cfg), n_est);
    CHECK(static_cast<int>(res.pairs.size()) == oracle);
  }
}

TEST_CASE("edge counts define the scores") {
  MatchResult both_empty = match_notes({}, {}, MatchLevel::Onset);
  CHECK(both_empty.precision == 1.0);
  CHECK(both_empty.recall == 1.0);
  CHECK(both_empty.f1 == 1.0);

  MatchResult nothing_found = match_notes({note(1.0, 60, 80, 2.0)}, {}, MatchLevel::Onset);
  CHECK(nothing_found.f1 == 0.0);

  MatchResult hallucinated = match_notes({}, {note(1.0, 60, 80, 2.0)}, MatchLevel::Onset);
  CHECK(hallucinated.precision == 0.0);
  CHECK(hallucinated.f1 == 0.0);
}

TEST_CASE("micro pools counts while macro averages metrics") {
  std::vector<NoteEvent> refA{note(0.0, 60, 80, 1.0), note(1.0, 62, 80, 2.0)};
  std::vector<NoteEvent> refB{note(0.0, 60, 80, 1.0), note(1.0, 62, 80, 2.0),
                              note(2.0, 64, 80, 3.0)};
  std::vector<PieceEval> pieces{
      evaluate_piece("a", refA, refA),
      evaluate_piece("b", refB, {note(0.0, 60, 80, 1.0)}),
  };

  PieceEval micro = micro_average(pieces);
  CHECK(micro.levels[0].precision == doctest::Approx(1.0));
  CHECK(micro.levels[0].recall == doctest::Approx(0.6));
  CHECK(micro.levels[0].f1 == doctest::Approx(0.75));

  PieceEval macro = macro_average(pieces);
  CHECK(macro.levels[0].precision == doctest::Approx(1.0));
  CHECK(macro.levels[0].recall == doctest::Approx((1.0 + 1.0 / 3.0) / 2.0));
  CHECK(macro.levels[0].f1 == doctest::Approx((1.0 + 0.5) / 2.0));

  std::string report = format_report(pieces);
  CHECK(report.find("piece_id\tlevel\tprecision\trecall\tf1") == 0);
  CHECK(report.find("\nmicro\t") != std::string::npos);
  CHECK(report.find("\nmacro\t") != std::string::npos);
  CHECK(report.find("a\ton_off_vel\t") != std::string::npos);
}
