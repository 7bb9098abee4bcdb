#include "pianolm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "pianolm/error.hpp"

namespace pianolm {
namespace {

constexpr double kVelocityScale = 1.0 / 127.0;

// The windows are inclusive over decimal inputs. A hair of slack keeps a
// boundary hit (say onsets 1.0 vs 1.05) from falling out through binary
// representation error; it is orders of magnitude below any real tolerance.
constexpr double kBoundarySlack = 1e-9;

double offset_window(const NoteEvent& ref, const MatchConfig& cfg) {
  return std::max(cfg.offset_tol_s, cfg.offset_ratio * (ref.offset_s - ref.onset_s));
}

bool onset_admissible(const NoteEvent& r, const NoteEvent& e, const MatchConfig& cfg) {
  // Pitches are integer MIDI numbers (100 cents apart), so any tolerance
  // below a semitone is exact equality.
  if (std::abs(r.pitch - e.pitch) * 100.0 > cfg.pitch_tol_cents + kBoundarySlack) return false;
  return std::abs(r.onset_s - e.onset_s) <= cfg.onset_tol_s + kBoundarySlack;
}

bool offset_admissible(const NoteEvent& r, const NoteEvent& e, const MatchConfig& cfg) {
  return std::abs(r.offset_s - e.offset_s) <= offset_window(r, cfg) + kBoundarySlack;
}

/// One augmenting-path pass of the classic bipartite matching routine.
bool augment(int ref_idx, const std::vector<std::vector<int>>& adj, std::vector<char>& visited,
             std::vector<int>& est_owner) {
  for (int est_idx : adj[ref_idx]) {
    if (visited[est_idx]) continue;
    visited[est_idx] = 1;
    if (est_owner[est_idx] < 0 || augment(est_owner[est_idx], adj, visited, est_owner)) {
      est_owner[est_idx] = ref_idx;
      return true;
    }
  }
  return false;
}

std::vector<std::pair<int, int>> max_matching(const std::vector<std::vector<int>>& adj,
                                              int n_est) {
  std::vector<int> est_owner(n_est, -1);
  for (int i = 0; i < static_cast<int>(adj.size()); ++i) {
    std::vector<char> visited(n_est, 0);
    augment(i, adj, visited, est_owner);
  }
  std::vector<std::pair<int, int>> pairs;
  for (int j = 0; j < n_est; ++j)
    if (est_owner[j] >= 0) pairs.emplace_back(est_owner[j], j);
  std::sort(pairs.begin(), pairs.end());
  return pairs;
}

void fill_metrics(MatchResult& res, std::size_t n_ref, std::size_t n_est) {
  if (n_ref == 0 && n_est == 0) {
    res.precision = res.recall = res.f1 = 1.0;
    return;
  }
  const double matched = static_cast<double>(res.pairs.size());
  res.precision = n_est > 0 ? matched / static_cast<double>(n_est) : 0.0;
  res.recall = n_ref > 0 ? matched / static_cast<double>(n_ref) : 0.0;
  res.f1 = res.precision + res.recall > 0.0
               ? 2.0 * res.precision * res.recall / (res.precision + res.recall)
               : 0.0;
}

}  // namespace

std::string match_level_name(MatchLevel level) {
  switch (level) {
    case MatchLevel::Onset:
      return "on";
    case MatchLevel::OnsetOffset:
      return "on_off";
    case MatchLevel::OnsetOffsetVelocity:
      return "on_off_vel";
  }
  raise(ErrorCode::Config, "unknown match level");
}

VelocityFit fit_velocity_rescale(const std::vector<std::pair<double, double>>& est_ref_pairs) {
  VelocityFit fit;
  const std::size_t n = est_ref_pairs.size();
  if (n == 0) return fit;
  double mean_e = 0.0, mean_r = 0.0;
  for (const auto& [e, r] : est_ref_pairs) {
    mean_e += e;
    mean_r += r;
  }
  mean_e /= static_cast<double>(n);
  mean_r /= static_cast<double>(n);
  double var_e = 0.0, cov = 0.0;
  for (const auto& [e, r] : est_ref_pairs) {
    var_e += (e - mean_e) * (e - mean_e);
    cov += (e - mean_e) * (r - mean_r);
  }
  if (var_e > 0.0) {
    fit.scale = cov / var_e;
    fit.offset = mean_r - fit.scale * mean_e;
  } else {
    fit.scale = 1.0;
    fit.offset = mean_r - mean_e;
  }
  return fit;
}

MatchResult match_notes(const std::vector<NoteEvent>& ref, const std::vector<NoteEvent>& est,
                        MatchLevel level, const MatchConfig& cfg) {
  const int n_ref = static_cast<int>(ref.size());
  const int n_est = static_cast<int>(est.size());

  VelocityFit fit;  // identity unless fitted below
  if (level == MatchLevel::OnsetOffsetVelocity && cfg.rescale_velocities) {
    std::vector<std::vector<int>> adj(n_ref);
    for (int i = 0; i < n_ref; ++i)
      for (int j = 0; j < n_est; ++j)
        if (onset_admissible(ref[i], est[j], cfg)) adj[i].push_back(j);
    std::vector<std::pair<double, double>> pairs;
    for (const auto& [i, j] : max_matching(adj, n_est))
      pairs.emplace_back(est[j].velocity * kVelocityScale, ref[i].velocity * kVelocityScale);
    fit = fit_velocity_rescale(pairs);
  }

  std::vector<std::vector<int>> adj(n_ref);
  for (int i = 0; i < n_ref; ++i) {
    for (int j = 0; j < n_est; ++j) {
      if (!onset_admissible(ref[i], est[j], cfg)) continue;
      if (level != MatchLevel::Onset && !offset_admissible(ref[i], est[j], cfg)) continue;
      if (level == MatchLevel::OnsetOffsetVelocity) {
        const double est_v = fit.scale * (est[j].velocity * kVelocityScale) + fit.offset;
        if (std::abs(ref[i].velocity * kVelocityScale - est_v) >
            cfg.velocity_tol + kBoundarySlack)
          continue;
      }
      adj[i].push_back(j);
    }
  }

  MatchResult res;
  res.pairs = max_matching(adj, n_est);
  fill_metrics(res, ref.size(), est.size());
  return res;
}

LevelScores score_notes(const std::vector<NoteEvent>& ref, const std::vector<NoteEvent>& est,
                        MatchLevel level, const MatchConfig& cfg) {
  MatchResult res = match_notes(ref, est, level, cfg);
  LevelScores s;
  s.precision = res.precision;
  s.recall = res.recall;
  s.f1 = res.f1;
  s.matched = static_cast<long>(res.pairs.size());
  s.ref_count = static_cast<long>(ref.size());
  s.est_count = static_cast<long>(est.size());
  return s;
}

PieceEval evaluate_piece(const std::string& piece_id, const std::vector<NoteEvent>& ref,
                         const std::vector<NoteEvent>& est, const MatchConfig& cfg) {
  PieceEval out;
  out.piece_id = piece_id;
  out.levels[0] = score_notes(ref, est, MatchLevel::Onset, cfg);
  out.levels[1] = score_notes(ref, est, MatchLevel::OnsetOffset, cfg);
  out.levels[2] = score_notes(ref, est, MatchLevel::OnsetOffsetVelocity, cfg);
  return out;
}

PieceEval micro_average(const std::vector<PieceEval>& pieces) {
  PieceEval out;
  out.piece_id = "micro";
  for (int l = 0; l < 3; ++l) {
    LevelScores& s = out.levels[l];
    for (const PieceEval& p : pieces) {
      s.matched += p.levels[l].matched;
      s.ref_count += p.levels[l].ref_count;
      s.est_count += p.levels[l].est_count;
    }
    if (s.ref_count == 0 && s.est_count == 0) {
      s.precision = s.recall = s.f1 = 1.0;
      continue;
    }
    const double matched = static_cast<double>(s.matched);
    s.precision = s.est_count > 0 ? matched / static_cast<double>(s.est_count) : 0.0;
    s.recall = s.ref_count > 0 ? matched / static_cast<double>(s.ref_count) : 0.0;
    s.f1 = s.precision + s.recall > 0.0
               ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
               : 0.0;
  }
  return out;
}

PieceEval macro_average(const std::vector<PieceEval>& pieces) {
  PieceEval out;
  out.piece_id = "macro";
  if (pieces.empty()) return out;
  const double inv = 1.0 / static_cast<double>(pieces.size());
  for (int l = 0; l < 3; ++l) {
    LevelScores& s = out.levels[l];
    for (const PieceEval& p : pieces) {
      s.precision += p.levels[l].precision * inv;
      s.recall += p.levels[l].recall * inv;
      s.f1 += p.levels[l].f1 * inv;
      s.matched += p.levels[l].matched;
      s.ref_count += p.levels[l].ref_count;
      s.est_count += p.levels[l].est_count;
    }
  }
  return out;
}

std::string format_report(const std::vector<PieceEval>& pieces, bool include_averages) {
  std::string out = "piece_id\tlevel\tprecision\trecall\tf1\n";
  auto append = [&out](const PieceEval& p) {
    for (int l = 0; l < 3; ++l) {
      char line[256];
      std::snprintf(line, sizeof(line), "%s\t%s\t%.6f\t%.6f\t%.6f\n", p.piece_id.c_str(),
                    match_level_name(static_cast<MatchLevel>(l)).c_str(), p.levels[l].precision,
                    p.levels[l].recall, p.levels[l].f1);
      out += line;
    }
  };
  for (const PieceEval& p : pieces) append(p);
  if (include_averages) {
    append(micro_average(pieces));
    append(macro_average(pieces));
  }
  return out;
}

}  // namespace pianolm
