#include "pianolm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pianolm/error.hpp"
#include "pianolm/rng.hpp"
#include "pianolm/roll.hpp"

namespace pianolm {

namespace {

constexpr double kGridStep = 0.01;
constexpr int kMinLenIdx = 5;    // 0.05 s
constexpr int kMaxLenIdx = 200;  // 2.0 s

struct GridNote {
  int on, off, pitch;
};

}  // namespace

std::vector<Segment> gen_synthetic(std::uint64_t seed,
                                   const SyntheticConfig& cfg) {
  if (cfg.n_segments < 0)
    raise(ErrorCode::Config, "n_segments must be nonnegative");
  if (cfg.notes_min < 0 || cfg.notes_max < cfg.notes_min)
    raise(ErrorCode::Config, "need 0 <= notes_min <= notes_max");
  if (cfg.polyphony_cap < 1)
    raise(ErrorCode::Config, "polyphony_cap must be at least 1");
  const int grid = static_cast<int>(std::lround(cfg.duration_s / kGridStep));
  if (grid < kMinLenIdx)
    raise(ErrorCode::Config, "duration_s must cover at least one 0.05 s note");

  std::vector<Segment> segments;
  segments.reserve(cfg.n_segments);
  for (int i = 0; i < cfg.n_segments; ++i) {
    Rng rng(Rng::seed_mix(seed, static_cast<std::uint64_t>(i)));
    const int target =
        static_cast<int>(rng.uniform_int(cfg.notes_min, cfg.notes_max));

    Segment seg;
    seg.duration_s = cfg.duration_s;
    char name[16];
    std::snprintf(name, sizeof(name), "seg_%04d", i);
    seg.source_id = name;

    std::vector<int> load(grid, 0);
    std::vector<GridNote> placed;
    int attempts = 0;
    const int max_attempts = 200 * std::max(1, target);
    while (static_cast<int>(placed.size()) < target &&
           attempts < max_attempts) {
      ++attempts;
      const int on = static_cast<int>(rng.uniform_int(0, grid - kMinLenIdx));
      const int len = static_cast<int>(
          rng.uniform_int(kMinLenIdx, std::min(kMaxLenIdx, grid - on)));
      const int off = on + len;
      const int pitch = static_cast<int>(rng.uniform_int(21, 108));
      const int velocity = static_cast<int>(rng.uniform_int(1, 127));

      bool ok = true;
      for (int t = on; t < off && ok; ++t)
        ok = load[t] < cfg.polyphony_cap;
      for (std::size_t j = 0; j < placed.size() && ok; ++j)
        ok = placed[j].pitch != pitch || placed[j].off <= on ||
             off <= placed[j].on;
      if (!ok) continue;

      for (int t = on; t < off; ++t) ++load[t];
      placed.push_back({on, off, pitch});
      seg.notes.push_back(
          {on * kGridStep, pitch, velocity, off * kGridStep});
    }
    seg.notes = canonical_sort(std::move(seg.notes));
    seg.features =
        synth_features(seg, Rng::seed_mix(seed, fnv1a_hash(seg.source_id)),
                       cfg.noise_sigma, cfg.frame_rate_hz);
    segments.push_back(std::move(seg));
  }
  return segments;
}

Eigen::MatrixXd synth_features(const Segment& seg, std::uint64_t seed,
                               double noise_sigma, double frame_rate_hz) {
  const PianoRoll roll = notes_to_roll(seg, frame_rate_hz);
  const Eigen::Index frames = roll.frames.rows();
  Eigen::MatrixXd out = 0.5 * roll.frames;
  if (frames > 1) {
    out.topRows(frames - 1) += 0.25 * roll.frames.bottomRows(frames - 1);
    out.bottomRows(frames - 1) += 0.25 * roll.frames.topRows(frames - 1);
  }
  Rng rng(seed);
  for (Eigen::Index t = 0; t < frames; ++t)
    for (Eigen::Index k = 0; k < out.cols(); ++k)
      out(t, k) += noise_sigma * rng.normal();
  return out;
}

void save_notes_jsonl(const std::string& path,
                      const std::vector<NoteEvent>& notes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::Io, "cannot open " + path + " for writing");
  for (const NoteEvent& n : canonical_sort(notes)) {
    nlohmann::ordered_json row;
    row["onset"] = n.onset_s;
    row["offset"] = n.offset_s;
    row["pitch"] = n.pitch;
    row["velocity"] = n.velocity;
    out << row.dump() << '\n';
  }
  if (!out) raise(ErrorCode::Io, "write failed: " + path);
}

std::vector<NoteEvent> load_notes_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open " + path);
  std::vector<NoteEvent> notes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fail = [&](const std::string& why) {
      raise(ErrorCode::Malformed,
            path + ":" + std::to_string(line_no) + ": " + why);
    };
    nlohmann::json row;
    try {
      row = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(e.what());
    }
    if (!row.is_object() || row.size() != 4 || !row.contains("onset") ||
        !row.contains("offset") || !row.contains("pitch") ||
        !row.contains("velocity"))
      fail("expected exactly the keys onset, offset, pitch, velocity");
    if (!row["onset"].is_number() || !row["offset"].is_number())
      fail("onset and offset must be numbers");
    if (!row["pitch"].is_number_integer() ||
        !row["velocity"].is_number_integer())
      fail("pitch and velocity must be integers");
    NoteEvent n;
    n.onset_s = row["onset"].get<double>();
    n.offset_s = row["offset"].get<double>();
    n.pitch = row["pitch"].get<int>();
    n.velocity = row["velocity"].get<int>();
    if (n.pitch < 0 || n.pitch > 127 || n.velocity < 0 || n.velocity > 127)
      fail("pitch and velocity must be in 0..127");
    if (n.offset_s < n.onset_s) fail("offset before onset");
    notes.push_back(n);
  }
  return notes;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::Io, "cannot open " + path + " for writing");
  out << "# feature_seed: " << manifest.feature_seed << '\n';
  for (const ManifestEntry& e : manifest.entries)
    out << e.path << '\t' << e.split << '\n';
  if (!out) raise(ErrorCode::Io, "write failed: " + path);
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open " + path);
  Manifest manifest;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string tag = "# feature_seed:";
      if (line.rfind(tag, 0) == 0)
        manifest.feature_seed =
            std::strtoull(line.c_str() + tag.size(), nullptr, 10);
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos ||
        line.find('\t', tab + 1) != std::string::npos)
      raise(ErrorCode::Malformed, path + ":" + std::to_string(line_no) +
                                      ": expected path<TAB>split");
    ManifestEntry entry{line.substr(0, tab), line.substr(tab + 1)};
    if (entry.path.empty() || entry.split.empty())
      raise(ErrorCode::Malformed, path + ":" + std::to_string(line_no) +
                                      ": empty path or split");
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

std::vector<Segment> segment_piece(const std::vector<NoteEvent>& notes,
                                   double piece_duration_s, double segment_s,
                                   double hop_s) {
  if (segment_s <= 0.0) raise(ErrorCode::Config, "segment_s must be positive");
  if (hop_s <= 0.0) raise(ErrorCode::Config, "hop_s must be positive");
  std::vector<Segment> windows;
  for (int k = 0;; ++k) {
    const double start = k * hop_s;
    if (k > 0 && start >= piece_duration_s) break;
    Segment seg;
    seg.duration_s = segment_s;
    for (const NoteEvent& n : notes) {
      if (n.onset_s < start + segment_s && n.offset_s > start)
        seg.notes.push_back(
            {n.onset_s - start, n.pitch, n.velocity, n.offset_s - start});
    }
    seg.notes = canonical_sort(std::move(seg.notes));
    windows.push_back(std::move(seg));
  }
  return windows;
}

std::vector<Segment> load_dataset(const std::string& manifest_path,
                                  const std::string& split, double segment_s,
                                  double noise_sigma, double frame_rate_hz) {
  const Manifest manifest = load_manifest(manifest_path);
  const std::filesystem::path dir =
      std::filesystem::path(manifest_path).parent_path();
  std::vector<Segment> segments;
  for (const ManifestEntry& entry : manifest.entries) {
    if (!split.empty() && entry.split != split) continue;
    const std::vector<NoteEvent> notes =
        load_notes_jsonl((dir / entry.path).string());
    double duration = 0.0;
    for (const NoteEvent& n : notes)
      duration = std::max(duration, n.offset_s);
    std::vector<Segment> windows =
        segment_piece(notes, duration, segment_s, segment_s);
    const std::string stem =
        std::filesystem::path(entry.path).stem().string();
    for (std::size_t k = 0; k < windows.size(); ++k) {
      Segment& seg = windows[k];
      seg.source_id =
          windows.size() == 1 ? stem : stem + ":" + std::to_string(k);
      seg.features = synth_features(
          seg, Rng::seed_mix(manifest.feature_seed, fnv1a_hash(seg.source_id)),
          noise_sigma, frame_rate_hz);
      segments.push_back(std::move(seg));
    }
  }
  return segments;
}

}  // namespace pianolm
