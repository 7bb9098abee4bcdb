#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pianolm/note.hpp"

namespace pianolm {

/// Knobs for the synthetic corpus. Notes live on the 10 ms time grid used by
/// the token codec, so tokenizing generated data is lossless.
struct SyntheticConfig {
  int n_segments = 10;
  int notes_min = 3;
  int notes_max = 8;
  int polyphony_cap = 8;
  double duration_s = 10.0;
  double noise_sigma = 0.1;
  double frame_rate_hz = 100.0;
};

/// Deterministic toy dataset: segment i draws its note count uniformly from
/// [notes_min, notes_max], then rejection-samples notes (pitch 21..108,
/// velocity 1..127, duration 0.05..2.0 s) against the polyphony cap and
/// same-pitch overlap. Each segment is seeded independently from the dataset
/// seed, so a shorter run is a prefix of a longer one.
std::vector<Segment> gen_synthetic(std::uint64_t seed,
                                   const SyntheticConfig& cfg = {});

/// The stand-in spectrogram: the ground-truth roll blurred one frame in time
/// (kernel 0.25/0.5/0.25, zero padding at the edges) plus iid Gaussian noise.
Eigen::MatrixXd synth_features(const Segment& seg, std::uint64_t seed,
                               double noise_sigma = 0.1,
                               double frame_rate_hz = 100.0);

/// One JSON object per line, keys onset (s), offset (s), pitch, velocity;
/// UTF-8, canonical note order. Loading is strict: every line must carry
/// exactly those four keys with the right types.
void save_notes_jsonl(const std::string& path,
                      const std::vector<NoteEvent>& notes);
std::vector<NoteEvent> load_notes_jsonl(const std::string& path);

/// Dataset index: "path<TAB>split" rows plus a "# feature_seed: N" comment so
/// synthetic features regenerate bit-identically on load.
struct ManifestEntry {
  std::string path;   // note JSONL, relative to the manifest's directory
  std::string split;  // e.g. "train" / "val" / "test"
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t feature_seed = 0;
};

void save_manifest(const std::string& path, const Manifest& manifest);
Manifest load_manifest(const std::string& path);

/// Cut a piece into fixed windows starting at multiples of hop_s. A note
/// lands in every window it intersects, with times re-expressed relative to
/// the window start (a crossing note gets a negative onset or an offset past
/// segment_s; the codec turns those into sustain tokens). The last window
/// keeps the full segment_s duration. Always yields at least one window.
/// Features and source ids are left for the caller.
std::vector<Segment> segment_piece(const std::vector<NoteEvent>& notes,
                                   double piece_duration_s,
                                   double segment_s = 10.0,
                                   double hop_s = 10.0);

/// Load every piece in a manifest (optionally one split), window it, and
/// attach synthetic features seeded from the manifest's feature seed and the
/// window's source id (the file stem, with ":k" appended when a piece spans
/// several windows). Reloading a generated dataset reproduces gen_synthetic
/// bit for bit.
std::vector<Segment> load_dataset(const std::string& manifest_path,
                                  const std::string& split = "",
                                  double segment_s = 10.0,
                                  double noise_sigma = 0.1,
                                  double frame_rate_hz = 100.0);

}  // namespace pianolm
