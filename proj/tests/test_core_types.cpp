#include <array>
#include <vector>

#include "doctest.h"
#include "pianolm/note.hpp"
#include "pianolm/rng.hpp"
#include "pianolm/vocab.hpp"

using namespace pianolm;

namespace {
NoteEvent note(double onset, int pitch, int velocity = 64, double offset = -1) {
  return NoteEvent{onset, pitch, velocity, offset < 0 ? onset + 0.5 : offset};
}
}  // namespace

TEST_CASE("canonical_sort empty") { CHECK(canonical_sort({}).empty()); }

TEST_CASE("canonical_sort: onset dominates") {
  auto sorted = canonical_sort({note(1.0, 60), note(0.5, 70)});
  CHECK(sorted[0].onset_s == 0.5);
  CHECK(sorted[0].pitch == 70);
  CHECK(sorted[1].onset_s == 1.0);
}

TEST_CASE("canonical_sort: equal onsets break ties by pitch, low to high") {
  auto sorted = canonical_sort({note(0.5, 70), note(0.5, 60)});
  CHECK(sorted[0].pitch == 60);
  CHECK(sorted[1].pitch == 70);
}

TEST_CASE("canonical_sort is stable and idempotent") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<NoteEvent> notes;
    const int n = static_cast<int>(rng.uniform_int(0, 40));
    for (int i = 0; i < n; ++i) {
      NoteEvent e = note(0.01 * rng.uniform_int(0, 100),
                         static_cast<int>(rng.uniform_int(21, 108)),
                         static_cast<int>(rng.uniform_int(1, 127)));
      e.velocity = i;  // marker to observe stability
      notes.push_back(e);
    }
    auto once = canonical_sort(notes);
    auto twice = canonical_sort(once);
    CHECK(is_canonically_sorted(once));
    CHECK(once == twice);
    // ties on (onset, pitch) keep input order: markers must ascend
    for (size_t i = 1; i < once.size(); ++i) {
      if (once[i - 1].onset_s == once[i].onset_s &&
          once[i - 1].pitch == once[i].pitch)
        CHECK(once[i - 1].velocity < once[i].velocity);
    }
  }
}

TEST_CASE("vocab ranges partition [0,1264] exactly") {
  namespace vb = vocab;
  CHECK(vb::kSize == 1265);
  CHECK(vb::kSize == 4 + 3 + 1 + 1001 + 128 + 128);

  std::array<int, vb::kSize> hits{};
  auto count = [&](int id) {
    REQUIRE(id >= 0);
    REQUIRE(id < vb::kSize);
    hits[id] += 1;
  };
  for (int id : {vb::kPad, vb::kSos, vb::kEos, vb::kUnk}) count(id);
  count(vb::kSustain);
  for (int id : {vb::kQueryPitch, vb::kQueryVelocity, vb::kQueryOffset}) count(id);
  for (int i = 0; i < vb::kNumTimeTokens; ++i) count(vb::time_token(i));
  for (int p = 0; p < vb::kNumPitchTokens; ++p) count(vb::pitch_token(p));
  for (int v = 0; v < vb::kNumVelocityTokens; ++v) count(vb::velocity_token(v));

  for (int id = 0; id < vb::kSize; ++id) {
    CHECK(hits[id] == 1);  // disjoint and covering
    CHECK(vb::classify(id) != vb::TokenClass::Invalid);
  }
  CHECK(vb::classify(vb::kSize) == vb::TokenClass::Invalid);
  CHECK(vb::classify(-1) == vb::TokenClass::Invalid);
}

TEST_CASE("vocab layout is bit-exact per the interchange table") {
  namespace vb = vocab;
  CHECK(vb::kPad == 0);
  CHECK(vb::kSos == 1);
  CHECK(vb::kEos == 2);
  CHECK(vb::kUnk == 3);
  CHECK(vb::kSustain == 4);
  CHECK(vb::kQueryPitch == 5);
  CHECK(vb::kQueryVelocity == 6);
  CHECK(vb::kQueryOffset == 7);
  CHECK(vb::time_token(0) == 8);
  CHECK(vb::time_token(1000) == 1008);
  CHECK(vb::pitch_token(0) == 1009);
  CHECK(vb::pitch_token(127) == 1136);
  CHECK(vb::velocity_token(0) == 1137);
  CHECK(vb::velocity_token(127) == 1264);
}
