#include <vector>

#include "doctest.h"
#include "pianolm/codec.hpp"
#include "pianolm/error.hpp"
#include "pianolm/rng.hpp"
#include "pianolm/vocab.hpp"

using namespace pianolm;
namespace vb = vocab;

namespace {

Segment make_segment(std::vector<NoteEvent> notes, double duration = 10.0) {
  Segment seg;
  seg.notes = canonical_sort(std::move(notes));
  seg.duration_s = duration;
  return seg;
}

// Random segment with all note fields on the 10ms grid and inside the window.
Segment random_grid_segment(Rng& rng, int max_notes = 12) {
  std::vector<NoteEvent> notes;
  const int n = static_cast<int>(rng.uniform_int(0, max_notes));
  for (int i = 0; i < n; ++i) {
    NoteEvent note;
    note.onset_s = 0.01 * rng.uniform_int(0, 995);
    note.offset_s = note.onset_s + 0.01 * rng.uniform_int(1, 200);
    if (note.offset_s > 10.0) note.offset_s = 10.0;
    note.pitch = static_cast<int>(rng.uniform_int(0, 127));
    note.velocity = static_cast<int>(rng.uniform_int(0, 127));
    notes.push_back(note);
  }
  return make_segment(std::move(notes));
}

size_t count_mask(const TokenSequence& seq) {
  size_t n = 0;
  for (auto m : seq.loss_mask) n += m;
  return n;
}

}  // namespace

TEST_CASE("quantize_time") {
  CHECK(quantize_time(0.0) == 0);
  CHECK(quantize_time(10.0) == 1000);
  CHECK(quantize_time(0.1049) == 10);   // 10.49 rounds down
  CHECK(quantize_time(0.105) == 11);    // 10.5 rounds half away from zero
  CHECK(quantize_time(-0.2) == 0);      // clamped
  CHECK(quantize_time(12.3) == 1000);   // clamped
}

TEST_CASE("encode_flattened empty segment") {
  auto seq = encode_flattened(make_segment({}));
  CHECK(seq.ids == std::vector<int>{vb::kSos, vb::kEos});
  CHECK(seq.loss_mask == std::vector<std::uint8_t>{0, 1});
}

TEST_CASE("encode_flattened one note matches the id layout table") {
  auto seq = encode_flattened(make_segment({{0.10, 60, 64, 0.50}}));
  CHECK(seq.ids == std::vector<int>{1, 18, 1069, 1201, 58, 2});
  // loss mask true on every position after <sos>
  CHECK(seq.loss_mask == std::vector<std::uint8_t>{0, 1, 1, 1, 1, 1});
}

TEST_CASE("encode_stage layouts and loss masks") {
  const Segment seg = make_segment({{0.10, 60, 64, 0.50}});

  SUBCASE("onset_pitch") {
    auto seq = encode_stage(seg, SequenceKind::OnsetPitch);
    CHECK(seq.ids == std::vector<int>{1, 5, 18, 1069, 2});
    CHECK(seq.loss_mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1});
  }
  SUBCASE("velocity") {
    auto seq = encode_stage(seg, SequenceKind::Velocity);
    CHECK(seq.ids == std::vector<int>{1, 6, 18, 1069, 1201, 2});
    CHECK(seq.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 0, 1, 1});
  }
  SUBCASE("offset conditions on velocity") {
    auto seq = encode_stage(seg, SequenceKind::Offset);
    CHECK(seq.ids == std::vector<int>{1, 7, 18, 1069, 1201, 58, 2});
    CHECK(seq.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 1, 1});
  }
  SUBCASE("offset stage with velocity slot disabled") {
    CodecConfig cfg;
    cfg.offset_stage_includes_velocity = false;
    auto seq = encode_stage(seg, SequenceKind::Offset, cfg);
    CHECK(seq.ids == std::vector<int>{1, 7, 18, 1069, 58, 2});
  }
  SUBCASE("empty onset_pitch") {
    auto seq = encode_stage(make_segment({}), SequenceKind::OnsetPitch);
    CHECK(seq.ids == std::vector<int>{1, 5, 2});
  }
}

TEST_CASE("boundary-crossing notes use the sustain token") {
  SUBCASE("offset past the segment end") {
    auto seq = encode_stage(make_segment({{9.0, 60, 64, 12.3}}), SequenceKind::Offset);
    CHECK(seq.ids == std::vector<int>{1, 7, 908, 1069, 1201, vb::kSustain, 2});
    auto decoded = decode(seq);
    REQUIRE(decoded.size() == 1);
    CHECK(*decoded[0].offset_s == 10.0);  // sustain maps to the boundary
  }
  SUBCASE("onset before the segment start") {
    auto seq = encode_stage(make_segment({{-0.2, 60, 64, 0.4}}), SequenceKind::OnsetPitch);
    CHECK(seq.ids == std::vector<int>{1, 5, vb::kSustain, 1069, 2});
    auto decoded = decode(seq);
    REQUIRE(decoded.size() == 1);
    CHECK(decoded[0].onset_s == 0.0);
  }
  SUBCASE("note spanning the whole segment sustains both slots") {
    auto seq = encode_flattened(make_segment({{-1.0, 60, 64, 11.0}}));
    CHECK(seq.ids == std::vector<int>{1, vb::kSustain, 1069, 1201, vb::kSustain, 2});
  }
  SUBCASE("onset past the segment end is rejected") {
    CHECK_THROWS_WITH_AS(encode_flattened(make_segment({{10.5, 60, 64, 11.0}})),
                         doctest::Contains("E_OUT_OF_SEGMENT"), Error);
  }
}

TEST_CASE("decode error paths") {
  SUBCASE("empty stage sequence decodes to nothing") {
    TokenSequence seq{{1, 5, 2}, SequenceKind::OnsetPitch, {0, 0, 1}};
    CHECK(decode(seq).empty());
  }
  SUBCASE("pitch before time violates slot order") {
    TokenSequence seq{{1, 5, vb::pitch_token(60), 2}, SequenceKind::OnsetPitch, {}};
    CHECK_THROWS_WITH_AS(decode(seq), doctest::Contains("E_MALFORMED"), Error);
  }
  SUBCASE("missing eos") {
    TokenSequence seq{{1, 5, vb::time_token(10), vb::pitch_token(60)},
                      SequenceKind::OnsetPitch,
                      {}};
    CHECK_THROWS_WITH_AS(decode(seq), doctest::Contains("E_TRUNCATED"), Error);
  }
  SUBCASE("wrong query token") {
    TokenSequence seq{{1, 6, 2}, SequenceKind::OnsetPitch, {}};
    CHECK_THROWS_AS(decode(seq), Error);
  }
  SUBCASE("trailing pad after eos is fine") {
    TokenSequence seq{{1, 5, 2, 0, 0}, SequenceKind::OnsetPitch, {}};
    CHECK(decode(seq).empty());
  }
}

TEST_CASE("round-trip recovers stage fields on grid-aligned segments") {
  Rng rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    Segment seg = random_grid_segment(rng);
    const size_t n = seg.notes.size();

    for (SequenceKind kind : {SequenceKind::Flattened, SequenceKind::OnsetPitch,
                              SequenceKind::Velocity, SequenceKind::Offset}) {
      const TokenSequence seq =
          kind == SequenceKind::Flattened ? encode_flattened(seg)
                                          : encode_stage(seg, kind);
      auto decoded = decode(seq);
      REQUIRE(decoded.size() == n);
      for (size_t i = 0; i < n; ++i) {
        CHECK(decoded[i].onset_s == doctest::Approx(seg.notes[i].onset_s).epsilon(1e-12));
        CHECK(decoded[i].pitch == seg.notes[i].pitch);
        if (kind != SequenceKind::OnsetPitch)
          CHECK(*decoded[i].velocity == seg.notes[i].velocity);
        if (kind == SequenceKind::Flattened || kind == SequenceKind::Offset)
          CHECK(*decoded[i].offset_s == doctest::Approx(seg.notes[i].offset_s).epsilon(1e-12));
      }

      // length and mask-count laws
      const size_t len = seq.ids.size();
      switch (kind) {
        case SequenceKind::Flattened:
          CHECK(len == 4 * n + 2);
          CHECK(count_mask(seq) == 4 * n + 1);
          break;
        case SequenceKind::OnsetPitch:
          CHECK(len == 2 * n + 3);
          CHECK(count_mask(seq) == 2 * n + 1);
          break;
        case SequenceKind::Velocity:
          CHECK(len == 3 * n + 3);
          CHECK(count_mask(seq) == n + 1);
          break;
        case SequenceKind::Offset:
          CHECK(len == 4 * n + 3);
          CHECK(count_mask(seq) == n + 1);
          break;
      }
      for (int id : seq.ids) {
        CHECK(id >= 0);
        CHECK(id < vb::kSize);
      }
    }
  }
}

TEST_CASE("sequence_cost") {
  SUBCASE("T=0 limit gives exactly threefold") {
    auto c = sequence_cost(0, 1, 1);
    CHECK(c.hierarchical_cost == 3.0);
    CHECK(c.single_model_cost == 9.0);
    CHECK(c.ratio == 3.0);
  }
  SUBCASE("direct arithmetic at T=100, N=50, D=512") {
    auto c = sequence_cost(100, 50, 512);
    CHECK(c.hierarchical_cost == 3.0 * 150 * 150 * 512);
    CHECK(c.single_model_cost == 250.0 * 250 * 512);
    CHECK(c.ratio == doctest::Approx(62500.0 / 67500.0).epsilon(1e-12));
  }
  SUBCASE("ratio tends to 3 as N/T grows") {
    auto c = sequence_cost(1.0, 1e6, 64);
    CHECK(c.ratio == doctest::Approx(3.0).epsilon(1e-5));
  }
}
