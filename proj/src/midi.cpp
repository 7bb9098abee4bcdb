#include "pianolm/midi.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>

#include "pianolm/error.hpp"

namespace pianolm {

namespace {

struct Reader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;

  std::uint8_t u8() {
    if (pos >= size) raise(ErrorCode::MidiParse, "unexpected end of file");
    return data[pos++];
  }
  std::uint8_t peek() const {
    if (pos >= size) raise(ErrorCode::MidiParse, "unexpected end of file");
    return data[pos];
  }
  std::uint32_t u16() {
    const std::uint32_t hi = u8();
    return (hi << 8) | u8();
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | u8();
    return v;
  }
  void skip(std::size_t n) {
    if (pos + n > size) raise(ErrorCode::MidiParse, "chunk overruns the file");
    pos += n;
  }
  // Variable-length quantity, at most four bytes.
  std::uint32_t varlen() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      const std::uint8_t b = u8();
      v = (v << 7) | (b & 0x7f);
      if ((b & 0x80) == 0) return v;
    }
    raise(ErrorCode::MidiParse, "variable-length quantity longer than four bytes");
  }
};

struct NoteOnOff {
  std::int64_t tick;
  int track;
  int pitch;
  int velocity;  // 0 is an off event
  std::uint64_t order;
};

// Piecewise-constant tempo map over absolute ticks.
class TempoMap {
 public:
  TempoMap(std::map<std::int64_t, std::uint32_t> changes, int division) {
    std::uint32_t us_per_quarter = 500000;  // 120 bpm
    if (auto it = changes.find(0); it != changes.end()) us_per_quarter = it->second;
    ticks_.push_back(0);
    secs_.push_back(0.0);
    rate_.push_back(static_cast<double>(us_per_quarter) / (division * 1e6));
    for (const auto& [tick, tempo] : changes) {
      if (tick <= 0) continue;
      const double sec = secs_.back() + (tick - ticks_.back()) * rate_.back();
      ticks_.push_back(tick);
      secs_.push_back(sec);
      rate_.push_back(static_cast<double>(tempo) / (division * 1e6));
    }
  }

  double to_seconds(std::int64_t tick) const {
    std::size_t i = ticks_.size() - 1;
    while (ticks_[i] > tick) --i;
    return secs_[i] + (tick - ticks_[i]) * rate_[i];
  }

 private:
  std::vector<std::int64_t> ticks_;
  std::vector<double> secs_;
  std::vector<double> rate_;  // seconds per tick from ticks_[i] on
};

}  // namespace

MidiPiece parse_midi(const std::uint8_t* data, std::size_t size) {
  Reader r{data, size};
  if (r.u32() != 0x4d546864u)  // "MThd"
    raise(ErrorCode::MidiParse, "missing MThd header");
  if (r.u32() != 6) raise(ErrorCode::MidiParse, "unexpected MThd length");
  const std::uint32_t format = r.u16();
  const std::uint32_t n_tracks = r.u16();
  const std::uint32_t division = r.u16();
  if (division & 0x8000)
    raise(ErrorCode::MidiUnsupported, "SMPTE time division is not supported");
  if (division == 0) raise(ErrorCode::MidiParse, "zero ticks per quarter note");
  if (format > 1)
    raise(ErrorCode::MidiUnsupported, "only format 0 and 1 files are supported");

  std::map<std::int64_t, std::uint32_t> tempo_changes;  // tick -> us per quarter
  std::vector<NoteOnOff> events;
  std::vector<std::int64_t> track_end_tick;
  std::uint64_t order = 0;

  for (std::uint32_t t = 0; t < n_tracks; ++t) {
    if (r.u32() != 0x4d54726bu)  // "MTrk"
      raise(ErrorCode::MidiParse, "missing MTrk header");
    const std::uint32_t length = r.u32();
    if (r.pos + length > r.size) raise(ErrorCode::MidiParse, "track overruns the file");
    const std::size_t end = r.pos + length;

    std::int64_t tick = 0;
    std::uint8_t status = 0;
    bool ended = false;
    while (r.pos < end && !ended) {
      tick += r.varlen();
      std::uint8_t b = r.peek();
      if (b & 0x80) {
        status = r.u8();
        b = status;
      } else if (status == 0) {
        raise(ErrorCode::MidiParse, "data byte without a running status");
      }

      if (status == 0xff) {  // meta event
        const std::uint8_t type = r.u8();
        const std::uint32_t len = r.varlen();
        if (r.pos + len > end) raise(ErrorCode::MidiParse, "meta event overruns the track");
        if (type == 0x51) {
          if (len != 3) raise(ErrorCode::MidiParse, "tempo event must carry three bytes");
          std::uint32_t tempo = 0;
          for (int i = 0; i < 3; ++i) tempo = (tempo << 8) | r.u8();
          if (tempo == 0) raise(ErrorCode::MidiParse, "zero tempo");
          tempo_changes[tick] = tempo;
        } else {
          r.skip(len);
          if (type == 0x2f) ended = true;  // end of track
        }
        status = 0;  // meta events cancel running status
        continue;
      }
      if (status == 0xf0 || status == 0xf7) {  // sysex
        const std::uint32_t len = r.varlen();
        if (r.pos + len > end) raise(ErrorCode::MidiParse, "sysex overruns the track");
        r.skip(len);
        status = 0;
        continue;
      }
      if (status < 0x80) raise(ErrorCode::MidiParse, "invalid status byte");

      const int kind = status >> 4;
      const int d1 = r.u8() & 0x7f;
      if (kind == 0xc || kind == 0xd) continue;  // program change / channel pressure
      const int d2 = r.u8() & 0x7f;
      if (kind == 0x9)
        events.push_back({tick, static_cast<int>(t), d1, d2, order++});
      else if (kind == 0x8)
        events.push_back({tick, static_cast<int>(t), d1, 0, order++});
    }
    track_end_tick.push_back(tick);
    r.pos = end;
  }

  const TempoMap tempo(std::move(tempo_changes), static_cast<int>(division));

  // Pair ons and offs per track and pitch, oldest open note first.
  std::stable_sort(events.begin(), events.end(), [](const NoteOnOff& a, const NoteOnOff& b) {
    return a.tick != b.tick ? a.tick < b.tick : a.order < b.order;
  });
  MidiPiece piece;
  std::map<std::pair<int, int>, std::deque<std::pair<std::int64_t, int>>> open;
  for (const NoteOnOff& ev : events) {
    auto& queue = open[{ev.track, ev.pitch}];
    if (ev.velocity > 0) {
      queue.emplace_back(ev.tick, ev.velocity);
      continue;
    }
    if (queue.empty()) continue;  // stray note-off
    const auto [on_tick, velocity] = queue.front();
    queue.pop_front();
    piece.notes.push_back({tempo.to_seconds(on_tick), ev.pitch, velocity,
                           tempo.to_seconds(ev.tick)});
  }
  for (auto& [key, queue] : open) {
    const std::int64_t close = track_end_tick[key.first];
    for (const auto& [on_tick, velocity] : queue)
      piece.notes.push_back(
          {tempo.to_seconds(on_tick), key.second, velocity, tempo.to_seconds(close)});
  }

  piece.notes = canonical_sort(std::move(piece.notes));
  for (const std::int64_t t : track_end_tick)
    piece.duration_s = std::max(piece.duration_s, tempo.to_seconds(t));
  for (const NoteEvent& n : piece.notes)
    piece.duration_s = std::max(piece.duration_s, n.offset_s);
  return piece;
}

MidiPiece load_midi(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return parse_midi(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
}

}  // namespace pianolm
