#include "pianolm/note.hpp"

#include <algorithm>

namespace pianolm {

std::vector<NoteEvent> canonical_sort(std::vector<NoteEvent> notes) {
  std::stable_sort(notes.begin(), notes.end(),
                   [](const NoteEvent& a, const NoteEvent& b) {
                     if (a.onset_s != b.onset_s) return a.onset_s < b.onset_s;
                     return a.pitch < b.pitch;
                   });
  return notes;
}

bool is_canonically_sorted(const std::vector<NoteEvent>& notes) {
  for (size_t i = 1; i < notes.size(); ++i) {
    const NoteEvent& a = notes[i - 1];
    const NoteEvent& b = notes[i];
    if (a.onset_s > b.onset_s) return false;
    if (a.onset_s == b.onset_s && a.pitch > b.pitch) return false;
  }
  return true;
}

}  // namespace pianolm
