#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pianolm/codec.hpp"
#include "pianolm/decoder.hpp"
#include "pianolm/encoder.hpp"
#include "pianolm/roll.hpp"

namespace pianolm {

/// One member of the hierarchy: an encoder plus the decoder-only LM trained
/// on that stage's token sequences. Stages share no parameters. The
/// flattened baseline is a StageModel whose kind is Flattened.
struct StageModel {
  SequenceKind stage = SequenceKind::OnsetPitch;
  EncoderParams encoder;
  DecoderParams decoder;
};

/// Copies a pretrained encoder (its roll readout is not used here) and
/// attaches a freshly initialized decoder whose audio-prefix width is set
/// to the encoder output width.
StageModel make_stage_model(SequenceKind stage, const EncoderParams& encoder,
                            DecoderConfig decoder_config, Rng& rng);

struct DecodeConfig {
  bool grammar_constrained = true;  // mask illegal token classes per slot
  bool monotonic_onsets = true;     // onsets must not decrease (canonical order)
  int beam_width = 1;               // 1 = greedy; hypotheses ranked by sum log p
  int max_notes = 1000;
  CodecConfig codec;
};

struct TranscribeResult {
  std::vector<NoteEvent> notes;                 // canonical order
  TokenSequence onset_pitch, velocity, offset;  // the three stage sequences
  SequenceCost cost;  // three-stage vs single-model attention cost at this size
};

/// Runs the full hierarchy: stage 1 emits the (onset, pitch) skeleton
/// autoregressively, stages 2 and 3 run teacher-forced on that fixed
/// skeleton and fill in velocities and offsets.
TranscribeResult transcribe(const StageModel& onset_pitch, const StageModel& velocity,
                            const StageModel& offset, const Eigen::MatrixXd& features,
                            const DecodeConfig& cfg = {});

struct FlattenedResult {
  std::vector<NoteEvent> notes;
  TokenSequence sequence;
  SequenceCost cost;
};

/// Single-model baseline over the interleaved (o,p,v,d) sequence.
FlattenedResult transcribe_flattened(const StageModel& model, const Eigen::MatrixXd& features,
                                     const DecodeConfig& cfg = {});

/// Frame-roll baseline: the encoder's sigmoid readout thresholded back
/// into notes. Velocities are not modeled (64 throughout).
std::vector<NoteEvent> transcribe_roll(const EncoderParams& encoder,
                                       const Eigen::MatrixXd& features,
                                       const RollThresholds& thresholds = {});

struct TrainConfig {
  int steps = 200;
  int batch_size = 4;
  int eval_interval = 20;      // validation loss logged every this many steps
  double val_fraction = 0.2;   // deterministic seeded split; 0 disables validation
  bool freeze_encoder = false; // default is joint fine-tuning
  AdamConfig adam;
  CodecConfig codec;
  std::uint64_t seed = 0;
};

struct LossLogEntry {
  long step = 0;
  SequenceKind stage = SequenceKind::OnsetPitch;
  std::string split;  // "train" or "val"
  double loss = 0.0;
};

/// Tab-separated: step, stage, split, loss; one header line.
std::string format_loss_log(const std::vector<LossLogEntry>& log);

struct TrainResult {
  std::vector<LossLogEntry> log;
  double final_train = 0.0;
  double final_val = 0.0;  // NaN when no validation split
};

/// Trains one stage (or the flattened baseline) on its token sequences.
/// Gradients flow into the encoder unless freeze_encoder is set.
TrainResult train_stage(StageModel& model, const std::vector<Segment>& segments,
                        const TrainConfig& cfg);

/// Pooled masked NLL (sum, token count) of one stage over a set of
/// segments, teacher forced, dropout off. The hierarchy's total NLL is the
/// sum of the three stage sums.
std::pair<double, long> stage_nll_sum(const StageModel& model,
                                      const std::vector<Segment>& segments,
                                      const CodecConfig& codec = {});

}  // namespace pianolm
