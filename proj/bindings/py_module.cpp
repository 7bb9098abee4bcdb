#include <pybind11/eigen.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "pianolm/checkpoint.hpp"
#include "pianolm/codec.hpp"
#include "pianolm/config.hpp"
#include "pianolm/dataset.hpp"
#include "pianolm/decoder.hpp"
#include "pianolm/encoder.hpp"
#include "pianolm/error.hpp"
#include "pianolm/eval.hpp"
#include "pianolm/midi.hpp"
#include "pianolm/note.hpp"
#include "pianolm/pipeline.hpp"
#include "pianolm/rng.hpp"
#include "pianolm/roll.hpp"
#include "pianolm/vocab.hpp"

namespace py = pybind11;
using namespace pianolm;

namespace {

std::string note_repr(const NoteEvent& n) {
  std::ostringstream os;
  os << "NoteEvent(onset_s=" << n.onset_s << ", pitch=" << n.pitch
     << ", velocity=" << n.velocity << ", offset_s=" << n.offset_s << ")";
  return os.str();
}

}  // namespace

PYBIND11_MODULE(_pianolm, m) {
  m.doc() = "Hierarchical language-model piano transcription core";

  py::register_exception<Error>(m, "Error");

  // ---- notes and segments ----
  py::class_<NoteEvent>(m, "NoteEvent")
      .def(py::init<>())
      .def(py::init([](double onset_s, int pitch, int velocity, double offset_s) {
             return NoteEvent{onset_s, pitch, velocity, offset_s};
           }),
           py::arg("onset_s"), py::arg("pitch"), py::arg("velocity"), py::arg("offset_s"))
      .def_readwrite("onset_s", &NoteEvent::onset_s)
      .def_readwrite("pitch", &NoteEvent::pitch)
      .def_readwrite("velocity", &NoteEvent::velocity)
      .def_readwrite("offset_s", &NoteEvent::offset_s)
      .def("valid", &NoteEvent::valid)
      .def(py::self == py::self)
      .def("__repr__", &note_repr);

  m.def("canonical_sort", &canonical_sort, py::arg("notes"));
  m.def("is_canonically_sorted", &is_canonically_sorted, py::arg("notes"));

  py::class_<Segment>(m, "Segment")
      .def(py::init<>())
      .def_readwrite("notes", &Segment::notes)
      .def_readwrite("duration_s", &Segment::duration_s)
      .def_readwrite("features", &Segment::features)
      .def_readwrite("source_id", &Segment::source_id);

  // ---- vocabulary ----
  m.attr("VOCAB_SIZE") = vocab::kSize;
  m.def("token_name", &vocab::token_name, py::arg("id"));
  m.def("time_token", &vocab::time_token, py::arg("index"));
  m.def("pitch_token", &vocab::pitch_token, py::arg("pitch"));
  m.def("velocity_token", &vocab::velocity_token, py::arg("velocity"));

  // ---- token codec ----
  py::enum_<SequenceKind>(m, "SequenceKind")
      .value("FLATTENED", SequenceKind::Flattened)
      .value("ONSET_PITCH", SequenceKind::OnsetPitch)
      .value("VELOCITY", SequenceKind::Velocity)
      .value("OFFSET", SequenceKind::Offset);

  py::class_<CodecConfig>(m, "CodecConfig")
      .def(py::init<>())
      .def_readwrite("time_step_s", &CodecConfig::time_step_s)
      .def_readwrite("segment_duration_s", &CodecConfig::segment_duration_s)
      .def_readwrite("max_time_index", &CodecConfig::max_time_index)
      .def_readwrite("offset_stage_includes_velocity",
                     &CodecConfig::offset_stage_includes_velocity)
      .def_static("for_duration", &CodecConfig::for_duration, py::arg("duration_s"));

  py::class_<TokenSequence>(m, "TokenSequence")
      .def(py::init<>())
      .def_readwrite("ids", &TokenSequence::ids)
      .def_readwrite("kind", &TokenSequence::kind)
      .def_readwrite("loss_mask", &TokenSequence::loss_mask)
      .def("__len__", &TokenSequence::size);

  py::class_<DecodedNote>(m, "DecodedNote")
      .def_readonly("onset_s", &DecodedNote::onset_s)
      .def_readonly("pitch", &DecodedNote::pitch)
      .def_readonly("velocity", &DecodedNote::velocity)
      .def_readonly("offset_s", &DecodedNote::offset_s);

  m.def("quantize_time", &quantize_time, py::arg("t"), py::arg("cfg") = CodecConfig{});
  m.def("encode_flattened", &encode_flattened, py::arg("segment"),
        py::arg("cfg") = CodecConfig{});
  m.def("encode_stage", &encode_stage, py::arg("segment"), py::arg("stage"),
        py::arg("cfg") = CodecConfig{});
  m.def("decode", &decode, py::arg("tokens"), py::arg("cfg") = CodecConfig{});
  m.def("decoded_to_notes", &decoded_to_notes, py::arg("decoded"),
        py::arg("cfg") = CodecConfig{});

  py::class_<SequenceCost>(m, "SequenceCost")
      .def_readonly("hierarchical_cost", &SequenceCost::hierarchical_cost)
      .def_readonly("single_model_cost", &SequenceCost::single_model_cost)
      .def_readonly("ratio", &SequenceCost::ratio);
  m.def("sequence_cost", &sequence_cost, py::arg("t_frames"), py::arg("n_notes"),
        py::arg("dim"));

  // ---- frame rolls ----
  py::class_<PianoRoll>(m, "PianoRoll")
      .def(py::init<>())
      .def_readwrite("frames", &PianoRoll::frames)
      .def_readwrite("frame_rate_hz", &PianoRoll::frame_rate_hz);

  py::class_<RollThresholds>(m, "RollThresholds")
      .def(py::init<>())
      .def_readwrite("frame_threshold", &RollThresholds::frame_threshold)
      .def_readwrite("min_note_frames", &RollThresholds::min_note_frames);

  m.def("notes_to_roll", &notes_to_roll, py::arg("segment"),
        py::arg("frame_rate_hz") = 100.0);
  m.def("roll_to_notes", &roll_to_notes, py::arg("roll"),
        py::arg("thresholds") = RollThresholds{});
  m.def("bce_loss", &bce_loss, py::arg("target"), py::arg("pred"));

  // ---- dataset and files ----
  py::class_<SyntheticConfig>(m, "SyntheticConfig")
      .def(py::init<>())
      .def_readwrite("n_segments", &SyntheticConfig::n_segments)
      .def_readwrite("notes_min", &SyntheticConfig::notes_min)
      .def_readwrite("notes_max", &SyntheticConfig::notes_max)
      .def_readwrite("polyphony_cap", &SyntheticConfig::polyphony_cap)
      .def_readwrite("duration_s", &SyntheticConfig::duration_s)
      .def_readwrite("noise_sigma", &SyntheticConfig::noise_sigma)
      .def_readwrite("frame_rate_hz", &SyntheticConfig::frame_rate_hz);

  m.def("gen_synthetic", &gen_synthetic, py::arg("seed"),
        py::arg("cfg") = SyntheticConfig{});
  m.def("synth_features", &synth_features, py::arg("segment"), py::arg("seed"),
        py::arg("noise_sigma") = 0.1, py::arg("frame_rate_hz") = 100.0);
  m.def("save_notes_jsonl", &save_notes_jsonl, py::arg("path"), py::arg("notes"));
  m.def("load_notes_jsonl", &load_notes_jsonl, py::arg("path"));
  m.def("segment_piece", &segment_piece, py::arg("notes"), py::arg("piece_duration_s"),
        py::arg("segment_s") = 10.0, py::arg("hop_s") = 10.0);
  m.def("load_dataset", &load_dataset, py::arg("manifest_path"), py::arg("split") = "",
        py::arg("segment_s") = 10.0, py::arg("noise_sigma") = 0.1,
        py::arg("frame_rate_hz") = 100.0);

  py::class_<MidiPiece>(m, "MidiPiece")
      .def_readonly("notes", &MidiPiece::notes)
      .def_readonly("duration_s", &MidiPiece::duration_s);
  m.def("load_midi", &load_midi, py::arg("path"));
  m.def("parse_midi", [](py::bytes data) {
    const std::string buf = data;
    return parse_midi(reinterpret_cast<const std::uint8_t*>(buf.data()), buf.size());
  }, py::arg("data"));

  // ---- encoder ----
  py::enum_<EncoderConfig::Mode>(m, "EncoderMode")
      .value("ORACLE_ROLL", EncoderConfig::Mode::OracleRoll)
      .value("CONV_RECURRENT", EncoderConfig::Mode::ConvRecurrent);

  py::class_<EncoderConfig>(m, "EncoderConfig")
      .def(py::init<>())
      .def_readwrite("mode", &EncoderConfig::mode)
      .def_readwrite("input_dim", &EncoderConfig::input_dim)
      .def_readwrite("hidden_dim", &EncoderConfig::hidden_dim)
      .def_readwrite("conv_channels", &EncoderConfig::conv_channels)
      .def_readwrite("conv_kernel", &EncoderConfig::conv_kernel)
      .def_readwrite("recurrent_dim", &EncoderConfig::recurrent_dim)
      .def_readwrite("roll_dim", &EncoderConfig::roll_dim)
      .def_readwrite("frame_rate_hz", &EncoderConfig::frame_rate_hz);

  py::class_<EncoderParams>(m, "EncoderParams")
      .def_readonly("config", &EncoderParams::config);

  py::class_<AdamConfig>(m, "AdamConfig")
      .def(py::init<>())
      .def_readwrite("lr", &AdamConfig::lr)
      .def_readwrite("beta1", &AdamConfig::beta1)
      .def_readwrite("beta2", &AdamConfig::beta2)
      .def_readwrite("eps", &AdamConfig::eps)
      .def_readwrite("weight_decay", &AdamConfig::weight_decay)
      .def_readwrite("grad_clip", &AdamConfig::grad_clip);

  py::class_<PretrainConfig>(m, "PretrainConfig")
      .def(py::init<>())
      .def_readwrite("steps", &PretrainConfig::steps)
      .def_readwrite("batch_size", &PretrainConfig::batch_size)
      .def_readwrite("adam", &PretrainConfig::adam)
      .def_readwrite("seed", &PretrainConfig::seed);

  m.def("init_encoder", [](const EncoderConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return EncoderParams::init(cfg, rng);
  }, py::arg("cfg"), py::arg("seed") = 0);
  m.def("encoder_pretrain", &encoder_pretrain, py::arg("params"), py::arg("segments"),
        py::arg("cfg") = PretrainConfig{});
  m.def("encoder_frame_probs", [](const EncoderParams& params, const Eigen::MatrixXd& features) {
    return encoder_frame_probs(params, encoder_encode(params, features));
  }, py::arg("params"), py::arg("features"));

  // ---- decoder and stage models ----
  py::class_<DecoderConfig>(m, "DecoderConfig")
      .def(py::init<>())
      .def_readwrite("n_layers", &DecoderConfig::n_layers)
      .def_readwrite("n_heads", &DecoderConfig::n_heads)
      .def_readwrite("embed_dim", &DecoderConfig::embed_dim)
      .def_readwrite("encoder_dim", &DecoderConfig::encoder_dim)
      .def_readwrite("vocab_size", &DecoderConfig::vocab_size)
      .def_readwrite("max_seq_len", &DecoderConfig::max_seq_len)
      .def_readwrite("dropout", &DecoderConfig::dropout)
      .def_static("preset", &DecoderConfig::preset, py::arg("name"));

  py::class_<StageModel>(m, "StageModel")
      .def_readonly("stage", &StageModel::stage)
      .def_readonly("encoder", &StageModel::encoder);

  m.def("make_stage_model", [](SequenceKind stage, const EncoderParams& encoder,
                               DecoderConfig cfg, std::uint64_t seed) {
    Rng rng(seed);
    return make_stage_model(stage, encoder, cfg, rng);
  }, py::arg("stage"), py::arg("encoder"), py::arg("decoder_config") = DecoderConfig{},
     py::arg("seed") = 0);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("eval_interval", &TrainConfig::eval_interval)
      .def_readwrite("val_fraction", &TrainConfig::val_fraction)
      .def_readwrite("freeze_encoder", &TrainConfig::freeze_encoder)
      .def_readwrite("adam", &TrainConfig::adam)
      .def_readwrite("codec", &TrainConfig::codec)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<LossLogEntry>(m, "LossLogEntry")
      .def_readonly("step", &LossLogEntry::step)
      .def_readonly("stage", &LossLogEntry::stage)
      .def_readonly("split", &LossLogEntry::split)
      .def_readonly("loss", &LossLogEntry::loss);

  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("log", &TrainResult::log)
      .def_readonly("final_train", &TrainResult::final_train)
      .def_readonly("final_val", &TrainResult::final_val);

  m.def("train_stage", &train_stage, py::arg("model"), py::arg("segments"),
        py::arg("cfg") = TrainConfig{});
  m.def("format_loss_log", &format_loss_log, py::arg("log"));
  m.def("stage_nll_sum", &stage_nll_sum, py::arg("model"), py::arg("segments"),
        py::arg("codec") = CodecConfig{});

  // ---- transcription ----
  py::class_<DecodeConfig>(m, "DecodeConfig")
      .def(py::init<>())
      .def_readwrite("grammar_constrained", &DecodeConfig::grammar_constrained)
      .def_readwrite("monotonic_onsets", &DecodeConfig::monotonic_onsets)
      .def_readwrite("beam_width", &DecodeConfig::beam_width)
      .def_readwrite("max_notes", &DecodeConfig::max_notes)
      .def_readwrite("codec", &DecodeConfig::codec);

  py::class_<TranscribeResult>(m, "TranscribeResult")
      .def_readonly("notes", &TranscribeResult::notes)
      .def_readonly("onset_pitch", &TranscribeResult::onset_pitch)
      .def_readonly("velocity", &TranscribeResult::velocity)
      .def_readonly("offset", &TranscribeResult::offset)
      .def_readonly("cost", &TranscribeResult::cost);

  py::class_<FlattenedResult>(m, "FlattenedResult")
      .def_readonly("notes", &FlattenedResult::notes)
      .def_readonly("sequence", &FlattenedResult::sequence)
      .def_readonly("cost", &FlattenedResult::cost);

  m.def("transcribe", &transcribe, py::arg("onset_pitch"), py::arg("velocity"),
        py::arg("offset"), py::arg("features"), py::arg("cfg") = DecodeConfig{});
  m.def("transcribe_flattened", &transcribe_flattened, py::arg("model"),
        py::arg("features"), py::arg("cfg") = DecodeConfig{});
  m.def("transcribe_roll", &transcribe_roll, py::arg("encoder"), py::arg("features"),
        py::arg("thresholds") = RollThresholds{});

  // ---- checkpoints ----
  m.def("save_encoder_checkpoint", &save_encoder_checkpoint, py::arg("path"),
        py::arg("params"));
  m.def("load_encoder_checkpoint", &load_encoder_checkpoint, py::arg("path"));
  m.def("save_stage_checkpoint", &save_stage_checkpoint, py::arg("path"), py::arg("model"));
  m.def("load_stage_checkpoint", &load_stage_checkpoint, py::arg("path"));
  m.def("checkpoint_kind", &checkpoint_kind, py::arg("path"));

  // ---- evaluation ----
  py::enum_<MatchLevel>(m, "MatchLevel")
      .value("ONSET", MatchLevel::Onset)
      .value("ONSET_OFFSET", MatchLevel::OnsetOffset)
      .value("ONSET_OFFSET_VELOCITY", MatchLevel::OnsetOffsetVelocity);

  py::class_<MatchConfig>(m, "MatchConfig")
      .def(py::init<>())
      .def_readwrite("onset_tol_s", &MatchConfig::onset_tol_s)
      .def_readwrite("offset_tol_s", &MatchConfig::offset_tol_s)
      .def_readwrite("offset_ratio", &MatchConfig::offset_ratio)
      .def_readwrite("pitch_tol_cents", &MatchConfig::pitch_tol_cents)
      .def_readwrite("velocity_tol", &MatchConfig::velocity_tol)
      .def_readwrite("rescale_velocities", &MatchConfig::rescale_velocities);

  py::class_<MatchResult>(m, "MatchResult")
      .def_readonly("pairs", &MatchResult::pairs)
      .def_readonly("precision", &MatchResult::precision)
      .def_readonly("recall", &MatchResult::recall)
      .def_readonly("f1", &MatchResult::f1);

  py::class_<LevelScores>(m, "LevelScores")
      .def_readonly("precision", &LevelScores::precision)
      .def_readonly("recall", &LevelScores::recall)
      .def_readonly("f1", &LevelScores::f1)
      .def_readonly("matched", &LevelScores::matched)
      .def_readonly("ref_count", &LevelScores::ref_count)
      .def_readonly("est_count", &LevelScores::est_count);

  py::class_<PieceEval>(m, "PieceEval")
      .def_readonly("piece_id", &PieceEval::piece_id)
      .def_property_readonly("levels", [](const PieceEval& p) {
        return py::make_tuple(p.levels[0], p.levels[1], p.levels[2]);
      });

  m.def("match_notes", &match_notes, py::arg("ref"), py::arg("est"), py::arg("level"),
        py::arg("cfg") = MatchConfig{});
  m.def("score_notes", &score_notes, py::arg("ref"), py::arg("est"), py::arg("level"),
        py::arg("cfg") = MatchConfig{});
  m.def("evaluate_piece", &evaluate_piece, py::arg("piece_id"), py::arg("ref"),
        py::arg("est"), py::arg("cfg") = MatchConfig{});
  m.def("micro_average", &micro_average, py::arg("pieces"));
  m.def("macro_average", &macro_average, py::arg("pieces"));
  m.def("format_report", &format_report, py::arg("pieces"),
        py::arg("include_averages") = true);

  // ---- run configuration ----
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("encoder", &RunConfig::encoder)
      .def_readwrite("decoder", &RunConfig::decoder)
      .def_readwrite("pretrain", &RunConfig::pretrain)
      .def_readwrite("train", &RunConfig::train)
      .def_readwrite("decode", &RunConfig::decode)
      .def_readwrite("match", &RunConfig::match);

  m.def("parse_run_config", &parse_run_config, py::arg("text"));
  m.def("load_run_config", &load_run_config, py::arg("path"));
  m.def("format_run_config", &format_run_config, py::arg("cfg"));
}
