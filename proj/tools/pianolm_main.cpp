#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pianolm/checkpoint.hpp"
#include "pianolm/codec.hpp"
#include "pianolm/config.hpp"
#include "pianolm/dataset.hpp"
#include "pianolm/error.hpp"
#include "pianolm/eval.hpp"
#include "pianolm/midi.hpp"
#include "pianolm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pianolm;

namespace {

RunConfig config_or_default(const std::string& path) {
  return path.empty() ? RunConfig{} : load_run_config(path);
}

SequenceKind parse_stage_or_raise(const std::string& name) {
  const auto kind = parse_sequence_kind(name);
  if (!kind)
    raise(ErrorCode::Config,
          "unknown stage \"" + name +
              "\" (expected flattened, onset_pitch, velocity, or offset)");
  return *kind;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::Io, "cannot open " + path + " for writing");
  out << text;
  if (!out) raise(ErrorCode::Io, "write failed: " + path);
}

Segment segment_from_notes(std::vector<NoteEvent> notes, const CodecConfig& codec) {
  Segment seg;
  seg.notes = canonical_sort(std::move(notes));
  seg.duration_s = codec.segment_duration_s;
  return seg;
}

int run_gen_data(std::uint64_t seed, int n, const std::string& out_dir) {
  SyntheticConfig cfg;
  cfg.n_segments = n;
  const std::vector<Segment> segments = gen_synthetic(seed, cfg);
  fs::create_directories(out_dir);
  Manifest manifest;
  manifest.feature_seed = seed;
  for (const Segment& seg : segments) {
    const std::string name = seg.source_id + ".jsonl";
    save_notes_jsonl((fs::path(out_dir) / name).string(), seg.notes);
    manifest.entries.push_back({name, "train"});
  }
  const std::string manifest_path = (fs::path(out_dir) / "manifest.tsv").string();
  save_manifest(manifest_path, manifest);
  std::fprintf(stderr, "wrote %zu segments and %s\n", segments.size(),
               manifest_path.c_str());
  return 0;
}

int run_import_midi(const std::string& in, const std::string& out) {
  const MidiPiece piece = load_midi(in);
  save_notes_jsonl(out, piece.notes);
  std::fprintf(stderr, "%s: %zu notes, %.3f s\n", in.c_str(), piece.notes.size(),
               piece.duration_s);
  return 0;
}

int run_tokenize(const std::string& in, const std::string& stage_name,
                 const std::string& config_path, const std::string& out) {
  const RunConfig cfg = config_or_default(config_path);
  const SequenceKind kind = parse_stage_or_raise(stage_name);
  const Segment seg = segment_from_notes(load_notes_jsonl(in), cfg.train.codec);
  const TokenSequence seq = kind == SequenceKind::Flattened
                                ? encode_flattened(seg, cfg.train.codec)
                                : encode_stage(seg, kind, cfg.train.codec);
  std::string line;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (i) line += ' ';
    line += std::to_string(seq.ids[i]);
  }
  line += '\n';
  write_text(out, line);
  return 0;
}

int run_detokenize(const std::string& in, const std::string& stage_name,
                   const std::string& config_path, const std::string& out) {
  const RunConfig cfg = config_or_default(config_path);
  const SequenceKind kind = parse_stage_or_raise(stage_name);
  std::ifstream file(in, std::ios::binary);
  if (!file) raise(ErrorCode::Io, "cannot open " + in);
  std::vector<NoteEvent> notes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(file, line)) {
    ++line_no;
    if (line.empty()) continue;
    TokenSequence seq;
    seq.kind = kind;
    std::istringstream words(line);
    std::string word;
    while (words >> word) {
      try {
        seq.ids.push_back(std::stoi(word));
      } catch (const std::exception&) {
        raise(ErrorCode::Malformed, in + ":" + std::to_string(line_no) +
                                        ": bad token id \"" + word + "\"");
      }
    }
    const auto decoded = decode(seq, cfg.train.codec);
    const auto line_notes = decoded_to_notes(decoded, cfg.train.codec);
    notes.insert(notes.end(), line_notes.begin(), line_notes.end());
  }
  save_notes_jsonl(out, notes);
  return 0;
}

int run_pretrain_encoder(const std::string& config_path, const std::string& data,
                         const std::string& split, const std::string& out) {
  const RunConfig cfg = config_or_default(config_path);
  const std::vector<Segment> segments =
      load_dataset(data, split, cfg.train.codec.segment_duration_s);
  if (segments.empty()) raise(ErrorCode::Config, "no segments to pretrain on");
  Rng rng(cfg.pretrain.seed);
  EncoderParams params = EncoderParams::init(cfg.encoder, rng);
  const std::vector<double> losses = encoder_pretrain(params, segments, cfg.pretrain);
  save_encoder_checkpoint(out, params);
  std::fprintf(stderr, "pretrained on %zu segments, %zu steps, final BCE %.6g\n",
               segments.size(), losses.size(),
               losses.empty() ? 0.0 : losses.back());
  return 0;
}

int run_train_lm(const std::string& stage_name, const std::string& encoder_path,
                 const std::string& config_path, const std::string& data,
                 const std::string& split, const std::string& out,
                 std::string log_path) {
  const RunConfig cfg = config_or_default(config_path);
  const SequenceKind kind = parse_stage_or_raise(stage_name);
  const std::vector<Segment> segments =
      load_dataset(data, split, cfg.train.codec.segment_duration_s);

  Rng init_rng(Rng::seed_mix(cfg.train.seed, fnv1a_hash("init." + stage_name)));
  EncoderParams encoder;
  if (encoder_path.empty()) {
    encoder = EncoderParams::init(cfg.encoder, init_rng);
  } else {
    encoder = load_encoder_checkpoint(encoder_path);
  }
  StageModel model = make_stage_model(kind, encoder, cfg.decoder, init_rng);
  const TrainResult result = train_stage(model, segments, cfg.train);

  save_stage_checkpoint(out, model);
  if (log_path.empty()) log_path = out + ".loss.tsv";
  write_text(log_path, format_loss_log(result.log));
  std::fprintf(stderr, "%s: final train loss %.6g, final val loss %.6g, log %s\n",
               stage_name.c_str(), result.final_train, result.final_val,
               log_path.c_str());
  return 0;
}

int run_transcribe(const std::string& mode, const std::vector<std::string>& model_paths,
                   const std::string& config_path, const std::string& in,
                   const std::string& split, const std::string& out_dir) {
  const RunConfig cfg = config_or_default(config_path);
  const std::vector<Segment> segments =
      load_dataset(in, split, cfg.decode.codec.segment_duration_s);
  fs::create_directories(out_dir);

  const auto expect_models = [&](std::size_t n, const char* what) {
    if (model_paths.size() != n)
      raise(ErrorCode::Config, std::string("--mode ") + mode + " needs " + what);
  };

  std::size_t total_notes = 0;
  if (mode == "hierarchy") {
    expect_models(3, "three stage checkpoints: onset_pitch velocity offset");
    const StageModel b1 = load_stage_checkpoint(model_paths[0]);
    const StageModel b2 = load_stage_checkpoint(model_paths[1]);
    const StageModel b3 = load_stage_checkpoint(model_paths[2]);
    if (b1.stage != SequenceKind::OnsetPitch || b2.stage != SequenceKind::Velocity ||
        b3.stage != SequenceKind::Offset)
      raise(ErrorCode::StageMismatch,
            "--models must name onset_pitch, velocity, offset checkpoints in order");
    for (const Segment& seg : segments) {
      const TranscribeResult res = transcribe(b1, b2, b3, seg.features, cfg.decode);
      save_notes_jsonl((fs::path(out_dir) / (seg.source_id + ".jsonl")).string(),
                       res.notes);
      total_notes += res.notes.size();
    }
  } else if (mode == "flattened") {
    expect_models(1, "one flattened stage checkpoint");
    const StageModel model = load_stage_checkpoint(model_paths[0]);
    for (const Segment& seg : segments) {
      const FlattenedResult res = transcribe_flattened(model, seg.features, cfg.decode);
      save_notes_jsonl((fs::path(out_dir) / (seg.source_id + ".jsonl")).string(),
                       res.notes);
      total_notes += res.notes.size();
    }
  } else if (mode == "roll") {
    expect_models(1, "one encoder checkpoint");
    const EncoderParams encoder = load_encoder_checkpoint(model_paths[0]);
    for (const Segment& seg : segments) {
      const auto notes = transcribe_roll(encoder, seg.features);
      save_notes_jsonl((fs::path(out_dir) / (seg.source_id + ".jsonl")).string(),
                       notes);
      total_notes += notes.size();
    }
  } else {
    raise(ErrorCode::Config, "unknown mode \"" + mode +
                                 "\" (expected hierarchy, flattened, or roll)");
  }
  std::fprintf(stderr, "transcribed %zu segments (%zu notes) into %s\n",
               segments.size(), total_notes, out_dir.c_str());
  return 0;
}

int run_evaluate(const std::string& ref, const std::string& est,
                 const std::string& config_path, const std::string& report_path) {
  const RunConfig cfg = config_or_default(config_path);
  std::vector<PieceEval> pieces;
  if (fs::is_directory(ref) && fs::is_directory(est)) {
    std::vector<fs::path> ref_files;
    for (const auto& entry : fs::directory_iterator(ref))
      if (entry.path().extension() == ".jsonl") ref_files.push_back(entry.path());
    std::sort(ref_files.begin(), ref_files.end());
    if (ref_files.empty())
      raise(ErrorCode::Io, "no .jsonl files under " + ref);
    for (const fs::path& ref_file : ref_files) {
      const fs::path est_file = fs::path(est) / ref_file.filename();
      if (!fs::exists(est_file))
        raise(ErrorCode::Io, "missing estimate " + est_file.string());
      pieces.push_back(evaluate_piece(ref_file.stem().string(),
                                      load_notes_jsonl(ref_file.string()),
                                      load_notes_jsonl(est_file.string()),
                                      cfg.match));
    }
  } else if (fs::is_regular_file(ref) && fs::is_regular_file(est)) {
    pieces.push_back(evaluate_piece(fs::path(ref).stem().string(),
                                    load_notes_jsonl(ref), load_notes_jsonl(est),
                                    cfg.match));
  } else {
    raise(ErrorCode::Io, "--ref and --est must both be files or both directories");
  }
  const std::string report = format_report(pieces);
  if (report_path.empty())
    std::fputs(report.c_str(), stdout);
  else
    write_text(report_path, report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pianolm: hierarchical language-model piano transcription"};
  app.require_subcommand(1);

  std::uint64_t gen_seed = 0;
  int gen_n = 10;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--n", gen_n, "number of 10 s segments");
  gen->add_option("--out", gen_out, "output directory")->required();

  std::string midi_in, midi_out;
  auto* import_midi =
      app.add_subcommand("import-midi", "Convert a Standard MIDI File to JSONL");
  import_midi->add_option("--in", midi_in, "SMF path")->required();
  import_midi->add_option("--out", midi_out, "notes JSONL path")->required();

  std::string tok_in, tok_stage = "flattened", tok_config, tok_out;
  auto* tokenize = app.add_subcommand("tokenize", "Notes JSONL to token ids");
  tokenize->add_option("--in", tok_in, "notes JSONL")->required();
  tokenize->add_option("--stage", tok_stage,
                       "flattened | onset_pitch | velocity | offset");
  tokenize->add_option("--config", tok_config, "config JSON");
  tokenize->add_option("--out", tok_out, "token-id line output")->required();

  std::string detok_in, detok_stage = "flattened", detok_config, detok_out;
  auto* detokenize = app.add_subcommand("detokenize", "Token ids back to notes");
  detokenize->add_option("--in", detok_in, "token-id lines")->required();
  detokenize->add_option("--stage", detok_stage,
                         "flattened | onset_pitch | velocity | offset");
  detokenize->add_option("--config", detok_config, "config JSON");
  detokenize->add_option("--out", detok_out, "notes JSONL output")->required();

  std::string pre_config, pre_data, pre_split = "train", pre_out;
  auto* pretrain =
      app.add_subcommand("pretrain-encoder", "Train the frame-roll encoder");
  pretrain->add_option("--config", pre_config, "config JSON");
  pretrain->add_option("--data", pre_data, "dataset manifest")->required();
  pretrain->add_option("--split", pre_split, "manifest split to use");
  pretrain->add_option("--out", pre_out, "encoder checkpoint")->required();

  std::string lm_stage, lm_encoder, lm_config, lm_data, lm_split = "train", lm_out,
      lm_log;
  auto* train_lm = app.add_subcommand("train-lm", "Train one stage model");
  train_lm->add_option("--stage", lm_stage,
                       "flattened | onset_pitch | velocity | offset")
      ->required();
  train_lm->add_option("--encoder", lm_encoder,
                       "encoder checkpoint (fresh when omitted)");
  train_lm->add_option("--config", lm_config, "config JSON");
  train_lm->add_option("--data", lm_data, "dataset manifest")->required();
  train_lm->add_option("--split", lm_split, "manifest split to use");
  train_lm->add_option("--out", lm_out, "stage checkpoint")->required();
  train_lm->add_option("--log", lm_log, "loss log path (default <out>.loss.tsv)");

  std::string tr_mode, tr_config, tr_in, tr_split, tr_out;
  std::vector<std::string> tr_models;
  auto* transcribe_cmd =
      app.add_subcommand("transcribe", "Features to notes via a trained model");
  transcribe_cmd->add_option("--mode", tr_mode, "hierarchy | flattened | roll")
      ->required();
  transcribe_cmd->add_option("--models", tr_models, "checkpoint path(s)")
      ->required()
      ->expected(-1);
  transcribe_cmd->add_option("--config", tr_config, "config JSON");
  transcribe_cmd->add_option("--in", tr_in, "dataset manifest")->required();
  transcribe_cmd->add_option("--split", tr_split, "manifest split (default all)");
  transcribe_cmd->add_option("--out", tr_out, "output directory")->required();

  std::string ev_ref, ev_est, ev_config, ev_report;
  auto* evaluate = app.add_subcommand("evaluate", "Note-level metric report");
  evaluate->add_option("--ref", ev_ref, "reference JSONL file or directory")
      ->required();
  evaluate->add_option("--est", ev_est, "estimate JSONL file or directory")
      ->required();
  evaluate->add_option("--config", ev_config, "config JSON");
  evaluate->add_option("--report", ev_report, "report path (stdout when omitted)");

  double cost_t = 0, cost_n = 0, cost_d = 0;
  auto* costmodel = app.add_subcommand("costmodel", "Print sequence cost model");
  costmodel->add_option("--t", cost_t, "feature frames")->required();
  costmodel->add_option("--n", cost_n, "note count")->required();
  costmodel->add_option("--d", cost_d, "hidden dim")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_seed, gen_n, gen_out);
    if (import_midi->parsed()) return run_import_midi(midi_in, midi_out);
    if (tokenize->parsed())
      return run_tokenize(tok_in, tok_stage, tok_config, tok_out);
    if (detokenize->parsed())
      return run_detokenize(detok_in, detok_stage, detok_config, detok_out);
    if (pretrain->parsed())
      return run_pretrain_encoder(pre_config, pre_data, pre_split, pre_out);
    if (train_lm->parsed())
      return run_train_lm(lm_stage, lm_encoder, lm_config, lm_data, lm_split,
                          lm_out, lm_log);
    if (transcribe_cmd->parsed())
      return run_transcribe(tr_mode, tr_models, tr_config, tr_in, tr_split, tr_out);
    if (evaluate->parsed())
      return run_evaluate(ev_ref, ev_est, ev_config, ev_report);
    if (costmodel->parsed()) {
      const SequenceCost c = sequence_cost(cost_t, cost_n, cost_d);
      std::printf("hierarchical\t%.17g\nsingle\t%.17g\nratio\t%.17g\n",
                  c.hierarchical_cost, c.single_model_cost, c.ratio);
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
