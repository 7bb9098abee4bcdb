#include <cmath>
#include <vector>

#include "doctest.h"
#include "pianolm/error.hpp"
#include "pianolm/eval.hpp"
#include "pianolm/pipeline.hpp"
#include "pianolm/vocab.hpp"

using namespace pianolm;

namespace {

NoteEvent gnote(int on_idx, int pitch, int vel, int off_idx) {
  // Times built as index * step so they compare bitwise with decoded notes.
  return {on_idx * 0.01, pitch, vel, off_idx * 0.01};
}

Segment make_segment(std::vector<NoteEvent> notes, double duration) {
  Segment seg;
  seg.notes = canonical_sort(std::move(notes));
  seg.duration_s = duration;
  seg.features = notes_to_roll(seg, 100.0).frames;
  return seg;
}

EncoderParams oracle_encoder(int hidden, Rng& rng) {
  EncoderConfig cfg;
  cfg.mode = EncoderConfig::Mode::OracleRoll;
  cfg.hidden_dim = hidden;
  return EncoderParams::init(cfg, rng);
}

DecoderConfig micro_decoder(int max_seq) {
  DecoderConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.embed_dim = 16;
  cfg.vocab_size = vocab::kSize;
  cfg.max_seq_len = max_seq;
  cfg.dropout = 0.0;
  return cfg;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Config;
}

}  // namespace

TEST_CASE("mismatched stages, vocabularies and widths are rejected") {
  Rng rng(3);
  EncoderParams enc = oracle_encoder(8, rng);
  DecoderConfig dc = micro_decoder(64);
  StageModel b1 = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  StageModel b2 = make_stage_model(SequenceKind::Velocity, enc, dc, rng);
  StageModel b3 = make_stage_model(SequenceKind::Offset, enc, dc, rng);
  Eigen::MatrixXd feats = Eigen::MatrixXd::Zero(4, 88);

  CHECK(code_of([&] { (void)transcribe(b2, b2, b3, feats); }) == ErrorCode::StageMismatch);
  CHECK(code_of([&] { (void)transcribe_flattened(b1, feats); }) == ErrorCode::StageMismatch);

  StageModel narrow = b1;
  narrow.decoder.config.vocab_size = 500;
  CHECK(code_of([&] { (void)transcribe(narrow, b2, b3, feats); }) == ErrorCode::StageMismatch);

  StageModel skewed = b1;
  skewed.encoder.config.hidden_dim = 12;
  CHECK(code_of([&] { (void)transcribe(skewed, b2, b3, feats); }) == ErrorCode::StageMismatch);
}

TEST_CASE("grammar-constrained decoding never emits an unparseable sequence") {
  Rng rng(11);
  DecoderConfig dc;
  dc.n_layers = 1;
  dc.n_heads = 2;
  dc.embed_dim = 8;
  dc.vocab_size = vocab::kSize;
  dc.max_seq_len = 48;
  dc.dropout = 0.0;

  int decodes = 0;
  for (int trial = 0; trial < 20; ++trial) {
    Rng trng = rng.fork(trial);
    EncoderParams enc = oracle_encoder(8, trng);
    StageModel b1 = make_stage_model(SequenceKind::OnsetPitch, enc, dc, trng);
    StageModel b2 = make_stage_model(SequenceKind::Velocity, enc, dc, trng);
    StageModel b3 = make_stage_model(SequenceKind::Offset, enc, dc, trng);
    StageModel fl = make_stage_model(SequenceKind::Flattened, enc, dc, trng);

    for (int k = 0; k < 25; ++k) {
      Eigen::MatrixXd feats(6, 88);
      for (int r = 0; r < feats.rows(); ++r)
        for (int c = 0; c < feats.cols(); ++c) feats(r, c) = trng.normal();
      DecodeConfig cfg;
      cfg.codec = CodecConfig::for_duration(1.0);
      cfg.monotonic_onsets = k % 2 == 0;
      cfg.beam_width = k % 3 == 0 ? 4 : 1;
      cfg.codec.offset_stage_includes_velocity = k % 4 != 0;
      // Untrained models babble, so the note cap is what ends the decode;
      // both caps leave room for every stage (4N+2 tokens at most).
      cfg.max_notes = k % 2 == 0 ? 3 : 7;

      TranscribeResult res = transcribe(b1, b2, b3, feats, cfg);
      ++decodes;
      CHECK(res.notes.size() <= static_cast<size_t>(cfg.max_notes));
      for (const NoteEvent& n : res.notes) {
        CHECK(n.valid());
        CHECK(n.offset_s > n.onset_s);
      }
      if (cfg.monotonic_onsets) {
        const std::vector<DecodedNote> skel = decode(res.onset_pitch, cfg.codec);
        for (size_t i = 1; i < skel.size(); ++i)
          CHECK(skel[i].onset_s >= skel[i - 1].onset_s);
      }
      FlattenedResult fres = transcribe_flattened(fl, feats, cfg);
      ++decodes;
      for (const NoteEvent& n : fres.notes) CHECK(n.valid());
    }
  }
  CHECK(decodes == 1000);
}

TEST_CASE("with the grammar off, untrained models do emit unparseable sequences") {
  Rng rng(13);
  DecoderConfig dc;
  dc.n_layers = 1;
  dc.n_heads = 2;
  dc.embed_dim = 8;
  dc.vocab_size = vocab::kSize;
  dc.max_seq_len = 32;
  dc.dropout = 0.0;
  EncoderParams enc = oracle_encoder(8, rng);
  StageModel fl = make_stage_model(SequenceKind::Flattened, enc, dc, rng);

  int malformed = 0;
  for (int k = 0; k < 30; ++k) {
    Eigen::MatrixXd feats(4, 88);
    for (int r = 0; r < feats.rows(); ++r)
      for (int c = 0; c < feats.cols(); ++c) feats(r, c) = rng.normal();
    DecodeConfig cfg;
    cfg.grammar_constrained = false;
    cfg.codec = CodecConfig::for_duration(1.0);
    try {
      (void)transcribe_flattened(fl, feats, cfg);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Malformed || e.code() == ErrorCode::Truncated) ++malformed;
    }
  }
  CHECK(malformed > 0);
}

TEST_CASE("a skeleton that cannot fit the decoder context raises overflow") {
  Rng rng(17);
  EncoderParams enc = oracle_encoder(8, rng);
  DecoderConfig dc = micro_decoder(15);
  dc.n_layers = 1;
  dc.embed_dim = 8;
  StageModel b1 = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  StageModel b2 = make_stage_model(SequenceKind::Velocity, enc, dc, rng);
  StageModel b3 = make_stage_model(SequenceKind::Offset, enc, dc, rng);

  Eigen::MatrixXd feats = Eigen::MatrixXd::Zero(6, 88);
  DecodeConfig cfg;
  cfg.codec = CodecConfig::for_duration(1.0);
  // Stage 1 fills its budget with (o,p) pairs; the offset stage then needs
  // 4N+2 token rows it does not have.
  CHECK(code_of([&] { (void)transcribe(b1, b2, b3, feats, cfg); }) ==
        ErrorCode::DecodeOverflow);

  Eigen::MatrixXd wide = Eigen::MatrixXd::Zero(14, 88);
  CHECK(code_of([&] { (void)transcribe(b1, b2, b3, wide, cfg); }) == ErrorCode::DecodeOverflow);
}

TEST_CASE("hierarchy NLL is the sum of the three stage NLLs") {
  Rng rng(19);
  EncoderParams enc = oracle_encoder(8, rng);
  DecoderConfig dc = micro_decoder(160);
  StageModel b1 = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  StageModel b2 = make_stage_model(SequenceKind::Velocity, enc, dc, rng);
  StageModel b3 = make_stage_model(SequenceKind::Offset, enc, dc, rng);

  std::vector<Segment> data{
      make_segment({gnote(10, 60, 80, 50), gnote(30, 64, 70, 90), gnote(55, 67, 60, 95)}, 1.0),
      make_segment({gnote(5, 55, 90, 25), gnote(40, 59, 75, 80), gnote(70, 72, 100, 100)}, 1.0),
  };
  const CodecConfig codec = CodecConfig::for_duration(1.0);

  const auto [s1, c1] = stage_nll_sum(b1, data, codec);
  const auto [s2, c2] = stage_nll_sum(b2, data, codec);
  const auto [s3, c3] = stage_nll_sum(b3, data, codec);
  CHECK(c1 == 14);  // (2N+1) per segment
  CHECK(c2 == 8);   // (N+1)
  CHECK(c3 == 8);

  double manual = 0.0;
  for (const Segment& seg : data) {
    for (const StageModel* m : {&b1, &b2, &b3}) {
      const TokenSequence seq = encode_stage(seg, m->stage, codec);
      const HiddenSeq h = encoder_encode(m->encoder, seg.features);
      manual += nll_loss_sum(decoder_forward(m->decoder, h, seq.ids), seq.ids, seq.loss_mask)
                    .first;
    }
  }
  CHECK(std::abs(manual - (s1 + s2 + s3)) < 1e-9);
}

TEST_CASE("stages are independent models") {
  Rng rng(23);
  EncoderParams enc = oracle_encoder(8, rng);
  DecoderConfig dc = micro_decoder(64);
  dc.n_layers = 1;
  dc.embed_dim = 8;
  StageModel b1 = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  StageModel b2 = make_stage_model(SequenceKind::Velocity, enc, dc, rng);
  StageModel b3 = make_stage_model(SequenceKind::Offset, enc, dc, rng);
  b1.decoder.readout.col(vocab::kEos).array() += 3.0;

  Eigen::MatrixXd feats(5, 88);
  Rng frng(24);
  for (int r = 0; r < feats.rows(); ++r)
    for (int c = 0; c < feats.cols(); ++c) feats(r, c) = frng.normal();
  DecodeConfig cfg;
  cfg.codec = CodecConfig::for_duration(1.0);
  cfg.max_notes = 4;

  const TranscribeResult before = transcribe(b1, b2, b3, feats, cfg);
  for (int r = 0; r < b2.decoder.readout.rows(); ++r)
    for (int c = 0; c < b2.decoder.readout.cols(); ++c)
      b2.decoder.readout(r, c) += 0.05 * frng.normal();  // velocity stage only
  const TranscribeResult after = transcribe(b1, b2, b3, feats, cfg);
  CHECK(before.onset_pitch.ids == after.onset_pitch.ids);
  CHECK(before.offset.ids.size() == after.offset.ids.size());

  // Training one stage leaves another stage's training untouched.
  std::vector<Segment> data{make_segment({gnote(10, 60, 80, 30)}, 0.4)};
  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 1;
  tc.val_fraction = 0.0;
  tc.freeze_encoder = true;
  tc.codec = CodecConfig::for_duration(0.4);

  StageModel first = b3, second = b3;
  train_stage(first, data, tc);
  StageModel sacrificial = b1;
  train_stage(sacrificial, data, tc);
  train_stage(second, data, tc);
  CHECK(first.decoder.readout == second.decoder.readout);
  CHECK(first.decoder.token_embedding == second.decoder.token_embedding);
}

TEST_CASE("training logs both splits and actually learns") {
  Rng rng(29);
  EncoderParams enc = oracle_encoder(12, rng);
  DecoderConfig dc = micro_decoder(160);
  std::vector<Segment> data;
  for (int i = 0; i < 5; ++i)
    data.push_back(make_segment({gnote(5 + 10 * i, 50 + i, 60 + i, 40 + 10 * i),
                                 gnote(50 + 5 * i, 70 + i, 80, 90)},
                                1.0));

  TrainConfig tc;
  tc.steps = 60;
  tc.batch_size = 2;
  tc.eval_interval = 20;
  tc.val_fraction = 0.2;
  tc.freeze_encoder = true;
  tc.adam.lr = 3e-3;
  tc.codec = CodecConfig::for_duration(1.0);
  tc.seed = 5;

  StageModel model = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  const StageModel initial = model;
  TrainResult res = train_stage(model, data, tc);

  long train_rows = 0, val_rows = 0;
  for (const LossLogEntry& e : res.log) {
    CHECK(e.stage == SequenceKind::OnsetPitch);
    if (e.split == "train") ++train_rows;
    if (e.split == "val") {
      ++val_rows;
      CHECK(e.step % tc.eval_interval == 0);
    }
  }
  CHECK(train_rows == 60);
  CHECK(val_rows == 3);
  CHECK(res.final_train < res.log.front().loss * 0.7);
  CHECK(std::isfinite(res.final_val));

  const std::string text = format_loss_log(res.log);
  CHECK(text.find("step\tstage\tsplit\tloss\n") == 0);
  CHECK(text.find("\tonset_pitch\ttrain\t") != std::string::npos);
  CHECK(text.find("\tonset_pitch\tval\t") != std::string::npos);

  // Bit-identical replay from the same seed.
  StageModel again = initial;
  TrainResult res2 = train_stage(again, data, tc);
  REQUIRE(res2.log.size() == res.log.size());
  for (size_t i = 0; i < res.log.size(); ++i) CHECK(res2.log[i].loss == res.log[i].loss);
  CHECK(again.decoder.readout == model.decoder.readout);
}

TEST_CASE("joint fine-tuning reaches the encoder, freezing does not") {
  Rng rng(31);
  EncoderParams enc = oracle_encoder(8, rng);
  DecoderConfig dc = micro_decoder(160);
  dc.n_layers = 1;
  dc.embed_dim = 8;
  std::vector<Segment> data{make_segment({gnote(10, 60, 80, 50), gnote(30, 64, 70, 90)}, 1.0)};

  TrainConfig tc;
  tc.steps = 5;
  tc.batch_size = 1;
  tc.val_fraction = 0.0;
  tc.codec = CodecConfig::for_duration(1.0);

  StageModel frozen = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  StageModel joint = frozen;
  tc.freeze_encoder = true;
  train_stage(frozen, data, tc);
  CHECK(frozen.encoder.oracle_w == enc.oracle_w);

  tc.freeze_encoder = false;
  train_stage(joint, data, tc);
  CHECK((joint.encoder.oracle_w - enc.oracle_w).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("overfitting a two-segment set recovers it exactly") {
  Rng rng(7);
  EncoderParams enc = oracle_encoder(12, rng);
  std::vector<Segment> data{
      make_segment({gnote(10, 60, 80, 50), gnote(30, 64, 70, 90), gnote(55, 67, 60, 95)}, 1.0),
      make_segment({gnote(5, 55, 90, 25), gnote(40, 59, 75, 80), gnote(70, 72, 100, 100)}, 1.0),
  };

  TrainConfig tc;
  tc.steps = 400;
  tc.batch_size = 2;
  tc.eval_interval = 100;
  tc.val_fraction = 0.0;
  tc.freeze_encoder = true;
  tc.adam.lr = 3e-3;
  tc.codec = CodecConfig::for_duration(1.0);
  tc.seed = 3;

  DecoderConfig dc = micro_decoder(160);
  StageModel b1 = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  StageModel b2 = make_stage_model(SequenceKind::Velocity, enc, dc, rng);
  StageModel b3 = make_stage_model(SequenceKind::Offset, enc, dc, rng);
  StageModel fl = make_stage_model(SequenceKind::Flattened, enc, dc, rng);
  train_stage(b1, data, tc);
  train_stage(b2, data, tc);
  train_stage(b3, data, tc);
  train_stage(fl, data, tc);

  DecodeConfig cfg;
  cfg.codec = tc.codec;
  for (const Segment& seg : data) {
    TranscribeResult res = transcribe(b1, b2, b3, seg.features, cfg);
    CHECK(res.notes == seg.notes);

    // The assembled stage sequences match what the trainer would encode.
    for (SequenceKind kind :
         {SequenceKind::OnsetPitch, SequenceKind::Velocity, SequenceKind::Offset}) {
      const TokenSequence& got = kind == SequenceKind::OnsetPitch ? res.onset_pitch
                                 : kind == SequenceKind::Velocity ? res.velocity
                                                                  : res.offset;
      const TokenSequence want = encode_stage(seg, kind, cfg.codec);
      CHECK(got.ids == want.ids);
      CHECK(got.loss_mask == want.loss_mask);
    }
    CHECK(res.onset_pitch.ids.size() == 2 * 3 + 3);
    CHECK(res.velocity.ids.size() == 3 * 3 + 3);
    CHECK(res.offset.ids.size() == 4 * 3 + 3);
    CHECK(res.cost.ratio == sequence_cost(100.0, 3.0, 16.0).ratio);

    FlattenedResult fres = transcribe_flattened(fl, seg.features, cfg);
    CHECK(fres.notes == seg.notes);
    CHECK(fres.sequence.ids == encode_flattened(seg, cfg.codec).ids);
    CHECK(fres.sequence.ids.size() == 4 * 3 + 2);

    // Beam search agrees with greedy on an overfit model.
    DecodeConfig beam = cfg;
    beam.beam_width = 4;
    CHECK(transcribe(b1, b2, b3, seg.features, beam).notes == seg.notes);

    // The note cap truncates cleanly at a group boundary.
    DecodeConfig capped = cfg;
    capped.max_notes = 1;
    CHECK(transcribe(b1, b2, b3, seg.features, capped).notes.size() == 1);
  }
}

TEST_CASE("a stage overfit to silence transcribes silence") {
  Rng rng(37);
  EncoderParams enc = oracle_encoder(8, rng);
  DecoderConfig dc = micro_decoder(80);
  dc.n_layers = 1;
  dc.embed_dim = 8;
  std::vector<Segment> data{make_segment({}, 0.5)};

  TrainConfig tc;
  tc.steps = 80;
  tc.batch_size = 1;
  tc.val_fraction = 0.0;
  tc.freeze_encoder = true;
  tc.adam.lr = 3e-3;
  tc.codec = CodecConfig::for_duration(0.5);

  StageModel b1 = make_stage_model(SequenceKind::OnsetPitch, enc, dc, rng);
  StageModel b2 = make_stage_model(SequenceKind::Velocity, enc, dc, rng);
  StageModel b3 = make_stage_model(SequenceKind::Offset, enc, dc, rng);
  train_stage(b1, data, tc);

  DecodeConfig cfg;
  cfg.codec = tc.codec;
  TranscribeResult res = transcribe(b1, b2, b3, data[0].features, cfg);
  CHECK(res.notes.empty());
  CHECK(res.onset_pitch.ids == std::vector<int>{vocab::kSos, vocab::kQueryPitch, vocab::kEos});
}

TEST_CASE("the roll readout round-trips a clean roll into notes") {
  Rng rng(41);
  EncoderConfig cfg;
  cfg.mode = EncoderConfig::Mode::OracleRoll;
  cfg.hidden_dim = 88;
  EncoderParams enc = EncoderParams::init(cfg, rng);
  enc.oracle_w = Eigen::MatrixXd::Identity(88, 88);
  enc.oracle_b.setZero();
  enc.readout_w = 20.0 * Eigen::MatrixXd::Identity(88, 88);
  enc.readout_b = Eigen::MatrixXd::Constant(1, 88, -10.0);

  Segment seg = make_segment(
      {gnote(10, 60, 80, 50), gnote(30, 64, 70, 90), gnote(55, 67, 60, 95)}, 1.0);
  std::vector<NoteEvent> got = transcribe_roll(enc, seg.features);

  // Sampling the continuous note interval at frame starts can move either
  // boundary by one frame, so allow a frame of slack per endpoint.
  REQUIRE(got.size() == seg.notes.size());
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].pitch == seg.notes[i].pitch);
    CHECK(got[i].velocity == 64);  // rolls carry no velocity
    CHECK(std::abs(got[i].onset_s - seg.notes[i].onset_s) < 0.011);
    CHECK(std::abs(got[i].offset_s - seg.notes[i].offset_s) < 0.011);
  }
  CHECK(score_notes(seg.notes, got, MatchLevel::OnsetOffset).f1 == 1.0);
}
