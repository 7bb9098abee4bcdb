#include "pianolm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <numeric>

#include "pianolm/error.hpp"
#include "pianolm/vocab.hpp"

namespace pianolm {

namespace {

namespace vb = vocab;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_stage(const StageModel& model, SequenceKind expected) {
  if (model.stage != expected)
    raise(ErrorCode::StageMismatch,
          std::string("expected a ") + sequence_kind_name(expected) + " model, got " +
              sequence_kind_name(model.stage));
  if (model.decoder.config.vocab_size != vb::kSize)
    raise(ErrorCode::StageMismatch,
          "decoder vocabulary " + std::to_string(model.decoder.config.vocab_size) +
              " does not cover the note token set");
  if (model.encoder.config.hidden_dim != model.decoder.config.encoder_dim)
    raise(ErrorCode::StageMismatch,
          "encoder width " + std::to_string(model.encoder.config.hidden_dim) +
              " does not match the decoder prefix width " +
              std::to_string(model.decoder.config.encoder_dim));
}

// Inclusive token-id ranges that are legal in a slot.
struct IdRange {
  int lo, hi;
};

std::vector<IdRange> legal_ranges(TokenField slot, const DecodeConfig& cfg, int min_onset_idx,
                                  int group_onset_idx, bool allow_eos, bool allow_new_note) {
  std::vector<IdRange> out;
  if (!cfg.grammar_constrained) {
    out.push_back({0, vb::kSize - 1});
    return out;
  }
  switch (slot) {
    case TokenField::Onset: {
      if (allow_eos) out.push_back({vb::kEos, vb::kEos});
      if (allow_new_note) {
        const int lo = cfg.monotonic_onsets ? min_onset_idx : 0;
        if (!cfg.monotonic_onsets || min_onset_idx == 0)
          out.push_back({vb::kSustain, vb::kSustain});
        if (lo <= cfg.codec.max_time_index)
          out.push_back({vb::time_token(lo), vb::time_token(cfg.codec.max_time_index)});
      }
      break;
    }
    case TokenField::Pitch:
      out.push_back({vb::kPitchBase, vb::kPitchBase + vb::kNumPitchTokens - 1});
      break;
    case TokenField::Velocity:
      out.push_back({vb::kVelocityBase, vb::kVelocityBase + vb::kNumVelocityTokens - 1});
      break;
    case TokenField::Offset:
      out.push_back({vb::kSustain, vb::kSustain});
      if (group_onset_idx <= cfg.codec.max_time_index)
        out.push_back(
            {vb::time_token(group_onset_idx), vb::time_token(cfg.codec.max_time_index)});
      break;
  }
  return out;
}

double legal_logsumexp(const Eigen::VectorXd& logits, const std::vector<IdRange>& ranges) {
  double mx = kNegInf;
  for (const IdRange& r : ranges)
    for (int id = r.lo; id <= r.hi; ++id) mx = std::max(mx, logits(id));
  double s = 0.0;
  for (const IdRange& r : ranges)
    for (int id = r.lo; id <= r.hi; ++id) s += std::exp(logits(id) - mx);
  return mx + std::log(s);
}

// Best-k legal token ids by logit, descending.
std::vector<int> top_legal(const Eigen::VectorXd& logits, const std::vector<IdRange>& ranges,
                           int k) {
  std::vector<int> best;
  for (const IdRange& r : ranges) {
    for (int id = r.lo; id <= r.hi; ++id) {
      auto at = std::find_if(best.begin(), best.end(),
                             [&](int b) { return logits(id) > logits(b); });
      if (at != best.end() || static_cast<int>(best.size()) < k) {
        best.insert(at, id);
        if (static_cast<int>(best.size()) > k) best.pop_back();
      }
    }
  }
  return best;
}

struct Hyp {
  std::shared_ptr<DecoderSession> sess;
  Eigen::VectorXd next_logits;
  std::vector<int> tokens;  // emitted note-group tokens, no <sos>/query/<eos>
  double logp = 0.0;
  bool done = false;
  int slot_idx = 0;
  int min_onset_idx = 0;
  int group_onset_idx = 0;
  long notes = 0;
};

void hyp_advance(Hyp& h, int token, int nslots, const DecodeConfig& cfg) {
  h.next_logits = h.sess->append(token);
  if (token == vb::kEos) {
    h.done = true;
    return;
  }
  h.tokens.push_back(token);
  if (h.slot_idx == 0) {
    if (vb::classify(token) == vb::TokenClass::Time) {
      h.group_onset_idx = vb::time_index(token);
      if (cfg.monotonic_onsets) h.min_onset_idx = h.group_onset_idx;
    } else {
      h.group_onset_idx = 0;  // sustained from before the segment
    }
  }
  h.slot_idx = (h.slot_idx + 1) % nslots;
  if (h.slot_idx == 0) ++h.notes;
}

// Autoregressive decode of a full stage sequence (OnsetPitch or Flattened).
// Returns the emitted group tokens of the best hypothesis.
std::vector<int> autoregressive_decode(const DecoderParams& dec, const HiddenSeq& hidden,
                                       SequenceKind kind, const DecodeConfig& cfg) {
  const auto fields = sequence_fields(kind, cfg.codec);
  const int nslots = static_cast<int>(fields.size());
  const int cap = dec.config.max_seq_len;
  const int width = std::max(1, cfg.beam_width);

  const int header = kind == SequenceKind::Flattened ? 1 : 2;  // <sos> (+ query)
  if (static_cast<int>(hidden.vectors.rows()) + header + 1 > cap)
    raise(ErrorCode::DecodeOverflow, "audio prefix leaves no room for tokens");
  Hyp root;
  root.sess = std::make_shared<DecoderSession>(dec, hidden);
  root.next_logits = root.sess->append(vb::kSos);
  if (kind != SequenceKind::Flattened) {
    const int query = kind == SequenceKind::OnsetPitch ? vb::kQueryPitch
                      : kind == SequenceKind::Velocity ? vb::kQueryVelocity
                                                       : vb::kQueryOffset;
    root.next_logits = root.sess->append(query);
  }

  std::vector<Hyp> beam;
  beam.push_back(std::move(root));

  struct Cand {
    int parent;
    int token;  // -1 carries a finished hypothesis
    double logp;
  };

  while (true) {
    bool all_done = true;
    for (const Hyp& h : beam)
      if (!h.done) all_done = false;
    if (all_done) break;

    std::vector<Cand> cands;
    for (int i = 0; i < static_cast<int>(beam.size()); ++i) {
      Hyp& h = beam[i];
      if (h.done) {
        cands.push_back({i, -1, h.logp});
        continue;
      }
      const TokenField slot = fields[h.slot_idx];
      const bool at_boundary = h.slot_idx == 0;
      // A new group costs nslots tokens now plus <eos> later; <eos> costs one.
      const bool room_for_note = h.sess->total_len() + nslots + 1 <= cap;
      const bool room_for_eos = h.sess->total_len() + 1 <= cap;
      const bool allow_new = !at_boundary || (room_for_note && h.notes < cfg.max_notes);
      const bool allow_eos = at_boundary && room_for_eos;
      if (!allow_new && !allow_eos) continue;  // dead end
      // Probabilities renormalize over the grammar-legal set; the length and
      // note budgets only prune which continuations may be expanded.
      const auto grammar = legal_ranges(slot, cfg, h.min_onset_idx, h.group_onset_idx,
                                        at_boundary, true);
      auto expandable = legal_ranges(slot, cfg, h.min_onset_idx, h.group_onset_idx, allow_eos,
                                     allow_new);
      // Budget limits still apply with the grammar off.
      if (!cfg.grammar_constrained && !allow_new) expandable = {{vb::kEos, vb::kEos}};
      if (expandable.empty()) continue;
      const double lse = legal_logsumexp(h.next_logits, grammar);
      for (int tok : top_legal(h.next_logits, expandable, width))
        cands.push_back({i, tok, h.logp + h.next_logits(tok) - lse});
    }
    if (cands.empty())
      raise(ErrorCode::DecodeOverflow, "decode exceeded the length or note budget");

    std::stable_sort(cands.begin(), cands.end(),
                     [](const Cand& a, const Cand& b) { return a.logp > b.logp; });
    if (static_cast<int>(cands.size()) > width) cands.resize(width);

    std::vector<int> uses(beam.size(), 0);
    for (const Cand& c : cands) ++uses[c.parent];
    std::vector<Hyp> next;
    next.reserve(cands.size());
    for (const Cand& c : cands) {
      Hyp& parent = beam[c.parent];
      if (c.token < 0) {
        next.push_back(std::move(parent));
        continue;
      }
      Hyp h;
      h.tokens = parent.tokens;
      h.slot_idx = parent.slot_idx;
      h.min_onset_idx = parent.min_onset_idx;
      h.group_onset_idx = parent.group_onset_idx;
      h.notes = parent.notes;
      h.logp = c.logp;
      if (--uses[c.parent] == 0)
        h.sess = std::move(parent.sess);  // last child may take the cache
      else
        h.sess = std::make_shared<DecoderSession>(*parent.sess);
      hyp_advance(h, c.token, nslots, cfg);
      next.push_back(std::move(h));
    }
    beam = std::move(next);
  }

  const Hyp* best = &beam.front();
  for (const Hyp& h : beam)
    if (h.logp > best->logp) best = &h;
  return best->tokens;
}

// Teacher-forced pass over a fixed skeleton: appends the known slots and
// predicts only `predict` slots (argmax over the legal set). Returns one
// token per note.
std::vector<int> forced_fill(const DecoderParams& dec, const HiddenSeq& hidden,
                             SequenceKind kind, const std::vector<int>& onsets,
                             const std::vector<int>& pitches, const std::vector<int>& velocities,
                             const DecodeConfig& cfg) {
  const auto fields = sequence_fields(kind, cfg.codec);
  const size_t n = onsets.size();
  if (n == 0) return {};

  const long need = 2 + static_cast<long>(fields.size()) * static_cast<long>(n);
  if (hidden.vectors.rows() + need > dec.config.max_seq_len)
    raise(ErrorCode::DecodeOverflow, "skeleton does not fit the decoder context");
  DecoderSession sess(dec, hidden);

  Eigen::VectorXd logits = sess.append(vb::kSos);
  logits = sess.append(kind == SequenceKind::Velocity ? vb::kQueryVelocity : vb::kQueryOffset);

  std::vector<int> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    const int onset_idx =
        vb::classify(onsets[i]) == vb::TokenClass::Time ? vb::time_index(onsets[i]) : 0;
    for (TokenField slot : fields) {
      int forced = -1;
      switch (slot) {
        case TokenField::Onset: forced = onsets[i]; break;
        case TokenField::Pitch: forced = pitches[i]; break;
        case TokenField::Velocity:
          if (kind == SequenceKind::Offset) forced = velocities[i];
          break;
        case TokenField::Offset: break;
      }
      if (forced >= 0) {
        logits = sess.append(forced);
        continue;
      }
      auto ranges = legal_ranges(slot, cfg, 0, onset_idx, false, true);
      const auto top = top_legal(logits, ranges, 1);
      out.push_back(top.front());
      logits = sess.append(top.front());
    }
  }
  return out;
}

// Assembles a stage sequence with the trainer's mask layout from decoded
// group tokens.
TokenSequence make_sequence(SequenceKind kind, const std::vector<int>& group_tokens,
                            const CodecConfig& codec) {
  TokenSequence seq;
  seq.kind = kind;
  seq.ids.push_back(vb::kSos);
  seq.loss_mask.push_back(0);
  if (kind != SequenceKind::Flattened) {
    seq.ids.push_back(kind == SequenceKind::OnsetPitch  ? vb::kQueryPitch
                      : kind == SequenceKind::Velocity ? vb::kQueryVelocity
                                                       : vb::kQueryOffset);
    seq.loss_mask.push_back(0);
  }
  const auto fields = sequence_fields(kind, codec);
  for (size_t i = 0; i < group_tokens.size(); ++i) {
    seq.ids.push_back(group_tokens[i]);
    seq.loss_mask.push_back(field_in_loss(kind, fields[i % fields.size()]) ? 1 : 0);
  }
  seq.ids.push_back(vb::kEos);
  seq.loss_mask.push_back(1);
  return seq;
}

HiddenSeq encode_features(const StageModel& model, const Eigen::MatrixXd& features) {
  return encoder_encode(model.encoder, features);
}

}  // namespace

StageModel make_stage_model(SequenceKind stage, const EncoderParams& encoder,
                            DecoderConfig decoder_config, Rng& rng) {
  encoder.config.validate();
  decoder_config.encoder_dim = encoder.config.hidden_dim;
  decoder_config.validate();
  StageModel model;
  model.stage = stage;
  model.encoder = encoder;
  model.decoder = DecoderParams::init(decoder_config, rng);
  return model;
}

TranscribeResult transcribe(const StageModel& onset_pitch, const StageModel& velocity,
                            const StageModel& offset, const Eigen::MatrixXd& features,
                            const DecodeConfig& cfg) {
  check_stage(onset_pitch, SequenceKind::OnsetPitch);
  check_stage(velocity, SequenceKind::Velocity);
  check_stage(offset, SequenceKind::Offset);

  TranscribeResult res;
  const HiddenSeq h1 = encode_features(onset_pitch, features);
  const std::vector<int> skeleton =
      autoregressive_decode(onset_pitch.decoder, h1, SequenceKind::OnsetPitch, cfg);
  const size_t n = skeleton.size() / 2;
  std::vector<int> onsets(n), pitches(n);
  for (size_t i = 0; i < n; ++i) {
    onsets[i] = skeleton[2 * i];
    pitches[i] = skeleton[2 * i + 1];
  }

  const HiddenSeq h2 = encode_features(velocity, features);
  const std::vector<int> vels =
      forced_fill(velocity.decoder, h2, SequenceKind::Velocity, onsets, pitches, {}, cfg);

  const HiddenSeq h3 = encode_features(offset, features);
  const std::vector<int> offs =
      forced_fill(offset.decoder, h3, SequenceKind::Offset, onsets, pitches, vels, cfg);

  std::vector<int> vel_groups, off_groups;
  const bool off_has_vel = cfg.codec.offset_stage_includes_velocity;
  for (size_t i = 0; i < n; ++i) {
    vel_groups.insert(vel_groups.end(), {onsets[i], pitches[i], vels[i]});
    if (off_has_vel)
      off_groups.insert(off_groups.end(), {onsets[i], pitches[i], vels[i], offs[i]});
    else
      off_groups.insert(off_groups.end(), {onsets[i], pitches[i], offs[i]});
  }
  res.onset_pitch = make_sequence(SequenceKind::OnsetPitch, skeleton, cfg.codec);
  res.velocity = make_sequence(SequenceKind::Velocity, vel_groups, cfg.codec);
  res.offset = make_sequence(SequenceKind::Offset, off_groups, cfg.codec);

  std::vector<DecodedNote> decoded = decode(res.offset, cfg.codec);
  const std::vector<DecodedNote> with_vel = decode(res.velocity, cfg.codec);
  for (size_t i = 0; i < decoded.size(); ++i) decoded[i].velocity = with_vel[i].velocity;
  res.notes = decoded_to_notes(decoded, cfg.codec);
  res.cost = sequence_cost(static_cast<double>(features.rows()), static_cast<double>(n),
                           static_cast<double>(onset_pitch.decoder.config.embed_dim));
  return res;
}

FlattenedResult transcribe_flattened(const StageModel& model, const Eigen::MatrixXd& features,
                                     const DecodeConfig& cfg) {
  check_stage(model, SequenceKind::Flattened);
  FlattenedResult res;
  const HiddenSeq h = encode_features(model, features);
  const std::vector<int> groups =
      autoregressive_decode(model.decoder, h, SequenceKind::Flattened, cfg);
  res.sequence = make_sequence(SequenceKind::Flattened, groups, cfg.codec);
  res.notes = decoded_to_notes(decode(res.sequence, cfg.codec), cfg.codec);
  res.cost = sequence_cost(static_cast<double>(features.rows()),
                           static_cast<double>(groups.size() / 4),
                           static_cast<double>(model.decoder.config.embed_dim));
  return res;
}

std::vector<NoteEvent> transcribe_roll(const EncoderParams& encoder,
                                       const Eigen::MatrixXd& features,
                                       const RollThresholds& thresholds) {
  const HiddenSeq hidden = encoder_encode(encoder, features);
  PianoRoll pred;
  pred.frames = encoder_frame_probs(encoder, hidden);
  pred.frame_rate_hz = encoder.config.frame_rate_hz;
  return roll_to_notes(pred, thresholds);
}

std::string format_loss_log(const std::vector<LossLogEntry>& log) {
  std::string out = "step\tstage\tsplit\tloss\n";
  char buf[128];
  for (const LossLogEntry& e : log) {
    std::snprintf(buf, sizeof(buf), "%ld\t%s\t%s\t%.9g\n", e.step, sequence_kind_name(e.stage),
                  e.split.c_str(), e.loss);
    out += buf;
  }
  return out;
}

namespace {

TokenSequence tokenize_for(SequenceKind kind, const Segment& seg, const CodecConfig& codec) {
  return kind == SequenceKind::Flattened ? encode_flattened(seg, codec)
                                         : encode_stage(seg, kind, codec);
}

void accumulate(std::vector<TensorRef>& into, std::vector<TensorRef>& from) {
  for (size_t i = 0; i < into.size(); ++i) *into[i].tensor += *from[i].tensor;
}

double pooled_eval(const StageModel& model, const std::vector<int>& idxs,
                   const std::vector<HiddenSeq>& frozen_h, bool frozen,
                   const std::vector<const Segment*>& segs,
                   const std::vector<TokenSequence>& toks) {
  double sum = 0.0;
  long count = 0;
  for (int i : idxs) {
    HiddenSeq h = frozen ? frozen_h[i] : encoder_encode(model.encoder, segs[i]->features);
    const Eigen::MatrixXd logits = decoder_forward(model.decoder, h, toks[i].ids);
    const auto [s, c] = nll_loss_sum(logits, toks[i].ids, toks[i].loss_mask);
    sum += s;
    count += c;
  }
  if (count == 0) raise(ErrorCode::EmptyMask, "validation split has no masked tokens");
  return sum / static_cast<double>(count);
}

}  // namespace

TrainResult train_stage(StageModel& model, const std::vector<Segment>& segments,
                        const TrainConfig& cfg) {
  if (segments.empty()) raise(ErrorCode::Config, "no training segments");
  if (cfg.steps < 1 || cfg.batch_size < 1 || cfg.eval_interval < 1)
    raise(ErrorCode::Config, "steps, batch_size and eval_interval must be positive");
  if (cfg.val_fraction < 0.0 || cfg.val_fraction >= 1.0)
    raise(ErrorCode::Config, "val_fraction must lie in [0, 1)");
  model.encoder.config.validate();
  model.decoder.config.validate();
  if (model.encoder.config.hidden_dim != model.decoder.config.encoder_dim)
    raise(ErrorCode::StageMismatch, "encoder width does not match the decoder prefix width");

  const int n = static_cast<int>(segments.size());
  std::vector<const Segment*> segs(n);
  std::vector<TokenSequence> toks(n);
  for (int i = 0; i < n; ++i) {
    segs[i] = &segments[i];
    toks[i] = tokenize_for(model.stage, segments[i], cfg.codec);
  }

  // Deterministic shuffled split; the tail of the permutation trains.
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng(Rng::seed_mix(cfg.seed, fnv1a_hash("split")));
  for (int i = n - 1; i > 0; --i)
    std::swap(order[i], order[split_rng.uniform_int(0, i)]);
  int n_val = static_cast<int>(std::lround(cfg.val_fraction * n));
  n_val = std::min(n_val, n - 1);
  const std::vector<int> val_idx(order.begin(), order.begin() + n_val);
  const std::vector<int> train_idx(order.begin() + n_val, order.end());

  const bool frozen = cfg.freeze_encoder;
  std::vector<HiddenSeq> frozen_h;
  if (frozen) {
    frozen_h.resize(n);
    for (int i = 0; i < n; ++i) frozen_h[i] = encoder_encode(model.encoder, segs[i]->features);
  }

  AdamW opt;
  Rng batch_rng(Rng::seed_mix(cfg.seed, fnv1a_hash("batch")));
  Rng drop_rng(Rng::seed_mix(cfg.seed, fnv1a_hash("dropout")));

  TrainResult res;
  res.final_val = std::numeric_limits<double>::quiet_NaN();

  std::vector<TensorRef> enc_refs = tensor_refs(model.encoder);
  std::vector<TensorRef> dec_refs = tensor_refs(model.decoder);

  for (long step = 1; step <= cfg.steps; ++step) {
    std::vector<int> batch(cfg.batch_size);
    for (int& b : batch)
      b = train_idx[batch_rng.uniform_int(0, static_cast<int>(train_idx.size()) - 1)];

    double loss = 0.0;
    if (frozen) {
      std::vector<DecoderBatchItem> items;
      items.reserve(batch.size());
      for (int b : batch) items.push_back({&frozen_h[b], &toks[b]});
      loss = decoder_train_step(model.decoder, items, opt, cfg.adam, &drop_rng);
    } else {
      long total = 0;
      for (int b : batch)
        total += std::count(toks[b].loss_mask.begin(), toks[b].loss_mask.end(), 1);
      if (total == 0) raise(ErrorCode::EmptyMask, "batch has no masked tokens");
      const double scale = 1.0 / static_cast<double>(total);

      EncoderParams enc_acc = model.encoder.zeros_like();
      DecoderParams dec_acc = model.decoder.zeros_like();
      std::vector<TensorRef> enc_acc_refs = tensor_refs(enc_acc);
      std::vector<TensorRef> dec_acc_refs = tensor_refs(dec_acc);
      double loss_sum = 0.0;
      for (int b : batch) {
        EncoderCache ecache;
        const HiddenSeq h = encoder_encode(model.encoder, segs[b]->features, &ecache);
        CachePtr cache;
        const Eigen::MatrixXd logits =
            decoder_forward(model.decoder, h, toks[b].ids, cache.get(), &drop_rng);
        loss_sum += nll_loss_sum(logits, toks[b].ids, toks[b].loss_mask).first;
        const Eigen::MatrixXd d_logits =
            nll_loss_grad(logits, toks[b].ids, toks[b].loss_mask, scale);
        DecoderBackwardResult back = decoder_backward(model.decoder, *cache.get(), d_logits);
        std::vector<TensorRef> dg = tensor_refs(back.grads);
        accumulate(dec_acc_refs, dg);
        EncoderParams eg = encoder_backward(model.encoder, ecache, back.d_hidden);
        std::vector<TensorRef> egr = tensor_refs(eg);
        accumulate(enc_acc_refs, egr);
      }
      loss = loss_sum * scale;
      if (!std::isfinite(loss)) raise(ErrorCode::Diverged, "training loss is not finite");

      std::vector<TensorRef> params = enc_refs;
      params.insert(params.end(), dec_refs.begin(), dec_refs.end());
      std::vector<TensorRef> grads = enc_acc_refs;
      grads.insert(grads.end(), dec_acc_refs.begin(), dec_acc_refs.end());
      opt.step(params, grads, cfg.adam);
    }

    res.log.push_back({step, model.stage, "train", loss});
    res.final_train = loss;

    if (!val_idx.empty() && (step % cfg.eval_interval == 0 || step == cfg.steps)) {
      const double vloss = pooled_eval(model, val_idx, frozen_h, frozen, segs, toks);
      res.log.push_back({step, model.stage, "val", vloss});
      res.final_val = vloss;
    }
  }
  return res;
}

std::pair<double, long> stage_nll_sum(const StageModel& model,
                                      const std::vector<Segment>& segments,
                                      const CodecConfig& codec) {
  double sum = 0.0;
  long count = 0;
  for (const Segment& seg : segments) {
    const TokenSequence seq = tokenize_for(model.stage, seg, codec);
    const HiddenSeq h = encoder_encode(model.encoder, seg.features);
    const Eigen::MatrixXd logits = decoder_forward(model.decoder, h, seq.ids);
    const auto [s, c] = nll_loss_sum(logits, seq.ids, seq.loss_mask);
    sum += s;
    count += c;
  }
  return {sum, count};
}

}  // namespace pianolm
