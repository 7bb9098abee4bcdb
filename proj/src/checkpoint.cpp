#include "pianolm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <utility>

#include <json.hpp>

#include "config_json.hpp"
#include "pianolm/error.hpp"

namespace pianolm {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'P', 'L', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Cursor {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string where;

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      raise(ErrorCode::Malformed, where + ": truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string serialize(const json& meta, const std::vector<TensorRef>& refs) {
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  const std::string meta_text = meta.dump();
  put_u64(out, meta_text.size());
  out += meta_text;
  put_u64(out, refs.size());
  for (const TensorRef& ref : refs) {
    put_u64(out, ref.name.size());
    out += ref.name;
    const Eigen::MatrixXd& m = *ref.tensor;
    put_u64(out, static_cast<std::uint64_t>(m.rows()));
    put_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        put_u64(out, std::bit_cast<std::uint64_t>(m(r, c)));
  }
  return out;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::Io, "cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorCode::Io, "write failed: " + path);
}

struct Loaded {
  json meta;
  std::map<std::string, Eigen::MatrixXd> arrays;
};

Loaded read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  Cursor cur{bytes, 0, path};
  if (cur.str(4) != std::string(kMagic, 4))
    raise(ErrorCode::Malformed, path + ": not a checkpoint file");
  const std::uint32_t version = cur.u32();
  if (version != kVersion)
    raise(ErrorCode::Malformed,
          path + ": unsupported checkpoint version " + std::to_string(version));
  Loaded loaded;
  const std::string meta_text = cur.str(cur.u64());
  try {
    loaded.meta = json::parse(meta_text);
  } catch (const json::exception& e) {
    raise(ErrorCode::Malformed, path + ": bad metadata: " + e.what());
  }
  const std::uint64_t n_arrays = cur.u64();
  for (std::uint64_t i = 0; i < n_arrays; ++i) {
    const std::string name = cur.str(cur.u64());
    const std::uint64_t rows = cur.u64();
    const std::uint64_t cols = cur.u64();
    if (rows != 0 && cols > bytes.size() / 8 / rows)
      raise(ErrorCode::Malformed, path + ": tensor " + name + " overruns the file");
    cur.need(rows * cols * 8);
    Eigen::MatrixXd m(rows, cols);
    for (std::uint64_t r = 0; r < rows; ++r)
      for (std::uint64_t c = 0; c < cols; ++c)
        m(r, c) = std::bit_cast<double>(cur.u64());
    if (!loaded.arrays.emplace(name, std::move(m)).second)
      raise(ErrorCode::Malformed, path + ": duplicate tensor " + name);
  }
  if (cur.pos != bytes.size())
    raise(ErrorCode::Malformed, path + ": trailing bytes after the last tensor");
  return loaded;
}

void assign_arrays(Loaded& loaded, const std::vector<TensorRef>& refs,
                   const std::string& path) {
  if (loaded.arrays.size() != refs.size())
    raise(ErrorCode::Malformed,
          path + ": expected " + std::to_string(refs.size()) + " tensors, found " +
              std::to_string(loaded.arrays.size()));
  for (const TensorRef& ref : refs) {
    const auto it = loaded.arrays.find(ref.name);
    if (it == loaded.arrays.end())
      raise(ErrorCode::Malformed, path + ": missing tensor " + ref.name);
    if (it->second.rows() != ref.tensor->rows() ||
        it->second.cols() != ref.tensor->cols())
      raise(ErrorCode::Malformed,
            path + ": tensor " + ref.name + " has the wrong shape");
    *ref.tensor = std::move(it->second);
  }
}

std::string meta_kind(const json& meta, const std::string& path) {
  if (!meta.is_object() || !meta.contains("kind") || !meta["kind"].is_string())
    raise(ErrorCode::Malformed, path + ": metadata lacks a kind");
  return meta["kind"].get<std::string>();
}

}  // namespace

void save_encoder_checkpoint(const std::string& path,
                             const EncoderParams& params) {
  json meta;
  meta["kind"] = "encoder";
  meta["encoder"] = detail::encoder_config_json(params.config);
  // tensor_refs wants mutable access; serialization only reads.
  auto& mutable_params = const_cast<EncoderParams&>(params);
  write_file(path, serialize(meta, tensor_refs(mutable_params)));
}

EncoderParams load_encoder_checkpoint(const std::string& path) {
  Loaded loaded = read_checkpoint(path);
  if (meta_kind(loaded.meta, path) != "encoder")
    raise(ErrorCode::Malformed, path + ": not an encoder checkpoint");
  if (!loaded.meta.contains("encoder"))
    raise(ErrorCode::Malformed, path + ": metadata lacks the encoder config");
  const EncoderConfig cfg = detail::encoder_config_from_json(
      loaded.meta["encoder"], ErrorCode::Malformed, path);
  cfg.validate();
  Rng rng(0);
  EncoderParams params = EncoderParams::init(cfg, rng);
  assign_arrays(loaded, tensor_refs(params), path);
  return params;
}

void save_stage_checkpoint(const std::string& path, const StageModel& model) {
  json meta;
  meta["kind"] = "stage";
  meta["stage"] = sequence_kind_name(model.stage);
  meta["encoder"] = detail::encoder_config_json(model.encoder.config);
  meta["decoder"] = detail::decoder_config_json(model.decoder.config);
  auto& mutable_model = const_cast<StageModel&>(model);
  std::vector<TensorRef> refs = tensor_refs(mutable_model.encoder);
  const std::vector<TensorRef> dec = tensor_refs(mutable_model.decoder);
  refs.insert(refs.end(), dec.begin(), dec.end());
  write_file(path, serialize(meta, refs));
}

StageModel load_stage_checkpoint(const std::string& path) {
  Loaded loaded = read_checkpoint(path);
  if (meta_kind(loaded.meta, path) != "stage")
    raise(ErrorCode::Malformed, path + ": not a stage checkpoint");
  for (const char* key : {"stage", "encoder", "decoder"})
    if (!loaded.meta.contains(key))
      raise(ErrorCode::Malformed,
            path + ": metadata lacks \"" + std::string(key) + "\"");
  if (!loaded.meta["stage"].is_string())
    raise(ErrorCode::Malformed, path + ": stage must be a string");
  const auto stage =
      parse_sequence_kind(loaded.meta["stage"].get<std::string>());
  if (!stage)
    raise(ErrorCode::Malformed,
          path + ": unknown stage " + loaded.meta["stage"].get<std::string>());

  const EncoderConfig enc_cfg = detail::encoder_config_from_json(
      loaded.meta["encoder"], ErrorCode::Malformed, path);
  const DecoderConfig dec_cfg = detail::decoder_config_from_json(
      loaded.meta["decoder"], ErrorCode::Malformed, path);
  enc_cfg.validate();
  dec_cfg.validate();

  StageModel model;
  model.stage = *stage;
  Rng rng(0);
  model.encoder = EncoderParams::init(enc_cfg, rng);
  model.decoder = DecoderParams::init(dec_cfg, rng);
  std::vector<TensorRef> refs = tensor_refs(model.encoder);
  const std::vector<TensorRef> dec = tensor_refs(model.decoder);
  refs.insert(refs.end(), dec.begin(), dec.end());
  assign_arrays(loaded, refs, path);
  return model;
}

std::string checkpoint_kind(const std::string& path) {
  const Loaded loaded = read_checkpoint(path);
  return meta_kind(loaded.meta, path);
}

}  // namespace pianolm
