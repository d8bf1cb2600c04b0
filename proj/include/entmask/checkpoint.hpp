#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "entmask/errors.hpp"
#include "entmask/model.hpp"

namespace entmask {

inline void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},
                     {"hidden_dim", c.hidden_dim},
                     {"num_heads", c.num_heads},
                     {"ffn_dim", c.ffn_dim},
                     {"vocab_size", c.vocab_size},
                     {"max_position", c.max_position},
                     {"dropout_rate", c.dropout_rate},
                     {"tie_embeddings", c.tie_embeddings},
                     {"activation", c.activation}};
}

inline void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("num_heads").get_to(c.num_heads);
  j.at("ffn_dim").get_to(c.ffn_dim);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_position").get_to(c.max_position);
  j.at("dropout_rate").get_to(c.dropout_rate);
  j.at("tie_embeddings").get_to(c.tie_embeddings);
  j.at("activation").get_to(c.activation);
}

namespace detail {

constexpr char kCheckpointMagic[8] = {'E', 'N', 'T', 'M', 'A', 'S', 'K', '\0'};
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("truncated checkpoint while reading " + what);
  return v;
}

struct ParamRecord {
  std::string name;
  std::vector<int> dims;
  std::vector<float> data;
};

inline std::pair<EncoderConfig, std::vector<ParamRecord>> read_checkpoint_file(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic): " + path);
  }
  const uint32_t version = read_pod<uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const uint32_t cfg_len = read_pod<uint32_t>(in, "config length");
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  if (!in) throw CheckpointError("truncated checkpoint while reading config");
  EncoderConfig cfg;
  try {
    nlohmann::json::parse(cfg_text).get_to(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint config: ") + e.what());
  }
  const uint32_t count = read_pod<uint32_t>(in, "parameter count");
  std::vector<ParamRecord> records;
  records.reserve(count);
  for (uint32_t r = 0; r < count; ++r) {
    ParamRecord rec;
    const uint32_t name_len = read_pod<uint32_t>(in, "parameter name length");
    rec.name.resize(name_len);
    in.read(rec.name.data(), name_len);
    if (!in) throw CheckpointError("truncated checkpoint while reading parameter name");
    const uint32_t rank = read_pod<uint32_t>(in, "parameter rank");
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const int32_t dim = read_pod<int32_t>(in, "parameter shape");
      rec.dims.push_back(dim);
      numel *= dim;
    }
    if (numel < 0 || numel > (1LL << 32)) {
      throw CheckpointError("implausible parameter size in checkpoint for " + rec.name);
    }
    rec.data.resize(static_cast<size_t>(numel));
    in.read(reinterpret_cast<char*>(rec.data.data()),
            static_cast<std::streamsize>(sizeof(float) * rec.data.size()));
    if (!in) throw CheckpointError("truncated checkpoint while reading data of " + rec.name);
    records.push_back(std::move(rec));
  }
  return {cfg, std::move(records)};
}

inline void fill_params(EncoderModel& model, const std::vector<ParamRecord>& records,
                        const std::string& path) {
  size_t used = 0;
  for (const auto& [name, t] : model.params()) {
    const ParamRecord* found = nullptr;
    for (const ParamRecord& rec : records) {
      if (rec.name == name) {
        found = &rec;
        break;
      }
    }
    if (!found) {
      throw CheckpointError("checkpoint " + path + " is missing parameter '" + name + "'");
    }
    if (found->dims != t.dims()) {
      throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                       shape_str(found->dims) + " but the model expects " +
                       shape_str(t.dims()));
    }
    t.values() = found->data;
    ++used;
  }
  if (used != records.size()) {
    throw CheckpointError("checkpoint " + path + " contains " +
                          std::to_string(records.size() - used) + " unknown parameter(s)");
  }
}

}  // namespace detail

inline void save_checkpoint(const EncoderModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  out.write(detail::kCheckpointMagic, 8);
  detail::write_pod(out, detail::kCheckpointVersion);
  const std::string cfg_text = nlohmann::json(model.config()).dump();
  detail::write_pod(out, static_cast<uint32_t>(cfg_text.size()));
  out.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
  detail::write_pod(out, static_cast<uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    detail::write_pod(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<uint32_t>(t.dims().size()));
    for (int d : t.dims()) detail::write_pod(out, static_cast<int32_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.numel())));
  }
  if (!out) throw CheckpointError("write failure for checkpoint: " + path);
}

// Rebuilds the model exactly as stored, classifier head included.
inline EncoderModel load_checkpoint(const std::string& path) {
  auto [cfg, records] = detail::read_checkpoint_file(path);
  EncoderModel model(cfg, 0);
  for (const detail::ParamRecord& rec : records) {
    if (rec.name == "classifier.w" && rec.dims.size() == 2) {
      model.attach_classifier(rec.dims[1], 0);
      break;
    }
  }
  detail::fill_params(model, records, path);
  return model;
}

// Loads into an existing model, enforcing its shapes; mismatched presets
// surface as shape errors naming the offending parameter.
inline void load_checkpoint_into(EncoderModel& model, const std::string& path) {
  auto [cfg, records] = detail::read_checkpoint_file(path);
  (void)cfg;
  detail::fill_params(model, records, path);
}

}  // namespace entmask
