#include "fraudseq/model_io.hpp"

#include <algorithm>
#include <numeric>

#include "fraudseq/binary_io.hpp"

namespace fraudseq {

namespace {

constexpr std::uint32_t kModelMagic = 0x4d515346;  // "FSQM"
constexpr std::uint32_t kModelVersion = 1;

template <class Scalar>
constexpr const char* dtype_name() {
  return sizeof(Scalar) == 4 ? "f32" : "f64";
}

nlohmann::json read_manifest(binary::Reader& r) {
  if (r.get<std::uint32_t>() != kModelMagic) fail(ErrorCode::kCorruptModelFile, "bad magic");
  if (r.get<std::uint32_t>() != kModelVersion) fail(ErrorCode::kCorruptModelFile, "unsupported version");
  const auto len = r.get<std::uint32_t>();
  const auto raw = r.get_bytes(len);
  try {
    return nlohmann::json::parse(raw.begin(), raw.end());
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::kCorruptModelFile, std::string("manifest: ") + ex.what());
  }
}

}  // namespace

void ModelConfig::check() const {
  if (embed_dims.size() != cat_cardinalities.size()) {
    fail(ErrorCode::kInvalidConfig, "need one embedding dim per categorical");
  }
  auto positive = [](int v) { return v >= 1; };
  if (!std::all_of(embed_dims.begin(), embed_dims.end(), positive) ||
      !std::all_of(cat_cardinalities.begin(), cat_cardinalities.end(), positive) || input_width < 1 ||
      gru_widths.empty() || !std::all_of(gru_widths.begin(), gru_widths.end(), positive) ||
      !std::all_of(classifier_widths.begin(), classifier_widths.end(), positive)) {
    fail(ErrorCode::kInvalidConfig, "model widths must be >= 1 and at least one GRU layer is required");
  }
}

std::size_t ModelConfig::concat_dim() const {
  return dense_dim + static_cast<std::size_t>(std::accumulate(embed_dims.begin(), embed_dims.end(), 0));
}

int ModelConfig::state_width() const { return std::accumulate(gru_widths.begin(), gru_widths.end(), 0); }

nlohmann::json ModelConfig::to_json() const {
  return {{"dense_dim", dense_dim},
          {"cat_cardinalities", cat_cardinalities},
          {"embed_dims", embed_dims},
          {"input_width", input_width},
          {"gru_widths", gru_widths},
          {"classifier_widths", classifier_widths},
          {"precision", precision == Precision::kF32 ? "f32" : "f64"},
          {"schema_hash", schema_hash}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.dense_dim = j.at("dense_dim").get<std::size_t>();
    c.cat_cardinalities = j.at("cat_cardinalities").get<std::vector<int>>();
    c.embed_dims = j.at("embed_dims").get<std::vector<int>>();
    c.input_width = j.at("input_width").get<int>();
    c.gru_widths = j.at("gru_widths").get<std::vector<int>>();
    c.classifier_widths = j.at("classifier_widths").get<std::vector<int>>();
    c.precision = j.value("precision", std::string("f32")) == "f64" ? Precision::kF64 : Precision::kF32;
    c.schema_hash = j.value("schema_hash", std::uint64_t{0});
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::kInvalidConfig, std::string("model config: ") + ex.what());
  }
  c.check();
  return c;
}

template <class Scalar>
std::vector<std::uint8_t> serialize_params(const ModelParams<Scalar>& p) {
  nlohmann::json tensors = nlohmann::json::array();
  auto& mp = const_cast<ModelParams<Scalar>&>(p);
  visit_tensors(
      [&](const std::string& name, const auto& t) {
        tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}}, {"dtype", dtype_name<Scalar>()}});
      },
      mp);
  nlohmann::json manifest = {{"config", p.config.to_json()}, {"tensors", tensors}};
  const std::string text = manifest.dump();

  binary::Writer w;
  w.put(kModelMagic);
  w.put(kModelVersion);
  w.put_string(text);
  visit_tensors(
      [&](const std::string&, const auto& t) {
        // row-major on disk, Eigen is column-major in memory
        for (Eigen::Index i = 0; i < t.rows(); ++i)
          for (Eigen::Index j = 0; j < t.cols(); ++j) w.put(t(i, j));
      },
      mp);
  return std::move(w.bytes());
}

template <class Scalar>
ModelParams<Scalar> deserialize_params(std::span<const std::uint8_t> bytes, const ModelConfig* expected) {
  binary::Reader r(bytes, ErrorCode::kCorruptModelFile);
  const auto manifest = read_manifest(r);
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(manifest.at("config"));
  } catch (const Error& e) {
    fail(ErrorCode::kCorruptModelFile, e.what());
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::kCorruptModelFile, ex.what());
  }
  if (expected && !(*expected == cfg)) fail(ErrorCode::kShapeMismatch, "model file config differs from expected");
  auto p = ModelParams<Scalar>::zeros(cfg);
  const auto& tensors = manifest.at("tensors");
  std::size_t k = 0;
  visit_tensors(
      [&](const std::string& name, auto& t) {
        if (k >= tensors.size()) fail(ErrorCode::kCorruptModelFile, "manifest lists too few tensors");
        const auto& d = tensors[k++];
        if (d.at("name") != name || d.at("shape")[0] != t.rows() || d.at("shape")[1] != t.cols()) {
          fail(ErrorCode::kShapeMismatch, "tensor " + name + " does not match config");
        }
        if (d.at("dtype") != dtype_name<Scalar>()) fail(ErrorCode::kShapeMismatch, "tensor dtype differs");
        for (Eigen::Index i = 0; i < t.rows(); ++i)
          for (Eigen::Index j = 0; j < t.cols(); ++j) t(i, j) = r.template get<Scalar>();
      },
      p);
  if (k != tensors.size()) fail(ErrorCode::kCorruptModelFile, "manifest lists extra tensors");
  if (r.remaining() != 0) fail(ErrorCode::kCorruptModelFile, "trailing bytes");
  return p;
}

template <class Scalar>
void save_params(const ModelParams<Scalar>& p, const std::string& path) {
  binary::write_file_atomic(path, serialize_params(p));
}

template <class Scalar>
ModelParams<Scalar> load_params(const std::string& path, const ModelConfig* expected) {
  return deserialize_params<Scalar>(binary::read_file(path), expected);
}

ModelConfig peek_model_config(const std::string& path) {
  const auto bytes = binary::read_file(path);
  binary::Reader r(bytes, ErrorCode::kCorruptModelFile);
  const auto manifest = read_manifest(r);
  try {
    return ModelConfig::from_json(manifest.at("config"));
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCode::kCorruptModelFile, ex.what());
  }
}

template <class Scalar>
std::vector<std::uint8_t> encode_state(const EntityState<Scalar>& s, std::uint64_t schema_hash) {
  binary::Writer w;
  w.put(schema_hash);
  w.put(static_cast<std::uint8_t>(sizeof(Scalar)));
  w.put(static_cast<std::uint8_t>(s.last_event_ts.has_value()));
  w.put(s.last_event_ts.value_or(0));
  w.put(static_cast<std::uint32_t>(s.layers.size()));
  for (const auto& layer : s.layers) {
    w.put(static_cast<std::uint32_t>(layer.size()));
    w.put_array(std::span<const Scalar>(layer.data(), static_cast<std::size_t>(layer.size())));
  }
  return std::move(w.bytes());
}

template <class Scalar>
EntityState<Scalar> decode_state(std::span<const std::uint8_t> bytes, std::uint64_t schema_hash) {
  binary::Reader r(bytes, ErrorCode::kCorruptRecord);
  if (r.get<std::uint64_t>() != schema_hash) fail(ErrorCode::kShapeMismatch, "state was written for another schema");
  if (r.get<std::uint8_t>() != sizeof(Scalar)) fail(ErrorCode::kShapeMismatch, "state precision differs");
  EntityState<Scalar> s;
  const bool has_ts = r.get<std::uint8_t>() != 0;
  const auto ts = r.get<TimestampMs>();
  if (has_ts) s.last_event_ts = ts;
  s.layers.resize(r.get<std::uint32_t>());
  for (auto& layer : s.layers) {
    layer.resize(r.get<std::uint32_t>());
    r.get_array(std::span<Scalar>(layer.data(), static_cast<std::size_t>(layer.size())));
  }
  return s;
}

std::optional<TimestampMs> peek_state_timestamp(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes, ErrorCode::kCorruptRecord);
  r.get<std::uint64_t>();
  r.get<std::uint8_t>();
  const bool has_ts = r.get<std::uint8_t>() != 0;
  const auto ts = r.get<TimestampMs>();
  if (!has_ts) return std::nullopt;
  return ts;
}

#define FRAUDSEQ_INSTANTIATE(S)                                                                              \
  template std::vector<std::uint8_t> serialize_params<S>(const ModelParams<S>&);                             \
  template ModelParams<S> deserialize_params<S>(std::span<const std::uint8_t>, const ModelConfig*);         \
  template void save_params<S>(const ModelParams<S>&, const std::string&);                                   \
  template ModelParams<S> load_params<S>(const std::string&, const ModelConfig*);                            \
  template std::vector<std::uint8_t> encode_state<S>(const EntityState<S>&, std::uint64_t);                  \
  template EntityState<S> decode_state<S>(std::span<const std::uint8_t>, std::uint64_t);

FRAUDSEQ_INSTANTIATE(float)
FRAUDSEQ_INSTANTIATE(double)
#undef FRAUDSEQ_INSTANTIATE

}  // namespace fraudseq
