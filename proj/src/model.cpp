#include "convoher2/model.hpp"

#include <chrono>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "convoher2/error.hpp"

namespace convoher2 {
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kCheckpointMagic[8] = {'C', 'V', 'H', '2', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::string_view kind_name(LayerKind kind) { return kind == LayerKind::Dense ? "Dense" : "BatchNormalization"; }

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::None: return "linear";
    case Activation::Relu: return "relu";
    case Activation::Softmax: return "softmax";
  }
  return "linear";
}

Activation parse_activation(const std::string& s) {
  if (s == "linear") return Activation::None;
  if (s == "relu") return Activation::Relu;
  if (s == "softmax") return Activation::Softmax;
  throw Error(ErrorCode::CorruptCheckpoint, "unknown activation '" + s + "'");
}

std::string shape_string(int width) { return "(None, " + std::to_string(width) + ")"; }

json head_spec_json(const HeadSpec& spec) {
  json layers = json::array();
  for (const auto& l : spec.layers) {
    layers.push_back({{"kind", kind_name(l.kind)},
                      {"name", l.name},
                      {"in", l.in},
                      {"out", l.out},
                      {"activation", activation_name(l.activation)}});
  }
  return {{"input_dim", spec.input_dim}, {"layers", layers}};
}

HeadSpec head_spec_from_json(const json& j) {
  HeadSpec spec;
  spec.input_dim = j.at("input_dim").get<int>();
  for (const auto& l : j.at("layers")) {
    LayerSpec layer;
    const auto kind = l.at("kind").get<std::string>();
    if (kind == "Dense") {
      layer.kind = LayerKind::Dense;
    } else if (kind == "BatchNormalization") {
      layer.kind = LayerKind::BatchNorm;
    } else {
      throw Error(ErrorCode::CorruptCheckpoint, "unknown layer kind '" + kind + "'");
    }
    layer.name = l.at("name").get<std::string>();
    layer.in = l.at("in").get<int>();
    layer.out = l.at("out").get<int>();
    layer.activation = parse_activation(l.at("activation").get<std::string>());
    spec.layers.push_back(std::move(layer));
  }
  return spec;
}

json backbone_json(const BackboneSpec& b) {
  return {{"architecture_id", b.architecture_id}, {"pretrain_corpus", b.pretrain_corpus},
          {"feature_dim", b.feature_dim},         {"frozen", b.frozen},
          {"weights", b.weights.string()},        {"seed", b.seed}};
}

BackboneSpec backbone_from_json(const json& j) {
  BackboneSpec b;
  b.architecture_id = j.at("architecture_id").get<std::string>();
  b.pretrain_corpus = j.at("pretrain_corpus").get<std::string>();
  b.feature_dim = j.at("feature_dim").get<int>();
  b.frozen = j.at("frozen").get<bool>();
  b.weights = j.at("weights").get<std::string>();
  b.seed = j.at("seed").get<std::uint64_t>();
  return b;
}

json sidecar_json(const CheckpointSidecar& s) {
  return {{"epoch", s.epoch},
          {"monitored_loss", s.monitored_loss},
          {"config_hash", s.config_hash},
          {"modality", s.modality ? json(std::string(to_string(*s.modality))) : json(nullptr)},
          {"created_at", s.created_at}};
}

template <typename T>
void append_raw(std::string& buf, const T& value) {
  buf.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T raw() {
    T value{};
    need(sizeof(T));
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view bytes(std::size_t n) {
    need(n);
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw Error(ErrorCode::CorruptCheckpoint, "checkpoint is truncated");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------

ModelHandle compose(std::shared_ptr<const Backbone> backbone, HeadSpec head, const HeadInit& init) {
  if (!backbone) throw Error(ErrorCode::MissingWeights, "no backbone supplied");
  backbone->spec().validate();
  if (backbone->spec().feature_dim != head.input_dim) {
    throw Error(ErrorCode::DimMismatch, "backbone emits " + std::to_string(backbone->spec().feature_dim) +
                                            " features but the head expects " + std::to_string(head.input_dim));
  }
  ModelHandle handle{std::move(backbone), Head<float>(std::move(head), init), {}};
  handle.metadata.created_at = current_timestamp();
  return handle;
}

ModelHandle compose(const BackboneSpec& backbone, HeadSpec head, const HeadInit& init) {
  backbone.validate();
  if (backbone.feature_dim != head.input_dim) {
    throw Error(ErrorCode::DimMismatch, "backbone width does not match head input width");
  }
  return compose(make_backbone(backbone), std::move(head), init);
}

ParamCount count_params(const BackboneSpec& backbone, const HeadSpec& head) {
  head.validate();
  ParamCount counts;
  const std::uint64_t backbone_params =
      backbone.architecture_id == "inception_v3"
          ? kInceptionV3Params
          : static_cast<std::uint64_t>(backbone.feature_dim) * StubBackbone::kPoolGrid * StubBackbone::kPoolGrid *
                kChannels;
  const std::string backbone_name =
      backbone.architecture_id == "inception_v3" ? "inception_v3 (Functional)" : "stub_projection (Functional)";
  counts.layers.push_back({backbone_name, shape_string(backbone.feature_dim), backbone_params, 0});
  counts.layers.push_back({"flatten (Flatten)", shape_string(backbone.feature_dim), 0, 0});
  for (const auto& l : head.layers) {
    LayerCount row;
    row.layer_name = l.name + " (" + std::string(kind_name(l.kind)) + ")";
    row.output_shape = shape_string(l.out);
    if (l.kind == LayerKind::Dense) {
      row.param_count = static_cast<std::uint64_t>(l.in) * l.out + l.out;
      row.trainable_count = row.param_count;
    } else {
      row.param_count = 4ULL * l.out;
      row.trainable_count = 2ULL * l.out;
    }
    counts.layers.push_back(std::move(row));
  }
  for (const auto& row : counts.layers) {
    counts.total += row.param_count;
    counts.trainable += row.trainable_count;
  }
  counts.non_trainable = counts.total - counts.trainable;
  return counts;
}

ParamCount count_params(const ModelHandle& handle) {
  ParamCount counts = count_params(handle.backbone->spec(), handle.head.spec());
  // Cross-check the analytic rows against the arrays actually held.
  std::uint64_t held = 0;
  std::uint64_t held_trainable = 0;
  for (const auto& p : handle.head.params()) {
    held += static_cast<std::uint64_t>(p.value.size());
    if (p.trainable) held_trainable += static_cast<std::uint64_t>(p.value.size());
  }
  counts.layers.front().param_count = handle.backbone->param_count();
  counts.total = handle.backbone->param_count() + held;
  counts.trainable = held_trainable;
  counts.non_trainable = counts.total - counts.trainable;
  return counts;
}

std::string format_summary(const ParamCount& counts) {
  std::ostringstream out;
  auto with_commas = [](std::uint64_t v) {
    std::string s = std::to_string(v);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
    return s;
  };
  out << std::left << std::setw(46) << "Layer (type)" << std::setw(16) << "Output Shape" << "Param #\n";
  for (const auto& row : counts.layers) {
    out << std::left << std::setw(46) << row.layer_name << std::setw(16) << row.output_shape << row.param_count
        << '\n';
  }
  out << "Total params: " << with_commas(counts.total) << '\n'
      << "Trainable params: " << with_commas(counts.trainable) << '\n'
      << "Non-trainable params: " << with_commas(counts.non_trainable) << '\n';
  return out.str();
}

Eigen::MatrixXf extract_features(const ModelHandle& handle, const Batch& batch) {
  return handle.backbone->extract(batch).transpose();
}

Eigen::MatrixXf forward_features(const ModelHandle& handle, const Eigen::MatrixXf& features, Mode mode) {
  return handle.head.forward(features, mode).transpose();
}

Eigen::MatrixXf forward(const ModelHandle& handle, const Batch& batch, Mode mode) {
  return forward_features(handle, handle.backbone->extract(batch), mode);
}

// ---------------------------------------------------------------------------

fs::path sidecar_path(const fs::path& checkpoint) { return fs::path(checkpoint.string() + ".meta.json"); }

std::string current_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm utc{};
  gmtime_r(&now, &utc);
  std::ostringstream out;
  out << std::put_time(&utc, "%Y-%m-%dT%H:%M:%SZ");
  return out.str();
}

void save_checkpoint(const ModelHandle& handle, const fs::path& path) {
  CheckpointSidecar sidecar;
  sidecar.config_hash = handle.metadata.config_hash;
  sidecar.modality = handle.metadata.modality;
  save_checkpoint(handle, path, sidecar);
}

void save_checkpoint(const ModelHandle& handle, const fs::path& path, const CheckpointSidecar& sidecar_in) {
  CheckpointSidecar sidecar = sidecar_in;
  if (sidecar.created_at.empty()) sidecar.created_at = current_timestamp();

  const json header = {
      {"head", head_spec_json(handle.head.spec())},
      {"bn_epsilon", handle.head.bn_epsilon()},
      {"bn_momentum", handle.head.bn_momentum()},
      {"backbone", backbone_json(handle.backbone->spec())},
      {"metadata",
       {{"config_hash", handle.metadata.config_hash},
        {"created_at", handle.metadata.created_at},
        {"modality", handle.metadata.modality ? json(std::string(to_string(*handle.metadata.modality)))
                                              : json(nullptr)}}},
  };
  const std::string header_text = header.dump();

  std::string buf(kCheckpointMagic, sizeof(kCheckpointMagic));
  append_raw(buf, kCheckpointVersion);
  append_raw(buf, static_cast<std::uint32_t>(header_text.size()));
  buf += header_text;
  append_raw(buf, static_cast<std::uint32_t>(handle.head.params().size()));
  for (const auto& p : handle.head.params()) {
    append_raw(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    append_raw(buf, static_cast<std::uint32_t>(p.value.rows()));
    append_raw(buf, static_cast<std::uint32_t>(p.value.cols()));
    buf.append(reinterpret_cast<const char*>(p.value.data()), static_cast<std::size_t>(p.value.size()) * sizeof(float));
  }
  append_raw(buf, fnv1a64(buf.data(), buf.size()));

  // Write to a temporary name first so an interrupted save never clobbers
  // the previous good checkpoint.
  const fs::path tmp = fs::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoError, "cannot write checkpoint " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error(ErrorCode::IoError, "failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);

  std::ofstream meta(sidecar_path(path), std::ios::trunc);
  if (!meta) throw Error(ErrorCode::IoError, "cannot write sidecar for " + path.string());
  meta << sidecar_json(sidecar).dump(2) << '\n';
}

ModelHandle load_checkpoint(const fs::path& path, const std::optional<HeadSpec>& expected,
                            std::shared_ptr<const Backbone> backbone) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot read checkpoint " + path.string());
  const std::string buf{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};

  constexpr std::size_t kTrailer = sizeof(std::uint64_t);
  if (buf.size() < sizeof(kCheckpointMagic) + kTrailer ||
      std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + " is not a checkpoint");
  }
  std::uint64_t stored_hash = 0;
  std::memcpy(&stored_hash, buf.data() + buf.size() - kTrailer, kTrailer);
  if (fnv1a64(buf.data(), buf.size() - kTrailer) != stored_hash) {
    throw Error(ErrorCode::CorruptCheckpoint, path.string() + " failed its integrity check");
  }

  Reader r(std::string_view(buf).substr(0, buf.size() - kTrailer));
  r.bytes(sizeof(kCheckpointMagic));
  if (r.raw<std::uint32_t>() != kCheckpointVersion) {
    throw Error(ErrorCode::CorruptCheckpoint, "unsupported checkpoint version");
  }
  json header;
  try {
    header = json::parse(r.bytes(r.raw<std::uint32_t>()));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("bad checkpoint header: ") + e.what());
  }

  HeadSpec spec;
  BackboneSpec backbone_spec;
  double eps = 0.0;
  double momentum = 0.0;
  ModelMetadata metadata;
  try {
    spec = head_spec_from_json(header.at("head"));
    backbone_spec = backbone_from_json(header.at("backbone"));
    eps = header.at("bn_epsilon").get<double>();
    momentum = header.at("bn_momentum").get<double>();
    const auto& m = header.at("metadata");
    metadata.config_hash = m.at("config_hash").get<std::string>();
    metadata.created_at = m.at("created_at").get<std::string>();
    if (!m.at("modality").is_null()) metadata.modality = parse_modality(m.at("modality").get<std::string>());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("bad checkpoint header: ") + e.what());
  }
  if (expected && !(*expected == spec)) {
    throw Error(ErrorCode::TopologyMismatch, "checkpoint head topology differs from the requested head");
  }

  const auto n_arrays = r.raw<std::uint32_t>();
  std::vector<Head<float>::Param> params;
  params.reserve(n_arrays);
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    Head<float>::Param p;
    p.name = std::string(r.bytes(r.raw<std::uint32_t>()));
    const auto rows = r.raw<std::uint32_t>();
    const auto cols = r.raw<std::uint32_t>();
    const auto payload = r.bytes(static_cast<std::size_t>(rows) * cols * sizeof(float));
    p.value.resize(rows, cols);
    std::memcpy(p.value.data(), payload.data(), payload.size());
    params.push_back(std::move(p));
  }
  if (!r.done()) throw Error(ErrorCode::CorruptCheckpoint, "trailing bytes in checkpoint");

  ModelHandle handle;
  handle.backbone = backbone ? std::move(backbone) : make_backbone(backbone_spec);
  if (handle.backbone->spec().feature_dim != spec.input_dim) {
    throw Error(ErrorCode::DimMismatch, "backbone width does not match the stored head");
  }
  handle.head = Head<float>::from_params(std::move(spec), eps, momentum, std::move(params));
  handle.metadata = std::move(metadata);
  return handle;
}

CheckpointSidecar read_sidecar(const fs::path& checkpoint) {
  std::ifstream in(sidecar_path(checkpoint));
  if (!in) throw Error(ErrorCode::IoError, "no sidecar for " + checkpoint.string());
  try {
    const json j = json::parse(in);
    CheckpointSidecar s;
    s.epoch = j.at("epoch").get<int>();
    s.monitored_loss = j.at("monitored_loss").get<double>();
    s.config_hash = j.at("config_hash").get<std::string>();
    if (!j.at("modality").is_null()) s.modality = parse_modality(j.at("modality").get<std::string>());
    s.created_at = j.at("created_at").get<std::string>();
    return s;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptCheckpoint, std::string("bad sidecar: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

std::vector<NamedArray> export_flat(const Head<float>& head) {
  std::vector<NamedArray> out;
  for (const auto& p : head.params()) {
    NamedArray a;
    a.name = p.name;
    const bool is_kernel = p.name.size() > 7 && p.name.ends_with("/kernel");
    if (is_kernel) {
      a.shape = {static_cast<std::size_t>(p.value.cols()), static_cast<std::size_t>(p.value.rows())};
    } else {
      a.shape = {static_cast<std::size_t>(p.value.size())};
    }
    // Column-major out x in is row-major in x out.
    a.data.assign(p.value.data(), p.value.data() + p.value.size());
    out.push_back(std::move(a));
  }
  return out;
}

void write_flat_export(const Head<float>& head, const fs::path& path) {
  json arrays = json::array();
  for (const auto& a : export_flat(head)) arrays.push_back({{"name", a.name}, {"shape", a.shape}, {"data", a.data}});
  const json doc = {{"format", "convoher2-flat-weights"},
                    {"version", 1},
                    {"head", head_spec_json(head.spec())},
                    {"bn_epsilon", head.bn_epsilon()},
                    {"bn_momentum", head.bn_momentum()},
                    {"arrays", arrays}};
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << doc.dump() << '\n';
}

std::vector<NamedArray> read_flat_export(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  try {
    const json doc = json::parse(in);
    std::vector<NamedArray> out;
    for (const auto& a : doc.at("arrays")) {
      out.push_back({a.at("name").get<std::string>(), a.at("shape").get<std::vector<std::size_t>>(),
                     a.at("data").get<std::vector<double>>()});
    }
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::DecodeError, std::string("bad flat export: ") + e.what());
  }
}

std::vector<oracle::Layer> oracle_layers(const HeadSpec& spec, const std::vector<NamedArray>& arrays,
                                         double bn_epsilon, double bn_momentum) {
  std::size_t cursor = 0;
  auto take = [&](const std::string& name, std::size_t size) -> const std::vector<double>& {
    if (cursor >= arrays.size() || arrays[cursor].name != name || arrays[cursor].data.size() != size) {
      throw Error(ErrorCode::TopologyMismatch, "flat export does not provide '" + name + "'");
    }
    return arrays[cursor++].data;
  };
  std::vector<oracle::Layer> layers;
  for (const auto& l : spec.layers) {
    oracle::Layer layer;
    const auto width = static_cast<std::size_t>(l.out);
    if (l.kind == LayerKind::Dense) {
      layer.kind = oracle::Layer::Kind::Dense;
      layer.dense.in = l.in;
      layer.dense.out = l.out;
      layer.dense.relu = l.activation == Activation::Relu;
      const auto& kernel = take(l.name + "/kernel", static_cast<std::size_t>(l.in) * width);
      // Export is row-major [in, out]; the oracle wants out x in.
      layer.dense.weight.resize(kernel.size());
      for (int i = 0; i < l.in; ++i) {
        for (int o = 0; o < l.out; ++o) {
          layer.dense.weight[static_cast<std::size_t>(o) * l.in + i] = kernel[static_cast<std::size_t>(i) * width + o];
        }
      }
      layer.dense.bias = take(l.name + "/bias", width);
    } else {
      layer.kind = oracle::Layer::Kind::BatchNorm;
      const auto& gamma = take(l.name + "/gamma", width);
      const auto& beta = take(l.name + "/beta", width);
      const auto& mean = take(l.name + "/moving_mean", width);
      const auto& var = take(l.name + "/moving_variance", width);
      for (std::size_t j = 0; j < width; ++j) {
        layer.bn.features.push_back({gamma[j], beta[j], bn_epsilon, bn_momentum, mean[j], var[j]});
      }
    }
    layers.push_back(std::move(layer));
  }
  return layers;
}

}  // namespace convoher2
