#pragma once

// Shared encoder, normalized-prototype identity head and per-group attribute
// heads. Suppress-mode heads read the embedding through gradient reversal.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "attrface/binary_io.hpp"
#include "attrface/groups.hpp"
#include "attrface/rng.hpp"
#include "attrface/tensor.hpp"

namespace attrface {

struct EncoderConfig {
  std::size_t input_dim = 128;
  std::vector<std::size_t> hidden_dims = {256, 128};
  std::size_t embedding_dim = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (input_dim == 0) throw ConfigError("input_dim", "must be positive");
    if (hidden_dims.empty()) throw ConfigError("hidden_dims", "must be non-empty");
    for (auto h : hidden_dims) {
      if (h == 0) throw ConfigError("hidden_dims", "entries must be positive");
    }
    if (embedding_dim < 8) throw ConfigError("embedding_dim", "must be at least 8");
  }
};

/// Which dataset attribute columns a group head predicts, and how it is wired.
struct HeadSpec {
  Group group;
  GroupMode mode;
  std::vector<std::size_t> attribute_columns;
};

template <std::floating_point T>
struct AttributeHead {
  Group group;
  GroupMode mode;
  std::vector<std::size_t> attribute_columns;
  Parameter<T> weight;  // [embedding_dim, group_size]
  Parameter<T> bias;    // [group_size]

  std::size_t size() const { return attribute_columns.size(); }
};

template <std::floating_point T>
struct IdentityHead {
  Parameter<T> prototypes;  // [num_identities, embedding_dim]

  std::size_t num_identities() const { return prototypes.tensor.shape()[0]; }
};

namespace detail {

template <std::floating_point T>
std::vector<T> uniform_init(std::size_t count, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> out(count);
  for (auto& v : out) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

}  // namespace detail

template <std::floating_point T>
class MultiTaskModel {
 public:
  struct Layer {
    Parameter<T> weight;  // [in, out]
    Parameter<T> bias;    // [out]
  };

  MultiTaskModel(EncoderConfig config, std::size_t num_identities, std::vector<HeadSpec> heads)
      : config_(std::move(config)) {
    config_.validate();
    if (num_identities < 2) throw ConfigError("num_identities", "identity head needs at least two classes");
    std::size_t in = config_.input_dim;
    std::vector<std::size_t> widths = config_.hidden_dims;
    widths.push_back(config_.embedding_dim);
    for (std::size_t i = 0; i < widths.size(); ++i) {
      const std::size_t out = widths[i];
      const std::string base = "encoder.layer" + std::to_string(i);
      const auto seed = derive_seed(config_.seed, base);
      layers_.push_back(Layer{
          Parameter<T>(base + ".weight", {in, out}, detail::uniform_init<T>(in * out, in, derive_seed(seed, "w"))),
          Parameter<T>(base + ".bias", {out}, detail::uniform_init<T>(out, in, derive_seed(seed, "b")))});
      in = out;
    }
    const std::size_t d = config_.embedding_dim;
    identity_.prototypes =
        Parameter<T>("identity.prototypes", {num_identities, d},
                     detail::uniform_init<T>(num_identities * d, d, derive_seed(config_.seed, "identity.prototypes")));
    for (auto& spec : heads) add_head(std::move(spec));
  }

  const EncoderConfig& config() const { return config_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }
  const IdentityHead<T>& identity_head() const { return identity_; }
  IdentityHead<T>& identity_head() { return identity_; }
  const std::vector<AttributeHead<T>>& heads() const { return heads_; }
  std::vector<AttributeHead<T>>& heads() { return heads_; }

  const AttributeHead<T>* find_head(Group g) const {
    for (const auto& h : heads_) {
      if (h.group == g) return &h;
    }
    return nullptr;
  }
  AttributeHead<T>* find_head(Group g) {
    return const_cast<AttributeHead<T>*>(std::as_const(*this).find_head(g));
  }

  GroupModeAssignment modes() const {
    GroupModeAssignment out;
    for (const auto& h : heads_) out.set(h.group, h.mode);
    return out;
  }

  /// z = f(x): affine layers with rectifier between them, none after the last.
  Tensor<T> encode(Tape<T>& tape, const Tensor<T>& x) const {
    if (x.rank() != 2 || x.shape()[1] != config_.input_dim) {
      throw ShapeError("encode: expected input [batch," + std::to_string(config_.input_dim) + "], got " +
                       shape_string(x.shape()));
    }
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = tape.add(tape.matmul(h, layers_[i].weight.tensor), layers_[i].bias.tensor);
      if (i + 1 < layers_.size()) h = tape.relu(h);
    }
    return h;
  }

  /// Cosine between each embedding row and each normalized prototype.
  Tensor<T> identity_logits(Tape<T>& tape, const Tensor<T>& z) const {
    auto zn = tape.l2_normalize_rows(z);
    auto pn = tape.l2_normalize_rows(identity_.prototypes.tensor);
    return tape.matmul(zn, tape.transpose(pn));
  }

  Tensor<T> attribute_logits(Tape<T>& tape, const Tensor<T>& z, Group g) const {
    const auto* head = find_head(g);
    if (head == nullptr) throw ConfigError("modes", "no attribute head bound to group " + std::string(group_name(g)));
    const Tensor<T> input = head->mode == GroupMode::suppress ? tape.grl(z, T(1)) : z;
    return tape.add(tape.matmul(input, head->weight.tensor), head->bias.tensor);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    out.push_back(&identity_.prototypes);
    for (auto& h : heads_) {
      out.push_back(&h.weight);
      out.push_back(&h.bias);
    }
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    std::vector<const Parameter<T>*> out;
    for (auto* p : const_cast<MultiTaskModel*>(this)->parameters()) out.push_back(p);
    return out;
  }

  std::vector<Parameter<T>*> encoder_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->tensor.zero_grad();
  }

  /// Embeddings without recording a graph. Rows of the result follow `x`.
  std::vector<T> embed(std::span<const T> x, std::size_t rows) const {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    auto z = encode(tape, Tensor<T>({rows, config_.input_dim}, std::vector<T>(x.begin(), x.end())));
    return {z.values().begin(), z.values().end()};
  }

  // Header metadata stored in checkpoints.
  nlohmann::json metadata() const {
    nlohmann::json heads = nlohmann::json::array();
    for (const auto& h : heads_) {
      heads.push_back({{"group", group_name(h.group)}, {"mode", mode_name(h.mode)}, {"columns", h.attribute_columns}});
    }
    return {{"input_dim", config_.input_dim},
            {"hidden_dims", config_.hidden_dims},
            {"embedding_dim", config_.embedding_dim},
            {"seed", config_.seed},
            {"num_identities", identity_.num_identities()},
            {"modes", modes().label()},
            {"heads", heads}};
  }

 private:
  void add_head(HeadSpec spec) {
    if (spec.mode == GroupMode::off) return;
    if (find_head(spec.group) != nullptr) {
      throw ConfigError("modes", "group " + std::string(group_name(spec.group)) + " bound to more than one head");
    }
    if (spec.attribute_columns.empty()) {
      throw ConfigError("modes", "group " + std::string(group_name(spec.group)) + " has no attributes");
    }
    const std::size_t d = config_.embedding_dim, k = spec.attribute_columns.size();
    const std::string base = "head." + std::string(group_name(spec.group));
    const auto seed = derive_seed(config_.seed, base);
    heads_.push_back(AttributeHead<T>{
        spec.group, spec.mode, std::move(spec.attribute_columns),
        Parameter<T>(base + ".weight", {d, k}, detail::uniform_init<T>(d * k, d, derive_seed(seed, "w"))),
        Parameter<T>(base + ".bias", {k}, detail::uniform_init<T>(k, d, derive_seed(seed, "b")))});
  }

  EncoderConfig config_;
  std::vector<Layer> layers_;
  IdentityHead<T> identity_;
  std::vector<AttributeHead<T>> heads_;
};

// ---------------------------------------------------------------------------
// Checkpoint container.
//
//   magic "AFCKPT\0\0" | u32 version | u64 len + JSON metadata | u64 count
//   count x { u64 name_len | name | u64 rank | rank x u64 dim | f64 values }
//
// All integers and floats little-endian.

inline constexpr char kCheckpointMagic[8] = {'A', 'F', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json metadata;
  std::string tag;
};

template <std::floating_point T>
std::vector<unsigned char> serialize_checkpoint(const MultiTaskModel<T>& model, const std::string& tag) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  auto meta = model.metadata();
  meta["tag"] = tag;
  w.string(meta.dump());
  const auto params = model.parameters();
  w.u64(params.size());
  for (const auto* p : params) {
    w.string(p->name);
    const auto& shape = p->tensor.shape();
    w.u64(shape.size());
    for (auto d : shape) w.u64(d);
    for (T v : p->tensor.values()) w.f64(static_cast<double>(v));
  }
  return w.buffer();
}

template <std::floating_point T>
void save_checkpoint(const MultiTaskModel<T>& model, const std::string& path, const std::string& tag = "") {
  io::write_file(path, serialize_checkpoint(model, tag));
}

inline std::vector<HeadSpec> head_specs_from_metadata(const nlohmann::json& meta) {
  std::vector<HeadSpec> out;
  for (const auto& h : meta.at("heads")) {
    auto g = group_from_name(h.at("group").get<std::string>());
    auto m = mode_from_name(h.at("mode").get<std::string>());
    if (!g || !m) throw FormatError("checkpoint: unknown head binding " + h.dump());
    out.push_back(HeadSpec{*g, *m, h.at("columns").get<std::vector<std::size_t>>()});
  }
  return out;
}

template <std::floating_point T>
MultiTaskModel<T> deserialize_checkpoint(std::vector<unsigned char> bytes, const std::string& context,
                                         std::string* tag_out = nullptr) {
  io::ByteReader r(std::move(bytes), context);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kCheckpointMagic)) throw FormatError(context + ": not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(context + ": unsupported checkpoint version " + std::to_string(version));
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": corrupt metadata: " + e.what());
  }
  EncoderConfig cfg;
  std::size_t num_identities = 0;
  std::vector<HeadSpec> heads;
  try {
    cfg.input_dim = meta.at("input_dim");
    cfg.hidden_dims = meta.at("hidden_dims").get<std::vector<std::size_t>>();
    cfg.embedding_dim = meta.at("embedding_dim");
    cfg.seed = meta.at("seed");
    num_identities = meta.at("num_identities");
    heads = head_specs_from_metadata(meta);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": incomplete metadata: " + e.what());
  }
  if (tag_out) *tag_out = meta.value("tag", "");
  MultiTaskModel<T> model(cfg, num_identities, std::move(heads));
  auto params = model.parameters();
  const auto count = r.u64();
  if (count != params.size()) {
    throw IntegrityError(context + ": metadata implies " + std::to_string(params.size()) + " parameters, file has " +
                         std::to_string(count));
  }
  for (auto* p : params) {
    const auto name = r.string();
    if (name != p->name) throw IntegrityError(context + ": expected parameter '" + p->name + "', found '" + name + "'");
    Shape shape(r.u64());
    for (auto& d : shape) d = r.u64();
    if (shape != p->tensor.shape()) {
      throw IntegrityError(context + ": parameter '" + name + "' has shape " + shape_string(shape) + ", expected " +
                           shape_string(p->tensor.shape()));
    }
    for (auto& v : p->tensor.mutable_values()) v = static_cast<T>(r.f64());
  }
  if (r.remaining() != 0) {
    throw IntegrityError(context + ": " + std::to_string(r.remaining()) + " trailing bytes after last record");
  }
  return model;
}

template <std::floating_point T>
MultiTaskModel<T> load_checkpoint(const std::string& path, std::string* tag_out = nullptr) {
  return deserialize_checkpoint<T>(io::read_file(path), path, tag_out);
}

}  // namespace attrface
