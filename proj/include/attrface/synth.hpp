#pragma once

// Synthetic identities with grouped binary attributes.
//
// Identity i draws a latent u_i ~ N(0, I) and base bits b_ij ~ Bernoulli(p_j).
// Each image keeps b_ij with probability rho_j and otherwise redraws the bit,
// then renders x = A u_i + beta * B (2a - 1) + sigma * eps with A and B fixed
// per dataset seed.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "attrface/binary_io.hpp"
#include "attrface/groups.hpp"
#include "attrface/rng.hpp"

namespace attrface {

struct AttributeSpec {
  std::string name;
  Group group = Group::periocular;
  double base_rate = 0.5;           // p
  double identity_stability = 0.0;  // rho
};

/// Attribute list mirroring the five region groups: Periocular 5, Mouth 2,
/// Nose 2, Hair 8, Accessories 2. Hair is the most identity-stable group and
/// Accessories the least.
inline std::vector<AttributeSpec> default_attribute_specs() {
  auto group = [](Group g, double rho, std::vector<std::pair<const char*, double>> attrs) {
    std::vector<AttributeSpec> out;
    for (auto& [name, p] : attrs) out.push_back({name, g, p, rho});
    return out;
  };
  std::vector<AttributeSpec> all;
  for (auto part : {group(Group::periocular, 0.85,
                          {{"Bags Under Eyes", 0.30},
                           {"Bushy Eyebrows", 0.35},
                           {"Arched Eyebrows", 0.40},
                           {"No Eyewear", 0.50},
                           {"Eyeglasses", 0.45}}),
                    group(Group::mouth, 0.70, {{"Big Lips", 0.40}, {"Wearing Lipstick", 0.35}}),
                    group(Group::nose, 0.85, {{"Big Nose", 0.40}, {"Pointy Nose", 0.35}}),
                    group(Group::hair, 0.95,
                          {{"Bald", 0.25},
                           {"Wavy Hair", 0.35},
                           {"Receding Hairline", 0.30},
                           {"Bangs", 0.30},
                           {"Sideburns", 0.25},
                           {"Black Hair", 0.40},
                           {"Blond Hair", 0.30},
                           {"Gray Hair", 0.35}}),
                    group(Group::accessories, 0.20, {{"Wearing Hat", 0.40}, {"Wearing Earrings", 0.35}})}) {
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

struct DatasetConfig {
  std::size_t num_identities = 200;
  std::size_t images_per_identity = 30;
  std::size_t latent_dim = 32;
  std::size_t input_dim = 128;
  std::vector<AttributeSpec> attribute_specs = default_attribute_specs();
  double noise_sigma = 0.5;
  double attribute_signal_beta = 0.5;
  // Expected column norms of the rendering matrices A and B.
  double identity_signal_alpha = 0.5;
  double attribute_column_norm = 3.0;
  // Fraction of identities (highest indices) placed in the eval split.
  double eval_identity_fraction = 0.25;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_identities == 0) throw ConfigError("num_identities", "must be positive");
    if (images_per_identity == 0) throw ConfigError("images_per_identity", "must be positive");
    if (latent_dim == 0) throw ConfigError("latent_dim", "must be positive");
    if (input_dim < latent_dim) throw ConfigError("input_dim", "must be at least latent_dim");
    if (!(noise_sigma >= 0)) throw ConfigError("noise_sigma", "must be nonnegative");
    if (!(attribute_signal_beta >= 0)) throw ConfigError("attribute_signal_beta", "must be nonnegative");
    if (!(identity_signal_alpha >= 0)) throw ConfigError("identity_signal_alpha", "must be nonnegative");
    if (!(attribute_column_norm >= 0)) throw ConfigError("attribute_column_norm", "must be nonnegative");
    if (!(eval_identity_fraction >= 0 && eval_identity_fraction < 1)) {
      throw ConfigError("eval_identity_fraction", "must lie in [0, 1)");
    }
    for (std::size_t j = 0; j < attribute_specs.size(); ++j) {
      const auto& a = attribute_specs[j];
      const std::string prefix = "attribute_specs[" + std::to_string(j) + "].";
      if (a.name.empty()) throw ConfigError(prefix + "name", "must be non-empty");
      if (!(a.base_rate > 0 && a.base_rate < 1)) throw ConfigError(prefix + "base_rate", "must lie in (0, 1)");
      if (!(a.identity_stability >= 0 && a.identity_stability <= 1)) {
        throw ConfigError(prefix + "identity_stability", "must lie in [0, 1]");
      }
      for (std::size_t k = 0; k < j; ++k) {
        if (attribute_specs[k].name == a.name) throw ConfigError(prefix + "name", "duplicate attribute '" + a.name + "'");
      }
    }
  }

  std::size_t num_eval_identities() const {
    return static_cast<std::size_t>(std::llround(eval_identity_fraction * static_cast<double>(num_identities)));
  }
};

enum class Split : std::uint8_t { train = 0, eval = 1 };

struct Sample {
  std::vector<double> features;
  std::size_t identity = 0;
  std::vector<std::uint8_t> attributes;
  Split split = Split::train;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct SyntheticDataset {
  DatasetConfig config;
  std::vector<Sample> samples;

  std::size_t num_attributes() const { return config.attribute_specs.size(); }
  std::size_t input_dim() const { return config.input_dim; }

  std::vector<std::size_t> group_columns(Group g) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < config.attribute_specs.size(); ++j) {
      if (config.attribute_specs[j].group == g) out.push_back(j);
    }
    return out;
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].split == s) out.push_back(i);
    }
    return out;
  }
};

inline SyntheticDataset generate(const DatasetConfig& config) {
  config.validate();
  const std::size_t d = config.input_dim, k = config.latent_dim, na = config.attribute_specs.size();

  Rng matrices(derive_seed(config.seed, "data.matrices"));
  std::vector<double> a_mat(d * k), b_mat(d * na);
  const double a_sd = config.identity_signal_alpha / std::sqrt(static_cast<double>(d));
  const double b_sd = config.attribute_column_norm / std::sqrt(static_cast<double>(d));
  for (auto& v : a_mat) v = a_sd * matrices.normal();
  for (auto& v : b_mat) v = b_sd * matrices.normal();

  Rng identities(derive_seed(config.seed, "data.identities"));
  Rng images(derive_seed(config.seed, "data.images"));
  const std::size_t first_eval = config.num_identities - config.num_eval_identities();

  SyntheticDataset out;
  out.config = config;
  out.samples.reserve(config.num_identities * config.images_per_identity);
  std::vector<double> latent(k), identity_part(d);
  std::vector<std::uint8_t> base(na);
  for (std::size_t id = 0; id < config.num_identities; ++id) {
    for (auto& v : latent) v = identities.normal();
    for (std::size_t j = 0; j < na; ++j) base[j] = identities.bernoulli(config.attribute_specs[j].base_rate);
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0;
      for (std::size_t c = 0; c < k; ++c) acc += a_mat[r * k + c] * latent[c];
      identity_part[r] = acc;
    }
    for (std::size_t img = 0; img < config.images_per_identity; ++img) {
      Sample s;
      s.identity = id;
      s.split = id >= first_eval ? Split::eval : Split::train;
      s.attributes.resize(na);
      for (std::size_t j = 0; j < na; ++j) {
        const auto& spec = config.attribute_specs[j];
        const bool keep = images.uniform() < spec.identity_stability;
        s.attributes[j] = keep ? base[j] : static_cast<std::uint8_t>(images.bernoulli(spec.base_rate));
      }
      s.features.resize(d);
      for (std::size_t r = 0; r < d; ++r) {
        double attr = 0;
        for (std::size_t j = 0; j < na; ++j) attr += b_mat[r * na + j] * (s.attributes[j] ? 1.0 : -1.0);
        s.features[r] = identity_part[r] + config.attribute_signal_beta * attr + config.noise_sigma * images.normal();
      }
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON config

inline nlohmann::json to_json(const DatasetConfig& c) {
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& a : c.attribute_specs) {
    specs.push_back({{"name", a.name},
                     {"group", group_name(a.group)},
                     {"base_rate", a.base_rate},
                     {"identity_stability", a.identity_stability}});
  }
  return {{"num_identities", c.num_identities},
          {"images_per_identity", c.images_per_identity},
          {"latent_dim", c.latent_dim},
          {"input_dim", c.input_dim},
          {"attribute_specs", specs},
          {"noise_sigma", c.noise_sigma},
          {"attribute_signal_beta", c.attribute_signal_beta},
          {"identity_signal_alpha", c.identity_signal_alpha},
          {"attribute_column_norm", c.attribute_column_norm},
          {"eval_identity_fraction", c.eval_identity_fraction},
          {"seed", c.seed}};
}

namespace detail {

template <class V>
V json_field(const nlohmann::json& j, const std::string& path) {
  try {
    return j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path, "wrong type (" + std::string(j.type_name()) + ")");
  }
}

inline std::size_t json_count(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number_integer() || j.get<long long>() < 0) throw ConfigError(path, "must be a nonnegative integer");
  return j.get<std::size_t>();
}

inline std::uint64_t json_seed(const nlohmann::json& j, const std::string& path) {
  if (!j.is_number_integer()) throw ConfigError(path, "must be an integer");
  return j.is_number_unsigned() ? j.get<std::uint64_t>() : static_cast<std::uint64_t>(j.get<long long>());
}

}  // namespace detail

/// Fields absent from `j` keep their defaults. Unknown keys are rejected.
inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "dataset config must be a JSON object");
  DatasetConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "num_identities") c.num_identities = detail::json_count(value, key);
    else if (key == "images_per_identity") c.images_per_identity = detail::json_count(value, key);
    else if (key == "latent_dim") c.latent_dim = detail::json_count(value, key);
    else if (key == "input_dim") c.input_dim = detail::json_count(value, key);
    else if (key == "noise_sigma") c.noise_sigma = detail::json_field<double>(value, key);
    else if (key == "attribute_signal_beta") c.attribute_signal_beta = detail::json_field<double>(value, key);
    else if (key == "identity_signal_alpha") c.identity_signal_alpha = detail::json_field<double>(value, key);
    else if (key == "attribute_column_norm") c.attribute_column_norm = detail::json_field<double>(value, key);
    else if (key == "eval_identity_fraction") c.eval_identity_fraction = detail::json_field<double>(value, key);
    else if (key == "seed") c.seed = detail::json_seed(value, key);
    else if (key == "attribute_specs") {
      if (!value.is_array()) throw ConfigError(key, "must be an array");
      c.attribute_specs.clear();
      for (std::size_t i = 0; i < value.size(); ++i) {
        const std::string prefix = "attribute_specs[" + std::to_string(i) + "].";
        const auto& e = value[i];
        if (!e.is_object()) throw ConfigError("attribute_specs[" + std::to_string(i) + "]", "must be an object");
        AttributeSpec a;
        for (const auto& [k2, v2] : e.items()) {
          if (k2 == "name") a.name = detail::json_field<std::string>(v2, prefix + k2);
          else if (k2 == "group") {
            auto g = group_from_name(detail::json_field<std::string>(v2, prefix + k2));
            if (!g) throw ConfigError(prefix + k2, "unknown group '" + v2.get<std::string>() + "'");
            a.group = *g;
          } else if (k2 == "base_rate") a.base_rate = detail::json_field<double>(v2, prefix + k2);
          else if (k2 == "identity_stability") a.identity_stability = detail::json_field<double>(v2, prefix + k2);
          else throw ConfigError(prefix + k2, "unknown field");
        }
        if (!e.contains("group")) throw ConfigError(prefix + "group", "missing");
        c.attribute_specs.push_back(std::move(a));
      }
    } else {
      throw ConfigError(key, "unknown field");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Dataset file
//
//   magic "AFDSET\0\0" | u32 version | u64 len + config JSON | u64 len + tag
//   u64 num_samples | u64 input_dim | u64 num_attributes
//   num_samples x { u64 identity | u8 split | num_attributes x u8 | input_dim x f64 }

inline constexpr char kDatasetMagic[8] = {'A', 'F', 'D', 'S', 'E', 'T', '\0', '\0'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<unsigned char> serialize_dataset(const SyntheticDataset& ds, const std::string& tag = "") {
  io::ByteWriter w;
  w.bytes(kDatasetMagic, sizeof kDatasetMagic);
  w.u32(kDatasetVersion);
  w.string(to_json(ds.config).dump());
  w.string(tag);
  w.u64(ds.samples.size());
  w.u64(ds.config.input_dim);
  w.u64(ds.num_attributes());
  for (const auto& s : ds.samples) {
    w.u64(s.identity);
    w.u8(static_cast<std::uint8_t>(s.split));
    w.bytes(s.attributes.data(), s.attributes.size());
    for (double v : s.features) w.f64(v);
  }
  return w.buffer();
}

inline void save(const SyntheticDataset& ds, const std::string& path, const std::string& tag = "") {
  io::write_file(path, serialize_dataset(ds, tag));
}

inline SyntheticDataset deserialize_dataset(std::vector<unsigned char> bytes, const std::string& context,
                                            std::string* tag_out = nullptr) {
  io::ByteReader r(std::move(bytes), context);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (!std::equal(magic, magic + 8, kDatasetMagic)) throw FormatError(context + ": not a dataset file (bad magic)");
  const auto version = r.u32();
  if (version != kDatasetVersion) throw FormatError(context + ": unsupported dataset version " + std::to_string(version));
  SyntheticDataset ds;
  try {
    ds.config = dataset_config_from_json(nlohmann::json::parse(r.string()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": corrupt config block: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(context + ": invalid config block: " + e.what());
  }
  auto tag = r.string();
  if (tag_out) *tag_out = tag;
  const auto n = r.u64();
  const auto d = r.u64();
  const auto na = r.u64();
  if (d != ds.config.input_dim) {
    throw IntegrityError(context + ": header input_dim " + std::to_string(d) + " disagrees with config " +
                         std::to_string(ds.config.input_dim));
  }
  if (na != ds.config.attribute_specs.size()) {
    throw IntegrityError(context + ": header claims " + std::to_string(na) + " attributes, config lists " +
                         std::to_string(ds.config.attribute_specs.size()));
  }
  const std::uint64_t record = 8 + 1 + na + 8 * d;
  if (r.remaining() != n * record) {
    throw IntegrityError(context + ": expected " + std::to_string(n * record) + " bytes of sample records, found " +
                         std::to_string(r.remaining()));
  }
  ds.samples.resize(n);
  for (auto& s : ds.samples) {
    s.identity = r.u64();
    if (s.identity >= ds.config.num_identities) throw IntegrityError(context + ": identity label out of range");
    const auto split = r.u8();
    if (split > 1) throw IntegrityError(context + ": invalid split byte");
    s.split = static_cast<Split>(split);
    s.attributes.resize(na);
    r.bytes(s.attributes.data(), na);
    for (auto bit : s.attributes) {
      if (bit > 1) throw IntegrityError(context + ": attribute byte is not 0/1");
    }
    s.features.resize(d);
    for (auto& v : s.features) v = r.f64();
  }
  return ds;
}

inline SyntheticDataset load(const std::string& path, std::string* tag_out = nullptr) {
  return deserialize_dataset(io::read_file(path), path, tag_out);
}

}  // namespace attrface
