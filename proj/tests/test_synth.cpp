#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "attrface/binary_io.hpp"
#include "attrface/synth.hpp"

using namespace attrface;
namespace fs = std::filesystem;

namespace {

DatasetConfig tiny(double p, double rho, std::size_t ids, std::size_t imgs) {
  DatasetConfig c;
  c.num_identities = ids;
  c.images_per_identity = imgs;
  c.latent_dim = 2;
  c.input_dim = 3;
  c.attribute_specs = {{"x", Group::hair, p, rho}};
  return c;
}

// Fraction of consecutive image pairs within an identity whose bit agrees.
double within_identity_agreement(const SyntheticDataset& ds, std::size_t column) {
  const std::size_t imgs = ds.config.images_per_identity;
  std::size_t agree = 0, total = 0;
  for (std::size_t id = 0; id < ds.config.num_identities; ++id) {
    for (std::size_t k = 0; k + 1 < imgs; k += 2) {
      const auto& a = ds.samples[id * imgs + k];
      const auto& b = ds.samples[id * imgs + k + 1];
      agree += a.attributes[column] == b.attributes[column];
      ++total;
    }
  }
  return static_cast<double>(agree) / static_cast<double>(total);
}

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("attrface_synth_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Generate, DefaultConfigShape) {
  const DatasetConfig c;
  EXPECT_EQ(c.attribute_specs.size(), 19u);
  const auto ds = generate(c);
  EXPECT_EQ(ds.samples.size(), 6000u);
  EXPECT_EQ(ds.group_columns(Group::periocular).size(), 5u);
  EXPECT_EQ(ds.group_columns(Group::mouth).size(), 2u);
  EXPECT_EQ(ds.group_columns(Group::nose).size(), 2u);
  EXPECT_EQ(ds.group_columns(Group::hair).size(), 8u);
  EXPECT_EQ(ds.group_columns(Group::accessories).size(), 2u);
  EXPECT_EQ(ds.indices(Split::eval).size(), 50u * 30u);
  for (const auto& s : ds.samples) {
    ASSERT_LT(s.identity, 200u);
    ASSERT_EQ(s.features.size(), 128u);
    ASSERT_EQ(s.attributes.size(), 19u);
    EXPECT_EQ(s.split == Split::eval, s.identity >= 150);
  }
}

TEST(Generate, FullStabilityFixesBitsPerIdentity) {
  const auto ds = generate(tiny(0.4, 1.0, 50, 7));
  for (std::size_t id = 0; id < 50; ++id) {
    for (std::size_t k = 1; k < 7; ++k) EXPECT_EQ(ds.samples[id * 7 + k].attributes[0], ds.samples[id * 7].attributes[0]);
  }
}

TEST(Generate, ZeroStabilityAgreementMatchesIndependentDraws) {
  for (double p : {0.5, 0.3, 0.85}) {
    // 10k within-identity draws of two images each.
    const auto ds = generate(tiny(p, 0.0, 10000, 2));
    const double q = p * p + (1 - p) * (1 - p);
    const double se = std::sqrt(q * (1 - q) / 10000.0);
    EXPECT_NEAR(within_identity_agreement(ds, 0), q, 3 * se) << p;
  }
}

TEST(Generate, NoiseFreeAttributeFreeRendering) {
  auto c = tiny(0.5, 0.0, 5, 4);
  c.noise_sigma = 0;
  c.attribute_signal_beta = 0;
  const auto ds = generate(c);
  for (std::size_t id = 0; id < 5; ++id) {
    for (std::size_t k = 1; k < 4; ++k) EXPECT_EQ(ds.samples[id * 4 + k].features, ds.samples[id * 4].features);
  }
  EXPECT_NE(ds.samples[0].features, ds.samples[4].features);
}

TEST(Generate, MarginalRatesWithinThreeStandardErrors) {
  DatasetConfig c;
  c.num_identities = 2000;
  c.images_per_identity = 10;
  c.latent_dim = 2;
  c.input_dim = 2;
  const auto ds = generate(c);
  for (std::size_t j = 0; j < c.attribute_specs.size(); ++j) {
    const auto& spec = c.attribute_specs[j];
    double ones = 0;
    for (const auto& s : ds.samples) ones += s.attributes[j];
    const double n = static_cast<double>(ds.samples.size());
    // Images of one identity share base bits, so the effective sample size
    // shrinks by the design effect 1 + (m - 1) * rho^2.
    const double deff = 1 + (c.images_per_identity - 1) * spec.identity_stability * spec.identity_stability;
    const double se = std::sqrt(spec.base_rate * (1 - spec.base_rate) * deff / n);
    EXPECT_NEAR(ones / n, spec.base_rate, 3 * se) << spec.name;
  }
}

TEST(Generate, AgreementMonotoneInStability) {
  double prev = -1;
  for (double rho : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const double a = within_identity_agreement(generate(tiny(0.3, rho, 4000, 2)), 0);
    EXPECT_GE(a, prev) << rho;
    prev = a;
  }
}

TEST(Generate, ReproducibleFromSeed) {
  auto c = tiny(0.5, 0.5, 20, 3);
  c.seed = 11;
  const auto a = generate(c), b = generate(c);
  EXPECT_EQ(a.samples, b.samples);
  c.seed = 12;
  EXPECT_NE(generate(c).samples, a.samples);
}

TEST(Generate, ScalesIdentitySignal) {
  auto c = tiny(0.5, 0.5, 3, 2);
  c.noise_sigma = 0;
  c.attribute_signal_beta = 0;
  c.identity_signal_alpha = 1.0;
  const auto one = generate(c);
  c.identity_signal_alpha = 0.5;
  const auto half = generate(c);
  for (std::size_t i = 0; i < one.samples.size(); ++i)
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(half.samples[i].features[r], 0.5 * one.samples[i].features[r], 1e-15);
}

TEST(Generate, ScalesAttributeSignal) {
  auto c = tiny(0.5, 0.5, 3, 2);
  c.noise_sigma = 0;
  c.identity_signal_alpha = 0;
  c.attribute_column_norm = 1.0;
  const auto one = generate(c);
  c.attribute_column_norm = 3.0;
  const auto three = generate(c);
  for (std::size_t i = 0; i < one.samples.size(); ++i) {
    EXPECT_EQ(three.samples[i].attributes, one.samples[i].attributes);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_NEAR(three.samples[i].features[r], 3.0 * one.samples[i].features[r], 1e-14);
  }
}

TEST(Config, ValidationNamesField) {
  auto expect_field = [](const DatasetConfig& c, const std::string& field) {
    try {
      c.validate();
      ADD_FAILURE() << "accepted config, expected error on " << field;
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.field(), field);
    }
  };
  DatasetConfig c;
  c.input_dim = 8;
  expect_field(c, "input_dim");
  c = DatasetConfig{};
  c.attribute_specs[3].identity_stability = 1.5;
  expect_field(c, "attribute_specs[3].identity_stability");
  c = DatasetConfig{};
  c.attribute_specs[0].base_rate = 0.0;
  expect_field(c, "attribute_specs[0].base_rate");
  c = DatasetConfig{};
  c.attribute_specs[1].name = c.attribute_specs[0].name;
  expect_field(c, "attribute_specs[1].name");
  c = DatasetConfig{};
  c.noise_sigma = -0.1;
  expect_field(c, "noise_sigma");
  c = DatasetConfig{};
  c.attribute_column_norm = -1;
  expect_field(c, "attribute_column_norm");
  c = DatasetConfig{};
  c.num_identities = 0;
  expect_field(c, "num_identities");
}

TEST(Config, JsonRoundTripAndErrors) {
  DatasetConfig c = tiny(0.2, 0.7, 9, 4);
  c.seed = 0xFFFFFFFFFFFFFFFFull;
  c.noise_sigma = 0.125;
  c.attribute_column_norm = 0.75;
  const auto back = dataset_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.seed, c.seed);

  auto field_of = [](const char* text) -> std::string {
    try {
      dataset_config_from_json(nlohmann::json::parse(text));
    } catch (const ConfigError& e) {
      return e.field();
    }
    return "";
  };
  EXPECT_EQ(field_of(R"({"num_identites": 3})"), "num_identites");
  EXPECT_EQ(field_of(R"({"noise_sigma": "big"})"), "noise_sigma");
  EXPECT_EQ(field_of(R"({"num_identities": -3})"), "num_identities");
  EXPECT_EQ(field_of(R"({"attribute_specs": [{"name": "a", "group": "Ears", "base_rate": 0.5}]})"), "attribute_specs[0].group");
  EXPECT_EQ(field_of(R"({"attribute_specs": [{"name": "a", "group": "Hair", "base_rate": 0.5, "identity_stability": 2}]})"),
            "attribute_specs[0].identity_stability");
  EXPECT_EQ(field_of(R"([1, 2])"), "<root>");
}

TEST(DatasetFile, RoundTripIsBitExact) {
  auto c = tiny(0.5, 0.5, 6, 3);
  c.eval_identity_fraction = 0.5;
  c.seed = 99;
  const auto ds = generate(c);
  const auto path = temp_file("roundtrip.bin");
  save(ds, path.string(), "tagvalue");
  std::string tag;
  const auto back = load(path.string(), &tag);
  EXPECT_EQ(tag, "tagvalue");
  EXPECT_EQ(back.samples, ds.samples);
  EXPECT_EQ(to_json(back.config), to_json(ds.config));
  EXPECT_EQ(back.config.seed, 99u);
  EXPECT_EQ(serialize_dataset(back, "tagvalue"), serialize_dataset(ds, "tagvalue"));
  fs::remove(path);
}

TEST(DatasetFile, CorruptMagic) {
  auto bytes = serialize_dataset(generate(tiny(0.5, 0.5, 2, 2)));
  bytes[0] = 'X';
  EXPECT_THROW(deserialize_dataset(bytes, "mem"), FormatError);
}

TEST(DatasetFile, UnsupportedVersion) {
  auto bytes = serialize_dataset(generate(tiny(0.5, 0.5, 2, 2)));
  bytes[8] = 7;
  try {
    deserialize_dataset(bytes, "mem");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version 7"), std::string::npos);
  }
}

TEST(DatasetFile, AttributeCountMismatch) {
  const auto ds = generate(tiny(0.5, 0.5, 2, 2));
  // Rewrite the header so it claims one more attribute than the config lists.
  io::ByteWriter w;
  w.bytes(kDatasetMagic, sizeof kDatasetMagic);
  w.u32(kDatasetVersion);
  w.string(to_json(ds.config).dump());
  w.string("");
  w.u64(ds.samples.size());
  w.u64(ds.config.input_dim);
  w.u64(2);
  for (const auto& s : ds.samples) {
    w.u64(s.identity);
    w.u8(0);
    w.u8(s.attributes[0]);
    w.u8(0);
    for (double v : s.features) w.f64(v);
  }
  EXPECT_THROW(deserialize_dataset(w.buffer(), "mem"), IntegrityError);
}

TEST(DatasetFile, Truncation) {
  auto bytes = serialize_dataset(generate(tiny(0.5, 0.5, 2, 2)));
  for (std::size_t cut : {bytes.size() - 1, bytes.size() / 2, std::size_t{10}}) {
    std::vector<unsigned char> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(deserialize_dataset(part, "mem"), Error) << cut;
  }
  EXPECT_THROW(deserialize_dataset({bytes.begin(), bytes.end() - 3}, "mem"), IntegrityError);
}

TEST(DatasetFile, MissingFileNamesPath) {
  try {
    load("/nonexistent/dir/data.bin");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/data.bin"), std::string::npos);
  }
}
