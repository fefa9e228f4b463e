#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_set>
#include <vector>

#include "attrface/rng.hpp"
#include "attrface/synth.hpp"

namespace attrface {

inline constexpr std::size_t kNumFolds = 10;

struct VerificationPair {
  std::size_t left_index = 0;   // into SyntheticDataset::samples
  std::size_t right_index = 0;
  bool genuine = false;
  std::size_t fold = 0;

  friend bool operator==(const VerificationPair&, const VerificationPair&) = default;
};

namespace detail {

// Draws `quota` distinct items from a population of `population` items
// enumerated by `item(k)`; repeats only once the population is exhausted.
template <class ItemFn>
std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::uint64_t population, std::size_t quota, Rng& rng,
                                                              ItemFn item) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(quota);
  if (quota == 0) return out;
  if (population <= std::max<std::uint64_t>(4 * quota, 4096)) {
    std::vector<std::uint64_t> order(population);
    for (std::uint64_t k = 0; k < population; ++k) order[k] = k;
    rng.shuffle(std::span<std::uint64_t>(order));
    for (std::size_t q = 0; q < quota; ++q) {
      out.push_back(item(q < population ? order[q] : rng.below(population)));
    }
    return out;
  }
  std::unordered_set<std::uint64_t> seen;
  while (out.size() < quota) {
    const auto k = rng.below(population);
    if (seen.insert(k).second) out.push_back(item(k));
  }
  return out;
}

}  // namespace detail

/// Balanced genuine/impostor pairs over the samples of `split`, partitioned
/// into identity-disjoint folds. With fewer than 20 identities only
/// floor(identities / 2) folds are populated.
inline std::vector<VerificationPair> make_verification_pairs(const SyntheticDataset& ds, std::size_t num_pairs,
                                                             std::uint64_t seed, Split split = Split::eval) {
  if (num_pairs == 0 || num_pairs % 2 != 0) throw ConfigError("num_pairs", "must be an even positive integer");
  std::map<std::size_t, std::vector<std::size_t>> by_identity;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.samples[i].split == split) by_identity[ds.samples[i].identity].push_back(i);
  }
  std::size_t multi = 0;
  for (const auto& [id, imgs] : by_identity) multi += imgs.size() >= 2;
  const char* split_name = split == Split::eval ? "eval" : "train";
  if (by_identity.size() < 2 || multi < 2) {
    throw ConfigError("num_pairs", std::string("split '") + split_name + "' has " + std::to_string(by_identity.size()) +
                                       " identities, " + std::to_string(multi) +
                                       " with at least two images; need at least 2 of each");
  }

  Rng rng(seed);
  std::vector<std::size_t> ids;
  for (const auto& [id, imgs] : by_identity) ids.push_back(id);
  rng.shuffle(std::span<std::size_t>(ids));
  const std::size_t num_folds = std::min(kNumFolds, ids.size() / 2);
  std::vector<std::vector<std::size_t>> fold_ids(num_folds);
  for (std::size_t k = 0; k < ids.size(); ++k) fold_ids[k % num_folds].push_back(ids[k]);

  const std::size_t half = num_pairs / 2;
  std::vector<VerificationPair> out;
  out.reserve(num_pairs);
  for (std::size_t f = 0; f < num_folds; ++f) {
    const std::size_t quota = half / num_folds + (f < half % num_folds ? 1 : 0);

    // Genuine population: all unordered image pairs within one identity.
    std::vector<std::size_t> g_ids;
    std::vector<std::uint64_t> g_offsets{0};
    for (auto id : fold_ids[f]) {
      const std::uint64_t n = by_identity[id].size();
      if (n < 2) continue;
      g_ids.push_back(id);
      g_offsets.push_back(g_offsets.back() + n * (n - 1) / 2);
    }
    if (quota > 0 && g_ids.empty()) {
      throw ConfigError("num_pairs", "fold " + std::to_string(f) + " has no identity with two images for genuine pairs");
    }
    auto genuine = detail::sample_pairs(g_offsets.back(), quota, rng, [&](std::uint64_t k) {
      const auto slot = static_cast<std::size_t>(std::upper_bound(g_offsets.begin(), g_offsets.end(), k) - g_offsets.begin() - 1);
      const auto& imgs = by_identity[g_ids[slot]];
      std::uint64_t r = k - g_offsets[slot];
      std::size_t a = 0;
      while (r >= imgs.size() - 1 - a) {
        r -= imgs.size() - 1 - a;
        ++a;
      }
      return std::pair{imgs[a], imgs[a + 1 + r]};
    });

    // Impostor population: one image from each of two distinct identities.
    std::vector<std::pair<std::size_t, std::size_t>> id_pairs;
    std::vector<std::uint64_t> i_offsets{0};
    const auto& fi = fold_ids[f];
    for (std::size_t a = 0; a < fi.size(); ++a)
      for (std::size_t b = a + 1; b < fi.size(); ++b) {
        id_pairs.emplace_back(fi[a], fi[b]);
        i_offsets.push_back(i_offsets.back() + by_identity[fi[a]].size() * by_identity[fi[b]].size());
      }
    auto impostor = detail::sample_pairs(i_offsets.back(), quota, rng, [&](std::uint64_t k) {
      const auto slot = static_cast<std::size_t>(std::upper_bound(i_offsets.begin(), i_offsets.end(), k) - i_offsets.begin() - 1);
      const auto& left = by_identity[id_pairs[slot].first];
      const auto& right = by_identity[id_pairs[slot].second];
      const std::uint64_t r = k - i_offsets[slot];
      return std::pair{left[r / right.size()], right[r % right.size()]};
    });

    for (auto [l, r] : genuine) out.push_back({l, r, true, f});
    for (auto [l, r] : impostor) out.push_back({l, r, false, f});
  }
  return out;
}

}  // namespace attrface
