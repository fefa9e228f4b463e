#pragma once

// Verification protocol, linear probes and attribute-only identity
// predictiveness analyses.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "attrface/model.hpp"
#include "attrface/pairs.hpp"
#include "attrface/rng.hpp"
#include "attrface/synth.hpp"

namespace attrface {

// ---------------------------------------------------------------------------
// 10-fold verification

struct FoldReport {
  std::array<double, kNumFolds> accuracy{};
  std::array<double, kNumFolds> threshold{};
  double mean = 0.0;
};

namespace detail {

struct ThresholdChoice {
  double threshold;  // midpoint, or +/-inf
  double lower_edge; // largest training score below the threshold, -inf if none
  double train_accuracy;
};

// Best threshold over `scored` (score, genuine): midpoints between
// consecutive distinct scores plus +/-inf; ties go to the smallest threshold.
inline ThresholdChoice best_threshold(std::vector<std::pair<double, bool>> scored) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::sort(scored.begin(), scored.end());
  const double n = static_cast<double>(scored.size());
  long correct = 0;
  for (const auto& s : scored) correct += s.second;  // threshold -inf: all called genuine
  ThresholdChoice best{-inf, -inf, static_cast<double>(correct) / n};
  long best_correct = correct;
  std::size_t i = 0;
  while (i < scored.size()) {
    const double v = scored[i].first;
    std::size_t j = i;
    for (; j < scored.size() && scored[j].first == v; ++j) correct += scored[j].second ? -1 : 1;
    if (correct > best_correct) {
      best_correct = correct;
      const double t = j < scored.size() ? v + (scored[j].first - v) / 2 : inf;
      best = {t, v, static_cast<double>(correct) / n};
    }
    i = j;
  }
  return best;
}

inline bool called_genuine(double score, const ThresholdChoice& c) {
  if (c.threshold == -std::numeric_limits<double>::infinity()) return true;
  if (c.threshold == std::numeric_limits<double>::infinity()) return false;
  return score > c.lower_edge;
}

}  // namespace detail

/// Per fold: threshold chosen on the other nine folds, accuracy on this one.
inline FoldReport verification_accuracy_10fold(std::span<const double> scores, std::span<const VerificationPair> pairs) {
  if (scores.size() != pairs.size()) {
    throw ShapeError("verification_accuracy_10fold: " + std::to_string(scores.size()) + " scores for " +
                     std::to_string(pairs.size()) + " pairs");
  }
  std::array<std::size_t, kNumFolds> counts{};
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericError("verification_accuracy_10fold: non-finite score at pair " + std::to_string(i));
    if (pairs[i].fold >= kNumFolds) throw ConfigError("fold", "fold index " + std::to_string(pairs[i].fold) + " out of range");
    ++counts[pairs[i].fold];
  }
  for (std::size_t f = 0; f < kNumFolds; ++f) {
    if (counts[f] == 0) throw ConfigError("fold", "fold " + std::to_string(f) + " is empty");
  }
  FoldReport report;
  for (std::size_t f = 0; f < kNumFolds; ++f) {
    std::vector<std::pair<double, bool>> train;
    train.reserve(pairs.size() - counts[f]);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].fold != f) train.emplace_back(scores[i], pairs[i].genuine);
    }
    const auto choice = detail::best_threshold(std::move(train));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].fold == f) correct += detail::called_genuine(scores[i], choice) == pairs[i].genuine;
    }
    report.accuracy[f] = static_cast<double>(correct) / static_cast<double>(counts[f]);
    report.threshold[f] = choice.threshold;
  }
  report.mean = std::accumulate(report.accuracy.begin(), report.accuracy.end(), 0.0) / static_cast<double>(kNumFolds);
  return report;
}

// ---------------------------------------------------------------------------
// Embedding scores

/// Embeddings of the given samples, row-normalized. Rows follow `indices`.
template <std::floating_point T>
std::vector<double> normalized_embeddings(const MultiTaskModel<T>& model, const SyntheticDataset& ds,
                                          std::span<const std::size_t> indices, std::size_t batch = 512) {
  const std::size_t d_in = ds.input_dim(), d = model.config().embedding_dim;
  if (d_in != model.config().input_dim) {
    throw ShapeError("embedding: dataset input_dim " + std::to_string(d_in) + " != model input_dim " +
                     std::to_string(model.config().input_dim));
  }
  std::vector<double> out(indices.size() * d);
  std::vector<T> x;
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const std::size_t rows = std::min(batch, indices.size() - start);
    x.assign(rows * d_in, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
      const auto& f = ds.samples[indices[start + r]].features;
      for (std::size_t c = 0; c < d_in; ++c) x[r * d_in + c] = static_cast<T>(f[c]);
    }
    const auto z = model.embed(x, rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double ss = 0;
      for (std::size_t c = 0; c < d; ++c) ss += static_cast<double>(z[r * d + c]) * static_cast<double>(z[r * d + c]);
      const double norm = std::sqrt(ss);
      if (!(norm >= kMinRowNorm)) {
        throw NumericError("embedding of sample " + std::to_string(indices[start + r]) + " has near-zero norm");
      }
      for (std::size_t c = 0; c < d; ++c) out[(start + r) * d + c] = static_cast<double>(z[r * d + c]) / norm;
    }
  }
  return out;
}

/// Cosine similarity between raw embedding rows. Rows of near-zero norm raise.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  const double na = std::sqrt(aa), nb = std::sqrt(bb);
  if (!(na >= kMinRowNorm) || !(nb >= kMinRowNorm)) throw NumericError("cosine_similarity: near-zero embedding");
  return std::clamp(ab / (na * nb), -1.0, 1.0);
}

/// Cosine scores for pairs given an embedding per sample (row i = sample i).
inline std::vector<double> score_pairs(std::span<const double> embeddings, std::size_t dim,
                                       std::span<const VerificationPair> pairs) {
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& p : pairs) {
    scores.push_back(cosine_similarity(embeddings.subspan(p.left_index * dim, dim), embeddings.subspan(p.right_index * dim, dim)));
  }
  return scores;
}

template <std::floating_point T>
std::vector<double> embed_and_score(const MultiTaskModel<T>& model, const SyntheticDataset& ds,
                                    std::span<const VerificationPair> pairs) {
  std::vector<std::size_t> used;
  for (const auto& p : pairs) {
    used.push_back(p.left_index);
    used.push_back(p.right_index);
  }
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  const auto emb = normalized_embeddings(model, ds, used);
  const std::size_t d = model.config().embedding_dim;
  auto row = [&](std::size_t sample) {
    const auto pos = static_cast<std::size_t>(std::lower_bound(used.begin(), used.end(), sample) - used.begin());
    return std::span<const double>(emb).subspan(pos * d, d);
  };
  std::vector<double> scores;
  scores.reserve(pairs.size());
  for (const auto& p : pairs) scores.push_back(cosine_similarity(row(p.left_index), row(p.right_index)));
  return scores;
}

// ---------------------------------------------------------------------------
// Linear classifiers trained by SGD

struct SgdOptions {
  std::size_t epochs = 200;
  double lr = 0.1;
  double l2 = 0.0;
  std::uint64_t seed = 0;
};

/// Binary affine classifier w.x + b.
struct LinearClassifier {
  std::vector<double> weight;
  double bias = 0.0;

  double score(std::span<const double> x) const {
    double s = bias;
    for (std::size_t i = 0; i < weight.size(); ++i) s += weight[i] * x[i];
    return s;
  }
};

enum class BinaryLoss { logistic, hinge };

/// `x` is rows x dim, `y` holds 0/1 labels. When `order_free` is set the
/// margin is summed in sorted-term order, so permuting the feature columns
/// permutes the learned weights and leaves every decision unchanged.
inline LinearClassifier train_binary(std::span<const double> x, std::size_t dim, std::span<const std::uint8_t> y,
                                     BinaryLoss loss, const SgdOptions& opt, bool order_free = false) {
  const std::size_t rows = y.size();
  LinearClassifier clf{std::vector<double>(dim, 0.0), 0.0};
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(opt.seed);
  std::vector<double> terms(dim);
  auto margin_of = [&](const double* xi) {
    if (!order_free) return clf.score({xi, dim});
    for (std::size_t c = 0; c < dim; ++c) terms[c] = clf.weight[c] * xi[c];
    std::sort(terms.begin(), terms.end());
    double s = clf.bias;
    for (double t : terms) s += t;
    return s;
  };
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i : order) {
      const double* xi = x.data() + i * dim;
      const double sign = y[i] ? 1.0 : -1.0;
      const double s = margin_of(xi);
      double g;  // d loss / d score
      if (loss == BinaryLoss::logistic) {
        g = Tape<double>::stable_sigmoid(s) - (y[i] ? 1.0 : 0.0);
      } else {
        g = sign * s < 1.0 ? -sign : 0.0;
      }
      if (opt.l2 != 0) {
        for (auto& w : clf.weight) w -= opt.lr * opt.l2 * w;
      }
      if (g != 0) {
        for (std::size_t c = 0; c < dim; ++c) clf.weight[c] -= opt.lr * g * xi[c];
        clf.bias -= opt.lr * g;
      }
    }
  }
  return clf;
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeOptions {
  SgdOptions sgd{200, 0.1, 0.0, 0};
  double test_fraction = 0.5;
};

struct ProbeResult {
  std::vector<std::size_t> columns;
  std::vector<std::optional<double>> accuracy;  // nullopt: degenerate (single class in probe-train)
  double group_mean = std::numeric_limits<double>::quiet_NaN();
  std::size_t degenerate = 0;
};

/// One logistic probe per attribute column on frozen embeddings. Probe
/// train/test split is by identity (seeded), features are standardized with
/// probe-train statistics.
inline ProbeResult linear_probe(std::span<const double> embeddings, std::size_t dim,
                                std::span<const std::vector<std::uint8_t>> attributes,
                                std::span<const std::size_t> identities, std::span<const std::size_t> columns,
                                const ProbeOptions& opt = {}) {
  const std::size_t rows = attributes.size();
  if (embeddings.size() != rows * dim || identities.size() != rows) {
    throw ShapeError("linear_probe: embeddings, attributes and identities disagree on row count");
  }
  std::vector<std::size_t> ids(identities.begin(), identities.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < 2) throw ConfigError("identities", "linear_probe needs at least two identities");
  Rng rng(derive_seed(opt.sgd.seed, "probe.split"));
  rng.shuffle(std::span<std::size_t>(ids));
  std::size_t n_test = static_cast<std::size_t>(std::llround(opt.test_fraction * static_cast<double>(ids.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, ids.size() - 1);
  std::set<std::size_t> test_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));

  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t i = 0; i < rows; ++i) (test_ids.count(identities[i]) ? test_rows : train_rows).push_back(i);

  std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
  for (auto i : train_rows)
    for (std::size_t c = 0; c < dim; ++c) mean[c] += embeddings[i * dim + c];
  for (auto& m : mean) m /= static_cast<double>(train_rows.size());
  for (auto i : train_rows)
    for (std::size_t c = 0; c < dim; ++c) sd[c] += std::pow(embeddings[i * dim + c] - mean[c], 2);
  for (auto& s : sd) s = std::sqrt(s / static_cast<double>(train_rows.size()));
  auto gather = [&](const std::vector<std::size_t>& rs) {
    std::vector<double> out(rs.size() * dim);
    for (std::size_t r = 0; r < rs.size(); ++r)
      for (std::size_t c = 0; c < dim; ++c) {
        const double s = sd[c] > 1e-12 ? sd[c] : 1.0;
        out[r * dim + c] = (embeddings[rs[r] * dim + c] - mean[c]) / s;
      }
    return out;
  };
  const auto x_train = gather(train_rows), x_test = gather(test_rows);

  ProbeResult result;
  result.columns.assign(columns.begin(), columns.end());
  double sum = 0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < columns.size(); ++k) {
    const std::size_t col = columns[k];
    std::vector<std::uint8_t> y_train, y_test;
    for (auto i : train_rows) y_train.push_back(attributes[i][col]);
    for (auto i : test_rows) y_test.push_back(attributes[i][col]);
    const auto positives = std::count(y_train.begin(), y_train.end(), 1);
    if (positives == 0 || positives == static_cast<std::ptrdiff_t>(y_train.size())) {
      result.accuracy.push_back(std::nullopt);
      ++result.degenerate;
      continue;
    }
    SgdOptions sgd = opt.sgd;
    sgd.seed = derive_seed(opt.sgd.seed, "probe.column" + std::to_string(col));
    const auto clf = train_binary(x_train, dim, y_train, BinaryLoss::logistic, sgd);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < test_rows.size(); ++r) {
      const bool pred = clf.score(std::span<const double>(x_test).subspan(r * dim, dim)) >= 0;
      correct += pred == (y_test[r] == 1);
    }
    const double acc = static_cast<double>(correct) / static_cast<double>(test_rows.size());
    result.accuracy.push_back(acc);
    sum += acc;
    ++used;
  }
  if (used > 0) result.group_mean = sum / static_cast<double>(used);
  return result;
}

// ---------------------------------------------------------------------------
// Attribute-only identification

struct IdentificationOptions {
  SgdOptions sgd{30, 0.01, 1e-4, 0};
  double train_fraction = 2.0 / 3.0;
};

struct IdentificationResult {
  double rank1 = 0.0;
  double rank5 = 0.0;
  std::size_t num_classes = 0;
  std::size_t test_samples = 0;
  std::size_t excluded_identities = 0;  // present in test but absent from train
};

/// Rank of `truth` among `scores`, counting strictly higher scores and equal
/// scores at a lower class index. 0 is the top rank.
inline std::size_t class_rank(std::span<const double> scores, std::size_t truth) {
  std::size_t rank = 0;
  for (std::size_t c = 0; c < scores.size(); ++c) {
    if (scores[c] > scores[truth] || (scores[c] == scores[truth] && c < truth)) ++rank;
  }
  return rank;
}

/// Closed-set identification from bit vectors with one-vs-rest hinge
/// classifiers. `is_test` (optional) overrides the per-identity split.
inline IdentificationResult attribute_only_identification(std::span<const std::vector<std::uint8_t>> vectors,
                                                          std::span<const std::size_t> identities,
                                                          const IdentificationOptions& opt = {},
                                                          std::span<const std::uint8_t> is_test = {}) {
  const std::size_t rows = vectors.size();
  if (identities.size() != rows) throw ShapeError("attribute_only_identification: identities/vectors size mismatch");
  if (rows == 0) throw ConfigError("identities", "no samples");
  const std::size_t dim = vectors[0].size();

  std::vector<std::uint8_t> test(rows, 0);
  if (!is_test.empty()) {
    if (is_test.size() != rows) throw ShapeError("attribute_only_identification: split mask size mismatch");
    std::copy(is_test.begin(), is_test.end(), test.begin());
  } else {
    std::map<std::size_t, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < rows; ++i) by_id[identities[i]].push_back(i);
    Rng rng(derive_seed(opt.sgd.seed, "identification.split"));
    for (auto& [id, members] : by_id) {
      rng.shuffle(std::span<std::size_t>(members));
      const auto n_train = static_cast<std::size_t>(std::ceil(opt.train_fraction * static_cast<double>(members.size())));
      for (std::size_t k = n_train; k < members.size(); ++k) test[members[k]] = 1;
    }
  }
  std::map<std::size_t, std::size_t> class_of;  // identity -> class index, train identities only
  for (std::size_t i = 0; i < rows; ++i) {
    if (!test[i]) class_of.emplace(identities[i], 0);
  }
  std::size_t next = 0;
  for (auto& [id, c] : class_of) c = next++;
  const std::size_t classes = class_of.size();
  if (classes < 2) throw ConfigError("identities", "attribute_only_identification needs at least two train identities");

  IdentificationResult result;
  result.num_classes = classes;
  std::set<std::size_t> excluded;
  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!class_of.count(identities[i])) {
      excluded.insert(identities[i]);
      continue;
    }
    (test[i] ? test_rows : train_rows).push_back(i);
  }
  result.excluded_identities = excluded.size();

  auto features = [&](std::size_t i, std::vector<double>& x) {
    for (std::size_t c = 0; c < dim; ++c) x[c] = vectors[i][c] ? 1.0 : -1.0;
  };
  std::vector<double> w(classes * dim, 0.0), b(classes, 0.0), x(dim), s(classes);
  Rng rng(derive_seed(opt.sgd.seed, "identification.sgd"));
  std::vector<std::size_t> order = train_rows;
  for (std::size_t e = 0; e < opt.sgd.epochs; ++e) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t i : order) {
      features(i, x);
      const std::size_t truth = class_of.at(identities[i]);
      for (std::size_t c = 0; c < classes; ++c) {
        double* wc = w.data() + c * dim;
        double score = b[c];
        for (std::size_t k = 0; k < dim; ++k) score += wc[k] * x[k];
        const double y = c == truth ? 1.0 : -1.0;
        if (opt.sgd.l2 != 0) {
          for (std::size_t k = 0; k < dim; ++k) wc[k] -= opt.sgd.lr * opt.sgd.l2 * wc[k];
        }
        if (y * score < 1.0) {
          for (std::size_t k = 0; k < dim; ++k) wc[k] += opt.sgd.lr * y * x[k];
          b[c] += opt.sgd.lr * y;
        }
      }
    }
  }
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i : test_rows) {
    features(i, x);
    for (std::size_t c = 0; c < classes; ++c) {
      double score = b[c];
      for (std::size_t k = 0; k < dim; ++k) score += w[c * dim + k] * x[k];
      s[c] = score;
    }
    const auto rank = class_rank(s, class_of.at(identities[i]));
    hit1 += rank < 1;
    hit5 += rank < 5;
  }
  result.test_samples = test_rows.size();
  if (!test_rows.empty()) {
    result.rank1 = static_cast<double>(hit1) / static_cast<double>(test_rows.size());
    result.rank5 = static_cast<double>(hit5) / static_cast<double>(test_rows.size());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Attribute-only verification

struct PairClassifierOptions {
  SgdOptions sgd{20, 0.01, 1e-4, 0};
};

/// [|a - b|, a * b] for bit vectors a, b.
inline std::vector<double> pair_features(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  std::vector<double> f(2 * a.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    f[k] = a[k] != b[k] ? 1.0 : 0.0;
    f[a.size() + k] = (a[k] && b[k]) ? 1.0 : 0.0;
  }
  return f;
}

/// Hinge-loss affine classifier on pair features, trained on `train_pairs`
/// and scored on `eval_pairs`. Pair indices address rows of `vectors`.
inline double attribute_only_verification(std::span<const std::vector<std::uint8_t>> vectors,
                                          std::span<const VerificationPair> train_pairs,
                                          std::span<const VerificationPair> eval_pairs,
                                          const PairClassifierOptions& opt = {}) {
  auto check_balance = [](std::span<const VerificationPair> ps, const char* name) {
    const auto g = std::count_if(ps.begin(), ps.end(), [](const auto& p) { return p.genuine; });
    if (ps.empty() || 2 * static_cast<std::size_t>(g) != ps.size()) {
      throw ConfigError(name, "pair set is not balanced (" + std::to_string(g) + " genuine of " +
                                  std::to_string(ps.size()) + ")");
    }
  };
  check_balance(train_pairs, "train_pairs");
  check_balance(eval_pairs, "eval_pairs");
  auto key = [](const VerificationPair& p) {
    return std::pair{std::min(p.left_index, p.right_index), std::max(p.left_index, p.right_index)};
  };
  std::set<std::pair<std::size_t, std::size_t>> train_keys;
  for (const auto& p : train_pairs) train_keys.insert(key(p));
  for (const auto& p : eval_pairs) {
    if (train_keys.count(key(p))) throw ConfigError("eval_pairs", "eval pairs overlap the training pairs");
  }
  if (vectors.empty()) throw ConfigError("vectors", "no attribute vectors");
  const std::size_t dim = 2 * vectors[0].size();
  auto build = [&](std::span<const VerificationPair> ps, std::vector<double>& x, std::vector<std::uint8_t>& y) {
    x.clear();
    y.clear();
    for (const auto& p : ps) {
      const auto f = pair_features(vectors[p.left_index], vectors[p.right_index]);
      x.insert(x.end(), f.begin(), f.end());
      y.push_back(p.genuine);
    }
  };
  std::vector<double> x_train, x_eval;
  std::vector<std::uint8_t> y_train, y_eval;
  build(train_pairs, x_train, y_train);
  build(eval_pairs, x_eval, y_eval);
  const auto clf = train_binary(x_train, dim, y_train, BinaryLoss::hinge, opt.sgd, /*order_free=*/true);

  std::size_t correct = 0;
  std::vector<double> terms(dim);
  for (std::size_t r = 0; r < y_eval.size(); ++r) {
    for (std::size_t c = 0; c < dim; ++c) terms[c] = clf.weight[c] * x_eval[r * dim + c];
    std::sort(terms.begin(), terms.end());
    double s = clf.bias;
    for (double t : terms) s += t;
    correct += (s >= 0) == (y_eval[r] == 1);
  }
  return static_cast<double>(correct) / static_cast<double>(y_eval.size());
}

/// Attribute bit vectors restricted to `columns`, one per sample.
inline std::vector<std::vector<std::uint8_t>> attribute_vectors(const SyntheticDataset& ds,
                                                                std::span<const std::size_t> columns) {
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(ds.samples.size());
  for (const auto& s : ds.samples) {
    std::vector<std::uint8_t> v;
    v.reserve(columns.size());
    for (auto c : columns) v.push_back(s.attributes[c]);
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace attrface
