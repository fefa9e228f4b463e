#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "attrface/eval.hpp"

using namespace attrface;

namespace {

// Pairs with the given genuine flags and folds; indices are unused by the
// threshold protocol.
std::vector<VerificationPair> make_pairs(const std::vector<bool>& genuine, const std::vector<std::size_t>& folds) {
  std::vector<VerificationPair> out;
  for (std::size_t i = 0; i < genuine.size(); ++i) out.push_back({2 * i, 2 * i + 1, genuine[i], folds[i]});
  return out;
}

// Exhaustive search independent of the sweep: every candidate rule is scored
// on the training pairs from scratch. Rule k calls a pair genuine when its
// score exceeds the k-th smallest distinct training score, rule "-inf" calls
// everything genuine and the rule past the largest score calls nothing
// genuine. The first rule with the highest training accuracy wins.
std::array<double, kNumFolds> brute_force_folds(const std::vector<double>& scores, const std::vector<VerificationPair>& pairs) {
  std::array<double, kNumFolds> acc{};
  for (std::size_t f = 0; f < kNumFolds; ++f) {
    std::vector<double> values;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i].fold != f) values.push_back(scores[i]);
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    auto decide = [&](int rule, double s) {
      if (rule < 0) return true;
      if (static_cast<std::size_t>(rule) + 1 == values.size()) return false;
      return s > values[static_cast<std::size_t>(rule)];
    };
    int best_rule = -1;
    long best = -1;
    for (int rule = -1; rule < static_cast<int>(values.size()); ++rule) {
      long correct = 0;
      for (std::size_t i = 0; i < pairs.size(); ++i)
        if (pairs[i].fold != f) correct += decide(rule, scores[i]) == pairs[i].genuine;
      if (correct > best) {
        best = correct;
        best_rule = rule;
      }
    }
    std::size_t hit = 0, n = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i].fold == f) {
        hit += decide(best_rule, scores[i]) == pairs[i].genuine;
        ++n;
      }
    acc[f] = static_cast<double>(hit) / static_cast<double>(n);
  }
  return acc;
}

std::vector<VerificationPair> random_pairs(Rng& rng, std::size_t n) {
  std::vector<bool> g;
  std::vector<std::size_t> folds;
  for (std::size_t i = 0; i < n; ++i) {
    g.push_back(i % 2 == 0);
    folds.push_back((i / 2) % kNumFolds);
  }
  auto pairs = make_pairs(g, folds);
  for (auto& p : pairs) p.genuine = p.genuine != (rng.uniform() < 0.2);
  return pairs;
}

SyntheticDataset bit_dataset(std::size_t ids, std::size_t imgs, std::size_t k, double rho, double eval_fraction,
                             std::uint64_t seed) {
  DatasetConfig c;
  c.num_identities = ids;
  c.images_per_identity = imgs;
  c.latent_dim = 1;
  c.input_dim = 1;
  c.attribute_specs.clear();
  for (std::size_t j = 0; j < k; ++j) c.attribute_specs.push_back({"a" + std::to_string(j), Group::hair, 0.5, rho});
  c.eval_identity_fraction = eval_fraction;
  c.seed = seed;
  return generate(c);
}

std::vector<std::size_t> all_columns(const SyntheticDataset& ds) {
  std::vector<std::size_t> cols(ds.num_attributes());
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  return cols;
}

}  // namespace

TEST(TenFold, SeparableScores) {
  std::vector<bool> g;
  std::vector<std::size_t> folds;
  std::vector<double> scores;
  for (std::size_t i = 0; i < 40; ++i) {
    g.push_back(i % 2 == 0);
    folds.push_back(i % kNumFolds);
    scores.push_back(i % 2 == 0 ? 0.9 : 0.1);
  }
  const auto r = verification_accuracy_10fold(scores, make_pairs(g, folds));
  for (double a : r.accuracy) EXPECT_EQ(a, 1.0);
  EXPECT_EQ(r.mean, 1.0);
}

TEST(TenFold, AllEqualScoresBalanced) {
  std::vector<bool> g;
  std::vector<std::size_t> folds;
  for (std::size_t i = 0; i < 20; ++i) {
    g.push_back(i % 2 == 0);
    folds.push_back(i / 2);
  }
  const auto r = verification_accuracy_10fold(std::vector<double>(20, 0.3), make_pairs(g, folds));
  for (double a : r.accuracy) EXPECT_EQ(a, 0.5);
  EXPECT_EQ(r.mean, 0.5);
}

TEST(TenFold, TwelvePairHandCase) {
  const std::vector<double> scores{0.91, 0.15, 0.62, 0.40, 0.55, 0.71, 0.05, 0.33, 0.80, 0.47, 0.58, 0.26};
  const std::vector<bool> g{true, false, true, false, false, true, false, true, true, false, true, false};
  const std::vector<std::size_t> folds{0, 0, 1, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto pairs = make_pairs(g, folds);
  const auto r = verification_accuracy_10fold(scores, pairs);
  const auto want = brute_force_folds(scores, pairs);
  for (std::size_t f = 0; f < kNumFolds; ++f) EXPECT_EQ(r.accuracy[f], want[f]) << f;
  // Fold 0 trains on the other ten pairs; cutting between 0.55 and 0.58
  // misplaces only the genuine 0.33 (train accuracy 9/10).
  EXPECT_DOUBLE_EQ(r.threshold[0], (0.55 + 0.58) / 2);
  EXPECT_EQ(r.accuracy[0], 1.0);
  EXPECT_NEAR(r.mean, std::accumulate(r.accuracy.begin(), r.accuracy.end(), 0.0) / 10, 1e-12);
}

TEST(TenFold, MatchesBruteForceOnRandomCases) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto pairs = random_pairs(rng, 20 + rng.below(60));
    std::vector<double> scores;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      // Coarse scores produce ties.
      scores.push_back(std::round(rng.uniform(-1, 1) * 8) / 8 + (pairs[i].genuine ? 0.25 : 0.0));
    }
    const auto r = verification_accuracy_10fold(scores, pairs);
    const auto want = brute_force_folds(scores, pairs);
    for (std::size_t f = 0; f < kNumFolds; ++f) ASSERT_EQ(r.accuracy[f], want[f]) << trial << " fold " << f;
  }
}

TEST(TenFold, InvariantUnderIncreasingTransforms) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto pairs = random_pairs(rng, 20 + rng.below(80));
    std::vector<double> scores;
    for (const auto& p : pairs) scores.push_back(std::clamp(rng.normal() * 0.3 + (p.genuine ? 0.3 : 0.0), -1.0, 1.0));
    const auto base = verification_accuracy_10fold(scores, pairs);
    const std::vector<std::function<double(double)>> transforms{
        [](double s) { return std::exp(3 * s); }, [](double s) { return s * s * s + s; },
        [](double s) { return 7 * s - 2; }, [](double s) { return std::atan(4 * s); }};
    for (const auto& t : transforms) {
      std::vector<double> mapped;
      for (double s : scores) mapped.push_back(t(s));
      const auto r = verification_accuracy_10fold(mapped, pairs);
      ASSERT_EQ(r.accuracy, base.accuracy) << trial;
    }
  }
}

TEST(TenFold, EvaluatedFoldNeverInspected) {
  Rng rng(9);
  const auto pairs = random_pairs(rng, 60);
  std::vector<double> scores;
  for (std::size_t i = 0; i < pairs.size(); ++i) scores.push_back(rng.uniform(-1, 1));
  const auto base = verification_accuracy_10fold(scores, pairs);
  for (std::size_t f = 0; f < kNumFolds; ++f) {
    auto poisoned = scores;
    for (std::size_t i = 0; i < pairs.size(); ++i)
      if (pairs[i].fold == f) poisoned[i] = pairs[i].genuine ? -50.0 : 50.0;
    EXPECT_EQ(verification_accuracy_10fold(poisoned, pairs).threshold[f], base.threshold[f]) << f;
  }
}

TEST(TenFold, Errors) {
  std::vector<bool> g(10, true);
  std::vector<std::size_t> folds{0, 1, 2, 3, 4, 5, 6, 7, 8, 8};
  EXPECT_THROW(verification_accuracy_10fold(std::vector<double>(10, 0.0), make_pairs(g, folds)), ConfigError);
  folds.back() = 9;
  EXPECT_THROW(verification_accuracy_10fold(std::vector<double>(9, 0.0), make_pairs(g, folds)), ShapeError);
  std::vector<double> s(10, 0.0);
  s[4] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(verification_accuracy_10fold(s, make_pairs(g, folds)), NumericError);
  folds.back() = 10;
  EXPECT_THROW(verification_accuracy_10fold(std::vector<double>(10, 0.0), make_pairs(g, folds)), ConfigError);
}

TEST(Cosine, Examples) {
  const std::vector<double> a{1, 2, 3}, b{0.5, -1, 4}, x{1, 0}, y{0, 1};
  EXPECT_EQ(cosine_similarity(a, a), 1.0);
  EXPECT_EQ(cosine_similarity(x, y), 0.0);
  const std::vector<double> a3{3, 6, 9}, b2{0.25, -0.5, 2};
  EXPECT_NEAR(cosine_similarity(a3, b2), cosine_similarity(a, b), 1e-15);
  const std::vector<double> zero{0, 0, 0};
  EXPECT_THROW(cosine_similarity(a, zero), NumericError);
}

TEST(EmbedAndScore, IdenticalSamplesScoreOne) {
  auto ds = bit_dataset(4, 3, 2, 0.5, 0.5, 0);
  ds.config.input_dim = 3;
  for (auto& s : ds.samples) s.features = {0.3 * static_cast<double>(s.identity), -0.5, 1.0};
  ds.samples[1].features = ds.samples[0].features;
  const MultiTaskModel<double> model(EncoderConfig{3, {5}, 8, 1}, 4, {});
  const std::vector<VerificationPair> pairs{{0, 1, true, 0}, {0, 0, true, 0}, {0, 11, false, 1}};
  const auto scores = embed_and_score(model, ds, pairs);
  EXPECT_NEAR(scores[0], 1.0, 1e-15);
  EXPECT_NEAR(scores[1], 1.0, 1e-15);
  EXPECT_GE(scores[2], -1.0);
  EXPECT_LE(scores[2], 1.0);
  const std::vector<std::size_t> idx{0, 1, 11};
  const auto emb = normalized_embeddings(model, ds, idx);
  EXPECT_NEAR(score_pairs(emb, 8, std::vector<VerificationPair>{{0, 2, false, 0}})[0], scores[2], 1e-15);
  ds.config.input_dim = 4;
  EXPECT_THROW(normalized_embeddings(model, ds, idx), ShapeError);
}

TEST(LinearProbe, SeparableLabels) {
  Rng rng(2);
  const std::size_t n = 400, dim = 6;
  std::vector<double> emb(n * dim);
  std::vector<std::vector<std::uint8_t>> attrs(n);
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dim; ++c) emb[i * dim + c] = rng.normal();
    attrs[i] = {static_cast<std::uint8_t>(emb[i * dim + 2] > 0), static_cast<std::uint8_t>(rng.bernoulli(0.5)), 1};
    ids[i] = i / 5;
  }
  const std::vector<std::size_t> cols{0, 1, 2};
  const auto r = linear_probe(emb, dim, attrs, ids, cols);
  ASSERT_TRUE(r.accuracy[0].has_value());
  EXPECT_GE(*r.accuracy[0], 0.99);
  ASSERT_TRUE(r.accuracy[1].has_value());
  EXPECT_FALSE(r.accuracy[2].has_value());
  EXPECT_EQ(r.degenerate, 1u);
  EXPECT_DOUBLE_EQ(r.group_mean, (*r.accuracy[0] + *r.accuracy[1]) / 2);
}

TEST(LinearProbe, IndependentBitsNearChance) {
  Rng rng(3);
  const std::size_t n = 4000, dim = 8;
  std::vector<double> emb(n * dim);
  std::vector<std::vector<std::uint8_t>> attrs(n);
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dim; ++c) emb[i * dim + c] = rng.normal();
    attrs[i] = {static_cast<std::uint8_t>(rng.bernoulli(0.5))};
    ids[i] = i / 10;
  }
  ProbeOptions opt;
  opt.sgd.epochs = 20;
  const auto r = linear_probe(emb, dim, attrs, ids, std::vector<std::size_t>{0}, opt);
  EXPECT_NEAR(*r.accuracy[0], 0.5, 3 * std::sqrt(0.25 / 2000.0));
}

TEST(LinearProbe, SplitIsIdentityDisjointAndSeeded) {
  Rng rng(4);
  const std::size_t n = 200, dim = 3;
  std::vector<double> emb(n * dim);
  std::vector<std::vector<std::uint8_t>> attrs(n);
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dim; ++c) emb[i * dim + c] = rng.normal();
    attrs[i] = {static_cast<std::uint8_t>(rng.bernoulli(0.5))};
    ids[i] = i % 20;
  }
  const auto a = linear_probe(emb, dim, attrs, ids, std::vector<std::size_t>{0});
  const auto b = linear_probe(emb, dim, attrs, ids, std::vector<std::size_t>{0});
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_THROW(linear_probe(emb, dim, attrs, std::vector<std::size_t>(n, 0), std::vector<std::size_t>{0}), ConfigError);
  EXPECT_THROW(linear_probe(std::vector<double>(5), dim, attrs, ids, std::vector<std::size_t>{0}), ShapeError);
}

TEST(Identification, ClassRankTies) {
  const std::vector<double> s{0.5, 0.9, 0.5, 0.1};
  EXPECT_EQ(class_rank(s, 1), 0u);
  EXPECT_EQ(class_rank(s, 0), 1u);
  EXPECT_EQ(class_rank(s, 2), 2u);
  EXPECT_EQ(class_rank(s, 3), 3u);
}

TEST(Identification, DistinctStableCodesArePerfect) {
  std::vector<std::vector<std::uint8_t>> vectors;
  std::vector<std::size_t> ids;
  for (std::size_t id = 0; id < 16; ++id)
    for (std::size_t k = 0; k < 6; ++k) {
      std::vector<std::uint8_t> v(4);
      for (std::size_t b = 0; b < 4; ++b) v[b] = (id >> b) & 1;
      vectors.push_back(v);
      ids.push_back(id);
    }
  const auto r = attribute_only_identification(vectors, ids);
  EXPECT_EQ(r.num_classes, 16u);
  EXPECT_EQ(r.test_samples, 16u * 2u);
  EXPECT_EQ(r.rank1, 1.0);
  EXPECT_EQ(r.rank5, 1.0);
  EXPECT_EQ(r.excluded_identities, 0u);
}

TEST(Identification, PermutedLabelsAtChance) {
  const std::size_t classes = 10, per = 300;
  Rng rng(8);
  std::vector<std::vector<std::uint8_t>> vectors;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < classes * per; ++i) {
    std::vector<std::uint8_t> v(6);
    for (auto& b : v) b = rng.bernoulli(0.5);
    vectors.push_back(v);
    ids.push_back(i % classes);
  }
  rng.shuffle(std::span<std::size_t>(ids));
  const auto r = attribute_only_identification(vectors, ids);
  const double n = static_cast<double>(r.test_samples);
  EXPECT_NEAR(r.rank1, 1.0 / classes, 3 * std::sqrt(0.1 * 0.9 / n));
  EXPECT_NEAR(r.rank5, 5.0 / classes, 3 * std::sqrt(0.5 * 0.5 / n));
}

TEST(Identification, RankFiveNeverBelowRankOne) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto ds = bit_dataset(40, 6, 5, 0.6, 0.0, seed);
    const auto r = attribute_only_identification(attribute_vectors(ds, all_columns(ds)),
                                                 [&] {
                                                   std::vector<std::size_t> ids;
                                                   for (const auto& s : ds.samples) ids.push_back(s.identity);
                                                   return ids;
                                                 }());
    EXPECT_GE(r.rank5, r.rank1);
    EXPECT_GT(r.rank1, 1.0 / 40);
  }
}

TEST(Identification, ExcludesIdentitiesAbsentFromTrain) {
  std::vector<std::vector<std::uint8_t>> vectors;
  std::vector<std::size_t> ids;
  std::vector<std::uint8_t> test;
  for (std::size_t id = 0; id < 4; ++id)
    for (std::size_t k = 0; k < 3; ++k) {
      vectors.push_back({static_cast<std::uint8_t>(id & 1), static_cast<std::uint8_t>((id >> 1) & 1)});
      ids.push_back(id);
      test.push_back(id == 3 || k == 2);
    }
  const auto r = attribute_only_identification(vectors, ids, {}, test);
  EXPECT_EQ(r.excluded_identities, 1u);
  EXPECT_EQ(r.num_classes, 3u);
  EXPECT_EQ(r.test_samples, 3u);
}

TEST(AttributeOnlyVerification, PairFeatures) {
  const std::vector<std::uint8_t> a{1, 0, 1}, b{1, 1, 0};
  EXPECT_EQ(pair_features(a, b), (std::vector<double>{0, 1, 1, 1, 0, 0}));
}

TEST(AttributeOnlyVerification, StableCodesReachCollisionBound) {
  const auto ds = bit_dataset(4000, 3, 8, 1.0, 0.5, 1);
  const auto vec = attribute_vectors(ds, all_columns(ds));
  const auto train = make_verification_pairs(ds, 20000, 2, Split::train);
  const auto eval = make_verification_pairs(ds, 5000, 3, Split::eval);
  const double acc = attribute_only_verification(vec, train, eval);
  const double optimum = (1 + (1 - std::pow(2.0, -8))) / 2;
  EXPECT_GE(acc, optimum - 0.02);
  EXPECT_LE(acc, 1.0);
}

TEST(AttributeOnlyVerification, UnstableCodesAtChance) {
  const auto ds = bit_dataset(4000, 3, 8, 0.0, 0.5, 4);
  const auto vec = attribute_vectors(ds, all_columns(ds));
  const double acc = attribute_only_verification(vec, make_verification_pairs(ds, 20000, 2, Split::train),
                                                 make_verification_pairs(ds, 5000, 3, Split::eval));
  EXPECT_NEAR(acc, 0.5, 3 * std::sqrt(0.25 / 5000));
}

TEST(AttributeOnlyVerification, InvariantToAttributeOrder) {
  const auto ds = bit_dataset(600, 4, 6, 0.7, 0.5, 5);
  const auto train = make_verification_pairs(ds, 4000, 2, Split::train);
  const auto eval = make_verification_pairs(ds, 1000, 3, Split::eval);
  const auto base = attribute_only_verification(attribute_vectors(ds, all_columns(ds)), train, eval);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  EXPECT_EQ(attribute_only_verification(attribute_vectors(ds, perm), train, eval), base);
}

TEST(AttributeOnlyVerification, Errors) {
  const auto ds = bit_dataset(100, 4, 3, 0.7, 0.5, 6);
  const auto vec = attribute_vectors(ds, all_columns(ds));
  auto train = make_verification_pairs(ds, 200, 2, Split::train);
  const auto eval = make_verification_pairs(ds, 100, 3, Split::eval);
  auto field_of = [&](std::span<const VerificationPair> t, std::span<const VerificationPair> e) -> std::string {
    try {
      attribute_only_verification(vec, t, e);
    } catch (const ConfigError& err) {
      return err.field();
    }
    return "";
  };
  auto unbalanced = train;
  unbalanced.pop_back();
  EXPECT_EQ(field_of(unbalanced, eval), "train_pairs");
  auto bad_eval = eval;
  bad_eval[0].genuine = !bad_eval[0].genuine;
  EXPECT_EQ(field_of(train, bad_eval), "eval_pairs");
  EXPECT_EQ(field_of(train, train), "eval_pairs");
  EXPECT_EQ(field_of(train, eval), "");
}
