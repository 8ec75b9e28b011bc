#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace nfat;
using namespace nfat::testing;

TEST(Enroll, PairThresholdIsInclusive) {
  auto policy = fast_policy();
  policy.pooled_baseline = false;
  const auto e = enroll(manual_dataset({{1, {{"YouTube", 27}}}, {2, {{"YouTube", 28}}}, {3, {{"YouTube", 28}}}}),
                        policy, fast_mlp());
  EXPECT_FALSE(e.model.classifiers.count({1, "YouTube"}));
  EXPECT_TRUE(e.model.classifiers.count({2, "YouTube"}));
  EXPECT_TRUE(e.model.classifiers.count({3, "YouTube"}));
  EXPECT_EQ(e.model.enrolled_users().size(), 2u);
}

TEST(Enroll, FewerThanTwoUsersIsAnError) {
  EXPECT_THROW(enroll(manual_dataset({{1, {{"YouTube", 40}}}, {2, {{"YouTube", 10}}}}), fast_policy(), fast_mlp()),
               EnrollmentError);
}

TEST(Enroll, PairWithoutImpostorsIsSkipped) {
  auto policy = fast_policy();
  policy.pooled_baseline = false;
  const auto e = enroll(
      manual_dataset({{1, {{"YouTube", 30}, {"Skype", 30}}}, {2, {{"YouTube", 30}}}}), policy, fast_mlp());
  ASSERT_EQ(e.skipped_pairs.size(), 1u);
  EXPECT_EQ(e.skipped_pairs[0], std::make_pair(1, std::string("Skype")));
  EXPECT_FALSE(e.model.has_service("Skype"));
}

TEST(Enroll, ChronologicalHalfSplit) {
  auto policy = fast_policy();
  policy.pooled_baseline = false;
  const auto d = manual_dataset({{1, {{"YouTube", 29}}}, {2, {{"YouTube", 28}}}});
  const auto e = enroll(d, policy, fast_mlp());
  std::map<std::uint64_t, double> start;
  for (const auto& it : d.interactions) start[it.interaction_id] = it.start;
  for (int user : {1, 2}) {
    std::vector<double> train, test;
    std::set<std::uint64_t> ids;
    for (const auto& s : e.split) {
      if (s.user != user) continue;
      EXPECT_TRUE(ids.insert(s.interaction_id).second);
      (s.train ? train : test).push_back(start[s.interaction_id]);
    }
    EXPECT_EQ(train.size(), user == 1 ? 15u : 14u);
    EXPECT_EQ(test.size(), 14u);
    EXPECT_LT(*std::max_element(train.begin(), train.end()), *std::min_element(test.begin(), test.end()));
  }
  EXPECT_EQ(e.test_set.size(), 28u);
  for (const auto& li : e.test_set)
    EXPECT_TRUE(std::none_of(e.split.begin(), e.split.end(), [&](const SplitEntry& s) {
      return s.train && s.interaction_id == li.interaction.interaction_id;
    }));
}

TEST(Enroll, SeededRandomSplitIsDisjointAndDeterministic) {
  auto policy = fast_policy();
  policy.pooled_baseline = false;
  policy.split = SplitMode::SeededRandom;
  const auto d = manual_dataset({{1, {{"YouTube", 30}}}, {2, {{"YouTube", 30}}}});
  const auto a = enroll(d, policy, fast_mlp());
  const auto b = enroll(d, policy, fast_mlp());
  EXPECT_EQ(split_manifest_text(a.split), split_manifest_text(b.split));
  EXPECT_EQ(a.split.size(), 60u);
  EXPECT_EQ(std::count_if(a.split.begin(), a.split.end(), [](auto& s) { return s.train; }), 30);
}

TEST(Scoring, KeysCoverEnrolledUsersOfTheService) {
  const auto m = constant_model({{1, {{"A", 0.9}, {"B", 0.2}}}, {2, {{"A", 0.4}}}, {3, {{"B", 0.8}}}});
  const auto it = toy_interaction(1, "A", "10.0.0.1", 0);
  const auto s = score_interaction(m, it);
  EXPECT_TRUE(s.service_enrolled);
  EXPECT_EQ(s.scores.size(), 2u);
  EXPECT_NEAR(s.scores.at(1), 0.9, 1e-12);
  EXPECT_NEAR(s.scores.at(2), 0.4, 1e-12);
  EXPECT_FALSE(score_interaction(m, toy_interaction(2, "C", "10.0.0.1", 0)).service_enrolled);
}

TEST(Fusion, MeanOverBatch) {
  const auto m = constant_model({{1, {{"A", 0.9}, {"B", 0.5}}}, {2, {{"A", 0.6}, {"B", 0.6}}}});
  IdentificationBatch batch{{toy_interaction(1, "A", "10.0.0.1", 0), toy_interaction(2, "B", "10.0.0.1", 5)},
                            Mode::Fusion};
  const auto fused = identify(m, batch);
  ASSERT_EQ(fused.entries.size(), 2u);
  EXPECT_EQ(fused.entries[0].user.numeric_id, 1);
  EXPECT_NEAR(fused.entries[0].score, 0.7, 1e-12);
  EXPECT_NEAR(fused.entries[1].score, 0.6, 1e-12);
  batch.mode = Mode::MaxRule;
  const auto max = identify(m, batch);
  EXPECT_NEAR(max.entries[0].score, 0.9, 1e-12);
}

TEST(Fusion, UnscoreableBatchIsAnError) {
  const auto m = constant_model({{1, {{"A", 0.9}}}, {2, {{"A", 0.1}}}});
  IdentificationBatch batch{{toy_interaction(1, "Z", "10.0.0.1", 0)}, Mode::Fusion};
  EXPECT_THROW(identify(m, batch), AnalysisError);
  batch.interactions.push_back(toy_interaction(2, "A", "10.0.0.2", 0));
  EXPECT_THROW(identify(m, batch), ContractViolation);
  EXPECT_THROW(identify(m, IdentificationBatch{}), ContractViolation);
}

TEST(Fusion, SingleInteractionMaxEqualsMean) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = dyadic_model(rng, 6, {"A", "B"});
    IdentificationBatch b{{toy_interaction(1, rng() % 2 ? "A" : "B", "10.0.0.1", 0)}, Mode::Fusion};
    if (!score_interaction(m, b.interactions[0]).service_enrolled) continue;
    const auto fused = identify(m, b);
    b.mode = Mode::MaxRule;
    EXPECT_EQ(fused, identify(m, b));
  }
}

TEST(Fusion, AgreesWithReferenceRanking) {
  std::mt19937_64 rng(22);
  const std::vector<std::string> services = {"A", "B", "C", "D"};
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = dyadic_model(rng, 1 + static_cast<int>(rng() % 8), services);
    IdentificationBatch b;
    const auto n = 1 + rng() % 6;
    for (std::size_t i = 0; i < n; ++i) b.interactions.push_back(toy_interaction(i + 1, services[rng() % 4], "10.0.0.1", i));
    if (reference_rank(m, b.interactions, Mode::Fusion).empty()) continue;
    for (Mode mode : {Mode::Fusion, Mode::MaxRule}) {
      const auto ref = reference_rank(m, b.interactions, mode);
      b.mode = mode;
      const auto got = identify(m, b);
      ASSERT_EQ(got.entries.size(), ref.size());
      for (std::size_t k = 0; k < ref.size(); ++k) {
        EXPECT_EQ(got.entries[k].user.numeric_id, ref[k].second);
        EXPECT_NEAR(got.entries[k].score, ref[k].first, 1e-12);
      }
    }
  }
}

TEST(Fusion, InvariantToBatchOrder) {
  // Dyadic scores keep every partial sum exact, so any order gives equal results.
  std::mt19937_64 rng(23);
  const auto m = constant_model({{1, {}}, {2, {}}, {3, {}}, {4, {}}, {5, {}}});
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<ScoreMap> maps;
    for (int i = 0; i < 6; ++i) {
      ScoreMap s{std::string(1, static_cast<char>('A' + rng() % 3)), {}, rng() % 5 != 0};
      if (s.service_enrolled)
        for (int u = 1; u <= 5; ++u)
          if (rng() % 3) s.scores[u] = static_cast<double>(rng() % 16) / 16.0;
      maps.push_back(s);
    }
    for (Mode mode : {Mode::Fusion, Mode::MaxRule}) {
      RankedList before;
      try {
        before = fuse(m, maps, mode);
      } catch (const AnalysisError&) {
        continue;
      }
      auto shuffled = maps;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      EXPECT_EQ(fuse(m, shuffled, mode), before);
    }
  }
}

TEST(Fusion, MaxRuleOrderSurvivesMonotoneTransform) {
  std::mt19937_64 rng(24);
  const std::vector<std::string> services = {"A", "B"};
  for (int trial = 0; trial < 100; ++trial) {
    std::map<int, std::map<std::string, double>> raw, squashed;
    for (int u = 1; u <= 5; ++u)
      for (const auto& s : services) {
        const double v = static_cast<double>(1 + rng() % 99) / 100.0;
        raw[u][s] = v;
        squashed[u][s] = 0.05 + 0.9 * v * v;  // increasing on (0, 1)
      }
    IdentificationBatch b{{toy_interaction(1, "A", "10.0.0.1", 0), toy_interaction(2, "B", "10.0.0.1", 1)},
                          Mode::MaxRule};
    const auto x = identify(constant_model(raw), b);
    const auto y = identify(constant_model(squashed), b);
    for (std::size_t k = 0; k < x.entries.size(); ++k)
      EXPECT_EQ(x.entries[k].user.numeric_id, y.entries[k].user.numeric_id);
  }
}

TEST(Tpir, RankFixture) {
  // True users sit at positions 1, 2 and 4.
  auto list = [](std::vector<int> ids) {
    RankedList r;
    for (int id : ids) r.entries.push_back({{"u" + std::to_string(id), id}, 0.0});
    return r;
  };
  const std::vector<IdentificationResult> results = {{list({1, 2, 3, 4, 5}), {"u1", 1}},
                                                     {list({1, 2, 3, 4, 5}), {"u2", 2}},
                                                     {list({1, 2, 3, 4, 5}), {"u4", 4}}};
  EXPECT_NEAR(tpir_at_rank(results, 1), 100.0 / 3, 1e-12);
  EXPECT_NEAR(tpir_at_rank(results, 2), 200.0 / 3, 1e-12);
  EXPECT_NEAR(tpir_at_rank(results, 3), 200.0 / 3, 1e-12);
  EXPECT_DOUBLE_EQ(tpir_at_rank(results, 5), 100.0);
  EXPECT_EQ(format_percent(tpir_at_rank(results, 1)), "33.3");
  EXPECT_EQ(format_percent(tpir_at_rank(results, 3)), "66.7");
  EXPECT_THROW(tpir_at_rank(results, 0), DomainError);
  EXPECT_THROW(tpir_at_rank({}, 1), DomainError);
}

TEST(Tpir, MonotoneInRank) {
  std::mt19937_64 rng(25);
  std::vector<IdentificationResult> results;
  for (int i = 0; i < 200; ++i) {
    RankedList r;
    std::vector<int> ids = {1, 2, 3, 4, 5, 6};
    std::shuffle(ids.begin(), ids.end(), rng);
    for (int id : ids) r.entries.push_back({{"u", id}, 0.0});
    results.push_back({r, {"u", 1 + static_cast<int>(rng() % 6)}});
  }
  double prev = 0;
  for (int k = 1; k <= 6; ++k) {
    const double t = tpir_at_rank(results, k);
    EXPECT_GE(t, prev);
    prev = t;
  }
  EXPECT_DOUBLE_EQ(prev, 100.0);
}

TEST(BestService, TiesGoToSmallerName) {
  auto hit = [](const std::string& s, bool ok) {
    RankedList r;
    r.entries = {{{"a", ok ? 1 : 2}, 0.9}, {{"b", ok ? 2 : 1}, 0.1}};
    return ServiceSample{s, {r, {"a", 1}}};
  };
  const std::vector<ServiceSample> samples = {hit("Zeta", true), hit("Zeta", false), hit("Alpha", true),
                                              hit("Alpha", false), hit("Mid", true)};
  const std::vector<UserId> users = {{"a", 1}, {"b", 2}};
  const auto rows = best_service_table(users, samples);
  ASSERT_EQ(rows.size(), 2u);
  ASSERT_EQ(rows[0].top.size(), 3u);
  EXPECT_EQ(rows[0].top[0].service, "Mid");
  EXPECT_EQ(rows[0].top[1].service, "Alpha");
  EXPECT_EQ(rows[0].top[2].service, "Zeta");
  EXPECT_DOUBLE_EQ(rows[0].top[1].tpir, 50.0);
  EXPECT_TRUE(rows[1].insufficient_data);
}

namespace {

// Nearest class mean in z-scored feature space, fit on the train split.
double centroid_accuracy(const Dataset& d, const Enrollment& e) {
  std::map<std::uint64_t, FeatureVector> feats;
  for (const auto& it : d.interactions) feats[it.interaction_id] = featurize(it);
  std::array<double, kFeatureDim> mean{}, sd{};
  std::size_t n = 0;
  for (const auto& s : e.split)
    if (s.train) {
      ++n;
      for (std::size_t k = 0; k < kFeatureDim; ++k) mean[k] += feats[s.interaction_id][k];
    }
  for (auto& m : mean) m /= static_cast<double>(n);
  for (const auto& s : e.split)
    if (s.train)
      for (std::size_t k = 0; k < kFeatureDim; ++k) sd[k] += std::pow(feats[s.interaction_id][k] - mean[k], 2);
  for (auto& v : sd) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-9);
  std::map<std::pair<int, std::string>, std::pair<std::array<double, kFeatureDim>, int>> centroids;
  for (const auto& s : e.split) {
    if (!s.train) continue;
    auto& c = centroids[{s.user, s.service}];
    for (std::size_t k = 0; k < kFeatureDim; ++k) c.first[k] += (feats[s.interaction_id][k] - mean[k]) / sd[k];
    ++c.second;
  }
  std::size_t ok = 0;
  for (const auto& li : e.test_set) {
    double best = 1e300;
    int best_user = 0;
    for (const auto& [key, c] : centroids) {
      if (key.second != li.interaction.service.name) continue;
      double dist = 0;
      for (std::size_t k = 0; k < kFeatureDim; ++k)
        dist += std::pow((li.features[k] - mean[k]) / sd[k] - c.first[k] / c.second, 2);
      if (dist < best) best = dist, best_user = key.first;
    }
    ok += best_user == li.truth.numeric_id;
  }
  return 100.0 * static_cast<double>(ok) / static_cast<double>(e.test_set.size());
}

}  // namespace

TEST(Identify, WellSeparatedUsersAreRecognized) {
  auto cfg = small_config(8);
  cfg.n_users = 2;
  cfg.separability = 4.0;
  const auto d = generate(cfg);
  const auto e = enroll(d, fast_policy(), fast_mlp());
  ASSERT_FALSE(e.test_set.empty());
  std::vector<IdentificationResult> results;
  for (const auto& li : e.test_set)
    results.push_back({identify(e.model, {{li.interaction}, Mode::Fusion}), li.truth});
  const double oracle = centroid_accuracy(d, e);
  EXPECT_GE(oracle, 85.0);
  EXPECT_GE(tpir_at_rank(results, 1), 95.0) << "centroid reference " << oracle;
}

TEST(ModelJson, RoundTripKeepsScores) {
  const auto d = manual_dataset({{1, {{"YouTube", 30}}}, {2, {{"YouTube", 30}}}, {3, {{"YouTube", 30}}}});
  const auto e = enroll(d, fast_policy(), fast_mlp());
  const auto back = identity_model_from_json(nlohmann::json::parse(to_json(e.model).dump()));
  for (const auto& li : e.test_set) {
    for (Mode mode : {Mode::Fusion, Mode::PooledBaseline}) {
      const auto a = identify(e.model, {{li.interaction}, mode});
      const auto b = identify(back, {{li.interaction}, mode});
      ASSERT_EQ(a.entries.size(), b.entries.size());
      for (std::size_t k = 0; k < a.entries.size(); ++k) EXPECT_NEAR(a.entries[k].score, b.entries[k].score, 1e-12);
    }
  }
  EXPECT_EQ(to_json(back).dump(), to_json(e.model).dump());
}
