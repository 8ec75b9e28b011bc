#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace nfat;
using namespace nfat::testing;

TEST(Synth, DeterministicForSeed) {
  const auto cfg = small_config(5);
  EXPECT_EQ(generate(cfg), generate(cfg));
  auto other = cfg;
  other.seed = 6;
  EXPECT_FALSE(generate(other) == generate(cfg));
}

TEST(Synth, OutputValidates) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto cfg = small_config(seed);
    cfg.ip_churn_s = 1800;
    const auto v = validate_dataset(generate(cfg));
    EXPECT_TRUE(v.empty()) << v.front().object << ": " << v.front().rule;
  }
}

TEST(Synth, SegmentationRecoversPlantedInteractions) {
  auto cfg = small_config(7);
  cfg.services = default_services();
  cfg.n_users = 4;
  const auto d = generate(cfg);
  std::set<std::vector<std::uint64_t>> planted;
  for (const auto& it : d.interactions) planted.insert(it.record_index);
  std::size_t recovered = 0;
  for (const auto& it : segment_interactions(d.records, default_signatures().signatures))
    recovered += planted.count(it.record_index);
  ASSERT_FALSE(planted.empty());
  EXPECT_GE(100.0 * static_cast<double>(recovered) / static_cast<double>(planted.size()), 99.0);
}

TEST(Synth, EveryRecordBelongsToAPlantedInteraction) {
  const auto d = generate(small_config(2));
  std::size_t total = 0;
  for (const auto& it : d.interactions) total += it.record_index.size();
  EXPECT_EQ(total, d.records.size());
}

TEST(Synth, FullCoverageUsesEveryService) {
  auto cfg = small_config(3);
  cfg.n_users = 4;
  const auto d = generate(cfg);
  const GroundTruthIndex truth(d.ground_truth);
  std::map<int, std::set<std::string>> seen;
  for (const auto& it : d.interactions) seen[truth.user_at(it.src_ip, it.start)->numeric_id].insert(it.service.name);
  ASSERT_EQ(seen.size(), 4u);
  for (const auto& [u, services] : seen) EXPECT_EQ(services.size(), cfg.services.size()) << u;
}

TEST(Synth, ChurnKeepsTruthResolvable) {
  auto cfg = small_config(4);
  cfg.n_users = 5;
  cfg.ip_churn_s = 600;
  const auto d = generate(cfg);
  EXPECT_GT(d.ground_truth.assignments.size(), 5u);
  const GroundTruthIndex truth(d.ground_truth);
  for (const auto& it : d.interactions) {
    const auto a = truth.user_at(it.src_ip, it.start);
    const auto b = truth.user_at(it.src_ip, it.end);
    ASSERT_TRUE(a && b);
    EXPECT_EQ(a->numeric_id, b->numeric_id) << "interaction " << it.interaction_id << " straddles a swap";
  }
}

TEST(Synth, FeaturesStayInRange) {
  const auto d = generate(small_config(9));
  for (const auto& it : d.interactions) {
    const auto f = featurize(it);
    EXPECT_GE(f[FeatureVector::kPacketCount], 2);
    EXPECT_GT(f[FeatureVector::kTotalBytes], 0);
    EXPECT_GE(f[FeatureVector::kUpstreamByteFraction], 0);
    EXPECT_LE(f[FeatureVector::kUpstreamByteFraction], 1);
    EXPECT_GE(f[FeatureVector::kPushFlagFraction], 0);
    EXPECT_LE(f[FeatureVector::kPushFlagFraction], 1);
    EXPECT_GE(f[FeatureVector::kDurationS], 0);
    for (double v : f.values) EXPECT_TRUE(std::isfinite(v));
  }
}

namespace {

// Per-service nearest user centroid on z-scored features, fit on the even
// interactions of each user and scored on the odd ones (interleaved so the
// hour-of-day features do not drift between the halves).
double centroid_accuracy(const Dataset& d) {
  const GroundTruthIndex truth(d.ground_truth);
  std::map<std::pair<int, std::string>, std::vector<FeatureVector>> by_pair;
  for (const auto& it : d.interactions)
    by_pair[{truth.user_at(it.src_ip, it.start)->numeric_id, it.service.name}].push_back(featurize(it));
  std::array<double, kFeatureDim> mean{}, sd{};
  double n = 0;
  for (const auto& [key, fs] : by_pair)
    for (const auto& f : fs) {
      n += 1;
      for (std::size_t k = 0; k < kFeatureDim; ++k) mean[k] += f[k];
    }
  for (auto& m : mean) m /= n;
  for (const auto& [key, fs] : by_pair)
    for (const auto& f : fs)
      for (std::size_t k = 0; k < kFeatureDim; ++k) sd[k] += (f[k] - mean[k]) * (f[k] - mean[k]) / n;
  for (auto& s : sd) s = std::max(std::sqrt(s), 1e-12);
  auto z = [&](const FeatureVector& f, std::size_t k) { return (f[k] - mean[k]) / sd[k]; };
  std::map<std::pair<int, std::string>, std::array<double, kFeatureDim>> centroid;
  for (const auto& [key, fs] : by_pair) {
    auto& c = centroid[key];
    const double fit = static_cast<double>((fs.size() + 1) / 2);
    for (std::size_t i = 0; i < fs.size(); i += 2)
      for (std::size_t k = 0; k < kFeatureDim; ++k) c[k] += z(fs[i], k) / fit;
  }
  std::size_t ok = 0, total = 0;
  for (const auto& [key, fs] : by_pair) {
    for (std::size_t i = 1; i < fs.size(); i += 2) {
      double best = 1e300;
      int who = 0;
      for (const auto& [ck, c] : centroid) {
        if (ck.second != key.second) continue;
        double dist = 0;
        for (std::size_t k = 0; k < kFeatureDim; ++k) dist += std::pow(z(fs[i], k) - c[k], 2);
        if (dist < best) best = dist, who = ck.first;
      }
      ok += who == key.first;
      ++total;
    }
  }
  return 100.0 * static_cast<double>(ok) / static_cast<double>(total);
}

}  // namespace

TEST(Synth, SeparabilityControlsDifficulty) {
  auto cfg = small_config(10);
  cfg.n_users = 5;
  cfg.separability = 0.25;
  const double low = centroid_accuracy(generate(cfg));
  cfg.separability = 4.0;
  const double high = centroid_accuracy(generate(cfg));
  EXPECT_LT(low, high);
  EXPECT_GE(high, 80.0);
}

TEST(Synth, ConfigJsonRoundTripAndValidation) {
  auto cfg = small_config(4);
  cfg.ip_churn_s = 900;
  const auto back = generator_config_from_json(to_json(cfg));
  EXPECT_EQ(to_json(back), to_json(cfg));
  EXPECT_THROW(generator_config_from_json({{"bogus", 1}}), ParseError);
  EXPECT_THROW(generator_config_from_json({{"n_users", 1}}), ContractViolation);
  EXPECT_THROW(generator_config_from_json({{"service_coverage", 0}}), ContractViolation);
}
