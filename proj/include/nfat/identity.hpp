#pragma once

// Enrollment of per-(user, service) 2-class classifiers, scoring, batch
// identification under the max rule / score fusion / pooled baseline, and
// rank-k true positive identification rates.

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nfat/core.hpp"
#include "nfat/interaction.hpp"
#include "nfat/neural.hpp"

namespace nfat {

enum class SplitMode { Chronological, SeededRandom };

struct EnrollmentPolicy {
  int min_interactions_per_pair = 28;
  SplitMode split = SplitMode::Chronological;
  static constexpr double kSplitRatio = 0.5;
  std::uint64_t seed = 1;
  // Impostor samples per positive sample, at most.
  int max_negative_ratio = 5;
  bool pooled_baseline = true;
  int pooled_epochs = 400;
};

inline std::vector<double> feature_values(const FeatureVector& f) { return {f.values.begin(), f.values.end()}; }

struct LabeledInteraction {
  Interaction interaction;
  UserId truth;
  FeatureVector features;
};

struct SplitEntry {
  std::uint64_t interaction_id = 0;
  int user = 0;
  std::string service;
  bool train = false;
};

// One multiclass network per service over the users enrolled for it.
struct PooledClassifier {
  std::vector<UserId> users;
  Mlp net;
};

struct IdentityModel {
  std::map<std::pair<int, std::string>, Mlp> classifiers;
  std::map<int, UserId> users;
  std::map<std::string, PooledClassifier> pooled;
  EnrollmentPolicy policy;

  std::vector<UserId> enrolled_users() const {
    std::set<int> ids;
    for (const auto& [key, net] : classifiers) ids.insert(key.first);
    std::vector<UserId> out;
    for (int id : ids) out.push_back(users.at(id));
    return out;
  }

  bool has_service(const std::string& service) const {
    return std::any_of(classifiers.begin(), classifiers.end(),
                       [&](const auto& kv) { return kv.first.second == service; });
  }
};

struct Enrollment {
  IdentityModel model;
  std::vector<LabeledInteraction> test_set;
  std::vector<SplitEntry> split;
  std::map<std::pair<int, std::string>, TrainingReport> training;
  // Pairs that met the threshold but had no impostors to train against.
  std::vector<std::pair<int, std::string>> skipped_pairs;
};

class EnrollmentError : public AnalysisError {
 public:
  using AnalysisError::AnalysisError;
};

inline std::uint64_t pair_seed(std::uint64_t base, int user, const std::string& service) {
  return derive_seed(base, static_cast<std::uint64_t>(user), fnv1a64(service));
}

// Splits one pair's interactions (already in chronological order) into
// train and test halves. The train half takes the extra element when odd.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_pair(std::size_t n, SplitMode mode,
                                                                                std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (mode == SplitMode::SeededRandom) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  const std::size_t train_n = n - n / 2;
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_n));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(train_n), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

inline Enrollment enroll(const Dataset& dataset, const EnrollmentPolicy& policy, const MlpConfig& mlp_cfg) {
  if (policy.min_interactions_per_pair < 1) throw ContractViolation("enroll: min_interactions_per_pair must be >= 1");
  validate(mlp_cfg);
  const GroundTruthIndex truth(dataset.ground_truth);

  // (user, service) -> chronologically ordered labeled interactions
  std::map<std::pair<int, std::string>, std::vector<LabeledInteraction>> pairs;
  for (const auto& it : dataset.interactions) {
    auto user = truth.user_at(it.src_ip, it.start);
    if (!user) continue;
    pairs[{user->numeric_id, it.service.name}].push_back({it, *user, featurize(it)});
  }
  for (auto& [key, items] : pairs) {
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      return std::tie(a.interaction.start, a.interaction.interaction_id) <
             std::tie(b.interaction.start, b.interaction.interaction_id);
    });
  }

  Enrollment out;
  out.model.policy = policy;
  struct Half {
    std::vector<const LabeledInteraction*> train, test;
  };
  std::map<std::pair<int, std::string>, Half> halves;
  std::map<std::string, std::vector<int>> service_users;
  for (const auto& [key, items] : pairs) {
    if (static_cast<int>(items.size()) < policy.min_interactions_per_pair) continue;
    auto [train_idx, test_idx] = split_pair(items.size(), policy.split, pair_seed(policy.seed, key.first, key.second));
    Half h;
    for (auto i : train_idx) h.train.push_back(&items[i]);
    for (auto i : test_idx) h.test.push_back(&items[i]);
    halves[key] = std::move(h);
    service_users[key.second].push_back(key.first);
  }

  struct Job {
    std::pair<int, std::string> key;
    std::vector<std::vector<double>> positives, negatives;
    MlpConfig cfg;
  };
  std::vector<Job> jobs;
  for (const auto& [key, half] : halves) {
    const auto& [user, service] = key;
    std::vector<std::vector<double>> negatives;
    for (int other : service_users[service]) {
      if (other == user) continue;
      for (const auto* li : halves[{other, service}].train) negatives.push_back(feature_values(li->features));
    }
    if (negatives.empty()) {
      out.skipped_pairs.push_back(key);
      continue;
    }
    Job job;
    job.key = key;
    for (const auto* li : half.train) job.positives.push_back(feature_values(li->features));
    const std::size_t cap = job.positives.size() * static_cast<std::size_t>(std::max(1, policy.max_negative_ratio));
    if (negatives.size() > cap) {
      std::mt19937_64 rng(derive_seed(policy.seed, static_cast<std::uint64_t>(user), fnv1a64(service), 0x6e6567ULL));
      std::shuffle(negatives.begin(), negatives.end(), rng);
      negatives.resize(cap);
    }
    job.negatives = std::move(negatives);
    job.cfg = mlp_cfg;
    job.cfg.output_dim = 1;
    job.cfg.seed = pair_seed(mlp_cfg.seed, user, service);
    jobs.push_back(std::move(job));
  }

  std::set<int> enrolled;
  for (const auto& job : jobs) enrolled.insert(job.key.first);
  if (enrolled.size() < 2)
    throw EnrollmentError("enroll: " + std::to_string(enrolled.size()) +
                          " enrolled user(s); identification needs at least 2");

  std::vector<Mlp> nets(jobs.size());
  std::vector<TrainingReport> reports(jobs.size());
  parallel_for(jobs.size(), [&](std::size_t i) {
    nets[i] = train(jobs[i].cfg, jobs[i].positives, jobs[i].negatives, &reports[i]);
  });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    out.model.classifiers.emplace(jobs[i].key, std::move(nets[i]));
    out.training.emplace(jobs[i].key, std::move(reports[i]));
  }
  for (const auto& u : dataset.ground_truth.users)
    if (enrolled.count(u.numeric_id)) out.model.users.emplace(u.numeric_id, u);

  if (policy.pooled_baseline) {
    std::vector<std::string> services;
    for (const auto& [service, users] : service_users) {
      const auto count = std::count_if(users.begin(), users.end(),
                                       [&](int u) { return out.model.classifiers.count({u, service}) > 0; });
      if (count >= 2) services.push_back(service);
    }
    std::vector<PooledClassifier> pooled(services.size());
    parallel_for(services.size(), [&](std::size_t s) {
      const auto& service = services[s];
      PooledClassifier pc;
      std::vector<std::vector<double>> samples, targets;
      for (int u : service_users.at(service)) {
        if (!out.model.classifiers.count({u, service})) continue;
        pc.users.push_back(out.model.users.at(u));
      }
      for (std::size_t k = 0; k < pc.users.size(); ++k) {
        for (const auto* li : halves.at({pc.users[k].numeric_id, service}).train) {
          samples.push_back(feature_values(li->features));
          std::vector<double> t(pc.users.size(), 0.0);
          t[k] = 1.0;
          targets.push_back(std::move(t));
        }
      }
      MlpConfig cfg = mlp_cfg;
      cfg.output_dim = static_cast<int>(pc.users.size());
      cfg.trainer = Trainer::GradientDescent;
      cfg.epochs = policy.pooled_epochs;
      cfg.seed = derive_seed(mlp_cfg.seed, fnv1a64(service), 0x706f6f6cULL);
      pc.net = train_multi(cfg, samples, targets);
      pooled[s] = std::move(pc);
    });
    for (std::size_t s = 0; s < services.size(); ++s) out.model.pooled.emplace(services[s], std::move(pooled[s]));
  }

  for (const auto& [key, half] : halves) {
    const bool trained = out.model.classifiers.count(key) > 0;
    for (const auto* li : half.train)
      out.split.push_back({li->interaction.interaction_id, key.first, key.second, true});
    for (const auto* li : half.test) {
      out.split.push_back({li->interaction.interaction_id, key.first, key.second, false});
      if (trained) out.test_set.push_back(*li);
    }
  }
  std::sort(out.split.begin(), out.split.end(),
            [](const auto& a, const auto& b) { return a.interaction_id < b.interaction_id; });
  std::sort(out.test_set.begin(), out.test_set.end(), [](const auto& a, const auto& b) {
    return std::tie(a.interaction.start, a.interaction.interaction_id) <
           std::tie(b.interaction.start, b.interaction.interaction_id);
  });
  return out;
}

// --- scoring -------------------------------------------------------------------

struct ScoreMap {
  std::string service;
  std::map<int, double> scores;  // user numeric_id -> score
  bool service_enrolled = false;
};

inline ScoreMap score_features(const IdentityModel& model, const std::string& service, const FeatureVector& f) {
  ScoreMap out;
  out.service = service;
  for (const auto& [key, net] : model.classifiers)
    if (key.second == service) out.scores[key.first] = forward(net, f.values);
  out.service_enrolled = !out.scores.empty();
  return out;
}

inline ScoreMap score_interaction(const IdentityModel& model, const Interaction& it) {
  return score_features(model, it.service.name, featurize(it));
}

// Softmax over the pooled network's per-user outputs.
inline ScoreMap score_pooled(const IdentityModel& model, const std::string& service, const FeatureVector& f) {
  ScoreMap out;
  out.service = service;
  auto it = model.pooled.find(service);
  if (it == model.pooled.end()) return out;
  const Eigen::VectorXd z = forward_logits(it->second.net, f.values);
  const double zmax = z.maxCoeff();
  const Eigen::ArrayXd e = (z.array() - zmax).exp();
  const double total = e.sum();
  for (std::size_t k = 0; k < it->second.users.size(); ++k)
    out.scores[it->second.users[k].numeric_id] = e[static_cast<Eigen::Index>(k)] / total;
  out.service_enrolled = true;
  return out;
}

// --- identification ------------------------------------------------------------

enum class Mode { MaxRule, Fusion, PooledBaseline };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::MaxRule: return "MAX_RULE";
    case Mode::Fusion: return "FUSION";
    case Mode::PooledBaseline: return "POOLED_BASELINE";
  }
  return "";
}

enum class FusionRule { Mean, Max, WeightedMean };

struct FusionConfig {
  FusionRule rule = FusionRule::Mean;
  std::map<std::string, double> service_weights;  // WeightedMean; missing services weigh 1
};

struct RankedEntry {
  UserId user;
  double score = 0.0;
  bool operator==(const RankedEntry&) const = default;
};

struct RankedList {
  std::vector<RankedEntry> entries;
  bool operator==(const RankedList&) const = default;

  // 1-based position of `user`, or nullopt when absent.
  std::optional<std::size_t> position_of(int numeric_id) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].user.numeric_id == numeric_id) return i + 1;
    return std::nullopt;
  }
};

// Descending score; ties by ascending numeric id.
inline void sort_ranked(std::vector<RankedEntry>& entries) {
  std::sort(entries.begin(), entries.end(), [](const RankedEntry& a, const RankedEntry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.user.numeric_id < b.user.numeric_id;
  });
}

// Combines per-interaction score maps into one ranked list. MaxRule takes each
// user's maximum; Fusion applies `fusion` (mean by default); PooledBaseline
// averages. Means run over every scoreable interaction in the batch; a user
// without a classifier for one of them contributes nothing for it.
inline RankedList fuse(const IdentityModel& model, std::span<const ScoreMap> maps, Mode mode,
                       const FusionConfig& fusion = {}) {
  struct Acc {
    double sum = 0, max = -1;
  };
  std::map<int, Acc> acc;
  double total_weight = 0;
  bool any = false;
  for (const auto& m : maps) {
    if (!m.service_enrolled) continue;
    any = true;
    double w = 1.0;
    if (mode == Mode::Fusion && fusion.rule == FusionRule::WeightedMean) {
      auto it = fusion.service_weights.find(m.service);
      if (it != fusion.service_weights.end()) w = it->second;
    }
    total_weight += w;
    for (const auto& [user, score] : m.scores) {
      auto& a = acc[user];
      a.sum += w * score;
      a.max = std::max(a.max, score);
    }
  }
  if (!any) throw AnalysisError("identify: batch has no scoreable interaction");
  RankedList out;
  for (const auto& [user, a] : acc) {
    double score = 0;
    const bool use_max = mode == Mode::MaxRule || (mode == Mode::Fusion && fusion.rule == FusionRule::Max);
    if (use_max) score = a.max;
    else if (total_weight > 0) score = a.sum / total_weight;
    else continue;
    auto u = model.users.find(user);
    out.entries.push_back({u != model.users.end() ? u->second : UserId{"user" + std::to_string(user), user}, score});
  }
  sort_ranked(out.entries);
  return out;
}

struct IdentificationBatch {
  std::vector<Interaction> interactions;
  Mode mode = Mode::Fusion;
};

inline RankedList identify(const IdentityModel& model, const IdentificationBatch& batch,
                           const FusionConfig& fusion = {}) {
  if (batch.interactions.empty()) throw ContractViolation("identify: batch must be non-empty");
  for (const auto& it : batch.interactions)
    if (it.src_ip != batch.interactions.front().src_ip)
      throw ContractViolation("identify: batch interactions must share src_ip");
  std::vector<ScoreMap> maps;
  for (const auto& it : batch.interactions) {
    const auto f = featurize(it);
    maps.push_back(batch.mode == Mode::PooledBaseline ? score_pooled(model, it.service.name, f)
                                                      : score_features(model, it.service.name, f));
  }
  return fuse(model, maps, batch.mode, fusion);
}

struct IdentificationResult {
  RankedList ranked;
  UserId truth;
};

// Percentage of lists whose true user sits within the top k.
inline double tpir_at_rank(std::span<const IdentificationResult> results, int k) {
  if (k < 1) throw DomainError("tpir_at_rank: k must be >= 1");
  if (results.empty()) throw DomainError("tpir_at_rank: results must be non-empty");
  std::size_t hits = 0;
  for (const auto& r : results) {
    auto pos = r.ranked.position_of(r.truth.numeric_id);
    if (pos && *pos <= static_cast<std::size_t>(k)) ++hits;
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(results.size());
}

// --- best service --------------------------------------------------------------

struct ServiceRate {
  std::string service;
  double tpir = 0.0;
  std::size_t samples = 0;
};

struct BestServiceRow {
  UserId user;
  std::vector<ServiceRate> top;  // up to three, best first
  bool insufficient_data = false;
};

struct ServiceSample {
  std::string service;
  IdentificationResult result;
};

// Ranks each user's services by that user's rank-1 TPIR on single-service
// samples; ties go to the lexicographically smaller service name.
inline std::vector<BestServiceRow> best_service_table(std::span<const UserId> users,
                                                      std::span<const ServiceSample> samples,
                                                      std::size_t top_n = 3) {
  std::map<std::pair<int, std::string>, std::pair<std::size_t, std::size_t>> counts;  // hits, total
  for (const auto& s : samples) {
    auto& c = counts[{s.result.truth.numeric_id, s.service}];
    ++c.second;
    if (s.result.ranked.position_of(s.result.truth.numeric_id) == std::optional<std::size_t>(1)) ++c.first;
  }
  std::vector<BestServiceRow> rows;
  for (const auto& u : users) {
    BestServiceRow row;
    row.user = u;
    for (const auto& [key, c] : counts) {
      if (key.first != u.numeric_id) continue;
      row.top.push_back({key.second, 100.0 * static_cast<double>(c.first) / static_cast<double>(c.second), c.second});
    }
    std::sort(row.top.begin(), row.top.end(), [](const ServiceRate& a, const ServiceRate& b) {
      if (a.tpir != b.tpir) return a.tpir > b.tpir;
      return a.service < b.service;
    });
    if (row.top.size() > top_n) row.top.resize(top_n);
    row.insufficient_data = row.top.empty();
    rows.push_back(std::move(row));
  }
  return rows;
}

// --- persistence ---------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::json to_json(const EnrollmentPolicy& p) {
  return {{"min_interactions_per_pair", p.min_interactions_per_pair},
          {"split", p.split == SplitMode::Chronological ? "chronological" : "seeded_random"},
          {"ratio", EnrollmentPolicy::kSplitRatio},
          {"seed", p.seed},
          {"max_negative_ratio", p.max_negative_ratio},
          {"pooled_baseline", p.pooled_baseline},
          {"pooled_epochs", p.pooled_epochs}};
}

inline EnrollmentPolicy policy_from_json(const nlohmann::json& j, EnrollmentPolicy p = {}) {
  try {
    p.min_interactions_per_pair = j.value("min_interactions_per_pair", p.min_interactions_per_pair);
    if (j.contains("split")) {
      const auto s = j.at("split").get<std::string>();
      if (s == "chronological") p.split = SplitMode::Chronological;
      else if (s == "seeded_random") p.split = SplitMode::SeededRandom;
      else throw ParseError("policy: unknown split '" + s + "'");
    }
    if (j.contains("ratio") && j.at("ratio").get<double>() != EnrollmentPolicy::kSplitRatio)
      throw ParseError("policy: split ratio is fixed at 0.5");
    p.seed = j.value("seed", p.seed);
    p.max_negative_ratio = j.value("max_negative_ratio", p.max_negative_ratio);
    p.pooled_baseline = j.value("pooled_baseline", p.pooled_baseline);
    p.pooled_epochs = j.value("pooled_epochs", p.pooled_epochs);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("policy: ") + e.what());
  }
  if (p.min_interactions_per_pair < 1) throw ParseError("policy: min_interactions_per_pair must be >= 1");
  return p;
}

inline nlohmann::json to_json(const IdentityModel& m) {
  nlohmann::json users = nlohmann::json::array();
  for (const auto& [id, u] : m.users) users.push_back({{"numeric_id", id}, {"label", u.label}});
  nlohmann::json classifiers = nlohmann::json::array();
  for (const auto& [key, net] : m.classifiers)
    classifiers.push_back({{"user", key.first}, {"service", key.second}, {"mlp", to_json(net)}});
  nlohmann::json pooled = nlohmann::json::array();
  for (const auto& [service, pc] : m.pooled) {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& u : pc.users) ids.push_back(u.numeric_id);
    pooled.push_back({{"service", service}, {"users", ids}, {"mlp", to_json(pc.net)}});
  }
  return {{"format", "nfat-identity-model"},
          {"version", kModelFormatVersion},
          {"policy", to_json(m.policy)},
          {"users", users},
          {"classifiers", classifiers},
          {"pooled", pooled}};
}

inline IdentityModel identity_model_from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", "") != "nfat-identity-model" || j.value("version", 0) != kModelFormatVersion)
      throw ParseError("identity model: unsupported format or version");
    IdentityModel m;
    m.policy = policy_from_json(j.at("policy"));
    for (const auto& u : j.at("users"))
      m.users.emplace(u.at("numeric_id").get<int>(), UserId{u.at("label").get<std::string>(), u.at("numeric_id").get<int>()});
    for (const auto& c : j.at("classifiers"))
      m.classifiers.emplace(std::pair{c.at("user").get<int>(), c.at("service").get<std::string>()},
                            mlp_from_json(c.at("mlp")));
    for (const auto& p : j.at("pooled")) {
      PooledClassifier pc;
      for (const auto& id : p.at("users")) pc.users.push_back(m.users.at(id.get<int>()));
      pc.net = mlp_from_json(p.at("mlp"));
      m.pooled.emplace(p.at("service").get<std::string>(), std::move(pc));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("identity model: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw ParseError(std::string("identity model: unknown user reference: ") + e.what());
  }
}

inline std::string split_manifest_text(std::span<const SplitEntry> split) {
  std::string out = "interaction_id,user,service,half\n";
  for (const auto& s : split)
    out += std::to_string(s.interaction_id) + ',' + std::to_string(s.user) + ',' + s.service + ',' +
           (s.train ? "train" : "test") + '\n';
  return out;
}

}  // namespace nfat
