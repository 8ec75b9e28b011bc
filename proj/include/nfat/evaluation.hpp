#pragma once

// Experiment harness: batches the held-out interactions, identifies them in
// each mode, and emits the per-user, per-service, best-service and timeline
// tables plus the per-sample rows they are computed from.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfat/core.hpp"
#include "nfat/dataset_io.hpp"
#include "nfat/identity.hpp"
#include "nfat/interaction.hpp"
#include "nfat/timeline.hpp"

namespace nfat {

struct EvalConfig {
  double batch_window_s = 60.0;
  FusionConfig fusion;
  std::vector<double> windows = default_window_presets();
  double confidence_threshold = 0.9;
  std::vector<double> threshold_sweep = default_threshold_sweep();
};

inline nlohmann::json to_json(const EvalConfig& c) {
  nlohmann::json weights = nlohmann::json::object();
  for (const auto& [s, w] : c.fusion.service_weights) weights[s] = w;
  const char* rule = c.fusion.rule == FusionRule::Mean ? "mean" : c.fusion.rule == FusionRule::Max ? "max" : "weighted_mean";
  return {{"batch_window_s", c.batch_window_s},
          {"fusion_rule", rule},
          {"service_weights", weights},
          {"windows", c.windows},
          {"confidence_threshold", c.confidence_threshold},
          {"threshold_sweep", c.threshold_sweep}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j, EvalConfig c = {}) {
  try {
    c.batch_window_s = j.value("batch_window_s", c.batch_window_s);
    if (j.contains("fusion_rule")) {
      const auto r = j.at("fusion_rule").get<std::string>();
      if (r == "mean") c.fusion.rule = FusionRule::Mean;
      else if (r == "max") c.fusion.rule = FusionRule::Max;
      else if (r == "weighted_mean") c.fusion.rule = FusionRule::WeightedMean;
      else throw ParseError("eval config: unknown fusion_rule '" + r + "'");
    }
    if (j.contains("service_weights"))
      for (const auto& [s, w] : j.at("service_weights").items()) c.fusion.service_weights[s] = w.get<double>();
    if (j.contains("windows")) c.windows = j.at("windows").get<std::vector<double>>();
    c.confidence_threshold = j.value("confidence_threshold", c.confidence_threshold);
    if (j.contains("threshold_sweep")) c.threshold_sweep = j.at("threshold_sweep").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("eval config: ") + e.what());
  }
  if (!(c.batch_window_s > 0)) throw ParseError("eval config: batch_window_s must be positive");
  for (double w : c.windows)
    if (!(w >= 0)) throw ParseError("eval config: windows must be >= 0");
  for (double t : c.threshold_sweep)
    if (!(t > 0 && t < 1)) throw ParseError("eval config: thresholds must be in (0, 1)");
  if (!(c.confidence_threshold > 0 && c.confidence_threshold < 1))
    throw ParseError("eval config: confidence_threshold must be in (0, 1)");
  return c;
}

// --- batching ------------------------------------------------------------------

struct EvalBatch {
  double window_start = 0.0;
  Ipv4 src_ip;
  std::string service;  // empty for mixed-service batches
  UserId truth;
  std::vector<std::size_t> members;  // indices into the test set, chronological
};

// Groups by (src_ip, window [, service]). The batch's true user is that of its
// earliest interaction.
inline std::vector<EvalBatch> make_batches(std::span<const LabeledInteraction> test_set, double window_s,
                                           bool per_service) {
  std::map<std::tuple<double, Ipv4, std::string>, EvalBatch> groups;
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const auto& it = test_set[i].interaction;
    const double w = std::floor(it.start / window_s) * window_s;
    const std::string service = per_service ? it.service.name : std::string();
    auto& b = groups[{w, it.src_ip, service}];
    if (b.members.empty()) {
      b.window_start = w;
      b.src_ip = it.src_ip;
      b.service = service;
    }
    b.members.push_back(i);
  }
  std::vector<EvalBatch> out;
  for (auto& [key, b] : groups) {
    std::stable_sort(b.members.begin(), b.members.end(), [&](std::size_t a, std::size_t c) {
      return std::tie(test_set[a].interaction.start, test_set[a].interaction.interaction_id) <
             std::tie(test_set[c].interaction.start, test_set[c].interaction.interaction_id);
    });
    b.truth = test_set[b.members.front()].truth;
    out.push_back(std::move(b));
  }
  return out;
}

// --- results -------------------------------------------------------------------

struct RankRates {
  double rank1 = 0, rank3 = 0, rank5 = 0;
  bool operator==(const RankRates&) const = default;
};

inline RankRates rank_rates(std::span<const IdentificationResult> results) {
  RankRates r{tpir_at_rank(results, 1), tpir_at_rank(results, 3), tpir_at_rank(results, 5)};
  if (!(r.rank1 <= r.rank3 && r.rank3 <= r.rank5))
    throw ContractViolation("rank monotonicity violated: " + format_double(r.rank1) + ", " + format_double(r.rank3) +
                            ", " + format_double(r.rank5));
  return r;
}

struct Sample {
  std::string scope;  // "*" for mixed batches, otherwise the service
  double window_start = 0.0;
  Ipv4 src_ip;
  UserId truth;
  Mode mode = Mode::Fusion;
  RankedList ranked;
};

struct UserRow {
  UserId user;
  std::size_t samples = 0;
  std::map<Mode, RankRates> rates;
};

struct ServiceRow {
  std::string service;
  std::size_t users = 0;
  std::size_t samples = 0;
  std::map<Mode, RankRates> rates;
};

struct Evaluation {
  std::vector<Mode> modes;
  std::vector<UserRow> by_user;
  std::map<Mode, RankRates> user_average;
  std::vector<ServiceRow> by_service;
  std::map<Mode, RankRates> service_average;
  std::vector<BestServiceRow> best_fusion, best_max_rule;
  std::vector<Sample> samples;
  std::vector<BatchDecision> decisions;  // fused mixed-batch decisions, input to the timeline
  std::vector<UserId> users;
};

namespace detail {

inline RankRates average_rates(const std::vector<RankRates>& rows) {
  RankRates avg;
  if (rows.empty()) return avg;
  for (const auto& r : rows) {
    avg.rank1 += r.rank1;
    avg.rank3 += r.rank3;
    avg.rank5 += r.rank5;
  }
  const double n = static_cast<double>(rows.size());
  return {avg.rank1 / n, avg.rank3 / n, avg.rank5 / n};
}

}  // namespace detail

inline Evaluation evaluate(const IdentityModel& model, std::span<const LabeledInteraction> test_set,
                           const EvalConfig& cfg = {}) {
  if (test_set.empty()) throw AnalysisError("evaluate: empty test set");
  Evaluation ev;
  ev.modes = {Mode::MaxRule, Mode::Fusion};
  if (!model.pooled.empty()) ev.modes.push_back(Mode::PooledBaseline);
  ev.users = model.enrolled_users();

  std::vector<ScoreMap> bank(test_set.size()), pooled(test_set.size());
  for (std::size_t i = 0; i < test_set.size(); ++i) {
    const auto& li = test_set[i];
    bank[i] = score_features(model, li.interaction.service.name, li.features);
    pooled[i] = score_pooled(model, li.interaction.service.name, li.features);
  }
  auto identify_batch = [&](const EvalBatch& b, Mode mode) {
    std::vector<ScoreMap> maps;
    for (auto i : b.members) maps.push_back(mode == Mode::PooledBaseline ? pooled[i] : bank[i]);
    const bool scoreable = std::any_of(maps.begin(), maps.end(), [](const ScoreMap& m) { return m.service_enrolled; });
    return scoreable ? fuse(model, maps, mode, cfg.fusion) : RankedList{};
  };

  // Mixed-service batches: per-user table and timeline decisions.
  const auto mixed = make_batches(test_set, cfg.batch_window_s, false);
  std::map<Mode, std::map<int, std::vector<IdentificationResult>>> per_user;
  for (const auto& b : mixed) {
    for (Mode mode : ev.modes) {
      auto ranked = identify_batch(b, mode);
      per_user[mode][b.truth.numeric_id].push_back({ranked, b.truth});
      if (mode == Mode::Fusion) {
        BatchDecision d{b.window_start, b.src_ip, b.truth, ranked, {}};
        for (auto i : b.members)
          d.members.push_back({test_set[i].interaction.interaction_id, test_set[i].interaction.src_ip,
                               test_set[i].interaction.start});
        ev.decisions.push_back(std::move(d));
      }
      ev.samples.push_back({"*", b.window_start, b.src_ip, b.truth, mode, std::move(ranked)});
    }
  }
  std::map<Mode, std::vector<RankRates>> user_rows;
  for (const auto& u : ev.users) {
    UserRow row{u, 0, {}};
    for (Mode mode : ev.modes) {
      auto it = per_user[mode].find(u.numeric_id);
      if (it == per_user[mode].end()) continue;
      row.samples = it->second.size();
      row.rates[mode] = rank_rates(it->second);
      user_rows[mode].push_back(row.rates[mode]);
    }
    if (row.samples) ev.by_user.push_back(std::move(row));
  }
  for (Mode mode : ev.modes) ev.user_average[mode] = detail::average_rates(user_rows[mode]);

  // Single-service batches: per-service and best-service tables.
  const auto single = make_batches(test_set, cfg.batch_window_s, true);
  std::map<Mode, std::map<std::string, std::vector<IdentificationResult>>> per_service;
  std::vector<ServiceSample> fusion_samples, max_samples;
  for (const auto& b : single) {
    for (Mode mode : ev.modes) {
      auto ranked = identify_batch(b, mode);
      per_service[mode][b.service].push_back({ranked, b.truth});
      if (mode == Mode::Fusion) fusion_samples.push_back({b.service, {ranked, b.truth}});
      if (mode == Mode::MaxRule) max_samples.push_back({b.service, {ranked, b.truth}});
      ev.samples.push_back({b.service, b.window_start, b.src_ip, b.truth, mode, std::move(ranked)});
    }
  }
  std::map<Mode, std::vector<RankRates>> service_rows;
  for (const auto& [service, results] : per_service[Mode::Fusion]) {
    ServiceRow row;
    row.service = service;
    for (const auto& [key, net] : model.classifiers)
      if (key.second == service) ++row.users;
    row.samples = results.size();
    for (Mode mode : ev.modes) {
      row.rates[mode] = rank_rates(per_service[mode][service]);
      service_rows[mode].push_back(row.rates[mode]);
    }
    ev.by_service.push_back(std::move(row));
  }
  for (Mode mode : ev.modes) ev.service_average[mode] = detail::average_rates(service_rows[mode]);
  ev.best_fusion = best_service_table(ev.users, fusion_samples);
  ev.best_max_rule = best_service_table(ev.users, max_samples);
  return ev;
}

// --- timeline ------------------------------------------------------------------

struct TimelineReport {
  TimelineTable primary;
  std::vector<TimelineTable> sweep;
};

inline TimelineReport timeline_report(std::span<const BatchDecision> decisions, std::span<const UserId> users,
                                      const EvalConfig& cfg = {}) {
  TimelineReport r;
  r.primary = timeline_eval(decisions, users, cfg.windows, cfg.confidence_threshold);
  for (double theta : cfg.threshold_sweep) r.sweep.push_back(timeline_eval(decisions, users, cfg.windows, theta));
  return r;
}

// --- text and machine-readable tables ------------------------------------------

namespace detail {

inline std::string pad(std::string s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  return left ? s + std::string(width - s.size(), ' ') : std::string(width - s.size(), ' ') + s;
}

inline std::string render(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (widths.size() <= c) widths.push_back(0);
      widths[c] = std::max(widths[c], r[c].size());
    }
  std::string out;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) line += "  ";
      line += pad(r[c], widths[c], c == 0);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + '\n';
  }
  return out;
}

inline std::string pct(double v) { return format_fixed(v, 1); }

inline std::string mode_key(Mode m) {
  switch (m) {
    case Mode::MaxRule: return "max_rule";
    case Mode::Fusion: return "fusion";
    case Mode::PooledBaseline: return "pooled_baseline";
  }
  return "";
}

inline nlohmann::json rates_json(const RankRates& r) {
  return {{"rank1", r.rank1}, {"rank3", r.rank3}, {"rank5", r.rank5}};
}

inline nlohmann::json user_json(const UserId& u) { return {{"numeric_id", u.numeric_id}, {"label", u.label}}; }

inline nlohmann::json ranked_json(const RankedList& r) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& e : r.entries) a.push_back({{"user", e.user.numeric_id}, {"label", e.user.label}, {"score", e.score}});
  return a;
}

inline std::string window_label(double w) {
  return w == 0 ? std::string("W=0") : "W=" + format_double(w) + "s";
}

}  // namespace detail

inline std::string user_table_text(const Evaluation& ev) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"user", "samples"};
  for (int k : {1, 3, 5})
    for (Mode m : ev.modes) header.push_back("r" + std::to_string(k) + ":" + std::string(to_string(m)));
  rows.push_back(header);
  auto cells = [&](const std::map<Mode, RankRates>& rates) {
    std::vector<std::string> c;
    for (int k : {1, 3, 5})
      for (Mode m : ev.modes) {
        auto it = rates.find(m);
        if (it == rates.end()) { c.push_back("-"); continue; }
        c.push_back(detail::pct(k == 1 ? it->second.rank1 : k == 3 ? it->second.rank3 : it->second.rank5));
      }
    return c;
  };
  std::size_t total = 0;
  for (const auto& r : ev.by_user) {
    std::vector<std::string> row = {r.user.label, std::to_string(r.samples)};
    for (auto& c : cells(r.rates)) row.push_back(std::move(c));
    rows.push_back(std::move(row));
    total += r.samples;
  }
  std::vector<std::string> avg = {"average", std::to_string(total)};
  for (auto& c : cells(ev.user_average)) avg.push_back(std::move(c));
  rows.push_back(std::move(avg));
  return "TPIR (%) by user, rank 1/3/5\n" + detail::render(rows);
}

inline nlohmann::json user_table_json(const Evaluation& ev) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : ev.by_user) {
    nlohmann::json row = {{"user", detail::user_json(r.user)}, {"samples", r.samples}};
    for (const auto& [m, rates] : r.rates) row[detail::mode_key(m)] = detail::rates_json(rates);
    rows.push_back(std::move(row));
  }
  nlohmann::json avg = nlohmann::json::object();
  for (const auto& [m, rates] : ev.user_average) avg[detail::mode_key(m)] = detail::rates_json(rates);
  return {{"table", "tpir_by_user"}, {"rows", rows}, {"average", avg}};
}

inline std::string service_table_text(const Evaluation& ev) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"service", "users", "samples"};
  for (int k : {1, 3, 5})
    for (Mode m : ev.modes) header.push_back("r" + std::to_string(k) + ":" + std::string(to_string(m)));
  rows.push_back(header);
  auto cells = [&](const std::map<Mode, RankRates>& rates) {
    std::vector<std::string> c;
    for (int k : {1, 3, 5})
      for (Mode m : ev.modes) {
        const auto& r = rates.at(m);
        c.push_back(detail::pct(k == 1 ? r.rank1 : k == 3 ? r.rank3 : r.rank5));
      }
    return c;
  };
  for (const auto& r : ev.by_service) {
    std::vector<std::string> row = {r.service, std::to_string(r.users), std::to_string(r.samples)};
    for (auto& c : cells(r.rates)) row.push_back(std::move(c));
    rows.push_back(std::move(row));
  }
  if (!ev.by_service.empty()) {
    std::vector<std::string> avg = {"average", "", ""};
    for (auto& c : cells(ev.service_average)) avg.push_back(std::move(c));
    rows.push_back(std::move(avg));
  }
  return "TPIR (%) by service, single-service samples, rank 1/3/5\n" + detail::render(rows);
}

inline nlohmann::json service_table_json(const Evaluation& ev) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : ev.by_service) {
    nlohmann::json row = {{"service", r.service}, {"users", r.users}, {"samples", r.samples}};
    for (const auto& [m, rates] : r.rates) row[detail::mode_key(m)] = detail::rates_json(rates);
    rows.push_back(std::move(row));
  }
  nlohmann::json avg = nlohmann::json::object();
  for (const auto& [m, rates] : ev.service_average) avg[detail::mode_key(m)] = detail::rates_json(rates);
  return {{"table", "tpir_by_service"}, {"rows", rows}, {"average", avg}};
}

inline std::string best_service_text(const Evaluation& ev) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"user", "mode", "first", "tpir", "second", "tpir", "third", "tpir"});
  auto emit = [&](const std::vector<BestServiceRow>& table, std::string_view mode) {
    for (const auto& r : table) {
      std::vector<std::string> row = {r.user.label, std::string(mode)};
      if (r.insufficient_data) {
        row.push_back("insufficient-data");
      } else {
        for (std::size_t k = 0; k < 3; ++k) {
          if (k < r.top.size()) {
            row.push_back(r.top[k].service);
            row.push_back(detail::pct(r.top[k].tpir));
          } else {
            row.push_back("-");
            row.push_back("-");
          }
        }
      }
      rows.push_back(std::move(row));
    }
  };
  for (std::size_t i = 0; i < ev.best_fusion.size(); ++i) {
    emit({ev.best_fusion[i]}, "FUSION");
    emit({ev.best_max_rule[i]}, "MAX_RULE");
  }
  return "Best services by rank-1 TPIR (%)\n" + detail::render(rows);
}

inline nlohmann::json best_service_json(const Evaluation& ev) {
  auto table = [](const std::vector<BestServiceRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json top = nlohmann::json::array();
      for (const auto& s : r.top) top.push_back({{"service", s.service}, {"tpir", s.tpir}, {"samples", s.samples}});
      out.push_back({{"user", detail::user_json(r.user)}, {"top", top}, {"insufficient_data", r.insufficient_data}});
    }
    return out;
  };
  return {{"table", "best_service"}, {"fusion", table(ev.best_fusion)}, {"max_rule", table(ev.best_max_rule)}};
}

inline std::string timeline_table_text(const TimelineTable& t) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header = {"user"};
  for (double w : t.windows) header.push_back(detail::window_label(w));
  rows.push_back(header);
  for (const auto& r : t.rows) {
    std::vector<std::string> row = {r.user.label};
    for (double v : r.rates) row.push_back(detail::pct(v));
    rows.push_back(std::move(row));
  }
  std::vector<std::string> avg = {"average"};
  for (double v : t.average) avg.push_back(detail::pct(v));
  rows.push_back(std::move(avg));
  return "Rank-1 TPIR (%) after timeline attribution, theta=" + format_double(t.confidence_threshold) + "\n" +
         detail::render(rows);
}

inline nlohmann::json to_json(const TimelineTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows) rows.push_back({{"user", detail::user_json(r.user)}, {"rates", r.rates}});
  return {{"confidence_threshold", t.confidence_threshold}, {"windows", t.windows}, {"rows", rows}, {"average", t.average}};
}

inline std::string timeline_report_text(const TimelineReport& r) {
  std::string out = timeline_table_text(r.primary);
  for (const auto& t : r.sweep) out += "\n" + timeline_table_text(t);
  return out;
}

inline nlohmann::json to_json(const TimelineReport& r) {
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& t : r.sweep) sweep.push_back(to_json(t));
  return {{"table", "timeline"}, {"primary", to_json(r.primary)}, {"threshold_sweep", sweep}};
}

// One line per sample: scope,window_start,src_ip,true_user,mode,ranked
// where ranked is space-separated user:score pairs, best first.
inline std::string samples_text(std::span<const Sample> samples) {
  std::string out = "scope,window_start,src_ip,true_user,mode,ranked\n";
  for (const auto& s : samples) {
    out += s.scope + ',' + format_double(s.window_start) + ',' + s.src_ip.to_string() + ',' +
           std::to_string(s.truth.numeric_id) + ',' + std::string(to_string(s.mode)) + ',';
    for (std::size_t i = 0; i < s.ranked.entries.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(s.ranked.entries[i].user.numeric_id) + ':' + format_double(s.ranked.entries[i].score);
    }
    out += '\n';
  }
  return out;
}

inline std::string decisions_text(std::span<const BatchDecision> decisions) {
  std::string out;
  for (const auto& d : decisions) {
    nlohmann::json members = nlohmann::json::array();
    for (const auto& m : d.members) members.push_back({{"interaction_id", m.interaction_id}, {"start", m.start}});
    nlohmann::json j = {{"window_start", d.window_start},
                        {"src_ip", d.src_ip.to_string()},
                        {"truth", detail::user_json(d.truth)},
                        {"ranked", detail::ranked_json(d.ranked)},
                        {"members", members}};
    out += j.dump() + '\n';
  }
  return out;
}

inline std::vector<BatchDecision> parse_decisions(const std::string& text) {
  std::vector<BatchDecision> out;
  detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    try {
      const auto j = nlohmann::json::parse(line);
      BatchDecision d;
      d.window_start = j.at("window_start").get<double>();
      auto ip = Ipv4::parse(j.at("src_ip").get<std::string>());
      if (!ip) throw ParseError("bad src_ip");
      d.src_ip = *ip;
      d.truth = {j.at("truth").at("label").get<std::string>(), j.at("truth").at("numeric_id").get<int>()};
      for (const auto& e : j.at("ranked"))
        d.ranked.entries.push_back({{e.at("label").get<std::string>(), e.at("user").get<int>()}, e.at("score").get<double>()});
      for (const auto& m : j.at("members"))
        d.members.push_back({m.at("interaction_id").get<std::uint64_t>(), d.src_ip, m.at("start").get<double>()});
      out.push_back(std::move(d));
    } catch (const std::exception& e) {
      throw ParseError("decisions line " + std::to_string(line_no) + ": " + e.what());
    }
  });
  return out;
}

// Users seen in decisions, as truth or candidates, ordered by id.
inline std::vector<UserId> decision_users(std::span<const BatchDecision> decisions) {
  std::map<int, UserId> users;
  for (const auto& d : decisions) {
    users.emplace(d.truth.numeric_id, d.truth);
    for (const auto& e : d.ranked.entries) users.emplace(e.user.numeric_id, e.user);
  }
  std::vector<UserId> out;
  for (auto& [id, u] : users) out.push_back(u);
  return out;
}

// --- split manifest --------------------------------------------------------------

inline std::vector<SplitEntry> parse_split_manifest(const std::string& text) {
  std::vector<SplitEntry> out;
  detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    if (line_no == 1 && line == "interaction_id,user,service,half") return;
    auto f = detail::split(line, ',');
    SplitEntry s;
    if (f.size() != 4 || !parse_int(f[0], s.interaction_id) || !parse_int(f[1], s.user) ||
        (f[3] != "train" && f[3] != "test"))
      throw ParseError("split manifest line " + std::to_string(line_no) + ": malformed");
    s.service = std::string(f[2]);
    s.train = f[3] == "train";
    out.push_back(std::move(s));
  });
  return out;
}

// Rebuilds the held-out set that enroll() returned, from its split manifest.
inline std::vector<LabeledInteraction> test_set_from_split(const Dataset& dataset, const IdentityModel& model,
                                                           std::span<const SplitEntry> split) {
  std::map<std::uint64_t, const Interaction*> by_id;
  for (const auto& it : dataset.interactions) by_id.emplace(it.interaction_id, &it);
  std::vector<LabeledInteraction> out;
  for (const auto& s : split) {
    if (s.train || !model.classifiers.count({s.user, s.service})) continue;
    auto it = by_id.find(s.interaction_id);
    if (it == by_id.end())
      throw ParseError("split manifest: interaction " + std::to_string(s.interaction_id) + " not in dataset");
    if (it->second->service.name != s.service)
      throw ParseError("split manifest: interaction " + std::to_string(s.interaction_id) + " service mismatch");
    out.push_back({*it->second, model.users.at(s.user), featurize(*it->second)});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return std::tie(a.interaction.start, a.interaction.interaction_id) <
           std::tie(b.interaction.start, b.interaction.interaction_id);
  });
  return out;
}

// --- report directory -------------------------------------------------------------

inline nlohmann::json seeds_json(const IdentityModel& model) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [key, net] : model.classifiers)
    pairs.push_back({{"user", key.first}, {"service", key.second}, {"seed", net.config.seed}});
  nlohmann::json pooled = nlohmann::json::array();
  for (const auto& [service, pc] : model.pooled) pooled.push_back({{"service", service}, {"seed", pc.net.config.seed}});
  return {{"policy_seed", model.policy.seed}, {"classifiers", pairs}, {"pooled", pooled}};
}

inline void write_evaluation_files(const std::filesystem::path& dir, const Evaluation& ev) {
  atomic_write_file(dir / "table5.txt", user_table_text(ev));
  atomic_write_file(dir / "table5.json", user_table_json(ev).dump(2) + "\n");
  atomic_write_file(dir / "table6.txt", service_table_text(ev));
  atomic_write_file(dir / "table6.json", service_table_json(ev).dump(2) + "\n");
  atomic_write_file(dir / "table7.txt", best_service_text(ev));
  atomic_write_file(dir / "table7.json", best_service_json(ev).dump(2) + "\n");
  atomic_write_file(dir / "samples.csv", samples_text(ev.samples));
  atomic_write_file(dir / "decisions.jsonl", decisions_text(ev.decisions));
}

inline void write_timeline_files(const std::filesystem::path& dir, const TimelineReport& r) {
  atomic_write_file(dir / "table8.txt", timeline_report_text(r));
  atomic_write_file(dir / "table8.json", to_json(r).dump(2) + "\n");
}

inline void write_reduction_files(const std::filesystem::path& dir, const ReductionReport& r) {
  atomic_write_file(dir / "table3.txt", reduction_report_text(r));
  atomic_write_file(dir / "table3.json", to_json(r).dump(2) + "\n");
}

// --- end to end -------------------------------------------------------------------

struct ExperimentReport {
  ReductionReport reduction;
  Evaluation evaluation;
  TimelineReport timeline;
  nlohmann::json config;
  nlohmann::json seeds;
};

inline ExperimentReport run_experiments(const Dataset& dataset, const SignatureSet& signatures, const MlpConfig& mlp_cfg,
                                        const EnrollmentPolicy& policy, const EvalConfig& cfg = {}) {
  ExperimentReport r;
  r.reduction = reduction_report(dataset.records, dataset.interactions, signatures.signatures);
  Enrollment enrollment;
  try {
    enrollment = enroll(dataset, policy, mlp_cfg);
  } catch (const EnrollmentError& e) {
    throw EnrollmentError(std::string("run_experiments: ") + e.what());
  }
  r.evaluation = evaluate(enrollment.model, enrollment.test_set, cfg);
  r.timeline = timeline_report(r.evaluation.decisions, r.evaluation.users, cfg);
  // The zero-width column must reproduce the fused rank-1 baseline exactly.
  const auto& t = r.timeline.primary;
  for (std::size_t w = 0; w < t.windows.size(); ++w) {
    if (t.windows[w] != 0) continue;
    for (const auto& row : t.rows)
      for (const auto& u : r.evaluation.by_user)
        if (u.user.numeric_id == row.user.numeric_id && u.rates.at(Mode::Fusion).rank1 != row.rates[w])
          throw ContractViolation("timeline: W=0 column differs from fusion rank-1 for " + row.user.label);
  }
  r.config = {{"mlp", to_json(mlp_cfg)}, {"policy", to_json(policy)}, {"evaluation", to_json(cfg)},
              {"signatures", to_json(signatures)}};
  r.seeds = seeds_json(enrollment.model);
  return r;
}

inline void write_experiment_report(const std::filesystem::path& dir, const ExperimentReport& r) {
  atomic_write_directory(dir, [&](const std::filesystem::path& tmp) {
    write_reduction_files(tmp, r.reduction);
    write_evaluation_files(tmp, r.evaluation);
    write_timeline_files(tmp, r.timeline);
    atomic_write_file(tmp / "config.json", r.config.dump(2) + "\n");
    atomic_write_file(tmp / "seeds.json", r.seeds.dump(2) + "\n");
  });
}

}  // namespace nfat
