#pragma once

// Short-window IP stability: a confident identification labels every
// interaction from the same address within +/- W seconds of it.

#include <algorithm>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "nfat/core.hpp"
#include "nfat/identity.hpp"

namespace nfat {

struct TimelineConfig {
  double window_s = 30.0;
  double confidence_threshold = 0.9;
  // Only one conflict rule exists: the highest-confidence covering span wins.
};

inline void validate(const TimelineConfig& cfg) {
  if (!(cfg.window_s >= 0)) throw ContractViolation("TimelineConfig: window_s must be >= 0");
  if (!(cfg.confidence_threshold > 0 && cfg.confidence_threshold < 1))
    throw ContractViolation("TimelineConfig: confidence_threshold must be in (0, 1)");
}

inline const std::vector<double>& default_window_presets() {
  static const std::vector<double> presets = {0.0, 30.0, 60.0, 240.0};
  return presets;
}

inline const std::vector<double>& default_threshold_sweep() {
  static const std::vector<double> sweep = {0.7, 0.8, 0.9, 0.95};
  return sweep;
}

struct AttributedSpan {
  Ipv4 src_ip;
  UserId user;
  double start = 0.0;
  double end = 0.0;
  double anchor_time = 0.0;
  double anchor_confidence = 0.0;
  std::uint64_t anchor_id = 0;

  bool operator==(const AttributedSpan&) const = default;
  // Closed at start, open at end; a zero-width span covers nothing.
  bool covers(Ipv4 ip, double t) const { return ip == src_ip && t >= start && t < end; }
};

// One identification decision anchored at an interaction.
struct Decision {
  std::uint64_t interaction_id = 0;
  Ipv4 src_ip;
  double time = 0.0;
  RankedList ranked;
};

inline std::vector<AttributedSpan> build_spans(std::span<const Decision> decisions, const TimelineConfig& cfg) {
  validate(cfg);
  std::vector<AttributedSpan> spans;
  for (const auto& d : decisions) {
    if (d.ranked.entries.empty()) continue;
    const auto& top = d.ranked.entries.front();
    if (top.score < cfg.confidence_threshold) continue;
    spans.push_back({d.src_ip, top.user, d.time - cfg.window_s, d.time + cfg.window_s, d.time, top.score,
                     d.interaction_id});
  }
  std::sort(spans.begin(), spans.end(), [](const AttributedSpan& a, const AttributedSpan& b) {
    return std::tie(a.start, a.anchor_id) < std::tie(b.start, b.anchor_id);
  });
  return spans;
}

struct Attribution {
  std::optional<UserId> user;
  // Set when the label came from a span rather than the base decision.
  std::optional<std::uint64_t> anchor_id;
  double anchor_confidence = 0.0;

  bool operator==(const Attribution&) const = default;
};

struct InteractionRef {
  std::uint64_t interaction_id = 0;
  Ipv4 src_ip;
  double start = 0.0;
};

namespace detail {

// Strict preference between two covering spans.
inline bool outranks(const AttributedSpan& a, const AttributedSpan& b) {
  if (a.anchor_confidence != b.anchor_confidence) return a.anchor_confidence > b.anchor_confidence;
  if (a.anchor_time != b.anchor_time) return a.anchor_time < b.anchor_time;
  return a.anchor_id < b.anchor_id;
}

}  // namespace detail

inline std::map<std::uint64_t, Attribution> attribute_detailed(
    std::span<const InteractionRef> interactions, std::span<const AttributedSpan> spans,
    const std::map<std::uint64_t, std::optional<UserId>>& base) {
  struct PerIp {
    std::vector<const AttributedSpan*> spans;
    double widest = 0;
  };
  std::map<Ipv4, PerIp> by_ip;
  for (const auto& s : spans) {
    auto& e = by_ip[s.src_ip];
    e.spans.push_back(&s);
    e.widest = std::max(e.widest, s.end - s.start);
  }
  for (auto& [ip, e] : by_ip)
    std::stable_sort(e.spans.begin(), e.spans.end(), [](auto* a, auto* b) { return a->start < b->start; });

  std::map<std::uint64_t, Attribution> out;
  for (const auto& it : interactions) {
    Attribution a;
    if (auto b = base.find(it.interaction_id); b != base.end()) a.user = b->second;
    const AttributedSpan* best = nullptr;
    if (auto e = by_ip.find(it.src_ip); e != by_ip.end()) {
      const auto& list = e->second.spans;
      auto hi = std::upper_bound(list.begin(), list.end(), it.start,
                                 [](double t, const AttributedSpan* s) { return t < s->start; });
      for (auto p = hi; p != list.begin();) {
        --p;
        if (it.start - (*p)->start > e->second.widest) break;
        if ((*p)->covers(it.src_ip, it.start) && (!best || detail::outranks(**p, *best))) best = *p;
      }
    }
    if (best) {
      a.user = best->user;
      a.anchor_id = best->anchor_id;
      a.anchor_confidence = best->anchor_confidence;
    }
    out.emplace(it.interaction_id, std::move(a));
  }
  return out;
}

inline std::map<std::uint64_t, std::optional<UserId>> attribute(
    std::span<const InteractionRef> interactions, std::span<const AttributedSpan> spans,
    const std::map<std::uint64_t, std::optional<UserId>>& base) {
  std::map<std::uint64_t, std::optional<UserId>> out;
  for (auto& [id, a] : attribute_detailed(interactions, spans, base)) out.emplace(id, a.user);
  return out;
}

// --- evaluation ----------------------------------------------------------------

// A fused identification decision over one evaluation batch.
struct BatchDecision {
  double window_start = 0.0;
  Ipv4 src_ip;
  UserId truth;
  RankedList ranked;
  std::vector<InteractionRef> members;
};

struct TimelineRow {
  UserId user;
  std::vector<double> rates;  // one per window, percent rank-1
};

struct TimelineTable {
  double confidence_threshold = 0.9;
  std::vector<double> windows;
  std::vector<TimelineRow> rows;
  std::vector<double> average;
};

namespace detail {

// Plurality label over a batch's interactions; ties prefer the batch's own
// decision, then the smallest user id.
inline std::optional<int> batch_label(const BatchDecision& b, const std::map<std::uint64_t, std::optional<UserId>>& labels) {
  std::map<int, int> votes;
  for (const auto& m : b.members) {
    auto it = labels.find(m.interaction_id);
    if (it != labels.end() && it->second) ++votes[it->second->numeric_id];
  }
  if (votes.empty()) return std::nullopt;
  // User ids start at 1, so 0 means the batch made no decision.
  const int own = b.ranked.entries.empty() ? 0 : b.ranked.entries.front().user.numeric_id;
  int best = votes.begin()->first, best_votes = votes.begin()->second;
  for (const auto& [user, n] : votes) {
    if (n > best_votes || (n == best_votes && user == own && best != own)) {
      best = user;
      best_votes = n;
    }
  }
  return best;
}

}  // namespace detail

// Per-user rank-1 recognition after attribution, for each window. The W = 0
// column reproduces plain fused rank-1 because zero-width spans cover nothing.
inline TimelineTable timeline_eval(std::span<const BatchDecision> batches, std::span<const UserId> users,
                                   std::span<const double> windows, double confidence_threshold) {
  TimelineTable table;
  table.confidence_threshold = confidence_threshold;
  table.windows.assign(windows.begin(), windows.end());

  std::vector<Decision> decisions;
  std::vector<InteractionRef> refs;
  std::map<std::uint64_t, std::optional<UserId>> base;
  for (const auto& b : batches) {
    for (const auto& m : b.members) {
      decisions.push_back({m.interaction_id, b.src_ip, m.start, b.ranked});
      refs.push_back(m);
      base[m.interaction_id] =
          b.ranked.entries.empty() ? std::nullopt : std::optional<UserId>(b.ranked.entries.front().user);
    }
  }

  std::map<int, std::vector<std::size_t>> hits_by_user, totals_by_user;
  for (const auto& u : users) {
    hits_by_user[u.numeric_id].assign(windows.size(), 0);
    totals_by_user[u.numeric_id].assign(windows.size(), 0);
  }
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto spans = build_spans(decisions, {windows[w], confidence_threshold});
    const auto labels = attribute(refs, spans, base);
    for (const auto& b : batches) {
      auto hit = hits_by_user.find(b.truth.numeric_id);
      if (hit == hits_by_user.end()) continue;
      ++totals_by_user[b.truth.numeric_id][w];
      if (detail::batch_label(b, labels) == std::optional<int>(b.truth.numeric_id)) ++hit->second[w];
    }
  }
  table.average.assign(windows.size(), 0.0);
  std::size_t counted = 0;
  for (const auto& u : users) {
    const auto& totals = totals_by_user[u.numeric_id];
    if (totals.empty() || totals[0] == 0) continue;
    TimelineRow row{u, {}};
    for (std::size_t w = 0; w < windows.size(); ++w)
      row.rates.push_back(100.0 * static_cast<double>(hits_by_user[u.numeric_id][w]) / static_cast<double>(totals[w]));
    for (std::size_t w = 0; w < windows.size(); ++w) table.average[w] += row.rates[w];
    ++counted;
    table.rows.push_back(std::move(row));
  }
  if (counted)
    for (auto& a : table.average) a /= static_cast<double>(counted);
  return table;
}

}  // namespace nfat
