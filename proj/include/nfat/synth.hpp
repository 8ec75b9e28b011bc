#pragma once

// Seeded synthetic traffic. Each user has per-service behaviour drawn around
// a service baseline; separability scales how far users sit from that
// baseline relative to the per-interaction noise.

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "nfat/core.hpp"
#include "nfat/interaction.hpp"

namespace nfat {

struct GeneratorConfig {
  int n_users = 10;
  std::vector<ServiceId> services = default_services();
  double days = 2.0;
  std::uint64_t seed = 1;
  double separability = 1.0;
  std::optional<double> ip_churn_s;  // mean seconds between address swaps; none = constant
  double service_coverage = 0.8;
  double sessions_per_day = 10.0;
  double interactions_per_session = 20.0;
  double mean_think_s = 10.0;  // idle time between interactions, on top of the minimum gap
  double min_gap_s = 2.0;      // must exceed the signatures' idle gap
  double start_time = 1600041600.0;  // a UTC midnight
};

inline void validate(const GeneratorConfig& c) {
  auto positive = [](double v) { return v > 0 && std::isfinite(v); };
  if (c.n_users < 2) throw ContractViolation("GeneratorConfig: n_users must be >= 2");
  if (c.n_users > 250) throw ContractViolation("GeneratorConfig: n_users must be <= 250");
  if (c.services.empty()) throw ContractViolation("GeneratorConfig: services must be non-empty");
  if (!positive(c.days) || !positive(c.separability) || !positive(c.sessions_per_day) ||
      !positive(c.interactions_per_session) || !positive(c.mean_think_s) || !positive(c.min_gap_s))
    throw ContractViolation("GeneratorConfig: durations, rates and separability must be positive");
  if (!(c.service_coverage > 0 && c.service_coverage <= 1))
    throw ContractViolation("GeneratorConfig: service_coverage must be in (0, 1]");
  if (c.ip_churn_s && !positive(*c.ip_churn_s)) throw ContractViolation("GeneratorConfig: ip_churn_s must be positive");
  if (!std::isfinite(c.start_time) || c.start_time < 0) throw ContractViolation("GeneratorConfig: bad start_time");
}

inline nlohmann::json to_json(const GeneratorConfig& c) {
  nlohmann::json services = nlohmann::json::array();
  for (const auto& s : c.services) services.push_back(s.name);
  nlohmann::json j = {{"n_users", c.n_users},
                      {"services", services},
                      {"days", c.days},
                      {"seed", c.seed},
                      {"separability", c.separability},
                      {"ip_churn_s", nullptr},
                      {"service_coverage", c.service_coverage},
                      {"sessions_per_day", c.sessions_per_day},
                      {"interactions_per_session", c.interactions_per_session},
                      {"mean_think_s", c.mean_think_s},
                      {"min_gap_s", c.min_gap_s},
                      {"start_time", c.start_time}};
  if (c.ip_churn_s) j["ip_churn_s"] = *c.ip_churn_s;
  return j;
}

// Fields absent from `j` keep the values in `base`.
inline GeneratorConfig generator_config_from_json(const nlohmann::json& j, GeneratorConfig base = {}) {
  try {
    if (!j.is_object()) throw ParseError("generator config: expected an object");
    for (const auto& [key, value] : j.items()) {
      if (key == "n_users") base.n_users = value.get<int>();
      else if (key == "services") {
        base.services.clear();
        for (const auto& s : value) base.services.push_back({s.get<std::string>()});
      } else if (key == "days") base.days = value.get<double>();
      else if (key == "seed") base.seed = value.get<std::uint64_t>();
      else if (key == "separability") base.separability = value.get<double>();
      else if (key == "ip_churn_s") base.ip_churn_s = value.is_null() ? std::nullopt : std::optional(value.get<double>());
      else if (key == "service_coverage") base.service_coverage = value.get<double>();
      else if (key == "sessions_per_day") base.sessions_per_day = value.get<double>();
      else if (key == "interactions_per_session") base.interactions_per_session = value.get<double>();
      else if (key == "mean_think_s") base.mean_think_s = value.get<double>();
      else if (key == "min_gap_s") base.min_gap_s = value.get<double>();
      else if (key == "start_time") base.start_time = value.get<double>();
      else throw ParseError("generator config: unknown field '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("generator config: ") + e.what());
  }
  validate(base);
  return base;
}

// Interaction-level parameters for one (user, service). Log-space values are
// natural logs; logits feed a logistic.
struct ServiceBehavior {
  bool uses = false;
  double weight = 0.0;  // relative frequency within a session
  double log_count = 0.0;
  double log_length = 0.0;
  double upstream_logit = 0.0;
  double push_logit = 0.0;
  double log_iat = 0.0;
};

struct UserBehaviorProfile {
  UserId user;
  double preferred_hour = 12.0;
  double sessions_per_day = 10.0;
  double interactions_per_session = 20.0;
  double mean_think_s = 10.0;
  std::map<std::string, ServiceBehavior> services;
};

namespace detail {

struct ServiceBase {
  double log_count, log_length, upstream_logit, push_logit, log_iat;
  Protocol protocol;
};

inline ServiceBase service_base(const std::string& name) {
  static const std::map<std::string, ServiceBase> known = {
      {"YouTube", {4.0, 6.6, -1.8, -0.6, -3.0, Protocol::Tcp}},
      {"Facebook", {3.6, 6.1, -0.8, 0.2, -2.6, Protocol::Tcp}},
      {"Google", {3.1, 5.8, -0.4, 0.4, -2.4, Protocol::Tcp}},
      {"Twitter", {3.3, 6.0, -0.7, 0.1, -2.5, Protocol::Tcp}},
      {"Wikipedia", {3.0, 6.4, -1.2, -0.2, -2.7, Protocol::Tcp}},
      {"Hotmail", {3.4, 6.2, -0.3, 0.5, -2.3, Protocol::Tcp}},
      {"Dropbox", {3.8, 6.8, 0.2, -0.4, -2.9, Protocol::Tcp}},
      {"BBC", {3.5, 6.5, -1.5, -0.1, -2.8, Protocol::Tcp}},
      {"Skype", {4.2, 5.2, 0.0, 0.0, -3.2, Protocol::Udp}},
  };
  if (auto it = known.find(name); it != known.end()) return it->second;
  // Unknown services get a stable baseline derived from the name.
  std::mt19937_64 rng(fnv1a64(name));
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  return {3.5 + u(rng), 6.2 + u(rng), -0.8 + u(rng), u(rng), -2.7 + u(rng), Protocol::Tcp};
}

// Per-interaction noise scale for each parameter. Separability multiplies
// these to spread users apart.
struct NoiseScale {
  static constexpr double log_count = 0.35;
  static constexpr double log_length = 0.20;
  static constexpr double upstream_logit = 0.40;
  static constexpr double push_logit = 0.40;
  static constexpr double log_iat = 0.30;
};

inline constexpr double kMaxIntraGap = 0.9;
inline constexpr double kDiurnalConcentration = 1.0;
inline constexpr double kHourSpread = 2.5;

inline Ipv4 user_address(int index) { return Ipv4{(10u << 24) | (1u << 16) | static_cast<std::uint32_t>(index + 1)}; }

inline Ipv4 server_address(std::size_t service_index, int user_index) {
  // Each user talks to a fixed host inside the service's block.
  const auto host = static_cast<std::uint32_t>(1 + (user_index * 37 + 11) % 250);
  return Ipv4{(198u << 24) | (18u << 16) | (static_cast<std::uint32_t>(service_index) << 8) | host};
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

inline std::vector<UserBehaviorProfile> make_profiles(const GeneratorConfig& cfg) {
  validate(cfg);
  std::vector<UserBehaviorProfile> profiles;
  for (int u = 0; u < cfg.n_users; ++u) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x70726f66ULL, static_cast<std::uint64_t>(u)));
    std::normal_distribution<double> z(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::gamma_distribution<double> weight(2.0, 1.0);
    UserBehaviorProfile p;
    p.user = {"user" + std::string(u + 1 < 10 ? "0" : "") + std::to_string(u + 1), u + 1};
    p.preferred_hour = 24.0 * unit(rng);
    p.sessions_per_day = cfg.sessions_per_day;
    p.interactions_per_session = cfg.interactions_per_session;
    p.mean_think_s = cfg.mean_think_s;
    const double s = cfg.separability;
    bool any = false;
    for (const auto& svc : cfg.services) {
      const auto base = detail::service_base(svc.name);
      ServiceBehavior b;
      b.uses = unit(rng) < cfg.service_coverage;
      b.weight = weight(rng);
      b.log_count = base.log_count + s * detail::NoiseScale::log_count * z(rng);
      b.log_length = base.log_length + s * detail::NoiseScale::log_length * z(rng);
      b.upstream_logit = base.upstream_logit + s * detail::NoiseScale::upstream_logit * z(rng);
      b.push_logit = base.push_logit + s * detail::NoiseScale::push_logit * z(rng);
      b.log_iat = base.log_iat + s * detail::NoiseScale::log_iat * z(rng);
      any = any || b.uses;
      p.services.emplace(svc.name, b);
    }
    if (!any) p.services.at(cfg.services.front().name).uses = true;
    profiles.push_back(std::move(p));
  }
  return profiles;
}

struct ChurnEvent {
  double time = 0.0;
  int a = 0, b = 0;  // user indices whose addresses swap
};

inline std::vector<ChurnEvent> churn_schedule(const GeneratorConfig& cfg) {
  std::vector<ChurnEvent> events;
  if (!cfg.ip_churn_s) return events;
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x636875726eULL));
  std::exponential_distribution<double> gap(1.0 / *cfg.ip_churn_s);
  std::uniform_int_distribution<int> pick(0, cfg.n_users - 1);
  const double end = cfg.start_time + cfg.days * 86400.0;
  for (double t = cfg.start_time + gap(rng); t < end; t += gap(rng)) {
    const int a = pick(rng);
    int b = pick(rng);
    while (b == a) b = pick(rng);
    events.push_back({t, a, b});
  }
  return events;
}

namespace detail {

struct PlantedPacket {
  PacketRecord record;
  int user_index = 0;
  std::uint64_t planted = 0;  // index into the user's planted list
};

struct PlantedInteraction {
  std::string service;
  double start = 0, end = 0;
};

struct UserTraffic {
  std::vector<PacketRecord> packets;  // addresses filled later
  std::vector<std::size_t> owner;     // planted interaction per packet
  std::vector<PlantedInteraction> planted;
};

inline double round_us(double t) { return std::round(t * 1e6) / 1e6; }

inline UserTraffic simulate_user(const GeneratorConfig& cfg, const UserBehaviorProfile& p, int user_index,
                                 std::span<const double> blackout_times) {
  UserTraffic out;
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x75736572ULL, static_cast<std::uint64_t>(user_index)));
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::exponential_distribution<double> think(1.0 / p.mean_think_s);

  const double duration = cfg.days * 86400.0;
  std::poisson_distribution<int> n_sessions_dist(p.sessions_per_day * cfg.days);
  const int n_sessions = std::max(1, n_sessions_dist(rng));

  // Diurnal thinning around the preferred hour.
  std::vector<double> starts;
  while (static_cast<int>(starts.size()) < n_sessions) {
    const double t = duration * unit(rng);
    const double hour = std::fmod(cfg.start_time + t, 86400.0) / 3600.0;
    const double jitter = detail::kHourSpread * z(rng);
    const double angle = 2.0 * std::numbers::pi * (hour - p.preferred_hour - jitter) / 24.0;
    if (unit(rng) < std::exp(detail::kDiurnalConcentration * (std::cos(angle) - 1.0))) starts.push_back(t);
  }
  std::sort(starts.begin(), starts.end());

  std::vector<std::string> names;
  std::vector<double> weights;
  for (const auto& [name, b] : p.services)
    if (b.uses) {
      names.push_back(name);
      weights.push_back(b.weight);
    }
  std::discrete_distribution<std::size_t> choose(weights.begin(), weights.end());
  std::poisson_distribution<int> per_session(p.interactions_per_session);

  // Address blocks follow the default signature order; extra services go after it.
  std::map<std::string, std::size_t> service_index;
  const auto& known = default_services();
  for (std::size_t i = 0; i < cfg.services.size(); ++i) {
    auto pos = std::find(known.begin(), known.end(), cfg.services[i]);
    service_index[cfg.services[i].name] =
        pos != known.end() ? static_cast<std::size_t>(pos - known.begin()) : known.size() + i;
  }

  double cursor = 0.0;
  for (double session_start : starts) {
    double t = std::max(session_start, cursor + 60.0);
    const int count = std::max(1, per_session(rng));
    for (int k = 0; k < count && t < duration; ++k) {
      const auto& name = names[choose(rng)];
      const auto& b = p.services.at(name);
      const auto base = detail::service_base(name);
      const int n = std::max(3, static_cast<int>(std::lround(std::exp(b.log_count + NoiseScale::log_count * z(rng)))));
      const double len_mu = b.log_length + NoiseScale::log_length * z(rng);
      const double p_up = sigmoid(b.upstream_logit + NoiseScale::upstream_logit * z(rng));
      const double p_push = sigmoid(b.push_logit + NoiseScale::push_logit * z(rng));
      const double iat_mean = std::exp(b.log_iat + NoiseScale::log_iat * z(rng));
      std::exponential_distribution<double> iat(1.0 / iat_mean);
      const std::uint16_t eph = static_cast<std::uint16_t>(49152 + (rng() % 16384));
      const std::uint16_t port =
          base.protocol == Protocol::Udp ? static_cast<std::uint16_t>(3478 + rng() % 4) : std::uint16_t{443};

      std::vector<PacketRecord> pkts;
      double pt = t;
      for (int i = 0; i < n; ++i) {
        if (i) pt += std::min(iat(rng), kMaxIntraGap);
        PacketRecord r;
        r.timestamp = round_us(cfg.start_time + pt);
        r.protocol = base.protocol;
        r.direction = unit(rng) < p_up ? Direction::Upstream : Direction::Downstream;
        double len = std::exp(len_mu + 0.5 * z(rng));
        if (r.direction == Direction::Upstream) len *= 0.4;
        const double floor_len = base.protocol == Protocol::Tcp ? 40.0 : 28.0;
        r.length = static_cast<std::uint32_t>(std::clamp(std::lround(len), std::lround(floor_len), 1500L));
        const std::uint16_t server_port = port;
        r.src_port = r.direction == Direction::Upstream ? eph : server_port;
        r.dst_port = r.direction == Direction::Upstream ? server_port : eph;
        if (base.protocol == Protocol::Tcp) {
          r.tcp_flags = tcp_flag::kAck;
          if (i == 0 && r.direction == Direction::Upstream) r.tcp_flags |= tcp_flag::kSyn;
          if (unit(rng) < p_push) r.tcp_flags |= tcp_flag::kPsh;
        }
        pkts.push_back(r);
      }
      const double end = pt;
      // Keep a quiet margin around address swaps so no interaction spans one.
      const double lo = cfg.start_time + t - cfg.min_gap_s, hi = cfg.start_time + end + cfg.min_gap_s;
      auto blocked = std::lower_bound(blackout_times.begin(), blackout_times.end(), lo);
      if (blocked == blackout_times.end() || *blocked > hi) {
        const std::size_t idx = out.planted.size();
        out.planted.push_back({name, pkts.front().timestamp, pkts.back().timestamp});
        for (auto& r : pkts) {
          // Remote endpoint is set here; the local address is filled once
          // the address timeline is known.
          const Ipv4 server = server_address(service_index.at(name), user_index);
          if (r.direction == Direction::Upstream) r.dst_ip = server;
          else r.src_ip = server;
          out.packets.push_back(r);
          out.owner.push_back(idx);
        }
      }
      t = end + cfg.min_gap_s + think(rng);
    }
    cursor = t;
  }
  return out;
}

}  // namespace detail

// Generates a dataset whose interactions are the planted ones, in the same
// id order that segmentation assigns.
inline Dataset generate(const GeneratorConfig& cfg) {
  validate(cfg);
  const auto profiles = make_profiles(cfg);
  const auto churn = churn_schedule(cfg);

  std::vector<std::vector<double>> blackouts(static_cast<std::size_t>(cfg.n_users));
  for (const auto& e : churn) {
    blackouts[static_cast<std::size_t>(e.a)].push_back(e.time);
    blackouts[static_cast<std::size_t>(e.b)].push_back(e.time);
  }
  std::vector<detail::UserTraffic> traffic(static_cast<std::size_t>(cfg.n_users));
  parallel_for(traffic.size(), [&](std::size_t u) {
    traffic[u] = detail::simulate_user(cfg, profiles[u], static_cast<int>(u), blackouts[u]);
  });

  // Address timeline: user index -> list of (from, address).
  Dataset d;
  std::vector<int> holder(static_cast<std::size_t>(cfg.n_users));  // address slot -> user index
  std::vector<int> slot_of(static_cast<std::size_t>(cfg.n_users));
  for (int u = 0; u < cfg.n_users; ++u) holder[u] = slot_of[u] = u;
  std::vector<double> slot_since(static_cast<std::size_t>(cfg.n_users), cfg.start_time);
  std::vector<std::vector<std::pair<double, Ipv4>>> timeline(static_cast<std::size_t>(cfg.n_users));
  for (int u = 0; u < cfg.n_users; ++u) timeline[u].push_back({-std::numeric_limits<double>::infinity(), detail::user_address(u)});
  for (const auto& e : churn) {
    for (int slot : {slot_of[e.a], slot_of[e.b]}) {
      d.ground_truth.assignments.push_back({detail::user_address(slot), holder[slot] + 1, slot_since[slot], e.time});
      slot_since[slot] = e.time;
    }
    std::swap(slot_of[e.a], slot_of[e.b]);
    holder[slot_of[e.a]] = e.a;
    holder[slot_of[e.b]] = e.b;
    timeline[e.a].push_back({e.time, detail::user_address(slot_of[e.a])});
    timeline[e.b].push_back({e.time, detail::user_address(slot_of[e.b])});
  }
  for (int slot = 0; slot < cfg.n_users; ++slot)
    d.ground_truth.assignments.push_back(
        {detail::user_address(slot), holder[slot] + 1, slot_since[slot], std::numeric_limits<double>::infinity()});
  std::sort(d.ground_truth.assignments.begin(), d.ground_truth.assignments.end(), [](const auto& a, const auto& b) {
    return std::tie(a.ip.value, a.from) < std::tie(b.ip.value, b.from);
  });
  for (const auto& p : profiles) d.ground_truth.users.push_back(p.user);
  d.n_users = cfg.n_users;

  struct Ref {
    double t;
    int user;
    std::size_t k;
  };
  std::vector<Ref> order;
  for (int u = 0; u < cfg.n_users; ++u) {
    auto& tr = traffic[static_cast<std::size_t>(u)];
    const auto& tl = timeline[static_cast<std::size_t>(u)];
    for (std::size_t k = 0; k < tr.packets.size(); ++k) {
      auto& r = tr.packets[k];
      auto it = std::upper_bound(tl.begin(), tl.end(), r.timestamp,
                                 [](double t, const auto& e) { return t < e.first; });
      const Ipv4 local = std::prev(it)->second;
      if (r.direction == Direction::Upstream) r.src_ip = local;
      else r.dst_ip = local;
      order.push_back({r.timestamp, u, k});
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Ref& a, const Ref& b) { return std::tie(a.t, a.user, a.k) < std::tie(b.t, b.user, b.k); });

  std::map<std::pair<int, std::size_t>, Interaction> planted;
  d.records.reserve(order.size());
  for (const auto& ref : order) {
    const auto& tr = traffic[static_cast<std::size_t>(ref.user)];
    const auto& r = tr.packets[ref.k];
    const auto owner = tr.owner[ref.k];
    auto& it = planted[{ref.user, owner}];
    if (it.packets.empty()) {
      it.service = {tr.planted[owner].service};
      it.src_ip = r.direction == Direction::Upstream ? r.src_ip : r.dst_ip;
      it.start = r.timestamp;
    }
    it.end = r.timestamp;
    it.record_index.push_back(d.records.size());
    it.packets.push_back(r);
    d.records.push_back(r);
  }
  std::vector<Interaction> interactions;
  for (auto& [key, it] : planted) interactions.push_back(std::move(it));
  std::sort(interactions.begin(), interactions.end(), [](const Interaction& a, const Interaction& b) {
    return std::tie(a.start, a.src_ip.value, a.service.name, a.record_index.front()) <
           std::tie(b.start, b.src_ip.value, b.service.name, b.record_index.front());
  });
  for (std::size_t i = 0; i < interactions.size(); ++i) interactions[i].interaction_id = i + 1;
  d.interactions = std::move(interactions);
  return d;
}

}  // namespace nfat
