#pragma once

// Shared domain types for packet metadata, interactions, users and datasets.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <limits>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "nfat/util.hpp"

namespace nfat {

struct Ipv4 {
  std::uint32_t value = 0;

  constexpr auto operator<=>(const Ipv4&) const = default;

  static std::optional<Ipv4> parse(std::string_view s) {
    std::uint32_t v = 0;
    int parts = 0;
    while (true) {
      const std::size_t dot = s.find('.');
      const std::string_view part = s.substr(0, dot);
      unsigned octet = 0;
      if (part.empty() || part.size() > 3 || !parse_int(part, octet) || octet > 255) return std::nullopt;
      v = (v << 8) | octet;
      if (++parts > 4) return std::nullopt;
      if (dot == std::string_view::npos) break;
      s.remove_prefix(dot + 1);
    }
    if (parts != 4) return std::nullopt;
    return Ipv4{v};
  }

  std::string to_string() const {
    return std::to_string(value >> 24) + '.' + std::to_string((value >> 16) & 0xff) + '.' +
           std::to_string((value >> 8) & 0xff) + '.' + std::to_string(value & 0xff);
  }
};

enum class Protocol : std::uint8_t { Tcp, Udp, Other };
enum class Direction : std::uint8_t { Upstream, Downstream };

namespace tcp_flag {
inline constexpr std::uint8_t kFin = 0x01;
inline constexpr std::uint8_t kSyn = 0x02;
inline constexpr std::uint8_t kRst = 0x04;
inline constexpr std::uint8_t kPsh = 0x08;
inline constexpr std::uint8_t kAck = 0x10;
}  // namespace tcp_flag

inline std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::Tcp: return "TCP";
    case Protocol::Udp: return "UDP";
    case Protocol::Other: return "OTHER";
  }
  return "OTHER";
}

inline std::string_view to_string(Direction d) { return d == Direction::Upstream ? "UP" : "DOWN"; }

// One IP-header metadata observation. `length` is the IP total length.
struct PacketRecord {
  double timestamp = 0.0;
  Ipv4 src_ip;
  Ipv4 dst_ip;
  std::uint16_t src_port = 0;
  std::uint16_t dst_port = 0;
  std::uint32_t length = 0;
  Protocol protocol = Protocol::Other;
  std::uint8_t tcp_flags = 0;
  Direction direction = Direction::Upstream;

  bool operator==(const PacketRecord&) const = default;
};

// The monitored host's side of the packet.
inline Ipv4 local_ip(const PacketRecord& p) {
  return p.direction == Direction::Upstream ? p.src_ip : p.dst_ip;
}
inline Ipv4 remote_ip(const PacketRecord& p) {
  return p.direction == Direction::Upstream ? p.dst_ip : p.src_ip;
}
inline std::uint16_t remote_port(const PacketRecord& p) {
  return p.direction == Direction::Upstream ? p.dst_port : p.src_port;
}

struct ServiceId {
  std::string name;
  auto operator<=>(const ServiceId&) const = default;
};

inline const std::vector<ServiceId>& default_services() {
  static const std::vector<ServiceId> services = {
      {"YouTube"}, {"Facebook"}, {"Google"}, {"Twitter"}, {"Wikipedia"},
      {"Hotmail"}, {"Dropbox"},  {"BBC"},    {"Skype"}};
  return services;
}

struct Interaction {
  std::uint64_t interaction_id = 0;
  ServiceId service;
  Ipv4 src_ip;
  double start = 0.0;
  double end = 0.0;
  std::vector<PacketRecord> packets;
  // Positions of `packets` in the dataset record list they were cut from.
  std::vector<std::uint64_t> record_index;

  bool operator==(const Interaction&) const = default;
};

struct UserId {
  std::string label;
  int numeric_id = 0;

  bool operator==(const UserId&) const = default;
  auto operator<=>(const UserId& o) const { return numeric_id <=> o.numeric_id; }
};

// Half-open validity span [from, to) during which `ip` belongs to `user`.
struct IpAssignment {
  Ipv4 ip;
  int user = 0;
  double from = 0.0;
  double to = 0.0;

  bool operator==(const IpAssignment&) const = default;
};

struct GroundTruth {
  std::vector<UserId> users;
  std::vector<IpAssignment> assignments;

  bool operator==(const GroundTruth&) const = default;

  std::optional<UserId> user_at(Ipv4 ip, double t) const {
    for (const auto& a : assignments) {
      if (a.ip == ip && t >= a.from && t < a.to) return find_user(a.user);
    }
    return std::nullopt;
  }

  std::optional<UserId> find_user(int numeric_id) const {
    for (const auto& u : users)
      if (u.numeric_id == numeric_id) return u;
    return std::nullopt;
  }

  // The common case of a single user owning one address for all time.
  static IpAssignment forever(Ipv4 ip, int user) {
    return {ip, user, 0.0, std::numeric_limits<double>::infinity()};
  }
};

// Per-address sorted view of a GroundTruth for fast point lookups.
class GroundTruthIndex {
 public:
  explicit GroundTruthIndex(const GroundTruth& truth) : truth_(&truth) {
    for (const auto& a : truth.assignments) by_ip_[a.ip].spans.push_back(a);
    for (auto& [ip, entry] : by_ip_) {
      auto& spans = entry.spans;
      std::sort(spans.begin(), spans.end(), [](const auto& x, const auto& y) { return x.from < y.from; });
      double reach = -std::numeric_limits<double>::infinity();
      for (const auto& a : spans) entry.reach.push_back(reach = std::max(reach, a.to));
    }
  }

  std::optional<UserId> user_at(Ipv4 ip, double t) const {
    auto it = by_ip_.find(ip);
    if (it == by_ip_.end()) return std::nullopt;
    const auto& spans = it->second.spans;
    const auto& reach = it->second.reach;
    auto pos = std::upper_bound(spans.begin(), spans.end(), t,
                                [](double v, const IpAssignment& a) { return v < a.from; });
    // Walk back while some earlier span may still extend past t.
    for (auto i = pos - spans.begin(); i-- > 0 && reach[static_cast<std::size_t>(i)] > t;) {
      const auto& a = spans[static_cast<std::size_t>(i)];
      if (t >= a.from && t < a.to) return truth_->find_user(a.user);
    }
    return std::nullopt;
  }

 private:
  struct Entry {
    std::vector<IpAssignment> spans;
    std::vector<double> reach;
  };
  const GroundTruth* truth_;
  std::map<Ipv4, Entry> by_ip_;
};

struct Dataset {
  std::vector<PacketRecord> records;
  std::vector<Interaction> interactions;
  GroundTruth ground_truth;
  int n_users = 0;

  bool operator==(const Dataset&) const = default;
};

// Packet-to-interaction compression, as a percentage. Unrounded; use
// format_percent for the one-decimal display form.
inline double data_reduction_pct(std::uint64_t packet_count, std::uint64_t interaction_count) {
  if (packet_count == 0) throw DomainError("data_reduction_pct: packet_count must be >= 1");
  if (interaction_count > packet_count)
    throw DomainError("data_reduction_pct: interaction_count exceeds packet_count");
  return (1.0 - static_cast<double>(interaction_count) / static_cast<double>(packet_count)) * 100.0;
}

inline std::string format_percent(double pct) { return format_fixed(pct, 1); }

struct Violation {
  std::string object;
  std::string rule;

  bool operator==(const Violation&) const = default;
};

inline std::vector<Violation> validate_record(const PacketRecord& p, const std::string& name) {
  std::vector<Violation> out;
  if (!std::isfinite(p.timestamp) || p.timestamp < 0)
    out.push_back({name, "timestamp must be finite and non-negative"});
  if (p.protocol == Protocol::Other && (p.src_port != 0 || p.dst_port != 0))
    out.push_back({name, "ports must be 0 when protocol is OTHER"});
  if (p.protocol != Protocol::Tcp && p.tcp_flags != 0)
    out.push_back({name, "tcp_flags must be 0 unless protocol is TCP"});
  return out;
}

// Checks every type invariant; an empty result means the dataset is well formed.
inline std::vector<Violation> validate_dataset(const Dataset& d) {
  std::vector<Violation> out;
  auto append = [&out](std::vector<Violation> v) {
    out.insert(out.end(), std::make_move_iterator(v.begin()), std::make_move_iterator(v.end()));
  };
  for (std::size_t i = 0; i < d.records.size(); ++i)
    append(validate_record(d.records[i], "record " + std::to_string(i)));

  std::set<std::uint64_t> ids;
  for (const auto& it : d.interactions) {
    const std::string name = "interaction " + std::to_string(it.interaction_id);
    if (!ids.insert(it.interaction_id).second) out.push_back({name, "interaction_id must be unique"});
    if (it.service.name.empty()) out.push_back({name, "service must be non-empty"});
    if (it.end < it.start) out.push_back({name, "end must be >= start"});
    if (it.packets.empty()) {
      out.push_back({name, "packets must be non-empty"});
      continue;
    }
    for (std::size_t k = 1; k < it.packets.size(); ++k) {
      if (it.packets[k].timestamp < it.packets[k - 1].timestamp) {
        out.push_back({name, "packets must be time-ordered"});
        break;
      }
    }
    for (std::size_t k = 0; k < it.packets.size(); ++k) {
      if (local_ip(it.packets[k]) != it.src_ip) {
        out.push_back({name, "all packets must share src_ip"});
        break;
      }
      append(validate_record(it.packets[k], name + " packet " + std::to_string(k)));
    }
    if (!it.record_index.empty() && it.record_index.size() != it.packets.size())
      out.push_back({name, "record_index must align with packets"});
    for (std::size_t k = 0; k < it.record_index.size() && k < it.packets.size(); ++k) {
      const auto idx = it.record_index[k];
      if (idx >= d.records.size() || !(d.records[idx] == it.packets[k])) {
        out.push_back({name, "record_index must resolve to the dataset record"});
        break;
      }
    }
  }

  std::set<int> user_ids;
  std::set<std::string> labels;
  for (const auto& u : d.ground_truth.users) {
    if (u.numeric_id < 1) out.push_back({"user " + u.label, "numeric_id must be >= 1"});
    if (!user_ids.insert(u.numeric_id).second)
      out.push_back({"user " + std::to_string(u.numeric_id), "numeric_id must be unique"});
  }
  if (static_cast<int>(user_ids.size()) != d.n_users)
    out.push_back({"dataset", "n_users must equal the number of distinct users"});

  std::map<Ipv4, std::vector<const IpAssignment*>> by_ip;
  for (std::size_t i = 0; i < d.ground_truth.assignments.size(); ++i) {
    const auto& a = d.ground_truth.assignments[i];
    const std::string name = "assignment " + std::to_string(i);
    if (!user_ids.count(a.user)) out.push_back({name, "assignment refers to an unknown user"});
    if (!(a.to > a.from)) out.push_back({name, "assignment span must be non-empty"});
    by_ip[a.ip].push_back(&a);
  }
  for (auto& [ip, spans] : by_ip) {
    std::sort(spans.begin(), spans.end(), [](auto* x, auto* y) { return x->from < y->from; });
    double reach = -std::numeric_limits<double>::infinity();
    int reach_user = 0;
    for (const auto* a : spans) {
      if (a->from < reach && a->user != reach_user) {
        out.push_back({"ip " + ip.to_string(), "ip maps to two users over overlapping spans"});
        break;
      }
      if (a->to > reach) {
        reach = a->to;
        reach_user = a->user;
      }
    }
  }
  return out;
}

}  // namespace nfat
