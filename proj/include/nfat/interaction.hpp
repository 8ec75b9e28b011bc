#pragma once

// Service signatures, idle-gap segmentation of packet streams into
// interactions, and the fixed-length feature summary of an interaction.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "nfat/core.hpp"

namespace nfat {

struct Cidr {
  Ipv4 network;
  int prefix = 32;

  bool operator==(const Cidr&) const = default;

  std::uint32_t mask() const { return prefix == 0 ? 0u : ~std::uint32_t{0} << (32 - prefix); }
  bool contains(Ipv4 ip) const { return (ip.value & mask()) == (network.value & mask()); }

  static std::optional<Cidr> parse(std::string_view s) {
    const auto slash = s.find('/');
    auto ip = Ipv4::parse(s.substr(0, slash));
    if (!ip) return std::nullopt;
    int prefix = 32;
    if (slash != std::string_view::npos && (!parse_int(s.substr(slash + 1), prefix) || prefix < 0 || prefix > 32))
      return std::nullopt;
    return Cidr{*ip, prefix};
  }

  std::string to_string() const { return network.to_string() + '/' + std::to_string(prefix); }
};

struct ServiceSignature {
  ServiceId service;
  std::vector<Cidr> dst_cidrs;
  std::set<std::uint16_t> dst_ports;
  int min_packets = 2;
  double idle_gap_s = 1.0;

  bool operator==(const ServiceSignature&) const = default;

  bool matches(const PacketRecord& p) const {
    const Ipv4 ip = remote_ip(p);
    const bool cidr_ok = dst_cidrs.empty() ||
                         std::any_of(dst_cidrs.begin(), dst_cidrs.end(), [ip](const Cidr& c) { return c.contains(ip); });
    return cidr_ok && (dst_ports.empty() || dst_ports.count(remote_port(p)) > 0);
  }
};

inline constexpr int kSignatureSchemaVersion = 1;

struct SignatureSet {
  int schema_version = kSignatureSchemaVersion;
  std::vector<ServiceSignature> signatures;

  std::vector<ServiceId> services() const {
    std::vector<ServiceId> out;
    for (const auto& s : signatures) out.push_back(s.service);
    return out;
  }
};

inline void validate_signatures(const SignatureSet& set) {
  if (set.schema_version != kSignatureSchemaVersion)
    throw ParseError("signature file: unsupported schema_version " + std::to_string(set.schema_version));
  std::set<std::string> names;
  for (const auto& s : set.signatures) {
    if (s.service.name.empty()) throw ParseError("signature file: service name must be non-empty");
    if (!names.insert(s.service.name).second)
      throw ParseError("signature file: duplicate service '" + s.service.name + "'");
    if (s.dst_cidrs.empty() && s.dst_ports.empty())
      throw ParseError("signature file: '" + s.service.name + "' needs dst_cidrs or dst_ports");
    if (!(s.idle_gap_s > 0)) throw ParseError("signature file: '" + s.service.name + "' idle_gap_s must be > 0");
    if (s.min_packets < 1) throw ParseError("signature file: '" + s.service.name + "' min_packets must be >= 1");
  }
}

inline nlohmann::json to_json(const SignatureSet& set) {
  nlohmann::json sigs = nlohmann::json::array();
  for (const auto& s : set.signatures) {
    nlohmann::json cidrs = nlohmann::json::array();
    for (const auto& c : s.dst_cidrs) cidrs.push_back(c.to_string());
    sigs.push_back({{"service", s.service.name},
                    {"dst_cidrs", cidrs},
                    {"dst_ports", s.dst_ports},
                    {"min_packets", s.min_packets},
                    {"idle_gap_s", s.idle_gap_s}});
  }
  return {{"schema_version", set.schema_version}, {"signatures", sigs}};
}

inline SignatureSet signatures_from_json(const nlohmann::json& j) {
  SignatureSet set;
  try {
    if (!j.contains("schema_version")) throw ParseError("signature file: schema_version is mandatory");
    set.schema_version = j.at("schema_version").get<int>();
    for (const auto& item : j.at("signatures")) {
      ServiceSignature s;
      s.service.name = item.at("service").get<std::string>();
      for (const auto& c : item.value("dst_cidrs", nlohmann::json::array())) {
        auto cidr = Cidr::parse(c.get<std::string>());
        if (!cidr) throw ParseError("signature file: invalid CIDR '" + c.get<std::string>() + "'");
        s.dst_cidrs.push_back(*cidr);
      }
      for (const auto& p : item.value("dst_ports", nlohmann::json::array())) {
        const int port = p.get<int>();
        if (port < 0 || port > 65535) throw ParseError("signature file: port out of range");
        s.dst_ports.insert(static_cast<std::uint16_t>(port));
      }
      s.min_packets = item.value("min_packets", 2);
      s.idle_gap_s = item.value("idle_gap_s", 1.0);
      set.signatures.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("signature file: ") + e.what());
  }
  validate_signatures(set);
  return set;
}

// Endpoint blocks for the nine default services. The synthetic generator
// draws server addresses from exactly these blocks.
inline const SignatureSet& default_signatures() {
  static const SignatureSet set = [] {
    SignatureSet s;
    const auto& services = default_services();
    for (std::size_t i = 0; i < services.size(); ++i) {
      ServiceSignature sig;
      sig.service = services[i];
      sig.dst_cidrs.push_back(Cidr{Ipv4{(198u << 24) | (18u << 16) | (static_cast<std::uint32_t>(i) << 8)}, 24});
      sig.dst_ports = {80, 443};
      if (services[i].name == "Skype") sig.dst_ports = {443, 3478, 3479, 3480, 3481};
      s.signatures.push_back(std::move(sig));
    }
    return s;
  }();
  return set;
}

// First signature in list order whose constraints all pass.
inline std::optional<ServiceId> match_service(const PacketRecord& p, std::span<const ServiceSignature> signatures) {
  for (const auto& s : signatures)
    if (s.matches(p)) return s.service;
  return std::nullopt;
}

inline std::optional<std::size_t> match_signature_index(const PacketRecord& p,
                                                        std::span<const ServiceSignature> signatures) {
  for (std::size_t i = 0; i < signatures.size(); ++i)
    if (signatures[i].matches(p)) return i;
  return std::nullopt;
}

// Splits each (local host, service) packet substream at idle gaps. Record
// order in the input does not matter; output is ordered by start time and
// ids are assigned 1..n in that order.
inline std::vector<Interaction> segment_interactions(std::span<const PacketRecord> records,
                                                     std::span<const ServiceSignature> signatures) {
  std::map<std::pair<Ipv4, std::size_t>, std::vector<std::uint64_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (auto sig = match_signature_index(records[i], signatures)) groups[{local_ip(records[i]), *sig}].push_back(i);
  }

  struct Cut {
    std::size_t signature;
    std::vector<std::uint64_t> members;
  };
  std::vector<Cut> cuts;
  for (auto& [key, members] : groups) {
    std::stable_sort(members.begin(), members.end(),
                     [&](std::uint64_t a, std::uint64_t b) { return records[a].timestamp < records[b].timestamp; });
    const auto& sig = signatures[key.second];
    std::vector<std::uint64_t> current;
    auto flush = [&] {
      if (static_cast<int>(current.size()) >= sig.min_packets) cuts.push_back({key.second, current});
      current.clear();
    };
    for (auto idx : members) {
      if (!current.empty() && records[idx].timestamp - records[current.back()].timestamp > sig.idle_gap_s) flush();
      current.push_back(idx);
    }
    flush();
  }

  std::vector<Interaction> out;
  out.reserve(cuts.size());
  for (auto& cut : cuts) {
    Interaction it;
    it.service = signatures[cut.signature].service;
    it.src_ip = local_ip(records[cut.members.front()]);
    it.start = records[cut.members.front()].timestamp;
    it.end = records[cut.members.back()].timestamp;
    it.packets.reserve(cut.members.size());
    for (auto idx : cut.members) it.packets.push_back(records[idx]);
    it.record_index = std::move(cut.members);
    out.push_back(std::move(it));
  }
  std::sort(out.begin(), out.end(), [](const Interaction& a, const Interaction& b) {
    return std::tie(a.start, a.src_ip, a.service, a.record_index.front()) <
           std::tie(b.start, b.src_ip, b.service, b.record_index.front());
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].interaction_id = i + 1;
  return out;
}

// --- features ------------------------------------------------------------------

inline constexpr std::size_t kFeatureDim = 10;

struct FeatureVector {
  enum Index : std::size_t {
    kPacketCount,
    kTotalBytes,
    kMeanPktLen,
    kStdPktLen,
    kDurationS,
    kMeanInterArrivalS,
    kUpstreamByteFraction,
    kPushFlagFraction,
    kHodSin,
    kHodCos,
  };

  std::array<double, kFeatureDim> values{};

  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  bool operator==(const FeatureVector&) const = default;

  static constexpr std::array<const char*, kFeatureDim> names = {
      "packet_count",       "total_bytes",        "mean_pkt_len",           "std_pkt_len", "duration_s",
      "mean_inter_arrival_s", "upstream_byte_fraction", "push_flag_fraction", "hod_sin",     "hod_cos"};
};

inline FeatureVector featurize(const Interaction& it) {
  FeatureVector f;
  const auto n = static_cast<double>(it.packets.size());
  double total = 0, upstream = 0;
  std::size_t tcp = 0, push = 0;
  for (const auto& p : it.packets) {
    total += p.length;
    if (p.direction == Direction::Upstream) upstream += p.length;
    if (p.protocol == Protocol::Tcp) {
      ++tcp;
      if (p.tcp_flags & tcp_flag::kPsh) ++push;
    }
  }
  const double mean = n > 0 ? total / n : 0.0;
  double var = 0;
  for (const auto& p : it.packets) var += (p.length - mean) * (p.length - mean);
  f[FeatureVector::kPacketCount] = n;
  f[FeatureVector::kTotalBytes] = total;
  f[FeatureVector::kMeanPktLen] = mean;
  f[FeatureVector::kStdPktLen] = n > 1 ? std::sqrt(var / n) : 0.0;
  f[FeatureVector::kDurationS] = it.end - it.start;
  f[FeatureVector::kMeanInterArrivalS] = n > 1 ? (it.end - it.start) / (n - 1) : 0.0;
  f[FeatureVector::kUpstreamByteFraction] = total > 0 ? upstream / total : 0.0;
  f[FeatureVector::kPushFlagFraction] = tcp > 0 ? static_cast<double>(push) / static_cast<double>(tcp) : 0.0;
  const double hour = std::fmod(it.start, 86400.0) / 3600.0;
  const double angle = 2.0 * std::numbers::pi * hour / 24.0;
  f[FeatureVector::kHodSin] = std::sin(angle);
  f[FeatureVector::kHodCos] = std::cos(angle);
  return f;
}

// --- reduction report ------------------------------------------------------------

struct ReductionRow {
  std::string service;
  std::uint64_t packets = 0;
  std::uint64_t interactions = 0;
  std::uint64_t sources = 0;
  std::optional<double> reduction_pct;  // empty when no packets matched
};

struct ReductionReport {
  std::vector<ReductionRow> rows;
  ReductionRow overall;
};

inline ReductionReport reduction_report(std::span<const PacketRecord> records,
                                        std::span<const Interaction> interactions,
                                        std::span<const ServiceSignature> signatures) {
  ReductionReport report;
  std::vector<std::set<Ipv4>> sources(signatures.size());
  report.rows.resize(signatures.size());
  for (std::size_t i = 0; i < signatures.size(); ++i) report.rows[i].service = signatures[i].service.name;
  for (const auto& r : records)
    if (auto i = match_signature_index(r, signatures)) ++report.rows[*i].packets;
  for (const auto& it : interactions) {
    for (std::size_t i = 0; i < signatures.size(); ++i) {
      if (signatures[i].service == it.service) {
        ++report.rows[i].interactions;
        sources[i].insert(it.src_ip);
        break;
      }
    }
  }
  report.overall.service = "Overall";
  std::set<Ipv4> all_sources;
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    auto& row = report.rows[i];
    row.sources = sources[i].size();
    all_sources.insert(sources[i].begin(), sources[i].end());
    if (row.packets > 0) row.reduction_pct = data_reduction_pct(row.packets, row.interactions);
    report.overall.packets += row.packets;
    report.overall.interactions += row.interactions;
  }
  report.overall.sources = all_sources.size();
  if (report.overall.packets > 0)
    report.overall.reduction_pct = data_reduction_pct(report.overall.packets, report.overall.interactions);
  return report;
}

inline std::string reduction_report_text(const ReductionReport& report) {
  std::ostringstream os;
  os << std::left << std::setw(14) << "Application" << std::right << std::setw(14) << "Packets" << std::setw(14)
     << "Interactions" << std::setw(13) << "Reduction %" << std::setw(10) << "Sources" << '\n';
  auto row = [&os](const ReductionRow& r) {
    os << std::left << std::setw(14) << r.service << std::right << std::setw(14) << r.packets << std::setw(14)
       << r.interactions << std::setw(13) << (r.reduction_pct ? format_percent(*r.reduction_pct) : std::string("-"))
       << std::setw(10) << r.sources << '\n';
  };
  for (const auto& r : report.rows) row(r);
  row(report.overall);
  return os.str();
}

inline nlohmann::json to_json(const ReductionReport& report) {
  auto row = [](const ReductionRow& r) {
    nlohmann::json j = {{"service", r.service},
                        {"packets", r.packets},
                        {"interactions", r.interactions},
                        {"sources", r.sources}};
    j["reduction_pct"] = r.reduction_pct ? nlohmann::json(std::stod(format_percent(*r.reduction_pct)))
                                         : nlohmann::json(nullptr);
    return j;
  };
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) rows.push_back(row(r));
  return {{"rows", rows}, {"overall", row(report.overall)}};
}

}  // namespace nfat
