#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance binary.

#include <span>

#include "nfat/ingest.hpp"
#include "test_support.hpp"

namespace nfat::testing {

// --- pcap fixtures ---

// Builds classic pcap files byte by byte. `big_endian` writes the file and
// record headers in the opposite byte order (magic reads as d4c3b2a1 on a
// little-endian reader).
class PcapBuilder {
 public:
  explicit PcapBuilder(bool big_endian = false) : big_(big_endian) {
    u32(0xa1b2c3d4);
    u16(2);
    u16(4);
    u32(0);
    u32(0);
    u32(65535);
    u32(1);
  }

  void frame(std::uint32_t sec, std::uint32_t usec, const std::vector<std::uint8_t>& data) {
    u32(sec);
    u32(usec);
    u32(static_cast<std::uint32_t>(data.size()));
    u32(static_cast<std::uint32_t>(data.size()));
    bytes_.insert(bytes_.end(), data.begin(), data.end());
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::span<const std::byte> span() const { return std::as_bytes(std::span(bytes_)); }

 private:
  void u16(std::uint16_t v) {
    if (big_) push({std::uint8_t(v >> 8), std::uint8_t(v)});
    else push({std::uint8_t(v), std::uint8_t(v >> 8)});
  }
  void u32(std::uint32_t v) {
    if (big_) push({std::uint8_t(v >> 24), std::uint8_t(v >> 16), std::uint8_t(v >> 8), std::uint8_t(v)});
    else push({std::uint8_t(v), std::uint8_t(v >> 8), std::uint8_t(v >> 16), std::uint8_t(v >> 24)});
  }
  void push(std::initializer_list<std::uint8_t> b) { bytes_.insert(bytes_.end(), b); }

  bool big_;
  std::vector<std::uint8_t> bytes_;
};

inline void be16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(std::uint8_t(v >> 8));
  b.push_back(std::uint8_t(v));
}

inline void addr(std::vector<std::uint8_t>& b, std::array<std::uint8_t, 4> a) { b.insert(b.end(), a.begin(), a.end()); }

inline std::vector<std::uint8_t> ethernet(std::uint16_t ethertype) {
  std::vector<std::uint8_t> b = {0x02, 0, 0, 0, 0, 1, 0x02, 0, 0, 0, 0, 2};
  be16(b, ethertype);
  return b;
}

// Ethernet + IPv4 + TCP/UDP header with no payload. `total_len` goes into
// the IP header and may exceed the captured bytes, as with a short snaplen.
inline std::vector<std::uint8_t> ipv4_frame(std::uint8_t proto, std::array<std::uint8_t, 4> src, std::array<std::uint8_t, 4> dst,
                                     std::uint16_t sport, std::uint16_t dport, std::uint16_t total_len,
                                     std::uint8_t flags = 0, std::uint16_t frag = 0) {
  auto b = ethernet(0x0800);
  b.push_back(0x45);
  b.push_back(0);
  be16(b, total_len);
  be16(b, 0x1234);
  be16(b, frag);
  b.push_back(64);
  b.push_back(proto);
  be16(b, 0);
  addr(b, src);
  addr(b, dst);
  be16(b, sport);
  be16(b, dport);
  if (proto == 6) {
    for (int i = 0; i < 8; ++i) b.push_back(0);  // seq, ack
    b.push_back(0x50);
    b.push_back(flags);
    be16(b, 65535);
    be16(b, 0);
    be16(b, 0);
  } else {
    be16(b, 8);
    be16(b, 0);
  }
  return b;
}

inline std::vector<std::uint8_t> arp_frame() {
  auto b = ethernet(0x0806);
  for (int i = 0; i < 28; ++i) b.push_back(std::uint8_t(i));
  return b;
}

inline std::vector<std::uint8_t> ipv6_frame() {
  auto b = ethernet(0x86dd);
  b.push_back(0x60);
  for (int i = 0; i < 39; ++i) b.push_back(0);
  return b;
}

inline IngestConfig monitored(const char* host) {
  IngestConfig c;
  c.monitored_hosts = {ip(host)};
  return c;
}

// Independent decoder over the same fixture bytes: walks the file with plain
// index arithmetic and reports (ethertype, ip src, ip dst, proto, sport, dport,
// total length, tcp flags) per IPv4 frame.
struct RefPacket {
  std::uint32_t src, dst;
  int proto, sport, dport, len, flags;
  double ts;
};

inline std::vector<RefPacket> reference_decode(const std::vector<std::uint8_t>& f, int& skipped) {
  auto rd32 = [&](std::size_t o, bool big) {
    return big ? (std::uint32_t(f[o]) << 24 | std::uint32_t(f[o + 1]) << 16 | std::uint32_t(f[o + 2]) << 8 | f[o + 3])
               : (std::uint32_t(f[o + 3]) << 24 | std::uint32_t(f[o + 2]) << 16 | std::uint32_t(f[o + 1]) << 8 | f[o]);
  };
  const bool big = f[0] == 0xa1;
  std::vector<RefPacket> out;
  skipped = 0;
  for (std::size_t o = 24; o < f.size();) {
    const double ts = rd32(o, big) + rd32(o + 4, big) / 1e6;
    const std::uint32_t n = rd32(o + 8, big);
    const std::uint8_t* p = f.data() + o + 16;
    o += 16 + n;
    if (p[12] != 0x08 || p[13] != 0x00) {
      ++skipped;
      continue;
    }
    const std::uint8_t* ipv4 = p + 14;
    const int ihl = (ipv4[0] & 15) * 4;
    RefPacket r{};
    r.ts = ts;
    r.len = ipv4[2] * 256 + ipv4[3];
    r.proto = ipv4[9];
    r.src = std::uint32_t(ipv4[12]) << 24 | std::uint32_t(ipv4[13]) << 16 | std::uint32_t(ipv4[14]) << 8 | ipv4[15];
    r.dst = std::uint32_t(ipv4[16]) << 24 | std::uint32_t(ipv4[17]) << 16 | std::uint32_t(ipv4[18]) << 8 | ipv4[19];
    r.sport = ipv4[ihl] * 256 + ipv4[ihl + 1];
    r.dport = ipv4[ihl + 2] * 256 + ipv4[ihl + 3];
    r.flags = r.proto == 6 ? ipv4[ihl + 13] : 0;
    out.push_back(r);
  }
  return out;
}

// --- segmentation ---

inline ServiceSignature sig(const std::string& name, std::vector<const char*> cidrs, std::set<std::uint16_t> ports) {
  ServiceSignature s;
  s.service = {name};
  for (auto c : cidrs) s.dst_cidrs.push_back(*Cidr::parse(c));
  s.dst_ports = std::move(ports);
  return s;
}

inline const std::vector<ServiceSignature>& two_services() {
  static const std::vector<ServiceSignature> s = {sig("Web", {"198.18.0.0/16"}, {80, 443}),
                                                  sig("Video", {"198.18.1.0/24"}, {443})};
  return s;
}

// Straightforward reference: bucket by (host, service name), sort by time,
// cut wherever consecutive timestamps differ by more than the gap.
inline std::set<std::vector<std::uint64_t>> reference_segments(const std::vector<PacketRecord>& records,
                                                        const std::vector<ServiceSignature>& sigs) {
  std::map<std::pair<std::uint32_t, std::string>, std::vector<std::uint64_t>> buckets;
  for (std::uint64_t i = 0; i < records.size(); ++i) {
    const auto& p = records[i];
    const auto host = p.direction == Direction::Upstream ? p.src_ip : p.dst_ip;
    for (const auto& s : sigs) {
      if (s.matches(p)) {
        buckets[{host.value, s.service.name}].push_back(i);
        break;
      }
    }
  }
  std::set<std::vector<std::uint64_t>> out;
  for (auto& [key, idx] : buckets) {
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return records[a].timestamp < records[b].timestamp; });
    const auto& s = *std::find_if(sigs.begin(), sigs.end(), [&](auto& x) { return x.service.name == key.second; });
    std::vector<std::uint64_t> cur;
    for (auto i : idx) {
      if (!cur.empty() && records[i].timestamp - records[cur.back()].timestamp > s.idle_gap_s) {
        if (static_cast<int>(cur.size()) >= s.min_packets) out.insert(cur);
        cur.clear();
      }
      cur.push_back(i);
    }
    if (static_cast<int>(cur.size()) >= s.min_packets) out.insert(cur);
  }
  return out;
}

inline std::vector<PacketRecord> random_stream(std::mt19937_64& rng, std::size_t n) {
  const char* hosts[] = {"10.0.0.1", "10.0.0.2", "10.0.0.3"};
  const char* servers[] = {"198.18.0.4", "198.18.1.4", "203.0.113.9"};
  const std::uint16_t ports[] = {443, 80, 22};
  std::uniform_real_distribution<double> gap(0.0, 1.6);
  std::vector<PacketRecord> out;
  double t = 0;
  for (std::size_t i = 0; i < n; ++i) {
    t += gap(rng) * (rng() % 4 == 0 ? 3.0 : 0.3);
    const char* h = hosts[rng() % 3];
    const char* s = servers[rng() % 3];
    const auto port = ports[rng() % 3];
    if (rng() % 2) out.push_back(tcp(t, h, s, 40000, port, 100, Direction::Upstream));
    else out.push_back(tcp(t, s, h, port, 40000, 1200, Direction::Downstream));
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// --- enrollment and ranking ---

// counts[user][service] interactions per pair, each user on 10.0.0.<user>
// for all time. Packet sizes depend on the user so the pairs are learnable.
inline Dataset manual_dataset(const std::map<int, std::map<std::string, int>>& counts, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0, 20);
  Dataset d;
  std::vector<Interaction> its;
  for (const auto& [user, per_service] : counts) {
    d.ground_truth.users.push_back({"user" + std::to_string(user), user});
    const std::string host = "10.0.0." + std::to_string(user);
    d.ground_truth.assignments.push_back(GroundTruth::forever(ip(host.c_str()), user));
    int k = 0;
    for (const auto& [service, n] : per_service) {
      for (int i = 0; i < n; ++i, ++k) {
        Interaction it = toy_interaction(0, service, host.c_str(), 1000.0 * k + 7.0 * user);
        it.packets[0].length = static_cast<std::uint32_t>(200 * user + noise(rng) + 300);
        it.packets[1].length = static_cast<std::uint32_t>(900 + 150 * user + noise(rng));
        its.push_back(it);
      }
    }
  }
  std::sort(its.begin(), its.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  for (std::size_t i = 0; i < its.size(); ++i) {
    its[i].interaction_id = i + 1;
    its[i].record_index = {2 * i, 2 * i + 1};
  }
  d.interactions = std::move(its);
  d.n_users = static_cast<int>(counts.size());
  return d;
}

inline IdentityModel dyadic_model(std::mt19937_64& rng, int users, const std::vector<std::string>& services) {
  std::map<int, std::map<std::string, double>> scores;
  for (int u = 1; u <= users; ++u)
    for (const auto& s : services)
      if (rng() % 4 != 0) scores[u][s] = static_cast<double>(1 + rng() % 63) / 64.0;
  return constant_model(scores);
}

// Reference ranking: per-user sum over enrolled interactions divided by the
// count of enrolled interactions (FUSION) or per-user max (MAX_RULE), sorted
// by descending score then ascending id. Empty when nothing is enrolled.
inline std::vector<std::pair<double, int>> reference_rank(const IdentityModel& m, const std::vector<Interaction>& batch,
                                                          Mode mode) {
  std::map<int, double> sum, max;
  int enrolled = 0;
  for (const auto& it : batch) {
    bool any = false;
    for (const auto& [key, net] : m.classifiers) {
      if (key.second != it.service.name) continue;
      const double s = forward(net, featurize(it).values);
      sum[key.first] += s;
      max[key.first] = std::max(max.count(key.first) ? max[key.first] : -1.0, s);
      any = true;
    }
    enrolled += any;
  }
  std::vector<std::pair<double, int>> ref;
  if (enrolled == 0) return ref;
  for (const auto& [u, s] : sum) ref.push_back({mode == Mode::Fusion ? s / enrolled : max[u], u});
  std::sort(ref.begin(), ref.end(), [](auto& a, auto& c) { return a.first != c.first ? a.first > c.first : a.second < c.second; });
  return ref;
}

// --- training data ---

inline Mlp random_net(std::uint64_t seed, int in = 10, int hidden = 12, int out = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  Mlp m = Mlp::zeros(in, hidden, out);
  Eigen::VectorXd p(static_cast<Eigen::Index>(m.parameter_count()));
  for (auto& v : p) v = g(rng);
  m.set_parameters(p);
  for (int k = 0; k < in; ++k) {
    m.norm_mean[k] = g(rng);
    m.norm_std[k] = 0.5 + std::abs(g(rng));
  }
  return m;
}

inline std::vector<double> random_input(std::mt19937_64& rng, int dim = 10) {
  std::normal_distribution<double> g(0, 2);
  std::vector<double> x(static_cast<std::size_t>(dim));
  for (auto& v : x) v = g(rng);
  return x;
}

// Two Gaussian blobs separated along every axis.
inline void blobs(std::uint64_t seed, std::size_t n, double gap, std::vector<std::vector<double>>& pos,
           std::vector<std::vector<double>>& neg) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> a(10), b(10);
    for (int k = 0; k < 10; ++k) {
      a[static_cast<std::size_t>(k)] = g(rng) + gap;
      b[static_cast<std::size_t>(k)] = g(rng) - gap;
    }
    pos.push_back(a);
    neg.push_back(b);
  }
}

}  // namespace nfat::testing
