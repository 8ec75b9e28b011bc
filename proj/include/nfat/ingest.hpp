#pragma once

// Readers for classic pcap captures and the canonical metadata line format:
//   timestamp,src_ip,dst_ip,src_port,dst_port,length,protocol,tcp_flags,direction

#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "nfat/core.hpp"

namespace nfat {

enum class InputKind { Pcap, Metadata };

struct IngestConfig {
  std::set<Ipv4> monitored_hosts;
  InputKind input_kind = InputKind::Pcap;
  std::optional<std::size_t> max_records;
};

// --- canonical metadata ---------------------------------------------------------

inline std::string format_record(const PacketRecord& p) {
  std::string out = format_double(p.timestamp);
  out += ',';
  out += p.src_ip.to_string();
  out += ',';
  out += p.dst_ip.to_string();
  out += ',';
  out += std::to_string(p.src_port);
  out += ',';
  out += std::to_string(p.dst_port);
  out += ',';
  out += std::to_string(p.length);
  out += ',';
  out += to_string(p.protocol);
  out += ',';
  out += std::to_string(p.tcp_flags);
  out += ',';
  out += to_string(p.direction);
  return out;
}

inline void write_metadata(std::ostream& os, std::span<const PacketRecord> records) {
  for (const auto& r : records) os << format_record(r) << '\n';
}

inline std::string to_metadata_text(std::span<const PacketRecord> records) {
  std::string out;
  out.reserve(records.size() * 64);
  for (const auto& r : records) {
    out += format_record(r);
    out += '\n';
  }
  return out;
}

namespace detail {

[[noreturn]] inline void metadata_error(std::size_t line, std::size_t column, const std::string& what) {
  throw ParseError("line " + std::to_string(line) + ", column " + std::to_string(column) + ": " + what);
}

}  // namespace detail

// Parses one canonical line. `line_no` is only used for diagnostics.
inline PacketRecord parse_metadata_line(std::string_view line, std::size_t line_no) {
  std::array<std::string_view, 9> fields{};
  std::array<std::size_t, 9> columns{};
  std::size_t n = 0;
  std::size_t pos = 0;
  while (true) {
    const std::size_t comma = line.find(',', pos);
    if (n == fields.size()) detail::metadata_error(line_no, pos + 1, "too many fields (expected 9)");
    columns[n] = pos + 1;
    fields[n++] = line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (n != fields.size())
    detail::metadata_error(line_no, line.size() + 1, "expected 9 fields, found " + std::to_string(n));

  PacketRecord r;
  auto fail = [&](std::size_t field, const std::string& what) {
    detail::metadata_error(line_no, columns[field], what + " '" + std::string(fields[field]) + "'");
  };
  if (!parse_double(fields[0], r.timestamp) || !std::isfinite(r.timestamp) || r.timestamp < 0)
    fail(0, "invalid timestamp");
  for (int f : {1, 2}) {
    if (fields[f].find(':') != std::string_view::npos) fail(f, "IPv6 addresses are not supported");
    auto ip = Ipv4::parse(fields[f]);
    if (!ip) fail(f, "invalid IPv4 address");
    (f == 1 ? r.src_ip : r.dst_ip) = *ip;
  }
  for (int f : {3, 4}) {
    long port = 0;
    if (!parse_int(fields[f], port)) fail(f, "invalid port");
    if (port < 0 || port > 65535) fail(f, "port out of range");
    (f == 3 ? r.src_port : r.dst_port) = static_cast<std::uint16_t>(port);
  }
  long long length = 0;
  if (!parse_int(fields[5], length) || length < 0 || length > 0xffffffffLL) fail(5, "invalid length");
  r.length = static_cast<std::uint32_t>(length);
  if (fields[6] == "TCP") r.protocol = Protocol::Tcp;
  else if (fields[6] == "UDP") r.protocol = Protocol::Udp;
  else if (fields[6] == "OTHER") r.protocol = Protocol::Other;
  else fail(6, "invalid protocol");
  int flags = 0;
  if (!parse_int(fields[7], flags) || flags < 0 || flags > 255) fail(7, "invalid tcp_flags");
  r.tcp_flags = static_cast<std::uint8_t>(flags);
  if (fields[8] == "UP") r.direction = Direction::Upstream;
  else if (fields[8] == "DOWN") r.direction = Direction::Downstream;
  else fail(8, "invalid direction");

  if (r.protocol == Protocol::Other && (r.src_port != 0 || r.dst_port != 0))
    fail(3, "ports must be 0 for protocol OTHER, got");
  if (r.protocol != Protocol::Tcp && r.tcp_flags != 0) fail(7, "tcp_flags must be 0 for non-TCP, got");
  return r;
}

inline std::vector<PacketRecord> parse_metadata(std::istream& in, std::optional<std::size_t> max_records = {}) {
  std::vector<PacketRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    out.push_back(parse_metadata_line(line, line_no));
    if (max_records && out.size() >= *max_records) break;
  }
  return out;
}

// --- classic pcap ------------------------------------------------------------

struct PcapParseResult {
  std::vector<PacketRecord> records;
  std::size_t frames = 0;
  std::size_t skipped = 0;
  std::size_t skipped_ipv6 = 0;
  std::size_t skipped_non_ip = 0;
  std::size_t skipped_other = 0;
};

namespace pcap {
inline constexpr std::uint32_t kMagic = 0xa1b2c3d4u;
inline constexpr std::uint32_t kMagicSwapped = 0xd4c3b2a1u;
inline constexpr std::uint32_t kLinkEthernet = 1;
inline constexpr std::size_t kGlobalHeaderLen = 24;
inline constexpr std::size_t kRecordHeaderLen = 16;
inline constexpr std::uint16_t kEtherIpv4 = 0x0800;
inline constexpr std::uint16_t kEtherIpv6 = 0x86dd;
inline constexpr std::uint16_t kEtherVlan = 0x8100;
}  // namespace pcap

namespace detail {

inline std::uint16_t be16(std::span<const std::byte> b, std::size_t off) {
  return static_cast<std::uint16_t>((std::to_integer<unsigned>(b[off]) << 8) | std::to_integer<unsigned>(b[off + 1]));
}

inline std::uint32_t be32(std::span<const std::byte> b, std::size_t off) {
  return (std::uint32_t{be16(b, off)} << 16) | be16(b, off + 2);
}

inline std::uint32_t le32(std::span<const std::byte> b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | std::to_integer<std::uint32_t>(b[off + static_cast<std::size_t>(i)]);
  return v;
}

enum class FrameOutcome { Record, Ipv6, NonIp, Other };

inline FrameOutcome decode_ethernet(std::span<const std::byte> frame, PacketRecord& r) {
  std::size_t off = 12;
  if (frame.size() < off + 2) return FrameOutcome::Other;
  std::uint16_t ether = be16(frame, off);
  off += 2;
  while (ether == pcap::kEtherVlan) {
    if (frame.size() < off + 4) return FrameOutcome::Other;
    ether = be16(frame, off + 2);
    off += 4;
  }
  if (ether == pcap::kEtherIpv6) return FrameOutcome::Ipv6;
  if (ether != pcap::kEtherIpv4) return FrameOutcome::NonIp;

  auto ip = frame.subspan(off);
  if (ip.size() < 20) return FrameOutcome::Other;
  const unsigned version = std::to_integer<unsigned>(ip[0]) >> 4;
  if (version == 6) return FrameOutcome::Ipv6;
  if (version != 4) return FrameOutcome::NonIp;
  const std::size_t ihl = (std::to_integer<std::size_t>(ip[0]) & 0x0f) * 4;
  if (ihl < 20 || ip.size() < ihl) return FrameOutcome::Other;
  r.length = be16(ip, 2);
  const std::uint16_t frag = be16(ip, 6) & 0x1fff;
  const unsigned proto = std::to_integer<unsigned>(ip[9]);
  r.src_ip = Ipv4{be32(ip, 12)};
  r.dst_ip = Ipv4{be32(ip, 16)};
  if (proto != 6 && proto != 17) return FrameOutcome::Other;
  if (frag != 0) {
    r.protocol = Protocol::Other;
    return FrameOutcome::Record;
  }
  auto l4 = ip.subspan(ihl);
  if (proto == 6) {
    if (l4.size() < 14) return FrameOutcome::Other;
    r.protocol = Protocol::Tcp;
    r.tcp_flags = std::to_integer<std::uint8_t>(l4[13]);
  } else {
    if (l4.size() < 4) return FrameOutcome::Other;
    r.protocol = Protocol::Udp;
  }
  r.src_port = be16(l4, 0);
  r.dst_port = be16(l4, 2);
  return FrameOutcome::Record;
}

}  // namespace detail

// Decodes a classic (microsecond, Ethernet) pcap stream. IPv4 TCP/UDP frames
// become records; everything else is counted and skipped.
inline PcapParseResult parse_pcap(std::span<const std::byte> bytes, const IngestConfig& cfg) {
  if (cfg.monitored_hosts.empty())
    throw ContractViolation("parse_pcap: monitored_hosts must be non-empty to derive direction");
  if (bytes.size() < pcap::kGlobalHeaderLen)
    throw ParseError("truncated pcap global header at byte offset " + std::to_string(bytes.size()) +
                     " (need 24 bytes)");
  const std::uint32_t magic = detail::le32(bytes, 0);
  bool swapped = false;
  if (magic == pcap::kMagic) swapped = false;
  else if (magic == pcap::kMagicSwapped) swapped = true;
  else throw ParseError("unsupported format: unknown pcap magic at byte offset 0");
  auto u32 = [&](std::size_t off) { return swapped ? detail::be32(bytes, off) : detail::le32(bytes, off); };

  const std::uint32_t link = u32(20);
  if (link != pcap::kLinkEthernet)
    throw ParseError("unsupported format: link type " + std::to_string(link) + " (only Ethernet)");

  PcapParseResult out;
  std::size_t off = pcap::kGlobalHeaderLen;
  while (off < bytes.size()) {
    if (cfg.max_records && out.records.size() >= *cfg.max_records) break;
    if (bytes.size() - off < pcap::kRecordHeaderLen)
      throw ParseError("truncated pcap record header at byte offset " + std::to_string(off));
    const std::uint32_t ts_sec = u32(off);
    const std::uint32_t ts_usec = u32(off + 4);
    const std::uint32_t incl_len = u32(off + 8);
    const std::size_t data_off = off + pcap::kRecordHeaderLen;
    if (bytes.size() - data_off < incl_len)
      throw ParseError("truncated pcap record data at byte offset " + std::to_string(data_off) + " (need " +
                       std::to_string(incl_len) + " bytes, have " + std::to_string(bytes.size() - data_off) + ")");
    ++out.frames;
    PacketRecord r;
    r.timestamp = static_cast<double>(ts_sec) + static_cast<double>(ts_usec) * 1e-6;
    switch (detail::decode_ethernet(bytes.subspan(data_off, incl_len), r)) {
      case detail::FrameOutcome::Record:
        r.direction = cfg.monitored_hosts.count(r.src_ip) ? Direction::Upstream : Direction::Downstream;
        out.records.push_back(r);
        break;
      case detail::FrameOutcome::Ipv6: ++out.skipped_ipv6; ++out.skipped; break;
      case detail::FrameOutcome::NonIp: ++out.skipped_non_ip; ++out.skipped; break;
      case detail::FrameOutcome::Other: ++out.skipped_other; ++out.skipped; break;
    }
    off = data_off + incl_len;
  }
  return out;
}

}  // namespace nfat
