#include <gtest/gtest.h>

#include <sstream>

#include "nfat/ingest.hpp"
#include "oracles.hpp"

using namespace nfat;
using namespace nfat::testing;

TEST(Pcap, SingleTcpSyn) {
  PcapBuilder b;
  b.frame(1600000000, 250000, ipv4_frame(6, {192, 168, 0, 2}, {93, 184, 216, 34}, 50000, 443, 60, kSyn));
  const auto r = parse_pcap(b.span(), monitored("192.168.0.2"));
  ASSERT_EQ(r.records.size(), 1u);
  const auto& p = r.records[0];
  EXPECT_DOUBLE_EQ(p.timestamp, 1600000000.25);
  EXPECT_EQ(p.src_ip, ip("192.168.0.2"));
  EXPECT_EQ(p.dst_ip, ip("93.184.216.34"));
  EXPECT_EQ(p.src_port, 50000);
  EXPECT_EQ(p.dst_port, 443);
  EXPECT_EQ(p.length, 60u);
  EXPECT_EQ(p.protocol, Protocol::Tcp);
  EXPECT_TRUE(p.tcp_flags & kSyn);
  EXPECT_EQ(p.direction, Direction::Upstream);
  EXPECT_EQ(r.frames, 1u);
  EXPECT_EQ(r.skipped, 0u);
}

TEST(Pcap, ByteSwappedGivesIdenticalRecord) {
  PcapBuilder little(false), big(true);
  const auto f = ipv4_frame(6, {192, 168, 0, 2}, {93, 184, 216, 34}, 50000, 443, 60, kSyn);
  little.frame(1600000000, 250000, f);
  big.frame(1600000000, 250000, f);
  ASSERT_EQ(big.bytes()[0], 0xa1);
  EXPECT_EQ(parse_pcap(big.span(), monitored("192.168.0.2")).records,
            parse_pcap(little.span(), monitored("192.168.0.2")).records);
}

TEST(Pcap, MixedArpIpv4MatchesReferenceDecoder) {
  PcapBuilder b;
  b.frame(10, 0, ipv4_frame(6, {10, 0, 0, 1}, {198, 18, 0, 9}, 40000, 443, 1500, kAck | kPsh));
  b.frame(10, 500, arp_frame());
  b.frame(11, 1, ipv4_frame(17, {198, 18, 8, 1}, {10, 0, 0, 1}, 3478, 40001, 200));
  const auto r = parse_pcap(b.span(), monitored("10.0.0.1"));
  int ref_skipped = 0;
  const auto ref = reference_decode(b.bytes(), ref_skipped);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.skipped_non_ip, 1u);
  EXPECT_EQ(ref_skipped, 1);
  ASSERT_EQ(ref.size(), r.records.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const auto& p = r.records[i];
    EXPECT_EQ(p.src_ip.value, ref[i].src);
    EXPECT_EQ(p.dst_ip.value, ref[i].dst);
    EXPECT_EQ(p.src_port, ref[i].sport);
    EXPECT_EQ(p.dst_port, ref[i].dport);
    EXPECT_EQ(static_cast<int>(p.length), ref[i].len);
    EXPECT_EQ(p.protocol, ref[i].proto == 6 ? Protocol::Tcp : Protocol::Udp);
    EXPECT_EQ(p.tcp_flags, ref[i].flags);
    EXPECT_DOUBLE_EQ(p.timestamp, ref[i].ts);
  }
  EXPECT_EQ(r.records[0].direction, Direction::Upstream);
  EXPECT_EQ(r.records[1].direction, Direction::Downstream);
  EXPECT_EQ(r.records.size() + r.skipped, r.frames);
}

TEST(Pcap, Ipv6IsCountedAndSkipped) {
  PcapBuilder b;
  b.frame(1, 0, ipv6_frame());
  b.frame(2, 0, ipv4_frame(17, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 53, 40));
  const auto r = parse_pcap(b.span(), monitored("10.0.0.1"));
  EXPECT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.skipped_ipv6, 1u);
}

TEST(Pcap, LaterFragmentsHaveNoPorts) {
  PcapBuilder b;
  b.frame(1, 0, ipv4_frame(6, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 80, 1500, kAck, 0x2000));  // MF, offset 0
  b.frame(1, 1, ipv4_frame(6, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 80, 600, kAck, 185));       // offset 185*8
  const auto r = parse_pcap(b.span(), monitored("10.0.0.1"));
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_EQ(r.records[0].protocol, Protocol::Tcp);
  EXPECT_EQ(r.records[0].dst_port, 80);
  EXPECT_EQ(r.records[1].protocol, Protocol::Other);
  EXPECT_EQ(r.records[1].dst_port, 0);
  EXPECT_EQ(r.records[1].tcp_flags, 0);
  EXPECT_TRUE(validate_record(r.records[1], "x").empty());
}

TEST(Pcap, UsesIpTotalLengthNotCapturedLength) {
  PcapBuilder b;
  b.frame(1, 0, ipv4_frame(6, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 80, 1500));
  EXPECT_EQ(parse_pcap(b.span(), monitored("10.0.0.1")).records[0].length, 1500u);
}

TEST(Pcap, TruncatedRecordHeaderNamesOffset) {
  PcapBuilder b;
  b.frame(1, 0, ipv4_frame(6, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 80, 60));
  auto bytes = b.bytes();
  const std::size_t cut = bytes.size();
  bytes.insert(bytes.end(), {1, 2, 3, 4, 5, 6, 7});
  try {
    parse_pcap(std::as_bytes(std::span(bytes)), monitored("10.0.0.1"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset " + std::to_string(cut)), std::string::npos) << e.what();
  }
}

TEST(Pcap, TruncatedRecordDataNamesOffset) {
  PcapBuilder b;
  b.frame(1, 0, ipv4_frame(6, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 80, 60));
  auto bytes = b.bytes();
  bytes.resize(bytes.size() - 5);
  try {
    parse_pcap(std::as_bytes(std::span(bytes)), monitored("10.0.0.1"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 40"), std::string::npos) << e.what();
  }
}

TEST(Pcap, TruncatedGlobalHeader) {
  const std::vector<std::uint8_t> bytes = {0xd4, 0xc3, 0xb2, 0xa1, 2, 0};
  try {
    parse_pcap(std::as_bytes(std::span(bytes)), monitored("10.0.0.1"));
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 6"), std::string::npos) << e.what();
  }
}

TEST(Pcap, UnknownMagic) {
  std::vector<std::uint8_t> bytes(24, 0);
  bytes[0] = 0x0a;
  bytes[1] = 0x0d;
  bytes[2] = 0x0d;
  bytes[3] = 0x0a;  // pcapng section header
  try {
    parse_pcap(std::as_bytes(std::span(bytes)), monitored("10.0.0.1"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported"), std::string::npos);
  }
}

TEST(Pcap, RequiresMonitoredHosts) {
  PcapBuilder b;
  EXPECT_THROW(parse_pcap(b.span(), IngestConfig{}), ContractViolation);
}

TEST(Pcap, MaxRecords) {
  PcapBuilder b;
  for (int i = 0; i < 5; ++i) b.frame(1, i, ipv4_frame(17, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 53, 40));
  auto cfg = monitored("10.0.0.1");
  cfg.max_records = 3;
  EXPECT_EQ(parse_pcap(b.span(), cfg).records.size(), 3u);
}

TEST(Pcap, RoundTripThroughMetadata) {
  PcapBuilder b;
  b.frame(1600000000, 123456, ipv4_frame(6, {10, 0, 0, 1}, {198, 18, 0, 9}, 40000, 443, 1500, kAck | kPsh));
  b.frame(1600000001, 999999, ipv4_frame(17, {198, 18, 8, 1}, {10, 0, 0, 1}, 3478, 40001, 200));
  b.frame(1600000002, 1, ipv4_frame(6, {10, 0, 0, 1}, {1, 1, 1, 1}, 5000, 80, 600, kAck, 185));
  const auto records = parse_pcap(b.span(), monitored("10.0.0.1")).records;
  std::istringstream in(to_metadata_text(records));
  EXPECT_EQ(parse_metadata(in), records);
}

TEST(Metadata, ParsesCanonicalLine) {
  std::istringstream in("10.5,192.168.0.2,93.184.216.34,50000,443,1500,TCP,24,UP\n");
  const auto r = parse_metadata(in);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_DOUBLE_EQ(r[0].timestamp, 10.5);
  EXPECT_EQ(r[0].src_ip, ip("192.168.0.2"));
  EXPECT_EQ(r[0].dst_ip, ip("93.184.216.34"));
  EXPECT_EQ(r[0].src_port, 50000);
  EXPECT_EQ(r[0].dst_port, 443);
  EXPECT_EQ(r[0].length, 1500u);
  EXPECT_EQ(r[0].protocol, Protocol::Tcp);
  EXPECT_EQ(r[0].tcp_flags, 24);
  EXPECT_EQ(r[0].direction, Direction::Upstream);
}

TEST(Metadata, EmptyAndBlankLines) {
  std::istringstream empty("");
  EXPECT_TRUE(parse_metadata(empty).empty());
  std::istringstream blanks("\n   \n1,1.1.1.1,2.2.2.2,0,0,20,OTHER,0,DOWN\n\n");
  EXPECT_EQ(parse_metadata(blanks).size(), 1u);
}

TEST(Metadata, PortOutOfRangeNamesLine) {
  std::istringstream in("1,1.1.1.1,2.2.2.2,1,2,20,UDP,0,UP\n2,1.1.1.1,2.2.2.2,70000,2,20,UDP,0,UP\n");
  try {
    parse_metadata(in);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("column"), std::string::npos) << e.what();
  }
}

TEST(Metadata, MalformedFieldsRejected) {
  for (const char* line : {"x,1.1.1.1,2.2.2.2,1,2,20,UDP,0,UP", "1,1.1.1,2.2.2.2,1,2,20,UDP,0,UP",
                           "1,1.1.1.1,2.2.2.2,1,2,20,SCTP,0,UP", "1,1.1.1.1,2.2.2.2,1,2,20,UDP,0,LEFT",
                           "1,1.1.1.1,2.2.2.2,1,2,20,UDP,8,UP", "1,1.1.1.1,2.2.2.2,1,2,20,OTHER,0,UP",
                           "1,::1,2.2.2.2,1,2,20,UDP,0,UP", "1,1.1.1.1,2.2.2.2,1,2,20,UDP,0", "-1,1.1.1.1,2.2.2.2,1,2,20,UDP,0,UP"}) {
    std::istringstream in(line);
    EXPECT_THROW(parse_metadata(in), ParseError) << line;
  }
}
