#pragma once

// On-disk dataset layout (one directory):
//   manifest.json      format version and counts
//   records.csv        canonical metadata lines
//   users.csv          numeric_id,label
//   ground_truth.csv   ip,numeric_id,from,to   (to may be "inf")
//   interactions.csv   id,service,src_ip,start,end,record indices separated by spaces

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "nfat/core.hpp"
#include "nfat/ingest.hpp"

namespace nfat {

inline constexpr int kDatasetFormatVersion = 1;

namespace detail {

inline std::string format_bound(double v) { return std::isinf(v) ? std::string("inf") : format_double(v); }

inline double parse_bound(std::string_view s, const std::string& where) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  double v = 0;
  if (!parse_double(s, v)) throw ParseError(where + ": invalid time '" + std::string(s) + "'");
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto next = s.find(sep, pos);
    out.push_back(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

template <typename Fn>
void for_each_line(const std::string& text, Fn&& fn) {
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string_view line(text.data() + pos, nl - pos);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) fn(line, line_no);
    pos = nl + 1;
  }
}

}  // namespace detail

inline std::string interactions_text(std::span<const Interaction> interactions) {
  std::string out;
  for (const auto& it : interactions) {
    out += std::to_string(it.interaction_id);
    out += ',';
    out += it.service.name;
    out += ',';
    out += it.src_ip.to_string();
    out += ',';
    out += format_double(it.start);
    out += ',';
    out += format_double(it.end);
    out += ',';
    for (std::size_t k = 0; k < it.record_index.size(); ++k) {
      if (k) out += ' ';
      out += std::to_string(it.record_index[k]);
    }
    out += '\n';
  }
  return out;
}

inline std::vector<Interaction> parse_interactions(const std::string& text, std::span<const PacketRecord> records) {
  std::vector<Interaction> out;
  detail::for_each_line(text, [&](std::string_view line, std::size_t line_no) {
    const std::string where = "interactions line " + std::to_string(line_no);
    auto f = detail::split(line, ',');
    if (f.size() != 6) throw ParseError(where + ": expected 6 fields");
    Interaction it;
    auto ip = Ipv4::parse(f[2]);
    if (!parse_int(f[0], it.interaction_id) || !ip || !parse_double(f[3], it.start) || !parse_double(f[4], it.end))
      throw ParseError(where + ": malformed field");
    it.service.name = std::string(f[1]);
    it.src_ip = *ip;
    for (auto idx_text : detail::split(f[5], ' ')) {
      std::uint64_t idx = 0;
      if (!parse_int(idx_text, idx) || idx >= records.size())
        throw ParseError(where + ": record index out of range");
      it.record_index.push_back(idx);
      it.packets.push_back(records[idx]);
    }
    out.push_back(std::move(it));
  });
  return out;
}

inline void write_dataset_files(const std::filesystem::path& dir, const Dataset& d) {
  nlohmann::json manifest = {{"format_version", kDatasetFormatVersion},
                             {"n_users", d.n_users},
                             {"record_count", d.records.size()},
                             {"interaction_count", d.interactions.size()}};
  atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  atomic_write_file(dir / "records.csv", to_metadata_text(d.records));
  std::string users;
  for (const auto& u : d.ground_truth.users) users += std::to_string(u.numeric_id) + ',' + u.label + '\n';
  atomic_write_file(dir / "users.csv", users);
  std::string truth;
  for (const auto& a : d.ground_truth.assignments)
    truth += a.ip.to_string() + ',' + std::to_string(a.user) + ',' + detail::format_bound(a.from) + ',' +
             detail::format_bound(a.to) + '\n';
  atomic_write_file(dir / "ground_truth.csv", truth);
  atomic_write_file(dir / "interactions.csv", interactions_text(d.interactions));
}

// Writes the dataset directory atomically (built aside, then renamed in).
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  atomic_write_directory(dir, [&](const std::filesystem::path& tmp) { write_dataset_files(tmp, d); });
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset d;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("dataset manifest: " + std::string(e.what()));
  }
  if (manifest.value("format_version", 0) != kDatasetFormatVersion)
    throw ParseError("dataset manifest: unsupported format_version");
  d.n_users = manifest.value("n_users", 0);
  {
    std::ifstream in(dir / "records.csv");
    if (!in) throw ParseError("dataset: missing records.csv in " + dir.string());
    d.records = parse_metadata(in);
  }
  if (fs::exists(dir / "users.csv")) {
    detail::for_each_line(read_file(dir / "users.csv"), [&](std::string_view line, std::size_t line_no) {
      const auto comma = line.find(',');
      UserId u;
      if (comma == std::string_view::npos || !parse_int(line.substr(0, comma), u.numeric_id))
        throw ParseError("users line " + std::to_string(line_no) + ": malformed");
      u.label = std::string(line.substr(comma + 1));
      d.ground_truth.users.push_back(u);
    });
  }
  if (fs::exists(dir / "ground_truth.csv")) {
    detail::for_each_line(read_file(dir / "ground_truth.csv"), [&](std::string_view line, std::size_t line_no) {
      const std::string where = "ground_truth line " + std::to_string(line_no);
      auto f = detail::split(line, ',');
      if (f.size() != 4) throw ParseError(where + ": expected 4 fields");
      IpAssignment a;
      auto ip = Ipv4::parse(f[0]);
      if (!ip || !parse_int(f[1], a.user)) throw ParseError(where + ": malformed");
      a.ip = *ip;
      a.from = detail::parse_bound(f[2], where);
      a.to = detail::parse_bound(f[3], where);
      d.ground_truth.assignments.push_back(a);
    });
  }
  if (fs::exists(dir / "interactions.csv"))
    d.interactions = parse_interactions(read_file(dir / "interactions.csv"), d.records);
  return d;
}

}  // namespace nfat
