#pragma once

// Case management back end. Everything here is transport-free: requests come
// in as CaseRequest and leave as CaseResponse, so the HTTP adapter stays thin
// and the whole service can be driven in-process.
//
// Store layout under the data directory:
//   cases/<case_id>/case.json
//   cases/<case_id>/audit.jsonl           hash-chained, append-only
//   cases/<case_id>/bookmarks/<id>.json
//   cases/<case_id>/analyses/<id>.json
//   cases/<case_id>/models/<id>.json      models trained by analyze

#include <chrono>
#include <cmath>
#include <cstdio>
#include <span>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "nfat/dataset_io.hpp"
#include "nfat/identity.hpp"
#include "nfat/timeline.hpp"

namespace nfat::casework {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Role { Admin = 3, Investigator = 2, Viewer = 1 };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::Admin: return "ADMIN";
    case Role::Investigator: return "INVESTIGATOR";
    case Role::Viewer: return "VIEWER";
  }
  return "";
}

inline std::optional<Role> parse_role(std::string_view s) {
  if (s == "ADMIN") return Role::Admin;
  if (s == "INVESTIGATOR") return Role::Investigator;
  if (s == "VIEWER") return Role::Viewer;
  return std::nullopt;
}

// An error that maps onto an HTTP status.
class ServiceError : public Error {
 public:
  ServiceError(int status, std::string code, const std::string& what)
      : Error(ErrorKind::Service, what), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

inline ServiceError unauthorized(const std::string& m) { return {401, "unauthenticated", m}; }
inline ServiceError forbidden(const std::string& m) { return {403, "forbidden", m}; }
inline ServiceError not_found(const std::string& m) { return {404, "not_found", m}; }
inline ServiceError conflict(const std::string& m) { return {409, "conflict", m}; }
inline ServiceError unprocessable(const std::string& m) { return {422, "unprocessable", m}; }
inline ServiceError bad_request(const std::string& m) { return {400, "bad_request", m}; }

// --- tokens --------------------------------------------------------------------

// Token file: {"tokens": [{"account": "alice", "token": "..."}]}
class TokenStore {
 public:
  TokenStore() = default;
  explicit TokenStore(const json& j) {
    try {
      for (const auto& t : j.at("tokens")) {
        const auto account = t.at("account").get<std::string>();
        const auto token = t.at("token").get<std::string>();
        if (account.empty() || token.empty()) throw ParseError("token file: empty account or token");
        if (!by_token_.emplace(token, account).second) throw ParseError("token file: duplicate token");
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("token file: ") + e.what());
    }
  }
  static TokenStore load(const fs::path& path) {
    try {
      return TokenStore(json::parse(read_file(path)));
    } catch (const json::exception& e) {
      throw ParseError("token file: " + std::string(e.what()));
    }
  }
  void add(const std::string& account, const std::string& token) { by_token_[token] = account; }

  std::optional<std::string> account_for(std::string_view token) const {
    auto it = by_token_.find(std::string(token));
    if (it == by_token_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::map<std::string, std::string> by_token_;
};

// --- audit chain -----------------------------------------------------------------

inline const std::string kGenesisHash(64, '0');

struct AuditEntry {
  std::uint64_t seq = 0;
  std::string timestamp;
  std::string account;
  std::string action;
  std::string object;
  std::string outcome;  // "ok" or "denied"
  std::string content_hash;
  std::string prev_hash;
  std::string entry_hash;
};

inline json audit_body(const AuditEntry& e) {
  return {{"seq", e.seq},         {"timestamp", e.timestamp},       {"account", e.account},
          {"action", e.action},   {"object", e.object},             {"outcome", e.outcome},
          {"content_hash", e.content_hash}, {"prev_hash", e.prev_hash}};
}

inline std::string audit_entry_hash(const AuditEntry& e) { return sha256_hex(audit_body(e).dump()); }

inline json to_json(const AuditEntry& e) {
  json j = audit_body(e);
  j["entry_hash"] = e.entry_hash;
  return j;
}

inline AuditEntry audit_from_json(const json& j) {
  AuditEntry e;
  e.seq = j.at("seq").get<std::uint64_t>();
  e.timestamp = j.at("timestamp").get<std::string>();
  e.account = j.at("account").get<std::string>();
  e.action = j.at("action").get<std::string>();
  e.object = j.at("object").get<std::string>();
  e.outcome = j.at("outcome").get<std::string>();
  e.content_hash = j.at("content_hash").get<std::string>();
  e.prev_hash = j.at("prev_hash").get<std::string>();
  e.entry_hash = j.at("entry_hash").get<std::string>();
  return e;
}

inline std::vector<AuditEntry> read_audit(const fs::path& case_dir) {
  std::vector<AuditEntry> out;
  const auto path = case_dir / "audit.jsonl";
  if (!fs::exists(path)) return out;
  nfat::detail::for_each_line(read_file(path), [&](std::string_view line, std::size_t line_no) {
    try {
      out.push_back(audit_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ParseError("audit line " + std::to_string(line_no) + ": " + e.what());
    }
  });
  return out;
}

// --- analysis ----------------------------------------------------------------------

struct AnalyzedInteraction {
  std::uint64_t interaction_id = 0;
  std::string service;
  Ipv4 src_ip;
  double start = 0, end = 0;
  std::vector<std::uint64_t> record_index;
  double batch_window = 0;
  std::optional<UserId> base_user;
  double base_score = 0;
  std::optional<UserId> user;  // after timeline attribution
  double confidence = 0;
  std::optional<std::uint64_t> anchor_id;
};

struct AnalysisParams {
  TimelineConfig timeline;
  double batch_window_s = 60.0;
  FusionConfig fusion;
};

struct Analysis {
  std::string analysis_id;
  std::string dataset_id;
  std::string model_id;
  AnalysisParams params;
  std::vector<UserId> users;
  std::vector<std::string> services;
  std::vector<AnalyzedInteraction> rows;  // ordered by interaction_id
};

// Fused identification over (src_ip, window) batches of every interaction,
// followed by timeline attribution. Interactions whose services have no
// classifier stay unlabeled unless a span covers them.
inline Analysis analyze_dataset(const Dataset& dataset, const IdentityModel& model, const AnalysisParams& params) {
  validate(params.timeline);
  if (!(params.batch_window_s > 0)) throw ContractViolation("analyze: batch_window_s must be positive");
  Analysis a;
  a.params = params;
  a.users = model.enrolled_users();
  std::set<std::string> services;
  for (const auto& [key, net] : model.classifiers) services.insert(key.second);
  for (const auto& it : dataset.interactions) services.insert(it.service.name);
  a.services.assign(services.begin(), services.end());

  std::map<std::pair<double, Ipv4>, std::vector<const Interaction*>> batches;
  for (const auto& it : dataset.interactions)
    batches[{std::floor(it.start / params.batch_window_s) * params.batch_window_s, it.src_ip}].push_back(&it);

  std::vector<Decision> decisions;
  std::vector<InteractionRef> refs;
  std::map<std::uint64_t, std::optional<UserId>> base;
  std::map<std::uint64_t, std::pair<double, double>> meta;  // id -> (window, base score)
  for (const auto& [key, members] : batches) {
    std::vector<ScoreMap> maps;
    for (const auto* it : members) maps.push_back(score_interaction(model, *it));
    const bool scoreable = std::any_of(maps.begin(), maps.end(), [](const ScoreMap& m) { return m.service_enrolled; });
    RankedList ranked = scoreable ? fuse(model, maps, Mode::Fusion, params.fusion) : RankedList{};
    for (const auto* it : members) {
      refs.push_back({it->interaction_id, it->src_ip, it->start});
      if (ranked.entries.empty()) {
        base[it->interaction_id] = std::nullopt;
        meta[it->interaction_id] = {key.first, 0.0};
      } else {
        base[it->interaction_id] = ranked.entries.front().user;
        meta[it->interaction_id] = {key.first, ranked.entries.front().score};
        decisions.push_back({it->interaction_id, it->src_ip, it->start, ranked});
      }
    }
  }
  const auto spans = build_spans(decisions, params.timeline);
  const auto attributed = attribute_detailed(refs, spans, base);
  for (const auto& it : dataset.interactions) {
    AnalyzedInteraction row;
    row.interaction_id = it.interaction_id;
    row.service = it.service.name;
    row.src_ip = it.src_ip;
    row.start = it.start;
    row.end = it.end;
    row.record_index = it.record_index;
    row.batch_window = meta.at(it.interaction_id).first;
    row.base_user = base.at(it.interaction_id);
    row.base_score = meta.at(it.interaction_id).second;
    const auto& att = attributed.at(it.interaction_id);
    row.user = att.user;
    row.anchor_id = att.anchor_id;
    row.confidence = att.anchor_id ? att.anchor_confidence : row.base_score;
    a.rows.push_back(std::move(row));
  }
  std::sort(a.rows.begin(), a.rows.end(),
            [](const auto& x, const auto& y) { return x.interaction_id < y.interaction_id; });
  return a;
}

namespace detail {

inline json user_or_null(const std::optional<UserId>& u) {
  if (!u) return nullptr;
  return {{"numeric_id", u->numeric_id}, {"label", u->label}};
}

inline std::optional<UserId> user_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return UserId{j.at("label").get<std::string>(), j.at("numeric_id").get<int>()};
}

}  // namespace detail

inline json to_json(const Analysis& a) {
  json users = json::array();
  for (const auto& u : a.users) users.push_back(detail::user_or_null(u));
  json rows = json::array();
  for (const auto& r : a.rows) {
    rows.push_back({{"interaction_id", r.interaction_id},
                    {"service", r.service},
                    {"src_ip", r.src_ip.to_string()},
                    {"start", r.start},
                    {"end", r.end},
                    {"record_index", r.record_index},
                    {"batch_window", r.batch_window},
                    {"base_user", detail::user_or_null(r.base_user)},
                    {"base_score", r.base_score},
                    {"user", detail::user_or_null(r.user)},
                    {"confidence", r.confidence},
                    {"anchor_id", r.anchor_id ? json(*r.anchor_id) : json(nullptr)}});
  }
  return {{"analysis_id", a.analysis_id},
          {"dataset_id", a.dataset_id},
          {"model_id", a.model_id},
          {"params",
           {{"window_s", a.params.timeline.window_s},
            {"confidence_threshold", a.params.timeline.confidence_threshold},
            {"batch_window_s", a.params.batch_window_s}}},
          {"users", users},
          {"services", a.services},
          {"rows", rows}};
}

inline Analysis analysis_from_json(const json& j) {
  Analysis a;
  a.analysis_id = j.at("analysis_id").get<std::string>();
  a.dataset_id = j.at("dataset_id").get<std::string>();
  a.model_id = j.at("model_id").get<std::string>();
  a.params.timeline.window_s = j.at("params").at("window_s").get<double>();
  a.params.timeline.confidence_threshold = j.at("params").at("confidence_threshold").get<double>();
  a.params.batch_window_s = j.at("params").at("batch_window_s").get<double>();
  for (const auto& u : j.at("users")) a.users.push_back(*detail::user_from(u));
  a.services = j.at("services").get<std::vector<std::string>>();
  for (const auto& r : j.at("rows")) {
    AnalyzedInteraction row;
    row.interaction_id = r.at("interaction_id").get<std::uint64_t>();
    row.service = r.at("service").get<std::string>();
    row.src_ip = *Ipv4::parse(r.at("src_ip").get<std::string>());
    row.start = r.at("start").get<double>();
    row.end = r.at("end").get<double>();
    row.record_index = r.at("record_index").get<std::vector<std::uint64_t>>();
    row.batch_window = r.at("batch_window").get<double>();
    row.base_user = detail::user_from(r.at("base_user"));
    row.base_score = r.at("base_score").get<double>();
    row.user = detail::user_from(r.at("user"));
    row.confidence = r.at("confidence").get<double>();
    if (!r.at("anchor_id").is_null()) row.anchor_id = r.at("anchor_id").get<std::uint64_t>();
    a.rows.push_back(std::move(row));
  }
  return a;
}

// --- queries -----------------------------------------------------------------------

enum class QueryKind { UserTimeline, ServiceUsers, IpPivot, InteractionDetail, OverviewMatrix };

inline std::optional<QueryKind> parse_query_kind(std::string_view s) {
  if (s == "USER_TIMELINE") return QueryKind::UserTimeline;
  if (s == "SERVICE_USERS") return QueryKind::ServiceUsers;
  if (s == "IP_PIVOT") return QueryKind::IpPivot;
  if (s == "INTERACTION_DETAIL") return QueryKind::InteractionDetail;
  if (s == "OVERVIEW_MATRIX") return QueryKind::OverviewMatrix;
  return std::nullopt;
}

struct QuerySpec {
  QueryKind kind = QueryKind::OverviewMatrix;
  std::optional<double> from, to;
  std::optional<int> user;
  std::optional<std::string> service;
  std::optional<Ipv4> ip;
  std::optional<std::uint64_t> interaction_id;
  std::optional<double> min_confidence;
  json echo;  // the spec as submitted, minus paging
};

inline QuerySpec parse_query_spec(const json& j) {
  if (!j.is_object()) throw unprocessable("query: body must be an object");
  QuerySpec q;
  try {
    const auto kind = parse_query_kind(j.value("kind", ""));
    if (!kind) throw unprocessable("query: unknown kind");
    q.kind = *kind;
    if (j.contains("from") && !j.at("from").is_null()) q.from = j.at("from").get<double>();
    if (j.contains("to") && !j.at("to").is_null()) q.to = j.at("to").get<double>();
    if (q.from && q.to && *q.from > *q.to) throw unprocessable("query: from must not exceed to");
    if (j.contains("user")) q.user = j.at("user").get<int>();
    if (j.contains("service")) q.service = j.at("service").get<std::string>();
    if (j.contains("ip")) {
      q.ip = Ipv4::parse(j.at("ip").get<std::string>());
      if (!q.ip) throw unprocessable("query: malformed ip");
    }
    if (j.contains("interaction_id")) q.interaction_id = j.at("interaction_id").get<std::uint64_t>();
    if (j.contains("min_confidence")) q.min_confidence = j.at("min_confidence").get<double>();
  } catch (const json::exception& e) {
    throw unprocessable(std::string("query: ") + e.what());
  }
  auto need = [&](bool ok, const char* what) {
    if (!ok) throw unprocessable(std::string("query: ") + what);
  };
  switch (q.kind) {
    case QueryKind::UserTimeline: need(q.user.has_value(), "USER_TIMELINE needs user"); break;
    case QueryKind::ServiceUsers: need(q.service.has_value(), "SERVICE_USERS needs service"); break;
    case QueryKind::IpPivot: need(q.ip.has_value(), "IP_PIVOT needs ip"); break;
    case QueryKind::InteractionDetail: need(q.interaction_id.has_value(), "INTERACTION_DETAIL needs interaction_id"); break;
    case QueryKind::OverviewMatrix: break;
  }
  q.echo = json::object();
  for (const auto& [k, v] : j.items())
    if (k != "page" && k != "page_size") q.echo[k] = v;
  return q;
}

namespace detail {

inline bool in_range(const QuerySpec& q, double t) { return (!q.from || t >= *q.from) && (!q.to || t <= *q.to); }

inline json interaction_row(const AnalyzedInteraction& r) {
  return {{"interaction_id", r.interaction_id},
          {"service", r.service},
          {"src_ip", r.src_ip.to_string()},
          {"start", r.start},
          {"end", r.end},
          {"user", user_or_null(r.user)},
          {"base_user", user_or_null(r.base_user)},
          {"confidence", r.confidence},
          {"attribution", r.anchor_id ? "span" : (r.base_user ? "direct" : "none")},
          {"anchor_id", r.anchor_id ? json(*r.anchor_id) : json(nullptr)},
          {"packet_count", r.record_index.size()},
          {"record_index", r.record_index}};
}

}  // namespace detail

// Full, unpaginated result rows. `records` backs INTERACTION_DETAIL.
inline json execute_query(const Analysis& a, const QuerySpec& q, std::span<const PacketRecord> records) {
  auto known_user = [&](int id) {
    return std::any_of(a.users.begin(), a.users.end(), [&](const UserId& u) { return u.numeric_id == id; });
  };
  json rows = json::array();
  switch (q.kind) {
    case QueryKind::UserTimeline: {
      if (!known_user(*q.user)) throw not_found("unknown user " + std::to_string(*q.user));
      for (const auto& r : a.rows) {
        if (!r.user || r.user->numeric_id != *q.user || !detail::in_range(q, r.start)) continue;
        if (q.service && r.service != *q.service) continue;
        if (q.min_confidence && r.confidence < *q.min_confidence) continue;
        rows.push_back(detail::interaction_row(r));
      }
      break;
    }
    case QueryKind::ServiceUsers: {
      if (std::find(a.services.begin(), a.services.end(), *q.service) == a.services.end())
        throw not_found("unknown service " + *q.service);
      std::map<int, std::tuple<UserId, std::size_t, double, double>> agg;
      for (const auto& r : a.rows) {
        if (r.service != *q.service || !r.user || !detail::in_range(q, r.start)) continue;
        if (q.min_confidence && r.confidence < *q.min_confidence) continue;
        auto [it, fresh] = agg.try_emplace(r.user->numeric_id, *r.user, 0, r.start, r.start);
        auto& [u, n, first, last] = it->second;
        ++n;
        first = std::min(first, r.start);
        last = std::max(last, r.start);
      }
      for (const auto& [id, v] : agg)
        rows.push_back({{"user", detail::user_or_null(std::get<0>(v))},
                        {"interactions", std::get<1>(v)},
                        {"first", std::get<2>(v)},
                        {"last", std::get<3>(v)}});
      break;
    }
    case QueryKind::IpPivot: {
      for (const auto& r : a.rows) {
        if (r.src_ip != *q.ip || !detail::in_range(q, r.start)) continue;
        rows.push_back(detail::interaction_row(r));
      }
      break;
    }
    case QueryKind::InteractionDetail: {
      auto it = std::lower_bound(a.rows.begin(), a.rows.end(), *q.interaction_id,
                                 [](const AnalyzedInteraction& r, std::uint64_t id) { return r.interaction_id < id; });
      if (it == a.rows.end() || it->interaction_id != *q.interaction_id)
        throw not_found("unknown interaction " + std::to_string(*q.interaction_id));
      json row = detail::interaction_row(*it);
      json packets = json::array();
      for (auto idx : it->record_index) {
        if (idx >= records.size()) throw ServiceError(500, "internal", "record index out of range");
        packets.push_back(format_record(records[idx]));
      }
      row["packets"] = packets;
      rows.push_back(std::move(row));
      break;
    }
    case QueryKind::OverviewMatrix: {
      std::map<int, std::map<std::string, std::size_t>> counts;
      for (const auto& u : a.users)
        for (const auto& s : a.services) counts[u.numeric_id][s] = 0;
      for (const auto& r : a.rows) {
        if (!r.user || !detail::in_range(q, r.start)) continue;
        if (q.min_confidence && r.confidence < *q.min_confidence) continue;
        ++counts[r.user->numeric_id][r.service];
      }
      for (const auto& u : a.users) rows.push_back({{"user", detail::user_or_null(u)}, {"counts", counts[u.numeric_id]}});
      break;
    }
  }
  return rows;
}

// Canonical serialization of result rows: compact JSON, keys sorted.
inline std::string canonical_rows(const json& rows) { return rows.dump(); }
inline std::string rows_digest(const json& rows) { return sha256_hex(canonical_rows(rows)); }

// --- verification ------------------------------------------------------------------

struct VerifyReport {
  bool ok = true;
  std::vector<std::string> problems;
  std::string head;
};

// Checks the audit hash chain, each bookmark's raw digest, and that stored
// documents still match the content hash of the audit entry that wrote them.
inline VerifyReport verify_case(const fs::path& case_dir) {
  VerifyReport v;
  auto fail = [&](std::string p) {
    v.ok = false;
    v.problems.push_back(std::move(p));
  };
  std::vector<AuditEntry> entries;
  try {
    entries = read_audit(case_dir);
  } catch (const std::exception& e) {
    fail(e.what());
    return v;
  }
  std::string prev = kGenesisHash;
  std::map<std::string, std::string> last_hash;  // object -> content hash of the last ok write
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.seq != i + 1) fail("audit entry " + std::to_string(i + 1) + ": sequence gap");
    if (e.prev_hash != prev) fail("audit entry " + std::to_string(e.seq) + ": chain break (prev_hash)");
    if (audit_entry_hash(e) != e.entry_hash) fail("audit entry " + std::to_string(e.seq) + ": entry hash mismatch");
    prev = e.entry_hash;
    if (e.outcome == "ok" && !e.object.empty() && e.object.find('/') != std::string::npos)
      last_hash[e.object] = e.content_hash;
  }
  v.head = prev;
  for (const auto& [object, hash] : last_hash) {
    const auto path = case_dir / (object + ".json");
    if (!fs::exists(path)) {
      fail(object + ": missing");
      continue;
    }
    if (sha256_hex(read_file(path)) != hash) fail(object + ": content differs from audited hash");
  }
  if (fs::exists(case_dir / "bookmarks")) {
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(case_dir / "bookmarks")) files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      if (f.extension() != ".json") continue;
      const std::string object = "bookmarks/" + f.stem().string();
      if (!last_hash.count(object)) fail(object + ": not in audit log");
      try {
        const auto b = json::parse(read_file(f));
        if (rows_digest(b.at("raw_extract")) != b.at("raw_digest").get<std::string>())
          fail(object + ": raw_digest does not match raw_extract");
      } catch (const json::exception& e) {
        fail(object + ": unreadable (" + e.what() + ")");
      }
    }
  }
  return v;
}

// --- service -----------------------------------------------------------------------

struct CaseRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
  std::optional<std::string> authorization;
};

struct CaseResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct ServiceOptions {
  fs::path data_dir;
  TokenStore tokens;
  std::function<std::string()> clock = utc_now;
  bool synchronous_jobs = false;  // run analyze inline; used by tests and the CLI
  std::size_t max_page_size = 1000;
};

class CaseService {
 public:
  explicit CaseService(ServiceOptions opts) : opts_(std::move(opts)) { fs::create_directories(opts_.data_dir / "cases"); }
  ~CaseService() { wait_for_jobs(); }
  CaseService(const CaseService&) = delete;
  CaseService& operator=(const CaseService&) = delete;

  CaseResponse handle(const CaseRequest& req) {
    try {
      return route(req);
    } catch (const ServiceError& e) {
      return error_response(e.status(), e.code(), e.what());
    } catch (const ParseError& e) {
      return error_response(422, "unprocessable", e.what());
    } catch (const Error& e) {
      return error_response(422, error_code_name(e.kind()), e.what());
    } catch (const std::exception& e) {
      return error_response(500, "internal", e.what());
    }
  }

  void wait_for_jobs() {
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(jobs_mutex_);
      threads.swap(threads_);
    }
    for (auto& t : threads)
      if (t.joinable()) t.join();
  }

  fs::path case_dir(const std::string& id) const { return opts_.data_dir / "cases" / id; }

 private:
  struct Job {
    std::string status = "queued";
    std::string analysis_id;
    std::string error;
  };
  struct QueryHandle {
    std::string case_id;
    std::string analysis_id;
    json spec;
  };

  ServiceOptions opts_;
  std::mutex registry_mutex_;
  std::map<std::string, std::shared_ptr<std::mutex>> case_locks_;
  std::mutex jobs_mutex_;
  std::map<std::string, Job> jobs_;  // key: case_id + "/" + job_id
  std::vector<std::thread> threads_;
  std::mutex cache_mutex_;
  std::map<std::string, std::shared_ptr<const Analysis>> analysis_cache_;  // key: case/analysis
  std::map<std::string, std::shared_ptr<const Dataset>> dataset_cache_;    // key: dataset dir
  std::map<std::string, QueryHandle> handles_;

  static CaseResponse error_response(int status, const std::string& code, const std::string& message) {
    return {status, json{{"error", {{"code", code}, {"message", message}}}}.dump(2) + "\n"};
  }
  static CaseResponse ok(const json& j, int status = 200) { return {status, j.dump(2) + "\n"}; }

  std::shared_ptr<std::mutex> case_lock(const std::string& id) {
    std::lock_guard lock(registry_mutex_);
    auto& m = case_locks_[id];
    if (!m) m = std::make_shared<std::mutex>();
    return m;
  }

  std::string authenticate(const CaseRequest& req) const {
    if (!req.authorization) throw unauthorized("missing bearer token");
    constexpr std::string_view prefix = "Bearer ";
    const auto& h = *req.authorization;
    if (h.size() <= prefix.size() || h.compare(0, prefix.size(), prefix) != 0) throw unauthorized("malformed authorization");
    auto account = opts_.tokens.account_for(std::string_view(h).substr(prefix.size()));
    if (!account) throw unauthorized("invalid token");
    return *account;
  }

  static json parse_body(const CaseRequest& req) {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::exception& e) {
      throw bad_request(std::string("malformed JSON body: ") + e.what());
    }
  }

  static bool valid_case_id(std::string_view id) {
    return !id.empty() && id.size() <= 64 &&
           std::all_of(id.begin(), id.end(), [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-'; });
  }

  json load_case(const std::string& id) const {
    if (!valid_case_id(id)) throw not_found("no case " + id);
    const auto path = case_dir(id) / "case.json";
    if (!fs::exists(path)) throw not_found("no case " + id);
    return json::parse(read_file(path));
  }

  static std::optional<Role> role_of(const json& c, const std::string& account) {
    for (const auto& p : c.at("participants"))
      if (p.at("account").get<std::string>() == account) return parse_role(p.at("role").get<std::string>());
    return std::nullopt;
  }

  // Appends one chained entry. Callers hold the case lock.
  AuditEntry append_audit(const std::string& id, const std::string& account, const std::string& action,
                          const std::string& object, const std::string& outcome, const std::string& content_hash) {
    const auto dir = case_dir(id);
    const auto entries = read_audit(dir);
    AuditEntry e;
    e.seq = entries.size() + 1;
    e.timestamp = opts_.clock();
    e.account = account;
    e.action = action;
    e.object = object;
    e.outcome = outcome;
    e.content_hash = content_hash;
    e.prev_hash = entries.empty() ? kGenesisHash : entries.back().entry_hash;
    e.entry_hash = audit_entry_hash(e);
    std::string text = fs::exists(dir / "audit.jsonl") ? read_file(dir / "audit.jsonl") : std::string();
    text += to_json(e).dump() + "\n";
    atomic_write_file(dir / "audit.jsonl", text);
    return e;
  }

  // Writes an object document after its audit entry (write-ahead).
  void write_audited(const std::string& id, const std::string& account, const std::string& action,
                     const std::string& object, const json& doc) {
    const std::string text = doc.dump(2) + "\n";
    append_audit(id, account, action, object, "ok", sha256_hex(text));
    atomic_write_file(case_dir(id) / (object + ".json"), text);
  }

  // Role gate for mutations. Denials on an existing case are audited.
  void require_role(const std::string& id, const json& c, const std::string& account, Role needed,
                    const std::string& action, const std::string& body) {
    auto role = role_of(c, account);
    if (!role) {
      append_audit(id, account, action, "case", "denied", sha256_hex(body));
      throw forbidden(account + " is not a participant of " + id);
    }
    if (static_cast<int>(*role) < static_cast<int>(needed)) {
      append_audit(id, account, action, "case", "denied", sha256_hex(body));
      throw forbidden(account + " (" + to_string(*role) + ") may not " + action);
    }
  }

  void require_read(const std::string& id, const json& c, const std::string& account) const {
    if (!role_of(c, account)) throw forbidden(account + " is not a participant of " + id);
  }

  CaseResponse route(const CaseRequest& req) {
    auto parts = nfat::detail::split(req.path, '/');
    // Leading slash yields an empty first element.
    if (parts.empty() || !parts.front().empty()) throw not_found("no route " + req.path);
    parts.erase(parts.begin());
    if (!parts.empty() && parts.back().empty()) parts.pop_back();
    const std::string account = authenticate(req);
    const auto& m = req.method;
    if (parts.size() == 1 && parts[0] == "healthz" && m == "GET") return ok({{"status", "ok"}});
    if (parts.empty() || parts[0] != "cases") throw not_found("no route " + req.path);
    if (parts.size() == 1 && m == "POST") return create_case(account, req);
    if (parts.size() < 2) throw not_found("no route " + req.path);
    const std::string id(parts[1]);
    if (parts.size() == 2 && m == "GET") return get_case(account, id);
    if (parts.size() == 3) {
      const auto what = parts[2];
      if (what == "participants" && m == "POST") return add_participant(account, id, req);
      if (what == "datasets" && m == "POST") return attach(account, id, req, "datasets");
      if (what == "models" && m == "POST") return attach(account, id, req, "models");
      if (what == "analyze" && m == "POST") return submit_analyze(account, id, req);
      if (what == "query" && m == "POST") return run_query(account, id, req);
      if (what == "bookmarks" && m == "POST") return create_bookmark(account, id, req);
      if (what == "bookmarks" && m == "GET") return list_bookmarks(account, id);
      if (what == "report" && m == "GET") return report(account, id, req);
      if (what == "audit" && m == "GET") return audit(account, id);
    }
    if (parts.size() == 4 && parts[2] == "analyze" && m == "GET") return job_status(account, id, std::string(parts[3]));
    throw not_found("no route " + m + " " + req.path);
  }

  CaseResponse create_case(const std::string& account, const CaseRequest& req) {
    const json body = parse_body(req);
    if (!body.is_object()) throw unprocessable("case: body must be an object");
    const auto title = body.value("title", std::string());
    if (title.empty()) throw unprocessable("case: title is required");
    std::string id;
    std::shared_ptr<std::mutex> lock;
    {
      std::lock_guard reg(registry_mutex_);
      std::size_t n = 0;
      for (const auto& e : fs::directory_iterator(opts_.data_dir / "cases")) {
        (void)e;
        ++n;
      }
      do {
        char buf[32];
        std::snprintf(buf, sizeof buf, "case-%06zu", ++n);
        id = buf;
      } while (fs::exists(case_dir(id)));
      fs::create_directories(case_dir(id));
      auto& l = case_locks_[id];
      if (!l) l = std::make_shared<std::mutex>();
      lock = l;
    }
    std::lock_guard guard(*lock);
    json c = {{"case_id", id},
              {"title", title},
              {"created_at", opts_.clock()},
              {"created_by", account},
              {"participants", json::array({{{"account", account}, {"role", "ADMIN"}}})},
              {"datasets", json::array()},
              {"models", json::array()},
              {"current_analysis", nullptr}};
    write_audited(id, account, "case.create", "case", c);
    return ok(c, 201);
  }

  CaseResponse get_case(const std::string& account, const std::string& id) {
    const json c = load_case(id);
    require_read(id, c, account);
    return ok(c);
  }

  CaseResponse add_participant(const std::string& account, const std::string& id, const CaseRequest& req) {
    load_case(id);
    auto lock = case_lock(id);
    std::lock_guard guard(*lock);
    json c = load_case(id);
    require_role(id, c, account, Role::Admin, "participant.add", req.body);
    const json body = parse_body(req);
    const auto who = body.value("account", std::string());
    const auto role = parse_role(body.value("role", std::string()));
    if (who.empty() || !role) throw unprocessable("participant: account and a valid role are required");
    if (role_of(c, who)) throw conflict(who + " is already a participant");
    c["participants"].push_back({{"account", who}, {"role", to_string(*role)}});
    write_audited(id, account, "participant.add", "case", c);
    return ok(c, 201);
  }

  // Attachments reference server-side paths and are keyed by content digest.
  static std::string dataset_digest(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json") || !fs::exists(dir / "records.csv"))
      throw unprocessable("dataset: " + dir.string() + " is not a dataset directory");
    std::string acc;
    for (const char* name : {"manifest.json", "records.csv", "users.csv", "ground_truth.csv", "interactions.csv"}) {
      acc += name;
      acc += '\n';
      acc += fs::exists(dir / name) ? sha256_hex(read_file(dir / name)) : std::string("-");
      acc += '\n';
    }
    return sha256_hex(acc);
  }

  static std::string model_digest(const fs::path& path) {
    if (!fs::exists(path)) throw unprocessable("model: " + path.string() + " does not exist");
    return sha256_hex(read_file(path));
  }

  static fs::path model_file(const fs::path& p) { return fs::is_directory(p) ? p / "model.json" : p; }

  CaseResponse attach(const std::string& account, const std::string& id, const CaseRequest& req, const std::string& kind) {
    load_case(id);
    auto lock = case_lock(id);
    std::lock_guard guard(*lock);
    json c = load_case(id);
    const std::string action = kind == "datasets" ? "dataset.attach" : "model.attach";
    require_role(id, c, account, Role::Investigator, action, req.body);
    const json body = parse_body(req);
    const auto path_text = body.value("path", std::string());
    if (path_text.empty()) throw unprocessable(kind + ": path is required");
    const fs::path path = fs::absolute(path_text).lexically_normal();
    const std::string digest = kind == "datasets" ? dataset_digest(path) : model_digest(model_file(path));
    const std::string ref_id = digest.substr(0, 16);
    for (const auto& d : c[kind])
      if (d.at("id").get<std::string>() == ref_id) throw conflict(kind + " " + ref_id + " already attached");
    json ref = {{"id", ref_id}, {"path", path.string()}, {"sha256", digest}, {"attached_by", account}};
    if (kind == "datasets") {
      const auto d = read_dataset(path);
      ref["record_count"] = d.records.size();
      ref["interaction_count"] = d.interactions.size();
    } else {
      try {
        identity_model_from_json(json::parse(read_file(model_file(path))));
      } catch (const std::exception& e) {
        throw unprocessable(std::string("model: ") + e.what());
      }
    }
    c[kind].push_back(ref);
    write_audited(id, account, action, "case", c);
    return ok(ref, 201);
  }

  std::shared_ptr<const Dataset> load_dataset_cached(const json& ref) {
    const std::string path = ref.at("path").get<std::string>();
    {
      std::lock_guard lock(cache_mutex_);
      if (auto it = dataset_cache_.find(ref.at("sha256").get<std::string>()); it != dataset_cache_.end()) return it->second;
    }
    if (dataset_digest(path) != ref.at("sha256").get<std::string>())
      throw conflict("dataset " + ref.at("id").get<std::string>() + " changed on disk since it was attached");
    auto d = std::make_shared<const Dataset>(read_dataset(path));
    std::lock_guard lock(cache_mutex_);
    dataset_cache_.emplace(ref.at("sha256").get<std::string>(), d);
    return d;
  }

  static const json* find_ref(const json& c, const std::string& kind, const std::string& ref_id) {
    for (const auto& d : c.at(kind))
      if (d.at("id").get<std::string>() == ref_id) return &d;
    return nullptr;
  }

  CaseResponse submit_analyze(const std::string& account, const std::string& id, const CaseRequest& req) {
    load_case(id);
    auto lock = case_lock(id);
    std::unique_lock guard(*lock);
    json c = load_case(id);
    require_role(id, c, account, Role::Investigator, "analyze.submit", req.body);
    const json body = parse_body(req);
    if (!body.is_object()) throw unprocessable("analyze: body must be an object");
    if (c["datasets"].empty()) throw unprocessable("analyze: no dataset attached");

    const json* dataset_ref = body.contains("dataset_id") ? find_ref(c, "datasets", body.at("dataset_id").get<std::string>())
                                                          : &c["datasets"].front();
    if (!dataset_ref) throw not_found("analyze: unknown dataset_id");
    const json* model_ref = nullptr;
    if (body.contains("model_id")) {
      model_ref = find_ref(c, "models", body.at("model_id").get<std::string>());
      if (!model_ref) throw not_found("analyze: unknown model_id");
    } else if (!c["models"].empty()) {
      model_ref = &c["models"].front();
    }
    AnalysisParams params;
    MlpConfig mlp_cfg;
    EnrollmentPolicy policy;
    try {
      const json tl = body.value("timeline", json::object());
      params.timeline.window_s = tl.value("window_s", params.timeline.window_s);
      params.timeline.confidence_threshold = tl.value("confidence_threshold", params.timeline.confidence_threshold);
      params.batch_window_s = body.value("batch_window_s", params.batch_window_s);
      if (body.contains("mlp")) mlp_cfg = mlp_config_from_json(body.at("mlp"), mlp_cfg);
      if (body.contains("policy")) policy = policy_from_json(body.at("policy"), policy);
      validate(params.timeline);
      validate(mlp_cfg);
    } catch (const json::exception& e) {
      throw unprocessable(std::string("analyze: ") + e.what());
    } catch (const Error& e) {
      throw unprocessable(std::string("analyze: ") + e.what());
    }
    if (!(params.batch_window_s > 0)) throw unprocessable("analyze: batch_window_s must be positive");

    std::string job_id;
    {
      std::lock_guard jl(jobs_mutex_);
      std::size_t n = 0;
      for (const auto& [key, job] : jobs_)
        if (key.rfind(id + "/", 0) == 0) ++n;
      job_id = "job-" + std::to_string(n + 1);
      jobs_[id + "/" + job_id] = Job{};
    }
    append_audit(id, account, "analyze.submit", "case", "ok", sha256_hex(body.dump()));
    guard.unlock();

    auto work = [this, id, account, job_id, dataset_ref = *dataset_ref,
                 model_ref = model_ref ? std::optional<json>(*model_ref) : std::nullopt, params, mlp_cfg, policy] {
      set_job(id, job_id, "running", "", "");
      try {
        const auto aid = run_analysis(id, account, dataset_ref, model_ref, params, mlp_cfg, policy);
        set_job(id, job_id, "done", aid, "");
      } catch (const std::exception& e) {
        set_job(id, job_id, "failed", "", e.what());
      }
    };
    if (opts_.synchronous_jobs) {
      work();
    } else {
      std::lock_guard jl(jobs_mutex_);
      threads_.emplace_back(work);
    }
    return ok({{"job_id", job_id}, {"status", job_snapshot(id, job_id).status}}, 202);
  }

  void set_job(const std::string& id, const std::string& job_id, std::string status, std::string aid, std::string err) {
    std::lock_guard jl(jobs_mutex_);
    auto& j = jobs_[id + "/" + job_id];
    j.status = std::move(status);
    j.analysis_id = std::move(aid);
    j.error = std::move(err);
  }

  Job job_snapshot(const std::string& id, const std::string& job_id) {
    std::lock_guard jl(jobs_mutex_);
    auto it = jobs_.find(id + "/" + job_id);
    if (it == jobs_.end()) throw not_found("no job " + job_id);
    return it->second;
  }

  std::string run_analysis(const std::string& id, const std::string& account, const json& dataset_ref,
                           const std::optional<json>& model_ref, const AnalysisParams& params,
                           const MlpConfig& mlp_cfg, const EnrollmentPolicy& policy) {
    const auto dataset = load_dataset_cached(dataset_ref);
    IdentityModel model;
    std::string model_id;
    std::optional<json> trained_doc;
    if (model_ref) {
      const auto path = model_file(model_ref->at("path").get<std::string>());
      if (model_digest(path) != model_ref->at("sha256").get<std::string>())
        throw conflict("model changed on disk since it was attached");
      model = identity_model_from_json(json::parse(read_file(path)));
      model_id = model_ref->at("id").get<std::string>();
    } else {
      model = enroll(*dataset, policy, mlp_cfg).model;
      trained_doc = to_json(model);
      model_id = "trained-" + sha256_hex(trained_doc->dump()).substr(0, 16);
    }
    Analysis a = analyze_dataset(*dataset, model, params);
    a.dataset_id = dataset_ref.at("id").get<std::string>();
    a.model_id = model_id;

    auto lock = case_lock(id);
    std::lock_guard guard(*lock);
    json c = load_case(id);
    std::size_t n = 0;
    if (fs::exists(case_dir(id) / "analyses"))
      for (const auto& e : fs::directory_iterator(case_dir(id) / "analyses")) {
        (void)e;
        ++n;
      }
    char buf[32];
    std::snprintf(buf, sizeof buf, "analysis-%04zu", n + 1);
    a.analysis_id = buf;
    if (trained_doc) write_audited(id, account, "model.train", "models/" + model_id, *trained_doc);
    write_audited(id, account, "analyze.complete", "analyses/" + a.analysis_id, to_json(a));
    c["current_analysis"] = a.analysis_id;
    write_audited(id, account, "analysis.activate", "case", c);
    std::lock_guard cl(cache_mutex_);
    analysis_cache_[id + "/" + a.analysis_id] = std::make_shared<const Analysis>(std::move(a));
    return std::string(buf);
  }

  CaseResponse job_status(const std::string& account, const std::string& id, const std::string& job_id) {
    const json c = load_case(id);
    require_read(id, c, account);
    const Job j = job_snapshot(id, job_id);
    json out = {{"job_id", job_id}, {"status", j.status}};
    if (!j.analysis_id.empty()) out["analysis_id"] = j.analysis_id;
    if (!j.error.empty()) out["error"] = j.error;
    return ok(out);
  }

  std::shared_ptr<const Analysis> current_analysis(const std::string& id, const json& c) {
    if (c.at("current_analysis").is_null()) throw unprocessable("case has not been analyzed");
    const auto aid = c.at("current_analysis").get<std::string>();
    {
      std::lock_guard lock(cache_mutex_);
      if (auto it = analysis_cache_.find(id + "/" + aid); it != analysis_cache_.end()) return it->second;
    }
    auto a = std::make_shared<const Analysis>(
        analysis_from_json(json::parse(read_file(case_dir(id) / "analyses" / (aid + ".json")))));
    std::lock_guard lock(cache_mutex_);
    analysis_cache_.emplace(id + "/" + aid, a);
    return a;
  }

  json execute(const std::string& id, const json& c, const Analysis& a, const QuerySpec& q) {
    std::span<const PacketRecord> records;
    std::shared_ptr<const Dataset> dataset;
    if (q.kind == QueryKind::InteractionDetail) {
      const json* ref = find_ref(c, "datasets", a.dataset_id);
      if (!ref) throw ServiceError(500, "internal", "analysis references a detached dataset");
      dataset = load_dataset_cached(*ref);
      records = dataset->records;
    }
    (void)id;
    return execute_query(a, q, records);
  }

  json provenance(const std::string& id, const Analysis& a) const {
    return {{"case_id", id},
            {"analysis_id", a.analysis_id},
            {"dataset_id", a.dataset_id},
            {"model_id", a.model_id},
            {"window_s", a.params.timeline.window_s},
            {"confidence_threshold", a.params.timeline.confidence_threshold},
            {"batch_window_s", a.params.batch_window_s}};
  }

  CaseResponse run_query(const std::string& account, const std::string& id, const CaseRequest& req) {
    const json c = load_case(id);
    require_read(id, c, account);
    const json body = parse_body(req);
    const QuerySpec q = parse_query_spec(body);
    const auto a = current_analysis(id, c);
    const json rows = execute(id, c, *a, q);
    const std::size_t default_page = std::min<std::size_t>(100, opts_.max_page_size);
    std::size_t page = 1, page_size = default_page;
    try {
      page = body.value("page", std::size_t{1});
      page_size = body.value("page_size", default_page);
    } catch (const json::exception& e) {
      throw unprocessable(std::string("query: ") + e.what());
    }
    if (page < 1 || page_size < 1 || page_size > opts_.max_page_size) throw unprocessable("query: bad paging");
    const std::string handle = "q-" + sha256_hex(id + "\n" + a->analysis_id + "\n" + q.echo.dump()).substr(0, 24);
    {
      std::lock_guard lock(cache_mutex_);
      handles_[handle] = {id, a->analysis_id, q.echo};
    }
    json page_rows = json::array();
    for (std::size_t i = (page - 1) * page_size; i < rows.size() && i < page * page_size; ++i) page_rows.push_back(rows[i]);
    return ok({{"query_handle", handle},
               {"query_spec", q.echo},
               {"provenance", provenance(id, *a)},
               {"total_rows", rows.size()},
               {"page", page},
               {"page_size", page_size},
               {"digest", rows_digest(rows)},
               {"rows", page_rows}});
  }

  std::vector<json> load_bookmarks(const std::string& id) const {
    std::vector<json> out;
    const auto dir = case_dir(id) / "bookmarks";
    if (!fs::exists(dir)) return out;
    std::vector<fs::path> files;
    for (const auto& f : fs::directory_iterator(dir))
      if (f.path().extension() == ".json") files.push_back(f.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back(json::parse(read_file(f)));
    return out;
  }

  CaseResponse create_bookmark(const std::string& account, const std::string& id, const CaseRequest& req) {
    load_case(id);
    auto lock = case_lock(id);
    std::lock_guard guard(*lock);
    const json c = load_case(id);
    require_role(id, c, account, Role::Investigator, "bookmark.create", req.body);
    const json body = parse_body(req);
    if (!body.is_object()) throw unprocessable("bookmark: body must be an object");
    const auto handle_id = body.value("query_handle", std::string());
    QueryHandle h;
    {
      std::lock_guard cl(cache_mutex_);
      auto it = handles_.find(handle_id);
      if (it == handles_.end() || it->second.case_id != id) throw not_found("stale or unknown query handle");
      h = it->second;
    }
    if (c.at("current_analysis").is_null() || c.at("current_analysis").get<std::string>() != h.analysis_id)
      throw not_found("stale query handle: the case was re-analyzed");
    const auto a = current_analysis(id, c);
    const json rows = execute(id, c, *a, parse_query_spec(h.spec));
    const auto existing = load_bookmarks(id);
    char buf[32];
    std::snprintf(buf, sizeof buf, "bm-%04zu", existing.size() + 1);
    json b = {{"bookmark_id", buf},
              {"query_spec", h.spec},
              {"filter_spec", body.value("filter_spec", json::object())},
              {"visualization_kind", body.value("visualization_kind", std::string("table"))},
              {"comments", body.value("comments", std::string())},
              {"provenance", provenance(id, *a)},
              {"raw_extract", rows},
              {"raw_digest", rows_digest(rows)},
              {"created_by", account},
              {"created_at", opts_.clock()}};
    write_audited(id, account, "bookmark.create", std::string("bookmarks/") + buf, b);
    return ok(b, 201);
  }

  // Bookmarks with a re-execution check against the current analysis.
  json bookmarks_with_drift(const std::string& id, const json& c) {
    std::shared_ptr<const Analysis> a;
    if (!c.at("current_analysis").is_null()) a = current_analysis(id, c);
    json out = json::array();
    for (auto b : load_bookmarks(id)) {
      json check = {{"recorded_digest", b.at("raw_digest")}};
      if (a) {
        try {
          const auto digest = rows_digest(execute(id, c, *a, parse_query_spec(b.at("query_spec"))));
          check["current_digest"] = digest;
          check["digest_match"] = digest == b.at("raw_digest").get<std::string>();
        } catch (const ServiceError& e) {
          check["current_digest"] = nullptr;
          check["digest_match"] = false;
          check["error"] = e.what();
        }
      } else {
        check["current_digest"] = nullptr;
        check["digest_match"] = false;
      }
      check["drift"] = !check["digest_match"].get<bool>();
      b["reexecution"] = check;
      out.push_back(std::move(b));
    }
    return out;
  }

  CaseResponse list_bookmarks(const std::string& account, const std::string& id) {
    const json c = load_case(id);
    require_read(id, c, account);
    return ok({{"case_id", id}, {"bookmarks", bookmarks_with_drift(id, c)}});
  }

  CaseResponse audit(const std::string& account, const std::string& id) {
    const json c = load_case(id);
    require_read(id, c, account);
    json entries = json::array();
    for (const auto& e : read_audit(case_dir(id))) entries.push_back(to_json(e));
    const auto v = verify_case(case_dir(id));
    return ok({{"case_id", id}, {"verified", v.ok}, {"problems", v.problems}, {"head", v.head}, {"entries", entries}});
  }

 public:
  // Report document for a case directory; deterministic given case state.
  json report_document(const std::string& id) {
    const json c = load_case(id);
    const auto v = verify_case(case_dir(id));
    json bookmarks = json::array();
    for (const auto& b : bookmarks_with_drift(id, c)) bookmarks.push_back(b);
    return {{"case", {{"case_id", c.at("case_id")},
                      {"title", c.at("title")},
                      {"created_at", c.at("created_at")},
                      {"created_by", c.at("created_by")},
                      {"datasets", c.at("datasets")},
                      {"models", c.at("models")},
                      {"current_analysis", c.at("current_analysis")}}},
            {"participants", c.at("participants")},
            {"bookmarks", bookmarks},
            {"audit", {{"head_digest", v.head}, {"verified", v.ok}, {"problems", v.problems}}}};
  }

 private:
  CaseResponse report(const std::string& account, const std::string& id, const CaseRequest& req) {
    const json c = load_case(id);
    require_read(id, c, account);
    const json doc = report_document(id);
    auto fmt = req.query.find("format");
    if (fmt != req.query.end() && fmt->second == "text") return {200, report_text(doc), "text/plain; charset=utf-8"};
    if (fmt != req.query.end() && fmt->second != "json") throw unprocessable("report: format must be json or text");
    return ok(doc);
  }

 public:
  static std::string report_text(const json& doc) {
    std::string out;
    const auto& c = doc.at("case");
    out += "CASE REPORT\n";
    out += "case_id: " + c.at("case_id").get<std::string>() + "\n";
    out += "title: " + c.at("title").get<std::string>() + "\n";
    out += "created_at: " + c.at("created_at").get<std::string>() + "\n";
    out += "created_by: " + c.at("created_by").get<std::string>() + "\n";
    out += "current_analysis: " + (c.at("current_analysis").is_null() ? std::string("none") : c.at("current_analysis").get<std::string>()) + "\n";
    out += "\nPARTICIPANTS\n";
    for (const auto& p : doc.at("participants"))
      out += "  " + p.at("account").get<std::string>() + " " + p.at("role").get<std::string>() + "\n";
    out += "\nDATASETS\n";
    for (const auto& d : c.at("datasets"))
      out += "  " + d.at("id").get<std::string>() + " " + d.at("path").get<std::string>() + " sha256=" + d.at("sha256").get<std::string>() + "\n";
    out += "\nMODELS\n";
    for (const auto& d : c.at("models"))
      out += "  " + d.at("id").get<std::string>() + " " + d.at("path").get<std::string>() + " sha256=" + d.at("sha256").get<std::string>() + "\n";
    out += "\nBOOKMARKS\n";
    if (doc.at("bookmarks").empty()) out += "  (none)\n";
    for (const auto& b : doc.at("bookmarks")) {
      out += "\n[" + b.at("bookmark_id").get<std::string>() + "] by " + b.at("created_by").get<std::string>() + " at " +
             b.at("created_at").get<std::string>() + "\n";
      out += "  visualization: " + b.at("visualization_kind").get<std::string>() + "\n";
      out += "  comments: " + b.at("comments").get<std::string>() + "\n";
      out += "  query: " + b.at("query_spec").dump() + "\n";
      out += "  filters: " + b.at("filter_spec").dump() + "\n";
      out += "  provenance: " + b.at("provenance").dump() + "\n";
      out += "  raw_digest: " + b.at("raw_digest").get<std::string>() + "\n";
      const auto& r = b.at("reexecution");
      out += std::string("  drift: ") + (r.at("drift").get<bool>() ? "YES" : "no") + "\n";
      out += "  raw_extract (" + std::to_string(b.at("raw_extract").size()) + " rows):\n";
      for (const auto& row : b.at("raw_extract")) out += "    " + row.dump() + "\n";
    }
    out += "\nAUDIT\n";
    out += "  head_digest: " + doc.at("audit").at("head_digest").get<std::string>() + "\n";
    out += std::string("  verified: ") + (doc.at("audit").at("verified").get<bool>() ? "yes" : "NO") + "\n";
    for (const auto& p : doc.at("audit").at("problems")) out += "  problem: " + p.get<std::string>() + "\n";
    return out;
  }
};

}  // namespace nfat::casework
