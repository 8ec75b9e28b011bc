#pragma once

// Shared scenario for the casework tests and the acceptance binary: a small
// generated dataset and a model trained on it, both written to disk.

#include "nfat/casework.hpp"
#include "test_support.hpp"

namespace nfat::testing {

using nlohmann::json;
using casework::CaseRequest;
using casework::CaseResponse;
using casework::CaseService;

struct Accounts {
  static constexpr const char* admin = "t-admin";  // alice
  static constexpr const char* inv = "t-inv";      // bob
  static constexpr const char* viewer = "t-view";  // carol
  static constexpr const char* outsider = "t-out"; // dave
  static constexpr const char* extra = "t-erin";   // erin
};

inline casework::TokenStore test_tokens() {
  return casework::TokenStore(json{{"tokens",
                                    {{{"account", "alice"}, {"token", Accounts::admin}},
                                     {{"account", "bob"}, {"token", Accounts::inv}},
                                     {{"account", "carol"}, {"token", Accounts::viewer}},
                                     {{"account", "dave"}, {"token", Accounts::outsider}},
                                     {{"account", "erin"}, {"token", Accounts::extra}}}}});
}

// Deterministic clock: 2026-01-01T00:00:00Z plus one second per call.
inline std::function<std::string()> counting_clock() {
  auto n = std::make_shared<int>(0);
  return [n] {
    const int s = (*n)++;
    char buf[32];
    std::snprintf(buf, sizeof buf, "2026-01-01T%02d:%02d:%02dZ", s / 3600 % 24, s / 60 % 60, s % 60);
    return std::string(buf);
  };
}

struct Scenario {
  TempDir root;
  fs::path dataset_dir;
  fs::path model_path;
  Dataset dataset;
  IdentityModel model;

  Scenario() {
    dataset = generate(small_config(21));
    model = enroll(dataset, fast_policy(), fast_mlp()).model;
    dataset_dir = root / "dataset";
    write_dataset(dataset_dir, dataset);
    model_path = root / "model.json";
    atomic_write_file(model_path, to_json(model).dump() + "\n");
  }
};

inline const Scenario& scenario() {
  static const Scenario s;
  return s;
}

class Client {
 public:
  explicit Client(CaseService& s) : s_(s) {}

  CaseResponse call(const std::string& method, const std::string& path, const json& body = nullptr,
                    const char* token = Accounts::admin, std::map<std::string, std::string> query = {}) {
    CaseRequest r;
    r.method = method;
    r.path = path;
    r.query = std::move(query);
    if (!body.is_null()) r.body = body.dump();
    if (token) r.authorization = std::string("Bearer ") + token;
    return s_.handle(r);
  }
  json get(const std::string& path, const char* token = Accounts::admin) { return json::parse(call("GET", path, nullptr, token).body); }
  json post(const std::string& path, const json& body, const char* token = Accounts::admin) {
    return json::parse(call("POST", path, body, token).body);
  }

  // Case with bob as investigator, carol as viewer, the scenario dataset and
  // model attached, and one analysis at the given settings.
  std::string prepared_case(double window_s = 0, double threshold = 0.9) {
    const auto c = post("/cases", {{"title", "scenario"}});
    const std::string id = c.at("case_id");
    const std::string base = "/cases/" + id;
    expect(call("POST", base + "/participants", {{"account", "bob"}, {"role", "INVESTIGATOR"}}), 201);
    expect(call("POST", base + "/participants", {{"account", "carol"}, {"role", "VIEWER"}}), 201);
    expect(call("POST", base + "/datasets", {{"path", scenario().dataset_dir.string()}}), 201);
    expect(call("POST", base + "/models", {{"path", scenario().model_path.string()}}), 201);
    const auto job = expect(analyze(id, window_s, threshold), 202);
    if (json::parse(job.body).at("status") != "done") throw std::runtime_error("prepared_case: analysis did not finish: " + job.body);
    return id;
  }

  static const CaseResponse& expect(const CaseResponse& r, int status) {
    if (r.status != status)
      throw std::runtime_error("prepared_case: expected " + std::to_string(status) + ", got " + std::to_string(r.status) + ": " + r.body);
    return r;
  }

  CaseResponse analyze(const std::string& id, double window_s, double threshold, const char* token = Accounts::inv) {
    return call("POST", "/cases/" + id + "/analyze",
                {{"timeline", {{"window_s", window_s}, {"confidence_threshold", threshold}}}}, token);
  }

 private:
  CaseService& s_;
};

inline casework::ServiceOptions test_options(const fs::path& data_dir, std::size_t max_page_size = 1000) {
  casework::ServiceOptions o;
  o.data_dir = data_dir;
  o.tokens = test_tokens();
  o.clock = counting_clock();
  o.synchronous_jobs = true;
  o.max_page_size = max_page_size;
  return o;
}

// One randomized session of authenticated and unauthenticated operations.
// Returns a description of the first expectation that did not hold, or an
// empty string. The audit log must grow by exactly the modelled amount.
inline std::string random_session(CaseService& service, std::uint64_t seed, int ops) {
  Client cl(service);
  std::mt19937_64 rng(seed);
  const std::string id = cl.prepared_case();
  const std::string base = "/cases/" + id;
  std::map<std::string, int> role = {{"alice", 3}, {"bob", 2}, {"carol", 1}};
  const std::vector<std::pair<std::string, const char*>> actors = {
      {"alice", Accounts::admin}, {"bob", Accounts::inv}, {"carol", Accounts::viewer},
      {"dave", Accounts::outsider}, {"erin", Accounts::extra}, {"", nullptr}, {"?", "bogus"}};
  std::vector<std::string> handles;
  std::size_t expected_audit = casework::read_audit(service.case_dir(id)).size();
  std::uniform_int_distribution<int> pick_actor(0, static_cast<int>(actors.size()) - 1);
  std::uniform_int_distribution<int> pick_op(0, 99);
  const std::vector<std::string> kinds = {"USER_TIMELINE", "SERVICE_USERS", "IP_PIVOT", "OVERVIEW_MATRIX"};

  for (int i = 0; i < ops; ++i) {
    const auto& [who, token] = actors[static_cast<std::size_t>(pick_actor(rng))];
    const int r = role.count(who) ? role.at(who) : 0;
    const bool authed = !who.empty() && who != "?";
    const int op = pick_op(rng);
    std::string what;
    CaseResponse res;
    bool mutation = false;
    int need = 0;
    std::size_t grows = 0;
    if (op < 15) {
      what = "get case";
      res = cl.call("GET", base, nullptr, token);
    } else if (op < 25) {
      what = "add participant";
      mutation = true;
      need = 3;
      const std::string target = rng() % 2 ? "dave" : "erin";
      const char* roles[] = {"VIEWER", "INVESTIGATOR", "ADMIN"};
      const int rr = static_cast<int>(rng() % 3);
      res = cl.call("POST", base + "/participants", {{"account", target}, {"role", roles[rr]}}, token);
      if (res.status == 201) role[target] = rr + 1, grows = 1;
    } else if (op < 30) {
      what = "attach dataset";
      mutation = true;
      need = 2;
      res = cl.call("POST", base + "/datasets", {{"path", scenario().dataset_dir.string()}}, token);
      if (authed && r >= 2 && res.status != 409) return "duplicate attach returned " + std::to_string(res.status);
    } else if (op < 55) {
      what = "query";
      json q = {{"kind", kinds[rng() % kinds.size()]}};
      if (q["kind"] == "USER_TIMELINE") q["user"] = 1 + static_cast<int>(rng() % 3);
      if (q["kind"] == "SERVICE_USERS") q["service"] = "YouTube";
      if (q["kind"] == "IP_PIVOT") q["ip"] = "10.0.0.1";
      if (rng() % 3 == 0) q["from"] = static_cast<double>(rng() % 20000), q["to"] = 20000.0 + static_cast<double>(rng() % 20000);
      res = cl.call("POST", base + "/query", q, token);
      if (res.status == 200) handles.push_back(json::parse(res.body).at("query_handle"));
    } else if (op < 70) {
      what = "bookmark";
      mutation = true;
      need = 2;
      const std::string h = handles.empty() ? "q-none" : handles[rng() % handles.size()];
      res = cl.call("POST", base + "/bookmarks", {{"query_handle", h}, {"comments", "op " + std::to_string(i)}}, token);
      if (res.status == 201) grows = 1;
      if (authed && r >= 2 && handles.empty() && res.status != 404) return "bookmark without handle returned " + std::to_string(res.status);
    } else if (op < 78) {
      what = "list bookmarks";
      res = cl.call("GET", base + "/bookmarks", nullptr, token);
    } else if (op < 84) {
      what = "report";
      res = cl.call("GET", base + "/report", nullptr, token, {{"format", rng() % 2 ? "text" : "json"}});
    } else if (op < 92) {
      what = "audit";
      res = cl.call("GET", base + "/audit", nullptr, token);
      if (res.status == 200 && !json::parse(res.body).at("verified").get<bool>()) return "audit endpoint reports unverified";
    } else if (op < 96) {
      what = "analyze";
      mutation = true;
      need = 2;
      const double thetas[] = {0.6, 0.8, 0.9};
      res = cl.analyze(id, static_cast<double>(rng() % 3) * 60.0, thetas[rng() % 3], token);
      if (res.status == 202) {
        if (json::parse(res.body).at("status") != "done") return "synchronous analyze did not finish";
        grows = 3;
        handles.clear();
      }
    } else {
      what = "create case";
      res = cl.call("POST", "/cases", {{"title", "side"}}, token);
      if (authed && res.status != 201) return "create case returned " + std::to_string(res.status);
      if (authed) continue;
    }

    int expected_status = -1;
    if (!authed) {
      expected_status = 401;
    } else if (r == 0) {
      expected_status = 403;
      if (mutation) grows = 1;
    } else if (mutation && r < need) {
      expected_status = 403;
      grows = 1;
    }
    if (expected_status != -1 && res.status != expected_status)
      return what + " by '" + who + "': expected " + std::to_string(expected_status) + ", got " + std::to_string(res.status);
    if (expected_status == -1 && res.status >= 500) return what + ": server error " + res.body;
    if (expected_status == -1 && !mutation && res.status != 200) return what + " by " + who + ": status " + std::to_string(res.status);
    expected_audit += grows;
    const auto actual = casework::read_audit(service.case_dir(id)).size();
    if (actual != expected_audit)
      return what + " by '" + who + "' (status " + std::to_string(res.status) + "): audit has " + std::to_string(actual) +
             " entries, expected " + std::to_string(expected_audit);
  }
  const auto v = casework::verify_case(service.case_dir(id));
  if (!v.ok) return "verify_case: " + (v.problems.empty() ? std::string("?") : v.problems.front());
  return "";
}

}  // namespace nfat::testing
