#pragma once

// httplib front end for CaseService. Every route is forwarded verbatim; the
// service owns routing, auth and status codes.

#include <cstdlib>
#include <string>

// Eigen must come before httplib: <resolv.h> defines a _res macro.
#include "nfat/casework.hpp"

#include <httplib.h>

namespace nfat::casework {

struct HttpConfig {
  std::string bind = "127.0.0.1";
  int port = 8088;
  std::string allow_origin = "*";
};

// Fills data dir, bind, port and token file from NFAT_DATA_DIR, NFAT_BIND,
// NFAT_PORT and NFAT_TOKENS; explicit values already set win.
inline void apply_environment(HttpConfig& http, fs::path& data_dir, fs::path& token_file) {
  auto env = [](const char* name) -> std::optional<std::string> {
    const char* v = std::getenv(name);
    if (!v || !*v) return std::nullopt;
    return std::string(v);
  };
  if (data_dir.empty())
    if (auto v = env("NFAT_DATA_DIR")) data_dir = *v;
  if (token_file.empty())
    if (auto v = env("NFAT_TOKENS")) token_file = *v;
  if (auto v = env("NFAT_BIND")) http.bind = *v;
  if (auto v = env("NFAT_PORT")) {
    int port = 0;
    if (!parse_int(*v, port) || port < 0 || port > 65535) throw Error(ErrorKind::Usage, "NFAT_PORT: invalid port " + *v);
    http.port = port;
  }
}

inline CaseRequest to_case_request(const httplib::Request& req) {
  CaseRequest out;
  out.method = req.method;
  out.path = req.path;
  out.body = req.body;
  for (const auto& [k, v] : req.params) out.query.emplace(k, v);
  if (req.has_header("Authorization")) out.authorization = req.get_header_value("Authorization");
  return out;
}

inline void install_routes(httplib::Server& server, CaseService& service, const HttpConfig& cfg) {
  auto forward = [&service, origin = cfg.allow_origin](const httplib::Request& req, httplib::Response& res) {
    const auto r = service.handle(to_case_request(req));
    res.status = r.status;
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_content(r.body, r.content_type);
  };
  server.Get(".*", forward);
  server.Post(".*", forward);
  server.Options(".*", [origin = cfg.allow_origin](const httplib::Request&, httplib::Response& res) {
    res.status = 204;
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Access-Control-Allow-Headers", "Authorization, Content-Type");
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
  });
}

}  // namespace nfat::casework
