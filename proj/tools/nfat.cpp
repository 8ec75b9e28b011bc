// nfat: headless driver for the whole pipeline.
//
//   ingest   pcap or metadata -> canonical records
//   extract  records + signatures -> interactions, data-reduction table
//   synth    generator config -> dataset
//   enroll   dataset + policy + mlp config -> model, split manifest
//   identify model + records -> ranked lists per source address
//   evaluate model + held-out split -> rank-k and reduction tables
//   timeline decisions -> per-window accuracy table
//   serve    casework HTTP service
//   report   case directory -> report document

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "nfat/casework_http.hpp"
#include "nfat/evaluation.hpp"
#include "nfat/ingest.hpp"
#include "nfat/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const fs::path& path, const char* what) {
  try {
    return json::parse(nfat::read_file(path));
  } catch (const json::exception& e) {
    throw nfat::ParseError(std::string(what) + " " + path.string() + ": " + e.what());
  }
}

nfat::SignatureSet load_signatures(const std::string& path) {
  if (path.empty()) return nfat::default_signatures();
  return nfat::signatures_from_json(load_json(path, "signatures"));
}

std::vector<nfat::PacketRecord> load_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw nfat::ParseError("cannot open " + path.string());
  return nfat::parse_metadata(in);
}

std::vector<double> parse_list(const std::string& text, const char* what) {
  std::vector<double> out;
  for (auto part : nfat::detail::split(text, ',')) {
    double v = 0;
    if (!nfat::parse_double(part, v)) throw nfat::Error(nfat::ErrorKind::Usage, std::string(what) + ": bad value '" + std::string(part) + "'");
    out.push_back(v);
  }
  return out;
}

fs::path model_path(const fs::path& p) { return fs::is_directory(p) ? p / "model.json" : p; }

nfat::IdentityModel load_model(const fs::path& p) {
  return nfat::identity_model_from_json(load_json(model_path(p), "model"));
}

// --- ingest ----------------------------------------------------------------------

struct IngestArgs {
  std::string input, kind = "pcap", monitored, out;
  std::optional<std::size_t> max_records;
};

int run_ingest(const IngestArgs& a) {
  nfat::IngestConfig cfg;
  cfg.max_records = a.max_records;
  for (auto part : nfat::detail::split(a.monitored, ',')) {
    if (part.empty()) continue;
    auto ip = nfat::Ipv4::parse(part);
    if (!ip) throw nfat::Error(nfat::ErrorKind::Usage, "--monitored: bad address '" + std::string(part) + "'");
    cfg.monitored_hosts.insert(*ip);
  }
  std::vector<nfat::PacketRecord> records;
  if (a.kind == "pcap") {
    cfg.input_kind = nfat::InputKind::Pcap;
    if (cfg.monitored_hosts.empty()) throw nfat::Error(nfat::ErrorKind::Usage, "ingest: pcap input needs --monitored");
    const std::string bytes = nfat::read_file(a.input);
    auto r = nfat::parse_pcap(std::as_bytes(std::span(bytes.data(), bytes.size())), cfg);
    std::cerr << "frames " << r.frames << ", records " << r.records.size() << ", skipped " << r.skipped
              << " (ipv6 " << r.skipped_ipv6 << ", non-ip " << r.skipped_non_ip << ", other " << r.skipped_other << ")\n";
    records = std::move(r.records);
  } else {
    cfg.input_kind = nfat::InputKind::Metadata;
    std::ifstream in(a.input);
    if (!in) throw nfat::ParseError("cannot open " + a.input);
    records = nfat::parse_metadata(in, cfg.max_records);
  }
  nfat::atomic_write_file(a.out, nfat::to_metadata_text(records));
  return 0;
}

// --- extract -----------------------------------------------------------------------

struct ExtractArgs {
  std::string dataset, records, signatures, out, report_dir;
};

int run_extract(const ExtractArgs& a) {
  const auto signatures = load_signatures(a.signatures);
  nfat::Dataset d;
  if (!a.dataset.empty()) d = nfat::read_dataset(a.dataset);
  else d.records = load_records(a.records);
  d.interactions = nfat::segment_interactions(d.records, signatures.signatures);
  const auto report = nfat::reduction_report(d.records, d.interactions, signatures.signatures);
  nfat::atomic_write_directory(a.out, [&](const fs::path& tmp) {
    nfat::write_dataset_files(tmp, d);
    nfat::write_reduction_files(tmp, report);
  });
  if (!a.report_dir.empty())
    nfat::atomic_write_directory(a.report_dir, [&](const fs::path& tmp) { nfat::write_reduction_files(tmp, report); });
  std::cout << nfat::reduction_report_text(report);
  return 0;
}

// --- synth ------------------------------------------------------------------------

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> users;
  std::optional<double> days, separability, churn, coverage;
};

int run_synth(const SynthArgs& a) {
  nfat::GeneratorConfig cfg;
  if (!a.config.empty()) cfg = nfat::generator_config_from_json(load_json(a.config, "generator config"));
  if (a.seed) cfg.seed = *a.seed;
  if (a.users) cfg.n_users = *a.users;
  if (a.days) cfg.days = *a.days;
  if (a.separability) cfg.separability = *a.separability;
  if (a.churn) cfg.ip_churn_s = *a.churn;
  if (a.coverage) cfg.service_coverage = *a.coverage;
  nfat::validate(cfg);
  const auto d = nfat::generate(cfg);
  nfat::atomic_write_directory(a.out, [&](const fs::path& tmp) {
    nfat::write_dataset_files(tmp, d);
    nfat::atomic_write_file(tmp / "generator.json", nfat::to_json(cfg).dump(2) + "\n");
  });
  std::cerr << "users " << d.n_users << ", records " << d.records.size() << ", planted interactions "
            << d.interactions.size() << "\n";
  return 0;
}

// --- enroll ------------------------------------------------------------------------

struct EnrollArgs {
  std::string dataset, policy, mlp, out;
  std::optional<std::uint64_t> seed;
};

int run_enroll(const EnrollArgs& a) {
  nfat::EnrollmentPolicy policy;
  nfat::MlpConfig mlp;
  if (!a.policy.empty()) policy = nfat::policy_from_json(load_json(a.policy, "policy"));
  if (!a.mlp.empty()) mlp = nfat::mlp_config_from_json(load_json(a.mlp, "mlp config"));
  if (a.seed) policy.seed = *a.seed;
  const auto d = nfat::read_dataset(a.dataset);
  const auto e = nfat::enroll(d, policy, mlp);
  json training = json::array();
  for (const auto& [key, r] : e.training)
    training.push_back({{"user", key.first},
                        {"service", key.second},
                        {"initial_error", r.initial_error},
                        {"final_error", r.epoch_error.empty() ? r.initial_error : r.epoch_error.back()},
                        {"accepted_epochs", r.accepted_epochs},
                        {"skipped_epochs", r.skipped_epochs}});
  json skipped = json::array();
  for (const auto& [user, service] : e.skipped_pairs) skipped.push_back({{"user", user}, {"service", service}});
  const json summary = {{"policy", nfat::to_json(policy)},
                        {"mlp", nfat::to_json(mlp)},
                        {"classifiers", e.model.classifiers.size()},
                        {"enrolled_users", e.model.enrolled_users().size()},
                        {"test_interactions", e.test_set.size()},
                        {"skipped_pairs", skipped},
                        {"training", training}};
  nfat::atomic_write_directory(a.out, [&](const fs::path& tmp) {
    nfat::atomic_write_file(tmp / "model.json", nfat::to_json(e.model).dump() + "\n");
    nfat::atomic_write_file(tmp / "split.csv", nfat::split_manifest_text(e.split));
    nfat::atomic_write_file(tmp / "enrollment.json", summary.dump(2) + "\n");
  });
  std::cerr << "classifiers " << e.model.classifiers.size() << ", enrolled users " << e.model.enrolled_users().size()
            << ", held-out interactions " << e.test_set.size() << "\n";
  return 0;
}

// --- identify ---------------------------------------------------------------------

struct IdentifyArgs {
  std::string model, records, dataset, signatures, mode = "fusion", src_ip, out;
  std::optional<double> from, to;
};

int run_identify(const IdentifyArgs& a) {
  const auto model = load_model(a.model);
  nfat::Mode mode;
  if (a.mode == "fusion") mode = nfat::Mode::Fusion;
  else if (a.mode == "max_rule") mode = nfat::Mode::MaxRule;
  else if (a.mode == "pooled") mode = nfat::Mode::PooledBaseline;
  else throw nfat::Error(nfat::ErrorKind::Usage, "--mode must be fusion, max_rule or pooled");
  if (a.from && a.to && *a.from > *a.to) throw nfat::Error(nfat::ErrorKind::Usage, "--from must not exceed --to");
  std::optional<nfat::Ipv4> only;
  if (!a.src_ip.empty()) {
    only = nfat::Ipv4::parse(a.src_ip);
    if (!only) throw nfat::Error(nfat::ErrorKind::Usage, "--src-ip: bad address");
  }
  std::vector<nfat::PacketRecord> records =
      a.dataset.empty() ? load_records(a.records) : nfat::read_dataset(a.dataset).records;
  const auto signatures = load_signatures(a.signatures);
  std::map<nfat::Ipv4, nfat::IdentificationBatch> batches;
  for (auto& it : nfat::segment_interactions(records, signatures.signatures)) {
    if ((a.from && it.start < *a.from) || (a.to && it.start > *a.to) || (only && it.src_ip != *only)) continue;
    auto& b = batches[it.src_ip];
    b.mode = mode;
    b.interactions.push_back(std::move(it));
  }
  json out = json::array();
  for (const auto& [ip, batch] : batches) {
    json entry = {{"src_ip", ip.to_string()},
                  {"mode", nfat::to_string(mode)},
                  {"interactions", batch.interactions.size()},
                  {"first_start", batch.interactions.front().start},
                  {"last_start", batch.interactions.back().start}};
    try {
      entry["ranked"] = nfat::detail::ranked_json(nfat::identify(model, batch));
    } catch (const nfat::AnalysisError& e) {
      entry["ranked"] = json::array();
      entry["note"] = e.what();
    }
    out.push_back(std::move(entry));
  }
  const std::string text = out.dump(2) + "\n";
  if (a.out.empty()) std::cout << text;
  else nfat::atomic_write_file(a.out, text);
  return 0;
}

// --- evaluate / timeline -----------------------------------------------------------

struct EvalArgs {
  std::string dataset, model, split, config, signatures, out;
  std::optional<double> batch_window, theta;
  std::string windows;
};

nfat::EvalConfig eval_config(const std::string& path, const std::string& windows, std::optional<double> theta,
                             std::optional<double> batch_window) {
  nfat::EvalConfig cfg;
  if (!path.empty()) cfg = nfat::eval_config_from_json(load_json(path, "eval config"));
  json overrides = json::object();
  if (!windows.empty()) overrides["windows"] = parse_list(windows, "--windows");
  if (theta) overrides["confidence_threshold"] = *theta;
  if (batch_window) overrides["batch_window_s"] = *batch_window;
  return nfat::eval_config_from_json(overrides, cfg);
}

int run_evaluate(const EvalArgs& a) {
  const auto cfg = eval_config(a.config, a.windows, a.theta, a.batch_window);
  const auto d = nfat::read_dataset(a.dataset);
  const auto model = load_model(a.model);
  const fs::path split_path =
      !a.split.empty() ? fs::path(a.split) : (fs::is_directory(a.model) ? fs::path(a.model) / "split.csv" : fs::path());
  if (split_path.empty()) throw nfat::Error(nfat::ErrorKind::Usage, "evaluate: --split is required when --model is a file");
  const auto split = nfat::parse_split_manifest(nfat::read_file(split_path));
  const auto test_set = nfat::test_set_from_split(d, model, split);
  const auto ev = nfat::evaluate(model, test_set, cfg);
  for (const auto& row : ev.by_user)
    for (const auto& [mode, r] : row.rates)
      if (!(r.rank1 <= r.rank3 && r.rank3 <= r.rank5))
        throw nfat::ContractViolation("evaluate: rank monotonicity violated for " + row.user.label);
  json config = {{"evaluation", nfat::to_json(cfg)}, {"policy", nfat::to_json(model.policy)}};
  const auto signatures = load_signatures(a.signatures);
  const auto reduction = nfat::reduction_report(d.records, d.interactions, signatures.signatures);
  nfat::atomic_write_directory(a.out, [&](const fs::path& tmp) {
    nfat::write_reduction_files(tmp, reduction);
    nfat::write_evaluation_files(tmp, ev);
    nfat::atomic_write_file(tmp / "config.json", config.dump(2) + "\n");
    nfat::atomic_write_file(tmp / "seeds.json", nfat::seeds_json(model).dump(2) + "\n");
  });
  std::cout << nfat::user_table_text(ev);
  return 0;
}

struct TimelineArgs {
  std::string decisions, config, out, windows;
  std::optional<double> theta;
};

int run_timeline(const TimelineArgs& a) {
  const auto cfg = eval_config(a.config, a.windows, a.theta, std::nullopt);
  const auto decisions = nfat::parse_decisions(nfat::read_file(a.decisions));
  const auto users = nfat::decision_users(decisions);
  const auto report = nfat::timeline_report(decisions, users, cfg);
  nfat::atomic_write_directory(a.out, [&](const fs::path& tmp) {
    nfat::write_timeline_files(tmp, report);
    nfat::atomic_write_file(tmp / "config.json", json{{"evaluation", nfat::to_json(cfg)}}.dump(2) + "\n");
  });
  std::cout << nfat::timeline_report_text(report);
  return 0;
}

// --- serve / report ----------------------------------------------------------------

struct ServeArgs {
  std::string data_dir, tokens, bind;
  std::optional<int> port;
};

httplib::Server* g_server = nullptr;

int run_serve(const ServeArgs& a) {
  nfat::casework::HttpConfig http;
  fs::path data_dir = a.data_dir, token_file = a.tokens;
  nfat::casework::apply_environment(http, data_dir, token_file);
  if (!a.bind.empty()) http.bind = a.bind;
  if (a.port) http.port = *a.port;
  if (data_dir.empty()) throw nfat::Error(nfat::ErrorKind::Usage, "serve: --data-dir or NFAT_DATA_DIR is required");
  if (token_file.empty()) throw nfat::Error(nfat::ErrorKind::Usage, "serve: --tokens or NFAT_TOKENS is required");
  nfat::casework::ServiceOptions opts;
  opts.data_dir = data_dir;
  opts.tokens = nfat::casework::TokenStore::load(token_file);
  nfat::casework::CaseService service(std::move(opts));
  httplib::Server server;
  nfat::casework::install_routes(server, service, http);
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  if (!server.bind_to_port(http.bind, http.port))
    throw nfat::Error(nfat::ErrorKind::Service, "serve: cannot bind " + http.bind + ":" + std::to_string(http.port));
  std::cerr << "listening on " << http.bind << ":" << http.port << "\n";
  server.listen_after_bind();
  g_server = nullptr;
  return 0;
}

struct ReportArgs {
  std::string case_dir, format = "json", out;
  bool verify = false;
};

int run_report(const ReportArgs& a) {
  const fs::path dir = fs::absolute(a.case_dir).lexically_normal();
  if (!fs::exists(dir / "case.json")) throw nfat::ParseError("report: " + dir.string() + " is not a case directory");
  const fs::path cases = dir.parent_path();
  if (cases.filename() != "cases") throw nfat::ParseError("report: case directory must live under <data-dir>/cases");
  nfat::casework::ServiceOptions opts;
  opts.data_dir = cases.parent_path();
  nfat::casework::CaseService service(std::move(opts));
  const json doc = service.report_document(dir.filename().string());
  std::string text;
  if (a.format == "json") text = doc.dump(2) + "\n";
  else if (a.format == "text") text = nfat::casework::CaseService::report_text(doc);
  else throw nfat::Error(nfat::ErrorKind::Usage, "--format must be json or text");
  if (a.out.empty()) std::cout << text;
  else nfat::atomic_write_file(a.out, text);
  if (a.verify && !doc.at("audit").at("verified").get<bool>()) {
    for (const auto& p : doc.at("audit").at("problems")) std::cerr << "verify: " << p.get<std::string>() << "\n";
    throw nfat::ParseError("report: case failed verification");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nfat - user-centric network forensic analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "nfat 0.1.0");

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Parse a pcap or metadata file into canonical records");
  c_ingest->add_option("--input", ingest.input, "pcap or metadata file")->required()->check(CLI::ExistingFile);
  c_ingest->add_option("--kind", ingest.kind, "Input kind")->check(CLI::IsMember({"pcap", "metadata"}));
  c_ingest->add_option("--monitored", ingest.monitored, "Comma-separated monitored host addresses (pcap)");
  c_ingest->add_option("--max-records", ingest.max_records, "Stop after this many records");
  c_ingest->add_option("--out", ingest.out, "Output records file")->required();

  ExtractArgs extract;
  auto* c_extract = app.add_subcommand("extract", "Segment records into interactions and report data reduction");
  auto* x_dataset = c_extract->add_option("--dataset", extract.dataset, "Dataset directory")->check(CLI::ExistingDirectory);
  auto* x_records = c_extract->add_option("--records", extract.records, "Canonical records file")->check(CLI::ExistingFile);
  x_dataset->excludes(x_records);
  c_extract->add_option("--signatures", extract.signatures, "Signature file (default: bundled)")->check(CLI::ExistingFile);
  c_extract->add_option("--out", extract.out, "Output dataset directory")->required();
  c_extract->add_option("--report-dir", extract.report_dir, "Also write table3 files here");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  c_synth->add_option("--config", synth.config, "Generator config file")->check(CLI::ExistingFile);
  c_synth->add_option("--seed", synth.seed, "Override seed");
  c_synth->add_option("--users", synth.users, "Override n_users");
  c_synth->add_option("--days", synth.days, "Override days");
  c_synth->add_option("--separability", synth.separability, "Override separability");
  c_synth->add_option("--churn", synth.churn, "Mean IP reassignment interval in seconds");
  c_synth->add_option("--coverage", synth.coverage, "Override service_coverage");
  c_synth->add_option("--out", synth.out, "Output dataset directory")->required();

  EnrollArgs enroll;
  auto* c_enroll = app.add_subcommand("enroll", "Train per-(user, service) classifiers");
  c_enroll->add_option("--dataset", enroll.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  c_enroll->add_option("--policy", enroll.policy, "Enrollment policy file")->check(CLI::ExistingFile);
  c_enroll->add_option("--mlp", enroll.mlp, "MLP config file")->check(CLI::ExistingFile);
  c_enroll->add_option("--seed", enroll.seed, "Override policy seed");
  c_enroll->add_option("--out", enroll.out, "Output model directory")->required();

  IdentifyArgs identify;
  auto* c_identify = app.add_subcommand("identify", "Rank candidate users for each source address");
  c_identify->add_option("--model", identify.model, "Model directory or model.json")->required()->check(CLI::ExistingPath);
  auto* i_records = c_identify->add_option("--records", identify.records, "Canonical records file")->check(CLI::ExistingFile);
  auto* i_dataset = c_identify->add_option("--dataset", identify.dataset, "Dataset directory")->check(CLI::ExistingDirectory);
  i_records->excludes(i_dataset);
  c_identify->add_option("--signatures", identify.signatures, "Signature file (default: bundled)")->check(CLI::ExistingFile);
  c_identify->add_option("--mode", identify.mode, "fusion, max_rule or pooled");
  c_identify->add_option("--src-ip", identify.src_ip, "Only this source address");
  c_identify->add_option("--from", identify.from, "Window start (epoch seconds)");
  c_identify->add_option("--to", identify.to, "Window end (epoch seconds)");
  c_identify->add_option("--out", identify.out, "Output file (default: stdout)");

  EvalArgs evaluate;
  auto* c_evaluate = app.add_subcommand("evaluate", "Score the held-out split in every mode");
  c_evaluate->add_option("--dataset", evaluate.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  c_evaluate->add_option("--model", evaluate.model, "Model directory or model.json")->required()->check(CLI::ExistingPath);
  c_evaluate->add_option("--split", evaluate.split, "Split manifest (default: <model>/split.csv)")->check(CLI::ExistingFile);
  c_evaluate->add_option("--config", evaluate.config, "Evaluation config file")->check(CLI::ExistingFile);
  c_evaluate->add_option("--signatures", evaluate.signatures, "Signature file for table3")->check(CLI::ExistingFile);
  c_evaluate->add_option("--batch-window", evaluate.batch_window, "Override batch window seconds");
  c_evaluate->add_option("--windows", evaluate.windows, "Override timeline windows, comma-separated");
  c_evaluate->add_option("--theta", evaluate.theta, "Override confidence threshold");
  c_evaluate->add_option("--out", evaluate.out, "Output report directory")->required();

  TimelineArgs timeline;
  auto* c_timeline = app.add_subcommand("timeline", "Timeline attribution over fused decisions");
  c_timeline->add_option("--decisions", timeline.decisions, "decisions.jsonl from evaluate")->required()->check(CLI::ExistingFile);
  c_timeline->add_option("--config", timeline.config, "Evaluation config file")->check(CLI::ExistingFile);
  c_timeline->add_option("--windows", timeline.windows, "Override windows, comma-separated");
  c_timeline->add_option("--theta", timeline.theta, "Override confidence threshold");
  c_timeline->add_option("--out", timeline.out, "Output directory")->required();

  ServeArgs serve;
  auto* c_serve = app.add_subcommand("serve", "Run the casework HTTP service");
  c_serve->add_option("--data-dir", serve.data_dir, "Case store (env NFAT_DATA_DIR)");
  c_serve->add_option("--tokens", serve.tokens, "Token file (env NFAT_TOKENS)");
  c_serve->add_option("--bind", serve.bind, "Bind address (env NFAT_BIND)");
  c_serve->add_option("--port", serve.port, "Port (env NFAT_PORT)");

  ReportArgs report;
  auto* c_report = app.add_subcommand("report", "Render the report for a case directory");
  c_report->add_option("--case-dir", report.case_dir, "<data-dir>/cases/<case-id>")->required()->check(CLI::ExistingDirectory);
  c_report->add_option("--format", report.format, "json or text")->check(CLI::IsMember({"json", "text"}));
  c_report->add_option("--out", report.out, "Output file (default: stdout)");
  c_report->add_flag("--verify", report.verify, "Exit non-zero if the audit chain or bookmarks fail verification");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*c_ingest) return run_ingest(ingest);
    if (*c_extract) {
      if (extract.dataset.empty() && extract.records.empty())
        throw nfat::Error(nfat::ErrorKind::Usage, "extract: one of --dataset or --records is required");
      return run_extract(extract);
    }
    if (*c_synth) return run_synth(synth);
    if (*c_enroll) return run_enroll(enroll);
    if (*c_identify) {
      if (identify.dataset.empty() && identify.records.empty())
        throw nfat::Error(nfat::ErrorKind::Usage, "identify: one of --records or --dataset is required");
      return run_identify(identify);
    }
    if (*c_evaluate) return run_evaluate(evaluate);
    if (*c_timeline) return run_timeline(timeline);
    if (*c_serve) return run_serve(serve);
    if (*c_report) return run_report(report);
  } catch (const nfat::Error& e) {
    std::cerr << "nfat: " << nfat::error_code_name(e.kind()) << ": " << e.what() << "\n";
    return nfat::exit_code_for(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "nfat: E_INPUT: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "nfat: E_ANALYSIS: " << e.what() << "\n";
    return 4;
  }
  return 2;
}
