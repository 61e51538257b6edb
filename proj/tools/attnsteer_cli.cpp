// attnsteer command line: one subcommand per pipeline stage.
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "attnsteer/pipeline.hpp"

using namespace attnsteer;

namespace {

enum Exit { kOk = 0, kConfig = 2, kStage = 3, kNetwork = 4 };

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::ConfigError:
    case ErrorKind::ConfigMismatch: return kConfig;
    case ErrorKind::NetworkError:
    case ErrorKind::AuthError:
    case ErrorKind::MalformedVerdict: return kNetwork;
    default: return kStage;
  }
}

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string root;
  int threads = -1;
  std::string method;
  std::string log_level = "info";
};

ExperimentConfig build_config(const Options& o) {
  json doc = o.config_path.empty() ? ExperimentConfig::defaults().to_json() : json::parse(read_text_file(o.config_path));
  for (const auto& s : o.overrides) apply_override(doc, s);
  if (!o.root.empty()) doc["output_root"] = o.root;
  if (o.threads >= 0) doc["threads"] = o.threads;
  return ExperimentConfig::from_json(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention-guided concept vectors and activation steering on a toy transformer"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  Options o;
  app.add_option("-c,--config", o.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("-s,--set", o.overrides, "override a config key, e.g. --set steering.max_new_tokens=8");
  app.add_option("--root", o.root, "artifact root (default: $ATTNSTEER_ARTIFACT_ROOT or ./artifacts)");
  app.add_option("-j,--threads", o.threads, "worker threads (0 = all cores; capped by $ATTNSTEER_THREADS)");
  app.add_option("--log-level", o.log_level, "trace|debug|info|warn|error")->capture_default_str();

  auto* train = app.add_subcommand("train", "train the toy model on the planted corpus");
  auto* extract = app.add_subcommand("extract", "build datasets, select tokens, fit concept vectors");
  auto* enrich = app.add_subcommand("enrich", "per-block concept enrichment scores");
  auto* steer = app.add_subcommand("steer", "steered generations over the coefficient grid");
  auto* eval = app.add_subcommand("eval", "judge generations and write score tables");
  auto* jailbreak = app.add_subcommand("jailbreak", "negative steering on the refuse-mode concept");
  auto* sweep = app.add_subcommand("sweep", "every stage for every method, plus comparison tables");
  auto* report = app.add_subcommand("report", "print the sweep summary");
  auto* dump = app.add_subcommand("config", "print the resolved config");
  auto* where = app.add_subcommand("path", "print the run directory");
  for (auto* sub : {extract, steer, eval}) {
    sub->add_option("-m,--method", o.method, "method name (default: the base method)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  spdlog::set_level(spdlog::level::from_str(o.log_level));
  spdlog::set_default_logger(spdlog::stderr_color_mt("attnsteer"));

  try {
    ExperimentConfig cfg = build_config(o);
    if (dump->parsed()) {
      std::cout << cfg.to_json().dump(2) << "\n";
      return kOk;
    }
    Pipeline p(cfg);
    const MethodConfig& method = o.method.empty() ? p.config().method : p.config().method_named(o.method);
    if (where->parsed()) {
      std::cout << p.run_dir().string() << "\n";
    } else if (train->parsed()) {
      p.train();
    } else if (extract->parsed()) {
      p.extract(method);
    } else if (enrich->parsed()) {
      p.enrich();
    } else if (steer->parsed()) {
      p.steer(method);
    } else if (eval->parsed()) {
      const auto scores = p.eval(method);
      double total = 0.0;
      for (const auto& s : scores) total += s.score;
      std::cout << method.name << ": mean concept score "
                << (scores.empty() ? 0.0 : total / static_cast<double>(scores.size())) << " over " << scores.size()
                << " concepts\n";
    } else if (jailbreak->parsed()) {
      const auto r = p.jailbreak();
      std::cout << r.concept_id << ": unsteered refusal-token rate " << r.unsteered_rate << ", lowest steered "
                << r.best_rate << "\n";
    } else if (sweep->parsed()) {
      p.sweep();
      std::cout << p.report().dump(2) << "\n";
    } else if (report->parsed()) {
      std::cout << p.report().dump(2) << "\n";
    }
    return kOk;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    spdlog::error("config: {}", e.what());
    return kConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kStage;
  }
}
