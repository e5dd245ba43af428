// ctrlot: config-driven runner. Exit codes: 0 ok, 2 invalid config or failed
// assumption check, 3 solver did not converge (or an acceptance check failed).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"

#include "../tests/acceptance/criteria.hpp"
#include "ctrlot/ctrlot.hpp"

#ifndef CTRLOT_CONFIG_DIR
#define CTRLOT_CONFIG_DIR "configs"
#endif

namespace {

using ctrlot::json;

struct Options {
  std::string config, out, preset;
  std::optional<long long> seed;
  std::optional<int> threads;
};

std::string preset_path(const std::string& name) {
  for (const std::filesystem::path dir : {std::filesystem::path(CTRLOT_CONFIG_DIR), std::filesystem::path("configs")}) {
    const auto p = dir / (name + ".json");
    if (std::filesystem::exists(p)) return p.string();
  }
  throw ctrlot::SchemaError("--preset", "unknown preset '" + name + "'");
}

ctrlot::ExperimentConfig load(const Options& o) {
  if (o.config.empty() == o.preset.empty())
    throw ctrlot::SchemaError("$", "give exactly one of --config or --preset");
  const std::string path = o.config.empty() ? preset_path(o.preset) : o.config;
  std::ifstream f(path);
  if (!f) throw ctrlot::SchemaError("$", "cannot read " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ctrlot::SchemaError("$", std::string("not valid JSON: ") + e.what());
  }
  if (o.seed || o.threads) {
    if (!j.is_object()) throw ctrlot::SchemaError("$", "expected an object");
    json& s = j["solver"];
    if (s.is_null()) s = json::object();
    if (o.seed) s["seed"] = *o.seed;
    if (o.threads) s["threads"] = *o.threads;
  }
  return ctrlot::parse_config(j);
}

int finish(const ctrlot::RunReport& r) {
  std::cout << r.to_json().dump(2) << '\n';
  return r.converged ? 0 : 3;
}

int run(const std::string& command, const Options& o) {
  if (command == "checkall") {
    bool ok = true;
    for (const auto& check : ctrlot::acceptance::all()) {
      const auto res = check();
      std::cout << ctrlot::acceptance::line(res) << std::endl;
      ok = ok && res.pass;
    }
    return ok ? 0 : 3;
  }
  const ctrlot::ExperimentConfig c = load(o);
  const std::string out = o.out.empty() ? c.output : o.out;
  const ctrlot::RunContext ctx{out};
  if (command == "validate") {
    const ctrlot::Checklist k = ctrlot::validate_assumptions(c);
    json rep = {{"checks", k.to_json()}, {"all_pass", k.all_pass()},
                {"provenance", ctrlot::pipeline::provenance(c, "validate")}};
    ctrlot::pipeline::write_file(out, "report.json", [&](std::ostream& os) { os << rep.dump(2) << '\n'; });
    std::cout << rep.dump(2) << '\n';
    return k.all_pass() ? 0 : 2;
  }
  using namespace ctrlot;
  if (command == "cost") return finish(run_cost(c, ctx));
  if (command == "kantorovich") return finish(run_kantorovich(c, ctx));
  if (command == "bb") return finish(run_bb(c, ctx));
  if (command == "interpolate") return finish(run_interpolate(c, ctx));
  if (command == "hjb") return finish(run_feedback(c, ctx));
  if (command == "equivalence") return finish(run_equivalence(c, ctx));
  throw std::logic_error("unhandled command " + command);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal transport for control-affine systems"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ctrlot::kVersion);
  Options o;
  const char* help[][2] = {
      {"validate", "check the standing assumptions for the configured system and cost"},
      {"cost", "point-to-point cost, or the cost matrix between source and target samples"},
      {"kantorovich", "exact and entropic discrete transport"},
      {"bb", "dynamic (Benamou-Brenier) transport on the grid"},
      {"interpolate", "displacement interpolation, purification and moment diagnostics"},
      {"hjb", "value function, synthesized feedback and closed-loop particles"},
      {"equivalence", "Kantorovich versus dynamic value"},
      {"checkall", "run the acceptance presets"},
  };
  for (const auto& [name, text] : help) {
    CLI::App* sub = app.add_subcommand(name, text);
    if (std::string(name) == "checkall") continue;
    auto* cfg = sub->add_option("--config", o.config, "experiment config (JSON)");
    auto* pre = sub->add_option("--preset", o.preset, "bundled config by name, e.g. gauss1d");
    cfg->excludes(pre);
    sub->add_option("--out", o.out, "artifact directory");
    sub->add_option("--seed", o.seed, "override solver.seed")->check(CLI::NonNegativeNumber);
    sub->add_option("--threads", o.threads, "override solver.threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, o);
  } catch (const ctrlot::SchemaError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ctrlot::NonConvergence& e) {
    std::cerr << "did not converge: " << e.what() << '\n';
    return 3;
  } catch (const ctrlot::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
