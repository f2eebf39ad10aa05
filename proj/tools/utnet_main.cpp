// utnet — phantom segmentation workbench.
//
// Subcommands: synth, train, eval, bench, gradcheck, ablate.
// Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 verification failure, 1 anything else.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "utnet/bench.hpp"
#include "utnet/gradcheck_suite.hpp"
#include "utnet/metrics.hpp"
#include "utnet/runconfig.hpp"

namespace {

using namespace utnet;

// Output locations are never silently clobbered: an existing --out needs an
// explicit --force, which wipes it first so reruns are reproducible.
void ensure_fresh_dir(const fs::path& out, bool force) {
  if (fs::exists(out)) {
    if (!force)
      throw ConfigError("output directory '" + out.string() +
                        "' already exists; pass --force to replace it");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

void ensure_fresh_file(const fs::path& out, bool force) {
  if (fs::exists(out)) {
    if (!force)
      throw ConfigError("output file '" + out.string() +
                        "' already exists; pass --force to replace it");
    fs::remove(out);
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
}

// --- synth ---------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int train = 150;
  int test = 200;
  int size = 256;
  long long train_base = 0;
  long long test_base = -1;
  bool force = false;
};

void run_synth(const SynthArgs& a) {
  ensure_fresh_dir(a.out, a.force);
  const nlohmann::json manifest = materialize_dataset(
      a.out, a.train, a.test, a.size, uint64_t(a.train_base),
      int64_t(a.test_base));
  std::printf("wrote %d train + %d test samples of size %d to %s\n", a.train,
              a.test, a.size, a.out.c_str());
  std::printf("manifest: %s/manifest.json\n", a.out.c_str());
  (void)manifest;
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  long long seed = -1;
  int epochs = -1;
  bool force = false;
};

void run_train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config);
  if (!a.data.empty()) rc.data_dir = a.data;
  if (!a.out.empty()) rc.out_dir = a.out;
  if (a.seed >= 0) rc.train.seed = uint64_t(a.seed);
  if (a.epochs > 0) rc.train.epochs = a.epochs;
  if (rc.data_dir.empty())
    throw ConfigError("no data directory: set data_dir in the config or pass --data");
  if (rc.out_dir.empty())
    throw ConfigError("no output directory: set out_dir in the config or pass --out");

  const nlohmann::json manifest =
      load_json(fs::path(rc.data_dir) / "manifest.json");
  ensure_fresh_dir(rc.out_dir, a.force);
  save_json(fs::path(rc.out_dir) / "config.json", to_json(rc));

  UTNet model = build(rc.model, rc.train.seed);
  const TrainReport rep =
      fit(model, rc.data_dir, manifest, rc.train, rc.out_dir);
  std::printf("trained %d epochs; best val dice %.4f at epoch %d\n",
              rc.train.epochs, rep.best_val_dice, rep.best_epoch);
  std::printf("report:     %s/report.csv\n", rc.out_dir.c_str());
  std::printf("checkpoint: %s/checkpoints/best\n", rc.out_dir.c_str());
}

// --- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string data;
  std::string split = "test";
  std::string out;
  bool force = false;
};

void run_eval(const EvalArgs& a) {
  UTNet model = load_checkpoint(a.model);
  const nlohmann::json manifest = load_json(fs::path(a.data) / "manifest.json");
  const EvalReport rep = evaluate(model, a.data, manifest, a.split);
  std::fputs(rep.table().c_str(), stdout);
  if (!a.out.empty()) {
    ensure_fresh_file(a.out, a.force);
    save_text(a.out, rep.csv());
    std::printf("report: %s\n", a.out.c_str());
  }
}

// --- bench ---------------------------------------------------------------

struct BenchArgs {
  std::vector<int> sizes{16, 32, 64, 128};
  int heads = 1;
  int head_dim = 8;
  int reduced = 8;
  std::string projection = "bilinear";
  int repeats = 5;
  long long seed = 0;
  std::string out;
  bool emit_plot = false;
  bool force = false;
};

void run_bench_cmd(const BenchArgs& a) {
  BenchConfig cfg;
  cfg.sizes = a.sizes;
  cfg.heads = a.heads;
  cfg.head_dim = a.head_dim;
  cfg.reduced_size = a.reduced;
  cfg.repeats = a.repeats;
  cfg.seed = uint64_t(a.seed);
  if (a.projection == "bilinear")
    cfg.projection = KvProjection::bilinear;
  else if (a.projection == "maxpool")
    cfg.projection = KvProjection::maxpool;
  else
    throw ConfigError("bench: --projection must be 'bilinear' or 'maxpool', got '" +
                      a.projection + "'");
  if (a.emit_plot && a.out.empty())
    throw ConfigError("bench: --emit-plot needs --out to name the plot file");

  const BenchReport rep = run_bench(cfg);
  if (a.out.empty()) {
    std::fputs(rep.csv().c_str(), stdout);
  } else {
    ensure_fresh_file(a.out, a.force);
    save_text(a.out, rep.csv());
    std::printf("records: %s\n", a.out.c_str());
    if (a.emit_plot) {
      fs::path plot = a.out;
      plot.replace_extension(".svg");
      ensure_fresh_file(plot, a.force);
      save_text(plot, rep.svg());
      std::printf("plot:    %s\n", plot.string().c_str());
    }
  }
  std::printf("slope standard %.3f, efficient %.3f\n", rep.slope_standard,
              rep.slope_efficient);
}

// --- gradcheck -----------------------------------------------------------

void run_gradcheck(const std::string& only) {
  std::vector<GradCheckCase> cases = gradcheck_suite();
  if (!only.empty()) {
    std::vector<GradCheckCase> picked;
    for (GradCheckCase& c : cases)
      if (c.name.find(only) != std::string::npos) picked.push_back(std::move(c));
    if (picked.empty())
      throw ConfigError("gradcheck: no case name contains '" + only + "'");
    cases = std::move(picked);
  }
  const std::vector<GradCheckRow> rows = run_gradcheck_cases(cases);
  std::fputs(gradcheck_table(rows).c_str(), stdout);
  if (!all_pass(rows)) {
    std::string bad;
    for (const GradCheckRow& r : rows)
      if (!r.pass) bad += (bad.empty() ? "" : ", ") + r.name;
    throw VerifyError("gradient check failed for: " + bad);
  }
}

// --- ablate ----------------------------------------------------------------

const std::map<std::string, std::vector<std::string>>& axis_values() {
  static const std::map<std::string, std::vector<std::string>> v = {
      {"levels", {"4", "34", "234", "1234"}},
      {"reduced", {"4", "8", "16"}},
      {"projection", {"bilinear", "maxpool"}},
      {"relpos", {"on", "off"}},
  };
  return v;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const std::string& e : v) s += (s.empty() ? "" : ", ") + e;
  return s;
}

void apply_axis(RunConfig& rc, const std::string& axis,
                const std::string& value) {
  if (axis == "levels") {
    rc.model.attention_levels = value;
  } else if (axis == "reduced") {
    rc.model.attention.reduced_size = std::stoi(value);
  } else if (axis == "projection") {
    rc.model.attention.projection =
        value == "bilinear" ? KvProjection::bilinear : KvProjection::maxpool;
  } else {
    rc.model.attention.use_relpos = value == "on";
  }
}

struct AblateArgs {
  std::string axis;
  std::vector<std::string> values;
  std::string config;
  std::string data;
  std::string out;
  std::vector<long long> seeds{0};
  bool force = false;
};

void run_ablate(const AblateArgs& a) {
  const auto it = axis_values().find(a.axis);
  if (it == axis_values().end()) {
    std::vector<std::string> names;
    for (const auto& kv : axis_values()) names.push_back(kv.first);
    throw ConfigError("ablate: unknown axis '" + a.axis + "' (valid: " +
                      join(names) + ")");
  }
  const std::vector<std::string>& allowed = it->second;
  std::vector<std::string> values = a.values.empty() ? allowed : a.values;
  for (const std::string& v : values)
    if (std::find(allowed.begin(), allowed.end(), v) == allowed.end())
      throw ConfigError("ablate: invalid " + a.axis + " value '" + v +
                        "' (valid: " + join(allowed) + ")");

  RunConfig base = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.data.empty()) base.data_dir = a.data;
  if (base.data_dir.empty())
    throw ConfigError("no data directory: set data_dir in the config or pass --data");
  base.out_dir.clear();  // each run's directory is implicit in its location
  const nlohmann::json manifest =
      load_json(fs::path(base.data_dir) / "manifest.json");
  ensure_fresh_dir(a.out, a.force);

  std::string csv = "axis,value,seed,best_val_dice\n";
  char line[160];
  for (const std::string& value : values) {
    double sum = 0.0;
    for (const long long seed : a.seeds) {
      RunConfig rc = base;
      apply_axis(rc, a.axis, value);
      rc.train.seed = uint64_t(seed);
      const fs::path run_dir =
          fs::path(a.out) / (a.axis + "-" + value) / ("seed-" + std::to_string(seed));
      UTNet model = build(rc.model, rc.train.seed);
      const TrainReport rep =
          fit(model, rc.data_dir, manifest, rc.train, run_dir.string());
      save_json(run_dir / "config.json", to_json(rc));
      std::snprintf(line, sizeof line, "%s,%s,%lld,%.17g\n", a.axis.c_str(),
                    value.c_str(), seed, rep.best_val_dice);
      csv += line;
      sum += rep.best_val_dice;
      std::printf("%s=%s seed %lld: best val dice %.4f\n", a.axis.c_str(),
                  value.c_str(), seed, rep.best_val_dice);
    }
    std::snprintf(line, sizeof line, "%s,%s,mean,%.17g\n", a.axis.c_str(),
                  value.c_str(), sum / double(a.seeds.size()));
    csv += line;
  }
  save_text(fs::path(a.out) / "ablate.csv", csv);
  std::printf("summary: %s/ablate.csv\n", a.out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phantom segmentation workbench: synthetic data, training, "
               "evaluation, attention benchmarks",
               "utnet"};
  app.require_subcommand(1);

  SynthArgs sy;
  CLI::App* synth = app.add_subcommand(
      "synth", "generate a synthetic phantom dataset with vendor shifts");
  synth->add_option("--out", sy.out, "output dataset directory")->required();
  synth->add_option("--train", sy.train, "training samples (vendors A,B)")->capture_default_str();
  synth->add_option("--test", sy.test, "test samples (vendors A,B,C,D)")->capture_default_str();
  synth->add_option("--size", sy.size, "square image size, multiple of 16")->capture_default_str();
  synth->add_option("--train-base", sy.train_base, "first training seed")->capture_default_str();
  synth->add_option("--test-base", sy.test_base,
                    "first test seed (-1 = right after the training range)")->capture_default_str();
  synth->add_flag("--force", sy.force, "replace an existing output directory");
  synth->callback([&sy]() { run_synth(sy); });

  TrainArgs tr;
  CLI::App* train =
      app.add_subcommand("train", "train a model as described by a config file");
  train->add_option("--config", tr.config, "run config JSON (spec_version 1)")
      ->required();
  train->add_option("--data", tr.data, "dataset directory (overrides config)");
  train->add_option("--out", tr.out, "run output directory (overrides config)");
  train->add_option("--seed", tr.seed, "training seed (overrides config)");
  train->add_option("--epochs", tr.epochs, "epoch count (overrides config)");
  train->add_flag("--force", tr.force, "replace an existing output directory");
  train->callback([&tr]() { run_train(tr); });

  EvalArgs ev;
  CLI::App* eval = app.add_subcommand(
      "eval", "evaluate a checkpoint per vendor and class");
  eval->add_option("--model", ev.model, "checkpoint directory")->required();
  eval->add_option("--data", ev.data, "dataset directory")->required();
  eval->add_option("--split", ev.split, "dataset split to score")->capture_default_str();
  eval->add_option("--out", ev.out, "also write the report CSV here");
  eval->add_flag("--force", ev.force, "replace an existing report file");
  eval->callback([&ev]() { run_eval(ev); });

  BenchArgs be;
  CLI::App* bench = app.add_subcommand(
      "bench", "time the attention kernels across map sizes");
  bench->add_option("--sizes", be.sizes, "square map sizes, ascending")->capture_default_str()
      ->delimiter(',');
  bench->add_option("--heads", be.heads, "attention heads")->capture_default_str();
  bench->add_option("--head-dim", be.head_dim, "channels per head")->capture_default_str();
  bench->add_option("--reduced", be.reduced, "reduced key/value grid size")->capture_default_str();
  bench->add_option("--projection", be.projection,
                    "key/value projection: bilinear or maxpool")->capture_default_str();
  bench->add_option("--repeats", be.repeats, "timed samples per point")->capture_default_str();
  bench->add_option("--seed", be.seed, "input/weight seed")->capture_default_str();
  bench->add_option("--out", be.out, "write the records CSV here (default: stdout)");
  bench->add_flag("--emit-plot", be.emit_plot,
                  "also write a log-log SVG plot next to --out");
  bench->add_flag("--force", be.force, "replace existing output files");
  bench->callback([&be]() { run_bench_cmd(be); });

  std::string only;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "verify every backward pass against finite differences");
  gradcheck->add_option("--only", only,
                        "run only cases whose name contains this substring");
  gradcheck->callback([&only]() { run_gradcheck(only); });

  AblateArgs ab;
  CLI::App* ablate = app.add_subcommand(
      "ablate", "train one run per value of a model axis and compare");
  ablate->add_option("--axis", ab.axis,
                     "levels, reduced, projection, or relpos")
      ->required();
  ablate->add_option("--values", ab.values,
                     "axis values to sweep (default: all valid values)")
      ->delimiter(',');
  ablate->add_option("--config", ab.config, "base run config JSON");
  ablate->add_option("--data", ab.data, "dataset directory (overrides config)");
  ablate->add_option("--out", ab.out, "sweep output directory")->required();
  ablate->add_option("--seeds", ab.seeds, "training seeds shared by every value")->capture_default_str()
      ->delimiter(',');
  ablate->add_flag("--force", ab.force, "replace an existing output directory");
  ablate->callback([&ab]() { run_ablate(ab); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // bad flags are configuration errors
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const VerifyError& e) {
    std::fprintf(stderr, "verification failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
