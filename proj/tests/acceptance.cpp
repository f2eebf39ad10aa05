// Release gate. Runs every numbered acceptance criterion and prints exactly
// one [PASS]/[FAIL] line per criterion; exits 0 only if all selected pass.
//
//   acceptance [--only LIST] [--cli PATH]
//
//   --only LIST  comma-separated criterion numbers or name substrings
//   --cli PATH   command-line binary; criterion 7 then exercises the shipped
//                executable end to end instead of the library calls
//
// Supplementary diagnostics for failures go to stderr; stdout stays one line
// per criterion plus a final summary.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "utnet/bench.hpp"
#include "utnet/gradcheck_suite.hpp"
#include "utnet/metrics.hpp"
#include "utnet/runconfig.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace utnet;

namespace {

std::string g_cli;  // optional path to the command-line binary

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return std::string(buf);
}

Tensor randn(const Shape& s, uint64_t seed) {
  SplitMix64 rng(seed);
  return Tensor::randn(s, rng);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

fs::path work_dir() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "utnet-acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// criterion 1: efficient attention with the key/value grid left at full
// resolution (bilinear resize to the same size is the identity) must match
// standard attention.
// ---------------------------------------------------------------------------

bool crit_equivalence(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  AttentionConfig cfg;
  cfg.heads = 4;
  cfg.model_channels = 8;
  cfg.reduced_size = 8;  // equals the 8x8 map: projection becomes identity
  cfg.use_relpos = false;
  NoGradScope no_grad;
  double worst = 0.0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    SplitMix64 rng(mix_seed(1000, seed));
    const AttentionWeights w = init_attention_weights(cfg, rng);
    const Tensor x = randn({1, 8, 8, 8}, 2000 + seed);
    worst = std::max(
        worst, max_abs_diff(standard_mhsa(x, w, cfg), efficient_mhsa(x, w, cfg)));
  }
  const double el = seconds_since(t0);
  detail = fmt("max|diff| %.3g over 10 seeds, tol 1e-10 (%.1f s)", worst, el);
  return worst <= 1e-10 && el < 10.0;
}

// ---------------------------------------------------------------------------
// criterion 2: with both relative-position tables zero (their initial
// state), the relpos variant must agree with plain efficient attention.
// ---------------------------------------------------------------------------

bool crit_relpos_collapse(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  AttentionConfig cfg;
  cfg.heads = 4;
  cfg.model_channels = 8;
  cfg.reduced_size = 4;  // genuine down-projection: 64 queries, 16 keys
  cfg.use_relpos = true;
  NoGradScope no_grad;
  double worst = 0.0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    SplitMix64 rng(mix_seed(3000, seed));
    const AttentionWeights w = init_attention_weights(cfg, rng);  // zero tables
    const Tensor x = randn({1, 8, 8, 8}, 4000 + seed);
    worst = std::max(worst, max_abs_diff(efficient_mhsa_relpos(x, w, cfg),
                                         efficient_mhsa(x, w, cfg)));
  }
  const double el = seconds_since(t0);
  detail = fmt("max|diff| %.3g over 10 seeds, tol 1e-12 (%.1f s)", worst, el);
  return worst <= 1e-12 && el < 5.0;
}

// ---------------------------------------------------------------------------
// criterion 3: the named gradient suite — every primitive, all four
// attention variants, the losses, and the full model on 32x32.
// ---------------------------------------------------------------------------

bool crit_gradients(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<GradCheckRow> rows = run_gradcheck_cases(gradcheck_suite());
  const double el = seconds_since(t0);
  int passed = 0;
  const GradCheckRow* worst = nullptr;
  for (const GradCheckRow& r : rows) {
    passed += r.pass;
    if (!worst || r.max_rel_err / r.tolerance > worst->max_rel_err / worst->tolerance)
      worst = &r;
  }
  if (passed != int(rows.size()))
    std::fputs(gradcheck_table(rows).c_str(), stderr);
  detail = fmt("%d/%zu cases, tightest margin %s at %.3g of tol %.0e (%.1f s)",
               passed, rows.size(), worst ? worst->name.c_str() : "-",
               worst ? worst->max_rel_err : 0.0, worst ? worst->tolerance : 0.0,
               el);
  return passed == int(rows.size()) && el < 300.0;
}

// ---------------------------------------------------------------------------
// criterion 4: measured log-log time slopes over H in {16,32,64,128} land in
// the quadratic/linear bands, and the instrumented attention-buffer ratio at
// H=128 equals n/k exactly.
// ---------------------------------------------------------------------------

bool crit_scaling(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  BenchConfig cfg;  // sizes {16,32,64,128}, heads 1, head_dim 8, reduced 8
  const BenchReport rep = run_bench(cfg);
  const BenchRecord* std128 = nullptr;
  const BenchRecord* eff128 = nullptr;
  for (const BenchRecord& r : rep.records) {
    if (r.size != 128) continue;
    if (r.variant == BenchVariant::standard) std128 = &r;
    if (r.variant == BenchVariant::efficient) eff128 = &r;
  }
  const double el = seconds_since(t0);
  if (!std128 || !eff128) {
    detail = "missing H=128 records";
    return false;
  }
  const bool ratio_exact =
      std128->peak_bytes % eff128->peak_bytes == 0 &&
      std128->peak_bytes / eff128->peak_bytes == int64_t(std128->n / eff128->k) &&
      std128->n / eff128->k == 256;
  const bool slopes_ok = rep.slope_standard >= 1.7 && rep.slope_standard <= 2.3 &&
                         rep.slope_efficient >= 0.8 && rep.slope_efficient <= 1.4;
  detail = fmt(
      "slope standard %.2f in [1.7,2.3], efficient %.2f in [0.8,1.4], "
      "buffer ratio %lld == n/k %lld (%.1f s)",
      rep.slope_standard, rep.slope_efficient,
      (long long)(std128->peak_bytes / eff128->peak_bytes),
      (long long)(std128->n / eff128->k), el);
  return slopes_ok && ratio_exact && el < 300.0;
}

// ---------------------------------------------------------------------------
// criteria 5 and 6 share six training runs: {full model, baseline} x seeds
// {1,2,3} on one 150-train / 200-test phantom dataset at 64x64, 30 epochs.
// ---------------------------------------------------------------------------

struct SeedOutcome {
  uint64_t seed = 0;
  EvalReport eval;      // best checkpoint scored on the held-out test split
  double overall = 0.0; // mean over vendors of per-vendor foreground dice
};

struct TrainedRuns {
  bool attempted = false;
  std::string error;
  std::map<std::string, std::vector<SeedOutcome>> by_kind;  // "utnet"|"baseline"
  double gen_s = 0.0, train_s = 0.0;
};

UTNetConfig acceptance_model(bool baseline) {
  UTNetConfig c;
  c.base_channels = 8;  // widths 8,16,32,64,128 — desk-scale CPU budget
  c.attention_levels = "1234";
  c.attention.heads = 4;
  c.attention.reduced_size = 8;
  c.attention.use_relpos = true;
  c.baseline_mode = baseline;
  return c;
}

TrainConfig acceptance_train(uint64_t seed) {
  TrainConfig t;
  t.epochs = 30;
  t.batch_size = 8;
  t.seed = seed;
  t.checkpoint_every = 30;
  t.val_count = 8;
  return t;
}

double overall_dice(const EvalReport& rep) {
  double s = 0.0;
  for (const auto& [vendor, sum] : rep.summary) s += sum.avg_dice;
  return s / double(rep.summary.size());
}

const TrainedRuns& trained_runs() {
  static TrainedRuns runs;
  if (runs.attempted) return runs;
  runs.attempted = true;
  try {
    const fs::path data = work_dir() / "phantoms";
    auto t0 = std::chrono::steady_clock::now();
    const nlohmann::json manifest =
        materialize_dataset(data.string(), 150, 200, 64);
    runs.gen_s = seconds_since(t0);

    t0 = std::chrono::steady_clock::now();
    for (const char* kind : {"utnet", "baseline"}) {
      const bool baseline = std::strcmp(kind, "baseline") == 0;
      for (const uint64_t seed : {1, 2, 3}) {
        const fs::path out =
            work_dir() / "runs" / (std::string(kind) + "-seed" + std::to_string(seed));
        UTNet model = build(acceptance_model(baseline), seed);
        fit(model, data.string(), manifest, acceptance_train(seed), out.string());
        UTNet best = load_checkpoint((out / "checkpoints" / "best").string());
        SeedOutcome o;
        o.seed = seed;
        o.eval = evaluate(best, data.string(), manifest, "test");
        o.overall = overall_dice(o.eval);
        save_text(out / "eval.csv", o.eval.csv());
        runs.by_kind[kind].push_back(std::move(o));
        std::fprintf(stderr, "  trained %s seed %llu: overall dice %.4f\n", kind,
                     (unsigned long long)seed, runs.by_kind[kind].back().overall);
      }
    }
    runs.train_s = seconds_since(t0);
  } catch (const std::exception& e) {
    runs.error = e.what();
  }
  return runs;
}

double seed_mean(const std::vector<SeedOutcome>& v,
                 const std::function<double(const SeedOutcome&)>& f) {
  double s = 0.0;
  for (const SeedOutcome& o : v) s += f(o);
  return s / double(v.size());
}

bool crit_training(std::string& detail) {
  const TrainedRuns& runs = trained_runs();
  if (!runs.error.empty()) {
    detail = "training failed: " + runs.error;
    return false;
  }
  const auto overall = [](const SeedOutcome& o) { return o.overall; };
  const double utnet = seed_mean(runs.by_kind.at("utnet"), overall);
  const double base = seed_mean(runs.by_kind.at("baseline"), overall);
  detail = fmt(
      "mean foreground dice over 3 seeds: %.4f (floor 0.85), baseline %.4f "
      "(ordering margin %.4f >= -0.01) (gen %.0f s, train+eval %.0f s)",
      utnet, base, utnet - base, runs.gen_s, runs.train_s);
  return utnet >= 0.85 && utnet >= base - 0.01;
}

bool crit_robustness(std::string& detail) {
  const TrainedRuns& runs = trained_runs();
  if (!runs.error.empty()) {
    detail = "training failed: " + runs.error;
    return false;
  }
  // Drop columns must equal mean(A,B) minus the cell value, recomputed here
  // from the per-vendor means.
  for (const auto& [kind, outcomes] : runs.by_kind)
    for (const SeedOutcome& o : outcomes) {
      const EvalReport& r = o.eval;
      for (const auto& [vendor, classes] : r.cells)
        for (const auto& [cls, st] : classes) {
          const double ref = 0.5 * (r.cells.at("A").at(cls).dice_mean +
                                    r.cells.at("B").at(cls).dice_mean);
          if (!st.has_drop || st.dice_drop != ref - st.dice_mean) {
            detail = fmt("drop column mismatch: %s seed %llu vendor %s class %d",
                         kind.c_str(), (unsigned long long)o.seed, vendor.c_str(),
                         cls);
            return false;
          }
        }
      const double ref =
          0.5 * (r.summary.at("A").avg_dice + r.summary.at("B").avg_dice);
      for (const auto& [vendor, sum] : r.summary)
        if (!sum.has_drop || sum.dice_drop != ref - sum.avg_dice) {
          detail = fmt("summary drop mismatch: %s seed %llu vendor %s",
                       kind.c_str(), (unsigned long long)o.seed, vendor.c_str());
          return false;
        }
    }
  const auto cd_drop = [](const SeedOutcome& o) {
    return 0.5 * (o.eval.summary.at("C").dice_drop +
                  o.eval.summary.at("D").dice_drop);
  };
  const double utnet = seed_mean(runs.by_kind.at("utnet"), cd_drop);
  const double base = seed_mean(runs.by_kind.at("baseline"), cd_drop);
  detail = fmt(
      "drop columns exact; mean C/D dice drop over 3 seeds: %.4f vs baseline "
      "%.4f (allowance +0.02)",
      utnet, base);
  return utnet <= base + 0.02;
}

// ---------------------------------------------------------------------------
// criterion 7: identical seeds give bit-identical checkpoints and reports,
// twice in a row. With --cli the shipped binary is exercised end to end.
// ---------------------------------------------------------------------------

// Compares checkpoints/** plus report.csv and train_config.json; returns ""
// when identical.
std::string diff_artifacts(const fs::path& a, const fs::path& b, int* files) {
  std::vector<std::string> rels = {"report.csv", "train_config.json"};
  for (const auto& e : fs::recursive_directory_iterator(a / "checkpoints"))
    if (e.is_regular_file())
      rels.push_back(fs::relative(e.path(), a).string());
  std::sort(rels.begin(), rels.end());
  *files = int(rels.size());
  for (const std::string& rel : rels) {
    if (!fs::exists(b / rel)) return rel + " missing from second run";
    if (read_bytes(a / rel) != read_bytes(b / rel)) return rel + " differs";
  }
  return "";
}

int run_shell(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool crit_determinism(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = work_dir() / "determinism";
  const fs::path data = dir / "data";
  const fs::path r1 = dir / "run1";
  const fs::path r2 = dir / "run2";

  UTNetConfig mc;
  mc.widths = {4, 8, 16, 32, 64};
  mc.attention_levels = "34";
  mc.attention.heads = 2;
  mc.attention.reduced_size = 4;
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.val_count = 2;
  tc.checkpoint_every = 2;
  tc.seed = 1;

  std::string mode;
  if (!g_cli.empty()) {
    mode = "via the shipped binary";
    const fs::path cfg = dir / "config.json";
    fs::create_directories(dir);
    RunConfig rc;
    rc.model = mc;
    rc.train = tc;
    save_json(cfg, to_json(rc));
    const fs::path log = dir / "log.txt";
    const std::string synth = "\"" + g_cli + "\" synth --out " + data.string() +
                              " --train 8 --test 2 --size 32 >> " +
                              log.string() + " 2>&1";
    if (run_shell(synth) != 0) {
      detail = "synth failed, see " + log.string();
      return false;
    }
    for (const fs::path& out : {r1, r2}) {
      const std::string train = "\"" + g_cli + "\" train --config " +
                                cfg.string() + " --data " + data.string() +
                                " --out " + out.string() + " >> " +
                                log.string() + " 2>&1";
      if (run_shell(train) != 0) {
        detail = "train failed, see " + log.string();
        return false;
      }
    }
  } else {
    mode = "via library calls";
    const nlohmann::json manifest = materialize_dataset(data.string(), 8, 2, 32);
    for (const fs::path& out : {r1, r2}) {
      UTNet model = build(mc, tc.seed);
      fit(model, data.string(), manifest, tc, out.string());
    }
  }
  int files = 0;
  const std::string diff = diff_artifacts(r1, r2, &files);
  const double el = seconds_since(t0);
  if (!diff.empty()) {
    detail = diff + " " + mode;
    return false;
  }
  detail = fmt("%d artifact files bit-identical across two runs %s (%.1f s)",
               files, mode.c_str(), el);
  return true;
}

// ---------------------------------------------------------------------------
// criterion 8: dice and hausdorff against brute-force oracles on random
// small masks, plus exact analytic cases.
// ---------------------------------------------------------------------------

LabelMask random_mask(int h, int w, SplitMix64& rng, int num_classes) {
  LabelMask m{h, w, std::vector<uint8_t>(size_t(h) * w, 0)};
  for (uint8_t& v : m.v) v = uint8_t(rng.next_below(uint64_t(num_classes)));
  return m;
}

bool crit_metrics(std::string& detail) {
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(8801);
  double worst_dice = 0.0, worst_hd = 0.0;
  for (int i = 0; i < 50; ++i) {
    const int h = 7 + int(rng.next_below(8));
    const int w = 7 + int(rng.next_below(8));
    const LabelMask a = random_mask(h, w, rng, 4);
    const LabelMask b = random_mask(h, w, rng, 4);
    for (int cls = 1; cls < 4; ++cls) {
      worst_dice = std::max(worst_dice, std::abs(dice_score(a, b, cls) -
                                                 oracle::dice(a.v, b.v, cls)));
      worst_hd = std::max(worst_hd, std::abs(hausdorff(a, b, cls) -
                                             oracle::hausdorff(a.v, b.v, h, w, cls)));
    }
  }

  // analytic: two pixels each, one shared -> dice 2*1/(2+2) = 0.5 exactly
  LabelMask da{1, 3, {1, 1, 0}}, db{1, 3, {0, 1, 1}};
  const bool dice_exact = dice_score(da, db, 1) == 0.5;
  // analytic: single pixels offset by (3,4) -> hausdorff 5 exactly
  LabelMask ha{4, 5, std::vector<uint8_t>(20, 0)};
  LabelMask hb{4, 5, std::vector<uint8_t>(20, 0)};
  ha.v[0] = 1;       // (0,0)
  hb.v[3 * 5 + 4] = 1;  // (3,4)
  const bool hd_exact = hausdorff(ha, hb, 1) == 5.0;

  const double el = seconds_since(t0);
  detail = fmt(
      "50 random masks: max dice diff %.3g, max hausdorff diff %.3g; analytic "
      "0.5 %s, 5.0 %s (%.1f s)",
      worst_dice, worst_hd, dice_exact ? "exact" : "WRONG",
      hd_exact ? "exact" : "WRONG", el);
  return worst_dice == 0.0 && worst_hd <= 1e-9 && dice_exact && hd_exact;
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  bool (*run)(std::string&);
};

const Criterion kCriteria[] = {
    {1, "efficient attention with full key grid matches standard attention",
     crit_equivalence},
    {2, "zero relative-position tables collapse to plain efficient attention",
     crit_relpos_collapse},
    {3, "gradient suite: every op, all attention variants, full model",
     crit_gradients},
    {4, "scaling: time slopes in band, attention-buffer ratio exact",
     crit_scaling},
    {5, "phantom training: foreground dice floor and baseline ordering",
     crit_training},
    {6, "vendor robustness: exact drop columns, bounded C/D degradation",
     crit_robustness},
    {7, "determinism: identical seeds give bit-identical artifacts",
     crit_determinism},
    {8, "metrics match brute-force oracles", crit_metrics},
};

bool selected(const Criterion& c, const std::vector<std::string>& only) {
  if (only.empty()) return true;
  for (const std::string& tok : only) {
    if (tok == std::to_string(c.id)) return true;
    if (std::string(c.name).find(tok) != std::string::npos) return true;
  }
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ','))
        if (!tok.empty()) only.push_back(tok);
    } else if (arg == "--cli" && i + 1 < argc) {
      g_cli = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--only LIST] [--cli PATH]\n");
      return 2;
    }
  }

  int ran = 0, passed = 0;
  for (const Criterion& c : kCriteria) {
    if (!selected(c, only)) continue;
    ++ran;
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    passed += ok;
    std::printf("[%s] %d %s | %s\n", ok ? "PASS" : "FAIL", c.id, c.name,
                detail.c_str());
    std::fflush(stdout);
  }
  if (ran == 0) {
    std::fprintf(stderr, "no criteria match --only selection\n");
    return 2;
  }
  std::printf("%d/%d criteria passed\n", passed, ran);
  return passed == ran ? 0 : 1;
}
