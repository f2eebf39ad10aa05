#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "utnet/attention.hpp"

namespace utnet {

// === attention-kernel scaling benchmark ===
//
// Times the two attention kernels in isolation (QKV projections, similarity
// logits, softmax, context product) over a ladder of square map sizes and
// fits the log-log slope of median wall time vs sequence length n = H*W.
// The similarity matrix is the only super-linear allocation, so its
// instrumented peak doubles as the memory check: exactly heads*n*k*8 bytes
// for the reduced kernel vs heads*n*n*8 for the quadratic one.

enum class BenchVariant { standard, efficient };

inline const char* to_string(BenchVariant v) {
  return v == BenchVariant::standard ? "standard" : "efficient";
}

// Analytic FLOP count of one attention forward: the two similarity-side
// matmuls (2nkd each, multiply+add) plus the nk softmax. The quadratic
// variant keeps k == n by definition, whatever k is passed.
inline int64_t flops_model(BenchVariant variant, int64_t n, int64_t k,
                           int64_t d, int64_t heads) {
  if (n < 1 || k < 1 || d < 1 || heads < 1)
    throw ConfigError("flops_model: all arguments must be positive");
  if (variant == BenchVariant::standard) k = n;
  return heads * (2 * n * k * d + n * k + 2 * n * k * d);
}

// Closed form for the instrumented similarity-buffer peak, in bytes.
inline int64_t attn_buffer_bytes(BenchVariant variant, int64_t n, int64_t k,
                                 int64_t heads) {
  if (variant == BenchVariant::standard) k = n;
  return heads * n * k * int64_t(sizeof(double));
}

// Scoped similarity-buffer cap; any attention forward whose buffer would
// exceed it throws BufferLimitError instead of allocating. 0 = unlimited.
struct BufferCapGuard {
  int64_t prev;
  explicit BufferCapGuard(int64_t cap_bytes)
      : prev(attn_buffer_stats().cap_bytes) {
    attn_buffer_stats().cap_bytes = cap_bytes;
  }
  ~BufferCapGuard() { attn_buffer_stats().cap_bytes = prev; }
};

struct BenchConfig {
  std::vector<int> sizes{16, 32, 64, 128};  // H = W rungs, strictly ascending
  int heads = 1;      // one head keeps the H=128 quadratic buffer at ~2.1 GB
  int head_dim = 8;
  int reduced_size = 8;
  KvProjection projection = KvProjection::bilinear;
  int repeats = 5;    // timed samples per (variant, size); median reported
  int threads = 1;    // timed sections are single-threaded by contract
  uint64_t seed = 0;

  void validate() const {
    if (sizes.empty()) throw ConfigError("bench: sizes must be non-empty");
    for (size_t i = 0; i < sizes.size(); ++i) {
      if (sizes[i] < 2) throw ConfigError("bench: sizes must be >= 2");
      if (i > 0 && sizes[i] <= sizes[i - 1])
        throw ConfigError("bench: sizes must be strictly ascending");
    }
    if (heads < 1 || head_dim < 1)
      throw ConfigError("bench: heads and head_dim must be >= 1");
    if (reduced_size < 1)
      throw ConfigError("bench: reduced_size must be >= 1");
    if (repeats < 1) throw ConfigError("bench: repeats must be >= 1");
    if (threads != 1)
      throw ConfigError("bench: configured for " + std::to_string(threads) +
                        " threads; timed sections must run single-threaded");
  }
};

struct BenchRecord {
  BenchVariant variant = BenchVariant::standard;
  int size = 0;              // H = W
  int64_t n = 0;             // H*W query positions
  int64_t k = 0;             // key/value positions (k == n for standard)
  int repeats = 0;           // timed samples taken
  int calls_per_sample = 1;  // >1 when sub-ms medians forced wider samples
  double median_ms = 0.0;    // per single kernel invocation
  int64_t peak_bytes = 0;    // instrumented similarity-buffer peak
};

namespace detail {

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct Timing {
  double median_ms;
  int calls;
};

// Median-of-repeats timing. If the per-sample span lands under the 1 ms
// resolution floor, each sample is widened to a block of several calls
// (per-call time reported) and the caller is told via Timing::calls.
template <typename Fn>
inline Timing time_kernel(const Fn& call, int repeats) {
  using clock = std::chrono::steady_clock;
  int calls = 1;
  for (int pass = 0;; ++pass) {
    std::vector<double> per_call(size_t(repeats), 0.0);
    for (int r = 0; r < repeats; ++r) {
      const auto t0 = clock::now();
      for (int c = 0; c < calls; ++c) call();
      const auto t1 = clock::now();
      per_call[size_t(r)] =
          std::chrono::duration<double, std::milli>(t1 - t0).count() / calls;
    }
    const double med = median(per_call);
    if (med * calls >= 1.0 || pass >= 3 || calls >= 4096)
      return {med, calls};
    const int want = int(std::ceil(2.0 / std::max(med, 1e-6)));
    calls = std::min(4096, std::max(calls * 4, want));
  }
}

inline double fit_loglog_slope(const std::vector<BenchRecord>& recs,
                               BenchVariant v) {
  std::vector<double> xs, ys;
  for (const BenchRecord& r : recs)
    if (r.variant == v && r.median_ms > 0.0) {
      xs.push_back(std::log(double(r.n)));
      ys.push_back(std::log(r.median_ms));
    }
  if (xs.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= double(xs.size());
  my /= double(xs.size());
  double sxx = 0.0, sxy = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  return sxy / sxx;
}

inline void appendf(std::string& out, const char* fmt, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  out += buf;
}

}  // namespace detail

struct BenchReport {
  BenchConfig config;
  std::vector<BenchRecord> records;
  double slope_standard = std::numeric_limits<double>::quiet_NaN();
  double slope_efficient = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::string> notes;

  std::string csv() const;
  std::string svg() const;
};

inline BenchReport run_bench(const BenchConfig& cfg) {
  cfg.validate();
  if (Eigen::nbThreads() != 1)
    throw ConfigError("bench: Eigen reports " +
                      std::to_string(Eigen::nbThreads()) +
                      " threads; timed sections must run single-threaded");

  BenchReport rep;
  rep.config = cfg;
  NanCheckGuard nan_off(false);  // keep the per-op scan out of the timings
  NoGradScope no_tape;
  SplitMix64 rng(mix_seed(cfg.seed, 0x62656e63));

  AttentionConfig acfg;
  acfg.heads = cfg.heads;
  acfg.model_channels = cfg.heads * cfg.head_dim;
  acfg.reduced_size = cfg.reduced_size;
  acfg.projection = cfg.projection;
  acfg.use_relpos = false;

  for (const BenchVariant variant :
       {BenchVariant::standard, BenchVariant::efficient}) {
    for (const int H : cfg.sizes) {
      AttentionWeights w = init_attention_weights(acfg, rng);
      const Tensor x = Tensor::randn({1, acfg.model_channels, H, H}, rng, 1.0);
      const auto call = [&]() {
        if (variant == BenchVariant::standard)
          standard_mhsa(x, w, acfg);
        else
          efficient_mhsa(x, w, acfg);
      };

      attn_buffer_stats().reset();
      call();  // warmup, excluded from timing; also records the buffer peak
      const int64_t peak = attn_buffer_stats().peak_bytes;
      const detail::Timing t = detail::time_kernel(call, cfg.repeats);

      BenchRecord rec;
      rec.variant = variant;
      rec.size = H;
      rec.n = int64_t(H) * H;
      const int64_t kk = std::min(cfg.reduced_size, H);
      rec.k = variant == BenchVariant::standard ? rec.n : kk * kk;
      rec.repeats = cfg.repeats;
      rec.calls_per_sample = t.calls;
      rec.median_ms = t.median_ms;
      rec.peak_bytes = peak;
      rep.records.push_back(rec);

      if (t.calls > 1) {
        char note[160];
        std::snprintf(note, sizeof note,
                      "%s H=%d: median under 1 ms; widened each timed sample "
                      "to %d calls",
                      to_string(variant), H, t.calls);
        rep.notes.emplace_back(note);
      }
    }
  }

  rep.slope_standard =
      detail::fit_loglog_slope(rep.records, BenchVariant::standard);
  rep.slope_efficient =
      detail::fit_loglog_slope(rep.records, BenchVariant::efficient);
  return rep;
}

inline std::string BenchReport::csv() const {
  std::string out;
  out += "# attention-kernel scaling benchmark\n";
  detail::appendf(out, "# compiler: %s\n", __VERSION__);
  detail::appendf(out, "# eigen: %d.%d.%d\n", EIGEN_WORLD_VERSION,
                  EIGEN_MAJOR_VERSION, EIGEN_MINOR_VERSION);
  detail::appendf(out,
                  "# hardware threads available: %u; timed sections "
                  "single-threaded\n",
                  std::thread::hardware_concurrency());
  const double tick_ns = 1e9 *
                         double(std::chrono::steady_clock::period::num) /
                         double(std::chrono::steady_clock::period::den);
  detail::appendf(out, "# clock: steady_clock, %.6g ns tick\n", tick_ns);
  detail::appendf(
      out, "# heads=%d head_dim=%d reduced_size=%d projection=%s repeats=%d "
           "seed=%llu\n",
      config.heads, config.head_dim, config.reduced_size,
      to_string(config.projection), config.repeats,
      static_cast<unsigned long long>(config.seed));
  detail::appendf(out, "# slope_standard=%.6g slope_efficient=%.6g\n",
                  slope_standard, slope_efficient);
  for (const std::string& n : notes) detail::appendf(out, "# note: %s\n", n.c_str());
  out += "variant,size,n,k,repeats,calls_per_sample,median_ms,peak_bytes,flops\n";
  for (const BenchRecord& r : records) {
    const int64_t fl =
        flops_model(r.variant, r.n, r.k, config.head_dim, config.heads);
    detail::appendf(out, "%s,%d,%lld,%lld,%d,%d,%.6g,%lld,%lld\n",
                    to_string(r.variant), r.size, static_cast<long long>(r.n),
                    static_cast<long long>(r.k), r.repeats, r.calls_per_sample,
                    r.median_ms, static_cast<long long>(r.peak_bytes),
                    static_cast<long long>(fl));
  }
  return out;
}

// Log-log scatter + line per variant, emitted as a self-contained SVG.
inline std::string BenchReport::svg() const {
  const double PX0 = 80, PX1 = 600, PY0 = 420, PY1 = 60;  // plot box
  double lx0 = 1e300, lx1 = -1e300, ly0 = 1e300, ly1 = -1e300;
  for (const BenchRecord& r : records) {
    const double lx = std::log10(double(r.n));
    const double ly = std::log10(std::max(r.median_ms, 1e-6));
    lx0 = std::min(lx0, lx);
    lx1 = std::max(lx1, lx);
    ly0 = std::min(ly0, ly);
    ly1 = std::max(ly1, ly);
  }
  if (records.empty()) lx0 = 0, lx1 = 1, ly0 = 0, ly1 = 1;
  if (lx1 - lx0 < 1e-9) lx0 -= 0.5, lx1 += 0.5;
  if (ly1 - ly0 < 1e-9) ly0 -= 0.5, ly1 += 0.5;
  const auto X = [&](double lx) {
    return PX0 + (lx - lx0) / (lx1 - lx0) * (PX1 - PX0);
  };
  const auto Y = [&](double ly) {
    return PY0 + (ly - ly0) / (ly1 - ly0) * (PY1 - PY0);
  };

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
       "viewBox=\"0 0 640 480\" font-family=\"monospace\" font-size=\"12\">\n";
  s += "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
  s += "<text x=\"320\" y=\"28\" text-anchor=\"middle\" font-size=\"15\">"
       "attention kernel scaling (log-log)</text>\n";
  detail::appendf(s,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" "
                  "stroke=\"black\"/>\n",
                  PX0, PY0, PX1, PY0);
  detail::appendf(s,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" "
                  "stroke=\"black\"/>\n",
                  PX0, PY0, PX0, PY1);
  s += "<text x=\"340\" y=\"455\" text-anchor=\"middle\">n = H*W</text>\n";
  s += "<text x=\"20\" y=\"240\" transform=\"rotate(-90 20 240)\" "
       "text-anchor=\"middle\">median ms</text>\n";
  for (int dec = int(std::floor(lx0)); dec <= int(std::ceil(lx1)); ++dec) {
    if (dec < lx0 - 1e-9 || dec > lx1 + 1e-9) continue;
    detail::appendf(s,
                    "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" "
                    "stroke=\"#ccc\"/>\n",
                    X(dec), PY0, X(dec), PY1);
    detail::appendf(s,
                    "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">"
                    "1e%d</text>\n",
                    X(dec), PY0 + 16, dec);
  }
  for (int dec = int(std::floor(ly0)); dec <= int(std::ceil(ly1)); ++dec) {
    if (dec < ly0 - 1e-9 || dec > ly1 + 1e-9) continue;
    detail::appendf(s,
                    "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" "
                    "stroke=\"#ccc\"/>\n",
                    PX0, Y(dec), PX1, Y(dec));
    detail::appendf(s,
                    "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">"
                    "1e%d</text>\n",
                    PX0 - 6, Y(dec) + 4, dec);
  }

  const struct {
    BenchVariant v;
    const char* color;
    double slope;
  } series[2] = {{BenchVariant::standard, "#c0392b", slope_standard},
                 {BenchVariant::efficient, "#2a6fb0", slope_efficient}};
  int legend_y = 70;
  for (const auto& ser : series) {
    std::string pts;
    for (const BenchRecord& r : records) {
      if (r.variant != ser.v) continue;
      const double x = X(std::log10(double(r.n)));
      const double y = Y(std::log10(std::max(r.median_ms, 1e-6)));
      detail::appendf(pts, "%.1f,%.1f ", x, y);
      detail::appendf(s,
                      "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"3.5\" "
                      "fill=\"%s\"/>\n",
                      x, y, ser.color);
      detail::appendf(s,
                      "<text x=\"%.1f\" y=\"%.1f\" fill=\"%s\">H=%d</text>\n",
                      x + 6, y - 6, ser.color, r.size);
    }
    if (!pts.empty())
      detail::appendf(s,
                      "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" "
                      "stroke-width=\"1.5\"/>\n",
                      pts.c_str(), ser.color);
    detail::appendf(s,
                    "<text x=\"%.1f\" y=\"%d\" fill=\"%s\">%s "
                    "(slope %.2f)</text>\n",
                    PX0 + 10, legend_y, ser.color, to_string(ser.v),
                    ser.slope);
    legend_y += 18;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace utnet
