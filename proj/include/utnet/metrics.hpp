#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "utnet/model.hpp"
#include "utnet/synthdata.hpp"

namespace utnet {

// ---------------------------------------------------------------------------
// mask metrics
// ---------------------------------------------------------------------------

// 2|P . G| / (|P| + |G|). Both masks empty for the class -> 1.0 (perfect
// agreement on absence); exactly one empty -> 0.0.
inline double dice_score(const LabelMask& pred, const LabelMask& gt, int cls) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw DataError("dice_score: mask shapes differ, " + std::to_string(pred.h) +
                    "x" + std::to_string(pred.w) + " vs " + std::to_string(gt.h) +
                    "x" + std::to_string(gt.w));
  int64_t inter = 0, np = 0, ng = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const bool p = pred.v[i] == cls, g = gt.v[i] == cls;
    inter += p && g;
    np += p;
    ng += g;
  }
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  return 2.0 * double(inter) / double(np + ng);
}

// Boundary by 4-connectivity erosion difference: a class pixel stays interior
// only if all four edge neighbors are the same class; the image border counts
// as outside.
inline std::vector<std::pair<int, int>> boundary_4(const LabelMask& m, int cls) {
  std::vector<std::pair<int, int>> pts;
  auto in = [&](int y, int x) {
    return y >= 0 && y < m.h && x >= 0 && x < m.w && m.at(y, x) == cls;
  };
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (in(y, x) &&
          !(in(y - 1, x) && in(y + 1, x) && in(y, x - 1) && in(y, x + 1)))
        pts.emplace_back(y, x);
  return pts;
}

namespace detail {

constexpr double kEdtInf = 1e18;

// 1-d squared distance transform by lower envelope of parabolas
// (Felzenszwalb-Huttenlocher). Exact for integer site costs.
inline void edt_1d(const double* f, int n, double* d, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kEdtInf;
  z[1] = kEdtInf;
  auto meet = [&](int q) {
    return ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) /
           (2.0 * q - 2.0 * v[k]);
  };
  for (int q = 1; q < n; ++q) {
    double s = meet(q);
    while (s <= z[k]) {
      --k;
      s = meet(q);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kEdtInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// exact squared Euclidean distance from every grid cell to the nearest point
inline std::vector<double> squared_edt(const std::vector<std::pair<int, int>>& pts,
                                       int h, int w) {
  std::vector<double> g(size_t(h) * w, kEdtInf);
  for (const auto& p : pts) g[size_t(p.first) * w + p.second] = 0.0;
  const int n = std::max(h, w);
  std::vector<double> f(size_t(n), 0.0), d(size_t(n), 0.0), z(size_t(n) + 1, 0.0);
  std::vector<int> v(size_t(n), 0);
  for (int x = 0; x < w; ++x) {  // along columns
    for (int y = 0; y < h; ++y) f[size_t(y)] = g[size_t(y) * w + x];
    edt_1d(f.data(), h, d.data(), v.data(), z.data());
    for (int y = 0; y < h; ++y) g[size_t(y) * w + x] = d[size_t(y)];
  }
  for (int y = 0; y < h; ++y) {  // then rows
    for (int x = 0; x < w; ++x) f[size_t(x)] = g[size_t(y) * w + x];
    edt_1d(f.data(), w, d.data(), v.data(), z.data());
    for (int x = 0; x < w; ++x) g[size_t(y) * w + x] = d[size_t(x)];
  }
  return g;
}

}  // namespace detail

// Classic (100th percentile) symmetric Hausdorff distance between boundary
// point sets, in pixels. Both boundaries empty -> 0; exactly one empty -> the
// image diagonal as a documented sentinel.
inline double hausdorff(const LabelMask& pred, const LabelMask& gt, int cls) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw DataError("hausdorff: mask shapes differ, " + std::to_string(pred.h) +
                    "x" + std::to_string(pred.w) + " vs " + std::to_string(gt.h) +
                    "x" + std::to_string(gt.w));
  const auto pa = boundary_4(pred, cls);
  const auto pb = boundary_4(gt, cls);
  if (pa.empty() && pb.empty()) return 0.0;
  if (pa.empty() || pb.empty())
    return std::hypot(double(pred.h - 1), double(pred.w - 1));
  const auto da = detail::squared_edt(pa, pred.h, pred.w);
  const auto db = detail::squared_edt(pb, pred.h, pred.w);
  double worst = 0.0;
  for (const auto& p : pa) worst = std::max(worst, db[size_t(p.first) * pred.w + p.second]);
  for (const auto& p : pb) worst = std::max(worst, da[size_t(p.first) * pred.w + p.second]);
  return std::sqrt(worst);
}

// Per-pixel argmax over the class axis of logits [B,K,H,W]; ties resolve to
// the lowest class index.
inline LabelMask argmax_mask(const Tensor& logits, int item = 0) {
  if (logits.ndim() != 4)
    throw ShapeError("argmax_mask: expects [B,K,H,W], got " + shape_str(logits.shape));
  const int K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const int64_t plane = int64_t(H) * W;
  const double* base = logits.ptr() + int64_t(item) * K * plane;
  LabelMask m{H, W, std::vector<uint8_t>(size_t(plane), 0)};
  for (int64_t i = 0; i < plane; ++i) {
    int best = 0;
    double bv = base[i];
    for (int k = 1; k < K; ++k) {
      const double v = base[int64_t(k) * plane + i];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    m.v[size_t(i)] = uint8_t(best);
  }
  return m;
}

// ---------------------------------------------------------------------------
// vendor-wise evaluation report
// ---------------------------------------------------------------------------

struct ClassStat {
  double dice_mean = 0.0, dice_std = 0.0;
  double hd_mean = 0.0, hd_std = 0.0;
  double dice_drop = 0.0;  // mean(A,B) minus this cell, when A and B present
  bool has_drop = false;
  int count = 0;
};

struct VendorSummary {
  double avg_dice = 0.0;  // mean of per-class dice means (foreground classes)
  double dice_drop = 0.0;
  bool has_drop = false;
};

struct EvalReport {
  int num_classes = 4;
  double spacing_mm = 1.2;
  std::map<std::string, std::map<int, ClassStat>> cells;  // vendor -> class -> stat
  std::map<std::string, VendorSummary> summary;           // vendor -> averages

  std::string csv() const {
    std::string out =
        "vendor,class,dice_mean,dice_std,hausdorff_mean,hausdorff_std,"
        "dice_drop_vs_ab\n";
    char buf[512];
    auto g = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    for (const auto& [vendor, classes] : cells)
      for (const auto& [cls, st] : classes) {
        out += vendor + "," + std::to_string(cls) + "," + g(st.dice_mean) + "," +
               g(st.dice_std) + "," + g(st.hd_mean) + "," + g(st.hd_std) + "," +
               (st.has_drop ? g(st.dice_drop) : std::string()) + "\n";
      }
    for (const auto& [vendor, s] : summary)
      out += vendor + ",avg," + g(s.avg_dice) + ",,,," +
             (s.has_drop ? g(s.dice_drop) : std::string()) + "\n";
    return out;
  }

  std::string table() const {
    char line[256];
    std::string out;
    std::snprintf(line, sizeof line, "%-7s %-6s %15s %20s %8s\n", "vendor",
                  "class", "dice(mean+-sd)", "hausdorff(mean+-sd)", "drop");
    out += line;
    for (const auto& [vendor, classes] : cells)
      for (const auto& [cls, st] : classes) {
        char drop[32] = "-";
        if (st.has_drop) std::snprintf(drop, sizeof drop, "%.4f", st.dice_drop);
        std::snprintf(line, sizeof line, "%-7s %-6d %7.4f+-%.4f %13.2f+-%.2f %8s\n",
                      vendor.c_str(), cls, st.dice_mean, st.dice_std, st.hd_mean,
                      st.hd_std, drop);
        out += line;
      }
    for (const auto& [vendor, s] : summary) {
      char drop[32] = "-";
      if (s.has_drop) std::snprintf(drop, sizeof drop, "%.4f", s.dice_drop);
      std::snprintf(line, sizeof line, "%-7s %-6s %7.4f %22s %8s\n", vendor.c_str(),
                    "avg", s.avg_dice, "", drop);
      out += line;
    }
    return out;
  }
};

// Scores a predictor over samples, aggregated per (vendor, foreground class).
// Samples are processed in seed order so the reduction is deterministic
// regardless of input order.
inline EvalReport evaluate_predictions(
    const std::vector<SegmentationSample>& samples,
    const std::function<LabelMask(const SegmentationSample&)>& predict,
    int num_classes = 4) {
  if (samples.empty()) throw DataError("evaluate_predictions: no samples");
  std::vector<size_t> order(samples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (samples[a].seed != samples[b].seed) return samples[a].seed < samples[b].seed;
    return samples[a].vendor < samples[b].vendor;
  });

  struct Acc {
    double d_sum = 0, d_sq = 0, h_sum = 0, h_sq = 0;
    int n = 0;
  };
  std::map<std::string, std::map<int, Acc>> acc;
  for (size_t idx : order) {
    const SegmentationSample& s = samples[idx];
    const LabelMask pred = predict(s);
    for (int cls = 1; cls < num_classes; ++cls) {
      const double d = dice_score(pred, s.label, cls);
      const double h = hausdorff(pred, s.label, cls);
      Acc& a = acc[to_string(s.vendor)][cls];
      a.d_sum += d;
      a.d_sq += d * d;
      a.h_sum += h;
      a.h_sq += h * h;
      a.n += 1;
    }
  }

  EvalReport rep;
  rep.num_classes = num_classes;
  for (const auto& [vendor, classes] : acc) {
    double avg = 0.0;
    for (const auto& [cls, a] : classes) {
      ClassStat st;
      st.count = a.n;
      st.dice_mean = a.d_sum / a.n;
      st.dice_std = std::sqrt(std::max(0.0, a.d_sq / a.n - st.dice_mean * st.dice_mean));
      st.hd_mean = a.h_sum / a.n;
      st.hd_std = std::sqrt(std::max(0.0, a.h_sq / a.n - st.hd_mean * st.hd_mean));
      rep.cells[vendor][cls] = st;
      avg += st.dice_mean;
    }
    rep.summary[vendor].avg_dice = avg / double(classes.size());
  }

  // drop columns: mean(A,B) reference minus each vendor's value
  const bool have_ab = rep.summary.count("A") && rep.summary.count("B");
  if (have_ab) {
    for (auto& [vendor, classes] : rep.cells)
      for (auto& [cls, st] : classes) {
        const double ref = 0.5 * (rep.cells.at("A").at(cls).dice_mean +
                                  rep.cells.at("B").at(cls).dice_mean);
        st.dice_drop = ref - st.dice_mean;
        st.has_drop = true;
      }
    const double ref =
        0.5 * (rep.summary.at("A").avg_dice + rep.summary.at("B").avg_dice);
    for (auto& [vendor, s] : rep.summary) {
      s.dice_drop = ref - s.avg_dice;
      s.has_drop = true;
    }
  }
  return rep;
}

// Loads a split, runs the model on every sample and scores the argmax masks.
inline EvalReport evaluate(UTNet& model, const std::string& data_dir,
                           const nlohmann::json& manifest,
                           const std::string& split = "test") {
  if (model.cfg.in_channels != 1)
    throw ConfigError("evaluate: checkpoint expects " +
                      std::to_string(model.cfg.in_channels) +
                      " input channels, dataset images have 1");
  const int size = manifest.at("size").get<int>();
  const int div = 1 << (model.cfg.levels - 1);
  if (size % div != 0)
    throw ConfigError("evaluate: dataset size " + std::to_string(size) +
                      " is not divisible by the checkpoint's required multiple " +
                      std::to_string(div));
  const auto samples = load_split(data_dir, manifest, split);
  int max_label = 0;
  for (const auto& s : samples)
    for (uint8_t v : s.label.v) max_label = std::max(max_label, int(v));
  if (max_label >= model.cfg.num_classes)
    throw ConfigError("evaluate: dataset has label " + std::to_string(max_label) +
                      " but checkpoint predicts only " +
                      std::to_string(model.cfg.num_classes) + " classes");
  auto predict = [&](const SegmentationSample& s) {
    Tensor x = Tensor::from({1, 1, s.label.h, s.label.w},
                            std::vector<double>(s.image.ptr(),
                                                s.image.ptr() + s.image.numel()));
    return argmax_mask(model.forward(x, /*training=*/false), 0);
  };
  return evaluate_predictions(samples, predict, model.cfg.num_classes);
}

}  // namespace utnet
