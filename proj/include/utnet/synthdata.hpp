#pragma once

#include <cstdio>
#include <deque>
#include <fstream>
#include <string>
#include <vector>

#include "utnet/ops.hpp"
#include "utnet/serialize.hpp"

namespace utnet {

// ---------------------------------------------------------------------------
// samples and vendors
// ---------------------------------------------------------------------------

enum class Vendor { A, B, C, D };

inline const char* to_string(Vendor v) {
  switch (v) {
    case Vendor::A: return "A";
    case Vendor::B: return "B";
    case Vendor::C: return "C";
    default: return "D";
  }
}

inline Vendor vendor_from_string(const std::string& s) {
  if (s == "A") return Vendor::A;
  if (s == "B") return Vendor::B;
  if (s == "C") return Vendor::C;
  if (s == "D") return Vendor::D;
  throw ConfigError("unknown vendor '" + s + "' (expected A, B, C or D)");
}

// Classes: 0 background, 1 blood-pool disk, 2 muscle ring around it, 3 blob.
struct SegmentationSample {
  Tensor image;     // [1 x H x W], values in [0,1]
  LabelMask label;  // H x W, values in {0,1,2,3}
  Vendor vendor = Vendor::A;
  uint64_t seed = 0;
};

// Fixed per-vendor appearance transforms. A is near-identity; C is the
// blur-heavy source, D the noisy low-contrast one.
struct VendorShift {
  double gain;         // contrast gain about mid-gray
  double noise_sigma;  // additive gaussian noise
  double blur_sigma;   // gaussian blur in pixels
  double gamma;        // intensity gamma
};

// D is the hardest vendor but stays a moderate, controlled gap: severities
// are calibrated so segmentation degrades by a few Dice points rather than
// collapsing, which keeps cross-vendor comparisons out of the noise floor.
inline VendorShift vendor_shift(Vendor v) {
  switch (v) {
    case Vendor::A: return {1.00, 0.010, 0.0, 1.00};
    case Vendor::B: return {1.05, 0.015, 0.5, 0.95};
    case Vendor::C: return {0.95, 0.020, 1.2, 1.05};
    default:        return {0.65, 0.025, 0.6, 1.10};  // D: low contrast, noisy
  }
}

// ---------------------------------------------------------------------------
// phantom generation
// ---------------------------------------------------------------------------

namespace detail {

struct Ellipse {
  double cx, cy;  // center, pixels
  double a, b;    // radii, pixels
  double rot;     // radians

  // squared normalized distance: <= 1 inside
  double dist2(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(rot), s = std::sin(rot);
    const double u = (c * dx + s * dy) / a;
    const double v = (-s * dx + c * dy) / b;
    return u * u + v * v;
  }
};

inline void gaussian_blur_inplace(std::vector<double>& img, int h, int w,
                                  double sigma) {
  if (sigma <= 0.0) return;
  const int radius = int(std::ceil(2.0 * sigma));
  std::vector<double> kernel(size_t(2 * radius + 1), 0.0);
  double norm = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    norm += kernel[size_t(i + radius)];
  }
  for (double& k : kernel) k /= norm;
  std::vector<double> tmp(img.size(), 0.0);
  auto clampi = [](int i, int n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i)
        s += kernel[size_t(i + radius)] * img[size_t(y) * w + clampi(x + i, w)];
      tmp[size_t(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -radius; i <= radius; ++i)
        s += kernel[size_t(i + radius)] * tmp[size_t(clampi(y + i, h)) * w + x];
      img[size_t(y) * w + x] = s;
    }
}

}  // namespace detail

// Pure function of (seed, vendor, size). Geometry, base intensities and the
// bias field depend only on the seed, so vendor variants of one seed are
// appearance shifts of the same scene; noise is drawn per (seed, vendor).
inline SegmentationSample generate(uint64_t seed, Vendor vendor, int size = 256) {
  if (size < 16 || size % 16 != 0)
    throw ConfigError("generate: size must be a positive multiple of 16, got " +
                      std::to_string(size));
  SplitMix64 geo(mix_seed(seed, 0x67656f6dULL));
  const double S = double(size);

  // blood-pool disk (class 1) with concentric muscle ring (class 2)
  detail::Ellipse lv;
  lv.cx = S * geo.uniform(0.52, 0.62);
  lv.cy = S * geo.uniform(0.42, 0.58);
  lv.a = S * geo.uniform(0.08, 0.13);
  lv.b = lv.a * geo.uniform(0.9, 1.1);
  lv.rot = geo.uniform(0.0, 3.14159265358979323846);
  const double thickness = S * geo.uniform(0.035, 0.06);
  detail::Ellipse ring = lv;
  ring.a += thickness;
  ring.b += thickness;

  // blob (class 3) to the left of the ring, never touching it
  const double gap = S * geo.uniform(0.02, 0.04);
  detail::Ellipse rv;
  rv.a = S * geo.uniform(0.09, 0.13);
  rv.b = S * geo.uniform(0.06, 0.10);
  const double angle = geo.uniform(2.70, 3.58);  // 155..205 degrees
  const double dist = std::max(ring.a, ring.b) + gap + std::max(rv.a, rv.b);
  rv.cx = lv.cx + std::cos(angle) * dist;
  rv.cy = lv.cy + std::sin(angle) * dist;
  rv.rot = geo.uniform(0.0, 3.14159265358979323846);

  SegmentationSample out;
  out.vendor = vendor;
  out.seed = seed;
  out.label = LabelMask{size, size, std::vector<uint8_t>(size_t(size) * size, 0)};
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      uint8_t& cls = out.label.v[size_t(y) * size + x];
      if (rv.dist2(x, y) <= 1.0) cls = 3;
      const double d_lv = lv.dist2(x, y);
      if (d_lv <= 1.0)
        cls = 1;
      else if (ring.dist2(x, y) <= 1.0)
        cls = 2;
    }

  // piecewise-constant intensities with a smooth multiplicative bias field
  double base[4] = {0.20, 0.85, 0.45, 0.70};
  for (double& v : base) v += geo.uniform(-0.03, 0.03);
  const double amp = geo.uniform(0.05, 0.12);
  const double fx = geo.uniform(0.5, 1.5), fy = geo.uniform(0.5, 1.5);
  const double px = geo.uniform(0.0, 1.0), py = geo.uniform(0.0, 1.0);
  std::vector<double> img(size_t(size) * size, 0.0);
  constexpr double kTau = 6.28318530717958647692;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double bias = 1.0 + amp * std::sin(kTau * (fx * x / S + px)) *
                                    std::sin(kTau * (fy * y / S + py));
      img[size_t(y) * size + x] = base[out.label.v[size_t(y) * size + x]] * bias;
    }

  // vendor appearance shift: gamma, contrast about mid-gray, blur, noise
  const VendorShift vs = vendor_shift(vendor);
  for (double& v : img) v = 0.5 + vs.gain * (std::pow(std::max(v, 0.0), vs.gamma) - 0.5);
  detail::gaussian_blur_inplace(img, size, size, vs.blur_sigma);
  SplitMix64 noise(mix_seed(seed, uint64_t(vendor) + 1, 0x6e6f697365ULL));
  for (double& v : img) {
    v += noise.normal() * vs.noise_sigma;
    v = std::min(1.0, std::max(0.0, v));
  }
  out.image = Tensor::from({1, size, size}, std::move(img));
  return out;
}

// True when no background-connected path (8-connectivity) reaches a class-1
// pixel from the image border without crossing class 2.
inline bool ring_encloses_disk(const LabelMask& m) {
  const int h = m.h, w = m.w;
  bool has_disk = false;
  for (uint8_t c : m.v)
    if (c == 1) has_disk = true;
  if (!has_disk) return false;
  std::vector<uint8_t> seen(size_t(h) * w, 0);
  std::deque<std::pair<int, int>> q;
  auto push = [&](int y, int x) {
    if (y < 0 || y >= h || x < 0 || x >= w) return;
    const size_t i = size_t(y) * w + x;
    if (seen[i] || m.v[i] == 2) return;  // the ring blocks the flood
    seen[i] = 1;
    q.emplace_back(y, x);
  };
  for (int x = 0; x < w; ++x) {
    push(0, x);
    push(h - 1, x);
  }
  for (int y = 0; y < h; ++y) {
    push(y, 0);
    push(y, w - 1);
  }
  while (!q.empty()) {
    auto [y, x] = q.front();
    q.pop_front();
    if (m.v[size_t(y) * w + x] == 1) return false;  // leaked into the disk
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (dy != 0 || dx != 0) push(y + dy, x + dx);
  }
  return true;
}

inline double michelson_contrast(const Tensor& img) {
  double lo = img.at(0), hi = img.at(0);
  for (int64_t i = 0; i < img.numel(); ++i) {
    lo = std::min(lo, img.at(i));
    hi = std::max(hi, img.at(i));
  }
  if (hi + lo == 0.0) return 0.0;
  return (hi - lo) / (hi + lo);
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

struct AugmentParams {
  double rotation_deg = 0.0;  // +-30
  double scale = 1.0;         // 0.8 .. 1.2
  double tx = 0.0, ty = 0.0;  // +-10% of size, in pixels
  double noise_sigma = 0.0;   // 0 .. 0.05
  double gamma = 1.0;         // 0.7 .. 1.5
};

inline AugmentParams draw_augment_params(SplitMix64& rng, int size) {
  AugmentParams p;
  p.rotation_deg = rng.uniform(-30.0, 30.0);
  p.scale = rng.uniform(0.8, 1.2);
  p.tx = rng.uniform(-0.1, 0.1) * size;
  p.ty = rng.uniform(-0.1, 0.1) * size;
  p.noise_sigma = rng.uniform(0.0, 0.05);
  p.gamma = rng.uniform(0.7, 1.5);
  return p;
}

// Applies the affine map about the image center (image bilinear, label
// nearest-neighbor, out-of-frame filled with background), then gamma and
// noise. Identity parameters return the sample unchanged.
inline SegmentationSample apply_augment(const SegmentationSample& in,
                                        const AugmentParams& p,
                                        SplitMix64& noise_rng) {
  const int size = in.label.h;
  const double c = (size - 1) / 2.0;
  const double phi = p.rotation_deg * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(phi), sn = std::sin(phi);
  const bool identity_affine = p.rotation_deg == 0.0 && p.scale == 1.0 &&
                               p.tx == 0.0 && p.ty == 0.0;

  SegmentationSample out;
  out.vendor = in.vendor;
  out.seed = in.seed;
  out.label = LabelMask{size, size, std::vector<uint8_t>(size_t(size) * size, 0)};
  std::vector<double> img(size_t(size) * size, 0.0);
  const double* src = in.image.ptr();
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double sx = x, sy = y;
      if (!identity_affine) {
        // inverse map: undo translation, then rotation and scale about center
        const double dx = (x - c - p.tx) / p.scale;
        const double dy = (y - c - p.ty) / p.scale;
        sx = c + cs * dx + sn * dy;
        sy = c - sn * dx + cs * dy;
      }
      const size_t o = size_t(y) * size + x;
      const int ny = int(std::lround(sy)), nx = int(std::lround(sx));
      if (ny >= 0 && ny < size && nx >= 0 && nx < size)
        out.label.v[o] = in.label.v[size_t(ny) * size + nx];
      if (sy >= 0.0 && sy <= size - 1 && sx >= 0.0 && sx <= size - 1) {
        int y0 = std::min(int(sy), size - 2), x0 = std::min(int(sx), size - 2);
        if (y0 < 0) y0 = 0;
        if (x0 < 0) x0 = 0;
        const double fy = sy - y0, fx = sx - x0;
        img[o] = (1 - fy) * ((1 - fx) * src[size_t(y0) * size + x0] +
                             fx * src[size_t(y0) * size + x0 + 1]) +
                 fy * ((1 - fx) * src[size_t(y0 + 1) * size + x0] +
                       fx * src[size_t(y0 + 1) * size + x0 + 1]);
      }
    }
  for (double& v : img) {
    if (p.gamma != 1.0) v = std::pow(std::max(v, 0.0), p.gamma);
    if (p.noise_sigma > 0.0) v += noise_rng.normal() * p.noise_sigma;
    v = std::min(1.0, std::max(0.0, v));
  }
  out.image = Tensor::from({1, size, size}, std::move(img));
  return out;
}

inline SegmentationSample augment(const SegmentationSample& in, uint64_t seed) {
  SplitMix64 rng(mix_seed(seed, 0x61756774ULL));
  const AugmentParams p = draw_augment_params(rng, in.label.h);
  return apply_augment(in, p, rng);
}

// ---------------------------------------------------------------------------
// splits and dataset materialization
// ---------------------------------------------------------------------------

struct SplitEntry {
  uint64_t seed = 0;  // requested seed; topology bumps recorded separately
  Vendor vendor = Vendor::A;
  std::string split;  // "train" or "test"
};

// Train alternates vendors A/B; test cycles A,B,C,D, so the defaults give
// 75+75 train and 50 per vendor test. Seed ranges must not overlap.
inline std::vector<SplitEntry> make_splits(int n_train, int n_test,
                                           uint64_t train_base = 0,
                                           int64_t test_base = -1) {
  if (n_train < 0 || n_test < 0)
    throw ConfigError("make_splits: negative split size");
  const uint64_t tb = test_base < 0 ? train_base + uint64_t(n_train)
                                    : uint64_t(test_base);
  const uint64_t train_end = train_base + uint64_t(n_train);
  const uint64_t test_end = tb + uint64_t(n_test);
  if (train_base < test_end && tb < train_end && n_train > 0 && n_test > 0)
    throw ConfigError("make_splits: train seeds [" + std::to_string(train_base) +
                      "," + std::to_string(train_end) + ") overlap test seeds [" +
                      std::to_string(tb) + "," + std::to_string(test_end) + ")");
  std::vector<SplitEntry> entries;
  entries.reserve(size_t(n_train + n_test));
  for (int i = 0; i < n_train; ++i)
    entries.push_back({train_base + uint64_t(i),
                       i % 2 == 0 ? Vendor::A : Vendor::B, "train"});
  static constexpr Vendor kCycle[4] = {Vendor::A, Vendor::B, Vendor::C,
                                       Vendor::D};
  for (int i = 0; i < n_test; ++i)
    entries.push_back({tb + uint64_t(i), kCycle[i % 4], "test"});
  return entries;
}

// Topology-safe generation: violating seeds are retried in a distinct high
// seed band so bumps can never collide with another entry's seed.
inline SegmentationSample generate_checked(uint64_t seed, Vendor vendor, int size,
                                           int* bumps = nullptr) {
  uint64_t s = seed;
  for (int attempt = 0; attempt < 64; ++attempt) {
    SegmentationSample sample = generate(s, vendor, size);
    if (ring_encloses_disk(sample.label)) {
      if (bumps) *bumps = attempt;
      return sample;
    }
    s = seed + (uint64_t(attempt + 1) << 40);
  }
  throw DataError("generate_checked: no valid topology after 64 attempts for seed " +
                  std::to_string(seed));
}

// ---------------------------------------------------------------------------
// PGM input/output (image: 16-bit big-endian P5; label: 8-bit P5)
// ---------------------------------------------------------------------------

inline void write_pgm16(const std::string& path, const Tensor& img) {
  if (img.ndim() != 3 || img.shape[0] != 1)
    throw DataError("write_pgm16: expects [1 x H x W], got " + shape_str(img.shape));
  const int h = img.shape[1], w = img.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_pgm16: cannot open " + path);
  f << "P5\n" << w << " " << h << "\n65535\n";
  for (int64_t i = 0; i < int64_t(h) * w; ++i) {
    const double v = std::min(1.0, std::max(0.0, img.at(i)));
    const uint16_t q = uint16_t(std::lround(v * 65535.0));
    f.put(char(q >> 8));
    f.put(char(q & 0xff));
  }
}

namespace detail {

inline void read_pgm_header(std::ifstream& f, const std::string& path, int& w,
                            int& h, int& maxval) {
  std::string magic;
  f >> magic;
  if (magic != "P5") throw DataError("read_pgm: " + path + " is not binary PGM");
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0) throw DataError("read_pgm: bad header in " + path);
  f.get();  // single whitespace after maxval
}

}  // namespace detail

inline Tensor read_pgm16(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_pgm16: cannot open " + path);
  int w = 0, h = 0, maxval = 0;
  detail::read_pgm_header(f, path, w, h, maxval);
  if (maxval != 65535) throw DataError("read_pgm16: " + path + " is not 16-bit");
  std::vector<double> img(size_t(h) * w, 0.0);
  for (double& v : img) {
    const int hi = f.get(), lo = f.get();
    if (hi < 0 || lo < 0) throw DataError("read_pgm16: truncated " + path);
    v = double((hi << 8) | lo) / 65535.0;
  }
  return Tensor::from({1, h, w}, std::move(img));
}

inline void write_pgm8(const std::string& path, const LabelMask& m) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_pgm8: cannot open " + path);
  f << "P5\n" << m.w << " " << m.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(m.v.data()), std::streamsize(m.v.size()));
}

inline LabelMask read_pgm8(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_pgm8: cannot open " + path);
  int w = 0, h = 0, maxval = 0;
  detail::read_pgm_header(f, path, w, h, maxval);
  if (maxval != 255) throw DataError("read_pgm8: " + path + " is not 8-bit");
  LabelMask m{h, w, std::vector<uint8_t>(size_t(h) * w, 0)};
  f.read(reinterpret_cast<char*>(m.v.data()), std::streamsize(m.v.size()));
  if (!f) throw DataError("read_pgm8: truncated " + path);
  return m;
}

// ---------------------------------------------------------------------------
// dataset on disk
// ---------------------------------------------------------------------------

// Writes train/ and test/ PGM pairs plus manifest.json and returns the
// manifest. Every sample passes the ring-encloses-disk check; retries are
// recorded per entry as "bumps".
inline nlohmann::json materialize_dataset(const std::string& dir, int n_train,
                                          int n_test, int size,
                                          uint64_t train_base = 0,
                                          int64_t test_base = -1) {
  const auto entries = make_splits(n_train, n_test, train_base, test_base);
  std::filesystem::create_directories(std::filesystem::path(dir) / "train");
  std::filesystem::create_directories(std::filesystem::path(dir) / "test");
  nlohmann::json manifest;
  manifest["size"] = size;
  manifest["spacing_mm"] = 1.2;  // interface parity only; phantoms are unitless
  manifest["train_count"] = n_train;
  manifest["test_count"] = n_test;
  manifest["entries"] = nlohmann::json::array();
  int idx_train = 0, idx_test = 0;
  for (const SplitEntry& e : entries) {
    int bumps = 0;
    SegmentationSample s = generate_checked(e.seed, e.vendor, size, &bumps);
    const int idx = e.split == "train" ? idx_train++ : idx_test++;
    char img_name[64], lab_name[64];
    std::snprintf(img_name, sizeof img_name, "%s/img_%04d.pgm", e.split.c_str(), idx);
    std::snprintf(lab_name, sizeof lab_name, "%s/lab_%04d.pgm", e.split.c_str(), idx);
    write_pgm16((std::filesystem::path(dir) / img_name).string(), s.image);
    write_pgm8((std::filesystem::path(dir) / lab_name).string(), s.label);
    manifest["entries"].push_back({{"split", e.split},
                                   {"seed", e.seed},
                                   {"vendor", to_string(e.vendor)},
                                   {"bumps", bumps},
                                   {"image", img_name},
                                   {"label", lab_name}});
  }
  save_json((std::filesystem::path(dir) / "manifest.json").string(), manifest);
  return manifest;
}

inline SegmentationSample load_sample(const std::string& dir,
                                      const nlohmann::json& entry) {
  SegmentationSample s;
  s.image = read_pgm16(
      (std::filesystem::path(dir) / entry.at("image").get<std::string>()).string());
  s.label = read_pgm8(
      (std::filesystem::path(dir) / entry.at("label").get<std::string>()).string());
  if (s.image.shape[1] != s.label.h || s.image.shape[2] != s.label.w)
    throw DataError("load_sample: image/label size mismatch for " +
                    entry.at("image").get<std::string>());
  s.vendor = vendor_from_string(entry.at("vendor").get<std::string>());
  s.seed = entry.at("seed").get<uint64_t>();
  return s;
}

inline std::vector<SegmentationSample> load_split(const std::string& dir,
                                                  const nlohmann::json& manifest,
                                                  const std::string& split) {
  std::vector<SegmentationSample> out;
  for (const auto& e : manifest.at("entries"))
    if (e.at("split").get<std::string>() == split) out.push_back(load_sample(dir, e));
  if (out.empty())
    throw DataError("load_split: manifest has no '" + split + "' entries");
  return out;
}

}  // namespace utnet
