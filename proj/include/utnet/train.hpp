#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "utnet/metrics.hpp"

namespace utnet {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 150;
  double base_lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 8;  // desk-scale default; recorded in every report header
  double lr_gamma = 0.98;
  uint64_t seed = 0;
  int checkpoint_every = 10;
  int val_count = 16;              // deterministic phantom validation set
  uint64_t val_seed_base = 900000; // reserved band, disjoint from data splits
  bool augment = true;

  void validate() const {
    if (epochs <= 0 || base_lr <= 0.0 || momentum <= 0.0 || weight_decay <= 0.0 ||
        batch_size <= 0 || checkpoint_every <= 0 || val_count <= 0)
      throw ConfigError("TrainConfig: all sizes and rates must be positive");
    if (lr_gamma <= 0.0 || lr_gamma >= 1.0)
      throw ConfigError("TrainConfig: lr_gamma must lie in (0,1), got " +
                        std::to_string(lr_gamma));
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"base_lr", c.base_lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"lr_gamma", c.lr_gamma},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"val_count", c.val_count},
          {"val_seed_base", c.val_seed_base},
          {"augment", c.augment}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_gamma = j.value("lr_gamma", c.lr_gamma);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.val_count = j.value("val_count", c.val_count);
  c.val_seed_base = j.value("val_seed_base", c.val_seed_base);
  c.augment = j.value("augment", c.augment);
  c.validate();
  return c;
}

// base_lr * lr_gamma^epoch
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    throw ConfigError("lr_at: epoch " + std::to_string(epoch) +
                      " outside [0," + std::to_string(cfg.epochs) + ")");
  return cfg.base_lr * std::pow(cfg.lr_gamma, double(epoch));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Soft Dice over softmax probabilities, averaged over foreground classes,
// with smoothing eps in numerator and denominator. Intersection and sums are
// accumulated over the whole batch. loss = 1 - mean dice.
inline Tensor dice_loss(const Tensor& logits, const std::vector<LabelMask>& labels) {
  if (logits.ndim() != 4)
    throw ShapeError("dice_loss: expects [B,K,H,W], got " + shape_str(logits.shape));
  const int B = logits.dim(0), K = logits.dim(1), H = logits.dim(2),
            W = logits.dim(3);
  if (K < 2) throw ShapeError("dice_loss: needs at least 2 classes");
  if (int(labels.size()) != B || labels[0].h != H || labels[0].w != W)
    throw DataError("dice_loss: label stack does not match logits " +
                    shape_str(logits.shape));
  constexpr double kEps = 1e-5;
  const int64_t plane = int64_t(H) * W;

  auto probs = std::make_shared<std::vector<double>>(size_t(logits.numel()));
  auto inter = std::make_shared<std::vector<double>>(size_t(K), 0.0);
  auto denom = std::make_shared<std::vector<double>>(size_t(K), 0.0);  // P_k + G_k
  for (int b = 0; b < B; ++b) {
    const double* lb = logits.ptr() + int64_t(b) * K * plane;
    double* pb = probs->data() + int64_t(b) * K * plane;
    const LabelMask& lab = labels[size_t(b)];
    for (int64_t i = 0; i < plane; ++i) {
      if (lab.v[size_t(i)] >= K)
        throw DataError("dice_loss: label " + std::to_string(lab.v[size_t(i)]) +
                        " out of range for " + std::to_string(K) + " classes");
      double mx = lb[i];
      for (int k = 1; k < K; ++k) mx = std::max(mx, lb[int64_t(k) * plane + i]);
      double z = 0.0;
      for (int k = 0; k < K; ++k) {
        const double e = std::exp(lb[int64_t(k) * plane + i] - mx);
        pb[int64_t(k) * plane + i] = e;
        z += e;
      }
      for (int k = 0; k < K; ++k) {
        double& p = pb[int64_t(k) * plane + i];
        p /= z;
        (*denom)[size_t(k)] += p;
      }
      const int g = lab.v[size_t(i)];
      (*inter)[size_t(g)] += pb[int64_t(g) * plane + i];
      (*denom)[size_t(g)] += 1.0;
    }
  }
  double mean_dice = 0.0;
  for (int k = 1; k < K; ++k)
    mean_dice += (2.0 * (*inter)[size_t(k)] + kEps) / ((*denom)[size_t(k)] + kEps);
  mean_dice /= double(K - 1);

  Tensor out = Tensor::from({1}, {1.0 - mean_dice});
  const std::vector<LabelMask> labs = labels;  // owned copy for the closure
  return record_op(
      "dice_loss", {&logits}, std::move(out),
      [=](const std::vector<int>& ids) {
        return [=](Graph& g, const std::vector<double>& og) {
          if (ids[0] < 0) return;
          std::vector<double> dz(probs->size(), 0.0);
          const double scale = -og[0] / double(K - 1);
          for (int b = 0; b < B; ++b) {
            const double* pb = probs->data() + int64_t(b) * K * plane;
            double* db = dz.data() + int64_t(b) * K * plane;
            const LabelMask& lab = labs[size_t(b)];
            for (int64_t i = 0; i < plane; ++i) {
              // dL/dp_k, then chain through the pixel softmax
              double dot = 0.0;
              for (int k = 1; k < K; ++k) {
                const double den = (*denom)[size_t(k)] + kEps;
                const double num = 2.0 * (*inter)[size_t(k)] + kEps;
                const double gk = lab.v[size_t(i)] == k ? 1.0 : 0.0;
                const double dp = scale * (2.0 * gk * den - num) / (den * den);
                db[int64_t(k) * plane + i] = dp;
                dot += pb[int64_t(k) * plane + i] * dp;
              }
              for (int k = 0; k < K; ++k) {
                const int64_t o = int64_t(k) * plane + i;
                db[o] = pb[o] * (db[o] - dot);
              }
            }
          }
          accumulate_grad(g, ids[0], dz);
        };
      });
}

// dice_loss + pixel-wise cross entropy, unit weights
inline Tensor combined_loss(const Tensor& logits,
                            const std::vector<LabelMask>& labels) {
  return add(dice_loss(logits, labels), cross_entropy_with_logits(logits, labels));
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// SGD with momentum and L2 weight decay folded into the velocity:
//   v <- mu*v + g + lambda*theta;  theta <- theta - lr*v
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<std::pair<std::string, Tensor*>> params,
               double momentum, double weight_decay)
      : params_(std::move(params)), mu_(momentum), lambda_(weight_decay) {
    velocity_.reserve(params_.size());
    for (const auto& [name, t] : params_)
      velocity_.emplace_back(size_t(t->numel()), 0.0);
  }

  SgdOptimizer(UTNet& model, const TrainConfig& cfg)
      : SgdOptimizer(collect(model), cfg.momentum, cfg.weight_decay) {}

  void step(double lr) {
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      Tensor* t = params_[pi].second;
      if (!t->grad)
        throw Error("sgd_step: parameter '" + params_[pi].first +
                    "' has no gradient buffer; run backward first");
      std::vector<double>& v = velocity_[pi];
      const std::vector<double>& g = *t->grad;
      std::vector<double>& theta = *t->data;
      for (size_t i = 0; i < v.size(); ++i) {
        v[i] = mu_ * v[i] + g[i] + lambda_ * theta[i];
        theta[i] -= lr * v[i];
      }
    }
    ++steps_;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t->zero_grad();
  }

  int64_t steps() const { return steps_; }
  size_t size() const { return params_.size(); }
  const std::vector<double>& velocity(size_t i) const { return velocity_[i]; }

 private:
  static std::vector<std::pair<std::string, Tensor*>> collect(UTNet& model) {
    std::vector<std::pair<std::string, Tensor*>> out;
    model.visit_params([&](const std::string& name, Tensor& t) {
      t.set_requires_grad();
      out.emplace_back(name, &t);
    });
    return out;
  }

  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<std::vector<double>> velocity_;
  double mu_ = 0.0, lambda_ = 0.0;
  int64_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::vector<double> val_dice;  // one entry per foreground class
  double val_dice_mean = 0.0;
};

struct TrainReport {
  std::vector<EpochRow> rows;
  int best_epoch = -1;
  double best_val_dice = -1.0;
  int batch_size = 0;
  uint64_t seed = 0;

  std::string csv() const {
    char buf[64];
    std::string out = "# batch_size=" + std::to_string(batch_size) +
                      " seed=" + std::to_string(seed) + "\n";
    out += "epoch,lr,train_loss";
    const size_t nc = rows.empty() ? 0 : rows.front().val_dice.size();
    for (size_t c = 1; c <= nc; ++c) out += ",val_dice_" + std::to_string(c);
    out += ",val_dice_mean\n";
    auto g = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    for (const EpochRow& r : rows) {
      out += std::to_string(r.epoch) + "," + g(r.lr) + "," + g(r.train_loss);
      for (double d : r.val_dice) out += "," + g(d);
      out += "," + g(r.val_dice_mean) + "\n";
    }
    return out;
  }
};

namespace detail {

inline double val_dice_of(UTNet& model, const std::vector<SegmentationSample>& val,
                          std::vector<double>& per_class) {
  const int K = model.cfg.num_classes;
  per_class.assign(size_t(K - 1), 0.0);
  for (const SegmentationSample& s : val) {
    Tensor x = Tensor::from({1, 1, s.label.h, s.label.w},
                            std::vector<double>(s.image.ptr(),
                                                s.image.ptr() + s.image.numel()));
    const LabelMask pred = argmax_mask(model.forward(x, /*training=*/false), 0);
    for (int c = 1; c < K; ++c)
      per_class[size_t(c - 1)] += dice_score(pred, s.label, c);
  }
  double mean = 0.0;
  for (double& d : per_class) {
    d /= double(val.size());
    mean += d;
  }
  return mean / double(per_class.size());
}

}  // namespace detail

// Runs the full training loop: shuffled mini-batches with augmentation,
// exponential lr decay, per-epoch validation on a reserved deterministic
// phantom set, periodic + best checkpoints, and a CSV report. Deterministic
// given (model seed, cfg.seed): identical runs produce identical artifacts.
inline TrainReport fit(UTNet& model, const std::string& data_dir,
                       const nlohmann::json& manifest, const TrainConfig& cfg,
                       const std::string& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "checkpoints");

  const auto train = load_split(data_dir, manifest, "train");
  const int size = manifest.at("size").get<int>();
  std::vector<SegmentationSample> val;
  for (int i = 0; i < cfg.val_count; ++i)
    val.push_back(generate_checked(cfg.val_seed_base + uint64_t(i),
                                   i % 2 == 0 ? Vendor::A : Vendor::B, size));

  SgdOptimizer opt(model, cfg);
  TrainReport report;
  report.batch_size = cfg.batch_size;
  report.seed = cfg.seed;

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    SplitMix64 shuffle_rng(mix_seed(cfg.seed, 0x73687566ULL, uint64_t(epoch)));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    int64_t seen = 0;
    int step_in_epoch = 0;
    for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + size_t(cfg.batch_size));
      const int B = int(stop - start);
      Tensor x = Tensor::zeros({B, 1, size, size});
      std::vector<LabelMask> labels;
      labels.reserve(size_t(B));
      for (size_t j = start; j < stop; ++j) {
        const SegmentationSample& raw = train[order[j]];
        const SegmentationSample s =
            cfg.augment
                ? augment(raw, mix_seed(cfg.seed, uint64_t(epoch) * 0x10001 + j,
                                        0x61756774ULL))
                : raw;
        std::copy(s.image.ptr(), s.image.ptr() + s.image.numel(),
                  x.ptr() + int64_t(j - start) * s.image.numel());
        labels.push_back(s.label);
      }

      double batch_loss = 0.0;
      try {
        Graph g;
        GraphScope scope(g);
        opt.zero_grad();
        Tensor loss = combined_loss(model.forward(x, /*training=*/true), labels);
        batch_loss = loss.scalar();
        if (!std::isfinite(batch_loss)) throw NonFiniteError("combined_loss");
        g.backward(loss);
      } catch (const NonFiniteError& e) {
        throw DataError("fit: aborted at epoch " + std::to_string(epoch) +
                        ", step " + std::to_string(step_in_epoch) + ": " + e.what());
      }
      opt.step(lr);
      loss_sum += batch_loss * B;
      seen += B;
      ++step_in_epoch;
    }

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.train_loss = loss_sum / double(seen);
    row.val_dice_mean = detail::val_dice_of(model, val, row.val_dice);
    report.rows.push_back(row);

    const CheckpointMeta meta{epoch, lr};
    if ((epoch + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d", epoch);
      save_checkpoint(model, (fs::path(out_dir) / "checkpoints" / name).string(),
                      meta);
    }
    if (row.val_dice_mean > report.best_val_dice) {
      report.best_val_dice = row.val_dice_mean;
      report.best_epoch = epoch;
      save_checkpoint(model, (fs::path(out_dir) / "checkpoints" / "best").string(),
                      meta);
    }
  }

  save_checkpoint(model, (fs::path(out_dir) / "checkpoints" / "final").string(),
                  CheckpointMeta{cfg.epochs - 1, lr_at(cfg.epochs - 1, cfg)});
  save_json(fs::path(out_dir) / "train_config.json", to_json(cfg));
  std::ofstream rep(fs::path(out_dir) / "report.csv", std::ios::binary);
  rep << report.csv();
  return report;
}

}  // namespace utnet
