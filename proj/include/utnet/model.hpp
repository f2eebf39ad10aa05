#pragma once

#include <optional>
#include <string>
#include <vector>

#include "utnet/attention.hpp"
#include "utnet/serialize.hpp"

namespace utnet {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct UTNetConfig {
  int in_channels = 1;
  int num_classes = 4;
  int base_channels = 32;
  int levels = 5;                 // original resolution + (levels-1) downsamplings
  std::vector<int> widths;        // empty = base_channels * 2^level
  std::string attention_levels = "1234";  // digits over 1..levels-1, "" = none
  AttentionConfig attention;      // model_channels is set per level internally
  bool baseline_mode = false;     // strip every transformer block

  std::vector<int> resolved_widths() const {
    if (!widths.empty()) {
      if (int(widths.size()) != levels)
        throw ConfigError("model: widths has " + std::to_string(widths.size()) +
                          " entries, levels is " + std::to_string(levels));
      return widths;
    }
    std::vector<int> w(size_t(levels), 0);
    for (int i = 0; i < levels; ++i) w[size_t(i)] = base_channels << i;
    return w;
  }

  // Levels carrying transformer blocks (empty in baseline mode).
  std::vector<bool> active_levels() const {
    std::vector<bool> act(size_t(levels), false);
    if (baseline_mode) return act;
    for (char c : attention_levels) {
      if (c == '0')
        throw ConfigError(
            "model: attention_levels must not include the original "
            "resolution (level 0)");
      if (c < '1' || c > '9' || (c - '0') >= levels)
        throw ConfigError(std::string("model: invalid attention_levels digit '") +
                          c + "' for " + std::to_string(levels) + " levels");
      act[size_t(c - '0')] = true;
    }
    return act;
  }

  void validate() const {
    if (in_channels < 1 || num_classes < 2 || levels < 2)
      throw ConfigError("model: need in_channels >= 1, num_classes >= 2, levels >= 2");
    const auto w = resolved_widths();
    const auto act = active_levels();
    for (int i = 0; i < levels; ++i) {
      if (w[size_t(i)] < 1) throw ConfigError("model: widths must be positive");
      if (act[size_t(i)] && w[size_t(i)] % attention.heads != 0)
        throw ConfigError("model: width " + std::to_string(w[size_t(i)]) +
                          " at level " + std::to_string(i) +
                          " not divisible by " + std::to_string(attention.heads) +
                          " heads");
    }
    if (attention.reduced_size < 1)
      throw ConfigError("model: attention.reduced_size must be >= 1");
  }
};

inline nlohmann::json to_json(const AttentionConfig& a) {
  return {{"heads", a.heads},
          {"reduced_size", a.reduced_size},
          {"projection", to_string(a.projection)},
          {"use_relpos", a.use_relpos}};
}

inline AttentionConfig attention_config_from_json(const nlohmann::json& j) {
  AttentionConfig a;
  a.heads = j.at("heads").get<int>();
  a.reduced_size = j.at("reduced_size").get<int>();
  const std::string p = j.at("projection").get<std::string>();
  if (p == "bilinear")
    a.projection = KvProjection::bilinear;
  else if (p == "maxpool")
    a.projection = KvProjection::maxpool;
  else
    throw ConfigError("attention.projection must be 'bilinear' or 'maxpool', got '" +
                      p + "'");
  a.use_relpos = j.at("use_relpos").get<bool>();
  return a;
}

inline nlohmann::json to_json(const UTNetConfig& c) {
  return {{"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"base_channels", c.base_channels},
          {"levels", c.levels},
          {"widths", c.resolved_widths()},
          {"attention_levels", c.attention_levels},
          {"attention", to_json(c.attention)},
          {"baseline_mode", c.baseline_mode}};
}

inline UTNetConfig utnet_config_from_json(const nlohmann::json& j) {
  UTNetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.levels = j.at("levels").get<int>();
  c.widths = j.at("widths").get<std::vector<int>>();
  c.attention_levels = j.at("attention_levels").get<std::string>();
  c.attention = attention_config_from_json(j.at("attention"));
  c.baseline_mode = j.at("baseline_mode").get<bool>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 0;

  static Conv2dLayer make(int cin, int cout, int k, int stride, int pad,
                          SplitMix64& rng) {
    Conv2dLayer c;
    c.w = Tensor::randn({cout, cin, k, k}, rng, std::sqrt(2.0 / (cin * k * k)));
    c.b = Tensor::zeros({cout});
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    f(p + ".w", w);
    f(p + ".b", b);
  }
};

struct BatchNorm2dLayer {
  Tensor gamma, beta;
  Tensor running_mean, running_var;  // state, updated in training mode

  static BatchNorm2dLayer make(int c) {
    BatchNorm2dLayer bn;
    bn.gamma = Tensor::full({c}, 1.0);
    bn.beta = Tensor::zeros({c});
    bn.running_mean = Tensor::zeros({c});
    bn.running_var = Tensor::full({c}, 1.0);
    return bn;
  }

  Tensor forward(const Tensor& x, bool training) {
    return batch_norm_2d(x, gamma, beta, running_mean, running_var, training);
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    f(p + ".g", gamma);
    f(p + ".b", beta);
  }
  template <typename F>
  void visit_state(const std::string& p, F&& f) {
    f(p + ".rm", running_mean);
    f(p + ".rv", running_var);
  }
};

struct LayerNormLayer {
  Tensor gamma, beta;

  static LayerNormLayer make(int c) {
    return {Tensor::full({c}, 1.0), Tensor::zeros({c})};
  }

  Tensor forward(const Tensor& x) const {
    return layer_norm_channels(x, gamma, beta);
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    f(p + ".g", gamma);
    f(p + ".b", beta);
  }
};

// Pre-activation residual block: shortcut(x) + conv(act(norm(conv(act(norm(x)))))).
// The first conv carries the stride; the shortcut is identity unless channels
// or resolution change, in which case it is a strided 1x1 conv.
struct ResidualBlock {
  BatchNorm2dLayer bn1;
  Conv2dLayer conv1;  // 3x3, stride s
  BatchNorm2dLayer bn2;
  Conv2dLayer conv2;  // 3x3, stride 1
  std::optional<Conv2dLayer> shortcut;

  static ResidualBlock make(int cin, int cout, int stride, SplitMix64& rng) {
    if (stride != 1 && stride != 2)
      throw ConfigError("residual_block: stride must be 1 or 2");
    ResidualBlock r;
    r.bn1 = BatchNorm2dLayer::make(cin);
    r.conv1 = Conv2dLayer::make(cin, cout, 3, stride, 1, rng);
    r.bn2 = BatchNorm2dLayer::make(cout);
    r.conv2 = Conv2dLayer::make(cout, cout, 3, 1, 1, rng);
    if (stride != 1 || cin != cout)
      r.shortcut = Conv2dLayer::make(cin, cout, 1, stride, 0, rng);
    return r;
  }

  Tensor forward(const Tensor& x, bool training) {
    Tensor h = conv1.forward(relu(bn1.forward(x, training)));
    h = conv2.forward(relu(bn2.forward(h, training)));
    Tensor s = shortcut ? shortcut->forward(x) : x;
    return add(s, h);
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    bn1.visit_params(p + ".bn1", f);
    conv1.visit_params(p + ".conv1", f);
    bn2.visit_params(p + ".bn2", f);
    conv2.visit_params(p + ".conv2", f);
    if (shortcut) shortcut->visit_params(p + ".shortcut", f);
  }
  template <typename F>
  void visit_state(const std::string& p, F&& f) {
    bn1.visit_state(p + ".bn1", f);
    bn2.visit_state(p + ".bn2", f);
  }
};

// Pre-norm transformer block: x + MHSA(norm(x)), then + FFN(norm(.)).
// The FFN is two 1x1 convs with expansion 4 and GELU.
struct TransformerEncoderBlock {
  AttentionConfig acfg;
  LayerNormLayer ln1;
  AttentionWeights attn;
  LayerNormLayer ln2;
  Conv2dLayer ffn1, ffn2;

  static TransformerEncoderBlock make(const AttentionConfig& acfg,
                                      SplitMix64& rng) {
    const int c = acfg.model_channels;
    TransformerEncoderBlock t;
    t.acfg = acfg;
    t.ln1 = LayerNormLayer::make(c);
    t.attn = init_attention_weights(acfg, rng);
    t.ln2 = LayerNormLayer::make(c);
    t.ffn1 = Conv2dLayer::make(c, 4 * c, 1, 1, 0, rng);
    t.ffn2 = Conv2dLayer::make(4 * c, c, 1, 1, 0, rng);
    return t;
  }

  Tensor forward(const Tensor& x, bool) {
    Tensor normed = ln1.forward(x);
    Tensor mh = acfg.use_relpos ? efficient_mhsa_relpos(normed, attn, acfg)
                                : efficient_mhsa(normed, attn, acfg);
    Tensor a = add(x, mh);
    Tensor f = ffn2.forward(gelu(ffn1.forward(ln2.forward(a))));
    return add(a, f);
  }

  template <typename F>
  void visit_params(const std::string& p, const std::string& attn_name, F&& f) {
    ln1.visit_params(p + ".ln1", f);
    attn.visit([&](const char* role, Tensor& t) { f(attn_name + "." + role, t); });
    ln2.visit_params(p + ".ln2", f);
    ffn1.visit_params(p + ".ffn1", f);
    ffn2.visit_params(p + ".ffn2", f);
  }
};

// Decoder fusion block: the coarse stream is reduced to the skip width and
// bilinearly upsampled; cross-attention queries the normed skip against the
// normed coarse map; the merged sum gets a residual FFN.
struct TransformerDecoderBlock {
  AttentionConfig acfg;
  Conv2dLayer reduce;  // 1x1, coarse channels -> skip channels
  LayerNormLayer ln_hi, ln_lo;
  AttentionWeights attn;
  LayerNormLayer ln_post;
  Conv2dLayer ffn1, ffn2;

  static TransformerDecoderBlock make(int c_lo, const AttentionConfig& acfg,
                                      SplitMix64& rng) {
    const int c = acfg.model_channels;
    TransformerDecoderBlock t;
    t.acfg = acfg;
    t.reduce = Conv2dLayer::make(c_lo, c, 1, 1, 0, rng);
    t.ln_hi = LayerNormLayer::make(c);
    t.ln_lo = LayerNormLayer::make(c);
    t.attn = init_attention_weights(acfg, rng);
    t.ln_post = LayerNormLayer::make(c);
    t.ffn1 = Conv2dLayer::make(c, 4 * c, 1, 1, 0, rng);
    t.ffn2 = Conv2dLayer::make(4 * c, c, 1, 1, 0, rng);
    return t;
  }

  Tensor forward(const Tensor& hi, const Tensor& lo, bool) {
    if (lo.shape[2] >= hi.shape[2] || lo.shape[3] >= hi.shape[3])
      throw ConfigError("transformer_decoder_block: second input must be coarser");
    Tensor lo_r = reduce.forward(lo);
    Tensor up = bilinear_resize(lo_r, hi.shape[2], hi.shape[3]);
    Tensor a = decoder_cross_mhsa(ln_hi.forward(hi), ln_lo.forward(lo_r), attn, acfg);
    Tensor merged = add(up, a);
    Tensor f = ffn2.forward(gelu(ffn1.forward(ln_post.forward(merged))));
    return add(merged, f);
  }

  template <typename F>
  void visit_params(const std::string& p, const std::string& attn_name, F&& f) {
    reduce.visit_params(p + ".reduce", f);
    ln_hi.visit_params(p + ".ln_hi", f);
    ln_lo.visit_params(p + ".ln_lo", f);
    attn.visit([&](const char* role, Tensor& t) { f(attn_name + "." + role, t); });
    ln_post.visit_params(p + ".ln_post", f);
    ffn1.visit_params(p + ".ffn1", f);
    ffn2.visit_params(p + ".ffn2", f);
  }
};

// Plain decoder stage (baseline / inactive levels): bilinear upsample of the
// 1x1-reduced coarse map, add the skip, then one residual block.
struct UpMergeStage {
  Conv2dLayer reduce;
  ResidualBlock res;

  static UpMergeStage make(int c_lo, int c, SplitMix64& rng) {
    UpMergeStage s;
    s.reduce = Conv2dLayer::make(c_lo, c, 1, 1, 0, rng);
    s.res = ResidualBlock::make(c, c, 1, rng);
    return s;
  }

  Tensor forward(const Tensor& skip, const Tensor& lo, bool training) {
    Tensor up = bilinear_resize(reduce.forward(lo), skip.shape[2], skip.shape[3]);
    return res.forward(add(up, skip), training);
  }

  template <typename F>
  void visit_params(const std::string& p, F&& f) {
    reduce.visit_params(p + ".reduce", f);
    res.visit_params(p + ".res", f);
  }
  template <typename F>
  void visit_state(const std::string& p, F&& f) {
    res.visit_state(p + ".res", f);
  }
};

// ---------------------------------------------------------------------------
// the network
// ---------------------------------------------------------------------------

struct ParamCensus {
  int64_t total = 0;
  int64_t attention = 0;
};

struct UTNet {
  UTNetConfig cfg;
  uint64_t seed = 0;

  Conv2dLayer stem;                  // 3x3, in_channels -> widths[0]
  ResidualBlock enc0;                // widths[0], stride 1
  std::vector<ResidualBlock> down;   // level i downsampler, i = 1..levels-1
  std::vector<std::optional<TransformerEncoderBlock>> enc_attn;  // per level
  // Decoder stage with output at level i consumes the level-i skip and the
  // level-(i+1) stream; exactly one of the two forms is present per stage.
  std::vector<std::optional<TransformerDecoderBlock>> dec_attn;
  std::vector<std::optional<UpMergeStage>> dec_plain;
  // Pre-activation trunks leave the stream unnormalized, so the classifier
  // gets a final norm+activation of its own (the usual pre-act closing pair).
  BatchNorm2dLayer final_bn;
  Conv2dLayer head;                  // 1x1, widths[0] -> num_classes

  template <typename F>
  void visit_params(F&& f) {
    stem.visit_params("stem", f);
    enc0.visit_params("enc0", f);
    for (size_t i = 0; i < down.size(); ++i) {
      const std::string lvl = std::to_string(i + 1);
      down[i].visit_params("down" + lvl, f);
      if (enc_attn[i + 1])
        enc_attn[i + 1]->visit_params("enc" + lvl, "attn." + lvl, f);
    }
    for (size_t i = 0; i < dec_attn.size(); ++i) {
      const std::string lvl = std::to_string(i);
      if (dec_attn[i])
        dec_attn[i]->visit_params("dec" + lvl, "attn." + lvl + ".dec", f);
      if (dec_plain[i]) dec_plain[i]->visit_params("dec" + lvl, f);
    }
    final_bn.visit_params("final_bn", f);
    head.visit_params("head", f);
  }

  template <typename F>
  void visit_state(F&& f) {
    enc0.visit_state("enc0", f);
    for (size_t i = 0; i < down.size(); ++i)
      down[i].visit_state("down" + std::to_string(i + 1), f);
    for (size_t i = 0; i < dec_plain.size(); ++i)
      if (dec_plain[i]) dec_plain[i]->visit_state("dec" + std::to_string(i), f);
    final_bn.visit_state("final_bn", f);
  }

  ParamCensus census() {
    ParamCensus c;
    visit_params([&](const std::string& name, Tensor& t) {
      c.total += t.numel();
      if (name.rfind("attn.", 0) == 0) c.attention += t.numel();
    });
    return c;
  }

  Tensor forward(const Tensor& x, bool training) {
    if (x.ndim() != 4 || x.shape[1] != cfg.in_channels)
      throw DataError("forward: expects [B x " + std::to_string(cfg.in_channels) +
                      " x H x W], got " + shape_str(x.shape));
    const int div = 1 << (cfg.levels - 1);
    if (x.shape[2] % div != 0 || x.shape[3] % div != 0)
      throw DataError("forward: H and W must be divisible by " +
                      std::to_string(div) + ", got " + shape_str(x.shape));

    std::vector<Tensor> skip(size_t(cfg.levels));
    skip[0] = enc0.forward(stem.forward(x), training);
    for (int i = 1; i < cfg.levels; ++i) {
      Tensor t = down[size_t(i - 1)].forward(skip[size_t(i - 1)], training);
      if (enc_attn[size_t(i)]) t = enc_attn[size_t(i)]->forward(t, training);
      skip[size_t(i)] = t;
    }
    Tensor cur = skip[size_t(cfg.levels - 1)];
    for (int i = cfg.levels - 2; i >= 0; --i) {
      if (dec_attn[size_t(i)])
        cur = dec_attn[size_t(i)]->forward(skip[size_t(i)], cur, training);
      else
        cur = dec_plain[size_t(i)]->forward(skip[size_t(i)], cur, training);
    }
    return head.forward(relu(final_bn.forward(cur, training)));
  }
};

inline UTNet build(const UTNetConfig& cfg, uint64_t seed) {
  cfg.validate();
  const auto widths = cfg.resolved_widths();
  const auto active = cfg.active_levels();
  SplitMix64 rng(mix_seed(seed, 0x6d6f64656cULL));  // "model"

  UTNet m;
  m.cfg = cfg;
  m.seed = seed;
  m.stem = Conv2dLayer::make(cfg.in_channels, widths[0], 3, 1, 1, rng);
  m.enc0 = ResidualBlock::make(widths[0], widths[0], 1, rng);
  m.enc_attn.resize(size_t(cfg.levels));
  for (int i = 1; i < cfg.levels; ++i) {
    m.down.push_back(
        ResidualBlock::make(widths[size_t(i - 1)], widths[size_t(i)], 2, rng));
    if (active[size_t(i)]) {
      AttentionConfig acfg = cfg.attention;
      acfg.model_channels = widths[size_t(i)];
      m.enc_attn[size_t(i)] = TransformerEncoderBlock::make(acfg, rng);
    }
  }
  m.dec_attn.resize(size_t(cfg.levels - 1));
  m.dec_plain.resize(size_t(cfg.levels - 1));
  for (int i = cfg.levels - 2; i >= 0; --i) {
    if (active[size_t(i)]) {
      AttentionConfig acfg = cfg.attention;
      acfg.model_channels = widths[size_t(i)];
      m.dec_attn[size_t(i)] =
          TransformerDecoderBlock::make(widths[size_t(i + 1)], acfg, rng);
    } else {
      m.dec_plain[size_t(i)] =
          UpMergeStage::make(widths[size_t(i + 1)], widths[size_t(i)], rng);
    }
  }
  m.final_bn = BatchNorm2dLayer::make(widths[0]);
  m.head = Conv2dLayer::make(widths[0], cfg.num_classes, 1, 1, 0, rng);
  return m;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  int epoch = 0;
  double lr = 0.0;
};

inline void save_checkpoint(UTNet& model, const std::string& dir,
                            const CheckpointMeta& meta) {
  std::filesystem::create_directories(dir);
  auto cen = model.census();
  nlohmann::json j = {{"config", to_json(model.cfg)},
                      {"seed", model.seed},
                      {"epoch", meta.epoch},
                      {"lr", meta.lr},
                      {"census",
                       {{"total", cen.total}, {"attention", cen.attention}}}};
  save_json(dir + "/model.json", j);
  model.visit_params(
      [&](const std::string& name, Tensor& t) { save_tensor(dir, name, t); });
  model.visit_state(
      [&](const std::string& name, Tensor& t) { save_tensor(dir, name, t); });
}

inline UTNet load_checkpoint(const std::string& dir,
                             CheckpointMeta* meta = nullptr) {
  const nlohmann::json j = load_json(dir + "/model.json");
  UTNet m = build(utnet_config_from_json(j.at("config")),
                  j.at("seed").get<uint64_t>());
  if (meta) {
    meta->epoch = j.at("epoch").get<int>();
    meta->lr = j.at("lr").get<double>();
  }
  auto restore = [&](const std::string& name, Tensor& t) {
    Tensor loaded = load_tensor(dir, name);
    if (loaded.shape != t.shape)
      throw DataError("checkpoint: tensor '" + name + "' has shape " +
                      shape_str(loaded.shape) + ", model expects " +
                      shape_str(t.shape));
    t.data = loaded.data;
  };
  m.visit_params(restore);
  m.visit_state(restore);
  return m;
}

}  // namespace utnet
