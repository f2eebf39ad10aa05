#pragma once

#include <cstdio>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "utnet/gradcheck.hpp"
#include "utnet/train.hpp"

namespace utnet {

// === release-gate gradient suite ===
//
// One named central-difference check per differentiable op, per attention
// variant, per loss, plus the whole network end to end. Both the CLI
// `gradcheck` subcommand and the acceptance gate run exactly this list, so
// "the gradients are right" means the same thing everywhere.

struct GradCheckCase {
  std::string name;
  LossFn f;
  std::vector<Tensor> inputs;
  double tolerance = 1e-5;
  double eps = 1e-5;
};

namespace detail {

inline Tensor gc_randn(const Shape& s, uint64_t seed, double stddev = 1.0) {
  SplitMix64 rng(seed);
  return Tensor::randn(s, rng, stddev);
}

// Values kept away from zero so kinked ops (relu, max) see stable
// finite differences.
inline Tensor gc_randn_nonzero(const Shape& s, uint64_t seed,
                               double margin = 0.1) {
  Tensor t = gc_randn(s, seed);
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double v = t.at(i);
    t.at(i) = v >= 0 ? v + margin : v - margin;
  }
  return t;
}

inline std::vector<LabelMask> gc_labels(int b, int h, int w, int num_classes,
                                        uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<LabelMask> out;
  for (int i = 0; i < b; ++i) {
    LabelMask m;
    m.h = h;
    m.w = w;
    m.v.resize(size_t(h) * w);
    for (auto& px : m.v) px = uint8_t(rng.next_below(uint64_t(num_classes)));
    out.push_back(std::move(m));
  }
  return out;
}

// Loss over an attention variant with every weight tensor spliced in as a
// checked input. Variant: 0 standard, 1 efficient, 2 efficient+relpos,
// 3 decoder cross-attention (extra low-res input at the back).
inline GradCheckCase mhsa_case(const std::string& name, int variant,
                               uint64_t seed) {
  AttentionConfig cfg;
  cfg.heads = 2;
  cfg.model_channels = 4;
  cfg.reduced_size = 2;
  cfg.use_relpos = variant >= 2;

  SplitMix64 rng(seed);
  AttentionWeights w0 = init_attention_weights(cfg, rng);
  if (cfg.use_relpos) {  // random tables so their gradient is exercised
    w0.rel.r_h = gc_randn(w0.rel.r_h.shape, seed + 50, 0.5);
    w0.rel.r_w = gc_randn(w0.rel.r_w.shape, seed + 51, 0.5);
  }

  GradCheckCase c;
  c.name = name;
  c.inputs = {gc_randn({1, 4, 4, 4}, seed + 1), w0.wq, w0.bq, w0.wk, w0.bk,
              w0.wv, w0.bv, w0.wout, w0.bout};
  if (cfg.use_relpos) {
    c.inputs.push_back(w0.rel.r_h);
    c.inputs.push_back(w0.rel.r_w);
  }
  if (variant == 3) c.inputs.push_back(gc_randn({1, 4, 2, 2}, seed + 2));
  c.f = [cfg, variant](const std::vector<Tensor>& in) {
    AttentionWeights w;
    w.wq = in[1];
    w.bq = in[2];
    w.wk = in[3];
    w.bk = in[4];
    w.wv = in[5];
    w.bv = in[6];
    w.wout = in[7];
    w.bout = in[8];
    if (cfg.use_relpos) {
      w.rel.r_h = in[9];
      w.rel.r_w = in[10];
    }
    Tensor out;
    switch (variant) {
      case 0: out = standard_mhsa(in[0], w, cfg); break;
      case 1: out = efficient_mhsa(in[0], w, cfg); break;
      case 2: out = efficient_mhsa_relpos(in[0], w, cfg); break;
      default: out = decoder_cross_mhsa(in[0], in.back(), w, cfg); break;
    }
    return sum(mul(out, out));
  };
  return c;
}

}  // namespace detail

inline std::vector<GradCheckCase> gradcheck_suite() {
  using detail::gc_randn;
  using detail::gc_randn_nonzero;
  std::vector<GradCheckCase> cases;
  const auto quad = [](const Tensor& y) { return sum(mul(y, y)); };

  const auto simple = [&](const std::string& name, LossFn f,
                          std::vector<Tensor> inputs) {
    cases.push_back({name, std::move(f), std::move(inputs), 1e-5, 1e-5});
  };

  // elementwise arithmetic
  simple("add",
         [=](const std::vector<Tensor>& in) { return quad(add(in[0], in[1])); },
         {gc_randn({2, 5}, 101), gc_randn({2, 5}, 102)});
  simple("sub",
         [=](const std::vector<Tensor>& in) { return quad(sub(in[0], in[1])); },
         {gc_randn({2, 5}, 103), gc_randn({2, 5}, 104)});
  simple("mul",
         [=](const std::vector<Tensor>& in) { return quad(mul(in[0], in[1])); },
         {gc_randn({2, 5}, 105), gc_randn({2, 5}, 106)});
  simple("div",
         [=](const std::vector<Tensor>& in) { return quad(div(in[0], in[1])); },
         {gc_randn({2, 5}, 107), gc_randn_nonzero({2, 5}, 108, 0.5)});
  simple("scale",
         [=](const std::vector<Tensor>& in) { return quad(scale(in[0], -1.3)); },
         {gc_randn({3, 4}, 109)});
  simple("add_scalar",
         [=](const std::vector<Tensor>& in) {
           return quad(add_scalar(in[0], 0.7));
         },
         {gc_randn({3, 4}, 110)});

  // activations
  simple("relu",
         [=](const std::vector<Tensor>& in) { return quad(relu(in[0])); },
         {gc_randn_nonzero({3, 4}, 111)});
  simple("gelu",
         [=](const std::vector<Tensor>& in) { return quad(gelu(in[0])); },
         {gc_randn({3, 4}, 112)});

  // reductions
  simple("sum", [](const std::vector<Tensor>& in) { return sum(in[0]); },
         {gc_randn({3, 3}, 113)});
  simple("mean",
         [=](const std::vector<Tensor>& in) { return mean(mul(in[0], in[0])); },
         {gc_randn({3, 4}, 114)});
  simple("sum_axes",
         [=](const std::vector<Tensor>& in) {
           return quad(sum_axes(in[0], {1}));
         },
         {gc_randn({3, 4, 2}, 115)});

  // linear algebra and softmax
  simple("matmul",
         [=](const std::vector<Tensor>& in) {
           return quad(matmul(in[0], in[1]));
         },
         {gc_randn({3, 4}, 116), gc_randn({4, 2}, 117)});
  simple("softmax",
         [=](const std::vector<Tensor>& in) { return quad(softmax(in[0], 1)); },
         {gc_randn({4, 5}, 118, 2.0)});

  // shape ops
  simple("reshape",
         [=](const std::vector<Tensor>& in) {
           return quad(reshape(in[0], {6, 2}));
         },
         {gc_randn({3, 4}, 119)});
  simple("transpose",
         [=](const std::vector<Tensor>& in) {
           return quad(transpose(in[0], {2, 0, 1}));
         },
         {gc_randn({2, 3, 4}, 120)});
  simple("concat",
         [=](const std::vector<Tensor>& in) {
           return quad(concat({in[0], in[1]}, 1));
         },
         {gc_randn({2, 3}, 121), gc_randn({2, 2}, 122)});

  // convolutions
  simple("conv2d_3x3",
         [=](const std::vector<Tensor>& in) {
           return quad(conv2d(in[0], in[1], in[2], 1, 1));
         },
         {gc_randn({2, 2, 4, 4}, 123), gc_randn({3, 2, 3, 3}, 124, 0.5),
          gc_randn({3}, 125)});
  simple("conv2d_3x3_stride2",
         [=](const std::vector<Tensor>& in) {
           return quad(conv2d(in[0], in[1], in[2], 2, 1));
         },
         {gc_randn({2, 2, 4, 4}, 126), gc_randn({3, 2, 3, 3}, 127, 0.5),
          gc_randn({3}, 128)});
  simple("conv2d_1x1",
         [=](const std::vector<Tensor>& in) {
           return quad(conv2d(in[0], in[1], in[2]));
         },
         {gc_randn({2, 2, 4, 4}, 129), gc_randn({3, 2, 1, 1}, 130, 0.5),
          gc_randn({3}, 131)});

  // resampling and pooling
  simple("bilinear_resize",
         [=](const std::vector<Tensor>& in) {
           return quad(bilinear_resize(in[0], 7, 3));
         },
         {gc_randn({1, 2, 4, 5}, 132)});
  simple("max_pool_2d",
         [=](const std::vector<Tensor>& in) { return quad(max_pool_2d(in[0])); },
         {gc_randn({1, 2, 4, 4}, 133)});
  simple("block_max_pool",
         [=](const std::vector<Tensor>& in) {
           return quad(block_max_pool(in[0], 3, 3));
         },
         {gc_randn({1, 2, 7, 7}, 134)});

  // normalization
  simple("batch_norm_2d_train",
         [=](const std::vector<Tensor>& in) {
           Tensor rm = Tensor::zeros({3});
           Tensor rv = Tensor::full({3}, 1.0);
           return quad(batch_norm_2d(in[0], in[1], in[2], rm, rv, true));
         },
         {gc_randn({2, 3, 4, 4}, 135), gc_randn_nonzero({3}, 136, 0.5),
          gc_randn({3}, 137)});
  simple("batch_norm_2d_eval",
         [=](const std::vector<Tensor>& in) {
           Tensor rm = Tensor::from({3}, {0.1, -0.2, 0.3});
           Tensor rv = Tensor::from({3}, {1.1, 0.9, 1.4});
           return quad(batch_norm_2d(in[0], in[1], in[2], rm, rv, false));
         },
         {gc_randn({2, 3, 4, 4}, 138), gc_randn_nonzero({3}, 139, 0.5),
          gc_randn({3}, 140)});
  simple("layer_norm_channels",
         [=](const std::vector<Tensor>& in) {
           return quad(layer_norm_channels(in[0], in[1], in[2]));
         },
         {gc_randn({2, 3, 4, 4}, 141), gc_randn_nonzero({3}, 142, 0.5),
          gc_randn({3}, 143)});

  // key/value spatial projection, both modes
  {
    AttentionConfig pc;
    pc.heads = 1;
    pc.model_channels = 2;
    pc.reduced_size = 2;
    for (const KvProjection proj :
         {KvProjection::bilinear, KvProjection::maxpool}) {
      AttentionConfig cfg = pc;
      cfg.projection = proj;
      simple(std::string("project_kv_") + to_string(proj),
             [=](const std::vector<Tensor>& in) {
               auto [kr, vr] = project_kv(in[0], in[1], cfg);
               return add(quad(kr), quad(vr));
             },
             {gc_randn({1, 2, 4, 4}, 144), gc_randn({1, 2, 4, 4}, 145)});
    }
  }

  // standalone relative-position logits
  {
    AttentionConfig rc;
    rc.heads = 2;
    rc.model_channels = 4;
    rc.reduced_size = 2;
    simple("relative_logits",
           [=](const std::vector<Tensor>& in) {
             RelativePositionTable t;
             t.r_h = in[1];
             t.r_w = in[2];
             auto [sh, sw] = relative_logits(in[0], rc, t, 3, 3, 2, 2);
             return add(quad(sh), quad(sw));
           },
           {gc_randn({2, 9, 2}, 146), gc_randn({2, 3, 2}, 147, 0.5),
            gc_randn({2, 3, 2}, 148, 0.5)});
  }

  // attention variants, weights included
  cases.push_back(detail::mhsa_case("standard_mhsa", 0, 1100));
  cases.push_back(detail::mhsa_case("efficient_mhsa", 1, 1200));
  cases.push_back(detail::mhsa_case("efficient_mhsa_relpos", 2, 1300));
  cases.push_back(detail::mhsa_case("decoder_cross_mhsa", 3, 1400));

  // losses over logits
  {
    const auto labels = detail::gc_labels(2, 5, 5, 3, 149);
    simple("cross_entropy_with_logits",
           [=](const std::vector<Tensor>& in) {
             return cross_entropy_with_logits(in[0], labels);
           },
           {gc_randn({2, 3, 5, 5}, 150)});
    simple("dice_loss",
           [=](const std::vector<Tensor>& in) {
             return dice_loss(in[0], labels);
           },
           {gc_randn({2, 3, 5, 5}, 151)});
    simple("combined_loss",
           [=](const std::vector<Tensor>& in) {
             return combined_loss(in[0], labels);
           },
           {gc_randn({2, 3, 5, 5}, 152)});
  }

  // the whole network on a 32x32 map. eps 1e-6: with five levels of depth
  // the odds that some ReLU argument crosses zero inside a 1e-5 window are
  // high, and one crossing alone fakes O(1e-3) error on correct gradients.
  // The looser 1e-4 tolerance absorbs the extra FD rounding at 1e-6.
  {
    UTNetConfig cfg;
    cfg.num_classes = 2;
    cfg.widths = {4, 4, 4, 4, 4};
    cfg.attention.heads = 2;
    cfg.attention.reduced_size = 2;
    auto m = std::make_shared<UTNet>(build(cfg, 41));
    std::vector<Tensor*> ptrs;
    m->visit_params([&](const std::string&, Tensor& t) { ptrs.push_back(&t); });
    GradCheckCase c;
    c.name = "utnet_full_model";
    c.inputs.push_back(gc_randn({1, 1, 32, 32}, 42));
    for (Tensor* p : ptrs) c.inputs.push_back(*p);
    c.f = [m, ptrs](const std::vector<Tensor>& in) {
      for (size_t j = 0; j < ptrs.size(); ++j) *ptrs[j] = in[j + 1];
      const Tensor out = m->forward(in[0], true);
      return mean(mul(out, out));
    };
    c.tolerance = 1e-4;
    c.eps = 1e-6;
    cases.push_back(std::move(c));
  }

  return cases;
}

inline std::vector<GradCheckRow> run_gradcheck_cases(
    const std::vector<GradCheckCase>& cases) {
  std::vector<GradCheckRow> rows;
  rows.reserve(cases.size());
  for (const GradCheckCase& c : cases)
    rows.push_back(run_grad_check(c.name, c.f, c.inputs, c.tolerance, c.eps));
  return rows;
}

inline bool all_pass(const std::vector<GradCheckRow>& rows) {
  for (const GradCheckRow& r : rows)
    if (!r.pass) return false;
  return true;
}

inline std::string gradcheck_table(const std::vector<GradCheckRow>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %12s %12s  %s\n", "op",
                "max_rel_err", "tolerance", "result");
  out += line;
  size_t passed = 0;
  for (const GradCheckRow& r : rows) {
    std::snprintf(line, sizeof line, "%-28s %12.3e %12.1e  %s\n",
                  r.name.c_str(), r.max_rel_err, r.tolerance,
                  r.pass ? "PASS" : "FAIL");
    out += line;
    if (!r.pass) {
      std::snprintf(line, sizeof line,
                    "  worst at input %d element %lld: analytic %.6e vs "
                    "central-difference %.6e\n",
                    r.worst.input, static_cast<long long>(r.worst.element),
                    r.worst.analytic, r.worst.numeric);
      out += line;
    }
    passed += r.pass ? 1 : 0;
  }
  std::snprintf(line, sizeof line, "%zu/%zu passed\n", passed, rows.size());
  out += line;
  return out;
}

}  // namespace utnet
