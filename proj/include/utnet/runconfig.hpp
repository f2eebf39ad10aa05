#pragma once

#include <algorithm>
#include <initializer_list>
#include <string>

#include "utnet/train.hpp"

namespace utnet {

// === run configuration file ===
//
// One JSON document drives a whole run: model shape, training
// hyperparameters, and the data/output locations. The schema is versioned
// and strict — every key is optional and falls back to the compiled-in
// default, but a key the schema does not know is an error, not a silent
// no-op. That keeps typos ("epochz") from quietly training the wrong thing.
//
//   {
//     "spec_version": 1,            // required, must equal kSpecVersion
//     "model":  { ... },            // UTNetConfig fields
//     "train":  { ... },            // TrainConfig fields
//     "data_dir": "runs/data",
//     "out_dir":  "runs/train"
//   }

constexpr int kSpecVersion = 1;

struct RunConfig {
  UTNetConfig model;
  TrainConfig train;
  std::string data_dir;
  std::string out_dir;
};

namespace detail {

inline void check_known_keys(const nlohmann::json& j, const char* where,
                             std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError(std::string("config: '") + where +
                      "' must be a JSON object");
  std::string unknown;
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return item.key() == a; });
    if (!known) {
      if (!unknown.empty()) unknown += ", ";
      unknown += "'" + item.key() + "'";
    }
  }
  if (unknown.empty()) return;
  std::string known;
  for (const char* a : allowed) {
    if (!known.empty()) known += ", ";
    known += a;
  }
  throw ConfigError(std::string("config: unknown key(s) in ") + where + ": " +
                    unknown + " (known keys: " + known + ")");
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& rc) {
  return {{"spec_version", kSpecVersion},
          {"model", to_json(rc.model)},
          {"train", to_json(rc.train)},
          {"data_dir", rc.data_dir},
          {"out_dir", rc.out_dir}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::check_known_keys(
      j, "the top level", {"spec_version", "model", "train", "data_dir", "out_dir"});
  if (!j.contains("spec_version"))
    throw ConfigError("config: missing required key 'spec_version'");

  RunConfig rc;
  try {
    const int version = j.at("spec_version").get<int>();
    if (version != kSpecVersion)
      throw ConfigError("config: spec_version " + std::to_string(version) +
                        " is not supported (this build reads version " +
                        std::to_string(kSpecVersion) + ")");

    if (j.contains("model")) {
      const nlohmann::json& m = j.at("model");
      detail::check_known_keys(m, "'model'",
                               {"in_channels", "num_classes", "base_channels",
                                "levels", "widths", "attention_levels",
                                "attention", "baseline_mode"});
      UTNetConfig& c = rc.model;
      c.in_channels = m.value("in_channels", c.in_channels);
      c.num_classes = m.value("num_classes", c.num_classes);
      c.base_channels = m.value("base_channels", c.base_channels);
      c.levels = m.value("levels", c.levels);
      c.widths = m.value("widths", c.widths);
      c.attention_levels = m.value("attention_levels", c.attention_levels);
      c.baseline_mode = m.value("baseline_mode", c.baseline_mode);
      if (m.contains("attention")) {
        const nlohmann::json& a = m.at("attention");
        detail::check_known_keys(
            a, "'model.attention'",
            {"heads", "reduced_size", "projection", "use_relpos"});
        c.attention.heads = a.value("heads", c.attention.heads);
        c.attention.reduced_size =
            a.value("reduced_size", c.attention.reduced_size);
        c.attention.use_relpos = a.value("use_relpos", c.attention.use_relpos);
        if (a.contains("projection")) {
          const std::string p = a.at("projection").get<std::string>();
          if (p == "bilinear")
            c.attention.projection = KvProjection::bilinear;
          else if (p == "maxpool")
            c.attention.projection = KvProjection::maxpool;
          else
            throw ConfigError(
                "config: model.attention.projection must be 'bilinear' or "
                "'maxpool', got '" + p + "'");
        }
      }
      c.validate();
    }

    if (j.contains("train")) {
      detail::check_known_keys(
          j.at("train"), "'train'",
          {"epochs", "base_lr", "momentum", "weight_decay", "batch_size",
           "lr_gamma", "seed", "checkpoint_every", "val_count",
           "val_seed_base", "augment"});
      rc.train = train_config_from_json(j.at("train"));
    }

    rc.data_dir = j.value("data_dir", rc.data_dir);
    rc.out_dir = j.value("out_dir", rc.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  return run_config_from_json(load_json(path));
}

}  // namespace utnet
