#pragma once

#include <limits>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctpp/errors.hpp"
#include "ctpp/events.hpp"
#include "ctpp/model.hpp"
#include "ctpp/train.hpp"

namespace ctpp {

// File-backed run configuration: three nested sections (data, model, train)
// plus the output directory. Unknown keys are rejected; defaults printable
// via the print-config command so sweeps stay scriptable.
struct RunConfig {
  struct Data {
    std::string train_path;
    std::string val_path;
    std::string test_path;
    int num_marks = 1;
    int max_len = kDefaultMaxLen;
    double time_scale = 1.0;
    bool time_scale_auto = false;  // time_scale = 1/delta(train)
  } data;

  struct ModelSection {
    int d = 32;
    int d_h = 32;
    int layers = 1;
    std::vector<double> horizons = {3.0};  // per channel
    bool horizons_in_delta = true;         // multiples of the train-split mean interval
    double omega0 = 10.0;
    int siren_hidden = 3;
    int siren_width = 32;
    bool depthwise = false;
    int mixture_components = 16;
    bool pi_bias = false;
    bool dt_log1p = false;
  } model;

  struct TrainSection {
    std::string mode = "probabilistic";
    double beta = 0.3;
    double lr = 1e-3;
    double lr_decay = 0.5;
    int plateau_patience = 3;
    int early_stop_patience = 10;
    int max_epochs = 200;
    int batch_size = 64;
    uint64_t seed = 1;
    double grad_clip = 10.0;
    int threads = 1;
    bool score_first_event = false;
    bool freeze_encoder = false;
    bool ablate_local = false;  // force layers = 0
  } train;

  std::string out_dir;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  for (auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown config key '" + where + k + "'");
}

template <typename T>
inline void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["data"] = {{"train", c.data.train_path},
               {"val", c.data.val_path},
               {"test", c.data.test_path},
               {"num_marks", c.data.num_marks},
               {"max_len", c.data.max_len},
               {"time_scale", c.data.time_scale_auto ? nlohmann::json("auto")
                                                     : nlohmann::json(c.data.time_scale)}};
  j["model"] = {{"d", c.model.d},
                {"d_h", c.model.d_h},
                {"layers", c.model.layers},
                {"horizons", c.model.horizons},
                {"horizons_in_delta", c.model.horizons_in_delta},
                {"omega0", c.model.omega0},
                {"siren_hidden", c.model.siren_hidden},
                {"siren_width", c.model.siren_width},
                {"depthwise", c.model.depthwise},
                {"mixture_components", c.model.mixture_components},
                {"pi_bias", c.model.pi_bias},
                {"dt_log1p", c.model.dt_log1p}};
  j["train"] = {{"mode", c.train.mode},
                {"beta", c.train.beta},
                {"lr", c.train.lr},
                {"lr_decay", c.train.lr_decay},
                {"plateau_patience", c.train.plateau_patience},
                {"early_stop_patience", c.train.early_stop_patience},
                {"max_epochs", c.train.max_epochs},
                {"batch_size", c.train.batch_size},
                {"seed", c.train.seed},
                {"grad_clip", c.train.grad_clip},
                {"threads", c.train.threads},
                {"score_first_event", c.train.score_first_event},
                {"freeze_encoder", c.train.freeze_encoder},
                {"ablate_local", c.train.ablate_local}};
  j["out_dir"] = c.out_dir;
  return j;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  detail::check_keys(j, {"data", "model", "train", "out_dir"}, "");
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::check_keys(d, {"train", "val", "test", "num_marks", "max_len", "time_scale"},
                       "data.");
    detail::read_key(d, "train", c.data.train_path);
    detail::read_key(d, "val", c.data.val_path);
    detail::read_key(d, "test", c.data.test_path);
    detail::read_key(d, "num_marks", c.data.num_marks);
    detail::read_key(d, "max_len", c.data.max_len);
    if (d.contains("time_scale")) {
      const auto& ts = d.at("time_scale");
      if (ts.is_string()) {
        if (ts.get<std::string>() != "auto")
          throw ConfigError("data.time_scale must be a number or \"auto\"");
        c.data.time_scale_auto = true;
      } else if (ts.is_number()) {
        c.data.time_scale = ts.get<double>();
        if (!(c.data.time_scale > 0.0)) throw ConfigError("data.time_scale must be positive");
      } else {
        throw ConfigError("data.time_scale must be a number or \"auto\"");
      }
    }
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::check_keys(m,
                       {"d", "d_h", "layers", "horizons", "horizons_in_delta", "omega0",
                        "siren_hidden", "siren_width", "depthwise", "mixture_components",
                        "pi_bias", "dt_log1p"},
                       "model.");
    detail::read_key(m, "d", c.model.d);
    detail::read_key(m, "d_h", c.model.d_h);
    detail::read_key(m, "layers", c.model.layers);
    if (m.contains("horizons")) {
      c.model.horizons.clear();
      if (!m.at("horizons").is_array()) throw ConfigError("model.horizons must be an array");
      for (const auto& h : m.at("horizons")) {
        if (h.is_string()) {
          if (h.get<std::string>() != "inf")
            throw ConfigError("model.horizons entries must be numbers or \"inf\"");
          c.model.horizons.push_back(std::numeric_limits<double>::infinity());
        } else if (h.is_number()) {
          c.model.horizons.push_back(h.get<double>());
        } else {
          throw ConfigError("model.horizons entries must be numbers or \"inf\"");
        }
      }
    }
    detail::read_key(m, "horizons_in_delta", c.model.horizons_in_delta);
    detail::read_key(m, "omega0", c.model.omega0);
    detail::read_key(m, "siren_hidden", c.model.siren_hidden);
    detail::read_key(m, "siren_width", c.model.siren_width);
    detail::read_key(m, "depthwise", c.model.depthwise);
    detail::read_key(m, "mixture_components", c.model.mixture_components);
    detail::read_key(m, "pi_bias", c.model.pi_bias);
    detail::read_key(m, "dt_log1p", c.model.dt_log1p);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t,
                       {"mode", "beta", "lr", "lr_decay", "plateau_patience",
                        "early_stop_patience", "max_epochs", "batch_size", "seed", "grad_clip",
                        "threads", "score_first_event", "freeze_encoder", "ablate_local"},
                       "train.");
    detail::read_key(t, "mode", c.train.mode);
    mode_from_name(c.train.mode);  // validate early
    detail::read_key(t, "beta", c.train.beta);
    detail::read_key(t, "lr", c.train.lr);
    detail::read_key(t, "lr_decay", c.train.lr_decay);
    detail::read_key(t, "plateau_patience", c.train.plateau_patience);
    detail::read_key(t, "early_stop_patience", c.train.early_stop_patience);
    detail::read_key(t, "max_epochs", c.train.max_epochs);
    detail::read_key(t, "batch_size", c.train.batch_size);
    detail::read_key(t, "seed", c.train.seed);
    detail::read_key(t, "grad_clip", c.train.grad_clip);
    detail::read_key(t, "threads", c.train.threads);
    detail::read_key(t, "score_first_event", c.train.score_first_event);
    detail::read_key(t, "freeze_encoder", c.train.freeze_encoder);
    detail::read_key(t, "ablate_local", c.train.ablate_local);
  }
  detail::read_key(j, "out_dir", c.out_dir);
  return c;
}

inline RunConfig parse_run_config_text(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

// Fills in everything data-dependent: mark count, cumulative time scale and
// horizon multiples resolved against the train-split mean interval.
inline ModelConfig resolve_model_config(const RunConfig& c, const Dataset& data) {
  ModelConfig m;
  m.num_marks = data.num_marks;
  m.d = c.model.d;
  m.d_h = c.model.d_h;
  m.layers = c.train.ablate_local ? 0 : c.model.layers;
  m.horizons = c.model.horizons;
  if (c.model.horizons_in_delta && m.layers > 0) {
    const double delta = compute_stats(data).delta;
    for (double& h : m.horizons)
      if (std::isfinite(h)) h *= delta;
  }
  m.omega0 = c.model.omega0;
  m.siren_hidden = c.model.siren_hidden;
  m.siren_width = c.model.siren_width;
  m.depthwise = c.model.depthwise;
  m.mixture_components = c.model.mixture_components;
  m.pi_bias = c.model.pi_bias;
  m.dt_log1p = c.model.dt_log1p;
  m.mode = mode_from_name(c.train.mode);
  m.freeze_encoder = c.train.freeze_encoder;
  m.score_first_event = c.train.score_first_event;
  m.time_scale = data.time_scale;
  m.validate();
  return m;
}

inline TrainSettings resolve_train_settings(const RunConfig& c) {
  TrainSettings s;
  s.beta = c.train.beta;
  s.lr0 = c.train.lr;
  s.lr_decay = c.train.lr_decay;
  s.plateau_patience = c.train.plateau_patience;
  s.early_stop_patience = c.train.early_stop_patience;
  s.max_epochs = c.train.max_epochs;
  s.batch_size = c.train.batch_size;
  s.seed = c.train.seed;
  s.grad_clip = c.train.grad_clip;
  s.threads = c.train.threads;
  s.validate();
  return s;
}

}  // namespace ctpp
