#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctpp/decoder.hpp"
#include "ctpp/encoder.hpp"
#include "ctpp/errors.hpp"

namespace ctpp {

enum class Mode { probabilistic, prediction };

inline std::string mode_name(Mode m) {
  return m == Mode::probabilistic ? "probabilistic" : "prediction";
}
inline Mode mode_from_name(const std::string& s) {
  if (s == "probabilistic") return Mode::probabilistic;
  if (s == "prediction") return Mode::prediction;
  throw ConfigError("unknown mode '" + s + "'");
}

// Fully resolved model hyperparameters; horizons are absolute time units.
struct ModelConfig {
  int num_marks = 1;
  int d = 32;
  int d_h = 32;
  int layers = 1;  // N; 0 is the "without local encoder" ablation
  std::vector<double> horizons = {3.0};
  double omega0 = 10.0;
  int siren_hidden = 3;
  int siren_width = 32;
  bool depthwise = false;
  int mixture_components = 16;
  bool pi_bias = false;
  bool dt_log1p = false;
  Mode mode = Mode::probabilistic;
  bool freeze_encoder = false;   // hidden states pinned to zero (static baseline)
  bool score_first_event = false;
  double tau_floor = 1e-8;
  double time_scale = 1.0;  // scale already applied to the data; for reporting

  void validate() const {
    if (num_marks < 1) throw ConfigError("model: num_marks must be >= 1");
    if (d < 1 || d_h < 1) throw ConfigError("model: d and d_h must be >= 1");
    if (layers < 0) throw ConfigError("model: layers must be >= 0");
    if (layers > 0 && horizons.empty()) throw ConfigError("model: need channel horizons");
    for (double h : horizons)
      if (!(h > 0.0)) throw ConfigError("model: horizons must be positive");
    if (!(omega0 > 0.0)) throw ConfigError("model: omega0 must be positive");
    if (mixture_components < 1) throw ConfigError("model: mixture_components must be >= 1");
    if (siren_hidden < 1 || siren_width < 1) throw ConfigError("model: bad SIREN size");
    if (!(tau_floor > 0.0)) throw ConfigError("model: tau_floor must be positive");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["num_marks"] = num_marks;
    j["d"] = d;
    j["d_h"] = d_h;
    j["layers"] = layers;
    j["horizons"] = horizons;
    j["omega0"] = omega0;
    j["siren_hidden"] = siren_hidden;
    j["siren_width"] = siren_width;
    j["depthwise"] = depthwise;
    j["mixture_components"] = mixture_components;
    j["pi_bias"] = pi_bias;
    j["dt_log1p"] = dt_log1p;
    j["mode"] = mode_name(mode);
    j["freeze_encoder"] = freeze_encoder;
    j["score_first_event"] = score_first_event;
    j["tau_floor"] = tau_floor;
    j["time_scale"] = time_scale;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.num_marks = j.at("num_marks").get<int>();
    c.d = j.at("d").get<int>();
    c.d_h = j.at("d_h").get<int>();
    c.layers = j.at("layers").get<int>();
    c.horizons = j.at("horizons").get<std::vector<double>>();
    c.omega0 = j.at("omega0").get<double>();
    c.siren_hidden = j.at("siren_hidden").get<int>();
    c.siren_width = j.at("siren_width").get<int>();
    c.depthwise = j.at("depthwise").get<bool>();
    c.mixture_components = j.at("mixture_components").get<int>();
    c.pi_bias = j.at("pi_bias").get<bool>();
    c.dt_log1p = j.at("dt_log1p").get<bool>();
    c.mode = mode_from_name(j.at("mode").get<std::string>());
    c.freeze_encoder = j.at("freeze_encoder").get<bool>();
    c.score_first_event = j.at("score_first_event").get<bool>();
    c.tau_floor = j.at("tau_floor").get<double>();
    c.time_scale = j.at("time_scale").get<double>();
    c.validate();
    return c;
  }
};

// The CTPP model: mark embeddings, stacked continuous-convolution local
// encoders, a GRU global encoder, and the mode's decoder. Parameter
// registration order is fixed so identical (config, seed) builds are
// bit-identical.
class Model {
 public:
  ModelConfig cfg;
  nn::ParamStore params;
  nn::Parameter* embedding = nullptr;
  LocalStack stack;
  GlobalEncoder gru;
  DistDecoder dist;  // populated in probabilistic mode
  PredDecoder pred;  // populated in prediction mode

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  static std::unique_ptr<Model> build(const ModelConfig& cfg, uint64_t init_seed) {
    cfg.validate();
    auto m = std::unique_ptr<Model>(new Model());
    m->cfg = cfg;
    Rng rng = Rng::stream(init_seed, 0x696E6974ULL);
    m->embedding = &m->params.add("embed.table", cfg.num_marks, cfg.d);
    const double eb = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    for (double& x : m->embedding->value.v) x = rng.uniform(-eb, eb);

    LocalStackSpec ls;
    ls.d = cfg.d;
    ls.layers = cfg.layers;
    ls.horizons = cfg.horizons;
    ls.omega0 = cfg.omega0;
    ls.siren_hidden = cfg.siren_hidden;
    ls.siren_width = cfg.siren_width;
    ls.depthwise = cfg.depthwise;
    m->stack = make_local_stack(m->params, ls, rng);

    m->gru = make_global_encoder(m->params, cfg.d, cfg.d_h, cfg.dt_log1p, rng);

    if (cfg.mode == Mode::probabilistic)
      m->dist = make_dist_decoder(m->params, cfg.d_h, cfg.num_marks, cfg.mixture_components,
                                  cfg.pi_bias, rng);
    else
      m->pred = make_pred_decoder(m->params, cfg.d_h, cfg.num_marks, cfg.pi_bias, rng);
    return m;
  }

  // Hidden states for every (event, sequence) slot; row i*B+b is the state
  // after consuming event i of sequence b.
  nn::Var hidden_all(nn::Graph& g, const SeqBatch& batch) {
    if (cfg.freeze_encoder) return g.constant(nn::Array(batch.rows(), cfg.d_h));
    nn::Var E = embed_batch(g, *embedding, batch);
    nn::Var C = local_encode(g, E, batch, stack);
    return global_encode(g, C, batch, gru);
  }

  // Teacher-forced target enumeration. Each target event is scored from the
  // hidden state left by its predecessor; the first event is skipped unless
  // score_first_event is set (then it is scored from h_0 = 0).
  struct Forward {
    nn::Var H_tgt;                  // T x d_h
    std::vector<int> target_marks;  // T
    std::vector<double> target_taus;  // T, raw intervals (>= 0)
    int count = 0;
  };

  Forward encode_targets(nn::Graph& g, const SeqBatch& batch) {
    Forward f;
    nn::Var H = hidden_all(g, batch);
    int shift = 0;
    if (cfg.score_first_event) {
      H = g.concat_rows({g.constant(nn::Array(batch.B, cfg.d_h)), H});
      shift = 1;
    }
    const int first = cfg.score_first_event ? 0 : 1;
    std::vector<int> rows;
    for (int b = 0; b < batch.B; ++b) {
      for (int e = first; e < batch.lens[b]; ++e) {
        rows.push_back((e - 1 + shift) * batch.B + b);
        f.target_marks.push_back(batch.marks[batch.row(e, b)]);
        f.target_taus.push_back(batch.dts[batch.row(e, b)]);
      }
    }
    f.count = static_cast<int>(rows.size());
    if (f.count > 0) f.H_tgt = g.gather_rows(H, std::move(rows));
    return f;
  }

 private:
  Model() = default;
};

// ---- checkpoint archive ----

inline constexpr char kCkptMagic[8] = {'C', 'T', 'P', 'P', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kCkptVersion = 1;

namespace detail {
inline void write_u32(std::ostream& out, uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                        static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
inline void write_f64(std::ostream& out, double x) {
  uint64_t u;
  std::memcpy(&u, &x, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}
inline double read_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<uint64_t>(b[i]) << (8 * i);
  double x;
  std::memcpy(&x, &u, 8);
  return x;
}
}  // namespace detail

inline void save_model(const Model& m, std::ostream& out) {
  out.write(kCkptMagic, 8);
  detail::write_u32(out, kCkptVersion);
  const std::string cfg = m.cfg.to_json().dump();
  detail::write_u32(out, static_cast<uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::write_u32(out, static_cast<uint32_t>(m.params.count()));
  for (size_t i = 0; i < m.params.count(); ++i) {
    const nn::Parameter& p = m.params.item(i);
    detail::write_u32(out, static_cast<uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    detail::write_u32(out, static_cast<uint32_t>(p.value.rows));
    detail::write_u32(out, static_cast<uint32_t>(p.value.cols));
    for (double x : p.value.v) detail::write_f64(out, x);
  }
}

inline void save_model(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArgumentError("cannot open checkpoint for writing: " + path);
  save_model(m, out);
}

inline std::unique_ptr<Model> load_model(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw ParseError("not a checkpoint file (bad magic)");
  const uint32_t version = detail::read_u32(in);
  if (version != kCkptVersion)
    throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const uint32_t cfg_len = detail::read_u32(in);
  std::string cfg_str(cfg_len, '\0');
  in.read(cfg_str.data(), cfg_len);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cfg_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }
  auto m = Model::build(ModelConfig::from_json(j), /*init_seed=*/0);
  const uint32_t count = detail::read_u32(in);
  if (count != m->params.count()) throw ParseError("checkpoint parameter count mismatch");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = detail::read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const uint32_t rows = detail::read_u32(in);
    const uint32_t cols = detail::read_u32(in);
    nn::Parameter* p = m->params.find(name);
    if (!p) throw ParseError("checkpoint has unknown parameter '" + name + "'");
    if (p->value.rows != static_cast<int>(rows) || p->value.cols != static_cast<int>(cols))
      throw ParseError("checkpoint shape mismatch for '" + name + "'");
    for (double& x : p->value.v) x = detail::read_f64(in);
  }
  if (!in) throw ParseError("truncated checkpoint");
  return m;
}

inline std::unique_ptr<Model> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open checkpoint: " + path);
  return load_model(in);
}

}  // namespace ctpp
