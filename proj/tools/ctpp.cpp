// ctpp: synthesize event data, train and evaluate CTPP models, and dump
// diagnostics. Exit codes: 0 success, 1 check failure, 2 usage/config
// error, 3 training divergence.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctpp/config.hpp"
#include "ctpp/events.hpp"
#include "ctpp/model.hpp"
#include "ctpp/synth.hpp"
#include "ctpp/train.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

std::vector<double> parse_probs(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ctpp::ConfigError("bad probability '" + item + "'");
    }
  }
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ctpp::ArgumentError("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ctpp::ArgumentError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string default_out_dir() {
  const char* env = std::getenv("CTPP_OUT_DIR");
  return env && *env ? std::string(env) : std::string("ctpp_out");
}

struct SynthArgs {
  std::string process;
  double rate = 1.0;
  double mu = 0.5, alpha = 0.0, decay = 1.0;
  double log_mean = 0.0, log_std = 1.0;
  double horizon = 0.0;
  long len = 0;
  int num_marks = 1;
  std::string mark_probs_csv;
  long n_seqs = 100;
  uint64_t seed = 1;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  std::vector<double> probs;
  if (!a.mark_probs_csv.empty())
    probs = parse_probs(a.mark_probs_csv);
  else
    probs.assign(a.num_marks, 1.0 / a.num_marks);

  std::vector<ctpp::EventSequence> seqs;
  if (a.process == "poisson") {
    ctpp::PoissonSpec spec;
    spec.rate = a.rate;
    spec.mark_probs = probs;
    spec.horizon = a.horizon;
    spec.count = a.len;
    seqs = ctpp::sample_many(spec, a.seed, a.n_seqs,
                             [](const ctpp::PoissonSpec& s, uint64_t sd) {
                               return ctpp::sample_poisson(s, sd);
                             });
  } else if (a.process == "hawkes") {
    ctpp::HawkesSpec spec;
    spec.mu = a.mu;
    spec.alpha = a.alpha;
    spec.decay = a.decay;
    spec.horizon = a.horizon;
    seqs = ctpp::sample_many(spec, a.seed, a.n_seqs,
                             [](const ctpp::HawkesSpec& s, uint64_t sd) {
                               return ctpp::sample_hawkes(s, sd);
                             });
  } else if (a.process == "renewal") {
    ctpp::RenewalSpec spec;
    spec.log_mean = a.log_mean;
    spec.log_std = a.log_std;
    spec.count = a.len;
    spec.mark_probs = probs;
    seqs = ctpp::sample_many(spec, a.seed, a.n_seqs,
                             [](const ctpp::RenewalSpec& s, uint64_t sd) {
                               return ctpp::sample_lognormal_renewal(s, sd);
                             });
  } else {
    throw ctpp::ConfigError("unknown process '" + a.process + "'");
  }

  if (a.out.empty()) throw ctpp::ConfigError("synth: --out is required");
  ctpp::save_sequences(a.out, seqs);

  long events = 0;
  for (const auto& s : seqs) events += static_cast<long>(s.size());
  std::cout << "wrote " << seqs.size() << " sequences (" << events << " events) to " << a.out
            << "\n";
  try {
    ctpp::DatasetStats st = ctpp::compute_stats(std::span<const ctpp::EventSequence>(seqs));
    std::printf("delta = %.6g  min = %.6g  max = %.6g\n", st.delta, st.min_interval,
                st.max_interval);
  } catch (const ctpp::ValidationError&) {
    std::cout << "delta = n/a (no intervals)\n";
  }
  return kExitOk;
}

int cmd_stats(const std::string& data_path, int num_marks, int max_len) {
  auto seqs = ctpp::load_sequences(data_path, num_marks, max_len);
  if (seqs.empty()) throw ctpp::ValidationError("no sequences in " + data_path);
  ctpp::DatasetStats st = ctpp::compute_stats(std::span<const ctpp::EventSequence>(seqs));
  long events = 0;
  for (const auto& s : seqs) events += static_cast<long>(s.size());
  std::printf("sequences = %zu\nevents = %ld\nintervals = %ld\n", seqs.size(), events,
              st.num_intervals);
  std::printf("delta = %.17g\nmin_interval = %.17g\nmax_interval = %.17g\n", st.delta,
              st.min_interval, st.max_interval);
  return kExitOk;
}

ctpp::Dataset load_from_config(const ctpp::RunConfig& cfg) {
  if (cfg.data.train_path.empty() || cfg.data.val_path.empty() || cfg.data.test_path.empty())
    throw ctpp::ConfigError("config must set data.train, data.val and data.test");
  ctpp::Dataset data = ctpp::load_dataset(cfg.data.train_path, cfg.data.val_path,
                                          cfg.data.test_path, cfg.data.num_marks,
                                          cfg.data.max_len);
  double s = cfg.data.time_scale;
  if (cfg.data.time_scale_auto) s = 1.0 / ctpp::compute_stats(data).delta;
  if (s != 1.0) data = ctpp::rescale_times(std::move(data), s);
  return data;
}

int cmd_train(const std::string& config_path, const std::string& mode_override,
              long seed_override, const std::string& out_override, bool ablate_local,
              int threads_override) {
  ctpp::RunConfig cfg = ctpp::parse_run_config_text(read_text(config_path));
  if (!mode_override.empty()) cfg.train.mode = mode_override;
  if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (ablate_local) cfg.train.ablate_local = true;
  if (threads_override > 0) cfg.train.threads = threads_override;
  if (cfg.out_dir.empty()) cfg.out_dir = default_out_dir();

  ctpp::Dataset data = load_from_config(cfg);
  ctpp::ModelConfig mc = ctpp::resolve_model_config(cfg, data);
  ctpp::TrainSettings ts = ctpp::resolve_train_settings(cfg);
  auto model = ctpp::Model::build(mc, ts.seed);

  std::cout << "training " << ctpp::mode_name(mc.mode) << " model: " << model->params.count()
            << " tensors, " << model->params.num_scalars() << " scalars, "
            << data.train.size() << " train sequences\n";

  ctpp::TrainResult result = ctpp::train_model(*model, data.train, data.validation, ts);

  fs::create_directories(cfg.out_dir);
  const std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.ctpp").string();
  ctpp::save_model(*model, ckpt_path);
  write_text((fs::path(cfg.out_dir) / "history.csv").string(), ctpp::history_csv(result.history));
  // Resolved snapshot: overrides and the actual numeric time scale applied.
  ctpp::RunConfig resolved = cfg;
  resolved.data.time_scale = data.time_scale;
  resolved.data.time_scale_auto = false;
  write_text((fs::path(cfg.out_dir) / "config.json").string(),
             ctpp::run_config_to_json(resolved).dump(2) + "\n");

  if (result.diverged) {
    std::cerr << "training diverged (non-finite loss); best checkpoint kept at epoch "
              << result.best_epoch << "\n";
    return kExitDiverged;
  }
  std::printf("best epoch %d, validation loss %.6f, %zu epochs run\n", result.best_epoch,
              result.best_val, result.history.size());
  std::cout << "checkpoint: " << ckpt_path << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& config_path, const std::string& split, int max_len,
             const std::string& out_path) {
  auto model = ctpp::load_model(ckpt_path);
  std::vector<ctpp::EventSequence> seqs;
  if (!data_path.empty()) {
    seqs = ctpp::load_sequences(data_path, model->cfg.num_marks, max_len);
  } else if (!config_path.empty()) {
    ctpp::RunConfig cfg = ctpp::parse_run_config_text(read_text(config_path));
    std::string path;
    if (split == "train")
      path = cfg.data.train_path;
    else if (split == "val")
      path = cfg.data.val_path;
    else if (split == "test")
      path = cfg.data.test_path;
    else
      throw ctpp::ConfigError("--split must be train, val or test");
    seqs = ctpp::load_sequences(path, model->cfg.num_marks, cfg.data.max_len);
  } else {
    throw ctpp::ConfigError("eval: need --data or --config with --split");
  }
  // Data files hold raw times; apply the scale the checkpoint was trained at.
  if (model->cfg.time_scale != 1.0)
    for (auto& s : seqs)
      for (auto& e : s.events) e.time *= model->cfg.time_scale;

  ctpp::Metrics metrics = ctpp::evaluate(*model, seqs);
  std::cout << metrics.to_text();
  std::string dest = out_path;
  if (dest.empty()) {
    const std::string tag = data_path.empty() ? split : "data";
    dest = (fs::path(ckpt_path).parent_path() / ("metrics_" + tag + ".json")).string();
  }
  write_text(dest, metrics.to_json().dump(2) + "\n");
  std::cout << "metrics: " << dest << "\n";
  return kExitOk;
}

int cmd_gradcheck(const std::string& config_path, int num_seeds, int len, bool inject_error) {
  // Tiny-instance limits keep the finite-difference sweep fast.
  ctpp::ModelConfig mc;
  mc.num_marks = 3;
  mc.d = 4;
  mc.d_h = 8;
  mc.layers = 2;
  mc.horizons = {1.0, 2.5};
  mc.omega0 = 1.0;
  mc.siren_hidden = 2;
  mc.siren_width = 6;
  mc.mixture_components = 3;
  if (!config_path.empty()) {
    ctpp::RunConfig cfg = ctpp::parse_run_config_text(read_text(config_path));
    mc.d = cfg.model.d;
    mc.d_h = cfg.model.d_h;
    mc.layers = cfg.model.layers;
    mc.horizons = cfg.model.horizons;
    mc.omega0 = cfg.model.omega0;
    mc.siren_hidden = cfg.model.siren_hidden;
    mc.siren_width = cfg.model.siren_width;
    mc.depthwise = cfg.model.depthwise;
    mc.mixture_components = cfg.model.mixture_components;
    mc.pi_bias = cfg.model.pi_bias;
    mc.dt_log1p = cfg.model.dt_log1p;
  }
  if (mc.d > 8) throw ctpp::ConfigError("gradcheck: d must be <= 8");
  if (len > 6 || len < 2) throw ctpp::ConfigError("gradcheck: sequence length must be in [2, 6]");

  const double tol = 1e-4;
  bool ok = true;
  for (ctpp::Mode mode : {ctpp::Mode::probabilistic, ctpp::Mode::prediction}) {
    mc.mode = mode;
    for (int s = 0; s < num_seeds; ++s) {
      auto model = ctpp::Model::build(mc, 100 + s);
      ctpp::Rng rng = ctpp::Rng::stream(500 + s, 0x67636B64ULL);
      ctpp::EventSequence seq;
      double t = 0.0;
      for (int i = 0; i < len; ++i) {
        t += rng.exponential(1.0);
        seq.events.push_back({rng.uniform_int(mc.num_marks), t});
      }
      const ctpp::EventSequence* ptr = &seq;
      std::span<const ctpp::EventSequence* const> seqs(&ptr, 1);
      auto loss = [&](bool with_grad) {
        double v = ctpp::model_loss(*model, seqs, 0.3, with_grad);
        if (with_grad && inject_error) model->params.item(0).grad.v[0] += 1.0;
        return v;
      };
      ctpp::nn::GradCheckReport rep = ctpp::nn::grad_check(loss, model->params, 1e-5);
      std::printf("%-14s seed %d  max_rel_err %.3e  (worst: %s)\n",
                  ctpp::mode_name(mode).c_str(), s, rep.max_rel_err, rep.worst_param.c_str());
      for (const auto& [group, err] : rep.group_max)
        std::printf("    %-8s %.3e\n", group.c_str(), err);
      if (!(rep.max_rel_err < tol)) {
        ok = false;
        std::printf("    FAILED (tolerance %.1e)\n", tol);
      }
    }
  }
  std::cout << (ok ? "gradcheck PASS\n" : "gradcheck FAIL\n");
  return ok ? kExitOk : kExitCheckFailed;
}

int cmd_dump_kernel(const std::string& ckpt_path, int grid, double max_tau,
                    const std::string& out_path) {
  auto model = ctpp::load_model(ckpt_path);
  if (model->cfg.layers == 0 || model->stack.layers.empty())
    throw ctpp::ConfigError("checkpoint has no convolution kernels (ablated local encoder)");
  if (grid < 2) throw ctpp::ConfigError("--grid must be >= 2");

  std::ostringstream csv;
  csv << "layer,channel,tau,row,col,value\n";
  char buf[128];
  for (size_t l = 0; l < model->stack.layers.size(); ++l) {
    const auto& layer = model->stack.layers[l];
    for (size_t c = 0; c < layer.channels.size(); ++c) {
      const auto& ch = layer.channels[c];
      double span = ch.horizon;
      if (!std::isfinite(span)) {
        if (!(max_tau > 0.0))
          throw ctpp::ConfigError("channel has an infinite horizon; pass --max-tau");
        span = max_tau;
      }
      const int d = model->cfg.d;
      for (int k = 0; k < grid; ++k) {
        const double tau = span * static_cast<double>(k) / static_cast<double>(grid - 1);
        std::vector<double> w = ctpp::kernel_eval(ch.kernel, tau);
        for (size_t i = 0; i < w.size(); ++i) {
          const int row = model->cfg.depthwise ? static_cast<int>(i) : static_cast<int>(i) / d;
          const int col = model->cfg.depthwise ? 0 : static_cast<int>(i) % d;
          std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%d,%d,%.17g\n", l, c, tau, row, col,
                        w[i]);
          csv << buf;
        }
      }
    }
  }
  if (out_path.empty())
    std::cout << csv.str();
  else
    write_text(out_path, csv.str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional temporal point process toolkit"};
  app.require_subcommand(1);

  // synth
  SynthArgs sa;
  CLI::App* synth = app.add_subcommand("synth", "sample synthetic event datasets");
  synth->add_option("process", sa.process, "poisson | hawkes | renewal")->required();
  synth->add_option("--rate", sa.rate, "Poisson rate");
  synth->add_option("--mu", sa.mu, "Hawkes base rate");
  synth->add_option("--alpha", sa.alpha, "Hawkes excitation");
  synth->add_option("--decay", sa.decay, "Hawkes decay rate");
  synth->add_option("--log-mean", sa.log_mean, "renewal log-mean");
  synth->add_option("--log-std", sa.log_std, "renewal log-std");
  synth->add_option("--horizon", sa.horizon, "stop time T");
  synth->add_option("--len", sa.len, "events per sequence (poisson/renewal)");
  synth->add_option("--num-marks", sa.num_marks, "mark count (uniform marks)");
  synth->add_option("--mark-probs", sa.mark_probs_csv, "comma-separated mark probabilities");
  synth->add_option("--n-seqs", sa.n_seqs, "number of sequences");
  synth->add_option("--seed", sa.seed, "random seed");
  synth->add_option("--out", sa.out, "output JSONL path")->required();

  // stats
  std::string stats_data;
  int stats_marks = 1;
  int stats_max_len = ctpp::kDefaultMaxLen;
  CLI::App* stats = app.add_subcommand("stats", "interval statistics of a JSONL dataset");
  stats->add_option("--data", stats_data)->required();
  stats->add_option("--num-marks", stats_marks);
  stats->add_option("--max-len", stats_max_len);

  // train
  std::string train_config, train_mode, train_out;
  long train_seed = -1;
  int train_threads = 0;
  bool train_ablate = false;
  CLI::App* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", train_config)->required();
  train->add_option("--mode", train_mode, "probabilistic | prediction");
  train->add_option("--seed", train_seed);
  train->add_option("--out", train_out, "output directory");
  train->add_option("--threads", train_threads);
  train->add_flag("--ablate-local", train_ablate, "force layers = 0 (no local encoder)");

  // eval
  std::string eval_ckpt, eval_data, eval_config, eval_split = "test", eval_out;
  int eval_max_len = ctpp::kDefaultMaxLen;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data, "JSONL file to evaluate");
  eval->add_option("--config", eval_config, "run config supplying split paths");
  eval->add_option("--split", eval_split, "train | val | test (with --config)");
  eval->add_option("--max-len", eval_max_len);
  eval->add_option("--out", eval_out, "write metrics JSON here");

  // gradcheck
  std::string gc_config;
  int gc_seeds = 5, gc_len = 5;
  bool gc_inject = false;
  CLI::App* gradcheck = app.add_subcommand("gradcheck",
                                           "finite-difference check of all model gradients");
  gradcheck->add_option("--config", gc_config);
  gradcheck->add_option("--seeds", gc_seeds);
  gradcheck->add_option("--len", gc_len, "test sequence length (<= 6)");
  gradcheck->add_flag("--inject-grad-error", gc_inject)->group("");  // test fixture

  // dump-kernel
  std::string dk_ckpt, dk_out;
  int dk_grid = 100;
  double dk_max_tau = 0.0;
  CLI::App* dump = app.add_subcommand("dump-kernel", "sample kernels on a grid as CSV");
  dump->add_option("--checkpoint", dk_ckpt)->required();
  dump->add_option("--grid", dk_grid, "number of tau samples per channel");
  dump->add_option("--max-tau", dk_max_tau, "grid end for infinite horizons");
  dump->add_option("--out", dk_out, "CSV path (default stdout)");

  CLI::App* print_config = app.add_subcommand("print-config", "print the default config JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(sa);
    if (stats->parsed()) return cmd_stats(stats_data, stats_marks, stats_max_len);
    if (train->parsed())
      return cmd_train(train_config, train_mode, train_seed, train_out, train_ablate,
                       train_threads);
    if (eval->parsed())
      return cmd_eval(eval_ckpt, eval_data, eval_config, eval_split, eval_max_len, eval_out);
    if (gradcheck->parsed()) return cmd_gradcheck(gc_config, gc_seeds, gc_len, gc_inject);
    if (dump->parsed()) return cmd_dump_kernel(dk_ckpt, dk_grid, dk_max_tau, dk_out);
    if (print_config->parsed()) {
      std::cout << ctpp::run_config_to_json(ctpp::RunConfig{}).dump(2) << "\n";
      return kExitOk;
    }
  } catch (const ctpp::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
