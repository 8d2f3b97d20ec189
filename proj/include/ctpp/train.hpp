#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <limits>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ctpp/events.hpp"
#include "ctpp/model.hpp"

namespace ctpp {

// Per-event evaluation metrics. In probabilistic mode the NLL fields are
// set and nll = mark_nll + time_nll (mark and time are independent); in
// prediction mode accuracy (%) and rmse are set.
struct Metrics {
  std::string mode;
  long events = 0;
  double nll = 0.0;
  double mark_nll = 0.0;
  double time_nll = 0.0;
  double accuracy = 0.0;
  double rmse = 0.0;
  double time_scale = 1.0;
  // Add this to time_nll (and nll) to express them in the unscaled time
  // units: change of variables contributes -ln(s) per event.
  double time_nll_correction = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mode"] = mode;
    j["events"] = events;
    j["time_scale"] = time_scale;
    j["time_nll_correction"] = time_nll_correction;
    if (mode == "probabilistic") {
      j["nll"] = nll;
      j["mark_nll"] = mark_nll;
      j["time_nll"] = time_nll;
    } else {
      j["accuracy"] = accuracy;
      j["rmse"] = rmse;
    }
    return j;
  }

  std::string to_text() const {
    const nlohmann::json j = to_json();
    std::string s;
    for (const auto& [k, v] : j.items()) s += k + " = " + v.dump() + "\n";
    return s;
  }
};

namespace detail {

struct LossParts {
  nn::Var loss;     // scalar, (mark_sum + weight*time_sum) / divisor
  nn::Var mark_sum; // mark NLL sum (prob) or cross-entropy sum (pred)
  nn::Var time_sum; // time NLL sum (prob) or squared-error sum (pred)
  int targets = 0;
};

// Probabilistic objective on one batch: the negative log-likelihood of
// target events, mark and time terms summed, divided by `divisor`.
inline LossParts build_prob_loss(nn::Graph& g, Model& m, const SeqBatch& batch, double divisor) {
  Model::Forward f = m.encode_targets(g, batch);
  LossParts out;
  out.targets = f.count;
  if (f.count == 0) return out;
  nn::Var logp = mark_log_probs_g(g, f.H_tgt, *m.dist.Wpi, m.dist.bpi);
  out.mark_sum = g.pick_nll(logp, f.target_marks);
  std::vector<double> taus = f.target_taus;
  for (double& t : taus) t = std::max(t, m.cfg.tau_floor);
  MixtureHeads heads = mixture_heads_g(g, f.H_tgt, m.dist);
  out.time_sum = g.scale(g.sum(lognormmix_logpdf_g(g, heads, taus)), -1.0);
  out.loss = g.scale(g.add(out.mark_sum, out.time_sum), 1.0 / divisor);
  return out;
}

// Prediction objective: cross-entropy plus beta * squared interval error.
inline LossParts build_pred_loss(nn::Graph& g, Model& m, const SeqBatch& batch, double beta,
                                 double divisor) {
  Model::Forward f = m.encode_targets(g, batch);
  LossParts out;
  out.targets = f.count;
  if (f.count == 0) return out;
  nn::Var logp = mark_log_probs_g(g, f.H_tgt, *m.pred.Wpi, m.pred.bpi);
  out.mark_sum = g.pick_nll(logp, f.target_marks);
  nn::Var pred_dt = g.exp_op(nn::linear(g, f.H_tgt, g.param(*m.pred.Wt), g.param(*m.pred.bt)));
  nn::Var err = g.sub(pred_dt, g.constant(nn::Array::col_vec(f.target_taus)));
  out.time_sum = g.sum(g.mul(err, err));
  out.loss = g.add(g.scale(out.mark_sum, 1.0 / divisor), g.scale(out.time_sum, beta / divisor));
  return out;
}

inline LossParts build_loss(nn::Graph& g, Model& m, const SeqBatch& batch, double beta,
                            double divisor) {
  return m.cfg.mode == Mode::probabilistic ? build_prob_loss(g, m, batch, divisor)
                                           : build_pred_loss(g, m, batch, beta, divisor);
}

inline int count_targets(const EventSequence& s, bool score_first) {
  return std::max<int>(0, static_cast<int>(s.size()) - (score_first ? 0 : 1));
}

}  // namespace detail

// Negative mean per-event log-likelihood of a batch of sequences
// (probabilistic mode). Forward only.
inline double nll_loss(Model& m, std::span<const EventSequence* const> seqs) {
  if (m.cfg.mode != Mode::probabilistic) throw StateError("nll_loss: model is not probabilistic");
  SeqBatch batch = make_batch(seqs);
  long T = 0;
  for (const EventSequence* s : seqs) T += detail::count_targets(*s, m.cfg.score_first_event);
  if (T == 0) throw ValidationError("nll_loss: batch has no target events");
  nn::Graph g(false);
  return g.scalar(detail::build_prob_loss(g, m, batch, static_cast<double>(T)).loss);
}

// Prediction loss L_type + beta * L_time as a per-event mean. Forward only.
inline double pred_loss(Model& m, std::span<const EventSequence* const> seqs, double beta) {
  if (m.cfg.mode != Mode::prediction) throw StateError("pred_loss: model is not prediction");
  if (beta < 0.0) throw ArgumentError("pred_loss: beta must be >= 0");
  SeqBatch batch = make_batch(seqs);
  long T = 0;
  for (const EventSequence* s : seqs) T += detail::count_targets(*s, m.cfg.score_first_event);
  if (T == 0) throw ValidationError("pred_loss: batch has no target events");
  nn::Graph g(false);
  return g.scalar(detail::build_pred_loss(g, m, batch, beta, static_cast<double>(T)).loss);
}

// The mode's own loss over a batch as a per-event mean; with_grad also runs
// backward and accumulates parameter gradients. Used by gradient checks.
inline double model_loss(Model& m, std::span<const EventSequence* const> seqs, double beta,
                         bool with_grad) {
  SeqBatch batch = make_batch(seqs);
  long T = 0;
  for (const EventSequence* s : seqs) T += detail::count_targets(*s, m.cfg.score_first_event);
  if (T == 0) throw ValidationError("model_loss: batch has no target events");
  nn::Graph g(with_grad);
  detail::LossParts parts = detail::build_loss(g, m, batch, beta, static_cast<double>(T));
  const double v = g.scalar(parts.loss);
  if (with_grad) g.backward(parts.loss);
  return v;
}

// Per-event metrics over a split. Probabilistic checkpoints report NLLs,
// prediction checkpoints accuracy and interval RMSE (teacher forcing).
inline Metrics evaluate(Model& m, std::span<const EventSequence> split, int batch_size = 64) {
  if (split.empty()) throw ValidationError("evaluate: empty split");
  Metrics out;
  out.mode = mode_name(m.cfg.mode);
  out.time_scale = m.cfg.time_scale;
  out.time_nll_correction = -std::log(m.cfg.time_scale);
  double mark_sum = 0.0, time_sum = 0.0, se_sum = 0.0;
  long correct = 0, total = 0;
  for (size_t start = 0; start < split.size(); start += batch_size) {
    const size_t stop = std::min(split.size(), start + batch_size);
    std::vector<const EventSequence*> ptrs;
    ptrs.reserve(stop - start);
    for (size_t i = start; i < stop; ++i) ptrs.push_back(&split[i]);
    SeqBatch batch = make_batch(ptrs);
    nn::Graph g(false);
    Model::Forward f = m.encode_targets(g, batch);
    if (f.count == 0) continue;
    total += f.count;
    if (m.cfg.mode == Mode::probabilistic) {
      nn::Var logp = mark_log_probs_g(g, f.H_tgt, *m.dist.Wpi, m.dist.bpi);
      mark_sum -= [&] {
        double s = 0.0;
        const nn::Array& L = g.val(logp);
        for (int r = 0; r < L.rows; ++r) s += L.at(r, f.target_marks[r]);
        return s;
      }();
      std::vector<double> taus = f.target_taus;
      for (double& t : taus) t = std::max(t, m.cfg.tau_floor);
      MixtureHeads heads = mixture_heads_g(g, f.H_tgt, m.dist);
      const nn::Array& lp = g.val(lognormmix_logpdf_g(g, heads, taus));
      for (double x : lp.v) time_sum -= x;
    } else {
      nn::Var logits = mark_logits_g(g, f.H_tgt, *m.pred.Wpi, m.pred.bpi);
      const nn::Array& L = g.val(logits);
      for (int r = 0; r < L.rows; ++r) {
        int best = 0;
        for (int c = 1; c < L.cols; ++c)
          if (L.at(r, c) > L.at(r, best)) best = c;
        if (best == f.target_marks[r]) ++correct;
      }
      nn::Var s = nn::linear(g, f.H_tgt, g.param(*m.pred.Wt), g.param(*m.pred.bt));
      const nn::Array& S = g.val(s);
      for (int r = 0; r < S.rows; ++r) {
        const double e = std::exp(S.at(r, 0)) - f.target_taus[r];
        se_sum += e * e;
      }
    }
  }
  if (total == 0) throw ValidationError("evaluate: split has no target events");
  out.events = total;
  if (m.cfg.mode == Mode::probabilistic) {
    out.mark_nll = mark_sum / static_cast<double>(total);
    out.time_nll = time_sum / static_cast<double>(total);
    out.nll = out.mark_nll + out.time_nll;
  } else {
    out.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    out.rmse = std::sqrt(se_sum / static_cast<double>(total));
  }
  return out;
}

struct TrainSettings {
  double beta = 0.3;  // prediction-loss time weight
  double lr0 = 1e-3;
  double lr_decay = 0.5;
  int plateau_patience = 3;
  int early_stop_patience = 10;
  int max_epochs = 200;
  int batch_size = 64;
  uint64_t seed = 1;
  double grad_clip = 10.0;
  int threads = 1;

  void validate() const {
    if (beta < 0.0) throw ConfigError("train: beta must be >= 0");
    if (!(lr0 > 0.0)) throw ConfigError("train: lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train: lr_decay in (0, 1]");
    if (plateau_patience < 1 || early_stop_patience < 1)
      throw ConfigError("train: patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be positive");
  }
};

struct HistoryRow {
  int epoch;
  double train_loss;
  double val_loss;
  double lr;
};

struct TrainResult {
  std::vector<HistoryRow> history;
  int best_epoch = 0;
  double best_val = 0.0;
  bool diverged = false;
};

namespace detail {

// Mean per-event loss of a full split, grad-free.
inline double split_loss(Model& m, std::span<const EventSequence> split, double beta,
                         int batch_size) {
  double sum = 0.0;
  long total = 0;
  for (size_t start = 0; start < split.size(); start += batch_size) {
    const size_t stop = std::min(split.size(), start + batch_size);
    std::vector<const EventSequence*> ptrs;
    for (size_t i = start; i < stop; ++i) ptrs.push_back(&split[i]);
    SeqBatch batch = make_batch(ptrs);
    nn::Graph g(false);
    LossParts parts = build_loss(g, m, batch, beta, 1.0);
    if (parts.targets == 0) continue;
    sum += g.scalar(parts.loss);
    total += parts.targets;
  }
  if (total == 0) throw ValidationError("split has no target events");
  return sum / static_cast<double>(total);
}

}  // namespace detail

// Adam + plateau lr decay + early stopping. The model is left holding the
// best-validation parameters; history has one row per completed epoch.
// Deterministic given (model init, data, settings): shuffling and sharding
// are seeded, and shard gradients are reduced in a fixed order.
inline TrainResult train_model(Model& m, std::span<const EventSequence> train,
                               std::span<const EventSequence> val, const TrainSettings& cfg) {
  cfg.validate();
  if (train.empty() || val.empty())
    throw ValidationError("train_model: need non-empty train and validation splits");

  nn::Adam opt(m.params);
  TrainResult result;
  double lr = cfg.lr0;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<nn::Array> best_params = m.params.snapshot_values();
  int best_epoch = 0, since_improve = 0, plateau = 0;

  std::vector<int> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  const int threads = cfg.threads;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng = Rng::stream(cfg.seed, 0x65706F63ULL + static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double epoch_sum = 0.0;
    long epoch_targets = 0;
    bool finite = true;

    for (size_t start = 0; start < order.size() && finite; start += cfg.batch_size) {
      const size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<const EventSequence*> ptrs;
      for (size_t i = start; i < stop; ++i) ptrs.push_back(&train[order[i]]);
      long T = 0;
      for (const EventSequence* s : ptrs) T += detail::count_targets(*s, m.cfg.score_first_event);
      if (T == 0) continue;

      // Striped shards; each worker owns a fixed subset and its own gradient
      // buffer, reduced in shard order afterwards.
      const int nsh = std::min<int>(threads, static_cast<int>(ptrs.size()));
      std::vector<std::vector<const EventSequence*>> shards(nsh);
      for (size_t i = 0; i < ptrs.size(); ++i) shards[i % nsh].push_back(ptrs[i]);
      std::vector<std::vector<nn::Array>> bufs(nsh);
      std::vector<double> shard_loss(nsh, 0.0);
      std::vector<std::exception_ptr> errs(nsh);

      auto run_shard = [&](int k) {
        try {
          bufs[k].resize(m.params.count());
          SeqBatch batch = make_batch(shards[k]);
          nn::Graph g(true);
          detail::LossParts parts = detail::build_loss(g, m, batch, cfg.beta,
                                                       static_cast<double>(T));
          if (parts.targets == 0) return;
          shard_loss[k] = g.scalar(parts.loss);
          g.backward_into(parts.loss, bufs[k]);
        } catch (...) {
          errs[k] = std::current_exception();
        }
      };

      if (nsh == 1) {
        run_shard(0);
      } else {
        std::vector<std::thread> workers;
        for (int k = 0; k < nsh; ++k) workers.emplace_back(run_shard, k);
        for (auto& w : workers) w.join();
      }
      for (auto& e : errs)
        if (e) std::rethrow_exception(e);

      double batch_loss = 0.0;
      for (int k = 0; k < nsh; ++k) batch_loss += shard_loss[k];
      if (!std::isfinite(batch_loss)) {
        finite = false;
        break;
      }
      for (int k = 0; k < nsh; ++k)
        for (size_t i = 0; i < m.params.count(); ++i)
          if (!bufs[k][i].empty()) m.params.item(i).grad.add(bufs[k][i]);
      m.params.mark_grads_live();
      m.params.clip_grad_norm(cfg.grad_clip);
      opt.step(m.params, lr);

      epoch_sum += batch_loss * static_cast<double>(T);
      epoch_targets += T;
    }

    if (!finite) {
      m.params.restore_values(best_params);
      result.diverged = true;
      break;
    }

    const double train_loss = epoch_targets > 0 ? epoch_sum / epoch_targets : 0.0;
    const double val_loss = detail::split_loss(m, val, cfg.beta, cfg.batch_size);
    result.history.push_back({epoch, train_loss, val_loss, lr});
    if (!std::isfinite(val_loss)) {
      m.params.restore_values(best_params);
      result.diverged = true;
      break;
    }

    if (val_loss < best_val) {
      best_val = val_loss;
      best_params = m.params.snapshot_values();
      best_epoch = epoch;
      since_improve = 0;
      plateau = 0;
    } else {
      ++since_improve;
      ++plateau;
      if (plateau >= cfg.plateau_patience) {
        lr *= cfg.lr_decay;
        plateau = 0;
      }
      if (since_improve >= cfg.early_stop_patience) break;
    }
  }

  m.params.restore_values(best_params);
  result.best_epoch = best_epoch;
  result.best_val = best_val;
  return result;
}

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,train_loss,val_loss,lr\n";
  char buf[160];
  for (const HistoryRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss,
                  r.lr);
    out += buf;
  }
  return out;
}

}  // namespace ctpp
