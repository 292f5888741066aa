#include "repfuse/protocol.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include "repfuse/error.hpp"

namespace repfuse {

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::BaselineCentral: return "baseline-central";
    case Mode::RepCentral: return "rep-central";
    case Mode::RepDistributed: return "rep-distributed";
    case Mode::FedAvg: return "fedavg";
  }
  return "?";
}

Mode parse_mode(const std::string& text) {
  for (Mode m : {Mode::BaselineCentral, Mode::RepCentral, Mode::RepDistributed, Mode::FedAvg}) {
    if (text == mode_name(m)) return m;
  }
  throw Error(ErrorKind::Config, "unknown mode '" + text + "' (baseline-central, rep-central, rep-distributed, fedavg)");
}

void TrainConfig::validate() const {
  if (!(eta_w >= 0.0) || !std::isfinite(eta_w)) throw Error(ErrorKind::Config, "eta_w must be a finite value >= 0");
  if (batch < 1) throw Error(ErrorKind::Config, "batch must be >= 1");
  if (rounds < 1) throw Error(ErrorKind::Config, "rounds must be >= 1");
  if (clients < 1) throw Error(ErrorKind::Config, "clients must be >= 1");
  if (!(participation > 0.0 && participation <= 1.0)) throw Error(ErrorKind::Config, "participation must lie in (0, 1]");
  if (fedavg_local_epochs < 1) throw Error(ErrorKind::Config, "fedavg_local_epochs must be >= 1");
  if (workers < 1) throw Error(ErrorKind::Config, "workers must be >= 1");
  rep.validate();
}

std::size_t TrainConfig::selected_per_round() const {
  const auto m = static_cast<std::size_t>(std::ceil(participation * static_cast<double>(clients)));
  return std::clamp<std::size_t>(m, 1, clients);
}

// --- evaluation -----------------------------------------------------------------

namespace {

constexpr std::size_t kEvalChunk = 16;

template <class F>
void for_chunks(std::span<const std::size_t> indices, F&& f) {
  for (std::size_t lo = 0; lo < indices.size(); lo += kEvalChunk) {
    f(indices.subspan(lo, std::min(kEvalChunk, indices.size() - lo)));
  }
}

std::vector<std::size_t> all_indices(const Dataset& ds) { return whole_dataset(ds).indices; }

}  // namespace

double evaluate(const ModelState& model, const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::InvalidArgument, "evaluation on an empty set");
  if (ds.feature_shape != model.arch->input_shape() || ds.num_classes != model.arch->num_classes()) {
    throw Error(ErrorKind::ShapeMismatch, "test data " + shape_str(ds.feature_shape) + " with " +
                                              std::to_string(ds.num_classes) + " classes does not fit model " +
                                              model.arch->describe());
  }
  std::size_t correct = 0;
  const std::size_t m = ds.num_classes;
  for_chunks(indices, [&](std::span<const std::size_t> chunk) {
    const Tensor logits = predict_logits(model, gather_features(ds, chunk));
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < m; ++c) {
        if (logits[i * m + c] > logits[i * m + best]) best = c;
      }
      if (static_cast<int>(best) == ds.labels[chunk[i]]) ++correct;
    }
  });
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

double evaluate(const ModelState& model, const Dataset& test) {
  const auto idx = all_indices(test);
  return evaluate(model, test, idx);
}

double mean_loss(const ModelState& model, const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::InvalidArgument, "loss over an empty set");
  ad::NoGradGuard guard;
  double total = 0.0;
  for_chunks(indices, [&](std::span<const std::size_t> chunk) {
    const auto y = gather_labels(ds, chunk);
    total += loss(model, gather_features(ds, chunk), y).value().item();
  });
  return total / static_cast<double>(indices.size());
}

Dataset restrict_to_labels(const Dataset& ds, std::span<const int> labels) {
  const std::set<int> keep(labels.begin(), labels.end());
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (keep.count(ds.labels[i])) idx.push_back(i);
  }
  if (idx.empty()) throw Error(ErrorKind::InsufficientData, "no test samples carry the clients' labels");
  return subset(ds, idx);
}

std::vector<int> shard_labels(const Dataset& ds, std::span<const Shard> shards) {
  std::set<int> labels;
  for (const auto& s : shards)
    for (auto i : s.indices) labels.insert(ds.labels.at(i));
  return {labels.begin(), labels.end()};
}

// --- shared machinery -------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

void check_data(const RunData& data, std::size_t shards_needed) {
  if (!data.train || !data.test) throw Error(ErrorKind::Config, "run needs training and test data");
  if (data.shards.size() < shards_needed) {
    throw Error(ErrorKind::Config, "run needs " + std::to_string(shards_needed) + " shard(s), got " +
                                       std::to_string(data.shards.size()));
  }
}

void check_finite(const GradVector& params, std::size_t round) {
  for (double v : params.values()) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::NumericFault, "round " + std::to_string(round) + ": parameters became non-finite");
    }
  }
}

// w <- w - step * g
void descend(GradVector& params, const GradVector& g, double step) { params -= g * step; }

class Recorder {
 public:
  Recorder(const RunData& data, std::size_t shard_count) : data_(data) {
    for (std::size_t k = 0; k < shard_count; ++k)
      train_idx_.insert(train_idx_.end(), data.shards[k].indices.begin(), data.shards[k].indices.end());
    std::sort(train_idx_.begin(), train_idx_.end());
    test_idx_ = all_indices(*data.test);
  }

  void start_round() {
    start_ = Clock::now();
    matching_.clear();
    tau_.clear();
  }
  void note(const RepOutcome& out) {
    matching_.push_back(out.rep.matching_loss);
    tau_.push_back(out.residual.tau.norm());
  }
  void finish_round(std::size_t round, const ModelState& model) {
    RoundRecord r;
    r.round = round;
    r.accuracy = evaluate(model, *data_.test, test_idx_);
    r.loss = mean_loss(model, *data_.train, train_idx_);
    if (!matching_.empty()) {
      r.matching_loss = mean(matching_);
      r.tau_norm = mean(tau_);
    }
    r.wall_seconds = std::chrono::duration<double>(Clock::now() - start_).count();
    if (metrics.rounds.empty() || r.accuracy > metrics.best_accuracy) {
      metrics.best_accuracy = r.accuracy;
      metrics.best_round = round;
    }
    metrics.final_accuracy = r.accuracy;
    metrics.rounds.push_back(r);
  }
  void warn(const std::vector<std::string>& w) {
    for (const auto& s : w) {
      if (std::find(metrics.warnings.begin(), metrics.warnings.end(), s) == metrics.warnings.end())
        metrics.warnings.push_back(s);
    }
  }

  RunMetrics metrics;

 private:
  static double mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }

  const RunData& data_;
  std::vector<std::size_t> train_idx_, test_idx_;
  Clock::time_point start_;
  std::vector<double> matching_, tau_;
};

// Runs f(0..n-1) on up to `workers` threads. Exceptions are rethrown in
// index order once every task has finished.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t start, std::size_t stride) {
    for (std::size_t i = start; i < n; i += stride) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(workers, n);
  if (threads <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(run, t, threads);
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// One shuffled pass over `indices` in mini-batches of `batch`, last partial
// batch included.
void sgd_epoch(ModelState& model, const Dataset& ds, std::span<const std::size_t> indices, std::size_t batch,
               double eta, Rng& rng) {
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::sort(order.begin(), order.end());
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t lo = 0; lo < order.size(); lo += batch) {
    const std::span<const std::size_t> b(order.data() + lo, std::min(batch, order.size() - lo));
    const auto y = gather_labels(ds, b);
    descend(model.params, param_gradient(model, gather_features(ds, b), y), eta);
  }
}

// Uniform choice of m of k client ids without replacement, ascending.
std::vector<std::size_t> select_clients(std::size_t k, std::size_t m, Rng& rng) {
  std::vector<std::size_t> ids(k);
  std::iota(ids.begin(), ids.end(), 0);
  if (m < k) {
    for (std::size_t i = 0; i < m; ++i) std::swap(ids[i], ids[i + rng.index(k - i)]);
    ids.resize(m);
    std::sort(ids.begin(), ids.end());
  }
  return ids;
}

Rng client_rng(const TrainConfig& cfg, std::size_t k) { return Rng(derive_seed(cfg.seed, Stream::Client, k)); }

std::string where(std::size_t round, std::size_t client) {
  return "round " + std::to_string(round) + ", client " + std::to_string(client);
}

}  // namespace

// --- drivers ----------------------------------------------------------------------

RunResult train_baseline_central(ModelState model, const RunData& data, const TrainConfig& cfg) {
  cfg.validate();
  check_data(data, 1);
  Recorder rec(data, 1);
  Rng rng = client_rng(cfg, 0);
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    rec.start_round();
    try {
      sgd_epoch(model, *data.train, data.shards[0].indices, cfg.batch, cfg.eta_w, rng);
    } catch (const Error& e) {
      throw e.with_context("round " + std::to_string(t));
    }
    check_finite(model.params, t);
    rec.finish_round(t, model);
  }
  return {std::move(model), std::move(rec.metrics)};
}

RunResult train_rep_central(ModelState model, const RunData& data, const TrainConfig& cfg, const RunHooks& hooks) {
  cfg.validate();
  check_data(data, 1);
  Recorder rec(data, 1);
  const Dataset& ds = *data.train;
  Rng rng = client_rng(cfg, 0);
  SameLabelSampler sampler(ds, data.shards[0].indices, cfg.batch);
  rec.warn(sampler.warnings());
  Residual residual = Residual::zeros(model.params.layout_ptr());
  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    rec.start_round();
    for (std::size_t it = 0; it < sampler.batches_per_epoch(); ++it) {
      try {
        const Batch batch = sampler.next(rng);
        const std::vector<int> y(batch.size(), batch.label);
        RepOutcome out = build_representative(model, gather_features(ds, batch.indices), y, residual, cfg.rep);
        descend(model.params, out.rep_grad, cfg.eta_w * static_cast<double>(out.rep.batch_size));
        residual = out.residual;
        rec.note(out);
        if (hooks.on_representative) hooks.on_representative(t, 0, out.rep);
      } catch (const Error& e) {
        throw e.with_context("round " + std::to_string(t));
      }
      check_finite(model.params, t);
    }
    rec.finish_round(t, model);
  }
  return {std::move(model), std::move(rec.metrics)};
}

RunResult train_rep_distributed(ModelState model, const RunData& data, const TrainConfig& cfg,
                                const RunHooks& hooks) {
  cfg.validate();
  check_data(data, cfg.clients);
  Recorder rec(data, cfg.clients);
  const Dataset& ds = *data.train;
  std::vector<ClientState> clients;
  std::vector<SameLabelSampler> samplers;
  std::vector<Rng> rngs;
  for (std::size_t k = 0; k < cfg.clients; ++k) {
    clients.push_back({static_cast<int>(k), data.shards[k], Residual::zeros(model.params.layout_ptr())});
    samplers.emplace_back(ds, clients[k].shard.indices, cfg.batch);
    rngs.push_back(client_rng(cfg, k));
    rec.warn(samplers[k].warnings());
  }
  Rng server(derive_seed(cfg.seed, Stream::Server));
  const std::size_t m = cfg.selected_per_round();

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    rec.start_round();
    const auto selected = select_clients(cfg.clients, m, server);
    std::size_t iterations = 0;
    for (auto k : selected) iterations = std::max(iterations, samplers[k].batches_per_epoch());

    for (std::size_t it = 0; it < iterations; ++it) {
      const ModelState snapshot = model;
      std::vector<RepOutcome> outs(selected.size());
      parallel_for(selected.size(), cfg.workers, [&](std::size_t i) {
        const std::size_t k = selected[i];
        try {
          const Batch batch = samplers[k].next(rngs[k]);
          const std::vector<int> y(batch.size(), batch.label);
          outs[i] = build_representative(snapshot, gather_features(ds, batch.indices), y, clients[k].residual, cfg.rep);
          clients[k].residual = outs[i].residual;
        } catch (const Error& e) {
          throw e.with_context(where(t, k));
        }
      });

      if (cfg.aggregate == Aggregate::Sequential) {
        for (std::size_t i = 0; i < selected.size(); ++i) {
          const Representative& r = outs[i].rep;
          const int y[] = {r.label};
          try {
            descend(model.params, param_gradient(model, r.x, y), cfg.eta_w * static_cast<double>(r.batch_size));
          } catch (const Error& e) {
            throw e.with_context(where(t, selected[i]));
          }
        }
      } else {
        GradVector total(model.params.layout_ptr());
        for (const auto& o : outs) total += o.rep_grad * static_cast<double>(o.rep.batch_size);
        descend(model.params, total, cfg.eta_w);
      }
      check_finite(model.params, t);
      for (std::size_t i = 0; i < selected.size(); ++i) {
        rec.note(outs[i]);
        if (hooks.on_representative) hooks.on_representative(t, static_cast<int>(selected[i]), outs[i].rep);
      }
    }
    rec.finish_round(t, model);
  }
  return {std::move(model), std::move(rec.metrics)};
}

RunResult train_fedavg(ModelState model, const RunData& data, const TrainConfig& cfg) {
  cfg.validate();
  check_data(data, cfg.clients);
  Recorder rec(data, cfg.clients);
  const Dataset& ds = *data.train;
  std::vector<Rng> rngs;
  for (std::size_t k = 0; k < cfg.clients; ++k) rngs.push_back(client_rng(cfg, k));
  Rng server(derive_seed(cfg.seed, Stream::Server));
  const std::size_t m = cfg.selected_per_round();

  for (std::size_t t = 1; t <= cfg.rounds; ++t) {
    rec.start_round();
    const auto selected = select_clients(cfg.clients, m, server);
    std::vector<ModelState> local(selected.size(), model);
    parallel_for(selected.size(), cfg.workers, [&](std::size_t i) {
      const std::size_t k = selected[i];
      try {
        for (std::size_t e = 0; e < cfg.fedavg_local_epochs; ++e)
          sgd_epoch(local[i], ds, data.shards[k].indices, cfg.batch, cfg.eta_w, rngs[k]);
      } catch (const Error& e) {
        throw e.with_context(where(t, k));
      }
    });
    double total = 0.0;
    for (auto k : selected) total += static_cast<double>(data.shards[k].indices.size());
    if (selected.size() == 1) {
      model.params = std::move(local[0].params);
    } else {
      // Weighted mean of the local updates relative to the broadcast model.
      GradVector step(model.params.layout_ptr());
      for (std::size_t i = 0; i < selected.size(); ++i) {
        step += (local[i].params - model.params) *
                (static_cast<double>(data.shards[selected[i]].indices.size()) / total);
      }
      model.params += step;
    }
    check_finite(model.params, t);
    rec.finish_round(t, model);
  }
  return {std::move(model), std::move(rec.metrics)};
}

RunResult train(ModelState init, const RunData& data, const TrainConfig& cfg, const RunHooks& hooks) {
  switch (cfg.mode) {
    case Mode::BaselineCentral: return train_baseline_central(std::move(init), data, cfg);
    case Mode::RepCentral: return train_rep_central(std::move(init), data, cfg, hooks);
    case Mode::RepDistributed: return train_rep_distributed(std::move(init), data, cfg, hooks);
    case Mode::FedAvg: return train_fedavg(std::move(init), data, cfg);
  }
  throw Error(ErrorKind::Config, "unknown mode");
}

// --- metrics files ----------------------------------------------------------------

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void append_rows(std::string& out, const std::string& prefix, const RunMetrics& m) {
  for (const auto& r : m.rounds) {
    out += prefix + std::to_string(r.round) + ',' + num(r.accuracy) + ',' + num(r.loss) + ',' + num(r.matching_loss) +
           ',' + num(r.tau_norm) + '\n';
  }
}

}  // namespace

std::string metrics_csv(const RunMetrics& m) {
  std::string out = "round,accuracy,loss,matching_loss,tau_norm\n";
  append_rows(out, "", m);
  return out;
}

std::string merged_metrics_csv(std::span<const std::pair<std::string, const RunMetrics*>> runs) {
  std::string out = "run,round,accuracy,loss,matching_loss,tau_norm\n";
  for (const auto& [name, m] : runs) append_rows(out, name + ",", *m);
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  os << text;
  if (!os) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace repfuse
