#pragma once
// Training drivers: plain mini-batch SGD, representative-based centralized
// training, the representative-based server/client protocol, and FedAVG.
// All clients are simulated in-process; every run is reproducible from
// (config, seed, data).

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "repfuse/data.hpp"
#include "repfuse/models.hpp"
#include "repfuse/representative.hpp"

namespace repfuse {

enum class Mode { BaselineCentral, RepCentral, RepDistributed, FedAvg };

const char* mode_name(Mode m);
Mode parse_mode(const std::string& text);

/// How the server applies the representatives of one iteration.
enum class Aggregate {
  Sequential,  // one step per client, ascending id, gradient at the current w
  Summed,      // one step with every gradient taken at the broadcast w
};

struct TrainConfig {
  Mode mode = Mode::RepCentral;
  double eta_w = 0.001;
  std::size_t batch = 64;
  std::size_t rounds = 100;  // T
  std::size_t clients = 1;   // K
  double participation = 1.0;
  RepConfig rep;
  std::uint64_t seed = 0;
  std::size_t fedavg_local_epochs = 1;
  std::size_t workers = 1;
  Aggregate aggregate = Aggregate::Sequential;

  void validate() const;
  /// ceil(P * K).
  std::size_t selected_per_round() const;
};

struct ClientState {
  int id = 0;
  Shard shard;
  Residual residual;
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  double accuracy = 0.0;
  double loss = 0.0;            // mean per-sample training loss
  double matching_loss = NAN;   // mean over the round's representatives
  double tau_norm = NAN;        // mean residual norm over the round's representatives
  double wall_seconds = 0.0;
};

struct RunMetrics {
  std::vector<RoundRecord> rounds;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  std::size_t best_round = 0;
  std::vector<std::string> warnings;
};

struct RunResult {
  ModelState model;
  RunMetrics metrics;
};

/// Data visible to a run. Central modes train on shards[0]; the distributed
/// modes give shard k to client k. The training loss is reported over the
/// union of the shards and accuracy over `test`.
struct RunData {
  const Dataset* train = nullptr;
  std::vector<Shard> shards;
  const Dataset* test = nullptr;
};

struct RunHooks {
  /// Called for every representative as it is built.
  std::function<void(std::size_t round, int client, const Representative&)> on_representative;
};

RunResult train_baseline_central(ModelState init, const RunData& data, const TrainConfig& cfg);
RunResult train_rep_central(ModelState init, const RunData& data, const TrainConfig& cfg, const RunHooks& hooks = {});
RunResult train_rep_distributed(ModelState init, const RunData& data, const TrainConfig& cfg,
                                const RunHooks& hooks = {});
RunResult train_fedavg(ModelState init, const RunData& data, const TrainConfig& cfg);

/// Dispatches on cfg.mode.
RunResult train(ModelState init, const RunData& data, const TrainConfig& cfg, const RunHooks& hooks = {});

/// Fraction of samples whose argmax logit (lowest index on ties) equals the label.
double evaluate(const ModelState& model, const Dataset& test);
double evaluate(const ModelState& model, const Dataset& ds, std::span<const std::size_t> indices);
/// Mean per-sample cross-entropy.
double mean_loss(const ModelState& model, const Dataset& ds, std::span<const std::size_t> indices);

/// Samples of ds whose label is in `labels`, in their original order.
Dataset restrict_to_labels(const Dataset& ds, std::span<const int> labels);
/// Sorted distinct labels held by the shards.
std::vector<int> shard_labels(const Dataset& ds, std::span<const Shard> shards);

/// round,accuracy,loss,matching_loss,tau_norm with full precision; nan where
/// a quantity does not apply. No timing columns.
std::string metrics_csv(const RunMetrics& m);
/// Same columns prefixed by a run label, one block per run.
std::string merged_metrics_csv(std::span<const std::pair<std::string, const RunMetrics*>> runs);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace repfuse
