#pragma once
// Run specification, config files, and the artifacts a run leaves behind.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "repfuse/data.hpp"
#include "repfuse/error.hpp"
#include "repfuse/models.hpp"
#include "repfuse/protocol.hpp"

namespace repfuse {

/// Raw key=value settings before typing. Later sources overwrite earlier ones.
using KeyValues = std::map<std::string, std::string>;

/// Every key a config file or flag may set, in display order.
const std::vector<std::string>& config_keys();

/// Parses flat key=value lines; `#` starts a comment, blank lines are
/// skipped. Unknown keys and malformed lines raise Config errors that name
/// `source` and the line.
KeyValues parse_config_text(const std::string& text, const std::string& source);
KeyValues read_config_file(const std::filesystem::path& path);

struct RunSpec {
  TrainConfig train;
  std::string dataset = "mnist";  // mnist | csv
  std::filesystem::path images, labels, test_images, test_labels;
  std::filesystem::path csv;
  int label_column = -1;
  bool header = true;
  std::size_t test_count = 210;  // csv holdout
  ModelSpec model;               // input shape and classes filled from the data
  std::size_t per_client = 200;
  std::string partition = "noniid";
  std::optional<double> budget;  // unset: 2.0 for images, 0.1 * sqrt(d) for flat data
  std::filesystem::path out;
  bool export_reps = false;
  std::size_t export_every = 1;

  /// Resolved settings as key=value text, one per line in config_keys() order.
  KeyValues echo() const;
};

/// Types and validates the settings. `env_seed` (the REPFUSE_SEED value, or
/// null) is used when no seed key is present.
RunSpec resolve_spec(const KeyValues& kv, const char* env_seed = nullptr);

struct LoadedData {
  Dataset train;
  Dataset test;  // restricted to the shard labels in the distributed modes
  std::vector<Shard> shards;
  std::string description;
};

LoadedData load_run_data(const RunSpec& spec);

struct RunOutcome {
  RunResult result;
  std::string summary_json;
};

/// Loads data, trains, and writes metrics.csv, summary.json, checkpoint.bin
/// (plus shards.csv and reps/ when they apply) under spec.out.
RunOutcome run_spec(RunSpec spec);

/// Binary P5 graymap of an [H, W, 1] image; values are clipped to [0, 1]
/// and scaled by 255 with truncation.
std::string pgm_bytes(const Tensor& image);
/// Writes r<round>_c<client>_n<seq>_y<label>.pgm into dir for image data,
/// .csv (values then label on one row) otherwise. seq counts the client's
/// representatives within the round. Returns the path written.
std::filesystem::path export_representative(const Representative& rep, std::size_t round, int client,
                                            std::size_t seq, const std::filesystem::path& dir);

/// Process exit status for an error category.
int exit_code(ErrorKind kind);

}  // namespace repfuse
