#include "repfuse/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace repfuse {

namespace fs = std::filesystem;

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "mode",       "dataset",  "images",        "labels",      "test_images", "test_labels",
      "csv",        "label_column", "header",    "test_count",  "model",       "hidden",
      "clients",    "participation", "per_client", "partition",  "batch",       "rounds",
      "inner_epochs", "eta_w",  "eta_delta",     "budget",      "residual",    "aggregate",
      "fedavg_local_epochs", "seed", "workers",  "out",         "export_reps", "export_every",
  };
  return keys;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string key_list() {
  std::string out;
  for (const auto& k : config_keys()) out += (out.empty() ? "" : ", ") + k;
  return out;
}

bool known_key(const std::string& key) {
  const auto& keys = config_keys();
  return std::find(keys.begin(), keys.end(), key) != keys.end();
}

[[noreturn]] void type_error(const std::string& key, const std::string& value, const char* expected) {
  throw Error(ErrorKind::Config, "key '" + key + "': expected " + expected + ", got '" + value + "'");
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) type_error(key, v, "a number");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) type_error(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

int to_int(const std::string& key, const std::string& v) {
  int out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size()) type_error(key, v, "an integer");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  type_error(key, v, "on/off");
}

std::string one_of(const std::string& key, const std::string& v, std::initializer_list<const char*> choices) {
  std::string names;
  for (const char* c : choices) {
    if (v == c) return v;
    names += (names.empty() ? "" : "|") + std::string(c);
  }
  type_error(key, v, names.c_str());
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(key, trim(item)));
  if (out.empty()) type_error(key, v, "a comma-separated list of widths");
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (auto x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
  return out;
}

bool distributed(Mode m) { return m == Mode::RepDistributed || m == Mode::FedAvg; }

std::string pad(std::size_t v, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

KeyValues parse_config_text(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream is(text);
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = source + ":" + std::to_string(n) + ": ";
    if (eq == std::string::npos) throw Error(ErrorKind::Config, where + "expected key=value, got '" + body + "'");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (!known_key(key)) throw Error(ErrorKind::Config, where + "unknown key '" + key + "' (valid keys: " + key_list() + ")");
    kv[key] = trim(std::string_view(body).substr(eq + 1));
  }
  return kv;
}

KeyValues read_config_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

RunSpec resolve_spec(const KeyValues& kv, const char* env_seed) {
  for (const auto& [key, value] : kv) {
    if (!known_key(key)) throw Error(ErrorKind::Config, "unknown key '" + key + "' (valid keys: " + key_list() + ")");
  }
  auto get = [&](const char* key) -> const std::string* {
    const auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  RunSpec s;
  TrainConfig& t = s.train;
  if (auto v = get("mode")) {
    try {
      t.mode = parse_mode(*v);
    } catch (const Error&) {
      type_error("mode", *v, "baseline-central|rep-central|rep-distributed|fedavg");
    }
  }
  if (auto v = get("dataset")) s.dataset = one_of("dataset", *v, {"mnist", "csv"});
  if (auto v = get("images")) s.images = *v;
  if (auto v = get("labels")) s.labels = *v;
  if (auto v = get("test_images")) s.test_images = *v;
  if (auto v = get("test_labels")) s.test_labels = *v;
  if (auto v = get("csv")) s.csv = *v;
  if (auto v = get("label_column")) s.label_column = to_int("label_column", *v);
  if (auto v = get("header")) s.header = to_bool("header", *v);
  if (auto v = get("test_count")) s.test_count = to_size("test_count", *v);
  if (auto v = get("model")) s.model.kind = one_of("model", *v, {"mlp", "cnn"}) == "cnn" ? ModelKind::Cnn : ModelKind::Mlp;
  if (auto v = get("hidden")) s.model.hidden = to_sizes("hidden", *v);
  if (auto v = get("clients")) t.clients = to_size("clients", *v);
  if (auto v = get("participation")) t.participation = to_double("participation", *v);
  if (auto v = get("per_client")) s.per_client = to_size("per_client", *v);
  if (auto v = get("partition")) s.partition = one_of("partition", *v, {"noniid", "iid"});
  t.batch = s.dataset == "csv" ? 50 : 64;
  if (auto v = get("batch")) t.batch = to_size("batch", *v);
  if (auto v = get("rounds")) t.rounds = to_size("rounds", *v);
  if (auto v = get("inner_epochs")) t.rep.inner_epochs = to_size("inner_epochs", *v);
  if (auto v = get("eta_w")) t.eta_w = to_double("eta_w", *v);
  if (auto v = get("eta_delta")) t.rep.eta_delta = to_double("eta_delta", *v);
  if (auto v = get("budget")) s.budget = to_double("budget", *v);
  if (auto v = get("residual")) t.rep.use_residual = to_bool("residual", *v);
  if (auto v = get("aggregate")) {
    t.aggregate = one_of("aggregate", *v, {"sequential", "summed"}) == "summed" ? Aggregate::Summed : Aggregate::Sequential;
  }
  if (auto v = get("fedavg_local_epochs")) t.fedavg_local_epochs = to_size("fedavg_local_epochs", *v);
  if (auto v = get("seed")) {
    t.seed = to_u64("seed", *v);
  } else if (env_seed != nullptr && *env_seed != '\0') {
    t.seed = to_u64("REPFUSE_SEED", env_seed);
  }
  if (auto v = get("workers")) t.workers = to_size("workers", *v);
  if (auto v = get("out")) s.out = *v;
  if (auto v = get("export_reps")) s.export_reps = to_bool("export_reps", *v);
  if (auto v = get("export_every")) s.export_every = to_size("export_every", *v);

  auto require = [&](const char* key, const fs::path& value) {
    if (value.empty()) throw Error(ErrorKind::Config, "missing required key '" + std::string(key) + "'");
  };
  require("out", s.out);
  if (s.dataset == "mnist") {
    require("images", s.images);
    require("labels", s.labels);
    require("test_images", s.test_images);
    require("test_labels", s.test_labels);
  } else {
    require("csv", s.csv);
  }
  if (s.export_every < 1) throw Error(ErrorKind::Config, "export_every must be >= 1");
  if (s.per_client < 1) throw Error(ErrorKind::Config, "per_client must be >= 1");
  if (s.budget && *s.budget < 0.0) throw Error(ErrorKind::Config, "budget must be >= 0");
  if (!distributed(t.mode)) t.clients = 1;
  TrainConfig check = t;
  if (s.budget) check.rep.budget = *s.budget;
  check.validate();
  return s;
}

KeyValues RunSpec::echo() const {
  const TrainConfig& t = train;
  KeyValues kv;
  kv["mode"] = mode_name(t.mode);
  kv["dataset"] = dataset;
  if (dataset == "mnist") {
    kv["images"] = images.string();
    kv["labels"] = labels.string();
    kv["test_images"] = test_images.string();
    kv["test_labels"] = test_labels.string();
  } else {
    kv["csv"] = csv.string();
    kv["label_column"] = std::to_string(label_column);
    kv["header"] = header ? "true" : "false";
    kv["test_count"] = std::to_string(test_count);
  }
  kv["model"] = model.kind == ModelKind::Cnn ? "cnn" : "mlp";
  if (model.kind == ModelKind::Mlp) kv["hidden"] = join(model.hidden);
  kv["clients"] = std::to_string(t.clients);
  kv["participation"] = fmt(t.participation);
  kv["per_client"] = std::to_string(per_client);
  kv["partition"] = partition;
  kv["batch"] = std::to_string(t.batch);
  kv["rounds"] = std::to_string(t.rounds);
  kv["inner_epochs"] = std::to_string(t.rep.inner_epochs);
  kv["eta_w"] = fmt(t.eta_w);
  kv["eta_delta"] = fmt(t.rep.eta_delta);
  kv["budget"] = budget ? fmt(*budget) : "auto";
  kv["residual"] = t.rep.use_residual ? "on" : "off";
  kv["aggregate"] = t.aggregate == Aggregate::Summed ? "summed" : "sequential";
  kv["fedavg_local_epochs"] = std::to_string(t.fedavg_local_epochs);
  kv["seed"] = std::to_string(t.seed);
  kv["workers"] = std::to_string(t.workers);
  kv["out"] = out.string();
  kv["export_reps"] = export_reps ? "true" : "false";
  kv["export_every"] = std::to_string(export_every);
  return kv;
}

LoadedData load_run_data(const RunSpec& spec) {
  LoadedData d;
  if (spec.dataset == "mnist") {
    d.train = load_mnist(spec.images, spec.labels);
    d.test = load_mnist(spec.test_images, spec.test_labels);
  } else {
    auto [train, test] = split_holdout(load_csv(spec.csv, spec.label_column, spec.header), spec.test_count, spec.train.seed);
    d.train = std::move(train);
    d.test = std::move(test);
  }
  if (distributed(spec.train.mode)) {
    d.shards = spec.partition == "iid"
                   ? partition_iid(d.train, spec.train.clients, spec.per_client, spec.train.seed)
                   : partition_noniid(d.train, spec.train.clients, spec.per_client, spec.train.seed);
    d.test = restrict_to_labels(d.test, shard_labels(d.train, d.shards));
  } else {
    d.shards = {whole_dataset(d.train)};
  }
  if (d.test.size() == 0) throw Error(ErrorKind::InsufficientData, "test set is empty");
  d.description = spec.dataset + " " + std::to_string(d.train.size()) + " train / " + std::to_string(d.test.size()) + " test";
  return d;
}

std::string pgm_bytes(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != 1) throw Error(ErrorKind::ShapeMismatch, "graymap export needs [H, W, 1], got " + shape_str(s));
  std::string out = "P5\n" + std::to_string(s[1]) + " " + std::to_string(s[0]) + "\n255\n";
  for (double v : image.data()) out.push_back(static_cast<char>(static_cast<std::uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

fs::path export_representative(const Representative& rep, std::size_t round, int client, std::size_t seq,
                               const fs::path& dir) {
  const std::string stem = "r" + pad(round, 4) + "_c" + pad(static_cast<std::size_t>(client), 2) + "_n" + pad(seq, 3) +
                           "_y" + std::to_string(rep.label);
  const bool image = rep.x.shape().size() == 3 && rep.x.shape()[2] == 1;
  const fs::path path = dir / (stem + (image ? ".pgm" : ".csv"));
  if (image) {
    write_text(path, pgm_bytes(rep.x));
  } else {
    std::string row;
    for (double v : rep.x.data()) row += fmt(v) + ",";
    write_text(path, row + std::to_string(rep.label) + "\n");
  }
  return path;
}

RunOutcome run_spec(RunSpec spec) {
  const auto start = std::chrono::steady_clock::now();
  const std::time_t started_at = std::time(nullptr);
  LoadedData data = load_run_data(spec);
  spec.model.input_shape = data.train.feature_shape;
  spec.model.num_classes = data.train.num_classes;
  if (!spec.budget) {
    const bool image = data.train.feature_shape.size() == 3;
    spec.budget = image ? 2.0 : 0.1 * std::sqrt(static_cast<double>(data.train.dim()));
  }
  spec.train.rep.budget = *spec.budget;
  spec.train.validate();
  spec.model.validate();

  std::error_code ec;
  fs::create_directories(spec.out, ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + spec.out.string() + ": " + ec.message());
  const fs::path reps = spec.out / "reps";
  if (spec.export_reps) {
    fs::create_directories(reps, ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + reps.string() + ": " + ec.message());
  }

  RunHooks hooks;
  std::map<std::pair<std::size_t, int>, std::size_t> seq;
  if (spec.export_reps) {
    hooks.on_representative = [&](std::size_t round, int client, const Representative& rep) {
      if ((round - 1) % spec.export_every != 0) return;
      export_representative(rep, round, client, seq[{round, client}]++, reps);
    };
  }
  const RunData run_data{&data.train, data.shards, &data.test};
  RunResult result = train(init_params(spec.model, spec.train.seed), run_data, spec.train, hooks);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  write_text(spec.out / "metrics.csv", metrics_csv(result.metrics));
  save_checkpoint(result.model, spec.out / "checkpoint.bin");
  if (distributed(spec.train.mode)) write_shard_assignment(spec.out / "shards.csv", data.train, data.shards);

  nlohmann::ordered_json j;
  auto& cfg = j["config"];
  const KeyValues echo = spec.echo();
  for (const auto& key : config_keys()) {
    if (auto it = echo.find(key); it != echo.end()) cfg[key] = it->second;
  }
  j["data"] = {{"description", data.description},
               {"train_size", data.train.size()},
               {"test_size", data.test.size()},
               {"classes", data.train.num_classes},
               {"normalization", data.train.normalization}};
  j["model"] = spec.model.describe();
  j["rounds"] = result.metrics.rounds.size();
  j["final_accuracy"] = result.metrics.final_accuracy;
  j["best_accuracy"] = result.metrics.best_accuracy;
  j["best_round"] = result.metrics.best_round;
  std::vector<std::string> warnings = data.train.warnings;
  warnings.insert(warnings.end(), result.metrics.warnings.begin(), result.metrics.warnings.end());
  j["warnings"] = warnings;
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&started_at));
  j["info"] = {{"started_at", stamp}, {"wall_seconds", wall}};
  RunOutcome outcome{std::move(result), j.dump(2) + "\n"};
  write_text(spec.out / "summary.json", outcome.summary_json);
  return outcome;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::BadMagic:
    case ErrorKind::CountMismatch:
    case ErrorKind::Truncated:
    case ErrorKind::Parse:
    case ErrorKind::InvalidArgument:
    case ErrorKind::InsufficientData: return 3;
    case ErrorKind::NumericFault: return 4;
    case ErrorKind::Io: return 5;
    case ErrorKind::ShapeMismatch:
    case ErrorKind::Graph:
    case ErrorKind::Layout: return 6;
  }
  return 1;
}

}  // namespace repfuse
