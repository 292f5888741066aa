#include "repfuse/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>

#include "repfuse/error.hpp"

namespace repfuse {

Tensor Dataset::sample(std::size_t i) const {
  auto r = row(i);
  return Tensor(feature_shape, std::vector<double>(r.begin(), r.end()));
}

std::vector<std::size_t> Dataset::label_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

// --- MNIST IDX --------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(is), {});
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::filesystem::path& path) {
  if (b.size() < off + 4) throw Error(ErrorKind::Truncated, path.string() + ": header cut short");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

constexpr std::uint32_t kImageMagic = 2051;
constexpr std::uint32_t kLabelMagic = 2049;

}  // namespace

Dataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  const auto img_magic = be32(img, 0, images);
  if (img_magic != kImageMagic) {
    throw Error(ErrorKind::BadMagic, images.string() + ": image magic " + std::to_string(img_magic) + ", expected 2051");
  }
  const auto lab_magic = be32(lab, 0, labels);
  if (lab_magic != kLabelMagic) {
    throw Error(ErrorKind::BadMagic, labels.string() + ": label magic " + std::to_string(lab_magic) + ", expected 2049");
  }
  const std::size_t n = be32(img, 4, images), rows = be32(img, 8, images), cols = be32(img, 12, images);
  const std::size_t n_labels = be32(lab, 4, labels);
  if (n != n_labels) {
    throw Error(ErrorKind::CountMismatch,
                std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");
  }
  if (rows == 0 || cols == 0) throw Error(ErrorKind::Parse, images.string() + ": zero image dimension");
  if (img.size() < 16 + n * rows * cols) throw Error(ErrorKind::Truncated, images.string() + ": pixel data cut short");
  if (lab.size() < 8 + n) throw Error(ErrorKind::Truncated, labels.string() + ": label data cut short");

  Dataset ds;
  ds.feature_shape = {rows, cols, 1};
  ds.num_classes = 10;
  for (int c = 0; c < 10; ++c) ds.class_names.push_back(std::to_string(c));
  ds.normalization = "pixel/255";
  ds.features.resize(n * rows * cols);
  for (std::size_t i = 0; i < ds.features.size(); ++i) ds.features[i] = img[16 + i] / 255.0;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = lab[8 + i];
    if (y > 9) throw Error(ErrorKind::Parse, labels.string() + ": label " + std::to_string(y) + " is not a digit");
    ds.labels[i] = y;
  }
  return ds;
}

// --- CSV ----------------------------------------------------------------------

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, int label_column, bool has_header) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::size_t> line_of_row;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_commas(line);
    if (has_header && header.empty() && rows.empty()) {
      header = std::move(cells);
      continue;
    }
    if (!rows.empty() && cells.size() != rows.front().size()) {
      throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_no) + ": ragged row (" +
                                        std::to_string(cells.size()) + " fields, expected " +
                                        std::to_string(rows.front().size()) + ")");
    }
    rows.push_back(std::move(cells));
    line_of_row.push_back(line_no);
  }
  if (rows.empty()) throw Error(ErrorKind::Parse, path.string() + ": no data rows");
  const std::size_t width = rows.front().size();
  if (!header.empty() && header.size() != width) throw Error(ErrorKind::Parse, path.string() + ": header width differs from rows");
  if (width < 2) throw Error(ErrorKind::Parse, path.string() + ": need at least one feature and a label");
  const long lc = label_column < 0 ? static_cast<long>(width) + label_column : label_column;
  if (lc < 0 || lc >= static_cast<long>(width)) throw Error(ErrorKind::InvalidArgument, "label column out of range");
  const std::size_t label_col = static_cast<std::size_t>(lc);
  const std::size_t d = width - 1;

  Dataset ds;
  ds.feature_shape = {d};
  ds.features.resize(rows.size() * d);
  std::map<std::string, int> label_ids;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::size_t f = 0;
    for (std::size_t c = 0; c < width; ++c) {
      const std::string& cell = rows[r][c];
      if (c == label_col) {
        auto [it, inserted] = label_ids.emplace(cell, static_cast<int>(label_ids.size()));
        if (inserted) ds.class_names.push_back(cell);
        ds.labels.push_back(it->second);
        continue;
      }
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || res.ec != std::errc() || res.ptr != cell.data() + cell.size() || !std::isfinite(v)) {
        throw Error(ErrorKind::Parse, path.string() + ":" + std::to_string(line_of_row[r]) + ": non-numeric feature '" +
                                          cell + "' in column " + std::to_string(c));
      }
      ds.features[r * d + f++] = v;
    }
  }
  ds.num_classes = label_ids.size();
  if (ds.num_classes < 2) {
    throw Error(ErrorKind::InvalidArgument, path.string() + ": only " + std::to_string(ds.num_classes) +
                                                " class present; at least 2 are required");
  }

  for (std::size_t f = 0; f < d; ++f) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      lo = std::min(lo, ds.features[r * d + f]);
      hi = std::max(hi, ds.features[r * d + f]);
    }
    const bool constant = hi == lo;
    if (constant) {
      const std::size_t col = f < label_col ? f : f + 1;
      const std::string name = header.empty() ? "column " + std::to_string(col) : "'" + header[col] + "'";
      ds.warnings.push_back("constant feature " + name + " scaled to 0");
    }
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double& v = ds.features[r * d + f];
      v = constant ? 0.0 : (v - lo) / (hi - lo);
    }
  }
  ds.normalization = "per-column min-max";
  return ds;
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out;
  out.feature_shape = ds.feature_shape;
  out.num_classes = ds.num_classes;
  out.class_names = ds.class_names;
  out.normalization = ds.normalization;
  out.warnings = ds.warnings;
  out.features.reserve(indices.size() * ds.dim());
  for (auto i : indices) {
    if (i >= ds.size()) throw Error(ErrorKind::InvalidArgument, "subset index out of range");
    auto r = ds.row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, std::size_t test_count, std::uint64_t seed) {
  if (test_count == 0 || test_count >= ds.size()) {
    throw Error(ErrorKind::InvalidArgument, "test size " + std::to_string(test_count) + " must lie in [1, " +
                                                std::to_string(ds.size()) + ")");
  }
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, Stream::Split));
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(test_count));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(test_count), perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {subset(ds, train), subset(ds, test)};
}

// --- partitioning -------------------------------------------------------------

std::vector<Shard> partition_noniid(const Dataset& ds, std::size_t clients, std::size_t per_client, std::uint64_t seed) {
  if (clients == 0 || per_client == 0) throw Error(ErrorKind::InvalidArgument, "need at least one client and one sample each");
  std::vector<std::vector<std::size_t>> pools(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) pools[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::vector<int> present;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    if (!pools[c].empty()) present.push_back(static_cast<int>(c));
  }
  Rng rng(derive_seed(seed, Stream::Partition));
  for (int c : present) rng.shuffle(std::span<std::size_t>(pools[static_cast<std::size_t>(c)]));

  std::vector<std::size_t> used(ds.num_classes, 0);
  std::vector<Shard> shards;
  for (std::size_t k = 0; k < clients; ++k) {
    const int label = present[k % present.size()];
    auto& pool = pools[static_cast<std::size_t>(label)];
    auto& u = used[static_cast<std::size_t>(label)];
    if (pool.size() - u < per_client) {
      throw Error(ErrorKind::InsufficientData, "client " + std::to_string(k) + " needs " + std::to_string(per_client) +
                                                   " samples of label " + std::to_string(label) + ", only " +
                                                   std::to_string(pool.size() - u) + " left");
    }
    Shard s{static_cast<int>(k), {pool.begin() + static_cast<std::ptrdiff_t>(u),
                                  pool.begin() + static_cast<std::ptrdiff_t>(u + per_client)}};
    u += per_client;
    std::sort(s.indices.begin(), s.indices.end());
    shards.push_back(std::move(s));
  }
  return shards;
}

std::vector<Shard> partition_iid(const Dataset& ds, std::size_t clients, std::size_t per_client, std::uint64_t seed) {
  if (clients == 0 || per_client == 0) throw Error(ErrorKind::InvalidArgument, "need at least one client and one sample each");
  if (clients * per_client > ds.size()) {
    throw Error(ErrorKind::InsufficientData, std::to_string(clients) + " x " + std::to_string(per_client) +
                                                 " samples requested from " + std::to_string(ds.size()));
  }
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, Stream::Partition));
  rng.shuffle(std::span<std::size_t>(perm));
  std::vector<Shard> shards;
  for (std::size_t k = 0; k < clients; ++k) {
    Shard s{static_cast<int>(k), {perm.begin() + static_cast<std::ptrdiff_t>(k * per_client),
                                  perm.begin() + static_cast<std::ptrdiff_t>((k + 1) * per_client)}};
    std::sort(s.indices.begin(), s.indices.end());
    shards.push_back(std::move(s));
  }
  return shards;
}

Shard whole_dataset(const Dataset& ds, int owner) {
  Shard s{owner, std::vector<std::size_t>(ds.size())};
  std::iota(s.indices.begin(), s.indices.end(), 0);
  return s;
}

void write_shard_assignment(const std::filesystem::path& path, const Dataset& ds, std::span<const Shard> shards) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::Io, "cannot write " + path.string());
  os << "client_id,sample_index,label\n";
  for (const auto& s : shards)
    for (auto i : s.indices) os << s.owner << ',' << i << ',' << ds.labels[i] << '\n';
}

// --- batches ---------------------------------------------------------------------

Batch make_batch(const Dataset& ds, std::vector<std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::InvalidArgument, "empty batch");
  const int label = ds.labels.at(indices.front());
  for (auto i : indices) {
    if (ds.labels.at(i) != label) throw Error(ErrorKind::InvalidArgument, "batch mixes labels");
  }
  return Batch{std::move(indices), label};
}

SameLabelSampler::SameLabelSampler(const Dataset& ds, std::span<const std::size_t> indices, std::size_t batch_size)
    : ds_(&ds), batch_size_(batch_size) {
  if (batch_size == 0) throw Error(ErrorKind::InvalidArgument, "batch size must be positive");
  if (indices.empty()) throw Error(ErrorKind::InsufficientData, "sampler over an empty index set");
  std::vector<std::size_t> sorted(indices.begin(), indices.end());
  std::sort(sorted.begin(), sorted.end());
  std::map<int, std::vector<std::size_t>> by_label;
  for (auto i : sorted) by_label[ds.labels.at(i)].push_back(i);
  std::size_t largest = 0;
  for (auto& [label, pool] : by_label) {
    labels_.push_back(label);
    largest = std::max(largest, pool.size());
    pools_.push_back(std::move(pool));
  }
  if (largest < batch_size_) {
    warnings_.push_back("batch size " + std::to_string(batch_size_) + " exceeds the largest label group (" +
                        std::to_string(largest) + "); batches shrink to " + std::to_string(largest));
    batch_size_ = largest;
  }
}

std::size_t SameLabelSampler::batches_per_epoch() const {
  std::size_t n = 0;
  for (const auto& p : pools_) n += p.size() / batch_size_;
  return n;
}

void SameLabelSampler::reshuffle(Rng& rng) {
  order_ = pools_;
  for (auto& o : order_) rng.shuffle(std::span<std::size_t>(o));
  cursor_.assign(order_.size(), 0);
  started_ = true;
}

Batch SameLabelSampler::next(Rng& rng) {
  if (!started_) reshuffle(rng);
  auto eligible = [&] {
    std::vector<std::size_t> e;
    for (std::size_t l = 0; l < order_.size(); ++l) {
      if (order_[l].size() - cursor_[l] >= batch_size_) e.push_back(l);
    }
    return e;
  };
  auto choices = eligible();
  if (choices.empty()) {
    reshuffle(rng);
    choices = eligible();
  }
  const std::size_t l = choices[rng.index(choices.size())];
  const auto begin = order_[l].begin() + static_cast<std::ptrdiff_t>(cursor_[l]);
  std::vector<std::size_t> picked(begin, begin + static_cast<std::ptrdiff_t>(batch_size_));
  cursor_[l] += batch_size_;
  return make_batch(*ds_, std::move(picked));
}

Tensor gather_features(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::InvalidArgument, "gather of no samples");
  Shape shape = ds.feature_shape;
  shape.insert(shape.begin(), indices.size());
  std::vector<double> data;
  data.reserve(indices.size() * ds.dim());
  for (auto i : indices) {
    auto r = ds.row(i);
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor(std::move(shape), std::move(data));
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(ds.labels.at(i));
  return out;
}

double max_pairwise_distance(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.size() < 2) throw Error(ErrorKind::InvalidArgument, "pairwise distance needs at least 2 samples");
  double best = 0.0;
  for (std::size_t a = 0; a < indices.size(); ++a) {
    auto ra = ds.row(indices[a]);
    for (std::size_t b = a + 1; b < indices.size(); ++b) {
      auto rb = ds.row(indices[b]);
      double s = 0.0;
      for (std::size_t k = 0; k < ra.size(); ++k) {
        const double diff = ra[k] - rb[k];
        s += diff * diff;
      }
      best = std::max(best, s);
    }
  }
  return std::sqrt(best);
}

double max_pairwise_distance(const Dataset& ds) {
  const auto all = whole_dataset(ds);
  return max_pairwise_distance(ds, all.indices);
}

}  // namespace repfuse
