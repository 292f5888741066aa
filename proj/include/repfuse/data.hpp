#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "repfuse/rng.hpp"
#include "repfuse/tensor.hpp"

namespace repfuse {

/// Labelled samples in one flat row-major buffer. Every sample has
/// feature_shape; labels lie in [0, num_classes).
struct Dataset {
  Shape feature_shape;
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;  // index = label
  std::string normalization;
  std::vector<std::string> warnings;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return shape_size(feature_shape); }
  std::span<const double> row(std::size_t i) const { return std::span<const double>(features).subspan(i * dim(), dim()); }
  Tensor sample(std::size_t i) const;
  /// Per-label sample counts.
  std::vector<std::size_t> label_counts() const;
};

/// MNIST IDX pair. Pixels are divided by 255; samples are 28 x 28 x 1.
Dataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Comma-separated table with one categorical label column (index; negative
/// counts from the end). Features are min-max scaled per column to [0, 1];
/// labels are numbered in order of first appearance.
Dataset load_csv(const std::filesystem::path& path, int label_column = -1, bool has_header = true);

/// Samples at `indices`, in that order.
Dataset subset(const Dataset& ds, std::span<const std::size_t> indices);

/// Seeded split into (train, test) with `test_count` test samples.
std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, std::size_t test_count, std::uint64_t seed);

struct Shard {
  int owner = 0;
  std::vector<std::size_t> indices;
};

/// K disjoint label-pure shards of `per_client` samples each. Client k gets
/// the k-th class (round-robin over present classes, ascending).
std::vector<Shard> partition_noniid(const Dataset& ds, std::size_t clients, std::size_t per_client, std::uint64_t seed);
/// K disjoint shards of `per_client` samples drawn uniformly at random.
std::vector<Shard> partition_iid(const Dataset& ds, std::size_t clients, std::size_t per_client, std::uint64_t seed);
/// One shard holding every index of ds.
Shard whole_dataset(const Dataset& ds, int owner = 0);

/// client-id,sample-index,label rows for auditing an assignment.
void write_shard_assignment(const std::filesystem::path& path, const Dataset& ds, std::span<const Shard> shards);

struct Batch {
  std::vector<std::size_t> indices;
  int label = 0;

  std::size_t size() const { return indices.size(); }
};

/// Builds a batch, checking every member carries the same label.
Batch make_batch(const Dataset& ds, std::vector<std::size_t> indices);

/// Draws same-label batches without replacement. An epoch ends when no label
/// has B samples left; the next draw reshuffles every label's pool. When no
/// label holds B samples at all, the batch size shrinks to the largest label
/// count and a warning is recorded.
class SameLabelSampler {
 public:
  SameLabelSampler(const Dataset& ds, std::span<const std::size_t> indices, std::size_t batch_size);

  Batch next(Rng& rng);

  std::size_t batch_size() const { return batch_size_; }
  /// Batches drawn between two reshuffles.
  std::size_t batches_per_epoch() const;
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<int> labels_;                        // labels present, ascending
  std::vector<std::vector<std::size_t>> pools_;    // sorted indices per label
  std::vector<std::vector<std::size_t>> order_;    // current epoch order
  std::vector<std::size_t> cursor_;
  bool started_ = false;
  std::vector<std::string> warnings_;

  void reshuffle(Rng& rng);
};

/// Stacks the samples at `indices` into [n, feature_shape...].
Tensor gather_features(const Dataset& ds, std::span<const std::size_t> indices);
std::vector<int> gather_labels(const Dataset& ds, std::span<const std::size_t> indices);

/// Largest Euclidean distance between any two of the given samples
/// (brute force over all pairs).
double max_pairwise_distance(const Dataset& ds, std::span<const std::size_t> indices);
double max_pairwise_distance(const Dataset& ds);

}  // namespace repfuse
