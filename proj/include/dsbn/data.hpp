#pragma once

// Synthetic domain-shift datasets, per-domain mini-batching and transductive
// evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "dsbn/network.hpp"
#include "dsbn/normalization.hpp"
#include "dsbn/tensor.hpp"

namespace dsbn {

// N x d features with class labels and a domain tag. Target labels are kept
// for evaluation but hidden from training code (labels() throws).
class LabeledDataset {
 public:
  LabeledDataset() = default;
  LabeledDataset(std::vector<double> features, std::size_t dim,
                 std::vector<int> labels, DomainId domain,
                 std::size_t class_count, bool quarantine_labels);

  std::size_t size() const { return dim_ == 0 ? 0 : features_.size() / dim_; }
  std::size_t dim() const { return dim_; }
  std::size_t class_count() const { return class_count_; }
  DomainId domain() const { return domain_; }

  std::span<const double> features() const { return features_; }
  std::span<const double> row(std::size_t i) const;

  bool labels_quarantined() const { return quarantined_; }
  bool has_labels() const { return !labels_.empty(); }
  // Training-time access. Throws LabelQuarantineError for target data.
  std::span<const int> labels() const;
  // Evaluation-time access. Throws if the dataset has no labels at all.
  std::span<const int> evaluation_labels() const;

  // Same examples under another domain id.
  LabeledDataset with_domain(DomainId domain, bool quarantine_labels) const;
  // Rows selected by index, as an input tensor.
  Tensor gather(std::span<const std::size_t> indices) const;
  Tensor as_tensor() const;

 private:
  std::vector<double> features_;
  std::size_t dim_ = 0;
  std::vector<int> labels_;
  DomainId domain_;
  std::size_t class_count_ = 0;
  bool quarantined_ = false;
};

// A covariate shift: rotate the first two coordinates, then translate.
struct DomainTransform {
  std::vector<double> shift;  // empty means no translation
  double rotation = 0.0;      // radians
};

struct BlobSpec {
  std::size_t classes = 3;
  std::size_t dims = 2;
  std::size_t n_per_class = 500;
  std::vector<double> shift{1.5, 0.0};
  double rotation = 0.872664625997164788;  // 50 degrees
  double noise = 0.35;
  double radius = 1.0;  // distance of each class center from the origin
};

struct DomainPair {
  LabeledDataset source;
  LabeledDataset target;
};

// Class centers on a regular simplex (a regular polygon in the first two
// coordinates when dims < classes - 1).
std::vector<double> class_centers(std::size_t classes, std::size_t dims, double radius);

// Source: isotropic Gaussian clusters around the class centers. Target: the
// same clusters rotated then shifted. Target labels are quarantined.
DomainPair make_shifted_blobs(const BlobSpec& spec, std::uint64_t seed);

struct MultiSourceSpec {
  std::size_t classes = 3;
  std::size_t dims = 2;
  std::size_t n_per_class = 500;
  double noise = 0.35;
  double radius = 1.0;
  std::vector<DomainTransform> sources;
  DomainTransform target;
};

struct MultiSourceData {
  std::vector<LabeledDataset> sources;  // DomainId::source(i)
  LabeledDataset target;                // DomainId::target(sources.size())
};

MultiSourceData make_multi_source_blobs(const MultiSourceSpec& spec, std::uint64_t seed);

// Concatenates sources into one dataset tagged DomainId::source(0).
LabeledDataset merge_sources(std::span<const LabeledDataset> sources);

// One single-domain mini-batch.
struct DomainBatch {
  DomainId domain;
  std::vector<std::size_t> indices;  // rows of the originating dataset
  Tensor inputs;                     // [batch x dim] constant
  std::vector<int> labels;           // empty for quarantined datasets
};

// Round-robin per-domain batcher: successive next() calls cycle through the
// datasets in order. Each domain is reshuffled at its own epoch boundary and
// trailing examples that do not fill a batch are dropped. Datasets must
// outlive the stream.
class BatchStream {
 public:
  BatchStream(std::vector<std::reference_wrapper<const LabeledDataset>> datasets,
              std::size_t batch_size, std::uint64_t seed);

  DomainBatch next();
  // Batch for a specific slot; does not advance the round-robin cursor.
  DomainBatch next_for(std::size_t slot);

  std::size_t domain_count() const { return slots_.size(); }
  std::size_t batch_size() const { return batch_size_; }
  // Completed epochs of a slot.
  std::size_t epoch(std::size_t slot) const { return slots_.at(slot).epoch; }
  std::size_t batches_per_epoch(std::size_t slot) const;

 private:
  struct Slot {
    const LabeledDataset* data;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::size_t epoch = 0;
    std::mt19937_64 rng;
  };
  void reshuffle(Slot& slot);

  std::vector<Slot> slots_;
  std::size_t batch_size_;
  std::size_t round_robin_ = 0;
};

BatchStream per_domain_batches(
    std::vector<std::reference_wrapper<const LabeledDataset>> datasets,
    std::size_t batch_size, std::uint64_t seed);

struct Metrics {
  std::vector<double> per_class;  // accuracy in percent; NaN for empty classes
  double mean_per_class = 0.0;    // over non-empty classes
  double overall = 0.0;           // percent
};

// Eval-mode softmax scores [N x C] for every example, using the branch of
// `domain` (defaults to the dataset's own domain).
std::vector<double> predict_scores(const Network& network, const LabeledDataset& data);
std::vector<double> predict_scores(const Network& network, const LabeledDataset& data,
                                   DomainId domain);

Metrics metrics_from_predictions(std::span<const int> predicted,
                                 std::span<const int> truth, std::size_t classes);

// Eval-mode forward over the whole target set with the target's branch.
Metrics evaluate_transductive(const Network& network, const LabeledDataset& target);

// CSV with header f0..f{d-1},label,domain. Domain cells are "source<i>" or
// "target"; label is -1 when absent.
void write_dataset_csv(std::ostream& out, std::span<const LabeledDataset> datasets);
// Groups rows by domain: sources in index order, then the target (labels
// quarantined).
std::vector<LabeledDataset> read_dataset_csv(std::istream& in, std::size_t class_count = 0);

}  // namespace dsbn
