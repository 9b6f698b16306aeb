#include "dsbn/data.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

#include "dsbn/errors.hpp"

namespace dsbn {

// ---- LabeledDataset ----------------------------------------------------------

LabeledDataset::LabeledDataset(std::vector<double> features, std::size_t dim,
                               std::vector<int> labels, DomainId domain,
                               std::size_t class_count, bool quarantine_labels)
    : features_(std::move(features)),
      dim_(dim),
      labels_(std::move(labels)),
      domain_(domain),
      class_count_(class_count),
      quarantined_(quarantine_labels) {
  if (dim_ == 0 || features_.size() % dim_ != 0)
    throw DimensionError("dataset feature buffer is not a multiple of dim " +
                         std::to_string(dim_));
  if (!labels_.empty() && labels_.size() != size())
    throw DimensionError("dataset has " + std::to_string(size()) + " rows but " +
                         std::to_string(labels_.size()) + " labels");
  for (int y : labels_)
    if (y < 0 || static_cast<std::size_t>(y) >= class_count_)
      throw LabelRangeError("dataset label " + std::to_string(y) + " outside [0, " +
                            std::to_string(class_count_) + ")");
}

std::span<const double> LabeledDataset::row(std::size_t i) const {
  return std::span<const double>(features_).subspan(i * dim_, dim_);
}

std::span<const int> LabeledDataset::labels() const {
  if (quarantined_)
    throw LabelQuarantineError("labels of " + domain_.to_string() +
                               " are reserved for evaluation");
  return labels_;
}

std::span<const int> LabeledDataset::evaluation_labels() const {
  if (labels_.empty())
    throw LabelQuarantineError(domain_.to_string() + " dataset carries no labels");
  return labels_;
}

LabeledDataset LabeledDataset::with_domain(DomainId domain, bool quarantine_labels) const {
  LabeledDataset copy = *this;
  copy.domain_ = domain;
  copy.quarantined_ = quarantine_labels;
  return copy;
}

Tensor LabeledDataset::gather(std::span<const std::size_t> indices) const {
  std::vector<double> values;
  values.reserve(indices.size() * dim_);
  for (std::size_t i : indices) {
    const auto r = row(i);
    values.insert(values.end(), r.begin(), r.end());
  }
  return Tensor::constant({indices.size(), dim_}, std::move(values));
}

Tensor LabeledDataset::as_tensor() const {
  return Tensor::constant({size(), dim_}, features_);
}

// ---- generation --------------------------------------------------------------

std::vector<double> class_centers(std::size_t classes, std::size_t dims, double radius) {
  std::vector<double> centers(classes * dims, 0.0);
  if (classes <= 3 || dims + 1 < classes) {
    // Regular polygon in the first two coordinates (the 2-D regular simplex
    // for up to three classes).
    for (std::size_t c = 0; c < classes; ++c) {
      const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) /
                           static_cast<double>(classes);
      centers[c * dims] = radius * std::cos(angle);
      centers[c * dims + 1] = radius * std::sin(angle);
    }
    return centers;
  }
  // e_c minus the centroid spans a (classes-1)-dim subspace of R^classes;
  // express each vertex in an orthonormal basis of it.
  const std::size_t k = classes;
  std::vector<std::vector<double>> vertices(k, std::vector<double>(k));
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t j = 0; j < k; ++j)
      vertices[c][j] = (c == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(k);
  std::vector<std::vector<double>> basis;
  for (std::size_t c = 0; c + 1 < k; ++c) {
    std::vector<double> b = vertices[c];
    for (const auto& q : basis) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += b[j] * q[j];
      for (std::size_t j = 0; j < k; ++j) b[j] -= dot * q[j];
    }
    double norm = 0.0;
    for (double v : b) norm += v * v;
    norm = std::sqrt(norm);
    for (double& v : b) v /= norm;
    basis.push_back(std::move(b));
  }
  const double vertex_norm = std::sqrt(1.0 - 1.0 / static_cast<double>(k));
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t a = 0; a < basis.size(); ++a) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += vertices[c][j] * basis[a][j];
      centers[c * dims + a] = radius * dot / vertex_norm;
    }
  return centers;
}

namespace {

void validate_geometry(std::size_t classes, std::size_t dims, std::size_t n_per_class,
                       double noise, double radius) {
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (dims < 2) throw ConfigError("need at least 2 feature dimensions");
  if (n_per_class < 1) throw ConfigError("need at least 1 example per class");
  if (!(noise >= 0.0) || !std::isfinite(noise))
    throw ConfigError("noise must be finite and nonnegative");
  if (!(radius > 0.0) || !std::isfinite(radius))
    throw ConfigError("cluster radius must be finite and positive");
}

void validate_transform(const DomainTransform& t, std::size_t dims) {
  if (t.shift.size() > dims)
    throw ConfigError("shift has " + std::to_string(t.shift.size()) +
                      " components for " + std::to_string(dims) + " dimensions");
  if (!std::isfinite(t.rotation)) throw ConfigError("rotation must be finite");
  for (double s : t.shift)
    if (!std::isfinite(s)) throw ConfigError("shift must be finite");
}

LabeledDataset sample_domain(const std::vector<double>& centers, std::size_t classes,
                             std::size_t dims, std::size_t n_per_class, double noise,
                             const DomainTransform& transform, DomainId domain,
                             bool quarantine, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> features;
  std::vector<int> labels;
  features.reserve(classes * n_per_class * dims);
  labels.reserve(classes * n_per_class);
  const double cr = std::cos(transform.rotation);
  const double sr = std::sin(transform.rotation);
  std::vector<double> x(dims);
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      for (std::size_t j = 0; j < dims; ++j)
        x[j] = centers[c * dims + j] + noise * gauss(rng);
      const double x0 = cr * x[0] - sr * x[1];
      const double x1 = sr * x[0] + cr * x[1];
      x[0] = x0;
      x[1] = x1;
      for (std::size_t j = 0; j < transform.shift.size(); ++j) x[j] += transform.shift[j];
      features.insert(features.end(), x.begin(), x.end());
      labels.push_back(static_cast<int>(c));
    }
  }
  return LabeledDataset(std::move(features), dims, std::move(labels), domain, classes,
                        quarantine);
}

}  // namespace

DomainPair make_shifted_blobs(const BlobSpec& spec, std::uint64_t seed) {
  validate_geometry(spec.classes, spec.dims, spec.n_per_class, spec.noise, spec.radius);
  const DomainTransform target_transform{spec.shift, spec.rotation};
  validate_transform(target_transform, spec.dims);
  std::mt19937_64 rng(seed);
  const auto centers = class_centers(spec.classes, spec.dims, spec.radius);
  LabeledDataset source = sample_domain(centers, spec.classes, spec.dims, spec.n_per_class,
                                        spec.noise, DomainTransform{}, DomainId::source(0),
                                        false, rng);
  LabeledDataset target = sample_domain(centers, spec.classes, spec.dims, spec.n_per_class,
                                        spec.noise, target_transform, DomainId::target(1),
                                        true, rng);
  return {std::move(source), std::move(target)};
}

MultiSourceData make_multi_source_blobs(const MultiSourceSpec& spec, std::uint64_t seed) {
  validate_geometry(spec.classes, spec.dims, spec.n_per_class, spec.noise, spec.radius);
  if (spec.sources.empty()) throw ConfigError("need at least one source domain");
  for (const auto& t : spec.sources) validate_transform(t, spec.dims);
  validate_transform(spec.target, spec.dims);
  std::mt19937_64 rng(seed);
  const auto centers = class_centers(spec.classes, spec.dims, spec.radius);
  MultiSourceData out;
  const auto num_sources = static_cast<std::uint32_t>(spec.sources.size());
  for (std::uint32_t i = 0; i < num_sources; ++i)
    out.sources.push_back(sample_domain(centers, spec.classes, spec.dims, spec.n_per_class,
                                        spec.noise, spec.sources[i], DomainId::source(i),
                                        false, rng));
  out.target = sample_domain(centers, spec.classes, spec.dims, spec.n_per_class, spec.noise,
                             spec.target, DomainId::target(num_sources), true, rng);
  return out;
}

LabeledDataset merge_sources(std::span<const LabeledDataset> sources) {
  if (sources.empty()) throw ConfigError("nothing to merge");
  std::vector<double> features;
  std::vector<int> labels;
  for (const auto& s : sources) {
    if (s.dim() != sources[0].dim() || s.class_count() != sources[0].class_count())
      throw DimensionError("merged sources must share dim and class count");
    features.insert(features.end(), s.features().begin(), s.features().end());
    const auto l = s.labels();
    labels.insert(labels.end(), l.begin(), l.end());
  }
  return LabeledDataset(std::move(features), sources[0].dim(), std::move(labels),
                        DomainId::source(0), sources[0].class_count(), false);
}

// ---- batching ----------------------------------------------------------------

BatchStream::BatchStream(std::vector<std::reference_wrapper<const LabeledDataset>> datasets,
                         std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size) {
  if (batch_size < 2)
    throw ConfigError("batch size must be at least 2 for train-mode normalization");
  if (datasets.empty()) throw ConfigError("batch stream needs at least one dataset");
  for (std::size_t s = 0; s < datasets.size(); ++s) {
    const LabeledDataset& d = datasets[s];
    if (d.size() < batch_size)
      throw ConfigError(d.domain().to_string() + " has " + std::to_string(d.size()) +
                        " examples, fewer than the batch size " +
                        std::to_string(batch_size));
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(s)};
    Slot slot{&d, {}, 0, 0, std::mt19937_64(seq)};
    slot.order.resize(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) slot.order[i] = i;
    reshuffle(slot);
    slots_.push_back(std::move(slot));
  }
}

void BatchStream::reshuffle(Slot& slot) {
  std::shuffle(slot.order.begin(), slot.order.end(), slot.rng);
  slot.cursor = 0;
}

std::size_t BatchStream::batches_per_epoch(std::size_t slot) const {
  return slots_.at(slot).data->size() / batch_size_;
}

DomainBatch BatchStream::next() {
  DomainBatch batch = next_for(round_robin_);
  round_robin_ = (round_robin_ + 1) % slots_.size();
  return batch;
}

DomainBatch BatchStream::next_for(std::size_t s) {
  Slot& slot = slots_.at(s);
  if (slot.cursor + batch_size_ > slot.order.size()) {
    ++slot.epoch;
    reshuffle(slot);
  }
  DomainBatch batch;
  batch.domain = slot.data->domain();
  batch.indices.assign(slot.order.begin() + static_cast<std::ptrdiff_t>(slot.cursor),
                       slot.order.begin() + static_cast<std::ptrdiff_t>(slot.cursor + batch_size_));
  slot.cursor += batch_size_;
  batch.inputs = slot.data->gather(batch.indices);
  if (!slot.data->labels_quarantined() && slot.data->has_labels()) {
    const auto labels = slot.data->labels();
    batch.labels.reserve(batch_size_);
    for (std::size_t i : batch.indices) batch.labels.push_back(labels[i]);
  }
  if (batch.domain != slot.data->domain() || batch.indices.size() != batch_size_)
    throw ContractError("batch stream produced a malformed batch");
  return batch;
}

BatchStream per_domain_batches(
    std::vector<std::reference_wrapper<const LabeledDataset>> datasets,
    std::size_t batch_size, std::uint64_t seed) {
  return BatchStream(std::move(datasets), batch_size, seed);
}

// ---- evaluation --------------------------------------------------------------

std::vector<double> predict_scores(const Network& network, const LabeledDataset& data) {
  return predict_scores(network, data, data.domain());
}

std::vector<double> predict_scores(const Network& network, const LabeledDataset& data,
                                   DomainId domain) {
  const Tensor logits = network.evaluate(data.as_tensor(), domain).output;
  return softmax_rows(logits.values(), logits.cols());
}

Metrics metrics_from_predictions(std::span<const int> predicted,
                                 std::span<const int> truth, std::size_t classes) {
  if (predicted.size() != truth.size())
    throw DimensionError("prediction and label counts differ");
  std::vector<std::size_t> hits(classes, 0);
  std::vector<std::size_t> totals(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto y = static_cast<std::size_t>(truth[i]);
    ++totals.at(y);
    if (predicted[i] == truth[i]) {
      ++hits[y];
      ++correct;
    }
  }
  Metrics m;
  m.per_class.resize(classes);
  double acc_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (totals[c] == 0) {
      m.per_class[c] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    m.per_class[c] = 100.0 * static_cast<double>(hits[c]) / static_cast<double>(totals[c]);
    acc_sum += m.per_class[c];
    ++present;
  }
  m.mean_per_class = present == 0 ? 0.0 : acc_sum / static_cast<double>(present);
  m.overall = truth.empty() ? 0.0
                            : 100.0 * static_cast<double>(correct) /
                                  static_cast<double>(truth.size());
  return m;
}

Metrics evaluate_transductive(const Network& network, const LabeledDataset& target) {
  const std::size_t classes = target.class_count();
  const auto scores = predict_scores(network, target);
  std::vector<int> predicted(target.size());
  for (std::size_t i = 0; i < predicted.size(); ++i)
    predicted[i] = static_cast<int>(
        argmax(std::span<const double>(scores).subspan(i * classes, classes)));
  return metrics_from_predictions(predicted, target.evaluation_labels(), classes);
}

// ---- CSV ---------------------------------------------------------------------

void write_dataset_csv(std::ostream& out, std::span<const LabeledDataset> datasets) {
  if (datasets.empty()) throw ConfigError("no datasets to write");
  const std::size_t dim = datasets[0].dim();
  for (std::size_t j = 0; j < dim; ++j) out << 'f' << j << ',';
  out << "label,domain\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& d : datasets) {
    if (d.dim() != dim) throw DimensionError("datasets in one CSV must share dim");
    const std::span<const int> labels =
        d.has_labels() ? d.evaluation_labels() : std::span<const int>{};
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (double v : d.row(i)) out << v << ',';
      out << (labels.empty() ? -1 : labels[i]) << ',' << d.domain().to_string() << '\n';
    }
  }
}

std::vector<LabeledDataset> read_dataset_csv(std::istream& in, std::size_t class_count) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty dataset CSV");
  std::size_t columns = 1 + static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (columns < 3) throw FormatError("dataset CSV needs feature, label and domain columns");
  const std::size_t dim = columns - 2;

  struct Rows {
    std::vector<double> features;
    std::vector<int> labels;
    bool any_missing = false;
  };
  std::map<std::string, Rows> by_domain;
  int max_label = -1;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream cells(line);
    std::string cell;
    std::vector<std::string> parts;
    while (std::getline(cells, cell, ',')) parts.push_back(cell);
    if (parts.size() != columns)
      throw FormatError("line " + std::to_string(line_no) + ": expected " +
                        std::to_string(columns) + " cells");
    Rows& rows = by_domain[parts.back()];
    for (std::size_t j = 0; j < dim; ++j) {
      char* end = nullptr;
      const double v = std::strtod(parts[j].c_str(), &end);
      if (end == parts[j].c_str())
        throw FormatError("line " + std::to_string(line_no) + ": bad number '" + parts[j] + "'");
      rows.features.push_back(v);
    }
    const int label = std::stoi(parts[dim]);
    rows.labels.push_back(label);
    rows.any_missing |= label < 0;
    max_label = std::max(max_label, label);
  }

  std::uint32_t num_sources = 0;
  for (const auto& [name, rows] : by_domain)
    if (name != "target") {
      if (name.rfind("source", 0) != 0)
        throw FormatError("unknown domain '" + name + "' in dataset CSV");
      ++num_sources;
    }
  const std::size_t classes =
      class_count != 0 ? class_count : static_cast<std::size_t>(max_label + 1);

  std::vector<LabeledDataset> out;
  for (std::uint32_t i = 0; i < num_sources; ++i) {
    const auto it = by_domain.find("source" + std::to_string(i));
    if (it == by_domain.end())
      throw FormatError("source indices in dataset CSV are not contiguous from 0");
    if (it->second.any_missing) throw FormatError("source rows must carry labels");
    out.emplace_back(std::move(it->second.features), dim, std::move(it->second.labels),
                     DomainId::source(i), classes, false);
  }
  if (const auto it = by_domain.find("target"); it != by_domain.end()) {
    std::vector<int> labels = it->second.any_missing ? std::vector<int>{}
                                                     : std::move(it->second.labels);
    out.emplace_back(std::move(it->second.features), dim, std::move(labels),
                     DomainId::target(num_sources), classes, true);
  }
  return out;
}

}  // namespace dsbn
