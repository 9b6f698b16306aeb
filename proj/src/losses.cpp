#include "dsbn/losses.hpp"

#include <algorithm>
#include <cmath>

#include "dsbn/errors.hpp"

namespace dsbn {

CentroidBank CentroidBank::fresh(std::size_t classes, std::size_t dim, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0))
    throw ConfigError("centroid EMA factor must lie in [0, 1]");
  return {classes, dim, theta, std::vector<double>(classes * dim, 0.0),
          std::vector<double>(classes * dim, 0.0)};
}

ClassPrior ClassPrior::from_labels(std::span<const int> labels, std::size_t classes) {
  ClassPrior prior{std::vector<std::size_t>(classes, 0), labels.size()};
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw LabelRangeError("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(classes) + ")");
    ++prior.counts[static_cast<std::size_t>(y)];
  }
  return prior;
}

double ClassPrior::fraction(std::size_t c) const {
  return static_cast<double>(counts.at(c)) / static_cast<double>(total);
}

double ClassPrior::max_fraction() const {
  const auto it = std::max_element(counts.begin(), counts.end());
  return static_cast<double>(*it) / static_cast<double>(total);
}

namespace {

double prior_weight(const ClassPrior& prior, int y, const char* which) {
  if (prior.total == 0 || prior.counts.empty())
    throw DegeneratePriorError(std::string(which) + " prior is empty");
  if (y < 0 || static_cast<std::size_t>(y) >= prior.counts.size())
    throw LabelRangeError("class " + std::to_string(y) + " outside the prior");
  const std::size_t count = prior.counts[static_cast<std::size_t>(y)];
  if (count == 0)
    throw DegeneratePriorError(std::string(which) + " prior has no mass on class " +
                               std::to_string(y));
  // max_c n_c / n_y: the shared 1/n factor cancels, keeping w(y) * p(y) exact.
  const std::size_t max_count = *std::max_element(prior.counts.begin(), prior.counts.end());
  return static_cast<double>(max_count) / static_cast<double>(count);
}

// Constant matrix A [classes x n] with A[c, i] = scale / n_c for examples of a
// class present in the batch; `present[c]` flags those classes.
Tensor assignment_matrix(std::span<const int> labels, std::size_t classes,
                         double scale_factor, std::vector<bool>& present) {
  const std::size_t n = labels.size();
  std::vector<std::size_t> counts(classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw LabelRangeError("label " + std::to_string(y) + " outside [0, " +
                            std::to_string(classes) + ")");
    ++counts[static_cast<std::size_t>(y)];
  }
  present.assign(classes, false);
  std::vector<double> a(classes * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    a[c * n + i] = scale_factor / static_cast<double>(counts[c]);
    present[c] = true;
  }
  return Tensor::constant({classes, n}, std::move(a));
}

// theta * stored + (1 - theta) * batch centroid for present classes; stored
// value for absent ones. Writes the detached result back into `stored`.
Tensor blend_centroids(const Tensor& features, std::span<const int> labels,
                       std::vector<double>& stored, std::size_t classes,
                       std::size_t dim, double theta) {
  std::vector<bool> present;
  const Tensor a = assignment_matrix(labels, classes, 1.0 - theta, present);
  std::vector<double> kept(classes * dim);
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t j = 0; j < dim; ++j)
      kept[c * dim + j] = (present[c] ? theta : 1.0) * stored[c * dim + j];
  Tensor blended = add(Tensor::constant({classes, dim}, std::move(kept)), matmul(a, features));
  const auto v = blended.values();
  if (std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); }))
    stored.assign(v.begin(), v.end());
  return blended;
}

}  // namespace

double cpua_source_weights(const ClassPrior& prior, int y) {
  return prior_weight(prior, y, "source");
}

double cpua_target_weights(const ClassPrior& prior, int pseudo_y) {
  return prior_weight(prior, pseudo_y, "target pseudo-label");
}

std::vector<double> class_weights(const ClassPrior& prior, std::span<const int> labels) {
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) w[i] = prior_weight(prior, labels[i], "class");
  return w;
}

std::vector<int> argmax_labels(const Tensor& logits) {
  const std::size_t c = logits.cols();
  std::vector<int> labels(logits.rows());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<int>(argmax(logits.values().subspan(i * c, c)));
  return labels;
}

Tensor domain_adversarial_loss(const Tensor& feat_s, const Tensor& feat_t,
                               Network& discriminator, double scale_factor) {
  const std::vector<double> ws(feat_s.rows(), 1.0);
  const std::vector<double> wt(feat_t.rows(), 1.0);
  return domain_adversarial_loss(feat_s, feat_t, discriminator, scale_factor, ws, wt);
}

Tensor domain_adversarial_loss(const Tensor& feat_s, const Tensor& feat_t,
                               Network& discriminator, double scale_factor,
                               std::span<const double> weights_s,
                               std::span<const double> weights_t) {
  // The discriminator carries no normalization, so the domain argument is inert.
  const DomainId any = DomainId::source(0);
  const Tensor score_s =
      discriminator.forward(grad_reverse(feat_s, scale_factor), any, Mode::kTrain).output;
  const Tensor score_t =
      discriminator.forward(grad_reverse(feat_t, scale_factor), any, Mode::kTrain).output;
  const std::vector<int> ones(feat_s.rows(), 1);
  const std::vector<int> zeros(feat_t.rows(), 0);
  return add(weighted_sigmoid_bce(score_s, ones, weights_s),
             weighted_sigmoid_bce(score_t, zeros, weights_t));
}

Tensor semantic_matching_loss(const Tensor& feat_s, std::span<const int> labels_s,
                              const Tensor& feat_t,
                              std::span<const int> pseudo_labels_t,
                              CentroidBank& bank) {
  if (feat_s.cols() != bank.dim || feat_t.cols() != bank.dim)
    throw DimensionError("semantic matching: feature width does not match the bank (" +
                         std::to_string(bank.dim) + ")");
  if (feat_s.rows() != labels_s.size() || feat_t.rows() != pseudo_labels_t.size())
    throw DimensionError("semantic matching: label count differs from batch size");
  const Tensor cs = blend_centroids(feat_s, labels_s, bank.source, bank.classes,
                                    bank.dim, bank.theta);
  const Tensor ct = blend_centroids(feat_t, pseudo_labels_t, bank.target,
                                    bank.classes, bank.dim, bank.theta);
  return square_sum(sub(cs, ct));
}

MstnLoss mstn_total_loss(const SourceView& source, const TargetView& target,
                         Network& discriminator, CentroidBank& bank,
                         double lambda, double grl_scale) {
  if (!(lambda >= 0.0)) throw ContractError("adaptation weight must be nonnegative");
  MstnLoss out;
  out.classification = softmax_cross_entropy(source.logits, source.labels);
  out.adversarial =
      domain_adversarial_loss(source.features, target.features, discriminator, grl_scale);
  const std::vector<int> pseudo =
      target.pseudo_labels.empty() ? argmax_labels(target.logits) : target.pseudo_labels;
  out.semantic = semantic_matching_loss(source.features, source.labels,
                                        target.features, pseudo, bank);
  out.total = add(out.classification,
                  add(scale(out.adversarial, lambda), scale(out.semantic, lambda)));
  return out;
}

CpuaLoss cpua_total_loss(const SourceView& source, const TargetView& target,
                         const CpuaPriors& priors, Network& discriminator,
                         double lambda, double grl_scale) {
  if (!(lambda >= 0.0)) throw ContractError("adaptation weight must be nonnegative");
  const std::vector<double> ws = class_weights(priors.source, source.labels);
  const std::vector<int> pseudo =
      target.pseudo_labels.empty() ? argmax_labels(target.logits) : target.pseudo_labels;
  const std::vector<double> wt = class_weights(priors.target, pseudo);

  CpuaLoss out;
  out.classification = weighted_softmax_cross_entropy(source.logits, source.labels, ws);
  out.adversarial = domain_adversarial_loss(softmax(source.logits), softmax(target.logits),
                                            discriminator, grl_scale, ws, wt);
  out.total = add(out.classification, scale(out.adversarial, lambda));
  return out;
}

Tensor multi_source_total_loss(std::span<const SourceView> sources,
                               const TargetView& target,
                               const PerSourceLoss& per_source) {
  if (sources.empty()) throw ConfigError("multi-source loss needs at least one source");
  Tensor total = per_source(sources[0], 0, target);
  for (std::size_t i = 1; i < sources.size(); ++i)
    total = add(total, per_source(sources[i], i, target));
  return sources.size() == 1 ? total
                             : scale(total, 1.0 / static_cast<double>(sources.size()));
}

}  // namespace dsbn
