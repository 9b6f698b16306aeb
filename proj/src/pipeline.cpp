#include "dsbn/pipeline.hpp"

#include <cmath>

#include "dsbn/errors.hpp"
#include "dsbn/losses.hpp"

namespace dsbn {

std::string_view to_string(Baseline b) {
  return b == Baseline::kMstn ? "mstn" : "cpua";
}

std::string_view to_string(NormMode m) { return m == NormMode::kBn ? "bn" : "dsbn"; }

// ---- PseudoLabelBank -----------------------------------------------------------

PseudoLabelBank::PseudoLabelBank(std::vector<double> scores, std::size_t classes)
    : scores_(std::move(scores)), classes_(classes) {
  if (classes_ == 0 || scores_.size() % classes_ != 0)
    throw DimensionError("pseudo-label bank rows must have " + std::to_string(classes_) +
                         " scores");
  for (std::size_t i = 0; i < size(); ++i) {
    double total = 0.0;
    for (double v : row(i)) {
      if (!(v >= 0.0)) throw ContractError("pseudo-label scores must be nonnegative");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-6)
      throw ContractError("pseudo-label row " + std::to_string(i) +
                          " is not a probability distribution");
  }
}

PseudoLabelBank PseudoLabelBank::from_network(const Network& network,
                                              const LabeledDataset& target) {
  return PseudoLabelBank(predict_scores(network, target), target.class_count());
}

std::span<const double> PseudoLabelBank::row(std::size_t example_id) const {
  if (example_id >= size())
    throw ContractError("example " + std::to_string(example_id) + " not in the bank");
  return std::span<const double>(scores_).subspan(example_id * classes_, classes_);
}

std::vector<int> PseudoLabelBank::hard_labels() const {
  std::vector<int> labels(size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    labels[i] = static_cast<int>(argmax(row(i)));
  return labels;
}

std::size_t refine_pseudo_label(std::span<const double> stage1_scores,
                                std::span<const double> current_scores, double lambda) {
  if (stage1_scores.size() != current_scores.size() || stage1_scores.empty())
    throw DimensionError("score vectors differ in class count (" +
                         std::to_string(stage1_scores.size()) + " vs " +
                         std::to_string(current_scores.size()) + ")");
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ContractError("pseudo-label blend weight must lie in [0, 1]");
  std::size_t best = 0;
  double best_score = 0.0;
  for (std::size_t c = 0; c < stage1_scores.size(); ++c) {
    const double blended = (1.0 - lambda) * stage1_scores[c] + lambda * current_scores[c];
    if (c == 0 || blended > best_score) {
      best = c;
      best_score = blended;
    }
  }
  return best;
}

std::size_t refine_pseudo_label(const PseudoLabelBank& bank,
                                std::span<const double> current_scores,
                                std::size_t example_id, double lambda) {
  return refine_pseudo_label(bank.row(example_id), current_scores, lambda);
}

// ---- shared training plumbing ----------------------------------------------------

namespace {

Network build_classifier(MlpSpec spec, NormMode norm, const DomainData& data,
                         std::mt19937_64& rng) {
  spec.input_dim = data.target.dim();
  spec.output_dim = data.target.class_count();
  spec.batch_norm = true;
  Network net = make_mlp(spec, rng);
  if (norm == NormMode::kBn) return net;
  const auto ids = domain_set(static_cast<std::uint32_t>(data.sources.size()));
  return convert_bn_to_dsbn(net, ids);
}

void validate_data(const DomainData& data) {
  if (data.sources.empty()) throw ConfigError("training needs at least one source domain");
  const auto num_sources = static_cast<std::uint32_t>(data.sources.size());
  for (std::uint32_t i = 0; i < num_sources; ++i) {
    const auto& s = data.sources[i];
    if (s.domain() != DomainId::source(i))
      throw ConfigError("source " + std::to_string(i) + " is tagged " + s.domain().to_string());
    if (s.size() == 0 || s.dim() != data.target.dim() ||
        s.class_count() != data.target.class_count())
      throw ConfigError("source " + std::to_string(i) + " does not match the target layout");
  }
  if (data.target.domain() != DomainId::target(num_sources))
    throw ConfigError("target dataset is tagged " + data.target.domain().to_string());
  if (data.target.size() == 0) throw ConfigError("target dataset is empty");
}

std::vector<std::reference_wrapper<const LabeledDataset>> stream_order(const DomainData& data) {
  std::vector<std::reference_wrapper<const LabeledDataset>> sets(data.sources.begin(),
                                                                 data.sources.end());
  sets.emplace_back(data.target);
  return sets;
}

std::vector<Parameter> concat(std::vector<Parameter> a, const std::vector<Parameter>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Tracks consecutive non-finite losses.
class DivergenceGuard {
 public:
  // Returns true when the step should be applied.
  bool accept(double loss, std::int64_t step) {
    if (std::isfinite(loss)) {
      bad_ = 0;
      return true;
    }
    if (++bad_ >= kDivergencePatience)
      throw TrainingFailure("loss non-finite for " + std::to_string(bad_) +
                                " consecutive steps",
                            step);
    return false;
  }

 private:
  int bad_ = 0;
};

void notify(const TrainObserver& observer, const Network& model, std::int64_t step,
            std::int64_t max_iters) {
  if (!observer.on_eval) return;
  const bool last = step == max_iters;
  if (last || (observer.every > 0 && step % observer.every == 0)) observer.on_eval(model, step);
}

}  // namespace

// ---- stage 1 -------------------------------------------------------------------

Stage1Result train_stage1(const Stage1Config& config, const DomainData& data,
                          std::mt19937_64& rng, const TrainObserver& observer) {
  validate_data(data);
  const std::size_t classes = data.target.class_count();
  const std::size_t num_sources = data.sources.size();
  const DomainId target_id = data.target.domain();

  Network classifier = build_classifier(config.model, config.norm, data, rng);
  MlpSpec disc_spec;
  disc_spec.input_dim =
      config.baseline == Baseline::kMstn ? classifier.feature_dim() : classes;
  disc_spec.hidden = {config.discriminator_width};
  disc_spec.output_dim = 1;
  disc_spec.batch_norm = false;
  Network discriminator = make_mlp(disc_spec, rng);

  BatchStream stream(stream_order(data), config.batch_size, rng());
  const std::size_t target_slot = num_sources;

  std::vector<CentroidBank> banks;
  std::vector<ClassPrior> source_priors;
  for (const auto& s : data.sources) {
    banks.push_back(CentroidBank::fresh(classes, classifier.feature_dim(), config.centroid_theta));
    source_priors.push_back(ClassPrior::from_labels(s.labels(), classes));
  }
  // CPUA pseudo-labels over the whole target set, refreshed once per target epoch.
  std::vector<int> target_assignment;
  ClassPrior target_prior;
  std::size_t assignment_epoch = static_cast<std::size_t>(-1);

  const auto params = concat(classifier.parameters(), discriminator.parameters());
  OptimizerState opt;
  DivergenceGuard guard;
  const auto max_iters = config.schedule.max_iters;

  for (std::int64_t step = 0; step < max_iters; ++step) {
    const double p = training_progress(step, max_iters);
    const double lr = lr_schedule(p, config.schedule);
    const double lambda =
        config.fixed_lambda.value_or(lambda_schedule(p, config.schedule.gamma_adapt));

    std::vector<SourceView> sources;
    sources.reserve(num_sources);
    for (std::size_t s = 0; s < num_sources; ++s) {
      DomainBatch batch = stream.next_for(s);
      auto fr = classifier.forward(batch.inputs, batch.domain, Mode::kTrain);
      sources.push_back({fr.features, fr.output, std::move(batch.labels)});
    }
    DomainBatch tbatch = stream.next_for(target_slot);

    TargetView target;
    if (config.baseline == Baseline::kCpua) {
      if (stream.epoch(target_slot) != assignment_epoch) {
        const PseudoLabelBank current = PseudoLabelBank::from_network(classifier, data.target);
        target_assignment = current.hard_labels();
        target_prior = ClassPrior::from_labels(target_assignment, classes);
        assignment_epoch = stream.epoch(target_slot);
      }
      for (std::size_t i : tbatch.indices) target.pseudo_labels.push_back(target_assignment[i]);
    }
    auto tfr = classifier.forward(tbatch.inputs, target_id, Mode::kTrain);
    target.features = tfr.features;
    target.logits = tfr.output;

    PerSourceLoss per_source;
    if (config.baseline == Baseline::kMstn) {
      per_source = [&](const SourceView& s, std::size_t i, const TargetView& t) {
        return mstn_total_loss(s, t, discriminator, banks[i], lambda, config.grl_scale).total;
      };
    } else {
      per_source = [&](const SourceView& s, std::size_t i, const TargetView& t) {
        return cpua_total_loss(s, t, CpuaPriors{source_priors[i], target_prior}, discriminator,
                               lambda, config.grl_scale)
            .total;
      };
    }
    const Tensor loss = multi_source_total_loss(sources, target, per_source);

    if (guard.accept(loss.item(), step)) {
      zero_grads(params);
      backward(loss);
      adam_step(params, opt, lr);
    }
    notify(observer, classifier, step + 1, max_iters);
  }

  PseudoLabelBank bank = PseudoLabelBank::from_network(classifier, data.target);
  return {std::move(classifier), std::move(discriminator), std::move(bank), std::move(opt)};
}

// ---- stage 2 -------------------------------------------------------------------

Stage2Result train_stage2(const Network& stage1_model, const PseudoLabelBank& bank,
                          const DomainData& data, const Stage2Config& config,
                          std::mt19937_64& rng, const TrainObserver& observer) {
  validate_data(data);
  const std::size_t classes = data.target.class_count();
  if (bank.size() != data.target.size() || bank.classes() != classes)
    throw ContractError("pseudo-label bank does not cover the target set");
  const std::size_t num_sources = data.sources.size();
  const DomainId target_id = data.target.domain();

  Network model;
  if (config.warm_start) {
    if (stage1_model.dsbn_count() > 0 && config.norm == NormMode::kBn)
      throw ConfigError("cannot warm-start a BN stage-2 model from a DSBN stage-1 model");
    model = stage1_model.clone();
    if (config.norm == NormMode::kDsbn && model.batch_norm_count() > 0)
      model = convert_bn_to_dsbn(model, domain_set(static_cast<std::uint32_t>(num_sources)));
  } else {
    model = build_classifier(config.model, config.norm, data, rng);
  }

  BatchStream stream(stream_order(data), config.batch_size, rng());
  const auto params = model.parameters();
  OptimizerState opt;
  DivergenceGuard guard;
  const auto max_iters = config.schedule.max_iters;

  for (std::int64_t step = 0; step < max_iters; ++step) {
    const double p = training_progress(step, max_iters);
    const double lr = lr_schedule(p, config.schedule);
    const double lambda =
        config.fixed_pseudo_lambda.value_or(lambda_schedule(p, config.schedule.gamma_adapt));

    Tensor source_loss;
    for (std::size_t s = 0; s < num_sources; ++s) {
      DomainBatch batch = stream.next_for(s);
      auto fr = model.forward(batch.inputs, batch.domain, Mode::kTrain);
      Tensor ce = softmax_cross_entropy(fr.output, batch.labels);
      source_loss = s == 0 ? ce : add(source_loss, ce);
    }
    if (num_sources > 1) source_loss = scale(source_loss, 1.0 / static_cast<double>(num_sources));

    DomainBatch tbatch = stream.next_for(num_sources);
    const Tensor current_logits = model.evaluate(tbatch.inputs, target_id).output;
    const auto current = softmax_rows(current_logits.values(), classes);
    std::vector<int> pseudo(tbatch.indices.size());
    for (std::size_t i = 0; i < pseudo.size(); ++i)
      pseudo[i] = static_cast<int>(refine_pseudo_label(
          bank, std::span<const double>(current).subspan(i * classes, classes),
          tbatch.indices[i], lambda));
    auto tfr = model.forward(tbatch.inputs, target_id, Mode::kTrain);
    const Tensor loss = add(source_loss, softmax_cross_entropy(tfr.output, pseudo));

    if (guard.accept(loss.item(), step)) {
      zero_grads(params);
      backward(loss);
      adam_step(params, opt, lr);
    }
    notify(observer, model, step + 1, max_iters);
  }
  return {std::move(model), std::move(opt)};
}

std::vector<Stage2Round> iterate_stage2(
    std::size_t rounds, const Network& stage1_model, const PseudoLabelBank& bank,
    const DomainData& data, const Stage2Config& config, std::mt19937_64& rng,
    const std::function<TrainObserver(std::size_t round)>& observer_for) {
  if (rounds < 1) throw ConfigError("stage 2 needs at least one round");
  std::vector<Stage2Round> out;
  PseudoLabelBank current = bank;
  for (std::size_t r = 0; r < rounds; ++r) {
    const TrainObserver observer = observer_for ? observer_for(r) : TrainObserver{};
    Stage2Result result = train_stage2(stage1_model, current, data, config, rng, observer);
    Metrics metrics;
    if (data.target.has_labels()) metrics = evaluate_transductive(result.model, data.target);
    PseudoLabelBank next = PseudoLabelBank::from_network(result.model, data.target);
    out.push_back({std::move(result.model), std::move(result.optimizer), std::move(current),
                   std::move(metrics)});
    current = std::move(next);
  }
  return out;
}

}  // namespace dsbn
