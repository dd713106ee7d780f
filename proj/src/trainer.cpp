#include "wadg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <tuple>

#include "wadg/seeds.hpp"

namespace wadg {

using nlohmann::json;

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::DeepAll: return "deep-all";
    case AblationMode::NoLD: return "no-ld";
    case AblationMode::NoLMS: return "no-lms";
    case AblationMode::WadgAll: return "wadg-all";
  }
  return "?";
}

AblationMode ablation_mode_from_string(const std::string& s) {
  for (auto m : kAllAblationModes)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + s + "' (expected deep-all, no-ld, no-lms or wadg-all)");
}

bool uses_adversarial(AblationMode mode) { return mode == AblationMode::NoLMS || mode == AblationMode::WadgAll; }
bool uses_metric(AblationMode mode) { return mode == AblationMode::NoLD || mode == AblationMode::WadgAll; }

std::string to_string(LipschitzMode mode) {
  return mode == LipschitzMode::GradientPenalty ? "gradient-penalty" : "weight-clipping";
}

LipschitzMode lipschitz_mode_from_string(const std::string& s) {
  if (s == "gradient-penalty") return LipschitzMode::GradientPenalty;
  if (s == "weight-clipping") return LipschitzMode::WeightClipping;
  throw ConfigError("unknown lipschitz mode '" + s + "'");
}

namespace {

std::string to_string(PositiveRule r) { return r == PositiveRule::MaxNegative ? "max-negative" : "literal-min"; }

PositiveRule positive_rule_from_string(const std::string& s) {
  if (s == "max-negative") return PositiveRule::MaxNegative;
  if (s == "literal-min") return PositiveRule::LiteralMin;
  throw ConfigError("unknown positive rule '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !(critic_learning_rate >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (critic_steps < 1) throw ConfigError("critic_steps must be >= 1");
  if (batch_per_domain < 1) throw ConfigError("batch_per_domain must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam epsilon must be > 0");
  if (!(lambda_s >= 0.0)) throw ConfigError("lambda_s must be >= 0");
  if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
  if (!(gp_coefficient >= 0.0)) throw ConfigError("gp_coefficient must be >= 0");
  if (!(clip_value > 0.0)) throw ConfigError("clip_value must be > 0");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("validation_fraction must lie in (0, 1)");
  if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
  if (embed_layer < 1 || embed_layer > classifier_hidden.size())
    throw ConfigError("embed_layer must index a classifier hidden layer (1.." + std::to_string(classifier_hidden.size()) +
                      ")");
  try {
    ms.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

BundleSpec TrainConfig::bundle_spec(std::size_t n_inputs, std::size_t num_classes, std::size_t num_sources) const {
  auto widths = [](std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
    std::vector<std::size_t> w{in};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(out);
    return w;
  };
  BundleSpec s;
  s.extractor = MlpSpec{widths(n_inputs, extractor_hidden, feature_dim)};
  s.classifier = MlpSpec{widths(feature_dim, classifier_hidden, num_classes)};
  s.critic = MlpSpec{widths(feature_dim, critic_hidden, 1)};
  s.embed_layer = embed_layer;
  s.critic_mode = critic_mode;
  s.num_domains = num_sources;
  return s;
}

json to_json(const TrainConfig& c) {
  return json{{"learning_rate", c.learning_rate},
              {"critic_learning_rate", c.critic_learning_rate},
              {"adam_beta1", c.adam_beta1},
              {"adam_beta2", c.adam_beta2},
              {"adam_epsilon", c.adam_epsilon},
              {"epochs", c.epochs},
              {"batch_per_domain", c.batch_per_domain},
              {"lambda_s", c.lambda_s},
              {"delta", c.delta},
              {"critic_steps", c.critic_steps},
              {"lipschitz", to_string(c.lipschitz)},
              {"gp_coefficient", c.gp_coefficient},
              {"clip_value", c.clip_value},
              {"ms_lambda", c.ms.lambda_center},
              {"ms_epsilon", c.ms.epsilon},
              {"ms_alpha", c.ms.alpha},
              {"ms_beta", c.ms.beta},
              {"positive_rule", to_string(c.positive_rule)},
              {"mode", to_string(c.mode)},
              {"critic_mode", to_string(c.critic_mode)},
              {"seed", c.seed},
              {"patience", c.patience},
              {"validation_fraction", c.validation_fraction},
              {"extractor_hidden", c.extractor_hidden},
              {"feature_dim", c.feature_dim},
              {"classifier_hidden", c.classifier_hidden},
              {"critic_hidden", c.critic_hidden},
              {"embed_layer", c.embed_layer}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const json known = to_json(c);
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
  try {
    auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
    };
    get("learning_rate", c.learning_rate);
    get("critic_learning_rate", c.critic_learning_rate);
    get("adam_beta1", c.adam_beta1);
    get("adam_beta2", c.adam_beta2);
    get("adam_epsilon", c.adam_epsilon);
    get("epochs", c.epochs);
    get("batch_per_domain", c.batch_per_domain);
    get("lambda_s", c.lambda_s);
    get("delta", c.delta);
    get("critic_steps", c.critic_steps);
    get("gp_coefficient", c.gp_coefficient);
    get("clip_value", c.clip_value);
    get("ms_lambda", c.ms.lambda_center);
    get("ms_epsilon", c.ms.epsilon);
    get("ms_alpha", c.ms.alpha);
    get("ms_beta", c.ms.beta);
    get("seed", c.seed);
    get("patience", c.patience);
    get("validation_fraction", c.validation_fraction);
    get("extractor_hidden", c.extractor_hidden);
    get("feature_dim", c.feature_dim);
    get("classifier_hidden", c.classifier_hidden);
    get("critic_hidden", c.critic_hidden);
    get("embed_layer", c.embed_layer);
    if (j.contains("lipschitz")) c.lipschitz = lipschitz_mode_from_string(j.at("lipschitz").get<std::string>());
    if (j.contains("positive_rule")) c.positive_rule = positive_rule_from_string(j.at("positive_rule").get<std::string>());
    if (j.contains("mode")) c.mode = ablation_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("critic_mode")) {
      try {
        c.critic_mode = critic_mode_from_string(j.at("critic_mode").get<std::string>());
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------

Adam::Adam(const Mlp& like, AdamConfig config) : config_(config), m_(zeros_like(like)), v_(zeros_like(like)) {}

void Adam::step(Mlp& params, const Mlp& grads, double direction) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      p[i] -= direction * config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    update(params.layers[l].weight, grads.layers[l].weight, m_.layers[l].weight, v_.layers[l].weight);
    update(params.layers[l].bias, grads.layers[l].bias, m_.layers[l].bias, v_.layers[l].bias);
  }
}

// ---------------------------------------------------------------------------

bool MetricsRecord::same_run_values(const MetricsRecord& o) const {
  return std::tie(epoch, loss_c, loss_d, loss_ms, penalty, source_val_acc, target_acc, lambda_d) ==
         std::tie(o.epoch, o.loss_c, o.loss_d, o.loss_ms, o.penalty, o.source_val_acc, o.target_acc, o.lambda_d);
}

namespace {

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> opt_from(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

json to_json(const MetricsRecord& r) {
  return json{{"epoch", r.epoch},
              {"loss_c", r.loss_c},
              {"loss_d", opt_json(r.loss_d)},
              {"loss_ms", opt_json(r.loss_ms)},
              {"penalty", opt_json(r.penalty)},
              {"source_val_acc", r.source_val_acc},
              {"target_acc", opt_json(r.target_acc)},
              {"lambda_d", r.lambda_d},
              {"wall_seconds", r.wall_seconds}};
}

MetricsRecord metrics_record_from_json(const json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch").get<std::size_t>();
  r.loss_c = j.at("loss_c").get<double>();
  r.loss_d = opt_from(j, "loss_d");
  r.loss_ms = opt_from(j, "loss_ms");
  r.penalty = opt_from(j, "penalty");
  r.source_val_acc = j.at("source_val_acc").get<double>();
  r.target_acc = opt_from(j, "target_acc");
  r.lambda_d = j.at("lambda_d").get<double>();
  r.wall_seconds = j.value("wall_seconds", 0.0);
  return r;
}

void write_metrics_jsonl(const std::filesystem::path& path, const std::vector<MetricsRecord>& records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

std::vector<MetricsRecord> read_metrics_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(metrics_record_from_json(json::parse(line)));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

AdamConfig adam_config(const TrainConfig& c, double lr) { return AdamConfig{lr, c.adam_beta1, c.adam_beta2, c.adam_epsilon}; }

std::vector<Adam> critic_optimizers(const ModelBundle& b, const TrainConfig& c) {
  std::vector<Adam> out;
  for (const auto& critic : b.critics) out.emplace_back(critic, adam_config(c, c.critic_learning_rate));
  return out;
}

std::vector<Tensor> split_by_domain(const Tensor& z, const MixedBatch& batch) {
  std::vector<Tensor> out;
  for (std::size_t d = 0; d < batch.num_domains; ++d) {
    const auto rows = batch.rows_of(d);
    if (!rows.empty()) out.push_back(kernels::select_rows(z, rows));
  }
  return out;
}

}  // namespace

Trainer::Trainer(ModelBundle bundle, TrainConfig config)
    : bundle_(std::move(bundle)),
      config_(std::move(config)),
      adam_f_(bundle_.extractor, adam_config(config_, config_.learning_rate)),
      adam_c_(bundle_.classifier, adam_config(config_, config_.learning_rate)),
      adam_d_(critic_optimizers(bundle_, config_)),
      gp_rng_(derive_seed(config_.seed, "critic.gp")) {
  config_.validate();
  bundle_.validate();
}

double Trainer::lambda_d_at(double progress) const {
  return uses_adversarial(config_.mode) ? lambda_d_schedule(progress, config_.delta) : 0.0;
}

CriticStepResult Trainer::critic_step(const MixedBatch& batch) {
  if (!uses_adversarial(config_.mode)) return {};
  const Tensor z = forward_features(bundle_.extractor, batch.features);
  const std::vector<Tensor> feats = split_by_domain(z, batch);
  if (feats.size() < 2 || feats.size() != batch.num_domains) return {};

  Tape tape;
  CriticVars cv = bind_critics(tape, bundle_, true);
  const bool gp = config_.lipschitz == LipschitzMode::GradientPenalty;
  CriticObjective obj = critic_objective(tape, cv, feats, gp ? config_.gp_coefficient : 0.0, gp ? &gp_rng_ : nullptr);
  tape.backward(obj.value);
  for (std::size_t k = 0; k < bundle_.critics.size(); ++k) {
    Mlp grads = collect_grads(tape, cv.heads[k], bundle_.critics[k]);
    adam_d_[k].step(bundle_.critics[k], grads, -1.0);
    if (!gp) {
      for (auto& layer : bundle_.critics[k].layers) {
        for (double& w : layer.weight.data()) w = std::clamp(w, -config_.clip_value, config_.clip_value);
        for (double& b : layer.bias.data()) b = std::clamp(b, -config_.clip_value, config_.clip_value);
      }
    }
  }
  return CriticStepResult{true, obj.adversarial, obj.penalty};
}

LossBreakdown Trainer::joint_step(const MixedBatch& batch, double progress) {
  ObjectiveConfig oc;
  oc.adversarial_active = uses_adversarial(config_.mode);
  oc.metric_active = uses_metric(config_.mode);
  oc.lambda_d = lambda_d_at(progress);
  oc.lambda_s = oc.metric_active ? config_.lambda_s : 0.0;
  oc.gp_coefficient = config_.gp_coefficient;
  oc.ms = config_.ms;
  oc.positive_rule = config_.positive_rule;
  oc.build_critic_scalar = false;

  Tape tape;
  BundleVars vars = bind_bundle(tape, bundle_, true, false);
  Objective obj = total_objective(tape, vars, batch, oc, nullptr);
  tape.backward(obj.min_scalar);
  const Mlp gf = collect_grads(tape, vars.extractor, bundle_.extractor);
  const Mlp gc = collect_grads(tape, vars.classifier, bundle_.classifier);
  adam_f_.step(bundle_.extractor, gf);
  adam_c_.step(bundle_.classifier, gc);
  return obj.breakdown;
}

double evaluate_accuracy(const ModelBundle& bundle, const DomainDataset& data) {
  if (data.rows() == 0) throw std::invalid_argument("accuracy of an empty dataset");
  const Tensor z = forward_features(bundle.extractor, data.features);
  const Tensor logits = forward_logits(bundle.classifier, bundle.embed_layer, z).logits;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto row = logits.row(i);
    const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += pred == data.labels[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(data.rows());
}

TrainResult train(const std::vector<DomainDataset>& sources, const TrainConfig& config, const DomainDataset* target,
                  const EpochCallback& on_epoch) {
  config.validate();
  const std::size_t min_sources = config.mode == AblationMode::DeepAll ? 1 : 2;
  if (sources.size() < min_sources)
    throw ConfigError("mode " + to_string(config.mode) + " needs at least " + std::to_string(min_sources) + " sources");
  const std::size_t width = sources.front().width();
  int max_label = 0;
  for (const auto& s : sources) {
    if (s.width() != width) throw ConfigError("sources differ in feature width");
    for (int y : s.labels) max_label = std::max(max_label, y);
  }
  if (target) {
    if (target->width() != width) throw ConfigError("target width differs from sources");
    for (int y : target->labels) max_label = std::max(max_label, y);
  }
  const auto num_classes = static_cast<std::size_t>(max_label + 1);

  std::vector<DomainDataset> train_parts, val_parts;
  for (std::size_t d = 0; d < sources.size(); ++d) {
    auto [keep, hold] =
        split_holdout(sources[d], config.validation_fraction, derive_seed(config.seed, "split." + std::to_string(d)));
    train_parts.push_back(std::move(keep));
    val_parts.push_back(std::move(hold));
  }
  const DomainDataset validation = concat_datasets(val_parts, "source-validation");

  Trainer trainer(make_bundle(config.bundle_spec(width, num_classes, sources.size()), config.seed), config);
  EpochSampler sampler(train_parts, config.batch_per_domain, derive_seed(config.seed, "batches"));

  TrainResult result;
  result.best_bundle = trainer.bundle();
  double best = -1.0;
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double progress = static_cast<double>(epoch) / static_cast<double>(config.epochs);
    double sum_c = 0.0, sum_d = 0.0, sum_ms = 0.0, sum_pen = 0.0;
    std::size_t batches = 0, n_d = 0, n_ms = 0, n_pen = 0;
    while (auto batch = sampler.next()) {
      for (std::size_t k = 0; k < config.critic_steps; ++k) {
        const CriticStepResult cs = trainer.critic_step(*batch);
        if (cs.ran && k + 1 == config.critic_steps) {
          sum_pen += cs.penalty;
          ++n_pen;
        }
      }
      const LossBreakdown br = trainer.joint_step(*batch, progress);
      sum_c += br.classification;
      if (br.adversarial) {
        sum_d += *br.adversarial;
        ++n_d;
      }
      if (br.metric) {
        sum_ms += *br.metric;
        ++n_ms;
      }
      ++batches;
    }

    MetricsRecord rec;
    rec.epoch = epoch;
    rec.loss_c = batches ? sum_c / static_cast<double>(batches) : 0.0;
    if (n_d) rec.loss_d = sum_d / static_cast<double>(n_d);
    if (n_ms) rec.loss_ms = sum_ms / static_cast<double>(n_ms);
    if (n_pen && config.lipschitz == LipschitzMode::GradientPenalty) rec.penalty = sum_pen / static_cast<double>(n_pen);
    rec.source_val_acc = evaluate_accuracy(trainer.bundle(), validation);
    if (target) rec.target_acc = evaluate_accuracy(trainer.bundle(), *target);
    rec.lambda_d = trainer.lambda_d_at(progress);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.records.push_back(rec);
    if (on_epoch) on_epoch(rec);

    // Ties refresh the best checkpoint: a plateau at the maximum is not a regression.
    if (rec.source_val_acc >= best) {
      best = rec.source_val_acc;
      result.best_epoch = epoch;
      result.best_bundle = trainer.bundle();
      result.best_target_acc = rec.target_acc;
    }
    if (epoch - result.best_epoch >= config.patience && epoch + 1 < config.epochs) {
      result.early_stopped = true;
      break;
    }
  }
  result.best_val_acc = best;
  result.final_bundle = trainer.bundle();
  if (!result.records.empty()) result.final_target_acc = result.records.back().target_acc;
  return result;
}

// ---------------------------------------------------------------------------

std::vector<AblationCell> summarize_runs(const std::vector<AblationRun>& runs, const std::vector<std::string>& targets,
                                         const std::vector<AblationMode>& modes) {
  std::vector<AblationCell> grid;
  for (const auto& t : targets)
    for (auto m : modes) {
      std::vector<double> accs;
      for (const auto& r : runs)
        if (r.target == t && r.mode == m) accs.push_back(r.target_acc);
      AblationCell cell{t, m, 0.0, 0.0, accs.size()};
      if (!accs.empty()) {
        double s = 0.0;
        for (double a : accs) s += a;
        cell.mean_acc = s / static_cast<double>(accs.size());
        if (accs.size() > 1) {
          double ss = 0.0;
          for (double a : accs) ss += (a - cell.mean_acc) * (a - cell.mean_acc);
          cell.sd_acc = std::sqrt(ss / static_cast<double>(accs.size() - 1));
        }
      }
      grid.push_back(cell);
    }
  return grid;
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<AblationCell>& grid) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "target,mode,mean_acc,sd_acc,n_seeds\n";
  for (const auto& c : grid)
    out << c.target << ',' << to_string(c.mode) << ',' << format_double(c.mean_acc) << ',' << format_double(c.sd_acc)
        << ',' << c.n_seeds << '\n';
}

namespace {

json to_json(const AblationRun& r) {
  return json{{"target", r.target},           {"mode", to_string(r.mode)},
              {"seed", r.seed},               {"target_acc", r.target_acc},
              {"best_target_acc", r.best_target_acc}, {"source_val_acc", r.source_val_acc},
              {"epochs_run", r.epochs_run}};
}

AblationRun run_from_json(const json& j) {
  return AblationRun{j.at("target").get<std::string>(),    ablation_mode_from_string(j.at("mode").get<std::string>()),
                     j.at("seed").get<std::uint64_t>(),    j.at("target_acc").get<double>(),
                     j.at("best_target_acc").get<double>(), j.at("source_val_acc").get<double>(),
                     j.at("epochs_run").get<std::size_t>()};
}

}  // namespace

AblationResult run_ablation_suite(const std::vector<DomainDataset>& datasets, const TrainConfig& base,
                                  const AblationOptions& options) {
  base.validate();
  if (options.n_seeds < 1) throw ConfigError("n_seeds must be >= 1");
  if (datasets.size() < 3) throw ConfigError("ablation needs at least 3 domains");
  std::vector<std::string> targets = options.targets;
  if (targets.empty())
    for (const auto& d : datasets) targets.push_back(d.domain_id);

  AblationResult result;
  const bool persist = !options.out_dir.empty();
  const auto runs_path = options.out_dir / "runs.jsonl";
  const auto grid_path = options.out_dir / "grid.csv";
  std::set<std::tuple<std::string, std::string, std::uint64_t>> done;
  if (persist) {
    std::filesystem::create_directories(options.out_dir);
    std::ifstream in(runs_path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      AblationRun r;
      try {
        r = run_from_json(json::parse(line));
      } catch (const std::exception&) {
        continue;  // a torn trailing line from an interrupted write
      }
      if (done.insert({r.target, to_string(r.mode), r.seed}).second) result.runs.push_back(r);
    }
  }

  struct Job {
    std::string target;
    AblationMode mode;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& t : targets)
    for (auto m : options.modes)
      for (std::size_t s = 0; s < options.n_seeds; ++s) {
        const std::uint64_t seed = base.seed + s;
        if (done.count({t, to_string(m), seed})) {
          ++result.runs_skipped;
          continue;
        }
        jobs.push_back({t, m, seed});
      }
  if (options.max_new_runs && jobs.size() > *options.max_new_runs) jobs.resize(*options.max_new_runs);
  const std::size_t total_runs = targets.size() * options.modes.size() * options.n_seeds;

  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  auto worker = [&] {
    while (true) {
      Job job;
      {
        std::lock_guard lock(mu);
        if (next >= jobs.size() || failure) return;
        job = jobs[next++];
      }
      try {
        const DomainSplit split = split_leave_one_out(datasets, job.target);
        TrainConfig cfg = base;
        cfg.mode = job.mode;
        cfg.seed = job.seed;
        const TrainResult tr = train(split.sources, cfg, &split.target);
        AblationRun run{job.target,
                        job.mode,
                        job.seed,
                        tr.final_target_acc.value_or(0.0),
                        tr.best_target_acc.value_or(0.0),
                        tr.records.back().source_val_acc,
                        tr.records.size()};
        std::lock_guard lock(mu);
        result.runs.push_back(run);
        ++result.runs_executed;
        if (persist) {
          std::ofstream out(runs_path, std::ios::app);
          out << to_json(run).dump() << '\n';
          out.flush();
          write_grid_csv(grid_path, summarize_runs(result.runs, targets, options.modes));
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(options.threads, jobs.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  // Runs may finish out of order with threads; order them for stable output.
  std::stable_sort(result.runs.begin(), result.runs.end(), [&](const AblationRun& a, const AblationRun& b) {
    const auto ta = std::find(targets.begin(), targets.end(), a.target) - targets.begin();
    const auto tb = std::find(targets.begin(), targets.end(), b.target) - targets.begin();
    return std::tie(ta, a.mode, a.seed) < std::tie(tb, b.mode, b.seed);
  });
  result.grid = summarize_runs(result.runs, targets, options.modes);
  result.complete = result.runs.size() >= total_runs;
  if (persist) write_grid_csv(grid_path, result.grid);
  return result;
}

void dump_embeddings(const ModelBundle& bundle, const std::vector<DomainDataset>& datasets,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  bool header = false;
  for (const auto& d : datasets) {
    if (d.width() != bundle.extractor.spec.input_width())
      throw ShapeError("domain '" + d.domain_id + "' has width " + std::to_string(d.width()) + ", model expects " +
                       std::to_string(bundle.extractor.spec.input_width()));
    const Tensor z = forward_features(bundle.extractor, d.features);
    const Tensor e = forward_logits(bundle.classifier, bundle.embed_layer, z).embeddings;
    if (!header) {
      out << "domain_id,label";
      for (std::size_t k = 0; k < e.cols(); ++k) out << ",e" << k;
      out << '\n';
      header = true;
    }
    for (std::size_t i = 0; i < d.rows(); ++i) {
      out << d.domain_id << ',' << d.labels[i];
      for (double v : e.row(i)) out << ',' << format_double(v);
      out << '\n';
    }
  }
}

}  // namespace wadg
