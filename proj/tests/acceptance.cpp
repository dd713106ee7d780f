// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fail.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "wadg/gradcheck.hpp"
#include "wadg/losses.hpp"
#include "wadg/ot_oracle.hpp"
#include "wadg/trainer.hpp"

using namespace wadg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s criterion %d (%s): %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int k) {
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> y(n);
  for (int& v : y) v = u(rng);
  return y;
}

std::size_t draw(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// ---------------------------------------------------------------------------
// 1. gradients of every loss term against central differences

enum class Term { Classification, Adversarial, Metric, Penalty };
const char* term_name(Term t) {
  switch (t) {
    case Term::Classification: return "L_C";
    case Term::Adversarial: return "L_D";
    case Term::Metric: return "L_MS";
    default: return "GP";
  }
}

struct GradConfig {
  ModelBundle bundle;
  MixedBatch batch;
  MinedPairs mined;
  MsHyperParams ms{0.5, 0.2, 2.0, 40.0};
  std::vector<double> mix;
  std::vector<Tensor> frozen;  // features seen by the penalty
};

// Draws until no embedding row is all zero (the metric loss needs unit rows).
GradConfig random_grad_config(std::mt19937_64& rng) {
 for (;;) {
  GradConfig g;
  const std::size_t n = draw(rng, 2, 4), feat = draw(rng, 3, 6), k = draw(rng, 2, 3), m = draw(rng, 2, 3);
  BundleSpec spec;
  spec.extractor = MlpSpec{{n, draw(rng, 3, 6), feat}};
  spec.classifier = MlpSpec{{feat, draw(rng, 3, 6), draw(rng, 3, 6), k}};
  spec.critic = MlpSpec{{feat, draw(rng, 3, 6), draw(rng, 2, 5), 1}};
  spec.embed_layer = draw(rng, 1, 2);
  spec.num_domains = m;
  spec.critic_mode = draw(rng, 0, 1) ? CriticMode::Shared : CriticMode::PerPair;
  g.bundle = make_bundle(spec, rng());
  // Nonzero biases keep activations away from the relu kink.
  auto jitter = [&](Mlp& net) {
    for (auto& l : net.layers) l.bias = random_tensor(rng, l.bias.shape(), 0.05, 0.3);
  };
  jitter(g.bundle.extractor);
  jitter(g.bundle.classifier);
  for (auto& c : g.bundle.critics) jitter(c);

  const std::size_t per = std::max<std::size_t>(2, draw(rng, 2, 12 / m));
  g.batch.num_domains = m;
  g.batch.features = random_tensor(rng, {m * per, n}, -2, 2);
  for (std::size_t d = 0; d < m; ++d)
    for (std::size_t i = 0; i < per; ++i) {
      g.batch.domain_ids.push_back(d);
      g.batch.labels.push_back(static_cast<int>((i + d) % k));
    }
  const Tensor z0 = forward_features(g.bundle.extractor, g.batch.features);
  const Tensor e0 = forward_logits(g.bundle.classifier, g.bundle.embed_layer, z0).embeddings;
  bool degenerate = false;
  for (std::size_t i = 0; i < e0.rows(); ++i) {
    double norm = 0;
    for (double v : e0.row(i)) norm += v * v;
    degenerate = degenerate || norm < 0.5;
  }
  if (degenerate) continue;
  g.mined = mine_pairs(similarity_matrix(e0, g.batch.labels).S, g.batch.labels, g.ms);
  const Tensor mix = random_tensor(rng, {per}, 0.0, 1.0);
  g.mix.assign(mix.data().begin(), mix.data().end());
  for (std::size_t d = 0; d < m; ++d) g.frozen.push_back(kernels::select_rows(z0, g.batch.rows_of(d)));
  return g;
 }
}

double term_value(const GradConfig& g, const ModelBundle& b, Term term) {
  const Tensor z = forward_features(b.extractor, g.batch.features);
  const auto out = forward_logits(b.classifier, b.embed_layer, z);
  std::vector<Tensor> per;
  for (std::size_t d = 0; d < g.batch.num_domains; ++d) per.push_back(kernels::select_rows(z, g.batch.rows_of(d)));
  switch (term) {
    case Term::Classification: return classification_loss(out.logits, g.batch.labels);
    case Term::Adversarial: return adversarial_loss(b, per);
    case Term::Metric:
      return multi_similarity_loss(kernels::matmul(out.embeddings, kernels::transpose(out.embeddings)), g.mined, g.ms).value;
    default: {
      double total = 0;
      for (std::size_t i = 0; i < b.num_domains; ++i)
        for (std::size_t j = i + 1; j < b.num_domains; ++j)
          total += gradient_penalty(b, g.frozen[i], g.frozen[j], pair_index(i, j, b.num_domains), g.mix);
      return total;
    }
  }
}

double term_gradient_error(GradConfig& g, Term term) {
  Tape tape;
  BundleVars v = bind_bundle(tape, g.bundle, true, true);
  Var z = forward_features(v.extractor, tape.constant(g.batch.features));
  ClassifierOutput out = forward_logits(v.classifier, v.embed_layer, z);
  std::vector<Var> per;
  for (std::size_t d = 0; d < g.batch.num_domains; ++d) per.push_back(select_rows(z, g.batch.rows_of(d)));
  Var loss;
  switch (term) {
    case Term::Classification: loss = classification_loss(out.logits, g.batch.labels); break;
    case Term::Adversarial: loss = adversarial_loss(v.critics, per); break;
    case Term::Metric: loss = multi_similarity_loss(similarity(out.embeddings), g.mined, g.ms); break;
    case Term::Penalty: {
      const std::size_t m = g.batch.num_domains;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = i + 1; j < m; ++j) {
          Var p = gradient_penalty(v.critics.for_pair(pair_index(i, j, m)), g.frozen[i], g.frozen[j], g.mix);
          loss = loss.tape ? loss + p : p;
        }
      break;
    }
  }
  tape.backward(loss);

  // Norm-wise over the concatenated gradient of every parameter in the bundle.
  std::vector<double> analytic, numeric;
  auto check = [&](Mlp& net, const MlpVars& vars) {
    const Mlp grads = collect_grads(tape, vars, net);
    for (std::size_t l = 0; l < net.layers.size(); ++l)
      for (int which = 0; which < 2; ++which) {
        Tensor& p = which == 0 ? net.layers[l].weight : net.layers[l].bias;
        const Tensor& a = which == 0 ? grads.layers[l].weight : grads.layers[l].bias;
        const Tensor saved = p;
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& q) {
              p = q;
              return term_value(g, g.bundle, term);
            },
            saved);
        p = saved;
        analytic.insert(analytic.end(), a.data().begin(), a.data().end());
        numeric.insert(numeric.end(), fd.data().begin(), fd.data().end());
      }
  };
  check(g.bundle.extractor, v.extractor);
  check(g.bundle.classifier, v.classifier);
  for (std::size_t c = 0; c < g.bundle.critics.size(); ++c) check(g.bundle.critics[c], v.critics.heads[c]);
  const std::size_t n = analytic.size();
  return relative_error(Tensor(Shape{n}, std::move(analytic)), Tensor(Shape{n}, std::move(numeric)));
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  const int configs = 24;
  std::map<Term, double> worst;
  for (int c = 0; c < configs; ++c) {
    GradConfig g = random_grad_config(rng);
    for (Term t : {Term::Classification, Term::Adversarial, Term::Metric, Term::Penalty})
      worst[t] = std::max(worst[t], term_gradient_error(g, t));
  }
  const double secs = seconds_since(t0);
  bool ok = secs < 60.0;
  std::string detail = std::to_string(configs) + " configurations, max relative error";
  for (const auto& [t, e] : worst) {
    ok = ok && e < 1e-6;
    detail += std::string(" ") + term_name(t) + fmt("=%.2e", e);
  }
  report(1, "gradient correctness", ok, detail + fmt(", %.1f s", secs));
}

// ---------------------------------------------------------------------------
// 2. d(m L_MS)/dS_ij = +w for negatives, -w for positives

void criterion_weight_identity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  const MsHyperParams p{0.5, 0.05, 2.0, 40.0};
  std::size_t pairs = 0;
  double worst = 0;
  while (pairs < 200) {
    const std::size_t n = draw(rng, 6, 12);
    // Similarities near lambda keep every weight above the difference noise floor.
    Tensor S(Shape{n, n}, 1.0);
    std::uniform_real_distribution<double> u(p.lambda_center - 0.1, p.lambda_center + 0.1);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) S.at(i, j) = S.at(j, i) = u(rng);
    const auto y = random_labels(rng, n, 2);
    const MinedPairs mined = mine_pairs(S, y, p);
    const double m = static_cast<double>(mined.active_anchors());
    if (m == 0) continue;
    const Tensor fd =
        finite_difference_gradient([&](const Tensor& s) { return m * multi_similarity_loss(s, mined, p).value; }, S, 5e-5);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto j : mined.negatives[i]) {
        const double w = negative_pair_weight(S, i, j, mined.negatives[i], p);
        worst = std::max(worst, std::abs(fd.at(i, j) - w) / std::abs(w));
        ++pairs;
      }
      for (auto j : mined.positives[i]) {
        const double w = positive_pair_weight(S, i, j, mined.positives[i], p);
        worst = std::max(worst, std::abs(fd.at(i, j) + w) / std::abs(w));
        ++pairs;
      }
    }
  }
  report(2, "weight-gradient identity", worst < 1e-5,
         std::to_string(pairs) + " pairs, max relative error" + fmt(" %.2e", worst) + fmt(", %.2f s", seconds_since(t0)));
}

// ---------------------------------------------------------------------------
// 3 and 4. mining and loss against the reference pipeline

struct OracleInstance {
  Tensor embeddings;
  std::vector<int> labels;
  double epsilon;
};

std::vector<OracleInstance> oracle_instances(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<OracleInstance> out;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = draw(rng, 4, 14);
    const double eps = t % 4 == 0 ? 0.0 : t % 4 == 1 ? 2.0 : std::uniform_real_distribution<double>(0.01, 0.5)(rng);
    out.push_back({kernels::normalize_rows(random_tensor(rng, {n, 3})), random_labels(rng, n, 3), eps});
  }
  return out;
}

void criterion_mining() {
  std::size_t agree = 0, total = 0, eps0 = 0, eps2 = 0;
  for (const auto& inst : oracle_instances(303)) {
    const MsHyperParams p{0.5, inst.epsilon, 2.0, 40.0};
    const Tensor S = similarity_matrix(inst.embeddings, inst.labels).S;
    const auto ref = oracle::reference_ms_pipeline(inst.embeddings, inst.labels, {0.5, inst.epsilon, 2.0, 40.0, false});
    const MinedPairs mined = mine_pairs(S, inst.labels, p);
    ++total;
    if (mined.positives == ref.positives && mined.negatives == ref.negatives) ++agree;
    eps0 += inst.epsilon == 0.0;
    eps2 += inst.epsilon == 2.0;
  }
  report(3, "mining oracle equivalence", agree == total && eps0 > 0 && eps2 > 0,
         std::to_string(agree) + "/" + std::to_string(total) + " instances identical (" + std::to_string(eps0) +
             " with eps=0, " + std::to_string(eps2) + " with eps=2)");
}

void criterion_ms_value() {
  // Anchor 0 with positive similarity 0.4 and negative similarity 0.6.
  Tensor S(Shape{3, 3}, 1.0);
  S.at(0, 1) = S.at(1, 0) = 0.4;
  S.at(0, 2) = S.at(2, 0) = 0.6;
  S.at(1, 2) = S.at(2, 1) = -1.0;
  const std::vector<int> y{0, 0, 1};
  MinedPairs mined;
  mined.positives = {{1}, {}, {}};
  mined.negatives = {{2}, {}, {}};
  const MsHyperParams p{0.5, 0.1, 2.0, 40.0};
  const double value = multi_similarity_loss(S, mined, p).value;
  // (1/alpha) ln(1 + e^{-alpha (0.4 - lambda)}) + (1/beta) ln(1 + e^{beta (0.6 - lambda)}),
  // evaluated to 30 digits with mpmath.
  const double expected = 0.499523182888741;
  const double printed = 0.499605;

  double worst = 0;
  for (const auto& inst : oracle_instances(404)) {
    for (bool literal : {false, true}) {
      const MsHyperParams q{0.5, inst.epsilon, 2.0, 40.0};
      const auto ref = oracle::reference_ms_pipeline(inst.embeddings, inst.labels, {0.5, inst.epsilon, 2.0, 40.0, literal});
      const Tensor Si = similarity_matrix(inst.embeddings, inst.labels).S;
      const MinedPairs mi = mine_pairs(Si, inst.labels, q, literal ? PositiveRule::LiteralMin : PositiveRule::MaxNegative);
      worst = std::max(worst, std::abs(multi_similarity_loss(Si, mi, q).value - ref.loss));
    }
  }
  const bool ok = std::abs(value - expected) <= 1e-5 && worst <= 1e-10;
  report(4, "multi-similarity loss value", ok,
         fmt("worked anchor %.9f", value) + fmt(" vs closed form %.9f", expected) +
             fmt(" (listed figure %.6f", printed) + fmt(" is off by %.1e", printed - expected) +
             "); 200 oracle comparisons, max |diff|" + fmt(" %.1e", worst));
}

// ---------------------------------------------------------------------------
// 5. W1 estimator against exact transport

double trained_critic_ratio(std::uint64_t seed, double critic_lr) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> a(0.0, 0.3), b(2.0, 0.3);
  Tensor xa(Shape{32, 1}), xb(Shape{32, 1});
  for (double& v : xa.data()) v = a(rng);
  for (double& v : xb.data()) v = b(rng);
  const double exact = oracle::exact_w1_assignment(oracle::PointCloud(xa), oracle::PointCloud(xb));

  BundleSpec spec = default_bundle_spec(1, 2, 2);
  spec.extractor = MlpSpec{{1, 1}};
  spec.classifier = MlpSpec{{1, 2, 2}};
  spec.embed_layer = 1;
  spec.critic = MlpSpec{{1, 64, 64, 1}};
  ModelBundle bundle = make_bundle(spec, seed);
  Adam adam(bundle.critics[0], AdamConfig{critic_lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 gp_rng(seed + 1);
  const std::vector<Tensor> per{xb, xa};  // estimate = mean D(xb) - mean D(xa)
  for (int step = 0; step < 200; ++step) {
    Tape tape;
    CriticVars c = bind_critics(tape, bundle, true);
    CriticObjective obj = critic_objective(tape, c, per, 10.0, &gp_rng);
    tape.backward(obj.value);
    adam.step(bundle.critics[0], collect_grads(tape, c.heads[0], bundle.critics[0]), -1.0);
  }
  return adversarial_loss(bundle, per) / exact;
}

// With a soft penalty the critic settles at slope about 1 + 1/gp, so the
// estimate plateaus slightly above the exact distance once training converges.
void criterion_wasserstein(double critic_lr) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(505);
  std::size_t bound_ok = 0;
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = draw(rng, 3, 9), d = draw(rng, 1, 4);
    const Tensor a = random_tensor(rng, {n, d}), b = random_tensor(rng, {n, d}, -0.5, 1.5);
    const Tensor w = kernels::normalize_rows(random_tensor(rng, {1, d}));
    const double est = pairwise_w1_estimate(kernels::matmul(a, kernels::transpose(w)), kernels::matmul(b, kernels::transpose(w)));
    bound_ok += std::abs(est) <= oracle::exact_w1_assignment(oracle::PointCloud(a), oracle::PointCloud(b)) + 1e-9;
  }
  double ratio = 0;
  for (std::uint64_t s = 0; s < 5; ++s) ratio += trained_critic_ratio(s, critic_lr) / 5.0;
  const double secs = seconds_since(t0);
  report(5, "W1 estimator vs exact transport", bound_ok == 50 && ratio >= 0.6 && secs < 60.0,
         std::to_string(bound_ok) + "/50 duality bounds hold; trained critic reaches" + fmt(" %.1f%%", 100 * ratio) +
             " of exact W1 (5 seeds, 200 steps" + fmt(", lr %g)", critic_lr) + fmt(", %.1f s", secs));
}

// ---------------------------------------------------------------------------
// 6. schedule

void criterion_schedule() {
  const double l0 = lambda_d_schedule(0.0, 10.0), l1 = lambda_d_schedule(0.1, 10.0), l2 = lambda_d_schedule(1.0, 10.0);
  const bool ok = l0 == 0.0 && std::abs(l1 - 0.462117) <= 1e-6 && std::abs(l2 - 0.999909) <= 1e-6;
  report(6, "lambda_d schedule", ok, fmt("lambda_d(0)=%g", l0) + fmt(" lambda_d(0.1)=%.7f", l1) + fmt(" lambda_d(1)=%.7f", l2));
}

// ---------------------------------------------------------------------------
// 7. ablation on rotated moons

void criterion_ablation() {
  const auto t0 = Clock::now();
  const auto data = gen_rotated_moons(std::vector<double>{0, 15, 30, 45}, 600, 0.1, 7);
  TrainConfig c;
  c.epochs = 30;
  c.seed = 0;
  AblationOptions o;
  o.n_seeds = 5;
  o.targets = {"dom45"};
  const AblationResult r = run_ablation_suite(data, c, o);
  std::map<AblationMode, double> acc;
  for (const auto& cell : r.grid) acc[cell.mode] = cell.mean_acc;
  const double secs = seconds_since(t0);
  const double full = acc[AblationMode::WadgAll];
  bool ok = r.complete && full - acc[AblationMode::DeepAll] >= 0.03 && secs <= 600.0;
  for (auto m : {AblationMode::NoLD, AblationMode::NoLMS}) ok = ok && full >= acc[m] - 0.01;
  std::string detail = "target dom45, 5 seeds, mean accuracy";
  for (auto m : kAllAblationModes) detail += " " + to_string(m) + fmt("=%.4f", acc[m]);
  detail += fmt("; wadg-all - deep-all = %+.1f pp", 100 * (full - acc[AblationMode::DeepAll]));
  report(7, "ablation ordering on rotated moons", ok, detail + fmt(", %.0f s", secs));
}

// ---------------------------------------------------------------------------
// 8. determinism and mode contracts

void criterion_contracts() {
  const auto data = gen_rotated_moons(std::vector<double>{0, 15, 30, 45}, 120, 0.1, 3);
  const DomainSplit split = split_leave_one_out(data, "dom45");
  TrainConfig c;
  c.epochs = 3;
  c.batch_per_domain = 16;
  c.critic_steps = 2;

  bool deterministic = true;
  for (auto mode : kAllAblationModes) {
    c.mode = mode;
    const TrainResult a = train(split.sources, c, &split.target), b = train(split.sources, c, &split.target);
    deterministic = deterministic && a.records.size() == b.records.size() && a.final_bundle == b.final_bundle;
    for (std::size_t i = 0; deterministic && i < a.records.size(); ++i)
      deterministic = a.records[i].same_run_values(b.records[i]);
  }

  EpochSampler sampler(split.sources, 16, 9);
  const MixedBatch batch = *sampler.next();

  // DeepAll: one joint step equals one Adam step on L_C alone.
  c.mode = AblationMode::DeepAll;
  const ModelBundle init = make_bundle(c.bundle_spec(2, 2, 3), 11);
  Trainer deep(init, c);
  deep.critic_step(batch);
  deep.joint_step(batch, 0.5);
  ModelBundle manual = init;
  {
    Tape t;
    MlpVars f = bind(t, manual.extractor, true), cl = bind(t, manual.classifier, true);
    Var z = forward_features(f, t.constant(batch.features));
    t.backward(classification_loss(forward_logits(cl, manual.embed_layer, z).logits, batch.labels));
    const AdamConfig ac{c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_epsilon};
    Adam af(manual.extractor, ac), acl(manual.classifier, ac);
    af.step(manual.extractor, collect_grads(t, f, manual.extractor));
    acl.step(manual.classifier, collect_grads(t, cl, manual.classifier));
  }
  const bool deep_ok = deep.bundle() == manual;

  // NoLD: critics stay bit-identical through full training.
  c.mode = AblationMode::NoLD;
  const TrainResult nold = train(split.sources, c);
  bool nold_ok = nold.final_bundle.critics == make_bundle(c.bundle_spec(2, 2, 3), c.seed).critics;
  for (const auto& rec : nold.records) nold_ok = nold_ok && !rec.loss_d.has_value();

  report(8, "determinism and mode contracts", deterministic && deep_ok && nold_ok,
         std::string("repeat runs bit-identical in all modes: ") + (deterministic ? "yes" : "no") +
             "; deep-all step == pure L_C step: " + (deep_ok ? "yes" : "no") +
             "; no-ld critics untouched: " + (nold_ok ? "yes" : "no"));
}

}  // namespace

// With arguments, runs only the listed criteria, e.g. `acceptance 1 5`.
int main(int argc, char** argv) {
  std::vector<std::function<void()>> criteria{criterion_gradients,
                                              criterion_weight_identity,
                                              criterion_mining,
                                              criterion_ms_value,
                                              [] { criterion_wasserstein(5e-3); },
                                              criterion_schedule,
                                              criterion_ablation,
                                              criterion_contracts};
  std::vector<std::size_t> selected;
  for (int i = 1; i < argc; ++i) {
    const int id = std::atoi(argv[i]);
    if (id < 1 || id > 8) {
      std::fprintf(stderr, "unknown criterion '%s'\n", argv[i]);
      return 2;
    }
    selected.push_back(static_cast<std::size_t>(id));
  }
  if (selected.empty())
    for (std::size_t id = 1; id <= 8; ++id) selected.push_back(id);
  for (auto id : selected) criteria[id - 1]();
  std::printf("%d of %zu criteria failed\n", failures, selected.size());
  return failures == 0 ? 0 : 1;
}
