#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "wadg/losses.hpp"
#include "wadg/ot_oracle.hpp"

using namespace wadg;
using wadg::test::random_tensor;

namespace {

Mlp linear_critic(std::vector<double> w) {
  const std::size_t d = w.size();
  Mlp m{MlpSpec{{d, 1}}, {}};
  m.layers.push_back({Tensor(Shape{d, 1}, std::move(w)), Tensor(Shape{1})});
  return m;
}

ModelBundle linear_bundle(std::vector<Mlp> critics, CriticMode mode, std::size_t m) {
  ModelBundle b = make_bundle(default_bundle_spec(1, 2, 2), 0);
  b.critics = std::move(critics);
  b.critic_mode = mode;
  b.num_domains = m;
  b.extractor = Mlp{MlpSpec{{1, 1}}, {{Tensor(Shape{1, 1}, 1.0), Tensor(Shape{1})}}};
  b.classifier = init_params(MlpSpec{{1, 4, 4, 2}}, 0);
  return b;
}

Tensor unit_rows(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  return kernels::normalize_rows(random_tensor(rng, {n, d}));
}

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int k) {
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> y(n);
  for (int& v : y) v = u(rng);
  return y;
}

// S for one anchor (row 0) with the listed similarities; other rows mirror it.
Tensor anchor_row_matrix(const std::vector<double>& row) {
  const std::size_t n = row.size();
  Tensor S(Shape{n, n}, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    S.at(0, j) = row[j];
    S.at(j, 0) = row[j];
    S.at(j, j) = 1.0;
  }
  return S;
}

}  // namespace

TEST_CASE("classification loss values") {
  CHECK(classification_loss(Tensor::matrix({{0, 0}, {0, 0}}), std::vector<int>{0, 1}) ==
        doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(classification_loss(Tensor(Shape{1, 5}, 0.0), std::vector<int>{3}) == doctest::Approx(1.609438).epsilon(1e-6));
  CHECK(classification_loss(Tensor::matrix({{1e6, 0}, {0, 1e6}}), std::vector<int>{0, 1}) < 1e-12);
  CHECK_THROWS(classification_loss(Tensor::matrix({{0, 0}}), std::vector<int>{2}));
  CHECK_THROWS(classification_loss(Tensor(Shape{0, 2}), std::vector<int>{}));
}

TEST_CASE("pairwise W1 estimate is a signed mean difference") {
  CHECK(pairwise_w1_estimate(Tensor::vector({1, 2}), Tensor::vector({2, 1})) == 0.0);
  CHECK(pairwise_w1_estimate(Tensor::vector({0, 0}), Tensor::vector({1, 1})) == -1.0);
  CHECK(pairwise_w1_estimate(Tensor::vector({1, 3}), Tensor::vector({0})) == 2.0);
}

TEST_CASE("adversarial loss sums pair estimates") {
  const std::vector<Tensor> same{Tensor::matrix({{0.3}, {1.2}}), Tensor::matrix({{0.3}, {1.2}})};
  const ModelBundle b2 = linear_bundle({linear_critic({0.7})}, CriticMode::PerPair, 2);
  CHECK(adversarial_loss(b2, same) == 0.0);

  // Pair estimates -a_k * (mean_i - mean_j): 0.5, 0.2, 0.1.
  const std::vector<Tensor> feats{Tensor::matrix({{0}}), Tensor::matrix({{1}}), Tensor::matrix({{2}})};
  const ModelBundle b3 =
      linear_bundle({linear_critic({-0.5}), linear_critic({-0.1}), linear_critic({-0.1})}, CriticMode::PerPair, 3);
  CHECK(adversarial_loss(b3, feats) == doctest::Approx(0.8).epsilon(1e-15));

  const std::vector<Tensor> two{Tensor::matrix({{0}, {0}}), Tensor::matrix({{1}, {1}})};
  CHECK(adversarial_loss(linear_bundle({linear_critic({1.0})}, CriticMode::Shared, 2), two) == -1.0);
  CHECK(adversarial_loss(linear_bundle({linear_critic({-1.0})}, CriticMode::Shared, 2), two) == 1.0);
  CHECK_THROWS(adversarial_loss(b3, std::vector<Tensor>{feats[0]}));
}

TEST_CASE("shared critic telescopes the pairwise sum") {
  // With one critic, sum_{i<j} (mu_i - mu_j) = sum_i (m + 1 - 2(i+1)) mu_i.
  const std::vector<Tensor> feats{Tensor::matrix({{0.5}}), Tensor::matrix({{-1.0}}), Tensor::matrix({{2.0}})};
  const ModelBundle b = linear_bundle({linear_critic({1.0})}, CriticMode::Shared, 3);
  CHECK(adversarial_loss(b, feats) == doctest::Approx(2 * 0.5 + 0 * -1.0 - 2 * 2.0).epsilon(1e-15));
}

TEST_CASE("gradient penalty closed forms") {
  const Tensor a = Tensor::matrix({{0.1, 0.2}, {1.0, -1.0}}), b = Tensor::matrix({{2.0, 0.0}, {0.5, 0.5}});
  const std::vector<double> mix{0.3, 0.8};
  const ModelBundle unit = linear_bundle({linear_critic({0.6, 0.8})}, CriticMode::Shared, 2);
  CHECK(std::abs(gradient_penalty(unit, a, b, std::nullopt, mix)) < 1e-15);
  const ModelBundle two = linear_bundle({linear_critic({2.0})}, CriticMode::Shared, 2);
  CHECK(gradient_penalty(two, Tensor::matrix({{0.0}}), Tensor::matrix({{1.0}}), std::nullopt, std::vector<double>{0.5}) ==
        doctest::Approx(1.0).epsilon(1e-15));
  const ModelBundle zero = linear_bundle({linear_critic({0.0, 0.0})}, CriticMode::Shared, 2);
  CHECK(gradient_penalty(zero, a, b, std::nullopt, mix) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("similarity matrix") {
  const SimilarityMatrix s =
      similarity_matrix(Tensor::matrix({{1, 0}, {0, 1}, {0.6, 0.8}, {1, 0}}), {0, 1, 0, 1});
  CHECK(s.S.at(0, 1) == 0.0);
  CHECK(s.S.at(0, 2) == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(s.S.at(0, 3) == 1.0);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(s.S.at(i, i) == doctest::Approx(1.0).epsilon(1e-9));
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(s.S.at(i, j) - s.S.at(j, i)) < 1e-12);
  }
  CHECK_THROWS(similarity_matrix(Tensor::matrix({{2, 0}}), {0}));
}

TEST_CASE("mining the worked anchor") {
  // Anchor 0: positives {0.9, 0.5}, negatives {0.7, 0.2}.
  const Tensor S = anchor_row_matrix({1.0, 0.9, 0.5, 0.7, 0.2});
  const std::vector<int> y{0, 0, 0, 1, 1};
  MsHyperParams p;
  p.epsilon = 0.1;
  const MinedPairs mined = mine_pairs(S, y, p);
  CHECK(mined.negatives[0] == std::vector<std::size_t>{3});
  CHECK(mined.positives[0] == std::vector<std::size_t>{2});

  p.epsilon = 2.0;
  const MinedPairs all = mine_pairs(S, y, p);
  CHECK(all.negatives[0] == std::vector<std::size_t>{3, 4});
  CHECK(all.positives[0] == std::vector<std::size_t>{1, 2});

  const MinedPairs lit = mine_pairs(S, y, MsHyperParams{0.5, 0.1, 2, 40}, PositiveRule::LiteralMin);
  CHECK(lit.positives[0].empty());  // min over negatives 0.2 + 0.1 excludes both positives

  const MinedPairs one_class = mine_pairs(S, std::vector<int>{1, 1, 1, 1, 1}, p);
  for (const auto& n : one_class.negatives) CHECK(n.empty());
  CHECK(one_class.active_anchors() == 0);
}

TEST_CASE("mined pairs respect labels and exclude the anchor") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const Tensor e = unit_rows(rng, 10, 3);
    const auto y = random_labels(rng, 10, 3);
    const MinedPairs m = mine_pairs(similarity_matrix(e, y).S, y, MsHyperParams{0.5, 0.05, 2, 40});
    for (std::size_t i = 0; i < 10; ++i) {
      for (auto j : m.positives[i]) {
        CHECK(j != i);
        CHECK(y[j] == y[i]);
      }
      for (auto j : m.negatives[i]) CHECK(y[j] != y[i]);
    }
  }
}

TEST_CASE("pair weights") {
  MsHyperParams p;
  const Tensor S = anchor_row_matrix({1.0, 0.4, 0.6, 0.6, -1.0});
  const std::vector<std::size_t> n1{2};
  CHECK(negative_pair_weight(S, 0, 2, n1, p) == doctest::Approx(std::exp(4.0) / (1 + std::exp(4.0))).epsilon(1e-12));
  CHECK(negative_pair_weight(S, 0, 2, n1, p) == doctest::Approx(0.982014).epsilon(1e-6));
  const std::vector<std::size_t> far{4};
  CHECK(negative_pair_weight(S, 0, 4, far, p) == doctest::Approx(std::exp(-60.0)).epsilon(1e-9));
  const std::vector<std::size_t> twin{2, 3};
  CHECK(negative_pair_weight(S, 0, 2, twin, p) == negative_pair_weight(S, 0, 3, twin, p));
  CHECK_THROWS(negative_pair_weight(S, 0, 1, n1, p));

  const std::vector<std::size_t> p1{1};
  CHECK(positive_pair_weight(S, 0, 1, p1, p) == doctest::Approx(0.549834).epsilon(1e-6));
  const Tensor at = anchor_row_matrix({1.0, 0.5});
  CHECK(positive_pair_weight(at, 0, 1, p1, p) == doctest::Approx(0.5).epsilon(1e-15));

  const Tensor hard = anchor_row_matrix({1.0, 0.2, 0.4});
  const std::vector<std::size_t> both{1, 2};
  CHECK(positive_pair_weight(hard, 0, 1, both, p) > positive_pair_weight(hard, 0, 2, both, p));
}

TEST_CASE("multi-similarity loss closed forms") {
  MsHyperParams p;
  MinedPairs mined;
  mined.positives = {{1}, {}, {}};
  mined.negatives = {{2}, {}, {}};
  const Tensor S = anchor_row_matrix({1.0, 0.4, 0.6});
  const MsLossValue v = multi_similarity_loss(S, mined, p);
  // 0.5 ln(1 + e^0.2) + 0.025 ln(1 + e^4), evaluated at 30 digits with mpmath.
  CHECK(std::abs(v.value - 0.499523182888741) < 1e-12);
  CHECK(v.active_anchors == 1);

  MinedPairs none;
  none.positives.assign(3, {});
  none.negatives.assign(3, {});
  const MsLossValue z = multi_similarity_loss(S, none, p);
  CHECK(z.value == 0.0);
  CHECK(z.no_valid_anchors);

  // Well clustered: positive at 1, negative at -1.
  const Tensor tight = anchor_row_matrix({1.0, 1.0, -1.0});
  const double expected = 0.5 * std::log1p(std::exp(-1.0)) + std::log1p(std::exp(-60.0)) / 40.0;
  CHECK(multi_similarity_loss(tight, mined, p).value == doctest::Approx(expected).epsilon(1e-12));
  CHECK(std::abs(expected - 0.156630843759111) < 1e-12);
}

TEST_CASE("multi-similarity loss is stable at extreme similarities") {
  MsHyperParams p;
  p.beta = 2000.0;
  MinedPairs mined;
  mined.positives = {{1}, {}, {}};
  mined.negatives = {{2}, {}, {}};
  const MsLossValue v = multi_similarity_loss(anchor_row_matrix({1.0, -1.0, 1.0}), mined, p);
  CHECK(std::isfinite(v.value));
}

TEST_CASE("multi-similarity loss matches the oracle and is permutation invariant") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 30; ++t) {
    const std::size_t n = 12;
    const Tensor e = unit_rows(rng, n, 3);
    const auto y = random_labels(rng, n, 3);
    const MsHyperParams p{0.5, 0.1, 2.0, 40.0};
    const Tensor S = similarity_matrix(e, y).S;
    const MsLossValue v = multi_similarity_loss(S, mine_pairs(S, y, p), p);
    const auto ref = oracle::reference_ms_pipeline(e, y, {0.5, 0.1, 2.0, 40.0, false});
    CHECK(std::abs(v.value - ref.loss) < 1e-10);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor pe = kernels::select_rows(e, perm);
    std::vector<int> py(n);
    for (std::size_t i = 0; i < n; ++i) py[i] = y[perm[i]];
    const Tensor PS = similarity_matrix(pe, py).S;
    CHECK(multi_similarity_loss(PS, mine_pairs(PS, py, p), p).value == doctest::Approx(v.value).epsilon(1e-12));
  }
}

namespace {

// Symmetric S with unit diagonal and off-diagonal entries within `spread` of
// lambda, so every mined weight stays above the finite-difference noise floor.
Tensor random_similarities(std::mt19937_64& rng, std::size_t n, double lambda, double spread) {
  std::uniform_real_distribution<double> u(lambda - spread, lambda + spread);
  Tensor S(Shape{n, n}, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) S.at(i, j) = S.at(j, i) = u(rng);
  return S;
}

}  // namespace

TEST_CASE("m * L_MS has derivative +w for negatives and -w for positives") {
  std::mt19937_64 rng(5);
  std::size_t pairs = 0;
  for (int t = 0; t < 5; ++t) {
    const MsHyperParams p{0.5, 0.05, 2.0, 40.0};
    const Tensor S = random_similarities(rng, 10, p.lambda_center, 0.1);
    const auto y = random_labels(rng, 10, 2);
    const MinedPairs mined = mine_pairs(S, y, p);
    const double m = static_cast<double>(mined.active_anchors());
    if (m == 0) continue;
    auto scaled_loss = [&](const Tensor& s) { return m * multi_similarity_loss(s, mined, p).value; };
    const Tensor fd = finite_difference_gradient(scaled_loss, S, 5e-5);
    for (std::size_t i = 0; i < 10; ++i) {
      for (auto j : mined.negatives[i]) {
        const double w = negative_pair_weight(S, i, j, mined.negatives[i], p);
        CHECK(std::abs(fd.at(i, j) - w) <= 1e-5 * std::abs(w));
        ++pairs;
      }
      for (auto j : mined.positives[i]) {
        const double w = positive_pair_weight(S, i, j, mined.positives[i], p);
        CHECK(std::abs(fd.at(i, j) + w) <= 1e-5 * std::abs(w));
        ++pairs;
      }
    }
  }
  CHECK(pairs > 20);
}

TEST_CASE("lambda_d schedule") {
  CHECK(lambda_d_schedule(0.0) == 0.0);
  CHECK(std::abs(lambda_d_schedule(0.1, 10.0) - 0.462117) < 1e-6);
  CHECK(std::abs(lambda_d_schedule(1.0, 10.0) - 0.999909) < 1e-6);
  double prev = -1.0;
  for (int i = 0; i <= 100; ++i) {
    const double v = lambda_d_schedule(i / 100.0, 10.0);
    CHECK(v > prev);
    prev = v;
  }
  CHECK_THROWS(lambda_d_schedule(1.5));
  CHECK_THROWS(lambda_d_schedule(-0.1));
}

namespace {

MixedBatch toy_batch(std::mt19937_64& rng, std::size_t m, std::size_t per, std::size_t n, int k) {
  MixedBatch b;
  b.num_domains = m;
  b.features = random_tensor(rng, {m * per, n}, -2, 2);
  for (std::size_t d = 0; d < m; ++d)
    for (std::size_t i = 0; i < per; ++i) {
      b.domain_ids.push_back(d);
      b.labels.push_back(static_cast<int>((i + d) % static_cast<std::size_t>(k)));
    }
  return b;
}

}  // namespace

TEST_CASE("total objective ablation contracts") {
  std::mt19937_64 rng(12);
  const MixedBatch batch = toy_batch(rng, 3, 4, 2, 2);
  const ModelBundle bundle = make_bundle(default_bundle_spec(2, 2, 3), 4);

  ObjectiveConfig deep;
  deep.adversarial_active = false;
  deep.metric_active = false;
  Tape t1;
  const Objective o1 = total_objective(t1, bind_bundle(t1, bundle, true, true), batch, deep, nullptr);
  CHECK(o1.min_scalar.value().item() == o1.breakdown.classification);
  CHECK_FALSE(o1.breakdown.adversarial.has_value());
  CHECK_FALSE(o1.breakdown.metric.has_value());

  ObjectiveConfig nolms;
  nolms.lambda_d = 0.4;
  nolms.lambda_s = 0.0;
  Tape t2;
  const Objective o2 = total_objective(t2, bind_bundle(t2, bundle, true, true), batch, nolms, nullptr);
  REQUIRE(o2.breakdown.metric.has_value());
  REQUIRE(o2.breakdown.adversarial.has_value());
  CHECK(o2.min_scalar.value().item() == o2.breakdown.classification + 0.4 * *o2.breakdown.adversarial);

  ObjectiveConfig full;
  full.lambda_d = 0.4;
  full.lambda_s = 0.3;
  std::mt19937_64 gp(1);
  Tape t3;
  const Objective o3 = total_objective(t3, bind_bundle(t3, bundle, true, true), batch, full, &gp);
  // Recompute each term from untraced forwards.
  const Tensor z = forward_features(bundle.extractor, batch.features);
  const auto out = forward_logits(bundle.classifier, bundle.embed_layer, z);
  const double lc = classification_loss(out.logits, batch.labels);
  std::vector<Tensor> per;
  for (std::size_t d = 0; d < 3; ++d) per.push_back(kernels::select_rows(z, batch.rows_of(d)));
  const double ld = adversarial_loss(bundle, per);
  const Tensor S = similarity_matrix(out.embeddings, batch.labels).S;
  const double lms = multi_similarity_loss(S, mine_pairs(S, batch.labels, full.ms), full.ms).value;
  CHECK(std::abs(o3.min_scalar.value().item() - (lc + 0.4 * ld + 0.3 * lms)) < 1e-12);
  REQUIRE(o3.critic_scalar.has_value());
  REQUIRE(o3.breakdown.penalty.has_value());
  CHECK(std::abs(o3.critic_scalar->value().item() - (ld - 10.0 * *o3.breakdown.penalty)) < 1e-12);
}

TEST_CASE("single-domain batch skips the adversarial term with a warning") {
  std::mt19937_64 rng(13);
  MixedBatch batch = toy_batch(rng, 1, 6, 2, 2);
  batch.num_domains = 1;
  const ModelBundle bundle = make_bundle(default_bundle_spec(2, 2, 2), 4);
  ObjectiveConfig c;
  c.lambda_d = 1.0;
  Tape t;
  const Objective o = total_objective(t, bind_bundle(t, bundle, true, true), batch, c, nullptr);
  CHECK(o.breakdown.single_domain_warning);
  CHECK_FALSE(o.breakdown.adversarial.has_value());
}

TEST_CASE("gradients of every loss term match finite differences") {
  std::mt19937_64 rng(21);
  BundleSpec spec = default_bundle_spec(2, 3, 2);
  spec.extractor = MlpSpec{{2, 5, 4}};
  spec.classifier = MlpSpec{{4, 5, 5, 3}};
  spec.critic = MlpSpec{{4, 5, 1}};
  ModelBundle b = make_bundle(spec, 9);
  for (auto* net : {&b.extractor, &b.classifier, &b.critics[0]})
    for (auto& l : net->layers) l.bias = random_tensor(rng, l.bias.shape(), 0.05, 0.3);
  const MixedBatch batch = toy_batch(rng, 2, 4, 2, 3);
  const std::vector<double> mix{0.2, 0.7, 0.4, 0.9};

  // One scalar combining all four terms, evaluated through untraced code for FD.
  const MsHyperParams ms{0.5, 0.2, 2.0, 40.0};
  Tape probe(false);
  const Tensor z0 = forward_features(b.extractor, batch.features);
  const Tensor S0 = similarity_matrix(forward_logits(b.classifier, b.embed_layer, z0).embeddings, batch.labels).S;
  const MinedPairs mined = mine_pairs(S0, batch.labels, ms);
  auto value = [&](const ModelBundle& bb) {
    const Tensor z = forward_features(bb.extractor, batch.features);
    const auto out = forward_logits(bb.classifier, bb.embed_layer, z);
    std::vector<Tensor> per{kernels::select_rows(z, batch.rows_of(0)), kernels::select_rows(z, batch.rows_of(1))};
    const Tensor S = kernels::matmul(out.embeddings, kernels::transpose(out.embeddings));
    return classification_loss(out.logits, batch.labels) + 0.7 * adversarial_loss(bb, per) +
           0.3 * multi_similarity_loss(S, mined, ms).value - 0.5 * gradient_penalty(bb, per[0], per[1], 0, mix);
  };

  Tape tape;
  BundleVars v = bind_bundle(tape, b, true, true);
  Var z = forward_features(v.extractor, tape.constant(batch.features));
  ClassifierOutput out = forward_logits(v.classifier, v.embed_layer, z);
  std::vector<Var> per{select_rows(z, batch.rows_of(0)), select_rows(z, batch.rows_of(1))};
  Var loss = classification_loss(out.logits, batch.labels) + scale(adversarial_loss(v.critics, per), 0.7) +
             scale(multi_similarity_loss(similarity(out.embeddings), mined, ms), 0.3) -
             scale(gradient_penalty(v.critics.for_pair(0), per[0].value(), per[1].value(), mix), 0.5);
  tape.backward(loss);
  CHECK(loss.value().item() == doctest::Approx(value(b)).epsilon(1e-12));

  auto check_net = [&](Mlp& net, const MlpVars& vars) {
    const Mlp grads = collect_grads(tape, vars, net);
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
      for (int which = 0; which < 2; ++which) {
        Tensor& p = which == 0 ? net.layers[l].weight : net.layers[l].bias;
        const Tensor& g = which == 0 ? grads.layers[l].weight : grads.layers[l].bias;
        const Tensor saved = p;
        const Tensor fd = finite_difference_gradient(
            [&](const Tensor& q) {
              p = q;
              return value(b);
            },
            saved);
        p = saved;
        CHECK(relative_error(g, fd) < 1e-6);
      }
    }
  };
  check_net(b.classifier, v.classifier);
  check_net(b.critics[0], v.critics.heads[0]);
}

TEST_CASE("hyperparameter validation") {
  CHECK_NOTHROW(MsHyperParams{}.validate());
  CHECK_THROWS(MsHyperParams{0.5, -1.0, 2.0, 40.0}.validate());
  CHECK_THROWS(MsHyperParams{0.5, 0.1, 0.0, 40.0}.validate());
}
