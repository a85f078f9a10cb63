#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "ressfl/defense.hpp"
#include "ressfl/error.hpp"
#include "ressfl/losses.hpp"
#include "ressfl/metrics.hpp"
#include "test_support.hpp"

using namespace ressfl;

namespace {

struct Fixture {
  Dataset train, validation;
  SplitModel model;
};

Fixture make_fixture(std::uint64_t seed, std::size_t n = 160) {
  const Dataset all = synth_dataset(n, 10, {1, 16, 16}, seed);
  auto split = split_train_validation(all, 0.2, seed);
  return {split.train, split.validation,
          build_split_classifier(kDefaultArch, kDefaultCutLayer, {1, 16, 16}, 10, seed)};
}

bool same_params(const Network& a, const Network& b) {
  const auto pa = a.snapshot(), pb = b.snapshot();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!(pa[i] == pb[i])) return false;
  }
  return true;
}

AwareTrainConfig small_aware(double lambda, int f, InversionTier tier = InversionTier::kL0) {
  AwareTrainConfig c;
  c.lambda = lambda;
  c.inversion_update_freq = f;
  c.sim_tier = tier;
  c.sim_base_width = 2;
  return c;
}

SflConfig small_sfl(std::size_t clients, int epochs, std::uint64_t seed) {
  SflConfig c;
  c.num_clients = clients;
  c.total_epochs = epochs;
  c.batch_size = 16;
  c.seed = seed;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- attacker-aware

TEST_CASE("lambda 0 reproduces plain split federated training exactly") {
  Fixture fx = make_fixture(1);
  PrivateData data(fx.train);
  const SflConfig cfg = small_sfl(2, 2, 1);
  SflRun plain = start_sfl(fx.model, data, cfg);
  run_sfl(plain, data, fx.validation);

  SflRun aware = start_sfl(fx.model, data, cfg);
  AttackerAwareHooks hooks(small_aware(0.0, 1), 1);
  hooks.attach(aware.clients, data.image_shape());
  run_sfl(aware, data, fx.validation, &hooks);

  CHECK(hooks.phase_a_count() > 0);
  CHECK(same_params(plain.server.model, aware.server.model));
  for (int e = 1; e <= 2; ++e) CHECK(same_params(plain.server.central_history.at(e), aware.server.central_history.at(e)));
  REQUIRE(plain.server.activation_log.size() == aware.server.activation_log.size());
  for (std::size_t i = 0; i < plain.server.activation_log.size(); ++i) {
    CHECK(plain.server.activation_log[i].activation == aware.server.activation_log[i].activation);
  }
  CHECK(plain.history[1].train_loss == aware.history[1].train_loss);
}

TEST_CASE("each phase only moves its own parameters") {
  Fixture fx = make_fixture(2);
  PrivateData data(fx.train);
  SflRun run = start_sfl(fx.model, data, small_sfl(2, 1, 2));
  AttackerAwareHooks hooks(small_aware(0.3, 1), 2);
  hooks.attach(run.clients, data.image_shape());

  // Phase B of one client spans the other clients' stages, so key by client.
  Network client_at_a, server_at_a, inv_at_a;
  std::map<std::size_t, Network> inv_at_b, client_at_b;
  int a_moved_inversion = 0, b_moved_client = 0, checks = 0;
  hooks.set_observer([&](Phase phase, bool begin, const ClientState& c) {
    if (phase == Phase::kA && begin) {
      client_at_a = c.replica;
      server_at_a = run.server.model;
      inv_at_a = *c.local_inversion;
    } else if (phase == Phase::kA) {
      CHECK(same_params(c.replica, client_at_a));
      CHECK(same_params(run.server.model, server_at_a));
      a_moved_inversion += !same_params(*c.local_inversion, inv_at_a);
    } else if (begin) {
      inv_at_b[c.id] = *c.local_inversion;
      client_at_b[c.id] = c.replica;
    } else {
      CHECK(same_params(*c.local_inversion, inv_at_b.at(c.id)));
      b_moved_client += !same_params(c.replica, client_at_b.at(c.id));
      ++checks;
    }
  });
  run_sfl(run, data, fx.validation, &hooks);
  CHECK(checks > 0);
  CHECK(a_moved_inversion == checks);
  CHECK(b_moved_client == checks);
}

TEST_CASE("inversion update frequency 5 over 10 steps runs phase A twice") {
  Fixture fx = make_fixture(3);
  PrivateData data(fx.train);
  SflRun run = start_sfl(fx.model, data, small_sfl(1, 1, 3));
  AttackerAwareHooks hooks(small_aware(0.3, 5), 3);
  hooks.attach(run.clients, data.image_shape());
  int a_begins = 0;
  hooks.set_observer([&](Phase p, bool begin, const ClientState&) { a_begins += (p == Phase::kA && begin); });
  ClientState& c = run.clients[0];
  for (int s = 0; s < 10; ++s) {
    std::vector<std::size_t> idx(c.shard.begin() + s * 8, c.shard.begin() + s * 8 + 8);
    CHECK(std::isfinite(attacker_aware_step(c, run.server, data, idx, hooks)));
  }
  CHECK(hooks.phase_a_count() == 2);
  CHECK(a_begins == 2);
  CHECK(c.steps == 10);
}

TEST_CASE("phase A raises the simulated attacker's SSIM, phase B gradient is lambda times dSSIM/da") {
  Fixture fx = make_fixture(4);
  PrivateData data(fx.train);
  SflConfig cfg = small_sfl(1, 1, 4);
  auto clients = make_clients(fx.model, partition_clients(fx.train.size(), 1, 4), cfg);
  ClientState& c = clients[0];
  std::vector<std::size_t> idx(c.shard.begin(), c.shard.begin() + 4);
  const Tensor x = data.client_images(c, idx);
  const Tensor act = c.replica.infer(x);

  SUBCASE("phase A ascends") {
    AttackerAwareHooks hooks(small_aware(0.0, 1), 4);
    hooks.attach(c, data.image_shape());
    const double before = ssim(c.local_inversion->infer(act), x);
    ClientOutgoing out;
    out.sent = act;
    ClientStepContext ctx{c, x, {}, 1};
    hooks.client_stage(ctx, act, out);
    CHECK(ssim(c.local_inversion->infer(act), x) > before);
    CHECK(out.extra_grad.empty());
  }
  SUBCASE("phase B regulariser gradient") {
    const double lambda = 0.7;
    AttackerAwareHooks hooks(small_aware(lambda, 2), 4);
    hooks.attach(c, data.image_shape());
    c.steps = 1;  // phase A skipped
    const Network d = *c.local_inversion;
    ClientOutgoing out;
    out.sent = act;
    ClientStepContext ctx{c, x, {}, 1};
    hooks.client_stage(ctx, act, out);
    CHECK(same_params(*c.local_inversion, d));
    CHECK(out.extra_loss == doctest::Approx(lambda * ssim(d.infer(act), x)).epsilon(1e-12));
    REQUIRE(out.extra_grad.shape() == act.shape());

    Tensor probe = act;
    Rng pick(9);
    std::vector<double> analytic, numeric;
    for (int k = 0; k < 24; ++k) {
      const std::size_t i = pick.index(probe.size());
      const double keep = probe[i], h = 1e-5;
      probe[i] = keep + h;
      const double up = lambda * ssim(d.infer(probe), x);
      probe[i] = keep - h;
      const double down = lambda * ssim(d.infer(probe), x);
      probe[i] = keep;
      numeric.push_back((up - down) / (2 * h));
      analytic.push_back(out.extra_grad[i]);
    }
    CHECK(testing::relative_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("attacker-aware config validation") {
  CHECK_THROWS_AS(AttackerAwareHooks(small_aware(-0.1, 1), 0), ConfigError);
  CHECK_THROWS_AS(AttackerAwareHooks(small_aware(0.3, 0), 0), ConfigError);
}

// ---------------------------------------------------------------- pretrain / transfer

TEST_CASE("pre-training writes client and server parts with run metadata") {
  Fixture fx = make_fixture(5);
  PrivateData data(fx.train);
  const SplitModel m = insert_bottleneck(fx.model, BottleneckConfig{8, 1});
  PretrainResult pr = attacker_aware_pretrain(m, data, fx.validation, small_aware(0.3, 1, InversionTier::kL3), 1,
                                              small_sfl(4, 1, 5));
  CHECK(pr.run.clients.size() == 1);
  CHECK(pr.warnings.empty());
  const Checkpoint& ck = pr.checkpoint;
  CHECK(ck.metadata.at("bottleneck") == "C8-S1");
  CHECK(ck.metadata.at("lambda") == "0.3");
  CHECK(ck.metadata.at("sim_tier") == "L3");
  CHECK(ck.metadata.at("epoch") == "1");
  std::size_t clients = 0, servers = 0;
  for (const auto& t : ck.tensors) {
    clients += t.name.rfind("client.", 0) == 0;
    servers += t.name.rfind("server.", 0) == 0;
  }
  CHECK(clients == m.client.named_parameters().size());
  CHECK(servers == m.server.named_parameters().size());

  PretrainResult plain = attacker_aware_pretrain(fx.model, data, fx.validation, small_aware(0.3, 1), 1,
                                                 small_sfl(1, 1, 5));
  CHECK(plain.warnings.size() == 1);
  CHECK(plain.checkpoint.metadata.at("bottleneck") == "none");
}

TEST_CASE("freeze keeps the client part bit-identical to the checkpoint") {
  Fixture fx = make_fixture(6);
  PrivateData data(fx.train);
  PretrainResult pr = attacker_aware_pretrain(fx.model, data, fx.validation, small_aware(0.3, 1), 1,
                                              small_sfl(1, 1, 6));
  Network expect = fx.model.client;
  load_client_part(expect, pr.checkpoint);
  CHECK_FALSE(same_params(expect, fx.model.client));

  const SplitModel target = build_split_classifier(kDefaultArch, kDefaultCutLayer, {1, 16, 16}, 10, 60);
  TransferResult tr = resistance_transfer(pr.checkpoint, target, data, fx.validation, TransferStrategy::kFreeze, 0.0,
                                          small_sfl(3, 3, 6), 2);
  for (int e = 1; e <= 3; ++e) CHECK(same_params(tr.run.server.central_history.at(e), expect));
  CHECK_FALSE(same_params(tr.run.server.model, target.server));
  CHECK(tr.hooks == nullptr);
}

TEST_CASE("transfer strategy settings") {
  const TransferSettings f = transfer_settings(TransferStrategy::kFreeze, 0.0);
  CHECK(f.client_lr == 0.0);
  CHECK(f.other_lr == 0.02);
  const TransferSettings s = transfer_settings(TransferStrategy::kSimpleFinetune, 0.0);
  CHECK(s.client_lr == 0.005);
  CHECK(s.lambda == 0.0);
  const TransferSettings a = transfer_settings(TransferStrategy::kAwareFinetune, 0.3);
  CHECK(a.client_lr == 0.005);
  CHECK(a.other_lr == 0.02);
  CHECK(a.sim_tier == InversionTier::kL0);
  CHECK(a.inversion_update_freq == 5);
  CHECK(a.lambda == 0.3);
  CHECK_THROWS_AS(transfer_settings(TransferStrategy::kAwareFinetune, -1.0), ConfigError);
  CHECK_THROWS_AS(transfer_settings(TransferStrategy::kAwareFinetune, 0.0), ConfigError);
  CHECK(parse_strategy("aware-finetune") == TransferStrategy::kAwareFinetune);
  CHECK_THROWS_AS(parse_strategy("thaw"), ConfigError);
}

TEST_CASE("aware fine-tuning attaches L0 simulators and trains the client") {
  Fixture fx = make_fixture(7);
  PrivateData data(fx.train);
  PretrainResult pr = attacker_aware_pretrain(fx.model, data, fx.validation, small_aware(0.3, 1), 1,
                                              small_sfl(1, 1, 7));
  TransferResult tr = resistance_transfer(pr.checkpoint, fx.model, data, fx.validation,
                                          TransferStrategy::kAwareFinetune, 0.3, small_sfl(2, 1, 7), 2);
  REQUIRE(tr.hooks != nullptr);
  CHECK(tr.hooks->config().sim_tier == InversionTier::kL0);
  CHECK(tr.hooks->config().inversion_update_freq == 5);
  CHECK(tr.hooks->phase_a_count() > 0);
  Network loaded = fx.model.client;
  load_client_part(loaded, pr.checkpoint);
  CHECK_FALSE(same_params(tr.run.server.central_history.at(1), loaded));
}

TEST_CASE("loading a checkpoint into a different architecture names the tensor") {
  Fixture fx = make_fixture(8);
  PrivateData data(fx.train);
  PretrainResult pr = attacker_aware_pretrain(fx.model, data, fx.validation, small_aware(0.3, 1), 1,
                                              small_sfl(1, 1, 8));
  Network other = insert_bottleneck(fx.model, BottleneckConfig{4, 2}).client;
  CHECK_THROWS(load_client_part(other, pr.checkpoint));
}

// ---------------------------------------------------------------- perturbations

TEST_CASE("zero-strength perturbations are identities") {
  Rng rng(1);
  const Tensor a = testing::random_tensor({3, 2, 4, 4}, rng);
  CHECK(perturb_activation(a, {PerturbMethod::kNone, 0.0}, rng) == a);
  CHECK(perturb_activation(a, {PerturbMethod::kLaplacian, 0.0}, rng) == a);
  CHECK(perturb_activation(a, {PerturbMethod::kDropout, 0.0}, rng) == a);
  CHECK(perturb_activation(a, {PerturbMethod::kTopkPrune, 100.0}, rng) == a);
  Network s = build_inversion_model(InversionTier::kL0, {2, 4, 4}, {1, 16, 16}, 2, 1);
  const Tensor x(Shape{3, 1, 16, 16}, 0.5);
  CHECK(perturb_activation(a, {PerturbMethod::kAdvNoise, 0.0}, rng, &s, &x) == a);
  CHECK_THROWS_AS(perturb_activation(a, {PerturbMethod::kAdvNoise, 0.1}, rng), ConfigError);
}

TEST_CASE("perturbation parameter ranges") {
  CHECK_THROWS_AS((PerturbConfig{PerturbMethod::kLaplacian, -0.1}.validate()), ConfigError);
  CHECK_THROWS_AS((PerturbConfig{PerturbMethod::kDropout, 1.0}.validate()), ConfigError);
  CHECK_THROWS_AS((PerturbConfig{PerturbMethod::kTopkPrune, 0.0}.validate()), ConfigError);
  CHECK_THROWS_AS((PerturbConfig{PerturbMethod::kTopkPrune, 101.0}.validate()), ConfigError);
  CHECK_THROWS_AS((PerturbConfig{PerturbMethod::kAdvNoise, -0.01}.validate()), ConfigError);
  CHECK(PerturbConfig{PerturbMethod::kLaplacian, 0.05}.label() == "Laplacian(b=0.05)");
  CHECK(parse_perturb_method("topk") == PerturbMethod::kTopkPrune);
  CHECK_THROWS_AS(parse_perturb_method("blur"), ConfigError);
}

TEST_CASE("top-k keeps the largest magnitudes") {
  Rng rng(2);
  Tensor a(Shape{1, 4});
  a.values() = {1, -2, 3, -4};
  Tensor mask;
  const Tensor out = perturb_activation(a, {PerturbMethod::kTopkPrune, 50.0}, rng, nullptr, nullptr, &mask);
  CHECK(out.values() == std::vector<double>{0, 0, 3, -4});
  CHECK(mask.values() == std::vector<double>{0, 0, 1, 1});

  Tensor ties(Shape{1, 4}, 1.0);
  CHECK(perturb_activation(ties, {PerturbMethod::kTopkPrune, 50.0}, rng).values() ==
        std::vector<double>{1, 1, 0, 0});

  // Sort oracle, per sample.
  for (int trial = 0; trial < 20; ++trial) {
    const double k = 5.0 + 90.0 * rng.uniform();
    const Tensor t = testing::random_tensor({3, 2, 3, 3}, rng);
    const Tensor got = perturb_activation(t, {PerturbMethod::kTopkPrune, k}, rng);
    const std::size_t w = t.row_size();
    const auto keep = static_cast<std::size_t>(std::ceil(k / 100.0 * static_cast<double>(w) - 1e-9));
    for (std::size_t r = 0; r < 3; ++r) {
      std::vector<std::size_t> order(w);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t x, std::size_t y) { return std::fabs(t[r * w + x]) > std::fabs(t[r * w + y]); });
      std::vector<double> expect(w, 0.0);
      for (std::size_t j = 0; j < keep; ++j) expect[order[j]] = t[r * w + order[j]];
      for (std::size_t j = 0; j < w; ++j) CHECK(got[r * w + j] == expect[j]);
    }
  }
}

TEST_CASE("Laplacian noise variance and dropout zero fraction") {
  Rng rng(3);
  const Tensor zero(Shape{1000, 1000}, 0.0);
  const double b = 0.08;
  const Tensor noisy = perturb_activation(zero, {PerturbMethod::kLaplacian, b}, rng);
  double m = 0, v = 0;
  for (double x : noisy.values()) m += x;
  m /= static_cast<double>(noisy.size());
  for (double x : noisy.values()) v += (x - m) * (x - m);
  v /= static_cast<double>(noisy.size());
  CHECK(std::fabs(v / (2 * b * b) - 1.0) < 0.05);

  const Tensor ones(Shape{1000, 1000}, 1.5);
  Tensor mask;
  const Tensor dropped = perturb_activation(ones, {PerturbMethod::kDropout, 0.2}, rng, nullptr, nullptr, &mask);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < dropped.size(); ++i) {
    if (dropped[i] == 0.0) {
      ++zeros;
      CHECK(mask[i] == 0.0);
    } else {
      CHECK(dropped[i] == 1.5);
    }
  }
  CHECK(std::fabs(static_cast<double>(zeros) / 1e6 - 0.2) < 0.01);
}

TEST_CASE("adversarial noise has infinity norm epsilon and raises surrogate error") {
  Rng rng(4);
  const Tensor a = testing::random_tensor({4, 2, 4, 4}, rng, 0.0, 1.0);
  const Tensor x = testing::random_tensor({4, 1, 16, 16}, rng, 0.0, 1.0);
  Network s = build_inversion_model(InversionTier::kL0, {2, 4, 4}, {1, 16, 16}, 2, 4);
  const double eps = 0.05;
  const Tensor delta = adversarial_delta(a, eps, s, x);
  double inf = 0.0;
  for (double d : delta.values()) {
    CHECK((d == eps || d == -eps || d == 0.0));
    inf = std::max(inf, std::fabs(d));
  }
  CHECK(inf == eps);

  const Tensor out = perturb_activation(a, {PerturbMethod::kAdvNoise, eps}, rng, &s, &x);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(out[i] == a[i] + delta[i]);
  const Tensor before = s.infer(a), after = s.infer(out);
  CHECK(mse(after, x) > mse(before, x));
}

TEST_CASE("perturbation hooks mask gradients and mimic the defense for the attacker") {
  Fixture fx = make_fixture(9);
  PrivateData data(fx.train);
  SflRun run = start_sfl(fx.model, data, small_sfl(2, 1, 9));
  PerturbHooks drop({PerturbMethod::kDropout, 0.25}, 9, 2);
  drop.attach(run.clients, data.image_shape());
  run_sfl(run, data, fx.validation, &drop);
  std::size_t zeros = 0, total = 0;
  for (const auto& rec : run.server.activation_log) {
    for (double v : rec.activation.values()) zeros += v == 0.0;
    total += rec.activation.size();
  }
  CHECK(static_cast<double>(zeros) / static_cast<double>(total) >= 0.2);

  Rng rng(1);
  const Tensor a = testing::random_tensor({2, 4}, rng, 1.0, 2.0);
  CHECK_FALSE(drop.attacker_view(a, Tensor{}, rng) == a);
  PerturbHooks adv({PerturbMethod::kAdvNoise, 0.1}, 9, 2);
  CHECK(adv.attacker_view(a, Tensor{}, rng) == a);

  SflRun run2 = start_sfl(fx.model, data, small_sfl(2, 1, 9));
  adv.attach(run2.clients, data.image_shape());
  REQUIRE(run2.clients[0].local_inversion.has_value());
  run_sfl(run2, data, fx.validation, &adv);
  CHECK(std::isfinite(run2.history[0].train_loss));
}

// ---------------------------------------------------------------- distance correlation

TEST_CASE("distance correlation identities") {
  Rng rng(5);
  const Tensor x = testing::random_tensor({16, 1, 4, 4}, rng);
  CHECK(distance_correlation(x, x) == doctest::Approx(1.0).epsilon(1e-9));
  Tensor affine = x;
  for (auto& v : affine.values()) v = 2 * v + 3;
  CHECK(distance_correlation(x, affine) == doctest::Approx(1.0).epsilon(1e-9));

  const Tensor u = testing::random_tensor({400, 1}, rng), w = testing::random_tensor({400, 1}, rng);
  CHECK(distance_correlation(u, w) < 0.2);
  CHECK_THROWS_AS(distance_correlation(Tensor(Shape{1, 3}), Tensor(Shape{1, 3})), ConfigError);
  CHECK_THROWS_AS(distance_correlation(Tensor(Shape{2, 3}), Tensor(Shape{3, 3})), ShapeError);
}

TEST_CASE("distance correlation gradient matches finite differences") {
  Rng rng(6);
  const Tensor x = testing::random_tensor({6, 5}, rng);
  Tensor a = testing::random_tensor({6, 3}, rng);
  const DistCorrResult r = distance_correlation_with_grad(x, a);
  CHECK(r.value == distance_correlation(x, a));
  std::vector<double> num = testing::numeric_gradient([&] { return distance_correlation(x, a); }, a.values());
  CHECK(testing::relative_error(r.grad.values(), num) < 1e-6);
}

TEST_CASE("distance correlation hook adds alpha-scaled regulariser") {
  Fixture fx = make_fixture(10);
  PrivateData data(fx.train);
  SflConfig cfg = small_sfl(1, 1, 10);
  auto clients = make_clients(fx.model, partition_clients(fx.train.size(), 1, 10), cfg);
  std::vector<std::size_t> idx(clients[0].shard.begin(), clients[0].shard.begin() + 8);
  const Tensor x = data.client_images(clients[0], idx);
  const Tensor act = clients[0].replica.infer(x);
  DistCorrHooks h(1.5);
  ClientOutgoing out;
  ClientStepContext ctx{clients[0], x, {}, 1};
  h.client_stage(ctx, act, out);
  const DistCorrResult r = distance_correlation_with_grad(x, act);
  CHECK(out.extra_loss == doctest::Approx(1.5 * r.value));
  for (std::size_t i = 0; i < act.size(); ++i) CHECK(out.extra_grad[i] == 1.5 * r.grad[i]);
  CHECK_THROWS_AS(DistCorrHooks(-1.0), ConfigError);
}
