#include "ressfl/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ressfl/error.hpp"
#include "ressfl/losses.hpp"
#include "ressfl/metrics.hpp"

namespace ressfl {

namespace {

Shape activation_shape_of(const Network& client, const Shape& image_shape) {
  Shape in = {1};
  in.insert(in.end(), image_shape.begin(), image_shape.end());
  const Shape out = client.output_shape(in);
  return Shape(out.begin() + 1, out.end());
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------- attacker-aware

void AwareTrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (inversion_update_freq < 1) throw ConfigError("inversion_update_freq must be >= 1");
  if (!(client_lr >= 0.0)) throw ConfigError("client_lr must be >= 0");
  if (!(other_lr > 0.0)) throw ConfigError("other_lr must be > 0");
  if (!(inversion_lr > 0.0)) throw ConfigError("inversion_lr must be > 0");
  if (sim_base_width == 0) throw ConfigError("sim_base_width must be >= 1");
}

AttackerAwareHooks::AttackerAwareHooks(AwareTrainConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
  cfg_.validate();
}

void AttackerAwareHooks::attach(ClientState& client, const Shape& image_shape) const {
  const Shape act = activation_shape_of(client.replica, image_shape);
  client.local_inversion = build_inversion_model(cfg_.sim_tier, act, image_shape, cfg_.sim_base_width,
                                                 Rng::derive(seed_, "local-inversion-" + std::to_string(client.id))
                                                     .next_u64());
  client.inversion_optimizer = Optimizer::adam(cfg_.inversion_lr);
}

void AttackerAwareHooks::attach(std::vector<ClientState>& clients, const Shape& image_shape) const {
  for (auto& c : clients) attach(c, image_shape);
}

void AttackerAwareHooks::client_stage(ClientStepContext& ctx, const Tensor& activation, ClientOutgoing& out) {
  ClientState& c = ctx.client;
  if (!c.local_inversion || !c.inversion_optimizer) {
    throw StateError("client " + std::to_string(c.id) + " has no local inversion model attached");
  }
  Network& d = *c.local_inversion;

  if (c.steps % static_cast<std::uint64_t>(cfg_.inversion_update_freq) == 0) {
    if (observer_) observer_(Phase::kA, true, c);
    if (cfg_.sync_inversion_decay && c.client_lr > 0.0) {
      c.inversion_optimizer->set_learning_rate(cfg_.inversion_lr * c.optimizer.learning_rate() / c.client_lr);
    }
    try {
      const Tensor r = d.forward(activation);
      SsimWithGrad s = ssim_with_grad(r, ctx.images);
      if (!std::isfinite(s.value)) throw NumericError("non-finite SSIM score");
      for (auto& v : s.grad.values()) v = -v;  // ascend
      d.zero_grad();
      d.backward(s.grad);
      c.inversion_optimizer->step(d.parameters());
    } catch (const NumericError& e) {
      throw NumericError(std::string("phase A (client ") + std::to_string(c.id) + "): " + e.what());
    }
    ++phase_a_count_;
    if (observer_) observer_(Phase::kA, false, c);
  }

  if (observer_) observer_(Phase::kB, true, c);
  if (cfg_.lambda > 0.0) {
    try {
      const Tensor r = d.forward(activation);
      SsimWithGrad s = ssim_with_grad(r, ctx.images);
      if (!std::isfinite(s.value)) throw NumericError("non-finite SSIM score");
      for (auto& v : s.grad.values()) v *= cfg_.lambda;
      d.zero_grad();
      out.extra_grad = d.backward(s.grad);
      d.zero_grad();
      out.extra_loss = cfg_.lambda * s.value;
    } catch (const NumericError& e) {
      throw NumericError(std::string("phase B (client ") + std::to_string(c.id) + "): " + e.what());
    }
  }
}

void AttackerAwareHooks::after_client_update(ClientState& client) {
  if (observer_) observer_(Phase::kB, false, client);
}

double attacker_aware_step(ClientState& client, ServerState& server, const PrivateData& data,
                           std::span<const std::size_t> indices, AttackerAwareHooks& hooks) {
  return sfl_train_step(client, server, data, indices, &hooks);
}

PretrainResult attacker_aware_pretrain(const SplitModel& model, const PrivateData& expert_data,
                                       const Dataset& validation, AwareTrainConfig cfg, int epochs,
                                       const SflConfig& base,
                                       const std::function<void(const EpochResult&)>& on_epoch) {
  cfg.validate();
  PretrainResult result;
  if (!model.bottleneck) result.warnings.push_back("pre-training without a bottleneck layer pair");
  SflConfig sc = base;
  sc.num_clients = 1;
  sc.client_lr = cfg.client_lr;
  sc.server_lr = cfg.other_lr;
  sc.total_epochs = epochs;
  result.run = start_sfl(model, expert_data, sc);
  AttackerAwareHooks hooks(cfg, sc.seed);
  hooks.attach(result.run.clients, expert_data.image_shape());
  run_sfl(result.run, expert_data, validation, &hooks, on_epoch);

  Checkpoint& ck = result.checkpoint;
  ck.tensors = result.run.server.central_history.at(epochs).named_parameters("client.");
  for (auto& nt : result.run.server.model.named_parameters("server.")) ck.tensors.push_back(std::move(nt));
  ck.metadata["arch"] = model.arch;
  ck.metadata["cut_layer"] = std::to_string(model.cut_layer);
  ck.metadata["bottleneck"] = model.bottleneck ? model.bottleneck->str() : "none";
  ck.metadata["lambda"] = fmt(cfg.lambda);
  ck.metadata["sim_tier"] = to_string(cfg.sim_tier);
  ck.metadata["epoch"] = std::to_string(epochs);
  ck.metadata["seed"] = std::to_string(sc.seed);
  ck.metadata["input_shape"] = shape_str(model.input_shape);
  ck.metadata["num_classes"] = std::to_string(model.num_classes);
  return result;
}

TransferStrategy parse_strategy(std::string_view text) {
  if (text == "freeze") return TransferStrategy::kFreeze;
  if (text == "simple-finetune") return TransferStrategy::kSimpleFinetune;
  if (text == "aware-finetune") return TransferStrategy::kAwareFinetune;
  throw ConfigError("unknown transfer strategy '" + std::string(text) +
                    "' (expected freeze, simple-finetune or aware-finetune)");
}

std::string to_string(TransferStrategy s) {
  switch (s) {
    case TransferStrategy::kFreeze: return "freeze";
    case TransferStrategy::kSimpleFinetune: return "simple-finetune";
    case TransferStrategy::kAwareFinetune: return "aware-finetune";
  }
  return "?";
}

TransferSettings transfer_settings(TransferStrategy s, double lambda) {
  TransferSettings t;
  switch (s) {
    case TransferStrategy::kFreeze:
      t.client_lr = 0.0;
      break;
    case TransferStrategy::kSimpleFinetune:
      t.client_lr = 0.005;
      break;
    case TransferStrategy::kAwareFinetune:
      if (!(lambda > 0.0)) throw ConfigError("aware fine-tuning needs lambda > 0");
      t.client_lr = 0.005;
      t.lambda = lambda;
      break;
  }
  return t;
}

void load_client_part(Network& client, const Checkpoint& ckpt) { client.load_parameters(ckpt.tensors, "client."); }

TransferResult resistance_transfer(const Checkpoint& pretrained, SplitModel target, const PrivateData& data,
                                   const Dataset& validation, TransferStrategy strategy, double lambda,
                                   SflConfig base, std::size_t sim_base_width,
                                   const std::function<void(const EpochResult&)>& on_epoch) {
  load_client_part(target.client, pretrained);
  const TransferSettings ts = transfer_settings(strategy, lambda);
  base.client_lr = ts.client_lr;
  base.server_lr = ts.other_lr;

  TransferResult result;
  result.run = start_sfl(target, data, base);
  if (strategy == TransferStrategy::kFreeze) {
    for (auto& c : result.run.clients) c.replica.set_frozen(true);
  }
  if (strategy == TransferStrategy::kAwareFinetune) {
    AwareTrainConfig ac;
    ac.lambda = ts.lambda;
    ac.sim_tier = ts.sim_tier;
    ac.inversion_update_freq = ts.inversion_update_freq;
    ac.client_lr = ts.client_lr;
    ac.other_lr = ts.other_lr;
    ac.sim_base_width = sim_base_width;
    result.hooks = std::make_unique<AttackerAwareHooks>(ac, base.seed);
    result.hooks->attach(result.run.clients, data.image_shape());
  }
  run_sfl(result.run, data, validation, result.hooks.get(), on_epoch);
  return result;
}

// ---------------------------------------------------------------- perturbations

void PerturbConfig::validate() const {
  const double v = value;
  switch (method) {
    case PerturbMethod::kNone: break;
    case PerturbMethod::kLaplacian:
      if (!(v >= 0.0)) throw ConfigError("Laplacian scale b must be >= 0");
      break;
    case PerturbMethod::kDropout:
      if (!(v >= 0.0 && v < 1.0)) throw ConfigError("dropout p must be in [0,1)");
      break;
    case PerturbMethod::kTopkPrune:
      if (!(v > 0.0 && v <= 100.0)) throw ConfigError("top-k percentage must be in (0,100]");
      break;
    case PerturbMethod::kAdvNoise:
      if (!(v >= 0.0)) throw ConfigError("adversarial noise epsilon must be >= 0");
      break;
  }
}

PerturbMethod parse_perturb_method(std::string_view text) {
  if (text == "none") return PerturbMethod::kNone;
  if (text == "laplacian") return PerturbMethod::kLaplacian;
  if (text == "dropout") return PerturbMethod::kDropout;
  if (text == "topk") return PerturbMethod::kTopkPrune;
  if (text == "advnoise") return PerturbMethod::kAdvNoise;
  throw ConfigError("unknown perturbation '" + std::string(text) +
                    "' (expected none, laplacian, dropout, topk or advnoise)");
}

std::string to_string(PerturbMethod m) {
  switch (m) {
    case PerturbMethod::kNone: return "none";
    case PerturbMethod::kLaplacian: return "laplacian";
    case PerturbMethod::kDropout: return "dropout";
    case PerturbMethod::kTopkPrune: return "topk";
    case PerturbMethod::kAdvNoise: return "advnoise";
  }
  return "?";
}

std::string PerturbConfig::label() const {
  switch (method) {
    case PerturbMethod::kNone: return "None";
    case PerturbMethod::kLaplacian: return "Laplacian(b=" + fmt(value) + ")";
    case PerturbMethod::kDropout: return "Dropout(p=" + fmt(value) + ")";
    case PerturbMethod::kTopkPrune: return "TopkPrune(k=" + fmt(value) + ")";
    case PerturbMethod::kAdvNoise: return "AdvNoise(eps=" + fmt(value) + ")";
  }
  return "?";
}

Tensor adversarial_delta(const Tensor& activation, double epsilon, Network& surrogate, const Tensor& images) {
  const Tensor rec = surrogate.forward(activation);
  const LossResult l = mse_loss(rec, images);
  surrogate.zero_grad();
  Tensor d = surrogate.backward(l.grad);
  surrogate.zero_grad();
  for (auto& v : d.values()) v = v > 0.0 ? epsilon : (v < 0.0 ? -epsilon : 0.0);
  return d;
}

Tensor perturb_activation(const Tensor& activation, const PerturbConfig& cfg, Rng& rng, Network* surrogate,
                          const Tensor* images, Tensor* mask) {
  cfg.validate();
  Tensor out = activation;
  auto set_mask = [&](const Tensor& m) {
    if (mask != nullptr) *mask = m;
  };
  switch (cfg.method) {
    case PerturbMethod::kNone:
      break;
    case PerturbMethod::kLaplacian:
      for (auto& v : out.values()) v += rng.laplace(cfg.value);
      break;
    case PerturbMethod::kDropout: {
      Tensor m(activation.shape(), 1.0);
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (rng.bernoulli(cfg.value)) {
          m[i] = 0.0;
          out[i] = 0.0;
        }
      }
      set_mask(m);
      break;
    }
    case PerturbMethod::kTopkPrune: {
      Tensor m(activation.shape(), 0.0);
      const std::size_t rows = activation.dim(0), width = activation.row_size();
      auto keep = static_cast<std::size_t>(std::ceil(cfg.value / 100.0 * static_cast<double>(width) - 1e-9));
      keep = std::clamp<std::size_t>(keep, 1, width);
      std::vector<std::size_t> order(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = activation.data().data() + r * width;
        std::iota(order.begin(), order.end(), std::size_t{0});
        // Larger magnitude first, lower index on ties.
        std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep - 1), order.end(),
                         [&](std::size_t a, std::size_t b) {
                           const double fa = std::fabs(row[a]), fb = std::fabs(row[b]);
                           return fa > fb || (fa == fb && a < b);
                         });
        for (std::size_t j = 0; j < keep; ++j) m[r * width + order[j]] = 1.0;
      }
      for (std::size_t i = 0; i < out.size(); ++i) {
        if (m[i] == 0.0) out[i] = 0.0;
      }
      set_mask(m);
      break;
    }
    case PerturbMethod::kAdvNoise: {
      if (surrogate == nullptr || images == nullptr) {
        throw ConfigError("adversarial noise needs a surrogate inversion model and the target images");
      }
      if (cfg.value == 0.0) break;
      const Tensor delta = adversarial_delta(activation, cfg.value, *surrogate, *images);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += delta[i];
      break;
    }
  }
  return out;
}

PerturbHooks::PerturbHooks(PerturbConfig cfg, std::uint64_t seed, std::size_t surrogate_base_width)
    : cfg_(cfg), seed_(seed), width_(surrogate_base_width) {
  cfg_.validate();
}

void PerturbHooks::attach(std::vector<ClientState>& clients, const Shape& image_shape) const {
  if (cfg_.method != PerturbMethod::kAdvNoise) return;
  for (auto& c : clients) {
    const Shape act = activation_shape_of(c.replica, image_shape);
    c.local_inversion = build_inversion_model(InversionTier::kL3, act, image_shape, width_,
                                              Rng::derive(seed_, "surrogate-" + std::to_string(c.id)).next_u64());
    c.inversion_optimizer = Optimizer::adam(1e-3);
  }
}

void PerturbHooks::client_stage(ClientStepContext& ctx, const Tensor& activation, ClientOutgoing& out) {
  ClientState& c = ctx.client;
  if (cfg_.method == PerturbMethod::kAdvNoise) {
    if (!c.local_inversion) throw StateError("adversarial noise defense has no surrogate attached");
    Network& s = *c.local_inversion;
    const LossResult l = mse_loss(s.forward(activation), ctx.images);
    s.zero_grad();
    s.backward(l.grad);
    c.inversion_optimizer->step(s.parameters());
    out.sent = perturb_activation(activation, cfg_, c.noise_rng, &s, &ctx.images);
    return;
  }
  Tensor mask;
  out.sent = perturb_activation(activation, cfg_, c.noise_rng, nullptr, nullptr, &mask);
  out.mask = std::move(mask);
}

Tensor PerturbHooks::attacker_view(const Tensor& activation, const Tensor& images, Rng& rng) const {
  (void)images;
  if (cfg_.method == PerturbMethod::kAdvNoise || cfg_.method == PerturbMethod::kNone) return activation;
  return perturb_activation(activation, cfg_, rng);
}

// ---------------------------------------------------------------- distance correlation

namespace {

struct DcorParts {
  std::size_t n = 0;
  std::vector<double> a, a_c, b_c;  // distances of `act`, centred act / x distances
  double vxa = 0, vaa = 0, vxx = 0;
};

std::vector<double> pairwise(const Tensor& t) {
  const std::size_t n = t.dim(0), w = t.row_size();
  std::vector<double> d(n * n, 0.0);
  const double* p = t.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < w; ++k) {
        const double diff = p[i * w + k] - p[j * w + k];
        s += diff * diff;
      }
      d[i * n + j] = d[j * n + i] = std::sqrt(s);
    }
  }
  return d;
}

std::vector<double> double_centre(const std::vector<double>& d, std::size_t n) {
  std::vector<double> row(n, 0.0);
  double grand = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) row[i] += d[i * n + j];
    grand += row[i];
    row[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);
  std::vector<double> c(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = d[i * n + j] - row[i] - row[j] + grand;
  }
  return c;
}

DcorParts dcor_parts(const Tensor& x, const Tensor& act) {
  if (x.rank() < 1 || act.rank() < 1 || x.dim(0) != act.dim(0)) {
    throw ShapeError("distance correlation needs equal batch sizes, got " + shape_str(x.shape()) + " and " +
                     shape_str(act.shape()));
  }
  DcorParts p;
  p.n = x.dim(0);
  if (p.n < 2) throw ConfigError("distance correlation needs a batch of at least 2");
  p.a = pairwise(act);
  p.a_c = double_centre(p.a, p.n);
  p.b_c = double_centre(pairwise(x), p.n);
  const double nn = static_cast<double>(p.n * p.n);
  for (std::size_t k = 0; k < p.n * p.n; ++k) {
    p.vxa += p.a_c[k] * p.b_c[k];
    p.vaa += p.a_c[k] * p.a_c[k];
    p.vxx += p.b_c[k] * p.b_c[k];
  }
  p.vxa /= nn;
  p.vaa /= nn;
  p.vxx /= nn;
  return p;
}

double dcor_value(const DcorParts& p) {
  const double denom = std::sqrt(p.vxx * p.vaa);
  if (!(denom > 0.0)) return 0.0;
  return std::sqrt(std::max(0.0, p.vxa / denom));
}

}  // namespace

double distance_correlation(const Tensor& x, const Tensor& a) { return dcor_value(dcor_parts(x, a)); }

DistCorrResult distance_correlation_with_grad(const Tensor& x, const Tensor& act) {
  const DcorParts p = dcor_parts(x, act);
  DistCorrResult r;
  r.value = dcor_value(p);
  r.grad = Tensor(act.shape());
  if (r.value == 0.0) return r;
  const std::size_t n = p.n, w = act.row_size();
  const double nn = static_cast<double>(n * n);
  // d dCor / d a_ij for the n*n distance entries.
  const double scale = 1.0 / (2.0 * r.value * nn * std::sqrt(p.vxx * p.vaa));
  const double ratio = p.vxa / p.vaa;
  const double* ap = act.data().data();
  double* gp = r.grad.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dij = p.a[i * n + j];
      if (i == j || dij == 0.0) continue;
      const double gij = scale * (p.b_c[i * n + j] - ratio * p.a_c[i * n + j]);
      // a_ij and a_ji both depend on row i.
      const double coef = 2.0 * gij / dij;
      for (std::size_t k = 0; k < w; ++k) gp[i * w + k] += coef * (ap[i * w + k] - ap[j * w + k]);
    }
  }
  return r;
}

DistCorrHooks::DistCorrHooks(double alpha) : alpha_(alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("distance correlation alpha must be >= 0");
}

void DistCorrHooks::client_stage(ClientStepContext& ctx, const Tensor& activation, ClientOutgoing& out) {
  if (alpha_ == 0.0) return;
  DistCorrResult r = distance_correlation_with_grad(ctx.images, activation);
  for (auto& v : r.grad.values()) v *= alpha_;
  out.extra_grad = std::move(r.grad);
  out.extra_loss = alpha_ * r.value;
}

}  // namespace ressfl
