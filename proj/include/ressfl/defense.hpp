#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ressfl/data.hpp"
#include "ressfl/model_zoo.hpp"
#include "ressfl/sfl.hpp"

namespace ressfl {

// ---------------------------------------------------------------- attacker-aware training

struct AwareTrainConfig {
  double lambda = 0.3;
  InversionTier sim_tier = InversionTier::kL3;
  int inversion_update_freq = 1;  // f: Phase A runs when step % f == 0
  double client_lr = 0.05;
  double other_lr = 0.05;
  double inversion_lr = 1e-3;
  std::size_t sim_base_width = kDefaultInversionWidth;
  /// Scale the simulator's learning rate by the client's current step-decay
  /// factor.
  bool sync_inversion_decay = true;

  void validate() const;
};

enum class Phase { kA, kB };

/// Called with begin=true before and begin=false after each phase of a
/// client's batch.
using PhaseObserver = std::function<void(Phase phase, bool begin, const ClientState& client)>;

/// Min-max training on each client: Phase A ascends SSIM(D(a), x) on the
/// local inversion model D with the client frozen; Phase B adds
/// lambda * SSIM(D(a), x) to the task loss of client and server with D
/// frozen.
class AttackerAwareHooks : public DefenseHooks {
 public:
  AttackerAwareHooks(AwareTrainConfig cfg, std::uint64_t seed);

  /// Gives every client a fresh local inversion model at cfg.sim_tier.
  void attach(std::vector<ClientState>& clients, const Shape& image_shape) const override;
  void attach(ClientState& client, const Shape& image_shape) const;

  void client_stage(ClientStepContext& ctx, const Tensor& activation, ClientOutgoing& out) override;
  void after_client_update(ClientState& client) override;

  void set_observer(PhaseObserver observer) { observer_ = std::move(observer); }
  const AwareTrainConfig& config() const noexcept { return cfg_; }
  /// Phase A executions across all clients.
  std::size_t phase_a_count() const noexcept { return phase_a_count_.load(); }

 private:
  AwareTrainConfig cfg_;
  std::uint64_t seed_;
  PhaseObserver observer_;
  std::atomic<std::size_t> phase_a_count_{0};
};

/// One attacker-aware batch for one client against the server; `hooks` must
/// have been attached to the client. Returns the cross-entropy.
double attacker_aware_step(ClientState& client, ServerState& server, const PrivateData& data,
                           std::span<const std::size_t> indices, AttackerAwareHooks& hooks);

struct PretrainResult {
  SflRun run;
  Checkpoint checkpoint;
  std::vector<std::string> warnings;
};

/// Expert pre-training: a single client (N = 1) runs `epochs` of
/// attacker-aware training with f = 1. The checkpoint holds the client part
/// ("client.*"), the server part ("server.*") and the run metadata.
PretrainResult attacker_aware_pretrain(const SplitModel& model, const PrivateData& expert_data,
                                       const Dataset& validation, AwareTrainConfig cfg, int epochs,
                                       const SflConfig& base,
                                       const std::function<void(const EpochResult&)>& on_epoch = {});

enum class TransferStrategy { kFreeze, kSimpleFinetune, kAwareFinetune };
TransferStrategy parse_strategy(std::string_view text);
std::string to_string(TransferStrategy s);

/// Strategy-specific training settings applied on top of `base`.
struct TransferSettings {
  double client_lr = 0.0;
  double other_lr = 0.02;
  double lambda = 0.0;
  InversionTier sim_tier = InversionTier::kL0;
  int inversion_update_freq = 5;
};
TransferSettings transfer_settings(TransferStrategy s, double lambda);

struct TransferResult {
  SflRun run;
  std::unique_ptr<AttackerAwareHooks> hooks;  // AwareFinetune only
};

/// Initialises every client replica from the checkpoint's client part, then
/// trains `target` with the strategy's settings.
TransferResult resistance_transfer(const Checkpoint& pretrained, SplitModel target, const PrivateData& data,
                                   const Dataset& validation, TransferStrategy strategy, double lambda,
                                   SflConfig base, std::size_t sim_base_width = kDefaultInversionWidth,
                                   const std::function<void(const EpochResult&)>& on_epoch = {});

/// Copies "client.*" tensors from a checkpoint into `client`; throws
/// ShapeError naming the first incompatible tensor.
void load_client_part(Network& client, const Checkpoint& ckpt);

// ---------------------------------------------------------------- perturbation baselines

enum class PerturbMethod { kNone, kLaplacian, kDropout, kTopkPrune, kAdvNoise };

struct PerturbConfig {
  PerturbMethod method = PerturbMethod::kNone;
  double value = 0.0;  // b, p, k (percent) or epsilon

  void validate() const;
  std::string label() const;  // e.g. "Laplacian(b=0.05)"
};

PerturbMethod parse_perturb_method(std::string_view text);
std::string to_string(PerturbMethod m);

/// Same-shape perturbation of an activation batch. AdvNoise needs the
/// surrogate inversion model and the images it should fail to recover.
/// When `mask` is non-null and the method is multiplicative it receives the
/// 0/1 mask that was applied.
Tensor perturb_activation(const Tensor& activation, const PerturbConfig& cfg, Rng& rng,
                          Network* surrogate = nullptr, const Tensor* images = nullptr, Tensor* mask = nullptr);

/// epsilon * sign(d MSE(surrogate(a), images) / d a); AdvNoise sends a + delta.
Tensor adversarial_delta(const Tensor& activation, double epsilon, Network& surrogate, const Tensor& images);

/// Applies a perturbation to every activation the client sends. AdvNoise
/// trains an L3 surrogate per client online (one Adam step per batch on the
/// reconstruction MSE) and uses it for the sign-gradient step.
class PerturbHooks : public DefenseHooks {
 public:
  PerturbHooks(PerturbConfig cfg, std::uint64_t seed, std::size_t surrogate_base_width = kDefaultInversionWidth);
  void attach(std::vector<ClientState>& clients, const Shape& image_shape) const override;
  void client_stage(ClientStepContext& ctx, const Tensor& activation, ClientOutgoing& out) override;
  Tensor attacker_view(const Tensor& activation, const Tensor& images, Rng& rng) const override;
  const PerturbConfig& config() const noexcept { return cfg_; }

 private:
  PerturbConfig cfg_;
  std::uint64_t seed_;
  std::size_t width_;
};

// ---------------------------------------------------------------- distance correlation

/// Empirical distance correlation (biased V-statistic) between the rows of
/// two batches, each flattened per sample.
double distance_correlation(const Tensor& x, const Tensor& a);

struct DistCorrResult {
  double value = 0.0;
  Tensor grad;  // d dCor / d a
};
DistCorrResult distance_correlation_with_grad(const Tensor& x, const Tensor& a);

/// Adds alpha * dCor(images, activation) to each client's loss.
class DistCorrHooks : public DefenseHooks {
 public:
  explicit DistCorrHooks(double alpha);
  void client_stage(ClientStepContext& ctx, const Tensor& activation, ClientOutgoing& out) override;
  double alpha() const noexcept { return alpha_; }

 private:
  double alpha_;
};

}  // namespace ressfl
