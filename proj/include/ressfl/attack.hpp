#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

#include "ressfl/metrics.hpp"
#include "ressfl/model_zoo.hpp"
#include "ressfl/sfl.hpp"

namespace ressfl {

inline constexpr double kResistanceTarget = 0.02;

struct AttackConfig {
  std::vector<InversionTier> tiers = {InversionTier::kL0, InversionTier::kL1, InversionTier::kL2,
                                      InversionTier::kL3};
  std::vector<int> attack_epochs;
  int inversion_train_epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::size_t base_width = kDefaultInversionWidth;
  /// Stop once the best aux MSE improved by less than this over `patience` epochs.
  double plateau_tolerance = 1e-5;
  int plateau_patience = 5;
  /// Private samples scored per attacked epoch; 0 scores every logged sample.
  std::size_t eval_samples = 128;
  double resistance_target = kResistanceTarget;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
};

struct TrainedInversion {
  InversionTier tier = InversionTier::kL0;
  int epoch_tag = 0;  // SFL epoch of the client snapshot it was trained on
  Network model;
  std::vector<double> aux_mse;  // per training epoch
};

/// Trains a fresh decoder to invert the frozen `client_snapshot` on the
/// auxiliary images with Adam. `view`, when given, is the attacker's model
/// of the deployed defense and is applied to the aux activations.
TrainedInversion train_inversion_model(const Network& client_snapshot, int epoch_tag, InversionTier tier,
                                       const Tensor& aux_images, const AttackConfig& cfg,
                                       const DefenseHooks* view = nullptr);

/// G(activations). Throws StateError when the activations were logged at a
/// different epoch than the snapshot G was trained against.
Tensor reconstruct(const TrainedInversion& g, const Tensor& activations, int activation_epoch);

struct TierResult {
  InversionTier tier = InversionTier::kL0;
  MetricResult metrics;
  int epochs_trained = 0;
};

struct ResistanceRow {
  int epoch = 0;
  std::vector<TierResult> tiers;
  double mse_l0 = std::numeric_limits<double>::quiet_NaN();
  double mse_best = 0.0;
  InversionTier best_tier = InversionTier::kL0;
  bool resistant = false;
  Tensor truth;                // scored private images
  Tensor best_reconstruction;  // reconstruction by the best tier
};

/// Private activations as logged by the server plus the images they came
/// from (the latter only for scoring).
struct AttackTarget {
  int epoch = 0;
  Tensor activations;
  Tensor truth;
};

ResistanceRow evaluate_resistance(const Network& client_snapshot, int snapshot_epoch, const Tensor& aux_images,
                                  const AttackTarget& target, const AttackConfig& cfg,
                                  const DefenseHooks* view = nullptr);

struct AttackReport {
  std::vector<ResistanceRow> rows;
};

/// One evaluate_resistance row per scheduled epoch, using the server's C*
/// snapshot and activation log for that epoch.
AttackReport attack_schedule(const ServerState& server, const PrivateData& data, const Tensor& aux_images,
                             const AttackConfig& cfg, const DefenseHooks* view = nullptr);

}  // namespace ressfl
