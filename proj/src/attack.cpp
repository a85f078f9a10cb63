#include "ressfl/attack.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "ressfl/error.hpp"
#include "ressfl/losses.hpp"
#include "ressfl/parallel.hpp"

namespace ressfl {

void AttackConfig::validate() const {
  if (tiers.empty()) throw ConfigError("attack tiers must not be empty");
  if (inversion_train_epochs < 1) throw ConfigError("inversion_train_epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("attack batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("attack learning_rate must be > 0");
  if (base_width == 0) throw ConfigError("inversion base_width must be >= 1");
  if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
}

namespace {

std::uint64_t tier_stream(InversionTier tier, int epoch) {
  return (static_cast<std::uint64_t>(epoch) << 8) | static_cast<std::uint64_t>(tier);
}

bool plateaued(const std::vector<double>& hist, int patience, double tol) {
  const auto n = static_cast<int>(hist.size());
  if (n <= patience) return false;
  const double before = *std::min_element(hist.begin(), hist.end() - patience);
  const double recent = *std::min_element(hist.end() - patience, hist.end());
  return before - recent < tol;
}

Tensor activations_of(const Network& client, const Tensor& images, std::size_t batch) {
  std::vector<Tensor> parts;
  for (std::size_t at = 0; at < images.dim(0); at += batch) {
    parts.push_back(client.infer(images.slice_batch(at, std::min(images.dim(0), at + batch))));
  }
  return concat_batch(parts);
}

}  // namespace

TrainedInversion train_inversion_model(const Network& client_snapshot, int epoch_tag, InversionTier tier,
                                       const Tensor& aux_images, const AttackConfig& cfg,
                                       const DefenseHooks* view) {
  cfg.validate();
  if (aux_images.rank() != 4 || aux_images.dim(0) == 0) {
    throw ShapeError("aux images must be a non-empty [N,C,H,W] batch, got " + shape_str(aux_images.shape()));
  }
  const Shape image_shape(aux_images.shape().begin() + 1, aux_images.shape().end());
  const Shape act_full = client_snapshot.output_shape(aux_images.shape());
  const Shape act_shape(act_full.begin() + 1, act_full.end());

  TrainedInversion g;
  g.tier = tier;
  g.epoch_tag = epoch_tag;
  const std::uint64_t stream = tier_stream(tier, epoch_tag);
  g.model = build_inversion_model(tier, act_shape, image_shape, cfg.base_width, cfg.seed ^ splitmix64(stream));

  // The snapshot is only ever read.
  const Tensor clean = activations_of(client_snapshot, aux_images, 256);
  Rng order = Rng::derive(cfg.seed, stream * 2 + 1);
  Rng noise = Rng::derive(cfg.seed, stream * 2 + 2);
  Optimizer adam = Optimizer::adam(cfg.learning_rate);
  const std::size_t n = aux_images.dim(0);
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;

  for (int e = 0; e < cfg.inversion_train_epochs; ++e) {
    const Tensor acts = view ? view->attacker_view(clean, aux_images, noise) : clean;
    double sum = 0.0;
    for (const auto& b : epoch_batches(all, cfg.batch_size, order)) {
      const Tensor x = aux_images.gather_batch(b);
      const Tensor out = g.model.forward(acts.gather_batch(b));
      const LossResult l = mse_loss(out, x);
      if (!std::isfinite(l.value)) throw NumericError("inversion training diverged (" + to_string(tier) + ")");
      g.model.zero_grad();
      g.model.backward(l.grad);
      adam.step(g.model.parameters());
      sum += l.value * static_cast<double>(b.size());
    }
    g.aux_mse.push_back(sum / static_cast<double>(n));
    if (plateaued(g.aux_mse, cfg.plateau_patience, cfg.plateau_tolerance)) break;
  }
  g.model.clear_cache();
  return g;
}

Tensor reconstruct(const TrainedInversion& g, const Tensor& activations, int activation_epoch) {
  if (activation_epoch != g.epoch_tag) {
    throw StateError("inversion model trained against epoch " + std::to_string(g.epoch_tag) +
                     " cannot reconstruct activations logged at epoch " + std::to_string(activation_epoch));
  }
  std::vector<Tensor> parts;
  for (std::size_t at = 0; at < activations.dim(0); at += 256) {
    parts.push_back(g.model.infer(activations.slice_batch(at, std::min(activations.dim(0), at + 256))));
  }
  return concat_batch(parts);
}

ResistanceRow evaluate_resistance(const Network& client_snapshot, int snapshot_epoch, const Tensor& aux_images,
                                  const AttackTarget& target, const AttackConfig& cfg, const DefenseHooks* view) {
  cfg.validate();
  if (target.epoch != snapshot_epoch) {
    throw StateError("snapshot epoch " + std::to_string(snapshot_epoch) + " does not match activation epoch " +
                     std::to_string(target.epoch));
  }
  std::vector<InversionTier> tiers = cfg.tiers;
  std::sort(tiers.begin(), tiers.end());
  tiers.erase(std::unique(tiers.begin(), tiers.end()), tiers.end());

  std::vector<TierResult> results(tiers.size());
  std::vector<Tensor> recons(tiers.size());
  parallel_for(tiers.size(), cfg.threads, [&](std::size_t i) {
    const TrainedInversion g = train_inversion_model(client_snapshot, snapshot_epoch, tiers[i], aux_images, cfg, view);
    recons[i] = reconstruct(g, target.activations, target.epoch);
    results[i] = {tiers[i], image_metrics(recons[i], target.truth), static_cast<int>(g.aux_mse.size())};
  });

  ResistanceRow row;
  row.epoch = snapshot_epoch;
  row.tiers = results;
  std::size_t best = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (results[i].metrics.mse < results[best].metrics.mse) best = i;
    if (results[i].tier == InversionTier::kL0) row.mse_l0 = results[i].metrics.mse;
  }
  row.mse_best = results[best].metrics.mse;
  row.best_tier = results[best].tier;
  row.resistant = row.mse_best >= cfg.resistance_target;
  row.truth = target.truth;
  row.best_reconstruction = recons[best];
  return row;
}

AttackReport attack_schedule(const ServerState& server, const PrivateData& data, const Tensor& aux_images,
                             const AttackConfig& cfg, const DefenseHooks* view) {
  cfg.validate();
  if (cfg.attack_epochs.empty()) throw ConfigError("attack schedule is empty");

  const std::vector<int> logged = server.logged_epochs();
  std::vector<int> available;
  for (int e : logged) {
    if (server.central_history.count(e)) available.push_back(e);
  }
  for (int e : cfg.attack_epochs) {
    if (!std::binary_search(available.begin(), available.end(), e)) {
      std::string list;
      for (int a : available) list += (list.empty() ? "" : ",") + std::to_string(a);
      throw ConfigError("no snapshot/activation log for epoch " + std::to_string(e) + "; available epochs: [" +
                        list + "]");
    }
  }

  AttackReport report;
  for (int e : cfg.attack_epochs) {
    // Freshest activations first: they are closest to the epoch-end snapshot.
    std::set<std::size_t> seen;
    for (auto it = server.activation_log.rbegin(); it != server.activation_log.rend(); ++it) {
      if (it->epoch != e) continue;
      for (auto i = it->indices.rbegin(); i != it->indices.rend(); ++i) {
        if (cfg.eval_samples > 0 && seen.size() >= cfg.eval_samples) break;
        seen.insert(*i);
      }
    }
    std::vector<std::size_t> idx(seen.begin(), seen.end());
    AttackTarget target{e, server.logged_activations(e, idx), data.scoring_images(idx)};
    report.rows.push_back(evaluate_resistance(server.central_history.at(e), e, aux_images, target, cfg, view));
  }
  return report;
}

}  // namespace ressfl
