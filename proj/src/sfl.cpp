#include "ressfl/sfl.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ressfl/error.hpp"
#include "ressfl/losses.hpp"
#include "ressfl/metrics.hpp"
#include "ressfl/parallel.hpp"

namespace ressfl {

// ---------------------------------------------------------------- private data

PrivateData::PrivateData(Dataset data) : data_(std::move(data)) { data_.validate(); }

void PrivateData::check_shard(const ClientState& client, std::span<const std::size_t> indices) const {
  for (std::size_t i : indices) {
    if (!std::binary_search(client.shard.begin(), client.shard.end(), i)) {
      throw PrivacyError("client " + std::to_string(client.id) + " requested sample " + std::to_string(i) +
                         " outside its shard");
    }
  }
}

Tensor PrivateData::client_images(const ClientState& client, std::span<const std::size_t> indices) const {
  check_shard(client, indices);
  client_reads_ += indices.size();
  return data_.images.gather_batch(indices);
}

std::vector<int> PrivateData::client_labels(const ClientState& client, std::span<const std::size_t> indices) const {
  check_shard(client, indices);
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data_.labels[i]);
  return out;
}

Tensor PrivateData::scoring_images(std::span<const std::size_t> indices) const {
  scoring_reads_ += indices.size();
  return data_.images.gather_batch(indices);
}

AccessCounts PrivateData::access_counts() const { return {client_reads_.load(), scoring_reads_.load()}; }

void PrivateData::reset_access_counts() {
  client_reads_ = 0;
  scoring_reads_ = 0;
}

// ---------------------------------------------------------------- server log

void ServerState::record(std::size_t client, std::span<const std::size_t> indices, const Tensor& activation) {
  activation_log.push_back({client, epoch + 1, {indices.begin(), indices.end()}, activation});
}

Tensor ServerState::logged_activations(int at_epoch, std::span<const std::size_t> indices) const {
  std::map<std::size_t, std::pair<const Tensor*, std::size_t>> latest;
  for (const auto& rec : activation_log) {
    if (rec.epoch != at_epoch) continue;
    for (std::size_t r = 0; r < rec.indices.size(); ++r) latest[rec.indices[r]] = {&rec.activation, r};
  }
  if (latest.empty()) throw StateError("no activations logged for epoch " + std::to_string(at_epoch));
  std::vector<Tensor> rows;
  rows.reserve(indices.size());
  for (std::size_t i : indices) {
    auto it = latest.find(i);
    if (it == latest.end()) {
      throw StateError("sample " + std::to_string(i) + " has no logged activation at epoch " +
                       std::to_string(at_epoch));
    }
    rows.push_back(it->second.first->slice_batch(it->second.second, it->second.second + 1));
  }
  return concat_batch(rows);
}

std::vector<int> ServerState::logged_epochs() const {
  std::set<int> s;
  for (const auto& rec : activation_log) s.insert(rec.epoch);
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------- protocol pieces

std::vector<Tensor> federated_average(std::span<const std::vector<Tensor>> replicas) {
  if (replicas.empty()) throw ConfigError("federated_average needs at least one replica");
  const auto& ref = replicas.front();
  for (const auto& r : replicas) {
    if (r.size() != ref.size()) throw ShapeError("replicas have different parameter counts");
    for (std::size_t p = 0; p < r.size(); ++p) {
      if (r[p].shape() != ref[p].shape()) {
        throw ShapeError("replica parameter " + std::to_string(p) + " shape " + shape_str(r[p].shape()) +
                         " != " + shape_str(ref[p].shape()));
      }
    }
  }
  // x0 + sum(xi - x0) / N: exact when replicas agree.
  const double n = static_cast<double>(replicas.size());
  std::vector<Tensor> mean = ref;
  for (std::size_t p = 0; p < ref.size(); ++p) {
    auto& m = mean[p].values();
    const auto& x0 = ref[p].values();
    for (std::size_t j = 0; j < m.size(); ++j) {
      double dev = 0.0;
      for (std::size_t r = 1; r < replicas.size(); ++r) dev += replicas[r][p][j] - x0[j];
      m[j] = x0[j] + dev / n;
    }
  }
  return mean;
}

std::vector<std::size_t> sample_clients(std::size_t num_clients, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("sampling rate must be in (0,1]");
  if (num_clients == 0) throw ConfigError("no clients to sample");
  // Tolerate representation error such as 0.1 * 100 = 10.000000000000002.
  const double want = rate * static_cast<double>(num_clients);
  auto k = static_cast<std::size_t>(std::ceil(want - 1e-9));
  k = std::clamp<std::size_t>(k, 1, num_clients);
  std::vector<std::size_t> ids(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) ids[i] = i;
  if (k == num_clients) return ids;
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[i + rng.index(num_clients - i)]);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

Tensor client_forward(ClientState& client, const PrivateData& data, std::span<const std::size_t> indices) {
  return client.replica.forward(data.client_images(client, indices));
}

std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> shard, std::size_t batch_size,
                                                    Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(shard.begin(), shard.end());
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    const std::size_t end = std::min(order.size(), at + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<ClientState> make_clients(const SplitModel& model, const ClientPartition& partition,
                                      const SflConfig& cfg) {
  if (partition.shards.size() != cfg.num_clients) {
    throw ConfigError("partition has " + std::to_string(partition.shards.size()) + " shards for " +
                      std::to_string(cfg.num_clients) + " clients");
  }
  std::vector<ClientState> clients;
  clients.reserve(cfg.num_clients);
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    ClientState c;
    c.id = i;
    c.replica = model.client;
    c.replica.clear_cache();
    c.shard = partition.shards[i];
    std::sort(c.shard.begin(), c.shard.end());
    c.rng = Rng::derive(cfg.seed, "client-batches-" + std::to_string(i));
    c.noise_rng = Rng::derive(cfg.seed, "client-noise-" + std::to_string(i));
    c.client_lr = cfg.client_lr;
    c.optimizer = Optimizer::sgd(cfg.client_lr > 0 ? cfg.client_lr : 1.0, cfg.momentum);
    clients.push_back(std::move(c));
  }
  return clients;
}

ServerState make_server(const SplitModel& model, const SflConfig& cfg) {
  if (cfg.server_lr <= 0) throw ConfigError("server_lr must be > 0");
  if (cfg.total_epochs < 1) throw ConfigError("total_epochs must be >= 1");
  ServerState s;
  s.model = model.server;
  s.model.clear_cache();
  s.server_lr = cfg.server_lr;
  s.optimizer = Optimizer::sgd(cfg.server_lr, cfg.momentum);
  s.central_copy = model.client;
  s.central_copy.clear_cache();
  s.sampling_rng = Rng::derive(cfg.seed, "client-sampling");
  s.total_epochs = cfg.total_epochs;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) s.last_participants.push_back(i);
  return s;
}

double evaluate_accuracy(const Network& client, const Network& server, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return 0.0;
  std::vector<Tensor> outs;
  for (std::size_t at = 0; at < data.size(); at += batch_size) {
    const std::size_t end = std::min(data.size(), at + batch_size);
    outs.push_back(server.infer(client.infer(data.images.slice_batch(at, end))));
  }
  return accuracy(concat_batch(outs), data.labels);
}

// ---------------------------------------------------------------- epoch

namespace {

std::vector<Tensor> average_of(const std::vector<ClientState>& clients, std::span<const std::size_t> ids) {
  std::vector<std::vector<Tensor>> snaps;
  snaps.reserve(ids.size());
  for (std::size_t id : ids) snaps.push_back(clients.at(id).replica.snapshot());
  return federated_average(snaps);
}

struct Slot {
  std::size_t client;
  const std::vector<std::size_t>* indices;
  std::vector<int> labels;
  ClientOutgoing out;
  Tensor server_grad;
};

void client_stage(Slot& slot, ClientState& c, const PrivateData& data, int epoch, DefenseHooks* hooks) {
  const Tensor images = data.client_images(c, *slot.indices);
  slot.labels = data.client_labels(c, *slot.indices);
  Tensor act = c.replica.forward(images);
  slot.out.sent = act;
  if (hooks != nullptr) {
    ClientStepContext ctx{c, images, slot.labels, epoch};
    hooks->client_stage(ctx, act, slot.out);
  }
}

double server_stage(Slot& slot, ServerState& server, bool log, int epoch, std::size_t slot_index) {
  if (log) server.record(slot.client, *slot.indices, slot.out.sent);
  const Tensor logits = server.model.forward(slot.out.sent);
  LossResult ce = softmax_cross_entropy(logits, slot.labels);
  if (!std::isfinite(ce.value)) {
    throw NumericError("epoch " + std::to_string(epoch) + ", client " + std::to_string(slot.client) + ", batch " +
                       std::to_string(slot_index) + ": non-finite cross-entropy");
  }
  server.model.zero_grad();
  slot.server_grad = server.model.backward(ce.grad);
  server.optimizer.step(server.model.parameters());
  return ce.value;
}

void client_update_stage(Slot& slot, ClientState& c, DefenseHooks* hooks) {
  Tensor g = std::move(slot.server_grad);
  if (!slot.out.mask.empty()) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= slot.out.mask[i];
  }
  if (!slot.out.extra_grad.empty()) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += slot.out.extra_grad[i];
  }
  ensure_finite(g, "client activation gradient");
  c.replica.zero_grad();
  c.replica.backward(g);
  if (c.client_lr > 0) c.optimizer.step(c.replica.parameters());
  ++c.steps;
  if (hooks != nullptr) hooks->after_client_update(c);
}

}  // namespace

double sfl_train_step(ClientState& client, ServerState& server, const PrivateData& data,
                      std::span<const std::size_t> indices, DefenseHooks* hooks) {
  const std::vector<std::size_t> idx(indices.begin(), indices.end());
  Slot slot{client.id, &idx, {}, {}, {}};
  const int epoch = server.epoch + 1;
  client_stage(slot, client, data, epoch, hooks);
  const double loss = server_stage(slot, server, true, epoch, 0);
  client_update_stage(slot, client, hooks);
  return loss;
}

EpochResult sfl_train_epoch(std::vector<ClientState>& clients, ServerState& server, const PrivateData& data,
                            const Dataset& validation, const SflConfig& cfg, DefenseHooks* hooks) {
  if (server.epoch >= server.total_epochs) {
    throw StateError("epoch " + std::to_string(server.epoch + 1) + " exceeds total " +
                     std::to_string(server.total_epochs));
  }
  const int t = server.epoch + 1;
  const int t0 = server.epoch;

  // (1) average the previous round's replicas, broadcast to this round's sample.
  const std::vector<Tensor> central = average_of(clients, server.last_participants);
  server.central_copy.restore(central);
  const auto participants = sample_clients(clients.size(), cfg.sampling_rate, server.sampling_rng);
  for (std::size_t id : participants) clients[id].replica.restore(central);

  const double server_lr = cfg.lr_decay ? step_decay(server.server_lr, t0, server.total_epochs) : server.server_lr;
  server.optimizer.set_learning_rate(server_lr);
  std::vector<std::vector<std::vector<std::size_t>>> batches(clients.size());
  std::size_t rounds = 0;
  for (std::size_t id : participants) {
    auto& c = clients[id];
    if (c.client_lr > 0) {
      c.optimizer.set_learning_rate(cfg.lr_decay ? step_decay(c.client_lr, t0, server.total_epochs) : c.client_lr);
    }
    batches[id] = epoch_batches(c.shard, cfg.batch_size, c.rng);
    rounds = std::max(rounds, batches[id].size());
  }
  const bool log_this = cfg.log_epochs.empty() || cfg.log_epochs.count(t) > 0;

  EpochResult result;
  result.epoch = t;
  result.participants = participants.size();
  double loss_sum = 0.0;
  std::size_t loss_count = 0;

  for (std::size_t r = 0; r < rounds; ++r) try {
    std::vector<Slot> slots;
    for (std::size_t id : participants) {
      if (r < batches[id].size()) slots.push_back({id, &batches[id][r], {}, {}, {}});
    }

    // (2a) client forward and defense hooks.
    parallel_for(slots.size(), cfg.threads, [&](std::size_t s) {
      client_stage(slots[s], clients[slots[s].client], data, t, hooks);
    });

    // (2b) server, round-robin in client order.
    for (Slot& slot : slots) {
      loss_sum += server_stage(slot, server, log_this, t, r);
      ++loss_count;
      ++result.wall_steps;
    }

    // (2c) client backward and step.
    parallel_for(slots.size(), cfg.threads, [&](std::size_t s) {
      client_update_stage(slots[s], clients[slots[s].client], hooks);
    });
  } catch (const NumericError& e) {
    const std::string what = e.what();
    if (what.rfind("epoch ", 0) == 0) throw;
    throw NumericError("epoch " + std::to_string(t) + ", batch slot " + std::to_string(r) + ": " + what);
  }

  const std::vector<Tensor> end_central = average_of(clients, participants);
  Network snapshot = server.central_copy;
  snapshot.restore(end_central);
  snapshot.clear_cache();
  server.central_history[t] = snapshot;
  server.last_participants = participants;
  server.epoch = t;

  result.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
  result.val_accuracy = evaluate_accuracy(snapshot, server.model, validation);
  return result;
}

SflRun start_sfl(const SplitModel& model, const PrivateData& data, const SflConfig& cfg) {
  SflRun run;
  run.config = cfg;
  const ClientPartition part = partition_clients(data.size(), cfg.num_clients, cfg.seed);
  run.clients = make_clients(model, part, cfg);
  run.server = make_server(model, cfg);
  return run;
}

void run_sfl(SflRun& run, const PrivateData& data, const Dataset& validation, DefenseHooks* hooks,
             const std::function<void(const EpochResult&)>& on_epoch) {
  while (run.server.epoch < run.server.total_epochs) {
    run.history.push_back(sfl_train_epoch(run.clients, run.server, data, validation, run.config, hooks));
    if (on_epoch) on_epoch(run.history.back());
  }
}

}  // namespace ressfl
