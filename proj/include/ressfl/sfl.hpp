#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "ressfl/data.hpp"
#include "ressfl/model_zoo.hpp"
#include "ressfl/network.hpp"
#include "ressfl/optim.hpp"
#include "ressfl/rng.hpp"

namespace ressfl {

struct ClientState {
  std::size_t id = 0;
  Network replica;
  std::vector<std::size_t> shard;  // sorted indices into the private training set
  std::optional<Network> local_inversion;
  std::optional<Optimizer> inversion_optimizer;
  Rng rng;        // batch order
  Rng noise_rng;  // defense randomness
  double client_lr = 0.05;
  Optimizer optimizer = Optimizer::sgd(0.05);
  std::uint64_t steps = 0;  // batches processed over the whole run
};

struct AccessCounts {
  std::size_t client_reads = 0;   // images read by their owning client
  std::size_t scoring_reads = 0;  // images read to score reconstructions
};

/// The clients' private training images. Only a client can read, and only
/// indices inside its own shard; the experimenter can read for scoring.
/// Every image read is counted.
class PrivateData {
 public:
  explicit PrivateData(Dataset data);
  PrivateData(PrivateData&& other) noexcept
      : data_(std::move(other.data_)),
        client_reads_(other.client_reads_.load()),
        scoring_reads_(other.scoring_reads_.load()) {}

  std::size_t size() const noexcept { return data_.size(); }
  Shape image_shape() const { return data_.image_shape(); }
  int num_classes() const noexcept { return data_.num_classes; }

  /// Throws PrivacyError when any index lies outside the client's shard.
  Tensor client_images(const ClientState& client, std::span<const std::size_t> indices) const;
  std::vector<int> client_labels(const ClientState& client, std::span<const std::size_t> indices) const;
  Tensor scoring_images(std::span<const std::size_t> indices) const;

  AccessCounts access_counts() const;
  void reset_access_counts();

 private:
  void check_shard(const ClientState& client, std::span<const std::size_t> indices) const;
  Dataset data_;
  mutable std::atomic<std::size_t> client_reads_{0};
  mutable std::atomic<std::size_t> scoring_reads_{0};
};

struct ActivationRecord {
  std::size_t client = 0;
  int epoch = 0;  // 1-based
  std::vector<std::size_t> indices;
  Tensor activation;
};

struct ServerState {
  Network model;
  Optimizer optimizer = Optimizer::sgd(0.05);
  double server_lr = 0.05;
  Network central_copy;  // C*
  std::vector<ActivationRecord> activation_log;  // append-only
  std::map<int, Network> central_history;        // C* at the end of each epoch
  std::vector<std::size_t> last_participants;
  Rng sampling_rng;
  int epoch = 0;  // completed epochs
  int total_epochs = 1;

  void record(std::size_t client, std::span<const std::size_t> indices, const Tensor& activation);
  /// Latest logged activation of each requested sample at `epoch`.
  Tensor logged_activations(int epoch, std::span<const std::size_t> indices) const;
  std::vector<int> logged_epochs() const;
};

struct EpochResult {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  std::size_t wall_steps = 0;
  std::size_t participants = 0;
};

/// Per-batch hand-off between the client's forward stage and its backward
/// stage.
struct ClientOutgoing {
  Tensor sent;         // activation transmitted to the server
  Tensor mask;         // multiplies the returned gradient when non-empty
  Tensor extra_grad;   // added to the activation gradient when non-empty
  double extra_loss = 0.0;
};

struct ClientStepContext {
  ClientState& client;
  const Tensor& images;
  std::span<const int> labels;
  int epoch;  // 1-based
};

/// Defense interposition on the client side of each batch. Called
/// concurrently for different clients; implementations may only mutate
/// state reachable from `ctx.client`.
class DefenseHooks {
 public:
  virtual ~DefenseHooks() = default;
  /// Per-client state the defense needs (local models); called once per run.
  virtual void attach(std::vector<ClientState>& clients, const Shape& image_shape) const {
    (void)clients;
    (void)image_shape;
  }
  /// `out.sent` is preset to `activation`.
  virtual void client_stage(ClientStepContext& ctx, const Tensor& activation, ClientOutgoing& out) = 0;
  /// After the client's optimizer step for the batch.
  virtual void after_client_update(ClientState& client) { (void)client; }
  /// Attack-time view of an activation produced by the client model.
  virtual Tensor attacker_view(const Tensor& activation, const Tensor& images, Rng& rng) const {
    (void)images;
    (void)rng;
    return activation;
  }
};

struct SflConfig {
  std::size_t num_clients = 1;
  int total_epochs = 20;
  std::size_t batch_size = 32;
  double client_lr = 0.05;
  double server_lr = 0.05;
  double momentum = 0.5;
  double sampling_rate = 1.0;
  bool lr_decay = true;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
  /// Epochs whose activations are logged; empty logs every epoch.
  std::set<int> log_epochs;
};

/// Element-wise mean of shape-identical replicas.
std::vector<Tensor> federated_average(std::span<const std::vector<Tensor>> replicas);

/// ceil(rate * N) distinct clients, returned in ascending id order.
std::vector<std::size_t> sample_clients(std::size_t num_clients, double rate, Rng& rng);

/// Client part forward on private images; throws PrivacyError when the
/// batch leaves the client's shard.
Tensor client_forward(ClientState& client, const PrivateData& data, std::span<const std::size_t> indices);

/// Seeded shuffle of the shard chunked into batches; the last may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::span<const std::size_t> shard, std::size_t batch_size,
                                                    Rng& rng);

std::vector<ClientState> make_clients(const SplitModel& model, const ClientPartition& partition,
                                      const SflConfig& cfg);
ServerState make_server(const SplitModel& model, const SflConfig& cfg);

/// One SFL-V2 epoch: average the previous round's participants into C*,
/// broadcast to this round's sample, then round-robin over batch slots.
/// Each slot runs the client stage (forward + hooks) per client, the server
/// stage (forward, cross-entropy, backward, step) in client order, then the
/// client backward and step per client.
EpochResult sfl_train_epoch(std::vector<ClientState>& clients, ServerState& server, const PrivateData& data,
                            const Dataset& validation, const SflConfig& cfg, DefenseHooks* hooks = nullptr);

/// One batch for one client outside the epoch loop: client stage, server
/// step, client step. The batch is logged under the current epoch.
/// Returns the cross-entropy.
double sfl_train_step(ClientState& client, ServerState& server, const PrivateData& data,
                      std::span<const std::size_t> indices, DefenseHooks* hooks = nullptr);

/// Classification accuracy (percent) of client followed by server.
double evaluate_accuracy(const Network& client, const Network& server, const Dataset& data,
                         std::size_t batch_size = 256);

/// Full SFL run state.
struct SflRun {
  SflConfig config;
  std::vector<ClientState> clients;
  ServerState server;
  std::vector<EpochResult> history;
};

SflRun start_sfl(const SplitModel& model, const PrivateData& data, const SflConfig& cfg);
/// Runs the remaining epochs; `on_epoch` sees each result as it lands.
void run_sfl(SflRun& run, const PrivateData& data, const Dataset& validation, DefenseHooks* hooks = nullptr,
             const std::function<void(const EpochResult&)>& on_epoch = {});

}  // namespace ressfl
