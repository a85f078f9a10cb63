#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ressfl/attack.hpp"
#include "ressfl/defense.hpp"

namespace ressfl {

enum class Mode { kPretrain, kTransfer, kAttack, kCompareDefenses, kEndToEnd };
Mode parse_mode(std::string_view text);
std::string to_string(Mode m);

struct DatasetSpec {
  std::string source = "synthetic";  // synthetic | idx
  std::string images;                // idx only
  std::string labels;                // idx only
  std::size_t samples = 1000;        // synthetic size, or idx cap (0 = all)
  int num_classes = 10;              // synthetic only
  Shape image_shape = {1, 16, 16};   // synthetic only
  double validation_fraction = 0.2;
  /// end-to-end / compare-defenses: share of the training split held by the
  /// expert for pre-training; the rest is the clients' target data.
  double expert_fraction = 0.5;
};

struct ModelSpec {
  std::string arch{kDefaultArch};
  std::size_t cut_layer = kDefaultCutLayer;
  std::optional<BottleneckConfig> bottleneck;  // for plain and baseline runs
};

struct PretrainSpec {
  int epochs = 30;
  AwareTrainConfig aware;
  std::optional<BottleneckConfig> bottleneck = BottleneckConfig{8, 1};
};

struct TransferSpec {
  TransferStrategy strategy = TransferStrategy::kAwareFinetune;
  double lambda = 0.3;
  std::string checkpoint;  // transfer mode only
};

/// Defense for mode=attack: none, laplacian, dropout, topk, advnoise, dcor,
/// bottleneck (uses the pre-training bottleneck) or aware (attacker-aware
/// training from scratch with the pre-training settings and lambda = value).
struct DefenseSpec {
  std::string method = "none";
  double value = 0.0;
};

struct ExperimentConfig {
  Mode mode = Mode::kAttack;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DatasetSpec dataset;
  ModelSpec model;
  SflConfig sfl;  // threads and seed are filled in from the run
  PretrainSpec pretrain;
  TransferSpec transfer;
  DefenseSpec defense;
  AttackConfig attack;  // attack_epochs, seed and threads are filled in per run
  /// Unset: attack the final epoch only. Empty: no attack.
  std::optional<std::vector<int>> attack_epochs;
  bool compare_bottleneck_only = false;

  /// Epochs of the attacked run in this mode.
  int attacked_run_epochs() const;
  std::vector<int> scheduled_attack_epochs() const;
  void validate() const;
};

/// Parses a JSON experiment file. Missing fields take defaults; unknown or
/// invalid fields throw ConfigError naming the JSON path. `seed_override`
/// replaces the file's seed, which is otherwise mandatory.
ExperimentConfig parse_config(std::string_view json_text, std::optional<std::uint64_t> seed_override = {});
ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = {});
/// Effective configuration with every default spelled out.
std::string resolved_config_json(const ExperimentConfig& cfg);

struct RunRecord {
  std::string label;
  bool in_summary = true;  // false for the expert pre-training stage
  std::vector<EpochResult> epochs;
  std::vector<ResistanceRow> attack;
};

struct SummaryRow {
  std::string run;
  double accuracy = 0.0;
  double mse_l0 = 0.0;
  double mse_best = 0.0;
  bool resistant = false;
  bool attacked = false;
};

struct RunReport {
  Mode mode = Mode::kAttack;
  std::vector<RunRecord> runs;
  std::vector<SummaryRow> summary;
  std::vector<std::string> warnings;
  std::size_t primary = 0;  // run used for attack.csv and recon.pgm
};

SummaryRow summarize(const RunRecord& run);

/// Data split shared by all modes.
struct PreparedData {
  Dataset train;       // all training data (pretrain, transfer, attack)
  Dataset expert;      // end-to-end / compare: pre-training share
  Dataset target;      // end-to-end / compare: clients' share
  Dataset validation;  // server validation and attacker aux set
};
PreparedData prepare_data(const ExperimentConfig& cfg);

/// The run's classifier for data shaped like `like`, optionally with a
/// bottleneck pair.
SplitModel experiment_model(const ExperimentConfig& cfg, const Dataset& like,
                            const std::optional<BottleneckConfig>& bottleneck);

/// Hooks for a mode=attack defense method (nullptr for none/bottleneck).
std::unique_ptr<DefenseHooks> make_defense_hooks(const ExperimentConfig& cfg, const std::string& method,
                                                 double value);

/// Trains `model` with plain SFL plus `hooks` and attacks the run.
RunRecord train_and_attack(const std::string& label, const SplitModel& model, const Dataset& train,
                           const Dataset& validation, const ExperimentConfig& cfg, DefenseHooks* hooks,
                           std::size_t threads);

/// Runs the configured pipeline, writing reports to `cfg.output_dir` as
/// epochs land. On failure the partial reports stay and `error.txt` holds
/// the message.
RunReport run_experiment(const ExperimentConfig& cfg, std::size_t threads = 1);

/// epochs.csv, attack.csv, summary.csv, curves.svg, recon.pgm (when a
/// reconstruction exists) and, for multi-run modes, runs/<k>/.
void emit_report(const RunReport& report, const std::filesystem::path& dir);

std::string epochs_csv(const RunReport& report);
std::string attack_csv(const RunRecord& run);
std::string summary_csv(const RunReport& report);
std::string curves_svg(const RunReport& report);
/// Binary PGM: truth images on the top row, reconstructions below.
std::string recon_pgm(const Tensor& truth, const Tensor& reconstruction, std::size_t max_images = 8);

/// Thread count from RESSFL_THREADS, or `fallback` when unset.
std::size_t threads_from_env(std::size_t fallback = 1);

}  // namespace ressfl
