#include "ressfl/runner.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ressfl/error.hpp"

namespace ressfl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) { throw ConfigError(path + ": " + msg); }

// ---------------------------------------------------------------- JSON reading

class Fields {
 public:
  Fields(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) fail(path_, "expected an object");
    for (const auto& [key, _] : j.items()) {
      if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
        fail(path_ + "." + key, "unknown key");
      }
    }
  }
  const json* get(const char* key) const {
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string path(const char* key) const { return path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
};

void read_value(const json& v, const std::string& path, double& out) {
  if (!v.is_number()) fail(path, "expected a number");
  out = v.get<double>();
  if (!std::isfinite(out)) fail(path, "must be finite");
}

void read_value(const json& v, const std::string& path, bool& out) {
  if (!v.is_boolean()) fail(path, "expected true or false");
  out = v.get<bool>();
}

void read_value(const json& v, const std::string& path, std::string& out) {
  if (!v.is_string()) fail(path, "expected a string");
  out = v.get<std::string>();
}

template <std::unsigned_integral T>
void read_value(const json& v, const std::string& path, T& out) {
  if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
    fail(path, "expected a non-negative integer");
  }
  out = v.get<T>();
}

template <std::signed_integral T>
void read_value(const json& v, const std::string& path, T& out) {
  if (!v.is_number_integer()) fail(path, "expected an integer");
  out = v.get<T>();
}

template <typename T>
void field(const Fields& f, const char* key, T& out) {
  if (const json* v = f.get(key)) read_value(*v, f.path(key), out);
}

template <typename T, typename Parse>
void parsed_field(const Fields& f, const char* key, T& out, Parse parse) {
  const json* v = f.get(key);
  if (!v) return;
  std::string text;
  read_value(*v, f.path(key), text);
  try {
    out = parse(text);
  } catch (const ConfigError& e) {
    fail(f.path(key), e.what());
  }
}

void bottleneck_field(const Fields& f, const char* key, std::optional<BottleneckConfig>& out) {
  const json* v = f.get(key);
  if (!v) return;
  if (v->is_null() || (v->is_string() && v->get<std::string>() == "none")) {
    out.reset();
    return;
  }
  parsed_field(f, key, out, [](const std::string& s) { return std::optional(BottleneckConfig::parse(s)); });
}

template <typename T>
std::vector<T> read_list(const json& v, const std::string& path) {
  if (!v.is_array()) fail(path, "expected an array");
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) read_value(v[i], path + "[" + std::to_string(i) + "]", out[i]);
  return out;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

std::uint64_t sub_seed(std::uint64_t seed, std::string_view label) { return Rng::derive(seed, label).next_u64(); }

std::string bottleneck_str(const std::optional<BottleneckConfig>& b) { return b ? b->str() : "none"; }

const std::set<std::string>& defense_methods() {
  static const std::set<std::string> m = {"none", "laplacian", "dropout", "topk", "advnoise",
                                          "dcor", "bottleneck", "aware"};
  return m;
}

bool is_perturb(const std::string& method) {
  return method == "laplacian" || method == "dropout" || method == "topk" || method == "advnoise";
}

}  // namespace

// ---------------------------------------------------------------- modes

Mode parse_mode(std::string_view text) {
  if (text == "pretrain") return Mode::kPretrain;
  if (text == "transfer") return Mode::kTransfer;
  if (text == "attack") return Mode::kAttack;
  if (text == "compare-defenses") return Mode::kCompareDefenses;
  if (text == "end-to-end") return Mode::kEndToEnd;
  throw ConfigError("unknown mode '" + std::string(text) +
                    "' (expected pretrain, transfer, attack, compare-defenses or end-to-end)");
}

std::string to_string(Mode m) {
  switch (m) {
    case Mode::kPretrain: return "pretrain";
    case Mode::kTransfer: return "transfer";
    case Mode::kAttack: return "attack";
    case Mode::kCompareDefenses: return "compare-defenses";
    case Mode::kEndToEnd: return "end-to-end";
  }
  return "?";
}

// ---------------------------------------------------------------- config

int ExperimentConfig::attacked_run_epochs() const {
  return mode == Mode::kPretrain ? pretrain.epochs : sfl.total_epochs;
}

std::vector<int> ExperimentConfig::scheduled_attack_epochs() const {
  if (attack_epochs) return *attack_epochs;
  return {attacked_run_epochs()};
}

void ExperimentConfig::validate() const {
  const DatasetSpec& d = dataset;
  if (d.source == "synthetic") {
    if (d.samples < 4) fail("$.dataset.samples", "must be at least 4");
    if (d.num_classes < 2) fail("$.dataset.num_classes", "must be at least 2");
    if (d.image_shape.size() != 3 || d.image_shape[0] == 0 || d.image_shape[1] < 4 || d.image_shape[2] < 4) {
      fail("$.dataset.image_shape", "expected [C, H, W] with H, W >= 4");
    }
  } else if (d.source == "idx") {
    if (!fs::exists(d.images)) fail("$.dataset.images", "no such file '" + d.images + "'");
    if (!fs::exists(d.labels)) fail("$.dataset.labels", "no such file '" + d.labels + "'");
  } else {
    fail("$.dataset.source", "expected 'synthetic' or 'idx'");
  }
  if (!(d.validation_fraction > 0.0 && d.validation_fraction < 1.0)) {
    fail("$.dataset.validation_fraction", "must be in (0,1)");
  }
  if (!(d.expert_fraction > 0.0 && d.expert_fraction < 1.0)) fail("$.dataset.expert_fraction", "must be in (0,1)");

  try {
    parse_arch(model.arch);
  } catch (const std::exception& e) {
    fail("$.model.arch", e.what());
  }
  if (model.cut_layer < 1) fail("$.model.cut_layer", "must be at least 1");

  if (sfl.num_clients < 1) fail("$.sfl.num_clients", "must be at least 1");
  if (sfl.total_epochs < 1) fail("$.sfl.epochs", "must be at least 1");
  if (sfl.batch_size < 1) fail("$.sfl.batch_size", "must be at least 1");
  if (!(sfl.client_lr >= 0.0)) fail("$.sfl.client_lr", "must be >= 0");
  if (!(sfl.server_lr > 0.0)) fail("$.sfl.server_lr", "must be > 0");
  if (!(sfl.momentum >= 0.0 && sfl.momentum < 1.0)) fail("$.sfl.momentum", "must be in [0,1)");
  if (!(sfl.sampling_rate > 0.0 && sfl.sampling_rate <= 1.0)) fail("$.sfl.sampling_rate", "must be in (0,1]");

  if (pretrain.epochs < 1) fail("$.pretrain.epochs", "must be at least 1");
  try {
    pretrain.aware.validate();
  } catch (const ConfigError& e) {
    fail("$.pretrain", e.what());
  }
  if (!(transfer.lambda >= 0.0)) fail("$.transfer.lambda", "must be >= 0");
  if (mode == Mode::kTransfer) {
    if (transfer.checkpoint.empty()) fail("$.transfer.checkpoint", "required in transfer mode");
    if (!fs::exists(transfer.checkpoint)) fail("$.transfer.checkpoint", "no such file '" + transfer.checkpoint + "'");
  }
  if ((mode == Mode::kEndToEnd || mode == Mode::kCompareDefenses) &&
      transfer.strategy == TransferStrategy::kAwareFinetune && !(transfer.lambda > 0.0)) {
    fail("$.transfer.lambda", "aware-finetune needs lambda > 0");
  }

  if (!defense_methods().contains(defense.method)) {
    fail("$.defense.method", "unknown defense '" + defense.method +
                                 "' (expected none, laplacian, dropout, topk, advnoise, dcor, bottleneck or aware)");
  }
  if (is_perturb(defense.method)) {
    try {
      PerturbConfig{parse_perturb_method(defense.method), defense.value}.validate();
    } catch (const ConfigError& e) {
      fail("$.defense.value", e.what());
    }
  } else if ((defense.method == "dcor" || defense.method == "aware") && !(defense.value >= 0.0)) {
    fail("$.defense.value", "must be >= 0");
  }
  if (defense.method == "bottleneck" && !pretrain.bottleneck && !model.bottleneck) {
    fail("$.defense.method", "bottleneck defense needs $.pretrain.bottleneck or $.model.bottleneck");
  }

  try {
    attack.validate();
  } catch (const ConfigError& e) {
    fail("$.attack", e.what());
  }
  const int t = attacked_run_epochs();
  for (std::size_t i = 0; i < scheduled_attack_epochs().size(); ++i) {
    const int e = scheduled_attack_epochs()[i];
    if (e < 1 || e > t) {
      fail("$.attack.epochs[" + std::to_string(i) + "]", "epoch " + std::to_string(e) + " outside [1," +
                                                             std::to_string(t) + "]");
    }
  }
}

ExperimentConfig parse_config(std::string_view json_text, std::optional<std::uint64_t> seed_override) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("$: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  const Fields top(root, "$",
                   {"mode", "seed", "output_dir", "dataset", "model", "sfl", "pretrain", "transfer", "defense",
                    "attack", "compare"});
  parsed_field(top, "mode", cfg.mode, [](const std::string& s) { return parse_mode(s); });
  if (seed_override) {
    cfg.seed = *seed_override;
  } else if (top.get("seed")) {
    field(top, "seed", cfg.seed);
  } else {
    fail("$.seed", "required (or pass --seed)");
  }
  field(top, "output_dir", cfg.output_dir);

  if (const json* v = top.get("dataset")) {
    const Fields f(*v, "$.dataset",
                   {"source", "images", "labels", "samples", "num_classes", "image_shape", "validation_fraction",
                    "expert_fraction"});
    DatasetSpec& d = cfg.dataset;
    field(f, "source", d.source);
    field(f, "images", d.images);
    field(f, "labels", d.labels);
    field(f, "samples", d.samples);
    field(f, "num_classes", d.num_classes);
    if (const json* s = f.get("image_shape")) d.image_shape = read_list<std::size_t>(*s, f.path("image_shape"));
    field(f, "validation_fraction", d.validation_fraction);
    field(f, "expert_fraction", d.expert_fraction);
  }
  if (const json* v = top.get("model")) {
    const Fields f(*v, "$.model", {"arch", "cut_layer", "bottleneck"});
    field(f, "arch", cfg.model.arch);
    field(f, "cut_layer", cfg.model.cut_layer);
    bottleneck_field(f, "bottleneck", cfg.model.bottleneck);
  }
  if (const json* v = top.get("sfl")) {
    const Fields f(*v, "$.sfl",
                   {"num_clients", "epochs", "batch_size", "client_lr", "server_lr", "momentum", "sampling_rate",
                    "lr_decay"});
    SflConfig& s = cfg.sfl;
    field(f, "num_clients", s.num_clients);
    field(f, "epochs", s.total_epochs);
    field(f, "batch_size", s.batch_size);
    field(f, "client_lr", s.client_lr);
    field(f, "server_lr", s.server_lr);
    field(f, "momentum", s.momentum);
    field(f, "sampling_rate", s.sampling_rate);
    field(f, "lr_decay", s.lr_decay);
  }
  if (const json* v = top.get("pretrain")) {
    const Fields f(*v, "$.pretrain",
                   {"epochs", "lambda", "sim_tier", "inversion_update_freq", "client_lr", "server_lr",
                    "inversion_lr", "sim_base_width", "sync_inversion_decay", "bottleneck"});
    AwareTrainConfig& a = cfg.pretrain.aware;
    field(f, "epochs", cfg.pretrain.epochs);
    field(f, "lambda", a.lambda);
    parsed_field(f, "sim_tier", a.sim_tier, [](const std::string& s) { return parse_tier(s); });
    field(f, "inversion_update_freq", a.inversion_update_freq);
    field(f, "client_lr", a.client_lr);
    field(f, "server_lr", a.other_lr);
    field(f, "inversion_lr", a.inversion_lr);
    field(f, "sim_base_width", a.sim_base_width);
    field(f, "sync_inversion_decay", a.sync_inversion_decay);
    bottleneck_field(f, "bottleneck", cfg.pretrain.bottleneck);
  }
  if (const json* v = top.get("transfer")) {
    const Fields f(*v, "$.transfer", {"strategy", "lambda", "checkpoint"});
    parsed_field(f, "strategy", cfg.transfer.strategy, [](const std::string& s) { return parse_strategy(s); });
    field(f, "lambda", cfg.transfer.lambda);
    field(f, "checkpoint", cfg.transfer.checkpoint);
  }
  if (const json* v = top.get("defense")) {
    const Fields f(*v, "$.defense", {"method", "value"});
    field(f, "method", cfg.defense.method);
    field(f, "value", cfg.defense.value);
  }
  if (const json* v = top.get("attack")) {
    const Fields f(*v, "$.attack",
                   {"tiers", "epochs", "inversion_epochs", "batch_size", "learning_rate", "base_width",
                    "eval_samples", "plateau_tolerance", "plateau_patience"});
    AttackConfig& a = cfg.attack;
    if (const json* t = f.get("tiers")) {
      const auto names = read_list<std::string>(*t, f.path("tiers"));
      a.tiers.clear();
      for (std::size_t i = 0; i < names.size(); ++i) {
        try {
          a.tiers.push_back(parse_tier(names[i]));
        } catch (const ConfigError& e) {
          fail(f.path("tiers") + "[" + std::to_string(i) + "]", e.what());
        }
      }
    }
    if (const json* e = f.get("epochs")) cfg.attack_epochs = read_list<int>(*e, f.path("epochs"));
    field(f, "inversion_epochs", a.inversion_train_epochs);
    field(f, "batch_size", a.batch_size);
    field(f, "learning_rate", a.learning_rate);
    field(f, "base_width", a.base_width);
    field(f, "eval_samples", a.eval_samples);
    field(f, "plateau_tolerance", a.plateau_tolerance);
    field(f, "plateau_patience", a.plateau_patience);
  }
  if (const json* v = top.get("compare")) {
    const Fields f(*v, "$.compare", {"bottleneck_only"});
    field(f, "bottleneck_only", cfg.compare_bottleneck_only);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_config(text, seed_override);
}

std::string resolved_config_json(const ExperimentConfig& cfg) {
  json j;
  j["mode"] = to_string(cfg.mode);
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["dataset"] = {{"source", cfg.dataset.source},
                  {"images", cfg.dataset.images},
                  {"labels", cfg.dataset.labels},
                  {"samples", cfg.dataset.samples},
                  {"num_classes", cfg.dataset.num_classes},
                  {"image_shape", cfg.dataset.image_shape},
                  {"validation_fraction", cfg.dataset.validation_fraction},
                  {"expert_fraction", cfg.dataset.expert_fraction}};
  j["model"] = {{"arch", cfg.model.arch},
                {"cut_layer", cfg.model.cut_layer},
                {"bottleneck", bottleneck_str(cfg.model.bottleneck)}};
  j["sfl"] = {{"num_clients", cfg.sfl.num_clients}, {"epochs", cfg.sfl.total_epochs},
              {"batch_size", cfg.sfl.batch_size},   {"client_lr", cfg.sfl.client_lr},
              {"server_lr", cfg.sfl.server_lr},     {"momentum", cfg.sfl.momentum},
              {"sampling_rate", cfg.sfl.sampling_rate}, {"lr_decay", cfg.sfl.lr_decay}};
  const AwareTrainConfig& a = cfg.pretrain.aware;
  j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                   {"lambda", a.lambda},
                   {"sim_tier", to_string(a.sim_tier)},
                   {"inversion_update_freq", a.inversion_update_freq},
                   {"client_lr", a.client_lr},
                   {"server_lr", a.other_lr},
                   {"inversion_lr", a.inversion_lr},
                   {"sim_base_width", a.sim_base_width},
                   {"sync_inversion_decay", a.sync_inversion_decay},
                   {"bottleneck", bottleneck_str(cfg.pretrain.bottleneck)}};
  j["transfer"] = {{"strategy", to_string(cfg.transfer.strategy)},
                   {"lambda", cfg.transfer.lambda},
                   {"checkpoint", cfg.transfer.checkpoint}};
  j["defense"] = {{"method", cfg.defense.method}, {"value", cfg.defense.value}};
  std::vector<std::string> tiers;
  for (InversionTier t : cfg.attack.tiers) tiers.push_back(to_string(t));
  j["attack"] = {{"tiers", tiers},
                 {"epochs", cfg.scheduled_attack_epochs()},
                 {"inversion_epochs", cfg.attack.inversion_train_epochs},
                 {"batch_size", cfg.attack.batch_size},
                 {"learning_rate", cfg.attack.learning_rate},
                 {"base_width", cfg.attack.base_width},
                 {"eval_samples", cfg.attack.eval_samples},
                 {"plateau_tolerance", cfg.attack.plateau_tolerance},
                 {"plateau_patience", cfg.attack.plateau_patience}};
  j["compare"] = {{"bottleneck_only", cfg.compare_bottleneck_only}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------- data

SummaryRow summarize(const RunRecord& run) {
  SummaryRow s;
  s.run = run.label;
  if (!run.epochs.empty()) s.accuracy = run.epochs.back().val_accuracy;
  if (!run.attack.empty()) {
    const ResistanceRow& r = run.attack.back();
    s.mse_l0 = r.mse_l0;
    s.mse_best = r.mse_best;
    s.resistant = r.resistant;
    s.attacked = true;
  }
  return s;
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  const DatasetSpec& d = cfg.dataset;
  Dataset all;
  if (d.source == "idx") {
    all = load_idx_dataset(d.images, d.labels);
    if (d.samples > 0 && d.samples < all.size()) {
      std::vector<std::size_t> first(d.samples);
      for (std::size_t i = 0; i < first.size(); ++i) first[i] = i;
      all = all.subset(first);
    }
  } else {
    all = synth_dataset(d.samples, d.num_classes, d.image_shape, sub_seed(cfg.seed, "data"));
  }
  TrainValSplit split = split_train_validation(all, d.validation_fraction, sub_seed(cfg.seed, "split"));
  // Expert share is the "train" side of a second split.
  TrainValSplit shares = split_train_validation(split.train, 1.0 - d.expert_fraction, sub_seed(cfg.seed, "expert"));
  return {std::move(split.train), std::move(shares.train), std::move(shares.validation), std::move(split.validation)};
}

// ---------------------------------------------------------------- pipeline

namespace {

SplitModel base_model(const ExperimentConfig& cfg, const PreparedData& data,
                      const std::optional<BottleneckConfig>& bottleneck) {
  return experiment_model(cfg, data.train, bottleneck);
}

SflConfig sfl_config(const ExperimentConfig& cfg, std::size_t threads, std::string_view stream) {
  SflConfig s = cfg.sfl;
  s.threads = threads;
  s.seed = sub_seed(cfg.seed, stream);
  const auto sched = cfg.scheduled_attack_epochs();
  s.log_epochs = sched.empty() ? std::set<int>{0} : std::set<int>(sched.begin(), sched.end());
  return s;
}

AttackConfig attack_config(const ExperimentConfig& cfg, std::size_t threads) {
  AttackConfig a = cfg.attack;
  a.attack_epochs = cfg.scheduled_attack_epochs();
  a.seed = sub_seed(cfg.seed, "attack");
  a.threads = threads;
  return a;
}

std::vector<ResistanceRow> attack_run(const SflRun& run, const PrivateData& data, const Dataset& validation,
                                      const ExperimentConfig& cfg, std::size_t threads, const DefenseHooks* view) {
  const AttackConfig a = attack_config(cfg, threads);
  if (a.attack_epochs.empty()) return {};
  return attack_schedule(run.server, data, validation.images, a, view).rows;
}

void save_epoch_checkpoints(const SflRun& run, const SplitModel& model, const std::vector<int>& epochs,
                            const fs::path& dir) {
  if (!epochs.empty()) fs::create_directories(dir / "checkpoints");
  for (int e : epochs) {
    const auto it = run.server.central_history.find(e);
    if (it == run.server.central_history.end()) continue;
    Checkpoint ck;
    ck.tensors = it->second.named_parameters("client.");
    ck.metadata["arch"] = model.arch;
    ck.metadata["cut_layer"] = std::to_string(model.cut_layer);
    ck.metadata["bottleneck"] = bottleneck_str(model.bottleneck);
    ck.metadata["epoch"] = std::to_string(e);
    save_checkpoint(dir / "checkpoints" / ("epoch_" + std::to_string(e) + ".rsfl"), ck);
  }
}

struct Pipeline {
  const ExperimentConfig& cfg;
  std::size_t threads;
  RunReport& report;
  fs::path dir;

  void flush() const { emit_report(report, dir); }

  RunRecord& open_run(std::string label, bool in_summary = true) {
    RunRecord r;
    r.label = std::move(label);
    r.in_summary = in_summary;
    report.runs.push_back(std::move(r));
    flush();
    return report.runs.back();
  }

  std::function<void(const EpochResult&)> recorder() {
    const std::size_t k = report.runs.size() - 1;
    return [this, k](const EpochResult& e) {
      report.runs[k].epochs.push_back(e);
      flush();
    };
  }

  // Plain SFL plus `hooks` on `train`; returns the run for checkpointing.
  SflRun train_attack(const std::string& label, const SplitModel& model, const Dataset& train,
                      DefenseHooks* hooks, const Dataset& validation) {
    open_run(label);
    const std::size_t k = report.runs.size() - 1;
    PrivateData data(train);
    SflRun run = start_sfl(model, data, sfl_config(cfg, threads, "sfl"));
    if (hooks) hooks->attach(run.clients, train.image_shape());
    run_sfl(run, data, validation, hooks, recorder());
    report.runs[k].attack = attack_run(run, data, validation, cfg, threads, hooks);
    flush();
    return run;
  }

  PretrainResult pretrain(const Dataset& expert, const Dataset& validation, bool attacked) {
    open_run(attacked ? "ResSFL-expert(lambda=" + fmt(cfg.pretrain.aware.lambda) + ",bottleneck=" +
                            bottleneck_str(cfg.pretrain.bottleneck) + ")"
                      : "expert-pretrain",
             attacked);
    const std::size_t k = report.runs.size() - 1;
    const SplitModel model = base_model(cfg, PreparedData{expert, {}, {}, validation}, cfg.pretrain.bottleneck);
    PrivateData data(expert);
    SflConfig base = sfl_config(cfg, threads, "pretrain");
    if (!attacked) base.log_epochs = {0};
    PretrainResult pr =
        attacker_aware_pretrain(model, data, validation, cfg.pretrain.aware, cfg.pretrain.epochs, base, recorder());
    for (const auto& w : pr.warnings) report.warnings.push_back(w);
    save_checkpoint(dir / "pretrained.rsfl", pr.checkpoint);
    if (attacked) {
      report.runs[k].attack = attack_run(pr.run, data, validation, cfg, threads, nullptr);
      save_epoch_checkpoints(pr.run, model, cfg.scheduled_attack_epochs(), dir);
    }
    flush();
    return pr;
  }

  std::string ressfl_label(const std::optional<BottleneckConfig>& bottleneck) const {
    return "ResSFL(lambda=" + fmt(cfg.pretrain.aware.lambda) + ",bottleneck=" + bottleneck_str(bottleneck) + ")";
  }

  SflRun transfer(const Checkpoint& ckpt, const std::string& label, const Dataset& target,
                  const Dataset& validation, SplitModel* model_out = nullptr) {
    open_run(label);
    const std::size_t k = report.runs.size() - 1;
    // The checkpoint's bottleneck wins: its client part only loads into that shape.
    std::optional<BottleneckConfig> bn = cfg.model.bottleneck;
    if (const auto it = ckpt.metadata.find("bottleneck"); it != ckpt.metadata.end()) {
      bn = it->second == "none" ? std::nullopt : std::optional(BottleneckConfig::parse(it->second));
    }
    if (const auto it = ckpt.metadata.find("arch"); it != ckpt.metadata.end() && it->second != cfg.model.arch) {
      throw ConfigError("$.model.arch: checkpoint was trained with arch '" + it->second + "'");
    }
    SplitModel model = base_model(cfg, PreparedData{target, {}, {}, validation}, bn);
    PrivateData data(target);
    TransferResult tr = resistance_transfer(ckpt, model, data, validation, cfg.transfer.strategy, cfg.transfer.lambda,
                                            sfl_config(cfg, threads, "sfl"), cfg.pretrain.aware.sim_base_width,
                                            recorder());
    report.runs[k].attack = attack_run(tr.run, data, validation, cfg, threads, nullptr);
    flush();
    if (model_out) *model_out = std::move(model);
    return std::move(tr.run);
  }
};

std::string defense_label(const std::string& method, double value, const std::optional<BottleneckConfig>& bn) {
  if (is_perturb(method)) return PerturbConfig{parse_perturb_method(method), value}.label();
  if (method == "dcor") return "DistCorr(alpha=" + fmt(value) + ")";
  if (method == "aware") return "AttackerAware(lambda=" + fmt(value) + ")";
  if (method == "bottleneck") return "Bottleneck(" + bottleneck_str(bn) + ")";
  return "None";
}

void run_mode(Pipeline& p, const PreparedData& data) {
  const ExperimentConfig& cfg = p.cfg;
  switch (cfg.mode) {
    case Mode::kPretrain:
      p.pretrain(data.train, data.validation, true);
      break;
    case Mode::kTransfer: {
      const Checkpoint ckpt = load_checkpoint(cfg.transfer.checkpoint);
      SplitModel model;
      const SflRun run = p.transfer(ckpt, "Transfer(" + to_string(cfg.transfer.strategy) + ")", data.train,
                                    data.validation, &model);
      save_epoch_checkpoints(run, model, cfg.scheduled_attack_epochs(), p.dir);
      break;
    }
    case Mode::kAttack: {
      const std::string& m = cfg.defense.method;
      const auto bn = m == "bottleneck" ? (cfg.pretrain.bottleneck ? cfg.pretrain.bottleneck : cfg.model.bottleneck)
                                        : cfg.model.bottleneck;
      const SplitModel model = base_model(cfg, data, bn);
      auto hooks = make_defense_hooks(cfg, m, cfg.defense.value);
      const SflRun run = p.train_attack(defense_label(m, cfg.defense.value, bn), model, data.train, hooks.get(),
                                        data.validation);
      save_epoch_checkpoints(run, model, cfg.scheduled_attack_epochs(), p.dir);
      break;
    }
    case Mode::kCompareDefenses: {
      const SplitModel model = base_model(cfg, data, cfg.model.bottleneck);
      const std::pair<const char*, std::vector<double>> grid[] = {
          {"laplacian", {0.05, 0.08, 0.10}}, {"dropout", {0.15, 0.20, 0.25}}, {"topk", {50, 60, 70}},
          {"advnoise", {0.05, 0.08, 0.10}},  {"dcor", {1.0, 1.5, 2.0}}};
      for (const auto& [method, values] : grid) {
        for (double v : values) {
          auto hooks = make_defense_hooks(cfg, method, v);
          p.train_attack(defense_label(method, v, std::nullopt), model, data.target, hooks.get(), data.validation);
        }
      }
      if (cfg.compare_bottleneck_only && cfg.pretrain.bottleneck) {
        const SplitModel bn_model = base_model(cfg, data, cfg.pretrain.bottleneck);
        p.train_attack(defense_label("bottleneck", 0.0, cfg.pretrain.bottleneck), bn_model, data.target, nullptr,
                       data.validation);
      }
      const PretrainResult pr = p.pretrain(data.expert, data.validation, false);
      p.transfer(pr.checkpoint, p.ressfl_label(cfg.pretrain.bottleneck), data.target, data.validation);
      break;
    }
    case Mode::kEndToEnd: {
      const PretrainResult pr = p.pretrain(data.expert, data.validation, false);
      SplitModel model;
      const SflRun run =
          p.transfer(pr.checkpoint, p.ressfl_label(cfg.pretrain.bottleneck), data.target, data.validation, &model);
      save_epoch_checkpoints(run, model, cfg.scheduled_attack_epochs(), p.dir);
      break;
    }
  }
  p.report.primary = p.report.runs.empty() ? 0 : p.report.runs.size() - 1;
}

}  // namespace

SplitModel experiment_model(const ExperimentConfig& cfg, const Dataset& like,
                            const std::optional<BottleneckConfig>& bottleneck) {
  SplitModel m = build_split_classifier(cfg.model.arch, cfg.model.cut_layer, like.image_shape(),
                                        static_cast<std::size_t>(like.num_classes), sub_seed(cfg.seed, "model"));
  if (bottleneck) m = insert_bottleneck(std::move(m), *bottleneck);
  return m;
}

std::unique_ptr<DefenseHooks> make_defense_hooks(const ExperimentConfig& cfg, const std::string& method, double value) {
  if (is_perturb(method)) {
    return std::make_unique<PerturbHooks>(PerturbConfig{parse_perturb_method(method), value},
                                          sub_seed(cfg.seed, "defense"), cfg.pretrain.aware.sim_base_width);
  }
  if (method == "dcor") return std::make_unique<DistCorrHooks>(value);
  if (method == "aware") {
    AwareTrainConfig a = cfg.pretrain.aware;
    a.lambda = value;
    a.client_lr = cfg.sfl.client_lr;
    a.other_lr = cfg.sfl.server_lr;
    return std::make_unique<AttackerAwareHooks>(a, sub_seed(cfg.seed, "defense"));
  }
  return nullptr;
}

RunRecord train_and_attack(const std::string& label, const SplitModel& model, const Dataset& train,
                           const Dataset& validation, const ExperimentConfig& cfg, DefenseHooks* hooks,
                           std::size_t threads) {
  RunRecord rec;
  rec.label = label;
  PrivateData data(train);
  SflRun run = start_sfl(model, data, sfl_config(cfg, threads, "sfl"));
  if (hooks) hooks->attach(run.clients, train.image_shape());
  run_sfl(run, data, validation, hooks, [&](const EpochResult& e) { rec.epochs.push_back(e); });
  rec.attack = attack_run(run, data, validation, cfg, threads, hooks);
  return rec;
}

RunReport run_experiment(const ExperimentConfig& cfg, std::size_t threads) {
  cfg.validate();
  if (threads < 1) throw ConfigError("threads must be at least 1");
  const fs::path dir = cfg.output_dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(IoError::Kind::kWrite, "cannot create output directory '" + dir.string() + "': " + ec.message());
  fs::remove(dir / "error.txt", ec);
  write_text_atomic(dir / "resolved_config.json", resolved_config_json(cfg));

  RunReport report;
  report.mode = cfg.mode;
  Pipeline p{cfg, threads, report, dir};
  try {
    const PreparedData data = prepare_data(cfg);
    run_mode(p, data);
  } catch (const std::exception& e) {
    try {
      emit_report(report, dir);
    } catch (...) {
    }
    write_text_atomic(dir / "error.txt", std::string(e.what()) + "\n");
    throw;
  }
  for (const RunRecord& r : report.runs) {
    if (r.in_summary) report.summary.push_back(summarize(r));
  }
  emit_report(report, dir);
  return report;
}

// ---------------------------------------------------------------- reports

namespace {

std::string num(double v, int precision) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string slug(const std::string& label) {
  std::string s;
  for (char c : label) {
    const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-';
    s += keep ? c : '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

std::string epochs_csv_of(const std::vector<const RunRecord*>& runs) {
  std::string out = "run,epoch,train_loss,val_accuracy,wall_steps,participants\n";
  for (const RunRecord* r : runs) {
    for (const EpochResult& e : r->epochs) {
      out += csv_field(r->label) + "," + std::to_string(e.epoch) + "," + num(e.train_loss, 6) + "," +
             num(e.val_accuracy, 2) + "," + std::to_string(e.wall_steps) + "," + std::to_string(e.participants) +
             "\n";
    }
  }
  return out;
}

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                          "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

}  // namespace

std::string epochs_csv(const RunReport& report) {
  std::vector<const RunRecord*> runs;
  for (const RunRecord& r : report.runs) runs.push_back(&r);
  return epochs_csv_of(runs);
}

std::string attack_csv(const RunRecord& run) {
  std::string out = "epoch,tier,mse,ssim,psnr,mse_best,verdict\n";
  for (const ResistanceRow& row : run.attack) {
    for (const TierResult& t : row.tiers) {
      out += std::to_string(row.epoch) + "," + to_string(t.tier) + "," + num(t.metrics.mse, 6) + "," +
             num(t.metrics.ssim, 6) + "," + num(t.metrics.psnr, 4) + "," + num(row.mse_best, 6) + "," +
             (row.resistant ? "resistant" : "vulnerable") + "\n";
    }
  }
  return out;
}

std::string summary_csv(const RunReport& report) {
  std::string out = "run,accuracy,mse_l0,mse_best,verdict\n";
  for (const RunRecord& r : report.runs) {
    if (!r.in_summary) continue;
    const SummaryRow s = summarize(r);
    out += csv_field(s.run) + "," + num(s.accuracy, 2) + ",";
    if (s.attacked) {
      out += num(s.mse_l0, 6) + "," + num(s.mse_best, 6) + "," + (s.resistant ? "resistant" : "vulnerable");
    } else {
      out += ",,not attacked";
    }
    out += "\n";
  }
  return out;
}

std::string curves_svg(const RunReport& report) {
  std::vector<const RunRecord*> runs;
  for (const RunRecord& r : report.runs) {
    if (r.in_summary) runs.push_back(&r);
  }
  int max_epoch = 1;
  double ymax = 0.03;
  for (const RunRecord* r : runs) {
    for (const ResistanceRow& row : r->attack) {
      max_epoch = std::max(max_epoch, row.epoch);
      if (std::isfinite(row.mse_best)) ymax = std::max(ymax, 1.1 * row.mse_best);
    }
  }
  // Left panel: MSE vs epoch. Right panel: accuracy vs final MSE.
  const double lx0 = 60, lx1 = 420, y0 = 30, y1 = 300, rx0 = 500, rx1 = 860;
  const double legend_y = 330;
  const auto ly = [&](double mse) { return y1 - (y1 - y0) * std::clamp(mse / ymax, 0.0, 1.0); };
  const auto lx = [&](int epoch) {
    return max_epoch == 1 ? (lx0 + lx1) / 2 : lx0 + (lx1 - lx0) * (epoch - 1) / (max_epoch - 1);
  };
  const auto rx = [&](double acc) { return rx0 + (rx1 - rx0) * std::clamp(acc / 100.0, 0.0, 1.0); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"900\" height=\"" << legend_y + 18 * runs.size() + 10
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (double x0 : {lx0, rx0}) {
    const double x1 = x0 == lx0 ? lx1 : rx1;
    s << "<path d=\"M" << x0 << " " << y0 << " V" << y1 << " H" << x1 << "\" fill=\"none\" stroke=\"black\"/>\n";
    s << "<text x=\"" << x0 - 8 << "\" y=\"" << y0 + 4 << "\" text-anchor=\"end\">" << num(ymax, 3) << "</text>\n";
    s << "<text x=\"" << x0 - 8 << "\" y=\"" << y1 + 4 << "\" text-anchor=\"end\">0</text>\n";
  }
  s << "<text x=\"" << (lx0 + lx1) / 2 << "\" y=\"" << y1 + 28 << "\" text-anchor=\"middle\">epoch (1.."
    << max_epoch << ")</text>\n";
  s << "<text x=\"" << (rx0 + rx1) / 2 << "\" y=\"" << y1 + 28
    << "\" text-anchor=\"middle\">validation accuracy % (0..100)</text>\n";
  s << "<text x=\"" << lx0 << "\" y=\"18\">best-tier reconstruction MSE</text>\n";
  s << "<line class=\"target\" x1=\"" << lx0 << "\" x2=\"" << lx1 << "\" y1=\"" << ly(kResistanceTarget)
    << "\" y2=\"" << ly(kResistanceTarget) << "\" stroke=\"red\" stroke-dasharray=\"6,4\"/>\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const char* color = kPalette[i % std::size(kPalette)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < runs[i]->attack.size(); ++k) {
      const ResistanceRow& row = runs[i]->attack[k];
      s << (k ? " " : "") << num(lx(row.epoch), 2) << "," << num(ly(row.mse_best), 2);
    }
    s << "\"/>\n";
    const SummaryRow sum = summarize(*runs[i]);
    if (sum.attacked) {
      s << "<circle cx=\"" << num(rx(sum.accuracy), 2) << "\" cy=\"" << num(ly(sum.mse_best), 2)
        << "\" r=\"4\" fill=\"" << color << "\"/>\n";
    }
    s << "<text x=\"" << lx0 << "\" y=\"" << legend_y + 18 * i << "\" fill=\"" << color << "\">"
      << xml_escape(runs[i]->label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string recon_pgm(const Tensor& truth, const Tensor& reconstruction, std::size_t max_images) {
  if (truth.rank() != 4 || !(truth.shape() == reconstruction.shape())) {
    throw ShapeError("recon_pgm needs two [N,C,H,W] tensors of the same shape");
  }
  const std::size_t n = std::min(max_images, truth.shape()[0]);
  const std::size_t c = truth.shape()[1], h = truth.shape()[2], w = truth.shape()[3];
  const std::size_t width = n * w + n + 1, height = 2 * h + 3;
  std::vector<unsigned char> px(width * height, 128);
  const auto blit = [&](const Tensor& t, std::size_t i, std::size_t top) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double v = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) v += t[((i * c + ch) * h + y) * w + x];
        v = std::clamp(v / static_cast<double>(c), 0.0, 1.0);
        px[(top + y) * width + 1 + i * (w + 1) + x] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    blit(truth, i, 1);
    blit(reconstruction, i, h + 2);
  }
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(px.begin(), px.end());
  return out;
}

void emit_report(const RunReport& report, const fs::path& dir) {
  write_text_atomic(dir / "epochs.csv", epochs_csv(report));
  write_text_atomic(dir / "summary.csv", summary_csv(report));
  write_text_atomic(dir / "curves.svg", curves_svg(report));
  if (!report.runs.empty()) {
    const RunRecord& primary = report.runs[std::min(report.primary, report.runs.size() - 1)];
    write_text_atomic(dir / "attack.csv", attack_csv(primary));
    if (!primary.attack.empty() && !primary.attack.back().truth.empty()) {
      const ResistanceRow& last = primary.attack.back();
      write_text_atomic(dir / "recon.pgm", recon_pgm(last.truth, last.best_reconstruction));
    }
  } else {
    write_text_atomic(dir / "attack.csv", attack_csv(RunRecord{}));
  }
  if (!report.warnings.empty()) {
    std::string w;
    for (const auto& line : report.warnings) w += line + "\n";
    write_text_atomic(dir / "warnings.txt", w);
  }
  std::size_t summarized = 0;
  for (const RunRecord& r : report.runs) summarized += r.in_summary ? 1 : 0;
  if (summarized > 1) {
    std::size_t k = 0;
    for (const RunRecord& r : report.runs) {
      char prefix[16];
      std::snprintf(prefix, sizeof prefix, "%02zu-", ++k);
      const fs::path sub = dir / "runs" / (prefix + slug(r.label));
      fs::create_directories(sub);
      write_text_atomic(sub / "epochs.csv", epochs_csv_of({&r}));
      write_text_atomic(sub / "attack.csv", attack_csv(r));
    }
  }
}

std::size_t threads_from_env(std::size_t fallback) {
  const char* v = std::getenv("RESSFL_THREADS");
  if (!v || !*v) return fallback;
  std::size_t n = 0;
  const char* end = v + std::char_traits<char>::length(v);
  const auto [ptr, err] = std::from_chars(v, end, n);
  if (err != std::errc{} || ptr != end || n < 1) {
    throw ConfigError("RESSFL_THREADS must be a positive integer, got '" + std::string(v) + "'");
  }
  return n;
}

}  // namespace ressfl
