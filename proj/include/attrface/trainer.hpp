#pragma once

// Joint training under a group-mode assignment, and the suite runner that
// trains and evaluates one model per assignment.

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "attrface/eval.hpp"
#include "attrface/losses.hpp"
#include "attrface/model.hpp"
#include "attrface/pairs.hpp"
#include "attrface/synth.hpp"

namespace attrface {

enum class Precision { float32, float64 };

inline std::string_view precision_name(Precision p) { return p == Precision::float32 ? "float" : "double"; }

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 512;
  double lr = 0.01;
  std::vector<std::size_t> lr_drop_epochs{20, 35};
  double lr_drop_factor = 0.1;
  std::size_t early_stop_patience = 20;
  LossWeights weights;
  GroupModeAssignment modes;
  std::uint64_t seed = 0;
  Precision precision = Precision::float64;
  std::vector<std::size_t> hidden_dims{256, 128};
  std::size_t embedding_dim = 64;
  // Share of train-split identities held out for early stopping.
  double validation_fraction = 0.2;
  std::size_t validation_pairs = 1000;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs", "must be positive");
    if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
    if (!(lr >= 0 && std::isfinite(lr))) throw ConfigError("lr", "must be a finite nonnegative number");
    if (!(lr_drop_factor > 0 && lr_drop_factor < 1)) throw ConfigError("lr_drop_factor", "must lie in (0, 1)");
    if (early_stop_patience == 0) throw ConfigError("early_stop_patience", "must be positive");
    weights.validate();
    if (hidden_dims.empty()) throw ConfigError("hidden_dims", "must be non-empty");
    if (embedding_dim < 8) throw ConfigError("embedding_dim", "must be at least 8");
    if (!(validation_fraction > 0 && validation_fraction < 1)) {
      throw ConfigError("validation_fraction", "must lie in (0, 1)");
    }
    if (validation_pairs == 0 || validation_pairs % 2 != 0) throw ConfigError("validation_pairs", "must be even and positive");
  }
};

/// lr * factor^(number of drop epochs <= epoch).
inline double lr_at(std::size_t epoch, const TrainConfig& config) {
  double lr = config.lr;
  for (auto d : config.lr_drop_epochs) {
    if (d <= epoch) lr *= config.lr_drop_factor;
  }
  return lr;
}

// ---------------------------------------------------------------------------
// JSON

inline GroupModeAssignment modes_from_json(const nlohmann::json& j) {
  if (j.is_string()) return GroupModeAssignment::parse(j.get<std::string>());
  if (!j.is_object()) throw ConfigError("modes", "must be a mode string or an object of group -> mode");
  GroupModeAssignment out;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_string()) throw ConfigError("modes." + key, "must be \"predict\", \"suppress\" or \"off\"");
    const auto g = group_from_name(key);
    if (!g) throw ConfigError("modes." + key, "unknown attribute group");
    const auto m = mode_from_name(value.get<std::string>());
    if (!m) throw ConfigError("modes." + key, "unknown mode '" + value.get<std::string>() + "'");
    out.set(*g, *m);
  }
  return out;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"lr_drop_epochs", c.lr_drop_epochs},
          {"lr_drop_factor", c.lr_drop_factor},
          {"early_stop_patience", c.early_stop_patience},
          {"weights",
           {{"lambda_pred", c.weights.lambda_pred},
            {"lambda_adv", c.weights.lambda_adv},
            {"margin_m", c.weights.margin_m},
            {"scale_r", c.weights.scale_r}}},
          {"modes", c.modes.label()},
          {"seed", c.seed},
          {"precision", precision_name(c.precision)},
          {"hidden_dims", c.hidden_dims},
          {"embedding_dim", c.embedding_dim},
          {"validation_fraction", c.validation_fraction},
          {"validation_pairs", c.validation_pairs}};
}

/// Fields absent from `j` keep the values in `base`. Unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  using detail::json_count;
  using detail::json_field;
  if (!j.is_object()) throw ConfigError("<root>", "train config must be a JSON object");
  TrainConfig c = std::move(base);
  auto number = [](const nlohmann::json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path, "must be a number");
    return v.get<double>();
  };
  auto counts = [&](const nlohmann::json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path, "must be an array of integers");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(json_count(v[i], path + "[" + std::to_string(i) + "]"));
    return out;
  };
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs") c.epochs = json_count(value, key);
    else if (key == "batch_size") c.batch_size = json_count(value, key);
    else if (key == "lr") c.lr = number(value, key);
    else if (key == "lr_drop_epochs") c.lr_drop_epochs = counts(value, key);
    else if (key == "lr_drop_factor") c.lr_drop_factor = number(value, key);
    else if (key == "early_stop_patience") c.early_stop_patience = json_count(value, key);
    else if (key == "weights") {
      if (!value.is_object()) throw ConfigError("weights", "must be an object");
      for (const auto& [wk, wv] : value.items()) {
        const std::string path = "weights." + wk;
        if (wk == "lambda_pred") c.weights.lambda_pred = number(wv, path);
        else if (wk == "lambda_adv") c.weights.lambda_adv = number(wv, path);
        else if (wk == "margin_m") c.weights.margin_m = number(wv, path);
        else if (wk == "scale_r") c.weights.scale_r = number(wv, path);
        else throw ConfigError(path, "unknown field");
      }
    } else if (key == "modes") c.modes = modes_from_json(value);
    else if (key == "seed") c.seed = detail::json_seed(value, key);
    else if (key == "precision") {
      const auto p = json_field<std::string>(value, key);
      if (p == "float") c.precision = Precision::float32;
      else if (p == "double") c.precision = Precision::float64;
      else throw ConfigError(key, "must be \"float\" or \"double\"");
    } else if (key == "hidden_dims") c.hidden_dims = counts(value, key);
    else if (key == "embedding_dim") c.embedding_dim = json_count(value, key);
    else if (key == "validation_fraction") c.validation_fraction = number(value, key);
    else if (key == "validation_pairs") c.validation_pairs = json_count(value, key);
    else throw ConfigError(key, "unknown field");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Data plan

/// Identities of the train split, divided into training classes and
/// held-out validation identities.
struct TrainingPlan {
  std::vector<std::size_t> train_rows;         // indices into ds.samples
  std::vector<std::size_t> class_of_row;       // contiguous class label per train row
  std::size_t num_classes = 0;
  SyntheticDataset validation;                 // validation identities, all marked eval
  std::vector<VerificationPair> validation_pairs;
};

inline TrainingPlan plan_training(const SyntheticDataset& ds, const TrainConfig& config) {
  std::map<std::size_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (ds.samples[i].split == Split::train) by_id[ds.samples[i].identity].push_back(i);
  }
  std::vector<std::size_t> ids;
  for (const auto& [id, rows] : by_id) ids.push_back(id);
  Rng rng(derive_seed(config.seed, "validation"));
  rng.shuffle(std::span<std::size_t>(ids));
  const auto n_val = static_cast<std::size_t>(std::llround(config.validation_fraction * static_cast<double>(ids.size())));
  if (n_val < 2 || ids.size() - n_val < 2) {
    throw ConfigError("validation_fraction", "train split has " + std::to_string(ids.size()) +
                                                 " identities; need at least two for training and two for validation");
  }
  std::vector<std::size_t> val_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train_ids(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  std::sort(val_ids.begin(), val_ids.end());
  std::sort(train_ids.begin(), train_ids.end());

  TrainingPlan plan;
  plan.num_classes = train_ids.size();
  for (std::size_t c = 0; c < train_ids.size(); ++c) {
    for (auto row : by_id[train_ids[c]]) {
      plan.train_rows.push_back(row);
      plan.class_of_row.push_back(c);
    }
  }
  plan.validation.config = ds.config;
  for (auto id : val_ids) {
    for (auto row : by_id[id]) {
      Sample s = ds.samples[row];
      s.split = Split::eval;
      plan.validation.samples.push_back(std::move(s));
    }
  }
  plan.validation_pairs =
      make_verification_pairs(plan.validation, config.validation_pairs, derive_seed(config.seed, "validation.pairs"));
  return plan;
}

inline std::vector<HeadSpec> head_specs_for(const SyntheticDataset& ds, const GroupModeAssignment& modes) {
  std::vector<HeadSpec> specs;
  for (auto g : kAllGroups) {
    if (modes.mode(g) == GroupMode::off) continue;
    specs.push_back({g, modes.mode(g), ds.group_columns(g)});
  }
  return specs;
}

inline EncoderConfig encoder_config_for(const SyntheticDataset& ds, const TrainConfig& config) {
  return {ds.input_dim(), config.hidden_dims, config.embedding_dim, derive_seed(config.seed, "init")};
}

template <std::floating_point T>
MultiTaskModel<T> make_model(const SyntheticDataset& ds, const TrainConfig& config, std::size_t num_classes) {
  return MultiTaskModel<T>(encoder_config_for(ds, config), num_classes, head_specs_for(ds, config.modes));
}

// ---------------------------------------------------------------------------
// History

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double l_id = 0;
  std::optional<double> l_attr;
  std::optional<double> l_adv;
  double total = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double l_id = 0;
  std::optional<double> l_attr;
  std::optional<double> l_adv;
  double total = 0;
  double val_metric = 0;
  double lr = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  bool has_attr = false;
  bool has_adv = false;
  std::size_t best_epoch = 0;
  double best_val_metric = -1;
  bool stopped_early = false;
};

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// epoch,l_id[,l_attr][,l_adv],total,val_metric,lr
inline std::string history_csv(const History& h) {
  std::string out = "epoch,l_id";
  if (h.has_attr) out += ",l_attr";
  if (h.has_adv) out += ",l_adv";
  out += ",total,val_metric,lr\n";
  for (const auto& e : h.epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.l_id);
    if (h.has_attr) out += "," + format_double(e.l_attr.value_or(0));
    if (h.has_adv) out += "," + format_double(e.l_adv.value_or(0));
    out += "," + format_double(e.total) + "," + format_double(e.val_metric) + "," + format_double(e.lr) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

template <std::floating_point T>
double validation_metric(const MultiTaskModel<T>& model, const TrainingPlan& plan) {
  return verification_accuracy_10fold(embed_and_score(model, plan.validation, plan.validation_pairs),
                                      plan.validation_pairs)
      .mean;
}

template <std::floating_point T>
struct StepLosses {
  Tensor<T> total;
  Tensor<T> l_id;
  std::optional<Tensor<T>> l_attr;
  std::optional<Tensor<T>> l_adv;
};

/// Records the configured terms of the joint objective for one mini-batch.
template <std::floating_point T>
StepLosses<T> batch_objective(Tape<T>& tape, const MultiTaskModel<T>& model, const Tensor<T>& x,
                              std::span<const std::size_t> labels, const GroupTensors<T>& attribute_labels,
                              const LossWeights& w) {
  auto z = model.encode(tape, x);
  StepLosses<T> out;
  out.l_id = cosface_loss(tape, model.identity_logits(tape, z), labels, w.margin_m, w.scale_r);
  GroupTensors<T> pred_logits, pred_labels, sup_logits, sup_labels;
  for (const auto& head : model.heads()) {
    auto logits = model.attribute_logits(tape, z, head.group);
    if (head.mode == GroupMode::predict) {
      pred_logits.emplace(head.group, logits);
      pred_labels.emplace(head.group, attribute_labels.at(head.group));
    } else {
      sup_logits.emplace(head.group, logits);
      sup_labels.emplace(head.group, attribute_labels.at(head.group));
    }
  }
  if (!pred_logits.empty()) out.l_attr = attribute_prediction_loss(tape, pred_logits, pred_labels);
  if (!sup_logits.empty()) out.l_adv = adversarial_suppression_loss(tape, sup_logits, sup_labels);
  out.total = total_loss(tape, out.l_id, out.l_attr, out.l_adv, w);
  return out;
}

/// Trains `model` in place and leaves it at the best-validation parameters.
template <std::floating_point T>
History train(MultiTaskModel<T>& model, const SyntheticDataset& ds, const TrainingPlan& plan, const TrainConfig& config) {
  config.validate();
  if (model.identity_head().num_identities() != plan.num_classes) {
    throw ConfigError("num_identities", "model has " + std::to_string(model.identity_head().num_identities()) +
                                            " identity classes, training plan has " + std::to_string(plan.num_classes));
  }
  for (const auto& head : model.heads()) {
    if (head.attribute_columns != ds.group_columns(head.group)) {
      throw ConfigError("modes", "head for group " + std::string(group_name(head.group)) +
                                     " is bound to columns that do not match the dataset");
    }
  }
  const std::size_t d_in = ds.input_dim(), n = plan.train_rows.size();
  if (d_in != model.config().input_dim) {
    throw ShapeError("train: dataset input_dim " + std::to_string(d_in) + " != model input_dim " +
                     std::to_string(model.config().input_dim));
  }
  std::vector<T> features(n * d_in);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& f = ds.samples[plan.train_rows[r]].features;
    for (std::size_t c = 0; c < d_in; ++c) features[r * d_in + c] = static_cast<T>(f[c]);
  }

  History history;
  for (const auto& head : model.heads()) {
    (head.mode == GroupMode::predict ? history.has_attr : history.has_adv) = true;
  }
  auto params = model.parameters();
  std::vector<std::vector<T>> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : params) best.emplace_back(p->tensor.values().begin(), p->tensor.values().end());
  };
  snapshot();

  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t since_best = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(epoch, config);
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double sum_id = 0, sum_attr = 0, sum_adv = 0, sum_total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size, ++batches) {
      const std::size_t rows = std::min(config.batch_size, n - start);
      std::vector<T> x(rows * d_in);
      std::vector<std::size_t> labels(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t src = order[start + r];
        std::copy_n(features.begin() + static_cast<std::ptrdiff_t>(src * d_in), d_in,
                    x.begin() + static_cast<std::ptrdiff_t>(r * d_in));
        labels[r] = plan.class_of_row[src];
      }
      GroupTensors<T> attribute_labels;
      for (const auto& head : model.heads()) {
        const std::size_t k = head.attribute_columns.size();
        std::vector<T> y(rows * k);
        for (std::size_t r = 0; r < rows; ++r) {
          const auto& bits = ds.samples[plan.train_rows[order[start + r]]].attributes;
          for (std::size_t c = 0; c < k; ++c) y[r * k + c] = static_cast<T>(bits[head.attribute_columns[c]]);
        }
        attribute_labels.emplace(head.group, Tensor<T>({rows, k}, std::move(y)));
      }

      Tape<T> tape;
      const auto losses = batch_objective(tape, model, Tensor<T>({rows, d_in}, std::move(x)), labels, attribute_labels,
                                          config.weights);
      StepRecord step{epoch, batches, static_cast<double>(losses.l_id.item()), std::nullopt, std::nullopt,
                      static_cast<double>(losses.total.item())};
      if (losses.l_attr) step.l_attr = static_cast<double>(losses.l_attr->item());
      if (losses.l_adv) step.l_adv = static_cast<double>(losses.l_adv->item());
      if (!std::isfinite(step.total) || !std::isfinite(step.l_id) || !std::isfinite(step.l_attr.value_or(0)) ||
          !std::isfinite(step.l_adv.value_or(0))) {
        std::string msg = "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches) +
                          ": l_id=" + format_double(step.l_id);
        if (step.l_attr) msg += " l_attr=" + format_double(*step.l_attr);
        if (step.l_adv) msg += " l_adv=" + format_double(*step.l_adv);
        msg += " total=" + format_double(step.total);
        throw NumericError(msg);
      }
      model.zero_grad();
      tape.backward(losses.total);
      if (lr != 0) {
        const T step_lr = static_cast<T>(lr);
        for (auto* p : params) {
          if (!p->tensor.has_grad()) continue;
          auto values = p->tensor.mutable_values();
          const auto grad = p->tensor.grad();
          for (std::size_t i = 0; i < values.size(); ++i) values[i] -= step_lr * grad[i];
        }
      }
      sum_id += step.l_id;
      sum_attr += step.l_attr.value_or(0);
      sum_adv += step.l_adv.value_or(0);
      sum_total += step.total;
      history.steps.push_back(step);
    }
    const double nb = static_cast<double>(batches);
    EpochRecord rec{epoch, sum_id / nb, std::nullopt, std::nullopt, sum_total / nb, validation_metric(model, plan), lr};
    if (history.has_attr) rec.l_attr = sum_attr / nb;
    if (history.has_adv) rec.l_adv = sum_adv / nb;
    history.epochs.push_back(rec);
    if (rec.val_metric > history.best_val_metric) {
      history.best_val_metric = rec.val_metric;
      history.best_epoch = epoch;
      snapshot();
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      history.stopped_early = true;
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i]->tensor.mutable_values();
    std::copy(best[i].begin(), best[i].end(), values.begin());
  }
  model.zero_grad();
  return history;
}

template <std::floating_point T>
struct TrainResult {
  MultiTaskModel<T> model;
  History history;
};

template <std::floating_point T>
TrainResult<T> train(const SyntheticDataset& ds, const TrainConfig& config) {
  config.validate();
  const auto plan = plan_training(ds, config);
  auto model = make_model<T>(ds, config, plan.num_classes);
  auto history = train(model, ds, plan, config);
  return {std::move(model), std::move(history)};
}

// ---------------------------------------------------------------------------
// Model-level evaluation

struct EvalConfig {
  std::size_t pairs = 6000;
  std::uint64_t seed = 0;
  ProbeOptions probe;
};

struct ModelMetrics {
  FoldReport verification;
  std::map<Group, ProbeResult> probes;
};

/// Verification on the eval split plus a linear probe per attribute group on
/// eval-split embeddings.
template <std::floating_point T>
ModelMetrics evaluate_model(const MultiTaskModel<T>& model, const SyntheticDataset& ds, const EvalConfig& config) {
  ModelMetrics out;
  const auto pairs = make_verification_pairs(ds, config.pairs, derive_seed(config.seed, "eval.pairs"));
  out.verification = verification_accuracy_10fold(embed_and_score(model, ds, pairs), pairs);
  const auto rows = ds.indices(Split::eval);
  const auto emb = normalized_embeddings(model, ds, rows);
  std::vector<std::vector<std::uint8_t>> attrs;
  std::vector<std::size_t> ids;
  for (auto r : rows) {
    attrs.push_back(ds.samples[r].attributes);
    ids.push_back(ds.samples[r].identity);
  }
  for (auto g : kAllGroups) {
    const auto cols = ds.group_columns(g);
    if (cols.empty()) continue;
    ProbeOptions probe = config.probe;
    probe.sgd.seed = derive_seed(config.seed, "probe");
    out.probes.emplace(g, linear_probe(emb, model.config().embedding_dim, attrs, ids, cols, probe));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suite

struct SuiteRow {
  GroupModeAssignment modes;
  ModelMetrics metrics;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  bool cached = false;  // copied from an earlier identical assignment

  std::string label() const { return modes.label(); }
};

struct ResultTable {
  std::vector<SuiteRow> rows;
};

inline SuiteRow run_assignment(const SyntheticDataset& ds, const TrainingPlan& plan, const TrainConfig& config,
                               const EvalConfig& eval) {
  auto run = [&]<std::floating_point T>(T) {
    auto model = make_model<T>(ds, config, plan.num_classes);
    const auto history = train(model, ds, plan, config);
    return SuiteRow{config.modes, evaluate_model(model, ds, eval), history.best_epoch, history.epochs.size(), false};
  };
  return config.precision == Precision::float32 ? run(float{}) : run(double{});
}

/// One training run per distinct assignment, all from `base`'s seed. Repeated
/// assignments reuse the earlier result. Rows follow the suite order.
inline ResultTable run_experiment_suite(const SyntheticDataset& ds, const std::vector<GroupModeAssignment>& suite,
                                        const TrainConfig& base, const EvalConfig& eval, std::size_t jobs = 1) {
  if (suite.empty()) throw ConfigError("suite", "must list at least one mode assignment");
  base.validate();
  const auto plan = plan_training(ds, base);
  std::vector<std::size_t> first_of(suite.size());
  std::vector<std::size_t> unique;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    first_of[i] = i;
    for (std::size_t j = 0; j < i; ++j) {
      if (suite[j] == suite[i]) {
        first_of[i] = first_of[j];
        break;
      }
    }
    if (first_of[i] == i) unique.push_back(i);
  }

  std::vector<std::optional<SuiteRow>> results(suite.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= unique.size()) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        TrainConfig config = base;
        config.modes = suite[unique[k]];
        auto row = run_assignment(ds, plan, config, eval);
        std::lock_guard lock(mu);
        results[unique[k]] = std::move(row);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, unique.size());
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  ResultTable table;
  for (std::size_t i = 0; i < suite.size(); ++i) {
    SuiteRow row = *results[first_of[i]];
    row.cached = first_of[i] != i;
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace attrface
