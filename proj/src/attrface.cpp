// attrface: dataset generation, training, evaluation, suites and reports.
//
// Exit codes: 0 success, 1 validation / format / I/O error, 2 numeric failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "attrface/attrface.hpp"
#include "attrface/manifest.hpp"

namespace fs = std::filesystem;
using namespace attrface;

namespace {

nlohmann::json read_json(const std::string& path) {
  const auto bytes = io::read_file(path);
  try {
    return nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": invalid JSON: " + e.what());
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

struct EvalSettings {
  EvalConfig eval;
  AttributeOnlyConfig attr;
};

EvalSettings eval_settings_from_json(const nlohmann::json& j) {
  EvalSettings s;
  if (!j.is_object()) throw ConfigError("eval", "must be an object");
  for (const auto& [key, value] : j.items()) {
    const std::string path = "eval." + key;
    if (key == "pairs") s.eval.pairs = detail::json_count(value, path);
    else if (key == "probe_epochs") s.eval.probe.sgd.epochs = detail::json_count(value, path);
    else if (key == "probe_lr") s.eval.probe.sgd.lr = detail::json_field<double>(value, path);
    else if (key == "attr_train_pairs") s.attr.train_pairs = detail::json_count(value, path);
    else if (key == "attr_eval_pairs") s.attr.eval_pairs = detail::json_count(value, path);
    else throw ConfigError(path, "unknown field");
  }
  if (s.eval.pairs == 0 || s.eval.pairs % 2 != 0) throw ConfigError("eval.pairs", "must be even and positive");
  if (!(s.eval.probe.sgd.lr > 0)) throw ConfigError("eval.probe_lr", "must be positive");
  return s;
}

std::string run_header(const std::string& run_id) { return "run_id: " + run_id + "\n"; }

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_data(const GenDataArgs& a) {
  RunManifest m;
  m.command = "gen-data";
  m.started_at = utc_timestamp();
  DatasetConfig cfg = a.config.empty() ? DatasetConfig{} : dataset_config_from_json(read_json(a.config));
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  m.run_id = RunIdBuilder(m.command).add("dataset_config", to_json(cfg).dump()).str();
  if (!a.config.empty()) m.config_paths["dataset"] = a.config;
  m.seeds["master"] = cfg.seed;
  ensure_dir(a.out);
  const auto ds = generate(cfg);
  const auto path = join(a.out, "dataset.bin");
  save(ds, path, m.run_id);
  m.outputs.push_back(path);
  m.finished_at = utc_timestamp();
  write_manifest(m, join(a.out, "manifest.json"));
  std::cout << path << ": " << ds.samples.size() << " samples, " << cfg.num_identities << " identities\n";
  return 0;
}

struct TrainArgs {
  std::string dataset;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  RunManifest m;
  m.command = "train";
  m.started_at = utc_timestamp();
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : train_config_from_json(read_json(a.config));
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const auto bytes = io::read_file(a.dataset);
  const auto ds = deserialize_dataset(bytes, a.dataset);
  m.run_id = RunIdBuilder(m.command).add_bytes("dataset", bytes).add("train_config", to_json(cfg).dump()).str();
  if (!a.config.empty()) m.config_paths["train"] = a.config;
  m.input_paths["dataset"] = a.dataset;
  m.seeds["master"] = cfg.seed;
  m.seeds["init"] = derive_seed(cfg.seed, "init");
  m.seeds["shuffle"] = derive_seed(cfg.seed, "shuffle");
  m.seeds["validation"] = derive_seed(cfg.seed, "validation");
  ensure_dir(a.out);

  const auto ckpt = join(a.out, "checkpoint.bin");
  const auto hist = join(a.out, "history.csv");
  History history;
  auto run = [&]<std::floating_point T>(T) {
    auto result = train<T>(ds, cfg);
    save_checkpoint(result.model, ckpt, m.run_id);
    history = std::move(result.history);
  };
  if (cfg.precision == Precision::float32) {
    run(float{});
  } else {
    run(double{});
  }
  io::write_text(hist, "# run_id=" + m.run_id + "\n" + history_csv(history));
  m.outputs = {ckpt, hist};
  m.finished_at = utc_timestamp();
  write_manifest(m, join(a.out, "manifest.json"));
  std::cout << cfg.modes.notation() << ": best validation accuracy " << format_double(history.best_val_metric)
            << " at epoch " << history.best_epoch << " (" << history.epochs.size() << " epochs run)\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool attr_only = false;
};

int cmd_eval(const EvalArgs& a) {
  RunManifest m;
  m.command = "eval";
  m.started_at = utc_timestamp();
  EvalSettings settings = a.config.empty() ? EvalSettings{} : eval_settings_from_json(read_json(a.config));
  const std::uint64_t seed = a.seed.value_or(0);
  settings.eval.seed = seed;
  settings.attr.seed = seed;
  const auto ckpt_bytes = io::read_file(a.checkpoint);
  const auto ds_bytes = io::read_file(a.dataset);
  const auto model = deserialize_checkpoint<double>(ckpt_bytes, a.checkpoint);
  const auto ds = deserialize_dataset(ds_bytes, a.dataset);
  if (model.config().input_dim != ds.input_dim()) {
    throw ShapeError("checkpoint input_dim " + std::to_string(model.config().input_dim) + " does not match dataset input_dim " +
                     std::to_string(ds.input_dim()));
  }
  RunIdBuilder id(m.command);
  id.add_bytes("checkpoint", ckpt_bytes).add_bytes("dataset", ds_bytes).add("seed", seed);
  id.add("eval.pairs", settings.eval.pairs).add("attr_only", a.attr_only ? "1" : "0");
  id.add("probe", std::to_string(settings.eval.probe.sgd.epochs) + "/" + format_double(settings.eval.probe.sgd.lr));
  id.add("attr_pairs", std::to_string(settings.attr.train_pairs) + "/" + std::to_string(settings.attr.eval_pairs));
  m.run_id = id.str();
  if (!a.config.empty()) m.config_paths["eval"] = a.config;
  m.input_paths = {{"checkpoint", a.checkpoint}, {"dataset", a.dataset}};
  m.seeds["master"] = seed;
  ensure_dir(a.out);

  const auto metrics = evaluate_model(model, ds, settings.eval);
  ResultTable rt;
  rt.rows.push_back({model.modes(), metrics, 0, 0, false});
  auto summary = suite_table(rt);
  summary.columns.pop_back();  // best_epoch is unknown here
  for (auto& r : summary.rows) r.values.pop_back();
  const auto folds = fold_table(model.modes().notation(), metrics.verification);

  Table probes;
  probes.title = "Linear-probe accuracy per attribute (%)";
  probes.label_header = "Attribute";
  probes.columns = {"accuracy"};
  for (const auto& [g, probe] : metrics.probes) {
    for (std::size_t k = 0; k < probe.columns.size(); ++k) {
      const auto& spec = ds.config.attribute_specs[probe.columns[k]];
      probes.rows.push_back({spec.name, {probe.accuracy[k] ? 100.0 * *probe.accuracy[k] : std::numeric_limits<double>::quiet_NaN()}});
    }
  }
  const std::vector<std::pair<std::string, const Table*>> tables{
      {"metrics", &summary}, {"verification_folds", &folds}, {"probes", &probes}};
  std::string text = run_header(m.run_id);
  for (const auto& [name, t] : tables) {
    const auto path = join(a.out, name + ".csv");
    io::write_text(path, to_csv(*t, m.run_id));
    m.outputs.push_back(path);
    text += "\n" + to_text(*t);
  }
  if (a.attr_only) {
    const auto attr = attribute_only_table(attribute_only_analysis(ds, settings.attr));
    const auto path = join(a.out, "attribute_only.csv");
    io::write_text(path, to_csv(attr, m.run_id));
    m.outputs.push_back(path);
    text += "\n" + to_text(attr);
  }
  const auto txt = join(a.out, "metrics.txt");
  io::write_text(txt, text);
  m.outputs.push_back(txt);
  m.finished_at = utc_timestamp();
  write_manifest(m, join(a.out, "manifest.json"));
  std::cout << text;
  return 0;
}

struct SuiteArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
};

int cmd_suite(const SuiteArgs& a) {
  RunManifest m;
  m.command = "suite";
  m.started_at = utc_timestamp();
  const auto j = read_json(a.config);
  if (!j.is_object()) throw ConfigError("<root>", "suite config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "suite" && key != "dataset" && key != "dataset_config" && key != "train" && key != "eval" && key != "seed") {
      throw ConfigError(key, "unknown field");
    }
  }
  if (!j.contains("suite") || !j["suite"].is_array()) throw ConfigError("suite", "must be an array of mode strings");
  std::vector<GroupModeAssignment> suite;
  for (std::size_t i = 0; i < j["suite"].size(); ++i) {
    const auto& s = j["suite"][i];
    if (!s.is_string()) throw ConfigError("suite[" + std::to_string(i) + "]", "must be a mode string");
    suite.push_back(GroupModeAssignment::parse(s.get<std::string>()));
  }
  if (suite.empty()) throw ConfigError("suite", "must list at least one mode assignment");
  std::uint64_t seed = j.contains("seed") ? detail::json_seed(j["seed"], "seed") : 0;
  if (a.seed) seed = *a.seed;

  TrainConfig base;
  if (j.contains("train")) base = train_config_from_json(j["train"]);
  base.seed = seed;
  EvalSettings settings = j.contains("eval") ? eval_settings_from_json(j["eval"]) : EvalSettings{};
  settings.eval.seed = seed;

  RunIdBuilder id(m.command);
  SyntheticDataset ds;
  if (j.contains("dataset") == j.contains("dataset_config")) {
    throw ConfigError("dataset", "give exactly one of \"dataset\" (file path) and \"dataset_config\"");
  }
  if (j.contains("dataset")) {
    const auto path = detail::json_field<std::string>(j["dataset"], "dataset");
    const auto bytes = io::read_file(path);
    ds = deserialize_dataset(bytes, path);
    id.add_bytes("dataset", bytes);
    m.input_paths["dataset"] = path;
  } else {
    auto cfg = dataset_config_from_json(j["dataset_config"]);
    cfg.seed = seed;
    cfg.validate();
    id.add("dataset_config", to_json(cfg).dump());
    ds = generate(cfg);
  }
  std::string labels;
  for (const auto& s : suite) labels += s.label() + ";";
  id.add("suite", labels).add("train_config", to_json(base).dump()).add("eval.pairs", settings.eval.pairs);
  id.add("probe", std::to_string(settings.eval.probe.sgd.epochs) + "/" + format_double(settings.eval.probe.sgd.lr));
  m.run_id = id.str();
  m.config_paths["suite"] = a.config;
  m.seeds["master"] = seed;
  ensure_dir(a.out);

  const auto result = run_experiment_suite(ds, suite, base, settings.eval, a.jobs);
  const auto table = suite_table(result);
  const auto csv = join(a.out, "suite.csv");
  const auto txt = join(a.out, "suite.txt");
  io::write_text(csv, to_csv(table, m.run_id));
  const std::string text = run_header(m.run_id) + to_text(table);
  io::write_text(txt, text);
  m.outputs = {csv, txt};
  m.finished_at = utc_timestamp();
  write_manifest(m, join(a.out, "manifest.json"));
  std::cout << text;
  return 0;
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  std::string text;
  for (const auto& path : a.inputs) {
    const auto bytes = io::read_file(path);
    auto t = parse_csv(std::string(bytes.begin(), bytes.end()));
    t.title = path;
    text += (text.empty() ? "" : "\n") + to_text(t);
  }
  if (!a.out.empty()) {
    ensure_dir(a.out);
    io::write_text(join(a.out, "report.txt"), text);
  }
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attribute-aware face-embedding training lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen_cmd->add_option("--config", gen.config, "dataset config (JSON); defaults when omitted");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "master seed (overrides the config)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "train one model");
  train_cmd->add_option("--dataset", tr.dataset, "dataset file")->required();
  train_cmd->add_option("--config", tr.config, "train config (JSON)");
  train_cmd->add_option("--out", tr.out, "output directory")->required();
  train_cmd->add_option("--seed", tr.seed, "master seed (overrides the config)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--dataset", ev.dataset, "dataset file")->required();
  eval_cmd->add_option("--config", ev.config, "eval settings (JSON)");
  eval_cmd->add_option("--out", ev.out, "output directory")->required();
  eval_cmd->add_option("--seed", ev.seed, "pair, probe and classifier seed");
  eval_cmd->add_flag("--attr-only", ev.attr_only, "also run the attribute-only identity analyses");

  SuiteArgs su;
  auto* suite_cmd = app.add_subcommand("suite", "train and evaluate a list of mode assignments");
  suite_cmd->add_option("--config", su.config, "suite config (JSON)")->required();
  suite_cmd->add_option("--out", su.out, "output directory")->required();
  suite_cmd->add_option("--seed", su.seed, "master seed (overrides the config)");
  suite_cmd->add_option("--jobs", su.jobs, "parallel training runs")->check(CLI::PositiveNumber);

  ReportArgs rep;
  auto* report_cmd = app.add_subcommand("report", "render CSV result files as aligned tables");
  report_cmd->add_option("inputs", rep.inputs, "CSV files")->required();
  report_cmd->add_option("--out", rep.out, "write report.txt into this directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*suite_cmd) return cmd_suite(su);
    if (*report_cmd) return cmd_report(rep);
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
