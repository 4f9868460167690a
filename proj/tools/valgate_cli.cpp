// valgate: simulate, train, calibrate, score, evaluate, route, pipeline.
// Every subcommand prints exactly one JSON document on stdout.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "valgate/valgate.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace valgate;

namespace {

using Specs = std::vector<OptionSpec>;

OptionSpec opt(std::string key, OptionType type, std::optional<std::string> def, std::string help,
               bool required = false) {
  return {std::move(key), type, std::move(def), std::move(help), required};
}

const auto S = OptionType::string;
const auto I = OptionType::integer;
const auto R = OptionType::real;

Specs simulate_specs() {
  return {opt("out", S, {}, "output directory", true),
          opt("preset", S, "small", "benchmark preset: small | default"),
          opt("seed", I, "0", "random seed"),
          opt("questions", I, {}, "override the preset's question count"),
          opt("rollouts", I, {}, "override the preset's rollouts per question"),
          opt("chain", S, {}, "ChainSpec JSON; sample walks from it instead of a benchmark"),
          opt("trajectories", I, "1000", "walks to sample with --chain")};
}

Specs train_specs() {
  return {opt("data", S, {}, "dataset directory", true),
          opt("out", S, {}, "model bundle directory", true),
          opt("gamma", R, "0.99", "discount factor in (0, 1]"),
          opt("lr", R, "1e-4", "Adam learning rate"),
          opt("epochs", I, "10", "training epochs"),
          opt("hidden-units", I, "256", "hidden width of the value head"),
          opt("state-order", I, "1", "number of stacked hidden states per input"),
          opt("seed", I, "0", "random seed"),
          opt("batch-steps", I, "256", "TD steps per minibatch"),
          opt("split", S, "train", "split to train on: train | val | test | all"),
          opt("terminal-reward", S, "discounted", "terminal target: discounted | undiscounted"),
          opt("workers", I, "1", "gradient worker threads"),
          opt("early-stop-tol", R, "1e-5", "relative loss improvement below which training stops (<= 0 disables)"),
          opt("grading-rollouts", I, "3", "rollouts used for labels"),
          opt("pass-reward", R, "1.0", "reward counted as a correct attempt")};
}

Specs calibrate_specs() {
  return {opt("model", S, {}, "model bundle directory", true),
          opt("data", S, {}, "dataset directory", true),
          opt("split", S, "val", "split to calibrate on"),
          opt("tau", R, {}, "fixed threshold instead of the sweep"),
          opt("out", S, {}, "where to write the calibrated bundle (default: --model)"),
          opt("grading-rollouts", I, "3", "rollouts used for labels"),
          opt("pass-reward", R, "1.0", "reward counted as a correct attempt")};
}

Specs score_specs() {
  return {opt("model", S, {}, "model bundle directory", true),
          opt("data", S, {}, "dataset directory", true),
          opt("split", S, "all", "split to score"),
          opt("out", S, {}, "optional directory for scores.jsonl")};
}

Specs evaluate_specs() {
  return {opt("model", S, {}, "calibrated model bundle directory", true),
          opt("data", S, {}, "dataset directory", true),
          opt("split", S, "test", "split to evaluate"),
          opt("out", S, {}, "optional directory for evaluation.json"),
          opt("grading-rollouts", I, "3", "rollouts used for labels"),
          opt("pass-reward", R, "1.0", "reward counted as a correct attempt")};
}

Specs route_specs() {
  return {opt("model", S, {}, "model bundle directory", true),
          opt("data", S, {}, "dataset directory (supplies the question-only features)", true),
          opt("candidates", S, {}, "candidate file (JSON Lines)", true),
          opt("strategy", S, "sc", "sc | bon | sr"),
          opt("mode", S, "adaptive", "adaptive | direct | sample"),
          opt("split", S, "test", "split to route"),
          opt("out", S, {}, "optional directory for routing.json")};
}

Specs pipeline_specs() {
  return {opt("out", S, {}, "output directory", true),
          opt("preset", S, "small", "benchmark preset: small | default"),
          opt("seed", I, "0", "random seed"),
          opt("workers", I, "1", "gradient worker threads")};
}

struct Command {
  std::string name;
  std::string help;
  Specs specs;
  std::function<json(const RunConfig&)> run;
};

LabelingRule rule_from(const RunConfig& c) {
  return {c.get_count("grading-rollouts"), c.get_real("pass-reward")};
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  detail::write_file(path, j.dump(2) + "\n");
}

std::vector<QuestionRecord> load_split(const std::string& dir, const std::string& split, const LabelingRule& rule = {}) {
  const auto all = read_dataset(dir, rule);
  auto out = select_split(all, split);
  if (out.empty()) throw DataError("split '" + split + "' of " + dir + " is empty");
  return out;
}

void check_split_name(const std::string& s) {
  if (s == "all") return;
  try {
    (void)parse_split(s);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------

json run_simulate(const RunConfig& c) {
  const fs::path out = c.get_string("out");
  const auto seed = static_cast<std::uint64_t>(c.get_int("seed"));
  if (auto chain_path = c.get_optional("chain")) {
    json j;
    try {
      j = json::parse(detail::read_file(*chain_path));
    } catch (const json::exception& e) {
      throw DataError(*chain_path + ": " + e.what());
    }
    const ChainSpec spec = chain_spec_from_json(j);
    const std::size_t n = c.get_count("trajectories");
    if (n < 3) throw ConfigError("--trajectories must be >= 3");
    auto trajs = sample_trajectories(spec, n, seed);
    const std::vector<QuestionRecord> records{make_question_record("chain", std::move(trajs))};
    write_dataset(records, out / "data");
    const Eigen::VectorXd v = exact_values(spec, 0.99);
    write_json(out / "values.json", {{"gamma", 0.99}, {"values", std::vector<double>(v.data(), v.data() + v.size())}});
    return {{"command", "simulate"}, {"mode", "chain"}, {"data", (out / "data").string()}, {"trajectories", n}};
  }
  Preset p = preset(c.get_string("preset"));
  if (c.has("questions")) p.n_questions = c.get_count("questions");
  if (c.has("rollouts")) p.k_rollouts = c.get_count("rollouts");
  const Benchmark b = make_benchmark(p.family, p.n_questions, p.k_rollouts, seed);
  const BenchmarkPaths paths = write_benchmark(b, out);
  write_json(out / "family.json", b.family.to_json());
  std::size_t n_hard = 0;
  for (const auto& r : b.records) n_hard += r.ground_truth_hard ? 1 : 0;
  return {{"command", "simulate"},
          {"preset", p.name},
          {"seed", seed},
          {"n_questions", b.records.size()},
          {"n_hard", n_hard},
          {"n_easy", b.records.size() - n_hard},
          {"regenerations", b.regenerations},
          {"data", paths.data.string()},
          {"candidates", paths.candidates.string()},
          {"oracle", paths.oracle.string()}};
}

TerminalReward parse_terminal(const std::string& s) {
  if (s == "discounted") return TerminalReward::discounted;
  if (s == "undiscounted") return TerminalReward::undiscounted;
  throw ConfigError("--terminal-reward must be discounted or undiscounted, got '" + s + "'");
}

json train_and_save(const std::vector<QuestionRecord>& records, const TDConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  std::string log;
  const TrainResult r = train(std::span<const QuestionRecord>(records), cfg, [&](const EpochStats& s, const ValueHead&) {
    log += s.to_json().dump() + "\n";
    std::cerr << "epoch " << s.epoch << " loss " << s.mean_loss << " (" << s.wall_ms << " ms)\n";
  });
  save_model(r.model, out);
  detail::write_file(out / "train_log.jsonl", log);
  std::size_t n_traj = 0;
  for (const auto& q : records) n_traj += q.rollouts.size();
  return {{"command", "train"},
          {"out", out.string()},
          {"epochs_run", r.history.size()},
          {"final_loss", r.history.back().mean_loss},
          {"early_stopped", r.early_stopped},
          {"n_questions", records.size()},
          {"n_trajectories", n_traj},
          {"n_steps", r.history.back().steps},
          {"config", cfg.to_json()}};
}

json run_train(const RunConfig& c) {
  TDConfig cfg;
  cfg.gamma = c.get_real("gamma");
  cfg.lr = c.get_real("lr");
  cfg.epochs = c.get_count("epochs");
  cfg.hidden_units = c.get_count("hidden-units");
  cfg.state_order_k = c.get_count("state-order");
  cfg.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  cfg.batch_steps = c.get_count("batch-steps");
  cfg.terminal = parse_terminal(c.get_string("terminal-reward"));
  cfg.workers = c.get_count("workers");
  cfg.early_stop_tol = c.get_real("early-stop-tol");
  cfg.validate();
  check_split_name(c.get_string("split"));
  const auto records = load_split(c.get_string("data"), c.get_string("split"), rule_from(c));
  return train_and_save(records, cfg, c.get_string("out"));
}

json val_stats(std::span<const double> scores, const std::vector<bool>& labels) {
  const auto n_hard = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
  return {{"n", labels.size()},
          {"n_hard", n_hard},
          {"n_easy", labels.size() - n_hard},
          {"min_score", *std::min_element(scores.begin(), scores.end())},
          {"max_score", *std::max_element(scores.begin(), scores.end())}};
}

json calibrate_model(DifficultyModel& model, const std::vector<QuestionRecord>& records, const std::string& split,
                     std::optional<double> fixed_tau) {
  const auto scores = raw_scores(model, records);
  const auto labels = hard_labels(records);
  model.val_stats = val_stats(scores, labels);
  if (fixed_tau) {
    if (!std::isfinite(*fixed_tau)) throw ConfigError("--tau must be finite");
    model.set_tau(*fixed_tau);
    std::vector<bool> pred(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = classify(scores[i], *fixed_tau) == Difficulty::difficult;
    const double f1 = macro_f1(confusion(pred, labels));
    model.calibration = CalibrationMeta{split, "macro_f1", 0, f1, true};
    return {{"tau", *fixed_tau}, {"macro_f1", f1}, {"sweep_size", 0}, {"fixed_override", true}};
  }
  const CalibrationResult r = calibrate(model, scores, labels, split);
  return {{"tau", r.tau}, {"macro_f1", r.objective_value}, {"sweep_size", r.sweep_size}, {"fixed_override", false}};
}

json run_calibrate(const RunConfig& c) {
  const std::string split = c.get_string("split");
  check_split_name(split);
  DifficultyModel model = load_model(c.get_string("model"));
  const auto records = load_split(c.get_string("data"), split, rule_from(c));
  std::optional<double> fixed;
  if (c.has("tau")) fixed = c.get_real("tau");
  json j = calibrate_model(model, records, split, fixed);
  const fs::path out = c.get_optional("out").value_or(c.get_string("model"));
  if (out != fs::path(c.get_string("model"))) {
    fs::create_directories(out);
    for (const char* f : {"head.json", "head.bin", "train_log.jsonl"}) {
      const fs::path src = fs::path(c.get_string("model")) / f;
      if (fs::exists(src)) fs::copy_file(src, out / f, fs::copy_options::overwrite_existing);
    }
  }
  save_model(model, out);
  j["command"] = "calibrate";
  j["split"] = split;
  j["n"] = records.size();
  j["out"] = out.string();
  return j;
}

json run_score(const RunConfig& c) {
  check_split_name(c.get_string("split"));
  const DifficultyModel model = load_model(c.get_string("model"));
  const auto records = load_split(c.get_string("data"), c.get_string("split"));
  json rows = json::array();
  std::string lines;
  for (const auto& r : records) {
    const Score s = score(model, question_feature(r, model.state_order_k));
    json row = {{"question_id", r.question_id}, {"score", s.reported}, {"raw", s.raw}};
    if (model.tau) row["difficulty"] = std::string(to_string(classify(model, s.raw)));
    lines += row.dump() + "\n";
    rows.push_back(std::move(row));
  }
  if (auto out = c.get_optional("out")) {
    fs::create_directories(*out);
    detail::write_file(fs::path(*out) / "scores.jsonl", lines);
  }
  return {{"command", "score"},
          {"n", records.size()},
          {"tau", model.tau ? json(*model.tau) : json(nullptr)},
          {"scores", rows}};
}

json run_evaluate(const RunConfig& c) {
  const std::string split = c.get_string("split");
  check_split_name(split);
  const DifficultyModel model = load_model(c.get_string("model"));
  const auto records = load_split(c.get_string("data"), split, rule_from(c));
  json j = evaluate_split(model, records).to_json();
  j["command"] = "evaluate";
  j["split"] = split;
  j["n"] = records.size();
  if (auto out = c.get_optional("out")) write_json(fs::path(*out) / "evaluation.json", j);
  return j;
}

json run_route(const RunConfig& c) {
  check_split_name(c.get_string("split"));
  Strategy strategy;
  RoutingMode mode;
  try {
    strategy = parse_strategy(c.get_string("strategy"));
    mode = parse_routing_mode(c.get_string("mode"));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  const DifficultyModel model = load_model(c.get_string("model"));
  const auto records = load_split(c.get_string("data"), c.get_string("split"));
  const auto cands = read_candidates(c.get_string("candidates"));
  const auto items = routing_items(model, records, cands);
  json j = evaluate_routing(model, items, strategy, mode).to_json();
  j["command"] = "route";
  if (auto out = c.get_optional("out")) write_json(fs::path(*out) / "routing.json", j);
  return j;
}

json run_pipeline(const RunConfig& c) {
  const fs::path out = c.get_string("out");
  const auto seed = static_cast<std::uint64_t>(c.get_int("seed"));
  Preset p = preset(c.get_string("preset"));
  p.train.seed = seed;
  p.train.workers = c.get_count("workers");
  p.train.validate();

  std::cerr << "simulate: " << p.n_questions << " questions x " << p.k_rollouts << " rollouts\n";
  const Benchmark bench = make_benchmark(p.family, p.n_questions, p.k_rollouts, seed);
  const BenchmarkPaths paths = write_benchmark(bench, out / "bench");
  const LabelingRule rule{bench.family.grading_rollouts, 1.0};
  const auto records = read_dataset(paths.data, rule);
  const auto train_set = filter_split(records, Split::train);
  const auto val_set = filter_split(records, Split::val);
  const auto test_set = filter_split(records, Split::test);

  json result = {{"command", "pipeline"}, {"preset", p.name}, {"seed", seed}, {"out", out.string()}};
  result["train"] = train_and_save(train_set, p.train, out / "model");
  DifficultyModel model = load_model(out / "model");
  result["calibrate"] = calibrate_model(model, val_set, "val", std::nullopt);
  save_model(model, out / "model");
  json ev = evaluate_split(model, test_set).to_json();
  write_json(out / "evaluation.json", ev);
  result["evaluate"] = ev;

  const auto cands = read_candidates(paths.candidates);
  const auto items = routing_items(model, test_set, cands);
  json routing = json::object();
  for (Strategy s : {Strategy::sc, Strategy::bon, Strategy::sr}) {
    json per_mode = json::object();
    for (RoutingMode m : {RoutingMode::adaptive, RoutingMode::always_direct, RoutingMode::always_sample}) {
      const RoutingReport rep = evaluate_routing(model, items, s, m);
      write_json(out / "routing" / (std::string(to_string(s)) + "_" + std::string(to_string(m)) + ".json"), rep.to_json());
      per_mode[std::string(to_string(m))] = rep.to_json(false);
    }
    routing[std::string(to_string(s))] = per_mode;
  }
  result["route"] = routing;
  return result;
}

std::vector<Command> commands() {
  return {{"simulate", "generate a synthetic benchmark (or sample a ChainSpec)", simulate_specs(), run_simulate},
          {"train", "fit the value head with TD learning", train_specs(), run_train},
          {"calibrate", "choose the difficulty threshold on a labeled split", calibrate_specs(), run_calibrate},
          {"score", "score questions from their initial state", score_specs(), run_score},
          {"evaluate", "ROC-AUC, Macro-F1 and class accuracies on a split", evaluate_specs(), run_evaluate},
          {"route", "difficulty-aware routing over precomputed candidates", route_specs(), run_route},
          {"pipeline", "simulate, train, calibrate, evaluate and route in one go", pipeline_specs(), run_pipeline}};
}

std::optional<json> load_config_file(const std::string& path) {
  if (path.empty()) return std::nullopt;
  try {
    return json::parse(detail::read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

// A config file or environment may carry keys for other subcommands; keys no
// subcommand knows are rejected.
std::map<std::string, std::string> restrict_env(const std::map<std::string, std::string>& env,
                                                const std::set<std::string>& all_keys, const Specs& specs) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : env) {
    const std::string key = normalize_key(k);
    if (key == "config") continue;
    if (!all_keys.contains(key)) {
      std::string var(kEnvPrefix);
      for (char ch : key) var.push_back(ch == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
      throw ConfigError("unknown environment override " + var);
    }
    if (std::any_of(specs.begin(), specs.end(), [&](const auto& s) { return s.key == key; })) out[key] = v;
  }
  return out;
}

std::optional<json> restrict_file(const std::optional<json>& file, const std::set<std::string>& all_keys,
                                  const Specs& specs) {
  if (!file) return std::nullopt;
  if (!file->is_object()) throw ConfigError("config file must hold a JSON object");
  json out = json::object();
  for (const auto& [k, v] : file->items()) {
    const std::string key = normalize_key(k);
    if (!all_keys.contains(key)) throw ConfigError("unknown config key '" + k + "'");
    if (std::any_of(specs.begin(), specs.end(), [&](const auto& s) { return s.key == key; })) out[key] = v;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  const auto cmds = commands();
  std::set<std::string> all_keys;
  for (const auto& c : cmds)
    for (const auto& s : c.specs) all_keys.insert(s.key);

  CLI::App app{"valgate: value-function difficulty estimation and routing"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON config file (defaults < file < flags < VALGATE_* env)");

  std::vector<std::pair<CLI::App*, std::map<std::string, CLI::Option*>>> subs;
  std::map<std::string, std::map<std::string, std::string>> values;
  for (const auto& c : cmds) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", config_path, "JSON config file");
    std::map<std::string, CLI::Option*> options;
    for (const auto& s : c.specs) {
      std::string help = s.help;
      if (s.default_value) help += " [default: " + *s.default_value + "]";
      if (s.required) help += " (required)";
      options[s.key] = sub->add_option("--" + s.key, values[c.name][s.key], help);
    }
    subs.emplace_back(sub, std::move(options));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    auto& [sub, options] = subs[i];
    if (!sub->parsed()) continue;
    const Command& cmd = cmds[i];
    try {
      std::map<std::string, std::string> flags;
      for (const auto& [key, o] : options) {
        if (o->count() > 0) flags[key] = values[cmd.name][key];
      }
      auto env = environment_overrides();
      if (config_path.empty() && env.contains("config")) config_path = env.at("config");
      const auto file = restrict_file(load_config_file(config_path), all_keys, cmd.specs);
      const RunConfig cfg = RunConfig::resolve(cmd.specs, flags, file, restrict_env(env, all_keys, cmd.specs));
      const json result = cmd.run(cfg);
      std::cout << result.dump(2) << std::endl;
      return kExitOk;
    } catch (const Error& e) {
      std::cerr << "valgate " << cmd.name << ": " << e.what() << "\n";
      return exit_code_for(e);
    } catch (const fs::filesystem_error& e) {
      std::cerr << "valgate " << cmd.name << ": " << e.what() << "\n";
      return kExitData;
    } catch (const std::exception& e) {
      std::cerr << "valgate " << cmd.name << ": internal error: " << e.what() << "\n";
      return kExitInternal;
    }
  }
  return kExitConfig;
}
