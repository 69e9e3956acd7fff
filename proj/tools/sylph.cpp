#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "sylph/gradcheck_suite.hpp"
#include "sylph/sylph.hpp"

using namespace sylph;
namespace fs = std::filesystem;

namespace {

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path, e.byte > 0 ? e.byte - 1 : 0, e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

void set_path(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key.path=value, got " + assignment);
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  nlohmann::json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

/// Precedence: flags > SYLPH_SEED > config file > checkpoint config > defaults.
struct ConfigOptions {
  std::string path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--config", path, "JSON run config");
    app->add_option("--set", sets, "override a config field, e.g. train.meta.steps=500")->take_all();
    app->add_option("--seed", seed, "run seed");
  }

  RunConfig resolve(const nlohmann::json& fallback = nlohmann::json::object()) const {
    nlohmann::json j = path.empty() ? fallback : read_json_file(path);
    for (const auto& s : sets) set_path(j, s);
    RunConfig cfg = parse_run_config(j);
    apply_seed_env(cfg);
    if (seed) cfg.seed = *seed;
    return cfg;
  }
};

struct Checkpoint {
  Model<float> model;
  nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  Checkpoint c;
  c.model = load_model<float>(path, &c.meta);
  return c;
}

nlohmann::json checkpoint_config(const nlohmann::json& meta) {
  return meta.contains("config") ? meta.at("config") : nlohmann::json::object();
}

std::string resolve_data(const std::string& flag, const RunConfig& cfg, const nlohmann::json& meta = {}) {
  if (!flag.empty()) return flag;
  if (!cfg.paths.data.empty()) return cfg.paths.data;
  if (meta.is_object() && meta.contains("data")) return meta.at("data").get<std::string>();
  throw std::invalid_argument("no dataset given: pass --data or set paths.data");
}

std::vector<int> parse_class_list(const std::string& spec, const Dataset& data) {
  if (spec == "all") return ClassSplit::of(data).all();
  if (spec == "base") return data.base_classes;
  if (spec == "novel") return data.novel_classes;
  std::vector<int> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int id = -1;
    try {
      id = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || id < 0 || id >= data.spec.n_classes) {
      throw std::invalid_argument("--classes: unknown class '" + item + "'");
    }
    out.push_back(id);
  }
  if (out.empty()) throw std::invalid_argument("--classes: empty list");
  return out;
}

struct RunDir {
  fs::path root;

  explicit RunDir(const std::string& out) : root(out) {
    for (const char* d : {"checkpoints", "logs", "reports"}) fs::create_directories(root / d);
  }
  void echo(const RunConfig& cfg) const { write_json(root / "config.json", to_json_config(cfg)); }
  std::string log(const std::string& stage) const { return (root / "logs" / (stage + ".jsonl")).string(); }
  std::string checkpoint(const std::string& name) const { return (root / "checkpoints" / (name + ".bin")).string(); }
  fs::path report(const std::string& name, const char* ext) const { return root / "reports" / (name + ext); }
};

nlohmann::json stage_json(const StageResult& s) {
  return {{"steps", s.log.size()},
          {"seconds", s.seconds},
          {"rejected_steps", s.rejected_steps},
          {"max_grad_norm", s.max_grad_norm},
          {"grad_norm_finite", s.grad_norm_finite},
          {"final_loss", s.log.empty() ? 0.0 : s.log.back().loss_total}};
}

template <class F>
StageResult guarded_stage(Model<float>& model, const RunDir& dir, const nlohmann::json& meta, F&& run) {
  try {
    return run();
  } catch (const TrainingDiverged& e) {
    model.params.load_arrays(e.last_good());
    auto m = meta;
    m["diverged_at_step"] = e.step();
    save_model(dir.checkpoint("last_good"), model, m);
    throw;
  }
}

void progress(const std::string& what) { std::cerr << nlohmann::json{{"progress", what}}.dump() << std::endl; }

// ------------------------------------------------------------------ commands

void cmd_gen_data(const ConfigOptions& co, const std::string& out) {
  const auto cfg = co.resolve();
  const Dataset ds = generate(cfg.dataset);
  write_dataset(out, ds, class_table(cfg.dataset));
  write_json(fs::path(out) / "config.json", to_json_config(cfg));
  std::cout << nlohmann::json{{"out", out},
                              {"train_images", ds.train.size()},
                              {"eval_images", ds.eval.size()},
                              {"base_classes", ds.base_classes.size()},
                              {"novel_classes", ds.novel_classes.size()}}
                   .dump()
            << "\n";
}

void cmd_pretrain(const ConfigOptions& co, const std::string& data_flag, const std::string& out) {
  auto cfg = co.resolve();
  const auto data_dir = resolve_data(data_flag, cfg);
  const Dataset data = load_dataset(data_dir);
  cfg.paths.data = fs::absolute(data_dir).string();
  RunDir dir(out);
  dir.echo(cfg);
  auto model = make_model<float>(cfg.detector, cfg.hypernet, data.base_classes, cfg.seed);
  nlohmann::json meta{{"stage", "pretrain"}, {"config", to_json_config(cfg)}, {"data", cfg.paths.data},
                      {"classes", data.base_classes}, {"seed", cfg.seed}};
  JsonlLog log(dir.log("pretrain"));
  PretrainOptions opts;
  opts.classes = data.base_classes;
  opts.seed = cfg.seed;
  const auto res = guarded_stage(model, dir, meta, [&] { return pretrain(model, data, cfg.train, opts, std::ref(log)); });
  meta["result"] = stage_json(res);
  const auto ckpt = dir.checkpoint("pretrain");
  save_model(ckpt, model, meta);
  std::cout << nlohmann::json{{"checkpoint", ckpt}, {"result", meta["result"]}}.dump() << "\n";
}

void cmd_meta_train(const ConfigOptions& co, const std::string& from, const std::string& data_flag,
                    const std::string& recipe_name, const std::string& out) {
  auto ck = load_checkpoint(from);
  auto cfg = co.resolve(checkpoint_config(ck.meta));
  const auto data_dir = resolve_data(data_flag, cfg, ck.meta);
  const Dataset data = load_dataset(data_dir);
  cfg.paths.data = fs::absolute(data_dir).string();
  const Recipe recipe = parse_recipe(recipe_name);
  RunDir dir(out);
  dir.echo(cfg);
  reset_hypernet(ck.model, cfg.hypernet, cfg.seed);
  nlohmann::json meta{{"stage", "meta-train"}, {"config", to_json_config(cfg)}, {"data", cfg.paths.data},
                      {"recipe", to_string(recipe)}, {"from", fs::absolute(from).string()}, {"seed", cfg.seed}};
  JsonlLog log(dir.log("meta"));
  MetaOptions opts;
  opts.recipe = recipe;
  opts.seed = cfg.seed;
  opts.classes = recipe == Recipe::joint ? ClassSplit::of(data).all() : data.base_classes;
  const auto res =
      guarded_stage(ck.model, dir, meta, [&] { return meta_train(ck.model, data, cfg.train, opts, std::ref(log)); });
  meta["result"] = stage_json(res);
  const auto ckpt = dir.checkpoint("meta");
  save_model(ckpt, ck.model, meta);
  std::cout << nlohmann::json{{"checkpoint", ckpt}, {"result", meta["result"]}}.dump() << "\n";
}

void cmd_enroll(const std::string& from, const std::string& data_flag, const std::string& classes,
                std::optional<std::size_t> shots, const std::string& mode, std::optional<std::uint64_t> seed,
                const std::string& out) {
  const auto ck = load_checkpoint(from);
  const auto cfg = parse_run_config(checkpoint_config(ck.meta));
  const Dataset data = load_dataset(resolve_data(data_flag, cfg, ck.meta));
  if (mode != "hypernet" && mode != "pretrained") throw std::invalid_argument("--mode must be hypernet or pretrained");
  const auto ids = parse_class_list(classes, data);
  const auto k = shots.value_or(cfg.eval.shots);
  if (k < 1) throw std::invalid_argument("--shots must be >= 1");
  const auto codes = generate_all_codes(ck.model, data, ids, k,
                                        mode == "pretrained" ? CodeMode::pretrained : CodeMode::hypernet,
                                        seed.value_or(cfg.seed));
  for (const auto& w : codes.warnings) std::cerr << nlohmann::json{{"warning", w}}.dump() << "\n";
  save_codebook(out, codes.book);
  std::cout << nlohmann::json{{"codebook", out}, {"classes", codes.book.class_ids()}, {"shots", k}, {"mode", mode}}
                   .dump()
            << "\n";
}

void cmd_eval(const std::string& from, const std::string& codes, const std::string& data_flag,
              const std::string& out) {
  const auto ck = load_checkpoint(from);
  const auto cfg = parse_run_config(checkpoint_config(ck.meta));
  const CodeBook book = load_codebook(codes);
  const Dataset data = load_dataset(resolve_data(data_flag, cfg, ck.meta));
  EvalContext<float> ctx(ck.model, data);
  const auto rep = evaluate(ctx, book, cfg.eval.decode(), ClassSplit::of(data));
  for (const auto& w : rep.warnings) std::cerr << nlohmann::json{{"warning", w}}.dump() << "\n";
  write_json(out, to_json(rep));
  std::cout << nlohmann::json{{"report", out},
                              {"ap", rep.ap},
                              {"ap50", rep.ap50},
                              {"ap_base", rep.ap_base},
                              {"ap_novel", rep.ap_novel},
                              {"ap50_base", rep.ap50_base},
                              {"ap50_novel", rep.ap50_novel}}
                   .dump()
            << "\n";
}

void cmd_incremental(const std::string& from, const std::string& schedule_path, const std::string& data_flag,
                     std::size_t runs, std::optional<std::uint64_t> seed, const std::string& out) {
  if (runs < 1) throw std::invalid_argument("--runs must be >= 1");
  const auto ck = load_checkpoint(from);
  const auto cfg = parse_run_config(checkpoint_config(ck.meta));
  const Dataset data = load_dataset(resolve_data(data_flag, cfg, ck.meta));
  const auto schedule = parse_schedule(read_json_file(schedule_path), data);
  std::vector<std::string> warnings;
  const auto res = incremental_protocol(ck.model, data, schedule, runs, seed.value_or(cfg.seed), cfg.eval.decode(),
                                        &warnings);
  for (const auto& w : warnings) std::cerr << nlohmann::json{{"warning", w}}.dump() << "\n";
  auto j = to_json(res);
  j["schedule"] = {{"initial", schedule.initial}, {"steps", schedule.steps}, {"shots", schedule.shots}};
  write_json(out, j);
  std::cout << nlohmann::json{{"report", out}, {"seed_stats", j["seed_stats"]}}.dump() << "\n";
}

void cmd_ablate(const ConfigOptions& co, const std::string& from, const std::string& grid_path,
                const std::string& data_flag, const std::vector<std::uint64_t>& seeds_flag, const std::string& out) {
  const auto ck = load_checkpoint(from);
  auto cfg = co.resolve(checkpoint_config(ck.meta));
  const auto data_dir = resolve_data(data_flag, cfg, ck.meta);
  const Dataset data = load_dataset(data_dir);
  cfg.paths.data = fs::absolute(data_dir).string();
  const auto rows = parse_grid(read_json_file(grid_path), cfg.hypernet);
  const auto seeds = seeds_flag.empty() ? cfg.eval.seeds : seeds_flag;
  RunDir dir(out);
  dir.echo(cfg);
  const auto res = ablation_grid(ck.model, data, cfg, rows, seeds, [](std::size_t r, std::uint64_t s) {
    progress("row " + std::to_string(r) + " seed " + std::to_string(s));
  });
  write_json(dir.report("ablation", ".json"), to_json(res));
  write_text(dir.report("ablation", ".csv"), ablation_csv(res));
  std::cout << ablation_csv(res);
}

void cmd_sweep(const ConfigOptions& co, const std::string& counts_spec, const std::string& data_flag,
               const std::vector<std::uint64_t>& seeds_flag, const std::string& out) {
  auto cfg = co.resolve();
  std::vector<std::size_t> counts;
  std::stringstream ss(counts_spec);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t used = 0;
    long v = -1;
    try {
      v = std::stol(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || v < 1) throw std::invalid_argument("--counts: not a positive integer: '" + item + "'");
    counts.push_back(static_cast<std::size_t>(v));
  }
  const std::string data_dir = data_flag.empty() ? cfg.paths.data : data_flag;
  const Dataset data = data_dir.empty() ? generate(cfg.dataset) : load_dataset(data_dir);
  validate_counts(counts, data, cfg.train.meta.n_way);
  const auto seeds = seeds_flag.empty() ? cfg.eval.seeds : seeds_flag;
  RunDir dir(out);
  dir.echo(cfg);
  const auto pts = base_count_sweep(data, cfg, counts, seeds, [](std::size_t c, std::uint64_t s) {
    progress("count " + std::to_string(c) + " seed " + std::to_string(s));
  });
  write_json(dir.report("sweep", ".json"), to_json(pts));
  write_text(dir.report("sweep", ".csv"), sweep_csv(pts));
  std::cout << sweep_csv(pts);
}

int cmd_gradcheck(const std::string& op, double tolerance) {
  bool ok = true;
  for (const auto& [name, r] : run_gradchecks(op)) {
    const bool pass = r.passed(tolerance);
    ok &= pass;
    std::cout << name << " max_rel_error=" << r.max_relative_error << " checked=" << r.checked << " "
              << (pass ? "PASS" : "FAIL") << "\n";
  }
  if (!ok) throw std::runtime_error("gradcheck: relative error above " + std::to_string(tolerance));
  return 0;
}

nlohmann::json error_json(const std::exception& e, const std::string& command) {
  nlohmann::json j{{"error", e.what()}, {"command", command}};
  if (const auto* c = dynamic_cast<const ConfigError*>(&e)) j["problems"] = c->problems();
  if (const auto* f = dynamic_cast<const FormatError*>(&e)) {
    j["path"] = f->path();
    j["offset"] = f->offset();
  }
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot detector with hypernetwork-generated class codes"};
  app.require_subcommand(1);

  ConfigOptions gen_co, pre_co, meta_co, ablate_co, sweep_co;
  std::string out, data, from, recipe = "sylph", classes = "all", mode = "hypernet", codes, schedule, grid,
                                counts, op = "all";
  std::optional<std::size_t> shots;
  std::optional<std::uint64_t> seed;
  std::size_t runs = 5;
  std::vector<std::uint64_t> seeds;
  double tolerance = 1e-3;

  auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset");
  gen_co.add(gen);
  gen->add_option("--out", out, "dataset directory")->required();

  auto* pre = app.add_subcommand("pretrain", "batch-train the detector on base classes");
  pre_co.add(pre);
  pre->add_option("--data", data, "dataset directory");
  pre->add_option("--out", out, "run directory")->required();

  auto* meta = app.add_subcommand("meta-train", "episodic hypernetwork training");
  meta_co.add(meta);
  meta->add_option("--from", from, "pretrained checkpoint")->required();
  meta->add_option("--data", data, "dataset directory");
  meta->add_option("--recipe", recipe, "sylph | fa | joint")->check(CLI::IsMember({"sylph", "fa", "joint"}));
  meta->add_option("--out", out, "run directory")->required();

  auto* enr = app.add_subcommand("enroll", "generate class codes into a codebook");
  enr->add_option("--from", from, "checkpoint")->required();
  enr->add_option("--data", data, "dataset directory");
  enr->add_option("--classes", classes, "comma list, all, base or novel");
  enr->add_option("--shots", shots, "support shots per class");
  enr->add_option("--mode", mode, "hypernet | pretrained")->check(CLI::IsMember({"hypernet", "pretrained"}));
  enr->add_option("--seed", seed, "support sampling seed");
  enr->add_option("--out", out, "codebook file")->required();

  auto* ev = app.add_subcommand("eval", "evaluate a codebook on the eval split");
  ev->add_option("--from", from, "checkpoint")->required();
  ev->add_option("--codes", codes, "codebook file")->required();
  ev->add_option("--data", data, "dataset directory");
  ev->add_option("--out", out, "report file")->required();

  auto* inc = app.add_subcommand("incremental", "continuous enrollment protocol");
  inc->add_option("--from", from, "checkpoint")->required();
  inc->add_option("--schedule", schedule, "schedule JSON")->required();
  inc->add_option("--data", data, "dataset directory");
  inc->add_option("--runs", runs, "support sampling runs");
  inc->add_option("--seed", seed, "base seed");
  inc->add_option("--out", out, "report file")->required();

  auto* abl = app.add_subcommand("ablate", "meta-train and evaluate each hypernetwork variant");
  ablate_co.add(abl);
  abl->add_option("--from", from, "pretrained checkpoint")->required();
  abl->add_option("--grid", grid, "grid JSON")->required();
  abl->add_option("--data", data, "dataset directory");
  abl->add_option("--seeds", seeds, "training seeds")->delimiter(',');
  abl->add_option("--out", out, "output directory")->required();

  auto* swp = app.add_subcommand("sweep-base", "pretrain and meta-train per base-class count");
  sweep_co.add(swp);
  swp->add_option("--counts", counts, "comma list of base-class counts")->required();
  swp->add_option("--data", data, "dataset directory (default: generate from config)");
  swp->add_option("--seeds", seeds, "training seeds")->delimiter(',');
  swp->add_option("--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gc->add_option("--op", op, "op name or all");
  gc->add_option("--tolerance", tolerance, "max relative error");

  std::string command = "sylph";
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << nlohmann::json{{"error", e.what()}, {"usage", true}}.dump() << std::endl;
    return 2;
  }

  try {
    if (gen->parsed()) {
      command = "gen-data";
      cmd_gen_data(gen_co, out);
    } else if (pre->parsed()) {
      command = "pretrain";
      cmd_pretrain(pre_co, data, out);
    } else if (meta->parsed()) {
      command = "meta-train";
      cmd_meta_train(meta_co, from, data, recipe, out);
    } else if (enr->parsed()) {
      command = "enroll";
      cmd_enroll(from, data, classes, shots, mode, seed, out);
    } else if (ev->parsed()) {
      command = "eval";
      cmd_eval(from, codes, data, out);
    } else if (inc->parsed()) {
      command = "incremental";
      cmd_incremental(from, schedule, data, runs, seed, out);
    } else if (abl->parsed()) {
      command = "ablate";
      cmd_ablate(ablate_co, from, grid, data, seeds, out);
    } else if (swp->parsed()) {
      command = "sweep-base";
      cmd_sweep(sweep_co, counts, data, seeds, out);
    } else if (gc->parsed()) {
      command = "gradcheck";
      return cmd_gradcheck(op, tolerance);
    }
  } catch (const std::exception& e) {
    std::cerr << error_json(e, command).dump() << std::endl;
    return 1;
  }
  return 0;
}
