#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "stdemand/checkpoint.hpp"
#include "stdemand/evaluation.hpp"
#include "stdemand/gradcheck.hpp"
#include "stdemand/kv_config.hpp"

namespace fs = std::filesystem;
using namespace stdemand;

namespace {

// Keys accepted in the config file; every one can also be given as --key (underscores or hyphens).
const std::vector<std::string> kModelKeys = {"window",         "horizon",          "mp_layers",       "ffn_layers",
                                             "hidden",         "node_dim",         "graph_dim",       "diffusion_hops",
                                             "neighbor_order", "functional_top_k", "dense_functional_limit",
                                             "layer_order"};
const std::vector<std::string> kTrainKeys = {"epochs", "patience",   "mask_count", "mask_mode", "loss",     "seed",
                                             "workers", "val_stride", "lr",         "beta1",     "beta2",    "adam_eps",
                                             "clip_norm"};
const std::vector<std::string> kRunKeys = {"n_new", "new_regions", "eval_stride", "sigma_km", "epsilon", "radius_km"};

struct Settings {
  std::string config_file;
  std::map<std::string, std::string> flag_values;
  bool no_encoding = false;
  bool no_llm_graph = false;
  bool no_adj_graph = false;
  bool no_mp = false;
  bool no_adj_mp = false;
};

void add_keys(CLI::App* app, Settings& s, const std::vector<std::string>& keys) {
  for (const auto& key : keys) {
    std::string dashed = key;
    std::replace(dashed.begin(), dashed.end(), '_', '-');
    std::string names = "--" + dashed;
    if (dashed != key) names += ",--" + key;
    app->add_option_function<std::string>(names, [&s, key](const std::string& v) { s.flag_values[key] = v; },
                                          "overrides `" + key + "` from the config file");
  }
}

void add_model_flags(CLI::App* app, Settings& s) {
  app->add_option("--config", s.config_file, "key=value config file");
  add_keys(app, s, kModelKeys);
  add_keys(app, s, kTrainKeys);
  add_keys(app, s, kRunKeys);
  app->add_flag("--no-encoding", s.no_encoding, "drop the location encodings");
  app->add_flag("--no-llm-graph", s.no_llm_graph, "drop the encoding-derived functional graph");
  app->add_flag("--no-adj-graph", s.no_adj_graph, "drop the adjacency graph");
  app->add_flag("--no-mp", s.no_mp, "skip message passing and diffusion");
  app->add_flag("--no-adj-mp", s.no_adj_mp, "skip only the adjacency pathway");
}

KeyValues merged(const Settings& s) {
  KeyValues kv;
  if (!s.config_file.empty()) kv = read_key_values(s.config_file);
  std::set<std::string> known;
  for (const auto* keys : {&kModelKeys, &kTrainKeys, &kRunKeys}) known.insert(keys->begin(), keys->end());
  for (const auto& [k, v] : kv) {
    if (!known.contains(k)) throw ConfigError("unknown config key " + k);
  }
  for (const auto& [k, v] : s.flag_values) kv[k] = v;
  return kv;
}

ForwardConfig model_config(const Settings& s, const KeyValues& kv) {
  ForwardConfig c;
  try {
    c = ForwardConfig::from_map(kv);
  } catch (const std::logic_error&) {
    throw ConfigError("malformed number in the model configuration");
  }
  if (s.no_encoding) c.use_encoding = false;
  if (s.no_llm_graph) c.use_llm_graph = false;
  if (s.no_adj_graph || s.no_adj_mp) c.use_adjacency_graph = false;
  if (s.no_mp) c.skip_message_passing = true;
  return c;
}

double number(const KeyValues& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (const std::logic_error&) {
    throw ConfigError("bad number for " + key);
  }
}

std::vector<std::string> split_ids(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text + ",") {
    if (ch == ',' || ch == ' ' || ch == ';') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  return out;
}

ExperimentSpec experiment(const Settings& s, const KeyValues& kv) {
  ExperimentSpec spec;
  spec.model = model_config(s, kv);
  spec.train.apply(kv);
  spec.seed = spec.train.seed;
  spec.n_new_regions = static_cast<std::size_t>(number(kv, "n_new", 0));
  spec.eval_stride = static_cast<std::size_t>(number(kv, "eval_stride", 0));
  if (auto it = kv.find("new_regions"); it != kv.end()) spec.new_region_ids = split_ids(it->second);
  return spec;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) out += (out.empty() ? "" : " ") + id;
  return out;
}

void report(const ExperimentResult& result, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_results_csv(result, out_dir / "results.csv");
  const auto table = format_results_table(result);
  std::ofstream(out_dir / "results.txt") << table;
  std::cout << table;
}

std::int64_t parse_time(const std::string& text) {
  const bool digits = !text.empty() && std::all_of(text.begin() + (text[0] == '-' ? 1 : 0), text.end(),
                                                   [](unsigned char c) { return std::isdigit(c); });
  if (digits) return std::stoll(text);
  return parse_iso8601(text);
}

int run_ingest(const fs::path& orders_path, const fs::path& regions_path, const fs::path& out, std::uint32_t interval,
               const std::string& t0_text, std::size_t steps, double radius, double sigma_km, double epsilon,
               const std::string& encodings_path) {
  const auto orders = read_orders_csv(orders_path);
  auto regions = read_regions_csv(regions_path, radius);
  std::int64_t t0 = 0;
  if (!t0_text.empty()) {
    t0 = parse_time(t0_text);
  } else if (!orders.empty()) {
    const auto first = std::min_element(orders.begin(), orders.end(),
                                        [](const auto& a, const auto& b) { return a.pickup_time < b.pickup_time; });
    t0 = first->pickup_time - (((first->pickup_time % interval) + interval) % interval);
  }
  if (steps == 0) {
    std::int64_t last = t0;
    for (const auto& o : orders) last = std::max(last, o.pickup_time);
    steps = static_cast<std::size_t>((last - t0) / interval + 1);
  }
  const auto agg = aggregate_orders(orders, regions, interval, t0, steps);
  fs::create_directories(out);
  write_demand(agg.demand, out / "demand.idt");
  write_regions_csv(regions, out / "regions.csv");
  write_graph(make_graph(regions.centers, sigma_km, epsilon), out / "graph.igr");
  if (!encodings_path.empty()) {
    write_encodings(read_encodings(fs::path(encodings_path)).reorder(regions.region_ids), out / "encodings.iemb");
  }
  std::cout << "orders " << orders.size() << ", regions " << regions.size() << ", steps " << steps << ", dropped "
            << agg.dropped.total() << " (outside window " << agg.dropped.outside_window << ", outside radius "
            << agg.dropped.outside_radius << ")\n";
  return 0;
}

int run_train(const Settings& s, const fs::path& data_dir, const fs::path& out, const std::string& state,
              const std::string& resume) {
  const auto kv = merged(s);
  const auto spec = experiment(s, kv);
  const auto data = Dataset::load(data_dir, number(kv, "radius_km", 1.0));
  auto setup = prepare_joint(data, spec);
  Trainer trainer(setup.config, spec.train, setup.data, init_parameters<float>(setup.config, spec.train.seed));
  if (!resume.empty()) trainer.load_state(resume);
  fs::create_directories(out);
  trainer.on_epoch = [&](const EpochLog& e) {
    std::cout << "epoch " << e.epoch << " train_loss " << e.train_loss << " val_mae " << e.val_mae << " val_rmse "
              << e.val_rmse << " (" << std::fixed << std::setprecision(1) << e.seconds << "s)" << std::defaultfloat
              << std::endl;
    if (!state.empty()) trainer.save_state(state);
  };
  try {
    trainer.run();
  } catch (const TrainingDiverged& e) {
    ModelBundle{setup.config, setup.scaler, e.last_good}.save(out / "last_good.ickp");
    std::cerr << "last good parameters written to " << (out / "last_good.ickp") << "\n";
    throw;
  }
  write_metric_log(trainer.log(), out / "metrics.csv");
  auto extra = spec.train.to_map();
  extra["new_regions"] = join_ids(setup.new_region_ids);
  ModelBundle{setup.config, setup.scaler, trainer.best()}.save(out / "model.ickp", extra);
  std::cout << "best epoch " << trainer.best_epoch() << ", checkpoint " << (out / "model.ickp") << "\n";
  return 0;
}

int run_eval(const Settings& s, const fs::path& data_dir, const fs::path& checkpoint, const fs::path& out) {
  const auto kv = merged(s);
  const auto data = Dataset::load(data_dir, number(kv, "radius_km", 1.0));
  const auto bundle = ModelBundle::load(checkpoint);
  std::vector<std::string> ids;
  if (auto it = kv.find("new_regions"); it != kv.end()) {
    ids = split_ids(it->second);
  } else {
    const auto side = read_key_values(sidecar_path(checkpoint));
    if (auto jt = side.find("new_regions"); jt != side.end()) ids = split_ids(jt->second);
  }
  const auto split = chronological_split(data.demand.n_steps);
  ExperimentResult result;
  result.new_region_ids = ids;
  result.rows = evaluate_forecasts(bundle, data, split.test, data.indices_of(ids),
                                   static_cast<std::size_t>(number(kv, "eval_stride", 0)), split.train, "joint");
  report(result, out);
  return 0;
}

int run_krige(const Settings& s, const fs::path& data_dir, const fs::path& out) {
  const auto kv = merged(s);
  const auto spec = experiment(s, kv);
  const auto data = Dataset::load(data_dir, number(kv, "radius_km", 1.0));
  const auto result = run_joint(data, spec);
  fs::create_directories(out);
  write_metric_log(result.log, out / "metrics.csv");
  auto extra = spec.train.to_map();
  extra["new_regions"] = join_ids(result.new_region_ids);
  result.model->save(out / "model.ickp", extra);
  report(result, out);
  return 0;
}

int run_transfer_cmd(const Settings& s, const fs::path& checkpoint, const fs::path& target_dir,
                     const std::string& scenario, const fs::path& out) {
  const auto kv = merged(s);
  auto spec = experiment(s, kv);
  spec.scenario = parse_scenario(scenario);
  spec.checkpoint = checkpoint;
  if (spec.scenario == Scenario::joint) throw ConfigError("transfer needs transfer-full or transfer-partial");
  const auto before = file_hash(checkpoint);
  auto bundle = ModelBundle::load(checkpoint);
  if (s.no_mp) bundle.config.skip_message_passing = true;
  if (s.no_adj_mp) bundle.config.use_adjacency_graph = false;
  bundle.config.validate();
  const auto target = Dataset::load(target_dir, number(kv, "radius_km", 1.0));
  const auto result = run_transfer(bundle, target, spec);
  const auto after = file_hash(checkpoint);
  report(result, out);
  std::cout << "checkpoint hash " << std::hex << before << (before == after ? " unchanged" : " CHANGED") << std::dec
            << "\n";
  if (before != after) throw NumericalError("checkpoint changed during inference");
  return 0;
}

int run_gradcheck(std::uint64_t seed, double step, double tol) {
  const auto micro = make_micro_instance(seed);
  bool ok = true;
  for (const auto& c : gradient_check(micro, step)) {
    const bool pass = c.max_rel_error < tol;
    ok = ok && pass;
    std::cout << std::left << std::setw(16) << c.name << std::right << std::setw(6) << c.coordinates
              << "  max rel " << std::scientific << std::setprecision(2) << c.max_rel_error << "  max abs "
              << c.max_abs_error << std::defaultfloat << (pass ? "  ok" : "  FAIL") << "\n";
  }
  if (!ok) throw NumericalError("gradient check failed");
  return 0;
}

int run_export(const std::string& encodings, const std::string& data_dir, const std::string& checkpoint,
               const std::string& out) {
  EncodingTable table;
  if (!encodings.empty()) {
    table = read_encodings(fs::path(encodings));
  } else if (!data_dir.empty()) {
    table = read_encodings(fs::path(data_dir) / "encodings.iemb");
  } else {
    throw ConfigError("export-embeddings needs --encodings or --data");
  }
  std::optional<ModelBundle> bundle;
  if (!checkpoint.empty()) bundle = ModelBundle::load(checkpoint);
  if (out.empty() || out == "-") {
    export_encodings(table, bundle ? &*bundle : nullptr, std::cout);
  } else {
    std::ofstream f(out);
    if (!f) throw DataError("cannot write " + out);
    export_encodings(table, bundle ? &*bundle : nullptr, f);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inductive spatiotemporal demand estimation and forecasting"};
  app.require_subcommand(1);
  Settings settings;

  auto* ingest = app.add_subcommand("ingest", "aggregate an order log into a city directory");
  std::string orders, regions, out_dir, t0_text, encodings;
  std::uint32_t interval = 3600;
  std::size_t steps = 0;
  double radius = 1.0, sigma_km = 5.0, epsilon = 0.1;
  ingest->add_option("--orders", orders, "orders CSV")->required();
  ingest->add_option("--regions", regions, "regions CSV")->required();
  ingest->add_option("--out", out_dir, "output directory")->required();
  ingest->add_option("--interval", interval, "bin width in seconds");
  ingest->add_option("--t0", t0_text, "start (epoch seconds or ISO-8601); default floors the first order");
  ingest->add_option("--steps", steps, "number of bins; default covers the last order");
  ingest->add_option("--radius-km", radius, "assignment radius");
  ingest->add_option("--sigma-km", sigma_km, "adjacency kernel width");
  ingest->add_option("--epsilon", epsilon, "adjacency threshold");
  ingest->add_option("--encodings", encodings, "IEMB file to align with the regions");

  auto* synth = app.add_subcommand("synth", "write a seeded synthetic city");
  std::size_t nodes = 30, synth_steps = 2000, enc_dim = 64;
  std::uint64_t synth_seed = 0;
  synth->add_option("--nodes", nodes);
  synth->add_option("--steps", synth_steps);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--encoding-dim", enc_dim);
  synth->add_option("--out", out_dir)->required();

  auto* train = app.add_subcommand("train", "train on the observed regions of a city");
  std::string data_dir, state, resume;
  train->add_option("--data", data_dir, "city directory")->required();
  train->add_option("--out", out_dir)->required();
  train->add_option("--state", state, "write resumable training state here after every epoch");
  train->add_option("--resume", resume, "continue from a saved training state");
  add_model_flags(train, settings);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a city's test split");
  std::string checkpoint;
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--out", out_dir)->required();
  add_model_flags(eval, settings);

  auto* krige = app.add_subcommand("krige", "train and evaluate joint estimation and forecasting");
  krige->add_option("--data", data_dir)->required();
  krige->add_option("--out", out_dir)->required();
  add_model_flags(krige, settings);

  auto* transfer = app.add_subcommand("transfer", "inference-only evaluation on another city");
  std::string target, scenario = "transfer-full";
  transfer->add_option("--checkpoint", checkpoint)->required();
  transfer->add_option("--target", target)->required();
  transfer->add_option("--scenario", scenario)->check(CLI::IsMember({"transfer-full", "transfer-partial"}));
  transfer->add_option("--out", out_dir)->required();
  add_model_flags(transfer, settings);

  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic gradients with finite differences");
  std::uint64_t gc_seed = 7;
  double gc_step = 1e-4, gc_tol = 1e-4;
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_option("--step", gc_step);
  gradcheck->add_option("--tol", gc_tol);

  auto* exporter = app.add_subcommand("export-embeddings", "write node embeddings as TSV");
  std::string out_file;
  exporter->add_option("--encodings", encodings, "IEMB file");
  exporter->add_option("--data", data_dir, "city directory");
  exporter->add_option("--checkpoint", checkpoint, "apply the trained probe and normalization");
  exporter->add_option("--out", out_file, "TSV path, '-' for stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*ingest) {
      return run_ingest(orders, regions, out_dir, interval, t0_text, steps, radius, sigma_km, epsilon, encodings);
    }
    if (*synth) {
      CityOptions opt;
      opt.n_steps = synth_steps;
      opt.encoding_dim = enc_dim;
      make_city(nodes, synth_seed, opt).dataset().save(out_dir);
      std::cout << "wrote synthetic city (" << nodes << " regions, " << synth_steps << " steps) to " << out_dir << "\n";
      return 0;
    }
    if (*train) return run_train(settings, data_dir, out_dir, state, resume);
    if (*eval) return run_eval(settings, data_dir, checkpoint, out_dir);
    if (*krige) return run_krige(settings, data_dir, out_dir);
    if (*transfer) return run_transfer_cmd(settings, checkpoint, target, scenario, out_dir);
    if (*gradcheck) return run_gradcheck(gc_seed, gc_step, gc_tol);
    if (*exporter) return run_export(encodings, data_dir, checkpoint, out_file);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
