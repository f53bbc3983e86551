#include "octloc/cli.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "octloc/config.hpp"
#include "octloc/io.hpp"
#include "octloc/retrieval.hpp"

namespace octloc {

namespace {

struct CommonFlags {
  std::string config_path;
  std::string weights_path;
  std::vector<std::string> inputs;
  std::string output;
  std::optional<uint64_t> seed;
  std::optional<std::string> coord;
  std::optional<std::string> pooling;
  bool disable_relay = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "config JSON path");
  cmd->add_option("--weights", f.weights_path, "weight file path");
  cmd->add_option("--input", f.inputs, "input path (repeatable)");
  cmd->add_option("--output", f.output, "output path");
  cmd->add_option("--seed", f.seed, "override the config seed");
  cmd->add_option("--coord", f.coord, "coordinate mode override")
      ->check(CLI::IsMember({"cartesian", "cylindrical"}));
  cmd->add_option("--pooling", f.pooling, "pooling head override")
      ->check(CLI::IsMember({"pyramid-attn", "gem", "pyramid-gem"}));
  cmd->add_flag("--disable-relay-tokens", f.disable_relay,
                "run without relay tokens");
}

// Weight files carry their config, so --config is optional when --weights is
// given; explicit flags override either source.
Config resolve_config(const CommonFlags& f, const LoadedWeights* weights) {
  Config cfg;
  if (!f.config_path.empty())
    cfg = Config::from_json_file(f.config_path);
  else if (weights)
    cfg = Config::from_json_text(weights->config_json);
  if (f.seed) cfg.seed = *f.seed;
  if (f.coord) {
    const CoordMode m = *f.coord == "cartesian" ? CoordMode::cartesian
                                                : CoordMode::cylindrical;
    cfg.model.coord_mode = m;
    cfg.region.mode = m;
  }
  if (f.pooling) {
    if (*f.pooling == "gem")
      cfg.model.pooling = PoolingMode::gem;
    else if (*f.pooling == "pyramid-gem")
      cfg.model.pooling = PoolingMode::pyramid_gem;
    else
      cfg.model.pooling = PoolingMode::pyramid_attn;
  }
  if (f.disable_relay) cfg.model.relay_tokens = false;
  cfg.validate();
  return cfg;
}

ModelParams resolve_params(const CommonFlags& f, const Config& cfg,
                           const LoadedWeights* weights) {
  if (weights) return params_from_weights(*weights, cfg.model);
  return ModelParams::init(cfg.model, derive_seed(cfg.seed, 2));
}

PointCloud load_any_cloud(const std::string& path) {
  if (path.size() > 4 && path.compare(path.size() - 4, 4, ".csv") == 0)
    return load_cloud_csv(path);
  return load_cloud(path);
}

int cmd_synth(const CommonFlags& f) {
  Config cfg = resolve_config(f, nullptr);
  if (f.output.empty()) throw ConfigError("synth: --output directory required");
  std::filesystem::create_directories(f.output);
  SyntheticWorld world = make_world(cfg.world, derive_seed(cfg.seed, 1));
  for (std::size_t i = 0; i < world.poses.size(); ++i) {
    PointCloud pc = render_view(world, i, cfg.training.profile);
    save_cloud(f.output + "/" + pc.source_id + ".hopc", pc);
  }
  std::cout << "wrote " << world.poses.size() << " clouds to " << f.output
            << "\n";
  return 0;
}

int cmd_embed(const CommonFlags& f) {
  std::optional<LoadedWeights> weights;
  if (!f.weights_path.empty()) weights = load_weights(f.weights_path);
  Config cfg = resolve_config(f, weights ? &*weights : nullptr);
  ModelParams params = resolve_params(f, cfg, weights ? &*weights : nullptr);
  if (f.inputs.empty()) throw ConfigError("embed: at least one --input");
  if (f.output.empty()) throw ConfigError("embed: --output required");

  std::vector<DescriptorRecord> records;
  for (std::size_t i = 0; i < f.inputs.size(); ++i) {
    PointCloud pc = load_any_cloud(f.inputs[i]);
    EmbedResult res = forward(pc, cfg.region, cfg.model, params);
    DescriptorRecord rec;
    rec.id = i;
    rec.source_id = pc.source_id.empty()
                        ? std::filesystem::path(f.inputs[i]).stem().string()
                        : pc.source_id;
    rec.pose = pc.pose;
    rec.descriptor = res.descriptor.values();
    records.push_back(std::move(rec));
  }
  save_descriptors(f.output, records);
  std::cout << "embedded " << records.size() << " clouds -> " << f.output
            << "\n";
  return 0;
}

int cmd_train(const CommonFlags& f) {
  Config cfg = resolve_config(f, nullptr);
  if (f.output.empty()) throw ConfigError("train: --output required");
  TrainConfig tc = cfg.training;
  tc.metrics_path = f.output + ".metrics.jsonl";
  TrainResult result =
      train_synthetic(cfg.model, cfg.region, cfg.world, tc, cfg.seed);
  save_weights(f.output, cfg.to_canonical_json(), result.params);
  std::cout << "trained " << tc.steps << " steps, final AR@1 "
            << result.final_recall_at_1 << ", MRR " << result.final_mrr
            << "\nweights -> " << f.output << "\n";
  return 0;
}

int cmd_eval(const CommonFlags& f) {
  Config cfg = resolve_config(f, nullptr);
  if (f.inputs.size() != 2)
    throw ConfigError("eval: --input database.hodc --input queries.hodc");
  if (f.output.empty()) throw ConfigError("eval: --output required");

  DescriptorDatabase db;
  for (const auto& rec : load_descriptors(f.inputs[0])) {
    DbEntry e;
    e.id = rec.source_id.empty() ? std::to_string(rec.id) : rec.source_id;
    e.pose = rec.pose;
    e.descriptor = rec.descriptor;
    db.add(std::move(e));
  }
  std::vector<DbEntry> queries;
  for (const auto& rec : load_descriptors(f.inputs[1])) {
    DbEntry e;
    e.id = rec.source_id.empty() ? std::to_string(rec.id) : rec.source_id;
    e.pose = rec.pose;
    e.descriptor = rec.descriptor;
    queries.push_back(std::move(e));
  }
  EvalReport rep = evaluate(db, queries, cfg.training.eval_radius);
  std::ofstream out(f.output);
  if (!out) throw DataError("cannot write " + f.output);
  out << rep.to_json();
  std::cout << "AR@1 " << rep.ar1 << "  AR@1% " << rep.ar1p << "  MRR "
            << rep.mrr << "  (" << rep.excluded << " excluded)\n";
  return 0;
}

int cmd_dump(const CommonFlags& f, const std::string& what) {
  std::optional<LoadedWeights> weights;
  if (!f.weights_path.empty()) weights = load_weights(f.weights_path);
  Config cfg = resolve_config(f, weights ? &*weights : nullptr);
  if (f.inputs.size() != 1) throw ConfigError("dump: exactly one --input");
  if (f.output.empty()) throw ConfigError("dump: --output required");
  PointCloud pc = load_any_cloud(f.inputs[0]);

  if (what == "octree") {
    OctreePyramid pyr =
        build_pyramid(pc, cfg.region, cfg.model.depth, cfg.model.levels);
    save_octree_dump(f.output, pyr);
    return 0;
  }
  if (what == "windows") {
    OctreePyramid pyr =
        build_pyramid(pc, cfg.region, cfg.model.depth, cfg.model.levels);
    WindowPartition part = serialize(pyr.levels[0], cfg.model.window);
    save_window_dump(f.output, pyr.levels[0], part);
    return 0;
  }
  if (what == "attention") {
    ModelParams params = resolve_params(f, cfg, weights ? &*weights : nullptr);
    AttnSink sink;
    forward(pc, cfg.region, cfg.model, params, &sink);
    save_attention_dumps(f.output, sink.records);
    std::cout << "wrote " << sink.records.size() << " attention dumps\n";
    return 0;
  }
  throw ConfigError("dump: unknown kind \"" + what +
                    "\" (octree, windows, attention)");
}

int cmd_flops(const CommonFlags& f) {
  Config cfg = resolve_config(f, nullptr);
  ModelParams params = resolve_params(f, cfg, nullptr);
  PointCloud pc;
  if (!f.inputs.empty()) {
    if (f.inputs.size() != 1) throw ConfigError("flops: at most one --input");
    pc = load_any_cloud(f.inputs[0]);
  } else {
    SyntheticWorld world = make_world(cfg.world, derive_seed(cfg.seed, 1));
    pc = render_view(world, 0, cfg.training.profile);
  }

  FlopCounter counter;
  EmbedResult res;
  {
    FlopCounter::Activation act(counter);
    res = forward(pc, cfg.region, cfg.model, params);
  }
  std::cout << "MACs by scope:\n";
  for (const auto& [scope, macs] : counter.by_scope())
    std::cout << "  " << scope << "  " << macs << "\n";
  std::cout << "total  " << counter.total() << "\n\n";

  std::vector<uint32_t> windows;
  for (const auto& part : res.partitions)
    windows.push_back(static_cast<uint32_t>(part.windows));
  const uint64_t predicted = expected_block_attention_macs(cfg.model, windows);
  std::cout << "attention MACs per block: predicted " << predicted << "\n";
  bool all_zero = true;
  for (uint32_t m = 0; m < cfg.model.blocks; ++m) {
    const std::string prefix = "blk" + std::to_string(m) + "/";
    uint64_t measured = 0;
    for (const auto& [scope, macs] : counter.by_scope())
      if (scope.rfind(prefix, 0) == 0 &&
          scope.size() >= 5 && scope.compare(scope.size() - 5, 5, "/attn") == 0)
        measured += macs;
    const int64_t diff = static_cast<int64_t>(measured) -
                         static_cast<int64_t>(predicted);
    if (diff != 0) all_zero = false;
    std::cout << "  block " << m << ": measured " << measured << "  diff "
              << diff << "\n";
  }
  std::cout << (all_zero ? "difference 0 for every block\n"
                         : "MISMATCH against closed form\n");
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"hierarchical octree transformer for lidar place recognition"};
  app.require_subcommand(1);

  CommonFlags synth_f, embed_f, train_f, eval_f, dump_f, flops_f;
  std::string dump_what;

  add_common(app.add_subcommand("synth", "render synthetic submaps"),
             synth_f);
  add_common(app.add_subcommand("embed", "embed clouds into descriptors"),
             embed_f);
  add_common(app.add_subcommand("train", "train on the synthetic world"),
             train_f);
  add_common(app.add_subcommand("eval", "evaluate retrieval metrics"),
             eval_f);
  CLI::App* dump = app.add_subcommand("dump", "write inspection dumps");
  dump->add_option("what", dump_what, "octree | windows | attention")
      ->required();
  add_common(dump, dump_f);
  add_common(app.add_subcommand("flops", "report attention MAC counts"),
             flops_f);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("synth")) return cmd_synth(synth_f);
    if (app.got_subcommand("embed")) return cmd_embed(embed_f);
    if (app.got_subcommand("train")) return cmd_train(train_f);
    if (app.got_subcommand("eval")) return cmd_eval(eval_f);
    if (app.got_subcommand("dump")) return cmd_dump(dump_f, dump_what);
    if (app.got_subcommand("flops")) return cmd_flops(flops_f);
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace octloc
