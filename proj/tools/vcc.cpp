// vcc: command-line front end. Every subcommand reads a RunConfig (JSON file
// plus overrides), writes its artifacts under paths.out and exits nonzero
// with a one-line JSON error record on stderr when it fails.

#include <cstdio>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "vcc/vcc.hpp"

using namespace vcc;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitBridge = 4;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::bridge: return kExitBridge;
    case ErrorKind::numeric:
    case ErrorKind::training_failure:
    case ErrorKind::zero_margin:
    case ErrorKind::undefined_metric:
    case ErrorKind::insufficient_data:
    case ErrorKind::no_path: return kExitNumeric;
    default: return kExitConfig;
  }
}

void error_record(const std::string& command, std::string_view kind, const std::string& message, int code) {
  Json j{{"error", {{"command", command}, {"kind", kind}, {"message", message}, {"exit_code", code}}}};
  std::cerr << j.dump() << std::endl;
}

// Numeric validation failures that are not library exceptions.
struct ValidationFailure {
  std::string message;
};

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::vector<std::string> shortcuts;  // flag-derived key=value pairs, applied last
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_file, "JSON config with flat dotted keys");
  app->add_option("--set", c.sets, "Override a config key (key=value), repeatable");
}

// Adds a flag that writes `key` when given.
void add_shortcut(CLI::App* app, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&c, key](const std::string& v) { c.shortcuts.push_back(key + "=" + v); }, help);
}

RunConfig resolve(const Common& c) {
  std::vector<std::string> all = c.sets;
  all.insert(all.end(), c.shortcuts.begin(), c.shortcuts.end());
  return load_run_config(c.config_file, all);
}

fs::path out_dir(const RunConfig& cfg) {
  fs::path p = cfg.out_dir.empty() ? fs::path(".") : fs::path(cfg.out_dir);
  fs::create_directories(p);
  return p;
}

std::vector<SceneClass> parse_classes(const std::string& text) {
  if (text.empty()) return default_toy_classes();
  std::vector<SceneClass> out;
  std::stringstream ss(text);
  std::string name;
  while (std::getline(ss, name, ',')) {
    const auto us = name.find('_');
    require(us != std::string::npos, ErrorKind::config, "class names look like color_shape, got " + name);
    try {
      out.push_back({shape_from_string(name.substr(us + 1)), color_from_string(name.substr(0, us))});
    } catch (const Error& e) {
      throw Error(ErrorKind::config, e.what());
    }
  }
  return out;
}

// Model for the configured oracle. The in-core model must outlive the oracle.
struct OracleHandle {
  std::unique_ptr<LayeredModel> model;
  std::unique_ptr<ModelOracle> oracle;
};

OracleHandle open_oracle(const RunConfig& cfg) {
  OracleHandle h;
  if (cfg.oracle == "bridge") {
    h.oracle = std::make_unique<BridgeOracle>(cfg.bridge_command);
    return h;
  }
  require(!cfg.model_path.empty(), ErrorKind::config, "paths.model is required for the in-core oracle");
  h.model = std::make_unique<LayeredModel>(load_model(cfg.model_path));
  h.oracle = std::make_unique<InCoreOracle>(*h.model);
  return h;
}

std::vector<Tensor> class_images(const fs::path& dir, int cls, int limit) {
  const Dataset d = load_dataset(dir);
  std::vector<Tensor> out;
  for (const auto& e : d.entries) {
    if (e.label != cls) continue;
    if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
    out.push_back(load_tensor_image(dir / e.file));
  }
  require(!out.empty(), ErrorKind::invalid_input, "no images of class " + std::to_string(cls) + " in " + dir.string());
  return out;
}

std::vector<Tensor> pool_images(const fs::path& dir, int count) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".png" || e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  require(static_cast<int>(files.size()) >= count, ErrorKind::insufficient_randoms,
          "random pool " + dir.string() + " holds " + std::to_string(files.size()) + " images, need " +
              std::to_string(count));
  std::vector<Tensor> out;
  for (int i = 0; i < count; ++i) out.push_back(load_tensor_image(files[static_cast<std::size_t>(i)]));
  return out;
}

fs::path data_dir(const RunConfig& cfg) {
  require(!cfg.data_dir.empty(), ErrorKind::config, "paths.data is required");
  return cfg.data_dir;
}

// ------------------------------------------------------------ subcommands

void cmd_gen_data(const RunConfig& cfg, const std::string& classes_text, int per_class) {
  require(per_class >= 1, ErrorKind::config, "--per-class must be >= 1");
  const auto classes = parse_classes(classes_text);
  const fs::path out = out_dir(cfg);
  save_dataset(out / "train", classes, generate_dataset(derive_seed(cfg.seed, {0x7A1}), classes, per_class, cfg.jobs));
  save_dataset(out / "target", classes,
               generate_dataset(derive_seed(cfg.seed, {0x7A2}), classes, cfg.image_count, cfg.jobs));
  save_dataset(out / "eval", classes, generate_dataset(derive_seed(cfg.seed, {0x7A3}), classes, cfg.eval_count, cfg.jobs));
  const auto pool = generate_random_pool(derive_seed(cfg.seed, {0x7A4}), classes, cfg.pool_size, cfg.jobs);
  fs::create_directories(out / "random");
  for (std::size_t i = 0; i < pool.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "random_%05zu.png", i);
    save_image(out / "random" / name, to_image(pool[i]));
  }
  std::printf("wrote %zu classes to %s\n", classes.size(), out.string().c_str());
}

void cmd_train(const RunConfig& cfg) {
  const fs::path dir = data_dir(cfg) / "train";
  const Dataset d = load_dataset(dir);
  std::vector<SyntheticScene> scenes;
  for (const auto& e : d.entries) {
    SyntheticScene s = e.annotations;
    s.image = load_tensor_image(dir / e.file);
    scenes.push_back(std::move(s));
  }
  const fs::path out = out_dir(cfg);
  TrainReport rep;
  Json report;
  try {
    const LayeredModel m = train_toy_cnn(scenes, cfg.seed, cfg.train, cfg.jobs, &rep);
    save_model(out / "model.json", m);
    report = {{"accuracy", rep.accuracy}, {"epoch_loss", rep.epoch_loss}, {"model_hash", model_hash(m)}};
  } catch (const TrainingFailure& f) {
    write_json(out / "train_report.json", {{"accuracy", f.accuracy()}, {"epoch_loss", f.epoch_loss()}, {"failed", true}});
    throw;
  }
  write_json(out / "train_report.json", report);
  std::printf("train accuracy %.4f\n", rep.accuracy);
}

void cmd_build(const RunConfig& cfg) {
  auto h = open_oracle(cfg);
  const fs::path data = data_dir(cfg);
  const auto images = class_images(data / "target", cfg.class_label, cfg.image_count);
  const auto pool = pool_images(data / "random", cfg.pool_size);
  SegmentSet segs;
  const VCCGraph g = build_vcc(*h.oracle, images, cfg.taps, cfg.class_label, pool, cfg.vcc, cfg.seed, cfg.jobs, &segs);
  const fs::path out = out_dir(cfg);
  write_vcc_json(out / "vcc.json", g);
  save_segments(out / "segments", segs);
  std::printf("concepts %zu edges %zu class edges %zu\n", g.concept_total(), g.edges.size(), g.class_edges.size());
  for (const auto& w : g.warnings) std::printf("warning: %s\n", w.c_str());
}

Json metrics_json(const VCCGraph& g) {
  Json layers = Json::array();
  for (const auto& m : layer_metrics(g)) {
    Json e{{"layer", m.layer}, {"present", m.present}, {"concept_count", m.concept_count}, {"edge_count", m.edge_count},
           {"branching_factor", m.branching_factor}};
    e["edge_weight_mean"] = m.edge_weight_mean ? Json(*m.edge_weight_mean) : Json(nullptr);
    e["edge_weight_variance"] = m.edge_weight_variance ? Json(*m.edge_weight_variance) : Json(nullptr);
    layers.push_back(std::move(e));
  }
  return {{"layers", layers}};
}

void cmd_metrics(const RunConfig& cfg, const std::string& vcc_file) {
  const VCCGraph g = read_vcc_json(vcc_file);
  validate_graph(g);
  const Json j = metrics_json(g);
  write_json(out_dir(cfg) / "metrics.json", j);
  std::printf("%6s %8s %6s %10s %10s %10s\n", "layer", "concepts", "edges", "branching", "w_mean", "w_var");
  for (const auto& m : layer_metrics(g)) {
    std::printf("%6d %8d %6d %10.4f", m.layer, m.concept_count, m.edge_count, m.branching_factor);
    if (m.edge_weight_mean) std::printf(" %10.4f %10.4f\n", *m.edge_weight_mean, *m.edge_weight_variance);
    else std::printf(" %10s %10s\n", "-", "-");
  }
}

fs::path sibling_segments(const std::string& vcc_file, const std::string& given) {
  return given.empty() ? fs::path(vcc_file).parent_path() / "segments" : fs::path(given);
}

void cmd_aps_ls(const RunConfig& cfg, const std::string& vcc_file, const std::string& seg_dir) {
  const VCCGraph g = read_vcc_json(vcc_file);
  auto h = open_oracle(cfg);
  require(g.model_hash == h.oracle->model_hash(), ErrorKind::config, "graph was built on a different model");
  const SegmentSet segs = load_segments(sibling_segments(vcc_file, seg_dir));
  const ApsLsResult r = aps_ls_correlation(g, *h.oracle, segs, g.class_label);
  Json pts = Json::array();
  for (const auto& p : r.points) pts.push_back({{"concept", p.concept_id}, {"aps", p.aps}, {"ls", p.ls}});
  write_json(out_dir(cfg) / "aps_ls.json", {{"pearson_r", r.pearson_r}, {"points", pts}});
  std::printf("pearson r %.6f over %zu concepts\n", r.pearson_r, r.points.size());
}

void cmd_suppress(const RunConfig& cfg, const std::string& vcc_file) {
  const VCCGraph g = read_vcc_json(vcc_file);
  auto h = open_oracle(cfg);
  const auto eval = class_images(data_dir(cfg) / "eval", g.class_label, cfg.eval_count);
  Json out;
  for (bool random : {false, true}) {
    const auto dirs = suppression_directions(g, *h.oracle, random, cfg.seed);
    const SuppressionCurve c = suppression_curve(*h.oracle, eval, g.class_label, dirs, cfg.eps_grid, cfg.jobs);
    Json chosen = Json::object();
    for (const auto& [l, d] : dirs) chosen[std::to_string(l)] = d;
    out[random ? "random" : "concept"] = {{"eps", c.eps}, {"accuracy", c.accuracy}, {"auc", c.auc}, {"directions", chosen}};
    std::printf("%-8s auc %.4f\n", random ? "random" : "concept", c.auc);
  }
  write_json(out_dir(cfg) / "suppression.json", out);
}

void cmd_rf_report(const RunConfig& cfg) {
  require(!cfg.model_path.empty(), ErrorKind::config, "paths.model is required");
  const LayeredModel m = load_model(cfg.model_path, false);
  const std::vector<int> taps = cfg.taps.empty() ? m.taps() : cfg.taps;
  Json rows = Json::array();
  for (int t : taps) {
    const int rf = receptive_field(m, t);
    rows.push_back({{"layer", t}, {"receptive_field", rf}});
    std::printf("layer %3d  rf %4d\n", t, rf);
  }
  write_json(out_dir(cfg) / "rf.json", {{"taps", rows}});
}

void cmd_compare(const RunConfig& cfg, const std::string& a_file, const std::string& b_file, const std::string& image) {
  const VCCGraph a = read_vcc_json(a_file);
  const VCCGraph b = read_vcc_json(b_file);
  auto h = open_oracle(cfg);
  const ConceptDiff d =
      nearest_concept_diff(a, b, *h.oracle, load_tensor_image(image), cfg.vcc.segment, cfg.seed, cfg.jobs);
  Json as = Json::array();
  for (const auto& s : d.assignments)
    as.push_back({{"segment", s.segment}, {"layer", s.layer}, {"graph", s.graph == 0 ? "a" : "b"},
                  {"concept", s.concept_id}, {"distance", s.distance}});
  Json ts = Json::array();
  for (const auto& t : d.tallies) {
    ts.push_back({{"layer", t.layer}, {"a", t.first}, {"b", t.second}});
    std::printf("layer %3d  a %3d  b %3d\n", t.layer, t.first, t.second);
  }
  write_json(out_dir(cfg) / "compare.json", {{"assignments", as}, {"tallies", ts}, {"warnings", d.warnings}});
}

void cmd_export_dot(const RunConfig& cfg, const std::string& vcc_file) {
  const VCCGraph g = read_vcc_json(vcc_file);
  write_text(out_dir(cfg) / "vcc.dot", export_dot(g));
}

void cmd_validate(const RunConfig& cfg, bool gradients, int instances, const std::string& vcc_file) {
  require(gradients || !vcc_file.empty(), ErrorKind::config, "validate needs --gradients or --vcc");
  Json report;
  bool ok = true;
  std::string why;
  if (gradients) {
    const GradFidelity r = gradient_fidelity(instances, cfg.seed);
    const bool pass = r.max_rel_error <= 1e-4;
    std::printf("gradient max relative error %.3e over %d instances (%d coordinates, %d skipped at kinks)\n",
                r.max_rel_error, r.instances, r.checked, r.skipped);
    report["gradients"] = {{"max_rel_error", r.max_rel_error}, {"instances", r.instances}, {"checked", r.checked},
                           {"skipped", r.skipped}, {"pass", pass}};
    if (!pass) {
      ok = false;
      why = "gradient relative error above 1e-4";
    }
  }
  if (!vcc_file.empty()) {
    const auto v = graph_violations(read_vcc_json(vcc_file));
    report["graph"] = {{"violations", v}, {"pass", v.empty()}};
    for (const auto& s : v) std::printf("violation: %s\n", s.c_str());
    if (v.empty()) std::printf("graph valid\n");
    if (!v.empty()) {
      ok = false;
      why = v.front();
    }
  }
  write_json(out_dir(cfg) / "validate.json", report);
  if (!ok) throw ValidationFailure{why};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Visual concept connectome toolkit"};
  app.require_subcommand(1);
  Common common;
  std::string classes, vcc_file, seg_dir, vcc_a, vcc_b, image;
  int per_class = 50, instances = 100;
  bool gradients = false;

  auto shortcuts = [&](CLI::App* s) {
    add_common(s, common);
    add_shortcut(s, common, "--seed", "seed", "Seed (VCC_SEED overrides)");
    add_shortcut(s, common, "-o,--out", "paths.out", "Output directory");
    add_shortcut(s, common, "--jobs", "jobs", "Worker threads");
  };
  auto model_flags = [&](CLI::App* s) {
    add_shortcut(s, common, "-m,--model", "paths.model", "Model manifest");
    add_shortcut(s, common, "--oracle", "oracle", "incore or bridge");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate toy train, target, eval and random-pool images");
  shortcuts(gen);
  gen->add_option("--classes", classes, "Comma-separated color_shape classes");
  gen->add_option("--per-class", per_class, "Training scenes per class");

  auto* train = app.add_subcommand("train", "Train the toy CNN");
  shortcuts(train);
  add_shortcut(train, common, "-d,--data", "paths.data", "Data directory from gen-data");

  auto* build = app.add_subcommand("build", "Build a VCC for one class");
  shortcuts(build);
  model_flags(build);
  add_shortcut(build, common, "-d,--data", "paths.data", "Data directory from gen-data");
  add_shortcut(build, common, "--class", "class", "Target class index");
  build->add_flag_callback(
      "--eq5-literal-sign", [&common] { common.shortcuts.push_back("itcav.literal_sign=true"); },
      "Score sensitivities with the un-negated directional derivative");

  auto* metrics = app.add_subcommand("metrics", "Per-layer graph metrics");
  shortcuts(metrics);
  metrics->add_option("--vcc", vcc_file, "VCC JSON")->required();

  auto* apsls = app.add_subcommand("aps-ls", "APS vs logit-sum correlation");
  shortcuts(apsls);
  model_flags(apsls);
  apsls->add_option("--vcc", vcc_file, "VCC JSON")->required();
  apsls->add_option("--segments", seg_dir, "Segment directory (default: next to the VCC)");

  auto* suppress = app.add_subcommand("suppress", "Concept vs random-direction suppression curves");
  shortcuts(suppress);
  model_flags(suppress);
  add_shortcut(suppress, common, "-d,--data", "paths.data", "Data directory from gen-data");
  suppress->add_option("--vcc", vcc_file, "VCC JSON")->required();

  auto* rf = app.add_subcommand("rf-report", "Receptive field of every tap layer");
  shortcuts(rf);
  add_shortcut(rf, common, "-m,--model", "paths.model", "Model manifest (weights optional)");

  auto* compare = app.add_subcommand("compare", "Assign one image's segments to the nearest concepts of two VCCs");
  shortcuts(compare);
  model_flags(compare);
  compare->add_option("--vcc-a", vcc_a, "First VCC JSON")->required();
  compare->add_option("--vcc-b", vcc_b, "Second VCC JSON")->required();
  compare->add_option("--image", image, "Image file")->required();

  auto* dot = app.add_subcommand("export-dot", "Write the VCC as Graphviz DOT");
  shortcuts(dot);
  dot->add_option("--vcc", vcc_file, "VCC JSON")->required();

  auto* validate = app.add_subcommand("validate", "Numeric and structural checks");
  shortcuts(validate);
  validate->add_flag("--gradients", gradients, "Finite-difference check of distance gradients");
  validate->add_option("--instances", instances, "Random toy networks to check");
  validate->add_option("--vcc", vcc_file, "VCC JSON to check against the graph invariants");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    if (rc == 0) return 0;
    error_record("vcc", "config", e.what(), kExitConfig);
    return kExitConfig;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = resolve(common);
    if (name == "gen-data") cmd_gen_data(cfg, classes, per_class);
    else if (name == "train") cmd_train(cfg);
    else if (name == "build") cmd_build(cfg);
    else if (name == "metrics") cmd_metrics(cfg, vcc_file);
    else if (name == "aps-ls") cmd_aps_ls(cfg, vcc_file, seg_dir);
    else if (name == "suppress") cmd_suppress(cfg, vcc_file);
    else if (name == "rf-report") cmd_rf_report(cfg);
    else if (name == "compare") cmd_compare(cfg, vcc_a, vcc_b, image);
    else if (name == "export-dot") cmd_export_dot(cfg, vcc_file);
    else if (name == "validate") cmd_validate(cfg, gradients, instances, vcc_file);
  } catch (const ValidationFailure& f) {
    error_record(name, "validation", f.message, kExitNumeric);
    return kExitNumeric;
  } catch (const Error& e) {
    const int rc = exit_code(e.kind());
    error_record(name, to_string(e.kind()), e.what(), rc);
    return rc;
  } catch (const std::exception& e) {
    error_record(name, "internal", e.what(), 1);
    return 1;
  }
  return 0;
}
