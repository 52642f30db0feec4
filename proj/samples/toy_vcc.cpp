// End-to-end walk through the library on the synthetic shapes world:
// train the toy CNN, build a concept graph for one class, print per-layer
// metrics and write the graph as JSON and DOT.
//
//   toy_vcc [out_dir] [class]

#include <cstdio>
#include <string>

#include "vcc/vcc.hpp"

int main(int argc, char** argv) {
  using namespace vcc;
  const std::filesystem::path out = argc > 1 ? argv[1] : "toy_vcc_out";
  const int cls = argc > 2 ? std::stoi(argv[2]) : 1;
  try {
    const auto classes = default_toy_classes();
    TrainReport report;
    const LayeredModel model = train_toy_cnn(generate_dataset(derive_seed(0, {0x7A1}), classes, 50), 0, {}, 1, &report);
    std::printf("trained toy CNN: train accuracy %.3f\n", report.accuracy);

    std::vector<Tensor> images;
    for (const auto& s : generate_dataset(derive_seed(0, {0x7A2}), classes, 50))
      if (s.label == cls) images.push_back(s.image);
    const auto pool = generate_random_pool(derive_seed(0, {0x7A4}), classes, 400);

    InCoreOracle oracle(model);
    const VCCGraph g = build_vcc(oracle, images, {}, cls, pool, {}, 0);
    std::printf("class %s: %zu concepts, %zu edges\n", classes[static_cast<std::size_t>(cls)].name().c_str(),
                g.concept_total(), g.edges.size() + g.class_edges.size());
    for (const auto& m : layer_metrics(g))
      std::printf("  layer %2d  concepts %d  edges %d  branching %.2f  mean weight %s\n", m.layer, m.concept_count,
                  m.edge_count, m.branching_factor,
                  m.edge_weight_mean ? std::to_string(*m.edge_weight_mean).c_str() : "-");

    std::filesystem::create_directories(out);
    write_vcc_json(out / "vcc.json", g);
    write_text(out / "vcc.dot", export_dot(g));
    std::printf("wrote %s and %s\n", (out / "vcc.json").c_str(), (out / "vcc.dot").c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "toy_vcc: %s\n", e.what());
    return 1;
  }
}
