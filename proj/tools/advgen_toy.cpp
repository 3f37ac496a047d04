// Builds a self-contained toy workspace: shape datasets, a surrogate, victims and a
// config.json that `advgen train/eval/attack/visualize` can run against.

#include <iostream>

#include <CLI11.hpp>

#include "advgen/toy.hpp"

int main(int argc, char** argv) {
    CLI::App app{"toy workspace builder"};
    std::string root = "toy_workspace";
    advgen::toy::WorkspaceSpec spec;
    app.add_option("--out", root, "workspace directory");
    app.add_option("--size", spec.image_size, "image side length");
    app.add_option("--train-images", spec.train_images);
    app.add_option("--test-images", spec.test_images);
    app.add_option("--seed", spec.seed);
    bool no_victims = false;
    app.add_flag("--no-victims", no_victims, "only the surrogate");
    CLI11_PARSE(app, argc, argv);
    spec.victims = !no_victims;
    try {
        advgen::enable_deterministic_mode();
        auto ws = advgen::toy::make_workspace(root, spec);
        std::cout << "config " << ws.config.string() << '\n';
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return 1;
    }
    return 0;
}
