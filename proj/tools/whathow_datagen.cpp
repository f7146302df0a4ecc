#include <CLI11.hpp>

#include <iostream>

#include "whathow/synth.hpp"

using namespace whathow;

// Generates seeded stand-in datasets in the exact on-disk formats the loaders
// consume. Useful where the real corpora are not available; `run` consumes
// the output via --data-dir.
int main(int argc, char** argv) {
    CLI::App app{"Synthetic dataset generator (IDX pairs / alphabet PNG trees)"};
    app.require_subcommand(1);

    std::string out_dir;
    std::uint64_t seed = 7;
    int n_train = 10000, n_test = 2000, alphabets = 10;

    CLI::App* mnist = app.add_subcommand("mnist", "10-class IDX image/label pairs");
    mnist->add_option("--out", out_dir, "output directory")->required();
    mnist->add_option("--train", n_train, "training images");
    mnist->add_option("--test", n_test, "test images");
    mnist->add_option("--seed", seed, "generator seed");

    CLI::App* omniglot = app.add_subcommand("omniglot", "alphabet/character/PNG tree");
    omniglot->add_option("--out", out_dir, "output directory")->required();
    omniglot->add_option("--alphabets", alphabets, "number of alphabets");
    omniglot->add_option("--seed", seed, "generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (mnist->parsed()) {
            auto files = synth::write_mnist_like(out_dir, static_cast<std::size_t>(n_train),
                                                 static_cast<std::size_t>(n_test), seed);
            for (const auto& f : files) std::cerr << "wrote " << f << "\n";
        } else {
            synth::write_omniglot_like(out_dir, alphabets, seed);
            std::cerr << "wrote " << alphabets << " alphabets under " << out_dir << "\n";
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
