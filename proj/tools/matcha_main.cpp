#include "matcha/cli.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App app{"Text-to-mel trainer and sampler"};
    app.require_subcommand(1);

    matcha::TrainArgs train_args;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--config", train_args.config, "Config file")->required();
    train->add_option("--data", train_args.data, "Corpus manifest (jsonl)");
    train->add_flag("--synthetic", train_args.synthetic, "Use the synthetic corpus");
    train->add_option("--out", train_args.out_dir, "Output directory")->required();
    train->add_option("--seed", train_args.seed, "Override the config seed");

    matcha::SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "Synthesize mel frames from text");
    synth->add_option("--ckpt", synth_args.ckpt, "Checkpoint file")->required();
    synth->add_option("--text", synth_args.text, "Input text")->required();
    synth->add_option("--steps", synth_args.steps, "ODE solver steps");
    synth->add_option("--temperature", synth_args.temperature, "Prior temperature");
    synth->add_option("--seed", synth_args.seed, "Sampling seed");
    synth->add_option("--out", synth_args.out, "Output tensor file")->required();

    matcha::AlignArgs align_args;
    auto* align = app.add_subcommand("align", "Align a corpus against a model");
    align->add_option("--ckpt", align_args.ckpt, "Checkpoint file")->required();
    align->add_option("--manifest", align_args.manifest, "Corpus manifest")->required();
    align->add_option("--out", align_args.out_dir, "Output directory")->required();

    matcha::BenchArgs bench_args;
    auto* bench = app.add_subcommand("bench", "Benchmark synthesis speed");
    bench->add_option("--ckpt", bench_args.ckpt, "Checkpoint file")->required();
    bench->add_option("--lengths", bench_args.lengths, "Token lengths")->delimiter(',');
    bench->add_option("--steps-list", bench_args.steps, "Solver step counts")->delimiter(',');
    bench->add_option("--repeats", bench_args.repeats, "Repeats per setting");
    bench->add_option("--seed", bench_args.seed, "Prompt seed");
    bench->add_option("--out", bench_args.out, "Output CSV")->required();

    std::string suite;
    auto* verify = app.add_subcommand("verify", "Run a verification suite");
    verify->add_option("--suite", suite, "flow|mas|rope|grad")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) matcha::cmd_train(train_args);
        if (*synth) matcha::cmd_synth(synth_args);
        if (*align) matcha::cmd_align(align_args);
        if (*bench) matcha::cmd_bench(bench_args);
        if (*verify) return matcha::cmd_verify(suite);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
