#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fastgc/bench.hpp"
#include "fastgc/parallel.hpp"

namespace {

std::vector<fastgc::Strategy> parse_methods(const std::string& csv) {
    std::vector<fastgc::Strategy> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(fastgc::strategy_from_string(item));
    }
    if (out.empty()) throw fastgc::ContractError("no methods given");
    return out;
}

std::vector<std::size_t> parse_sizes(const std::string& csv) {
    std::vector<std::size_t> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoul(item));
    }
    if (out.empty()) throw fastgc::ContractError("no batch sizes given");
    return out;
}

fastgc::Dataset resolve_dataset(const std::string& dataset, const std::string& model,
                                const std::string& images, const std::string& labels,
                                std::size_t records, std::uint64_t seed) {
    using namespace fastgc;
    if (!images.empty()) {
        Dataset d = load_idx(images, labels);
        if (model == "rnn" || model == "lstm") d = rows_as_sequence(d);
        return d;
    }
    if (dataset == "separable") {
        SynthSpec spec;
        spec.kind = SynthKind::Separable;
        spec.n = records;
        spec.dims = {20};
        spec.classes = 2;
        spec.seed = seed;
        return synth(spec);
    }
    return bench_dataset(model, records, seed);
}

int run_bench_command(const fastgc::BenchSpec& spec, const std::string& out_path) {
    auto rows = fastgc::run_bench(spec);
    const std::string csv = fastgc::bench_csv(rows);
    if (out_path.empty() || out_path == "-") {
        std::cout << csv;
    } else {
        std::ofstream out(out_path);
        if (!out) {
            std::cerr << "cannot write " << out_path << "\n";
            return 1;
        }
        out << csv;
        std::cout << "wrote " << rows.size() << " rows to " << out_path << "\n";
    }
    for (const auto& r : rows) {
        if (r.failed) std::cerr << "cell failed (out of memory): " << r.method << " batch "
                                << r.batch << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differentially private training with fast per-example gradient clipping"};
    app.require_subcommand(1);
    unsigned threads = 0;
    app.add_option("--threads", threads, "Pin kernel thread count (0 = hardware)");

    // ---- bench ----
    auto* bench = app.add_subcommand("bench", "Time training methods across batch sizes");
    fastgc::BenchSpec spec;
    std::string methods_csv = "reweight,nxbp,multiloss,nonprivate";
    std::string batches_csv = "16,32,64,128";
    std::string out_path = "report.csv";
    bench->add_option("--model", spec.model, "mlp|cnn|rnn|lstm|transformer");
    bench->add_option("--methods", methods_csv, "comma list of methods");
    bench->add_option("--batch-sizes", batches_csv, "comma list of batch sizes");
    bench->add_option("--depth", spec.depth, "hidden layer count (mlp)");
    bench->add_option("--epochs", spec.epochs, "epochs per cell");
    bench->add_option("--warmup", spec.warmup, "warmup epochs excluded from the median");
    bench->add_option("--records", spec.records, "synthetic records per cell");
    bench->add_option("--seed", spec.seed, "rng seed");
    bench->add_option("--out", out_path, "CSV output path ('-' for stdout)");

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Train one model and report privacy");
    std::string model_name = "mlp";
    std::string method = "reweight";
    std::string dataset = "synth";
    std::string images_path, labels_path, eps_report, config_path, save_prefix;
    fastgc::TrainConfig cfg;
    std::size_t records = 2000;
    double target_eps = 0.0;
    train_cmd->add_option("--model", model_name, "mlp|cnn|rnn|lstm|transformer");
    train_cmd->add_option("--method", method, "nonprivate|nxbp|multiloss|reweight");
    train_cmd->add_option("--clip", cfg.clip_c, "clipping threshold c");
    train_cmd->add_option("--sigma", cfg.sigma, "noise std");
    train_cmd->add_option("--target-eps", target_eps, "calibrate sigma for this eps'");
    train_cmd->add_option("--delta", cfg.delta, "delta for eps' reporting");
    train_cmd->add_option("--epochs", cfg.epochs, "training epochs");
    train_cmd->add_option("--batch-size", cfg.batch_size, "minibatch size");
    train_cmd->add_option("--lr", cfg.lr, "learning rate");
    std::string optimizer = "adam";
    train_cmd->add_option("--optimizer", optimizer, "sgd|adam");
    train_cmd->add_flag("--per-layer-clip", cfg.per_layer_clip,
                        "clip per layer with threshold c/sqrt(layers)");
    std::string noise_scale = "absolute";
    train_cmd->add_option("--noise-scale", noise_scale, "absolute|relative sigma interpretation");
    train_cmd->add_option("--dataset", dataset, "synth|separable (or use --images/--labels)");
    train_cmd->add_option("--images", images_path, "IDX image file (gzip ok)");
    train_cmd->add_option("--labels", labels_path, "IDX label file (gzip ok)");
    train_cmd->add_option("--records", records, "synthetic record count");
    train_cmd->add_option("--seed", cfg.seed, "rng seed");
    train_cmd->add_option("--eps-report", eps_report, "write privacy report JSON here");
    train_cmd->add_option("--metrics", cfg.metrics_csv, "append per-epoch metrics CSV here");
    train_cmd->add_option("--config", config_path, "JSON run configuration (overrides flags)");
    train_cmd->add_option("--save-params", save_prefix,
                          "write <prefix>.bin / <prefix>.json parameter dump");

    CLI11_PARSE(app, argc, argv);
    fastgc::set_kernel_threads(threads);

    try {
        if (bench->parsed()) {
            spec.methods = parse_methods(methods_csv);
            spec.batch_sizes = parse_sizes(batches_csv);
            return run_bench_command(spec, out_path);
        }

        // train
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) {
                std::cerr << "cannot read " << config_path << "\n";
                return 1;
            }
            std::stringstream ss;
            ss << in.rdbuf();
            cfg = fastgc::train_config_from_json(ss.str());
        } else {
            cfg.strategy = fastgc::strategy_from_string(method);
            cfg.optimizer = optimizer == "sgd" ? fastgc::Optimizer::Sgd : fastgc::Optimizer::Adam;
            cfg.noise_scale = noise_scale == "relative" ? fastgc::NoiseScale::Relative
                                                        : fastgc::NoiseScale::Absolute;
            if (target_eps > 0.0) {
                cfg.calibrate = true;
                cfg.target_eps = target_eps;
            }
        }

        fastgc::Dataset data =
            resolve_dataset(dataset, model_name, images_path, labels_path, records, cfg.seed);
        fastgc::Shape in_shape = data.features.shape();
        in_shape.erase(in_shape.begin());
        fastgc::Model model = fastgc::build_reference_model(model_name, /*depth=*/2, in_shape,
                                                            data.num_classes, cfg.seed);

        fastgc::TrainResult res = fastgc::train(model, data, cfg);
        for (const auto& m : res.log) {
            std::cout << "epoch " << m.epoch << "  wall " << m.wall_seconds << "s  loss "
                      << m.loss << "  acc " << m.accuracy << "  eps' " << m.eps_prime << "\n";
        }
        if (!eps_report.empty()) {
            std::ofstream out(eps_report);
            out << fastgc::privacy_report_json(res.ledger, res.sigma_used, cfg.clip_c,
                                               cfg.batch_size, cfg.delta)
                << "\n";
            std::cout << "privacy report written to " << eps_report << "\n";
        }
        if (!save_prefix.empty()) {
            fastgc::save_parameters(model, save_prefix + ".bin", save_prefix + ".json");
            std::cout << "parameters written to " << save_prefix << ".bin\n";
        }
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
