#include "fastgc/bench.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <new>
#include <sstream>

#include "fastgc/parallel.hpp"

namespace fastgc {

Model build_reference_model(const std::string& name, std::size_t depth, const Shape& input_shape,
                            std::size_t num_classes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Model model;
    if (name == "mlp") {
        std::size_t in = 1;
        for (std::size_t d : input_shape) in *= d;
        model.add(std::make_unique<Flatten>());
        // hidden widths alternate 128, 256 starting from the 128-unit layer
        std::size_t prev = in;
        for (std::size_t l = 0; l < depth; ++l) {
            const std::size_t width = (l % 2 == 0) ? 128 : 256;
            model.add(std::make_unique<Linear>(prev, width, rng));
            model.add(std::make_unique<Activation>(Activation::Kind::Sigmoid));
            prev = width;
        }
        model.add(std::make_unique<Linear>(prev, num_classes, rng));
    } else if (name == "cnn") {
        if (input_shape.size() != 3) {
            throw ContractError("cnn expects [c, h, w] input, got " + shape_str(input_shape));
        }
        const std::size_t c = input_shape[0], h = input_shape[1], w = input_shape[2];
        model.add(std::make_unique<Conv2d>(c, 20, 5, 5, rng));
        model.add(std::make_unique<Activation>(Activation::Kind::Sigmoid));
        model.add(std::make_unique<MaxPool2d>(2, 2));
        model.add(std::make_unique<Conv2d>(20, 50, 5, 5, rng));
        model.add(std::make_unique<Activation>(Activation::Kind::Sigmoid));
        model.add(std::make_unique<MaxPool2d>(2, 2));
        model.add(std::make_unique<Flatten>());
        const std::size_t h2 = ((h - 4) / 2 - 4) / 2;
        const std::size_t w2 = ((w - 4) / 2 - 4) / 2;
        model.add(std::make_unique<Linear>(50 * h2 * w2, 128, rng));
        model.add(std::make_unique<Activation>(Activation::Kind::Sigmoid));
        model.add(std::make_unique<Linear>(128, num_classes, rng));
    } else if (name == "rnn") {
        if (input_shape.size() != 2) {
            throw ContractError("rnn expects [steps, dim] input, got " + shape_str(input_shape));
        }
        model.add(std::make_unique<Rnn>(input_shape[1], 128, rng));
        model.add(std::make_unique<Linear>(128, num_classes, rng));
    } else if (name == "lstm") {
        if (input_shape.size() != 2) {
            throw ContractError("lstm expects [steps, dim] input, got " + shape_str(input_shape));
        }
        model.add(std::make_unique<Lstm>(input_shape[1], 128, rng));
        model.add(std::make_unique<Linear>(128, num_classes, rng));
    } else if (name == "transformer") {
        constexpr std::size_t kVocab = 1000, kDim = 200, kHeads = 2;
        model.add(std::make_unique<Embedding>(kVocab, kDim, rng));
        model.add(std::make_unique<PositionalEncoding>());
        model.add(std::make_unique<TransformerBlock>(kDim, kHeads, rng));
        model.add(std::make_unique<MeanPoolSeq>());
        model.add(std::make_unique<Linear>(kDim, num_classes, rng));
    } else {
        throw ContractError("unknown model '" + name +
                            "' (expected mlp|cnn|rnn|lstm|transformer)");
    }
    return model;
}

Dataset bench_dataset(const std::string& model_name, std::size_t records, std::uint64_t seed) {
    SynthSpec spec;
    spec.n = records;
    spec.seed = seed;
    if (model_name == "mlp" || model_name == "cnn") {
        spec.kind = SynthKind::GaussianClasses;
        spec.dims = {1, 28, 28};
        spec.classes = 10;
    } else if (model_name == "rnn" || model_name == "lstm") {
        spec.kind = SynthKind::GaussianClasses;
        spec.dims = {28, 28};
        spec.classes = 10;
    } else if (model_name == "transformer") {
        spec.kind = SynthKind::TokenSeq;
        spec.dims = {64};
        spec.classes = 2;
        spec.vocab = 1000;
    } else {
        throw ContractError("unknown model '" + model_name + "'");
    }
    return synth(spec);
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Shape record_shape(const Dataset& data) {
    Shape s = data.features.shape();
    s.erase(s.begin());
    return s;
}

}  // namespace

std::vector<BenchRow> run_bench(const BenchSpec& spec) {
    if (spec.warmup >= spec.epochs) {
        throw ContractError("bench: warmup epochs must be fewer than total epochs");
    }
    Dataset data = bench_dataset(spec.model, spec.records, spec.seed);
    const Shape in_shape = record_shape(data);

    std::vector<BenchRow> rows;
    for (std::size_t batch : spec.batch_sizes) {
        for (Strategy method : spec.methods) {
            BenchRow row;
            row.model = spec.model;
            row.method = to_string(method);
            row.batch = batch;
            row.depth = spec.depth;
            row.thread_count = kernel_threads();
            try {
                Model model =
                    build_reference_model(spec.model, spec.depth, in_shape, data.num_classes,
                                          spec.seed);
                TrainConfig cfg;
                cfg.epochs = spec.epochs;
                cfg.batch_size = batch;
                cfg.strategy = method;
                cfg.seed = spec.seed;
                TrainResult res = train(model, data, cfg);
                std::vector<double> times;
                for (std::size_t e = spec.warmup; e < res.log.size(); ++e) {
                    times.push_back(res.log[e].wall_seconds);
                }
                row.epoch_seconds_median = median(times);
                row.final_accuracy = res.log.back().accuracy;
            } catch (const std::bad_alloc&) {
                row.failed = true;
                row.epoch_seconds_median = std::numeric_limits<double>::quiet_NaN();
                row.final_accuracy = std::numeric_limits<double>::quiet_NaN();
            }
            rows.push_back(row);
        }
    }
    // speedup vs the nxbp row at the same batch size
    for (BenchRow& row : rows) {
        const auto nx = std::find_if(rows.begin(), rows.end(), [&](const BenchRow& r) {
            return r.batch == row.batch && r.method == "nxbp" && !r.failed;
        });
        row.speedup_vs_nxbp = (nx != rows.end() && !row.failed)
                                  ? nx->epoch_seconds_median / row.epoch_seconds_median
                                  : std::numeric_limits<double>::quiet_NaN();
    }
    return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream out;
    out << "model,method,batch,depth,epoch_seconds_median,speedup_vs_nxbp,final_accuracy,"
           "thread_count\n";
    for (const BenchRow& r : rows) {
        out << r.model << ',' << r.method << ',' << r.batch << ',' << r.depth << ','
            << r.epoch_seconds_median << ',' << r.speedup_vs_nxbp << ',' << r.final_accuracy
            << ',' << r.thread_count << '\n';
    }
    return out.str();
}

}  // namespace fastgc
