#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastgc/trainer.hpp"

namespace fastgc {

struct BenchSpec {
    std::string model = "mlp";  // mlp | cnn | rnn | lstm | transformer
    std::vector<Strategy> methods = {Strategy::Reweight, Strategy::NxBp};
    std::vector<std::size_t> batch_sizes = {32};
    std::size_t depth = 2;  // hidden layer count (mlp only)
    std::size_t epochs = 5;
    std::size_t warmup = 1;  // leading epochs excluded from the median
    std::size_t records = 2000;
    std::uint64_t seed = 42;
};

struct BenchRow {
    std::string model;
    std::string method;
    std::size_t batch = 0;
    std::size_t depth = 0;
    double epoch_seconds_median = 0.0;
    double speedup_vs_nxbp = 0.0;  // nxbp median / this method's median
    double final_accuracy = 0.0;
    unsigned thread_count = 0;
    bool failed = false;  // ran out of memory; timing fields are NaN
};

/// The reference architectures, sized as in the comparison experiments.
/// input_shape excludes the batch dim (e.g. {1, 28, 28} images, {28, 28}
/// row sequences, {64} token sequences).
Model build_reference_model(const std::string& name, std::size_t depth, const Shape& input_shape,
                            std::size_t num_classes, std::uint64_t seed);

/// Desk-scale synthetic dataset matched to a reference model's input.
Dataset bench_dataset(const std::string& model_name, std::size_t records, std::uint64_t seed);

/// One training cell per (method, batch): median post-warmup epoch seconds,
/// speedup vs the nxbp cell at the same batch size, final train accuracy.
/// An out-of-memory cell is marked failed and the run continues.
std::vector<BenchRow> run_bench(const BenchSpec& spec);

/// CSV with the fixed column set:
/// model,method,batch,depth,epoch_seconds_median,speedup_vs_nxbp,final_accuracy,thread_count
std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace fastgc
