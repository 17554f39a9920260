#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fastgc/tensor.hpp"

namespace fastgc {

/// Labeled dataset: features with a leading record dim, integer class targets.
struct Dataset {
    Tensor features;           // [n, ...]
    std::vector<int> targets;  // values in [0, num_classes)
    std::size_t num_classes = 0;

    std::size_t size() const { return targets.size(); }
};

/// One minibatch (same layout as Dataset).
struct Batch {
    Tensor features;
    std::vector<int> targets;

    std::size_t size() const { return targets.size(); }
    /// Single-record batch for the per-example baseline.
    Batch select(std::size_t i) const;
};

/// Gather a batch from dataset rows given by `indices`.
Batch gather(const Dataset& data, const std::vector<std::size_t>& indices);

/// Parse big-endian IDX image + label files (magic 0x00000803 / 0x00000801).
/// Pixels are scaled to [0, 1]; image features come out as [n, 1, rows, cols].
/// Gzip-compressed files are decompressed transparently. Malformed input
/// raises FormatError with the offending byte offset.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Reinterpret [n, 1, r, c] (or [n, r, c]) images as length-r sequences of
/// c-dimensional row vectors: [n, r, c].
Dataset rows_as_sequence(const Dataset& images);

enum class SynthKind {
    GaussianClasses,  // class-dependent Gaussian blobs, image-shaped features
    Separable,        // two classes, linearly separable with margin >= 0.1
    TokenSeq,         // integer token sequences over a small vocabulary
};

struct SynthSpec {
    SynthKind kind = SynthKind::GaussianClasses;
    std::size_t n = 1000;
    std::vector<std::size_t> dims;  // feature dims, e.g. {1, 28, 28} or {64} for tokens
    std::size_t classes = 2;
    std::uint64_t seed = 0;
    std::size_t vocab = 1000;  // TokenSeq only
};

/// Deterministic synthetic dataset; class histogram balanced within +-1.
Dataset synth(const SynthSpec& spec);

}  // namespace fastgc
