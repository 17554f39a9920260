#include "fastgc/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <cstdio>
#include <random>

#include <zlib.h>

namespace fastgc {

Batch Batch::select(std::size_t i) const {
    const std::size_t per = features.size() / features.extent(0);
    std::vector<double> buf(per);
    std::memcpy(buf.data(), features.data() + i * per, per * sizeof(double));
    Shape shape = features.shape();
    shape[0] = 1;
    return Batch{Tensor(std::move(shape), std::move(buf)), {targets[i]}};
}

Batch gather(const Dataset& data, const std::vector<std::size_t>& indices) {
    const std::size_t per = data.features.size() / data.features.extent(0);
    std::vector<double> buf(indices.size() * per);
    std::vector<int> targets(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::memcpy(buf.data() + i * per, data.features.data() + indices[i] * per,
                    per * sizeof(double));
        targets[i] = data.targets[indices[i]];
    }
    Shape shape = data.features.shape();
    shape[0] = indices.size();
    return Batch{Tensor(std::move(shape), std::move(buf)), std::move(targets)};
}

// ---- IDX parsing ------------------------------------------------------------

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::string hex_u32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "0x%08x", v);
    return buf;
}

std::vector<std::uint8_t> read_file_maybe_gzip(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path, 0);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
        // gzip stream; inflate with zlib
        std::vector<std::uint8_t> out;
        out.resize(std::max<std::size_t>(raw.size() * 4, 1 << 16));
        z_stream zs{};
        if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) {
            throw FormatError("gzip init failed for " + path, 0);
        }
        zs.next_in = raw.data();
        zs.avail_in = static_cast<uInt>(raw.size());
        std::size_t written = 0;
        int rc = Z_OK;
        while (rc != Z_STREAM_END) {
            if (written == out.size()) out.resize(out.size() * 2);
            zs.next_out = out.data() + written;
            zs.avail_out = static_cast<uInt>(out.size() - written);
            rc = inflate(&zs, Z_NO_FLUSH);
            if (rc != Z_OK && rc != Z_STREAM_END) {
                inflateEnd(&zs);
                throw FormatError("gzip stream corrupt in " + path, zs.total_in);
            }
            written = zs.total_out;
        }
        inflateEnd(&zs);
        out.resize(written);
        return out;
    }
    return raw;
}

struct IdxReader {
    const std::vector<std::uint8_t>& buf;
    const std::string& path;
    std::size_t pos = 0;

    std::uint32_t read_u32() {
        if (pos + 4 > buf.size()) {
            throw FormatError(path + ": truncated while reading header word", pos);
        }
        std::uint32_t v = (std::uint32_t(buf[pos]) << 24) | (std::uint32_t(buf[pos + 1]) << 16) |
                          (std::uint32_t(buf[pos + 2]) << 8) | std::uint32_t(buf[pos + 3]);
        pos += 4;
        return v;
    }

    const std::uint8_t* read_bytes(std::size_t n) {
        if (pos + n > buf.size()) {
            throw FormatError(path + ": truncated, expected " + std::to_string(n) +
                                  " more payload bytes",
                              pos);
        }
        const std::uint8_t* p = buf.data() + pos;
        pos += n;
        return p;
    }
};

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto ibuf = read_file_maybe_gzip(images_path);
    IdxReader ir{ibuf, images_path};
    const std::uint32_t imagic = ir.read_u32();
    if (imagic != kImagesMagic) {
        throw FormatError(images_path + ": bad magic " + hex_u32(imagic) +
                              ", expected IDX u8 images (0x00000803)",
                          0);
    }
    const std::uint32_t n = ir.read_u32();
    const std::uint32_t rows = ir.read_u32();
    const std::uint32_t cols = ir.read_u32();
    const std::uint8_t* pixels = ir.read_bytes(std::size_t(n) * rows * cols);

    const auto lbuf = read_file_maybe_gzip(labels_path);
    IdxReader lr{lbuf, labels_path};
    const std::uint32_t lmagic = lr.read_u32();
    if (lmagic != kLabelsMagic) {
        throw FormatError(labels_path + ": bad magic " + hex_u32(lmagic) +
                              ", expected IDX u8 labels (0x00000801)",
                          0);
    }
    const std::uint32_t ln = lr.read_u32();
    if (ln != n) {
        throw FormatError(labels_path + ": " + std::to_string(ln) + " labels for " +
                              std::to_string(n) + " images",
                          4);
    }
    const std::uint8_t* labels = lr.read_bytes(ln);

    std::vector<double> feat(std::size_t(n) * rows * cols);
    for (std::size_t i = 0; i < feat.size(); ++i) feat[i] = pixels[i] / 255.0;
    Dataset out;
    out.features = Tensor({n, 1, rows, cols}, std::move(feat));
    out.targets.resize(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.targets[i] = labels[i];
        max_label = std::max(max_label, out.targets[i]);
    }
    out.num_classes = static_cast<std::size_t>(max_label) + 1;
    return out;
}

Dataset rows_as_sequence(const Dataset& images) {
    const Shape& s = images.features.shape();
    Shape seq_shape;
    if (s.size() == 4 && s[1] == 1) {
        seq_shape = {s[0], s[2], s[3]};
    } else if (s.size() == 3) {
        seq_shape = s;
    } else {
        throw ShapeError("rows_as_sequence: expected [n, 1, r, c] or [n, r, c], got " +
                         shape_str(s));
    }
    Dataset out;
    out.features = images.features.reshaped(std::move(seq_shape));
    out.targets = images.targets;
    out.num_classes = images.num_classes;
    return out;
}

// ---- synthetic datasets -------------------------------------------------------

namespace {

std::vector<int> balanced_targets(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
    std::vector<int> targets(n);
    for (std::size_t i = 0; i < n; ++i) targets[i] = static_cast<int>(i % classes);
    std::shuffle(targets.begin(), targets.end(), rng);
    return targets;
}

}  // namespace

Dataset synth(const SynthSpec& spec) {
    if (spec.n < spec.classes) {
        throw ContractError("synth: need at least one record per class");
    }
    if (spec.dims.empty()) {
        throw ContractError("synth: feature dims must be non-empty");
    }
    std::mt19937_64 rng(spec.seed);
    std::size_t feat_dim = 1;
    for (std::size_t d : spec.dims) feat_dim *= d;

    Dataset out;
    out.num_classes = spec.classes;
    out.targets = balanced_targets(spec.n, spec.classes, rng);

    Shape shape;
    shape.push_back(spec.n);
    for (std::size_t d : spec.dims) shape.push_back(d);

    switch (spec.kind) {
        case SynthKind::GaussianClasses: {
            std::normal_distribution<double> noise(0.0, 0.35);
            std::normal_distribution<double> mean_dist(0.0, 1.0);
            std::vector<double> means(spec.classes * feat_dim);
            for (double& v : means) v = mean_dist(rng);
            std::vector<double> feat(spec.n * feat_dim);
            for (std::size_t i = 0; i < spec.n; ++i) {
                const double* mu = means.data() + out.targets[i] * feat_dim;
                for (std::size_t j = 0; j < feat_dim; ++j)
                    feat[i * feat_dim + j] = mu[j] + noise(rng);
            }
            out.features = Tensor(std::move(shape), std::move(feat));
            break;
        }
        case SynthKind::Separable: {
            if (spec.classes != 2) {
                throw ContractError("synth: separable kind is two-class");
            }
            // Class means at +-(r + 0.05) u with noise clipped to radius r:
            // margin between the class balls is exactly 0.1.
            constexpr double kNoiseRadius = 1.0;
            constexpr double kCenter = kNoiseRadius + 0.05;
            std::normal_distribution<double> gauss(0.0, 1.0);
            std::vector<double> dir(feat_dim);
            double dn = 0.0;
            for (double& v : dir) {
                v = gauss(rng);
                dn += v * v;
            }
            dn = std::sqrt(dn);
            for (double& v : dir) v /= dn;
            std::vector<double> feat(spec.n * feat_dim);
            for (std::size_t i = 0; i < spec.n; ++i) {
                std::vector<double> noise(feat_dim);
                double nn = 0.0;
                for (double& v : noise) {
                    v = gauss(rng);
                    nn += v * v;
                }
                nn = std::sqrt(nn);
                const double scale = nn > kNoiseRadius ? kNoiseRadius / nn : 1.0;
                const double sign = out.targets[i] == 0 ? -1.0 : 1.0;
                for (std::size_t j = 0; j < feat_dim; ++j)
                    feat[i * feat_dim + j] = sign * kCenter * dir[j] + scale * noise[j];
            }
            out.features = Tensor(std::move(shape), std::move(feat));
            break;
        }
        case SynthKind::TokenSeq: {
            // Tokens from class-dependent halves of the vocabulary so the
            // classes are learnable from token statistics.
            std::vector<double> feat(spec.n * feat_dim);
            const std::size_t half = spec.vocab / 2;
            std::uniform_int_distribution<std::size_t> tok(0, half - 1);
            std::uniform_real_distribution<double> mix(0.0, 1.0);
            for (std::size_t i = 0; i < spec.n; ++i) {
                const std::size_t base =
                    (static_cast<std::size_t>(out.targets[i]) * half) % spec.vocab;
                for (std::size_t j = 0; j < feat_dim; ++j) {
                    const bool informative = mix(rng) < 0.7;
                    const std::size_t token = informative ? base + tok(rng) : tok(rng) * 2 % spec.vocab;
                    feat[i * feat_dim + j] = static_cast<double>(token % spec.vocab);
                }
            }
            out.features = Tensor(std::move(shape), std::move(feat));
            break;
        }
    }
    return out;
}

}  // namespace fastgc
