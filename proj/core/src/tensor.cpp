#include "fastgc/tensor.hpp"

#include <atomic>
#include <sstream>
#include <thread>

#include "fastgc/parallel.hpp"

namespace fastgc {

// ---- parallel_for ----------------------------------------------------------

namespace {

// Work below this volume is not worth a thread spawn.
constexpr std::size_t kMinParallelFlops = std::size_t{1} << 21;

std::atomic<unsigned> g_threads{0};
thread_local bool t_inside_parallel = false;

unsigned effective_threads() {
    unsigned n = g_threads.load();
    if (n == 0) {
        n = std::thread::hardware_concurrency();
        if (n == 0) n = 1;
    }
    return n;
}

}  // namespace

void set_kernel_threads(unsigned n) { g_threads.store(n); }

unsigned kernel_threads() { return effective_threads(); }

void parallel_for(std::size_t n, std::size_t flops_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body) {
    if (n == 0) return;
    unsigned workers = effective_threads();
    if (workers <= 1 || n < 2 || t_inside_parallel ||
        n * flops_per_item < kMinParallelFlops) {
        body(0, n);
        return;
    }
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, n));
    // Fixed contiguous chunking: chunk boundaries depend only on (n, workers),
    // every index is written by exactly one thread.
    const std::size_t per = n / workers;
    const std::size_t rem = n % workers;
    std::vector<std::thread> threads;
    threads.reserve(workers - 1);
    std::size_t begin = 0;
    for (unsigned w = 0; w < workers; ++w) {
        const std::size_t len = per + (w < rem ? 1 : 0);
        const std::size_t end = begin + len;
        if (w + 1 == workers) {
            t_inside_parallel = true;
            body(begin, end);
            t_inside_parallel = false;
        } else {
            threads.emplace_back([&body, begin, end] {
                t_inside_parallel = true;
                body(begin, end);
            });
        }
        begin = end;
    }
    for (auto& t : threads) t.join();
}

// ---- Tensor ---------------------------------------------------------------

std::string shape_str(const Shape& s) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out << ", ";
        out << s[i];
    }
    out << ']';
    return out.str();
}

namespace {

std::size_t checked_numel(const Shape& shape) {
    if (shape.empty() || shape.size() > 5) {
        throw ShapeError("tensor order must be 1-5, got shape " + shape_str(shape));
    }
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("all extents must be >= 1, got shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = std::make_shared<const std::vector<double>>(checked_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (checked_numel(shape_) != data.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match buffer of " +
                         std::to_string(data.size()) + " elements");
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::full(Shape shape, double value) {
    std::vector<double> buf(checked_numel(shape), value);
    return Tensor(std::move(shape), std::move(buf));
}

Tensor Tensor::eye(std::size_t n) {
    std::vector<double> buf(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) buf[i * n + i] = 1.0;
    return Tensor({n, n}, std::move(buf));
}

Tensor Tensor::reshaped(Shape shape) const {
    if (checked_numel(shape) != size()) {
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    Tensor out;
    out.shape_ = std::move(shape);
    out.data_ = data_;
    return out;
}

// ---- kernels ---------------------------------------------------------------

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) ||
        a.extent(2) != b.extent(1)) {
        throw ShapeError("bmm: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not conform");
    }
    const std::size_t t = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
    std::vector<double> out(t * m * n, 0.0);
    const double* pa = a.data();
    const double* pb = b.data();
    parallel_for(t, 2 * m * k * n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* ai = pa + i * m * k;
            const double* bi = pb + i * k * n;
            double* oi = out.data() + i * m * n;
            for (std::size_t r = 0; r < m; ++r) {
                const double* arow = ai + r * k;
                // skip all-zero rows (per-example backward sweeps produce them
                // wholesale); the inner loops stay branch-free
                bool any = false;
                for (std::size_t c = 0; c < k && !any; ++c) any = arow[c] != 0.0;
                if (!any) continue;
                double* orow = oi + r * n;
                for (std::size_t c = 0; c < k; ++c) {
                    const double av = arow[c];
                    const double* brow = bi + c * n;
                    for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
                }
            }
        }
    });
    return Tensor({t, m, n}, std::move(out));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
        throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not conform");
    }
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.data();
    const double* pb = b.data();
    parallel_for(m, 2 * k * n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
            const double* arow = pa + r * k;
            bool any = false;
            for (std::size_t c = 0; c < k && !any; ++c) any = arow[c] != 0.0;
            if (!any) continue;
            double* orow = out.data() + r * n;
            for (std::size_t c = 0; c < k; ++c) {
                const double av = arow[c];
                const double* brow = pb + c * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    });
    return Tensor({m, n}, std::move(out));
}

Tensor outer_batch(const Tensor& u, const Tensor& v) {
    if (u.rank() != 2 || v.rank() != 2 || u.extent(0) != v.extent(0)) {
        throw ShapeError("outer_batch: shapes " + shape_str(u.shape()) + " and " +
                         shape_str(v.shape()) + " do not share a batch extent");
    }
    const std::size_t t = u.extent(0), m = u.extent(1), n = v.extent(1);
    std::vector<double> out(t * m * n);
    const double* pu = u.data();
    const double* pv = v.data();
    parallel_for(t, m * n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* ui = pu + i * m;
            const double* vi = pv + i * n;
            double* oi = out.data() + i * m * n;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) oi[r * n + c] = ui[r] * vi[c];
        }
    });
    return Tensor({t, m, n}, std::move(out));
}

namespace {

std::size_t conv_extent(std::size_t s, std::size_t k, std::size_t stride, std::size_t pad,
                        const Tensor& x, std::size_t kh, std::size_t kw) {
    if (s + 2 * pad < k) {
        throw ShapeError("im2col: kernel [" + std::to_string(kh) + ", " + std::to_string(kw) +
                         "] larger than padded image " + shape_str(x.shape()));
    }
    return (s + 2 * pad - k) / stride + 1;
}

}  // namespace

Tensor im2col(const Tensor& x, std::size_t kh, std::size_t kw, std::size_t stride,
              std::size_t pad) {
    if (x.rank() != 4) {
        throw ShapeError("im2col: expected [t, c, h, w], got " + shape_str(x.shape()));
    }
    if (stride == 0) throw ContractError("im2col: stride must be >= 1");
    const std::size_t t = x.extent(0), c = x.extent(1), sh = x.extent(2), sw = x.extent(3);
    const std::size_t oh = conv_extent(sh, kh, stride, pad, x, kh, kw);
    const std::size_t ow = conv_extent(sw, kw, stride, pad, x, kh, kw);
    const std::size_t p = oh * ow, l = kh * kw * c;
    std::vector<double> out(t * p * l, 0.0);
    const double* px = x.data();
    parallel_for(t, p * l, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* xi = px + i * c * sh * sw;
            double* oi = out.data() + i * p * l;
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t z = 0; z < ow; ++z) {
                    double* row = oi + (y * ow + z) * l;
                    std::size_t col = 0;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        for (std::size_t dy = 0; dy < kh; ++dy) {
                            const std::ptrdiff_t sy =
                                static_cast<std::ptrdiff_t>(y * stride + dy) -
                                static_cast<std::ptrdiff_t>(pad);
                            for (std::size_t dx = 0; dx < kw; ++dx, ++col) {
                                const std::ptrdiff_t sx =
                                    static_cast<std::ptrdiff_t>(z * stride + dx) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(sh) ||
                                    sx >= static_cast<std::ptrdiff_t>(sw))
                                    continue;  // zero padding
                                row[col] = xi[(ch * sh + static_cast<std::size_t>(sy)) * sw +
                                              static_cast<std::size_t>(sx)];
                            }
                        }
                    }
                }
            }
        }
    });
    return Tensor({t, p, l}, std::move(out));
}

Tensor col2im(const Tensor& cols, const Shape& x_shape, std::size_t kh, std::size_t kw,
              std::size_t stride, std::size_t pad) {
    const std::size_t t = x_shape[0], c = x_shape[1], sh = x_shape[2], sw = x_shape[3];
    const std::size_t oh = (sh + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (sw + 2 * pad - kw) / stride + 1;
    const std::size_t p = oh * ow, l = kh * kw * c;
    std::vector<double> out(t * c * sh * sw, 0.0);
    const double* pc = cols.data();
    parallel_for(t, p * l, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* ci = pc + i * p * l;
            double* oi = out.data() + i * c * sh * sw;
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t z = 0; z < ow; ++z) {
                    const double* row = ci + (y * ow + z) * l;
                    std::size_t col = 0;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        for (std::size_t dy = 0; dy < kh; ++dy) {
                            const std::ptrdiff_t sy =
                                static_cast<std::ptrdiff_t>(y * stride + dy) -
                                static_cast<std::ptrdiff_t>(pad);
                            for (std::size_t dx = 0; dx < kw; ++dx, ++col) {
                                const std::ptrdiff_t sx =
                                    static_cast<std::ptrdiff_t>(z * stride + dx) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (sy < 0 || sx < 0 || sy >= static_cast<std::ptrdiff_t>(sh) ||
                                    sx >= static_cast<std::ptrdiff_t>(sw))
                                    continue;
                                oi[(ch * sh + static_cast<std::size_t>(sy)) * sw +
                                   static_cast<std::size_t>(sx)] += row[col];
                            }
                        }
                    }
                }
            }
        }
    });
    return Tensor(x_shape, std::move(out));
}

Tensor im2col3d(const Tensor& x, std::size_t kd, std::size_t kh, std::size_t kw,
                std::size_t stride) {
    if (x.rank() != 5) {
        throw ShapeError("im2col3d: expected [t, c, d, h, w], got " + shape_str(x.shape()));
    }
    const std::size_t t = x.extent(0), c = x.extent(1), sd = x.extent(2), sh = x.extent(3),
                      sw = x.extent(4);
    if (sd < kd || sh < kh || sw < kw) {
        throw ShapeError("im2col3d: kernel larger than volume " + shape_str(x.shape()));
    }
    const std::size_t od = (sd - kd) / stride + 1;
    const std::size_t oh = (sh - kh) / stride + 1;
    const std::size_t ow = (sw - kw) / stride + 1;
    const std::size_t p = od * oh * ow, l = kd * kh * kw * c;
    std::vector<double> out(t * p * l);
    const double* px = x.data();
    parallel_for(t, p * l, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* xi = px + i * c * sd * sh * sw;
            double* oi = out.data() + i * p * l;
            std::size_t prow = 0;
            for (std::size_t d = 0; d < od; ++d) {
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t z = 0; z < ow; ++z, ++prow) {
                        double* row = oi + prow * l;
                        std::size_t col = 0;
                        for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t dd = 0; dd < kd; ++dd)
                                for (std::size_t dy = 0; dy < kh; ++dy)
                                    for (std::size_t dx = 0; dx < kw; ++dx, ++col)
                                        row[col] =
                                            xi[((ch * sd + d * stride + dd) * sh + y * stride + dy) *
                                                   sw +
                                               z * stride + dx];
                    }
                }
            }
        }
    });
    return Tensor({t, p, l}, std::move(out));
}

Tensor col2im3d(const Tensor& cols, const Shape& x_shape, std::size_t kd, std::size_t kh,
                std::size_t kw, std::size_t stride) {
    const std::size_t t = x_shape[0], c = x_shape[1], sd = x_shape[2], sh = x_shape[3],
                      sw = x_shape[4];
    const std::size_t od = (sd - kd) / stride + 1;
    const std::size_t oh = (sh - kh) / stride + 1;
    const std::size_t ow = (sw - kw) / stride + 1;
    const std::size_t p = od * oh * ow, l = kd * kh * kw * c;
    std::vector<double> out(t * c * sd * sh * sw, 0.0);
    const double* pc = cols.data();
    parallel_for(t, p * l, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* ci = pc + i * p * l;
            double* oi = out.data() + i * c * sd * sh * sw;
            std::size_t prow = 0;
            for (std::size_t d = 0; d < od; ++d) {
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t z = 0; z < ow; ++z, ++prow) {
                        const double* row = ci + prow * l;
                        std::size_t col = 0;
                        for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t dd = 0; dd < kd; ++dd)
                                for (std::size_t dy = 0; dy < kh; ++dy)
                                    for (std::size_t dx = 0; dx < kw; ++dx, ++col)
                                        oi[((ch * sd + d * stride + dd) * sh + y * stride + dy) *
                                               sw +
                                           z * stride + dx] += row[col];
                    }
                }
            }
        }
    });
    return Tensor(x_shape, std::move(out));
}

Tensor sq_norm_rows(const Tensor& x) {
    const std::size_t t = x.extent(0);
    const std::size_t d = x.size() / t;
    std::vector<double> out(t, 0.0);
    const double* px = x.data();
    for (std::size_t i = 0; i < t; ++i) {
        double acc = 0.0;
        const double* row = px + i * d;
        for (std::size_t j = 0; j < d; ++j) acc += row[j] * row[j];
        out[i] = acc;
    }
    return Tensor({t}, std::move(out));
}

double sq_norm_all(const Tensor& x) {
    double acc = 0.0;
    const double* p = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += p[i] * p[i];
    return acc;
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose2d: expected rank 2, got " + shape_str(a.shape()));
    const std::size_t m = a.extent(0), n = a.extent(1);
    std::vector<double> out(m * n);
    const double* pa = a.data();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c * m + r] = pa[r * n + c];
    return Tensor({n, m}, std::move(out));
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() != 3)
        throw ShapeError("transpose_last2: expected rank 3, got " + shape_str(a.shape()));
    const std::size_t t = a.extent(0), m = a.extent(1), n = a.extent(2);
    std::vector<double> out(t * m * n);
    const double* pa = a.data();
    parallel_for(t, m * n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            const double* ai = pa + i * m * n;
            double* oi = out.data() + i * m * n;
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < n; ++c) oi[c * m + r] = ai[r * n + c];
        }
    });
    return Tensor({t, n, m}, std::move(out));
}

Tensor transpose12(const Tensor& a) {
    if (a.rank() != 4)
        throw ShapeError("transpose12: expected rank 4, got " + shape_str(a.shape()));
    const std::size_t d0 = a.extent(0), d1 = a.extent(1), d2 = a.extent(2), d3 = a.extent(3);
    std::vector<double> out(a.size());
    const double* pa = a.data();
    for (std::size_t i = 0; i < d0; ++i)
        for (std::size_t j = 0; j < d1; ++j)
            for (std::size_t k = 0; k < d2; ++k) {
                const double* src = pa + ((i * d1 + j) * d2 + k) * d3;
                double* dst = out.data() + ((i * d2 + k) * d1 + j) * d3;
                for (std::size_t l = 0; l < d3; ++l) dst[l] = src[l];
            }
    return Tensor({d0, d2, d1, d3}, std::move(out));
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
    }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return Tensor(a.shape(), std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return Tensor(a.shape(), std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return Tensor(a.shape(), std::move(out));
}

Tensor scalar_mul(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return Tensor(a.shape(), std::move(out));
}

Tensor axpy(const Tensor& a, const Tensor& b, double s) {
    require_same_shape(a, b, "axpy");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + s * b[i];
    return Tensor(a.shape(), std::move(out));
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
    const std::size_t m = b.size();
    if (x.size() % m != 0 || x.shape().back() != m) {
        throw ShapeError("add_rowwise: " + shape_str(x.shape()) + " rows do not match bias " +
                         shape_str(b.shape()));
    }
    const std::size_t rows = x.size() / m;
    std::vector<double> out(x.size());
    const double* px = x.data();
    const double* pb = b.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) out[r * m + j] = px[r * m + j] + pb[j];
    return Tensor(x.shape(), std::move(out));
}

Tensor mul_rowwise(const Tensor& x, const Tensor& g) {
    const std::size_t m = g.size();
    if (x.size() % m != 0 || x.shape().back() != m) {
        throw ShapeError("mul_rowwise: " + shape_str(x.shape()) + " rows do not match scale " +
                         shape_str(g.shape()));
    }
    const std::size_t rows = x.size() / m;
    std::vector<double> out(x.size());
    const double* px = x.data();
    const double* pg = g.data();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < m; ++j) out[r * m + j] = px[r * m + j] * pg[j];
    return Tensor(x.shape(), std::move(out));
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 3 || x.extent(1) != b.size()) {
        throw ShapeError("add_channel_bias: " + shape_str(x.shape()) + " channels do not match " +
                         shape_str(b.shape()));
    }
    const std::size_t t = x.extent(0), c = x.extent(1), s = x.extent(2);
    std::vector<double> out(x.size());
    const double* px = x.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double bias = pb[ch];
            const double* src = px + (i * c + ch) * s;
            double* dst = out.data() + (i * c + ch) * s;
            for (std::size_t j = 0; j < s; ++j) dst[j] = src[j] + bias;
        }
    return Tensor(x.shape(), std::move(out));
}

double sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    return acc;
}

Tensor sum_rows(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("sum_rows: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t r = x.extent(0), m = x.extent(1);
    std::vector<double> out(m, 0.0);
    const double* px = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < m; ++j) out[j] += px[i * m + j];
    return Tensor({m}, std::move(out));
}

}  // namespace fastgc
