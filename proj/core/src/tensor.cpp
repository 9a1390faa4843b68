#include "facegen/tensor.hpp"

#include <cmath>
#include <stdexcept>

#include "facegen/base.hpp"

namespace facegen {

namespace {

std::size_t checked_element_count(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("tensor extents must be >= 1");
        n *= e;
    }
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

}  // namespace

Tensor Tensor::zeros(const std::vector<std::size_t>& shape) {
    Tensor t;
    t.shape_ = shape;
    t.data_.assign(checked_element_count(shape), 0.0);
    return t;
}

Tensor Tensor::full(const std::vector<std::size_t>& shape, double value) {
    Tensor t;
    t.shape_ = shape;
    t.data_.assign(checked_element_count(shape), value);
    return t;
}

Tensor Tensor::from_data(const std::vector<std::size_t>& shape, std::vector<double> data) {
    const std::size_t n = checked_element_count(shape);
    if (data.size() != n) throw std::invalid_argument("from_data: data length does not match shape");
    Tensor t;
    t.shape_ = shape;
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::randn(const std::vector<std::size_t>& shape, double mean, double stddev,
                     std::uint64_t seed) {
    Rng rng(seed);
    return randn(shape, mean, stddev, rng);
}

Tensor Tensor::randn(const std::vector<std::size_t>& shape, double mean, double stddev, Rng& rng) {
    if (stddev < 0.0) throw std::invalid_argument("randn: stddev must be >= 0");
    Tensor t = zeros(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(mean, stddev);
    return t;
}

Tensor Tensor::reshaped(const std::vector<std::size_t>& new_shape) const {
    const std::size_t n = checked_element_count(new_shape);
    if (n != size()) throw std::invalid_argument("reshaped: element count mismatch");
    Tensor t;
    t.shape_ = new_shape;
    t.data_ = data_;
    return t;
}

AxpyNorms axpy_norms(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "axpy_norms");
    AxpyNorms r;
    const double* pa = a.data();
    const double* pb = b.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double d = pa[i] - pb[i];
        r.sum += pa[i] + pb[i];
        r.diff_l2_sq += d * d;
        r.dot += pa[i] * pb[i];
    }
    return r;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

void add_in_place(Tensor& dst, const Tensor& src) {
    require_same_shape(dst, src, "add_in_place");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void axpy_in_place(Tensor& dst, double alpha, const Tensor& src) {
    require_same_shape(dst, src, "axpy_in_place");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 tensors required");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    if (b.shape()[0] != k) throw std::invalid_argument("matmul: inner dimensions differ");
    const std::size_t n = b.shape()[1];
    Tensor c = Tensor::zeros({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    // i-k-j order: row-major friendly, and per (i,j) the k accumulation is
    // ascending, same order as the naive triple loop.
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            const double* brow = pb + kk * n;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

double sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return s;
}

double max_value(const Tensor& a) {
    double m = a[0];
    for (std::size_t i = 1; i < a.size(); ++i)
        if (a[i] > m) m = a[i];
    return m;
}

std::size_t argmax(const Tensor& a) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < a.size(); ++i)
        if (a[i] > a[best]) best = i;
    return best;
}

Tensor slice(const Tensor& t, std::size_t leading_index) {
    if (t.rank() < 2) throw std::invalid_argument("slice: rank must be >= 2");
    if (leading_index >= t.shape()[0]) throw std::invalid_argument("slice: index out of range");
    std::vector<std::size_t> tail(t.shape().begin() + 1, t.shape().end());
    std::size_t stride = 1;
    for (std::size_t e : tail) stride *= e;
    std::vector<double> data(t.data() + leading_index * stride, t.data() + (leading_index + 1) * stride);
    return Tensor::from_data(tail, std::move(data));
}

bool all_finite(const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i])) return false;
    return true;
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t)) throw numeric_error(what + ": non-finite values");
}

void append_tensor_blob(std::string& out, const Tensor& t) {
    out.append("CGT1");
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(out, t[i]);
}

Tensor read_tensor_blob(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size() || in.compare(pos, 4, "CGT1") != 0)
        throw io_error("tensor blob: bad magic");
    pos += 4;
    const std::uint32_t rank = get_u32(in, pos);
    if (rank == 0 || rank > 8) throw io_error("tensor blob: bad rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
        e = get_u32(in, pos);
        if (e == 0) throw io_error("tensor blob: zero extent");
        n *= e;
    }
    std::vector<double> data(n);
    for (auto& v : data) v = get_f64(in, pos);
    return Tensor::from_data(shape, std::move(data));
}

}  // namespace facegen
