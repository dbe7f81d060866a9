#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vseg {

// Dense tensors are row-major. Canonical volume layout is [N, C, D, H, W];
// the paper-style H x W x D x C shapes map onto this layout here and nowhere else.
struct Shape {
    static constexpr int kMaxRank = 6;
    std::array<int64_t, kMaxRank> extent{};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<int64_t> dims) {
        if ((int)dims.size() > kMaxRank) throw std::invalid_argument("Shape: rank > 6");
        for (int64_t d : dims) extent[rank++] = d;
    }

    int64_t operator[](int i) const { return extent[i]; }
    int64_t& operator[](int i) { return extent[i]; }

    int64_t numel() const {
        int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= extent[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (extent[i] != o.extent[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << '[';
        for (int i = 0; i < rank; ++i) os << extent[i] << (i + 1 < rank ? "," : "");
        os << ']';
        return os.str();
    }
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b)
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(size_t(s.numel()), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(s), data(std::move(d)) {
        if ((int64_t)data.size() != shape.numel())
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape.str());
    }

    int64_t numel() const { return (int64_t)data.size(); }
    bool empty() const { return data.empty(); }
    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(T(0)); }

    T& operator[](int64_t i) { return data[size_t(i)]; }
    const T& operator[](int64_t i) const { return data[size_t(i)]; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

// Learnable tensor with an explicitly managed gradient buffer. Gradients
// accumulate across backward passes until zero_grad() is called.
template <typename T>
struct Parameter {
    Tensor<T> value;
    Tensor<T> grad;
    std::string name;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : value(std::move(v)), grad(value.shape, T(0)), name(std::move(n)) {}

    void zero_grad() { grad.zero(); }
    int64_t numel() const { return value.numel(); }
};

// splitmix64 generator with a Box-Muller normal: the sequence is fixed by this
// implementation, not the standard library, so seeded runs are reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97f4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * (1.0 / 9007199254740992.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
Tensor<T> random_normal(Shape s, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    Tensor<T> t(s);
    for (auto& v : t.data) v = T(mean + stddev * rng.normal());
    return t;
}

template <typename T>
Tensor<T> random_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
    Tensor<T> t(s);
    for (auto& v : t.data) v = T(rng.uniform(lo, hi));
    return t;
}

inline int64_t ceil_div(int64_t a, int64_t b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
inline int64_t floor_div(int64_t a, int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace vseg
