#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nucleo {

/// Dense row-major float array. T is float for training, double for
/// gradient certification.
template <typename T>
struct Tensor {
    std::vector<long> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<long> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    }
    Tensor(std::vector<long> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<long>(data.size()) != numel_of(shape))
            throw std::invalid_argument("Tensor: data length does not match shape");
    }

    static long numel_of(const std::vector<long>& s) {
        long n = 1;
        for (long d : s) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    long numel() const { return static_cast<long>(data.size()); }
    long dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    static Tensor zeros(std::vector<long> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<long> s, T v) {
        Tensor t(std::move(s));
        for (auto& x : t.data) x = v;
        return t;
    }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor uniform(std::vector<long> s, T lo, T hi, std::mt19937_64& rng) {
        Tensor t(std::move(s));
        std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                    static_cast<double>(hi));
        for (auto& x : t.data) x = static_cast<T>(dist(rng));
        return t;
    }

    T& operator[](long i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](long i) const { return data[static_cast<size_t>(i)]; }

    // NCHW helpers for the 4-D case.
    T& at4(long n, long c, long h, long w) {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    const T& at4(long n, long c, long h, long w) const {
        return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
    }
    T& at2(long i, long j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
    const T& at2(long i, long j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

}  // namespace nucleo
