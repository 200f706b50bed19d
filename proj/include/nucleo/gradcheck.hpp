#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nucleo/autodiff.hpp"
#include "nucleo/roi_align.hpp"
#include "nucleo/tensor.hpp"

namespace nucleo {

/// Builds an op under test on a fresh tape; returns the scalar output slot.
using GradCheckBuilder =
    std::function<int(Tape<double>&, const std::vector<int>& input_ids)>;

/// Central-difference certification of a scalar-valued closure. Runs the
/// analytic backward once, then perturbs every input coordinate by +/-eps;
/// returns the max relative error with denominator max(|a|, |fd|, 1e-8).
inline double grad_check(const GradCheckBuilder& build, const std::vector<Tensor<double>>& inputs,
                         double eps = 1e-3, const std::string& corrupt_op = "") {
    Tape<double> tape;
    tape.corrupt_op = corrupt_op;
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& in : inputs) ids.push_back(tape.push(in));
    int root = build(tape, ids);
    if (tape.val(root).numel() != 1)
        throw std::invalid_argument("grad_check: builder must produce a scalar");
    tape.backward(root);
    std::vector<Tensor<double>> analytic;
    analytic.reserve(inputs.size());
    for (int id : ids) analytic.push_back(tape.grad(id));

    auto eval = [&](const std::vector<Tensor<double>>& pert) {
        Tape<double> tp;
        std::vector<int> pids;
        pids.reserve(pert.size());
        for (const auto& in : pert) pids.push_back(tp.push(in));
        return tp.val(build(tp, pids))[0];
    };

    double max_rel = 0;
    std::vector<Tensor<double>> work = inputs;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (long j = 0; j < inputs[i].numel(); ++j) {
            double orig = work[i][j];
            work[i][j] = orig + eps;
            double fp = eval(work);
            work[i][j] = orig - eps;
            double fm = eval(work);
            work[i][j] = orig;
            double fd = (fp - fm) / (2 * eps);
            double a = analytic[i][j];
            double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

namespace detail {

inline Tensor<double> rand_tensor(std::vector<long> shape, std::mt19937_64& rng, double lo = -1,
                                  double hi = 1) {
    return Tensor<double>::uniform(std::move(shape), lo, hi, rng);
}

// Pushes values away from zero so kinked ops (relu, pool ties) sit on smooth
// regions for the finite-difference window.
inline Tensor<double> rand_tensor_nokink(std::vector<long> shape, std::mt19937_64& rng) {
    Tensor<double> t = rand_tensor(std::move(shape), rng);
    for (auto& v : t.data) {
        if (std::abs(v) < 0.05) v += v >= 0 ? 0.1 : -0.1;
        v += 1e-4 * static_cast<double>(&v - t.data.data());  // break pooling ties
    }
    return t;
}

inline std::vector<double> rand_coefs(long n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-1, 1);
    std::vector<double> c(static_cast<size_t>(n));
    for (auto& v : c) v = dist(rng);
    return c;
}

}  // namespace detail

struct OpCheck {
    std::string name;
    // Runs one randomized certification round; returns max relative error.
    std::function<double(std::uint64_t seed, const std::string& corrupt)> run;
};

/// Every differentiable op in the engine, each wrapped with a fixed random
/// linear functional so the check target is scalar.
inline std::vector<OpCheck> gradcheck_registry() {
    using detail::rand_coefs;
    using detail::rand_tensor;
    using detail::rand_tensor_nokink;
    std::vector<OpCheck> ops;

    ops.push_back({"conv2d", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> ch(1, 3), sz(5, 9);
        long C = ch(rng), F = ch(rng), H = sz(rng), W = sz(rng);
        int stride = 1 + static_cast<int>(seed % 2), pad = 1;
        long kh = 3, kw = 3;
        while ((H + 2 * pad - kh) % stride) ++H;
        while ((W + 2 * pad - kw) % stride) ++W;
        auto x = rand_tensor({2, C, H, W}, rng);
        auto w = rand_tensor({F, C, kh, kw}, rng);
        auto b = rand_tensor({F}, rng);
        long oh = (H + 2 * pad - kh) / stride + 1, ow = (W + 2 * pad - kw) / stride + 1;
        auto coefs = rand_coefs(2 * F * oh * ow, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, conv2d(t, in[0], in[1], in[2], stride, pad), coefs);
            },
            {x, w, b}, 1e-3, corrupt);
    }});

    ops.push_back({"conv_transpose2d", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> ch(1, 3), sz(3, 6);
        long C = ch(rng), F = ch(rng), H = sz(rng), W = sz(rng);
        auto x = rand_tensor({1, C, H, W}, rng);
        auto w = rand_tensor({C, F, 2, 2}, rng);
        auto b = rand_tensor({F}, rng);
        auto coefs = rand_coefs(F * H * 2 * W * 2, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, conv_transpose2d(t, in[0], in[1], in[2], 2), coefs);
            },
            {x, w, b}, 1e-3, corrupt);
    }});

    ops.push_back({"linear", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(1, 8);
        long N = dim(rng), D = dim(rng), M = dim(rng);
        auto x = rand_tensor({N, D}, rng);
        auto w = rand_tensor({D, M}, rng);
        auto b = rand_tensor({M}, rng);
        auto coefs = rand_coefs(N * M, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, linear(t, in[0], in[1], in[2]), coefs);
            },
            {x, w, b}, 1e-3, corrupt);
    }});

    ops.push_back({"relu", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(2, 12);
        auto x = rand_tensor_nokink({dim(rng), dim(rng)}, rng);
        auto coefs = rand_coefs(x.numel(), rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, relu(t, in[0]), coefs);
            },
            {x}, 1e-3, corrupt);
    }});

    ops.push_back({"max_pool2d", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> sz(2, 5);
        long H = 2 * sz(rng), W = 2 * sz(rng);
        auto x = rand_tensor_nokink({1, 2, H, W}, rng);
        auto coefs = rand_coefs(2 * (H / 2) * (W / 2), rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, max_pool2d(t, in[0]), coefs);
            },
            {x}, 1e-3, corrupt);
    }});

    ops.push_back({"bilinear_resize", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> sz(2, 7);
        long H = sz(rng), W = sz(rng), OH = sz(rng) + 2, OW = sz(rng) + 2;
        auto x = rand_tensor({1, 2, H, W}, rng);
        auto coefs = rand_coefs(2 * OH * OW, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, bilinear_resize(t, in[0], OH, OW), coefs);
            },
            {x}, 1e-3, corrupt);
    }});

    ops.push_back({"roi_align", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> sz(6, 10);
        long H = sz(rng), W = sz(rng);
        auto x = rand_tensor({1, 2, H, W}, rng);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        // Rois straddle the feature border to certify the edge path.
        std::vector<RoiRef> rois = {
            {0, Box(-1.5 + u(rng), -1.0 + u(rng), 2.0 * W - 2 + u(rng), 2.0 * H - 2 + u(rng))},
            {0, Box(1.1 + u(rng), 0.7 + u(rng), 1.1 + u(rng) + 4.3, 0.7 + u(rng) + 3.7)}};
        auto coefs = rand_coefs(static_cast<long>(rois.size()) * 2 * 7 * 7, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, roi_align(t, in[0], rois, 2, 7, 2), coefs);
            },
            {x}, 1e-3, corrupt);
    }});

    ops.push_back({"softmax_cross_entropy", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(2, 6);
        long N = dim(rng) + 2, K = dim(rng);
        auto x = rand_tensor({N, K}, rng, -2, 2);
        std::uniform_int_distribution<int> lab(-1, static_cast<int>(K) - 1);
        std::vector<int> labels(static_cast<size_t>(N));
        labels[0] = 0;  // at least one contributing row
        for (size_t i = 1; i < labels.size(); ++i) labels[i] = lab(rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return softmax_cross_entropy(t, in[0], labels);
            },
            {x}, 1e-3, corrupt);
    }});

    ops.push_back({"smooth_l1", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(1, 6);
        long N = dim(rng), D = 4;
        auto p = rand_tensor({N, D}, rng, -2, 2);
        auto q = rand_tensor({N, D}, rng, -2, 2);
        // Keep |p - q| away from the beta seam for the difference windows.
        for (long i = 0; i < p.numel(); ++i) {
            double d = std::abs(p[i] - q[i]);
            if (std::abs(d - 1.0) < 5e-3) p[i] += 1e-2;
        }
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return smooth_l1(t, in[0], in[1], 1.0);
            },
            {p, q}, 1e-3, corrupt);
    }});

    ops.push_back({"sigmoid_bce", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(1, 6);
        long N = dim(rng), D = dim(rng);
        auto z = rand_tensor({N, D}, rng, -3, 3);
        auto y = rand_tensor({N, D}, rng, 0, 1);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return sigmoid_bce(t, in[0], in[1]);
            },
            {z, y}, 1e-3, corrupt);
    }});

    ops.push_back({"scale", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(1, 8);
        long N = dim(rng), D = dim(rng);
        auto x = rand_tensor({N, D}, rng);
        std::uniform_real_distribution<double> cs(-2, 2);
        double c = cs(rng);
        auto coefs = rand_coefs(N * D, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, scale(t, in[0], c), coefs);
            },
            {x}, 1e-3, corrupt);
    }});

    ops.push_back({"add", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(1, 8);
        long N = dim(rng), D = dim(rng);
        auto a = rand_tensor({N, D}, rng);
        auto b = rand_tensor({N, D}, rng);
        auto coefs = rand_coefs(N * D, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, add(t, in[0], in[1]), coefs);
            },
            {a, b}, 1e-3, corrupt);
    }});

    ops.push_back({"gather_rows", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(3, 8);
        long R = dim(rng), D = dim(rng);
        auto x = rand_tensor({R, D}, rng);
        std::uniform_int_distribution<long> pick(0, R - 1);
        std::vector<long> idx = {pick(rng), pick(rng), pick(rng)};
        auto coefs = rand_coefs(static_cast<long>(idx.size()) * D, rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, gather_rows(t, in[0], idx), coefs);
            },
            {x}, 1e-3, corrupt);
    }});

    ops.push_back({"flatten_anchor_major", [](std::uint64_t seed, const std::string& corrupt) {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<int> dim(2, 4);
        long K = dim(rng), H = dim(rng), W = dim(rng), cpa = 4;
        auto x = rand_tensor({2, K * cpa, H, W}, rng);
        auto coefs = rand_coefs(x.numel(), rng);
        return grad_check(
            [&](Tape<double>& t, const std::vector<int>& in) {
                return weighted_sum(t, flatten_anchor_major(t, in[0], cpa), coefs);
            },
            {x}, 1e-3, corrupt);
    }});

    return ops;
}

struct GradCheckRow {
    std::string op;
    double max_rel_err = 0;
    bool pass = false;
};

/// Runs every registered op over `rounds` random shapes; tolerance 1e-4.
inline std::vector<GradCheckRow> run_gradcheck_suite(int rounds = 5,
                                                     const std::string& corrupt = "",
                                                     std::uint64_t base_seed = 20180213) {
    std::vector<GradCheckRow> rows;
    for (const auto& op : gradcheck_registry()) {
        GradCheckRow row{op.name, 0, false};
        for (int r = 0; r < rounds; ++r)
            row.max_rel_err = std::max(row.max_rel_err, op.run(base_seed + r, corrupt));
        row.pass = row.max_rel_err < 1e-4;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace nucleo
