#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mape/linalg.hpp"
#include "mape/rng.hpp"

namespace mape {
namespace stats {

inline double median(Vec values) {
    if (values.empty()) {
        throw std::invalid_argument("median: empty input");
    }
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) {
        return values[n / 2];
    }
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// Average ranks, ties share the mean rank.
inline Vec ranks(const Vec& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) {
        order[i] = i;
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    Vec r(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

inline double pearson(const Vec& x, const Vec& y) {
    const std::size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

inline double spearman_rho(const Vec& x, const Vec& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw std::invalid_argument("spearman_rho: need two same-length samples");
    }
    return pearson(ranks(x), ranks(y));
}

// One-sided permutation test for a decreasing trend: the p-value is the
// fraction of y-permutations whose Spearman rho is <= the observed rho.
// Seeded and deterministic.
inline double spearman_downtrend_pvalue(const Vec& x, const Vec& y, int permutations = 20000,
                                        std::uint64_t seed = 12345) {
    const double observed = spearman_rho(x, y);
    Rng rng(seed);
    Vec shuffled = y;
    int at_or_below = 0;
    for (int i = 0; i < permutations; ++i) {
        rng.shuffle(shuffled);
        if (spearman_rho(x, shuffled) <= observed) {
            ++at_or_below;
        }
    }
    // add-one smoothing keeps the estimate valid at the extremes
    return (static_cast<double>(at_or_below) + 1.0) / (static_cast<double>(permutations) + 1.0);
}

}  // namespace stats
}  // namespace mape
