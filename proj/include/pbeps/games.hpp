#pragma once

// Subtraction and zeroing games on n non-negative variables. Each round an
// adversary adds deltas summing to at most one unit, then a largest variable
// loses one unit (subtraction) or is reset (zeroing). Templated on the number
// type so bounds can be checked in doubles or exactly in rationals.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "pbeps/errors.hpp"

namespace pbeps::games {

using Rational = boost::multiprecision::cpp_rational;

template <class T>
T harmonic(std::uint64_t k) {
    if (k < 1) throw Error(ErrorCode::invalid_argument, "harmonic(k) needs k >= 1");
    T h = 0;
    for (std::uint64_t j = 1; j <= k; ++j) h += T(1) / T(j);
    return h;
}

inline double harmonic(std::uint64_t k) { return harmonic<double>(k); }

/// Slack allowed on the delta sum: none for exact types.
template <class T>
T sum_slack() {
    if constexpr (std::is_floating_point_v<T>) return T(1e-12);
    else return T(0);
}

template <class T>
struct GameState {
    std::vector<T> x;
    std::uint64_t rounds = 0;

    explicit GameState(std::size_t n) : x(n, T(0)) {
        if (n < 2) throw Error(ErrorCode::invalid_argument, "games need at least 2 variables");
    }

    std::size_t size() const noexcept { return x.size(); }
    /// First index holding the maximum.
    std::size_t argmax() const noexcept {
        std::size_t j = 0;
        for (std::size_t i = 1; i < x.size(); ++i)
            if (x[i] > x[j]) j = i;
        return j;
    }
    const T& max() const noexcept { return x[argmax()]; }
};

/// Increment step. `unit` scales the game: deltas may sum to `unit`.
template <class T>
void increment(GameState<T>& s, std::span<const T> deltas, const T& unit = T(1)) {
    if (deltas.size() != s.size()) throw Error(ErrorCode::invalid_argument, "one delta per variable expected");
    T sum = 0;
    for (const auto& d : deltas) {
        if (d < 0) throw Error(ErrorCode::invalid_argument, "deltas must be non-negative");
        sum += d;
    }
    if (sum > unit + sum_slack<T>() * unit) throw Error(ErrorCode::invalid_argument, "deltas sum above one unit");
    for (std::size_t i = 0; i < s.size(); ++i) s.x[i] += deltas[i];
}

/// One subtraction round; returns the index that was decremented.
template <class T>
std::size_t subtraction_round(GameState<T>& s, std::span<const T> deltas, const T& unit = T(1)) {
    increment(s, deltas, unit);
    const std::size_t j = s.argmax();
    s.x[j] = s.x[j] > unit ? T(s.x[j] - unit) : T(0);
    ++s.rounds;
    return j;
}

/// One zeroing round; returns the index that was reset.
template <class T>
std::size_t zeroing_round(GameState<T>& s, std::span<const T> deltas, const T& unit = T(1)) {
    increment(s, deltas, unit);
    const std::size_t j = s.argmax();
    s.x[j] = T(0);
    ++s.rounds;
    return j;
}

/// Lower-bound strategy for the subtraction game: `warmup` rounds level n-1
/// variables at 1 - (1 - 1/n)^warmup, then n-2 rounds spread 1/j over the j
/// largest for j = n-1, ..., 2. Returns the final maximum,
/// H_{n-1} - (1 - 1/n)^warmup.
template <class T>
T tightness_adversary(std::size_t n, std::uint64_t warmup) {
    if (n < 3) throw Error(ErrorCode::invalid_argument, "the adversary needs n >= 3");
    GameState<T> s(n);
    std::vector<T> d(n);
    for (std::uint64_t r = 0; r < warmup; ++r) {
        // Raise every variable to the common level (sum + 1) / n.
        const T level = (std::accumulate(s.x.begin(), s.x.end(), T(0)) + T(1)) / T(n);
        for (std::size_t i = 0; i < n; ++i) d[i] = level > s.x[i] ? T(level - s.x[i]) : T(0);
        subtraction_round<T>(s, d);
    }
    std::vector<std::size_t> order(n);
    for (std::size_t j = n - 1; j >= 2; --j) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.x[a] > s.x[b]; });
        std::fill(d.begin(), d.end(), T(0));
        for (std::size_t k = 0; k < j; ++k) d[order[k]] = T(1) / T(j);
        subtraction_round<T>(s, d);
    }
    return s.max();
}

}  // namespace pbeps::games
