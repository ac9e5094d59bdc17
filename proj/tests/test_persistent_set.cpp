#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <set>
#include <unistd.h>

#include "pbeps/errors.hpp"
#include "pbeps/oracle.hpp"
#include "pbeps/persistent_set.hpp"

using namespace pbeps;

namespace {

template <class F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("no error raised");
    return ErrorCode::invariant_violation;
}

// Structure and oracle driven in lockstep.
struct Pair {
    PersistentSet set;
    Oracle oracle;
    std::set<Value> live;
    std::mt19937_64 rng;

    Pair(const std::vector<Value>& init, std::size_t B, SetOptions opts = {}, std::uint64_t seed = 1,
         std::size_t frames = 8)
        : set(init, StoreConfig{B, frames, {}}, opts), oracle(init), live(init.begin(), init.end()), rng(seed) {}

    Version insert(Value x) {
        live.insert(x);
        const auto v = set.insert(x);
        REQUIRE(v == oracle.insert(x));
        return v;
    }
    Version erase(Value x) {
        live.erase(x);
        const auto v = set.erase(x);
        REQUIRE(v == oracle.erase(x));
        return v;
    }
    void random_update(double insert_fraction, Value key_space) {
        if (live.empty() || std::bernoulli_distribution(insert_fraction)(rng)) {
            insert(static_cast<Value>(rng() % static_cast<std::uint64_t>(key_space)));
        } else {
            auto it = live.begin();
            std::advance(it, static_cast<std::ptrdiff_t>(rng() % live.size()));
            erase(*it);
        }
    }
    void check_query(Version v, Value x, Value width) {
        for (auto m : {SearchMode::successor, SearchMode::strict_successor, SearchMode::predecessor,
                       SearchMode::strict_predecessor})
            REQUIRE(set.search(v, x, m) == oracle.search(v, x, m));
        REQUIRE(set.range(v, x, x + width) == oracle.range(v, x, x + width));
    }
};

void replay_worked_example(Pair& p) {
    const Value seq[][2] = {{1, 2}, {1, 6}, {1, 7}, {0, 6}, {1, 5}, {1, 3}, {0, 3},
                            {1, 4}, {1, 6}, {0, 4}, {0, 7}, {1, 3}, {0, 2}, {0, 5}};
    Version expect = 1;
    for (const auto& s : seq) CHECK((s[0] ? p.insert(s[1]) : p.erase(s[1])) == expect++);
}

std::vector<Value> iota_values(std::size_t n, Value step = 3) {
    std::vector<Value> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Value>(i) * step;
    return v;
}

}  // namespace

TEST_CASE("fourteen-update example") {
    for (std::size_t B : {2u, 4u, 16u}) {
        Pair p({}, B);
        replay_worked_example(p);
        auto& s = p.set;
        CHECK(s.search(4, 3) == 7);
        CHECK(s.range(9, 3, 8) == std::vector<Value>{4, 5, 6, 7});
        CHECK(s.range(11, kNegInf, kPosInf) == std::vector<Value>{2, 5, 6});
        CHECK(s.search(11, 1) == 2);
        CHECK(s.search(10, 4) == 5);
        CHECK(s.search(9, 4) == 4);
        CHECK(s.search(0, 1) == std::nullopt);
        for (Version v = 0; v <= 14; ++v)
            for (Value x = 0; x <= 9; ++x) p.check_query(v, x, 4);
        CHECK(s.check_invariants().ok());
    }
}

TEST_CASE("empty and initial structures") {
    PersistentSet empty({}, StoreConfig{16, 4, {}});
    CHECK(empty.current_version() == 0);
    for (Value x : {kNegInf + 1, Value{0}, kPosInf - 1}) CHECK(empty.search(0, x) == std::nullopt);
    CHECK(empty.range(0, kNegInf, kPosInf).empty());

    const auto init = iota_values(10000, 1);
    PersistentSet s(init, StoreConfig{16, 16, {}});
    s.store().flush();
    CHECK(s.store().stats().transfers() <= 50 * (10000 / 16));
    CHECK(s.range(0, kNegInf, kPosInf) == init);
    CHECK(s.range(0, 77, 77) == std::vector<Value>{77});
    CHECK(s.search(0, 10000) == std::nullopt);
    CHECK(s.search(0, -5) == 0);
}

TEST_CASE("no-op updates take a version and change nothing") {
    Pair p({10, 20}, 4);
    CHECK(p.insert(10) == 1);
    CHECK(p.insert(10) == 2);
    CHECK(p.erase(15) == 3);
    CHECK(p.set.range(3, kNegInf, kPosInf) == std::vector<Value>{10, 20});
}

TEST_CASE("errors are typed") {
    Pair p({1, 2, 3}, 4);
    p.insert(4);
    auto& s = p.set;
    CHECK(code_of([&] { (void)s.search(2, 0); }) == ErrorCode::version_out_of_range);
    CHECK(code_of([&] { (void)s.range(1, 5, 4); }) == ErrorCode::invalid_argument);
    CHECK(code_of([&] { s.insert(kPosInf); }) == ErrorCode::invalid_argument);
    CHECK(code_of([&] { s.erase(kNegInf); }) == ErrorCode::invalid_argument);
    const std::vector<Value> bad{3, 2};
    CHECK(code_of([&] { PersistentSet t(bad, StoreConfig{4, 4, {}}); }) == ErrorCode::unsorted_input);
    CHECK(code_of([&] { PersistentSet t({}, StoreConfig{1, 4, {}}); }) == ErrorCode::invalid_config);
}

TEST_CASE("exhaustive oracle equivalence over every version") {
    struct Case {
        std::size_t B;
        double eps;
        FlushPolicy policy;
        std::size_t n;
    };
    for (const auto& c : {Case{4, 0.5, FlushPolicy::overflow, 600}, Case{8, 0.25, FlushPolicy::path_subtraction, 800},
                          Case{16, 0.75, FlushPolicy::overflow, 2000}, Case{2, 0.5, FlushPolicy::path_subtraction, 0}}) {
        CAPTURE(c.B);
        CAPTURE(c.eps);
        Pair p(iota_values(c.n), c.B, SetOptions{c.eps, 0.5, c.policy}, c.B + c.n);
        const Value space = static_cast<Value>(3 * std::max<std::size_t>(c.n, 300));
        for (int i = 0; i < 2000; ++i) p.random_update(0.5, space);
        REQUIRE(p.set.check_invariants().ok());
        for (Version v = 0; v <= p.set.current_version(); ++v) {
            const Value x = static_cast<Value>(p.rng() % static_cast<std::uint64_t>(space));
            p.check_query(v, x, space / 20);
            if (v % 100 == 0) REQUIRE(p.set.range(v, kNegInf, kPosInf) == p.oracle.set_at(v));
        }
        REQUIRE(p.set.check_invariants().ok());
    }
}

TEST_CASE("answers for a frozen version never change") {
    Pair p(iota_values(1500), 4, {}, 3);
    for (int i = 0; i < 300; ++i) p.random_update(0.5, 4500);
    const Version v = p.set.current_version();
    std::vector<Value> probes;
    for (int i = 0; i < 50; ++i) probes.push_back(static_cast<Value>(p.rng() % 4600));
    auto answer = [&] {
        std::vector<std::optional<Value>> out;
        for (Value x : probes) {
            out.push_back(p.set.search(v, x));
            out.push_back(p.set.search(v, x, SearchMode::strict_predecessor));
            const auto r = p.set.range(v, x, x + 200);
            out.push_back(static_cast<Value>(std::accumulate(r.begin(), r.end(), Value{0})));
        }
        return out;
    };
    const auto before = answer();
    for (int i = 0; i < 1500; ++i) p.random_update(0.5, 4500);
    CHECK(p.set.rebuilds() >= 1);
    CHECK(answer() == before);
}

TEST_CASE("global rebuilds preserve content and size bounds") {
    Pair p(iota_values(1000), 4, {}, 21);
    std::size_t epochs_seen = 1;
    while (p.set.rebuilds() < 10) {
        const auto before = p.set.rebuilds();
        p.random_update(0.5, 3000);
        if (p.set.rebuilds() != before) {
            ++epochs_seen;
            const auto& e = p.set.live_epoch();
            const Version last = e.version_lo - 1;
            CHECK(e.nbar == p.oracle.set_at(last).size());
            CHECK(p.set.range(last, kNegInf, kPosInf) == p.oracle.set_at(last));
        }
    }
    CHECK(p.set.epoch_count() == epochs_seen);
    for (std::size_t i = 0; i < p.set.epoch_count(); ++i) {
        const auto& e = p.set.epoch(i);
        const Version hi = i + 1 < p.set.epoch_count() ? p.set.epoch(i + 1).version_lo : p.set.current_version() + 1;
        CHECK(e.update_count <= e.params().update_budget());
        for (Version v = e.version_lo; v < hi; ++v) {
            const double size = static_cast<double>(p.oracle.set_at(v).size());
            CHECK(size >= 0.5 * static_cast<double>(e.nbar));
            CHECK(size <= 1.5 * static_cast<double>(e.nbar));
        }
        // queries at versions of every epoch; the newest may not have any yet
        for (int q = 0; q < 20 && hi > e.version_lo; ++q)
            p.check_query(e.version_lo + p.rng() % (hi - e.version_lo), static_cast<Value>(p.rng() % 3000), 90);
    }
    REQUIRE(p.set.check_invariants().ok());
}

TEST_CASE("purge frees exactly the dropped epochs") {
    Pair p(iota_values(400), 4, {}, 13);
    while (p.set.epoch_count() < 4) p.random_update(0.5, 1200);
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < p.set.epoch_count(); ++i) total += p.set.epoch_footprint(i);
    CHECK(total == p.set.store().live_blocks());

    const auto live_before = p.set.store().live_blocks();
    p.set.purge_before(0);
    CHECK(p.set.store().live_blocks() == live_before);
    CHECK(p.set.epoch_count() == 4);

    const auto fp = p.set.epoch_footprint(0);
    const Version boundary = p.set.epoch(1).version_lo;
    p.set.purge_before(boundary);
    CHECK(p.set.store().live_blocks() == live_before - fp);
    CHECK(p.set.oldest_version() == boundary);
    CHECK(p.set.epoch_count() == 3);
    CHECK(code_of([&] { (void)p.set.search(boundary - 1, 0); }) == ErrorCode::version_purged);
    CHECK(code_of([&] { p.set.purge_before(p.set.live_epoch().version_lo + 1); }) == ErrorCode::invalid_argument);
    for (Version v = boundary; v <= p.set.current_version(); v += 7) p.check_query(v, static_cast<Value>(p.rng() % 1200), 60);

    // purge below the live epoch leaves only it
    p.set.purge_before(p.set.live_epoch().version_lo);
    CHECK(p.set.epoch_count() == 1);
    CHECK(p.set.epoch_footprint(0) == p.set.store().live_blocks());
    for (int i = 0; i < 300; ++i) p.random_update(0.5, 1200);
    for (int q = 0; q < 100; ++q) {
        const Version v = p.set.oldest_version() + p.rng() % (p.set.current_version() - p.set.oldest_version() + 1);
        p.check_query(v, static_cast<Value>(p.rng() % 1200), 60);
    }
    REQUIRE(p.set.check_invariants().ok());
}

TEST_CASE("versions are consecutive") {
    PersistentSet s({}, StoreConfig{4, 4, {}});
    for (Version v = 1; v <= 200; ++v) CHECK((v % 3 ? s.insert(static_cast<Value>(v)) : s.erase(static_cast<Value>(v - 1))) == v);
}

TEST_CASE("file-backed store gives the same answers") {
    const auto path = std::filesystem::temp_directory_path() / ("pbeps_set_" + std::to_string(::getpid()) + ".bin");
    std::filesystem::remove(path);
    {
        PersistentSet file(iota_values(500), StoreConfig{8, 8, path});
        PersistentSet mem(iota_values(500), StoreConfig{8, 8, {}});
        std::mt19937_64 rng(6);
        for (int i = 0; i < 600; ++i) {
            const Value x = static_cast<Value>(rng() % 1500);
            if (rng() % 2) {
                file.insert(x);
                mem.insert(x);
            } else {
                file.erase(x);
                mem.erase(x);
            }
        }
        for (int q = 0; q < 200; ++q) {
            const Version v = rng() % 601;
            const Value x = static_cast<Value>(rng() % 1500);
            REQUIRE(file.search(v, x) == mem.search(v, x));
            REQUIRE(file.range(v, x, x + 50) == mem.range(v, x, x + 50));
        }
        CHECK(file.store().stats() == mem.store().stats());
    }
    std::filesystem::remove(path);
}
