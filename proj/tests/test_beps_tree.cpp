#include <doctest.h>

#include <algorithm>
#include <map>
#include <random>
#include <set>

#include "pbeps/beps_tree.hpp"
#include "pbeps/errors.hpp"
#include "pbeps/games.hpp"
#include "pbeps/oracle.hpp"

using namespace pbeps;

namespace {

std::vector<Value> spaced(std::size_t n, Value step = 10) {
    std::vector<Value> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Value>(i) * step;
    return v;
}

// A tree driven directly, with the per-version roots kept by the test.
struct Harness {
    BlockStore store;
    Params params;
    BufferedTree tree;
    std::vector<BlockAddress> roots;  // roots[v] answers version v
    Oracle oracle;
    std::set<Value> live;
    std::mt19937_64 rng;

    Harness(std::size_t B, double eps, std::size_t frames, FlushPolicy policy, const std::vector<Value>& init,
            std::uint64_t seed = 1)
        : store(StoreConfig{B, frames, {}}),
          params(compute_params(std::max<std::uint64_t>(1, init.size()), B, eps, 0.5)),
          tree(store, params, policy, 0, init),
          roots{tree.root()},
          oracle(init),
          live(init.begin(), init.end()),
          rng(seed) {}

    Version version() const { return roots.size() - 1; }

    void update(Value x, UpdateKind k) {
        roots.push_back(tree.root());
        tree.insert_update(UpdateRecord{x, version(), k, false});
        oracle.apply(k, x);
        if (k == UpdateKind::insert)
            live.insert(x);
        else
            live.erase(x);
    }

    void random_update(double insert_fraction, Value key_space) {
        std::bernoulli_distribution coin(insert_fraction);
        if (live.empty() || coin(rng)) {
            update(static_cast<Value>(rng() % static_cast<std::uint64_t>(key_space)), UpdateKind::insert);
        } else {
            auto it = live.begin();
            std::advance(it, static_cast<std::ptrdiff_t>(rng() % live.size()));
            update(*it, UpdateKind::erase);
        }
    }

    std::vector<BlockAddress> distinct_roots() const {
        auto r = roots;
        r.push_back(tree.root());
        std::sort(r.begin(), r.end());
        r.erase(std::unique(r.begin(), r.end()), r.end());
        return r;
    }

    // Every rectangle header in the store, found by scanning all blocks.
    std::vector<Rectangle> all_rectangles() const {
        std::vector<Rectangle> out;
        for (auto b : store.allocated())
            if (store.inspect(b).kind == static_cast<std::uint32_t>(BlockKind::rectangle))
                out.push_back(Rectangle::inspect(store, b));
        return out;
    }
};

void require_invariants(Harness& h) {
    const auto rep = h.tree.check_invariants(h.distinct_roots());
    for (const auto& v : rep.violations) INFO(v);
    REQUIRE(rep.ok());
    REQUIRE(h.tree.height_violations() == 0);
}

}  // namespace

TEST_CASE("compute_params follows the formulas") {
    auto p = compute_params(256, 16, 0.5, 0.5);
    CHECK(p.delta == 4);
    CHECK(p.height_bound == 5);
    CHECK(p.flush_size == 4);
    CHECK(p.rect_budget == 160);

    p = compute_params(16, 4, 0.5, 0.5);
    CHECK(p.delta == 2);
    CHECK(p.height_bound == 5);
    CHECK(p.flush_size == 2);
    CHECK(p.rect_budget == 40);

    p = compute_params(1, 2, 0.5, 0.5);
    CHECK(p.delta == 2);
    CHECK(p.height_bound == 1);
    CHECK(p.flush_size == 2);
    CHECK(p.rect_budget == 8);  // H * 2 delta * F

    CHECK(p.buffer_capacity() == 8);
    CHECK(compute_params(1000, 16, 0.5, 0.5).update_budget() == 500);
    CHECK(compute_params(3, 16, 0.5, 0.5).update_budget() == 2);
}

TEST_CASE("compute_params rejects out-of-range inputs") {
    CHECK_THROWS_AS(compute_params(0, 16, 0.5, 0.5), Error);
    CHECK_THROWS_AS(compute_params(10, 1, 0.5, 0.5), Error);
    CHECK_THROWS_AS(compute_params(10, 16, 0.0, 0.5), Error);
    CHECK_THROWS_AS(compute_params(10, 16, 1.0, 0.5), Error);
    CHECK_THROWS_AS(compute_params(10, 16, 0.5, 0.0), Error);
    CHECK_THROWS_AS(compute_params(10, 16, 0.5, 1.0), Error);
}

TEST_CASE("params hold their invariants over a grid") {
    for (std::size_t B : {2u, 3u, 4u, 16u, 64u, 100u, 256u, 1024u})
        for (double eps : {0.1, 0.25, 1.0 / 3.0, 0.5, 0.75, 0.9})
            for (std::uint64_t n : {1ull, 2ull, 17ull, 1000ull, 1ull << 40}) {
                const auto p = compute_params(n, B, eps, 0.5);
                CHECK(p.delta >= 2);
                CHECK(p.flush_size >= 1);
                CHECK(p.rect_budget >= B);
                // smallest power of delta reaching n
                unsigned __int128 pw = 1;
                for (std::uint64_t i = 1; i < p.height_bound; ++i) pw *= p.delta;
                CHECK(pw >= n);
                if (p.height_bound > 1) CHECK(pw / p.delta < n);
            }
}

TEST_CASE("integer ceilings are exact") {
    CHECK(ceil_pow(16, 0.5) == 4);
    CHECK(ceil_pow(64, 1.0 / 3.0) == 4);
    CHECK(ceil_pow(1000, 1.0 / 3.0) == 10);
    CHECK(ceil_pow(2, 0.5) == 2);
    CHECK(ceil_pow(17, 0.5) == 5);
    CHECK(ceil_log(2, 1) == 0);
    CHECK(ceil_log(2, 2) == 1);
    CHECK(ceil_log(4, 256) == 4);
    CHECK(ceil_log(4, 257) == 5);
    CHECK(ceil_log(10, 1000000) == 6);
}

TEST_CASE("split_children partitions children and buffer") {
    std::mt19937_64 rng(9);
    for (std::size_t delta : {2u, 3u, 8u}) {
        std::vector<ChildRef> kids;
        for (std::size_t i = 0; i < 2 * delta; ++i)
            kids.push_back(ChildRef{i == 0 ? kNegInf : static_cast<Value>(i * 100), BlockAddress{i + 1}});
        std::vector<UpdateRecord> buf;
        for (int i = 0; i < 50; ++i)
            buf.push_back(UpdateRecord{static_cast<Value>(rng() % (200 * delta)) - 50, rng() % 9, UpdateKind::insert,
                                       false});
        std::sort(buf.begin(), buf.end(), RecordLess{});

        const auto s = split_children(kids, buf);
        CHECK(s.left.size() == delta);
        CHECK(s.right.size() == delta);
        CHECK(s.separator == s.right.front().lower);
        CHECK(s.left_buffer.size() + s.right_buffer.size() == buf.size());
        for (const auto& r : s.left_buffer) CHECK(r.value < s.separator);
        for (const auto& r : s.right_buffer) CHECK(r.value >= s.separator);
        auto joined = s.left_buffer;
        joined.insert(joined.end(), s.right_buffer.begin(), s.right_buffer.end());
        CHECK(joined == buf);

        const auto e = split_children(kids, {});
        CHECK(e.left_buffer.empty());
        CHECK(e.right_buffer.empty());
    }
}

TEST_CASE("child_runs covers the buffer with per-child runs") {
    TreeNode n;
    n.children = {ChildRef{kNegInf, BlockAddress{1}}, ChildRef{10, BlockAddress{2}}, ChildRef{20, BlockAddress{3}}};
    std::vector<UpdateRecord> buf;
    for (Value x : {-5, 3, 10, 10, 15, 25, 1000}) buf.push_back(UpdateRecord{x, 1, UpdateKind::insert, false});
    const auto runs = child_runs(n, buf);
    REQUIRE(runs.size() == 3);
    CHECK(runs[0] == std::pair<std::size_t, std::size_t>{0, 2});
    CHECK(runs[1] == std::pair<std::size_t, std::size_t>{2, 5});
    CHECK(runs[2] == std::pair<std::size_t, std::size_t>{5, 7});
    CHECK(n.child_for(-100) == 0);
    CHECK(n.child_for(9) == 0);
    CHECK(n.child_for(10) == 1);
    CHECK(n.child_for(kPosInf - 1) == 2);
}

TEST_CASE("initial build packs the values into a balanced tree") {
    Harness h(4, 0.5, 8, FlushPolicy::overflow, spaced(20000));
    CHECK_FALSE(h.tree.small());
    const auto rects = h.all_rectangles();
    CHECK(rects.size() == h.tree.open_rectangle_count());
    const auto R = h.params.rect_budget;
    for (const auto& r : rects) {
        CHECK(r.records.size >= 4 * R);
        CHECK(r.records.size < 8 * R);
        CHECK(r.open);
    }
    CHECK(h.tree.height() <= h.params.height_bound);
    require_invariants(h);
}

TEST_CASE("overflow moves F records to the child owning the most") {
    // B=16, eps=1/2: delta = F = 4, buffer capacity 32.
    Harness h(16, 0.5, 16, FlushPolicy::overflow, spaced(20000));
    const auto cap = h.params.buffer_capacity();
    const auto F = h.params.flush_size;
    const TreeNode root = TreeNode::inspect(h.store, h.tree.root());
    REQUIRE(root.degree() >= 2);

    SUBCASE("one child owns everything") {
        for (std::uint64_t i = 0; i < cap; ++i) h.update(static_cast<Value>(1 + i), UpdateKind::insert);
        CHECK(h.tree.stats().overflow_flushes == 0);
        CHECK(h.tree.root_buffer().size() == cap);
        h.update(static_cast<Value>(1 + cap), UpdateKind::insert);
        CHECK(h.tree.stats().overflow_flushes == 1);
        CHECK(h.tree.root_buffer().size() == cap + 1 - F);
        // the F smallest moved down
        CHECK(h.tree.root_buffer().front().value == static_cast<Value>(1 + F));
    }
    SUBCASE("spread records: the fullest child receives exactly F") {
        std::mt19937_64 rng(4);
        for (std::uint64_t i = 0; i < cap; ++i) h.update(static_cast<Value>(rng() % 200000), UpdateKind::insert);
        CHECK(h.tree.stats().overflow_flushes == 0);
        std::vector<UpdateRecord> before(h.tree.root_buffer().begin(), h.tree.root_buffer().end());
        const Value last = static_cast<Value>(rng() % 200000);
        h.update(last, UpdateKind::insert);
        CHECK(h.tree.stats().overflow_flushes == 1);
        before.push_back(UpdateRecord{last, h.version(), UpdateKind::insert, false});
        std::sort(before.begin(), before.end(), RecordLess{});
        const std::vector<UpdateRecord> after(h.tree.root_buffer().begin(), h.tree.root_buffer().end());
        std::vector<UpdateRecord> moved;
        std::set_difference(before.begin(), before.end(), after.begin(), after.end(), std::back_inserter(moved),
                            RecordLess{});
        REQUIRE(moved.size() == F);
        std::map<std::size_t, std::size_t> owners;
        for (const auto& r : before) ++owners[root.child_for(r.value)];
        const std::size_t target = root.child_for(moved.front().value);
        for (const auto& r : moved) CHECK(root.child_for(r.value) == target);
        std::size_t most = 0;
        for (auto [c, k] : owners) most = std::max(most, k);
        CHECK(owners[target] == most);
        CHECK(most >= F);  // pigeonhole over at most 2 delta - 1 children
    }
}

TEST_CASE("path policy: no transfers until the F-th update") {
    Harness h(16, 0.5, 16, FlushPolicy::path_subtraction, spaced(20000));
    const auto F = h.params.flush_size;
    h.store.flush();
    const auto before = h.store.stats();
    for (std::uint64_t i = 0; i + 1 < F; ++i) h.update(static_cast<Value>(5 + 10 * i), UpdateKind::insert);
    CHECK(h.store.stats() == before);
    CHECK(h.tree.stats().path_flushes == 0);
    h.update(7, UpdateKind::insert);
    CHECK(h.tree.stats().path_flushes == 1);
    CHECK(h.tree.root_buffer().size() == 0);  // all F went to one child
}

TEST_CASE("actualize moves exactly the pending records of one rectangle") {
    Harness h(16, 0.5, 16, FlushPolicy::overflow, spaced(20000));
    const auto before = h.tree.locate(h.tree.root(), 3).rect;
    for (int i = 0; i < 20; ++i) h.update(1 + i, UpdateKind::insert);
    h.update(before.value_hi + 5, UpdateKind::insert);  // another rectangle's record stays
    const auto after = h.tree.actualize(3);
    CHECK(after.addr == before.addr);
    CHECK(after.received_updates == before.received_updates + 20);
    CHECK(h.tree.root_buffer().size() == 1);
    const auto recs = after.records.load(h.store);
    CHECK(std::is_sorted(recs.begin(), recs.end(), RecordLess{}));

    // Nothing left to move: cost is the descent plus the header.
    BlockStore& s = h.store;
    s.flush();
    for (int i = 0; i < 64; ++i) (void)s.allocate();  // cool the cache
    const auto io0 = s.stats();
    (void)h.tree.actualize(3);
    const auto io = s.stats() - io0;
    CHECK(io.reads <= h.tree.height() + 1);
    CHECK(io.allocs == 0);
}

TEST_CASE("random workloads keep every invariant and agree with a rectangle scan") {
    struct Case {
        std::size_t B;
        double eps;
        FlushPolicy policy;
        std::size_t n;
        double insert_fraction;
    };
    for (const auto& c : {Case{4, 0.5, FlushPolicy::overflow, 4000, 0.5}, Case{8, 0.5, FlushPolicy::path_subtraction, 4000, 0.5},
                          Case{4, 0.25, FlushPolicy::overflow, 3000, 0.2}, Case{16, 0.75, FlushPolicy::overflow, 3000, 0.8},
                          Case{4, 0.5, FlushPolicy::path_subtraction, 3000, 0.2}}) {
        CAPTURE(c.B);
        CAPTURE(c.eps);
        CAPTURE(c.n);
        Harness h(c.B, c.eps, 8, c.policy, spaced(c.n), c.B * 31 + c.n);
        const auto budget = h.params.update_budget();
        for (std::uint64_t i = 0; i < budget; ++i) {
            h.random_update(c.insert_fraction, static_cast<Value>(10 * c.n));
            if (i % 500 == 499) require_invariants(h);
        }
        require_invariants(h);
        CHECK(h.tree.stats().finalizations > 0);

        // Closed rectangles tile the plane: each (x, v) has exactly one owner,
        // and locate through root v finds it.
        const auto rects = h.all_rectangles();
        const auto R = h.params.rect_budget;
        for (const auto& r : rects) {
            if (r.open || r.closed_early) continue;
            CHECK(r.received_updates >= R);
            CHECK(r.received_updates <= 2 * R);
        }
        std::mt19937_64 rng(c.n);
        for (int q = 0; q < 1000; ++q) {
            const Version v = rng() % (h.version() + 1);
            const Value x = static_cast<Value>(rng() % (12 * c.n)) - static_cast<Value>(c.n);
            std::vector<BlockAddress> owners;
            for (const auto& r : rects)
                if (r.contains_value(x) && r.contains_version(v)) owners.push_back(r.addr);
            REQUIRE(owners.size() == 1);
            const auto loc = h.tree.locate(h.roots[v], x);
            CHECK(loc.rect.addr == owners.front());
            CHECK(loc.path.size() <= h.params.height_bound);
            // x below every separator takes the leftmost child everywhere
            if (x < 0)
                for (auto s : loc.slots) CHECK(s == 0);
        }

        h.tree.freeze();
        CHECK(h.tree.current_values() == h.oracle.set_at(h.version()));
    }
}

TEST_CASE("old roots keep their structure") {
    Harness h(4, 0.5, 8, FlushPolicy::overflow, spaced(3000), 77);
    std::map<std::uint64_t, std::vector<ChildRef>> snapshot;
    std::map<std::uint64_t, std::pair<Version, Version>> spans;
    auto take = [&] {
        std::set<std::uint64_t> seen;
        std::vector<std::pair<BlockAddress, std::uint32_t>> stack;
        for (std::size_t v = 0; v < h.roots.size(); ++v) stack.emplace_back(h.roots[v], 0);
        while (!stack.empty()) {
            const auto [b, depth] = stack.back();
            stack.pop_back();
            if (!seen.insert(b.id).second) continue;
            const auto n = TreeNode::inspect(h.store, b);
            snapshot.emplace(b.id, n.children);
            if (n.height > 1)
                for (const auto& c : n.children) stack.emplace_back(c.addr, depth + 1);
        }
        for (const auto& r : h.all_rectangles())
            if (!r.open) spans.emplace(r.addr.id, std::pair{r.version_lo, r.version_hi});
    };
    for (int i = 0; i < 700; ++i) {
        h.random_update(0.5, 30000);
        if (i % 100 == 0) take();
    }
    CHECK(h.tree.stats().finalizations > 0);
    CHECK_FALSE(snapshot.empty());
    for (const auto& [id, kids] : snapshot) {
        REQUIRE(h.store.is_allocated(BlockAddress{id}));
        CHECK(TreeNode::inspect(h.store, BlockAddress{id}).children == kids);
    }
    for (const auto& [id, span] : spans) {
        const auto r = Rectangle::inspect(h.store, BlockAddress{id});
        CHECK(r.version_lo == span.first);
        CHECK(r.version_hi == span.second);
    }
}

TEST_CASE("path policy keeps pending counts within the game bound") {
    for (std::size_t B : {4u, 16u, 64u}) {
        Harness h(B, 0.5, 16, FlushPolicy::path_subtraction, spaced(6000), B);
        const auto F = h.params.flush_size;
        const auto bound = static_cast<std::uint64_t>(
            static_cast<double>(F) * (games::harmonic(2 * h.params.delta - 1) + 1.0));
        const TreeNode root = TreeNode::inspect(h.store, h.tree.root());
        // round-robin over the root's children
        std::vector<Value> targets;
        for (const auto& c : root.children) targets.push_back(c.lower == kNegInf ? -1000 : c.lower + 1);
        for (std::uint64_t i = 0; i < h.params.update_budget(); ++i) {
            const Value x = targets[i % targets.size()] + static_cast<Value>(2 * (i / targets.size()) % 9);
            h.update(x, i % 2 ? UpdateKind::erase : UpdateKind::insert);
            REQUIRE(h.tree.pending_max() <= bound);
        }
        CHECK(h.tree.stats().max_pending <= bound);
        require_invariants(h);
    }
}

TEST_CASE("small epochs keep a single rectangle") {
    Harness h(4, 0.5, 4, FlushPolicy::overflow, spaced(10));
    CHECK(h.tree.small());
    for (int i = 0; i < 400; ++i) h.random_update(0.5, 1000);
    CHECK(h.tree.stats().finalizations == 0);
    CHECK(h.tree.open_rectangle_count() == 1);
    require_invariants(h);
    h.tree.freeze();
    CHECK(h.tree.current_values() == h.oracle.set_at(h.version()));
}

TEST_CASE("bad initial input is rejected") {
    BlockStore s(StoreConfig{4, 4, {}});
    const auto p = compute_params(3, 4, 0.5, 0.5);
    const std::vector<Value> unsorted{3, 1, 2}, dup{1, 1, 2}, sentinel{kNegInf, 1, 2};
    CHECK_THROWS_AS(BufferedTree(s, p, FlushPolicy::overflow, 0, unsorted), Error);
    CHECK_THROWS_AS(BufferedTree(s, p, FlushPolicy::overflow, 0, dup), Error);
    CHECK_THROWS_AS(BufferedTree(s, p, FlushPolicy::overflow, 0, sentinel), Error);
}

TEST_CASE("space per finalization is O(R/B + H) blocks") {
    Harness h(8, 0.5, 8, FlushPolicy::overflow, spaced(4000), 5);
    const auto start = h.store.live_blocks();
    const auto updates = h.params.update_budget();
    for (std::uint64_t i = 0; i < updates; ++i) h.random_update(0.5, 40000);
    const auto& st = h.tree.stats();
    REQUIRE(st.finalizations > 0);
    const double grown = static_cast<double>(h.store.live_blocks() - start);
    const double per = grown / static_cast<double>(st.finalizations);
    const double unit = static_cast<double>(h.params.rect_budget) / 8.0 + static_cast<double>(h.params.height_bound);
    CHECK(per <= 16.0 * unit);
}
