#include "pbeps/persistent_set.hpp"

#include <algorithm>
#include <unordered_set>

#include "pbeps/errors.hpp"

namespace pbeps {

void RootIndex::push(BlockStore& store, BlockAddress root) {
    const std::size_t cap = store.block_capacity();
    if (size_ % cap == 0) {
        const BlockAddress b = store.allocate();
        store.write(b).kind = static_cast<std::uint32_t>(BlockKind::root_index);
        blocks_.push_back(b);
    }
    Block& blk = store.write(blocks_.back());
    blk.entries[size_ % cap] = BlockEntry{0, root.id, 0};
    blk.count = static_cast<std::uint32_t>(size_ % cap + 1);
    ++size_;
}

BlockAddress RootIndex::get(BlockStore& store, std::uint64_t i) const {
    if (i >= size_) throw Error(ErrorCode::version_out_of_range, "no root recorded for this version");
    const std::size_t cap = store.block_capacity();
    return BlockAddress{store.read(blocks_[i / cap]).entries[i % cap].word};
}

BlockAddress RootIndex::inspect(const BlockStore& store, std::uint64_t i) const {
    const std::size_t cap = store.block_capacity();
    return BlockAddress{store.inspect(blocks_[i / cap]).entries[i % cap].word};
}

void RootIndex::release(BlockStore& store) {
    for (auto b : blocks_) store.free(b);
    blocks_.clear();
    size_ = 0;
}

std::vector<BlockAddress> Epoch::distinct_roots(BlockStore& store, bool uncounted) const {
    std::vector<BlockAddress> out;
    for (std::size_t b = 0; b < roots.blocks().size(); ++b) {
        const Block blk = uncounted ? store.inspect(roots.blocks()[b]) : Block(store.read(roots.blocks()[b]));
        for (std::uint32_t i = 0; i < blk.count; ++i) {
            const BlockAddress r{blk.entries[i].word};
            if (out.empty() || out.back() != r) out.push_back(r);
        }
    }
    out.push_back(tree->root());
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

PersistentSet::PersistentSet(std::span<const Value> initial, StoreConfig store_config, SetOptions options)
    : options_(options), store_(store_config) {
    add_epoch(0, initial);
    // Version 0 exists from the start; later epochs record their first root
    // when their first update arrives.
    auto& e = epochs_.back();
    e.roots.push(store_, e.tree->root());
}

void PersistentSet::add_epoch(Version version_lo, std::span<const Value> values) {
    Epoch e;
    e.version_lo = version_lo;
    e.nbar = values.size();
    const Params p = compute_params(std::max<std::uint64_t>(1, values.size()), store_.block_capacity(),
                                    options_.epsilon, options_.rebuild_fraction);
    e.tree = std::make_unique<BufferedTree>(store_, p, options_.policy, version_lo, values);
    epochs_.push_back(std::move(e));
}

Version PersistentSet::insert(Value x) { return apply(x, UpdateKind::insert); }
Version PersistentSet::erase(Value x) { return apply(x, UpdateKind::erase); }

Version PersistentSet::apply(Value x, UpdateKind kind) {
    if (!is_storable(x)) throw Error(ErrorCode::invalid_argument, "sentinel values cannot be stored");
    ++version_;
    Epoch& e = epochs_.back();
    e.roots.push(store_, e.tree->root());
    e.tree->insert_update(UpdateRecord{x, version_, kind, false});
    if (++e.update_count >= e.params().update_budget()) global_rebuild();
    return version_;
}

void PersistentSet::global_rebuild() {
    Epoch& old = epochs_.back();
    old.tree->freeze();
    const auto values = old.tree->current_values();
    old.live = false;
    ++rebuilds_;
    add_epoch(version_ + 1, values);
}

Epoch& PersistentSet::route(Version v) {
    if (v > version_) throw Error(ErrorCode::version_out_of_range, "version " + std::to_string(v) + " not yet created");
    if (v < epochs_.front().version_lo) throw Error(ErrorCode::version_purged, "version " + std::to_string(v) + " purged");
    auto it = std::upper_bound(epochs_.begin(), epochs_.end(), v,
                               [](Version x, const Epoch& e) { return x < e.version_lo; });
    return *(it - 1);
}

Rectangle PersistentSet::open_view(Epoch& e, const Rectangle& r, Value x) {
    if (!r.open || !e.live) return r;
    e.tree->actualize(x);
    return Rectangle::load(store_, r.addr);
}

namespace {

using Group = std::span<const UpdateRecord>;

template <class F>
void for_each_group(std::span<const UpdateRecord> recs, F&& f) {
    for (std::size_t i = 0; i < recs.size();) {
        std::size_t e = i;
        while (e < recs.size() && recs[e].value == recs[i].value) ++e;
        if (!f(recs.subspan(i, e - i))) return;
        i = e;
    }
}

std::optional<Value> first_alive(std::span<const UpdateRecord> recs, Version v, Value x, bool strict) {
    std::optional<Value> out;
    for_each_group(recs, [&](Group g) {
        const Value val = g.front().value;
        if (val < x || (strict && val == x)) return true;
        if (alive_at(g, v)) {
            out = val;
            return false;
        }
        return true;
    });
    return out;
}

std::optional<Value> last_alive(std::span<const UpdateRecord> recs, Version v, Value x, bool strict) {
    std::optional<Value> out;
    for_each_group(recs, [&](Group g) {
        const Value val = g.front().value;
        if (val > x || (strict && val == x)) return false;
        if (alive_at(g, v)) out = val;
        return true;
    });
    return out;
}

}  // namespace

std::optional<Value> PersistentSet::search(Version v, Value x, SearchMode mode) {
    Epoch& e = route(v);
    const BlockAddress root = e.roots.get(store_, v - e.version_lo);
    const bool forward = mode == SearchMode::successor || mode == SearchMode::strict_successor;
    const bool strict = mode == SearchMode::strict_successor || mode == SearchMode::strict_predecessor;
    Value probe = x;
    for (;;) {
        const Rectangle r = open_view(e, e.tree->locate(root, probe).rect, probe);
        const auto recs = r.records.load(store_);
        const auto hit = forward ? first_alive(recs, v, x, strict) : last_alive(recs, v, x, strict);
        if (hit) return hit;
        if (forward) {
            if (r.value_hi == kPosInf) return std::nullopt;
            probe = r.value_hi;
        } else {
            if (r.value_lo == kNegInf) return std::nullopt;
            probe = r.value_lo - 1;
        }
    }
}

std::vector<Value> PersistentSet::range(Version v, Value x, Value y) {
    if (x > y) throw Error(ErrorCode::invalid_argument, "range needs x <= y");
    Epoch& e = route(v);
    const BlockAddress root = e.roots.get(store_, v - e.version_lo);
    std::vector<Value> out;
    Value probe = x;
    for (;;) {
        const Rectangle r = open_view(e, e.tree->locate(root, probe).rect, probe);
        const auto recs = r.records.load(store_);
        const auto vals = alive_values(recs, v, std::max(x, r.value_lo), y);
        out.insert(out.end(), vals.begin(), vals.end());
        if (r.value_hi == kPosInf || r.value_hi > y) return out;
        probe = r.value_hi;
    }
}

void PersistentSet::purge_before(Version v) {
    if (v > epochs_.back().version_lo)
        throw Error(ErrorCode::invalid_argument, "purge threshold lies inside the live epoch");
    std::size_t drop = 0;
    while (drop + 1 < epochs_.size() && epochs_[drop + 1].version_lo <= v) ++drop;
    for (std::size_t i = 0; i < drop; ++i) {
        Epoch& e = epochs_[i];
        const auto roots = e.distinct_roots(store_, false);
        for (auto b : e.tree->reachable_blocks(roots, false)) store_.free(b);
        e.roots.release(store_);
    }
    epochs_.erase(epochs_.begin(), epochs_.begin() + static_cast<std::ptrdiff_t>(drop));
    purged_ += drop;
}

SetStats PersistentSet::stats() const {
    SetStats s;
    s.current_version = version_;
    s.oldest_version = oldest_version();
    s.epochs = epochs_.size();
    s.rebuilds = rebuilds_;
    s.purged_epochs = purged_;
    s.live_blocks = store_.live_blocks();
    s.io = store_.stats();
    s.tree_height = epochs_.back().tree->height();
    s.open_rectangles = epochs_.back().tree->open_rectangle_count();
    s.live_tree = epochs_.back().tree->stats();
    return s;
}

InvariantReport PersistentSet::check_invariants() {
    InvariantReport all;
    for (std::size_t i = 0; i < epochs_.size(); ++i) {
        const auto roots = epochs_[i].distinct_roots(store_, true);
        auto rep = epochs_[i].tree->check_invariants(roots);
        for (auto& v : rep.violations) all.violations.push_back("epoch " + std::to_string(i) + ": " + v);
        all.open_rectangles += rep.open_rectangles;
        all.closed_rectangles += rep.closed_rectangles;
        all.max_buffer = std::max(all.max_buffer, rep.max_buffer);
        all.tree_height = std::max(all.tree_height, rep.tree_height);
    }
    return all;
}

std::uint64_t PersistentSet::epoch_footprint(std::size_t i) {
    const Epoch& e = epochs_.at(i);
    const auto roots = e.distinct_roots(store_, true);
    return e.tree->reachable_blocks(roots, true).size() + e.roots.blocks().size();
}

}  // namespace pbeps
