#pragma once

// Partially persistent ordered set over a chain of epochs. Each epoch is a
// buffered tree built from the set as it stood when the previous epoch used
// up its update budget; versions are routed to the epoch that created them.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "pbeps/beps_tree.hpp"
#include "pbeps/block_store.hpp"
#include "pbeps/core_types.hpp"

namespace pbeps {

struct SetOptions {
    double epsilon = 0.5;
    double rebuild_fraction = 0.5;
    FlushPolicy policy = FlushPolicy::overflow;
};

/// Dense per-version array of root addresses, B entries per block. The list
/// of its blocks is kept in memory.
class RootIndex {
public:
    void push(BlockStore& store, BlockAddress root);
    BlockAddress get(BlockStore& store, std::uint64_t i) const;
    BlockAddress inspect(const BlockStore& store, std::uint64_t i) const;
    std::uint64_t size() const noexcept { return size_; }
    std::span<const BlockAddress> blocks() const noexcept { return blocks_; }
    void release(BlockStore& store);

private:
    std::vector<BlockAddress> blocks_;
    std::uint64_t size_ = 0;
};

struct Epoch {
    Version version_lo = 0;
    std::uint64_t nbar = 0;
    std::uint64_t update_count = 0;
    bool live = true;
    RootIndex roots;
    std::unique_ptr<BufferedTree> tree;

    const Params& params() const noexcept { return tree->params(); }
    /// Distinct roots recorded in the index plus the current root.
    std::vector<BlockAddress> distinct_roots(BlockStore& store, bool uncounted) const;
};

struct SetStats {
    Version current_version = 0;
    Version oldest_version = 0;
    std::size_t epochs = 0;
    std::uint64_t rebuilds = 0;
    std::uint64_t purged_epochs = 0;
    std::uint64_t live_blocks = 0;
    IoStats io;
    std::uint64_t tree_height = 0;
    std::uint64_t open_rectangles = 0;
    TreeStats live_tree;
};

class PersistentSet {
public:
    /// `initial` must be sorted and distinct; it becomes version 0.
    PersistentSet(std::span<const Value> initial, StoreConfig store_config, SetOptions options = {});
    PersistentSet(const PersistentSet&) = delete;
    PersistentSet& operator=(const PersistentSet&) = delete;

    Version insert(Value x);
    Version erase(Value x);

    std::optional<Value> search(Version v, Value x, SearchMode mode = SearchMode::successor);
    /// Values of version v in [x, y], increasing.
    std::vector<Value> range(Version v, Value x, Value y);

    /// Frees every epoch whose versions all lie below v. v may not exceed the
    /// first version of the live epoch.
    void purge_before(Version v);

    Version current_version() const noexcept { return version_; }
    /// Oldest version still answerable.
    Version oldest_version() const noexcept { return epochs_.front().version_lo; }

    std::size_t epoch_count() const noexcept { return epochs_.size(); }
    const Epoch& epoch(std::size_t i) const { return epochs_.at(i); }
    const Epoch& live_epoch() const { return epochs_.back(); }
    std::uint64_t rebuilds() const noexcept { return rebuilds_; }

    BlockStore& store() noexcept { return store_; }
    const BlockStore& store() const noexcept { return store_; }
    const SetOptions& options() const noexcept { return options_; }
    SetStats stats() const;

    /// Uncounted sweep of every epoch.
    InvariantReport check_invariants();
    /// Blocks reachable from epoch i (tree, rectangles, root index), uncounted.
    std::uint64_t epoch_footprint(std::size_t i);

private:
    Version apply(Value x, UpdateKind kind);
    void global_rebuild();
    void add_epoch(Version version_lo, std::span<const Value> values);
    Epoch& route(Version v);
    Rectangle open_view(Epoch& e, const Rectangle& r, Value x);

    SetOptions options_;
    BlockStore store_;
    std::vector<Epoch> epochs_;
    Version version_ = 0;
    std::uint64_t rebuilds_ = 0;
    std::uint64_t purged_ = 0;
};

}  // namespace pbeps
