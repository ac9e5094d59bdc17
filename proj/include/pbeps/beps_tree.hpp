#pragma once

// Buffered B^eps-tree over the open rectangles of one epoch.
//
// Leaves are open rectangles, internal nodes carry buffers of pending update
// records. Structural changes (finalizing rectangles, splitting nodes,
// pruning degree-one chains) are applied by path copying, so the root that
// was current when a version was created keeps answering that version.
// Node children are immutable once a later version can reach the node; only
// buffer fields are rewritten in place, and only the current tree reads them.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pbeps/block_store.hpp"
#include "pbeps/core_types.hpp"

namespace pbeps {

struct Params {
    std::uint64_t nbar = 0;          // initial size of the epoch
    std::size_t block_capacity = 0;  // B
    double epsilon = 0.5;
    double rebuild_fraction = 0.5;   // c
    std::uint64_t delta = 0;         // ceil(B^eps)
    std::uint64_t height_bound = 0;  // H = 1 + ceil(log_delta nbar)
    std::uint64_t flush_size = 0;    // F = ceil(B^(1-eps))
    std::uint64_t rect_budget = 0;   // R = H * 2 delta * F

    std::uint64_t buffer_capacity() const noexcept { return 2 * delta * flush_size; }
    /// A node reaching this degree is split.
    std::uint64_t split_degree() const noexcept { return 2 * delta; }
    /// Updates the epoch accepts before a global rebuild: ceil(c * nbar), at least 1.
    std::uint64_t update_budget() const noexcept;
    /// Epochs with fewer initial values keep a single rectangle and never finalize.
    std::uint64_t small_epoch_threshold() const noexcept;
};

/// Applies the parameter formulas with exact integer ceilings.
Params compute_params(std::uint64_t nbar, std::size_t block_capacity, double epsilon, double rebuild_fraction);

/// 1 + ceil(log_delta n) without floating point; n >= 1, delta >= 2.
std::uint64_t ceil_log(std::uint64_t delta, std::uint64_t n);
/// ceil(base^exponent), robust to pow() landing a hair above an integer.
std::uint64_t ceil_pow(double base, double exponent);

enum class FlushPolicy {
    overflow,          // flush F records to the fullest child when a buffer overflows
    path_subtraction,  // every F-th update flush one whole root-to-leaf path
};

struct ChildRef {
    Value lower = kNegInf;  // lower bound of the child's value range
    BlockAddress addr;

    friend bool operator==(const ChildRef&, const ChildRef&) = default;
};

struct TreeNode {
    BlockAddress addr;
    std::uint32_t height = 1;  // rectangles sit at height 0
    /// First version whose root may reach this node. A node born after the
    /// current version is unreachable from every recorded root and may be
    /// overwritten in place.
    Version born = 0;
    std::vector<ChildRef> children;
    BlockedList buffer;
    std::vector<BlockAddress> continuation;  // extra metadata blocks when 2*delta > B

    std::size_t degree() const noexcept { return children.size(); }
    bool children_are_rectangles() const noexcept { return height == 1; }
    /// Index of the child whose range holds x (children[0] takes everything below children[1]).
    std::size_t child_for(Value x) const noexcept;
    /// Exclusive upper bound of child i, given the node's own upper bound.
    Value child_upper(std::size_t i, Value node_upper) const noexcept {
        return i + 1 < children.size() ? children[i + 1].lower : node_upper;
    }

    static TreeNode load(BlockStore& store, BlockAddress addr);
    static TreeNode inspect(const BlockStore& store, BlockAddress addr);
    /// Writes the node to `addr` (allocating when null), reusing or growing
    /// its chain of metadata blocks.
    void save(BlockStore& store);
    /// Blocks holding the metadata of a node with this many children.
    static std::size_t meta_blocks(std::size_t degree, std::size_t capacity) noexcept;
};

/// Outcome of splitting a node's children and buffer at the middle child.
struct SplitResult {
    std::vector<ChildRef> left;
    std::vector<ChildRef> right;
    std::vector<UpdateRecord> left_buffer;
    std::vector<UpdateRecord> right_buffer;
    Value separator = kNegInf;  // right.front().lower
};

/// Distributes 2*delta children delta/delta; buffered records follow the half
/// whose range holds them.
SplitResult split_children(std::span<const ChildRef> children, std::span<const UpdateRecord> buffer);

/// Record-order-sorted buffer partitioned into per-child runs [begin, end).
std::vector<std::pair<std::size_t, std::size_t>> child_runs(const TreeNode& node,
                                                            std::span<const UpdateRecord> buffer);

struct LocateResult {
    std::vector<TreeNode> path;      // root first, parent of the rectangle last
    std::vector<std::size_t> slots;  // child index taken at each path node
    Rectangle rect;
};

struct TreeStats {
    std::uint64_t overflow_flushes = 0;
    std::uint64_t path_flushes = 0;
    std::uint64_t actualizations = 0;
    std::uint64_t finalizations = 0;     // rectangles closed on reaching R updates
    std::uint64_t early_closures = 0;    // merge partners closed early
    std::uint64_t discarded = 0;         // merge partners with an empty version span
    std::uint64_t rect_splits = 0;
    std::uint64_t rect_merges = 0;
    std::uint64_t node_splits = 0;
    std::uint64_t root_splits = 0;
    std::uint64_t chain_nodes_removed = 0;
    /// Largest per-(node, child) pending count observed after a flush round.
    std::uint64_t max_pending = 0;
    /// Largest record count received by an overflow flush target.
    std::uint64_t max_rect_received = 0;
};

struct InvariantReport {
    std::vector<std::string> violations;
    std::uint64_t tree_height = 0;
    std::uint64_t open_rectangles = 0;
    std::uint64_t closed_rectangles = 0;
    std::uint64_t max_buffer = 0;

    bool ok() const noexcept { return violations.empty(); }
};

class BufferedTree {
public:
    /// Builds the initial tree over `initial` (sorted, distinct), base
    /// records stamped with `version_lo`.
    BufferedTree(BlockStore& store, const Params& params, FlushPolicy policy, Version version_lo,
                 std::span<const Value> initial);

    BufferedTree(const BufferedTree&) = delete;
    BufferedTree& operator=(const BufferedTree&) = delete;

    const Params& params() const noexcept { return params_; }
    FlushPolicy policy() const noexcept { return policy_; }
    bool small() const noexcept { return small_; }
    bool frozen() const noexcept { return frozen_; }
    BlockAddress root() const noexcept { return root_; }
    Version version_lo() const noexcept { return version_lo_; }
    Version current_version() const noexcept { return version_; }
    const TreeStats& stats() const noexcept { return stats_; }
    std::span<const UpdateRecord> root_buffer() const noexcept { return root_buffer_; }

    /// Adds a record of the current version to the in-memory root buffer and
    /// runs the flushing policy.
    void insert_update(const UpdateRecord& rec);

    /// Descends from `root` (any recorded root of this tree) to the rectangle
    /// whose value range holds x.
    LocateResult locate(BlockAddress root, Value x);

    /// Moves every buffered record for the open rectangle holding x into it,
    /// finalizing it when its budget is met. Returns the rectangle header as
    /// it stands afterwards (possibly closed).
    Rectangle actualize(Value x);

    /// Actualizes every open rectangle without finalizing, empties all
    /// buffers and stops further structural change. Used before an epoch is
    /// retired.
    void freeze();

    /// Values alive at the current version, read left to right from the
    /// open rectangles. Requires a frozen tree.
    std::vector<Value> current_values();

    std::uint64_t height() const noexcept { return root_height_; }
    std::uint64_t open_rectangle_count() const noexcept { return open_rects_; }
    /// Root splits that pushed the height past H (expected to stay 0).
    std::uint64_t height_violations() const noexcept { return height_violations_; }

    /// Uncounted full sweep of the current tree plus every rectangle reachable
    /// from `roots`.
    InvariantReport check_invariants(std::span<const BlockAddress> roots) const;

    /// Every block reachable from `roots` (node metadata, live buffers,
    /// rectangle headers and lists). Counted reads unless `uncounted`.
    std::vector<BlockAddress> reachable_blocks(std::span<const BlockAddress> roots, bool uncounted) const;

    /// Largest per-(node, child) pending count in the current tree (uncounted).
    std::uint64_t pending_max() const;

private:
    /// Shared descent of both policies. `overflow` stops at the first buffer
    /// within capacity and always moves F records; otherwise at most F records
    /// move at every node down to a rectangle.
    void flush_down(bool overflow);

    std::vector<UpdateRecord> buffer_of(const TreeNode& node, std::size_t depth,
                                        std::vector<BlockAddress>* chain = nullptr);
    void store_buffer(TreeNode& node, std::size_t depth, std::vector<UpdateRecord> records,
                      std::span<const BlockAddress> old_chain);
    void deliver(std::vector<TreeNode>& path, std::vector<std::size_t>& slots, std::size_t slot,
                 std::span<const UpdateRecord> moved);

    void actualize_path(std::vector<TreeNode>& path, Rectangle& rect);
    void maybe_finalize(std::vector<TreeNode>& path, std::vector<std::size_t>& slots, Rectangle& rect);
    void finalize(std::vector<TreeNode>& path, std::vector<std::size_t>& slots, Rectangle& rect);
    void close_rectangle(Rectangle& rect, bool early);
    std::vector<ChildRef> make_rectangles(std::span<const Value> alive, Value lo, Value hi);
    /// Commits a modified working path bottom-up: splits nodes at 2*delta,
    /// copies nodes still reachable from older versions and repoints parents.
    void commit_path(std::vector<TreeNode>& path, std::vector<std::size_t>& slots);
    BlockAddress commit_node(TreeNode& node);

    BlockStore& store_;
    Params params_;
    FlushPolicy policy_;
    Version version_lo_;
    Version version_;
    bool small_ = false;
    bool frozen_ = false;
    BlockAddress root_;
    std::uint32_t root_height_ = 1;
    std::vector<UpdateRecord> root_buffer_;  // lives in internal memory
    std::uint64_t updates_since_path_flush_ = 0;
    TreeStats stats_;
    std::uint64_t open_rects_ = 0;
    std::uint64_t height_violations_ = 0;
};

}  // namespace pbeps
