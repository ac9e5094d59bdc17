#pragma once

// Vocabulary of the value/version plane: a value alive in versions [v, w)
// is a vertical segment whose endpoints are update records.

#include <compare>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "pbeps/block_store.hpp"

namespace pbeps {

using Value = std::int64_t;
using Version = std::uint64_t;

/// Value-axis sentinels. Rectangles tile [kNegInf, kPosInf); stored values
/// must lie strictly between the two.
inline constexpr Value kNegInf = std::numeric_limits<Value>::min();
inline constexpr Value kPosInf = std::numeric_limits<Value>::max();
inline constexpr Version kOpenVersion = std::numeric_limits<Version>::max();

constexpr bool is_storable(Value v) noexcept { return v != kNegInf && v != kPosInf; }

enum class SearchMode {
    successor,           // min { y : x <= y }
    strict_successor,    // min { y : x < y }
    predecessor,         // max { y : y <= x }
    strict_predecessor,  // max { y : y < x }
};

enum class UpdateKind : std::uint8_t { insert = 0, erase = 1 };

struct UpdateRecord {
    Value value = 0;
    Version version = 0;
    UpdateKind kind = UpdateKind::insert;
    /// Marks a value carried into a rectangle alive at its creation.
    bool base = false;

    bool is_insert() const noexcept { return kind == UpdateKind::insert || base; }
    friend bool operator==(const UpdateRecord&, const UpdateRecord&) = default;
};

/// Lexicographic by (value, version). A base record sorts before a real
/// update of the same value at the same version: it states what held when
/// the rectangle was opened, and the update then applies on top of it.
constexpr std::strong_ordering record_order(const UpdateRecord& a, const UpdateRecord& b) noexcept {
    if (auto c = a.value <=> b.value; c != 0) return c;
    if (auto c = a.version <=> b.version; c != 0) return c;
    if (a.base != b.base) return a.base ? std::strong_ordering::less : std::strong_ordering::greater;
    return static_cast<int>(a.kind) <=> static_cast<int>(b.kind);
}

struct RecordLess {
    constexpr bool operator()(const UpdateRecord& a, const UpdateRecord& b) const noexcept {
        return record_order(a, b) < 0;
    }
};

/// `run` holds the version-sorted records of one value. True iff the latest
/// record with version <= v exists and inserts.
bool alive_at(std::span<const UpdateRecord> run, Version v) noexcept;

/// Values of a record-order-sorted list alive at version v within [lo, hi].
/// Bounds are inclusive here; callers translate half-open ranges.
std::vector<Value> alive_values(std::span<const UpdateRecord> records, Version v, Value lo, Value hi);

/// Values alive after every record of the list has been applied.
std::vector<Value> alive_at_end(std::span<const UpdateRecord> records);

inline BlockEntry encode(const UpdateRecord& r) noexcept {
    return BlockEntry{r.value, r.version, static_cast<std::uint32_t>(r.kind) | (r.base ? 2u : 0u)};
}

inline UpdateRecord decode_record(const BlockEntry& e) noexcept {
    return UpdateRecord{e.key, e.word, static_cast<UpdateKind>(e.tag & 1u), (e.tag & 2u) != 0};
}

enum class BlockKind : std::uint32_t {
    list = 1,
    rectangle = 2,
    node = 3,
    root_index = 4,
};

/// A record-order-sorted run of update records stored in a chain of blocks.
/// Every block but the last is full.
struct BlockedList {
    BlockAddress head;
    std::uint64_t size = 0;

    bool empty() const noexcept { return size == 0; }
    std::uint64_t block_count(std::size_t capacity) const noexcept { return (size + capacity - 1) / capacity; }

    /// Reads the whole chain. When `chain` is given it receives the block
    /// addresses, so the list can later be released without re-reading it.
    std::vector<UpdateRecord> load(BlockStore& store, std::vector<BlockAddress>* chain = nullptr) const;

    static BlockedList write(BlockStore& store, std::span<const UpdateRecord> records);

    /// Frees a chain whose addresses are already known.
    static void release(BlockStore& store, std::span<const BlockAddress> chain);
    /// Frees the chain, reading it to discover the addresses.
    void release(BlockStore& store) const;

    /// Addresses of the chain, read through the store (uncounted when
    /// `uncounted` is set).
    std::vector<BlockAddress> chain(BlockStore& store, bool uncounted = false) const;

    friend bool operator==(const BlockedList&, const BlockedList&) = default;
};

/// Sorted union of `list` and `extra`, duplicates kept. The old chain is freed
/// and a fresh one written; an empty `extra` returns `list` untouched.
BlockedList merge(BlockStore& store, const BlockedList& list, std::span<const UpdateRecord> extra);

/// Merge of two record-order-sorted in-memory runs.
std::vector<UpdateRecord> merge_sorted(std::span<const UpdateRecord> a, std::span<const UpdateRecord> b);

/// Region [value_lo, value_hi) x [version_lo, version_hi) of the plane plus
/// its update list. Stored as one header block followed by the list chain.
struct Rectangle {
    BlockAddress addr;
    Value value_lo = kNegInf;
    Value value_hi = kPosInf;
    Version version_lo = 0;
    Version version_hi = kOpenVersion;
    bool open = true;
    /// Closed before reaching its update budget, to be merged with a neighbour.
    bool closed_early = false;
    /// Updates received since creation; base records excluded.
    std::uint64_t received_updates = 0;
    BlockedList records;

    bool contains_value(Value x) const noexcept {
        return (value_lo == kNegInf || value_lo <= x) && (value_hi == kPosInf || x < value_hi);
    }
    bool contains_version(Version v) const noexcept { return version_lo <= v && v < version_hi; }

    static Rectangle load(BlockStore& store, BlockAddress addr);
    static Rectangle inspect(const BlockStore& store, BlockAddress addr);
    /// Writes the header into `addr`, allocating a block when `addr` is null.
    void save(BlockStore& store);
};

}  // namespace pbeps
