#pragma once

// Simulated external memory: fixed-capacity blocks behind an LRU cache of
// `cache_frames` frames. Every block transfer between the cache and the
// backing store is counted; nothing else is.

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <list>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

namespace pbeps {

/// Identifier of one block. Id 0 is reserved (store header on file backing,
/// "no block" everywhere else); ids are never handed out twice.
struct BlockAddress {
    std::uint64_t id = 0;

    constexpr bool is_null() const noexcept { return id == 0; }
    constexpr explicit operator bool() const noexcept { return id != 0; }
    friend constexpr auto operator<=>(BlockAddress, BlockAddress) = default;
};

inline constexpr BlockAddress kNullBlock{};

/// Fixed-width slot of a block payload. Higher layers decide what the three
/// fields mean (update records, child references, root pointers, ...).
struct BlockEntry {
    std::int64_t key = 0;
    std::uint64_t word = 0;
    std::uint32_t tag = 0;

    friend bool operator==(const BlockEntry&, const BlockEntry&) = default;
};

inline constexpr std::size_t kMetaWords = 8;

struct Block {
    std::uint32_t kind = 0;
    std::uint32_t count = 0;
    BlockAddress next;
    std::array<std::uint64_t, kMetaWords> meta{};
    std::vector<BlockEntry> entries;  // always block_capacity long

    friend bool operator==(const Block&, const Block&) = default;
};

struct StoreConfig {
    std::size_t block_capacity = 16;  // B, entries per block
    std::size_t cache_frames = 2;     // M / B
    std::optional<std::filesystem::path> file;  // nullopt: in-memory backing

    /// Environment variable that switches a default-constructed config to
    /// file backing (see `with_env_backing`).
    static constexpr const char* kFileEnvVar = "PBEPS_STORE_FILE";

    /// Copy of this config with `file` taken from PBEPS_STORE_FILE when the
    /// config does not already name a file.
    StoreConfig with_env_backing() const;

    void validate() const;
};

struct IoStats {
    std::uint64_t reads = 0;
    std::uint64_t writes = 0;
    std::uint64_t allocs = 0;
    std::uint64_t frees = 0;

    std::uint64_t transfers() const noexcept { return reads + writes; }

    friend IoStats operator-(const IoStats& a, const IoStats& b) noexcept {
        return {a.reads - b.reads, a.writes - b.writes, a.allocs - b.allocs, a.frees - b.frees};
    }
    friend IoStats& operator+=(IoStats& a, const IoStats& b) noexcept {
        a.reads += b.reads;
        a.writes += b.writes;
        a.allocs += b.allocs;
        a.frees += b.frees;
        return a;
    }
    friend bool operator==(const IoStats&, const IoStats&) = default;
};

enum class AccessMode { read, write };

class BlockBacking;

class BlockStore {
public:
    explicit BlockStore(StoreConfig config);
    ~BlockStore();

    BlockStore(const BlockStore&) = delete;
    BlockStore& operator=(const BlockStore&) = delete;

    /// Brings the block into a cache frame and returns it. The reference is
    /// valid until the next call on this store. Write mode marks the frame
    /// dirty; the transfer back is counted when the frame is evicted or flushed.
    Block& access(BlockAddress addr, AccessMode mode);
    const Block& read(BlockAddress addr) { return access(addr, AccessMode::read); }
    Block& write(BlockAddress addr) { return access(addr, AccessMode::write); }

    /// Fresh zeroed block, resident and dirty; costs no read.
    BlockAddress allocate();
    void free(BlockAddress addr);

    void pin(BlockAddress addr);
    void unpin(BlockAddress addr);

    /// Writes back every dirty frame (each counted); frames stay resident.
    void flush();
    /// Flushes and, for file backing, persists the header and allocation map.
    void close();

    /// Uncounted look at a block, for invariant sweeps and debugging only.
    Block inspect(BlockAddress addr) const;

    bool is_allocated(BlockAddress addr) const noexcept;
    std::vector<BlockAddress> allocated() const;
    std::uint64_t live_blocks() const noexcept { return live_; }
    const IoStats& stats() const noexcept { return stats_; }
    const StoreConfig& config() const noexcept { return config_; }
    std::size_t block_capacity() const noexcept { return config_.block_capacity; }
    std::size_t cache_frames() const noexcept { return config_.cache_frames; }
    std::size_t pinned_count() const noexcept { return pinned_; }
    bool is_cached(BlockAddress addr) const noexcept { return index_.contains(addr.id); }

    Block empty_block() const;

private:
    struct Frame {
        BlockAddress addr;
        Block block;
        bool dirty = false;
        bool pinned = false;
    };
    using FrameList = std::list<Frame>;

    void require_allocated(BlockAddress addr) const;
    FrameList::iterator touch(BlockAddress addr);
    void make_room();
    void load_allocation_map();
    void save_allocation_map();

    StoreConfig config_;
    std::unique_ptr<BlockBacking> backing_;
    FrameList frames_;  // front = most recently used
    std::unordered_map<std::uint64_t, FrameList::iterator> index_;
    std::vector<bool> allocated_;
    std::uint64_t next_id_ = 1;
    std::uint64_t live_ = 0;
    std::size_t pinned_ = 0;
    IoStats stats_;
    bool closed_ = false;
};

}  // namespace pbeps

template <>
struct std::hash<pbeps::BlockAddress> {
    std::size_t operator()(pbeps::BlockAddress a) const noexcept { return std::hash<std::uint64_t>{}(a.id); }
};
