#include "pbeps/block_store.hpp"

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "pbeps/errors.hpp"

namespace pbeps {

namespace {

constexpr std::uint64_t kMagic = 0x3153'4245'5350'4250ULL;  // "PBPSEBS1"
constexpr std::uint32_t kBitmapKind = 0xB17B'17B1u;
constexpr std::size_t kIdsPerEntry = 128;

template <typename T>
void put_le(std::vector<char>& out, T v) {
    static_assert(std::is_integral_v<T>);
    const auto u = static_cast<std::uint64_t>(static_cast<std::make_unsigned_t<T>>(v));
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const char*& p) {
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
        u |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i));
    p += sizeof(T);
    return static_cast<T>(u);
}

}  // namespace

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::invalid_config: return "invalid config";
        case ErrorCode::backing_io: return "backing store I/O failure";
        case ErrorCode::unallocated_block: return "unallocated block";
        case ErrorCode::double_free: return "double free";
        case ErrorCode::cache_exhausted: return "cache exhausted";
        case ErrorCode::pin_limit: return "pin limit";
        case ErrorCode::block_pinned: return "block pinned";
        case ErrorCode::invalid_argument: return "invalid argument";
        case ErrorCode::unsorted_input: return "unsorted input";
        case ErrorCode::version_out_of_range: return "version out of range";
        case ErrorCode::version_purged: return "version purged";
        case ErrorCode::invariant_violation: return "invariant violation";
    }
    return "unknown error";
}

StoreConfig StoreConfig::with_env_backing() const {
    StoreConfig out = *this;
    if (!out.file) {
        if (const char* path = std::getenv(kFileEnvVar); path != nullptr && *path != '\0')
            out.file = std::filesystem::path(path);
    }
    return out;
}

void StoreConfig::validate() const {
    if (block_capacity < 2)
        throw Error(ErrorCode::invalid_config, "block capacity B must be at least 2");
    if (cache_frames < 2)
        throw Error(ErrorCode::invalid_config, "cache must hold at least 2 frames (M >= 2B)");
}

class BlockBacking {
public:
    virtual ~BlockBacking() = default;
    virtual Block load(std::uint64_t id) = 0;
    virtual void store(std::uint64_t id, const Block& block) = 0;
    virtual void erase(std::uint64_t id) = 0;
    virtual void sync() {}
};

namespace {

class MemoryBacking final : public BlockBacking {
public:
    Block load(std::uint64_t id) override {
        auto it = blocks_.find(id);
        if (it == blocks_.end()) throw Error(ErrorCode::backing_io, "block never written: " + std::to_string(id));
        return it->second;
    }
    void store(std::uint64_t id, const Block& block) override { blocks_[id] = block; }
    void erase(std::uint64_t id) override { blocks_.erase(id); }

private:
    std::unordered_map<std::uint64_t, Block> blocks_;
};

/// Block i lives at byte offset i * block_bytes. All integers little-endian.
class FileBacking final : public BlockBacking {
public:
    FileBacking(const std::filesystem::path& path, std::size_t capacity, bool create)
        : capacity_(capacity), block_bytes_(4 + 4 + 8 + 8 * kMetaWords + capacity * (8 + 8 + 4)) {
        auto mode = std::ios::in | std::ios::out | std::ios::binary;
        if (create) mode |= std::ios::trunc;
        file_.open(path, mode);
        if (!file_) throw Error(ErrorCode::backing_io, "cannot open backing file " + path.string());
    }

    Block load(std::uint64_t id) override {
        std::vector<char> buf(block_bytes_);
        file_.seekg(static_cast<std::streamoff>(id * block_bytes_));
        file_.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!file_) {
            file_.clear();
            throw Error(ErrorCode::backing_io, "short read of block " + std::to_string(id));
        }
        const char* p = buf.data();
        Block b;
        b.kind = get_le<std::uint32_t>(p);
        b.count = get_le<std::uint32_t>(p);
        b.next = BlockAddress{get_le<std::uint64_t>(p)};
        for (auto& m : b.meta) m = get_le<std::uint64_t>(p);
        b.entries.resize(capacity_);
        for (auto& e : b.entries) {
            e.key = get_le<std::int64_t>(p);
            e.word = get_le<std::uint64_t>(p);
            e.tag = get_le<std::uint32_t>(p);
        }
        return b;
    }

    void store(std::uint64_t id, const Block& b) override {
        std::vector<char> buf;
        buf.reserve(block_bytes_);
        put_le(buf, b.kind);
        put_le(buf, b.count);
        put_le(buf, b.next.id);
        for (auto m : b.meta) put_le(buf, m);
        for (const auto& e : b.entries) {
            put_le(buf, e.key);
            put_le(buf, e.word);
            put_le(buf, e.tag);
        }
        file_.seekp(static_cast<std::streamoff>(id * block_bytes_));
        file_.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!file_) throw Error(ErrorCode::backing_io, "write of block " + std::to_string(id) + " failed");
    }

    void erase(std::uint64_t) override {}
    void sync() override { file_.flush(); }

private:
    std::size_t capacity_;
    std::size_t block_bytes_;
    std::fstream file_;
};

}  // namespace

BlockStore::BlockStore(StoreConfig config) : config_(std::move(config)) {
    config_.validate();
    if (!config_.file) {
        backing_ = std::make_unique<MemoryBacking>();
        return;
    }
    std::error_code ec;
    const bool exists = std::filesystem::exists(*config_.file, ec) && std::filesystem::file_size(*config_.file, ec) > 0;
    if (!exists) {
        // Create the file before opening it read-write.
        std::ofstream touch_file(*config_.file, std::ios::binary);
        if (!touch_file) throw Error(ErrorCode::backing_io, "backing path unwritable: " + config_.file->string());
    }
    backing_ = std::make_unique<FileBacking>(*config_.file, config_.block_capacity, !exists);
    if (exists) {
        load_allocation_map();
    } else {
        save_allocation_map();
        backing_->sync();
    }
}

BlockStore::~BlockStore() {
    if (!closed_) {
        try {
            close();
        } catch (...) {
        }
    }
}

Block BlockStore::empty_block() const {
    Block b;
    b.entries.resize(config_.block_capacity);
    return b;
}

bool BlockStore::is_allocated(BlockAddress addr) const noexcept {
    return addr.id != 0 && addr.id < allocated_.size() && allocated_[addr.id];
}

std::vector<BlockAddress> BlockStore::allocated() const {
    std::vector<BlockAddress> out;
    for (std::uint64_t id = 1; id < allocated_.size(); ++id)
        if (allocated_[id]) out.push_back(BlockAddress{id});
    return out;
}

void BlockStore::require_allocated(BlockAddress addr) const {
    if (!is_allocated(addr)) throw Error(ErrorCode::unallocated_block, "block " + std::to_string(addr.id));
}

void BlockStore::make_room() {
    if (frames_.size() < config_.cache_frames) return;
    for (auto it = frames_.end(); it != frames_.begin();) {
        --it;
        if (it->pinned) continue;
        if (it->dirty) {
            backing_->store(it->addr.id, it->block);
            ++stats_.writes;
        }
        index_.erase(it->addr.id);
        frames_.erase(it);
        return;
    }
    throw Error(ErrorCode::cache_exhausted, "every cache frame is pinned");
}

BlockStore::FrameList::iterator BlockStore::touch(BlockAddress addr) {
    if (auto hit = index_.find(addr.id); hit != index_.end()) {
        frames_.splice(frames_.begin(), frames_, hit->second);
        return frames_.begin();
    }
    make_room();
    Block loaded = backing_->load(addr.id);
    ++stats_.reads;
    frames_.push_front(Frame{addr, std::move(loaded), false, false});
    index_[addr.id] = frames_.begin();
    return frames_.begin();
}

Block& BlockStore::access(BlockAddress addr, AccessMode mode) {
    require_allocated(addr);
    auto it = touch(addr);
    if (mode == AccessMode::write) it->dirty = true;
    return it->block;
}

BlockAddress BlockStore::allocate() {
    make_room();
    const BlockAddress addr{next_id_++};
    if (allocated_.size() <= addr.id) allocated_.resize(addr.id + 1, false);
    allocated_[addr.id] = true;
    ++live_;
    ++stats_.allocs;
    frames_.push_front(Frame{addr, empty_block(), true, false});
    index_[addr.id] = frames_.begin();
    return addr;
}

void BlockStore::free(BlockAddress addr) {
    if (!is_allocated(addr)) {
        if (addr.id != 0 && addr.id < next_id_)
            throw Error(ErrorCode::double_free, "block " + std::to_string(addr.id));
        throw Error(ErrorCode::unallocated_block, "block " + std::to_string(addr.id));
    }
    if (auto hit = index_.find(addr.id); hit != index_.end()) {
        if (hit->second->pinned) throw Error(ErrorCode::block_pinned, "cannot free pinned block " + std::to_string(addr.id));
        frames_.erase(hit->second);
        index_.erase(hit);
    }
    backing_->erase(addr.id);
    allocated_[addr.id] = false;
    --live_;
    ++stats_.frees;
}

void BlockStore::pin(BlockAddress addr) {
    require_allocated(addr);
    if (auto hit = index_.find(addr.id); hit != index_.end() && hit->second->pinned) return;
    if (pinned_ + 1 > config_.cache_frames - 1)
        throw Error(ErrorCode::pin_limit, "at most cache_frames - 1 blocks may be pinned");
    auto it = touch(addr);
    it->pinned = true;
    ++pinned_;
}

void BlockStore::unpin(BlockAddress addr) {
    auto hit = index_.find(addr.id);
    if (hit == index_.end() || !hit->second->pinned)
        throw Error(ErrorCode::invalid_argument, "block " + std::to_string(addr.id) + " is not pinned");
    hit->second->pinned = false;
    --pinned_;
}

void BlockStore::flush() {
    for (auto& f : frames_) {
        if (!f.dirty) continue;
        backing_->store(f.addr.id, f.block);
        ++stats_.writes;
        f.dirty = false;
    }
}

void BlockStore::close() {
    if (closed_) return;
    flush();
    if (config_.file) save_allocation_map();
    backing_->sync();
    closed_ = true;
}

Block BlockStore::inspect(BlockAddress addr) const {
    require_allocated(addr);
    if (auto hit = index_.find(addr.id); hit != index_.end()) return hit->second->block;
    return backing_->load(addr.id);
}

// Header (block 0): magic, B, frames, next_id, bitmap root, bitmap block
// count, live count. The bitmap is written to the ids just past next_id; those
// ids are not allocated, so later allocations simply overwrite them.
void BlockStore::save_allocation_map() {
    const std::size_t per_block = config_.block_capacity * kIdsPerEntry;
    const std::uint64_t bitmap_root = next_id_;
    const std::uint64_t bitmap_blocks = (next_id_ + per_block - 1) / per_block;
    for (std::uint64_t b = 0; b < bitmap_blocks; ++b) {
        Block blk = empty_block();
        blk.kind = kBitmapKind;
        for (std::size_t e = 0; e < config_.block_capacity; ++e) {
            std::uint64_t lo = 0, hi = 0;
            for (std::size_t bit = 0; bit < kIdsPerEntry; ++bit) {
                const std::uint64_t id = b * per_block + e * kIdsPerEntry + bit;
                if (id < allocated_.size() && allocated_[id]) {
                    if (bit < 64) lo |= 1ULL << bit;
                    else hi |= 1ULL << (bit - 64);
                }
            }
            blk.entries[e].word = lo;
            blk.entries[e].key = static_cast<std::int64_t>(hi);
        }
        blk.count = static_cast<std::uint32_t>(config_.block_capacity);
        blk.next = BlockAddress{b + 1 < bitmap_blocks ? bitmap_root + b + 1 : 0};
        backing_->store(bitmap_root + b, blk);
    }
    Block header = empty_block();
    header.meta = {kMagic, config_.block_capacity, config_.cache_frames, next_id_, bitmap_root, bitmap_blocks, live_, 0};
    backing_->store(0, header);
}

void BlockStore::load_allocation_map() {
    Block header = backing_->load(0);
    if (header.meta[0] != kMagic) throw Error(ErrorCode::backing_io, "bad magic in " + config_.file->string());
    if (header.meta[1] != config_.block_capacity)
        throw Error(ErrorCode::invalid_config, "backing file was written with B=" + std::to_string(header.meta[1]));
    next_id_ = header.meta[3];
    const std::uint64_t root = header.meta[4];
    const std::uint64_t nblocks = header.meta[5];
    const std::size_t per_block = config_.block_capacity * kIdsPerEntry;
    allocated_.assign(next_id_, false);
    live_ = 0;
    for (std::uint64_t b = 0; b < nblocks; ++b) {
        Block blk = backing_->load(root + b);
        if (blk.kind != kBitmapKind) throw Error(ErrorCode::backing_io, "corrupt allocation map");
        for (std::size_t e = 0; e < config_.block_capacity; ++e) {
            for (std::size_t bit = 0; bit < kIdsPerEntry; ++bit) {
                const std::uint64_t id = b * per_block + e * kIdsPerEntry + bit;
                if (id >= next_id_) break;
                const bool set = bit < 64 ? (blk.entries[e].word >> bit) & 1
                                          : (static_cast<std::uint64_t>(blk.entries[e].key) >> (bit - 64)) & 1;
                if (set) {
                    allocated_[id] = true;
                    ++live_;
                }
            }
        }
    }
    if (live_ != header.meta[6]) throw Error(ErrorCode::backing_io, "allocation map disagrees with header");
}

}  // namespace pbeps
