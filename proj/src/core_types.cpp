#include "pbeps/core_types.hpp"

#include <algorithm>

#include "pbeps/errors.hpp"

namespace pbeps {

bool alive_at(std::span<const UpdateRecord> run, Version v) noexcept {
    bool alive = false;
    for (const auto& r : run) {
        if (r.version > v) break;
        alive = r.is_insert();
    }
    return alive;
}

std::vector<Value> alive_values(std::span<const UpdateRecord> records, Version v, Value lo, Value hi) {
    std::vector<Value> out;
    auto it = std::lower_bound(records.begin(), records.end(), lo,
                               [](const UpdateRecord& r, Value x) { return r.value < x; });
    while (it != records.end() && it->value <= hi) {
        auto end = it;
        while (end != records.end() && end->value == it->value) ++end;
        if (alive_at(std::span<const UpdateRecord>(&*it, static_cast<std::size_t>(end - it)), v))
            out.push_back(it->value);
        it = end;
    }
    return out;
}

std::vector<Value> alive_at_end(std::span<const UpdateRecord> records) {
    std::vector<Value> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const bool last_of_value = i + 1 == records.size() || records[i + 1].value != records[i].value;
        if (last_of_value && records[i].is_insert()) out.push_back(records[i].value);
    }
    return out;
}

std::vector<UpdateRecord> merge_sorted(std::span<const UpdateRecord> a, std::span<const UpdateRecord> b) {
    std::vector<UpdateRecord> out;
    out.reserve(a.size() + b.size());
    std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out), RecordLess{});
    return out;
}

std::vector<UpdateRecord> BlockedList::load(BlockStore& store, std::vector<BlockAddress>* chain) const {
    std::vector<UpdateRecord> out;
    out.reserve(size);
    for (BlockAddress at = head; at;) {
        if (chain) chain->push_back(at);
        const Block& b = store.read(at);
        for (std::uint32_t i = 0; i < b.count; ++i) out.push_back(decode_record(b.entries[i]));
        at = b.next;
    }
    if (out.size() != size) throw Error(ErrorCode::invariant_violation, "blocked list size mismatch");
    return out;
}

BlockedList BlockedList::write(BlockStore& store, std::span<const UpdateRecord> records) {
    const std::size_t cap = store.block_capacity();
    BlockedList list;
    list.size = records.size();
    if (records.empty()) return list;
    // Built back to front so each block's successor is known when it is
    // filled; every block is touched exactly once while resident.
    const std::size_t nblocks = (records.size() + cap - 1) / cap;
    BlockAddress next = kNullBlock;
    for (std::size_t b = nblocks; b-- > 0;) {
        const BlockAddress addr = store.allocate();
        Block& blk = store.write(addr);
        blk.kind = static_cast<std::uint32_t>(BlockKind::list);
        const std::size_t first = b * cap;
        const std::size_t n = std::min(cap, records.size() - first);
        for (std::size_t i = 0; i < n; ++i) blk.entries[i] = encode(records[first + i]);
        blk.count = static_cast<std::uint32_t>(n);
        blk.next = next;
        next = addr;
    }
    list.head = next;
    return list;
}

void BlockedList::release(BlockStore& store, std::span<const BlockAddress> chain) {
    for (auto a : chain) store.free(a);
}

std::vector<BlockAddress> BlockedList::chain(BlockStore& store, bool uncounted) const {
    std::vector<BlockAddress> out;
    for (BlockAddress at = head; at;) {
        out.push_back(at);
        at = uncounted ? store.inspect(at).next : store.read(at).next;
    }
    return out;
}

void BlockedList::release(BlockStore& store) const {
    const auto addrs = chain(store);
    release(store, addrs);
}

BlockedList merge(BlockStore& store, const BlockedList& list, std::span<const UpdateRecord> extra) {
    if (extra.empty()) return list;
    std::vector<BlockAddress> old_chain;
    const auto existing = list.load(store, &old_chain);
    const auto merged = merge_sorted(existing, extra);
    BlockedList::release(store, old_chain);
    return BlockedList::write(store, merged);
}

namespace {

Rectangle decode_rectangle(BlockAddress addr, const Block& b) {
    if (b.kind != static_cast<std::uint32_t>(BlockKind::rectangle))
        throw Error(ErrorCode::invariant_violation, "block " + std::to_string(addr.id) + " is not a rectangle");
    Rectangle r;
    r.addr = addr;
    r.value_lo = static_cast<Value>(b.meta[0]);
    r.value_hi = static_cast<Value>(b.meta[1]);
    r.version_lo = b.meta[2];
    r.version_hi = b.meta[3];
    r.open = (b.meta[4] & 1u) != 0;
    r.closed_early = (b.meta[4] & 2u) != 0;
    r.received_updates = b.meta[5];
    r.records = BlockedList{BlockAddress{b.meta[6]}, b.meta[7]};
    return r;
}

}  // namespace

Rectangle Rectangle::load(BlockStore& store, BlockAddress addr) { return decode_rectangle(addr, store.read(addr)); }

Rectangle Rectangle::inspect(const BlockStore& store, BlockAddress addr) {
    return decode_rectangle(addr, store.inspect(addr));
}

void Rectangle::save(BlockStore& store) {
    if (!addr) addr = store.allocate();
    Block& b = store.write(addr);
    b.kind = static_cast<std::uint32_t>(BlockKind::rectangle);
    b.count = 0;
    b.next = kNullBlock;
    b.meta = {static_cast<std::uint64_t>(value_lo),
              static_cast<std::uint64_t>(value_hi),
              version_lo,
              version_hi,
              (open ? 1u : 0u) | (closed_early ? 2u : 0u),
              received_updates,
              records.head.id,
              records.size};
}

}  // namespace pbeps
