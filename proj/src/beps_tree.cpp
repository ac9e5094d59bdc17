#include "pbeps/beps_tree.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <unordered_set>

#include "pbeps/errors.hpp"

namespace pbeps {

namespace {

constexpr double kIntegerSlack = 1e-9;

std::uint64_t robust_ceil(double r) {
    const double nearest = std::round(r);
    if (std::fabs(r - nearest) <= kIntegerSlack * std::max(1.0, std::fabs(r)))
        return static_cast<std::uint64_t>(nearest);
    return static_cast<std::uint64_t>(std::ceil(r));
}

// Node metadata block: meta = {height, born, buffer head, buffer size, degree}.
enum NodeMeta : std::size_t { kHeight = 0, kBorn = 1, kBufHead = 2, kBufSize = 3, kDegree = 4 };

template <class Reader>
TreeNode decode_node(BlockAddress addr, Reader&& read_block) {
    TreeNode n;
    n.addr = addr;
    Block first = read_block(addr);
    if (first.kind != static_cast<std::uint32_t>(BlockKind::node))
        throw Error(ErrorCode::invariant_violation, "block " + std::to_string(addr.id) + " is not a tree node");
    n.height = static_cast<std::uint32_t>(first.meta[kHeight]);
    n.born = first.meta[kBorn];
    n.buffer = BlockedList{BlockAddress{first.meta[kBufHead]}, first.meta[kBufSize]};
    const std::size_t degree = first.meta[kDegree];
    n.children.reserve(degree);
    const Block* b = &first;
    Block cont;
    for (;;) {
        for (std::uint32_t i = 0; i < b->count; ++i)
            n.children.push_back(ChildRef{b->entries[i].key, BlockAddress{b->entries[i].word}});
        if (!b->next) break;
        n.continuation.push_back(b->next);
        cont = read_block(b->next);
        b = &cont;
    }
    if (n.children.size() != degree) throw Error(ErrorCode::invariant_violation, "node degree mismatch");
    return n;
}

std::pair<std::size_t, std::size_t> value_run(std::span<const UpdateRecord> buf, Value lo, Value hi) {
    auto by_value = [](const UpdateRecord& r, Value x) { return r.value < x; };
    const auto b = std::lower_bound(buf.begin(), buf.end(), lo, by_value);
    const auto e = hi == kPosInf ? buf.end() : std::lower_bound(b, buf.end(), hi, by_value);
    return {static_cast<std::size_t>(b - buf.begin()), static_cast<std::size_t>(e - buf.begin())};
}

}  // namespace

std::uint64_t ceil_pow(double base, double exponent) { return robust_ceil(std::pow(base, exponent)); }

std::uint64_t ceil_log(std::uint64_t delta, std::uint64_t n) {
    if (delta < 2 || n < 1) throw Error(ErrorCode::invalid_argument, "ceil_log needs delta >= 2 and n >= 1");
    std::uint64_t k = 0;
    for (unsigned __int128 p = 1; p < n; p *= delta) ++k;
    return k;
}

std::uint64_t Params::update_budget() const noexcept {
    return std::max<std::uint64_t>(1, robust_ceil(rebuild_fraction * static_cast<double>(nbar)));
}

std::uint64_t Params::small_epoch_threshold() const noexcept {
    return robust_ceil(4.0 * static_cast<double>(rect_budget) / (1.0 - rebuild_fraction));
}

Params compute_params(std::uint64_t nbar, std::size_t block_capacity, double epsilon, double rebuild_fraction) {
    if (nbar < 1) throw Error(ErrorCode::invalid_config, "nbar must be at least 1");
    if (block_capacity < 2) throw Error(ErrorCode::invalid_config, "block capacity must be at least 2");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw Error(ErrorCode::invalid_config, "epsilon must lie in (0,1)");
    if (!(rebuild_fraction > 0.0 && rebuild_fraction < 1.0))
        throw Error(ErrorCode::invalid_config, "rebuild fraction must lie in (0,1)");
    Params p;
    p.nbar = nbar;
    p.block_capacity = block_capacity;
    p.epsilon = epsilon;
    p.rebuild_fraction = rebuild_fraction;
    const auto b = static_cast<double>(block_capacity);
    p.delta = std::max<std::uint64_t>(2, ceil_pow(b, epsilon));
    p.flush_size = std::max<std::uint64_t>(1, ceil_pow(b, 1.0 - epsilon));
    p.height_bound = 1 + ceil_log(p.delta, nbar);
    p.rect_budget = p.height_bound * 2 * p.delta * p.flush_size;
    return p;
}

std::size_t TreeNode::child_for(Value x) const noexcept {
    const auto it = std::upper_bound(children.begin() + 1, children.end(), x,
                                     [](Value v, const ChildRef& c) { return v < c.lower; });
    return static_cast<std::size_t>(it - children.begin()) - 1;
}

std::size_t TreeNode::meta_blocks(std::size_t degree, std::size_t capacity) noexcept {
    return std::max<std::size_t>(1, (degree + capacity - 1) / capacity);
}

TreeNode TreeNode::load(BlockStore& store, BlockAddress addr) {
    return decode_node(addr, [&](BlockAddress a) -> Block { return store.read(a); });
}

TreeNode TreeNode::inspect(const BlockStore& store, BlockAddress addr) {
    return decode_node(addr, [&](BlockAddress a) { return store.inspect(a); });
}

void TreeNode::save(BlockStore& store) {
    const std::size_t cap = store.block_capacity();
    const std::size_t nblocks = meta_blocks(children.size(), cap);
    while (continuation.size() > nblocks - 1) {
        store.free(continuation.back());
        continuation.pop_back();
    }
    std::vector<BlockAddress> addrs(nblocks);
    addrs[0] = addr;
    for (std::size_t i = 1; i < nblocks; ++i) addrs[i] = i - 1 < continuation.size() ? continuation[i - 1] : kNullBlock;
    BlockAddress next = kNullBlock;
    for (std::size_t i = nblocks; i-- > 0;) {
        if (!addrs[i]) addrs[i] = store.allocate();
        Block& b = store.write(addrs[i]);
        b.kind = static_cast<std::uint32_t>(BlockKind::node);
        b.meta = {};
        const std::size_t first = i * cap;
        const std::size_t n = std::min(cap, children.size() - std::min(children.size(), first));
        for (std::size_t k = 0; k < n; ++k)
            b.entries[k] = BlockEntry{children[first + k].lower, children[first + k].addr.id, 0};
        b.count = static_cast<std::uint32_t>(n);
        b.next = next;
        if (i == 0) {
            b.meta[kHeight] = height;
            b.meta[kBorn] = born;
            b.meta[kBufHead] = buffer.head.id;
            b.meta[kBufSize] = buffer.size;
            b.meta[kDegree] = children.size();
        }
        next = addrs[i];
    }
    addr = addrs[0];
    continuation.assign(addrs.begin() + 1, addrs.end());
}

SplitResult split_children(std::span<const ChildRef> children, std::span<const UpdateRecord> buffer) {
    if (children.size() < 2) throw Error(ErrorCode::invalid_argument, "cannot split a node with fewer than 2 children");
    SplitResult out;
    const std::size_t half = children.size() / 2;
    out.left.assign(children.begin(), children.begin() + half);
    out.right.assign(children.begin() + half, children.end());
    out.separator = out.right.front().lower;
    const auto [b, e] = value_run(buffer, out.separator, kPosInf);
    out.left_buffer.assign(buffer.begin(), buffer.begin() + b);
    out.right_buffer.assign(buffer.begin() + b, buffer.begin() + e);
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> child_runs(const TreeNode& node,
                                                            std::span<const UpdateRecord> buffer) {
    std::vector<std::pair<std::size_t, std::size_t>> runs(node.children.size());
    std::size_t begin = 0;
    for (std::size_t i = 0; i < node.children.size(); ++i) {
        std::size_t end = buffer.size();
        if (i + 1 < node.children.size()) end = value_run(buffer.subspan(begin), node.children[i + 1].lower, kPosInf).first + begin;
        runs[i] = {begin, end};
        begin = end;
    }
    return runs;
}

BufferedTree::BufferedTree(BlockStore& store, const Params& params, FlushPolicy policy, Version version_lo,
                           std::span<const Value> initial)
    : store_(store),
      params_(params),
      policy_(policy),
      version_lo_(version_lo),
      version_(version_lo == 0 ? 0 : version_lo - 1) {
    for (std::size_t i = 0; i < initial.size(); ++i) {
        if (!is_storable(initial[i])) throw Error(ErrorCode::invalid_argument, "sentinel values cannot be stored");
        if (i > 0 && !(initial[i - 1] < initial[i]))
            throw Error(ErrorCode::unsorted_input, "initial values must be sorted and distinct");
    }
    small_ = initial.size() < params_.small_epoch_threshold();

    const std::uint64_t rb = params_.rect_budget;
    std::size_t k = 1;
    if (!small_) {
        k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(initial.size()) /
                                                                            (6.0 * static_cast<double>(rb)))));
        if (k == 1 && initial.size() >= 8 * rb) k = 2;
    }

    // Leaves: k near-equal chunks, each rectangle starting at its first value.
    std::vector<UpdateRecord> base;
    std::vector<ChildRef> level;
    level.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t b = initial.size() * i / k;
        const std::size_t e = initial.size() * (i + 1) / k;
        base.clear();
        for (std::size_t j = b; j < e; ++j) base.push_back(UpdateRecord{initial[j], version_lo, UpdateKind::insert, true});
        Rectangle r;
        r.value_lo = i == 0 ? kNegInf : initial[b];
        r.value_hi = i + 1 == k ? kPosInf : initial[e];
        r.version_lo = version_lo;
        r.records = BlockedList::write(store_, base);
        r.save(store_);
        level.push_back(ChildRef{r.value_lo, r.addr});
    }
    open_rects_ = k;

    const std::size_t max_fill = params_.split_degree() - 1;
    std::uint32_t height = 0;
    do {
        ++height;
        const std::size_t groups = (level.size() + max_fill - 1) / max_fill;
        std::vector<ChildRef> up;
        up.reserve(groups);
        for (std::size_t g = 0; g < groups; ++g) {
            TreeNode n;
            n.height = height;
            n.born = version_lo;
            n.children.assign(level.begin() + static_cast<std::ptrdiff_t>(level.size() * g / groups),
                              level.begin() + static_cast<std::ptrdiff_t>(level.size() * (g + 1) / groups));
            n.save(store_);
            up.push_back(ChildRef{n.children.front().lower, n.addr});
        }
        level = std::move(up);
    } while (level.size() > 1);
    root_ = level.front().addr;
    root_height_ = height;
    if (root_height_ > params_.height_bound) ++height_violations_;
}

void BufferedTree::insert_update(const UpdateRecord& rec) {
    if (frozen_) throw Error(ErrorCode::invariant_violation, "update on a frozen tree");
    version_ = rec.version;
    root_buffer_.insert(std::upper_bound(root_buffer_.begin(), root_buffer_.end(), rec, RecordLess{}), rec);
    const std::uint64_t cap = params_.buffer_capacity();
    if (policy_ == FlushPolicy::overflow) {
        if (root_buffer_.size() > cap) flush_down(true);
        return;
    }
    // A root over capacity forces the round early; the round is still a
    // legal game round since fewer than F increments preceded it.
    if (++updates_since_path_flush_ >= params_.flush_size || root_buffer_.size() > cap) {
        updates_since_path_flush_ = 0;
        ++stats_.path_flushes;
        flush_down(false);
    }
}

std::vector<UpdateRecord> BufferedTree::buffer_of(const TreeNode& node, std::size_t depth,
                                                  std::vector<BlockAddress>* chain) {
    if (depth == 0) return root_buffer_;
    if (node.buffer.empty()) return {};
    return node.buffer.load(store_, chain);
}

void BufferedTree::store_buffer(TreeNode& node, std::size_t depth, std::vector<UpdateRecord> records,
                                std::span<const BlockAddress> old_chain) {
    if (depth == 0) {
        root_buffer_ = std::move(records);
        return;
    }
    BlockedList::release(store_, old_chain);
    node.buffer = BlockedList::write(store_, records);
    Block& b = store_.write(node.addr);
    b.meta[kBufHead] = node.buffer.head.id;
    b.meta[kBufSize] = node.buffer.size;
}

void BufferedTree::flush_down(bool overflow) {
    const std::uint64_t cap = params_.buffer_capacity();
    const std::uint64_t f = params_.flush_size;
    std::vector<TreeNode> path;
    path.push_back(TreeNode::load(store_, root_));
    std::vector<std::size_t> slots;
    std::vector<UpdateRecord> buf = root_buffer_;
    std::vector<BlockAddress> chain;
    bool dirty = false;
    for (;;) {
        const std::size_t d = path.size() - 1;
        TreeNode& node = path[d];
        if (overflow && buf.size() <= cap) break;
        const auto runs = child_runs(node, buf);
        std::size_t j = 0;
        for (std::size_t i = 1; i < runs.size(); ++i)
            if (runs[i].second - runs[i].first > runs[j].second - runs[j].first) j = i;
        const std::size_t take = std::min<std::size_t>(f, runs[j].second - runs[j].first);
        if (take == 0) break;
        std::vector<UpdateRecord> moved(buf.begin() + static_cast<std::ptrdiff_t>(runs[j].first),
                                        buf.begin() + static_cast<std::ptrdiff_t>(runs[j].first + take));
        buf.erase(buf.begin() + static_cast<std::ptrdiff_t>(runs[j].first),
                  buf.begin() + static_cast<std::ptrdiff_t>(runs[j].first + take));
        if (overflow) {
            ++stats_.overflow_flushes;
        } else {
            for (std::size_t i = 0; i < runs.size(); ++i) {
                const std::uint64_t left = runs[i].second - runs[i].first - (i == j ? take : 0);
                stats_.max_pending = std::max(stats_.max_pending, left);
            }
        }
        store_buffer(node, d, std::move(buf), chain);
        dirty = false;
        slots.push_back(j);
        if (node.children_are_rectangles()) {
            deliver(path, slots, j, moved);
            return;
        }
        TreeNode child = TreeNode::load(store_, node.children[j].addr);
        chain.clear();
        const auto existing = child.buffer.empty() ? std::vector<UpdateRecord>{} : child.buffer.load(store_, &chain);
        buf = merge_sorted(existing, moved);
        dirty = true;
        path.push_back(std::move(child));
    }
    if (dirty) store_buffer(path.back(), path.size() - 1, std::move(buf), chain);
}

void BufferedTree::deliver(std::vector<TreeNode>& path, std::vector<std::size_t>& slots, std::size_t slot,
                           std::span<const UpdateRecord> moved) {
    Rectangle r = Rectangle::load(store_, path.back().children[slot].addr);
    r.records = merge(store_, r.records, moved);
    r.received_updates += moved.size();
    r.save(store_);
    stats_.max_rect_received = std::max(stats_.max_rect_received, r.received_updates);
    maybe_finalize(path, slots, r);
}

LocateResult BufferedTree::locate(BlockAddress root, Value x) {
    LocateResult res;
    BlockAddress at = root;
    for (;;) {
        TreeNode n = TreeNode::load(store_, at);
        const std::size_t i = n.child_for(x);
        res.slots.push_back(i);
        at = n.children[i].addr;
        const bool bottom = n.children_are_rectangles();
        res.path.push_back(std::move(n));
        if (bottom) break;
    }
    res.rect = Rectangle::load(store_, at);
    return res;
}

void BufferedTree::actualize_path(std::vector<TreeNode>& path, Rectangle& rect) {
    std::vector<UpdateRecord> gathered;
    for (std::size_t d = 0; d < path.size(); ++d) {
        if (d > 0 && path[d].buffer.empty()) continue;
        if (d == 0 && root_buffer_.empty()) continue;
        std::vector<BlockAddress> chain;
        auto buf = buffer_of(path[d], d, &chain);
        const auto [b, e] = value_run(buf, rect.value_lo, rect.value_hi);
        if (b == e) continue;
        gathered = merge_sorted(gathered, std::span<const UpdateRecord>(buf).subspan(b, e - b));
        buf.erase(buf.begin() + static_cast<std::ptrdiff_t>(b), buf.begin() + static_cast<std::ptrdiff_t>(e));
        store_buffer(path[d], d, std::move(buf), chain);
    }
    ++stats_.actualizations;
    if (gathered.empty()) return;
    rect.records = merge(store_, rect.records, gathered);
    rect.received_updates += gathered.size();
    rect.save(store_);
}

Rectangle BufferedTree::actualize(Value x) {
    auto loc = locate(root_, x);
    actualize_path(loc.path, loc.rect);
    maybe_finalize(loc.path, loc.slots, loc.rect);
    return loc.rect;
}

void BufferedTree::maybe_finalize(std::vector<TreeNode>& path, std::vector<std::size_t>& slots, Rectangle& rect) {
    if (small_ || frozen_ || !rect.open || rect.received_updates < params_.rect_budget) return;
    finalize(path, slots, rect);
}

void BufferedTree::close_rectangle(Rectangle& rect, bool early) {
    rect.open = false;
    rect.closed_early = early;
    rect.version_hi = version_ + 1;
    rect.save(store_);
}

std::vector<ChildRef> BufferedTree::make_rectangles(std::span<const Value> alive, Value lo, Value hi) {
    const Version born = version_ + 1;
    auto make = [&](std::span<const Value> vals, Value l, Value h) {
        std::vector<UpdateRecord> base;
        base.reserve(vals.size());
        for (Value v : vals) base.push_back(UpdateRecord{v, born, UpdateKind::insert, true});
        Rectangle r;
        r.value_lo = l;
        r.value_hi = h;
        r.version_lo = born;
        r.records = BlockedList::write(store_, base);
        r.save(store_);
        return ChildRef{l, r.addr};
    };
    if (alive.size() >= 8 * params_.rect_budget) {
        const std::size_t m = alive.size() / 2;
        ++stats_.rect_splits;
        return {make(alive.first(m), lo, alive[m]), make(alive.subspan(m), alive[m], hi)};
    }
    return {make(alive, lo, hi)};
}

void BufferedTree::finalize(std::vector<TreeNode>& path, std::vector<std::size_t>& slots, Rectangle& r) {
    actualize_path(path, r);
    const auto alive_r = alive_at_end(r.records.load(store_));
    close_rectangle(r, false);
    ++stats_.finalizations;
    --open_rects_;
    const std::uint64_t rb = params_.rect_budget;

    std::size_t a = path.size();
    for (std::size_t d = path.size(); d-- > 0;)
        if (path[d].degree() >= 2) {
            a = d;
            break;
        }

    if (alive_r.size() >= 4 * rb || a == path.size()) {
        auto repl = make_rectangles(alive_r, r.value_lo, r.value_hi);
        open_rects_ += repl.size();
        TreeNode& bottom = path.back();
        const std::size_t i = slots.back();
        repl.front().lower = bottom.children[i].lower;
        bottom.children.erase(bottom.children.begin() + static_cast<std::ptrdiff_t>(i));
        bottom.children.insert(bottom.children.begin() + static_cast<std::ptrdiff_t>(i), repl.begin(), repl.end());
        commit_path(path, slots);
        return;
    }

    // Too few values survive: absorb the neighbour whose lowest common
    // ancestor with r is deepest, the left one on a tie.
    const std::size_t i = slots[a];
    const bool left = i > 0;
    const std::size_t sib = left ? i - 1 : i + 1;
    std::vector<TreeNode> spath(path.begin(), path.begin() + static_cast<std::ptrdiff_t>(a + 1));
    std::vector<std::size_t> sslots(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(a));
    sslots.push_back(sib);
    BlockAddress at = path[a].children[sib].addr;
    for (std::uint32_t h = path[a].height; h > 1;) {
        TreeNode n = TreeNode::load(store_, at);
        const std::size_t idx = left ? n.degree() - 1 : 0;
        sslots.push_back(idx);
        at = n.children[idx].addr;
        h = n.height;
        spath.push_back(std::move(n));
    }
    Rectangle s = Rectangle::load(store_, at);
    actualize_path(spath, s);
    const auto alive_s = alive_at_end(s.records.load(store_));
    if (s.version_lo == version_ + 1) {
        // Created during this very update: no version can see it.
        s.records.release(store_);
        store_.free(s.addr);
        ++stats_.discarded;
    } else {
        close_rectangle(s, true);
        ++stats_.early_closures;
    }
    --open_rects_;
    ++stats_.rect_merges;

    std::vector<Value> combined;
    combined.reserve(alive_r.size() + alive_s.size());
    const auto& first = left ? alive_s : alive_r;
    const auto& second = left ? alive_r : alive_s;
    combined.insert(combined.end(), first.begin(), first.end());
    combined.insert(combined.end(), second.begin(), second.end());
    auto repl = make_rectangles(combined, left ? s.value_lo : r.value_lo, left ? r.value_hi : s.value_hi);
    open_rects_ += repl.size();

    // Drop r's branch below a; nodes born in this update were never visible.
    for (std::size_t d = a + 1; d < path.size(); ++d) {
        ++stats_.chain_nodes_removed;
        if (path[d].born == version_ + 1) {
            for (auto c : path[d].continuation) store_.free(c);
            store_.free(path[d].addr);
        }
    }
    TreeNode& top = spath[a];
    const Value r_lower = top.children[i].lower;
    top.children.erase(top.children.begin() + static_cast<std::ptrdiff_t>(i));
    if (!left) {
        sslots[a] = i;
        top.children[i].lower = r_lower;
        for (std::size_t d = a + 1; d < spath.size(); ++d) spath[d].children.front().lower = r_lower;
    }
    TreeNode& bottom = spath.back();
    const std::size_t leaf = sslots.back();
    repl.front().lower = bottom.children[leaf].lower;
    bottom.children.erase(bottom.children.begin() + static_cast<std::ptrdiff_t>(leaf));
    bottom.children.insert(bottom.children.begin() + static_cast<std::ptrdiff_t>(leaf), repl.begin(), repl.end());
    commit_path(spath, sslots);
}

BlockAddress BufferedTree::commit_node(TreeNode& node) {
    const Version born = version_ + 1;
    if (node.addr && node.born == born) {
        node.save(store_);
        return node.addr;
    }
    const BlockAddress old = node.addr;
    node.addr = kNullBlock;
    node.continuation.clear();
    node.born = born;
    node.save(store_);
    if (old) {
        // The buffer now belongs to the copy.
        const Block& ob = store_.read(old);
        if (ob.meta[kBufHead] != 0 || ob.meta[kBufSize] != 0) {
            Block& w = store_.write(old);
            w.meta[kBufHead] = 0;
            w.meta[kBufSize] = 0;
        }
    }
    return node.addr;
}

void BufferedTree::commit_path(std::vector<TreeNode>& path, std::vector<std::size_t>& slots) {
    for (std::size_t d = path.size(); d-- > 0;) {
        TreeNode& n = path[d];
        if (n.degree() < params_.split_degree()) {
            const BlockAddress addr = commit_node(n);
            if (d == 0)
                root_ = addr;
            else
                path[d - 1].children[slots[d - 1]].addr = addr;
            continue;
        }
        std::vector<BlockAddress> chain;
        const auto buf = buffer_of(n, d, &chain);
        auto sr = split_children(n.children, buf);
        if (d == 0)
            root_buffer_.clear();
        else
            BlockedList::release(store_, chain);
        TreeNode l = n;
        l.children = std::move(sr.left);
        l.buffer = BlockedList::write(store_, sr.left_buffer);
        TreeNode r;
        r.height = n.height;
        r.born = version_ + 1;
        r.children = std::move(sr.right);
        r.buffer = BlockedList::write(store_, sr.right_buffer);
        const BlockAddress la = commit_node(l);
        r.save(store_);
        ++stats_.node_splits;
        if (d == 0) {
            TreeNode root;
            root.height = n.height + 1;
            root.born = version_ + 1;
            root.children = {ChildRef{kNegInf, la}, ChildRef{sr.separator, r.addr}};
            root.save(store_);
            root_ = root.addr;
            root_height_ = root.height;
            ++stats_.root_splits;
            if (root_height_ > params_.height_bound) ++height_violations_;
        } else {
            auto& parent = path[d - 1];
            const std::size_t j = slots[d - 1];
            parent.children[j].addr = la;
            parent.children.insert(parent.children.begin() + static_cast<std::ptrdiff_t>(j + 1),
                                   ChildRef{sr.separator, r.addr});
        }
    }
}

void BufferedTree::freeze() {
    if (frozen_) return;
    Value x = kNegInf;
    for (;;) {
        auto loc = locate(root_, x);
        actualize_path(loc.path, loc.rect);
        if (loc.rect.value_hi == kPosInf) break;
        x = loc.rect.value_hi;
    }
    frozen_ = true;
}

std::vector<Value> BufferedTree::current_values() {
    if (!frozen_) throw Error(ErrorCode::invariant_violation, "current_values needs a frozen tree");
    std::vector<Value> out;
    Value x = kNegInf;
    for (;;) {
        auto loc = locate(root_, x);
        const auto vals = alive_at_end(loc.rect.records.load(store_));
        out.insert(out.end(), vals.begin(), vals.end());
        if (loc.rect.value_hi == kPosInf) break;
        x = loc.rect.value_hi;
    }
    return out;
}

std::vector<BlockAddress> BufferedTree::reachable_blocks(std::span<const BlockAddress> roots, bool uncounted) const {
    auto read = [&](BlockAddress a) -> Block { return uncounted ? store_.inspect(a) : Block(store_.read(a)); };
    std::unordered_set<BlockAddress> seen;
    std::vector<BlockAddress> out;
    auto add_chain = [&](BlockAddress head) {
        for (BlockAddress at = head; at;) {
            out.push_back(at);
            at = read(at).next;
        }
    };
    std::vector<BlockAddress> stack(roots.begin(), roots.end());
    while (!stack.empty()) {
        const BlockAddress at = stack.back();
        stack.pop_back();
        if (!at || !seen.insert(at).second) continue;
        const Block b = read(at);
        if (b.kind == static_cast<std::uint32_t>(BlockKind::rectangle)) {
            out.push_back(at);
            add_chain(BlockAddress{b.meta[6]});
            continue;
        }
        const TreeNode n = decode_node(at, read);
        out.push_back(at);
        out.insert(out.end(), n.continuation.begin(), n.continuation.end());
        add_chain(n.buffer.head);
        for (const auto& c : n.children) stack.push_back(c.addr);
    }
    return out;
}

std::uint64_t BufferedTree::pending_max() const {
    std::uint64_t best = 0;
    std::function<void(BlockAddress, bool)> visit = [&](BlockAddress at, bool is_root) {
        const TreeNode n = TreeNode::inspect(store_, at);
        std::vector<UpdateRecord> buf;
        if (is_root) {
            buf = root_buffer_;
        } else {
            for (BlockAddress b = n.buffer.head; b;) {
                const Block blk = store_.inspect(b);
                for (std::uint32_t i = 0; i < blk.count; ++i) buf.push_back(decode_record(blk.entries[i]));
                b = blk.next;
            }
        }
        for (const auto& [b, e] : child_runs(n, buf)) best = std::max<std::uint64_t>(best, e - b);
        if (!n.children_are_rectangles())
            for (const auto& c : n.children) visit(c.addr, false);
    };
    visit(root_, true);
    return best;
}

InvariantReport BufferedTree::check_invariants(std::span<const BlockAddress> roots) const {
    InvariantReport rep;
    const std::uint64_t rb = params_.rect_budget;
    const std::uint64_t cap = params_.buffer_capacity();
    auto fail = [&](const std::string& what) {
        if (rep.violations.size() < 64) rep.violations.push_back(what);
    };
    auto inspect_list = [&](BlockAddress head) {
        std::vector<UpdateRecord> out;
        for (BlockAddress b = head; b;) {
            const Block blk = store_.inspect(b);
            for (std::uint32_t i = 0; i < blk.count; ++i) out.push_back(decode_record(blk.entries[i]));
            b = blk.next;
        }
        return out;
    };

    // Every rectangle reachable from any recorded root.
    std::unordered_set<BlockAddress> seen;
    std::vector<Value> weight_values;
    std::vector<BlockAddress> stack(roots.begin(), roots.end());
    stack.push_back(root_);
    while (!stack.empty()) {
        const BlockAddress at = stack.back();
        stack.pop_back();
        if (!at || !seen.insert(at).second) continue;
        const Block b = store_.inspect(at);
        if (b.kind == static_cast<std::uint32_t>(BlockKind::node)) {
            const TreeNode n = TreeNode::inspect(store_, at);
            for (const auto& c : n.children) stack.push_back(c.addr);
            if (at == root_ || n.buffer.empty()) continue;
            const auto buf = inspect_list(n.buffer.head);
            for (const auto& rec : buf) weight_values.push_back(rec.value);
            continue;
        }
        const Rectangle r = Rectangle::inspect(store_, at);
        const auto recs = inspect_list(r.records.head);
        std::ostringstream id;
        id << "rect " << at.id << " [" << r.value_lo << "," << r.value_hi << ")x[" << r.version_lo << ","
           << r.version_hi << ")";
        if (recs.size() != r.records.size) fail(id.str() + " list size mismatch");
        if (!std::is_sorted(recs.begin(), recs.end(), RecordLess{})) fail(id.str() + " records unsorted");
        std::uint64_t non_base = 0;
        for (const auto& rec : recs) {
            if (!r.contains_value(rec.value)) fail(id.str() + " record value outside range");
            if (rec.version < r.version_lo || (!r.open && rec.version >= r.version_hi))
                fail(id.str() + " record version outside span");
            if (!rec.base) {
                ++non_base;
                weight_values.push_back(rec.value);
            } else if (rec.version == version_lo_) {
                weight_values.push_back(rec.value);
            }
        }
        if (non_base != r.received_updates) fail(id.str() + " received count disagrees with list");
        if (r.open) {
            ++rep.open_rectangles;
            if (!small_ && r.received_updates > 2 * rb) fail(id.str() + " open rectangle over 2R updates");
            continue;
        }
        ++rep.closed_rectangles;
        if (r.received_updates > 2 * rb) fail(id.str() + " closed with more than 2R updates");
        if (!r.closed_early && r.received_updates < rb) fail(id.str() + " closed with fewer than R updates");
        // Spanning values: present at creation and never touched afterwards.
        std::uint64_t spanning = 0;
        for (std::size_t i = 0; i < recs.size();) {
            std::size_t e = i;
            while (e < recs.size() && recs[e].value == recs[i].value) ++e;
            if (e - i == 1 && recs[i].base) ++spanning;
            i = e;
        }
        if (spanning < 2 * rb) fail(id.str() + " fewer than 2R spanning values");
    }
    for (const auto& rec : root_buffer_) weight_values.push_back(rec.value);
    std::sort(weight_values.begin(), weight_values.end());

    // Current tree shape.
    std::function<void(BlockAddress, Value, Value, std::uint64_t)> visit = [&](BlockAddress at, Value lo, Value hi,
                                                                              std::uint64_t depth) {
        const TreeNode n = TreeNode::inspect(store_, at);
        const bool is_root = depth == 0;
        std::ostringstream id;
        id << "node " << at.id << " h" << n.height;
        if (depth + n.height != root_height_) fail(id.str() + " leaves at unequal depth");
        if (n.degree() < 1 || n.degree() >= params_.split_degree()) fail(id.str() + " degree out of range");
        if (n.degree() >= 1 && n.children.front().lower != lo) fail(id.str() + " first child bound mismatch");
        for (std::size_t i = 1; i < n.degree(); ++i)
            if (!(n.children[i - 1].lower < n.children[i].lower) || !(n.children[i].lower < hi) ||
                n.children[i].lower <= lo)
                fail(id.str() + " separators out of order");
        std::vector<UpdateRecord> buf;
        if (is_root) {
            buf = root_buffer_;
            if (!n.buffer.empty()) fail(id.str() + " root carries an on-disk buffer");
        } else {
            buf = inspect_list(n.buffer.head);
        }
        rep.max_buffer = std::max<std::uint64_t>(rep.max_buffer, buf.size());
        if (buf.size() > cap) fail(id.str() + " buffer over 2*delta*F");
        if (!std::is_sorted(buf.begin(), buf.end(), RecordLess{})) fail(id.str() + " buffer unsorted");
        for (const auto& rec : buf)
            if (rec.value < lo || (hi != kPosInf && rec.value >= hi)) fail(id.str() + " buffered record outside range");
        if (!is_root && !small_) {
            const auto b = std::lower_bound(weight_values.begin(), weight_values.end(), lo);
            const auto e = hi == kPosInf ? weight_values.end() : std::lower_bound(b, weight_values.end(), hi);
            double need = static_cast<double>(params_.block_capacity) *
                          std::pow(static_cast<double>(params_.delta), static_cast<double>(n.height));
            if (static_cast<double>(e - b) < need) fail(id.str() + " weight below B*delta^h");
        }
        for (std::size_t i = 0; i < n.degree(); ++i) {
            const Value clo = n.children[i].lower;
            const Value chi = n.child_upper(i, hi);
            if (!n.children_are_rectangles()) {
                visit(n.children[i].addr, clo, chi, depth + 1);
                continue;
            }
            const Rectangle r = Rectangle::inspect(store_, n.children[i].addr);
            if (!r.open) fail("current tree leads to closed rectangle " + std::to_string(r.addr.id));
            if (r.value_lo != clo || r.value_hi != chi)
                fail("rectangle " + std::to_string(r.addr.id) + " range disagrees with separators");
        }
    };
    visit(root_, kNegInf, kPosInf, 0);
    rep.tree_height = root_height_;
    if (root_height_ > params_.height_bound || height_violations_ > 0) fail("tree height above H");
    return rep;
}

}  // namespace pbeps
