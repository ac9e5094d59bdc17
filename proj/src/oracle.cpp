#include "pbeps/oracle.hpp"

#include <algorithm>
#include <set>

#include "pbeps/errors.hpp"

namespace pbeps {

Oracle::Oracle(std::vector<Value> initial) : current_(std::move(initial)) {
    std::sort(current_.begin(), current_.end());
    current_.erase(std::unique(current_.begin(), current_.end()), current_.end());
    snapshots_.push_back(current_);
}

Version Oracle::apply(UpdateKind kind, Value x) {
    const Version v = current_version() + 1;
    log_.push_back(LogEntry{v, kind, x});
    const auto it = std::lower_bound(current_.begin(), current_.end(), x);
    const bool present = it != current_.end() && *it == x;
    if (kind == UpdateKind::insert && !present) current_.insert(it, x);
    if (kind == UpdateKind::erase && present) current_.erase(it);
    if (v % kSnapshotEvery == 0) snapshots_.push_back(current_);
    return v;
}

void Oracle::check(Version v) const {
    if (v > current_version())
        throw Error(ErrorCode::version_out_of_range, "oracle has no version " + std::to_string(v));
}

std::vector<Value> Oracle::set_at(Version v) const {
    check(v);
    if (v == current_version()) return current_;
    const Version base = v / kSnapshotEvery;
    std::set<Value> s(snapshots_[base].begin(), snapshots_[base].end());
    for (Version u = base * kSnapshotEvery; u < v; ++u) {
        const auto& e = log_[u];
        if (e.kind == UpdateKind::insert)
            s.insert(e.value);
        else
            s.erase(e.value);
    }
    return {s.begin(), s.end()};
}

std::optional<Value> Oracle::search(Version v, Value x, SearchMode mode) const {
    const auto s = set_at(v);
    switch (mode) {
        case SearchMode::successor: {
            auto it = std::lower_bound(s.begin(), s.end(), x);
            if (it != s.end()) return *it;
            break;
        }
        case SearchMode::strict_successor: {
            auto it = std::upper_bound(s.begin(), s.end(), x);
            if (it != s.end()) return *it;
            break;
        }
        case SearchMode::predecessor: {
            auto it = std::upper_bound(s.begin(), s.end(), x);
            if (it != s.begin()) return *(it - 1);
            break;
        }
        case SearchMode::strict_predecessor: {
            auto it = std::lower_bound(s.begin(), s.end(), x);
            if (it != s.begin()) return *(it - 1);
            break;
        }
    }
    return std::nullopt;
}

std::vector<Value> Oracle::range(Version v, Value x, Value y) const {
    if (x > y) throw Error(ErrorCode::invalid_argument, "range needs x <= y");
    const auto s = set_at(v);
    return {std::lower_bound(s.begin(), s.end(), x), std::upper_bound(s.begin(), s.end(), y)};
}

}  // namespace pbeps
