#pragma once

// Brute-force partially persistent set: keeps the whole update log and
// answers a query at version v by replaying the first v updates.

#include <cstdint>
#include <optional>
#include <vector>

#include "pbeps/core_types.hpp"

namespace pbeps {

struct LogEntry {
    Version version = 0;
    UpdateKind kind = UpdateKind::insert;
    Value value = 0;
};

class Oracle {
public:
    explicit Oracle(std::vector<Value> initial = {});

    /// Appends one update; returns its version (the new log length).
    Version apply(UpdateKind kind, Value x);
    Version insert(Value x) { return apply(UpdateKind::insert, x); }
    Version erase(Value x) { return apply(UpdateKind::erase, x); }

    /// Sorted contents of version v.
    std::vector<Value> set_at(Version v) const;
    std::optional<Value> search(Version v, Value x, SearchMode mode = SearchMode::successor) const;
    std::vector<Value> range(Version v, Value x, Value y) const;

    Version current_version() const noexcept { return static_cast<Version>(log_.size()); }
    const std::vector<LogEntry>& log() const noexcept { return log_; }

    /// Versions between stored snapshots.
    static constexpr Version kSnapshotEvery = 256;

private:
    void check(Version v) const;

    std::vector<LogEntry> log_;
    std::vector<std::vector<Value>> snapshots_;  // snapshots_[i] = set at version i * kSnapshotEvery
    std::vector<Value> current_;
};

}  // namespace pbeps
