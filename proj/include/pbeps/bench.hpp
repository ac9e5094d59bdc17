#pragma once

// Workload driver behind the `bench` tool: generates updates and queries,
// measures block transfers per phase and per window, optionally checks every
// answer against the oracle, and fits the constants of the I/O bounds.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "pbeps/beps_tree.hpp"
#include "pbeps/block_store.hpp"

namespace pbeps::bench {

enum class Distribution { uniform, sequential, zipf, round_robin };

Distribution parse_distribution(const std::string& s);
std::string to_string(Distribution d);
FlushPolicy parse_policy(const std::string& s);
std::string to_string(FlushPolicy p);

/// One operation of a scripted workload.
struct ScriptOp {
    enum class Kind { insert, erase, search, range };
    Kind kind = Kind::insert;
    Version version = 0;  // queries only
    Value x = 0;
    Value y = 0;  // range only
};

/// Lines "insert x", "delete x", "search v x", "range v x y"; values may be
/// -inf or inf, '#' starts a comment.
std::vector<ScriptOp> parse_script(std::istream& in);

struct WorkloadConfig {
    std::size_t block_size = 16;
    double epsilon = 0.5;
    std::size_t frames = 16;
    FlushPolicy policy = FlushPolicy::overflow;
    std::uint64_t initial = 0;  // size of the version-0 set
    std::uint64_t ops = 10000;
    double mix = 0.0;           // fraction of operations that are queries
    double range_share = 0.5;   // fraction of queries that are Range
    double insert_fraction = 0.5;
    Distribution dist = Distribution::uniform;
    double zipf_theta = 0.99;
    std::uint64_t key_space = 1u << 30;
    std::uint64_t stripes = 63;  // round-robin targets
    std::uint64_t seed = 1;
    /// Lockstep oracle comparison for runs up to this many operations;
    /// above it every 64th query is compared.
    std::uint64_t full_check_limit = 10000;
    bool oracle = true;
    /// Full invariant sweep every this many operations (0: only at the end).
    std::uint64_t invariant_every = 0;
    std::uint64_t window = 1024;
    /// When non-empty, replaces the generated operations (ops and mix unused).
    std::vector<ScriptOp> script;
};

struct WindowRow {
    std::uint64_t window_id = 0;
    std::uint64_t reads = 0;
    std::uint64_t writes = 0;
    std::uint64_t allocs = 0;
    std::uint64_t max_op_ios = 0;
    std::uint64_t tree_height = 0;
    std::uint64_t open_rect_count = 0;
};

struct Report {
    WorkloadConfig config;
    IoStats build_io;
    IoStats update_io;
    IoStats search_io;
    IoStats range_io;
    std::uint64_t updates = 0;
    std::uint64_t searches = 0;
    std::uint64_t ranges = 0;
    std::uint64_t range_output = 0;
    std::uint64_t max_op_ios = 0;
    std::uint64_t max_update_ios = 0;
    std::uint64_t live_blocks = 0;
    std::uint64_t rebuilds = 0;
    std::uint64_t epochs = 0;
    std::uint64_t final_size = 0;
    double mean_size = 0;
    std::uint64_t oracle_checks = 0;
    std::uint64_t oracle_mismatches = 0;
    std::uint64_t invariant_violations = 0;
    std::uint64_t max_pending = 0;
    std::uint64_t pending_bound = 0;
    std::vector<std::string> diagnostics;
    std::vector<std::string> answers;  // one line per scripted query
    std::vector<WindowRow> windows;

    double amortized_update() const;
    double amortized_search() const;
    /// Range I/Os per query after removing the 2K/B output term.
    double amortized_range_excess() const;
};

Report run(const WorkloadConfig& config);

/// "# key=value" metadata lines, then one row per window.
void write_csv(const Report& report, std::ostream& out);
/// Metadata of a CSV written by write_csv.
std::map<std::string, std::string> read_csv_metadata(std::istream& in);

struct Fit {
    double c_u = 0;  // update I/Os / ((1/(eps B^(1-eps))) log_B N)
    double c_q = 0;  // search I/Os / ((1/eps) log_B N)
    double c_r = 0;  // (range I/Os - 2K/B) / ((1/eps) log_B N)
    double c_s = 0;  // live blocks * B / (N0 + updates)
};

double log_term(std::size_t block_size, double n);
Fit fit(const Report& report);
Fit fit(const std::map<std::string, std::string>& metadata);

struct Baseline {
    double c_u = 0;
    double c_q = 0;
    double c_r = 0;
    double c_s = 0;
    double tolerance = 2.0;  // regression when a fitted constant exceeds tolerance * baseline
};

Baseline load_baseline(const std::string& path);

struct Verdict {
    bool pass = true;
    std::vector<std::string> lines;
};

/// Bound check of a fitted report against the baseline. A report without
/// operations of a kind passes that check vacuously.
Verdict verify(const std::map<std::string, std::string>& metadata, const Baseline& baseline);

}  // namespace pbeps::bench
