#include "pbeps/bench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "pbeps/errors.hpp"
#include "pbeps/games.hpp"
#include "pbeps/oracle.hpp"
#include "pbeps/persistent_set.hpp"

namespace pbeps::bench {

Distribution parse_distribution(const std::string& s) {
    if (s == "uniform") return Distribution::uniform;
    if (s == "sequential") return Distribution::sequential;
    if (s == "zipf") return Distribution::zipf;
    if (s == "round-robin" || s == "round_robin") return Distribution::round_robin;
    throw Error(ErrorCode::invalid_argument, "unknown distribution '" + s + "'");
}

std::string to_string(Distribution d) {
    switch (d) {
        case Distribution::uniform: return "uniform";
        case Distribution::sequential: return "sequential";
        case Distribution::zipf: return "zipf";
        case Distribution::round_robin: return "round-robin";
    }
    return "?";
}

FlushPolicy parse_policy(const std::string& s) {
    if (s == "overflow") return FlushPolicy::overflow;
    if (s == "path") return FlushPolicy::path_subtraction;
    throw Error(ErrorCode::invalid_argument, "unknown policy '" + s + "'");
}

std::string to_string(FlushPolicy p) { return p == FlushPolicy::overflow ? "overflow" : "path"; }

namespace {

// Rank generator after Gray et al., "Quickly generating billion-record
// synthetic databases".
class Zipf {
public:
    Zipf(std::uint64_t n, double theta) : n_(n), theta_(theta) {
        for (std::uint64_t i = 1; i <= n_; ++i) zetan_ += 1.0 / std::pow(static_cast<double>(i), theta_);
        const double zeta2 = 1.0 + 1.0 / std::pow(2.0, theta_);
        alpha_ = 1.0 / (1.0 - theta_);
        eta_ = (1.0 - std::pow(2.0 / static_cast<double>(n_), 1.0 - theta_)) / (1.0 - zeta2 / zetan_);
    }

    std::uint64_t operator()(double u) const {
        const double uz = u * zetan_;
        if (uz < 1.0) return 0;
        if (uz < 1.0 + std::pow(0.5, theta_)) return 1;
        const auto r = static_cast<std::uint64_t>(static_cast<double>(n_) * std::pow(eta_ * u - eta_ + 1.0, alpha_));
        return std::min(r, n_ - 1);
    }

private:
    std::uint64_t n_;
    double theta_;
    double zetan_ = 0;
    double alpha_ = 0;
    double eta_ = 0;
};

class KeyGen {
public:
    KeyGen(const WorkloadConfig& c, std::mt19937_64& rng) : c_(c), rng_(rng) {
        if (c.dist == Distribution::zipf) zipf_ = std::make_unique<Zipf>(std::min<std::uint64_t>(c.key_space, 1u << 20), c.zipf_theta);
    }

    Value next() {
        const std::uint64_t space = c_.key_space;
        switch (c_.dist) {
            case Distribution::uniform: return static_cast<Value>(1 + rng_() % space);
            case Distribution::sequential: return static_cast<Value>(++seq_);
            case Distribution::zipf: {
                const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
                const std::uint64_t rank = (*zipf_)(u);
                return static_cast<Value>(1 + (rank * 0x9E3779B97F4A7C15ULL) % space);
            }
            case Distribution::round_robin: {
                const std::uint64_t s = std::max<std::uint64_t>(1, c_.stripes);
                const std::uint64_t width = std::max<std::uint64_t>(1, space / s);
                const std::uint64_t i = rr_++;
                return static_cast<Value>(1 + (i % s) * width + (i / s) % width);
            }
        }
        return 1;
    }

    void start_sequence_after(std::uint64_t v) { seq_ = v; }

private:
    const WorkloadConfig& c_;
    std::mt19937_64& rng_;
    std::unique_ptr<Zipf> zipf_;
    std::uint64_t seq_ = 0;
    std::uint64_t rr_ = 0;
};

// Live elements with O(1) uniform removal.
class LiveSet {
public:
    bool contains(Value v) const { return pos_.contains(v); }
    void add(Value v) {
        if (pos_.emplace(v, items_.size()).second) items_.push_back(v);
    }
    void remove(Value v) {
        auto it = pos_.find(v);
        if (it == pos_.end()) return;
        const std::size_t i = it->second;
        pos_.erase(it);
        if (i + 1 != items_.size()) {
            items_[i] = items_.back();
            pos_[items_[i]] = i;
        }
        items_.pop_back();
    }
    std::size_t size() const { return items_.size(); }
    Value at(std::size_t i) const { return items_[i]; }

private:
    std::vector<Value> items_;
    std::unordered_map<Value, std::size_t> pos_;
};

std::string value_text(Value v) {
    if (v == kNegInf) return "-inf";
    if (v == kPosInf) return "inf";
    return std::to_string(v);
}

Value parse_value(const std::string& t) {
    if (t == "-inf") return kNegInf;
    if (t == "inf" || t == "+inf") return kPosInf;
    std::size_t used = 0;
    const long long v = std::stoll(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    return static_cast<Value>(v);
}

Version parse_version(const std::string& t) {
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }))
        throw std::invalid_argument(t);
    return std::stoull(t);
}

std::string describe(const ScriptOp& op) {
    switch (op.kind) {
        case ScriptOp::Kind::insert: return "insert " + value_text(op.x);
        case ScriptOp::Kind::erase: return "delete " + value_text(op.x);
        case ScriptOp::Kind::search: return "search " + std::to_string(op.version) + ' ' + value_text(op.x);
        case ScriptOp::Kind::range:
            return "range " + std::to_string(op.version) + ' ' + value_text(op.x) + ' ' + value_text(op.y);
    }
    return "?";
}

}  // namespace

std::vector<ScriptOp> parse_script(std::istream& in) {
    std::vector<ScriptOp> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream words(line);
        std::vector<std::string> w;
        for (std::string t; words >> t;) w.push_back(t);
        if (w.empty()) continue;
        ScriptOp op;
        try {
            if ((w[0] == "insert" || w[0] == "delete") && w.size() == 2) {
                op.kind = w[0] == "insert" ? ScriptOp::Kind::insert : ScriptOp::Kind::erase;
                op.x = parse_value(w[1]);
            } else if (w[0] == "search" && w.size() == 3) {
                op.kind = ScriptOp::Kind::search;
                op.version = parse_version(w[1]);
                op.x = parse_value(w[2]);
            } else if (w[0] == "range" && w.size() == 4) {
                op.kind = ScriptOp::Kind::range;
                op.version = parse_version(w[1]);
                op.x = parse_value(w[2]);
                op.y = parse_value(w[3]);
            } else {
                throw std::invalid_argument(line);
            }
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::invalid_argument, "script line " + std::to_string(lineno) + ": '" + line + "'");
        }
        out.push_back(op);
    }
    return out;
}

namespace {

std::uint64_t pending_limit(const Params& p) {
    const double h = games::harmonic(2 * p.delta - 1);
    return static_cast<std::uint64_t>(std::floor(static_cast<double>(p.flush_size) * (h + 1.0)));
}

}  // namespace

double Report::amortized_update() const {
    return updates ? static_cast<double>(update_io.transfers()) / static_cast<double>(updates) : 0.0;
}

double Report::amortized_search() const {
    return searches ? static_cast<double>(search_io.transfers()) / static_cast<double>(searches) : 0.0;
}

double Report::amortized_range_excess() const {
    if (!ranges) return 0.0;
    const double out_term = 2.0 * static_cast<double>(range_output) / static_cast<double>(config.block_size);
    return (static_cast<double>(range_io.transfers()) - out_term) / static_cast<double>(ranges);
}

Report run(const WorkloadConfig& config) {
    Report rep;
    rep.config = config;
    std::mt19937_64 rng(config.seed);
    KeyGen keys(config, rng);

    std::vector<Value> initial;
    if (config.dist == Distribution::sequential) {
        for (std::uint64_t i = 1; i <= config.initial; ++i) initial.push_back(static_cast<Value>(i));
        keys.start_sequence_after(config.initial);
    } else {
        while (initial.size() < config.initial) {
            while (initial.size() < config.initial)
                initial.push_back(static_cast<Value>(1 + rng() % config.key_space));
            std::sort(initial.begin(), initial.end());
            initial.erase(std::unique(initial.begin(), initial.end()), initial.end());
        }
    }
    LiveSet live;
    for (Value v : initial) live.add(v);

    StoreConfig sc;
    sc.block_capacity = config.block_size;
    sc.cache_frames = config.frames;
    SetOptions opts;
    opts.epsilon = config.epsilon;
    opts.policy = config.policy;
    PersistentSet set(initial, sc, opts);
    rep.build_io = set.store().stats();

    std::optional<Oracle> oracle;
    if (config.oracle) oracle.emplace(initial);
    const bool full_check = config.ops <= config.full_check_limit;

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    WindowRow win;
    IoStats win_start = set.store().stats();
    double size_sum = 0;
    std::uint64_t query_no = 0;

    auto close_window = [&](std::uint64_t id) {
        const IoStats now = set.store().stats();
        const IoStats d = now - win_start;
        win.window_id = id;
        win.reads = d.reads;
        win.writes = d.writes;
        win.allocs = d.allocs;
        const auto st = set.stats();
        win.tree_height = st.tree_height;
        win.open_rect_count = st.open_rectangles;
        rep.windows.push_back(win);
        win = WindowRow{};
        win_start = now;
    };

    auto sweep = [&]() {
        const auto inv = set.check_invariants();
        rep.invariant_violations += inv.violations.size();
        for (const auto& v : inv.violations)
            if (rep.diagnostics.size() < 32) rep.diagnostics.push_back(v);
    };

    const bool scripted = !config.script.empty();
    const std::uint64_t total = scripted ? config.script.size() : config.ops;
    for (std::uint64_t op = 0; op < total; ++op) {
        ScriptOp next;
        if (scripted) {
            next = config.script[op];
        } else if (config.mix > 0 && unit(rng) < config.mix) {
            const Version lo = set.oldest_version();
            next.version = lo + rng() % (set.current_version() - lo + 1);
            next.x = static_cast<Value>(1 + rng() % config.key_space);
            if (unit(rng) >= config.range_share) {
                next.kind = ScriptOp::Kind::search;
            } else {
                next.kind = ScriptOp::Kind::range;
                const double expect = 2.0 * static_cast<double>(config.block_size);
                const auto width = static_cast<std::uint64_t>(
                    static_cast<double>(config.key_space) * expect / static_cast<double>(std::max<std::size_t>(1, live.size())));
                next.y = static_cast<Value>(std::min<std::uint64_t>(static_cast<std::uint64_t>(next.x) + width,
                                                                    static_cast<std::uint64_t>(kPosInf - 1)));
            }
        } else if (live.size() == 0 || unit(rng) < config.insert_fraction) {
            next.kind = ScriptOp::Kind::insert;
            next.x = keys.next();
        } else {
            next.kind = ScriptOp::Kind::erase;
            next.x = live.at(rng() % live.size());
        }

        const IoStats before = set.store().stats();
        const Version v = next.version;
        const Value x = next.x;
        if (next.kind == ScriptOp::Kind::insert || next.kind == ScriptOp::Kind::erase) {
            if (next.kind == ScriptOp::Kind::insert) {
                set.insert(x);
                live.add(x);
                if (oracle) oracle->insert(x);
            } else {
                set.erase(x);
                live.remove(x);
                if (oracle) oracle->erase(x);
            }
            const IoStats d = set.store().stats() - before;
            rep.update_io += d;
            rep.max_update_ios = std::max(rep.max_update_ios, d.transfers());
            ++rep.updates;
            size_sum += static_cast<double>(live.size());
        } else {
            const bool check = oracle && (full_check || query_no % 64 == 0);
            ++query_no;
            if (next.kind == ScriptOp::Kind::search) {
                const auto got = set.search(v, x);
                rep.search_io += set.store().stats() - before;
                ++rep.searches;
                if (scripted) rep.answers.push_back(describe(next) + " -> " + (got ? std::to_string(*got) : "none"));
                if (check) {
                    ++rep.oracle_checks;
                    if (got != oracle->search(v, x)) {
                        ++rep.oracle_mismatches;
                        if (rep.diagnostics.size() < 32)
                            rep.diagnostics.push_back("search mismatch v=" + std::to_string(v) + " x=" + std::to_string(x));
                    }
                }
            } else {
                const Value y = next.y;
                const auto got = set.range(v, x, y);
                rep.range_io += set.store().stats() - before;
                ++rep.ranges;
                rep.range_output += got.size();
                if (scripted) {
                    std::string line = describe(next) + " ->";
                    for (Value g : got) line += ' ' + std::to_string(g);
                    rep.answers.push_back(line);
                }
                if (check) {
                    ++rep.oracle_checks;
                    if (got != oracle->range(v, x, y)) {
                        ++rep.oracle_mismatches;
                        if (rep.diagnostics.size() < 32)
                            rep.diagnostics.push_back("range mismatch v=" + std::to_string(v) + " x=" + std::to_string(x));
                    }
                }
            }
        }
        const std::uint64_t cost = (set.store().stats() - before).transfers();
        rep.max_op_ios = std::max(rep.max_op_ios, cost);
        win.max_op_ios = std::max(win.max_op_ios, cost);
        if ((op + 1) % config.window == 0) close_window((op + 1) / config.window - 1);
        if (config.invariant_every && (op + 1) % config.invariant_every == 0) sweep();
    }
    {
        // Pending write-backs belong to the updates that dirtied them.
        const IoStats before = set.store().stats();
        set.store().flush();
        rep.update_io += set.store().stats() - before;
    }
    if (total % config.window != 0) close_window(total / config.window);
    sweep();

    for (std::size_t i = 0; i < set.epoch_count(); ++i) {
        const auto& e = set.epoch(i);
        const std::uint64_t limit = pending_limit(e.params());
        const std::uint64_t seen = e.tree->stats().max_pending;
        if (config.policy == FlushPolicy::path_subtraction) {
            rep.max_pending = std::max(rep.max_pending, seen);
            rep.pending_bound = std::max(rep.pending_bound, limit);
            if (seen > limit) {
                ++rep.invariant_violations;
                rep.diagnostics.push_back("epoch " + std::to_string(i) + " pending " + std::to_string(seen) +
                                          " above " + std::to_string(limit));
            }
        }
    }
    const auto st = set.stats();
    rep.live_blocks = st.live_blocks;
    rep.rebuilds = st.rebuilds;
    rep.epochs = st.epochs;
    rep.final_size = live.size();
    rep.mean_size = rep.updates ? size_sum / static_cast<double>(rep.updates) : static_cast<double>(live.size());
    return rep;
}

double log_term(std::size_t block_size, double n) {
    const double b = static_cast<double>(block_size);
    return std::log(std::max(n, b)) / std::log(b);
}

Fit fit(const std::map<std::string, std::string>& m) {
    auto num = [&](const std::string& k) {
        auto it = m.find(k);
        return it == m.end() ? 0.0 : std::stod(it->second);
    };
    const auto b = static_cast<std::size_t>(num("block_size"));
    const double eps = num("epsilon");
    const double n = std::max(num("mean_size"), num("initial"));
    const double lg = log_term(b, n);
    Fit f;
    const double updates = num("updates");
    if (updates > 0) {
        const double term = lg / (eps * std::pow(static_cast<double>(b), 1.0 - eps));
        f.c_u = (num("update_reads") + num("update_writes")) / updates / term;
    }
    if (num("searches") > 0) f.c_q = (num("search_reads") + num("search_writes")) / num("searches") / (lg / eps);
    if (num("ranges") > 0) {
        const double excess =
            (num("range_reads") + num("range_writes") - 2.0 * num("range_output") / static_cast<double>(b)) /
            num("ranges");
        f.c_r = excess / (lg / eps);
    }
    const double elems = num("initial") + updates;
    if (elems > 0) f.c_s = num("live_blocks") * static_cast<double>(b) / elems;
    return f;
}

namespace {

std::map<std::string, std::string> metadata(const Report& r) {
    std::map<std::string, std::string> m;
    auto put = [&](const std::string& k, auto v) {
        std::ostringstream s;
        s << std::setprecision(10) << v;
        m[k] = s.str();
    };
    const auto& c = r.config;
    put("block_size", c.block_size);
    put("epsilon", c.epsilon);
    put("frames", c.frames);
    m["policy"] = to_string(c.policy);
    put("initial", c.initial);
    put("ops", c.script.empty() ? c.ops : c.script.size());
    put("mix", c.mix);
    m["dist"] = to_string(c.dist);
    put("seed", c.seed);
    put("build_reads", r.build_io.reads);
    put("build_writes", r.build_io.writes);
    put("updates", r.updates);
    put("update_reads", r.update_io.reads);
    put("update_writes", r.update_io.writes);
    put("searches", r.searches);
    put("search_reads", r.search_io.reads);
    put("search_writes", r.search_io.writes);
    put("ranges", r.ranges);
    put("range_reads", r.range_io.reads);
    put("range_writes", r.range_io.writes);
    put("range_output", r.range_output);
    put("max_op_ios", r.max_op_ios);
    put("max_update_ios", r.max_update_ios);
    put("live_blocks", r.live_blocks);
    put("rebuilds", r.rebuilds);
    put("epochs", r.epochs);
    put("final_size", r.final_size);
    put("mean_size", r.mean_size);
    put("oracle_checks", r.oracle_checks);
    put("oracle_mismatches", r.oracle_mismatches);
    put("invariant_violations", r.invariant_violations);
    put("max_pending", r.max_pending);
    put("pending_bound", r.pending_bound);
    put("amortized_update", r.amortized_update());
    put("amortized_search", r.amortized_search());
    put("amortized_range_excess", r.amortized_range_excess());
    return m;
}

}  // namespace

Fit fit(const Report& report) { return fit(metadata(report)); }

void write_csv(const Report& report, std::ostream& out) {
    auto m = metadata(report);
    const Fit f = fit(m);
    std::ostringstream cu, cq, cr, cs;
    cu << std::setprecision(10) << f.c_u;
    cq << std::setprecision(10) << f.c_q;
    cr << std::setprecision(10) << f.c_r;
    cs << std::setprecision(10) << f.c_s;
    m["c_u"] = cu.str();
    m["c_q"] = cq.str();
    m["c_r"] = cr.str();
    m["c_s"] = cs.str();
    for (const auto& [k, v] : m) out << "# " << k << '=' << v << '\n';
    for (const auto& d : report.diagnostics) out << "# diagnostic=" << d << '\n';
    for (const auto& a : report.answers) out << "# answer=" << a << '\n';
    out << "window_id,reads,writes,allocs,max_op_ios,tree_height,open_rect_count\n";
    for (const auto& w : report.windows)
        out << w.window_id << ',' << w.reads << ',' << w.writes << ',' << w.allocs << ',' << w.max_op_ios << ','
            << w.tree_height << ',' << w.open_rect_count << '\n';
}

std::map<std::string, std::string> read_csv_metadata(std::istream& in) {
    std::map<std::string, std::string> m;
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("# ", 0) != 0) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(2, eq - 2);
        if (key == "diagnostic" || key == "answer") continue;
        m[key] = line.substr(eq + 1);
    }
    return m;
}

Baseline load_baseline(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::invalid_argument, "cannot open baseline " + path);
    const auto j = nlohmann::json::parse(in);
    Baseline b;
    b.c_u = j.at("c_u").get<double>();
    b.c_q = j.at("c_q").get<double>();
    b.c_r = j.at("c_r").get<double>();
    b.c_s = j.at("c_s").get<double>();
    b.tolerance = j.value("tolerance", 2.0);
    return b;
}

Verdict verify(const std::map<std::string, std::string>& m, const Baseline& base) {
    Verdict v;
    auto num = [&](const std::string& k) {
        auto it = m.find(k);
        return it == m.end() ? 0.0 : std::stod(it->second);
    };
    const Fit f = fit(m);
    auto check = [&](const char* name, bool present, double fitted, double baseline) {
        std::ostringstream line;
        line << std::setprecision(4) << name;
        if (!present) {
            line << " no operations, pass";
        } else {
            const double limit = base.tolerance * baseline;
            const bool ok = fitted <= limit;
            line << " fitted=" << fitted << " baseline=" << baseline << " limit=" << limit
                 << (ok ? " pass" : " REGRESSION");
            v.pass = v.pass && ok;
        }
        v.lines.push_back(line.str());
    };
    check("c_u", num("updates") > 0, f.c_u, base.c_u);
    check("c_q", num("searches") > 0, f.c_q, base.c_q);
    check("c_r", num("ranges") > 0, f.c_r, base.c_r);
    check("c_s", num("initial") + num("updates") > 0, f.c_s, base.c_s);
    const double bad = num("invariant_violations") + num("oracle_mismatches");
    if (bad > 0) {
        v.pass = false;
        v.lines.push_back("invariant violations or oracle mismatches reported");
    }
    return v;
}

}  // namespace pbeps::bench
