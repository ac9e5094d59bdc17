// bench: workload runner, baseline checker and game simulator.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "pbeps/bench.hpp"
#include "pbeps/errors.hpp"
#include "pbeps/games.hpp"

namespace {

using namespace pbeps;

int cmd_run(const bench::WorkloadConfig& cfg, const std::string& csv) {
    const auto rep = bench::run(cfg);
    if (csv.empty() || csv == "-") {
        bench::write_csv(rep, std::cout);
    } else {
        std::ofstream out(csv);
        if (!out) {
            std::cerr << "cannot write " << csv << '\n';
            return 2;
        }
        bench::write_csv(rep, out);
    }
    for (const auto& a : rep.answers) std::cerr << a << '\n';
    const auto f = bench::fit(rep);
    std::cerr << "updates=" << rep.updates << " amortized_update=" << rep.amortized_update()
              << " searches=" << rep.searches << " amortized_search=" << rep.amortized_search()
              << " ranges=" << rep.ranges << " live_blocks=" << rep.live_blocks << " rebuilds=" << rep.rebuilds
              << " c_u=" << f.c_u << " c_q=" << f.c_q << " c_r=" << f.c_r << " c_s=" << f.c_s << '\n';
    if (rep.invariant_violations || rep.oracle_mismatches) {
        std::cerr << "FAILED: " << rep.invariant_violations << " invariant violations, " << rep.oracle_mismatches
                  << " oracle mismatches\n";
        for (const auto& d : rep.diagnostics) std::cerr << "  " << d << '\n';
        return 1;
    }
    return 0;
}

int cmd_verify(const std::string& report, const std::string& baseline) {
    std::ifstream in(report);
    if (!in) {
        std::cerr << "cannot read " << report << '\n';
        return 2;
    }
    const auto meta = bench::read_csv_metadata(in);
    const auto verdict = bench::verify(meta, bench::load_baseline(baseline));
    for (const auto& l : verdict.lines) std::cout << l << '\n';
    std::cout << (verdict.pass ? "PASS" : "FAIL") << '\n';
    return verdict.pass ? 0 : 1;
}

int cmd_games(const std::string& mode, std::size_t n, std::uint64_t rounds, std::uint64_t seed) {
    games::GameState<double> s(n);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> d(n);
    const double h = games::harmonic(n - 1);
    const bool zero = mode == "zero";
    const double limit = zero ? h + 1.0 : h;
    double worst = 0;
    for (std::uint64_t r = 0; r < rounds; ++r) {
        double sum = 0;
        for (auto& x : d) sum += (x = u(rng));
        for (auto& x : d) x /= sum;
        if (zero)
            games::zeroing_round<double>(s, d);
        else
            games::subtraction_round<double>(s, d);
        worst = std::max(worst, s.max());
    }
    const bool ok = worst < limit + 1e-9;
    std::cout << "mode=" << mode << " n=" << n << " rounds=" << rounds << " max=" << worst << " bound=" << limit
              << (ok ? " ok" : " VIOLATED") << '\n';
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"buffered persistent set benchmark"};
    app.require_subcommand(1);

    bench::WorkloadConfig cfg;
    std::string policy = "overflow", dist = "uniform", csv, script;
    auto* run = app.add_subcommand("run", "run a workload and emit a CSV report");
    run->add_option("--block-size", cfg.block_size, "records per block")->check(CLI::Range(2, 1 << 20));
    run->add_option("--epsilon", cfg.epsilon)->check(CLI::Range(0.0, 1.0));
    run->add_option("--frames", cfg.frames, "cache frames (M/B)")->check(CLI::Range(2, 1 << 20));
    run->add_option("--policy", policy)->check(CLI::IsMember({"overflow", "path"}));
    run->add_option("--ops", cfg.ops);
    run->add_option("--initial", cfg.initial, "size of the initial set");
    run->add_option("--mix", cfg.mix, "fraction of queries")->check(CLI::Range(0.0, 1.0));
    run->add_option("--range-share", cfg.range_share)->check(CLI::Range(0.0, 1.0));
    run->add_option("--insert-fraction", cfg.insert_fraction)->check(CLI::Range(0.0, 1.0));
    run->add_option("--dist", dist)->check(CLI::IsMember({"uniform", "sequential", "zipf", "round-robin"}));
    run->add_option("--theta", cfg.zipf_theta);
    run->add_option("--seed", cfg.seed);
    run->add_option("--invariant-every", cfg.invariant_every);
    run->add_flag("!--no-oracle", cfg.oracle, "skip oracle checking");
    run->add_option("--csv", csv, "output path ('-' for stdout)");
    run->add_option("--script", script, "file of operations to replay instead of generated ones")->check(CLI::ExistingFile);

    std::string report, baseline;
    auto* verify = app.add_subcommand("verify", "compare a report against the calibration baseline");
    verify->add_option("--report", report)->required();
    verify->add_option("--baseline", baseline)->required();

    std::string mode = "sub";
    std::size_t n = 8;
    std::uint64_t rounds = 100000, seed = 1;
    auto* g = app.add_subcommand("games", "simulate the subtraction or zeroing game");
    g->add_option("--mode", mode)->check(CLI::IsMember({"sub", "zero"}));
    g->add_option("--n", n)->check(CLI::Range(2, 1 << 20));
    g->add_option("--rounds", rounds);
    g->add_option("--seed", seed);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*run) {
            cfg.policy = bench::parse_policy(policy);
            cfg.dist = bench::parse_distribution(dist);
            if (!script.empty()) {
                std::ifstream in(script);
                cfg.script = bench::parse_script(in);
            }
            return cmd_run(cfg, csv);
        }
        if (*verify) return cmd_verify(report, baseline);
        return cmd_games(mode, n, rounds, seed);
    } catch (const Error& e) {
        std::cerr << e.what() << '\n';
        return 2;
    }
}
