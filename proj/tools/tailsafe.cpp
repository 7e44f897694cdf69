#include "tailsafe/tailsafe.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace tailsafe;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string run_id;
    std::optional<int> paths, seeds;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "world config (JSON)");
    sub->add_option("--seed", c.seed, "override the simulation seed");
    sub->add_option("--out", c.out, "output root directory");
    sub->add_option("--run-id", c.run_id, "run directory name (default: config hash + UTC time)");
    sub->add_option("--paths", c.paths, "paths per seed");
    sub->add_option("--seeds", c.seeds, "number of seeds");
}

WorldConfig resolve(const Common& c) {
    WorldConfig w = c.config.empty() ? parse_config(nlohmann::json::object()) : load_config(c.config);
    if (c.seed) w.simulation.seed = *c.seed;
    if (c.paths) {
        w.simulation.n_paths = *c.paths;
        w.grid.paths_per_seed = *c.paths;
    }
    if (c.seeds) {
        w.simulation.n_seeds = *c.seeds;
        w.grid.seeds_per_cell = *c.seeds;
    }
    validate_config(w);
    return w;
}

fs::path run_dir(const Common& c, const WorldConfig& w) {
    const fs::path d = fs::path(c.out) / (c.run_id.empty() ? make_run_id(w) : c.run_id);
    fs::create_directories(d);
    write_file(d / "config.json", config_json(w).dump(2) + "\n");
    return d;
}

int cmd_validate(const Common& c) {
    const WorldConfig w = resolve(c);
    const VolSurface raw(world_slices(w), w.market.spot, w.market.rate, w.market.div);
    auto rep = validate_no_arbitrage(raw).to_json();
    rep["config_hash"] = config_hash(w);
    std::cout << rep.dump(2) << '\n';
    return validate_no_arbitrage(raw).passed() ? 0 : 1;
}

int cmd_vix(const Common& c) {
    const WorldConfig w = resolve(c);
    const World world = build_world(w);
    const fs::path d = run_dir(c, w);
    const SharedGrids g = price_vix_grids(world.surface, VolSource::surface, world.setup);
    const VixResult v = vix_on(g, world.setup);
    const double cq = std::max(quadrature_constant(g.g1, g.r1), quadrature_constant(g.g2, g.r2));
    const CoherenceReport cr =
        coherence_residual(world.surface, VolSource::surface, world.surface, VolSource::teacher, world.setup, cq);
    std::ostringstream os;
    os << "# config_hash=" << config_hash(w) << '\n'
       << "leg,T,strike,weight,q_price,contribution\n";
    for (const auto* a : {&v.near, &v.next})
        for (std::size_t i = 0; i < a->strikes.size(); ++i)
            os << (a == &v.near ? "near" : "next") << ',' << a->maturity_T << ',' << a->strikes[i] << ',' << a->weights[i]
               << ',' << a->q_prices[i] << ',' << a->contributions[i] << '\n';
    write_file(d / "vix_audit.csv", os.str());
    std::cout << "VIX (surface) = " << v.vix_30 << "\n"
              << "VIX (teacher) = " << cr.vix_b << "\n"
              << "residual      = " << cr.residual << "  bound " << cr.bound << "\n"
              << "written to " << d << '\n';
    return 0;
}

int cmd_localvol(const Common& c) {
    const WorldConfig w = resolve(c);
    const World world = build_world(w);
    const fs::path d = run_dir(c, w);
    write_file(d / "localvol.csv", to_csv(world.lv));
    write_file(d / "constants.csv", to_csv(measure_envelopes(world.prices, w.localvol.chi_floor)));
    write_file(d / "kappa.csv", to_csv(world.kappa));
    std::cout << "local vol grid " << world.lv.nK() << "x" << world.lv.nT() << ", clipped " << world.lv.clipped_count()
              << ", floored " << world.lv.floored_count() << "\nwritten to " << d << '\n';
    return 0;
}

int cmd_simulate(const Common& c, bool dump) {
    const WorldConfig w = resolve(c);
    const World world = build_world(w);
    const fs::path d = run_dir(c, w);
    const PathPanel p = simulate_world(world, w.cir, w.simulation.n_seeds, w.simulation.n_paths);
    std::cout << "panel " << p.n_seeds << " x " << p.n_paths << " x " << (p.n_steps + 1) << ", truncations "
              << p.truncations << ", draw hash " << hex64(panel_hash(p)) << '\n';
    if (dump) {
        std::ofstream os(d / "panel.csv");
        os << "seed,path,step,S,v,VIX\n";
        for (int s = 0; s < p.n_seeds; ++s)
            for (int q = 0; q < p.n_paths; ++q)
                for (int n = 0; n <= p.n_steps; ++n) {
                    const std::size_t k = p.index(s, q, n);
                    os << s << ',' << q << ',' << n << ',' << p.S[k] << ',' << p.v[k] << ',' << p.vix[k] << '\n';
                }
        std::cout << "written to " << d / "panel.csv" << '\n';
    }
    return 0;
}

int cmd_pool(const Common& c) {
    const WorldConfig w = resolve(c);
    const fs::path d = run_dir(c, w);
    const PoolReport rep = run_pool(w);
    std::ostringstream os;
    write_rows_csv(os, rep.config_hash, rep.rows);
    write_file(d / "report.csv", os.str());
    std::ofstream tel(d / "telemetry.jsonl");
    write_telemetry_jsonl(tel, rep.result.telemetry);
    std::cout << os.str() << "written to " << d << '\n';
    return 0;
}

int cmd_grid(const Common& c) {
    const WorldConfig w = resolve(c);
    const fs::path d = run_dir(c, w);
    std::ostringstream os;
    write_grid_csv(os, config_hash(w), run_scenario_grid(w));
    write_file(d / "studies" / "scenario_grid.csv", os.str());
    std::cout << os.str() << "written to " << d << '\n';
    return 0;
}

int cmd_ablate(const Common& c) {
    const WorldConfig w = resolve(c);
    const fs::path d = run_dir(c, w);
    std::ostringstream os;
    write_ablation_csv(os, config_hash(w), run_ablation(w));
    write_file(d / "studies" / "ablation.csv", os.str());
    std::cout << os.str() << "written to " << d << '\n';
    return 0;
}

int cmd_verify(const Common& c, const std::string& telemetry) {
    const WorldConfig w = resolve(c);
    const fs::path d = run_dir(c, w);
    if (!telemetry.empty()) {
        std::ifstream in(telemetry);
        if (!in) throw ResourceError("cannot open " + telemetry);
        AuditOptions ao;
        ao.expected_steps = w.simulation.steps();
        ao.check_dwell = w.controller.cooldown;
        const AuditReport ar = audit_run(read_telemetry_jsonl(in), w.controller, ao);
        std::cout << "audited " << ar.paths << " paths, " << ar.violations.size() << " violations\n";
        for (const auto& v : ar.violations)
            std::cout << "  seed " << v.seed << " path " << v.path << " step " << v.step << " " << v.invariant << ": "
                      << v.detail << '\n';
        return ar.passed() ? 0 : 1;
    }
    const VerifySummary s = verify_all(w, d);
    for (const auto& st : s.studies)
        std::cout << (st.passed ? "PASS " : "FAIL ") << st.name << "  " << st.metric << "  " << st.detail << '\n';
    std::cout << "written to " << d << '\n';
    return s.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tail-safe SPX/VIX hedging harness"};
    app.require_subcommand(1);
    Common c;
    bool dump = false;
    std::string telemetry;
    auto* v = app.add_subcommand("validate", "no-arbitrage report for the configured surface");
    auto* x = app.add_subcommand("vix", "30-day index and teacher coherence");
    auto* l = app.add_subcommand("localvol", "local-vol grid, error constants and kappa curve");
    auto* s = app.add_subcommand("simulate", "simulate the path panel");
    auto* p = app.add_subcommand("pool", "hedge a pool and report tail metrics");
    auto* g = app.add_subcommand("grid", "scenario grid of paired ES differences");
    auto* a = app.add_subcommand("ablate", "single-toggle ablations against the full controller");
    auto* f = app.add_subcommand("verify", "convergence studies and invariant audits");
    for (auto* sub : {v, x, l, s, p, g, a, f}) add_common(sub, c);
    s->add_flag("--dump", dump, "write the panel as CSV");
    f->add_option("--telemetry", telemetry, "audit an existing telemetry file instead of running the suite");
    CLI11_PARSE(app, argc, argv);
    try {
        if (*v) return cmd_validate(c);
        if (*x) return cmd_vix(c);
        if (*l) return cmd_localvol(c);
        if (*s) return cmd_simulate(c, dump);
        if (*p) return cmd_pool(c);
        if (*g) return cmd_grid(c);
        if (*a) return cmd_ablate(c);
        if (*f) return cmd_verify(c, telemetry);
    } catch (const ConfigError& e) {
        std::cerr << "config error at " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
