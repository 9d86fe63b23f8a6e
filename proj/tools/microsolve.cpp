// microsolve <subcommand> --scenario <path> [--out <dir>] [--threads K] [--rho-ladder 8,16,32]

#include <CLI11.hpp>

#include <iostream>

#include <microsolve/cli.hpp>

int main(int argc, char** argv) {
    using namespace microsolve;
    CLI::App app{"Microlocal solver for quasilinear principal-type problems on the torus"};
    app.require_subcommand(1);
    std::string scenario_path, out_dir = "out", ladder;
    int threads = 0;
    for (const auto& name : subcommands()) {
        auto* sub = app.add_subcommand(name);
        sub->add_option("--scenario", scenario_path, "scenario file")->required();
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--threads", threads, "worker threads (default: MICROSOLVE_THREADS or 1)");
        sub->add_option("--rho-ladder", ladder, "comma-separated rho values for solve-linear");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }
    const std::string cmd = app.get_subcommands().front()->get_name();
    try {
        if (threads > 0) set_thread_count(threads);
        Scenario sc = load_scenario(scenario_path);
        if (!ladder.empty()) sc.rho_ladder = detail::parse_ladder(ladder, "--rho-ladder");
        const int code = run_subcommand(cmd, sc, out_dir);
        std::cout << cmd << ": " << (code == exit_ok ? "all checks passed" : "checks failed") << " (" << out_dir
                  << "/report.json)\n";
        return code;
    } catch (const std::exception& e) {
        std::cerr << "microsolve " << cmd << ": " << e.what() << "\n";
        return exit_code_for(e);
    }
}
