#include <CLI11.hpp>

#include <malloc.h>

#include <iostream>

#include "maskdime/app.hpp"

namespace {

int fail(const std::string& code, const std::string& message) {
    std::cerr << maskdime::app::Json{{"error", code}, {"message", message}}.dump() << std::endl;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    // Training and sampling allocate many same-sized buffers; keep them in the heap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    using namespace maskdime;
    app::Options o;
    CLI::App cli{"Masked diffusion counterfactual explanations on a synthetic image domain"};
    cli.require_subcommand(1);
    cli.add_option("--config", o.config, "config file (key = value lines)");
    cli.add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
    cli.add_option("--variant", o.variant, "sampler variant");
    cli.add_option("--out", o.out, "output directory");
    cli.add_flag("--retain-states", o.retain_states, "keep per-step states for heatmaps");
    for (const char* name : {"gen-data", "train-ddpm", "train-clf", "explain", "ablate", "eval", "heatmap"})
        cli.add_subcommand(name)->fallthrough();

    try {
        cli.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return cli.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what());
    }

    try {
        const RunConfig c = app::resolve(o);
        const std::string cmd = cli.get_subcommands().front()->get_name();
        app::Json out;
        if (cmd == "gen-data") out = app::cmd_gen_data(c);
        else if (cmd == "train-ddpm") out = app::cmd_train_ddpm(c);
        else if (cmd == "train-clf") out = app::cmd_train_clf(c);
        else if (cmd == "explain") out = app::cmd_explain(c, o);
        else if (cmd == "ablate") out = app::cmd_ablate(c, o);
        else if (cmd == "eval") out = app::cmd_eval(c, o);
        else out = app::cmd_heatmap(c);
        std::cout << out.dump() << std::endl;
        return 0;
    } catch (const Error& e) {
        return fail(e.code(), e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail("io", e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
}
