// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
//
//   maskdime_acceptance --config acceptance.conf --cli path/to/maskdime
//
// Criteria 3 and 5-9 load the models named by the config (the ctest fixture
// trains them once). Criterion 10 runs the command-line tool end to end twice.

#include <CLI11.hpp>

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "maskdime/app.hpp"
#include "support/finite_diff.hpp"
#include "support/reference_nets.hpp"

using namespace maskdime;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Tensor uniform_image(RngStream& r, double amp = 1.0) {
    Tensor x({1, 32, 32});
    for (float& v : x.vec()) v = static_cast<float>(r.uniform(-amp, amp));
    return x;
}

bool bits_equal(float a, float b) { return std::memcmp(&a, &b, sizeof a) == 0; }

struct Context {
    RunConfig cfg;
    std::string cli;
    int jobs = 1;
    fs::path work;

    std::optional<app::Models> models_;
    std::optional<synth::Dataset> data_;
    std::map<std::string, std::vector<Trajectory>> runs_;

    const app::Models& models() {
        if (!models_) models_ = app::load_models(cfg);
        return *models_;
    }
    const synth::Dataset& data() {
        if (!data_) data_ = synth::load_dataset(cfg.data_dir);
        return *data_;
    }
    std::vector<app::Case> cases(int limit = 0) { return app::source_cases(data(), cfg, limit); }

    // Full sampler runs over every source-class eval image, cached by name.
    const std::vector<Trajectory>& run(const std::string& name, Variant v, double s) {
        auto it = runs_.find(name);
        if (it != runs_.end()) return it->second;
        SamplerConfig sc = cfg.sampler();
        sc.variant = v;
        sc.guidance.s = s;
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<Trajectory> trs = app::run_cases(cases(), sc, models(), cfg.schedule(), jobs);
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << "  ran " << name << " on " << trs.size() << " images in " << fmt("%.0f", sec) << " s\n";
        return runs_.emplace(name, std::move(trs)).first->second;
    }
};

// --- 1 ----------------------------------------------------------------------------

// A central difference is only a derivative when x - h e_i, x and x + h e_i lie
// in one linear piece of the ReLU/abs network. Stencils that cross a kink are
// set aside and counted; the worst error over them is reported as well.
Outcome gradient_correctness(Context&) {
    const Schedule sched = Schedule::linear();
    const double h = 1e-3;
    RngStream r(2024);
    int instances = 0, used_total = 0, crossed = 0;
    double worst = 0, worst_crossed = 0;
    std::optional<Classifier> clf;
    std::optional<FeatureNet> feat;
    std::vector<bool> base, up, down;
    for (int inst = 0; inst < 200; ++inst) {
        if (inst % 20 == 0) {
            clf.emplace(1000 + inst);
            feat.emplace(2000 + inst);
        }
        const Tensor x = uniform_image(r);
        Tensor xt = x;
        for (float& v : xt.vec()) v += static_cast<float>(r.uniform(-0.3, 0.3));
        GuidanceConfig g;
        g.y = inst % 2;
        if (inst >= 100) {  // L_class alone
            g.lambda_c = 1;
            g.lambda_p = 0;
            g.lambda_l = 0;
        }
        const GuidanceNets nets{*clf, *feat};
        const Tensor grad = guidance_pass(xt, x, feat->features(x), 1, sched, g, nets).grad_x;
        auto loss = [&](const Tensor& v, std::vector<bool>& pattern) {
            testing_support::RecordKinks rec(pattern);
            return testing_support::joint_loss(v, x, g, *clf, *feat);
        };
        loss(xt, base);

        std::vector<std::size_t> coords{static_cast<std::size_t>(
            std::max_element(grad.vec().begin(), grad.vec().end(), [](float a, float b) { return std::fabs(a) < std::fabs(b); }) -
            grad.vec().begin())};
        for (int k = 0; k < 8; ++k) coords.push_back(static_cast<std::size_t>(r.uniform_int(0, 1023)));
        double err = 0, err_all = 0, scale = 0, scale_all = 0;
        int used = 0;
        for (std::size_t i : coords) {
            Tensor a = xt, b = xt;
            a[i] = static_cast<float>(xt[i] + h);
            b[i] = static_cast<float>(xt[i] - h);
            const double fd = (loss(a, up) - loss(b, down)) / (static_cast<double>(a[i]) - b[i]);
            const double e = std::fabs(grad[i] - fd);
            err_all = std::max(err_all, e);
            scale_all = std::max(scale_all, std::fabs(fd));
            if (up != base || down != base) {
                ++crossed;
                continue;
            }
            ++used;
            err = std::max(err, e);
            scale = std::max(scale, std::fabs(fd));
        }
        worst_crossed = std::max(worst_crossed, err_all / scale_all);
        if (used < 4) continue;
        ++instances;
        used_total += used;
        worst = std::max(worst, err / scale);
    }
    return {instances >= 100 && worst <= 1e-3,
            std::to_string(instances) + " instances (joint loss and L_class), " + std::to_string(used_total) +
                " coordinates, worst relative error " + fmt("%.2e", worst) + " (bound 1e-3); " + std::to_string(crossed) +
                " stencils crossing a kink excluded, worst with them " + fmt("%.2e", worst_crossed)};
}

// --- 2 ----------------------------------------------------------------------------

Outcome tweedie_exactness(Context&) {
    const Schedule s = Schedule::linear();
    RngStream r(4048);
    double worst = 0;
    for (int t : {1, 60, 120, 199})
        for (int i = 0; i < 50; ++i) {
            const Tensor x = uniform_image(r);
            const Diffused d = forward_diffuse(s, x, t, r);
            const Tensor x0 = tweedie_estimate(s, d.z, t, [&](const Tensor&, int) { return d.eps; });
            double num = 0, den = 0;
            for (std::size_t j = 0; j < x.numel(); ++j) {
                num = std::max(num, std::fabs(static_cast<double>(x0[j]) - x[j]));
                den = std::max(den, std::fabs(static_cast<double>(x[j])));
            }
            worst = std::max(worst, num / den);
        }
    return {worst <= 1e-5, "t in {1, 60, 120, 199}, 50 images each, max relative error " + fmt("%.2e", worst)};
}

// --- 3 ----------------------------------------------------------------------------

Outcome blend_exactness(Context& ctx) {
    SamplerConfig sc = ctx.cfg.sampler();
    sc.retain_states = true;
    std::vector<app::Case> cases;
    for (const app::Case& cs : ctx.cases())
        if (cases.size() < 32 && ctx.models().clf.predict(cs.in.x) != ctx.cfg.target) cases.push_back(cs);
    const std::vector<Trajectory> trs = app::run_cases(cases, sc, ctx.models(), ctx.cfg.schedule(), ctx.jobs);
    long z_checked = 0, x_checked = 0, bad = 0;
    int samples = 0;
    for (const Trajectory& tr : trs) {
        if (tr.skipped) continue;
        ++samples;
        for (const StepRecord& st : tr.steps)
            for (std::size_t i = 0; i < tr.x.numel(); ++i) {
                if (st.mz[i] == 0) {
                    ++z_checked;
                    bad += !bits_equal(st.z_next[i], st.z_ref[i]);
                }
                if (st.mx[i] == 0) {
                    ++x_checked;
                    bad += !bits_equal(st.x_next[i], tr.x[i]);
                }
            }
    }
    return {samples == 32 && bad == 0 && z_checked > 0 && x_checked > 0,
            std::to_string(samples) + " trajectories, " + std::to_string(z_checked) + " masked z entries, " +
                std::to_string(x_checked) + " masked x entries, " + std::to_string(bad) + " mismatches"};
}

// --- 4 ----------------------------------------------------------------------------

Tensor sorted_top(const Tensor& g, int count) {
    std::vector<std::pair<float, int>> v;
    for (std::size_t i = 0; i < g.numel(); ++i) v.emplace_back(g[i], static_cast<int>(i));
    std::sort(v.begin(), v.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    Tensor m = Tensor::zeros_like(g);
    for (int i = 0; i < count; ++i) m[static_cast<std::size_t>(v[static_cast<std::size_t>(i)].second)] = 1;
    return m;
}

Outcome dual_mask_invariants(Context&) {
    RngStream r(8096);
    int failures = 0;
    for (int i = 0; i < 10000; ++i) {
        Tensor g({1, 32, 32});
        const int levels = r.uniform_int(2, 200);
        for (float& v : g.vec()) v = static_cast<float>(r.uniform_int(0, levels)) / levels;
        const double k = r.uniform(0.01, 0.5), rho = r.uniform(0.05, 1.0);
        const int nz = static_cast<int>(std::floor(k * 1024 + 0.5)), nx = static_cast<int>(std::floor(rho * k * 1024 + 0.5));
        const DualMaskRaw raw = select_dual(g, k, rho);
        const DualMask dm = build_dual_mask(g, k, rho, 5);
        const bool ok = popcount(raw.mz) == std::max(nz, 1) && popcount(raw.mx) == std::max(nx, 1) &&
                        raw.mz.bit_equal(sorted_top(g, std::max(nz, 1))) && raw.mx.bit_equal(sorted_top(g, std::max(nx, 1))) &&
                        is_subset(raw.mx, raw.mz) && is_subset(dm.mx, dm.mz);
        failures += !ok;
    }
    return {failures == 0, "10000 random 32x32 maps with ties, " + std::to_string(failures) + " violations"};
}

// --- 5-7 --------------------------------------------------------------------------

std::vector<std::size_t> kept_of(const std::vector<Trajectory>& trs) {
    std::vector<std::size_t> k;
    for (std::size_t i = 0; i < trs.size(); ++i)
        if (!trs[i].skipped) k.push_back(i);
    return k;
}

Outcome validity(Context& ctx) {
    const std::vector<Trajectory>& trs = ctx.run("maskdime", Variant::maskdime, ctx.cfg.s);
    const std::vector<std::size_t> kept = kept_of(trs);
    int flipped = 0;
    std::string misses;
    for (std::size_t i : kept) {
        flipped += trs[i].flipped;
        if (!trs[i].flipped) misses += " " + trs[i].id;
    }
    const double fr = kept.empty() ? 0 : static_cast<double>(flipped) / static_cast<double>(kept.size());
    std::string d = std::to_string(kept.size()) + " images (" + std::to_string(trs.size() - kept.size()) +
                    " skipped), flip rate " + fmt("%.4f", fr) + " (bound 0.95)";
    if (!misses.empty()) d += "; not flipped:" + misses;
    return {kept.size() >= 256 && fr >= 0.95, d};
}

Outcome localization(Context& ctx) {
    const std::vector<Trajectory>& md = ctx.run("maskdime", Variant::maskdime, ctx.cfg.s);
    const std::vector<Trajectory>& nm = ctx.run("no_mask(s=8)", Variant::no_mask, ctx.cfg.s);
    const std::vector<app::Case> cases = ctx.cases();
    std::vector<double> loc;
    int pairs = 0, better = 0;
    for (std::size_t i = 0; i < md.size(); ++i) {
        if (md[i].skipped) continue;
        const double a = metrics::locality(md[i].x, md[i].x_cf, cases[i].in.causal_mask).value;
        const double b = metrics::locality(nm[i].x, nm[i].x_cf, cases[i].in.causal_mask).value;
        loc.push_back(a);
        ++pairs;
        better += a > b;
    }
    const double med = metrics::median(loc), frac = pairs ? static_cast<double>(better) / pairs : 0;
    return {med >= 0.7 && frac >= 0.9, "median locality " + fmt("%.3f", med) + " (bound 0.7), maskdime > no_mask on " +
                                           std::to_string(better) + "/" + std::to_string(pairs) + " = " + fmt("%.3f", frac) +
                                           " (bound 0.9)"};
}

app::Summary summary_of(Context& ctx, const std::vector<Trajectory>& trs) {
    const std::vector<app::Case> cases = ctx.cases();
    std::vector<app::PairMetrics> pm;
    std::vector<Tensor> xs, cfs;
    for (std::size_t i = 0; i < trs.size(); ++i) {
        if (trs[i].skipped) continue;
        pm.push_back(app::pair_metrics(trs[i].x, trs[i].x_cf, cases[i].in.causal_mask, cases[i].label, ctx.cfg.target, ctx.models()));
        xs.push_back(trs[i].x);
        cfs.push_back(trs[i].x_cf);
    }
    return app::summarize(pm, xs, cfs, ctx.models(), ctx.cfg);
}

Outcome ablation_ordering(Context& ctx) {
    const app::Summary md = summary_of(ctx, ctx.run("maskdime", Variant::maskdime, ctx.cfg.s));
    const app::Summary nm8 = summary_of(ctx, ctx.run("no_mask(s=8)", Variant::no_mask, ctx.cfg.s));
    const app::Summary nm1 = summary_of(ctx, ctx.run("no_mask(s=1)", Variant::no_mask, 1.0));
    if (!md.sfid || !nm8.sfid) return {false, "too few samples for the sFID protocol"};
    const bool ok = md.sfid->mean < nm8.sfid->mean && nm1.cout < md.cout;
    return {ok, "proxy-sFID maskdime " + fmt("%.4f", md.sfid->mean) + " < no_mask(s=8) " + fmt("%.4f", nm8.sfid->mean) +
                    "; COUT no_mask(s=1) " + fmt("%.4f", nm1.cout) + " < maskdime " + fmt("%.4f", md.cout)};
}

// --- 8 ----------------------------------------------------------------------------

Outcome efficiency(Context& ctx) {
    SamplerConfig sc = ctx.cfg.sampler();
    sc.guidance.tau = 60;
    const Schedule sched = ctx.cfg.schedule();
    const std::vector<app::Case> cases = ctx.cases(3);
    long ev_md = 0, ev_dn = 0;
    double ms_md = 0, ms_dn = 0;
    for (const app::Case& cs : cases)
        for (Variant v : {Variant::maskdime, Variant::dime_nested}) {
            sc.variant = v;
            const auto t0 = std::chrono::steady_clock::now();
            const Trajectory tr = run_attempt(cs.in, sc, sc.lambda_c_list.front(), 0, ctx.models().nets(), sched);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            (v == Variant::maskdime ? ev_md : ev_dn) += tr.eps_evals;
            (v == Variant::maskdime ? ms_md : ms_dn) += ms;
        }
    const double ratio = static_cast<double>(ev_dn) / static_cast<double>(ev_md), wall = ms_dn / ms_md;
    const long n = static_cast<long>(cases.size());
    const bool exact = ev_md == 120 * n && ev_dn == 1890 * n && ratio == 15.75;
    return {exact && wall >= 10.0, "eps evaluations per sample " + std::to_string(ev_dn / n) + " vs " +
                                       std::to_string(ev_md / n) + ", ratio " + fmt("%.4f", ratio) +
                                       " (exact 15.75); wall-clock ratio " + fmt("%.2f", wall) + " (bound 10)"};
}

// --- 9 ----------------------------------------------------------------------------

Tensor gaussian_rows(RngStream& r, int n, int d, double mean) {
    Tensor t({n, d});
    for (float& v : t.vec()) v = static_cast<float>(mean + r.normal());
    return t;
}

Outcome metric_sanity(Context& ctx) {
    RngStream r(16192);
    const Tensor a = gaussian_rows(r, 500, 8, 0), b = gaussian_rows(r, 400, 8, 0.4);
    const double self = metrics::frechet(a, a), ab = metrics::frechet(a, b), ba = metrics::frechet(b, a);
    const double g9 = metrics::frechet(gaussian_rows(r, 20000, 1, 0), gaussian_rows(r, 20000, 1, 3));
    const bool frechet_ok = std::fabs(self) <= 1e-6 && std::fabs(ab - ba) <= 1e-6 * std::max(1.0, ab) &&
                            std::fabs(g9 / 9.0 - 1) <= 0.05;

    double lo = 1, hi = -1;
    for (int i = 0; i < 1000; ++i) {
        const Tensor x = uniform_image(r), cf = uniform_image(r);
        const double v = metrics::cout(x, cf, i % 2, 1 - i % 2, ctx.models().clf);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const bool cout_ok = lo >= -1 && hi <= 1;

    const Tensor o = gaussian_rows(r, 120, 16, 0), c = gaussian_rows(r, 120, 16, 0.3);
    const metrics::SfidResult s1 = metrics::sfid_protocol(o, c, 10, 77), s2 = metrics::sfid_protocol(o, c, 10, 77);
    const bool sfid_ok = s1.values == s2.values && s1.mean == s2.mean && s1.sd == s2.sd;

    return {frechet_ok && cout_ok && sfid_ok,
            "frechet self " + fmt("%.1e", self) + ", |d(a,b) - d(b,a)| " + fmt("%.1e", std::fabs(ab - ba)) +
                ", N(0,1) vs N(3,1) " + fmt("%.4f", g9) + " (analytic 9.0); COUT over 1000 pairs in [" + fmt("%.3f", lo) +
                ", " + fmt("%.3f", hi) + "]; sFID repeat " + (sfid_ok ? "identical" : "differs")};
}

// --- 10 ---------------------------------------------------------------------------

std::string shell_quote(const std::string& s) {
    std::string q = "'";
    for (char ch : s) q += ch == '\'' ? std::string("'\\''") : std::string(1, ch);
    return q + "'";
}

bool run_pipeline(const std::string& cli, const fs::path& dir, int jobs) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "small.conf") << "seed = 11\n"
                                         "data_dir = " << (dir / "data").string() << "\n"
                                         "model_dir = " << (dir / "models").string() << "\n"
                                         "out_dir = " << (dir / "out").string() << "\n"
                                         "n_train = 256\nn_eval = 24\neps_epochs = 1\nclf_epochs = 2\n"
                                         "explain_limit = 6\ndiversity_samples = 2\ndiversity_runs = 2\n";
    const std::string base = shell_quote(cli) + " --config " + shell_quote((dir / "small.conf").string()) +
                             " --jobs " + std::to_string(jobs) + " ";
    for (const char* step : {"gen-data", "train-ddpm", "train-clf", "explain --retain-states", "eval", "heatmap"}) {
        const std::string cmd = base + step + " > " + shell_quote((dir / "log.txt").string()) + " 2>&1";
        if (std::system(cmd.c_str()) != 0) {
            std::cerr << "  pipeline step failed: " << step << "\n";
            return false;
        }
    }
    return true;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), dir).string();
        const std::string name = e.path().filename().string();
        if (name == "timing.jsonl" || name == "log.txt" || name == "small.conf") continue;
        const persist::Bytes b = persist::read_file(e.path());
        files[rel] = std::string(b.begin(), b.end());
    }
    return files;
}

Outcome reproducibility(Context& ctx) {
    if (ctx.cli.empty()) return {false, "no --cli given"};
    const fs::path a = ctx.work / "repro_a", b = ctx.work / "repro_b";
    if (!run_pipeline(ctx.cli, a, 1) || !run_pipeline(ctx.cli, b, 2)) return {false, "pipeline run failed"};
    const auto ta = tree(a), tb = tree(b);
    int differ = 0, records = 0, images = 0, reports = 0;
    for (const auto& [rel, bytes] : ta) {
        const auto it = tb.find(rel);
        if (it == tb.end() || it->second != bytes) {
            ++differ;
            std::cerr << "  differs: " << rel << "\n";
        }
        records += rel.find("records.jsonl") != std::string::npos;
        images += rel.size() > 4 && (rel.ends_with(".pgm") || rel.ends_with(".pbm"));
        reports += rel.ends_with("report.txt");
    }
    differ += static_cast<int>(tb.size() > ta.size() ? tb.size() - ta.size() : 0);
    return {differ == 0 && records > 0 && images > 0 && reports > 0,
            std::to_string(ta.size()) + " files compared (" + std::to_string(images) + " images), runs with --jobs 1 and 2, " +
                std::to_string(differ) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);

    std::string config, cli, work = ".";
    std::vector<int> only;
    int jobs = 1;
    CLI::App app{"MaskDiME acceptance checks"};
    app.add_option("--config", config, "run config naming the trained models")->required();
    app.add_option("--cli", cli, "maskdime executable for the pipeline check");
    app.add_option("--work", work, "scratch directory");
    app.add_option("--only", only, "criteria to run");
    app.add_option("--jobs", jobs, "worker threads");
    CLI11_PARSE(app, argc, argv);

    Context ctx;
    ctx.cfg = load_config(config);
    ctx.cli = cli;
    ctx.jobs = jobs;
    ctx.work = work;

    const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"tweedie exactness", tweedie_exactness},
        {"blend exactness", blend_exactness},
        {"dual-mask invariants", dual_mask_invariants},
        {"validity (flip rate)", validity},
        {"localization", localization},
        {"ablation ordering", ablation_ordering},
        {"efficiency", efficiency},
        {"metric sanity", metric_sanity},
        {"reproducibility", reproducibility},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second(ctx);
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " " << criteria[i].first << ": " << o.detail
                  << " [" << fmt("%.1f", sec) << " s]" << std::endl;
        failed += !o.pass;
    }
    return failed ? 1 : 0;
}
