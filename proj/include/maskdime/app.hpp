#pragma once

// Subcommands behind the maskdime tool. Each takes a resolved RunConfig and
// writes its artifacts under the configured directories. Everything written
// here is a deterministic function of the config, except timing.jsonl and
// efficiency.tsv, which hold wall-clock measurements.

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "maskdime/config.hpp"
#include "maskdime/error.hpp"
#include "maskdime/metrics.hpp"
#include "maskdime/models.hpp"
#include "maskdime/parallel.hpp"
#include "maskdime/persist.hpp"
#include "maskdime/sampler.hpp"
#include "maskdime/synthdata.hpp"

namespace maskdime::app {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

struct Options {
    std::string config;
    int jobs = 1;
    std::string variant;
    std::string out;
    bool retain_states = false;
};

inline RunConfig resolve(const Options& o) {
    RunConfig c = load_config(o.config);
    if (!o.variant.empty()) c.variant = parse_variant(o.variant);
    if (!o.out.empty()) c.out_dir = o.out;
    if (o.jobs < 1) throw ConfigError("--jobs must be >= 1");
    c.validate();
    return c;
}

inline std::string num(double v, int prec = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

inline std::string short_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

inline void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
    std::string s;
    for (const auto& l : lines) s += l + "\n";
    persist::write_text_atomic(p, s);
}

inline std::vector<Json> read_jsonl(const fs::path& p) {
    const persist::Bytes b = persist::read_file(p);
    std::istringstream in(std::string(b.begin(), b.end()));
    std::vector<Json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(Json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("bad_records", "malformed record line in " + p.string() + ": " + e.what());
        }
    }
    return out;
}

// --- models -----------------------------------------------------------------------

struct Models {
    EpsilonNet eps;
    Classifier clf;
    FeatureNet feat;
    SamplerNets nets() const { return {eps, clf, feat}; }
};

inline fs::path eps_path(const RunConfig& c) { return fs::path(c.model_dir) / "eps.mdck"; }
inline fs::path clf_path(const RunConfig& c) { return fs::path(c.model_dir) / "clf.mdck"; }

inline Models load_models(const RunConfig& c, bool need_eps = true) {
    Models m{EpsilonNet(c.seed), Classifier(c.seed), FeatureNet(c.feature_seed)};
    if (need_eps) m.eps.params.load(persist::load_checkpoint(eps_path(c)), EpsilonNet::kKind);
    m.clf.params.load(persist::load_checkpoint(clf_path(c)), Classifier::kKind);
    return m;
}

// --- data ------------------------------------------------------------------------

inline synth::DatasetSpec dataset_spec(const RunConfig& c) {
    synth::DatasetSpec s;
    s.n_train = c.n_train;
    s.n_eval = c.n_eval;
    s.seed = c.seed;
    return s;
}

struct Case {
    SampleInput in;
    int label = 0;
};

/// Eval images of the source class (1 - target), keyed by eval index.
inline std::vector<Case> source_cases(const synth::Dataset& ds, const RunConfig& c, int limit) {
    std::vector<Case> out;
    for (std::size_t i = 0; i < ds.eval.size(); ++i) {
        const synth::Sample& s = ds.eval[i];
        if (s.label != 1 - c.target) continue;
        out.push_back({{s.id, static_cast<std::uint64_t>(i), s.image, s.causal_mask}, s.label});
        if (limit > 0 && static_cast<int>(out.size()) == limit) break;
    }
    return out;
}

inline std::vector<Trajectory> run_cases(const std::vector<Case>& cases, const SamplerConfig& sc, const Models& m,
                                         const Schedule& sched, int jobs) {
    std::vector<Trajectory> out(cases.size());
    parallel_for(cases.size(), jobs, [&](std::size_t i) { out[i] = run_sampler(cases[i].in, sc, m.nets(), sched); });
    return out;
}

// --- per-pair metrics ---------------------------------------------------------------

struct PairMetrics {
    bool flipped = false;
    float p_after = 0;
    double cout = 0, l1 = 0, locality = 1, s3 = 1;
    bool no_edit = false;
};

inline PairMetrics pair_metrics(const Tensor& x, const Tensor& cf, const Tensor& mask, int source, int target,
                                const Models& m) {
    PairMetrics p;
    p.flipped = m.clf.predict(cf) == target;
    p.p_after = m.clf.class_prob(cf, target);
    p.cout = metrics::cout(x, cf, source, target, m.clf);
    p.l1 = metrics::mean_l1(x, cf);
    const metrics::Locality loc = metrics::locality(x, cf, mask);
    p.locality = loc.value;
    p.no_edit = loc.no_edit;
    p.s3 = metrics::s3_proxy(x, cf, m.feat);
    return p;
}

struct Summary {
    int n = 0;
    double fr = 0, cout = 0, l1 = 0, locality_median = 0, locality_mean = 0, s3 = 0;
    double fid = 0;
    std::optional<metrics::SfidResult> sfid;
};

inline Summary summarize(const std::vector<PairMetrics>& pm, const std::vector<Tensor>& xs, const std::vector<Tensor>& cfs,
                         const Models& m, const RunConfig& c) {
    Summary s;
    s.n = static_cast<int>(pm.size());
    if (s.n == 0) return s;
    std::vector<double> loc;
    for (const PairMetrics& p : pm) {
        s.fr += p.flipped;
        s.cout += p.cout;
        s.l1 += p.l1;
        s.s3 += p.s3;
        loc.push_back(p.locality);
    }
    s.fr /= s.n;
    s.cout /= s.n;
    s.l1 /= s.n;
    s.s3 /= s.n;
    s.locality_median = metrics::median(loc);
    for (double v : loc) s.locality_mean += v / s.n;
    auto stack = [](const std::vector<Tensor>& v) {
        Tensor t({static_cast<int>(v.size()), 1, synth::kSize, synth::kSize});
        for (std::size_t i = 0; i < v.size(); ++i) std::copy(v[i].vec().begin(), v[i].vec().end(), t.data() + i * v[i].numel());
        return t;
    };
    if (s.n >= 2) {
        const Tensor fo = m.feat.features(stack(xs)), fc = m.feat.features(stack(cfs));
        s.fid = metrics::frechet(fo, fc);
        if (s.n >= 40) s.sfid = metrics::sfid_protocol(fo, fc, c.sfid_repeats, c.seed);
    }
    return s;
}

// --- gen-data / training ----------------------------------------------------------

inline Json cmd_gen_data(const RunConfig& c) {
    const synth::Dataset ds = synth::generate(dataset_spec(c));
    synth::save_dataset(c.data_dir, ds);
    return Json{{"command", "gen-data"}, {"train", ds.train.size()}, {"eval", ds.eval.size()}, {"dir", c.data_dir}};
}

inline std::vector<int> labels_of(const std::vector<synth::Sample>& v) {
    std::vector<int> y;
    for (const auto& s : v) y.push_back(s.label);
    return y;
}

inline Json cmd_train_ddpm(const RunConfig& c) {
    const synth::Dataset ds = synth::load_dataset(c.data_dir);
    if (ds.train.empty()) throw Error("no_samples", "no samples");
    EpsTrainConfig tc;
    tc.epochs = c.eps_epochs;
    tc.batch = c.eps_batch;
    tc.lr = c.eps_lr;
    tc.seed = c.seed;
    const EpsilonNet net = train_epsilon(synth::stack_images(ds.train), c.schedule(), tc);
    persist::save_checkpoint(eps_path(c), net.params.to_checkpoint(EpsilonNet::kKind));
    return Json{{"command", "train-ddpm"}, {"final_loss", net.final_loss}, {"checkpoint", eps_path(c).string()}};
}

inline Json cmd_train_clf(const RunConfig& c) {
    const synth::Dataset ds = synth::load_dataset(c.data_dir);
    if (ds.train.empty()) throw Error("no_samples", "no samples");
    ClfTrainConfig tc;
    tc.epochs = c.clf_epochs;
    tc.batch = c.clf_batch;
    tc.lr = c.clf_lr;
    tc.weight_decay = c.clf_weight_decay;
    tc.seed = c.seed;
    const Classifier net = train_classifier(synth::stack_images(ds.train), labels_of(ds.train), tc);
    persist::save_checkpoint(clf_path(c), net.params.to_checkpoint(Classifier::kKind));
    Json out{{"command", "train-clf"}, {"final_loss", net.final_loss}, {"checkpoint", clf_path(c).string()}};
    if (!ds.eval.empty()) out["eval_accuracy"] = accuracy(net, synth::stack_images(ds.eval), labels_of(ds.eval));
    return out;
}

// --- explain ---------------------------------------------------------------------------

inline Json record_of(const Trajectory& tr, const Case& cs, const std::string& cf_file) {
    Json r;
    r["id"] = tr.id;
    r["variant"] = variant_name(tr.variant);
    r["skipped"] = tr.skipped;
    r["lambda_c"] = tr.skipped ? Json() : Json(tr.lambda_c);
    r["attempts"] = tr.attempts;
    r["flipped"] = tr.flipped;
    r["p_before"] = static_cast<double>(tr.p_before);
    r["p_after"] = static_cast<double>(tr.p_after);
    r["l1"] = metrics::mean_l1(tr.x, tr.x_cf);
    r["locality"] = metrics::locality(tr.x, tr.x_cf, cs.in.causal_mask).value;
    r["eps_evals"] = tr.eps_evals;
    r["eps_evals_total"] = tr.eps_evals_total;
    r["cf"] = cf_file;
    return r;
}

inline Json cmd_explain(const RunConfig& c, const Options& o) {
    const synth::Dataset ds = synth::load_dataset(c.data_dir);
    const Models m = load_models(c);
    const std::vector<Case> cases = source_cases(ds, c, c.explain_limit);
    if (cases.empty()) throw Error("no_samples", "no samples");
    SamplerConfig sc = c.sampler();
    sc.retain_states = o.retain_states;
    const std::vector<Trajectory> trs = run_cases(cases, sc, m, c.schedule(), o.jobs);

    const fs::path out(c.out_dir);
    fs::create_directories(out / "cf");
    std::vector<std::string> records, timing;
    int flipped = 0, skipped = 0;
    for (std::size_t i = 0; i < trs.size(); ++i) {
        const Trajectory& tr = trs[i];
        const std::string cf_file = "cf/" + tr.id + ".mdtf";
        persist::save_tensor(out / cf_file, tr.x_cf);
        persist::save_pgm(out / "cf" / (tr.id + ".pgm"), tr.x_cf);
        records.push_back(record_of(tr, cases[i], cf_file).dump());
        timing.push_back(Json{{"id", tr.id}, {"wall_ms", tr.wall_ms}}.dump());
        flipped += tr.flipped;
        skipped += tr.skipped;
        if (o.retain_states && !tr.skipped) {
            const std::vector<Tensor> heat = update_heatmaps(tr);
            const int n = static_cast<int>(heat.size());
            Tensor h({n, 1, synth::kSize, synth::kSize}), mz(h.shape()), mx(h.shape());
            for (int k = 0; k < n; ++k) {
                const std::size_t off = static_cast<std::size_t>(k) * heat[k].numel();
                std::copy(heat[k].vec().begin(), heat[k].vec().end(), h.data() + off);
                std::copy(tr.steps[k].mz.vec().begin(), tr.steps[k].mz.vec().end(), mz.data() + off);
                std::copy(tr.steps[k].mx.vec().begin(), tr.steps[k].mx.vec().end(), mx.data() + off);
            }
            persist::save_tensor(out / "states" / (tr.id + ".heat.mdtf"), h);
            persist::save_tensor(out / "states" / (tr.id + ".mz.mdtf"), mz);
            persist::save_tensor(out / "states" / (tr.id + ".mx.mdtf"), mx);
        }
    }
    write_lines(out / "records.jsonl", records);
    write_lines(out / "timing.jsonl", timing);
    return Json{{"command", "explain"}, {"variant", variant_name(c.variant)}, {"samples", trs.size()},
                {"flipped", flipped}, {"skipped", skipped}, {"records", (out / "records.jsonl").string()}};
}

// --- heatmap ---------------------------------------------------------------------------

inline std::string step_name(int t) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "t%03d", t);
    return buf;
}

inline Json cmd_heatmap(const RunConfig& c) {
    const fs::path out(c.out_dir);
    const std::vector<Json> recs = read_jsonl(c.records_path());
    int written = 0;
    for (const Json& r : recs) {
        if (r.at("skipped").get<bool>()) continue;
        const std::string id = r.at("id").get<std::string>();
        const fs::path hp = out / "states" / (id + ".heat.mdtf");
        if (!fs::exists(hp))
            throw Error("no_states", "no retained states for " + id + "; rerun explain with --retain-states");
        const Tensor h = persist::load_tensor(hp);
        const Tensor mz = persist::load_tensor(out / "states" / (id + ".mz.mdtf"));
        const Tensor mx = persist::load_tensor(out / "states" / (id + ".mx.mdtf"));
        const int n = h.dim(0);
        const std::size_t plane = h.numel() / static_cast<std::size_t>(n);
        auto slice = [&](const Tensor& t, int k) {
            return Tensor({1, t.dim(2), t.dim(3)}, std::vector<float>(t.data() + k * plane, t.data() + (k + 1) * plane));
        };
        for (int k = 0; k < n; ++k) {
            const int t = n - k;  // steps are stored from t = tau down to 1
            // Heat in [0, 1] maps to the full grey range.
            persist::save_pgm(out / "heatmaps" / id / (step_name(t) + ".pgm"), map(slice(h, k), [](float v) { return 2 * v - 1; }));
            persist::save_pbm(out / "masks" / id / ("mz_" + step_name(t) + ".pbm"), slice(mz, k));
            persist::save_pbm(out / "masks" / id / ("mx_" + step_name(t) + ".pbm"), slice(mx, k));
        }
        ++written;
    }
    if (written == 0) throw Error("no_samples", "no samples");
    return Json{{"command", "heatmap"}, {"samples", written}, {"dir", (out / "heatmaps").string()}};
}

// --- eval ------------------------------------------------------------------------------

inline double diversity_of(const Case& cs, const RunConfig& c, const Models& m, const Schedule& sched) {
    std::vector<Tensor> runs;
    SamplerConfig sc = c.sampler();
    const RngStream root = RngStream(c.seed).substream({tag(StreamTag::diversity)});
    for (int r = 0; r < c.diversity_runs; ++r) {
        RngStream s = root.substream({static_cast<std::uint64_t>(r)});
        sc.seed = s.next_u64();
        runs.push_back(run_sampler(cs.in, sc, m.nets(), sched).x_cf);
    }
    return metrics::diversity_sigma(runs, m.feat);
}

inline Json cmd_eval(const RunConfig& c, const Options& o) {
    const std::vector<Json> recs = read_jsonl(c.records_path());
    if (recs.empty()) throw Error("no_samples", "no samples");
    const synth::Dataset ds = synth::load_dataset(c.data_dir);
    std::map<std::string, std::size_t> by_id;
    for (std::size_t i = 0; i < ds.eval.size(); ++i) by_id[ds.eval[i].id] = i;
    const bool need_eps = c.diversity_samples > 0;
    const Models m = load_models(c, need_eps);
    const fs::path base = c.records_path().parent_path();

    std::vector<Case> cases;
    std::vector<Tensor> cfs;
    int skipped = 0;
    for (const Json& r : recs) {
        const std::string id = r.at("id").get<std::string>();
        const auto it = by_id.find(id);
        if (it == by_id.end()) throw FormatError("unknown_sample", "record refers to unknown eval sample " + id);
        if (r.at("skipped").get<bool>()) {
            ++skipped;
            continue;
        }
        const synth::Sample& s = ds.eval[it->second];
        cases.push_back({{s.id, static_cast<std::uint64_t>(it->second), s.image, s.causal_mask}, s.label});
        cfs.push_back(persist::load_tensor(base / r.at("cf").get<std::string>()));
        require_same_shape(cfs.back(), s.image, "counterfactual");
    }
    if (cases.empty()) throw Error("no_samples", "no samples");

    std::vector<PairMetrics> pm(cases.size());
    parallel_for(cases.size(), o.jobs, [&](std::size_t i) {
        pm[i] = pair_metrics(cases[i].in.x, cfs[i], cases[i].in.causal_mask, cases[i].label, c.target, m);
    });
    std::vector<Tensor> xs;
    for (const Case& cs : cases) xs.push_back(cs.in.x);
    const Summary s = summarize(pm, xs, cfs, m, c);

    std::optional<double> sigma;
    if (need_eps) {
        const std::size_t nd = std::min<std::size_t>(cases.size(), static_cast<std::size_t>(c.diversity_samples));
        std::vector<double> d(nd);
        const Schedule sched = c.schedule();
        parallel_for(nd, o.jobs, [&](std::size_t i) { d[i] = diversity_of(cases[i], c, m, sched); });
        double acc = 0;
        for (double v : d) acc += v;
        sigma = acc / static_cast<double>(nd);
    }

    std::vector<std::string> lines{
        "samples = " + std::to_string(s.n),
        "skipped = " + std::to_string(skipped),
        "FR = " + num(s.fr),
        "COUT = " + num(s.cout),
        "proxy_FID = " + (s.n >= 2 ? num(s.fid) : std::string("n/a")),
        "proxy_sFID = " + (s.sfid ? num(s.sfid->mean) : std::string("n/a")),
        "proxy_sFID_sd = " + (s.sfid && s.sfid->sd_defined ? num(s.sfid->sd) : std::string("n/a")),
        "sFID_repeats = " + std::to_string(c.sfid_repeats),
        "L1 = " + num(s.l1),
        "locality_median = " + num(s.locality_median),
        "locality_mean = " + num(s.locality_mean),
        "S3proxy = " + num(s.s3),
        "sigma_L = " + (sigma ? num(*sigma) : std::string("n/a")),
        "MNAC = n/a",
        "CD = n/a",
        "",
        "id\tflipped\tp_after\tcout\tl1\tlocality\ts3",
    };
    for (std::size_t i = 0; i < cases.size(); ++i)
        lines.push_back(cases[i].in.id + "\t" + (pm[i].flipped ? "1" : "0") + "\t" + num(pm[i].p_after) + "\t" +
                        num(pm[i].cout) + "\t" + num(pm[i].l1) + "\t" + num(pm[i].locality) + "\t" + num(pm[i].s3));
    const fs::path report = fs::path(c.out_dir) / "report.txt";
    write_lines(report, lines);
    return Json{{"command", "eval"}, {"samples", s.n}, {"FR", s.fr}, {"report", report.string()}};
}

// --- ablate ----------------------------------------------------------------------------

struct AblationRow {
    std::string name;
    Variant variant;
    double s, rho;
};

inline std::vector<AblationRow> ablation_rows(const RunConfig& c) {
    return {{"no_mask(s=1)", Variant::no_mask, 1.0, c.rho},
            {"no_mask(s=" + short_num(c.s) + ")", Variant::no_mask, c.s, c.rho},
            {"fixed_mask", Variant::fixed_mask, c.s, 1.0},
            {"mask(rho=1)", Variant::maskdime, c.s, 1.0},
            {"maskdime(rho=" + short_num(c.rho) + ")", Variant::maskdime, c.s, c.rho}};
}

inline Json cmd_ablate(const RunConfig& c, const Options& o) {
    const synth::Dataset ds = synth::load_dataset(c.data_dir);
    const Models m = load_models(c);
    const Schedule sched = c.schedule();
    const std::vector<Case> cases = source_cases(ds, c, c.ablate_samples);
    if (cases.empty()) throw Error("no_samples", "no samples");
    const fs::path out(c.out_dir);

    std::vector<std::string> table{"row\tvariant\ts\trho\tn\tskipped\tFR\tCOUT\tproxy_sFID\tproxy_sFID_sd\tL1\tlocality_median\tS3proxy\teps_evals_mean"};
    std::vector<std::string> per_sample;
    for (const AblationRow& row : ablation_rows(c)) {
        SamplerConfig sc = c.sampler();
        sc.variant = row.variant;
        sc.guidance.s = row.s;
        sc.guidance.rho = row.rho;
        const std::vector<Trajectory> trs = run_cases(cases, sc, m, sched, o.jobs);
        std::vector<std::size_t> kept;
        for (std::size_t i = 0; i < trs.size(); ++i)
            if (!trs[i].skipped) kept.push_back(i);
        std::vector<PairMetrics> pm(kept.size());
        parallel_for(kept.size(), o.jobs, [&](std::size_t j) {
            const std::size_t i = kept[j];
            pm[j] = pair_metrics(cases[i].in.x, trs[i].x_cf, cases[i].in.causal_mask, cases[i].label, c.target, m);
        });
        std::vector<Tensor> xs, cfs;
        double evals = 0;
        for (std::size_t j = 0; j < kept.size(); ++j) {
            const Trajectory& tr = trs[kept[j]];
            xs.push_back(tr.x);
            cfs.push_back(tr.x_cf);
            evals += static_cast<double>(tr.eps_evals_total);
            per_sample.push_back(Json{{"row", row.name}, {"id", tr.id}, {"flipped", pm[j].flipped},
                                      {"lambda_c", tr.lambda_c}, {"cout", pm[j].cout}, {"l1", pm[j].l1},
                                      {"locality", pm[j].locality}, {"s3", pm[j].s3}, {"eps_evals", tr.eps_evals_total}}
                                     .dump());
        }
        const Summary s = summarize(pm, xs, cfs, m, c);
        table.push_back(row.name + "\t" + variant_name(row.variant) + "\t" + num(row.s, 2) + "\t" + num(row.rho, 2) + "\t" +
                        std::to_string(s.n) + "\t" + std::to_string(trs.size() - kept.size()) + "\t" + num(s.fr) + "\t" +
                        num(s.cout) + "\t" + (s.sfid ? num(s.sfid->mean) : "n/a") + "\t" +
                        (s.sfid && s.sfid->sd_defined ? num(s.sfid->sd) : "n/a") + "\t" + num(s.l1) + "\t" +
                        num(s.locality_median) + "\t" + num(s.s3) + "\t" +
                        num(s.n ? evals / s.n : 0, 2));
    }
    write_lines(out / "ablation.tsv", table);
    write_lines(out / "ablation_records.jsonl", per_sample);

    // Efficiency: one attempt per sample at the first lambda_c, all five variants.
    std::vector<std::string> eff{"variant\tsamples\teps_evals_per_sample\tms_per_sample\teval_ratio\ttime_ratio"};
    const std::vector<Case> few(cases.begin(), cases.begin() + std::min<std::ptrdiff_t>(cases.size(), c.ablate_nested_samples));
    double base_evals = 0, base_ms = 0;
    for (Variant v : {Variant::maskdime, Variant::no_mask, Variant::fixed_mask, Variant::pixel_diff_mask, Variant::dime_nested}) {
        if (few.empty()) break;
        SamplerConfig sc = c.sampler();
        sc.variant = v;
        sc.retry = false;
        double evals = 0, ms = 0;
        int n = 0;
        for (const Case& cs : few) {
            const auto t0 = std::chrono::steady_clock::now();
            const Trajectory tr = run_attempt(cs.in, sc, sc.lambda_c_list.front(), 0, m.nets(), sched);
            ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            evals += static_cast<double>(tr.eps_evals);
            ++n;
        }
        evals /= n;
        ms /= n;
        if (v == Variant::maskdime) {
            base_evals = evals;
            base_ms = ms;
        }
        eff.push_back(std::string(variant_name(v)) + "\t" + std::to_string(n) + "\t" + num(evals, 2) + "\t" + num(ms, 1) +
                      "\t" + num(evals / base_evals, 4) + "\t" + num(ms / base_ms, 2));
    }
    write_lines(out / "efficiency.tsv", eff);
    return Json{{"command", "ablate"}, {"samples", cases.size()}, {"table", (out / "ablation.tsv").string()},
                {"efficiency", (out / "efficiency.tsv").string()}};
}

}  // namespace maskdime::app
