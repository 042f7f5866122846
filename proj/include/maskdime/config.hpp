#pragma once

// Run configuration: `key = value` lines, `#` starts a comment. Unknown keys
// are rejected. MASKDIFF_SEED in the environment overrides `seed`.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "maskdime/error.hpp"
#include "maskdime/persist.hpp"
#include "maskdime/sampler.hpp"

namespace maskdime {

struct RunConfig {
    std::uint64_t seed = 1;
    std::string data_dir = "data";
    std::string model_dir = "models";
    std::string out_dir = "out";
    std::string records;  // eval input; defaults to <out_dir>/records.jsonl

    int n_train = 4000;
    int n_eval = 512;

    int T = 200;
    double beta_start = 1e-4;
    double beta_end = 0.05;

    int eps_epochs = 5;
    int eps_batch = 16;
    double eps_lr = 2e-3;
    int clf_epochs = 6;
    int clf_batch = 32;
    double clf_lr = 0.02;
    double clf_weight_decay = 0.02;
    std::uint64_t feature_seed = 1;

    Variant variant = Variant::maskdime;
    int target = 1;
    int tau = 60;
    double s = 8;
    double k = 0.1;
    double rho = 0.5;
    std::vector<double> lambda_c{8, 10, 15};
    double lambda_p = 30;
    double lambda_l = 0.05;
    int dilation = 5;
    bool retry = true;

    int explain_limit = 0;  // 0: every eligible eval image
    int ablate_samples = 64;
    int ablate_nested_samples = 4;
    int sfid_repeats = 10;
    int diversity_runs = 5;
    int diversity_samples = 8;

    Schedule schedule() const { return Schedule::linear(T, beta_start, beta_end); }

    SamplerConfig sampler() const {
        SamplerConfig c;
        c.variant = variant;
        c.guidance.lambda_c = lambda_c.front();
        c.guidance.lambda_p = lambda_p;
        c.guidance.lambda_l = lambda_l;
        c.guidance.s = s;
        c.guidance.y = target;
        c.guidance.tau = tau;
        c.guidance.k = k;
        c.guidance.rho = rho;
        c.lambda_c_list = lambda_c;
        c.retry = retry;
        c.dilation = dilation;
        c.seed = seed;
        return c;
    }

    std::filesystem::path records_path() const {
        return records.empty() ? std::filesystem::path(out_dir) / "records.jsonl" : std::filesystem::path(records);
    }

    void validate() const {
        if (n_train < 2 || n_eval < 1) throw ConfigError("n_train must be >= 2 and n_eval >= 1");
        if (T < 1) throw ConfigError("T must be >= 1");
        if (eps_epochs < 1 || clf_epochs < 1 || eps_batch < 1 || clf_batch < 1) throw ConfigError("epochs and batch sizes must be >= 1");
        if (!(eps_lr > 0) || !(clf_lr > 0)) throw ConfigError("learning rates must be positive");
        if (clf_weight_decay < 0) throw ConfigError("clf_weight_decay must be nonnegative");
        if (lambda_c.empty()) throw ConfigError("lambda_c needs at least one value");
        for (double v : lambda_c)
            if (v < 0) throw ConfigError("lambda_c values must be nonnegative");
        if (dilation < 1 || dilation % 2 == 0) throw ConfigError("dilation must be odd and positive");
        if (explain_limit < 0 || ablate_samples < 1 || ablate_nested_samples < 0) throw ConfigError("sample counts out of range");
        if (sfid_repeats < 1) throw ConfigError("sfid_repeats must be >= 1");
        if (diversity_runs < 2 || diversity_samples < 0) throw ConfigError("diversity_runs must be >= 2");
        schedule();
        sampler().guidance.validate(T);
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
    std::istringstream in(v);
    T out{};
    in >> out;
    if (in.fail() || !in.eof()) throw ConfigError("bad value for " + key + ": '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("bad value for " + key + ": '" + v + "'");
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::istringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) out.push_back(parse_number<double>(key, trim(item)));
    return out;
}

}  // namespace config_detail

inline void set_key(RunConfig& c, const std::string& key, const std::string& v) {
    using namespace config_detail;
    using Setter = std::function<void(const std::string&)>;
    auto num = [&](auto& field) {
        return Setter([&field, key](const std::string& s) { field = parse_number<std::remove_reference_t<decltype(field)>>(key, s); });
    };
    auto str = [](std::string& field) { return Setter([&field](const std::string& s) { field = s; }); };
    const std::map<std::string, Setter> table{
        {"seed", num(c.seed)},
        {"data_dir", str(c.data_dir)},
        {"model_dir", str(c.model_dir)},
        {"out_dir", str(c.out_dir)},
        {"records", str(c.records)},
        {"n_train", num(c.n_train)},
        {"n_eval", num(c.n_eval)},
        {"T", num(c.T)},
        {"beta_start", num(c.beta_start)},
        {"beta_end", num(c.beta_end)},
        {"eps_epochs", num(c.eps_epochs)},
        {"eps_batch", num(c.eps_batch)},
        {"eps_lr", num(c.eps_lr)},
        {"clf_epochs", num(c.clf_epochs)},
        {"clf_batch", num(c.clf_batch)},
        {"clf_lr", num(c.clf_lr)},
        {"clf_weight_decay", num(c.clf_weight_decay)},
        {"feature_seed", num(c.feature_seed)},
        {"variant", [&](const std::string& s) { c.variant = parse_variant(s); }},
        {"target", num(c.target)},
        {"tau", num(c.tau)},
        {"s", num(c.s)},
        {"k", num(c.k)},
        {"rho", num(c.rho)},
        {"lambda_c", [&](const std::string& s) { c.lambda_c = parse_list(key, s); }},
        {"lambda_p", num(c.lambda_p)},
        {"lambda_l", num(c.lambda_l)},
        {"dilation", num(c.dilation)},
        {"retry", [&](const std::string& s) { c.retry = parse_bool(key, s); }},
        {"explain_limit", num(c.explain_limit)},
        {"ablate_samples", num(c.ablate_samples)},
        {"ablate_nested_samples", num(c.ablate_nested_samples)},
        {"sfid_repeats", num(c.sfid_repeats)},
        {"diversity_runs", num(c.diversity_runs)},
        {"diversity_samples", num(c.diversity_samples)},
    };
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(v);
}

inline RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = config_detail::trim(line.substr(0, eq)), value = config_detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        set_key(c, key, value);
    }
    return c;
}

inline void apply_env(RunConfig& c) {
    if (const char* s = std::getenv("MASKDIFF_SEED"); s && *s) c.seed = config_detail::parse_number<std::uint64_t>("MASKDIFF_SEED", s);
}

/// Empty path: defaults. The environment override is applied either way.
inline RunConfig load_config(const std::filesystem::path& path) {
    RunConfig c;
    if (!path.empty()) {
        const persist::Bytes b = persist::read_file(path);
        c = parse_config(std::string(b.begin(), b.end()));
    }
    apply_env(c);
    c.validate();
    return c;
}

}  // namespace maskdime
