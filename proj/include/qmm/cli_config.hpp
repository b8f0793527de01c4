#pragma once

#include <cstdlib>

#include <json.hpp>

#include "qmm/counter.hpp"
#include "qmm/data.hpp"
#include "qmm/gan.hpp"

namespace qmm {

// Merged run configuration: JSON file < command-line flags. The only
// environment input is QMM_SEED, used as the default seed when neither the
// config file nor a flag sets one. Unknown keys are rejected.
struct RunConfig {
    uint64_t seed = 1234;
    int threads = default_thread_count();
    bool deterministic = true;

    SynthParams synth;
    std::array<double, 3> split_ratios{0.8, 0.1, 0.1};

    GanTrainConfig gan;
    GeneratorConfig generator;
    DiscriminatorConfig discriminator;

    CounterTrainConfig counter;
    InputMode input_mode = InputMode::rgb_tir;

    // propagate the top-level seed/threads into the per-stage configs
    void finalize() {
        synth.seed = seed;
        gan.seed = seed;
        gan.threads = threads;
        counter.seed = seed;
        counter.threads = threads;
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                                const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown config key \"" + key + "\" in " + where);
}

template <typename T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    RunConfig cfg;
    if (const char* env = std::getenv("QMM_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError("QMM_SEED must be an unsigned integer, got \"" +
                              std::string(env) + "\"");
        }
    }

    detail::reject_unknown_keys(
        j, {"seed", "threads", "deterministic", "synth", "gan", "counter"}, "config root");
    detail::maybe(j, "seed", cfg.seed);
    detail::maybe(j, "threads", cfg.threads);
    detail::maybe(j, "deterministic", cfg.deterministic);

    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        detail::reject_unknown_keys(s,
                                    {"n_images", "height", "width", "heads_min", "heads_max",
                                     "head_radius", "dark_fraction", "sigma", "split_ratios"},
                                    "synth");
        detail::maybe(s, "n_images", cfg.synth.n_images);
        detail::maybe(s, "height", cfg.synth.height);
        detail::maybe(s, "width", cfg.synth.width);
        detail::maybe(s, "heads_min", cfg.synth.heads_min);
        detail::maybe(s, "heads_max", cfg.synth.heads_max);
        detail::maybe(s, "head_radius", cfg.synth.head_radius);
        detail::maybe(s, "dark_fraction", cfg.synth.dark_fraction);
        detail::maybe(s, "sigma", cfg.synth.sigma);
        detail::maybe(s, "split_ratios", cfg.split_ratios);
    }
    if (j.contains("gan")) {
        const auto& g = j.at("gan");
        detail::reject_unknown_keys(g,
                                    {"epochs", "batch_size", "lr", "adam_betas", "lambda_l1",
                                     "generator", "discriminator"},
                                    "gan");
        detail::maybe(g, "epochs", cfg.gan.epochs);
        detail::maybe(g, "batch_size", cfg.gan.batch_size);
        detail::maybe(g, "lr", cfg.gan.lr);
        detail::maybe(g, "adam_betas", cfg.gan.adam_betas);
        detail::maybe(g, "lambda_l1", cfg.gan.lambda_l1);
        if (g.contains("generator")) {
            const auto& gen = g.at("generator");
            detail::reject_unknown_keys(gen, {"levels", "base_filters", "skip_connections"},
                                        "gan.generator");
            detail::maybe(gen, "levels", cfg.generator.levels);
            detail::maybe(gen, "base_filters", cfg.generator.base_filters);
            detail::maybe(gen, "skip_connections", cfg.generator.skip_connections);
        }
        if (g.contains("discriminator")) {
            const auto& d = g.at("discriminator");
            detail::reject_unknown_keys(d, {"layers", "base_filters"}, "gan.discriminator");
            detail::maybe(d, "layers", cfg.discriminator.layers);
            detail::maybe(d, "base_filters", cfg.discriminator.base_filters);
        }
    }
    if (j.contains("counter")) {
        const auto& c = j.at("counter");
        detail::reject_unknown_keys(c,
                                    {"epochs_max", "batch_size", "lr", "adam_betas",
                                     "early_stop_patience", "input_mode", "stop_at_train_mae"},
                                    "counter");
        detail::maybe(c, "epochs_max", cfg.counter.epochs_max);
        detail::maybe(c, "batch_size", cfg.counter.batch_size);
        detail::maybe(c, "lr", cfg.counter.lr);
        detail::maybe(c, "adam_betas", cfg.counter.adam_betas);
        detail::maybe(c, "early_stop_patience", cfg.counter.early_stop_patience);
        detail::maybe(c, "stop_at_train_mae", cfg.counter.stop_at_train_mae);
        if (c.contains("input_mode"))
            cfg.input_mode = input_mode_from_string(c.at("input_mode").get<std::string>());
    }
    return cfg;
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config parse error in " + path.string() + ": " + e.what());
    }
    try {
        return parse_run_config(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config error in " + path.string() + ": " + e.what());
    }
}

} // namespace qmm
