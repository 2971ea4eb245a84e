#include <cstdio>
#include <cstdint>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metakgr/workbench.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::string method;
    std::vector<int> shots;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config_path, "experiment config JSON")->required();
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out_dir, "override the output directory");
    sub->add_option("--shots", o.shots, "support-set size(s); a list only for sweep")->delimiter(',');
    sub->add_option("--method", o.method,
                    "override the method (random|transfer|maml|maml-mask|neighbor|path)");
}

metakgr::ExperimentConfig load_with_overrides(const CommonOpts& o, bool shots_is_list) {
    metakgr::ExperimentConfig c = metakgr::load_config(o.config_path);
    if (o.seed_set) c.seed = o.seed;
    if (!o.out_dir.empty()) c.out_dir = o.out_dir;
    if (!o.method.empty()) {
        if (!metakgr::is_method(o.method)) throw metakgr::ConfigError("unknown method '" + o.method + "'");
        c.method = o.method;
        c.sweep_methods.clear(); // an explicit method narrows the sweep to it
    }
    if (!o.shots.empty()) {
        if (shots_is_list) {
            c.sweep_shots = o.shots;
        } else if (o.shots.size() == 1) {
            c.shots = o.shots.front();
        } else {
            throw metakgr::ConfigError("--shots takes a single value for this command");
        }
    }
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"meta-kgr: few-shot multi-hop knowledge-graph reasoning workbench"};
    app.require_subcommand(1);

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"train", "train the configured method and write loss.csv + checkpoint.bin"},
        {"finetune", "trace per-step fine-tuning metrics on meta-test"},
        {"eval", "dev-selected Initial/Best protocol on meta-test"},
        {"sweep", "repeat the protocol over a list of shot counts (and methods)"},
        {"ablate", "compare encoder-1-shot / encoder-50-shot / no-encoder initial metrics"},
        {"gradcheck", "finite-difference checks for every parameterized pathway"},
    };
    std::vector<CommonOpts> opts(commands.size());
    std::vector<CLI::App*> subs;
    for (std::size_t i = 0; i < commands.size(); ++i) {
        CLI::App* sub = app.add_subcommand(commands[i].first, commands[i].second);
        add_common(sub, opts[i]);
        subs.push_back(sub);
    }

    CLI11_PARSE(app, argc, argv);

    for (std::size_t i = 0; i < commands.size(); ++i) {
        if (!subs[i]->parsed()) continue;
        opts[i].seed_set = subs[i]->count("--seed") > 0;
        try {
            const auto config = load_with_overrides(opts[i], commands[i].first == "sweep");
            return metakgr::run_command(commands[i].first, config);
        } catch (const metakgr::Error& e) {
            std::fprintf(stderr, "error: %s\n", e.what());
            return 1;
        } catch (const std::exception& e) {
            std::fprintf(stderr, "unexpected error: %s\n", e.what());
            return 1;
        }
    }
    return 1;
}
