#pragma once

#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "metakgr/error.hpp"
#include "metakgr/eval.hpp"

namespace metakgr {

/// Shortest round-trippable decimal; identical doubles print identically, so
/// reruns of a deterministic pipeline produce byte-identical files.
inline std::string format_metric(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    double parsed = 0.0;
    std::sscanf(buf, "%lg", &parsed);
    for (int prec = 1; prec <= 16; ++prec) {
        char shorter[40];
        std::snprintf(shorter, sizeof(shorter), "%.*g", prec, x);
        std::sscanf(shorter, "%lg", &parsed);
        if (parsed == x) return shorter;
    }
    return buf;
}

inline std::ofstream open_report(const std::string& path) {
    std::ofstream out(path, std::ios::binary); // binary: no newline translation
    if (!out) throw Error("cannot write report file: " + path);
    return out;
}

struct MetricRow {
    std::string task; // task name, or "macro"
    int step = 0;     // fine-tuning steps applied before measuring
    TaskEval m;
};

inline void write_metrics_csv(const std::string& path, std::span<const MetricRow> rows) {
    auto out = open_report(path);
    out << "task,step,hits1,hits3,hits10,mrr,n\n";
    for (const MetricRow& r : rows)
        out << r.task << ',' << r.step << ',' << format_metric(r.m.hits1) << ',' << format_metric(r.m.hits3)
            << ',' << format_metric(r.m.hits10) << ',' << format_metric(r.m.mrr) << ',' << r.m.n << '\n';
}

struct LossPoint {
    int step = 0;
    double loss = 0.0;
    double reward = 0.0;
};

inline void write_loss_csv(const std::string& path, std::span<const LossPoint> points) {
    auto out = open_report(path);
    out << "step,loss,reward\n";
    for (const LossPoint& p : points)
        out << p.step << ',' << format_metric(p.loss) << ',' << format_metric(p.reward) << '\n';
}

struct SweepRow {
    std::string method;
    int shots = 0;
    TaskEval initial;
    TaskEval best;
    int best_steps = 0;
};

inline void write_sweep_csv(const std::string& path, std::span<const SweepRow> rows) {
    auto out = open_report(path);
    out << "method,shots,initial_mrr,initial_hits10,best_mrr,best_hits10,best_steps\n";
    for (const SweepRow& r : rows)
        out << r.method << ',' << r.shots << ',' << format_metric(r.initial.mrr) << ','
            << format_metric(r.initial.hits10) << ',' << format_metric(r.best.mrr) << ','
            << format_metric(r.best.hits10) << ',' << r.best_steps << '\n';
}

struct AblateRow {
    std::string setting; // e.g. "encoder-1-shot"
    TaskEval initial;
};

inline void write_ablate_csv(const std::string& path, std::span<const AblateRow> rows) {
    auto out = open_report(path);
    out << "setting,hits1,hits3,hits10,mrr,n\n";
    for (const AblateRow& r : rows)
        out << r.setting << ',' << format_metric(r.initial.hits1) << ',' << format_metric(r.initial.hits3) << ','
            << format_metric(r.initial.hits10) << ',' << format_metric(r.initial.mrr) << ',' << r.initial.n
            << '\n';
}

inline void write_ablate_md(const std::string& path, std::span<const AblateRow> rows) {
    auto out = open_report(path);
    out << "# Encoder ablation (Initial metrics)\n\n";
    out << "| Setting | MRR | Hits@1 | Hits@3 | Hits@10 |\n";
    out << "|---|---|---|---|---|\n";
    for (const AblateRow& r : rows)
        out << "| " << r.setting << " | " << format_metric(r.initial.mrr) << " | " << format_metric(r.initial.hits1)
            << " | " << format_metric(r.initial.hits3) << " | " << format_metric(r.initial.hits10) << " |\n";
}

struct SummaryInfo {
    std::string method;
    std::uint64_t seed = 0;
    std::string dataset;
    int shots = 0;
    int best_steps = 0;
    TaskEval initial;
    TaskEval best;
    std::vector<std::string> task_names;
    std::vector<TaskEval> per_task_initial;
    std::vector<TaskEval> per_task_best;
};

inline void write_summary_md(const std::string& path, const SummaryInfo& s) {
    auto out = open_report(path);
    out << "# Evaluation summary\n\n";
    out << "- method: `" << s.method << "`\n";
    out << "- dataset: " << s.dataset << "\n";
    out << "- shots: " << s.shots << "\n";
    out << "- seed: " << s.seed << "\n";
    out << "- fine-tune steps selected on meta-dev: " << s.best_steps << "\n\n";
    out << "## Macro-averaged meta-test metrics\n\n";
    out << "| Group | MRR | Hits@1 | Hits@3 | Hits@10 |\n";
    out << "|---|---|---|---|---|\n";
    out << "| Initial | " << format_metric(s.initial.mrr) << " | " << format_metric(s.initial.hits1) << " | "
        << format_metric(s.initial.hits3) << " | " << format_metric(s.initial.hits10) << " |\n";
    out << "| Best | " << format_metric(s.best.mrr) << " | " << format_metric(s.best.hits1) << " | "
        << format_metric(s.best.hits3) << " | " << format_metric(s.best.hits10) << " |\n";
    if (!s.task_names.empty()) {
        out << "\n## Per-task MRR\n\n";
        out << "| Task | Initial | Best | Queries |\n";
        out << "|---|---|---|---|\n";
        for (std::size_t i = 0; i < s.task_names.size(); ++i)
            out << "| " << s.task_names[i] << " | " << format_metric(s.per_task_initial[i].mrr) << " | "
                << format_metric(s.per_task_best[i].mrr) << " | " << s.per_task_best[i].n << " |\n";
    }
}

struct GradCheckRow {
    std::string suite;
    double max_rel_err = 0.0;
    int checks = 0;
};

inline void write_gradcheck_csv(const std::string& path, std::span<const GradCheckRow> rows) {
    auto out = open_report(path);
    out << "suite,max_rel_err,checks\n";
    for (const GradCheckRow& r : rows)
        out << r.suite << ',' << format_metric(r.max_rel_err) << ',' << r.checks << '\n';
}

} // namespace metakgr
