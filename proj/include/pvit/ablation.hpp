#pragma once

// Ablation ladder: trains each variant over shared seeds on identical data
// streams (modulo each variant's data policy) and reports mean and standard
// deviation of the final validation accuracy.

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "pvit/trainer.hpp"

namespace pvit {

struct AblationRow {
    VariantKind kind;
    std::vector<double> accuracies;  // one per seed, in seed order
    double mean = 0.0;
    double sd = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;
    std::string csv;
};

inline AblationResult run_ablation(const RunConfig& base, const std::vector<VariantKind>& suite,
                                   const std::vector<std::uint64_t>& seeds, const std::string& out_dir = "") {
    if (suite.empty() || seeds.empty()) throw InvalidVariant("run_ablation: empty suite or seed list");
    AblationResult result;
    std::string csv = "variant";
    for (std::uint64_t s : seeds) csv += ",acc_seed" + std::to_string(s);
    csv += ",mean,sd\n";

    for (VariantKind kind : suite) {
        AblationRow row;
        row.kind = kind;
        for (std::uint64_t seed : seeds) {
            RunConfig cfg = base;
            cfg.variant.kind = kind;
            cfg.seed = seed;
            Model model = build_variant(cfg);
            const std::string run_dir =
                out_dir.empty() ? "" : out_dir + "/" + variant_name(kind) + "_seed" + std::to_string(seed);
            auto train_result = train(model, cfg, run_dir);
            row.accuracies.push_back(train_result.final_val_acc);
        }
        double mean = 0.0;
        for (double a : row.accuracies) mean += a;
        mean /= static_cast<double>(row.accuracies.size());
        double var = 0.0;
        for (double a : row.accuracies) var += (a - mean) * (a - mean);
        row.mean = mean;
        row.sd = row.accuracies.size() > 1 ? std::sqrt(var / static_cast<double>(row.accuracies.size() - 1)) : 0.0;
        result.rows.push_back(row);

        csv += variant_name(kind);
        char buf[32];
        for (double a : row.accuracies) {
            std::snprintf(buf, sizeof(buf), ",%.6f", a);
            csv += buf;
        }
        std::snprintf(buf, sizeof(buf), ",%.6f,%.6f\n", row.mean, row.sd);
        csv += buf;
    }
    result.csv = csv;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream os(out_dir + "/ablation.csv", std::ios::binary);
        os << csv;
    }
    return result;
}

}  // namespace pvit
