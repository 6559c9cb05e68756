#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace echocotr {

struct MetricsReport {
    double mae = 0.0;
    double rmse = 0.0;
    std::optional<double> r2;  // missing when target variance is zero
    int64_t n = 0;
};

/// MAE = mean|p-y|, RMSE = sqrt(mean (p-y)^2), R2 = 1 - SS_res/SS_tot.
MetricsReport compute_metrics(const std::vector<double>& pred, const std::vector<double>& target);

}  // namespace echocotr
