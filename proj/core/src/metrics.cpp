#include "echocotr/metrics.hpp"

#include <cmath>

#include "echocotr/error.hpp"

namespace echocotr {

MetricsReport compute_metrics(const std::vector<double>& pred,
                              const std::vector<double>& target) {
    if (pred.size() != target.size())
        throw ShapeError("compute_metrics: prediction/target length mismatch");
    if (pred.empty()) throw ConfigError("compute_metrics: need at least one sample");

    const size_t n = pred.size();
    double abs_sum = 0.0, sq_sum = 0.0, mean_y = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = pred[i] - target[i];
        abs_sum += std::abs(d);
        sq_sum += d * d;
        mean_y += target[i];
    }
    mean_y /= double(n);

    MetricsReport m;
    m.n = int64_t(n);
    m.mae = abs_sum / double(n);
    m.rmse = std::sqrt(sq_sum / double(n));
    if (n >= 2) {
        double ss_tot = 0.0;
        for (double y : target) ss_tot += (y - mean_y) * (y - mean_y);
        if (ss_tot > 0.0) m.r2 = 1.0 - sq_sum / ss_tot;
    }
    return m;
}

}  // namespace echocotr
