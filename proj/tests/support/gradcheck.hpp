#pragma once

// Test-only finite-difference oracle for vector-Jacobian products. Independent
// of the tape: it only re-evaluates a loss closure at shifted parameters.

#include <cmath>
#include <functional>
#include <vector>

#include "polarsynth/random.hpp"

namespace gradcheck {

struct Report {
    double max_rel_err = 0;
    int checked = 0;
};

// f: params -> loss. g: analytic gradient (same length as x). Central
// differences at the sampled indices; relative error against the larger of
// the two magnitudes. Indices where both are below `floor` are skipped.
inline Report check(const std::function<double(const std::vector<double>&)>& f,
                    std::vector<double> x, const std::vector<double>& g,
                    const std::vector<int>& indices, double h, double floor = 1e-9) {
    Report rep;
    for (int i : indices) {
        double keep = x[i];
        double step = h * std::max(1.0, std::abs(keep));
        x[i] = keep + step;
        double fp = f(x);
        x[i] = keep - step;
        double fm = f(x);
        x[i] = keep;
        double fd = (fp - fm) / (2 * step);
        double denom = std::max(std::abs(fd), std::abs(g[i]));
        if (denom < floor) continue;
        rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - g[i]) / denom);
        ++rep.checked;
    }
    return rep;
}

inline std::vector<int> sample_indices(int n, int count, polarsynth::Rng& rng) {
    std::vector<int> idx;
    for (int i = 0; i < count; ++i)
        idx.push_back(static_cast<int>(rng.uniform() * n) % n);
    return idx;
}

} // namespace gradcheck
