#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "mct/nn/params.hpp"
#include "mct/rng.hpp"

namespace mct::nn {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_coord = 0;
    int probes = 0;
};

// Central finite differences against an analytic gradient on randomly probed
// coordinates. Near-flat coordinates (both sides below flat_cutoff) fall back
// to the absolute difference, which must itself stay below 1e-8; everything
// else is scored relatively.
inline GradCheckReport finite_difference_check(const ParamBuffer& params,
                                               const std::function<double(const ParamBuffer&)>& loss,
                                               const std::vector<double>& analytic_grads,
                                               int probe_count, double h,
                                               std::uint64_t seed = 17,
                                               double flat_cutoff = 1e-6) {
    if (analytic_grads.size() != params.size()) {
        throw ContractError("finite_difference_check: gradient size mismatch");
    }
    GradCheckReport report;
    report.probes = probe_count;
    Rng rng(seed);
    ParamBuffer work = params;
    for (int p = 0; p < probe_count; ++p) {
        const std::size_t i = rng.next_below(params.size());
        const double orig = work.data()[i];
        work.data()[i] = orig + h;
        const double fp = loss(work);
        work.data()[i] = orig - h;
        const double fm = loss(work);
        work.data()[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic_grads[i];
        double err;
        if (std::abs(fd) < flat_cutoff && std::abs(an) < flat_cutoff) {
            err = std::abs(fd - an);  // absolute fallback for flat coordinates
        } else {
            err = std::abs(fd - an) / std::max(std::abs(fd), std::abs(an));
        }
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
    }
    return report;
}

}  // namespace mct::nn
