#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "dynvocab/diff/graph.hpp"

namespace dynvocab::diff {

/// Builds a scalar-valued computation on the given graph. It must bind its
/// parameters through Graph::param so that gradients reach them.
using Computation = std::function<Var(Graph&)>;

struct Evaluation {
    double value = 0.0;
    std::map<std::string, Matrix> gradients;
};

/// Runs `computation` once with gradient recording and returns the value and
/// the gradient of every parameter in `params` (same shapes as the arrays).
Evaluation evaluate_with_gradients(const Computation& computation, ParameterSet& params,
                                   GraphOptions options = {});

struct EntryError {
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradientReport {
    double epsilon = 0.0;
    std::map<std::string, double> max_relative_error;
    std::map<std::string, EntryError> worst_entry;
    std::map<std::string, std::size_t> entries_checked;

    double worst() const;
    std::string worst_array() const;
};

struct GradCheckOptions {
    double epsilon = 1e-5;
    // 2: (f(x+h) - f(x-h)) / 2h. 4: the five-point symmetric stencil
    // (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h, whose O(h^4) truncation
    // allows a larger h and hence less roundoff on tiny gradients.
    int order = 2;
    // Arrays larger than this are subsampled (without replacement) to this many entries.
    std::size_t max_entries_per_array = 64;
    std::uint64_t seed = 0;
    GraphOptions graph;  // record_gradients is overridden as needed
};

/// Compares analytic gradients against central differences. Per entry relative error is
/// |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8).
GradientReport finite_difference_check(const Computation& computation, ParameterSet& params,
                                       const GradCheckOptions& options);

}  // namespace dynvocab::diff
