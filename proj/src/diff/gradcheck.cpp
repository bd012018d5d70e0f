#include "dynvocab/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dynvocab::diff {

namespace {

double evaluate_value(const Computation& computation, GraphOptions options) {
    options.record_gradients = false;
    Graph g(options);
    return computation(g).scalar();
}

}  // namespace

Evaluation evaluate_with_gradients(const Computation& computation, ParameterSet& params,
                                   GraphOptions options) {
    options.record_gradients = true;
    params.zero_grad();
    Graph g(options);
    Var out = computation(g);
    if (out.rows() != 1 || out.cols() != 1) {
        throw std::invalid_argument("computation must produce a scalar");
    }
    g.backward(out);
    g.accumulate_into(params);
    Evaluation result;
    result.value = out.scalar();
    for (const auto& [name, p] : params) {
        result.gradients.emplace(name, p.grad);
    }
    return result;
}

double GradientReport::worst() const {
    double w = 0.0;
    for (const auto& [_, e] : max_relative_error) w = std::max(w, e);
    return w;
}

std::string GradientReport::worst_array() const {
    std::string name;
    double w = -1.0;
    for (const auto& [n, e] : max_relative_error) {
        if (e > w) {
            w = e;
            name = n;
        }
    }
    return name;
}

GradientReport finite_difference_check(const Computation& computation, ParameterSet& params,
                                       const GradCheckOptions& options) {
    if (!(options.epsilon > 0.0)) {
        throw std::invalid_argument("finite difference step must be positive");
    }
    if (options.order != 2 && options.order != 4) {
        throw std::invalid_argument("finite difference order must be 2 or 4");
    }
    const Evaluation analytic = evaluate_with_gradients(computation, params, options.graph);
    GradientReport report;
    report.epsilon = options.epsilon;
    Rng rng(options.seed);
    for (auto& [name, p] : params) {
        if (!p.requires_grad) {
            continue;
        }
        std::vector<std::size_t> entries(p.value.size());
        std::iota(entries.begin(), entries.end(), 0);
        if (entries.size() > options.max_entries_per_array) {
            // Partial Fisher-Yates for a uniform subsample.
            for (std::size_t i = 0; i < options.max_entries_per_array; ++i) {
                const auto j = i + uniform_index(rng, entries.size() - i);
                std::swap(entries[i], entries[j]);
            }
            entries.resize(options.max_entries_per_array);
        }
        const Matrix& grad = analytic.gradients.at(name);
        double worst = 0.0;
        EntryError worst_at;
        for (std::size_t idx : entries) {
            const double original = p.value[idx];
            auto at = [&](double offset) {
                p.value[idx] = original + offset;
                const double v = evaluate_value(computation, options.graph);
                p.value[idx] = original;
                return v;
            };
            const double h = options.epsilon;
            const double fd = options.order == 2
                                  ? (at(h) - at(-h)) / (2.0 * h)
                                  // differences first so a flat function gives exactly 0
                                  : (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
            const double ga = grad[idx];
            const double err =
                std::abs(ga - fd) / std::max({std::abs(ga), std::abs(fd), 1e-8});
            if (err >= worst) {
                worst = err;
                worst_at = EntryError{idx, ga, fd};
            }
        }
        report.max_relative_error[name] = worst;
        report.worst_entry[name] = worst_at;
        report.entries_checked[name] = entries.size();
    }
    return report;
}

}  // namespace dynvocab::diff
