#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dynvocab/diff/matrix.hpp"
#include "dynvocab/rng.hpp"

namespace dynvocab::diff {

/// A named trainable array and its accumulated gradient.
struct Parameter {
    Matrix value;
    Matrix grad;
    bool decay = true;          // subject to decoupled weight decay
    bool requires_grad = true;  // false while frozen
};

/// Parameters keyed by name; iteration order is the sorted name order.
class ParameterSet {
public:
    Parameter& add(const std::string& name, Matrix value, bool decay = true);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.contains(name); }
    void erase(const std::string& name) { params_.erase(name); }
    void zero_grad();
    std::size_t scalar_count() const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

private:
    std::map<std::string, Parameter> params_;
};

/// Raised when a primitive produces NaN or infinity.
class NonFiniteError : public std::runtime_error {
public:
    explicit NonFiniteError(std::string_view primitive)
        : std::runtime_error("non-finite value produced by primitive '" + std::string(primitive) +
                             "'"),
          primitive_(primitive) {}
    const std::string& primitive() const { return primitive_; }

private:
    std::string primitive_;
};

struct GraphOptions {
    bool record_gradients = true;
    bool training = false;  // enables dropout
    std::uint64_t dropout_seed = 0;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    const Matrix& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    double scalar() const;

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
/// insertion order is a valid topological order for the backward sweep.
class Graph {
public:
    using Backward = std::function<void(Graph&, const Matrix& out_grad)>;

    explicit Graph(GraphOptions options = {});
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Matrix value);
    /// Leaf bound to a parameter; repeated calls return the same node. The
    /// parameter is only read; gradients stay in the graph (see param_grad).
    Var param(const Parameter& p);

    /// Propagates d(output)/d(node) to every node that requires gradients.
    void backward(Var output);

    /// Gradient reaching a bound parameter after backward(), or nullptr when
    /// the parameter was not used or received no gradient.
    const Matrix* param_grad(const Parameter& p) const;
    /// Adds each bound parameter's gradient into its entry of `params`.
    void accumulate_into(ParameterSet& params) const;

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    /// Gradient buffer of a node, zero-initialised on first access.
    Matrix& grad(std::size_t id);

    bool training() const { return options_.training; }
    Rng& dropout_rng() { return dropout_rng_; }
    std::size_t node_count() const { return nodes_.size(); }

    /// Appends a node; `backward` is dropped when no input requires gradients.
    Var push(std::string_view primitive, Matrix value, std::span<const Var> inputs,
             Backward backward);

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };

    GraphOptions options_;
    Rng dropout_rng_;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// Primitive set. Every primitive checks its output for non-finite values.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_row(Var a, Var row);  // broadcast a 1xN row over every row of a
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var gather_rows(Var table, std::span<const int> ids);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var gelu(Var x);
Var causal_self_attention(Var q, Var k, Var v, std::size_t heads);
Var softmax_rows(Var x);
Var log(Var x);
Var sum(Var x);
Var mean(Var x);
Var mean_rows(Var x);  // 1xN column means (mean pooling over rows)
Var normalize_rows(Var x);
Var dropout(Var x, double rate);

/// Row-wise cosine similarity matrix: out(i, j) = cos(a_i, b_j).
Var cosine_similarity(Var a, Var b);

/// Sum over rows r of weights[r] * -log softmax(logits_r)[targets[r]], divided
/// by `normalizer`. Columns with allowed[c] == false are excluded from the
/// softmax support (an empty `allowed` means every column is allowed).
Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                          std::span<const double> weights, double normalizer,
                          const std::vector<bool>& allowed = {});

/// Row-wise softmax restricted to allowed columns (masked entries are 0).
Matrix masked_softmax(const Matrix& logits, const std::vector<bool>& allowed);

}  // namespace dynvocab::diff
