#include "dynvocab/diff/graph.hpp"

#include <algorithm>
#include <cmath>

namespace dynvocab::diff {

// ---------------------------------------------------------------- parameters

Parameter& ParameterSet::add(const std::string& name, Matrix value, bool decay) {
    if (params_.contains(name)) {
        throw std::invalid_argument("duplicate parameter '" + name + "'");
    }
    Parameter p;
    p.grad = Matrix(value.rows(), value.cols());
    p.value = std::move(value);
    p.decay = decay;
    return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterSet::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::out_of_range("unknown parameter '" + name + "'");
    }
    return it->second;
}

const Parameter& ParameterSet::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw std::out_of_range("unknown parameter '" + name + "'");
    }
    return it->second;
}

void ParameterSet::zero_grad() {
    for (auto& [_, p] : params_) {
        if (!p.grad.same_shape(p.value)) {
            p.grad = Matrix(p.value.rows(), p.value.cols());
        } else {
            p.grad.fill(0.0);
        }
    }
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) {
        n += p.value.size();
    }
    return n;
}

// --------------------------------------------------------------------- graph

const Matrix& Var::value() const { return graph_->value(id_); }

double Var::scalar() const {
    const Matrix& v = value();
    if (v.rows() != 1 || v.cols() != 1) {
        throw std::logic_error("value is not a scalar");
    }
    return v[0];
}

Graph::Graph(GraphOptions options) : options_(options), dropout_rng_(options.dropout_seed) {}

Var Graph::constant(Matrix value) {
    if (!value.all_finite()) {
        throw NonFiniteError("constant");
    }
    Node node;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Graph::param(const Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
        return Var(this, it->second);
    }
    if (!p.value.all_finite()) {
        throw NonFiniteError("parameter");
    }
    Node node;
    node.value = p.value;
    node.requires_grad = options_.record_gradients && p.requires_grad;
    nodes_.push_back(std::move(node));
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

Matrix& Graph::grad(std::size_t id) {
    Node& node = nodes_[id];
    if (!node.grad.same_shape(node.value)) {
        node.grad = Matrix(node.value.rows(), node.value.cols());
    }
    return node.grad;
}

Var Graph::push(std::string_view primitive, Matrix value, std::span<const Var> inputs,
                Backward backward) {
    if (!value.all_finite()) {
        throw NonFiniteError(primitive);
    }
    Node node;
    node.value = std::move(value);
    if (options_.record_gradients) {
        node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                         [this](const Var& v) { return requires_grad(v.id()); });
        if (node.requires_grad) {
            node.backward = std::move(backward);
        }
    }
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

void Graph::backward(Var output) {
    if (!options_.record_gradients) {
        throw std::logic_error("graph was built without gradient recording");
    }
    const Matrix& out = value(output.id());
    if (out.rows() != 1 || out.cols() != 1) {
        throw std::invalid_argument("backward requires a scalar output, got " +
                                    std::to_string(out.rows()) + "x" +
                                    std::to_string(out.cols()));
    }
    grad(output.id())[0] += 1.0;
    for (std::size_t id = output.id() + 1; id-- > 0;) {
        Node& node = nodes_[id];
        if (!node.requires_grad || node.grad.empty()) {
            continue;
        }
        if (node.backward) {
            node.backward(*this, node.grad);
        }
    }
}

const Matrix* Graph::param_grad(const Parameter& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end()) {
        return nullptr;
    }
    const Node& node = nodes_[it->second];
    return node.grad.empty() ? nullptr : &node.grad;
}

void Graph::accumulate_into(ParameterSet& params) const {
    for (auto& [_, p] : params) {
        if (const Matrix* g = param_grad(p)) {
            auto dst = p.grad.values();
            auto src = g->values();
            for (std::size_t i = 0; i < dst.size(); ++i) {
                dst[i] += src[i];
            }
        }
    }
}

// ---------------------------------------------------------------- primitives

namespace {

void require(bool ok, std::string_view primitive, std::string_view what) {
    if (!ok) {
        throw std::invalid_argument(std::string(primitive) + ": " + std::string(what));
    }
}

void add_into(Matrix& dst, const Matrix& src) {
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += s[i];
    }
}

}  // namespace

Var matmul(Var a, Var b) {
    Graph& g = a.graph();
    require(a.cols() == b.rows(), "matmul", "inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    matmul_acc(a.value(), b.value(), out);
    const std::size_t ia = a.id(), ib = b.id();
    const Var inputs[] = {a, b};
    return g.push("matmul", std::move(out), inputs, [ia, ib](Graph& g, const Matrix& dout) {
        if (g.requires_grad(ia)) {
            matmul_nt_acc(dout, g.value(ib), g.grad(ia));
        }
        if (g.requires_grad(ib)) {
            matmul_tn_acc(g.value(ia), dout, g.grad(ib));
        }
    });
}

Var transpose(Var a) {
    const std::size_t ia = a.id();
    const Var inputs[] = {a};
    return a.graph().push("transpose", transposed(a.value()), inputs,
                          [ia](Graph& g, const Matrix& dout) {
                              add_into(g.grad(ia), transposed(dout));
                          });
}

Var add(Var a, Var b) {
    require(a.value().same_shape(b.value()), "add", "shape mismatch");
    Matrix out = a.value();
    add_into(out, b.value());
    const std::size_t ia = a.id(), ib = b.id();
    const Var inputs[] = {a, b};
    return a.graph().push("add", std::move(out), inputs, [ia, ib](Graph& g, const Matrix& dout) {
        if (g.requires_grad(ia)) add_into(g.grad(ia), dout);
        if (g.requires_grad(ib)) add_into(g.grad(ib), dout);
    });
}

Var mul(Var a, Var b) {
    require(a.value().same_shape(b.value()), "mul", "shape mismatch");
    Matrix out = a.value();
    const auto bv = b.value().values();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
    const std::size_t ia = a.id(), ib = b.id();
    const Var inputs[] = {a, b};
    return a.graph().push("mul", std::move(out), inputs, [ia, ib](Graph& g, const Matrix& dout) {
        const auto d = dout.values();
        if (g.requires_grad(ia)) {
            auto ga = g.grad(ia).values();
            const auto vb = g.value(ib).values();
            for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * vb[i];
        }
        if (g.requires_grad(ib)) {
            auto gb = g.grad(ib).values();
            const auto va = g.value(ia).values();
            for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * va[i];
        }
    });
}

Var scale(Var a, double factor) {
    Matrix out = a.value();
    for (double& v : out.values()) v *= factor;
    const std::size_t ia = a.id();
    const Var inputs[] = {a};
    return a.graph().push("scale", std::move(out), inputs,
                          [ia, factor](Graph& g, const Matrix& dout) {
                              auto ga = g.grad(ia).values();
                              const auto d = dout.values();
                              for (std::size_t i = 0; i < d.size(); ++i) ga[i] += factor * d[i];
                          });
}

Var add_row(Var a, Var row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row", "row shape mismatch");
    Matrix out = a.value();
    const auto r = row.value().row(0);
    for (std::size_t i = 0; i < out.rows(); ++i) {
        auto o = out.row(i);
        for (std::size_t j = 0; j < o.size(); ++j) o[j] += r[j];
    }
    const std::size_t ia = a.id(), ir = row.id();
    const Var inputs[] = {a, row};
    return a.graph().push("add_row", std::move(out), inputs,
                          [ia, ir](Graph& g, const Matrix& dout) {
                              if (g.requires_grad(ia)) add_into(g.grad(ia), dout);
                              if (g.requires_grad(ir)) {
                                  auto gr = g.grad(ir).row(0);
                                  for (std::size_t i = 0; i < dout.rows(); ++i) {
                                      const auto d = dout.row(i);
                                      for (std::size_t j = 0; j < d.size(); ++j) gr[j] += d[j];
                                  }
                              }
                          });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows", "no inputs");
    const std::size_t cols = parts.front().cols();
    std::size_t rows = 0;
    for (const Var& p : parts) {
        require(p.cols() == cols, "concat_rows", "column counts differ");
        rows += p.rows();
    }
    Matrix out(rows, cols);
    std::vector<std::size_t> ids;
    std::size_t r0 = 0;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        std::copy(v.values().begin(), v.values().end(), out.values().begin() + r0 * cols);
        r0 += v.rows();
        ids.push_back(p.id());
    }
    return parts.front().graph().push(
        "concat_rows", std::move(out), parts, [ids](Graph& g, const Matrix& dout) {
            std::size_t offset = 0;
            for (std::size_t id : ids) {
                const std::size_t n = g.value(id).size();
                if (g.requires_grad(id)) {
                    auto gi = g.grad(id).values();
                    for (std::size_t i = 0; i < n; ++i) gi[i] += dout[offset + i];
                }
                offset += n;
            }
        });
}

Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols", "no inputs");
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        require(p.rows() == rows, "concat_cols", "row counts differ");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    std::vector<std::size_t> ids;
    std::size_t c0 = 0;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < v.cols(); ++c) out(r, c0 + c) = v(r, c);
        }
        c0 += v.cols();
        ids.push_back(p.id());
    }
    return parts.front().graph().push(
        "concat_cols", std::move(out), parts, [ids](Graph& g, const Matrix& dout) {
            std::size_t c0 = 0;
            for (std::size_t id : ids) {
                const std::size_t w = g.value(id).cols();
                if (g.requires_grad(id)) {
                    Matrix& gi = g.grad(id);
                    for (std::size_t r = 0; r < dout.rows(); ++r) {
                        for (std::size_t c = 0; c < w; ++c) gi(r, c) += dout(r, c0 + c);
                    }
                }
                c0 += w;
            }
        });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    require(begin + count <= a.rows(), "slice_rows", "range out of bounds");
    const std::size_t cols = a.cols();
    Matrix out(count, cols);
    const auto src = a.value().values();
    std::copy(src.begin() + begin * cols, src.begin() + (begin + count) * cols,
              out.values().begin());
    const std::size_t ia = a.id();
    const Var inputs[] = {a};
    return a.graph().push("slice_rows", std::move(out), inputs,
                          [ia, begin, cols](Graph& g, const Matrix& dout) {
                              auto ga = g.grad(ia).values();
                              for (std::size_t i = 0; i < dout.size(); ++i) {
                                  ga[begin * cols + i] += dout[i];
                              }
                          });
}

Var gather_rows(Var table, std::span<const int> ids) {
    const Matrix& t = table.value();
    Matrix out(ids.size(), t.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < t.rows(), "gather_rows",
                "row id out of range");
        const auto src = t.row(static_cast<std::size_t>(ids[i]));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    const std::size_t it = table.id();
    std::vector<int> rows(ids.begin(), ids.end());
    const Var inputs[] = {table};
    return table.graph().push("gather_rows", std::move(out), inputs,
                              [it, rows = std::move(rows)](Graph& g, const Matrix& dout) {
                                  Matrix& gt = g.grad(it);
                                  for (std::size_t i = 0; i < rows.size(); ++i) {
                                      auto dst = gt.row(static_cast<std::size_t>(rows[i]));
                                      const auto src = dout.row(i);
                                      for (std::size_t j = 0; j < src.size(); ++j) {
                                          dst[j] += src[j];
                                      }
                                  }
                              });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const std::size_t n = x.cols();
    require(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
            "layer_norm", "gain/bias shape mismatch");
    const Matrix& xv = x.value();
    Matrix normalized(xv.rows(), n);
    std::vector<double> rstd(xv.rows());
    Matrix out(xv.rows(), n);
    const auto gv = gain.value().row(0);
    const auto bv = bias.value().row(0);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        const auto row = xv.row(r);
        double mu = 0.0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(n);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            normalized(r, j) = (row[j] - mu) * rstd[r];
            out(r, j) = normalized(r, j) * gv[j] + bv[j];
        }
    }
    const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
    const Var inputs[] = {x, gain, bias};
    return x.graph().push(
        "layer_norm", std::move(out), inputs,
        [ix, ig, ib, normalized = std::move(normalized), rstd = std::move(rstd)](
            Graph& g, const Matrix& dout) {
            const std::size_t n = dout.cols();
            if (g.requires_grad(ig)) {
                auto gg = g.grad(ig).row(0);
                for (std::size_t r = 0; r < dout.rows(); ++r) {
                    for (std::size_t j = 0; j < n; ++j) gg[j] += dout(r, j) * normalized(r, j);
                }
            }
            if (g.requires_grad(ib)) {
                auto gb = g.grad(ib).row(0);
                for (std::size_t r = 0; r < dout.rows(); ++r) {
                    for (std::size_t j = 0; j < n; ++j) gb[j] += dout(r, j);
                }
            }
            if (g.requires_grad(ix)) {
                const auto gv = g.value(ig).row(0);
                Matrix& gx = g.grad(ix);
                std::vector<double> dxhat(n);
                for (std::size_t r = 0; r < dout.rows(); ++r) {
                    double mean_d = 0.0, mean_dx = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = dout(r, j) * gv[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * normalized(r, j);
                    }
                    mean_d /= static_cast<double>(n);
                    mean_dx /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        gx(r, j) += rstd[r] * (dxhat[j] - mean_d - normalized(r, j) * mean_dx);
                    }
                }
            }
        });
}

Var gelu(Var x) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k = 0.044715;
    Matrix out = x.value();
    for (double& v : out.values()) {
        v = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
    }
    const std::size_t ix = x.id();
    const Var inputs[] = {x};
    return x.graph().push("gelu", std::move(out), inputs, [ix](Graph& g, const Matrix& dout) {
        const auto xv = g.value(ix).values();
        auto gx = g.grad(ix).values();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            const double t = std::tanh(c * (v + k * v * v * v));
            const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * v * v);
            gx[i] += dout[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
    });
}

Var causal_self_attention(Var q, Var k, Var v, std::size_t heads) {
    const std::size_t steps = q.rows(), width = q.cols();
    require(k.value().same_shape(q.value()) && v.value().same_shape(q.value()),
            "causal_self_attention", "q/k/v shapes differ");
    require(heads > 0 && width % heads == 0, "causal_self_attention",
            "width not divisible by heads");
    const std::size_t hd = width / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    // probs[h] is steps x steps, lower triangular.
    std::vector<Matrix> probs(heads, Matrix(steps, steps));
    Matrix out(steps, width);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * hd;
        Matrix& p = probs[h];
        for (std::size_t i = 0; i < steps; ++i) {
            double mx = -INFINITY;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += qv(i, c0 + c) * kv(j, c0 + c);
                p(i, j) = s * inv_sqrt;
                mx = std::max(mx, p(i, j));
            }
            double z = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                p(i, j) = std::exp(p(i, j) - mx);
                z += p(i, j);
            }
            for (std::size_t j = 0; j <= i; ++j) {
                p(i, j) /= z;
                const double pij = p(i, j);
                for (std::size_t c = 0; c < hd; ++c) out(i, c0 + c) += pij * vv(j, c0 + c);
            }
        }
    }
    const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
    const Var inputs[] = {q, k, v};
    return q.graph().push(
        "causal_self_attention", std::move(out), inputs,
        [iq, ik, iv, heads, hd, inv_sqrt, probs = std::move(probs)](Graph& g,
                                                                      const Matrix& dout) {
            const std::size_t steps = dout.rows();
            const Matrix& qv = g.value(iq);
            const Matrix& kv = g.value(ik);
            const Matrix& vv = g.value(iv);
            Matrix* gq = g.requires_grad(iq) ? &g.grad(iq) : nullptr;
            Matrix* gk = g.requires_grad(ik) ? &g.grad(ik) : nullptr;
            Matrix* gv = g.requires_grad(iv) ? &g.grad(iv) : nullptr;
            std::vector<double> dp(steps);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * hd;
                const Matrix& p = probs[h];
                for (std::size_t i = 0; i < steps; ++i) {
                    double weighted = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        double s = 0.0;
                        for (std::size_t c = 0; c < hd; ++c) s += dout(i, c0 + c) * vv(j, c0 + c);
                        dp[j] = s;
                        weighted += p(i, j) * s;
                        if (gv) {
                            for (std::size_t c = 0; c < hd; ++c) {
                                (*gv)(j, c0 + c) += p(i, j) * dout(i, c0 + c);
                            }
                        }
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = p(i, j) * (dp[j] - weighted) * inv_sqrt;
                        if (gq) {
                            for (std::size_t c = 0; c < hd; ++c) (*gq)(i, c0 + c) += ds * kv(j, c0 + c);
                        }
                        if (gk) {
                            for (std::size_t c = 0; c < hd; ++c) (*gk)(j, c0 + c) += ds * qv(i, c0 + c);
                        }
                    }
                }
            }
        });
}

Var softmax_rows(Var x) {
    Matrix out = masked_softmax(x.value(), {});
    const std::size_t ix = x.id();
    const Var inputs[] = {x};
    Matrix y = out;
    return x.graph().push("softmax", std::move(out), inputs,
                          [ix, y = std::move(y)](Graph& g, const Matrix& dout) {
                              Matrix& gx = g.grad(ix);
                              for (std::size_t r = 0; r < y.rows(); ++r) {
                                  const double inner = dot(dout.row(r), y.row(r));
                                  for (std::size_t j = 0; j < y.cols(); ++j) {
                                      gx(r, j) += y(r, j) * (dout(r, j) - inner);
                                  }
                              }
                          });
}

Var log(Var x) {
    Matrix out = x.value();
    for (double& v : out.values()) v = std::log(v);
    const std::size_t ix = x.id();
    const Var inputs[] = {x};
    return x.graph().push("log", std::move(out), inputs, [ix](Graph& g, const Matrix& dout) {
        const auto xv = g.value(ix).values();
        auto gx = g.grad(ix).values();
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += dout[i] / xv[i];
    });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    const std::size_t ix = x.id();
    const Var inputs[] = {x};
    return x.graph().push("sum", Matrix(1, 1, s), inputs, [ix](Graph& g, const Matrix& dout) {
        for (double& v : g.grad(ix).values()) v += dout[0];
    });
}

Var mean(Var x) {
    require(x.value().size() > 0, "mean", "empty input");
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var mean_rows(Var x) {
    require(x.rows() > 0, "mean_rows", "empty input");
    const double inv = 1.0 / static_cast<double>(x.rows());
    Matrix out(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = x.value().row(r);
        for (std::size_t j = 0; j < row.size(); ++j) out(0, j) += row[j];
    }
    for (double& v : out.values()) v *= inv;
    const std::size_t ix = x.id();
    const Var inputs[] = {x};
    return x.graph().push("mean_rows", std::move(out), inputs,
                          [ix, inv](Graph& g, const Matrix& dout) {
                              Matrix& gx = g.grad(ix);
                              for (std::size_t r = 0; r < gx.rows(); ++r) {
                                  auto row = gx.row(r);
                                  for (std::size_t j = 0; j < row.size(); ++j) {
                                      row[j] += inv * dout(0, j);
                                  }
                              }
                          });
}

Var normalize_rows(Var x) {
    Matrix out = x.value();
    std::vector<double> norms(out.rows());
    for (std::size_t r = 0; r < out.rows(); ++r) {
        norms[r] = l2_norm(out.row(r));
        for (double& v : out.row(r)) v /= norms[r];
    }
    const std::size_t ix = x.id();
    const Var inputs[] = {x};
    Matrix y = out;
    return x.graph().push(
        "normalize_rows", std::move(out), inputs,
        [ix, y = std::move(y), norms = std::move(norms)](Graph& g, const Matrix& dout) {
            Matrix& gx = g.grad(ix);
            for (std::size_t r = 0; r < y.rows(); ++r) {
                const double inner = dot(dout.row(r), y.row(r));
                for (std::size_t j = 0; j < y.cols(); ++j) {
                    gx(r, j) += (dout(r, j) - y(r, j) * inner) / norms[r];
                }
            }
        });
}

Var dropout(Var x, double rate) {
    Graph& g = x.graph();
    if (!g.training() || rate <= 0.0) {
        return x;
    }
    require(rate < 1.0, "dropout", "rate must be below 1");
    const double keep_scale = 1.0 / (1.0 - rate);
    Matrix mask(x.rows(), x.cols());
    for (double& m : mask.values()) {
        m = uniform01(g.dropout_rng()) < rate ? 0.0 : keep_scale;
    }
    Matrix out = x.value();
    auto ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= mask[i];
    const std::size_t ix = x.id();
    const Var inputs[] = {x};
    return g.push("dropout", std::move(out), inputs,
                  [ix, mask = std::move(mask)](Graph& g, const Matrix& dout) {
                      auto gx = g.grad(ix).values();
                      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dout[i] * mask[i];
                  });
}

Var cosine_similarity(Var a, Var b) {
    return matmul(normalize_rows(a), transpose(normalize_rows(b)));
}

Matrix masked_softmax(const Matrix& logits, const std::vector<bool>& allowed) {
    const bool masked = !allowed.empty();
    if (masked && allowed.size() != logits.cols()) {
        throw std::invalid_argument("softmax mask width does not match logits");
    }
    Matrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto row = logits.row(r);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (!masked || allowed[j]) mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        auto o = out.row(r);
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (!masked || allowed[j]) {
                o[j] = std::exp(row[j] - mx);
                z += o[j];
            }
        }
        for (double& v : o) v /= z;
    }
    return out;
}

Var softmax_cross_entropy(Var logits, std::span<const int> targets,
                          std::span<const double> weights, double normalizer,
                          const std::vector<bool>& allowed) {
    const Matrix& lv = logits.value();
    require(targets.size() == lv.rows() && weights.size() == lv.rows(),
            "softmax_cross_entropy", "targets/weights must match row count");
    require(normalizer > 0.0, "softmax_cross_entropy", "normalizer must be positive");
    Matrix probs = masked_softmax(lv, allowed);
    double total = 0.0;
    for (std::size_t r = 0; r < lv.rows(); ++r) {
        const int t = targets[r];
        require(t >= 0 && static_cast<std::size_t>(t) < lv.cols(), "softmax_cross_entropy",
                "target out of range");
        require(allowed.empty() || allowed[static_cast<std::size_t>(t)],
                "softmax_cross_entropy", "target column is masked");
        total += -weights[r] * std::log(probs(r, static_cast<std::size_t>(t)));
    }
    total /= normalizer;
    const std::size_t il = logits.id();
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    const Var inputs[] = {logits};
    return logits.graph().push(
        "softmax_cross_entropy", Matrix(1, 1, total), inputs,
        [il, probs = std::move(probs), tgt = std::move(tgt), w = std::move(w), normalizer](
            Graph& g, const Matrix& dout) {
            Matrix& gl = g.grad(il);
            for (std::size_t r = 0; r < probs.rows(); ++r) {
                const double f = dout[0] * w[r] / normalizer;
                auto dst = gl.row(r);
                const auto p = probs.row(r);
                for (std::size_t j = 0; j < p.size(); ++j) dst[j] += f * p[j];
                dst[static_cast<std::size_t>(tgt[r])] -= f;
            }
        });
}

}  // namespace dynvocab::diff
