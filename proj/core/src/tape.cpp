#include "evit/tape.hpp"

#include <cmath>
#include <numbers>

#include "evit/error.hpp"

namespace evit::verify {

const Matrix& Var::value() const { return tape->value(*this); }

Matrix Gradients::operator[](Var v) const {
    if (v.id < per_node_.size() && !per_node_[v.id].empty()) return per_node_[v.id];
    const auto [r, c] = shapes_.at(v.id);
    return Matrix(r, c);
}

Var Tape::leaf(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, true});
    return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, nullptr, false});
    return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::vector<Var> inputs, ForwardFn fwd, BackwardFn bwd) {
    Node node;
    node.fwd = std::move(fwd);
    node.bwd = std::move(bwd);
    for (const Var& v : inputs) {
        if (v.tape != this) throw UsageError("tape op mixes variables from different tapes");
        node.inputs.push_back(v.id);
        node.needs_grad = node.needs_grad || nodes_[v.id].needs_grad;
    }
    if (!node.bwd) node.needs_grad = false;
    node.value = node.fwd(input_values(node));
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Inputs Tape::input_values(const Node& n) const {
    Inputs in;
    in.reserve(n.inputs.size());
    for (std::size_t id : n.inputs) in.push_back(&nodes_[id].value);
    return in;
}

Gradients Tape::backward(Var loss) const {
    const Matrix& v = value(loss);
    if (v.rows() != 1 || v.cols() != 1) throw UsageError("backward(loss) needs a scalar (1 x 1) loss");
    return backward(loss, Matrix(1, 1, 1.0));
}

Gradients Tape::backward(Var output, const Matrix& seed) const {
    if (output.tape != this || output.id >= nodes_.size()) throw UsageError("variable does not belong to tape");
    const Matrix& out = nodes_[output.id].value;
    if (seed.rows() != out.rows() || seed.cols() != out.cols()) throw ShapeError("backward seed shape mismatch");

    std::vector<Matrix> grads(nodes_.size());
    std::vector<std::pair<std::size_t, std::size_t>> shapes;
    shapes.reserve(nodes_.size());
    for (const auto& n : nodes_) shapes.emplace_back(n.value.rows(), n.value.cols());
    grads[output.id] = seed;

    for (std::size_t id = output.id + 1; id-- > 0;) {
        const Node& n = nodes_[id];
        if (!n.bwd || !n.needs_grad || grads[id].empty()) continue;
        std::vector<Matrix*> targets;
        targets.reserve(n.inputs.size());
        for (std::size_t in : n.inputs) {
            if (!nodes_[in].needs_grad) {
                targets.push_back(nullptr);
                continue;
            }
            if (grads[in].empty()) grads[in] = Matrix(shapes[in].first, shapes[in].second);
            targets.push_back(&grads[in]);
        }
        n.bwd(grads[id], input_values(n), n.value, targets);
    }
    return Gradients(std::move(grads), std::move(shapes));
}

bool Tape::replay_matches() const {
    std::vector<Matrix> values;
    values.reserve(nodes_.size());
    for (const auto& n : nodes_) {
        if (!n.fwd) {
            values.push_back(n.value);
            continue;
        }
        Inputs in;
        for (std::size_t id : n.inputs) in.push_back(&values[id]);
        values.push_back(n.fwd(in));
        if (!(values.back() == n.value)) return false;
    }
    return true;
}

namespace {

void accumulate(Matrix* dst, const Matrix& g) {
    if (dst) add_inplace(*dst, g);
}

}  // namespace

Var matmul(Var a, Var b) {
    return a.tape->record(
        {a, b}, [](const Inputs& in) { return evit::matmul(*in[0], *in[1]); },
        [](const Matrix& g, const Inputs& in, const Matrix&, const std::vector<Matrix*>& d) {
            if (d[0]) accumulate(d[0], evit::matmul(g, evit::transpose(*in[1])));
            if (d[1]) accumulate(d[1], evit::matmul(evit::transpose(*in[0]), g));
        });
}

Var transpose(Var a) {
    return a.tape->record(
        {a}, [](const Inputs& in) { return evit::transpose(*in[0]); },
        [](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            accumulate(d[0], evit::transpose(g));
        });
}

Var add(Var a, Var b) {
    return a.tape->record(
        {a, b},
        [](const Inputs& in) {
            Matrix out = *in[0];
            add_inplace(out, *in[1]);
            return out;
        },
        [](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            accumulate(d[0], g);
            accumulate(d[1], g);
        });
}

Var add_bias(Var x, Var bias) {
    return x.tape->record(
        {x, bias},
        [](const Inputs& in) {
            Matrix out = *in[0];
            add_row_broadcast(out, in[1]->values());
            return out;
        },
        [](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            accumulate(d[0], g);
            if (d[1]) {
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) (*d[1])(0, c) += g(r, c);
            }
        });
}

Var divide(Var a, double s) {
    return a.tape->record(
        {a},
        [s](const Inputs& in) {
            Matrix out = *in[0];
            for (double& v : out.values()) v /= s;
            return out;
        },
        [s](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            if (!d[0]) return;
            auto dst = d[0]->values();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g.values()[i] / s;
        });
}

Var softmax_rows(Var a) {
    return a.tape->record(
        {a}, [](const Inputs& in) { return evit::softmax_rows(*in[0]); },
        [](const Matrix& g, const Inputs&, const Matrix& y, const std::vector<Matrix*>& d) {
            if (!d[0]) return;
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c) (*d[0])(r, c) += y(r, c) * (g(r, c) - dot);
            }
        });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
    return x.tape->record(
        {x, gamma, beta},
        [eps](const Inputs& in) { return evit::layernorm(*in[0], in[1]->values(), in[2]->values(), eps); },
        [eps](const Matrix& g, const Inputs& in, const Matrix&, const std::vector<Matrix*>& d) {
            const Matrix& xv = *in[0];
            const Matrix& gm = *in[1];
            const std::size_t cols = xv.cols();
            const double width = static_cast<double>(cols);
            std::vector<double> xhat(cols), dxhat(cols);
            for (std::size_t r = 0; r < xv.rows(); ++r) {
                double mean = 0.0;
                for (double v : xv.row(r)) mean += v;
                mean /= width;
                double var = 0.0;
                for (double v : xv.row(r)) var += (v - mean) * (v - mean);
                var /= width;
                const double rstd = 1.0 / std::sqrt(var + eps);
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    xhat[c] = (xv(r, c) - mean) * rstd;
                    dxhat[c] = g(r, c) * gm(0, c);
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * xhat[c];
                    if (d[1]) (*d[1])(0, c) += g(r, c) * xhat[c];
                    if (d[2]) (*d[2])(0, c) += g(r, c);
                }
                mean_d /= width;
                mean_dx /= width;
                if (d[0]) {
                    for (std::size_t c = 0; c < cols; ++c)
                        (*d[0])(r, c) += rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                }
            }
        });
}

Var gelu(Var a) {
    return a.tape->record(
        {a}, [](const Inputs& in) { return evit::gelu(*in[0]); },
        [](const Matrix& g, const Inputs& in, const Matrix&, const std::vector<Matrix*>& d) {
            if (!d[0]) return;
            const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
            auto x = in[0]->values();
            auto dst = d[0]->values();
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double cdf = 0.5 * std::erfc(-x[i] / std::sqrt(2.0));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
                dst[i] += g.values()[i] * (cdf + x[i] * pdf);
            }
        });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    return a.tape->record(
        {a}, [begin, end](const Inputs& in) { return evit::slice_rows(*in[0], begin, end); },
        [begin](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            if (!d[0]) return;
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) (*d[0])(begin + r, c) += g(r, c);
        });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
    return a.tape->record(
        {a}, [begin, end](const Inputs& in) { return evit::slice_cols(*in[0], begin, end); },
        [begin](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            if (!d[0]) return;
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t c = 0; c < g.cols(); ++c) (*d[0])(r, begin + c) += g(r, c);
        });
}

Var gather_rows(Var a, std::vector<std::size_t> idx) {
    return a.tape->record(
        {a}, [idx](const Inputs& in) { return evit::gather_rows(*in[0], idx); },
        [idx](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            if (!d[0]) return;
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t c = 0; c < g.cols(); ++c) (*d[0])(idx[i], c) += g(i, c);
        });
}

Var gather_cols(Var a, std::vector<std::size_t> idx) {
    return a.tape->record(
        {a},
        [idx](const Inputs& in) {
            const Matrix& m = *in[0];
            Matrix out(m.rows(), idx.size());
            for (std::size_t r = 0; r < m.rows(); ++r)
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    if (idx[i] >= m.cols()) throw ShapeError("gather_cols index out of range");
                    out(r, i) = m(r, idx[i]);
                }
            return out;
        },
        [idx](const Matrix& g, const Inputs&, const Matrix&, const std::vector<Matrix*>& d) {
            if (!d[0]) return;
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t i = 0; i < idx.size(); ++i) (*d[0])(r, idx[i]) += g(r, i);
        });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw UsageError("concat_rows of nothing");
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts.front().tape->record(
        inputs,
        [](const Inputs& in) {
            std::vector<Matrix> copies;
            for (const Matrix* m : in) copies.push_back(*m);
            return evit::concat_rows(copies);
        },
        [](const Matrix& g, const Inputs& in, const Matrix&, const std::vector<Matrix*>& d) {
            std::size_t offset = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
                const std::size_t rows = in[i]->rows();
                if (d[i]) add_inplace(*d[i], evit::slice_rows(g, offset, offset + rows));
                offset += rows;
            }
        });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw UsageError("concat_cols of nothing");
    std::vector<Var> inputs(parts.begin(), parts.end());
    return parts.front().tape->record(
        inputs,
        [](const Inputs& in) {
            std::vector<Matrix> copies;
            for (const Matrix* m : in) copies.push_back(*m);
            return evit::concat_cols(copies);
        },
        [](const Matrix& g, const Inputs& in, const Matrix&, const std::vector<Matrix*>& d) {
            std::size_t offset = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
                const std::size_t cols = in[i]->cols();
                if (d[i]) add_inplace(*d[i], evit::slice_cols(g, offset, offset + cols));
                offset += cols;
            }
        });
}

Var stop_gradient(Var a) {
    return a.tape->record({a}, [](const Inputs& in) { return *in[0]; }, nullptr);
}

}  // namespace evit::verify
