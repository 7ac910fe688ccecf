#pragma once

// Matrix-granular reverse-mode differentiation. Every op records its value, its inputs and a pair
// of closures: one recomputes the value from the inputs (used by replay), the other accumulates
// input gradients from the output gradient. Node ids are issued in evaluation order, so a single
// descending sweep is a valid reverse topological order.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "evit/kernels.hpp"

namespace evit::verify {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
};

using Inputs = std::vector<const Matrix*>;
using ForwardFn = std::function<Matrix(const Inputs&)>;
// grads[i] is null when input i does not need a gradient.
using BackwardFn = std::function<void(const Matrix& grad_out, const Inputs& inputs, const Matrix& out,
                                      const std::vector<Matrix*>& grads)>;

class Gradients {
public:
    explicit Gradients(std::vector<Matrix> per_node, std::vector<std::pair<std::size_t, std::size_t>> shapes)
        : per_node_(std::move(per_node)), shapes_(std::move(shapes)) {}

    // Zero matrix of the right shape for nodes the sweep never reached.
    Matrix operator[](Var v) const;

private:
    std::vector<Matrix> per_node_;
    std::vector<std::pair<std::size_t, std::size_t>> shapes_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Matrix value);      // differentiable input
    Var constant(Matrix value);  // never receives a gradient
    Var record(std::vector<Var> inputs, ForwardFn fwd, BackwardFn bwd);

    const Matrix& value(Var v) const { return nodes_[v.id].value; }
    std::size_t size() const { return nodes_.size(); }

    // Requires a 1 x 1 loss node; throws UsageError otherwise.
    Gradients backward(Var loss) const;
    // Arbitrary upstream gradient for `output`.
    Gradients backward(Var output, const Matrix& seed) const;

    // Recompute every op node from the leaf values; true iff all values match bitwise.
    bool replay_matches() const;

private:
    struct Node {
        Matrix value;
        std::vector<std::size_t> inputs;
        ForwardFn fwd;
        BackwardFn bwd;
        bool needs_grad = false;
    };

    Inputs input_values(const Node& n) const;

    std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var add_bias(Var x, Var bias);  // bias is 1 x cols, broadcast over rows
Var divide(Var a, double s);
Var softmax_rows(Var a);
Var layernorm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
Var gelu(Var a);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::vector<std::size_t> idx);
Var gather_cols(Var a, std::vector<std::size_t> idx);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var stop_gradient(Var a);

}  // namespace evit::verify
