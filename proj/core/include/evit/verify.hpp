#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evit/error.hpp"
#include "evit/model.hpp"
#include "evit/reorg.hpp"
#include "evit/tape.hpp"

namespace evit::verify {

// A finite-difference probe straddled a top-k selection change.
class BoundaryError : public Error {
public:
    using Error::Error;
};

struct RecordOptions {
    // Treat the attentiveness weights of the fused token as constants.
    bool frozen_scores = false;
};

// Encoder forward recorded on a tape. Parameters follow WeightSet::tensors() order.
struct RecordedEncoder {
    Var input;  // n x d embedded tokens
    std::vector<std::pair<std::string, Var>> params;
    Var logits;                       // 1 x classes
    std::vector<Var> post_attention;  // per layer: sequence after the MHSA residual, before any reorg
    std::vector<Selection> selections;
    MaskTrace masks;

    Var param(std::string_view name) const;
};

RecordedEncoder record_encoder(Tape& tape, const TokenSequence& tokens, const WeightSet& w, const ReorgPlan& plan,
                               const RecordOptions& opts = {}, Rng* rng = nullptr);

// Scalar loss <logits, weights> as a 1 x 1 node.
Var dot_loss(Var logits, const Matrix& weights);

// One evaluation of a probed function: its outputs plus a fingerprint of every discrete choice made.
struct Probe {
    std::vector<double> values;
    std::vector<std::string> selection;
};

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h. Rows index outputs, columns inputs.
Matrix fd_jacobian(const std::function<std::vector<double>(std::span<const double>)>& f, std::span<const double> x,
                   double h);
// As above; throws BoundaryError if the two sides of any probe disagree on `selection`.
Matrix fd_jacobian(const std::function<Probe(std::span<const double>)>& f, std::span<const double> x, double h);

// Exhaustive comparison oracle for TopK: token i ranks by the number of tokens that beat it
// (strictly larger score, or equal score and lower index).
Selection brute_force_selection(std::span<const double> scores, double keep_rate);

// Sorted kept-origin fingerprint of every reorganization decision.
std::vector<std::string> selection_signature(const MaskTrace& masks);

struct TensorCheck {
    std::string name;
    double rel_error = 0.0;  // ||g_tape - g_fd|| / (||g_tape|| + ||g_fd||) over accepted probes
    std::size_t probes = 0;
    std::size_t rejected = 0;
};

struct GradCheckReport {
    std::vector<TensorCheck> tensors;
    double max_rel_error = 0.0;
    std::size_t probes = 0;
    std::size_t rejected = 0;
};

struct GradCheckOptions {
    double h = 1e-5;
    bool include_weights = true;
};

// Tape gradients of <logits, loss_weights> vs central differences of the plain encoder.
GradCheckReport gradient_check(const TokenSequence& tokens, const WeightSet& w, const ReorgPlan& plan,
                               const Matrix& loss_weights, const GradCheckOptions& opts = {});

// Small randomized encoder with well-spread weights (used by the gradient suites).
struct ToyInstance {
    WeightSet weights;
    TokenSequence tokens;
    Matrix loss_weights;
};
ToyInstance make_toy_instance(const ModelConfig& config, std::size_t n_tokens, std::uint64_t seed);

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct SuiteReport {
    std::vector<CheckResult> checks;

    std::size_t failures() const;
};

std::vector<std::string> suite_names();
// Throws UsageError on an unknown suite name.
SuiteReport run_suite(std::string_view suite, std::uint64_t seed, std::size_t trials);

}  // namespace evit::verify
