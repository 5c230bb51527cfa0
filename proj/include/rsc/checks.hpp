#pragma once

// Self-contained diagnostic suites shared by `rsc check` and the acceptance
// tests. Each suite is deterministic in its seed and reports the worst case
// it saw alongside a pass flag computed against fixed tolerances.

#include <cstdint>
#include <string>
#include <vector>

namespace rsc::checks {

/// Largest |a - n| over a tensor divided by the larger of the two max-norms,
/// so entries near zero are judged against the tensor's scale.
double scaled_max_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

struct GradientCheckReport {
    std::size_t operator_instances = 0;
    std::size_t network_instances = 0;
    double max_operator_error = 0.0;
    double max_network_error = 0.0;
    std::string worst_operator;  ///< op name of the worst operator instance
    double seconds = 0.0;
    double tolerance = 1e-5;
    bool passed() const { return max_operator_error <= tolerance && max_network_error <= tolerance; }
};

/// Central differences with step 1e-5 against the tape's gradients, cycling
/// through every differentiable operator and then small random networks.
GradientCheckReport gradient_check(std::uint64_t seed, std::size_t operator_instances = 100,
                                   std::size_t network_instances = 20);

struct MaskCheckReport {
    std::size_t pairs = 0;
    std::size_t cardinality_failures = 0;
    std::size_t containment_failures = 0;
    std::size_t tie_failures = 0;
    std::size_t broadcast_failures = 0;
    double seconds = 0.0;
    bool passed() const {
        return cardinality_failures == 0 && containment_failures == 0 && tie_failures == 0 && broadcast_failures == 0;
    }
};

/// Random (weights, p) pairs with deliberate ties: exact muted count,
/// containment between a smaller and a larger p, lowest-index tie order,
/// and the spatial / channel broadcast onto Z.
MaskCheckReport mask_properties(std::uint64_t seed, std::size_t pairs = 1000);

struct Corollary2Report {
    std::size_t instances = 0;
    double eta = 1e-5;
    double max_relative_residual = 0.0;  ///< max residual / Γ(t)
    double min_ratio = 0.0;              ///< residual(2η) / residual(η)
    double max_ratio = 0.0;
    double min_first_order_ratio = 0.0;  ///< the same test on the exact first-order expansion
    double max_first_order_ratio = 0.0;
    double seconds = 0.0;
    bool residual_ok() const { return max_relative_residual <= 1e-6; }
    bool scaling_ok() const { return min_ratio >= 2.5 && max_ratio <= 6.0; }
    bool passed() const { return residual_ok() && scaling_ok(); }
};

/// Random fixed-feature top layers: one RSC step each at η and 2η.
Corollary2Report corollary2(std::uint64_t seed, std::size_t instances = 10, double eta = 1e-5);

}  // namespace rsc::checks
