#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "phar/training.hpp"

namespace phar {

struct CheckReport {
    std::string name;
    bool pass = false;
    double value = 0.0;
    double threshold = 0.0;
    double runtime_ms = 0.0;
};

// Machine-readable "CHECK <name> <pass|fail> <value> <threshold>" lines plus
// a human-readable table.
void print_reports(const std::vector<CheckReport>& reports, std::ostream& out);
bool all_passed(const std::vector<CheckReport>& reports);

// Executable battery of the library's invariants: AdaIN statistic matching,
// background/pixel preservation, blending identities, frozen-encoder audit,
// gradient checks, shape contracts at two sizes, determinism replay,
// checkpoint round trip, mask-pyramid nonemptiness, and the Bradley-Terry
// symmetry/dominance cases.
std::vector<CheckReport> run_invariant_suite(uint64_t seed, int scale);

// Desk-scale training diagnostics: finite losses, discriminator probe-batch
// improvement over the first 50 steps, style-loss reduction at step 200, and
// foreground statistics moving toward the background's. Also audits the
// V1..V4 ablation wiring by checking which parameters actually change.
std::vector<CheckReport> run_smoke_training(const TrainConfig& cfg,
                                            const std::string& work_dir);

// Per-op finite-difference gradient report; every differentiable op appears
// exactly once.
struct OpGradReport {
    std::string op;
    double max_rel_err = 0.0;
};
std::vector<OpGradReport> run_gradcheck_suite(uint64_t seed, int scale);

// End-to-end gradient checks of the two training objectives at desk scale,
// sampling the largest-gradient elements of parameters across every store.
double gradcheck_generator_objective(uint64_t seed, int scale, int image_size,
                                     size_t elements_per_tensor);
double gradcheck_discriminator_objective(uint64_t seed, int scale, int image_size,
                                         size_t elements_per_tensor);

// Relative mismatch between the masked moments of stylized features and the
// whole-map moments of the background features; the AdaIN matching metric.
double adain_match_error(const Tensor& stylized, const Tensor& bg_features,
                         const Tensor& level_mask);

}  // namespace phar
