#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <vector>

#include "phar/graph.hpp"
#include "phar/ops.hpp"

namespace phar {

struct GradCheckOptions {
    float step = 1e-3f;
    // Large tensors are checked on the elements with the largest analytic
    // gradient magnitudes instead of exhaustively.
    size_t max_per_tensor = static_cast<size_t>(-1);
    // Elements where BOTH the analytic and the numeric gradient are below
    // this magnitude are skipped: they sit under the f32 finite-difference
    // noise floor, where a relative comparison carries no information. A
    // wrong backward rule still shows up, because then one side is large.
    double min_signal = 0.0;
    // When nonzero, a failing element is re-estimated at half the step. If
    // the two finite-difference estimates disagree beyond this tolerance the
    // function is not smooth at step scale there (an activation kink inside
    // the bracket) and the element cannot be rated; it is skipped. A wrong
    // backward rule keeps failing: its numeric estimate is step-stable.
    double fd_stability_tol = 0.0;
};

// Compares the analytic gradient of a scalar-valued function against central
// finite differences, element by element over every tensor in `inputs`.
// Returns the maximum relative error with an absolute floor of 1e-6 in the
// denominator.
inline double grad_check(const std::function<Tensor(std::vector<Tensor>&)>& f,
                         std::vector<Tensor>& inputs, GradCheckOptions opt = {}) {
    for (Tensor& t : inputs) t.set_requires_grad(true);

    std::vector<std::vector<float>> analytic;
    {
        TapeScope scope;
        Tensor y = f(inputs);
        if (y.numel() != 1) throw_value("grad_check: function must return a scalar");
        scope.tape().backward(y);
        for (Tensor& t : inputs) {
            if (t.has_grad())
                analytic.emplace_back(t.grad(), t.grad() + t.numel());
            else
                analytic.emplace_back(t.numel(), 0.0f);
            t.zero_grad();
        }
    }

    double max_rel = 0.0;
    NoGradScope no_grad;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        Tensor& t = inputs[ti];
        const size_t n = t.numel();
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        if (n > opt.max_per_tensor) {
            std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
                return std::abs(analytic[ti][a]) > std::abs(analytic[ti][b]);
            });
            order.resize(opt.max_per_tensor);
        }
        for (size_t e : order) {
            float* slot = t.data() + e;
            const float orig = *slot;
            auto central = [&](float h) {
                const float xp = orig + h;
                const float xm = orig - h;
                *slot = xp;
                const double fp = f(inputs).precise_item();
                *slot = xm;
                const double fm = f(inputs).precise_item();
                *slot = orig;
                return (fp - fm) / (static_cast<double>(xp) - xm);
            };
            auto rel_err = [](double x, double y) {
                return std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-6});
            };
            double numeric = central(opt.step);
            const double a = analytic[ti][e];
            if (std::abs(a) < opt.min_signal && std::abs(numeric) < opt.min_signal) continue;
            double rel = rel_err(a, numeric);
            if (opt.fd_stability_tol > 0.0 && rel > opt.fd_stability_tol) {
                // refine the step until the estimate stabilizes; kink bias
                // shrinks linearly in the step, so a convergent tail is the
                // trustworthy one. A divergent tail cannot rate the element.
                double prev = numeric;
                bool stable = false;
                float h = opt.step;
                for (int round = 0; round < 2 && !stable; ++round) {
                    h *= 0.5f;
                    const double refined = central(h);
                    stable = rel_err(prev, refined) <= opt.fd_stability_tol;
                    prev = refined;
                }
                if (!stable) {
                    if (std::getenv("PHAR_GRADCHECK_VERBOSE"))
                        std::fprintf(stderr, "gradcheck t%zu e%zu a=%.5g UNSTABLE\n", ti, e, a);
                    continue;
                }
                rel = rel_err(a, prev);
            }
            if (std::getenv("PHAR_GRADCHECK_VERBOSE") && rel > 1e-4)
                std::fprintf(stderr, "gradcheck t%zu e%zu a=%.5g n=%.5g rel=%.3g\n", ti, e, a,
                             numeric, rel);
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace phar
