#pragma once

#include <cmath>
#include <memory>
#include <sstream>
#include <vector>

#include "phar/common.hpp"

namespace phar {

// All values are dense NCHW float32 tensors. Parameter vectors use the
// channel slot ([1,C,1,1]) and per-(batch,channel) statistics use [N,C,1,1],
// so a single 4-extent shape covers everything the networks move around.
struct Shape {
    int n = 0, c = 0, h = 0, w = 0;

    Shape() = default;
    Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

    size_t numel() const {
        return static_cast<size_t>(n) * static_cast<size_t>(c) * static_cast<size_t>(h) *
               static_cast<size_t>(w);
    }

    bool operator==(const Shape&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "[" << n << "," << c << "," << h << "," << w << "]";
        return os.str();
    }
};

struct TensorImpl {
    Shape shape;
    std::shared_ptr<std::vector<float>> val;
    std::vector<float> grad;  // empty until backward touches this tensor
    bool requires_grad = false;
    int node = -1;  // index of the tape node that produced this value
    // Reductions accumulate in double; scalar outputs keep those extra bits
    // so finite-difference checks are not limited by the f32 store.
    double precise = 0.0;
    bool has_precise = false;
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape s, float fill = 0.0f, bool requires_grad = false) {
        p_ = std::make_shared<TensorImpl>();
        p_->shape = s;
        p_->val = std::make_shared<std::vector<float>>(s.numel(), fill);
        p_->requires_grad = requires_grad;
    }

    static Tensor from_data(Shape s, std::vector<float> data) {
        if (data.size() != s.numel())
            throw_shape("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + s.str());
        Tensor t(s);
        *t.p_->val = std::move(data);
        return t;
    }

    static Tensor scalar(float v) {
        Tensor t(Shape(1, 1, 1, 1));
        (*t.p_->val)[0] = v;
        return t;
    }

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    size_t numel() const { return p_->shape.numel(); }

    float* data() { return p_->val->data(); }
    const float* data() const { return p_->val->data(); }

    float& at(int n, int c, int y, int x) {
        const Shape& s = p_->shape;
        return (*p_->val)[((static_cast<size_t>(n) * s.c + c) * s.h + y) * s.w + x];
    }
    float at(int n, int c, int y, int x) const {
        const Shape& s = p_->shape;
        return (*p_->val)[((static_cast<size_t>(n) * s.c + c) * s.h + y) * s.w + x];
    }

    float item() const {
        if (numel() != 1) throw_value("item() on tensor of shape " + shape().str());
        return (*p_->val)[0];
    }

    void set_precise(double v) {
        p_->precise = v;
        p_->has_precise = true;
    }
    double precise_item() const {
        if (numel() != 1) throw_value("precise_item() on tensor of shape " + shape().str());
        return p_->has_precise ? p_->precise : static_cast<double>((*p_->val)[0]);
    }

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool rg) { p_->requires_grad = rg; }

    int node() const { return p_->node; }
    void set_node(int n) { p_->node = n; }

    // True when backward must produce a gradient for this tensor: either the
    // caller asked for one or the value came off the tape.
    bool needs_grad() const { return p_->requires_grad || p_->node >= 0; }

    bool has_grad() const { return !p_->grad.empty(); }
    float* grad() { return p_->grad.data(); }
    const float* grad() const { return p_->grad.data(); }

    void ensure_grad() {
        if (p_->grad.empty()) p_->grad.assign(numel(), 0.0f);
    }
    void zero_grad() {
        if (!p_->grad.empty()) p_->grad.assign(numel(), 0.0f);
    }
    void drop_grad() {
        p_->grad.clear();
        p_->grad.shrink_to_fit();
    }

    // Shares the value buffer, drops autodiff provenance.
    Tensor detached() const {
        Tensor t;
        t.p_ = std::make_shared<TensorImpl>();
        t.p_->shape = p_->shape;
        t.p_->val = p_->val;
        return t;
    }

    // Deep copy of the values, no provenance.
    Tensor clone() const {
        Tensor t(p_->shape);
        *t.p_->val = *p_->val;
        return t;
    }

    bool all_finite() const {
        for (float v : *p_->val)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_impl(const Tensor& o) const { return p_ == o.p_; }
    TensorImpl* impl() const { return p_.get(); }

private:
    std::shared_ptr<TensorImpl> p_;
};

}  // namespace phar
