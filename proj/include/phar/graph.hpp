#pragma once

#include <functional>
#include <string>
#include <vector>

#include "phar/tensor.hpp"

namespace phar {

// One recorded forward operation. The backward rule reads the outputs'
// gradient buffers and accumulates into whichever inputs need gradients.
// Most ops have a single output; masked_moments has two.
struct Node {
    std::string name;
    std::vector<Tensor> inputs;
    std::vector<Tensor> outputs;
    std::function<void()> backward;
};

// Tape of executed operations for one forward pass. Topological order is the
// execution order; reverse traversal therefore visits every node after all
// of its consumers. A tape must not be shared between threads.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    int record(Node node) {
        nodes_.push_back(std::move(node));
        int id = static_cast<int>(nodes_.size()) - 1;
        for (Tensor& out : nodes_.back().outputs) out.set_node(id);
        return id;
    }

    size_t size() const { return nodes_.size(); }

    // Reverse-mode sweep from a scalar loss. Each node runs at most once:
    // a node participates only if some later node (or the seed) allocated a
    // gradient for one of its outputs. Transient gradients on intermediates
    // are released afterwards so a tape supports several independent
    // backward calls within one forward pass.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw_value("backward requires a scalar loss, got shape " + loss.shape().str());
        int start = loss.node();
        if (start < 0 || start >= static_cast<int>(nodes_.size()) || !produces(start, loss))
            throw_value("backward: loss was not produced by the active graph");

        Tensor seed = loss;
        seed.ensure_grad();
        seed.grad()[0] = 1.0f;

        for (int i = start; i >= 0; --i) {
            Node& n = nodes_[i];
            bool touched = false;
            for (const Tensor& out : n.outputs)
                if (out.has_grad()) {
                    touched = true;
                    break;
                }
            if (!touched) continue;
            n.backward();
        }

        for (int i = start; i >= 0; --i)
            for (Tensor& out : nodes_[i].outputs)
                if (!out.requires_grad()) out.drop_grad();
    }

    // Active tape for the current thread; ops record onto it when set.
    static Tape*& active() {
        thread_local Tape* current = nullptr;
        return current;
    }

private:
    bool produces(int node, const Tensor& t) const {
        for (const Tensor& out : nodes_[node].outputs)
            if (out.same_impl(t)) return true;
        return false;
    }

    std::vector<Node> nodes_;
};

// RAII: makes a fresh tape active for the enclosed forward pass.
class TapeScope {
public:
    TapeScope() : prev_(Tape::active()) { Tape::active() = &tape_; }
    ~TapeScope() { Tape::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

    Tape& tape() { return tape_; }

private:
    Tape tape_;
    Tape* prev_;
};

// RAII: suspends recording (pure forward evaluation).
class NoGradScope {
public:
    NoGradScope() : prev_(Tape::active()) { Tape::active() = nullptr; }
    ~NoGradScope() { Tape::active() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

// Backward through the active tape.
inline void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (!t) throw_value("backward: no active graph");
    t->backward(loss);
}

}  // namespace phar
