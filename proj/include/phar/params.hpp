#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "phar/common.hpp"
#include "phar/tensor.hpp"

namespace phar {

// Named, ordered collection of tensors. Trainable entries carry Adam moment
// buffers; non-trainable entries hold frozen weights and batch-norm running
// statistics. Iteration order is insertion order, which makes
// initialization, checkpoints, and update sweeps deterministic.
class ParamStore {
public:
    struct Entry {
        std::string path;
        Tensor tensor;
        bool trainable = true;
        std::vector<float> adam_m, adam_v;
        int64_t adam_step = 0;
    };

    Tensor& add(const std::string& path, Tensor t, bool trainable = true);

    bool contains(const std::string& path) const { return index_.count(path) != 0; }
    Entry& entry(const std::string& path);
    const Entry& entry(const std::string& path) const;
    Tensor& at(const std::string& path) { return entry(path).tensor; }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    void zero_grads();
    void drop_grads();
    void set_requires_grad(bool rg);

    // Bytes of all trainable tensors, for change audits.
    std::vector<float> snapshot_trainable() const;
    // Snapshot/restore all non-trainable entries (running statistics), so
    // probe evaluations can run without perturbing training state.
    std::vector<float> snapshot_buffers() const;
    void restore_buffers(const std::vector<float>& data);

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

// Standard Adam with bias correction. Every trainable parameter must have a
// populated gradient; gradients are cleared after the update.
void adam_step(ParamStore& store, float lr, float beta1 = 0.5f, float beta2 = 0.999f,
               float eps = 1e-8f);

// Temporarily clears requires_grad on the given stores so a forward pass can
// be differentiated through them without accumulating parameter gradients.
class FreezeGuard {
public:
    explicit FreezeGuard(std::vector<ParamStore*> stores);
    ~FreezeGuard();
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    std::vector<ParamStore*> stores_;
    std::vector<std::vector<bool>> saved_;
};

}  // namespace phar
