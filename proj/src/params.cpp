#include "phar/params.hpp"

#include <cmath>

namespace phar {

Tensor& ParamStore::add(const std::string& path, Tensor t, bool trainable) {
    if (index_.count(path)) throw_value("ParamStore: duplicate path '" + path + "'");
    Entry e;
    e.path = path;
    e.tensor = std::move(t);
    e.trainable = trainable;
    if (trainable) {
        e.tensor.set_requires_grad(true);
        e.adam_m.assign(e.tensor.numel(), 0.0f);
        e.adam_v.assign(e.tensor.numel(), 0.0f);
    }
    index_[path] = entries_.size();
    entries_.push_back(std::move(e));
    return entries_.back().tensor;
}

ParamStore::Entry& ParamStore::entry(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end()) throw_value("ParamStore: unknown path '" + path + "'");
    return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) throw_value("ParamStore: unknown path '" + path + "'");
    return entries_[it->second];
}

void ParamStore::zero_grads() {
    for (Entry& e : entries_) e.tensor.zero_grad();
}

void ParamStore::drop_grads() {
    for (Entry& e : entries_) e.tensor.drop_grad();
}

void ParamStore::set_requires_grad(bool rg) {
    for (Entry& e : entries_)
        if (e.trainable) e.tensor.set_requires_grad(rg);
}

std::vector<float> ParamStore::snapshot_trainable() const {
    std::vector<float> out;
    for (const Entry& e : entries_)
        if (e.trainable)
            out.insert(out.end(), e.tensor.data(), e.tensor.data() + e.tensor.numel());
    return out;
}

std::vector<float> ParamStore::snapshot_buffers() const {
    std::vector<float> out;
    for (const Entry& e : entries_)
        if (!e.trainable)
            out.insert(out.end(), e.tensor.data(), e.tensor.data() + e.tensor.numel());
    return out;
}

void ParamStore::restore_buffers(const std::vector<float>& data) {
    size_t off = 0;
    for (Entry& e : entries_)
        if (!e.trainable) {
            const size_t n = e.tensor.numel();
            if (off + n > data.size()) throw_value("restore_buffers: snapshot too small");
            std::copy(data.begin() + off, data.begin() + off + n, e.tensor.data());
            off += n;
        }
    if (off != data.size()) throw_value("restore_buffers: snapshot size mismatch");
}

void adam_step(ParamStore& store, float lr, float beta1, float beta2, float eps) {
    for (ParamStore::Entry& e : store.entries()) {
        if (!e.trainable) continue;
        if (!e.tensor.has_grad())
            throw_value("adam_step: parameter '" + e.path + "' has no gradient");
        e.adam_step += 1;
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), e.adam_step);
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), e.adam_step);
        float* p = e.tensor.data();
        const float* g = e.tensor.grad();
        const size_t n = e.tensor.numel();
        for (size_t i = 0; i < n; ++i) {
            e.adam_m[i] = beta1 * e.adam_m[i] + (1.0f - beta1) * g[i];
            e.adam_v[i] = beta2 * e.adam_v[i] + (1.0f - beta2) * g[i] * g[i];
            const double mhat = e.adam_m[i] / bc1;
            const double vhat = e.adam_v[i] / bc2;
            p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
        e.tensor.drop_grad();
    }
}

FreezeGuard::FreezeGuard(std::vector<ParamStore*> stores) : stores_(std::move(stores)) {
    for (ParamStore* s : stores_) {
        std::vector<bool> saved;
        saved.reserve(s->entries().size());
        for (ParamStore::Entry& e : s->entries()) {
            saved.push_back(e.tensor.requires_grad());
            e.tensor.set_requires_grad(false);
        }
        saved_.push_back(std::move(saved));
    }
}

FreezeGuard::~FreezeGuard() {
    for (size_t i = 0; i < stores_.size(); ++i) {
        auto& entries = stores_[i]->entries();
        for (size_t j = 0; j < entries.size(); ++j)
            entries[j].tensor.set_requires_grad(saved_[i][j]);
    }
}

}  // namespace phar
