#pragma once

// Named parameter registry. Models register their leaves here in a fixed
// order, which pins: optimizer iteration order, checkpoint layout, checksum
// definition, and freeze/copy semantics.

#include "repose/rng.hpp"
#include "repose/tensor.hpp"

#include <cstring>
#include <map>
#include <string>
#include <vector>

namespace repose {

template <class T>
class ParameterSet {
  public:
    Tensor<T> add(const std::string& name, Tensor<T> t) {
        require_t<StateError>(index_.find(name) == index_.end(),
                              "parameter '" + name + "' registered twice");
        require_t<StateError>(!t.node()->backward_fn,
                              "parameter '" + name + "' must be a leaf tensor");
        t.set_requires_grad(true);
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(t);
        frozen_.push_back(false);
        return t;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        require_t<StateError>(it != index_.end(), "unknown parameter '" + name + "'");
        return tensors_[it->second];
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        require_t<StateError>(it != index_.end(), "unknown parameter '" + name + "'");
        return tensors_[it->second];
    }

    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return tensors_.size(); }
    Tensor<T>& operator[](size_t i) { return tensors_[i]; }
    const Tensor<T>& operator[](size_t i) const { return tensors_[i]; }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

    // Frozen entries never receive optimizer updates. As an optimization the
    // tensor's requires_grad is dropped too, so backward skips their weight-
    // gradient GEMMs outright (computing and discarding is also allowed by
    // the freezing contract; skipping is just cheaper).
    void set_frozen(size_t i, bool frozen) {
        frozen_.at(i) = frozen;
        tensors_[i].set_requires_grad(!frozen);
    }
    void set_frozen(const std::string& name, bool frozen) {
        auto it = index_.find(name);
        require_t<StateError>(it != index_.end(), "unknown parameter '" + name + "'");
        set_frozen(it->second, frozen);
    }
    void set_all_frozen(bool frozen) {
        for (size_t i = 0; i < tensors_.size(); ++i) set_frozen(i, frozen);
    }
    bool is_frozen(size_t i) const { return frozen_.at(i); }
    bool all_frozen() const {
        for (bool f : frozen_)
            if (!f) return false;
        return !frozen_.empty();
    }
    bool any_trainable() const {
        for (const auto& t : tensors_)
            if (t.requires_grad()) return true;
        return false;
    }

    void zero_grad() {
        for (auto& t : tensors_) t.zero_grad();
    }

    // Copy values from a set with identical structure (names and shapes).
    void copy_values_from(const ParameterSet& src) {
        require_t<StateError>(names_ == src.names_, "parameter sets differ in structure");
        for (size_t i = 0; i < tensors_.size(); ++i) {
            require_t<ShapeError>(tensors_[i].shape() == src.tensors_[i].shape(),
                                  "parameter '" + names_[i] + "' differs in shape");
            tensors_[i].value_mut() = src.tensors_[i].value();
        }
    }

    // FNV-1a over the raw value bytes in registration order. Any bit flip in
    // any parameter changes this, which is what the frozen-weights contract
    // checks before and after training.
    uint64_t checksum() const {
        return checksum_if([](const std::string&) { return true; });
    }

    // Same digest restricted to parameters whose name the predicate accepts,
    // still walked in registration order. Two sets agree on a filtered
    // checksum iff the accepted subsequences have identical bytes.
    template <class Pred>
    uint64_t checksum_if(Pred&& keep) const {
        uint64_t h = 1469598103934665603ULL;
        for (size_t j = 0; j < tensors_.size(); ++j) {
            if (!keep(names_[j])) continue;
            const auto& v = tensors_[j].value();
            const unsigned char* p = reinterpret_cast<const unsigned char*>(v.data());
            const size_t nb = v.size() * sizeof(T);
            for (size_t i = 0; i < nb; ++i) {
                h ^= p[i];
                h *= 1099511628211ULL;
            }
        }
        return h;
    }

  private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::vector<bool> frozen_;
    std::map<std::string, size_t> index_;
};

// ------------------------------------------------------------- init helpers

// U(-1/sqrt(fan_in), +1/sqrt(fan_in)) - the usual dense/conv default.
template <class T>
std::vector<T> fan_in_uniform(int64_t n, int64_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    std::vector<T> v(static_cast<size_t>(n));
    for (auto& x : v) x = T(rng.uniform(-bound, bound));
    return v;
}

// U(-sqrt(6/fan_in), +sqrt(6/fan_in)) - gain-2 scaling that keeps activation
// variance roughly constant through a conv followed by a sigmoid-weighted
// nonlinearity (which attenuates by ~0.6x).
template <class T>
std::vector<T> he_uniform(int64_t n, int64_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    std::vector<T> v(static_cast<size_t>(n));
    for (auto& x : v) x = T(rng.uniform(-bound, bound));
    return v;
}

template <class T>
std::vector<T> const_fill(int64_t n, T value) {
    return std::vector<T>(size_t(n), value);
}

}  // namespace repose
