#pragma once

// Adam optimizer over one or more labeled parameter sets. Labels scope the
// moment tensors when optimizer state is serialized ("m/<label>/<param>"),
// and make gradient diagnostics name the offending tensor.
//
// step() consumes whatever gradients the parameters currently hold:
//   1. every gradient is checked finite (NumericError otherwise),
//   2. the global L2 norm over all trainable gradients is clipped to
//      cfg.clip (0 disables clipping),
//   3. per-parameter Adam with bias correction; arithmetic in double,
//      moments stored in T so checkpoint round-trips are lossless.
// Frozen parameters are skipped entirely. A trainable parameter that never
// appeared in the graph (no gradient buffer) is treated as gradient zero:
// its moments still decay, which is exactly Adam's behavior on a zero
// gradient.
//
// learning_rate = 0 performs the full moment bookkeeping but leaves every
// weight bitwise untouched.

#include "repose/checkpoint.hpp"
#include "repose/params.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace repose {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 1.0;  // global gradient-norm ceiling; 0 = no clipping

    void validate() const {
        require_t<ConfigError>(lr >= 0.0, "adam: learning rate must be >= 0");
        require_t<ConfigError>(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                               "adam: betas must lie in [0,1)");
        require_t<ConfigError>(eps > 0.0, "adam: eps must be > 0");
        require_t<ConfigError>(clip >= 0.0, "adam: clip must be >= 0");
    }
};

template <class T>
class Adam {
  public:
    Adam(std::vector<std::pair<std::string, ParameterSet<T>*>> sets, AdamConfig cfg)
        : sets_(std::move(sets)), cfg_(cfg) {
        cfg_.validate();
        require_t<ConfigError>(!sets_.empty(), "adam: need at least one parameter set");
        for (auto& [label, ps] : sets_) {
            require_t<ConfigError>(ps != nullptr, "adam: null parameter set '" + label + "'");
            for (size_t i = 0; i < ps->size(); ++i) {
                Slot s;
                s.ps = ps;
                s.index = i;
                s.name = label + "/" + ps->names()[i];
                s.m.assign(size_t((*ps)[i].numel()), T(0));
                s.v.assign(size_t((*ps)[i].numel()), T(0));
                slots_.push_back(std::move(s));
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }
    int64_t steps_taken() const { return t_; }

    // One update from the currently stored gradients. Returns the pre-clip
    // global gradient norm.
    double step() {
        double sq_sum = 0.0;
        for (const Slot& s : slots_) {
            if (s.frozen()) continue;
            const Tensor<T>& p = s.param();
            if (!p.has_grad()) continue;
            const std::vector<T>& g = p.grad();
            for (T gv : g) {
                require_t<NumericError>(!not_finite(gv),
                                        "non-finite gradient in '" + s.name + "'");
                sq_sum += double(gv) * double(gv);
            }
        }
        const double norm = std::sqrt(sq_sum);
        const double scale = (cfg_.clip > 0.0 && norm > cfg_.clip) ? cfg_.clip / norm : 1.0;

        t_ += 1;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (Slot& s : slots_) {
            if (s.frozen()) continue;
            Tensor<T>& p = s.param();
            const std::vector<T>* g = p.has_grad() ? &p.grad() : nullptr;
            std::vector<T>& x = p.value_mut();
            for (size_t i = 0; i < x.size(); ++i) {
                const double gi = g ? double((*g)[i]) * scale : 0.0;
                const double mi = cfg_.beta1 * double(s.m[i]) + (1.0 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * double(s.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
                s.m[i] = T(mi);
                s.v[i] = T(vi);
                if (cfg_.lr != 0.0) {
                    const double upd =
                        cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
                    x[i] = T(double(x[i]) - upd);
                }
            }
        }
        return norm;
    }

    // Moments and the step counter go into the archive under
    // "<prefix>/t", "<prefix>/m/<label>/<param>", "<prefix>/v/...".
    void save_state(Archive& a, const std::string& prefix) const {
        a.put_scalar(prefix + "/t", double(t_));
        for (const Slot& s : slots_) {
            a.put(prefix + "/m/" + s.name, s.param().shape(), std::vector<float>(s.m.begin(), s.m.end()));
            a.put(prefix + "/v/" + s.name, s.param().shape(), std::vector<float>(s.v.begin(), s.v.end()));
        }
    }

    // Restores state saved by save_state for an identically-structured
    // optimizer. Missing or mis-shaped entries throw ShapeError naming the
    // tensor; with allow_missing, slots absent from the archive keep their
    // zero moments instead (used when an optimizer gains parameter sets the
    // saved run did not have).
    void load_state(const Archive& a, const std::string& prefix, bool allow_missing = false) {
        const double t = a.scalar(prefix + "/t");
        require_t<IntegrityError>(t >= 0.0 && t == std::floor(t),
                                  "optimizer step counter is not a whole number");
        t_ = int64_t(t);
        for (Slot& s : slots_) {
            for (int which = 0; which < 2; ++which) {
                const std::string key =
                    prefix + (which == 0 ? "/m/" : "/v/") + s.name;
                if (!a.has(key) && allow_missing) continue;
                require_t<ShapeError>(a.has(key), "archive lacks tensor '" + key + "'");
                const TensorRecord& r = a.at(key);
                require_t<ShapeError>(r.shape == s.param().shape(),
                                      "archive tensor '" + key + "' has shape " +
                                          shape_str(r.shape) + ", optimizer expects " +
                                          shape_str(s.param().shape()));
                std::vector<T>& dst = which == 0 ? s.m : s.v;
                dst.assign(r.data.begin(), r.data.end());
            }
        }
    }

  private:
    struct Slot {
        ParameterSet<T>* ps;
        size_t index;
        std::string name;
        std::vector<T> m, v;

        bool frozen() const { return ps->is_frozen(index); }
        Tensor<T>& param() { return (*ps)[index]; }
        const Tensor<T>& param() const { return (*ps)[index]; }
    };

    std::vector<std::pair<std::string, ParameterSet<T>*>> sets_;
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

}  // namespace repose
