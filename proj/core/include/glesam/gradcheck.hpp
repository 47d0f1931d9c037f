#pragma once
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "glesam/autodiff.hpp"
#include "glesam/rng.hpp"

namespace glesam {

// Central finite-difference verification of reverse-mode gradients.
// `loss_fn` must rebuild the (scalar) loss graph from the current parameter
// values on every call. Error metric per checked entry:
//     |analytic - numeric| / max(1, |numeric|)
struct GradCheckReport {
    int checked = 0;
    double max_err = 0.0;
    std::string worst;  // "name[index]" of the worst entry
};

inline GradCheckReport grad_check(const std::function<ad::Value()>& loss_fn,
                                  const std::vector<std::pair<std::string, ad::Value>>& params,
                                  int entries_per_param, Rng& rng, double eps = 1e-5) {
    GradCheckReport rep;
    ad::Value loss = loss_fn();
    ad::backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& [name, p] : params)
        analytic.push_back(p->has_grad() ? p->grad : Tensor::zeros(p->val.shape));

    for (size_t pi = 0; pi < params.size(); ++pi) {
        const auto& [name, p] = params[pi];
        int64_t n = p->val.numel();
        for (int k = 0; k < entries_per_param; ++k) {
            int64_t idx = n == 1 ? 0 : int64_t(rng.next_u64() % uint64_t(n));
            double orig = p->val.data[size_t(idx)];
            p->val.data[size_t(idx)] = orig + eps;
            double lp = loss_fn()->val.data[0];
            p->val.data[size_t(idx)] = orig - eps;
            double lm = loss_fn()->val.data[0];
            p->val.data[size_t(idx)] = orig;
            double numeric = (lp - lm) / (2.0 * eps);
            double a = analytic[pi].data[size_t(idx)];
            double err = std::fabs(a - numeric) / std::max(1.0, std::fabs(numeric));
            ++rep.checked;
            if (err > rep.max_err) {
                rep.max_err = err;
                rep.worst = name + "[" + std::to_string(idx) + "]";
            }
        }
    }
    return rep;
}

}  // namespace glesam
