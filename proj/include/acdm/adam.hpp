#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "acdm/tensor.hpp"

namespace acdm {

/// Raised when a gradient goes non-finite; carries the offending tensor name
/// so the run can abort with a useful report.
struct NanGradientError : std::runtime_error {
    explicit NanGradientError(const std::string& tensor)
        : std::runtime_error("non-finite gradient in tensor '" + tensor + "'"), tensor_name(tensor) {}
    std::string tensor_name;
};

/// Adam with bias correction. Moment buffers are allocated per trainable
/// tensor at construction and shape-match them for the optimizer's lifetime.
template <class Real>
class AdamState {
public:
    AdamState(std::vector<TensorPtr<Real>> params, Real lr = Real(1e-4), Real beta1 = Real(0.9),
              Real beta2 = Real(0.999), Real eps = Real(1e-8))
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i]->data.size(), Real(0));
            v_[i].assign(params_[i]->data.size(), Real(0));
        }
    }

    int64_t step_count() const { return step_count_; }
    Real lr() const { return lr_; }
    void set_lr(Real lr) { lr_ = lr; }
    const std::vector<TensorPtr<Real>>& params() const { return params_; }

    /// One bias-corrected update from the accumulated grads; grads are
    /// cleared afterwards. Missing (never-touched) grads count as zero.
    void step() {
        ++step_count_;
        const Real bc1 = Real(1) - std::pow(beta1_, static_cast<Real>(step_count_));
        const Real bc2 = Real(1) - std::pow(beta2_, static_cast<Real>(step_count_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            const bool has_grad = !p.grad.empty();
            if (has_grad) {
                for (Real g : p.grad)
                    if (!std::isfinite(g)) throw NanGradientError(p.name.empty() ? "<unnamed>" : p.name);
            }
            Real* m = m_[i].data();
            Real* v = v_[i].data();
            for (size_t j = 0; j < p.data.size(); ++j) {
                Real g = has_grad ? p.grad[j] : Real(0);
                m[j] = beta1_ * m[j] + (Real(1) - beta1_) * g;
                v[j] = beta2_ * v[j] + (Real(1) - beta2_) * g * g;
                Real mhat = m[j] / bc1;
                Real vhat = v[j] / bc2;
                p.data[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
            if (has_grad) std::fill(p.grad.begin(), p.grad.end(), Real(0));
        }
    }

private:
    std::vector<TensorPtr<Real>> params_;
    std::vector<std::vector<Real>> m_, v_;
    Real lr_, beta1_, beta2_, eps_;
    int64_t step_count_ = 0;
};

}  // namespace acdm
