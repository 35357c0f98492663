#include "svf/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <fmt/core.h>

namespace svf {

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be at least 1");
    if (step > total_steps) throw std::out_of_range(fmt::format("cosine_lr: step {} beyond {}", step, total_steps));
    if (step == total_steps) return 0.0;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

Sgd::Sgd(std::vector<ad::Param*> params, double momentum) : momentum_(momentum) {
    for (ad::Param* p : params)
        if (p->trainable) slots_.push_back({p, Tensor4(p->value.dims())});
}

void Sgd::step(double lr) {
    for (Slot& s : slots_) {
        Tensor4& p = s.param->value;
        const Tensor4* g = s.param->grad ? &*s.param->grad : nullptr;
        if (g && g->dims() != p.dims())
            throw ShapeError(fmt::format("sgd: grad {} vs param {} for '{}'", dims_string(g->dims()), dims_string(p.dims()),
                                         s.param->name));
        for (std::size_t i = 0; i < p.size(); ++i) {
            s.velocity[i] = momentum_ * s.velocity[i] + (g ? (*g)[i] : 0.0);
            p[i] -= lr * s.velocity[i];
        }
    }
}

}  // namespace svf
