#pragma once

#include <cstddef>
#include <vector>

#include "svf/autodiff.hpp"

namespace svf {

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)); throws unless 0 <= step <= total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

/// SGD with heavy-ball momentum: v <- m v + g; p <- p - lr v. One velocity per param,
/// created at construction. A param without a gradient is stepped with g = 0.
class Sgd {
public:
    Sgd(std::vector<ad::Param*> params, double momentum);

    void step(double lr);
    std::size_t size() const { return slots_.size(); }
    const Tensor4& velocity(std::size_t i) const { return slots_.at(i).velocity; }

private:
    struct Slot {
        ad::Param* param;
        Tensor4 velocity;
    };
    std::vector<Slot> slots_;
    double momentum_;
};

}  // namespace svf
