#include "odgen/graph.hpp"

#include <cmath>

namespace odgen::nn {

void AdamW::step(ParamStore& ps, double grad_scale) {
  ++t;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < ps.size(); ++i) {
    Param& p = ps[i];
    if (!p.trainable) continue;
    if (p.grad_accum.empty()) continue;  // parameter unused this step
    if (p.adam_m.empty()) {
      p.adam_m = Tensor::zeros(p.value.dims());
      p.adam_v = Tensor::zeros(p.value.dims());
    }
    auto g = p.grad_accum.flat();
    auto m = p.adam_m.flat();
    auto v = p.adam_v.flat();
    auto w = p.value.flat();
    // decoupled decay first, then the Adam update from the (scaled) gradient
    if (p.apply_decay && weight_decay != 0.0) w -= lr * weight_decay * w;
    m = beta1 * m + (1.0 - beta1) * grad_scale * g;
    v = beta2 * v + (1.0 - beta2) * (grad_scale * g).square();
    w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
    p.zero_grad();
  }
}

}  // namespace odgen::nn
