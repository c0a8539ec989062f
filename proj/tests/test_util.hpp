#pragma once

#include <functional>
#include <string>

#include "casvit/backbone.hpp"

namespace testutil {

using namespace casvit;
using T4 = Tensor<double>;

inline T4 randn(Shape shape, Rng& rng, double scale = 1.0) {
  T4 t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

// O(1) random parameters; BN statistics away from their identity init so eval-mode
// normalization is exercised.
template <typename V>
void randomize(Rng& rng, const V& visit_fn) {
  visit_fn([&](const std::string& name, T4& t, ParamRole) {
    const bool positive = name.ends_with(".running_var") || name.ends_with(".gamma");
    for (auto& v : t.data()) v = positive ? rng.uniform(0.5, 1.5) : 0.5 * rng.normal();
  });
}

inline T4 run_eval(const std::function<Var<double>(Context<double>&, Var<double>)>& f, const T4& x,
                   PaddingMode padding = PaddingMode::zeros) {
  Tape<double> tape;
  Context<double> ctx(tape, Mode::eval, padding, false);
  return f(ctx, tape.constant(x)).value();
}

inline double max_diff(const T4& a, const T4& b) { return max_abs_diff(a, b); }

}  // namespace testutil
