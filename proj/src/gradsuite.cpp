#include "mrvi/gradsuite.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "mrvi/datasynth.hpp"
#include "mrvi/gradcheck.hpp"
#include "mrvi/losses.hpp"
#include "mrvi/model.hpp"

namespace mrvi {

namespace {

struct Trial {
  Tensor x;
  ScalarFn f;
};

using Maker = std::function<Trial(RngStream&)>;

struct Case {
  std::string name;
  Maker make;
};

Tensor randn(const Shape& shape, RngStream& s, double scale = 1.0) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * s.normal();
  return t;
}

Tensor randu(const Shape& shape, RngStream& s, double lo, double hi) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = s.uniform(lo, hi);
  return t;
}

// Magnitudes in [lo, hi] with random signs, keeping values away from kinks at 0.
Tensor rand_away(const Shape& shape, RngStream& s, double lo, double hi) {
  Tensor t = randu(shape, s, lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i)
    if (s.uniform() < 0.5) t[i] = -t[i];
  return t;
}

// Random linear functional of y, so every output coordinate matters.
Var contract(Var y, const Tensor& r) { return sum(mul(y, y.graph->constant(r.reshaped(y.shape())))); }

// Case whose op maps x to a tensor of shape `out`.
Case unary_case(std::string name, std::function<Tensor(RngStream&)> input, Shape out,
                std::function<Var(Graph&, Var)> op) {
  return {std::move(name), [input, out, op](RngStream& s) {
            Tensor x = input(s);
            Tensor r = randn(out, s);
            return Trial{x, [op, r](Graph& g, Var v) { return contract(op(g, v), r); }};
          }};
}

Case scalar_case(std::string name, std::function<Tensor(RngStream&)> input,
                 std::function<ScalarFn(RngStream&)> build) {
  return {std::move(name), [input, build](RngStream& s) {
            Tensor x = input(s);
            return Trial{x, build(s)};
          }};
}

std::vector<Case> make_cases() {
  std::vector<Case> c;
  auto normal_in = [](Shape shape) { return [shape](RngStream& s) { return randn(shape, s); }; };
  auto positive_in = [](Shape shape, double lo, double hi) {
    return [shape, lo, hi](RngStream& s) { return randu(shape, s, lo, hi); };
  };

  // Affine and convolution, one entry per differentiable argument.
  c.push_back({"linear.x", [](RngStream& s) {
                 Tensor w = randn({3, 4}, s), b = randn({4}, s), r = randn({2, 4}, s);
                 return Trial{randn({2, 3}, s), [=](Graph& g, Var x) {
                                return contract(linear(x, g.constant(w), g.constant(b)), r);
                              }};
               }});
  c.push_back({"linear.weight", [](RngStream& s) {
                 Tensor x = randn({2, 3}, s), b = randn({4}, s), r = randn({2, 4}, s);
                 return Trial{randn({3, 4}, s), [=](Graph& g, Var w) {
                                return contract(linear(g.constant(x), w, g.constant(b)), r);
                              }};
               }});
  c.push_back({"linear.bias", [](RngStream& s) {
                 Tensor x = randn({2, 3}, s), w = randn({3, 4}, s), r = randn({2, 4}, s);
                 return Trial{randn({4}, s), [=](Graph& g, Var b) {
                                return contract(linear(g.constant(x), g.constant(w), b), r);
                              }};
               }});
  for (int stride : {1, 2}) {
    const std::string tag = stride == 1 ? "conv2d" : "conv2d_stride2";
    const std::size_t o = stride == 1 ? 5 : 3;
    c.push_back({tag + ".x", [stride, o](RngStream& s) {
                   Tensor k = randn({3, 2, 3, 3}, s), b = randn({3}, s), r = randn({1, 3, o, o}, s);
                   return Trial{randn({1, 2, 5, 5}, s), [=](Graph& g, Var x) {
                                  return contract(conv2d(x, g.constant(k), g.constant(b), stride), r);
                                }};
                 }});
    c.push_back({tag + ".kernel", [stride, o](RngStream& s) {
                   Tensor x = randn({1, 2, 5, 5}, s), b = randn({3}, s), r = randn({1, 3, o, o}, s);
                   return Trial{randn({3, 2, 3, 3}, s), [=](Graph& g, Var k) {
                                  return contract(conv2d(g.constant(x), k, g.constant(b), stride), r);
                                }};
                 }});
    c.push_back({tag + ".bias", [stride, o](RngStream& s) {
                   Tensor x = randn({1, 2, 5, 5}, s), k = randn({3, 2, 3, 3}, s), r = randn({1, 3, o, o}, s);
                   return Trial{randn({3}, s), [=](Graph& g, Var b) {
                                  return contract(conv2d(g.constant(x), g.constant(k), b, stride), r);
                                }};
                 }});
  }
  c.push_back(unary_case("upsample2", normal_in({1, 2, 3, 3}), {1, 2, 6, 6}, [](Graph&, Var x) { return upsample2(x); }));

  // Elementwise.
  for (const char* name : {"add", "sub", "mul"}) {
    const std::string op = name;
    c.push_back({op, [op](RngStream& s) {
                   Tensor other = randn({2, 3}, s), r = randn({2, 3}, s);
                   return Trial{randn({2, 3}, s), [=](Graph& g, Var x) {
                                  Var o = g.constant(other);
                                  Var y = op == "add" ? add(x, o) : op == "sub" ? sub(o, x) : mul(x, o);
                                  return contract(y, r);
                                }};
                 }});
  }
  c.push_back(unary_case("scale", normal_in({2, 3}), {2, 3}, [](Graph&, Var x) { return scale(x, -1.7); }));
  c.push_back(unary_case("add_scalar", normal_in({2, 3}), {2, 3}, [](Graph&, Var x) { return add_scalar(x, 0.3); }));
  c.push_back(unary_case("square", normal_in({2, 3}), {2, 3}, [](Graph&, Var x) { return square(x); }));
  c.push_back(unary_case("reciprocal", [](RngStream& s) { return rand_away({2, 3}, s, 0.5, 2.0); }, {2, 3},
                         [](Graph&, Var x) { return reciprocal(x); }));
  c.push_back(unary_case("sqrt", positive_in({2, 3}, 0.5, 2.0), {2, 3}, [](Graph&, Var x) { return sqrt(x); }));
  c.push_back(unary_case("relu", [](RngStream& s) { return rand_away({2, 3}, s, 0.1, 1.0); }, {2, 3},
                         [](Graph&, Var x) { return relu(x); }));
  c.push_back(unary_case("sigmoid", normal_in({2, 3}), {2, 3}, [](Graph&, Var x) { return sigmoid(x); }));
  c.push_back(unary_case("exp", normal_in({2, 3}), {2, 3}, [](Graph&, Var x) { return exp(x); }));
  c.push_back(unary_case("log", positive_in({2, 3}, 0.5, 2.0), {2, 3}, [](Graph&, Var x) { return log(x); }));
  c.push_back(unary_case("softplus", normal_in({2, 3}), {2, 3}, [](Graph&, Var x) { return softplus(x); }));
  c.push_back(unary_case(
      "clamp",
      [](RngStream& s) {
        // Half inside (-1, 1), half outside, none near the bounds.
        Tensor t = rand_away({2, 3}, s, 0.1, 0.9);
        for (std::size_t i = 0; i < t.size(); i += 2) t[i] *= 2.2;
        return t;
      },
      {2, 3}, [](Graph&, Var x) { return clamp(x, -1.0, 1.0); }));
  c.push_back(unary_case("lgamma", positive_in({2, 3}, 0.3, 5.0), {2, 3}, [](Graph&, Var x) { return lgamma(x); }));
  c.push_back(unary_case("digamma", positive_in({2, 3}, 0.3, 5.0), {2, 3}, [](Graph&, Var x) { return digamma(x); }));

  // Reductions and structure.
  c.push_back(unary_case("sum", normal_in({2, 3}), {}, [](Graph&, Var x) { return sum(x); }));
  c.push_back(unary_case("mean", normal_in({2, 3}), {}, [](Graph&, Var x) { return mean(x); }));
  c.push_back(unary_case("expand", normal_in({1}), {2, 3}, [](Graph&, Var x) { return expand(x, {2, 3}); }));
  c.push_back(unary_case("reshape", normal_in({2, 3}), {3, 2}, [](Graph&, Var x) { return reshape(x, {3, 2}); }));
  c.push_back(unary_case("softmax", normal_in({5}), {5}, [](Graph&, Var x) { return softmax(x, 0); }));
  c.push_back(unary_case("softmax.channels", normal_in({1, 3, 2, 2}), {1, 3, 2, 2},
                         [](Graph&, Var x) { return softmax(x, 1); }));
  c.push_back({"concat_channels", [](RngStream& s) {
                 Tensor other = randn({1, 1, 2, 2}, s), r1 = randn({1, 3, 2, 2}, s), r2 = randn({1, 3, 2, 2}, s);
                 return Trial{randn({1, 2, 2, 2}, s), [=](Graph& g, Var x) {
                                Var o = g.constant(other);
                                return add(contract(concat_channels(x, o), r1), contract(concat_channels(o, x), r2));
                              }};
               }});
  c.push_back(unary_case("slice_channels", normal_in({1, 4, 2, 2}), {1, 2, 2, 2},
                         [](Graph&, Var x) { return slice_channels(x, 1, 2); }));
  c.push_back(unary_case("broadcast_channels", normal_in({3}), {1, 3, 2, 2},
                         [](Graph&, Var x) { return broadcast_channels(x, 2, 2); }));
  c.push_back(unary_case("take_row", normal_in({3, 4}), {4}, [](Graph&, Var x) { return take_row(x, 1); }));
  c.push_back(unary_case("pick", normal_in({5}), {}, [](Graph&, Var x) { return pick(x, 3); }));

  // Fused losses.
  c.push_back(scalar_case("cross_entropy_logits", normal_in({5}), [](RngStream& s) -> ScalarFn {
    const std::size_t target = s.below(5);
    return [target](Graph&, Var x) { return cross_entropy_logits(x, target); };
  }));
  c.push_back(scalar_case("pixel_cross_entropy", normal_in({1, 2, 3, 3}), [](RngStream& s) -> ScalarFn {
    std::vector<std::uint8_t> labels(9);
    for (auto& l : labels) l = std::uint8_t(s.below(2));
    return [labels](Graph&, Var x) { return pixel_cross_entropy(x, labels); };
  }));
  c.push_back(scalar_case("mse", normal_in({2, 3}), [](RngStream& s) -> ScalarFn {
    Tensor target = randn({2, 3}, s);
    return [target](Graph&, Var x) { return mse(x, target); };
  }));

  // Loss-module closed forms and the two reparameterized samplers.
  c.push_back(scalar_case("kl_gaussian_std.mu", normal_in({1, 2, 2, 2}), [](RngStream& s) -> ScalarFn {
    Tensor ls = randn({1, 2, 2, 2}, s, 0.5);
    return [ls](Graph& g, Var mu) { return kl_gaussian_std(mu, g.constant(ls)); };
  }));
  c.push_back(scalar_case("kl_gaussian_std.log_sigma", normal_in({1, 2, 2, 2}), [](RngStream& s) -> ScalarFn {
    Tensor mu = randn({1, 2, 2, 2}, s);
    return [mu](Graph& g, Var ls) { return kl_gaussian_std(g.constant(mu), ls); };
  }));
  c.push_back(scalar_case("kl_dirichlet", positive_in({4}, 0.3, 6.0), [](RngStream& s) -> ScalarFn {
    Tensor beta = randu({4}, s, 0.5, 3.0);
    return [beta](Graph&, Var alpha) { return kl_dirichlet(alpha, beta); };
  }));
  c.push_back(scalar_case("recon_loss", normal_in({1, 1, 4, 4}), [](RngStream& s) -> ScalarFn {
    Tensor image = randu({1, 4, 4}, s, 0.0, 1.0);
    return [image](Graph&, Var x) { return recon_loss(x, image); };
  }));
  c.push_back(scalar_case("class_loss", normal_in({4}), [](RngStream& s) -> ScalarFn {
    const std::size_t r = s.below(4);
    return [r](Graph&, Var x) { return class_loss_logits(x, r); };
  }));
  c.push_back(scalar_case("seg_loss", normal_in({1, 2, 4, 4}), [](RngStream& s) -> ScalarFn {
    Mask m(4, 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::uint8_t(s.below(2));
    return [m](Graph&, Var x) { return seg_loss_logits(x, m); };
  }));
  c.push_back(scalar_case("sample_gaussian", normal_in({1, 2, 2, 2}), [](RngStream& s) -> ScalarFn {
    Tensor mu = randn({1, 2, 2, 2}, s), r = randn({1, 2, 2, 2}, s);
    const std::uint64_t seed = s.next_u64();
    return [=](Graph& g, Var ls) {
      RngStream eps(seed);
      return contract(sample_gaussian(GaussianVar{g.constant(mu), ls}, eps), r);
    };
  }));
  c.push_back(scalar_case("sample_dirichlet_laplace", positive_in({4}, 0.3, 6.0), [](RngStream& s) -> ScalarFn {
    Tensor r = randn({4}, s);
    const std::uint64_t seed = s.next_u64();
    return [=](Graph&, Var alpha) {
      RngStream eps(seed);
      return contract(sample_dirichlet_laplace(alpha, eps), r);
    };
  }));
  return c;
}

constexpr const char* kElboSlice = "elbo_loss.slice";

// Wraps the scalar so its adjoint is scaled by 1.5 on the way back.
Var corrupt(Var y) {
  return y.graph->emit(y.value(), y.requires_grad(), [y](Graph& g, Var self) {
    g.adjoint_for_update(y).data() += 1.5 * g.adjoint(self).data();
  });
}

double elbo_slice_trial(RngStream& s, bool corrupted) {
  ModelConfig cfg;
  ModelParams p = init_model(cfg, s.next_u64());
  Eigen::VectorXd theta = p.flatten();
  // Move embeddings and biases off their zero initialization.
  theta += 0.05 * randn({std::size_t(theta.size())}, s).data();
  p.unflatten(theta);

  std::vector<RaterProfile> raters;
  const int dilation[] = {-2, -1, 1, 2};
  for (int r = 0; r < 4; ++r) raters.push_back(RaterProfile::from_dilation(r, dilation[r], 0.0));
  const Sample sample = generate_sample(SceneSpec{}, raters, s.next_u64(), 0);
  const PriorSpec prior = PriorSpec::uniform(cfg.tau_dim);
  const std::uint64_t stream_seed = s.next_u64();

  std::vector<std::size_t> all(std::size_t(theta.size()));
  std::iota(all.begin(), all.end(), std::size_t{0});
  s.shuffle(all);
  std::vector<std::size_t> coords(all.begin(), all.begin() + 50);

  Eigen::VectorXd grad;
  RngStream st(stream_seed);
  loss_and_grad(p, sample, prior, st, {}, grad);
  if (corrupted) grad *= 2.5;
  auto value = [&](const Eigen::VectorXd& probe) {
    ModelParams q = p;
    q.unflatten(probe);
    RngStream st2(stream_seed);
    return elbo_loss(q, sample, prior, st2).total;
  };
  return grad_check_values(value, theta, grad, 1e-5, coords);
}

}  // namespace

std::vector<std::string> grad_suite_ops() {
  std::vector<std::string> names;
  for (const auto& c : make_cases()) names.push_back(c.name);
  names.push_back(kElboSlice);
  return names;
}

std::vector<GradSuiteEntry> run_grad_suite(const GradSuiteOptions& opts) {
  std::vector<GradSuiteEntry> out;
  const auto cases = make_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    GradSuiteEntry e{c.name, 0.0, false};
    const bool corrupted = c.name == opts.corrupt_op;
    for (std::size_t t = 0; t < opts.trials; ++t) {
      RngStream s(hash64({opts.seed, ci, t}));
      Trial trial = c.make(s);
      ScalarFn f = trial.f;
      if (corrupted) f = [inner = trial.f](Graph& g, Var x) { return corrupt(inner(g, x)); };
      e.worst_error = std::max(e.worst_error, grad_check(f, trial.x));
    }
    e.passed = e.worst_error < opts.tolerance;
    out.push_back(e);
  }
  GradSuiteEntry e{kElboSlice, 0.0, false};
  for (std::size_t t = 0; t < opts.trials; ++t) {
    RngStream s(hash64({opts.seed, cases.size(), t}));
    e.worst_error = std::max(e.worst_error, elbo_slice_trial(s, opts.corrupt_op == kElboSlice));
  }
  e.passed = e.worst_error < opts.tolerance;
  out.push_back(e);
  return out;
}

}  // namespace mrvi
