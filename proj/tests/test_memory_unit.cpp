#include <cmath>

#include "doctest.h"
#include "memcomputer/memory_unit.hpp"
#include "memory_invariants.hpp"
#include "test_util.hpp"

using namespace memcomputer;
using testutil::random_simplex;
using testutil::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

MuConfig tiny(MemoryVariant v, std::size_t n = 5, std::size_t w = 3, std::size_t r = 2) {
  MuConfig c;
  c.locations = n;
  c.width = w;
  c.read_heads = r;
  c.variant = v;
  return c;
}

// Raw interface vector drawn wide enough to saturate gates now and then.
Tensor random_xi(const MuConfig& c, std::size_t b, Rng& rng, double scale = 4.0) {
  return random_tensor({b, interface_size(c)}, rng, -scale, scale, false);
}

}  // namespace

TEST_SUITE("memory_unit") {

TEST_CASE("interface sizes") {
  MuConfig c = tiny(MemoryVariant::cbmu, 192, 64, 4);
  CHECK(interface_size(c) == 459);
  c.variant = MemoryVariant::dnc;
  CHECK(interface_size(c) == 471);
  CHECK(interface_size(tiny(MemoryVariant::cbmu, 1, 1, 1)) == 9);
}

TEST_CASE("zero interface vector maps to neutral signals") {
  const MuConfig c = tiny(MemoryVariant::dnc);
  const InterfaceSignals s = split_interface(Tensor({1, interface_size(c)}), c);
  for (double v : s.read_strengths.data()) CHECK(v == doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-12));
  for (double v : s.erase.data()) CHECK(v == 0.5);
  CHECK(s.allocation_gate[0] == 0.5);
  CHECK(s.write_gate[0] == 0.5);
  for (double v : s.read_modes.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(split_interface(Tensor({1, interface_size(c) - 1}), c), ShapeError);
}

TEST_CASE("interface slices partition the vector in order") {
  const MuConfig c = tiny(MemoryVariant::dnc, 4, 3, 2);
  Rng rng(1);
  const Tensor xi = random_xi(c, 2, rng);
  const InterfaceSignals s = split_interface(xi, c);
  const std::size_t len = interface_size(c);
  // Invert each nonlinearity and compare against the matching entry of ξ.
  const auto logit = [](double p) { return std::log(p / (1.0 - p)); };
  const auto inv_oneplus = [](double y) { return std::log(std::expm1(y - 1.0)); };
  for (std::size_t b = 0; b < 2; ++b) {
    const double* x = xi.data().data() + b * len;
    std::size_t o = 0;
    for (std::size_t k = 0; k < 6; ++k) CHECK(s.read_keys[b * 6 + k] == x[o + k]);
    o += 6;
    for (std::size_t k = 0; k < 2; ++k) CHECK(inv_oneplus(s.read_strengths[b * 2 + k]) == doctest::Approx(x[o + k]));
    o += 2;
    for (std::size_t k = 0; k < 3; ++k) CHECK(s.write_key[b * 3 + k] == x[o + k]);
    o += 3;
    CHECK(inv_oneplus(s.write_strength[b]) == doctest::Approx(x[o]));
    o += 1;
    for (std::size_t k = 0; k < 3; ++k) CHECK(logit(s.erase[b * 3 + k]) == doctest::Approx(x[o + k]));
    o += 3;
    for (std::size_t k = 0; k < 3; ++k) CHECK(s.write_vector[b * 3 + k] == x[o + k]);
    o += 3;
    for (std::size_t k = 0; k < 2; ++k) CHECK(logit(s.free_gates[b * 2 + k]) == doctest::Approx(x[o + k]));
    o += 2;
    CHECK(logit(s.allocation_gate[b]) == doctest::Approx(x[o]));
    CHECK(logit(s.write_gate[b]) == doctest::Approx(x[o + 1]));
    o += 2;
    for (std::size_t h = 0; h < 2; ++h) {
      // Softmax logits are recovered up to a shift.
      const double* m = s.read_modes.data().data() + (b * 2 + h) * 3;
      CHECK(std::log(m[1] / m[0]) == doctest::Approx(x[o + h * 3 + 1] - x[o + h * 3]));
      CHECK(std::log(m[2] / m[0]) == doctest::Approx(x[o + h * 3 + 2] - x[o + h * 3]));
      CHECK(std::abs(m[0] + m[1] + m[2] - 1.0) < 1e-12);
    }
    o += 6;
    CHECK(o == len);
  }
}

TEST_CASE("projection with zero input yields the norm bias") {
  const MuConfig c = tiny(MemoryVariant::cbmu);
  Rng rng(2);
  MuParams p = init_mu_params(c, 4, rng);
  for (double& v : p.ln_bias.mutable_data()) v = rng.uniform(-1, 1);
  const Tensor xi = project_interface(Tensor({2, 4}), p, c);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < interface_size(c); ++k) CHECK(xi[b * interface_size(c) + k] == p.ln_bias[k]);
  CHECK(mu_parameter_count(c, 4) == 4 * interface_size(c) + 2 * interface_size(c));
  CHECK_THROWS_AS(project_interface(Tensor({2, 3}), p, c), ShapeError);

  const Tensor h = random_tensor({2, 4}, rng, -1, 1, false);
  std::vector<Tensor> params{p.projection, p.ln_gain, p.ln_bias};
  const Tensor wts = random_tensor({2, interface_size(c)}, rng, -1, 1, false);
  CHECK(finite_diff_check([&] { return sum(mul(project_interface(h, p, c), wts)); }, params).max_rel_error < 1e-6);
}

TEST_CASE("content weighting") {
  const Tensor m({1, 2, 2}, {1, 0, 0, 1});
  const Tensor c = content_weighting(m, Tensor({1, 1, 2}, {1, 0}), Tensor({1, 1}, std::vector<double>{1.0}));
  CHECK(c[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-7));
  CHECK(c[1] == doctest::Approx(1.0 / (std::exp(1.0) + 1.0)).epsilon(1e-7));
  const Tensor same({1, 3, 2}, {0.3, -0.2, 0.3, -0.2, 0.3, -0.2});
  const Tensor u = content_weighting(same, Tensor({1, 1, 2}, {5, 1}), Tensor({1, 1}, std::vector<double>{7.0}));
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  const Tensor sharp = content_weighting(m, Tensor({1, 1, 2}, {0, 1}), Tensor({1, 1}, std::vector<double>{200.0}));
  CHECK(sharp[1] > 1.0 - 1e-12);
}

TEST_CASE("retention and usage") {
  const auto [psi, u] = retention_usage(Tensor({1, 1}, std::vector<double>{0.5}), Tensor({1, 1, 2}, {1, 0}),
                                        Tensor({1, 2}, {0.2, 0}), Tensor({1, 2}, {0, 1}));
  CHECK(psi[0] == doctest::Approx(0.5));
  CHECK(psi[1] == 1.0);
  CHECK(u[0] == doctest::Approx(0.1));
  CHECK(u[1] == 1.0);

  const auto [psi_full, u_full] = retention_usage(Tensor({1, 1}, std::vector<double>{1.0}), Tensor({1, 1, 3}, {0, 1, 0}),
                                                  Tensor({1, 3}, {0.5, 0.7, 0.2}), Tensor({1, 3}, {0.1, 0.1, 0.1}));
  CHECK(psi_full[1] == 0.0);
  CHECK(u_full[1] == 0.0);

  Rng rng(3);
  const Tensor up = random_tensor({1, 4}, rng, 0, 1, false), wp = random_simplex({1, 4}, rng);
  const auto [psi0, u0] = retention_usage(Tensor({1, 2}), random_simplex({1, 2, 4}, rng), up, wp);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(psi0[j] == 1.0);
    CHECK(u0[j] == doctest::Approx(up[j] + wp[j] - up[j] * wp[j]).epsilon(1e-14));
  }
}

TEST_CASE("allocation weighting") {
  const Tensor a = allocation_weighting(Tensor({1, 2}, {0.5, 0.1}));
  CHECK(a[0] == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(a[1] == doctest::Approx(0.9).epsilon(1e-12));
  const Tensor b = allocation_weighting(Tensor({1, 3}, {0.4, 0.1, 0.7}));
  CHECK(b[0] == doctest::Approx(0.06).epsilon(1e-12));
  CHECK(b[1] == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(b[2] == doctest::Approx(0.3 * 0.04).epsilon(1e-12));
  CHECK(values(allocation_weighting(Tensor({1, 3}))) == std::vector<double>{1, 0, 0});
  CHECK(values(allocation_weighting(Tensor::filled({1, 3}, 1.0))) == std::vector<double>{0, 0, 0});

  // Gradient away from ties, with the sort order held fixed.
  Rng rng(4);
  const Tensor u = Tensor({2, 4}, {0.11, 0.52, 0.33, 0.84, 0.9, 0.05, 0.6, 0.27}, true);
  const Tensor wts = random_tensor({2, 4}, rng, -1, 1, false);
  CHECK(finite_diff_check([&] { return sum(mul(allocation_weighting(u), wts)); }, {u}).max_rel_error < 1e-7);
}

TEST_CASE("write weighting and memory update") {
  const Tensor ww = write_weighting(Tensor({1, 1}, std::vector<double>{0.5}), Tensor({1, 1}, std::vector<double>{0.5}), Tensor({1, 2}, {1, 0}),
                                    Tensor({1, 2}, {0, 1}));
  CHECK(values(ww) == std::vector<double>{0.25, 0.25});
  CHECK(values(write_weighting(Tensor({1, 1}), Tensor({1, 1}, std::vector<double>{0.3}), Tensor({1, 2}, {1, 0}),
                               Tensor({1, 2}, {0, 1}))) == std::vector<double>{0, 0});

  const Tensor m1 = memory_update(Tensor({1, 1, 1}, std::vector<double>{2}), Tensor({1, 1}, std::vector<double>{0.5}), Tensor({1, 1}, std::vector<double>{1}),
                                  Tensor({1, 1}, std::vector<double>{4}));
  CHECK(m1[0] == 3.0);

  Rng rng(5);
  const Tensor m = random_tensor({1, 3, 2}, rng, -1, 1, false);
  const Tensor e = random_tensor({1, 2}, rng, 0, 1, false), v = random_tensor({1, 2}, rng, -1, 1, false);
  CHECK(values(memory_update(m, Tensor({1, 3}), e, v)) == values(m));
  const Tensor over = memory_update(m, Tensor({1, 3}, {0, 1, 0}), Tensor::filled({1, 2}, 1.0), v);
  CHECK(over[2] == v[0]);
  CHECK(over[3] == v[1]);
  CHECK(over[0] == m[0]);
  CHECK(over[5] == m[5]);
}

TEST_CASE("a full write lands on the single free location") {
  const MuConfig c = tiny(MemoryVariant::dnc, 4, 3, 1);
  Rng rng(15);
  MemoryState prev = initial_memory_state(c, 1);
  prev.memory = random_tensor({1, 4, 3}, rng, -1, 1, false);
  prev.usage = Tensor({1, 4}, {0.7, 0.9, 0.0, 0.4});
  InterfaceSignals s = split_interface(random_xi(c, 1, rng), c);
  s.write_gate = Tensor({1, 1}, std::vector<double>{1.0});
  s.allocation_gate = Tensor({1, 1}, std::vector<double>{1.0});
  s.erase = Tensor::filled({1, 3}, 1.0);
  s.free_gates = Tensor({1, 1});
  const MuStepResult r = memory_step(s, prev, c);
  CHECK(values(r.state.write_weighting) == std::vector<double>{0, 0, 1, 0});
  for (std::size_t k = 0; k < 3; ++k) CHECK(r.state.memory[2 * 3 + k] == s.write_vector[k]);
  for (std::size_t k = 0; k < 3; ++k) CHECK(r.state.memory[k] == prev.memory[k]);
}

TEST_CASE("linkage update") {
  Tensor p({1, 3}, {0, 1, 0});
  const auto [l, pn] = linkage_update(Tensor({1, 3, 3}), p, Tensor({1, 3}, {1, 0, 0}));
  std::vector<double> expect(9, 0.0);
  expect[1] = 1.0;
  CHECK(values(l) == expect);
  CHECK(values(pn) == std::vector<double>{1, 0, 0});

  const auto [l0, p0] = linkage_update(Tensor({1, 3, 3}), Tensor({1, 3}), Tensor({1, 3}, {0.2, 0.3, 0.1}));
  CHECK(values(l0) == std::vector<double>(9, 0.0));
  CHECK(values(p0) == std::vector<double>{0.2, 0.3, 0.1});

  Rng rng(6);
  const Tensor lr = random_tensor({1, 3, 3}, rng, 0, 0.3, false), pr = random_simplex({1, 3}, rng);
  const auto [ls, ps] = linkage_update(lr, pr, Tensor({1, 3}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) CHECK(ls[i * 3 + j] == (i == j ? 0.0 : lr[i * 3 + j]));
  CHECK(values(ps) == values(pr));
}

TEST_CASE("temporal and content reads") {
  std::vector<double> link(9, 0.0);
  link[1] = 1.0;  // L[0,1]: location 0 was written right after location 1
  const Tensor l({1, 3, 3}, link);
  const Tensor content({1, 1, 3}, {0.2, 0.3, 0.5});
  const Tensor back = read_weightings_dnc(l, Tensor({1, 1, 3}, {1, 0, 0}), content, Tensor({1, 1, 3}, {1, 0, 0}));
  CHECK(values(back) == std::vector<double>{0, 1, 0});
  const Tensor fwd = read_weightings_dnc(l, Tensor({1, 1, 3}, {0, 1, 0}), content, Tensor({1, 1, 3}, {0, 0, 1}));
  CHECK(values(fwd) == std::vector<double>{1, 0, 0});
  const Tensor only = read_weightings_dnc(l, Tensor({1, 1, 3}, {0.4, 0.3, 0.3}), content,
                                          Tensor({1, 1, 3}, {0, 1, 0}));
  CHECK(values(only) == values(content));
  const Tensor none = read_weightings_dnc(Tensor({1, 3, 3}), Tensor({1, 1, 3}, {0.4, 0.3, 0.3}), content,
                                          Tensor({1, 1, 3}, {0.2, 0.5, 0.3}));
  for (std::size_t j = 0; j < 3; ++j) CHECK(none[j] == doctest::Approx(0.5 * content[j]).epsilon(1e-14));

  const Tensor m({1, 2, 2}, {1, 2, 3, 4});
  const auto [r, mu] = read_vectors(m, Tensor({1, 1, 2}, {0.5, 0.5}));
  CHECK(values(r) == std::vector<double>{2, 3});
  const auto [r2, mu2] = read_vectors(m, Tensor({1, 2, 2}, {0, 1, 0, 0}));
  CHECK(values(mu2) == std::vector<double>{3, 4, 0, 0});
  CHECK(mu2.shape() == Shape{1, 4});
}

TEST_CASE("memory state stays within its bounds under random control") {
  for (MemoryVariant v : {MemoryVariant::dnc, MemoryVariant::cbmu}) {
    const MuConfig c = tiny(v, 6, 4, 3);
    Rng rng(v == MemoryVariant::dnc ? 7 : 8);
    NoGradScope off;
    for (int seq = 0; seq < 40; ++seq) {
      MemoryState s = initial_memory_state(c, 3);
      const double scale = 1.0 + 7.0 * rng.uniform();
      for (int t = 0; t < 25; ++t) {
        s = memory_step(split_interface(random_xi(c, 3, rng, scale), c), s, c).state;
        const auto rep = testutil::check_memory_invariants(s, c);
        REQUIRE_MESSAGE(rep.ok, rep.first_failure);
      }
    }
  }
}

TEST_CASE("content-only unit equals the full unit with reads pinned to content") {
  const MuConfig dnc = tiny(MemoryVariant::dnc, 6, 4, 2), cb = tiny(MemoryVariant::cbmu, 6, 4, 2);
  Rng rng(9);
  NoGradScope off;
  MemoryState sd = initial_memory_state(dnc, 2), sc = initial_memory_state(cb, 2);
  std::vector<double> pin(2 * 2 * 3, 0.0);
  for (std::size_t k = 0; k < 4; ++k) pin[k * 3 + 1] = 1.0;
  const Tensor modes({2, 2, 3}, pin);
  for (int t = 0; t < 200; ++t) {
    InterfaceSignals sig = split_interface(random_xi(cb, 2, rng), cb);
    const MuStepResult rc = memory_step(sig, sc, cb);
    sig.read_modes = modes;
    const MuStepResult rd = memory_step(sig, sd, dnc);
    REQUIRE(testutil::max_abs_diff(rc.mu.data(), rd.mu.data()) <= 1e-12);
    REQUIRE(testutil::max_abs_diff(rc.state.memory.data(), rd.state.memory.data()) <= 1e-12);
    REQUIRE(testutil::max_abs_diff(rc.state.read_weightings.data(), rd.state.read_weightings.data()) <= 1e-12);
    sc = rc.state;
    sd = rd.state;
  }
}

TEST_CASE("mu_step gradients over several steps match finite differences") {
  for (MemoryVariant v : {MemoryVariant::dnc, MemoryVariant::cbmu}) {
    const MuConfig c = tiny(v, 4, 3, 2);
    Rng rng(10);
    MuParams p = init_mu_params(c, 5, rng);
    for (double& g : p.ln_gain.mutable_data()) g = rng.uniform(0.5, 1.5);
    for (double& b : p.ln_bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
    std::vector<Tensor> hs;
    for (int t = 0; t < 5; ++t) hs.push_back(random_tensor({2, 5}, rng, -1, 1, false));
    const Tensor wts = random_tensor({2, 6}, rng, -1, 1, false);
    ParameterList named;
    p.append_to(named, "mu");
    std::vector<Tensor> params;
    for (auto& n : named) params.push_back(n.tensor);
    auto loss = [&] {
      MemoryState s = initial_memory_state(c, 2);
      Tensor acc = Tensor::scalar(0.0);
      for (const Tensor& h : hs) {
        const MuStepResult r = mu_step(h, s, p, c);
        s = r.state;
        acc = add(acc, sum(mul(r.mu, wts)));
      }
      return acc;
    };
    const double err = finite_diff_check(loss, params, 1e-5, 1e-6).max_rel_error;
    CAPTURE(err);
    CHECK(err < 1e-5);
  }
}

}  // TEST_SUITE
