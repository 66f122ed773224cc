#include <cmath>
#include <numbers>

#include "support.hpp"
#include "stvla/st_embed.hpp"

using namespace stvla;
using stvla::test::check_grads;
using stvla::test::uniform_tensor;

namespace {

EmbedConfig small_config() {
  EmbedConfig c;
  c.fourier_dim = 8;
  c.embed_dim = 6;
  c.model_dim = 5;
  return c;
}

double sq_norm(const Tensor& row) {
  double s = 0.0;
  for (double v : row.data()) s += v * v;
  return s;
}

}  // namespace

TEST_CASE("psi at zero is the cos/sin closed form") {
  Rng rng(1);
  const FourierEncoder enc(3, 32, 1.0, rng);
  const Tensor y = enc.encode(Tensor::zeros({1, 3}));
  REQUIRE(y.numel() == 32);
  for (std::size_t i = 0; i < 16; ++i) CHECK(y[i] == 1.0 / std::sqrt(32.0));
  for (std::size_t i = 16; i < 32; ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("psi two-dimensional closed form") {
  Rng rng(1);
  FourierEncoder enc(1, 2, 1.0, rng);
  enc.w_r().mutable_data()[0] = 1.0;
  const Tensor y = enc.encode(Tensor({1, 1}, {std::numbers::pi / 2}));
  CHECK(std::abs(y[0]) <= 1e-12);
  CHECK(std::abs(y[1] - 1.0 / std::sqrt(2.0)) <= 1e-12);
}

TEST_CASE("psi has squared norm one half") {
  Rng rng(17);
  const FourierEncoder pos(3, 32, 1.0, rng), time(1, 32, 0.25, rng);
  for (int i = 0; i < 1000; ++i) {
    CHECK(std::abs(sq_norm(pos.encode(uniform_tensor({1, 3}, rng, -5, 5, false))) - 0.5) <= 1e-14);
    CHECK(std::abs(sq_norm(time.encode(uniform_tensor({1, 1}, rng, 0, 2, false))) - 0.5) <= 1e-14);
  }
}

TEST_CASE("psi is periodic when W_r delta is a multiple of 2 pi") {
  Rng rng(3);
  FourierEncoder enc(1, 6, 1.0, rng);
  auto w = enc.w_r().mutable_data();
  w[0] = 1.0, w[1] = 2.0, w[2] = -3.0;
  const double x = 0.37;
  const Tensor a = enc.encode(Tensor({1, 1}, {x}));
  const Tensor b = enc.encode(Tensor({1, 1}, {x + 2 * std::numbers::pi}));
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-9);
}

TEST_CASE("encoders validate their inputs") {
  Rng rng(3);
  CHECK_THROWS(FourierEncoder(3, 7, 1.0, rng));
  const FourierEncoder enc(3, 8, 1.0, rng);
  CHECK_THROWS(enc.encode(Tensor::zeros({1, 2})));
  CHECK_THROWS(enc.encode(Tensor({1, 3}, {0.0, NAN, 0.0})));
  SpatioTemporalEmbedder emb(small_config(), rng);
  CHECK_THROWS(emb.match_dim(Tensor::zeros({2, 5})));
  CHECK_THROWS(emb.normalize_times({-0.1}));
}

TEST_CASE("embed_4d equals the step-by-step composition") {
  Rng rng(5);
  SpatioTemporalEmbedder emb(small_config(), rng);
  const WorldPoint p{0.12, -0.05, 0.31};
  const double t = 2.5;
  const Tensor out = emb.embed_4d(p, t);

  const auto& c = emb.config();
  const double pn[3] = {(p.x - c.workspace_center.x) / c.workspace_half_extent.x,
                        (p.y - c.workspace_center.y) / c.workspace_half_extent.y,
                        (p.z - c.workspace_center.z) / c.workspace_half_extent.z};
  const double tn = t / c.horizon;
  const std::size_t d = c.fourier_dim, h = d / 2;
  std::vector<double> psi(2 * d);
  const Tensor wr_p = emb.pos_encoder().w_r(), wr_t = emb.time_encoder().w_r();
  for (std::size_t i = 0; i < h; ++i) {
    const double a = pn[0] * wr_p.at(i, 0) + pn[1] * wr_p.at(i, 1) + pn[2] * wr_p.at(i, 2);
    const double b = tn * wr_t.at(i, 0);
    psi[i] = std::cos(a) / std::sqrt(double(d));
    psi[h + i] = std::sin(a) / std::sqrt(double(d));
    psi[d + i] = std::cos(b) / std::sqrt(double(d));
    psi[d + h + i] = std::sin(b) / std::sqrt(double(d));
  }
  const Tensor w = emb.w_p();
  for (std::size_t j = 0; j < c.embed_dim; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < 2 * d; ++i) s += psi[i] * w.at(i, j);
    CHECK(std::abs(out[j] - s) <= 1e-12);
  }
}

TEST_CASE("embed_4d is linear in w_p and zero when w_p is zero") {
  Rng rng(6);
  SpatioTemporalEmbedder emb(small_config(), rng);
  const WorldPoint p{0.1, 0.2, 0.05};
  const Tensor base = emb.embed_4d(p, 1.0);
  for (auto& v : emb.w_p().mutable_data()) v *= 2.0;
  const Tensor doubled = emb.embed_4d(p, 1.0);
  for (std::size_t i = 0; i < base.numel(); ++i) CHECK(doubled[i] == 2.0 * base[i]);
  for (auto& v : emb.w_p().mutable_data()) v = 0.0;
  const Tensor zeroed = emb.embed_4d(p, 3.0);
  for (double v : zeroed.data()) CHECK(v == 0.0);
}

TEST_CASE("same position at different times gives different embeddings") {
  Rng rng(7);
  const SpatioTemporalEmbedder emb(small_config(), rng);
  const WorldPoint p{0.0, 0.1, 0.1};
  const Tensor a = emb.embed_4d(p, 0.5), b = emb.embed_4d(p, 4.0);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  CHECK(diff > 1e-3);
}

TEST_CASE("match_dim closed forms") {
  Rng rng(8);
  SpatioTemporalEmbedder emb(small_config(), rng);
  const Tensor f = uniform_tensor({1, 6}, rng, -1, 1, false);
  const Tensor out = emb.match_dim(f);
  REQUIRE(out.shape() == Shape{1, 5});
  const Tensor w1 = emb.mlp_in().weight(), b1 = emb.mlp_in().bias();
  const Tensor w2 = emb.mlp_out().weight(), b2 = emb.mlp_out().bias();
  std::vector<double> hidden(5);
  for (std::size_t j = 0; j < 5; ++j) {
    double s = b1[j];
    for (std::size_t i = 0; i < 6; ++i) s += f[i] * w1.at(i, j);
    hidden[j] = 0.5 * s * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (s + 0.044715 * s * s * s)));
  }
  for (std::size_t j = 0; j < 5; ++j) {
    double s = b2[j];
    for (std::size_t i = 0; i < 5; ++i) s += hidden[i] * w2.at(i, j);
    CHECK(std::abs(out[j] - s) <= 1e-12);
  }
  for (auto* l : {&emb.mlp_in(), &emb.mlp_out()}) {
    for (auto& v : l->weight().mutable_data()) v = 0.0;
    for (auto& v : l->bias().mutable_data()) v = 0.0;
  }
  const Tensor zeroed = emb.match_dim(f);
  for (double v : zeroed.data()) CHECK(v == 0.0);
}

TEST_CASE("embedding gradients: finite differences and every parameter nonzero") {
  Rng rng(9);
  SpatioTemporalEmbedder emb(small_config(), rng);
  const Tensor pos = uniform_tensor({3, 3}, rng, -1, 1, false), time = uniform_tensor({3, 1}, rng, 0, 1, false);
  const Tensor weights = uniform_tensor({3, 5}, rng, -1, 1, false);
  auto loss = [&] { return sum(mul(emb.match_dim(emb.embed(pos, time)), weights)); };
  check_grads(loss, emb.params().tensors());

  const auto params = emb.params();
  params.set_trainable(true);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
  }
  for (const auto& p : params.items()) {
    INFO(p.name);
    REQUIRE(p.tensor.has_grad());
    double m = 0.0;
    for (double g : p.tensor.grad()) m = std::max(m, std::abs(g));
    CHECK(m > 0.0);
  }
  // Gradient with respect to the input positions as well.
  const Tensor x = uniform_tensor({2, 3}, rng, -1, 1);
  check_grads([&] { return sum(emb.pos_encoder().encode(x)); }, {x});
}
