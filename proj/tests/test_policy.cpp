#include <cmath>
#include <filesystem>
#include <fstream>

#include "support.hpp"
#include "stvla/policy.hpp"
#include "stvla/sim.hpp"

using namespace stvla;
using stvla::test::bitwise_equal;
using stvla::test::check_grads;
using stvla::test::uniform_tensor;

namespace {

PolicyConfig tiny_config() {
  PolicyConfig c;
  c.d_model = 8;
  c.blocks = 2;
  c.n_visual = 4;
  c.max_lang = 6;
  c.vocab_size = 10;
  return c;
}

void zero(Linear& l) {
  for (auto& v : l.weight().mutable_data()) v = 0.0;
  if (l.has_bias())
    for (auto& v : l.bias().mutable_data()) v = 0.0;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("stvla_test_" + name)).string();
}

}  // namespace

TEST_CASE("tokenize looks words up one by one") {
  const InstructionVocab v = benchmark_vocab();
  const auto ids = v.tokenize("pick the red cube");
  REQUIRE(ids.size() == 4);
  CHECK(ids[0] == v.id("pick"));
  CHECK(ids[1] == v.id("the"));
  CHECK(ids[2] == v.id("red"));
  CHECK(ids[3] == v.id("cube"));
  CHECK(v.tokenize("").empty());
  CHECK(v.tokenize("  Pick   THE cube ") == v.tokenize("pick the cube"));
  CHECK_THROWS_WITH(v.tokenize("pick the purple cube"), doctest::Contains("purple"));
}

TEST_CASE("vocabulary is a deterministic bijection") {
  const InstructionVocab a = benchmark_vocab(), b = benchmark_vocab();
  CHECK(a.hash() == b.hash());
  CHECK(a.size() == a.words().size() + 2);
  for (const auto& w : a.words()) {
    const std::size_t id = a.id(w);
    CHECK(id >= 2);
    CHECK(a.detokenize({id}) == w);
  }
  CHECK(InstructionVocab({"b", "a", "b"}).words() == std::vector<std::string>{"a", "b"});
  CHECK_THROWS(a.detokenize({a.size()}));
}

TEST_CASE("detokenize inverts tokenize for every template instruction") {
  const InstructionVocab v = benchmark_vocab();
  for (const auto& s : benchmark_subtasks()) {
    INFO(s.instruction);
    CHECK(v.detokenize(v.tokenize(s.instruction)) == normalize_instruction(s.instruction));
  }
}

TEST_CASE("project_tokens closed forms") {
  Rng rng(1);
  PolicyNet net(tiny_config(), rng);
  const Tensor fv = uniform_tensor({4, 8}, rng, -1, 1, false);
  const ProprioState prop{{0.1, -0.1, 0.2}, {0.0, 0.1, 0.0}, 1.0};
  const Tensor toks = net.project_tokens(fv, prop);
  REQUIRE(toks.shape() == Shape{5, 8});

  auto mlp = [](Linear& in, Linear& out, std::span<const double> x) {
    std::vector<double> h(in.out_features()), y(out.out_features());
    for (std::size_t j = 0; j < h.size(); ++j) {
      double s = in.bias()[j];
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * in.weight().at(i, j);
      h[j] = 0.5 * s * (1.0 + std::tanh(0.7978845608028654 * (s + 0.044715 * s * s * s)));
    }
    for (std::size_t j = 0; j < y.size(); ++j) {
      double s = out.bias()[j];
      for (std::size_t i = 0; i < h.size(); ++i) s += h[i] * out.weight().at(i, j);
      y[j] = s;
    }
    return y;
  };
  for (std::size_t r = 0; r < 4; ++r) {
    const auto y = mlp(net.visual_in(), net.visual_out(), fv.data().subspan(r * 8, 8));
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(toks.at(r, c) - y[c]) <= 1e-12);
  }
  const auto pa = prop.to_array();
  const auto yp = mlp(net.proprio_in(), net.proprio_out(), pa);
  for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(toks.at(4, c) - yp[c]) <= 1e-12);

  for (Linear* l : {&net.visual_in(), &net.visual_out(), &net.proprio_in(), &net.proprio_out()}) zero(*l);
  const Tensor zeroed = net.project_tokens(fv, prop);
  for (double v : zeroed.data()) CHECK(v == 0.0);
  CHECK_THROWS(net.project_tokens(Tensor::zeros({4, 7}), prop));
  CHECK_THROWS(net.project_tokens(fv, Tensor::zeros({1, 6})));
}

TEST_CASE("zeroed head output sits at the squasher fixed points") {
  Rng rng(2);
  PolicyNet net(tiny_config(), rng);
  zero(net.head_out());
  const auto a = net.act(uniform_tensor({5, 8}, rng, -1, 1, false), {2, 3, 4});
  CHECK(a.delta_x == Vec3{0, 0, 0});
  CHECK(a.delta_theta == Vec3{0, 0, 0});
  CHECK(a.grip == 0.5);
  CHECK(a.delta_t == std::log(2.0) + 0.05);
}

TEST_CASE("output ranges hold for any input") {
  Rng rng(3);
  PolicyNet net(tiny_config(), rng);
  for (auto& v : net.head_out().weight().mutable_data()) v *= 200.0;
  for (int i = 0; i < 200; ++i) {
    const auto a = net.act(uniform_tensor({5, 8}, rng, -3, 3, false), {std::size_t(2 + i % 8)});
    CHECK(a.finite());
    CHECK(a.grip >= 0.0);
    CHECK(a.grip <= 1.0);
    CHECK(a.delta_t >= 0.05);
    CHECK(a.delta_t <= 1.0);
    CHECK(std::abs(a.delta_x.x) <= 0.4);
  }
}

TEST_CASE("forward validates inputs and reports blowups with the layer") {
  Rng rng(4);
  PolicyNet net(tiny_config(), rng);
  const Tensor toks = uniform_tensor({5, 8}, rng, -1, 1, false);
  CHECK_THROWS(net.forward(Tensor::zeros({5, 7}), {2}));
  CHECK_THROWS(net.forward(toks, {2, 2, 2, 2, 2, 2}));
  CHECK_THROWS(net.forward(toks, {10}));
  net.blocks()[1].wv.weight().mutable_data()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(net.forward(toks, {2}), numeric_blowup);
  CHECK_THROWS_WITH(net.forward(toks, {2}), doctest::Contains("block 2"));
}

TEST_CASE("LoRA with zero B is the base network, bitwise") {
  Rng rng(5), rng_b(5);
  PolicyNet base(tiny_config(), rng);
  PolicyNet adapted(tiny_config(), rng_b);
  Rng side(99);
  const Tensor toks = uniform_tensor({5, 8}, side, -1, 1, false);
  const std::size_t n = adapted.apply_lora(2, 4.0, side);
  CHECK(bitwise_equal(base.forward(toks, {2, 5, 7}).data(), adapted.forward(toks, {2, 5, 7}).data()));
  // Each block: q, k, v, o are d x d, the feed-forward maps d x 4d and 4d x d.
  const std::size_t d = 8, r = 2;
  CHECK(n == 2 * (4 * r * (d + d) + 2 * r * (d + 4 * d)));
  CHECK(adapted.transformer_lora_params().scalar_count() == n);
  CHECK_THROWS(adapted.apply_lora(0, 1.0, side));
  CHECK_THROWS(base.apply_lora(8, 1.0, side));
}

TEST_CASE("one LoRA gradient step moves A and B but not the base weights") {
  Rng rng(6);
  PolicyNet net(tiny_config(), rng);
  net.apply_lora(2, 4.0, rng);
  const Tensor toks = uniform_tensor({5, 8}, rng, -1, 1, false);
  const Tensor gt = Tensor({1, 8}, {0.05, -0.02, 0.01, 0, 0, 0.1, 1.0, 0.4});
  const ParamList lora = net.transformer_lora_params();
  const ParamList base = net.transformer_base_params();
  const auto base_before = ParamSnapshot::take(base);
  const auto lora_before = ParamSnapshot::take(lora);
  net.params().set_trainable(false);
  lora.set_trainable(true);
  for (int it = 0; it < 2; ++it) {  // B is zero at first, so A only moves on the second step
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(action_loss(net.forward(toks, {3, 4}), gt));
    }
    for (const auto& p : lora.items()) {
      Tensor t = p.tensor;
      if (!t.has_grad()) continue;
      auto v = t.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 0.1 * t.grad()[i];
      t.zero_grad();
    }
  }
  CHECK(ParamSnapshot::take(base).diff(base_before).empty());
  CHECK(ParamSnapshot::take(lora).diff(lora_before).size() == lora.size());
}

TEST_CASE("full policy gradient against central differences") {
  Rng rng(7);
  PolicyNet net(tiny_config(), rng);
  net.apply_lora(2, 4.0, rng);
  // Nonzero B so every adapter path carries gradient.
  for (const auto& p : net.transformer_lora_params().items()) {
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v += uniform(rng, -0.2, 0.2);
  }
  const Tensor toks = uniform_tensor({5, 8}, rng, -1, 1, false);
  const Tensor gt = uniform_tensor({1, 8}, rng, -0.3, 0.3, false);
  auto params = net.params().tensors();
  params.erase(std::remove_if(params.begin(), params.end(),
                              [&](const Tensor& t) {
                                // Alignment heads do not feed the action.
                                for (const auto& h : net.alignment_head_params().items())
                                  if (h.tensor.same_storage(t)) return true;
                                return false;
                              }),
               params.end());
  check_grads([&] { return action_loss(net.forward(toks, {2, 6, 3}), gt); }, params);
}

TEST_CASE("forward is deterministic per seed") {
  Rng a(8), b(8);
  const PolicyNet n1(tiny_config(), a), n2(tiny_config(), b);
  Rng side(1);
  const Tensor toks = uniform_tensor({5, 8}, side, -1, 1, false);
  CHECK(bitwise_equal(n1.forward(toks, {4, 2}).data(), n2.forward(toks, {4, 2}).data()));
}

TEST_CASE("action_loss closed forms and a scalar reference loop") {
  Rng rng(9);
  const Tensor p = uniform_tensor({3, 8}, rng, -1, 1, false);
  CHECK(action_loss(p, p).item() == 0.0);

  std::vector<double> shifted(p.data().begin(), p.data().end());
  for (std::size_t b = 0; b < 3; ++b) shifted[b * 8 + 7] += 0.5;
  CHECK(std::abs(action_loss(Tensor({3, 8}, shifted), p).item() - 0.5) <= 1e-15);

  const Tensor q = uniform_tensor({3, 8}, rng, -1, 1, false);
  const ActionLossWeights w{1.5, 0.5, 2.0, 3.0};
  double ref = 0.0;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 8; ++j) {
      const double wj = j < 3 ? w.dx : (j < 6 ? w.dtheta : (j == 6 ? w.grip : w.dt));
      ref += wj * std::abs(p.at(b, j) - q.at(b, j));
    }
  CHECK(std::abs(action_loss(p, q, w).item() - ref / 3.0) <= 1e-12);
  CHECK(action_loss(p, q).item() > 0.0);
  CHECK_THROWS(action_loss(p, Tensor::zeros({2, 8})));
}

TEST_CASE("action arrays round trip") {
  const SpatioTemporalAction a{{0.1, 0.2, 0.3}, {0.01, 0.02, 0.03}, 1.0, 0.35};
  const auto arr = a.to_array();
  CHECK(SpatioTemporalAction::from_array(arr) == a);
  CHECK_THROWS(SpatioTemporalAction::from_array(std::vector<double>(7, 0.0)));
}

TEST_CASE("checkpoints round trip and validate their header") {
  Rng rng(10), rng2(11);
  const PolicyNet net(tiny_config(), rng);
  PolicyNet other(tiny_config(), rng2);
  const CheckpointHeader h{1, 8, "tiny"};
  const std::string path = temp_path("policy.ckpt");
  save_checkpoint(path, h, net.params());
  load_checkpoint(path, h, other.params());
  CHECK(ParamSnapshot::take(other.params()).diff(ParamSnapshot::take(net.params())).empty());

  CHECK_THROWS(load_checkpoint(path, CheckpointHeader{1, 8, "other"}, other.params()));
  CHECK_THROWS(load_checkpoint(path, CheckpointHeader{1, 16, "tiny"}, other.params()));
  PolicyConfig wide = tiny_config();
  wide.ffn_mult = 2;
  Rng rng3(1);
  const PolicyNet mismatched(wide, rng3);
  CHECK_THROWS(load_checkpoint(path, h, mismatched.params()));

  // Truncated file.
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  CHECK_THROWS(load_checkpoint(path, h, other.params()));
  std::filesystem::remove(path);
}
